use candle_core::{DType, Device, Tensor};

use super::*;
use crate::nn::{ParamSpec, Weights};

fn weights(d: usize, cfg: &FusionConfig, seed: u64) -> Weights {
    let mut b = SpecBuilder::new();
    fusion_specs(&mut b, d, cfg);
    gcpl_specs(&mut b, d);
    Weights::from_specs(&b.finish(), seed, DType::F64, &Device::Cpu).unwrap()
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    let spec = ParamSpec { name: "x".into(), shape: shape.to_vec(), init: Init::Uniform(1.0), decay: false };
    Tensor::from_vec(spec.init_values(seed), shape, &Device::Cpu).unwrap()
}

fn v(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn series(m: Modality, b: usize, t: usize, hw: usize, d: usize, seed: u64) -> ModalitySeries {
    ModalitySeries {
        modality: m,
        data: rand(&[b, t, hw, hw, d], seed),
        days: (0..b).map(|i| (0..t).map(|k| (i * 31 + k * 17) as i32).collect()).collect(),
    }
}

#[test]
fn full_sequence_shape() {
    let cfg = FusionConfig { head_dim: 8, ..Default::default() };
    let w = weights(16, &cfg, 1);
    let s = [series(Modality::Hr, 2, 1, 4, 16, 1), series(Modality::Ms, 2, 10, 4, 16, 2), series(Modality::Sar, 2, 5, 4, 16, 3)];
    let f = fuse(&w.scope("fusion"), &s, &cfg).unwrap();
    assert_eq!(f.lengths.iter().sum::<usize>(), 16);
    assert_eq!(f.data.dims(), &[2, 4, 4, 16]);
}

#[test]
fn depth_zero_single_frame_is_identity_up_to_modality_embedding() {
    let cfg = FusionConfig { depth: 0, head_dim: 8, mlp_ratio: 2 };
    let mut w = weights(8, &cfg, 2);
    w.insert("fusion.modality_embed", Tensor::zeros((3, 8), DType::F64, &Device::Cpu).unwrap());
    let s = series(Modality::Ms, 1, 1, 3, 8, 5);
    let f = fuse(&w.scope("fusion"), std::slice::from_ref(&s), &cfg).unwrap();
    assert_eq!(v(&f.data), v(&s.data));
}

#[test]
fn depth_zero_is_frame_permutation_invariant() {
    let cfg = FusionConfig { depth: 0, head_dim: 8, mlp_ratio: 2 };
    let w = weights(8, &cfg, 3);
    let s = series(Modality::Ms, 1, 4, 2, 8, 6);
    let perm = [2usize, 0, 3, 1];
    let idx = Tensor::new(perm.iter().map(|&i| i as u32).collect::<Vec<_>>(), &Device::Cpu).unwrap();
    let permuted = ModalitySeries {
        modality: Modality::Ms,
        data: s.data.index_select(&idx, 1).unwrap(),
        days: vec![perm.iter().map(|&i| s.days[0][i]).collect()],
    };
    let a = v(&fuse(&w.scope("fusion"), &[s], &cfg).unwrap().data);
    let b = v(&fuse(&w.scope("fusion"), &[permuted], &cfg).unwrap().data);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn fuse_rejects_mismatched_grids_and_order() {
    let cfg = FusionConfig { head_dim: 8, ..Default::default() };
    let w = weights(8, &cfg, 4);
    let a = series(Modality::Hr, 1, 1, 4, 8, 1);
    let b = series(Modality::Ms, 1, 2, 2, 8, 2);
    assert!(fuse(&w.scope("fusion"), &[a.clone(), b], &cfg).is_err());
    let c = series(Modality::Ms, 1, 2, 4, 8, 2);
    assert!(fuse(&w.scope("fusion"), &[c, a], &cfg).is_err());
    assert!(fuse(&w.scope("fusion"), &[], &cfg).is_err());
}

#[test]
fn region_index_corners() {
    assert_eq!(region_index(-180.0, -90.0, 64, 64).unwrap(), 0);
    assert_eq!(region_index(0.0, 0.0, 64, 64).unwrap(), 32 * 64 + 32);
    assert_eq!(region_index(179.99, 89.99, 64, 64).unwrap(), 4095);
    assert!(region_index(180.0, 0.0, 64, 64).is_err());
    assert!(region_index(0.0, -90.5, 64, 64).is_err());
}

fn bank(np: usize, d: usize, m: f64) -> PrototypeBank {
    let cfg = GcplConfig { rows: 2, cols: 2, n_prototypes: np, momentum: m, ..Default::default() };
    PrototypeBank::new(&cfg, d, 7)
}

#[test]
fn gcpl_update_scalar_ema() {
    // d = 1, one prototype at 1.0, features whose SᵀF is zero.
    let mut b = bank(1, 1, 0.9);
    b.data.iter_mut().for_each(|v| *v = 1.0);
    gcpl_update(&[0.5, -0.5], 3, &mut b, 0.05, 3).unwrap();
    assert!((b.region(3)[0] as f64 - 0.9).abs() < 1e-7);
    assert_eq!(b.region(0)[0], 1.0);
}

#[test]
fn gcpl_update_frozen_at_unit_momentum_and_local_to_region() {
    let mut b = bank(3, 4, 1.0);
    let before = b.clone();
    gcpl_update(&[0.3, -0.1, 0.2, 0.9, 1.0, 0.0, 0.0, 0.5], 1, &mut b, 0.05, 3).unwrap();
    assert_eq!(b, before);
    let mut b = bank(3, 4, 0.5);
    let before = b.clone();
    gcpl_update(&[0.3, -0.1, 0.2, 0.9], 2, &mut b, 0.05, 3).unwrap();
    for r in 0..4 {
        if r == 2 {
            assert_ne!(b.region(r), before.region(r));
        } else {
            assert_eq!(b.region(r), before.region(r));
        }
    }
}

#[test]
fn gcpl_update_matches_explicit_product() {
    let mut b = bank(2, 2, 0.0);
    let p = [1.0f32, 0.0, 0.0, 1.0];
    b.data[..4].copy_from_slice(&p);
    let f = [2.0, 0.5, -0.2, 1.5];
    let s = gcpl_update(&f, 0, &mut b, 0.5, 3).unwrap();
    // Oracle: cosine matrix, then three row/column scalings by hand.
    let cos = |a: [f64; 2], q: [f64; 2]| (a[0] * q[0] + a[1] * q[1]) / ((a[0] * a[0] + a[1] * a[1]).sqrt() * (q[0] * q[0] + q[1] * q[1]).sqrt());
    let rows = [[2.0, 0.5], [-0.2, 1.5]];
    let protos = [[1.0, 0.0], [0.0, 1.0]];
    let mut k = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            k[i][j] = (cos(rows[i], protos[j]) / 0.5).exp();
        }
    }
    for _ in 0..3 {
        for row in k.iter_mut() {
            let z: f64 = row.iter().sum::<f64>() * 2.0;
            row.iter_mut().for_each(|x| *x /= z);
        }
        for j in 0..2 {
            let z = (k[0][j] + k[1][j]) * 2.0;
            k[0][j] /= z;
            k[1][j] /= z;
        }
    }
    for i in 0..2 {
        for j in 0..2 {
            assert!((s[i * 2 + j] - k[i][j]).abs() < 1e-12);
        }
    }
    for j in 0..2 {
        for c in 0..2 {
            let want = k[0][j] * rows[0][c] + k[1][j] * rows[1][c];
            assert!((b.region(0)[j * 2 + c] as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn gcpl_augment_zero_projection_is_identity() {
    let cfg = FusionConfig::default();
    let w = weights(8, &cfg, 5);
    let x = rand(&[2, 3, 3, 8], 1);
    let protos = rand(&[2, 4, 8], 2);
    let (y, p) = gcpl_augment(&w.scope("gcpl"), &x, &protos).unwrap();
    assert_eq!(v(&y), v(&x));
    for row in v(&p).chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gcpl_augment_single_prototype_adds_its_value() {
    let cfg = FusionConfig::default();
    let mut w = weights(4, &cfg, 6);
    w.insert("gcpl.out.weight", rand(&[4, 4], 3));
    let x = rand(&[1, 2, 1, 4], 4);
    let protos = rand(&[1, 1, 4], 5);
    let (y, _) = gcpl_augment(&w.scope("gcpl"), &x, &protos).unwrap();
    let delta: Vec<f64> = v(&y).iter().zip(v(&x)).map(|(a, b)| a - b).collect();
    let value = crate::nn::ops::linear_at(&w.scope("gcpl"), "v", &protos).unwrap();
    let want = v(&crate::nn::ops::linear_at(&w.scope("gcpl"), "out", &value).unwrap());
    for loc in delta.chunks(4) {
        for (a, b) in loc.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gcpl_augment_matches_cross_attention_oracle() {
    let cfg = FusionConfig::default();
    let mut w = weights(2, &cfg, 8);
    w.insert("gcpl.out.weight", rand(&[2, 2], 9));
    let x = rand(&[1, 1, 2, 2], 10);
    let protos = rand(&[1, 2, 2], 11);
    let (y, _) = gcpl_augment(&w.scope("gcpl"), &x, &protos).unwrap();
    let lin = |name: &str, a: &[f64]| -> Vec<f64> {
        let wt = v(w.get(&format!("gcpl.{name}.weight")).unwrap());
        let bs = v(w.get(&format!("gcpl.{name}.bias")).unwrap());
        (0..2).map(|o| bs[o] + wt[o * 2] * a[0] + wt[o * 2 + 1] * a[1]).collect()
    };
    let xs = v(&x);
    let ps = v(&protos);
    let yv = v(&y);
    for loc in 0..2 {
        let xi = &xs[loc * 2..loc * 2 + 2];
        let q = lin("q", xi);
        let keys: Vec<Vec<f64>> = ps.chunks(2).map(|p| lin("k", p)).collect();
        let vals: Vec<Vec<f64>> = ps.chunks(2).map(|p| lin("v", p)).collect();
        let sc: Vec<f64> = keys.iter().map(|k| (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt()).collect();
        let z = sc.iter().map(|s| s.exp()).sum::<f64>();
        let att: Vec<f64> = (0..2).map(|c| (0..2).map(|j| sc[j].exp() / z * vals[j][c]).sum()).collect();
        let o = lin("out", &att);
        for c in 0..2 {
            assert!((yv[loc * 2 + c] - (xi[c] + o[c])).abs() < 1e-12);
        }
    }
}
