use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sinkhorn::sinkhorn_assign;
use crate::error::{invalid, Error, Result};
use crate::nn::ops::{linear_at, softmax_last};
use crate::nn::{Init, Scope, SpecBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcplConfig {
    pub enabled: bool,
    /// Latitude bands of the equirectangular region grid.
    pub rows: usize,
    /// Longitude bands.
    pub cols: usize,
    pub n_prototypes: usize,
    pub momentum: f64,
    pub sinkhorn_eps: f64,
    pub sinkhorn_iters: usize,
}

impl Default for GcplConfig {
    fn default() -> Self {
        Self { enabled: true, rows: 64, cols: 64, n_prototypes: 8, momentum: 0.99, sinkhorn_eps: 0.05, sinkhorn_iters: 3 }
    }
}

impl GcplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.n_prototypes == 0 {
            return Err(invalid!("region grid and prototype count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(invalid!("prototype momentum {} outside [0, 1]", self.momentum));
        }
        if !(self.sinkhorn_eps > 0.0) || self.sinkhorn_iters == 0 {
            return Err(invalid!("sinkhorn needs eps > 0 and at least one iteration"));
        }
        Ok(())
    }
}

/// Region-specific prototype sets `(rows·cols, n_prototypes, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub rows: usize,
    pub cols: usize,
    pub n_prototypes: usize,
    pub dim: usize,
    pub momentum: f64,
    pub data: Vec<f32>,
}

impl PrototypeBank {
    pub fn new(cfg: &GcplConfig, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c1f_0b5e_ed00_d1e5);
        let n = cfg.rows * cfg.cols * cfg.n_prototypes * dim;
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { rows: cfg.rows, cols: cfg.cols, n_prototypes: cfg.n_prototypes, dim, momentum: cfg.momentum, data }
    }

    pub fn n_regions(&self) -> usize {
        self.rows * self.cols
    }

    fn span(&self, region: usize) -> std::ops::Range<usize> {
        let len = self.n_prototypes * self.dim;
        region * len..(region + 1) * len
    }

    pub fn region(&self, region: usize) -> &[f32] {
        &self.data[self.span(region)]
    }

    /// `(n_prototypes, dim)` tensor of one region.
    pub fn region_tensor(&self, region: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(self.region(region), (self.n_prototypes, self.dim), device)?.to_dtype(dtype)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.n_regions() * self.n_prototypes * self.dim {
            return Err(Error::ShapeMismatch {
                name: "gcpl/prototypes".into(),
                expected: vec![self.n_regions(), self.n_prototypes, self.dim],
                found: vec![self.data.len()],
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gcpl/prototypes".into()));
        }
        Ok(())
    }
}

/// Row-major cell of the equirectangular `rows × cols` grid holding `(lon, lat)`.
pub fn region_index(lon: f64, lat: f64, rows: usize, cols: usize) -> Result<usize> {
    if !(-180.0..180.0).contains(&lon) || !(-90.0..90.0).contains(&lat) {
        return Err(invalid!("coordinates ({lon}, {lat}) outside [-180, 180) × [-90, 90)"));
    }
    let r = (((lat + 90.0) / 180.0 * rows as f64).floor() as usize).min(rows - 1);
    let c = (((lon + 180.0) / 360.0 * cols as f64).floor() as usize).min(cols - 1);
    Ok(r * cols + c)
}

fn cosine_matrix(f: &[f64], p: &[f64], d: usize) -> Vec<f64> {
    const EPS: f64 = 1e-8;
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt().max(EPS);
    let pn: Vec<f64> = p.chunks(d).map(norm).collect();
    let mut m = Vec::with_capacity(f.len() / d * pn.len());
    for fr in f.chunks(d) {
        let fnorm = norm(fr);
        for (pr, pnorm) in p.chunks(d).zip(&pn) {
            m.push(fr.iter().zip(pr).map(|(a, b)| a * b).sum::<f64>() / (fnorm * pnorm));
        }
    }
    m
}

/// Assigns `(n_s, dim)` features to the region's prototypes and moves the
/// prototypes towards `SᵀF` by EMA. Only the addressed region changes.
/// Returns the assignment `S`.
pub fn gcpl_update(features: &[f64], region: usize, bank: &mut PrototypeBank, eps: f64, iters: usize) -> Result<Vec<f64>> {
    let d = bank.dim;
    if features.is_empty() || features.len() % d != 0 {
        return Err(Error::ShapeMismatch { name: "gcpl features".into(), expected: vec![d], found: vec![features.len()] });
    }
    if region >= bank.n_regions() {
        return Err(invalid!("region {region} outside bank of {}", bank.n_regions()));
    }
    let n_s = features.len() / d;
    let np = bank.n_prototypes;
    let protos: Vec<f64> = bank.region(region).iter().map(|&v| v as f64).collect();
    let s = sinkhorn_assign(&cosine_matrix(features, &protos, d), n_s, np, eps, iters)?;
    let m = bank.momentum;
    let span = bank.span(region);
    for k in 0..np {
        for c in 0..d {
            let target: f64 = (0..n_s).map(|i| s[i * np + k] * features[i * d + c]).sum();
            let slot = &mut bank.data[span.start + k * d + c];
            *slot = (m * *slot as f64 + (1.0 - m) * target) as f32;
        }
    }
    Ok(s)
}

pub(crate) fn gcpl_specs(b: &mut SpecBuilder, d: usize) {
    b.scoped("gcpl", |b| {
        b.linear("q", d, d, true);
        b.linear("k", d, d, true);
        b.linear("v", d, d, true);
        b.linear_init("out", d, d, true, Init::Zeros);
    });
}

/// Single-head cross-attention from every location of `(b, h, w, d)` over the
/// `(b, n_p, d)` prototypes of its sample's region, added residually.
pub fn gcpl_augment(s: &Scope, x: &Tensor, prototypes: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, h, w, d) = x.dims4()?;
    let flat = x.reshape((b, h * w, d))?;
    let q = linear_at(s, "q", &flat)?;
    let k = linear_at(s, "k", prototypes)?;
    let v = linear_at(s, "v", prototypes)?;
    let p = softmax_last(&(q.matmul(&k.t()?)? / (d as f64).sqrt())?)?;
    let out = linear_at(s, "out", &p.matmul(&v)?)?.reshape((b, h, w, d))?;
    Ok(((x + out)?, p))
}
