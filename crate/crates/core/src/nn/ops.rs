use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};

use super::Scope;
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// `x · Wᵀ + b` over the last dimension; `w` is `(out, in)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d_in = *dims.last().expect("rank >= 1");
    let rows = x.elem_count() / d_in.max(1);
    let d_out = w.dim(0)?;
    let y = x.reshape((rows, d_in))?.matmul(&w.t()?)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = d_out;
    Ok(y.reshape(out_dims)?)
}

/// Linear layer addressed by scope: `{name}.weight`, optional `{name}.bias`.
pub fn linear_at(s: &Scope, name: &str, x: &Tensor) -> Result<Tensor> {
    let s = s.pp(name);
    linear(x, s.get("weight")?, s.get_opt("bias"))
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(xn.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

pub fn layer_norm_at(s: &Scope, name: &str, x: &Tensor) -> Result<Tensor> {
    let s = s.pp(name);
    layer_norm(x, s.get("weight")?, s.get("bias")?)
}

/// Fused max-shifted softmax over contiguous rows, with the analytic backward
/// `s ⊙ (g − Σ g ⊙ s)`.
struct SoftmaxLast;

macro_rules! softmax_rows {
    ($src:expr, $dim:expr, $t:ty) => {{
        let mut out: Vec<$t> = $src.to_vec();
        for row in out.chunks_mut($dim) {
            let m = row.iter().cloned().fold(<$t>::NEG_INFINITY, <$t>::max);
            let mut z: $t = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            let inv = 1.0 / z;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        out
    }};
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = layout.dims().last().copied().unwrap_or(1).max(1);
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax-last needs a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows!(&v[start..end], dim, f32)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows!(&v[start..end], dim, f64)),
            _ => candle_core::bail!("softmax-last supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let sg = (grad * res)?;
        let sum = sg.sum_keepdim(D::Minus1)?;
        Ok(Some((sg - res.broadcast_mul(&sum)?)?))
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    if !matches!(x.dtype(), DType::F32 | DType::F64) || !x.device().is_cpu() {
        let m = x.max_keepdim(D::Minus1)?.detach();
        let e = x.broadcast_sub(&m)?.exp()?;
        return Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?);
    }
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let xs = x.broadcast_sub(&m)?;
    let lse = xs.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(xs.broadcast_sub(&lse)?)
}

/// Row-wise L2 normalization with `eps` guarding zero rows.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + eps * eps)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Two-layer GELU MLP with `fc1` / `fc2` sub-scopes.
pub fn mlp(s: &Scope, x: &Tensor) -> Result<Tensor> {
    let h = linear_at(s, "fc1", x)?.gelu()?;
    linear_at(s, "fc2", &h)
}

/// Splits `(n, l, heads*dh)` into `(n*heads, l, dh)`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, l, c) = x.dims3()?;
    let dh = c / heads;
    Ok(x
        .reshape((n, l, heads, dh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n * heads, l, dh))?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (nh, l, dh) = x.dims3()?;
    let n = nh / heads;
    Ok(x
        .reshape((n, heads, l, dh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, l, heads * dh))?)
}

/// Scaled dot-product attention on `(n*heads, l, dh)` inputs. Returns the
/// attended values and the attention probabilities `(n*heads, lq, lk)`.
pub fn sdpa(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let scores = (q.matmul(&k.t()?)? * scale)?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(m)?,
        None => scores,
    };
    let p = softmax_last(&scores)?;
    let out = p.matmul(v)?;
    Ok((out, p))
}

/// Sinusoidal encoding of scalar positions, shape `(len(positions), dim)`.
pub fn sinusoidal(positions: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f64; positions.len() * dim];
    for (row, &p) in positions.iter().enumerate() {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[row * dim + 2 * i] = (p * freq).sin();
            data[row * dim + 2 * i + 1] = (p * freq).cos();
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), device)?.to_dtype(dtype)?)
}

/// Converts host `f64` data to a tensor of the requested dtype.
pub fn tensor_f64(data: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one_and_match_log_softmax() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]], &Device::Cpu).unwrap();
        let p = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        let lp = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for (pr, lr) in p.iter().zip(&lp) {
            assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in pr.iter().zip(lr) {
                assert!((a.ln() - b).abs() < 1e-12);
            }
        }
        let e: f64 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((lp[0][2] - (3.0 - e)).abs() < 1e-12);
    }

    #[test]
    fn linear_matches_manual_product() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[[1.0f64, 2.0]], [[3.0, 4.0]]], &dev).unwrap();
        let w = Tensor::new(&[[1.0f64, 0.5], [-1.0, 2.0], [0.0, 1.0]], &dev).unwrap();
        let b = Tensor::new(&[0.1f64, 0.2, 0.3], &dev).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.dims(), &[2, 1, 3]);
        let y = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let expect = [2.1, 3.2, 2.3, 5.1, 5.2, 4.3];
        for (a, b) in y.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &dev).unwrap();
        let g = Tensor::ones(4, DType::F64, &dev).unwrap();
        let b = Tensor::zeros(4, DType::F64, &dev).unwrap();
        let y = layer_norm(&x, &g, &b).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + LN_EPS)).abs() < 1e-9);
    }
}
