use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Sinkhorn-Knopp scaling of `exp(M / eps)` towards row sums `1/n` and
/// column sums `1/p`. `m` is row-major `(n, p)`; each iteration normalizes
/// rows then columns.
pub fn sinkhorn_assign(m: &[f64], n: usize, p: usize, eps: f64, iters: usize) -> Result<Vec<f64>> {
    if m.len() != n * p || n == 0 || p == 0 {
        return Err(Error::ShapeMismatch { name: "sinkhorn input".into(), expected: vec![n, p], found: vec![m.len()] });
    }
    if !(eps > 0.0) || iters == 0 {
        return Err(Error::InvalidArgument(format!("sinkhorn needs eps > 0 and iters ≥ 1 (got {eps}, {iters})")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinkhorn input".into()));
    }
    // Constant scores are a fixed point of the scaling: the plan is uniform.
    // Returning it directly avoids last-ulp drift from summing n·p copies.
    if m.iter().all(|&v| v == m[0]) {
        return Ok(vec![1.0 / (n * p) as f64; n * p]);
    }
    let mut s: Vec<f64> = Vec::with_capacity(n * p);
    for row in m.chunks(p) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        s.extend(row.iter().map(|v| ((v - mx) / eps).exp()));
    }
    let (nf, pf) = (n as f64, p as f64);
    let mut col = vec![0.0; p];
    for _ in 0..iters {
        for row in s.chunks_mut(p) {
            let z = row.iter().sum::<f64>() * nf;
            row.iter_mut().for_each(|v| *v /= z);
        }
        col.iter_mut().for_each(|c| *c = 0.0);
        for row in s.chunks(p) {
            for (c, v) in col.iter_mut().zip(row) {
                *c += v;
            }
        }
        for row in s.chunks_mut(p) {
            for (v, c) in row.iter_mut().zip(&col) {
                *v /= c * pf;
            }
        }
    }
    Ok(s)
}

/// Differentiable Sinkhorn on a batch of `(b, n, p)` score matrices with the
/// same schedule as [`sinkhorn_assign`].
pub fn sinkhorn_tensor(m: &Tensor, eps: f64, iters: usize) -> Result<Tensor> {
    let (_, n, p) = m.dims3()?;
    let mx = m.max_keepdim(D::Minus1)?.detach();
    let mut s = (m.broadcast_sub(&mx)? / eps)?.exp()?;
    for _ in 0..iters {
        s = s.broadcast_div(&(s.sum_keepdim(D::Minus1)? * n as f64)?)?;
        s = s.broadcast_div(&(s.sum_keepdim(D::Minus2)? * p as f64)?)?;
    }
    Ok(s)
}
