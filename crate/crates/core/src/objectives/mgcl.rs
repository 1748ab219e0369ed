use candle_core::{Tensor, D};

use super::head::{contrast, ContrastHeads, RowPairs};
use crate::error::{invalid, Result};
use crate::fusion::sinkhorn_tensor;
use crate::nn::ops::l2_normalize;

/// Rows for the pixel level of one view pair. Features are laid out as
/// `T` blocks of `n_s` (student) and `n_t` (teacher) rows; each frame pairs
/// the corresponded cells. Weights average over pairs and frames.
pub fn pixel_pairs(frames: usize, n_s: usize, n_t: usize, corr: &[(usize, usize)]) -> RowPairs {
    let mut rows = RowPairs::default();
    if corr.is_empty() {
        return rows;
    }
    let w = 1.0 / (corr.len() * frames) as f64;
    for t in 0..frames {
        for &(a, b) in corr {
            rows.push(t * n_s + a, t * n_t + b, w);
        }
    }
    rows
}

/// Rows for pooled or clustered features: `per_frame` rows in each of `frames` blocks,
/// row `i` of the student against row `i` of the teacher.
pub fn aligned_pairs(frames: usize, per_frame: usize) -> RowPairs {
    let mut rows = RowPairs::default();
    let w = 1.0 / (frames * per_frame) as f64;
    for r in 0..frames * per_frame {
        rows.push(r, r, w);
    }
    rows
}

fn flat(f: &Tensor) -> Result<Tensor> {
    let (t, n, d) = f.dims3()?;
    Ok(f.reshape((t * n, d))?)
}

/// Mean over corresponded cells and frames of `L_CL`. `f_s: (T, N_S, d)`,
/// `f_t: (T, N_T, d)`. An empty correspondence yields 0 and `true`.
pub fn loss_pixel(heads: &ContrastHeads, f_s: &Tensor, f_t: &Tensor, corr: &[(usize, usize)]) -> Result<(Tensor, bool)> {
    let (t, n_s, _) = f_s.dims3()?;
    let n_t = f_t.dim(1)?;
    let pairs = pixel_pairs(t, n_s, n_t, corr);
    match contrast(heads, &flat(f_s)?, &flat(f_t)?, &pairs)? {
        Some(out) => Ok((out.loss, false)),
        None => Ok((Tensor::zeros((), f_s.dtype(), f_s.device())?, true)),
    }
}

/// Spatial mean of `(G, N, d)` grids.
pub fn pool(f: &Tensor) -> Result<Tensor> {
    Ok(f.mean(D::Minus2)?)
}

pub fn loss_image(heads: &ContrastHeads, f_s: &Tensor, f_t: &Tensor) -> Result<Tensor> {
    let t = f_s.dim(0)?;
    let out = contrast(heads, &pool(f_s)?, &pool(f_t)?, &aligned_pairs(t, 1))?;
    Ok(out.expect("at least one frame").loss)
}

/// Soft clusters of `(G, N_S, d)` pixel features against `(N_C, d)` cluster
/// embeddings. Cosine scores go through Sinkhorn; each center is the
/// column-normalized `Sᵀ F`. Returns centers `(G, N_C, d)` and `S`.
pub fn cluster_objects(f: &Tensor, embed: &Tensor, eps: f64, iters: usize) -> Result<(Tensor, Tensor)> {
    let (g, n, d) = f.dims3()?;
    let n_c = embed.dim(0)?;
    if n_c > n {
        return Err(invalid!("{n_c} clusters need at least as many pixels, got {n}"));
    }
    let fn_ = l2_normalize(f, 1e-8)?;
    let en = l2_normalize(embed, 1e-8)?;
    let scores = fn_.matmul(&en.t()?.unsqueeze(0)?.broadcast_as((g, d, n_c))?.contiguous()?)?;
    let s = sinkhorn_tensor(&scores, eps, iters)?;
    let norm = s.broadcast_div(&s.sum_keepdim(D::Minus2)?)?;
    let centers = norm.t()?.matmul(f)?;
    Ok((centers, s))
}

/// Object-level `L_CL` averaged over matched centers and frames; `None` when
/// the grids are too small to cluster.
#[allow(clippy::too_many_arguments)]
pub fn loss_object(
    heads: &ContrastHeads,
    f_s: &Tensor,
    f_t: &Tensor,
    embed_s: &Tensor,
    embed_t: &Tensor,
    eps: f64,
    iters: usize,
) -> Result<Option<Tensor>> {
    let (t, n_s, _) = f_s.dims3()?;
    let n_c = embed_s.dim(0)?;
    if n_s < n_c || f_t.dim(1)? < n_c {
        return Ok(None);
    }
    let (c_s, _) = cluster_objects(f_s, embed_s, eps, iters)?;
    let (c_t, _) = cluster_objects(&f_t.detach(), &embed_t.detach(), eps, iters)?;
    let out = contrast(heads, &flat(&c_s)?, &flat(&c_t)?, &aligned_pairs(t, n_c))?;
    Ok(out.map(|o| o.loss))
}

/// Heads and clustering settings for a pixel/object/image triple.
pub struct FgclHeads<'a> {
    pub pixel: ContrastHeads<'a>,
    pub object: ContrastHeads<'a>,
    pub image: ContrastHeads<'a>,
    pub embed_s: Tensor,
    pub embed_t: Tensor,
    pub eps: f64,
    pub iters: usize,
}

/// Pixel + object + image contrast of one feature pair.
pub fn loss_fgcl(h: &FgclHeads, f_s: &Tensor, f_t: &Tensor, corr: &[(usize, usize)]) -> Result<Tensor> {
    let (pix, _) = loss_pixel(&h.pixel, f_s, f_t, corr)?;
    let img = loss_image(&h.image, f_s, f_t)?;
    let mut total = (pix + img)?;
    if let Some(obj) = loss_object(&h.object, f_s, f_t, &h.embed_s, &h.embed_t, h.eps, h.iters)? {
        total = (total + obj)?;
    }
    Ok(total)
}

/// One modality's (or the fused) student/teacher pair with its correspondence.
pub struct FeaturePair<'a> {
    pub student: &'a Tensor,
    pub teacher: &'a Tensor,
    pub corr: &'a [(usize, usize)],
}

/// `Σ_i FGCL(F_i, F_i′) + FGCL(F_fus, F_fus′)`; absent modalities contribute 0.
pub fn loss_mgcl(h: &FgclHeads, modalities: &[FeaturePair], fused: &FeaturePair) -> Result<Tensor> {
    let mut total = loss_fgcl(h, fused.student, fused.teacher, fused.corr)?;
    for p in modalities {
        total = (total + loss_fgcl(h, p.student, p.teacher, p.corr)?)?;
    }
    Ok(total)
}
