use candle_core::{Tensor, D};

use super::TokenGrid;
use crate::error::{invalid, Result};
use crate::modality::Modality;
use crate::nn::ops::linear;
use crate::nn::Scope;

pub const PATCH: usize = 4;

/// Flattens non-overlapping 4×4 patches of a `(b, H, W, C)` input in
/// `(row, col, channel)` order and embeds them with the modality's own linear layer.
pub fn tokenize(s: &Scope, x: &Tensor, modality: Modality) -> Result<TokenGrid> {
    let (b, h, w, c) = x.dims4()?;
    if c != modality.channels() {
        return Err(invalid!("{modality} input has {c} channels, expected {}", modality.channels()));
    }
    if h % PATCH != 0 || w % PATCH != 0 || h == 0 || w == 0 {
        return Err(invalid!("{modality} input {h}×{w} is not divisible into 4×4 patches"));
    }
    let (gh, gw) = (h / PATCH, w / PATCH);
    let patches = x
        .reshape((b, gh, PATCH, gw, PATCH, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, gh, gw, PATCH * PATCH * c))?;
    let t = s.pp(modality.name());
    let data = linear(&patches, t.get("weight")?, t.get_opt("bias"))?;
    Ok(TokenGrid { data, modality, stride: PATCH })
}

/// Non-merge projection: the mean of the four `d`-wide column blocks of the merge weight.
pub fn apm_unmerged_weight(w: &Tensor) -> Result<Tensor> {
    let (out, four_d) = w.dims2()?;
    Ok(w.reshape((out, 4, four_d / 4))?.mean(1)?)
}

/// Adaptive patch merging: `merge` concatenates each 2×2 block as
/// `(0,0), (1,0), (0,1), (1,1)` (row, col) and projects `4d → 2d`; otherwise
/// the grid is kept and projected `d → 2d` with the averaged weight.
pub fn apm(s: &Scope, g: &TokenGrid, merge: bool) -> Result<TokenGrid> {
    let (b, h, w, d) = g.data.dims4()?;
    let weight = s.get("weight")?;
    let bias = s.get_opt("bias");
    if merge {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid!("cannot merge an odd {h}×{w} grid"));
        }
        let cat = g
            .data
            .reshape((b, h / 2, 2, w / 2, 2, d))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * d))?;
        Ok(TokenGrid { data: linear(&cat, weight, bias)?, modality: g.modality, stride: g.stride * 2 })
    } else {
        let w2 = apm_unmerged_weight(weight)?;
        Ok(TokenGrid { data: linear(&g.data, &w2, bias)?, modality: g.modality, stride: g.stride })
    }
}

/// Bilinear resampling matrix `(out_h·out_w, in_h·in_w)` with align-corners
/// off; used to bring grids of a different size onto a common one.
pub fn resample_matrix(in_hw: (usize, usize), out_hw: (usize, usize)) -> Vec<f64> {
    let (ih, iw) = in_hw;
    let (oh, ow) = out_hw;
    let axis = |n_in: usize, n_out: usize, o: usize| -> [(usize, f64); 2] {
        let f = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let t = f - i0 as f64;
        [(i0, 1.0 - t), (i1, t)]
    };
    let mut m = vec![0.0; oh * ow * ih * iw];
    for oy in 0..oh {
        for ox in 0..ow {
            for (iy, wy) in axis(ih, oh, oy) {
                for (ix, wx) in axis(iw, ow, ox) {
                    m[(oy * ow + ox) * ih * iw + iy * iw + ix] += wy * wx;
                }
            }
        }
    }
    m
}

/// Resamples a `(b, h, w, d)` grid to `(b, oh, ow, d)`.
pub fn resample_grid(x: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    let (b, h, w, d) = x.dims4()?;
    if (h, w) == out_hw {
        return Ok(x.clone());
    }
    let m = resample_matrix((h, w), out_hw);
    let m = Tensor::from_vec(m, (out_hw.0 * out_hw.1, h * w), x.device())?.to_dtype(x.dtype())?;
    let flat = x.reshape((b, h * w, d))?;
    let out = m.unsqueeze(0)?.broadcast_as((b, out_hw.0 * out_hw.1, h * w))?.contiguous()?.matmul(&flat)?;
    Ok(out.reshape((b, out_hw.0, out_hw.1, d))?)
}

/// Mean over the spatial axes of a `(b, h, w, d)` grid.
pub fn pool_grid(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, d) = x.dims4()?;
    Ok(x.reshape((b, h * w, d))?.mean(D::Minus2)?)
}
