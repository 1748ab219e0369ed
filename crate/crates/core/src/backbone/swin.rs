use candle_core::{Device, Tensor};

use super::moe::RoutingStats;
use super::transformer::ffn;
use crate::error::Result;
use crate::nn::ops::{index_tensor, l2_normalize, layer_norm_at, linear_at, merge_heads, softmax_last, split_heads};
use crate::nn::{Init, Scope, SpecBuilder};

const MASK_NEG: f64 = -1e9;
const MAX_LOGIT_SCALE: f64 = 4.605170185988092; // ln 100

pub(crate) fn swin_attn_specs(b: &mut SpecBuilder, d: usize, heads: usize, window: usize) {
    b.scoped("attn", |b| {
        b.linear("qkv", d, 3 * d, true);
        b.add("logit_scale", &[heads], Init::Const(10f64.ln()), false);
        let side = 2 * window - 1;
        b.add("rpb", &[side * side, heads], Init::Normal(0.02), false);
        b.linear("proj", d, d, true);
    });
}

/// Effective window and shift for an `h × w` grid.
pub fn window_plan(h: usize, w: usize, window: usize, shift: bool) -> (usize, usize) {
    let longest = h.max(w);
    if longest <= window {
        (longest, 0)
    } else {
        (window, if shift { window / 2 } else { 0 })
    }
}

/// Relative-position table rows for a `ws × ws` window inside a table sized for `window`.
pub fn relative_index(ws: usize, window: usize) -> Vec<usize> {
    let side = 2 * window - 1;
    let l = ws * ws;
    let mut idx = Vec::with_capacity(l * l);
    for i in 0..l {
        for j in 0..l {
            let dy = (i / ws) as isize - (j / ws) as isize + window as isize - 1;
            let dx = (i % ws) as isize - (j % ws) as isize + window as isize - 1;
            idx.push(dy as usize * side + dx as usize);
        }
    }
    idx
}

/// Additive mask `(nW, L, L)` for a padded, rolled `hp × wp` grid holding an
/// `h × w` valid region. `None` when nothing needs masking.
pub fn window_mask(h: usize, w: usize, hp: usize, wp: usize, ws: usize, shift: usize) -> Option<Vec<f64>> {
    if shift == 0 && h == hp && w == wp {
        return None;
    }
    let region = |p: usize, n: usize| -> usize {
        if shift == 0 || p < n - ws {
            0
        } else if p < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (hp / ws, wp / ws);
    let l = ws * ws;
    let mut mask = vec![0.0; nh * nw * l * l];
    for wy in 0..nh {
        for wx in 0..nw {
            let win = wy * nw + wx;
            let cell = |t: usize| {
                let (r, c) = (wy * ws + t / ws, wx * ws + t % ws);
                let real = (r + shift) % hp < h && (c + shift) % wp < w;
                (region(r, hp) * 3 + region(c, wp), real)
            };
            for i in 0..l {
                let (ri, _) = cell(i);
                for j in 0..l {
                    let (rj, real_j) = cell(j);
                    if ri != rj || !real_j {
                        mask[(win * l + i) * l + j] = MASK_NEG;
                    }
                }
            }
        }
    }
    Some(mask)
}

/// Splits `(b, hp, wp, d)` into `(b·nW, ws², d)` windows.
fn partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, d) = x.dims4()?;
    Ok(x
        .reshape((b, h / ws, ws, w / ws, ws, d))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / ws) * (w / ws), ws * ws, d))?)
}

fn unpartition(x: &Tensor, b: usize, h: usize, w: usize, ws: usize) -> Result<Tensor> {
    let d = x.dim(2)?;
    Ok(x
        .reshape((b, h / ws, w / ws, ws, ws, d))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, d))?)
}

/// Cosine window attention on `(b·nW, L, d)` windows with a learned
/// per-head logit scale and relative position bias.
#[allow(clippy::too_many_arguments)]
pub fn window_attention(
    s: &Scope,
    x: &Tensor,
    heads: usize,
    ws: usize,
    window: usize,
    mask: Option<&[f64]>,
    n_windows: usize,
) -> Result<(Tensor, Tensor)> {
    let (bw, l, d) = x.dims3()?;
    let dev = x.device();
    let qkv = linear_at(s, "qkv", x)?;
    let q = split_heads(&qkv.narrow(2, 0, d)?.contiguous()?, heads)?;
    let k = split_heads(&qkv.narrow(2, d, d)?.contiguous()?, heads)?;
    let v = split_heads(&qkv.narrow(2, 2 * d, d)?.contiguous()?, heads)?;
    let q = l2_normalize(&q, 1e-6)?;
    let k = l2_normalize(&k, 1e-6)?;
    let scores = q.matmul(&k.t()?)?.reshape((bw, heads, l, l))?;
    let scale = s.get("logit_scale")?.minimum(MAX_LOGIT_SCALE)?.exp()?;
    let scores = scores.broadcast_mul(&scale.reshape((1, heads, 1, 1))?)?;
    let rel = index_tensor(&relative_index(ws, window), dev)?;
    let bias = s.get("rpb")?.index_select(&rel, 0)?.reshape((l, l, heads))?.permute((2, 0, 1))?;
    let mut scores = scores.broadcast_add(&bias.unsqueeze(0)?)?;
    if let Some(m) = mask {
        let m = Tensor::from_vec(m.to_vec(), (1, n_windows, 1, l, l), &Device::Cpu)?
            .to_device(dev)?
            .to_dtype(x.dtype())?;
        scores = scores
            .reshape((bw / n_windows, n_windows, heads, l, l))?
            .broadcast_add(&m)?
            .reshape((bw, heads, l, l))?;
    }
    let p = softmax_last(&scores)?;
    let out = p.reshape((bw * heads, l, l))?.matmul(&v)?;
    let out = linear_at(s, "proj", &merge_heads(&out, heads)?)?;
    Ok((out, p))
}

/// Post-norm SwinV2 block on a `(b, h, w, d)` grid.
pub fn swinv2_block(
    s: &Scope,
    x: &Tensor,
    heads: usize,
    window: usize,
    shift: bool,
    moe: Option<usize>,
    stats: &mut RoutingStats,
) -> Result<Tensor> {
    let (b, h, w, d) = x.dims4()?;
    let (ws, sh) = window_plan(h, w, window, shift);
    let (hp, wp) = (h.div_ceil(ws) * ws, w.div_ceil(ws) * ws);
    let mut xp = x.pad_with_zeros(1, 0, hp - h)?.pad_with_zeros(2, 0, wp - w)?;
    if sh > 0 {
        xp = xp.roll(-(sh as i32), 1)?.roll(-(sh as i32), 2)?;
    }
    let n_windows = (hp / ws) * (wp / ws);
    let mask = window_mask(h, w, hp, wp, ws, sh);
    let (a, _) = window_attention(&s.pp("attn"), &partition(&xp, ws)?, heads, ws, window, mask.as_deref(), n_windows)?;
    let mut a = unpartition(&a, b, hp, wp, ws)?;
    if sh > 0 {
        a = a.roll(sh as i32, 1)?.roll(sh as i32, 2)?;
    }
    let a = a.narrow(1, 0, h)?.narrow(2, 0, w)?;
    let x = (x + layer_norm_at(s, "norm1", &a)?)?;
    let flat = x.reshape((b * h * w, d))?;
    let f = ffn(s, &flat, moe, stats)?.reshape((b, h, w, d))?;
    Ok((&x + layer_norm_at(s, "norm2", &f)?)?)
}
