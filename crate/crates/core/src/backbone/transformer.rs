use candle_core::Tensor;

use super::moe::{moe_ffn, RoutingStats};
use crate::error::Result;
use crate::nn::ops::{layer_norm_at, linear_at, merge_heads, mlp, softmax_last, split_heads};
use crate::nn::{Scope, SpecBuilder};

/// Query rows per chunk once a full score matrix would get large.
const CHUNK_ELEMS: usize = 1 << 20;

pub(crate) fn attn_specs(b: &mut SpecBuilder, d: usize) {
    b.scoped("attn", |b| {
        b.linear("qkv", d, 3 * d, true);
        b.linear("proj", d, d, true);
    });
}

/// Dense MLP or MoE feed-forward on `(n, d)` tokens under `s`.
pub(crate) fn ffn(s: &Scope, x: &Tensor, moe: Option<usize>, stats: &mut RoutingStats) -> Result<Tensor> {
    match moe {
        Some(k) => {
            let ms = s.pp("moe");
            let (y, r) = moe_ffn(&ms, x, k)?;
            stats.record(ms.prefix(), r)?;
            Ok(y)
        }
        None => mlp(&s.pp("mlp"), x),
    }
}

/// Multi-head `softmax(QKᵀ/√d_h)V` self-attention on `(b, l, d)`.
pub fn self_attention(s: &Scope, x: &Tensor, heads: usize) -> Result<Tensor> {
    let (_, l, d) = x.dims3()?;
    let qkv = linear_at(s, "qkv", x)?;
    let q = split_heads(&qkv.narrow(2, 0, d)?.contiguous()?, heads)?;
    let k = split_heads(&qkv.narrow(2, d, d)?.contiguous()?, heads)?;
    let v = split_heads(&qkv.narrow(2, 2 * d, d)?.contiguous()?, heads)?;
    // Scaling the queries is cheaper than scaling the score matrix.
    let q = (q * (1.0 / ((d / heads) as f64).sqrt()))?;
    let kt = k.t()?;
    let bh = q.dim(0)?;
    let rows = (CHUNK_ELEMS / (bh * l).max(1)).max(1);
    let out = if rows >= l {
        softmax_last(&q.matmul(&kt)?)?.matmul(&v)?
    } else {
        let mut parts = Vec::new();
        let mut start = 0;
        while start < l {
            let n = rows.min(l - start);
            let qc = q.narrow(1, start, n)?;
            parts.push(softmax_last(&qc.matmul(&kt)?)?.matmul(&v)?);
            start += n;
        }
        Tensor::cat(&parts, 1)?
    };
    linear_at(s, "proj", &merge_heads(&out, heads)?)
}

/// Pre-norm transformer block on `(b, l, d)` tokens.
pub fn transformer_block(
    s: &Scope,
    x: &Tensor,
    heads: usize,
    moe: Option<usize>,
    stats: &mut RoutingStats,
) -> Result<Tensor> {
    let (b, l, d) = x.dims3()?;
    let a = self_attention(&s.pp("attn"), &layer_norm_at(s, "norm1", x)?, heads)?;
    let x = (x + a)?;
    let h = layer_norm_at(s, "norm2", &x)?.reshape((b * l, d))?;
    let f = ffn(s, &h, moe, stats)?.reshape((b, l, d))?;
    Ok((x + f)?)
}

