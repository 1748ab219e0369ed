//! Per-location temporal and cross-modal fusion, plus geo-context prototypes.

mod gcpl;
mod sinkhorn;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

pub use gcpl::{gcpl_augment, gcpl_update, region_index, GcplConfig, PrototypeBank};
pub(crate) use gcpl::gcpl_specs;
pub use sinkhorn::{sinkhorn_assign, sinkhorn_tensor};

use crate::error::{invalid, Error, Result};
use crate::modality::Modality;
use crate::nn::ops::{layer_norm_at, linear, merge_heads, mlp, sinusoidal, softmax_last, split_heads};
use crate::nn::{Init, Scope, SpecBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub depth: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { depth: 2, head_dim: 32, mlp_ratio: 2 }
    }
}

impl FusionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.head_dim == 0 || dim % self.head_dim != 0 || self.mlp_ratio == 0 {
            return Err(invalid!("fusion head_dim {} must divide width {dim}", self.head_dim));
        }
        Ok(())
    }
}

/// One modality's per-frame grids for a batch: `data: (b, t, h, w, d)` and
/// `days[b][t]`. HR carries a single undated frame.
#[derive(Debug, Clone)]
pub struct ModalitySeries {
    pub modality: Modality,
    pub data: Tensor,
    pub days: Vec<Vec<i32>>,
}

/// Fused per-location features `(b, h, w, d)`.
#[derive(Debug, Clone)]
pub struct FusedFeature {
    pub data: Tensor,
    pub modalities: Vec<Modality>,
    pub lengths: Vec<usize>,
}

pub fn fusion_specs(b: &mut SpecBuilder, d: usize, cfg: &FusionConfig) {
    b.scoped("fusion", |b| {
        b.add("modality_embed", &[Modality::ALL.len(), d], Init::Normal(0.02), false);
        for i in 0..cfg.depth {
            b.scoped(format!("blocks.{i}"), |b| {
                b.layer_norm("norm1", d);
                b.linear("attn.qkv", d, 3 * d, true);
                b.linear("attn.proj", d, d, true);
                b.layer_norm("norm2", d);
                b.linear("mlp.fc1", d, d * cfg.mlp_ratio, true);
                b.linear("mlp.fc2", d * cfg.mlp_ratio, d, true);
            });
        }
    });
}

/// Day-of-year sinusoid; HR frames get a zero encoding.
fn temporal_encoding(series: &[ModalitySeries], b: usize, d: usize, like: &Tensor) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(b);
    for bi in 0..b {
        let mut parts = Vec::new();
        for s in series {
            let t = s.data.dim(1)?;
            if s.modality == Modality::Hr {
                parts.push(Tensor::zeros((t, d), like.dtype(), like.device())?);
            } else {
                let doy: Vec<f64> = s.days[bi].iter().map(|&day| day.rem_euclid(365) as f64).collect();
                parts.push(sinusoidal(&doy, d, like.dtype(), like.device())?);
            }
        }
        rows.push(Tensor::cat(&parts, 0)?);
    }
    Ok(Tensor::stack(&rows, 0)?)
}

/// Pre-norm block whose queries and keys see `pos`; values do not.
fn fusion_block(s: &Scope, x: &Tensor, pos: &Tensor, heads: usize) -> Result<Tensor> {
    let (_, _, d) = x.dims3()?;
    let h = layer_norm_at(s, "norm1", x)?;
    let hp = h.broadcast_add(pos)?;
    let w = s.get("attn.qkv.weight")?;
    let bias = s.get("attn.qkv.bias")?;
    let qk = linear(&hp, &w.narrow(0, 0, 2 * d)?, Some(&bias.narrow(0, 0, 2 * d)?))?;
    let v = linear(&h, &w.narrow(0, 2 * d, d)?, Some(&bias.narrow(0, 2 * d, d)?))?;
    let q = split_heads(&qk.narrow(2, 0, d)?.contiguous()?, heads)?;
    let k = split_heads(&qk.narrow(2, d, d)?.contiguous()?, heads)?;
    let v = split_heads(&v, heads)?;
    let p = softmax_last(&(q.matmul(&k.t()?)? / ((d / heads) as f64).sqrt())?)?;
    let a = crate::nn::ops::linear_at(s, "attn.proj", &merge_heads(&p.matmul(&v)?, heads)?)?;
    let x = (x + a)?;
    let f = mlp(&s.pp("mlp"), &layer_norm_at(s, "norm2", &x)?)?;
    Ok((x + f)?)
}

/// Runs the per-location sequence `HR ⊕ MS frames ⊕ SAR frames` through the
/// fusion encoder and mean-pools it. Series must be given in that modality order.
pub fn fuse(s: &Scope, series: &[ModalitySeries], cfg: &FusionConfig) -> Result<FusedFeature> {
    let first = series.first().ok_or_else(|| invalid!("fusion needs at least one modality"))?;
    let (b, _, h, w, d) = first.data.dims5()?;
    for pair in series.windows(2) {
        if pair[0].modality.index() >= pair[1].modality.index() {
            return Err(invalid!("fusion inputs must be ordered HR, MS, SAR without repeats"));
        }
    }
    for sr in series {
        let (sb, t, sh, sw, sd) = sr.data.dims5()?;
        if (sb, sh, sw, sd) != (b, h, w, d) {
            return Err(Error::ShapeMismatch {
                name: format!("{} fusion grid", sr.modality),
                expected: vec![b, t, h, w, d],
                found: sr.data.dims().to_vec(),
            });
        }
        if sr.modality != Modality::Hr && (sr.days.len() != b || sr.days.iter().any(|dd| dd.len() != t)) {
            return Err(invalid!("{} day offsets do not match {b}×{t} frames", sr.modality));
        }
    }
    let lengths: Vec<usize> = series.iter().map(|s| s.data.dim(1).unwrap_or(0)).collect();
    let l: usize = lengths.iter().sum();

    // (b, t, h, w, d) → (b, h·w, t, d), then concatenate along the sequence.
    let embed = s.get("modality_embed")?;
    let mut parts = Vec::with_capacity(series.len());
    for sr in series {
        let t = sr.data.dim(1)?;
        let x = sr.data.reshape((b, t, h * w, d))?.transpose(1, 2)?;
        let e = embed.narrow(0, sr.modality.index(), 1)?.reshape((1, 1, 1, d))?;
        parts.push(x.broadcast_add(&e)?);
    }
    let mut x = Tensor::cat(&parts, 2)?.contiguous()?.reshape((b * h * w, l, d))?;

    if cfg.depth > 0 {
        let pos = temporal_encoding(series, b, d, &x)?
            .unsqueeze(1)?
            .broadcast_as((b, h * w, l, d))?
            .contiguous()?
            .reshape((b * h * w, l, d))?;
        let heads = d / cfg.head_dim;
        for i in 0..cfg.depth {
            x = fusion_block(&s.pp(format!("blocks.{i}")), &x, &pos, heads)?;
        }
    }
    let data = x.mean(D::Minus2)?.reshape((b, h, w, d))?;
    Ok(FusedFeature { data, modalities: series.iter().map(|s| s.modality).collect(), lengths })
}

#[cfg(test)]
mod tests;
