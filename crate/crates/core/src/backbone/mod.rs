//! Unified hierarchical encoder shared by every modality.

mod config;
mod layers;
mod moe;
mod swin;
mod transformer;

use candle_core::Tensor;

pub use config::{ApmFlags, BackboneConfig};
pub use layers::{apm, apm_unmerged_weight, pool_grid, resample_grid, resample_matrix, tokenize, PATCH};
pub use moe::{moe_aux_loss, moe_aux_value, moe_ffn, top_k_indices, LayerRouting, RoutingStats};
pub use swin::{relative_index, swinv2_block, window_attention, window_mask, window_plan};
pub use transformer::{self_attention, transformer_block};

use crate::error::Result;
use crate::modality::Modality;
use crate::nn::{Init, SpecBuilder, Weights};

/// Batched spatial grid of features, `data: (b, h, w, d)`.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub data: Tensor,
    pub modality: Modality,
    /// Source pixels per token along each axis.
    pub stride: usize,
}

impl TokenGrid {
    pub fn hw(&self) -> (usize, usize) {
        let d = self.data.dims();
        (d[1], d[2])
    }

    pub fn dim(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }
}

pub struct BackboneOutput {
    pub output: TokenGrid,
    /// Output of each of the four stages.
    pub stages: Vec<TokenGrid>,
    pub routing: RoutingStats,
}

/// Declares every backbone parameter under `backbone.`.
pub fn backbone_specs(b: &mut SpecBuilder, cfg: &BackboneConfig) {
    b.scoped("backbone", |b| {
        b.scoped("tokenizer", |b| {
            for m in Modality::ALL {
                b.linear(m.name(), PATCH * PATCH * m.channels(), cfg.base_dim, true);
            }
        });
        for stage in 1..=4 {
            let d = cfg.stage_dim(stage);
            let heads = cfg.heads(stage);
            b.scoped(format!("stage{stage}"), |b| {
                if stage > 1 {
                    b.linear("apm", 4 * cfg.stage_dim(stage - 1), d, true);
                }
                for i in 0..cfg.depths[stage - 1] {
                    b.scoped(format!("blocks.{i}"), |b| {
                        if stage <= 2 {
                            swin::swin_attn_specs(b, d, heads, cfg.window_size);
                        } else {
                            transformer::attn_specs(b, d);
                        }
                        b.layer_norm("norm1", d);
                        b.layer_norm("norm2", d);
                        let hidden = d * cfg.mlp_ratio;
                        if cfg.is_moe(stage, i) {
                            moe::moe_specs(b, d, hidden, cfg.n_experts);
                        } else {
                            b.scoped("mlp", |b| {
                                b.linear("fc1", d, hidden, true);
                                b.linear("fc2", hidden, d, true);
                            });
                        }
                    });
                }
            });
        }
        for m in Modality::ALL {
            for stage in 3..=4 {
                b.add(&format!("prompts.{}.stage{stage}", m.name()), &[cfg.n_prompts, cfg.stage_dim(stage)], Init::Normal(0.02), false);
            }
        }
        b.layer_norm("norm", cfg.out_dim());
    });
}

/// Encodes a `(b, H, W, C)` batch of one modality.
pub fn forward_backbone(w: &Weights, x: &Tensor, modality: Modality, cfg: &BackboneConfig) -> Result<BackboneOutput> {
    let root = w.scope("backbone");
    let mut routing = RoutingStats::default();
    let mut grid = tokenize(&root.pp("tokenizer"), x, modality)?;
    let merges = cfg.apm.for_modality(modality);
    let mut stages = Vec::with_capacity(4);

    for stage in 1..=4 {
        let s = root.pp(format!("stage{stage}"));
        if stage > 1 {
            grid = apm(&s.pp("apm"), &grid, merges[stage - 2])?;
        }
        let heads = cfg.heads(stage);
        let moe_k = |i| cfg.is_moe(stage, i).then_some(cfg.top_k);
        if stage <= 2 {
            let mut data = grid.data.clone();
            for i in 0..cfg.depths[stage - 1] {
                data = swinv2_block(&s.pp(format!("blocks.{i}")), &data, heads, cfg.window_size, i % 2 == 1, moe_k(i), &mut routing)?;
            }
            grid.data = data;
        } else {
            let (b, h, wd, d) = grid.data.dims4()?;
            let prompts = root.get(&format!("prompts.{}.stage{stage}", modality.name()))?;
            let n = prompts.dim(0)?;
            let tokens = grid.data.reshape((b, h * wd, d))?;
            let mut seq = Tensor::cat(&[&prompts.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?, &tokens], 1)?;
            for i in 0..cfg.depths[stage - 1] {
                seq = transformer_block(&s.pp(format!("blocks.{i}")), &seq, heads, moe_k(i), &mut routing)?;
            }
            grid.data = seq.narrow(1, n, h * wd)?.reshape((b, h, wd, d))?;
        }
        stages.push(grid.clone());
    }
    grid.data = crate::nn::ops::layer_norm_at(&root, "norm", &grid.data)?;
    Ok(BackboneOutput { output: grid, stages, routing })
}

#[cfg(test)]
mod tests;
