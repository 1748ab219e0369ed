use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::modality::Modality;

/// Per-modality 2×2 merge switches for the APM layers in front of stages 2, 3 and 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApmFlags {
    pub hr: [bool; 3],
    pub ms: [bool; 3],
    pub sar: [bool; 3],
}

impl Default for ApmFlags {
    fn default() -> Self {
        Self { hr: [true; 3], ms: [false; 3], sar: [false; 3] }
    }
}

impl ApmFlags {
    pub fn for_modality(&self, m: Modality) -> [bool; 3] {
        match m {
            Modality::Hr => self.hr,
            Modality::Ms => self.ms,
            Modality::Sar => self.sar,
        }
    }

    /// HR sub-sampling presets by overall downscale after stage 1: `1/8`, `1/4`, `1/2`, `none`.
    pub fn preset(name: &str) -> Result<Self> {
        let hr = match name {
            "1/8" => [true, true, true],
            "1/4" => [true, true, false],
            "1/2" => [true, false, false],
            "none" => [false, false, false],
            _ => return Err(invalid!("unknown APM preset `{name}` (expected 1/8, 1/4, 1/2 or none)")),
        };
        Ok(Self { hr, ..Self::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Stage-1 width `c`; stages run at `c, 2c, 4c, 8c`.
    pub base_dim: usize,
    pub depths: [usize; 4],
    pub window_size: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    /// Prompt tokens per modality in each of stages 3 and 4.
    pub n_prompts: usize,
    /// Number of trailing blocks whose FFN is a mixture of experts.
    pub moe_last: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub apm: ApmFlags,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_dim: 32,
            depths: [2, 2, 4, 2],
            window_size: 8,
            head_dim: 16,
            mlp_ratio: 4,
            n_prompts: 4,
            moe_last: 2,
            n_experts: 8,
            top_k: 1,
            apm: ApmFlags::default(),
        }
    }
}

impl BackboneConfig {
    /// Full-size settings; stage depths are an assumption summing to 24.
    pub fn paper() -> Self {
        Self {
            base_dim: 352,
            depths: [2, 2, 18, 2],
            head_dim: 32,
            moe_last: 6,
            ..Self::default()
        }
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.base_dim << (stage - 1)
    }

    pub fn out_dim(&self) -> usize {
        self.stage_dim(4)
    }

    pub fn heads(&self, stage: usize) -> usize {
        self.stage_dim(stage) / self.head_dim
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Global block index of block `i` in `stage`.
    pub fn block_index(&self, stage: usize, i: usize) -> usize {
        self.depths[..stage - 1].iter().sum::<usize>() + i
    }

    pub fn is_moe(&self, stage: usize, i: usize) -> bool {
        self.block_index(stage, i) + self.moe_last >= self.total_blocks()
    }

    /// Final grid for an `h × w` input of modality `m`.
    pub fn output_grid(&self, m: Modality, h: usize, w: usize) -> (usize, usize) {
        let merges = self.apm.for_modality(m).iter().filter(|&&f| f).count();
        (h / 4 >> merges, w / 4 >> merges)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_dim == 0 || self.head_dim == 0 || self.base_dim % self.head_dim != 0 {
            return Err(invalid!("base_dim {} must be a positive multiple of head_dim {}", self.base_dim, self.head_dim));
        }
        if self.depths.contains(&0) {
            return Err(invalid!("every stage needs at least one block"));
        }
        if self.window_size == 0 || self.mlp_ratio == 0 {
            return Err(invalid!("window_size and mlp_ratio must be positive"));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(invalid!("top_k {} must lie in 1..={}", self.top_k, self.n_experts));
        }
        if self.moe_last > self.total_blocks() {
            return Err(invalid!("moe_last {} exceeds {} blocks", self.moe_last, self.total_blocks()));
        }
        Ok(())
    }
}
