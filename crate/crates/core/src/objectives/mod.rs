//! Pre-training losses: self-distillation heads, multi-granularity and
//! query-aggregated contrast, dense image-text alignment and the weighted total.

mod head;
mod ita;
mod mgcl;
mod qsacl;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use head::{
    contrast, head_forward, head_logits, loss_cl, loss_cl_logits, loss_cl_rows, probs_from_logits, Branch, Centers,
    ContrastHeads, ContrastOutput, Family, RowPairs,
};
pub use ita::{cell_majority_labels, loss_ita, TextTable};
pub use mgcl::{
    aligned_pairs, cluster_objects, loss_fgcl, loss_image, loss_mgcl, loss_object, loss_pixel, pixel_pairs, pool,
    FeaturePair, FgclHeads,
};
pub use qsacl::{loss_qsacl, qsacl_aggregate, qsacl_pairs};

use crate::error::{invalid, Error, Result};
use crate::nn::ops::scalar_f64;
use crate::nn::{Init, SpecBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub head_hidden: usize,
    pub head_out: usize,
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub center_momentum: f64,
    pub n_clusters: usize,
    pub cluster_eps: f64,
    pub cluster_iters: usize,
    pub n_queries: usize,
    pub decoder_mlp_ratio: usize,
    pub ita_dim: usize,
    pub ita_tau: f64,
    pub lambda_mgcl: f64,
    pub lambda_ita: f64,
    pub lambda_qsacl: f64,
    pub aux_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            head_hidden: 256,
            head_out: 256,
            tau_student: 0.1,
            tau_teacher: 0.04,
            center_momentum: 0.9,
            n_clusters: 8,
            cluster_eps: 0.05,
            cluster_iters: 3,
            n_queries: 16,
            decoder_mlp_ratio: 2,
            ita_dim: 64,
            ita_tau: 0.07,
            lambda_mgcl: 1.0,
            lambda_ita: 1.0,
            lambda_qsacl: 1.0,
            aux_weight: 0.01,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.tau_student, self.tau_teacher, self.cluster_eps, self.ita_tau];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(invalid!("temperatures and cluster eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(invalid!("center momentum {} outside [0, 1]", self.center_momentum));
        }
        let sizes = [self.head_hidden, self.head_out, self.n_clusters, self.cluster_iters, self.n_queries, self.decoder_mlp_ratio, self.ita_dim];
        if sizes.contains(&0) {
            return Err(invalid!("objective sizes must be at least 1"));
        }
        let weights = [self.lambda_mgcl, self.lambda_ita, self.lambda_qsacl, self.aux_weight];
        if weights.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid!("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Objective parameters on top of a `d`-wide encoder.
pub fn objective_specs(b: &mut SpecBuilder, d: usize, cfg: &ObjectiveConfig) {
    b.scoped("heads", |b| {
        head::head_specs(b, "mgcl", d, cfg.head_hidden, cfg.head_out);
        head::head_specs(b, "qsacl", d, cfg.head_hidden, cfg.head_out);
    });
    b.add("objects.cluster_embed", &[cfg.n_clusters, d], Init::Normal(1.0), true);
    qsacl::qsacl_specs(b, d, cfg.n_queries, cfg.decoder_mlp_ratio);
    b.linear("ita.proj", d, cfg.ita_dim, true);
}

/// Un-weighted loss terms of one step.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub mgcl: Tensor,
    pub ita: Tensor,
    pub qsacl: Tensor,
    pub aux: Tensor,
}

/// `λ1·MGCL + λ2·ITA + λ3·QSACL + w_aux·aux`; any non-finite part is an error naming it.
pub fn total_loss(parts: &LossParts, cfg: &ObjectiveConfig) -> Result<Tensor> {
    for (name, t) in [("mgcl", &parts.mgcl), ("ita", &parts.ita), ("qsacl", &parts.qsacl), ("aux", &parts.aux)] {
        if !scalar_f64(t)?.is_finite() {
            return Err(Error::NonFinite(format!("loss.{name}")));
        }
    }
    let total = ((&parts.mgcl * cfg.lambda_mgcl)? + (&parts.ita * cfg.lambda_ita)?)?;
    let total = (total + (&parts.qsacl * cfg.lambda_qsacl)?)?;
    Ok((total + (&parts.aux * cfg.aux_weight)?)?)
}
