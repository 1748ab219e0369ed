use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::ops::{index_tensor, linear_at, mlp, softmax_last, to_vec_f64};
use crate::nn::{Scope, SpecBuilder};

/// Routing record of one MoE layer, summed over every call that hit it.
#[derive(Debug, Clone)]
pub struct LayerRouting {
    pub counts: Vec<usize>,
    /// Per-expert sum of gate probabilities over all routed tokens (host copy).
    pub prob_sum: Vec<f64>,
    pub tokens: usize,
    pub top_k: usize,
    /// Smallest gap between the k-th and (k+1)-th gate probability seen.
    pub min_margin: f64,
    /// Differentiable counterpart of `prob_sum`, shape `(M)`.
    pub prob_sum_t: Tensor,
}

impl LayerRouting {
    pub fn n_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn mean_gate_prob(&self) -> Vec<f64> {
        self.prob_sum.iter().map(|p| p / self.tokens.max(1) as f64).collect()
    }

    /// Fraction of routed slots taken by each expert.
    pub fn routed_fraction(&self) -> Vec<f64> {
        let slots = (self.tokens * self.top_k).max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / slots).collect()
    }

    fn merge(&mut self, other: LayerRouting) -> Result<()> {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        for (a, b) in self.prob_sum.iter_mut().zip(other.prob_sum) {
            *a += b;
        }
        self.tokens += other.tokens;
        self.min_margin = self.min_margin.min(other.min_margin);
        self.prob_sum_t = (&self.prob_sum_t + other.prob_sum_t)?;
        Ok(())
    }
}

/// Routing records keyed by layer name.
#[derive(Debug, Clone, Default)]
pub struct RoutingStats {
    pub layers: BTreeMap<String, LayerRouting>,
}

impl RoutingStats {
    pub fn record(&mut self, layer: &str, r: LayerRouting) -> Result<()> {
        match self.layers.get_mut(layer) {
            Some(existing) => existing.merge(r),
            None => {
                self.layers.insert(layer.to_string(), r);
                Ok(())
            }
        }
    }

    pub fn merge(&mut self, other: RoutingStats) -> Result<()> {
        for (name, r) in other.layers {
            self.record(&name, r)?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn min_margin(&self) -> f64 {
        self.layers.values().map(|l| l.min_margin).fold(f64::INFINITY, f64::min)
    }
}

pub(crate) fn moe_specs(b: &mut SpecBuilder, d: usize, hidden: usize, experts: usize) {
    b.scoped("moe", |b| {
        b.add("gate.weight", &[experts, d], crate::nn::Init::Normal(0.02), false);
        for e in 0..experts {
            b.scoped(format!("experts.{e}"), |b| {
                b.linear("fc1", d, hidden, true);
                b.linear("fc2", hidden, d, true);
            });
        }
    });
}

/// Indices of the `k` largest entries, lowest index first among equals.
pub fn top_k_indices(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Sparse mixture-of-experts FFN over `(n, d)` tokens. The scope must hold
/// `gate.weight` and `experts.{i}.fc{1,2}`.
pub fn moe_ffn(s: &Scope, x: &Tensor, top_k: usize) -> Result<(Tensor, LayerRouting)> {
    let (n, _d) = x.dims2()?;
    let logits = linear_at(s, "gate", x)?;
    let probs = softmax_last(&logits)?;
    let m = probs.dim(1)?;
    let host = to_vec_f64(&probs)?;

    let mut per_expert: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut min_margin = f64::INFINITY;
    for t in 0..n {
        let row = &host[t * m..(t + 1) * m];
        let chosen = top_k_indices(row, top_k);
        if top_k < m {
            let kth = row[chosen[top_k - 1]];
            let next = (0..m)
                .filter(|i| !chosen.contains(i))
                .map(|i| row[i])
                .fold(f64::NEG_INFINITY, f64::max);
            min_margin = min_margin.min(kth - next);
        }
        for e in chosen {
            per_expert[e].push(t);
        }
    }

    let flat_probs = probs.flatten_all()?;
    let mut out = x.zeros_like()?;
    for (e, tokens) in per_expert.iter().enumerate() {
        if tokens.is_empty() {
            continue;
        }
        let idx = index_tensor(tokens, x.device())?;
        let gate_idx: Vec<usize> = tokens.iter().map(|&t| t * m + e).collect();
        let g = flat_probs.index_select(&index_tensor(&gate_idx, x.device())?, 0)?;
        let y = mlp(&s.pp(format!("experts.{e}")), &x.index_select(&idx, 0)?)?;
        out = out.index_add(&idx, &y.broadcast_mul(&g.unsqueeze(1)?)?, 0)?;
    }

    let mut prob_sum = vec![0.0; m];
    for t in 0..n {
        for (e, p) in prob_sum.iter_mut().enumerate() {
            *p += host[t * m + e];
        }
    }
    let routing = LayerRouting {
        counts: per_expert.iter().map(Vec::len).collect(),
        prob_sum,
        tokens: n,
        top_k,
        min_margin,
        prob_sum_t: probs.sum(0)?,
    };
    Ok((out, routing))
}

/// Switch-style load-balancing loss `M · Σ f_i · p_i`, averaged over layers.
/// `p_i` is differentiable; `f_i` is a routing count.
pub fn moe_aux_loss(stats: &RoutingStats) -> Result<Option<Tensor>> {
    let mut total: Option<Tensor> = None;
    for r in stats.layers.values() {
        let m = r.n_experts();
        let f = Tensor::new(r.routed_fraction(), r.prob_sum_t.device())?.to_dtype(r.prob_sum_t.dtype())?;
        let p = (&r.prob_sum_t / r.tokens.max(1) as f64)?;
        let term = ((f * p)?.sum_all()? * m as f64)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => Some((t / stats.layers.len() as f64)?),
        None => None,
    })
}

/// Host value of [`moe_aux_loss`] from the recorded statistics.
pub fn moe_aux_value(stats: &RoutingStats) -> f64 {
    if stats.layers.is_empty() {
        return 0.0;
    }
    let sum: f64 = stats
        .layers
        .values()
        .map(|r| {
            let f = r.routed_fraction();
            let p = r.mean_gate_prob();
            r.n_experts() as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum();
    sum / stats.layers.len() as f64
}

