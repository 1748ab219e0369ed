use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::nn::ops::{index_tensor, l2_normalize, linear_at, log_softmax_last, softmax_last, to_vec_f64};
use crate::nn::{Scope, SpecBuilder};

const LOG_FLOOR: f64 = -27.631021115928547; // ln 1e-12
const NORM_EPS: f64 = 1e-12;

pub(crate) fn head_specs(b: &mut SpecBuilder, name: &str, d_in: usize, hidden: usize, out: usize) {
    b.scoped(name, |b| {
        b.linear("fc1", d_in, hidden, true);
        b.linear("fc2", hidden, hidden, true);
        b.linear("fc3", hidden, hidden, true);
        b.linear("last", hidden, out, false);
    });
}

/// Three-layer GELU MLP into an L2-normalized bottleneck, then a
/// weight-normalized linear layer: logits are cosines in [-1, 1], so the
/// temperatures alone set how peaked the distributions are.
pub fn head_logits(s: &Scope, x: &Tensor) -> Result<Tensor> {
    let h = linear_at(s, "fc1", x)?.gelu()?;
    let h = linear_at(s, "fc2", &h)?.gelu()?;
    let z = l2_normalize(&linear_at(s, "fc3", &h)?, NORM_EPS)?;
    let w = l2_normalize(s.get("last.weight")?, NORM_EPS)?;
    Ok(z.broadcast_matmul(&w.t()?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Student,
    Teacher,
}

/// Softmax of head logits: students at `tau_s`; teachers subtract the center
/// first and use `tau_t`. Teacher output is detached.
pub fn head_forward(s: &Scope, x: &Tensor, branch: Branch, center: &Tensor, tau_s: f64, tau_t: f64) -> Result<Tensor> {
    let logits = head_logits(s, x)?;
    probs_from_logits(&logits, branch, center, tau_s, tau_t)
}

pub fn probs_from_logits(logits: &Tensor, branch: Branch, center: &Tensor, tau_s: f64, tau_t: f64) -> Result<Tensor> {
    match branch {
        Branch::Student => softmax_last(&(logits / tau_s)?),
        Branch::Teacher => Ok(softmax_last(&(logits.broadcast_sub(center)? / tau_t)?)?.detach()),
    }
}

/// `−Σ_j q_j log max(p_j, 1e-12)` per row of `(r, k)` inputs.
pub fn loss_cl_rows(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let logp = p.maximum(1e-12)?.log()?;
    Ok((q.detach() * logp)?.sum(D::Minus1)?.neg()?)
}

/// Mean over rows of [`loss_cl_rows`].
pub fn loss_cl(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    Ok(loss_cl_rows(p, q)?.mean_all()?)
}

/// Same value as [`loss_cl_rows`] on `softmax(logits / tau)`, computed in log space.
pub fn loss_cl_logits(student_logits: &Tensor, q: &Tensor, tau_s: f64) -> Result<Tensor> {
    let logp = log_softmax_last(&(student_logits / tau_s)?)?.maximum(LOG_FLOOR)?;
    Ok((q.detach() * logp)?.sum(D::Minus1)?.neg()?)
}

/// The four loss families that keep their own teacher center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Family {
    Pixel,
    Object,
    Image,
    Qsacl,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Pixel, Family::Object, Family::Image, Family::Qsacl];

    pub fn name(self) -> &'static str {
        match self {
            Family::Pixel => "pix",
            Family::Object => "obj",
            Family::Image => "img",
            Family::Qsacl => "qsacl",
        }
    }
}

/// Teacher centers, updated by EMA of the mean teacher logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Centers {
    pub momentum: f64,
    pub values: BTreeMap<&'static str, Vec<f64>>,
}

impl Centers {
    pub fn new(dim: usize, momentum: f64) -> Self {
        Self { momentum, values: Family::ALL.iter().map(|f| (f.name(), vec![0.0; dim])).collect() }
    }

    pub fn tensor(&self, f: Family, dtype: DType, device: &Device) -> Result<Tensor> {
        let v = &self.values[f.name()];
        Ok(Tensor::from_slice(v, v.len(), device)?.to_dtype(dtype)?)
    }

    pub fn update(&mut self, f: Family, batch_mean: &[f64]) {
        let m = self.momentum;
        let c = self.values.get_mut(f.name()).expect("every family has a center");
        for (a, b) in c.iter_mut().zip(batch_mean) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
}

/// Student and teacher heads plus temperatures for one family.
pub struct ContrastHeads<'a> {
    pub student: Scope<'a>,
    pub teacher: Scope<'a>,
    pub center: Tensor,
    pub tau_s: f64,
    pub tau_t: f64,
}

/// Row selection for a contrast: `student_rows[s_idx[r]]` against
/// `teacher_rows[t_idx[r]]` with weight `weights[r]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowPairs {
    pub s_idx: Vec<usize>,
    pub t_idx: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RowPairs {
    pub fn push(&mut self, s: usize, t: usize, w: f64) {
        self.s_idx.push(s);
        self.t_idx.push(t);
        self.weights.push(w);
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn extend(&mut self, other: RowPairs, s_offset: usize, t_offset: usize) {
        self.s_idx.extend(other.s_idx.into_iter().map(|i| i + s_offset));
        self.t_idx.extend(other.t_idx.into_iter().map(|i| i + t_offset));
        self.weights.extend(other.weights);
    }

    pub fn scale(&mut self, k: f64) {
        self.weights.iter_mut().for_each(|w| *w *= k);
    }
}

pub struct ContrastOutput {
    pub loss: Tensor,
    /// Mean teacher logit over the selected teacher rows (for the center EMA).
    pub teacher_logit_mean: Vec<f64>,
}

/// `Σ_r w_r · L_CL(student(row), teacher(row))` with heads applied once to
/// the distinct rows. Returns `None` for an empty selection.
pub fn contrast(heads: &ContrastHeads, student_rows: &Tensor, teacher_rows: &Tensor, pairs: &RowPairs) -> Result<Option<ContrastOutput>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let dev = student_rows.device();
    let s = student_rows.index_select(&index_tensor(&pairs.s_idx, dev)?, 0)?;
    let t = teacher_rows.detach().index_select(&index_tensor(&pairs.t_idx, dev)?, 0)?;
    let s_logits = head_logits(&heads.student, &s)?;
    let t_logits = head_logits(&heads.teacher, &t)?.detach();
    let q = probs_from_logits(&t_logits, Branch::Teacher, &heads.center, heads.tau_s, heads.tau_t)?;
    let ce = loss_cl_logits(&s_logits, &q, heads.tau_s)?;
    let w = Tensor::from_slice(&pairs.weights, pairs.len(), dev)?.to_dtype(ce.dtype())?;
    let loss = (ce * w)?.sum_all()?;
    let teacher_logit_mean = to_vec_f64(&t_logits.mean(0)?)?;
    Ok(Some(ContrastOutput { loss, teacher_logit_mean }))
}
