use candle_core::Tensor;

use super::head::{contrast, ContrastHeads, RowPairs};
use crate::error::{invalid, Result};
use crate::nn::ops::{layer_norm_at, linear_at, mlp, softmax_last};
use crate::nn::{Init, Scope, SpecBuilder};

pub(crate) fn qsacl_specs(b: &mut SpecBuilder, d: usize, m: usize, mlp_ratio: usize) {
    b.scoped("qsacl", |b| {
        b.add("queries", &[m, d], Init::Normal(0.02), false);
        b.scoped("decoder", |b| {
            b.layer_norm("norm_q", d);
            b.layer_norm("norm_kv", d);
            b.linear("q", d, d, true);
            b.linear("k", d, d, true);
            b.linear("v", d, d, true);
            b.linear("out", d, d, true);
            b.layer_norm("norm2", d);
            b.linear("mlp.fc1", d, d * mlp_ratio, true);
            b.linear("mlp.fc2", d * mlp_ratio, d, true);
        });
    });
}

/// One decoder layer: the `m` learnable queries cross-attend (single head)
/// over `(b, n, d)` features, then an MLP. Returns `z: (b, m, d)` and the
/// attention `(b, m, n)`.
pub fn qsacl_aggregate(s: &Scope, features: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = features.dims3()?;
    if n == 0 {
        return Err(invalid!("query aggregation needs at least one feature"));
    }
    let queries = s.get("queries")?;
    let m = queries.dim(0)?;
    let dec = s.pp("decoder");
    let qn = layer_norm_at(&dec, "norm_q", queries)?;
    let q = linear_at(&dec, "q", &qn)?.unsqueeze(0)?.broadcast_as((b, m, d))?.contiguous()?;
    let kv = layer_norm_at(&dec, "norm_kv", features)?;
    let k = linear_at(&dec, "k", &kv)?;
    let v = linear_at(&dec, "v", &kv)?;
    let attn = softmax_last(&(q.matmul(&k.t()?)? / (d as f64).sqrt())?)?;
    let z = queries.unsqueeze(0)?.broadcast_add(&linear_at(&dec, "out", &attn.matmul(&v)?)?)?;
    let z = (&z + mlp(&dec.pp("mlp"), &layer_norm_at(&dec, "norm2", &z)?)?)?;
    Ok((z, attn))
}

/// Row pairs realizing the query-level contrast over every ordered
/// (global, local) pair. Student rows are `[globals; locals]` blocks of `m`
/// rows each, teacher rows use the same layout.
pub fn qsacl_pairs(n_global: usize, n_local: usize, m: usize) -> RowPairs {
    let mut rows = RowPairs::default();
    let w = 1.0 / (2 * m * n_global * n_local) as f64;
    for g in 0..n_global {
        for l in 0..n_local {
            let lb = n_global + l;
            for i in 0..m {
                rows.push(g * m + i, lb * m + i, w);
                rows.push(lb * m + i, g * m + i, w);
            }
        }
    }
    rows
}

/// Query-aggregated contrast between global and local views, averaged over
/// queries, both directions and all global-local pairs. Each `z` is `(m, d)`.
pub fn loss_qsacl(heads: &ContrastHeads, student_g: &[Tensor], student_l: &[Tensor], teacher_g: &[Tensor], teacher_l: &[Tensor]) -> Result<Tensor> {
    if student_g.is_empty() || student_l.is_empty() || student_g.len() != teacher_g.len() || student_l.len() != teacher_l.len() {
        return Err(invalid!("query contrast needs matching non-empty global and local sets"));
    }
    let m = student_g[0].dim(0)?;
    let s_rows = Tensor::cat(&student_g.iter().chain(student_l).collect::<Vec<_>>(), 0)?;
    let t_rows = Tensor::cat(&teacher_g.iter().chain(teacher_l).collect::<Vec<_>>(), 0)?;
    let pairs = qsacl_pairs(student_g.len(), student_l.len(), m);
    Ok(contrast(heads, &s_rows, &t_rows, &pairs)?.expect("non-empty").loss)
}
