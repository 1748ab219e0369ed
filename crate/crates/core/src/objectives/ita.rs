use candle_core::{Device, Tensor, D};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::nn::ops::{index_tensor, log_softmax_last};

/// Frozen unit-norm class embeddings `(K, D)` standing in for encoded class names.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTable {
    pub classes: usize,
    pub dim: usize,
    pub tau: f64,
    pub table: Vec<f64>,
}

impl TextTable {
    pub fn random(classes: usize, dim: usize, tau: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_7ab1_e000_0001);
        let mut table: Vec<f64> = (0..classes * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for row in table.chunks_mut(dim) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self { classes, dim, tau, table }
    }

    pub fn from_rows(rows: Vec<f64>, classes: usize, tau: f64) -> Result<Self> {
        if classes == 0 || rows.len() % classes != 0 || !(tau > 0.0) {
            return Err(invalid!("text table needs K ≥ 1 equal rows and tau > 0"));
        }
        let dim = rows.len() / classes;
        let mut table = rows;
        for row in table.chunks_mut(dim) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(Self { classes, dim, tau, table })
    }

    pub fn tensor(&self, dtype: candle_core::DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.table, (self.classes, self.dim), device)?.to_dtype(dtype)?)
    }
}

/// Mean over rows of `−log softmax_k(F_i · text_k / τ)[label_i]` for `(n, D)` features.
pub fn loss_ita(f: &Tensor, labels: &[usize], table: &TextTable) -> Result<Tensor> {
    let n = f.dim(0)?;
    if labels.len() != n {
        return Err(invalid!("{} labels for {n} features", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= table.classes) {
        return Err(invalid!("label {bad} outside {} classes", table.classes));
    }
    let text = table.tensor(f.dtype(), f.device())?;
    let logp = log_softmax_last(&(f.matmul(&text.t()?)? / table.tau)?)?;
    let picked = logp.gather(&index_tensor(labels, f.device())?.unsqueeze(1)?, D::Minus1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Majority class of each cell when an `(H, W)` label map is split into an
/// `h × w` grid; lowest class wins ties.
pub fn cell_majority_labels(labels: &Array2<i32>, grid: (usize, usize), classes: usize) -> Vec<usize> {
    let (hh, ww) = labels.dim();
    let (gh, gw) = grid;
    let mut out = Vec::with_capacity(gh * gw);
    for r in 0..gh {
        for c in 0..gw {
            let mut counts = vec![0usize; classes];
            for y in r * hh / gh..((r + 1) * hh / gh).max(r * hh / gh + 1).min(hh) {
                for x in c * ww / gw..((c + 1) * ww / gw).max(c * ww / gw + 1).min(ww) {
                    let l = labels[[y, x]];
                    if l >= 0 && (l as usize) < classes {
                        counts[l as usize] += 1;
                    }
                }
            }
            let mut best = 0;
            for (k, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}
