//! Frozen-feature evaluation: image-level feature extraction, cosine k-NN and
//! per-query attention maps.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_views, AugSpec, GeoSample, TemporalIndices, View, ViewGeometry};
use crate::error::{invalid, Error, Result};
use crate::modality::Modality;
use crate::nn::ops::to_vec_f64;
use crate::nn::Weights;
use crate::objectives::qsacl_aggregate;
use crate::trainer::{encode_views, Branch, ModelState};

/// Which encoder output an evaluation pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    /// Mean over modalities and frames of the final backbone grids.
    Backbone,
    #[default]
    Fused,
}

impl std::str::FromStr for FeatureSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "backbone" => Ok(FeatureSource::Backbone),
            "fused" => Ok(FeatureSource::Fused),
            other => Err(format!("unknown feature source `{other}` (expected backbone or fused)")),
        }
    }
}

/// The whole sample as a single view with every frame.
pub fn full_view(sample: &GeoSample) -> (View, TemporalIndices) {
    let n = sample.labels.dim().0;
    let ground = ViewGeometry::identity(n, n);
    let mut geometry = BTreeMap::new();
    geometry.insert(Modality::Hr, ground.scaled(sample.hr_ratio()));
    geometry.insert(Modality::Ms, ground);
    geometry.insert(Modality::Sar, ground);
    let view = View {
        hr: Some(sample.hr.clone()),
        ms: Some(sample.ms.clone()),
        sar: Some(sample.sar.clone()),
        labels: sample.labels.clone(),
        ms_days: sample.ms_days().to_vec(),
        sar_days: sample.sar_days().to_vec(),
        geometry,
    };
    let temporal = TemporalIndices { ms: (0..sample.ms_frames()).collect(), sar: (0..sample.sar_frames()).collect() };
    (view, temporal)
}

/// Image-level features `(n, d)` (row-major) and scene labels (label-map majority).
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub source: FeatureSource,
    pub branch: Branch,
    pub dim: usize,
    pub rows: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean-pooled features of every sample under the chosen branch and source.
pub fn extract_features(state: &ModelState, branch: Branch, samples: &[GeoSample], source: FeatureSource, batch_size: usize) -> Result<Features> {
    let weights = state.branch_weights(branch)?;
    let d = state.dim();
    let mut rows = Vec::with_capacity(samples.len() * d);
    let mut labels = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let full: Vec<(View, TemporalIndices)> = chunk.iter().map(full_view).collect();
        let views: Vec<&View> = full.iter().map(|(v, _)| v).collect();
        let temporal: Vec<&TemporalIndices> = full.iter().map(|(_, t)| t).collect();
        let enc = encode_views(&weights, &views, &temporal, &state.config, state.dtype, &state.device)?;
        let pooled = match source {
            FeatureSource::Fused => {
                let (b, h, w, d) = enc.fused.dims4()?;
                enc.fused.reshape((b, h * w, d))?.mean(1)?
            }
            FeatureSource::Backbone => {
                let per: Vec<Tensor> = enc
                    .modalities
                    .values()
                    .map(|x| {
                        let (b, t, h, w, d) = x.dims5()?;
                        Ok(x.reshape((b, t * h * w, d))?.mean(1)?)
                    })
                    .collect::<Result<_>>()?;
                Tensor::stack(&per, 0)?.mean(0)?
            }
        };
        rows.extend(to_vec_f64(&pooled)?);
        labels.extend(chunk.iter().map(|s| s.majority_label(state.config.num_classes)));
    }
    Ok(Features { source, branch, dim: d, rows, labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub k: usize,
    pub accuracy: f64,
    /// Accuracy per class over the test samples of that class; `None` when absent.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub source: FeatureSource,
    pub branch: Branch,
    pub dataset_hash: String,
}

fn unit_rows(f: &Features) -> Vec<Vec<f64>> {
    (0..f.len())
        .map(|i| {
            let r = f.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

/// Cosine-similarity k-NN prediction for each test row. Neighbors are the `k`
/// most similar training rows (lower index first on equal similarity); the
/// class with most votes wins, then the larger summed similarity, then the
/// lower class id.
pub fn knn_predict(train: &Features, test: &Features, k: usize, num_classes: usize) -> Result<Vec<usize>> {
    if train.is_empty() || test.is_empty() {
        return Err(invalid!("k-NN needs non-empty train and test splits"));
    }
    if k == 0 || k > train.len() {
        return Err(invalid!("k = {k} must lie in 1..={}", train.len()));
    }
    if train.dim != test.dim {
        return Err(invalid!("feature widths differ: {} vs {}", train.dim, test.dim));
    }
    let tr = unit_rows(train);
    let te = unit_rows(test);
    let mut out = Vec::with_capacity(te.len());
    for q in &te {
        let mut sims: Vec<(usize, f64)> = tr.iter().enumerate().map(|(i, r)| (i, r.iter().zip(q).map(|(a, b)| a * b).sum())).collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut votes = vec![0usize; num_classes];
        let mut weight = vec![0f64; num_classes];
        for &(i, s) in &sims[..k] {
            let c = train.labels[i];
            if c >= num_classes {
                return Err(invalid!("label {c} outside {num_classes} classes"));
            }
            votes[c] += 1;
            weight[c] += s;
        }
        let mut best = 0;
        for c in 1..num_classes {
            if votes[c] > votes[best] || (votes[c] == votes[best] && weight[c] > weight[best]) {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

pub fn knn_eval(train: &Features, test: &Features, k: usize, num_classes: usize) -> Result<EvalReport> {
    let pred = knn_predict(train, test, k, num_classes)?;
    let mut hit = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (p, &l) in pred.iter().zip(&test.labels) {
        if l < num_classes {
            total[l] += 1;
            hit[l] += (*p == l) as usize;
        }
    }
    let correct: usize = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(EvalReport {
        protocol: "knn-cosine".into(),
        k,
        accuracy: correct as f64 / test.len() as f64,
        per_class_accuracy: hit.iter().zip(&total).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect(),
        source: test.source,
        branch: test.branch,
        dataset_hash: String::new(),
    })
}

/// SHA-256 of the serialized dataset.
pub fn dataset_hash(samples: &[GeoSample]) -> String {
    Sha256::digest(crate::data::encode_dataset(samples)).iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-query attention of one view: `maps[i]` is query `i`'s `h × w` map.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAttention {
    pub view: String,
    pub grid: (usize, usize),
    pub maps: Vec<Vec<f64>>,
}

/// Query-attention maps for the 2 global and `aug.n_local` local views of a
/// sample, drawn with `seed`. Views are encoded with the chosen branch.
pub fn dump_query_attention(state: &ModelState, branch: Branch, sample: &GeoSample, aug: &AugSpec, seed: u64) -> Result<Vec<QueryAttention>> {
    let weights = state.branch_weights(branch)?;
    if !weights.contains("qsacl.queries") {
        return Err(Error::MissingParam("qsacl.queries".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = make_views(sample, aug, &mut rng)?;
    let temporal = if branch == Branch::Teacher { &set.teacher_temporal_indices } else { &set.student_temporal_indices };
    let mut out = Vec::new();
    let named = set
        .global_views
        .iter()
        .enumerate()
        .map(|(i, v)| (format!("global{i}"), v))
        .chain(set.local_views.iter().enumerate().map(|(i, v)| (format!("local{i}"), v)));
    for (name, view) in named {
        out.push(view_attention(&weights, state, view, temporal, name)?);
    }
    Ok(out)
}

fn view_attention(weights: &Weights, state: &ModelState, view: &View, temporal: &TemporalIndices, name: String) -> Result<QueryAttention> {
    let enc = encode_views(weights, &[view], &[temporal], &state.config, state.dtype, &state.device)?;
    let (_, h, w, d) = enc.fused.dims4()?;
    let (_, attn) = qsacl_aggregate(&weights.scope("qsacl"), &enc.fused.reshape((1, h * w, d))?)?;
    let flat = to_vec_f64(&attn)?;
    Ok(QueryAttention { view: name, grid: (h, w), maps: flat.chunks(h * w).map(|c| c.to_vec()).collect() })
}

impl QueryAttention {
    /// Writes `{view}.npy` holding float32 `(m, h, w)` and one grayscale PNG per query.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let (h, w) = self.grid;
        let flat: Vec<f32> = self.maps.iter().flatten().map(|&v| v as f32).collect();
        let t = Tensor::from_vec(flat, (self.maps.len(), h, w), &candle_core::Device::Cpu)?;
        let npy = dir.join(format!("{}.npy", self.view));
        t.write_npy(&npy)?;
        const SCALE: u32 = 16;
        for (i, map) in self.maps.iter().enumerate() {
            let max = map.iter().cloned().fold(0.0, f64::max).max(1e-12);
            let img = image::GrayImage::from_fn(w as u32 * SCALE, h as u32 * SCALE, |x, y| {
                let v = map[(y / SCALE) as usize * w + (x / SCALE) as usize] / max;
                image::Luma([(v * 255.0).round() as u8])
            });
            let png = dir.join(format!("{}_q{i:02}.png", self.view));
            img.save(&png).map_err(|e| Error::Format(format!("{}: {e}", png.display())))?;
        }
        Ok(())
    }
}

/// CSV with header `id,label,f0..f{d-1}`.
pub fn features_csv(f: &Features) -> String {
    let mut out = String::from("id,label");
    for j in 0..f.dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..f.len() {
        out.push_str(&format!("{i},{}", f.labels[i]));
        for v in f.row(i) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
