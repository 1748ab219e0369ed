use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One geo-aligned multi-modal record.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoSample {
    /// `(H_hr, W_hr, 3)` reflectance in `[0, 1]`.
    pub hr: Array3<f32>,
    /// `(T_ms, H_ms, W_ms, 10)`.
    pub ms: Array4<f32>,
    /// `(T_sar, H_sar, W_sar, 2)`.
    pub sar: Array4<f32>,
    /// `(H_ms, W_ms)` class ids.
    pub labels: Array2<i32>,
    pub lon: f64,
    pub lat: f64,
    /// Day offsets, MS frames first, then SAR frames.
    pub acquisition_days: Vec<i32>,
}

impl GeoSample {
    pub fn ms_frames(&self) -> usize {
        self.ms.dim().0
    }

    pub fn sar_frames(&self) -> usize {
        self.sar.dim().0
    }

    pub fn ms_days(&self) -> &[i32] {
        &self.acquisition_days[..self.ms_frames()]
    }

    pub fn sar_days(&self) -> &[i32] {
        &self.acquisition_days[self.ms_frames()..]
    }

    /// `H_hr / H_ms`.
    pub fn hr_ratio(&self) -> usize {
        self.hr.dim().0 / self.labels.dim().0.max(1)
    }

    /// Most frequent label, lowest id on ties.
    pub fn majority_label(&self, num_classes: usize) -> usize {
        let mut counts = vec![0usize; num_classes.max(1)];
        for &l in self.labels.iter() {
            if (l as usize) < counts.len() {
                counts[l as usize] += 1;
            }
        }
        let mut best = 0;
        for (k, &c) in counts.iter().enumerate() {
            if c > counts[best] {
                best = k;
            }
        }
        best
    }

    /// Checks the structural invariants of a record.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (hh, hw, hc) = self.hr.dim();
        let (tm, mh, mw, mc) = self.ms.dim();
        let (ts, sh, sw, sc) = self.sar.dim();
        if hc != 3 || mc != 10 || sc != 2 {
            return Err(invalid!("channel counts must be 3/10/2, got {hc}/{mc}/{sc}"));
        }
        if tm == 0 || ts == 0 {
            return Err(invalid!("series must have at least one frame"));
        }
        if self.labels.dim() != (mh, mw) || (sh, sw) != (mh, mw) {
            return Err(invalid!("labels, MS and SAR grids must coincide"));
        }
        if mh == 0 || mw == 0 || hh % mh != 0 || hw % mw != 0 || hh / mh != hw / mw {
            return Err(invalid!("HR size {hh}x{hw} is not an integer multiple of MS size {mh}x{mw}"));
        }
        if self.acquisition_days.len() != tm + ts {
            return Err(invalid!("expected {} acquisition days", tm + ts));
        }
        if self.labels.iter().any(|&l| l < 0 || l as usize >= num_classes) {
            return Err(invalid!("label id outside [0, {num_classes})"));
        }
        let finite = self.hr.iter().chain(self.ms.iter()).chain(self.sar.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(invalid!("non-finite channel value"));
        }
        if !(-180.0..180.0).contains(&self.lon) || !(-90.0..90.0).contains(&self.lat) {
            return Err(invalid!("geo-location out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub count: usize,
    pub num_classes: usize,
    pub ms_size: usize,
    /// HR pixels per MS pixel along each axis (8 keeps backbone grids aligned).
    pub hr_ratio: usize,
    pub ms_frames: usize,
    pub sar_frames: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 128,
            num_classes: 4,
            ms_size: 16,
            hr_ratio: 8,
            ms_frames: 12,
            sar_frames: 6,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(invalid!("count must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(invalid!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.ms_size == 0 || self.hr_ratio == 0 || self.ms_frames == 0 || self.sar_frames == 0 {
            return Err(invalid!("sizes and frame counts must be positive"));
        }
        Ok(())
    }

    pub fn hr_size(&self) -> usize {
        self.ms_size * self.hr_ratio
    }
}

/// Seed of the per-class signatures. Fixed so that datasets drawn with
/// different seeds agree on what each class looks like.
const SIGNATURE_SEED: u64 = 0x5EED_C1A5;

/// Per-class channel signatures shared by every scene.
#[derive(Debug, Clone)]
struct Signatures {
    hr: Vec<[f32; 3]>,
    ms: Vec<[f32; 10]>,
    sar: Vec<[f32; 2]>,
    phase: Vec<f32>,
}

impl Signatures {
    fn new(num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut hr = Vec::with_capacity(num_classes);
        let mut ms = Vec::with_capacity(num_classes);
        let mut sar = Vec::with_capacity(num_classes);
        let mut phase = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            hr.push(std::array::from_fn(|_| rng.random_range(0.15f32..0.85)));
            ms.push(std::array::from_fn(|_| rng.random_range(0.05f32..0.65)));
            sar.push(std::array::from_fn(|_| rng.random_range(0.1f32..0.9)));
            phase.push(rng.random_range(0.0f32..std::f32::consts::TAU));
        }
        Self { hr, ms, sar, phase }
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    class: usize,
}

/// Smooth per-class score field over MS-pixel coordinates.
struct Scene {
    dominant: usize,
    blobs: Vec<Blob>,
    num_classes: usize,
}

impl Scene {
    const BASE: f64 = 0.45;
    const SHARPNESS: f64 = 12.0;

    fn scores(&self, x: f64, y: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        out[self.dominant] = Self::BASE;
        for b in &self.blobs {
            let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
            out[b.class] += (-d2 / (2.0 * b.radius * b.radius)).exp();
        }
    }

    /// Soft class weights (for smooth blob boundaries) and the hard label.
    fn weights(&self, x: f64, y: f64, scratch: &mut [f64]) -> usize {
        self.scores(x, y, scratch);
        let mut best = 0;
        for k in 1..self.num_classes {
            if scratch[k] > scratch[best] {
                best = k;
            }
        }
        let m = scratch[best];
        let mut z = 0.0;
        for v in scratch.iter_mut() {
            *v = ((*v - m) * Self::SHARPNESS).exp();
            z += *v;
        }
        scratch.iter_mut().for_each(|v| *v /= z);
        best
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1))
}

/// Deterministic synthetic geo-aligned dataset: a pure function of `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<GeoSample>> {
    spec.validate()?;
    let mut sig_rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
    let sigs = Signatures::new(spec.num_classes, &mut sig_rng);
    Ok((0..spec.count).map(|i| generate_sample(spec, &sigs, i)).collect())
}

fn generate_sample(spec: &DatasetSpec, sigs: &Signatures, index: usize) -> GeoSample {
    let mut rng = sample_rng(spec.seed, index);
    let k = spec.num_classes;
    let n = spec.ms_size;
    let r = spec.hr_ratio;
    let nf = n as f64;

    let dominant = rng.random_range(0..k);
    let n_blobs = rng.random_range(2..=5);
    let blobs = (0..n_blobs)
        .map(|_| Blob {
            cx: rng.random_range(0.0..nf),
            cy: rng.random_range(0.0..nf),
            radius: rng.random_range(0.08..0.22) * nf,
            class: rng.random_range(0..k),
        })
        .collect();
    let scene = Scene {
        dominant,
        blobs,
        num_classes: k,
    };

    // Scene-level nuisance: illumination gain and per-band offsets.
    let gain = rng.random_range(0.75f32..1.25);
    let noise = Normal::new(0.0f32, 0.03).unwrap();
    let mut w = vec![0.0; k];

    let mut labels = Array2::<i32>::zeros((n, n));
    let mut ms_weights = vec![0.0f32; n * n * k];
    for y in 0..n {
        for x in 0..n {
            let label = scene.weights(x as f64 + 0.5, y as f64 + 0.5, &mut w);
            labels[[y, x]] = label as i32;
            for c in 0..k {
                ms_weights[(y * n + x) * k + c] = w[c] as f32;
            }
        }
    }

    let hn = n * r;
    let mut hr = Array3::<f32>::zeros((hn, hn, 3));
    for y in 0..hn {
        for x in 0..hn {
            scene.weights((x as f64 + 0.5) / r as f64, (y as f64 + 0.5) / r as f64, &mut w);
            for ch in 0..3 {
                let mut v = 0.0f32;
                for c in 0..k {
                    v += w[c] as f32 * sigs.hr[c][ch];
                }
                let v = v * gain + noise.sample(&mut rng);
                hr[[y, x, ch]] = v.clamp(0.0, 1.0);
            }
        }
    }

    let mut days = Vec::with_capacity(spec.ms_frames + spec.sar_frames);
    let mut ms_days: Vec<i32> = (0..spec.ms_frames).map(|_| rng.random_range(0..730)).collect();
    ms_days.sort_unstable();
    let mut sar_days: Vec<i32> = (0..spec.sar_frames).map(|_| rng.random_range(0..730)).collect();
    sar_days.sort_unstable();

    let season = |day: i32, class: usize| -> f32 {
        (std::f32::consts::TAU * day as f32 / 365.0 + sigs.phase[class]).sin()
    };

    let mut ms = Array4::<f32>::zeros((spec.ms_frames, n, n, 10));
    for (t, &day) in ms_days.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                let wv = &ms_weights[(y * n + x) * k..(y * n + x + 1) * k];
                for ch in 0..10 {
                    let mut v = 0.0f32;
                    for c in 0..k {
                        v += wv[c] * sigs.ms[c][ch] * (1.0 + 0.15 * season(day, c));
                    }
                    ms[[t, y, x, ch]] = (v * gain + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
    }

    let speckle = Normal::new(0.0f32, 0.08).unwrap();
    let mut sar = Array4::<f32>::zeros((spec.sar_frames, n, n, 2));
    for (t, &day) in sar_days.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                let wv = &ms_weights[(y * n + x) * k..(y * n + x + 1) * k];
                for ch in 0..2 {
                    let mut v = 0.0f32;
                    for c in 0..k {
                        v += wv[c] * sigs.sar[c][ch] * (1.0 + 0.1 * season(day, c));
                    }
                    sar[[t, y, x, ch]] = v * (1.0 + speckle.sample(&mut rng));
                }
            }
        }
    }

    days.extend_from_slice(&ms_days);
    days.extend_from_slice(&sar_days);

    GeoSample {
        hr,
        ms,
        sar,
        labels,
        lon: rng.random_range(-180.0..180.0),
        lat: rng.random_range(-90.0..90.0),
        acquisition_days: days,
    }
}
