use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GeoSample;
use crate::error::{invalid, Result};
use crate::modality::Modality;

/// Geometric record of how a view was cut from its source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewGeometry {
    /// `(x0, y0, w, h)` in source pixels of the owning modality.
    pub crop_box: [usize; 4],
    pub flip_h: bool,
    /// Counter-clockwise quarter turns in `0..4`.
    pub rotation_quarter_turns: u8,
    /// Output size / crop size.
    pub scale: f64,
}

impl ViewGeometry {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            crop_box: [0, 0, width, height],
            flip_h: false,
            rotation_quarter_turns: 0,
            scale: 1.0,
        }
    }

    /// Same geometry expressed in the pixel units of a modality `factor`
    /// times finer.
    pub fn scaled(&self, factor: usize) -> Self {
        let [x0, y0, w, h] = self.crop_box;
        Self {
            crop_box: [x0 * factor, y0 * factor, w * factor, h * factor],
            ..*self
        }
    }

    /// Maps normalized output coordinates `(u, v)` (x right, y down, both in
    /// `[0, 1]`) back to source pixel coordinates.
    pub fn to_source(&self, u: f64, v: f64) -> (f64, f64) {
        let (mut u, mut v) = (u, v);
        for _ in 0..self.rotation_quarter_turns % 4 {
            // Inverse of the counter-clockwise turn (u, v) -> (v, 1 - u).
            (u, v) = (1.0 - v, u);
        }
        if self.flip_h {
            u = 1.0 - u;
        }
        let [x0, y0, w, h] = self.crop_box;
        (x0 as f64 + u * w as f64, y0 as f64 + v * h as f64)
    }

    /// Forward map from source pixel coordinates to normalized output
    /// coordinates; values outside `[0, 1)` fall outside the view.
    pub fn from_source(&self, x: f64, y: f64) -> (f64, f64) {
        let [x0, y0, w, h] = self.crop_box;
        let mut u = (x - x0 as f64) / w as f64;
        let mut v = (y - y0 as f64) / h as f64;
        if self.flip_h {
            u = 1.0 - u;
        }
        for _ in 0..self.rotation_quarter_turns % 4 {
            (u, v) = (v, 1.0 - u);
        }
        (u, v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugSpec {
    pub n_local: usize,
    /// Area fraction range of global crops.
    pub global_scale: [f64; 2],
    /// Area fraction range of local crops.
    pub local_scale: [f64; 2],
    /// Output side of global views, in MS pixels.
    pub global_size: usize,
    /// Output side of local views, in MS pixels.
    pub local_size: usize,
    pub flip_prob: f64,
    pub rotate: bool,
    pub blur_prob: f64,
    /// Gaussian blur sigma range in HR pixels.
    pub blur_sigma: [f64; 2],
    pub solarize_prob: f64,
    pub jitter_prob: f64,
    /// Max relative brightness / contrast / saturation change.
    pub jitter_strength: f64,
    /// Fixed number of MS frames drawn per branch.
    pub ms_frames: usize,
    /// Fixed number of SAR frames drawn per branch.
    pub sar_frames: usize,
    /// Acquisition dates are perturbed by up to this many days.
    pub day_jitter: i32,
    pub local_modalities: Vec<Modality>,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self {
            n_local: 6,
            global_scale: [0.4, 1.0],
            local_scale: [0.05, 0.4],
            global_size: 8,
            local_size: 4,
            flip_prob: 0.5,
            rotate: true,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            solarize_prob: 0.2,
            jitter_prob: 0.8,
            jitter_strength: 0.4,
            ms_frames: 10,
            sar_frames: 5,
            day_jitter: 5,
            local_modalities: Modality::ALL.to_vec(),
        }
    }
}

impl AugSpec {
    /// Full-frame crops, no photometric or geometric change, first frames in order.
    pub fn identity(ms_size: usize, ms_frames: usize, sar_frames: usize) -> Self {
        Self {
            n_local: 1,
            global_scale: [1.0, 1.0],
            local_scale: [1.0, 1.0],
            global_size: ms_size,
            local_size: ms_size,
            flip_prob: 0.0,
            rotate: false,
            blur_prob: 0.0,
            blur_sigma: [0.0, 0.0],
            solarize_prob: 0.0,
            jitter_prob: 0.0,
            jitter_strength: 0.0,
            ms_frames,
            sar_frames,
            day_jitter: 0,
            local_modalities: Modality::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("global", self.global_scale), ("local", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(invalid!("{name} crop scale range [{lo}, {hi}] must lie in (0, 1]"));
            }
        }
        if self.n_local == 0 {
            return Err(invalid!("need at least one local view"));
        }
        if self.global_size == 0 || self.local_size == 0 {
            return Err(invalid!("view sizes must be positive"));
        }
        if self.ms_frames == 0 || self.sar_frames == 0 {
            return Err(invalid!("temporal sample sizes must be positive"));
        }
        if self.local_modalities.is_empty() {
            return Err(invalid!("local views need at least one modality"));
        }
        Ok(())
    }
}

/// One augmented crop of a sample. Series keep every source frame; the
/// branch-specific temporal subsets live in [`ViewSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub hr: Option<Array3<f32>>,
    pub ms: Option<Array4<f32>>,
    pub sar: Option<Array4<f32>>,
    /// Labels resampled (nearest) onto the MS grid of the view.
    pub labels: Array2<i32>,
    pub ms_days: Vec<i32>,
    pub sar_days: Vec<i32>,
    pub geometry: BTreeMap<Modality, ViewGeometry>,
}

impl View {
    pub fn has(&self, m: Modality) -> bool {
        match m {
            Modality::Hr => self.hr.is_some(),
            Modality::Ms => self.ms.is_some(),
            Modality::Sar => self.sar.is_some(),
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        Modality::ALL.into_iter().filter(|&m| self.has(m)).collect()
    }

    /// Geometry in MS pixel units (the shared ground frame).
    pub fn ground_geometry(&self) -> ViewGeometry {
        self.geometry
            .get(&Modality::Ms)
            .or_else(|| self.geometry.get(&Modality::Sar))
            .copied()
            .unwrap_or_else(|| {
                let hr = self.geometry[&Modality::Hr];
                let ratio = self.hr_ratio();
                let [x0, y0, w, h] = hr.crop_box;
                ViewGeometry {
                    crop_box: [x0 / ratio, y0 / ratio, w / ratio, h / ratio],
                    ..hr
                }
            })
    }

    fn hr_ratio(&self) -> usize {
        match (&self.hr, self.labels.dim().0) {
            (Some(hr), n) if n > 0 => hr.dim().0 / n,
            _ => 1,
        }
    }

    /// Output side in MS pixels.
    pub fn size(&self) -> usize {
        self.labels.dim().0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TemporalIndices {
    pub ms: Vec<usize>,
    pub sar: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub global_views: Vec<View>,
    pub local_views: Vec<View>,
    pub student_temporal_indices: TemporalIndices,
    pub teacher_temporal_indices: TemporalIndices,
}

impl ViewSet {
    pub fn views(&self) -> impl Iterator<Item = &View> {
        self.global_views.iter().chain(self.local_views.iter())
    }
}

fn crop_side(n: usize, [lo, hi]: [f64; 2]) -> Result<(usize, usize)> {
    let smin = ((lo.sqrt() * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let smax = ((hi.sqrt() * n as f64) + 1e-9).floor() as usize;
    if smin > smax.min(n) {
        return Err(invalid!(
            "no square crop of a {n}-pixel source has area fraction in [{lo}, {hi}]"
        ));
    }
    Ok((smin, smax.min(n)))
}

fn draw_frames<R: Rng>(total: usize, want: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = if total >= want {
        sample(rng, total, want).into_vec()
    } else {
        let mut v: Vec<usize> = (0..total).collect();
        v.extend((total..want).map(|_| rng.random_range(0..total)));
        v
    };
    idx.sort_unstable();
    idx
}

/// Builds 2 global and `aug.n_local` local views of a sample.
pub fn make_views<R: Rng>(sample: &GeoSample, aug: &AugSpec, rng: &mut R) -> Result<ViewSet> {
    aug.validate()?;
    let n = sample.labels.dim().0;
    let global_sides = crop_side(n, aug.global_scale)?;
    let local_sides = crop_side(n, aug.local_scale)?;

    let global_views = (0..2)
        .map(|_| make_view(sample, aug, global_sides, aug.global_size, &Modality::ALL, rng))
        .collect::<Result<Vec<_>>>()?;
    let local_views = (0..aug.n_local)
        .map(|_| make_view(sample, aug, local_sides, aug.local_size, &aug.local_modalities, rng))
        .collect::<Result<Vec<_>>>()?;

    let (tm, ts) = (sample.ms_frames(), sample.sar_frames());
    let student = TemporalIndices {
        ms: draw_frames(tm, aug.ms_frames, rng),
        sar: draw_frames(ts, aug.sar_frames, rng),
    };
    let teacher = TemporalIndices {
        ms: draw_frames(tm, aug.ms_frames, rng),
        sar: draw_frames(ts, aug.sar_frames, rng),
    };
    Ok(ViewSet {
        global_views,
        local_views,
        student_temporal_indices: student,
        teacher_temporal_indices: teacher,
    })
}

fn make_view<R: Rng>(
    sample: &GeoSample,
    aug: &AugSpec,
    (smin, smax): (usize, usize),
    out: usize,
    modalities: &[Modality],
    rng: &mut R,
) -> Result<View> {
    let n = sample.labels.dim().0;
    let ratio = sample.hr_ratio();
    let side = rng.random_range(smin..=smax);
    let x0 = rng.random_range(0..=n - side);
    let y0 = rng.random_range(0..=n - side);
    let flip_h = rng.random_bool(aug.flip_prob);
    let rot = if aug.rotate { rng.random_range(0..4u8) } else { 0 };
    let ground = ViewGeometry {
        crop_box: [x0, y0, side, side],
        flip_h,
        rotation_quarter_turns: rot,
        scale: out as f64 / side as f64,
    };

    let mut geometry = BTreeMap::new();
    let mut view = View {
        hr: None,
        ms: None,
        sar: None,
        labels: orient2(&crop_labels(&sample.labels, &ground, out), &ground),
        ms_days: Vec::new(),
        sar_days: Vec::new(),
        geometry: BTreeMap::new(),
    };

    for &m in modalities {
        match m {
            Modality::Hr => {
                let g = ground.scaled(ratio);
                let mut img = orient3(&crop_resize(sample.hr.view(), &g, out * ratio), &g);
                photometric(&mut img, aug, rng);
                view.hr = Some(img);
                geometry.insert(m, g);
            }
            Modality::Ms | Modality::Sar => {
                let series = if m == Modality::Ms { &sample.ms } else { &sample.sar };
                let frames: Vec<Array3<f32>> = series
                    .axis_iter(Axis(0))
                    .map(|f| orient3(&crop_resize(f, &ground, out), &ground))
                    .collect();
                let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
                let stacked = ndarray::stack(Axis(0), &views).expect("uniform frame shapes");
                let days = if m == Modality::Ms { sample.ms_days() } else { sample.sar_days() };
                let jittered = days
                    .iter()
                    .map(|&d| d + rng.random_range(-aug.day_jitter..=aug.day_jitter))
                    .collect();
                if m == Modality::Ms {
                    view.ms = Some(stacked);
                    view.ms_days = jittered;
                } else {
                    view.sar = Some(stacked);
                    view.sar_days = jittered;
                }
                geometry.insert(m, ground);
            }
        }
    }
    view.geometry = geometry;
    Ok(view)
}

/// Bilinear crop-and-resize sampling output pixel centers.
pub fn crop_resize(img: ArrayView3<f32>, g: &ViewGeometry, out: usize) -> Array3<f32> {
    let (h, w, c) = img.dim();
    let [x0, y0, cw, ch] = g.crop_box;
    let sx = cw as f64 / out as f64;
    let sy = ch as f64 / out as f64;
    let mut res = Array3::<f32>::zeros((out, out, c));
    for oy in 0..out {
        let fy = (y0 as f64 + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let iy = fy.floor() as usize;
        let ty = (fy - iy as f64) as f32;
        let iy1 = (iy + 1).min(h - 1);
        for ox in 0..out {
            let fx = (x0 as f64 + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let ix = fx.floor() as usize;
            let tx = (fx - ix as f64) as f32;
            let ix1 = (ix + 1).min(w - 1);
            for k in 0..c {
                let top = img[[iy, ix, k]] * (1.0 - tx) + img[[iy, ix1, k]] * tx;
                let bot = img[[iy1, ix, k]] * (1.0 - tx) + img[[iy1, ix1, k]] * tx;
                res[[oy, ox, k]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    res
}

fn crop_labels(labels: &Array2<i32>, g: &ViewGeometry, out: usize) -> Array2<i32> {
    let (h, w) = labels.dim();
    let [x0, y0, cw, ch] = g.crop_box;
    Array2::from_shape_fn((out, out), |(oy, ox)| {
        let y = (y0 as f64 + (oy as f64 + 0.5) * ch as f64 / out as f64).floor() as usize;
        let x = (x0 as f64 + (ox as f64 + 0.5) * cw as f64 / out as f64).floor() as usize;
        labels[[y.min(h - 1), x.min(w - 1)]]
    })
}

/// Applies flip then counter-clockwise quarter turns to a square `(n, n, c)` array.
pub fn orient3(img: &Array3<f32>, g: &ViewGeometry) -> Array3<f32> {
    let (n, _, c) = img.dim();
    let turns = g.rotation_quarter_turns % 4;
    Array3::from_shape_fn((n, n, c), |(y, x, k)| {
        let (sx, sy) = inverse_pixel(x, y, n, g.flip_h, turns);
        img[[sy, sx, k]]
    })
}

fn orient2(img: &Array2<i32>, g: &ViewGeometry) -> Array2<i32> {
    let (n, _) = img.dim();
    let turns = g.rotation_quarter_turns % 4;
    Array2::from_shape_fn((n, n), |(y, x)| {
        let (sx, sy) = inverse_pixel(x, y, n, g.flip_h, turns);
        img[[sy, sx]]
    })
}

/// Pixel-index form of [`ViewGeometry::to_source`] restricted to the
/// flip/rotation part: output pixel `(x, y)` → pre-orientation pixel.
fn inverse_pixel(x: usize, y: usize, n: usize, flip: bool, turns: u8) -> (usize, usize) {
    let (mut x, mut y) = (x, y);
    for _ in 0..turns {
        // u = 1 - v', v = u'  in pixel indices.
        (x, y) = (n - 1 - y, x);
    }
    if flip {
        x = n - 1 - x;
    }
    (x, y)
}

fn photometric<R: Rng>(img: &mut Array3<f32>, aug: &AugSpec, rng: &mut R) {
    if rng.random_bool(aug.jitter_prob) {
        let s = aug.jitter_strength as f32;
        let brightness = 1.0 + rng.random_range(-s..=s);
        let contrast = 1.0 + rng.random_range(-s..=s);
        let saturation = 1.0 + rng.random_range(-s..=s);
        img.mapv_inplace(|v| v * brightness);
        let mean = img.mean().unwrap_or(0.0);
        img.mapv_inplace(|v| (v - mean) * contrast + mean);
        for mut px in img.lanes_mut(Axis(2)) {
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            px.mapv_inplace(|v| gray + (v - gray) * saturation);
        }
        img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    if rng.random_bool(aug.blur_prob) {
        let sigma = rng.random_range(aug.blur_sigma[0]..=aug.blur_sigma[1].max(aug.blur_sigma[0]));
        gaussian_blur(img, sigma);
    }
    if rng.random_bool(aug.solarize_prob) {
        img.mapv_inplace(|v| if v >= 0.5 { 1.0 - v } else { v });
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &mut Array3<f32>, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let z: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / z).collect();
    let (h, w, c) = img.dim();
    let src = img.clone();
    let mut tmp = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + j as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[[y, xx, k]];
                }
                tmp[[y, x, k]] = acc;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let mut acc = 0.0;
                for (j, kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + j as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[[yy, x, k]];
                }
                img[[y, x, k]] = acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> GeoSample {
        let spec = DatasetSpec { count: 1, ms_size: 16, seed: 9, ..Default::default() };
        generate_dataset(&spec).unwrap().remove(0)
    }

    #[test]
    fn default_multicrop_counts() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vs = make_views(&s, &AugSpec::default(), &mut rng).unwrap();
        assert_eq!(vs.global_views.len(), 2);
        assert_eq!(vs.local_views.len(), 6);
        assert_eq!(vs.student_temporal_indices.ms.len(), 10);
        assert_eq!(vs.teacher_temporal_indices.sar.len(), 5);
        for v in vs.views() {
            for m in v.modalities() {
                assert!(v.geometry.contains_key(&m));
            }
        }
        let g = &vs.global_views[0];
        assert_eq!(g.hr.as_ref().unwrap().dim(), (64, 64, 3));
        assert_eq!(g.ms.as_ref().unwrap().dim(), (12, 8, 8, 10));
        assert_eq!(g.labels.dim(), (8, 8));
        let l = &vs.local_views[0];
        assert_eq!(l.hr.as_ref().unwrap().dim(), (32, 32, 3));
    }

    #[test]
    fn crop_areas_respect_ranges() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let vs = make_views(&s, &AugSpec::default(), &mut rng).unwrap();
            for v in &vs.global_views {
                let [_, _, w, h] = v.ground_geometry().crop_box;
                assert!((w * h) as f64 / 256.0 >= 0.4);
            }
            for v in &vs.local_views {
                let [x0, y0, w, h] = v.ground_geometry().crop_box;
                let a = (w * h) as f64 / 256.0;
                assert!((0.05..=0.4).contains(&a), "{a}");
                assert!(x0 + w <= 16 && y0 + h <= 16);
            }
        }
    }

    #[test]
    fn identity_augmentation_preserves_pixels() {
        let s = sample();
        let aug = AugSpec::identity(16, 12, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs = make_views(&s, &aug, &mut rng).unwrap();
        let v = &vs.global_views[0];
        assert_eq!(v.hr.as_ref().unwrap(), &s.hr);
        assert_eq!(v.ms.as_ref().unwrap(), &s.ms);
        assert_eq!(v.sar.as_ref().unwrap(), &s.sar);
        assert_eq!(v.labels, s.labels);
        assert_eq!(v.ms_days, s.ms_days());
    }

    #[test]
    fn same_seed_same_views() {
        let s = sample();
        let a = make_views(&s, &AugSpec::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_views(&s, &AugSpec::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_impossible_crop_ranges() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = AugSpec { local_scale: [0.0, 0.3], ..Default::default() };
        assert!(make_views(&s, &bad, &mut rng).is_err());
        let bad = AugSpec { global_scale: [0.5, 1.5], ..Default::default() };
        assert!(make_views(&s, &bad, &mut rng).is_err());
        // Between 1/256 and 2/256 no integer square fits a 16-pixel source.
        let bad = AugSpec { local_scale: [0.0045, 0.0075], ..Default::default() };
        assert!(make_views(&s, &bad, &mut rng).is_err());
    }

    #[test]
    fn orientation_matches_coordinate_maps() {
        // A single marked pixel must land where `from_source` says it does.
        let n = 6;
        let mut img = Array3::<f32>::zeros((n, n, 1));
        img[[1, 4, 0]] = 1.0; // (x=4, y=1)
        for flip in [false, true] {
            for turns in 0..4u8 {
                let g = ViewGeometry { crop_box: [0, 0, n, n], flip_h: flip, rotation_quarter_turns: turns, scale: 1.0 };
                let out = orient3(&img, &g);
                let (u, v) = g.from_source(4.5, 1.5);
                let (x, y) = ((u * n as f64).floor() as usize, (v * n as f64).floor() as usize);
                assert_eq!(out[[y, x, 0]], 1.0, "flip={flip} turns={turns}");
                let (sx, sy) = g.to_source((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
                assert!((sx - 4.5).abs() < 1e-12 && (sy - 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn photometric_never_changes_shapes_or_labels() {
        let s = sample();
        let aug = AugSpec { blur_prob: 1.0, solarize_prob: 1.0, jitter_prob: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vs = make_views(&s, &aug, &mut rng).unwrap();
        let plain = AugSpec { blur_prob: 0.0, solarize_prob: 0.0, jitter_prob: 0.0, ..Default::default() };
        let vs2 = make_views(&s, &plain, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for (a, b) in vs.views().zip(vs2.views()) {
            assert_eq!(a.hr.as_ref().unwrap().dim(), b.hr.as_ref().unwrap().dim());
            assert!(a.labels.iter().all(|&l| (0..4).contains(&l)));
            assert!(a.hr.as_ref().unwrap().iter().all(|v| v.is_finite()));
        }
    }
}
