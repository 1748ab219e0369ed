use candle_core::{Tensor, D};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{encode_views, EncodedViews, ModelState};
use super::optim::{clip_gradients, collect_grads, ema_update};
use super::TrainConfig;
use crate::backbone::{moe_aux_loss, moe_aux_value, RoutingStats};
use crate::data::{correspondence_grids, make_views, GeoSample, TemporalIndices, View, ViewSet};
use crate::error::{invalid, Result};
use crate::fusion::{gcpl_augment, gcpl_update, region_index};
use crate::nn::ops::{l2_normalize, linear_at, scalar_f64, to_vec_f64};
use crate::nn::Weights;
use crate::objectives::{
    cell_majority_labels, cluster_objects, contrast, loss_ita, pixel_pairs, qsacl_aggregate, total_loss, ContrastHeads,
    Family, LossParts, RowPairs,
};

/// Augmented views of the samples drawn for one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub views: Vec<ViewSet>,
    /// GCPL region of each sample.
    pub regions: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

fn step_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ iter as u64)
}

/// Draws `batch_size` distinct samples and their views for step `iter`; a
/// pure function of the seed and the step.
pub fn build_batch(dataset: &[GeoSample], cfg: &TrainConfig, state: &ModelState, iter: usize) -> Result<Batch> {
    if dataset.is_empty() {
        return Err(invalid!("empty training set"));
    }
    let mut rng = step_rng(cfg.seed, iter);
    let n = cfg.batch_size.min(dataset.len());
    let indices = sample_indices(&mut rng, dataset.len(), n).into_vec();
    let g = &state.config.gcpl;
    let mut views = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    for &i in &indices {
        views.push(make_views(&dataset[i], &cfg.aug, &mut rng)?);
        regions.push(region_index(dataset[i].lon, dataset[i].lat, g.rows, g.cols)?);
    }
    Ok(Batch { indices, views, regions })
}

/// Loss value, its parts and everything the step needs afterwards.
pub struct LossBreakdown {
    pub total: Tensor,
    pub parts: LossParts,
    pub pixel: f64,
    pub object: f64,
    pub image: f64,
    /// Mean teacher logits per center family.
    pub center_means: Vec<(Family, Vec<f64>)>,
    pub routing: RoutingStats,
    /// Student fused global features `(2B, h, w, d)` before prototype augmentation.
    pub fused_globals: Tensor,
    pub skipped_pixel_pairs: usize,
}

/// Rows of one contrast level accumulated across feature families.
#[derive(Default)]
struct Level {
    student: Vec<Tensor>,
    teacher: Vec<Tensor>,
    s_rows: usize,
    t_rows: usize,
    pairs: RowPairs,
}

impl Level {
    /// Appends row blocks; returns their offsets.
    fn add(&mut self, s: Tensor, t: Tensor) -> Result<(usize, usize)> {
        let off = (self.s_rows, self.t_rows);
        self.s_rows += s.dim(0)?;
        self.t_rows += t.dim(0)?;
        self.student.push(s);
        self.teacher.push(t);
        Ok(off)
    }

    fn run(self, heads: &ContrastHeads) -> Result<Option<(Tensor, Vec<f64>)>> {
        if self.pairs.is_empty() {
            return Ok(None);
        }
        let s = Tensor::cat(&self.student, 0)?;
        let t = Tensor::cat(&self.teacher, 0)?;
        Ok(contrast(heads, &s, &t, &self.pairs)?.map(|o| (o.loss, o.teacher_logit_mean)))
    }
}

/// One family's student features for every view (`(V, T, N, d)`, globals first)
/// and teacher features for the globals.
struct FamilyFeatures {
    student_global: Tensor,
    student_local: Option<Tensor>,
    teacher_global: Tensor,
    grid_global: (usize, usize),
    grid_local: (usize, usize),
}

fn as_vtnd(x: &Tensor) -> Result<Tensor> {
    let (v, t, h, w, d) = x.dims5()?;
    Ok(x.reshape((v, t, h * w, d))?)
}

fn grid_of(x: &Tensor) -> Result<(usize, usize)> {
    let dims = x.dims();
    Ok((dims[dims.len() - 3], dims[dims.len() - 2]))
}

fn zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

/// Evaluates every loss for a batch under the given student and teacher weights.
pub fn compute_losses(student: &Weights, teacher: &Weights, state: &ModelState, batch: &Batch) -> Result<LossBreakdown> {
    let cfg = &state.config;
    let obj = &cfg.objectives;
    let (dtype, dev) = (state.dtype, &state.device);
    let nb = batch.len();
    if nb == 0 {
        return Err(invalid!("empty batch"));
    }
    let n_local = batch.views[0].local_views.len();
    if batch.views.iter().any(|v| v.global_views.len() != 2 || v.local_views.len() != n_local) {
        return Err(invalid!("every sample needs 2 global views and the same number of local views"));
    }
    let globals: Vec<&View> = batch.views.iter().flat_map(|v| v.global_views.iter()).collect();
    let locals: Vec<&View> = batch.views.iter().flat_map(|v| v.local_views.iter()).collect();
    let temporal = |global: bool, teacher: bool| -> Vec<&TemporalIndices> {
        let per = if global { 2 } else { n_local };
        batch
            .views
            .iter()
            .flat_map(|v| std::iter::repeat_n(if teacher { &v.teacher_temporal_indices } else { &v.student_temporal_indices }, per))
            .collect()
    };

    let sg = encode_views(student, &globals, &temporal(true, false), cfg, dtype, dev)?;
    let sl = if n_local > 0 { Some(encode_views(student, &locals, &temporal(false, false), cfg, dtype, dev)?) } else { None };
    let tg = encode_views(teacher, &globals, &temporal(true, true), cfg, dtype, dev)?;
    let tl = if n_local > 0 { Some(encode_views(teacher, &locals, &temporal(false, true), cfg, dtype, dev)?) } else { None };

    let mut routing = sg.routing.clone();
    if let Some(sl) = &sl {
        routing.merge(sl.routing.clone())?;
    }

    // Geo-context augmentation of the student's fused features.
    let augment = |enc: &EncodedViews, per: usize| -> Result<Tensor> {
        if !cfg.gcpl.enabled {
            return Ok(enc.fused.clone());
        }
        let protos: Vec<Tensor> = batch
            .regions
            .iter()
            .flat_map(|&r| std::iter::repeat_n(r, per))
            .map(|r| state.bank.region_tensor(r, dtype, dev))
            .collect::<Result<_>>()?;
        Ok(gcpl_augment(&student.scope("gcpl"), &enc.fused, &Tensor::stack(&protos, 0)?)?.0)
    };
    let fused_g = augment(&sg, 2)?;
    let fused_l = match &sl {
        Some(sl) => Some(augment(sl, n_local)?),
        None => None,
    };

    // Feature families: each modality plus the fused features.
    let mut families = Vec::new();
    for (m, x) in &sg.modalities {
        families.push(FamilyFeatures {
            student_global: as_vtnd(x)?,
            student_local: sl.as_ref().and_then(|e| e.modalities.get(m)).map(as_vtnd).transpose()?,
            teacher_global: as_vtnd(&tg.modalities[m])?,
            grid_global: grid_of(x)?,
            grid_local: sl.as_ref().and_then(|e| e.modalities.get(m)).map(grid_of).transpose()?.unwrap_or((0, 0)),
        });
    }
    families.push(FamilyFeatures {
        student_global: as_vtnd(&fused_g.unsqueeze(1)?)?,
        student_local: fused_l.as_ref().map(|f| as_vtnd(&f.unsqueeze(1)?)).transpose()?,
        teacher_global: as_vtnd(&tg.fused.unsqueeze(1)?)?,
        grid_global: grid_of(&fused_g)?,
        grid_local: fused_l.as_ref().map(grid_of).transpose()?.unwrap_or((0, 0)),
    });

    let views_per_sample = 2 + n_local;
    let pair_weight = 1.0 / (nb * (2 * views_per_sample - 2)) as f64;
    let (mut pix, mut img, mut objl) = (Level::default(), Level::default(), Level::default());
    let mut skipped = 0;
    let embed_s = student.get("objects.cluster_embed")?;
    let embed_t = teacher.get("objects.cluster_embed")?;

    for fam in &families {
        let (_, t, n_g, _) = fam.student_global.dims4()?;
        let n_l = fam.student_local.as_ref().map(|x| x.dim(2)).transpose()?.unwrap_or(0);
        let flat = |x: &Tensor| -> Result<Tensor> {
            let (v, t, n, d) = x.dims4()?;
            Ok(x.reshape((v * t * n, d))?)
        };
        // Student rows: all global blocks, then all local blocks.
        let mut s_parts = vec![flat(&fam.student_global)?];
        if let Some(l) = &fam.student_local {
            s_parts.push(flat(l)?);
        }
        let (s_off, t_off) = pix.add(Tensor::cat(&s_parts, 0)?, flat(&fam.teacher_global)?)?;
        let local_base = 2 * nb * t * n_g;

        let pooled = |x: &Tensor| -> Result<Tensor> {
            let (v, t, _, d) = x.dims4()?;
            Ok(x.mean(D::Minus2)?.reshape((v * t, d))?)
        };
        let mut s_img = vec![pooled(&fam.student_global)?];
        if let Some(l) = &fam.student_local {
            s_img.push(pooled(l)?);
        }
        let (si_off, ti_off) = img.add(Tensor::cat(&s_img, 0)?, pooled(&fam.teacher_global)?)?;

        let n_c = obj.n_clusters;
        let teacher_clusters = n_g >= n_c;
        let local_clusters = teacher_clusters && n_l >= n_c && fam.student_local.is_some();
        let (so_off, to_off) = if teacher_clusters {
            let cluster = |x: &Tensor, e: &Tensor| -> Result<Tensor> {
                let (v, t, n, d) = x.dims4()?;
                let (c, _) = cluster_objects(&x.reshape((v * t, n, d))?, e, obj.cluster_eps, obj.cluster_iters)?;
                Ok(c.reshape((v * t * n_c, d))?)
            };
            let mut s_obj = vec![cluster(&fam.student_global, embed_s)?];
            if local_clusters {
                s_obj.push(cluster(fam.student_local.as_ref().expect("checked"), embed_s)?);
            }
            let t_obj = cluster(&fam.teacher_global.detach(), &embed_t.detach())?;
            objl.add(Tensor::cat(&s_obj, 0)?, t_obj)?
        } else {
            (0, 0)
        };

        for (b, vs) in batch.views.iter().enumerate() {
            for sv in 0..views_per_sample {
                let is_global = sv < 2;
                let (view, n_s, grid_s) = if is_global {
                    (&vs.global_views[sv], n_g, fam.grid_global)
                } else {
                    (&vs.local_views[sv - 2], n_l, fam.grid_local)
                };
                // Row block of this student view at each level.
                let s_view = if is_global { b * 2 + sv } else { b * n_local + sv - 2 };
                let s_pix = s_off + if is_global { s_view * t * n_g } else { local_base + s_view * t * n_l };
                let s_img_row = si_off + if is_global { s_view * t } else { 2 * nb * t + s_view * t };
                let s_obj_row = so_off + if is_global { s_view * t * n_c } else { 2 * nb * t * n_c + s_view * t * n_c };
                for g in 0..2 {
                    if is_global && g == sv {
                        continue;
                    }
                    let t_view = b * 2 + g;
                    let corr = correspondence_grids(&view.ground_geometry(), grid_s, &vs.global_views[g].ground_geometry(), fam.grid_global);
                    if corr.is_empty() {
                        skipped += 1;
                    } else {
                        let mut p = pixel_pairs(t, n_s, n_g, &corr);
                        p.scale(pair_weight);
                        pix.pairs.extend(p, s_pix, t_off + t_view * t * n_g);
                    }
                    for f in 0..t {
                        img.pairs.push(s_img_row + f, ti_off + t_view * t + f, pair_weight / t as f64);
                    }
                    if teacher_clusters && (is_global || local_clusters) {
                        for f in 0..t {
                            for k in 0..n_c {
                                let w = pair_weight / (t * n_c) as f64;
                                objl.pairs.push(s_obj_row + f * n_c + k, to_off + (t_view * t + f) * n_c + k, w);
                            }
                        }
                    }
                }
            }
        }
    }

    let heads = |family: Family, name: &str| -> Result<ContrastHeads<'_>> {
        Ok(ContrastHeads {
            student: student.scope(name),
            teacher: teacher.scope(name),
            center: state.centers.tensor(family, dtype, dev)?,
            tau_s: obj.tau_student,
            tau_t: obj.tau_teacher,
        })
    };
    let like = &sg.fused;
    let mut center_means = Vec::new();
    let mut level = |lv: Level, family: Family| -> Result<Tensor> {
        match lv.run(&heads(family, "heads.mgcl")?)? {
            Some((loss, mean)) => {
                center_means.push((family, mean));
                Ok(loss)
            }
            None => zero(like),
        }
    };
    let pix_loss = level(pix, Family::Pixel)?;
    let obj_loss = level(objl, Family::Object)?;
    let img_loss = level(img, Family::Image)?;
    let mgcl = ((&pix_loss + &obj_loss)? + &img_loss)?;

    // Query-aggregated contrast between every global and local view.
    let qsacl = match (&fused_l, &tl) {
        (Some(fl), Some(tl)) => {
            let agg = |w: &Weights, x: &Tensor| -> Result<Tensor> {
                let (v, h, wd, d) = x.dims4()?;
                let (z, _) = qsacl_aggregate(&w.scope("qsacl"), &x.reshape((v, h * wd, d))?)?;
                let m = z.dim(1)?;
                Ok(z.reshape((v * m, d))?)
            };
            let m = obj.n_queries;
            let s_rows = Tensor::cat(&[agg(student, &fused_g)?, agg(student, fl)?], 0)?;
            let t_rows = Tensor::cat(&[agg(teacher, &tg.fused)?, agg(teacher, &tl.fused)?], 0)?;
            let mut pairs = RowPairs::default();
            let w = 1.0 / (2 * m * 2 * n_local * nb) as f64;
            let lbase = 2 * nb * m;
            for b in 0..nb {
                for g in 0..2 {
                    for l in 0..n_local {
                        let gr = (b * 2 + g) * m;
                        let lr = lbase + (b * n_local + l) * m;
                        for i in 0..m {
                            pairs.push(gr + i, lr + i, w);
                            pairs.push(lr + i, gr + i, w);
                        }
                    }
                }
            }
            let out = contrast(&heads(Family::Qsacl, "heads.qsacl")?, &s_rows, &t_rows, &pairs)?.expect("non-empty");
            center_means.push((Family::Qsacl, out.teacher_logit_mean));
            out.loss
        }
        _ => zero(like)?,
    };

    // Dense text alignment on the fused grid of every student view.
    let mut ita_rows = Vec::new();
    let mut labels = Vec::new();
    for (x, views) in [(Some(&fused_g), &globals), (fused_l.as_ref(), &locals)] {
        let Some(x) = x else { continue };
        let (v, h, wd, d) = x.dims4()?;
        ita_rows.push(x.reshape((v * h * wd, d))?);
        for view in views.iter() {
            labels.extend(cell_majority_labels(&view.labels, (h, wd), cfg.num_classes));
        }
    }
    let proj = l2_normalize(&linear_at(&student.root(), "ita.proj", &Tensor::cat(&ita_rows, 0)?)?, 1e-8)?;
    let ita = loss_ita(&proj, &labels, &state.text)?;

    let aux = match moe_aux_loss(&routing)? {
        Some(a) => a,
        None => zero(like)?,
    };
    let parts = LossParts { mgcl, ita, qsacl, aux };
    let total = total_loss(&parts, obj)?;
    Ok(LossBreakdown {
        total,
        pixel: scalar_f64(&pix_loss)?,
        object: scalar_f64(&obj_loss)?,
        image: scalar_f64(&img_loss)?,
        parts,
        center_means,
        routing,
        fused_globals: sg.fused.detach(),
        skipped_pixel_pairs: skipped,
    })
}

/// Per-step record written to the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iter: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub loss: f64,
    pub mgcl: f64,
    pub pixel: f64,
    pub object: f64,
    pub image: f64,
    pub ita: f64,
    pub qsacl: f64,
    pub aux: f64,
    pub grad_norm: f64,
    pub skipped_pixel_pairs: usize,
    pub moe_min_margin: f64,
    /// Routed fraction per expert, averaged over MoE layers.
    pub expert_load: Vec<f64>,
}

/// One optimization step on a prepared batch.
pub fn train_step(state: &mut ModelState, batch: &Batch, cfg: &TrainConfig) -> Result<Metrics> {
    let t = state.iter;
    let (lr, wd, momentum) = (cfg.lr(t), cfg.weight_decay(t), cfg.ema_momentum(t));
    let student = state.student.weights();
    let losses = compute_losses(&student, &state.teacher, state, batch)?;
    let loss = scalar_f64(&losses.total)?;
    if !loss.is_finite() {
        return Err(crate::Error::NonFinite(format!("loss at step {t}")));
    }
    let grads = losses.total.backward()?;
    let mut grads = collect_grads(&state.student, &grads)?;
    let grad_norm = clip_gradients(&mut grads, cfg.clip_norm)?;
    state.optimizer.apply(&state.student, &grads, lr, wd)?;
    ema_update(&mut state.teacher, &state.student.weights(), momentum)?;

    if state.config.gcpl.enabled {
        let g = &state.config.gcpl;
        let (v, h, w, d) = losses.fused_globals.dims4()?;
        let per_sample = to_vec_f64(&losses.fused_globals.reshape((v / 2, 2 * h * w * d))?)?;
        for (b, feats) in per_sample.chunks(2 * h * w * d).enumerate() {
            gcpl_update(feats, batch.regions[b], &mut state.bank, g.sinkhorn_eps, g.sinkhorn_iters)?;
        }
    }
    for (family, mean) in &losses.center_means {
        state.centers.update(*family, mean);
    }
    state.iter += 1;

    let mut expert_load = Vec::new();
    for r in losses.routing.layers.values() {
        let f = r.routed_fraction();
        if expert_load.is_empty() {
            expert_load = vec![0.0; f.len()];
        }
        expert_load.iter_mut().zip(f).for_each(|(a, b)| *a += b / losses.routing.layers.len() as f64);
    }
    Ok(Metrics {
        iter: t,
        lr,
        weight_decay: wd,
        ema_momentum: momentum,
        loss,
        mgcl: scalar_f64(&losses.parts.mgcl)?,
        pixel: losses.pixel,
        object: losses.object,
        image: losses.image,
        ita: scalar_f64(&losses.parts.ita)?,
        qsacl: scalar_f64(&losses.parts.qsacl)?,
        aux: moe_aux_value(&losses.routing),
        grad_norm,
        skipped_pixel_pairs: losses.skipped_pixel_pairs,
        moe_min_margin: if losses.routing.is_empty() { 0.0 } else { losses.routing.min_margin() },
        expert_load,
    })
}
