use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_specs, forward_backbone, resample_grid, BackboneConfig, RoutingStats};
use crate::data::{TemporalIndices, View};
use crate::error::{invalid, Result};
use crate::fusion::{fuse, fusion_specs, gcpl_specs, FusionConfig, GcplConfig, ModalitySeries, PrototypeBank};
use crate::modality::Modality;
use crate::nn::{ParamSpec, ParamStore, SpecBuilder, Weights};
use crate::objectives::{objective_specs, Centers, ObjectiveConfig, TextTable};

use super::optim::AdamW;
use super::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    pub gcpl: GcplConfig,
    pub objectives: ObjectiveConfig,
    /// Classes of the frozen text table.
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            gcpl: GcplConfig::default(),
            objectives: ObjectiveConfig::default(),
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fusion.validate(self.backbone.out_dim())?;
        self.gcpl.validate()?;
        self.objectives.validate()?;
        if self.num_classes == 0 {
            return Err(invalid!("num_classes must be at least 1"));
        }
        Ok(())
    }
}

/// Every trainable parameter of the model.
pub fn model_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.backbone.out_dim();
    let mut b = SpecBuilder::new();
    backbone_specs(&mut b, &cfg.backbone);
    fusion_specs(&mut b, d, &cfg.fusion);
    gcpl_specs(&mut b, d);
    objective_specs(&mut b, d, &cfg.objectives);
    b.finish()
}

/// Parameters mirrored by the EMA teacher: everything except the student-only
/// geo-context attention and text projection.
pub fn is_teacher_param(name: &str) -> bool {
    !name.starts_with("gcpl.") && !name.starts_with("ita.")
}

/// Student, teacher and the non-gradient state carried across steps.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub student: ParamStore,
    pub teacher: Weights,
    pub bank: PrototypeBank,
    pub centers: Centers,
    pub text: TextTable,
    pub optimizer: AdamW,
    /// Completed training steps.
    pub iter: usize,
    pub dtype: DType,
    pub device: Device,
}

impl ModelState {
    pub fn new(config: ModelConfig, train: &TrainConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let specs = model_specs(&config);
        let student = ParamStore::from_specs(&specs, train.seed, dtype, device)?;
        let teacher = teacher_from(&student.snapshot()?);
        let d = config.backbone.out_dim();
        let obj = &config.objectives;
        Ok(Self {
            bank: PrototypeBank::new(&config.gcpl, d, train.seed),
            centers: Centers::new(obj.head_out, obj.center_momentum),
            text: TextTable::random(config.num_classes, obj.ita_dim, obj.ita_tau, train.seed),
            optimizer: AdamW::new(train.beta1, train.beta2, train.adam_eps),
            iter: 0,
            dtype,
            device: device.clone(),
            config,
            student,
            teacher,
        })
    }

    /// Output width of the encoder.
    pub fn dim(&self) -> usize {
        self.config.backbone.out_dim()
    }
}

pub(crate) fn teacher_from(w: &Weights) -> Weights {
    Weights::new(w.iter().filter(|(k, _)| is_teacher_param(k)).map(|(k, t)| (k.clone(), t.clone())).collect())
}

/// Encoder outputs for a group of equally sized views.
#[derive(Debug, Clone)]
pub struct EncodedViews {
    /// Per-modality backbone grids `(V, T, h, w, d)` at native resolution.
    pub modalities: BTreeMap<Modality, Tensor>,
    /// Fused grids `(V, h, w, d)` on the MS output grid.
    pub fused: Tensor,
    pub routing: RoutingStats,
}

impl EncodedViews {
    pub fn fused_grid(&self) -> Result<(usize, usize)> {
        let (_, h, w, _) = self.fused.dims4()?;
        Ok((h, w))
    }
}

fn stack_hr(views: &[&View], dtype: DType, dev: &Device) -> Result<Tensor> {
    let imgs: Vec<_> = views.iter().map(|v| v.hr.as_ref().expect("checked").view()).collect();
    let a = ndarray::stack(Axis(0), &imgs).map_err(|e| invalid!("HR views differ in size: {e}"))?;
    let shape = a.shape().to_vec();
    Ok(Tensor::from_vec(a.into_raw_vec_and_offset().0, shape, dev)?.to_dtype(dtype)?)
}

fn stack_series(views: &[&View], m: Modality, temporal: &[&TemporalIndices], dtype: DType, dev: &Device) -> Result<(Tensor, Vec<Vec<i32>>)> {
    let mut slices = Vec::new();
    let mut days = Vec::with_capacity(views.len());
    for (v, ti) in views.iter().zip(temporal) {
        let frames = if m == Modality::Ms { &ti.ms } else { &ti.sar };
        let (series, vd) = match m {
            Modality::Ms => (v.ms.as_ref(), &v.ms_days),
            _ => (v.sar.as_ref(), &v.sar_days),
        };
        let series = series.expect("checked");
        for &f in frames {
            if f >= series.dim().0 {
                return Err(invalid!("{m} frame {f} outside {} frames", series.dim().0));
            }
            slices.push(series.slice(s![f, .., .., ..]));
        }
        days.push(frames.iter().map(|&f| vd[f]).collect());
    }
    let a = ndarray::stack(Axis(0), &slices).map_err(|e| invalid!("{m} views differ in size: {e}"))?;
    let shape = a.shape().to_vec();
    Ok((Tensor::from_vec(a.into_raw_vec_and_offset().0, shape, dev)?.to_dtype(dtype)?, days))
}

/// Encodes every modality of a group of views that share size and modality
/// set, then fuses them per location on the MS output grid. `temporal[i]`
/// selects the series frames of `views[i]`; every view must use the same count.
pub fn encode_views(
    w: &Weights,
    views: &[&View],
    temporal: &[&TemporalIndices],
    cfg: &ModelConfig,
    dtype: DType,
    dev: &Device,
) -> Result<EncodedViews> {
    let first = views.first().ok_or_else(|| invalid!("no views to encode"))?;
    let mods = first.modalities();
    if mods.is_empty() || views.iter().any(|v| v.modalities() != mods || v.size() != first.size()) {
        return Err(invalid!("views of one group must share size and a non-empty modality set"));
    }
    let nv = views.len();
    if temporal.len() != nv || temporal.iter().any(|t| t.ms.len() != temporal[0].ms.len() || t.sar.len() != temporal[0].sar.len()) {
        return Err(invalid!("temporal selections must match the views in count and length"));
    }
    let size = first.size();
    let grid = cfg.backbone.output_grid(Modality::Ms, size, size);
    let mut routing = RoutingStats::default();
    let mut modalities = BTreeMap::new();
    let mut series = Vec::with_capacity(mods.len());
    for m in mods {
        let (x, frames, days) = match m {
            Modality::Hr => (stack_hr(views, dtype, dev)?, 1, vec![Vec::new(); nv]),
            _ => {
                let frames = if m == Modality::Ms { temporal[0].ms.len() } else { temporal[0].sar.len() };
                let (x, days) = stack_series(views, m, temporal, dtype, dev)?;
                (x, frames, days)
            }
        };
        let out = forward_backbone(w, &x, m, &cfg.backbone)?;
        routing.merge(out.routing)?;
        let (_, h, wd, d) = out.output.data.dims4()?;
        modalities.insert(m, out.output.data.reshape((nv, frames, h, wd, d))?);
        let on_grid = resample_grid(&out.output.data, grid)?;
        series.push(ModalitySeries {
            modality: m,
            data: on_grid.reshape((nv, frames, grid.0, grid.1, d))?,
            days,
        });
    }
    let fused = fuse(&w.scope("fusion"), &series, &cfg.fusion)?.data;
    Ok(EncodedViews { modalities, fused, routing })
}

impl ModelConfig {
    /// Smallest configuration exercising every component; used by the gradient
    /// audit and quick tests.
    pub fn micro() -> Self {
        Self {
            backbone: BackboneConfig {
                base_dim: 8,
                depths: [1, 1, 1, 1],
                window_size: 8,
                head_dim: 8,
                mlp_ratio: 2,
                n_prompts: 2,
                moe_last: 2,
                n_experts: 2,
                top_k: 1,
                ..BackboneConfig::default()
            },
            fusion: FusionConfig { depth: 1, head_dim: 16, mlp_ratio: 2 },
            gcpl: GcplConfig { rows: 4, cols: 4, n_prototypes: 2, ..GcplConfig::default() },
            objectives: ObjectiveConfig {
                head_hidden: 16,
                head_out: 16,
                n_clusters: 2,
                n_queries: 2,
                ita_dim: 8,
                ..ObjectiveConfig::default()
            },
            num_classes: 4,
        }
    }
}
