use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{is_teacher_param, model_specs, ModelConfig, ModelState};
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::fusion::PrototypeBank;
use crate::nn::ops::to_vec_f64;
use crate::nn::{ParamStore, Weights};
use crate::objectives::{Centers, Family, TextTable};

pub const CHECKPOINT_MAGIC: &[u8] = b"MMCK1\n";
const VERSION: u32 = 1;
const DIGEST: usize = 32;

/// Which weight set an evaluation reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    #[default]
    Teacher,
    Student,
}

impl FromStr for Branch {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "teacher" => Ok(Branch::Teacher),
            "student" => Ok(Branch::Student),
            other => Err(format!("unknown branch `{other}` (expected teacher or student)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: u64,
    nbytes: u64,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    iter: usize,
    config: ModelConfig,
    text_tau: f64,
    tensors: Vec<TensorEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn f32_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect()
}

/// Serializes student, teacher, prototype bank, centers and text table as float32.
pub fn encode_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, bytes: Vec<u8>| {
        tensors.push(TensorEntry {
            name,
            dtype: "float32".into(),
            shape,
            offset: blob.len() as u64,
            nbytes: bytes.len() as u64,
            sha256: hex(&Sha256::digest(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    };
    for (name, var) in state.student.iter() {
        let t = var.as_tensor();
        push(format!("student/{name}"), t.dims().to_vec(), f32_bytes(to_vec_f64(t)?));
    }
    for (name, t) in state.teacher.iter() {
        push(format!("teacher/{name}"), t.dims().to_vec(), f32_bytes(to_vec_f64(t)?));
    }
    let bank = &state.bank;
    let bank_bytes = bank.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    push("gcpl/prototypes".into(), vec![bank.n_regions(), bank.n_prototypes, bank.dim], bank_bytes);
    for (family, values) in &state.centers.values {
        push(format!("centers/{family}"), vec![values.len()], f32_bytes(values.iter().copied()));
    }
    push("text/table".into(), vec![state.text.classes, state.text.dim], f32_bytes(state.text.table.iter().copied()));

    let header = Header { version: VERSION, iter: state.iter, config: state.config.clone(), text_tau: state.text.tau, tensors };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header.len() + blob.len() + DIGEST);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn shape_err(name: &str, expected: &[usize], found: &[usize]) -> Error {
    Error::ShapeMismatch { name: name.into(), expected: expected.to_vec(), found: found.to_vec() }
}

/// Parses a checkpoint. Checks run in order: magic, header, version, declared
/// shapes against the configured model, blob extents, whole-file checksum,
/// per-tensor checksums.
pub fn decode_checkpoint(bytes: &[u8], dtype: DType, device: &Device) -> Result<ModelState> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing MMCK1 magic".into()));
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    if rest.len() < 8 {
        return Err(Error::Truncated("header length prefix".into()));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(Error::Truncated("header".into()));
    }
    let raw: serde_json::Value = serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::Format(format!("header: {e}")))?;
    let version = raw.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Format("header has no version".into()))?;
    if version != VERSION as u64 {
        return Err(Error::Version { expected: VERSION, found: version as u32 });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| Error::Format(format!("header: {e}")))?;
    header.config.validate()?;

    let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for spec in model_specs(&header.config) {
        if is_teacher_param(&spec.name) {
            expected.insert(format!("teacher/{}", spec.name), spec.shape.clone());
        }
        expected.insert(format!("student/{}", spec.name), spec.shape);
    }
    let (g, d) = (&header.config.gcpl, header.config.backbone.out_dim());
    expected.insert("gcpl/prototypes".into(), vec![g.rows * g.cols, g.n_prototypes, d]);
    for f in Family::ALL {
        expected.insert(format!("centers/{}", f.name()), vec![header.config.objectives.head_out]);
    }
    expected.insert("text/table".into(), vec![header.config.num_classes, header.config.objectives.ita_dim]);

    let mut seen = BTreeMap::new();
    for e in &header.tensors {
        let want = expected.get(&e.name).ok_or_else(|| Error::Format(format!("unexpected tensor `{}`", e.name)))?;
        if e.dtype != "float32" {
            return Err(Error::Format(format!("`{}` has dtype {}", e.name, e.dtype)));
        }
        if &e.shape != want {
            return Err(shape_err(&e.name, want, &e.shape));
        }
        let numel: usize = e.shape.iter().product();
        if numel as u64 * 4 != e.nbytes {
            return Err(shape_err(&e.name, &[e.nbytes as usize / 4], &[numel]));
        }
        seen.insert(e.name.clone(), e);
    }
    if let Some(missing) = expected.keys().find(|k| !seen.contains_key(*k)) {
        return Err(Error::MissingParam(missing.clone()));
    }

    let body_end = CHECKPOINT_MAGIC.len() + 8 + hlen;
    let blob_len = header.tensors.iter().map(|e| e.offset + e.nbytes).max().unwrap_or(0) as usize;
    if bytes.len() < body_end + blob_len + DIGEST {
        return Err(Error::Truncated(format!("{} of {} bytes", bytes.len(), body_end + blob_len + DIGEST)));
    }
    let file_end = bytes.len() - DIGEST;
    if Sha256::digest(&bytes[..file_end]).as_slice() != &bytes[file_end..] {
        return Err(Error::Checksum("whole file".into()));
    }
    let blob = &bytes[body_end..file_end];

    let mut values: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for e in &header.tensors {
        let slice = blob
            .get(e.offset as usize..(e.offset + e.nbytes) as usize)
            .ok_or_else(|| Error::Truncated(e.name.clone()))?;
        if hex(&Sha256::digest(slice)) != e.sha256 {
            return Err(Error::Checksum(e.name.clone()));
        }
        values.insert(e.name.clone(), slice.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
    }

    let tensor = |name: &str, shape: &[usize]| -> Result<Tensor> {
        Ok(Tensor::from_slice(&values[name], shape, device)?.to_dtype(dtype)?)
    };
    let specs = model_specs(&header.config);
    let mut student = Weights::default();
    let mut teacher = Weights::default();
    for spec in &specs {
        student.insert(spec.name.clone(), tensor(&format!("student/{}", spec.name), &spec.shape)?);
        if is_teacher_param(&spec.name) {
            teacher.insert(spec.name.clone(), tensor(&format!("teacher/{}", spec.name), &spec.shape)?);
        }
    }
    let config = header.config;
    let obj = &config.objectives;
    let mut centers = Centers::new(obj.head_out, obj.center_momentum);
    for f in Family::ALL {
        centers.values.insert(f.name(), values[&format!("centers/{}", f.name())].iter().map(|&v| v as f64).collect());
    }
    let bank = PrototypeBank {
        rows: config.gcpl.rows,
        cols: config.gcpl.cols,
        n_prototypes: config.gcpl.n_prototypes,
        dim: config.backbone.out_dim(),
        momentum: config.gcpl.momentum,
        data: values["gcpl/prototypes"].clone(),
    };
    let text = TextTable {
        classes: config.num_classes,
        dim: obj.ita_dim,
        tau: header.text_tau,
        table: values["text/table"].iter().map(|&v| v as f64).collect(),
    };
    Ok(ModelState {
        student: ParamStore::from_weights(&student, &specs)?,
        teacher,
        bank,
        centers,
        text,
        optimizer: AdamW::new(0.9, 0.999, 1e-8),
        iter: header.iter,
        dtype,
        device: device.clone(),
        config,
    })
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<ModelState> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?, dtype, device)
}

impl ModelState {
    /// Weights of the requested branch; the teacher is the evaluation default.
    pub fn branch_weights(&self, branch: Branch) -> Result<Weights> {
        match branch {
            Branch::Teacher => Ok(self.teacher.clone()),
            Branch::Student => self.student.snapshot(),
        }
    }
}
