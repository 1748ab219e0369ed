use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use super::GeoSample;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8] = b"MMDS1\n";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    Float32,
    Int32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    dtype: ElemType,
    shape: Vec<usize>,
    /// Byte offset from the start of the blob section.
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    lon: f64,
    lat: f64,
    acquisition_days: Vec<i32>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    samples: Vec<SampleEntry>,
}

const ARRAYS: [(&str, ElemType, usize); 4] = [
    ("hr", ElemType::Float32, 3),
    ("ms", ElemType::Float32, 4),
    ("sar", ElemType::Float32, 4),
    ("labels", ElemType::Int32, 2),
];

/// Serializes samples to the `MMDS1` container format.
pub fn encode_dataset(samples: &[GeoSample]) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let mut arrays = Vec::with_capacity(4);
        let mut push_f32 = |name: &str, shape: &[usize], data: &mut dyn Iterator<Item = f32>| {
            let offset = blob.len() as u64;
            data.for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
            arrays.push(ArrayEntry {
                name: name.into(),
                dtype: ElemType::Float32,
                shape: shape.to_vec(),
                offset,
                nbytes: blob.len() as u64 - offset,
            });
        };
        push_f32("hr", s.hr.shape(), &mut s.hr.iter().copied());
        push_f32("ms", s.ms.shape(), &mut s.ms.iter().copied());
        push_f32("sar", s.sar.shape(), &mut s.sar.iter().copied());
        let offset = blob.len() as u64;
        s.labels.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()));
        arrays.push(ArrayEntry {
            name: "labels".into(),
            dtype: ElemType::Int32,
            shape: s.labels.shape().to_vec(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
        entries.push(SampleEntry {
            lon: s.lon,
            lat: s.lat,
            acquisition_days: s.acquisition_days.clone(),
            arrays,
        });
    }
    let header = serde_json::to_vec(&Header { version: VERSION, samples: entries })
        .expect("header serializes");
    let mut out = Vec::with_capacity(DATASET_MAGIC.len() + 8 + header.len() + blob.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<GeoSample>> {
    if bytes.len() < DATASET_MAGIC.len() || &bytes[..DATASET_MAGIC.len()] != DATASET_MAGIC {
        return Err(Error::Format("missing MMDS1 magic".into()));
    }
    let rest = &bytes[DATASET_MAGIC.len()..];
    if rest.len() < 8 {
        return Err(Error::Truncated("header length prefix".into()));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(Error::Truncated("header".into()));
    }
    let header: Header = serde_json::from_slice(&rest[..hlen])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Version { expected: VERSION, found: header.version });
    }
    let blob = &rest[hlen..];

    let mut samples = Vec::with_capacity(header.samples.len());
    for (i, entry) in header.samples.into_iter().enumerate() {
        if entry.arrays.len() != ARRAYS.len() {
            return Err(Error::Format(format!("sample {i}: expected {} arrays", ARRAYS.len())));
        }
        for (a, &(name, dtype, rank)) in entry.arrays.iter().zip(ARRAYS.iter()) {
            let label = format!("sample {i} `{}`", a.name);
            if a.name != name || a.dtype != dtype {
                return Err(Error::Format(format!("{label}: expected {name} as {dtype:?}")));
            }
            if a.shape.len() != rank {
                return Err(shape_err(&label, &[rank], &[a.shape.len()]));
            }
            let numel: usize = a.shape.iter().product();
            if numel as u64 * 4 != a.nbytes {
                return Err(shape_err(&label, &[a.nbytes as usize / 4], &[numel]));
            }
            if a.offset.checked_add(a.nbytes).is_none_or(|end| end > blob.len() as u64) {
                return Err(Error::Truncated(label));
            }
        }
        let slice = |a: &ArrayEntry| &blob[a.offset as usize..(a.offset + a.nbytes) as usize];
        let f32s = |a: &ArrayEntry| -> Vec<f32> {
            slice(a).chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let [hr, ms, sar, labels] = &entry.arrays[..] else { unreachable!() };
        let sh = |a: &ArrayEntry, k: usize| a.shape[k];
        let sample = GeoSample {
            hr: Array3::from_shape_vec((sh(hr, 0), sh(hr, 1), sh(hr, 2)), f32s(hr)).unwrap(),
            ms: Array4::from_shape_vec((sh(ms, 0), sh(ms, 1), sh(ms, 2), sh(ms, 3)), f32s(ms)).unwrap(),
            sar: Array4::from_shape_vec((sh(sar, 0), sh(sar, 1), sh(sar, 2), sh(sar, 3)), f32s(sar)).unwrap(),
            labels: Array2::from_shape_vec(
                (sh(labels, 0), sh(labels, 1)),
                slice(labels).chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
            )
            .unwrap(),
            lon: entry.lon,
            lat: entry.lat,
            acquisition_days: entry.acquisition_days,
        };
        check_consistency(i, &sample)?;
        samples.push(sample);
    }
    Ok(samples)
}

fn shape_err(name: &str, expected: &[usize], found: &[usize]) -> Error {
    Error::ShapeMismatch { name: name.into(), expected: expected.to_vec(), found: found.to_vec() }
}

fn check_consistency(i: usize, s: &GeoSample) -> Result<()> {
    let (h, w) = s.labels.dim();
    let ratio = s.hr_ratio().max(1);
    let want = |name: &str, e: Vec<usize>, f: &[usize]| {
        if e.as_slice() == f { Ok(()) } else { Err(shape_err(&format!("sample {i} `{name}`"), &e, f)) }
    };
    want("hr", vec![h * ratio, w * ratio, 3], s.hr.shape())?;
    want("ms", vec![s.ms_frames(), h, w, 10], s.ms.shape())?;
    want("sar", vec![s.sar_frames(), h, w, 2], s.sar.shape())?;
    want(
        "acquisition_days",
        vec![s.ms_frames() + s.sar_frames()],
        &[s.acquisition_days.len()],
    )
}

pub fn write_dataset(samples: &[GeoSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_dataset(samples)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<GeoSample>> {
    let path = path.as_ref();
    decode_dataset(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
