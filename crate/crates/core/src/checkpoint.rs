//! Binary checkpoint: `SPAC`, u32 version, u64 header length, JSON header,
//! then raw little-endian f32 tensor data at the offsets the header lists.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spa_diff::Tensor;

use crate::config::TrainConfig;
use crate::error::{Result, SpaError};
use crate::optim::{EmaState, OptimState};
use crate::trainer::{TeacherSpec, Trainer};

pub const MAGIC: &[u8; 4] = b"SPAC";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: u64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    teacher: TeacherSpec,
    rng: RngState,
    optim_step: u64,
    ema_decay: f64,
    tensors: Vec<TensorEntry>,
}

fn groups(tr: &Trainer) -> Vec<(String, &Tensor<f32>)> {
    let mut out = Vec::new();
    for (i, (_, p)) in tr.store.iter().enumerate() {
        out.push((format!("model/{}", p.name), &p.value));
        out.push((format!("ema/{}", p.name), &tr.ema.shadow[i]));
        out.push((format!("optim/m/{}", p.name), &tr.optim.m[i]));
        out.push((format!("optim/v/{}", p.name), &tr.optim.v[i]));
    }
    out
}

pub fn to_bytes(tr: &Trainer) -> Vec<u8> {
    let tensors = groups(tr);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.numel() as u64;
    }
    let header = Header {
        config: tr.cfg.clone(),
        teacher: tr.teacher,
        rng: RngState {
            seed: tr.cfg.seed,
            step: tr.step(),
        },
        optim_step: tr.optim.step,
        ema_decay: tr.ema.decay,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(tr: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(tr)).map_err(SpaError::io(path))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(SpaError::io(path))?;
    from_bytes(&bytes).map_err(|e| match e {
        SpaError::Invalid(reason) => SpaError::format(path, reason),
        other => other,
    })
}

/// Decodes a checkpoint into a fresh trainer; nothing is shared with any
/// existing state, so a failed load leaves callers untouched.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let bad = |r: &str| SpaError::Invalid(format!("checkpoint: {r}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(&format!("corrupt header: {e}")))?;
    let data = &bytes[data_start..];

    let mut tr = Trainer::new(&header.config, header.teacher)?;
    let expected: Vec<(String, Vec<usize>)> = groups(&tr).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if expected.len() != header.tensors.len() {
        return Err(bad("tensor list does not match the configured model"));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    let mut end = 0usize;
    for ((name, shape), e) in expected.iter().zip(&header.tensors) {
        if &e.name != name || &e.shape != shape || e.dtype != "f32" {
            return Err(bad(&format!("unexpected tensor {} {:?}", e.name, e.shape)));
        }
        let n: usize = shape.iter().product();
        let (a, b) = (e.offset as usize, e.offset as usize + 4 * n);
        if b > data.len() {
            return Err(bad("truncated tensor data"));
        }
        let vals: Vec<f32> = data[a..b]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        loaded.push(Tensor::new(shape.clone(), vals)?);
        end = end.max(b);
    }
    if end != data.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let count = tr.store.len();
    let mut ema = Vec::with_capacity(count);
    let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
    let mut it = loaded.into_iter();
    for p in tr.store.iter_mut() {
        p.value = it.next().unwrap();
        ema.push(it.next().unwrap());
        m.push(it.next().unwrap());
        v.push(it.next().unwrap());
    }
    let store = std::mem::take(&mut tr.store);
    Ok(Trainer::from_parts(
        header.config,
        header.teacher,
        tr.model,
        store,
        OptimState {
            step: header.optim_step,
            m,
            v,
        },
        EmaState {
            decay: header.ema_decay,
            shadow: ema,
        },
    ))
}
