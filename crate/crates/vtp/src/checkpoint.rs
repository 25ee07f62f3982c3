//! Binary checkpoint format.
//!
//! ```text
//! "VTPC" | u32 version | u32 header length | JSON header | f64 payload
//! ```
//!
//! All integers and floats are little-endian. The header carries the model
//! configuration, stage tag, a tensor directory (`name`, `shape`, byte `offset`
//! into the payload), per-site keep indices for pruned models, and optional
//! optimizer and RNG state. Optimizer moments are stored as ordinary tensors
//! named `optimizer.m.<param>` / `optimizer.v.<param>`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vtp_core::model::{GateSite, SitePosition, VitModel};
use vtp_core::optim::{AdamWConfig, OptimizerState};
use vtp_core::prune::{apply_plan, PruneMask, PrunePlan};
use vtp_core::ModelConfig;

use crate::config::ModelSection;
use crate::error::{Result, VtpError};

pub const MAGIC: &[u8; 4] = b"VTPC";
pub const VERSION: u32 = 1;

/// Which pipeline boundary produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Baseline,
    Sparsity,
    Pruned,
    Finetune,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::Baseline => "baseline",
            StageTag::Sparsity => "sparsity",
            StageTag::Pruned => "pruned",
            StageTag::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position, decimal (does not fit a JSON number).
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: VitModel,
    pub stage: StageTag,
    pub optimizer: Option<OptimizerState>,
    pub rng: Option<RngState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SiteKeep {
    site: String,
    indices: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelSection,
    stage: StageTag,
    tensors: Vec<TensorEntry>,
    keep_indices: Option<Vec<SiteKeep>>,
    optimizer: Option<OptimizerHeader>,
    rng: Option<RngState>,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let model = &ckpt.model;
    let params = model.params();
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: &[usize], data: &[f64]| {
        tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, _, t) in &params {
        push(name.clone(), t.shape(), t.data());
    }
    if let Some(opt) = &ckpt.optimizer {
        for (moments, tag) in [(&opt.first_moment, "m"), (&opt.second_moment, "v")] {
            for ((name, _, t), m) in params.iter().zip(moments) {
                push(format!("optimizer.{tag}.{name}"), t.shape(), m);
            }
        }
    }
    let keep_indices = model.is_pruned().then(|| {
        model
            .config
            .sites()
            .into_iter()
            .map(|site| SiteKeep {
                site: site.to_string(),
                indices: model.keep_indices(site),
            })
            .collect()
    });
    let header = Header {
        config: model.config.clone().into(),
        stage: ckpt.stage,
        tensors,
        keep_indices,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader {
            step: o.step,
            beta1: o.config.beta1,
            beta2: o.config.beta2,
            eps: o.config.eps,
            weight_decay: o.config.weight_decay,
        }),
        rng: ckpt.rng.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

fn parse_site(s: &str, config: &ModelConfig) -> Option<GateSite> {
    let rest = s.strip_prefix("blocks.")?;
    let (block, pos) = rest.split_once('.')?;
    let block: usize = block.parse().ok()?;
    let position = SitePosition::from_name(pos)?;
    (block < config.num_layers).then_some(GateSite { block, position })
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let err = |reason: String| VtpError::checkpoint(path, reason);
    if bytes.len() < 12 {
        return Err(err(format!("truncated: {} bytes, no room for preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(err(format!("magic: expected \"VTPC\", found {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(format!("version: expected {VERSION}, found {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| err(format!("truncated: header of {header_len} bytes does not fit")))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| err(format!("header: {e}")))?;
    let payload = &bytes[12 + header_len..];

    let config: ModelConfig = (&header.config).into();
    config.validate().map_err(|e| err(format!("config: {e}")))?;

    let mut table: HashMap<&str, &[u8]> = HashMap::new();
    let mut expected_len = 0usize;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + n * 8;
        let data = payload.get(start..end).ok_or_else(|| {
            err(format!(
                "truncated: tensor {} needs payload bytes {start}..{end}, payload has {}",
                t.name,
                payload.len()
            ))
        })?;
        if table.insert(&t.name, data).is_some() {
            return Err(err(format!("tensors: duplicate entry {}", t.name)));
        }
        expected_len = expected_len.max(end);
    }
    if payload.len() != expected_len {
        return Err(err(format!(
            "payload: {} bytes present, directory describes {expected_len}",
            payload.len()
        )));
    }

    let mut model = VitModel::init(&config, 0)?;
    if let Some(keeps) = &header.keep_indices {
        let mut by_site: HashMap<GateSite, &[usize]> = HashMap::new();
        for k in keeps {
            let site = parse_site(&k.site, &config)
                .ok_or_else(|| err(format!("keep_indices: unknown site {:?}", k.site)))?;
            if by_site.insert(site, &k.indices).is_some() {
                return Err(err(format!("keep_indices[{}]: listed twice", k.site)));
            }
        }
        let mut masks = Vec::new();
        for site in config.sites() {
            let idx = by_site
                .get(&site)
                .ok_or_else(|| err(format!("keep_indices[{site}]: missing")))?;
            let dim = config.site_dim(site.position);
            let sorted = idx.windows(2).all(|w| w[0] < w[1]);
            if idx.is_empty() || !sorted || idx.iter().any(|&i| i >= dim) {
                return Err(err(format!(
                    "keep_indices[{site}]: must be non-empty, strictly increasing and below {dim}"
                )));
            }
            let mut keep = vec![false; dim];
            idx.iter().for_each(|&i| keep[i] = true);
            masks.push(PruneMask::from_keep(site, keep));
        }
        model = apply_plan(&model, &PrunePlan::from_masks(masks))?;
    }

    let mut used = 0;
    let read = |name: &str, shape: &[usize], table: &HashMap<&str, &[u8]>| -> Result<Vec<f64>> {
        let entry = header.tensors.iter().find(|t| t.name == name);
        let (Some(entry), Some(raw)) = (entry, table.get(name)) else {
            return Err(err(format!("tensor {name}: missing")));
        };
        if entry.shape != shape {
            return Err(err(format!(
                "tensor {name}: shape {:?}, model expects {shape:?}",
                entry.shape
            )));
        }
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let mut names = Vec::new();
    for (name, _, t) in model.params_mut() {
        let data = read(&name, t.shape(), &table)?;
        t.data_mut().copy_from_slice(&data);
        names.push((name, t.shape().to_vec()));
        used += 1;
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(h) => {
            let mut first = Vec::new();
            let mut second = Vec::new();
            for (name, shape) in &names {
                first.push(read(&format!("optimizer.m.{name}"), shape, &table)?);
                second.push(read(&format!("optimizer.v.{name}"), shape, &table)?);
                used += 2;
            }
            Some(OptimizerState {
                config: AdamWConfig {
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                    weight_decay: h.weight_decay,
                },
                step: h.step,
                first_moment: first,
                second_moment: second,
            })
        }
    };
    if used != header.tensors.len() {
        let known: Vec<&str> = names.iter().map(|(n, _)| n.as_str()).collect();
        let extra = header
            .tensors
            .iter()
            .find(|t| !known.contains(&t.name.as_str()) && !t.name.starts_with("optimizer."))
            .map_or("optimizer state", |t| t.name.as_str());
        return Err(err(format!("tensors: unexpected entry {extra}")));
    }
    Ok(Checkpoint {
        model,
        stage: header.stage,
        optimizer,
        rng: header.rng,
    })
}

/// Writes `bytes` to `path` through a temporary file in the same directory and
/// an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| VtpError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| VtpError::io(path, e))?;
    tmp.persist(path).map_err(|e| VtpError::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| VtpError::io(path, e))?;
    decode(&bytes, path)
}
