//! Checkpoint container: one file holding the config as JSON text, a version
//! tag, the training step, and named tensors as little-endian 32-bit floats
//! with explicit shapes. Optimizer moments are stored alongside the
//! parameters under `m.`/`v.` prefixes so training can resume.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "DFRCCKPT"
//! version u32
//! step    u64
//! config  u32 length + JSON bytes
//! count   u32 tensors
//! tensor  u16 name length + name bytes, u32 rows, u32 cols,
//!         rows*cols f32 values
//! ```

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::util::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{ModelConfig, ModelParams, CHECKPOINT_VERSION};

const MAGIC: &[u8; 8] = b"DFRCCKPT";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Adam first/second moments, present when saved from a trainer.
    pub optimizer: Option<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)>,
    pub step: u64,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&ckpt.step.to_le_bytes());
    let config_json = serde_json::to_vec(&ckpt.params.config)
        .map_err(|e| Error::malformed(path, e.to_string()))?;
    bytes.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&config_json);

    let mut named: Vec<(String, &Tensor)> = ckpt
        .params
        .tensors()
        .map(|(n, t)| (format!("p.{n}"), t))
        .collect();
    if let Some((m, v)) = &ckpt.optimizer {
        named.extend(m.iter().map(|(n, t)| (format!("m.{n}"), t)));
        named.extend(v.iter().map(|(n, t)| (format!("v.{n}"), t)));
    }
    bytes.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let bad = |reason: &str| Error::malformed(path, reason);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad("bad checkpoint magic"));
    }
    let version = read_u32(&mut r, path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Unsupported {
            path: path.into(),
            reason: format!("checkpoint version {version}"),
        });
    }
    let mut step_bytes = [0u8; 8];
    r.read_exact(&mut step_bytes).map_err(|e| Error::io(path, e))?;
    let step = u64::from_le_bytes(step_bytes);

    let config_len = read_u32(&mut r, path)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes).map_err(|e| Error::io(path, e))?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::malformed(path, format!("config: {e}")))?;
    config.validate()?;

    let count = read_u32(&mut r, path)? as usize;
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut opt_m: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut opt_v: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        let mut len_bytes = [0u8; 2];
        r.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
        let name_len = u16::from_le_bytes(len_bytes) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("tensor name not utf-8"))?;
        let rows = read_u32(&mut r, path)? as usize;
        let cols = read_u32(&mut r, path)? as usize;
        let mut data = vec![0u8; rows * cols * 4];
        r.read_exact(&mut data).map_err(|e| Error::io(path, e))?;
        let values: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::from_vec(rows, cols, values);
        if let Some(n) = name.strip_prefix("p.") {
            params.insert(n.to_string(), tensor);
        } else if let Some(n) = name.strip_prefix("m.") {
            opt_m.insert(n.to_string(), tensor);
        } else if let Some(n) = name.strip_prefix("v.") {
            opt_v.insert(n.to_string(), tensor);
        } else {
            return Err(bad("tensor name missing p./m./v. prefix"));
        }
    }

    let params = ModelParams::from_tensors(config, version, params)?;
    let optimizer = if opt_m.is_empty() && opt_v.is_empty() {
        None
    } else {
        if opt_m.len() != opt_v.len() {
            return Err(bad("incomplete optimizer state"));
        }
        Some((opt_m, opt_v))
    };
    Ok(Checkpoint {
        params,
        optimizer,
        step,
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}
