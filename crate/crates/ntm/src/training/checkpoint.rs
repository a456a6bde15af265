//! Versioned binary checkpoints: a JSON header (train config + episode
//! counter), then the named parameter arrays and optimizer slots as
//! little-endian f64, in sorted name order.
//!
//! Layout:
//!   magic  "NTMCKPT1"
//!   u64    header length, then that many bytes of JSON
//!   u64    parameter count
//!   per parameter: u64 name length, name bytes (utf-8),
//!                  u64 ndim, u64 dims..., f64 values...
//!   u8     optimizer-present flag
//!   if set, per parameter in the same order:
//!                  f64 mean_square..., f64 mean..., f64 delta...

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::ParameterStore;
use crate::error::{NtmError, Result};
use crate::training::optimizer::{ParamSlots, RmsProp};
use crate::training::TrainConfig;

const MAGIC: &[u8; 8] = b"NTMCKPT1";

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: TrainConfig,
    episode: usize,
}

pub fn save_checkpoint(
    path: &Path,
    config: &TrainConfig,
    episode: usize,
    store: &ParameterStore,
    opt: Option<&RmsProp>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let header = serde_json::to_vec(&Header { config: config.clone(), episode })
        .map_err(|e| NtmError::Checkpoint(format!("header encode: {e}")))?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, entry) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(entry.shape.len() as u64).to_le_bytes())?;
        for &d in &entry.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &entry.value {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    match opt {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            for (name, entry) in store.iter() {
                let slots = opt.slots.get(name).cloned().unwrap_or_else(|| ParamSlots {
                    mean_square: vec![0.0; entry.value.len()],
                    mean: vec![0.0; entry.value.len()],
                    delta: vec![0.0; entry.value.len()],
                });
                for arr in [&slots.mean_square, &slots.mean, &slots.delta] {
                    for &v in arr {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Checkpoint {
    pub config: TrainConfig,
    pub episode: usize,
    pub store: ParameterStore,
    pub optimizer: Option<RmsProp>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| NtmError::Checkpoint("truncated magic".to_string()))?;
    if &magic != MAGIC {
        return Err(NtmError::Checkpoint("bad magic".to_string()));
    }
    let header_len = read_u64(&mut r, "header length")? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|_| NtmError::Checkpoint("truncated header".to_string()))?;
    let header: Header = serde_json::from_slice(&header)
        .map_err(|e| NtmError::Checkpoint(format!("header decode: {e}")))?;

    let n_params = read_u64(&mut r, "parameter count")? as usize;
    let mut store = ParameterStore::new();
    let mut names = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u64(&mut r, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| NtmError::Checkpoint("truncated name".to_string()))?;
        let name = String::from_utf8(name)
            .map_err(|_| NtmError::Checkpoint("name not utf-8".to_string()))?;
        let ndim = read_u64(&mut r, "ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let value = read_f64s(&mut r, numel, &name)?;
        store.register(&name, &shape, value)?;
        names.push(name);
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)
        .map_err(|_| NtmError::Checkpoint("truncated optimizer flag".to_string()))?;
    let optimizer = if flag[0] == 1 {
        let mut opt = RmsProp::new(header.config.learning_rate);
        for name in &names {
            let numel = store.entry(name).unwrap().value.len();
            let mean_square = read_f64s(&mut r, numel, name)?;
            let mean = read_f64s(&mut r, numel, name)?;
            let delta = read_f64s(&mut r, numel, name)?;
            opt.slots.insert(name.clone(), ParamSlots { mean_square, mean, delta });
        }
        Some(opt)
    } else {
        None
    };

    Ok(Checkpoint {
        config: header.config,
        episode: header.episode,
        store,
        optimizer,
    })
}

fn read_u64<R: Read>(r: &mut R, field: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| NtmError::Checkpoint(format!("truncated field: {field}")))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, n: usize, field: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| NtmError::Checkpoint(format!("truncated data for {field}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
