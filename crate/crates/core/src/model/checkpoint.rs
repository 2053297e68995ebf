//! Binary checkpoint: a magic line, one JSON header line, then raw
//! little-endian `f64` data (parameters, then optional Adam moments).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, ModelParams};
use crate::loss_opt::OptState;

const MAGIC: &str = "NEXTVISIT-CKPT v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic line)")]
    BadMagic,
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    config_hash: String,
    run_config: String,
    step: u64,
    n_params: usize,
    tensors: Vec<TensorEntry>,
    optimizer: bool,
    optimizer_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: u64,
    pub optimizer: Option<OptState>,
    pub config_hash: String,
    /// Resolved run configuration text the checkpoint was produced with.
    pub run_config: String,
}

fn write_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, CheckpointError> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|e| CheckpointError::Payload(format!("expected {n} values: {e}")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let p = &ckpt.params;
    let header = Header {
        model: p.config.clone(),
        config_hash: ckpt.config_hash.clone(),
        run_config: ckpt.run_config.clone(),
        step: ckpt.step,
        n_params: p.num_params(),
        tensors: p
            .layout
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: [t.slot.rows, t.slot.cols],
                offset: t.slot.offset,
                len: t.slot.len(),
            })
            .collect(),
        optimizer: ckpt.optimizer.is_some(),
        optimizer_step: ckpt.optimizer.as_ref().map_or(0, |o| o.step),
    };
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        writeln!(w, "{MAGIC}")?;
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        write_f64s(&mut w, &p.data)?;
        if let Some(opt) = &ckpt.optimizer {
            write_f64s(&mut w, &opt.m)?;
            write_f64s(&mut w, &opt.v)?;
        }
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end())?;
    let data = read_f64s(&mut r, header.n_params)?;
    let params = ModelParams::from_data(&header.model, data)?;
    for (entry, t) in header.tensors.iter().zip(&params.layout.tensors) {
        if entry.name != t.name || entry.offset != t.slot.offset || entry.len != t.slot.len() {
            return Err(CheckpointError::Payload(format!("tensor manifest mismatch at {}", entry.name)));
        }
    }
    if header.tensors.len() != params.layout.tensors.len() {
        return Err(CheckpointError::Payload("tensor count mismatch".into()));
    }
    let optimizer = if header.optimizer {
        let m = read_f64s(&mut r, header.n_params)?;
        let v = read_f64s(&mut r, header.n_params)?;
        Some(OptState {
            m,
            v,
            step: header.optimizer_step,
        })
    } else {
        None
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Payload(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        params,
        step: header.step,
        optimizer,
        config_hash: header.config_hash,
        run_config: header.run_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        let cfg = ModelConfig {
            n_layer: 1,
            n_head: 2,
            n_embd: 8,
            vocab_size: 12,
            block_size: 16,
            rotary_base: 10_000.0,
            bias: true,
            dropout: 0.0,
        };
        ModelParams::init(&cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = small();
        let n = params.num_params();
        let opt = OptState {
            m: (0..n).map(|i| i as f64 * 1e-3).collect(),
            v: (0..n).map(|i| (i as f64).sqrt() * 1e-7).collect(),
            step: 17,
        };
        let ckpt = Checkpoint {
            params,
            step: 17,
            optimizer: Some(opt),
            config_hash: "abc".into(),
            run_config: "seed = 1\n".into(),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"hello\n").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));

        let ckpt = Checkpoint {
            params: small(),
            step: 0,
            optimizer: None,
            config_hash: String::new(),
            run_config: String::new(),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Payload(_))));
    }
}
