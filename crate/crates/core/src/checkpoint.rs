//! Checkpoint container: a text manifest of `path<TAB>byte-offset` lines closed by an
//! empty line, followed by concatenated DTEN records. Offsets count from the first byte
//! after the empty line. The last record (`__state__`) holds the optimizer moments and
//! the training position.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::model::{ModelConfig, ModelParams};
use crate::nn::ParamTensor;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const STATE_KEY: &str = "__state__";
const STATE_FIELDS: usize = 8;

/// Where training stands when a checkpoint is written.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainProgress {
    /// Completed epochs.
    pub epoch: u64,
    pub rng: RngState,
    pub best_val_mca: f64,
    pub best_epoch: u64,
}

impl Default for TrainProgress {
    fn default() -> Self {
        Self {
            epoch: 0,
            rng: RngState {
                seed: 0,
                stream: 0,
                word_pos: 0,
            },
            best_val_mca: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub progress: TrainProgress,
}

fn bits(v: u64) -> f64 {
    f64::from_bits(v)
}

fn unbits(v: f64) -> u64 {
    v.to_bits()
}

pub fn encode(params: &ModelParams, progress: &TrainProgress) -> Vec<u8> {
    let mut header = String::new();
    let mut body = Vec::new();
    let mut state = vec![
        bits(progress.epoch),
        bits(progress.rng.seed),
        bits(progress.rng.stream),
        bits(progress.rng.word_pos as u64),
        bits((progress.rng.word_pos >> 64) as u64),
        bits(params.version()),
        progress.best_val_mca,
        bits(progress.best_epoch),
    ];
    for (path, p) in params.iter() {
        let _ = writeln!(header, "{path}\t{}", body.len());
        io::encode_into(&p.value, &mut body);
        state.push(bits(p.step_count));
        state.extend_from_slice(p.adam_m.data());
        state.extend_from_slice(p.adam_v.data());
    }
    let _ = writeln!(header, "{STATE_KEY}\t{}", body.len());
    io::encode_into(&Tensor::from_vec(state), &mut body);
    header.push('\n');
    let mut out = header.into_bytes();
    out.extend_from_slice(&body);
    out
}

/// Parses a checkpoint and checks it against `config`.
pub fn decode(bytes: &[u8], config: &ModelConfig) -> Result<Checkpoint> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or(Error::BadMagic)?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::BadMagic)?;
    let body = &bytes[split + 2..];
    let mut entries = Vec::new();
    for line in header.lines() {
        let (path, off) = line.split_once('\t').ok_or(Error::BadMagic)?;
        let off: usize = off.parse().map_err(|_| Error::BadMagic)?;
        entries.push((path.to_string(), off));
    }
    let (state_key, state_off) = entries.pop().ok_or(Error::BadMagic)?;
    if state_key != STATE_KEY {
        return Err(Error::BadMagic);
    }
    let record = |off: usize| -> Result<Tensor> {
        if off > body.len() {
            return Err(Error::TruncatedFile {
                expected: off,
                found: body.len(),
            });
        }
        Ok(io::decode_prefix(&body[off..])?.0)
    };
    let mut map = BTreeMap::new();
    for (path, off) in &entries {
        map.insert(path.clone(), ParamTensor::new(record(*off)?));
    }
    let mut params = ModelParams::from_map(map);
    params.check_against(config)?;

    let state = record(state_off)?;
    let s = state.data();
    let expected: usize =
        STATE_FIELDS + params.iter().map(|(_, p)| 1 + 2 * p.value.len()).sum::<usize>();
    if s.len() != expected {
        return Err(Error::ShapeMismatch {
            lhs: vec![s.len()],
            rhs: vec![expected],
        });
    }
    let progress = TrainProgress {
        epoch: unbits(s[0]),
        rng: RngState {
            seed: unbits(s[1]),
            stream: unbits(s[2]),
            word_pos: unbits(s[3]) as u128 | (unbits(s[4]) as u128) << 64,
        },
        best_val_mca: s[6],
        best_epoch: unbits(s[7]),
    };
    params.set_version(unbits(s[5]));
    let mut at = STATE_FIELDS;
    for (_, p) in params.iter_mut() {
        let n = p.value.len();
        p.step_count = unbits(s[at]);
        p.adam_m.data_mut().copy_from_slice(&s[at + 1..at + 1 + n]);
        p.adam_v
            .data_mut()
            .copy_from_slice(&s[at + 1 + n..at + 1 + 2 * n]);
        at += 1 + 2 * n;
    }
    Ok(Checkpoint { params, progress })
}

pub fn save(path: &Path, params: &ModelParams, progress: &TrainProgress) -> Result<()> {
    fs::write(path, encode(params, progress))?;
    Ok(())
}

pub fn load(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode(&bytes, config)
}
