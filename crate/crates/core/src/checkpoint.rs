//! Versioned binary checkpoints for `TrainState<f32>`.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "EVOPCKPT"
//! version u32      currently 1
//! hash    u64      FNV-1a of the embedded config JSON
//! config  u32 len + JSON bytes (the full TrainConfig)
//! dims    4 x u32  input, hidden1, hidden2, classes
//! epochs_completed u64
//! steps_completed  u64
//! arrays  14 x (u64 count + count x f32): w1 b1 w2 b2 w3 b3,
//!         velocity buffers in the same order, population masses,
//!         mass-gradient accumulator
//! ```
//!
//! The shuffle RNG is derived from `(config.seed, epoch)`, so the stored
//! config plus `epochs_completed` fully captures the RNG state; a state
//! reloaded at an epoch boundary resumes bit-identically. Writes go
//! through a temp file and an atomic rename.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::dynamics::PopulationState;
use crate::error::{Error, Result};
use crate::experiment::{TrainConfig, TrainState};
use crate::model::{ModelDims, ModelParams, MomentumState};

const MAGIC: &[u8; 8] = b"EVOPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_array<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn read_exact_or_corrupt<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| corrupt(format!("unexpected end of file reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_or_corrupt(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact_or_corrupt(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_array<R: Read>(r: &mut R, expected: usize, what: &str) -> Result<Vec<f32>> {
    let count = read_u64(r, what)? as usize;
    if count != expected {
        return Err(corrupt(format!(
            "{what}: expected {expected} values, found {count}"
        )));
    }
    let mut bytes = vec![0u8; count * 4];
    read_exact_or_corrupt(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes the state atomically (temp file + rename).
pub fn save_checkpoint(state: &TrainState<f32>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&state.config.hash().to_le_bytes())?;
        let config_json = state.config.canonical_json();
        w.write_all(&(config_json.len() as u32).to_le_bytes())?;
        w.write_all(config_json.as_bytes())?;
        for d in [
            state.dims.input,
            state.dims.hidden1,
            state.dims.hidden2,
            state.dims.classes,
        ] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&state.epochs_completed.to_le_bytes())?;
        w.write_all(&state.steps_completed.to_le_bytes())?;

        let p = &state.params;
        let v = &state.momentum.v;
        for tensor in [&p.w1, &p.w2, &p.w3, &v.w1, &v.w2, &v.w3] {
            write_array(&mut w, tensor.as_slice().expect("contiguous"))?;
        }
        for vector in [&p.b1, &p.b2, &p.b3, &v.b1, &v.b2, &v.b3] {
            write_array(&mut w, vector.as_slice().expect("contiguous"))?;
        }
        write_array(&mut w, state.population.masses.as_slice().expect("contiguous"))?;
        write_array(&mut w, state.grad_accum.as_slice().expect("contiguous"))?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back; `load(save(s))` reproduces `s` bit-exactly.
pub fn load_checkpoint(path: &Path) -> Result<TrainState<f32>> {
    let mut r = BufReader::new(fs::File::open(path)?);

    let mut magic = [0u8; 8];
    read_exact_or_corrupt(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let stored_hash = read_u64(&mut r, "config hash")?;
    let config_len = read_u32(&mut r, "config length")? as usize;
    let mut config_bytes = vec![0u8; config_len];
    read_exact_or_corrupt(&mut r, &mut config_bytes, "config json")?;
    let config: TrainConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| corrupt(format!("config json: {e}")))?;
    if config.hash() != stored_hash {
        return Err(corrupt("config hash mismatch"));
    }

    let dims = ModelDims {
        input: read_u32(&mut r, "input dim")? as usize,
        hidden1: read_u32(&mut r, "hidden1 dim")? as usize,
        hidden2: read_u32(&mut r, "hidden2 dim")? as usize,
        classes: read_u32(&mut r, "classes dim")? as usize,
    };
    let epochs_completed = read_u64(&mut r, "epoch counter")?;
    let steps_completed = read_u64(&mut r, "step counter")?;

    let mut matrix = |rows: usize, cols: usize, what: &str| -> Result<Array2<f32>> {
        let values = read_array(&mut r, rows * cols, what)?;
        Ok(Array2::from_shape_vec((rows, cols), values).expect("shape matches"))
    };
    let w1 = matrix(dims.hidden1, dims.input, "w1")?;
    let w2 = matrix(dims.hidden2, dims.hidden1, "w2")?;
    let w3 = matrix(dims.classes, dims.hidden2, "w3")?;
    let vw1 = matrix(dims.hidden1, dims.input, "vw1")?;
    let vw2 = matrix(dims.hidden2, dims.hidden1, "vw2")?;
    let vw3 = matrix(dims.classes, dims.hidden2, "vw3")?;

    let mut vector = |len: usize, what: &str| -> Result<Array1<f32>> {
        Ok(Array1::from_vec(read_array(&mut r, len, what)?))
    };
    let b1 = vector(dims.hidden1, "b1")?;
    let b2 = vector(dims.hidden2, "b2")?;
    let b3 = vector(dims.classes, "b3")?;
    let vb1 = vector(dims.hidden1, "vb1")?;
    let vb2 = vector(dims.hidden2, "vb2")?;
    let vb3 = vector(dims.classes, "vb3")?;
    let masses = vector(dims.populations(), "population")?;
    let grad_accum = vector(dims.populations(), "gradient accumulator")?;

    Ok(TrainState {
        config,
        dims,
        params: ModelParams {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        },
        momentum: MomentumState {
            v: ModelParams {
                w1: vw1,
                b1: vb1,
                w2: vw2,
                b2: vb2,
                w3: vw3,
                b3: vb3,
            },
        },
        population: PopulationState { masses },
        grad_accum,
        epochs_completed,
        steps_completed,
    })
}
