//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `T2SGMDL1`, `dim: u32`, `num_blocks: u32`,
//! `mlp_hidden: u32`, `seed: u64`, `neighborhood: u8` (0 = in-neighbors,
//! 1 = symmetric), then every parameter tensor in declaration order as `f32`.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{JointModel, ModelConfig, Neighborhood};

pub const MODEL_MAGIC: &[u8; 8] = b"T2SGMDL1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_model<W: Write>(model: &JointModel, mut w: W) -> Result<(), CheckpointError> {
    let c = &model.config;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&(c.dim as u32).to_le_bytes())?;
    w.write_all(&(c.num_blocks as u32).to_le_bytes())?;
    w.write_all(&(c.mlp_hidden as u32).to_le_bytes())?;
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&[match c.neighborhood {
        Neighborhood::InNeighbors => 0u8,
        Neighborhood::Symmetric => 1,
    }])?;
    let mut buf = Vec::with_capacity(model.num_parameters() * 4);
    for (_, p) in model.parameters() {
        for &x in p {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_model<R: Read>(mut r: R) -> Result<JointModel, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let dim = read_u32(&mut r)? as usize;
    let num_blocks = read_u32(&mut r)? as usize;
    let mlp_hidden = read_u32(&mut r)? as usize;
    let mut seed = [0u8; 8];
    r.read_exact(&mut seed)?;
    let mut nb = [0u8; 1];
    r.read_exact(&mut nb)?;
    let neighborhood = match nb[0] {
        0 => Neighborhood::InNeighbors,
        1 => Neighborhood::Symmetric,
        x => return Err(CheckpointError::ShapeMismatch(format!("unknown neighborhood tag {x}"))),
    };
    let config = ModelConfig { dim, num_blocks, mlp_hidden, seed: u64::from_le_bytes(seed), neighborhood };
    config.validate().map_err(CheckpointError::ShapeMismatch)?;
    // sanity bound before allocating
    if dim > 1 << 16 || num_blocks > 1 << 10 || mlp_hidden > 1 << 16 {
        return Err(CheckpointError::ShapeMismatch("implausible model dimensions".into()));
    }
    let mut model = JointModel::new(config);
    let expected = model.num_parameters();
    let mut bytes = Vec::with_capacity(expected * 4);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 4 {
        return Err(CheckpointError::ShapeMismatch(format!(
            "expected {} parameter bytes, found {}",
            expected * 4,
            bytes.len()
        )));
    }
    let mut chunks = bytes.chunks_exact(4);
    for tensor in model.parameters_mut() {
        for (x, c) in tensor.iter_mut().zip(&mut chunks) {
            *x = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
    }
    Ok(model)
}

pub fn save_model(model: &JointModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<JointModel, CheckpointError> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Rounds every parameter to `f32` precision, i.e. the values a checkpoint
/// round trip yields.
pub fn quantize_to_f32(model: &mut JointModel) {
    for t in model.parameters_mut() {
        t.iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
}
