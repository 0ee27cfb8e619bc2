//! Versioned checkpoint container: JSON header plus raw little-endian f64
//! arrays, digest-verified, written atomically.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MatError, Result};
use crate::model::{Classifier, InputShape, OptimState};
use crate::rng::{substream, Stream};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MATCKPT\x01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    descriptor: String,
    input_shape: InputShape,
    num_classes: usize,
    epoch: usize,
    seed: u64,
    optim: OptimState,
    param_shapes: Vec<Vec<usize>>,
    velocity_shapes: Vec<Vec<usize>>,
}

/// A loaded checkpoint; [`restore`] rebuilds the model and optimizer.
///
/// [`restore`]: Checkpoint::restore
#[derive(Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub descriptor: String,
    pub input_shape: InputShape,
    pub num_classes: usize,
    pub epoch: usize,
    pub seed: u64,
    pub optim: OptimState,
    pub params: Vec<ArrayD<f64>>,
    pub velocity: Option<Vec<ArrayD<f64>>>,
}

impl Checkpoint {
    pub fn restore(&self) -> Result<(Classifier, OptimState, usize)> {
        let mut rng = substream(self.seed, Stream::Init, &[u64::MAX]);
        let mut model = Classifier::new(&self.descriptor, self.input_shape, self.num_classes, &mut rng)?;
        model.set_param_arrays(&self.params)?;
        let mut optim = self.optim.clone();
        optim.set_velocity(self.velocity.clone());
        Ok((model, optim, self.epoch))
    }
}

fn push_arrays(payload: &mut Vec<u8>, shapes: &mut Vec<Vec<usize>>, arrays: &[ArrayD<f64>]) {
    for a in arrays {
        shapes.push(a.shape().to_vec());
        for v in a.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize model, optimizer state, epoch, and the run seed. The write is
/// atomic: temp file, fsync, rename.
pub fn save_checkpoint(
    model: &Classifier,
    optim: &OptimState,
    epoch: usize,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let params = model.param_arrays();
    let mut param_shapes = Vec::new();
    let mut velocity_shapes = Vec::new();
    let mut payload = Vec::new();
    push_arrays(&mut payload, &mut param_shapes, &params);
    if let Some(vel) = optim.velocity() {
        push_arrays(&mut payload, &mut velocity_shapes, vel);
    }

    let header = Header {
        version: CHECKPOINT_VERSION,
        descriptor: model.descriptor().to_string(),
        input_shape: model.input_shape(),
        num_classes: model.num_classes(),
        epoch,
        seed,
        optim: optim.clone(),
        param_shapes,
        velocity_shapes,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(MAGIC.len() + 4 + header_json.len() + payload.len() + 32);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);

    let tmp = path.with_extension("ckpt.tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = File::create(&tmp)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    drop(file);
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_arrays(
    payload: &[u8],
    offset: &mut usize,
    shapes: &[Vec<usize>],
    path: &Path,
) -> Result<Vec<ArrayD<f64>>> {
    let mut out = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let count: usize = shape.iter().product();
        let bytes = count * 8;
        let end = *offset + bytes;
        if end > payload.len() {
            return Err(MatError::CorruptData(format!(
                "checkpoint {} payload truncated",
                path.display()
            )));
        }
        let values: Vec<f64> = payload[*offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *offset = end;
        out.push(
            ArrayD::from_shape_vec(shape.clone(), values)
                .map_err(|e| MatError::CorruptData(format!("checkpoint array shape: {e}")))?,
        );
    }
    Ok(out)
}

/// Load and digest-verify a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(MatError::CorruptData(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(MatError::CorruptData(format!(
            "checkpoint {} failed digest verification",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if header_end > body.len() {
        return Err(MatError::CorruptData(format!(
            "checkpoint {} header truncated",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&body[12..header_end])?;
    if header.version != CHECKPOINT_VERSION {
        return Err(MatError::FormatVersion {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &body[header_end..];
    let mut offset = 0usize;
    let params = read_arrays(payload, &mut offset, &header.param_shapes, path)?;
    let velocity = if header.velocity_shapes.is_empty() {
        None
    } else {
        Some(read_arrays(payload, &mut offset, &header.velocity_shapes, path)?)
    };
    if offset != payload.len() {
        return Err(MatError::CorruptData(format!(
            "checkpoint {} carries {} unexpected trailing bytes",
            path.display(),
            payload.len() - offset
        )));
    }
    Ok(Checkpoint {
        version: header.version,
        descriptor: header.descriptor,
        input_shape: header.input_shape,
        num_classes: header.num_classes,
        epoch: header.epoch,
        seed: header.seed,
        optim: header.optim,
        params,
        velocity,
    })
}
