//! Binary checkpoints.
//!
//! ```text
//! magic   8 bytes  "SGWSCKPT"
//! version u32
//! flags   u32      bit 0: saliency branch enabled
//! count   u32      number of tensors
//! shapes  count × (rank u32, dims u32 × rank)
//! data    f32 × Σ numel, tensors in declaration order
//! ```
//!
//! Everything little-endian. Momentum buffers are not stored.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SGWSCKPT";
const VERSION: u32 = 1;
const FLAG_SALIENCY: u32 = 1;

pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let tensors = params.net.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if params.config.saliency_branch {
        FLAG_SALIENCY
    } else {
        0
    };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in &tensors {
        for &v in t.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Option<u32> {
        let b = self.bytes.get(self.pos..self.pos + 4)?;
        self.pos += 4;
        Some(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.u32().map(f32::from_bits)
    }
}

/// Restores weights and the layer layout. Loss weights take their defaults.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 20 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 8,
    };
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let flags = r.u32().ok_or_else(|| bad("truncated header"))?;
    let count = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    // trunk layers, saliency hidden + out, cls, det; two tensors each
    if count < 8 || !count.is_multiple_of(2) {
        return Err(Error::format(
            path,
            format!("unexpected tensor count {count}"),
        ));
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32().ok_or_else(|| bad("truncated shape table"))? as usize;
        if rank == 0 || rank > 2 {
            return Err(bad("tensor rank must be 1 or 2"));
        }
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated shape table"))?;
        shapes.push(dims);
    }
    let weight_shape = |k: usize| -> Result<(usize, usize)> {
        match shapes[2 * k].as_slice() {
            &[o, i] => Ok((o, i)),
            _ => Err(bad("weight tensor must be rank 2")),
        }
    };
    let n_trunk = count / 2 - 4;
    let (_, feature_dim) = weight_shape(0)?;
    let trunk_widths = (0..n_trunk)
        .map(|k| weight_shape(k).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let (saliency_hidden, _) = weight_shape(n_trunk)?;
    let (num_classes, _) = weight_shape(n_trunk + 2)?;
    let config = ModelConfig {
        feature_dim,
        trunk_widths,
        saliency_hidden,
        num_classes,
        saliency_branch: flags & FLAG_SALIENCY != 0,
        ..ModelConfig::new(feature_dim, num_classes)
    };
    config
        .validate()
        .map_err(|e| Error::format(path, e.to_string()))?;

    let mut net = Network::zeros(&config);
    for (t, shape) in net.tensors_mut().into_iter().zip(&shapes) {
        let numel: usize = shape.iter().product();
        if numel != t.values.len() {
            return Err(Error::format(
                path,
                format!(
                    "tensor {} has shape {shape:?}, inconsistent with the layer layout",
                    t.name
                ),
            ));
        }
        for v in t.values.iter_mut() {
            let x = r.f32().ok_or_else(|| bad("truncated tensor data"))?;
            if !x.is_finite() {
                return Err(Error::format(
                    path,
                    format!("non-finite value in {}", t.name),
                ));
            }
            *v = f64::from(x);
        }
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(ModelParams {
        velocity: Network::zeros(&config),
        config,
        net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn cfg() -> ModelConfig {
        ModelConfig {
            trunk_widths: vec![7, 5],
            saliency_hidden: 3,
            ..ModelConfig::new(4, 3)
        }
    }

    #[test]
    fn roundtrip_rounds_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = init_params(&cfg(), 5).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, p.config);
        for (a, b) in p.net.tensors().iter().zip(back.net.tensors()) {
            for (x, y) in a.values.iter().zip(b.values) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
        // saving the reloaded model reproduces the file
        let again = dir.path().join("n.ckpt");
        save_checkpoint(&back, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn flags_and_empty_trunk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = ModelConfig {
            trunk_widths: vec![],
            saliency_branch: false,
            ..cfg()
        };
        save_checkpoint(&init_params(&c, 1).unwrap(), &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(!back.config.saliency_branch);
        assert!(back.config.trunk_widths.is_empty());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).unwrap_err().is_validation());
        let good = checkpoint_bytes(&init_params(&cfg(), 1).unwrap());
        fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(load_checkpoint(&path)
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }
}
