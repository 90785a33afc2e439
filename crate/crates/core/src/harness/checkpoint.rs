//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!   magic            8  bytes  "ERSLBCKP"
//!   version          u32
//!   config_len       u32, followed by config JSON bytes
//!   param_count      u32
//!   per parameter (sorted by name):
//!     name_len       u16, followed by UTF-8 name bytes
//!     ndim           u8, followed by ndim u32 dimension sizes
//!     data           product(dims) f64 values
//!   adapter_flag     u8 (0 or 1); when 1:
//!     target_tag     u8 (0 = llm_mlp_down, 1 = projector_mlp)
//!     target_layer   u32 (1-based; 0 for the projector)
//!     alpha          f64
//!     b_len          u32, followed by b_len f64 values
//!     a_len          u32, followed by a_len f64 values

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::editor::{EditTarget, LoraAdapter};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ERSLBCKP";
const VERSION: u32 = 1;

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(&state.config)?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;

    let layout = state.config.param_layout();
    w.write_all(&(layout.len() as u32).to_le_bytes())?;
    for (name, _) in &layout {
        let tensor = state.param(name);
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    match &state.adapter {
        None => w.write_all(&[0u8])?,
        Some(adapter) => {
            w.write_all(&[1u8])?;
            let (tag, layer) = match adapter.target {
                EditTarget::LlmMlpDown { layer } => (0u8, layer as u32),
                EditTarget::ProjectorMlp => (1u8, 0u32),
            };
            w.write_all(&[tag])?;
            w.write_all(&layer.to_le_bytes())?;
            w.write_all(&adapter.alpha.to_le_bytes())?;
            w.write_all(&(adapter.b.len() as u32).to_le_bytes())?;
            for v in adapter.b.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(adapter.a_vec.len() as u32).to_le_bytes())?;
            for v in adapter.a_vec.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };

    if c.take(8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let config_len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(config_len)?)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    config.validate()?;

    let mut state = crate::model::init_model(&config)?;
    let param_count = c.u32()? as usize;
    let expected = config.param_layout();
    if param_count != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {param_count} parameters, config implies {}",
            expected.len()
        )));
    }
    for (expect_name, expect_shape) in &expected {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("bad parameter name".into()))?;
        if &name != expect_name {
            return Err(Error::Format(format!(
                "parameter order mismatch: found {name}, expected {expect_name}"
            )));
        }
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        if &shape != expect_shape {
            return Err(Error::Format(format!(
                "shape mismatch for {name}: {shape:?} vs {expect_shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        let data = c.f64_vec(len)?;
        *state.param_mut(&name) = Tensor::from_vec(&shape, data)?;
    }
    let adapter_flag = c.u8()?;
    if adapter_flag == 1 {
        let tag = c.u8()?;
        let layer = c.u32()? as usize;
        let target = match tag {
            0 => EditTarget::LlmMlpDown { layer },
            1 => EditTarget::ProjectorMlp,
            other => return Err(Error::Format(format!("unknown adapter target tag {other}"))),
        };
        let alpha = c.f64()?;
        let b_len = c.u32()? as usize;
        let b = Tensor::from_vec(&[b_len], c.f64_vec(b_len)?)?;
        let a_len = c.u32()? as usize;
        let a_vec = Tensor::from_vec(&[a_len], c.f64_vec(a_len)?)?;
        state.adapter = Some(LoraAdapter {
            target,
            b,
            a_vec,
            alpha,
        });
    } else if adapter_flag != 0 {
        return Err(Error::Format("bad adapter flag".into()));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editor::attach_lora;
    use crate::model::{init_model, ModelConfig, Token};

    fn tiny() -> ModelState {
        init_model(&ModelConfig {
            vocab_size: 32,
            width: 16,
            n_layers: 2,
            heads: 2,
            mlp_expansion: 2,
            image_dim: 8,
            prefix_len: 2,
            max_seq: 16,
            seed: 12,
        })
        .unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let state = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(state.content_hash(), loaded.content_hash());
        let image = vec![0.3; 8];
        let q = vec![Token(9), Token(10)];
        let (_, a) = state.forward(&image, &q).unwrap();
        let (_, b) = loaded.forward(&image, &q).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_the_adapter() {
        let state = tiny();
        let mut attached =
            attach_lora(&state, EditTarget::LlmMlpDown { layer: 2 }, 1.0).unwrap();
        attached.adapter.as_mut().unwrap().b.data_mut()[3] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&attached, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(attached.content_hash(), loaded.content_hash());
    }

    #[test]
    fn identical_init_serializes_to_identical_bytes() {
        let a = tiny();
        let b = tiny();
        let dir = tempfile::tempdir().unwrap();
        let pa = dir.path().join("a.bin");
        let pb = dir.path().join("b.bin");
        save_checkpoint(&a, &pa).unwrap();
        save_checkpoint(&b, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn corrupted_header_is_a_versioned_error_not_a_crash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Version { found: 7, expected: 1 })
        ));
    }
}
