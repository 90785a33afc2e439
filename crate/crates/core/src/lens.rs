//! Per-layer next-token distributions read from intermediate hidden states
//! through the shared final norm and unembedding.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelState, Token};

const DUMP_MAGIC: &[u8; 4] = b"LENS";
const DUMP_VERSION: u32 = 1;

/// Stack of per-layer probability vectors, layer index ascending; the final
/// entry equals the model's output distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct LensStack {
    pub dists: Vec<Vec<f64>>,
    pub prompt_id: Option<String>,
}

impl LensStack {
    pub fn n_layers(&self) -> usize {
        self.dists.len()
    }

    pub fn prob(&self, layer: usize, token: Token) -> f64 {
        self.dists[layer][token.idx()]
    }
}

/// Probe every layer at the answer-prediction position.
pub fn lens_distributions(state: &ModelState, image: &[f64], question: &[Token]) -> Result<LensStack> {
    let (hidden, out) = state.forward(image, question)?;
    let n = hidden.len();
    let mut dists = Vec::with_capacity(n);
    for h in hidden.iter().take(n - 1) {
        dists.push(state.project_to_dist(h));
    }
    // the final entry is the output distribution itself, same code path
    dists.push(out.data().to_vec());
    Ok(LensStack {
        dists,
        prompt_id: None,
    })
}

/// Binary lens dump: per prompt, n_layers x vocab 64-bit little-endian
/// values, for offline attack replay.
pub fn save_stacks(stacks: &[LensStack], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(stacks.len() as u32).to_le_bytes())?;
    for stack in stacks {
        let id = stack.prompt_id.clone().unwrap_or_default();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        let layers = stack.dists.len() as u32;
        let vocab = stack.dists.first().map(|d| d.len()).unwrap_or(0) as u32;
        w.write_all(&layers.to_le_bytes())?;
        w.write_all(&vocab.to_le_bytes())?;
        for dist in &stack.dists {
            for v in dist {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_stacks(path: &Path) -> Result<Vec<LensStack>> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("truncated lens dump".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != DUMP_MAGIC {
        return Err(Error::Format("bad lens dump magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != DUMP_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DUMP_VERSION,
        });
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut stacks = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let id = String::from_utf8(take(&mut pos, id_len)?.to_vec())
            .map_err(|_| Error::Format("bad prompt id".into()))?;
        let layers = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let vocab = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut dists = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut dist = Vec::with_capacity(vocab);
            for _ in 0..vocab {
                dist.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            dists.push(dist);
        }
        stacks.push(LensStack {
            dists,
            prompt_id: if id.is_empty() { None } else { Some(id) },
        });
    }
    Ok(stacks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn tiny_state() -> ModelState {
        init_model(&ModelConfig {
            vocab_size: 32,
            width: 16,
            n_layers: 3,
            heads: 2,
            mlp_expansion: 2,
            image_dim: 8,
            prefix_len: 2,
            max_seq: 16,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn final_lens_layer_equals_output_distribution_bitwise() {
        let state = tiny_state();
        let image = vec![0.4; 8];
        let q = vec![Token(9), Token(10), Token(11)];
        let stack = lens_distributions(&state, &image, &q).unwrap();
        let (_, out) = state.forward(&image, &q).unwrap();
        assert_eq!(stack.dists.last().unwrap().as_slice(), out.data());
    }

    #[test]
    fn stack_has_one_distribution_per_layer_each_normalized() {
        let state = tiny_state();
        let stack = lens_distributions(&state, &[0.1; 8], &[Token(12), Token(13)]).unwrap();
        assert_eq!(stack.n_layers(), 3);
        for dist in &stack.dists {
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dump_roundtrip() {
        let state = tiny_state();
        let mut stack = lens_distributions(&state, &[0.2; 8], &[Token(14)]).unwrap();
        stack.prompt_id = Some("fact-3".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stacks.bin");
        save_stacks(&[stack.clone()], &path).unwrap();
        let loaded = load_stacks(&path).unwrap();
        assert_eq!(loaded, vec![stack]);
    }

    #[test]
    fn dump_version_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LENS");
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_stacks(&path), Err(Error::Version { .. })));
    }
}
