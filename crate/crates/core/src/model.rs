//! Toy multimodal language model: a two-layer MLP projector turns an image
//! feature vector into a couple of soft prefix tokens, followed by a small
//! pre-norm decoder-only transformer read out at the final prompt position.
//!
//! Layout per block: parameter-free RMS norm → causal multi-head attention →
//! residual add → parameter-free RMS norm → SiLU MLP → residual add. A single
//! learnable RMS norm gain sits in front of the unembedding and is shared by
//! the per-layer lens projections.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backprop::{self, Objective, TrainScope};
use crate::editor::{EditTarget, LoraAdapter};
use crate::error::{Error, Result};
use crate::tensor::{matvec, softmax_slice, Tensor};
use crate::vocab;

/// Vocabulary index.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

/// One multimodal knowledge item: image features, question tokens, and a
/// single answer token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub image: Vec<f64>,
    pub question: Vec<Token>,
    pub answer: Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub mlp_expansion: usize,
    pub image_dim: usize,
    pub prefix_len: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            width: 64,
            n_layers: 4,
            heads: 4,
            mlp_expansion: 4,
            image_dim: 32,
            prefix_len: 2,
            max_seq: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Width and depth both doubled; the scaling-comparison counterpart.
    pub fn scaled_up(&self) -> ModelConfig {
        ModelConfig {
            width: self.width * 2,
            n_layers: self.n_layers * 2,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.vocab_size <= vocab::RESERVED as usize {
            return Err(Error::Config(format!(
                "vocab_size {} must exceed the {} reserved tokens",
                self.vocab_size,
                vocab::RESERVED
            )));
        }
        if self.n_layers == 0 || self.mlp_expansion == 0 || self.image_dim == 0 {
            return Err(Error::Config("layers, expansion, image_dim must be positive".into()));
        }
        if self.prefix_len == 0 || self.max_seq <= self.prefix_len {
            return Err(Error::Config(
                "max_seq must leave room for at least one question token".into(),
            ));
        }
        Ok(())
    }

    /// Parameter names in a fixed order, with shapes.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width;
        let v = self.vocab_size;
        let f = self.mlp_expansion * d;
        let p = self.prefix_len * d;
        let mut layout = vec![
            ("embed.tok".to_string(), vec![v, d]),
            ("proj.w1".to_string(), vec![d, self.image_dim]),
            ("proj.b1".to_string(), vec![d]),
            ("proj.w2".to_string(), vec![p, d]),
            ("proj.b2".to_string(), vec![p]),
        ];
        for l in 0..self.n_layers {
            for m in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                layout.push((format!("layer{l}.{m}"), vec![d, d]));
            }
            layout.push((format!("layer{l}.mlp.up"), vec![f, d]));
            layout.push((format!("layer{l}.mlp.down"), vec![d, f]));
        }
        layout.push(("final_norm.gain".to_string(), vec![d]));
        layout.push(("unembed.w".to_string(), vec![v, d]));
        layout
    }

    pub fn param_count(&self) -> usize {
        self.param_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// All weights of the model plus an optional attached rank-1 adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub(crate) params: BTreeMap<String, Tensor>,
    pub adapter: Option<LoraAdapter>,
}

/// Deterministic per-parameter init stream: independent of registry order.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut eight = [0u8; 8];
    eight.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(eight))
}

/// Deterministic scaled-Gaussian initialization (scale 0.02 for weights,
/// zeros for biases, ones for the final norm gain).
pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let mut params = BTreeMap::new();
    for (name, shape) in config.param_layout() {
        let tensor = if name.ends_with(".b1") || name.ends_with(".b2") {
            Tensor::zeros(&shape)
        } else if name == "final_norm.gain" {
            Tensor::from_vec(&shape, vec![1.0; shape[0]])?
        } else {
            let mut rng = param_rng(config.seed, &name);
            Tensor::gaussian(&shape, 0.02, &mut rng)
        };
        params.insert(name, tensor);
    }
    Ok(ModelState {
        config: config.clone(),
        params,
        adapter: None,
    })
}

pub(crate) const RMS_EPS: f64 = 1e-6;

pub(crate) fn rms(x: &[f64]) -> f64 {
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    (ms + RMS_EPS).sqrt()
}

pub(crate) fn rmsnorm(x: &[f64]) -> (Vec<f64>, f64) {
    let r = rms(x);
    (x.iter().map(|v| v / r).collect(), r)
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl ModelState {
    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Names of everything trainable right now, adapter included.
    pub fn trainable_names(&self, scope: TrainScope) -> Vec<String> {
        match scope {
            TrainScope::All => {
                let mut names: Vec<String> = self.params.keys().cloned().collect();
                if self.adapter.is_some() {
                    names.push("adapter.b".into());
                    names.push("adapter.a".into());
                }
                names
            }
            TrainScope::AdapterOnly => vec!["adapter.b".into(), "adapter.a".into()],
        }
    }

    /// Resolve a trainable name, treating adapter vectors as parameters.
    pub fn any_param(&self, name: &str) -> &Tensor {
        match name {
            "adapter.b" => &self.adapter.as_ref().expect("no adapter attached").b,
            "adapter.a" => &self.adapter.as_ref().expect("no adapter attached").a_vec,
            _ => self.param(name),
        }
    }

    pub fn any_param_mut(&mut self, name: &str) -> &mut Tensor {
        match name {
            "adapter.b" => &mut self.adapter.as_mut().expect("no adapter attached").b,
            "adapter.a" => &mut self.adapter.as_mut().expect("no adapter attached").a_vec,
            _ => self.param_mut(name),
        }
    }

    /// SHA-256 over config and every weight, used for isolation asserts.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, tensor) in &self.params {
            hasher.update(name.as_bytes());
            for v in tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        if let Some(adapter) = &self.adapter {
            hasher.update(b"adapter");
            hasher.update(adapter.alpha.to_le_bytes());
            for v in adapter.b.data().iter().chain(adapter.a_vec.data()) {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Soft prefix embeddings produced by the projector for image features `v`.
    pub(crate) fn project_image(&self, image: &[f64]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.config;
        if image.len() != cfg.image_dim {
            return Err(Error::Config(format!(
                "image feature length {} does not match projector input {}",
                image.len(),
                cfg.image_dim
            )));
        }
        let d = cfg.width;
        let mut hidden = matvec(self.param("proj.w1").data(), image, d, cfg.image_dim);
        for (h, b) in hidden.iter_mut().zip(self.param("proj.b1").data()) {
            *h = silu(*h + b);
        }
        let p = cfg.prefix_len * d;
        let mut out = matvec(self.param("proj.w2").data(), &hidden, p, d);
        for (o, b) in out.iter_mut().zip(self.param("proj.b2").data()) {
            *o += b;
        }
        if let Some(adapter) = &self.adapter {
            if adapter.target == EditTarget::ProjectorMlp {
                let coeff = adapter.alpha * crate::tensor::dot(adapter.a_vec.data(), &hidden);
                crate::tensor::axpy(&mut out, coeff, adapter.b.data());
            }
        }
        Ok(out.chunks(d).map(|c| c.to_vec()).collect())
    }

    /// Lens projection shared by the output head and every probed layer:
    /// softmax(unembed(final_norm(h))).
    pub(crate) fn project_to_dist(&self, h: &[f64]) -> Vec<f64> {
        softmax_slice(&self.project_to_logits(h))
    }

    pub(crate) fn project_to_logits(&self, h: &[f64]) -> Vec<f64> {
        let d = self.config.width;
        let (normed, _) = rmsnorm(h);
        let gain = self.param("final_norm.gain").data();
        let scaled: Vec<f64> = normed.iter().zip(gain).map(|(n, g)| n * g).collect();
        matvec(self.param("unembed.w").data(), &scaled, self.config.vocab_size, d)
    }

    pub(crate) fn embed_sequence(&self, image: &[f64], question: &[Token]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.config;
        let total = cfg.prefix_len + question.len();
        if question.is_empty() {
            return Err(Error::InvalidInput("empty question".into()));
        }
        if total > cfg.max_seq {
            return Err(Error::InvalidInput(format!(
                "sequence length {total} exceeds max_seq {}",
                cfg.max_seq
            )));
        }
        let mut seq = self.project_image(image)?;
        let embed = self.param("embed.tok");
        for tok in question {
            if tok.idx() >= cfg.vocab_size {
                return Err(Error::InvalidInput(format!(
                    "token {} outside vocabulary of size {}",
                    tok.0, cfg.vocab_size
                )));
            }
            seq.push(embed.row(tok.idx()).to_vec());
        }
        Ok(seq)
    }

    /// Run one causal block in place over `x`, using adapter delta when the
    /// block hosts it.
    pub(crate) fn run_block(&self, layer: usize, x: &mut [Vec<f64>]) {
        let cfg = &self.config;
        let d = cfg.width;
        let heads = cfg.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let t_len = x.len();

        let wq = self.param(&format!("layer{layer}.attn.wq"));
        let wk = self.param(&format!("layer{layer}.attn.wk"));
        let wv = self.param(&format!("layer{layer}.attn.wv"));
        let wo = self.param(&format!("layer{layer}.attn.wo"));

        let mut qs = Vec::with_capacity(t_len);
        let mut ks = Vec::with_capacity(t_len);
        let mut vs = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (xn, _) = rmsnorm(&x[t]);
            qs.push(matvec(wq.data(), &xn, d, d));
            ks.push(matvec(wk.data(), &xn, d, d));
            vs.push(matvec(wv.data(), &xn, d, d));
        }
        for t in 0..t_len {
            let mut ho = vec![0.0; d];
            for h in 0..heads {
                let r = h * hd..(h + 1) * hd;
                let logits: Vec<f64> = (0..=t)
                    .map(|s| crate::tensor::dot(&qs[t][r.clone()], &ks[s][r.clone()]) * scale)
                    .collect();
                let weights = softmax_slice(&logits);
                for (s, w) in weights.iter().enumerate() {
                    crate::tensor::axpy(&mut ho[r.clone()], *w, &vs[s][r.clone()]);
                }
            }
            let attn_out = matvec(wo.data(), &ho, d, d);
            for (xi, a) in x[t].iter_mut().zip(&attn_out) {
                *xi += a;
            }
        }

        let up = self.param(&format!("layer{layer}.mlp.up"));
        let down = self.param(&format!("layer{layer}.mlp.down"));
        let f = cfg.mlp_expansion * d;
        let adapter = self.adapter.as_ref().filter(|a| {
            a.target == EditTarget::LlmMlpDown { layer: layer + 1 }
        });
        for t in 0..t_len {
            let (xn, _) = rmsnorm(&x[t]);
            let mut u = matvec(up.data(), &xn, f, d);
            for v in u.iter_mut() {
                *v = silu(*v);
            }
            let mut m = matvec(down.data(), &u, d, f);
            if let Some(a) = adapter {
                let coeff = a.alpha * crate::tensor::dot(a.a_vec.data(), &u);
                crate::tensor::axpy(&mut m, coeff, a.b.data());
            }
            for (xi, mi) in x[t].iter_mut().zip(&m) {
                *xi += mi;
            }
        }
    }

    /// Full forward pass. Returns the post-block residual at the final
    /// position for every layer, and the output next-token distribution.
    pub fn forward(&self, image: &[f64], question: &[Token]) -> Result<(Vec<Vec<f64>>, Tensor)> {
        let mut x = self.embed_sequence(image, question)?;
        let last = x.len() - 1;
        let mut hidden = Vec::with_capacity(self.config.n_layers);
        for layer in 0..self.config.n_layers {
            self.run_block(layer, &mut x);
            hidden.push(x[last].clone());
        }
        let dist = self.project_to_dist(&x[last]);
        let dist = Tensor::from_vec(&[self.config.vocab_size], dist)?;
        Ok((hidden, dist))
    }

    /// Greedy answer: argmax token of the output distribution and its
    /// probability.
    pub fn answer(&self, image: &[f64], question: &[Token]) -> Result<(Token, f64)> {
        let (_, dist) = self.forward(image, question)?;
        let idx = crate::tensor::argmax(dist.data());
        Ok((Token(idx as u32), dist.data()[idx]))
    }

    /// Exact-match accuracy over a fact list.
    pub fn exact_match(&self, facts: &[Fact]) -> Result<f64> {
        if facts.is_empty() {
            return Err(Error::InvalidInput("empty evaluation set".into()));
        }
        let hits: usize = facts
            .iter()
            .map(|f| {
                let (tok, _) = self.answer(&f.image, &f.question)?;
                Ok(usize::from(tok == f.answer))
            })
            .collect::<Result<Vec<_>>>()?
            .iter()
            .sum();
        Ok(hits as f64 / facts.len() as f64)
    }
}

/// Pretraining hyperparameters: Adam over shuffled epochs, with the
/// learning rate decayed linearly to zero across the step budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainHyper {
    pub max_steps: usize,
    pub lr: f64,
    /// Linearly anneal the rate from `lr` to zero over `max_steps`.
    pub lr_decay: bool,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_every: usize,
    /// Early-stop bar; must be at least the 0.99 contract floor.
    pub target_accuracy: f64,
    pub seed: u64,
    /// Log evaluation checkpoints to stderr.
    pub verbose: bool,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper {
            max_steps: 9_000,
            lr: 2e-3,
            lr_decay: true,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            eval_every: 200,
            target_accuracy: 0.995,
            seed: 1,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps_run: usize,
    pub final_accuracy: f64,
    /// (step, corpus exact-match) at every evaluation checkpoint.
    pub accuracy_trace: Vec<(usize, f64)>,
}

const ACCURACY_FLOOR: f64 = 0.99;

/// Cross-entropy memorization of the corpus at the answer position.
/// Fails with a convergence error if the corpus accuracy floor of 0.99 is
/// not reached within the step budget.
pub fn pretrain(
    state: &ModelState,
    corpus: &[Fact],
    hyper: &PretrainHyper,
) -> Result<(ModelState, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty pretraining corpus".into()));
    }
    for fact in corpus {
        if fact.answer.idx() >= state.config.vocab_size {
            return Err(Error::InvalidInput(format!(
                "corpus answer token {} outside vocabulary",
                fact.answer.0
            )));
        }
    }
    let mut state = state.clone();
    let mut adam_m: BTreeMap<String, Vec<f64>> = state
        .params
        .iter()
        .map(|(k, t)| (k.clone(), vec![0.0; t.len()]))
        .collect();
    let mut adam_v = adam_m.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = corpus.len(); // forces a shuffle on first use
    let mut trace = Vec::new();
    let mut steps_run = 0;

    for step in 0..hyper.max_steps {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        for _ in 0..hyper.batch_size {
            if cursor >= order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let fact = &corpus[order[cursor]];
            cursor += 1;
            batch.push(backprop::BatchItem {
                image: fact.image.clone(),
                question: fact.question.clone(),
                target: fact.answer,
            });
        }
        let (_, grads) =
            backprop::forward_backward(&state, &batch, &Objective::CrossEntropy, TrainScope::All)?;
        let decay = if hyper.lr_decay {
            1.0 - step as f64 / hyper.max_steps as f64
        } else {
            1.0
        };
        let t = (step + 1) as f64;
        let lr_t = hyper.lr * decay * (1.0 - hyper.beta2.powf(t)).sqrt()
            / (1.0 - hyper.beta1.powf(t));
        for (name, grad) in grads.iter() {
            let m = adam_m.get_mut(name).expect("adam slot");
            let v = adam_v.get_mut(name).expect("adam slot");
            let param = state.param_mut(name);
            for (i, g) in grad.data().iter().enumerate() {
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
                param.data_mut()[i] -= lr_t * m[i] / (v[i].sqrt() + hyper.eps);
            }
        }
        steps_run = step + 1;
        if steps_run % hyper.eval_every == 0 || steps_run == hyper.max_steps {
            let acc = state.exact_match(corpus)?;
            trace.push((steps_run, acc));
            if hyper.verbose {
                eprintln!("pretrain step {steps_run}: corpus accuracy {acc:.4}");
            }
            if acc >= hyper.target_accuracy {
                break;
            }
        }
    }

    let final_accuracy = match trace.last() {
        Some(&(step, acc)) if step == steps_run => acc,
        _ => {
            let acc = state.exact_match(corpus)?;
            trace.push((steps_run, acc));
            acc
        }
    };
    if final_accuracy < ACCURACY_FLOOR {
        return Err(Error::Convergence {
            final_accuracy,
            target: ACCURACY_FLOOR,
            steps: steps_run,
        });
    }
    Ok((
        state,
        PretrainReport {
            steps_run,
            final_accuracy,
            accuracy_trace: trace,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig {
            width: 16,
            n_layers: 2,
            heads: 2,
            vocab_size: 32,
            image_dim: 8,
            ..ModelConfig::default()
        };
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            width: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(init_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn param_count_matches_shape_sum() {
        let cfg = ModelConfig::default();
        // by-hand shape sum: embeddings, projector, blocks, final gain, unembed
        let (v, d, n, f, p, di) = (256usize, 64usize, 4usize, 256usize, 128usize, 32usize);
        let expect = v * d
            + (d * di + d + p * d + p)
            + n * (4 * d * d + f * d + d * f)
            + d
            + v * d;
        assert_eq!(cfg.param_count(), expect);
        let model = init_model(&cfg).unwrap();
        let actual: usize = model.params.values().map(|t| t.len()).sum();
        assert_eq!(actual, expect);
    }

    fn tiny_state() -> ModelState {
        init_model(&ModelConfig {
            vocab_size: 32,
            width: 16,
            n_layers: 2,
            heads: 2,
            mlp_expansion: 2,
            image_dim: 8,
            prefix_len: 2,
            max_seq: 16,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn forward_distribution_is_normalized() {
        let state = tiny_state();
        let image = vec![0.3; 8];
        let q = vec![Token(9), Token(10), Token(11)];
        let (hidden, dist) = state.forward(&image, &q).unwrap();
        assert_eq!(hidden.len(), 2);
        let sum: f64 = dist.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_unembedding_gives_uniform_output() {
        let mut state = tiny_state();
        let v = state.config.vocab_size;
        *state.param_mut("unembed.w") = Tensor::zeros(&[v, state.config.width]);
        let (_, dist) = state.forward(&[0.1; 8], &[Token(9)]).unwrap();
        for &p in dist.data() {
            assert!((p - 1.0 / v as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn default_config_hidden_depth_is_four() {
        let state = init_model(&ModelConfig::default()).unwrap();
        let (hidden, _) = state.forward(&[0.0; 32], &[Token(9), Token(10)]).unwrap();
        assert_eq!(hidden.len(), 4);
    }

    #[test]
    fn sequence_overflow_is_rejected() {
        let state = tiny_state();
        let q = vec![Token(9); 15]; // 2 prefix + 15 > 16
        assert!(matches!(
            state.forward(&[0.0; 8], &q),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn answer_probability_matches_distribution() {
        let state = tiny_state();
        let image = vec![0.2; 8];
        let q = vec![Token(12), Token(13)];
        let (tok, p) = state.answer(&image, &q).unwrap();
        let (_, dist) = state.forward(&image, &q).unwrap();
        assert_eq!(p, dist.data()[tok.idx()]);
    }

    #[test]
    fn repeated_forward_is_bitwise_identical() {
        let state = tiny_state();
        let image = vec![0.5; 8];
        let q = vec![Token(8), Token(21)];
        let (h1, d1) = state.forward(&image, &q).unwrap();
        let (h2, d2) = state.forward(&image, &q).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let state = tiny_state();
        assert!(matches!(
            pretrain(&state, &[], &PretrainHyper::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn single_fact_memorizes_quickly() {
        let state = tiny_state();
        let fact = Fact {
            id: 0,
            image: vec![0.4, -0.2, 0.9, 0.1, -0.5, 0.3, 0.0, 0.7],
            question: vec![Token(9), Token(17), Token(23)],
            answer: Token(29),
        };
        let hyper = PretrainHyper {
            max_steps: 200,
            batch_size: 4,
            eval_every: 20,
            lr: 0.3,
            ..PretrainHyper::default()
        };
        let (trained, report) = pretrain(&state, &[fact.clone()], &hyper).unwrap();
        assert_eq!(report.final_accuracy, 1.0);
        let (tok, _) = trained.answer(&fact.image, &fact.question).unwrap();
        assert_eq!(tok, fact.answer);
    }
}
