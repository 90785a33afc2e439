//! Rank-1 low-rank editing of a single weight matrix, driven by one of six
//! defense objectives, with rewrite-score-based stopping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backprop::{forward_backward, BatchItem, Objective, TrainScope};
use crate::error::{Error, Result};
use crate::lens::lens_distributions;
use crate::metrics::rewrite_score;
use crate::model::{Fact, ModelState, Token};
use crate::tensor::{argmax, Tensor};
use crate::vocab;
use crate::worldgen::EvalBundle;

/// Which weight matrix the rank-1 delta applies to. Layers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditTarget {
    LlmMlpDown { layer: usize },
    ProjectorMlp,
}

impl EditTarget {
    pub fn param_name(&self) -> String {
        match self {
            EditTarget::LlmMlpDown { layer } => format!("layer{}.mlp.down", layer - 1),
            EditTarget::ProjectorMlp => "proj.w2".to_string(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EditTarget::LlmMlpDown { layer } => format!("llm_mlp_l{layer}"),
            EditTarget::ProjectorMlp => "projector_mlp".to_string(),
        }
    }
}

/// Rank-1 adapter: the effective delta on the target matrix is α·b·aᵀ.
/// Base weights stay untouched while the adapter is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: EditTarget,
    /// Output-side vector (rows of the target matrix).
    pub b: Tensor,
    /// Input-side vector (columns of the target matrix).
    pub a_vec: Tensor,
    pub alpha: f64,
}

fn adapter_seed(config_seed: u64, target: EditTarget) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(config_seed.to_le_bytes());
    hasher.update(target.label().as_bytes());
    let digest = hasher.finalize();
    let mut eight = [0u8; 8];
    eight.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(eight)
}

/// Attach a fresh adapter: `b` zeroed and `a` a seeded Gaussian, so the
/// initial delta is exactly zero and the forward pass is unchanged.
pub fn attach_lora(state: &ModelState, target: EditTarget, alpha: f64) -> Result<ModelState> {
    if state.adapter.is_some() {
        return Err(Error::State("an adapter is already attached".into()));
    }
    if let EditTarget::LlmMlpDown { layer } = target {
        if layer == 0 || layer > state.config.n_layers {
            return Err(Error::Config(format!(
                "edit layer {layer} outside 1..={}",
                state.config.n_layers
            )));
        }
    }
    let shape = state.param(&target.param_name()).shape().to_vec();
    let (out_dim, in_dim) = (shape[0], shape[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(adapter_seed(state.config.seed, target));
    let a_std = 1.0 / (in_dim as f64).sqrt();
    let mut edited = state.clone();
    edited.adapter = Some(LoraAdapter {
        target,
        b: Tensor::zeros(&[out_dim]),
        a_vec: Tensor::gaussian(&[in_dim], a_std, &mut rng),
        alpha,
    });
    Ok(edited)
}

/// Fold the adapter into the base weights: W ← W + α·b·aᵀ. The detached
/// state computes identical outputs to within rounding of the fold.
pub fn merge_lora(state: &ModelState) -> Result<ModelState> {
    let adapter = state
        .adapter
        .as_ref()
        .ok_or_else(|| Error::State("no adapter attached".into()))?
        .clone();
    let mut merged = state.clone();
    {
        let w = merged.param_mut(&adapter.target.param_name());
        let cols = w.shape()[1];
        let data = w.data_mut();
        for (r, &bv) in adapter.b.data().iter().enumerate() {
            let coeff = adapter.alpha * bv;
            for (c, &av) in adapter.a_vec.data().iter().enumerate() {
                data[r * cols + c] += coeff * av;
            }
        }
    }
    merged.adapter = None;
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Empty,
    FactErasure,
    ErrorInjection,
    HeadProjection,
    MaxEntropy,
    InputRephrasing,
}

impl DefenseKind {
    pub const ALL: [DefenseKind; 6] = [
        DefenseKind::Empty,
        DefenseKind::FactErasure,
        DefenseKind::ErrorInjection,
        DefenseKind::HeadProjection,
        DefenseKind::MaxEntropy,
        DefenseKind::InputRephrasing,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            DefenseKind::Empty => "empty",
            DefenseKind::FactErasure => "fact_erasure",
            DefenseKind::ErrorInjection => "error_injection",
            DefenseKind::HeadProjection => "head_projection",
            DefenseKind::MaxEntropy => "max_entropy",
            DefenseKind::InputRephrasing => "input_rephrasing",
        }
    }
}

/// Full description of one defense run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseSpec {
    pub kind: DefenseKind,
    /// Lens layer set L (1-based) for the head-projection and max-entropy
    /// kinds; must include the final layer.
    pub layers: Vec<usize>,
    pub top_k: usize,
    /// Margin in nats for the head-projection hinge.
    pub margin: f64,
    /// False target for error injection; when absent the edit falls back to
    /// the bundle's alternative answer.
    pub false_target: Option<Token>,
    pub empty_token: Token,
    pub lr: f64,
    pub max_steps: usize,
    /// Rewrite-score stop threshold τ.
    pub stop_threshold: f64,
    pub alpha: f64,
    /// Return the merged state rather than the attached one.
    pub merge_after: bool,
}

impl DefenseSpec {
    /// Defaults for a model of `n_layers` blocks: L is the upper half of the
    /// stack plus the final layer, k matches the evaluation budget.
    pub fn new(kind: DefenseKind, n_layers: usize) -> Self {
        let start = n_layers.div_ceil(2);
        DefenseSpec {
            kind,
            layers: (start..=n_layers).collect(),
            top_k: 20,
            margin: 0.1,
            false_target: None,
            empty_token: vocab::EMPTY,
            lr: 0.1,
            max_steps: 500,
            stop_threshold: 0.85,
            alpha: 1.0,
            merge_after: true,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layers.iter().any(|&l| l == 0 || l > n_layers) {
            return Err(Error::Config(format!(
                "defense layer set {:?} outside 1..={n_layers}",
                self.layers
            )));
        }
        let lens_kind = matches!(
            self.kind,
            DefenseKind::HeadProjection | DefenseKind::MaxEntropy
        );
        if lens_kind && !self.layers.contains(&n_layers) {
            return Err(Error::Config(
                "lens defenses must include the final layer in L".into(),
            ));
        }
        if self.stop_threshold > 1.0 {
            return Err(Error::Config("stop threshold above 1 is unreachable".into()));
        }
        if self.lr <= 0.0 || self.alpha == 0.0 {
            return Err(Error::Config("lr and alpha must be nonzero".into()));
        }
        Ok(())
    }
}

/// Outcome of a single-fact edit. The rewrite score is always recomputed
/// from the stored probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseReport {
    pub fact_id: usize,
    pub kind: DefenseKind,
    pub target: EditTarget,
    pub p_pre: f64,
    pub p_post: f64,
    pub steps: usize,
    pub converged: bool,
    pub loss_trace: Vec<f64>,
}

impl DefenseReport {
    pub fn rewrite_score(&self) -> f64 {
        rewrite_score(self.p_pre, self.p_post).expect("p_pre > 0 checked at edit time")
    }
}

fn objective_for(spec: &DefenseSpec, false_target: Option<Token>) -> Result<Objective> {
    Ok(match spec.kind {
        DefenseKind::Empty => Objective::EmptyResponse {
            empty: spec.empty_token,
        },
        DefenseKind::FactErasure | DefenseKind::InputRephrasing => Objective::FactErasure,
        DefenseKind::ErrorInjection => Objective::ErrorInjection {
            false_target: false_target.ok_or_else(|| {
                Error::Config("error injection needs a false target".into())
            })?,
        },
        DefenseKind::HeadProjection => Objective::HeadProjection {
            layers: spec.layers.clone(),
            top_k: spec.top_k,
            margin: spec.margin,
        },
        DefenseKind::MaxEntropy => Objective::MaxEntropy {
            layers: spec.layers.clone(),
        },
    })
}

/// The inputs the objective is trained on. Input rephrasing averages the
/// erasure loss over the original and its easy-level rephrases.
fn defense_batch(
    spec: &DefenseSpec,
    fact: &Fact,
    bundle: Option<&EvalBundle>,
) -> Result<Vec<BatchItem>> {
    let base = BatchItem {
        image: fact.image.clone(),
        question: fact.question.clone(),
        target: fact.answer,
    };
    if spec.kind != DefenseKind::InputRephrasing {
        return Ok(vec![base]);
    }
    let bundle = bundle.ok_or_else(|| {
        Error::Config("input rephrasing defense needs the fact's eval bundle".into())
    })?;
    let rv = bundle.image_rephrases[0].clone();
    let rq = bundle.question_rephrases[0].clone();
    Ok(vec![
        base,
        BatchItem {
            image: rv.clone(),
            question: fact.question.clone(),
            target: fact.answer,
        },
        BatchItem {
            image: fact.image.clone(),
            question: rq.clone(),
            target: fact.answer,
        },
        BatchItem {
            image: rv,
            question: rq,
            target: fact.answer,
        },
    ])
}

/// Kind-specific objective value with gradients w.r.t. the adapter only.
pub fn defense_loss(
    state: &ModelState,
    fact: &Fact,
    bundle: Option<&EvalBundle>,
    spec: &DefenseSpec,
) -> Result<(f64, crate::tensor::GradientSet)> {
    spec.validate(state.config.n_layers)?;
    if state.adapter.is_none() {
        return Err(Error::State("defense loss requires an attached adapter".into()));
    }
    let false_target = spec.false_target.or_else(|| bundle.map(|b| b.alt_answer));
    let objective = objective_for(spec, false_target)?;
    let batch = defense_batch(spec, fact, bundle)?;
    forward_backward(state, &batch, &objective, TrainScope::AdapterOnly)
}

/// Rank of `token` in a distribution under (probability desc, index asc).
pub fn lens_rank(dist: &[f64], token: Token) -> usize {
    let pt = dist[token.idx()];
    dist.iter()
        .enumerate()
        .filter(|&(i, &p)| p > pt || (p == pt && i < token.idx()))
        .count()
}

fn success_condition(
    state: &ModelState,
    fact: &Fact,
    spec: &DefenseSpec,
    false_target: Option<Token>,
) -> Result<(bool, f64)> {
    match spec.kind {
        DefenseKind::HeadProjection => {
            let stack = lens_distributions(state, &fact.image, &fact.question)?;
            let out = stack.dists.last().expect("nonempty stack");
            let p_now = out[fact.answer.idx()];
            let ok = spec
                .layers
                .iter()
                .all(|&l| lens_rank(&stack.dists[l - 1], fact.answer) >= spec.top_k);
            Ok((ok, p_now))
        }
        _ => {
            let (_, dist) = state.forward(&fact.image, &fact.question)?;
            let p_now = dist.data()[fact.answer.idx()];
            let ok = match spec.kind {
                DefenseKind::Empty => argmax(dist.data()) == spec.empty_token.idx(),
                DefenseKind::ErrorInjection => {
                    let t = false_target.expect("false target resolved");
                    argmax(dist.data()) == t.idx()
                }
                _ => true,
            };
            Ok((ok, p_now))
        }
    }
}

/// Edit one fact: attach a rank-1 adapter and run plain gradient descent on
/// it until the rewrite score clears τ and the kind's own success condition
/// holds, or the step budget runs out (reported as a non-converged edit).
pub fn edit(
    state: &ModelState,
    fact: &Fact,
    bundle: Option<&EvalBundle>,
    spec: &DefenseSpec,
    target: EditTarget,
) -> Result<(ModelState, DefenseReport)> {
    spec.validate(state.config.n_layers)?;
    let (pre_tok, p_pre) = state.answer(&fact.image, &fact.question)?;
    if pre_tok != fact.answer {
        return Err(Error::InvalidInput(format!(
            "model does not answer the fact before editing (fact {})",
            fact.id
        )));
    }
    let false_target = spec.false_target.or_else(|| bundle.map(|b| b.alt_answer));
    let mut edited = attach_lora(state, target, spec.alpha)?;
    let mut loss_trace = Vec::new();
    let mut steps = 0;
    let mut converged = false;
    let mut p_post;

    loop {
        let (success, p_now) = success_condition(&edited, fact, spec, false_target)?;
        p_post = p_now;
        let rewrite = rewrite_score(p_pre, p_now)?;
        if rewrite >= spec.stop_threshold && success {
            converged = true;
            break;
        }
        if steps >= spec.max_steps {
            break;
        }
        let (loss, grads) = defense_loss(&edited, fact, bundle, spec)?;
        loss_trace.push(loss);
        for name in ["adapter.b", "adapter.a"] {
            let grad = grads.get(name).expect("adapter gradient");
            let param = edited.any_param_mut(name);
            for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                *p -= spec.lr * g;
            }
        }
        steps += 1;
    }

    let report = DefenseReport {
        fact_id: fact.id,
        kind: spec.kind,
        target,
        p_pre,
        p_post,
        steps,
        converged,
        loss_trace,
    };
    let final_state = if spec.merge_after {
        merge_lora(&edited)?
    } else {
        edited
    };
    Ok((final_state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

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
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn fresh_adapter_leaves_outputs_unchanged() {
        let state = tiny_state();
        let image = vec![0.3; 8];
        let q = vec![Token(9), Token(10)];
        let (_, base) = state.forward(&image, &q).unwrap();
        for target in [EditTarget::LlmMlpDown { layer: 1 }, EditTarget::ProjectorMlp] {
            let attached = attach_lora(&state, target, 1.0).unwrap();
            let (_, dist) = attached.forward(&image, &q).unwrap();
            assert_eq!(base.data(), dist.data());
        }
    }

    #[test]
    fn double_attach_is_a_state_error() {
        let state = tiny_state();
        let once = attach_lora(&state, EditTarget::ProjectorMlp, 1.0).unwrap();
        assert!(matches!(
            attach_lora(&once, EditTarget::ProjectorMlp, 1.0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn merge_of_untrained_adapter_preserves_base_weights() {
        let state = tiny_state();
        let attached = attach_lora(&state, EditTarget::LlmMlpDown { layer: 2 }, 1.0).unwrap();
        let merged = merge_lora(&attached).unwrap();
        assert!(merged.adapter.is_none());
        assert_eq!(state.param("layer1.mlp.down"), merged.param("layer1.mlp.down"));
    }

    #[test]
    fn merged_state_matches_attached_state() {
        let state = tiny_state();
        let mut attached = attach_lora(&state, EditTarget::LlmMlpDown { layer: 2 }, 1.0).unwrap();
        {
            let adapter = attached.adapter.as_mut().unwrap();
            for (i, v) in adapter.b.data_mut().iter_mut().enumerate() {
                *v = 0.05 * ((i as f64) * 0.9).sin();
            }
        }
        let merged = merge_lora(&attached).unwrap();
        let image = vec![0.1, -0.4, 0.2, 0.8, -0.3, 0.6, 0.0, -0.1];
        let q = vec![Token(11), Token(12), Token(13)];
        let (_, da) = attached.forward(&image, &q).unwrap();
        let (_, dm) = merged.forward(&image, &q).unwrap();
        let max_diff = da
            .data()
            .iter()
            .zip(dm.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-10, "attached vs merged diff {max_diff}");
    }

    #[test]
    fn double_merge_is_a_state_error() {
        let state = tiny_state();
        let attached = attach_lora(&state, EditTarget::ProjectorMlp, 1.0).unwrap();
        let merged = merge_lora(&attached).unwrap();
        assert!(matches!(merge_lora(&merged), Err(Error::State(_))));
    }

    #[test]
    fn weight_delta_is_rank_one() {
        let state = tiny_state();
        let mut attached = attach_lora(&state, EditTarget::LlmMlpDown { layer: 1 }, 1.0).unwrap();
        {
            let adapter = attached.adapter.as_mut().unwrap();
            for (i, v) in adapter.b.data_mut().iter_mut().enumerate() {
                *v = ((i as f64) * 1.1).cos();
            }
        }
        let merged = merge_lora(&attached).unwrap();
        let base = state.param("layer0.mlp.down");
        let after = merged.param("layer0.mlp.down");
        let rows = base.shape()[0];
        let cols = base.shape()[1];
        let delta: Vec<f64> = after
            .data()
            .iter()
            .zip(base.data())
            .map(|(a, b)| a - b)
            .collect();
        let m = nalgebra::DMatrix::from_row_slice(rows, cols, &delta);
        let svd = m.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[0] > 0.0);
        assert!(sv[1] <= 1e-8 * sv[0], "second singular value {} vs {}", sv[1], sv[0]);
    }

    #[test]
    fn defense_spec_requires_final_layer_for_lens_kinds() {
        let mut spec = DefenseSpec::new(DefenseKind::HeadProjection, 4);
        spec.layers = vec![2, 3];
        assert!(matches!(spec.validate(4), Err(Error::Config(_))));
    }

    #[test]
    fn lens_rank_breaks_ties_toward_lower_index() {
        let dist = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(lens_rank(&dist, Token(0)), 0);
        assert_eq!(lens_rank(&dist, Token(3)), 3);
    }

    #[test]
    fn defense_loss_requires_adapter() {
        let state = tiny_state();
        let fact = Fact {
            id: 0,
            image: vec![0.0; 8],
            question: vec![Token(9), Token(10)],
            answer: Token(20),
        };
        let spec = DefenseSpec::new(DefenseKind::FactErasure, 2);
        assert!(matches!(
            defense_loss(&state, &fact, None, &spec),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn input_rephrasing_without_bundle_is_a_config_error() {
        let state = tiny_state();
        let attached = attach_lora(&state, EditTarget::LlmMlpDown { layer: 2 }, 1.0).unwrap();
        let fact = Fact {
            id: 0,
            image: vec![0.0; 8],
            question: vec![Token(9), Token(10)],
            answer: Token(20),
        };
        let spec = DefenseSpec::new(DefenseKind::InputRephrasing, 2);
        assert!(matches!(
            defense_loss(&attached, &fact, None, &spec),
            Err(Error::Config(_))
        ));
    }
}
