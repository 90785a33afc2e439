//! Budget-bounded candidate-set extraction attacks: whitebox lens probes,
//! post-edit finetuning, and blackbox rephrase queries.
//!
//! Every attack builds a scored token pool, deduplicates it, ranks by
//! (score desc, token index asc) and truncates to the budget B. Per-layer
//! pool quotas are sized so the result provably equals the global top-B
//! under the attack's scoring rule, which is what the brute-force oracle in
//! the test suite checks.

use serde::{Deserialize, Serialize};

use crate::backprop::{forward_backward, BatchItem, Objective, TrainScope};
use crate::editor::merge_lora;
use crate::error::{Error, Result};
use crate::lens::{lens_distributions, LensStack};
use crate::model::{Fact, ModelState, Token};
use crate::worldgen::{EvalBundle, Level};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Hp,
    Pd,
    Pd2,
    FtHp,
    BbImage,
    BbQuestion,
    BbMultimodal,
}

impl AttackKind {
    pub fn is_blackbox(self) -> bool {
        matches!(
            self,
            AttackKind::BbImage | AttackKind::BbQuestion | AttackKind::BbMultimodal
        )
    }
}

/// Ordered, deduplicated candidate tokens with non-increasing scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub fact_id: usize,
    pub kind: AttackKind,
    pub budget: usize,
    pub tokens: Vec<Token>,
    pub scores: Vec<f64>,
}

impl CandidateSet {
    pub fn contains(&self, token: Token) -> bool {
        self.tokens.contains(&token)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtParams {
    pub steps: usize,
    pub facts: usize,
    pub lr: f64,
}

impl Default for FtParams {
    fn default() -> Self {
        FtParams {
            steps: 50,
            facts: 32,
            lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub budget: usize,
    /// Lens layers to probe (1-based); `None` probes all layers.
    pub probed_layers: Option<Vec<usize>>,
    /// Optional fixed per-layer pool quota. The default quota is derived
    /// from the budget so that the candidate set is exactly the top-B by
    /// score; overriding it trades that guarantee for a cheaper pool.
    pub k_schedule: Option<Vec<usize>>,
    /// Finetuning parameters; present exactly when `kind` is `FtHp`.
    pub ft: Option<FtParams>,
    /// Rephrase level; present exactly for the blackbox kinds.
    pub level: Option<Level>,
}

impl AttackSpec {
    pub fn whitebox(kind: AttackKind, budget: usize) -> Self {
        AttackSpec {
            kind,
            budget,
            probed_layers: None,
            k_schedule: None,
            ft: None,
            level: None,
        }
    }

    pub fn ft_hp(budget: usize, ft: FtParams) -> Self {
        AttackSpec {
            kind: AttackKind::FtHp,
            budget,
            probed_layers: None,
            k_schedule: None,
            ft: Some(ft),
            level: None,
        }
    }

    pub fn blackbox(kind: AttackKind, level: Level, budget: usize) -> Self {
        AttackSpec {
            kind,
            budget,
            probed_layers: None,
            k_schedule: None,
            ft: None,
            level: Some(level),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("attack budget must be at least 1".into()));
        }
        if self.ft.is_some() != (self.kind == AttackKind::FtHp) {
            return Err(Error::Config(
                "finetune parameters must be present exactly for the ft_hp kind".into(),
            ));
        }
        if self.level.is_some() != self.kind.is_blackbox() {
            return Err(Error::Config(
                "a rephrase level must be present exactly for blackbox kinds".into(),
            ));
        }
        Ok(())
    }

    /// Report column name.
    pub fn label(&self) -> String {
        match (self.kind, self.level) {
            (AttackKind::Hp, _) => "hp".into(),
            (AttackKind::Pd, _) => "pd".into(),
            (AttackKind::Pd2, _) => "pd2".into(),
            (AttackKind::FtHp, _) => "ft_hp".into(),
            (AttackKind::BbImage, Some(l)) => format!("bb_image_{}", l.label()),
            (AttackKind::BbQuestion, Some(l)) => format!("bb_question_{}", l.label()),
            (AttackKind::BbMultimodal, _) => "bb_multimodal".into(),
            _ => unreachable!("validated spec"),
        }
    }
}

/// Rank pooled tokens by (score desc, index asc) and truncate to `budget`.
fn rank_truncate(pool: &[(usize, f64)], budget: usize) -> (Vec<Token>, Vec<f64>) {
    let mut pool = pool.to_vec();
    pool.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite attack scores")
            .then(a.0.cmp(&b.0))
    });
    pool.truncate(budget);
    let tokens = pool.iter().map(|&(i, _)| Token(i as u32)).collect();
    let scores = pool.iter().map(|&(_, s)| s).collect();
    (tokens, scores)
}

/// Indices of the `quota` largest values under (value desc, index asc).
fn top_indices(values: &[f64], quota: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("finite values")
            .then(a.cmp(&b))
    });
    idx.truncate(quota);
    idx
}

fn resolve_layers(spec: &AttackSpec, n_layers: usize) -> Result<Vec<usize>> {
    match &spec.probed_layers {
        None => Ok((0..n_layers).collect()),
        Some(layers) => {
            let mut out = Vec::with_capacity(layers.len());
            for &l in layers {
                if l == 0 || l > n_layers {
                    return Err(Error::Config(format!(
                        "probed layer {l} outside 1..={n_layers}"
                    )));
                }
                out.push(l - 1);
            }
            out.sort_unstable();
            out.dedup();
            Ok(out)
        }
    }
}

/// Whitebox candidate construction from a lens stack alone. Exposed so the
/// attacks can be checked against synthetic stacks and a brute-force oracle.
pub fn whitebox_from_stack(
    kind: AttackKind,
    stack: &LensStack,
    fact_id: usize,
    spec: &AttackSpec,
) -> Result<CandidateSet> {
    spec.validate(    )?;
    let n_layers = stack.n_layers();
    let layers = resolve_layers(spec, n_layers)?;
    let vocab = stack
        .dists
        .first()
        .map(|d| d.len())
        .ok_or_else(|| Error::InvalidInput("empty lens stack".into()))?;
    let budget = if spec.budget > vocab {
        eprintln!(
            "warning: attack budget {} clamped to vocabulary size {}",
            spec.budget, vocab
        );
        vocab
    } else {
        spec.budget
    };

    let dists: Vec<&Vec<f64>> = layers.iter().map(|&l| &stack.dists[l]).collect();
    let quota_for = |slot: usize, default: usize| -> usize {
        spec.k_schedule
            .as_ref()
            .and_then(|ks| ks.get(slot).copied())
            .unwrap_or(default)
    };

    let mut scores = vec![f64::NEG_INFINITY; vocab];
    let mut pooled = vec![false; vocab];
    match kind {
        AttackKind::Hp => {
            for (slot, dist) in dists.iter().enumerate() {
                for &t in &top_indices(dist, quota_for(slot, budget)) {
                    pooled[t] = true;
                }
                for (s, &p) in scores.iter_mut().zip(dist.iter()) {
                    if p > *s {
                        *s = p;
                    }
                }
            }
        }
        AttackKind::Pd | AttackKind::Pd2 => {
            let min_layers = if kind == AttackKind::Pd { 2 } else { 3 };
            if dists.len() < min_layers {
                return Err(Error::Config(format!(
                    "{kind:?} needs at least {min_layers} probed layers"
                )));
            }
            let deltas: Vec<Vec<f64>> = dists
                .windows(2)
                .map(|w| w[1].iter().zip(w[0].iter()).map(|(hi, lo)| hi - lo).collect())
                .collect();
            let series: Vec<Vec<f64>> = if kind == AttackKind::Pd {
                deltas
            } else {
                deltas
                    .windows(2)
                    .map(|w| {
                        w[1].iter()
                            .zip(w[0].iter())
                            .map(|(next, prev)| next - prev)
                            .collect()
                    })
                    .collect()
            };
            for (slot, delta) in series.iter().enumerate() {
                let side = quota_for(slot, 2 * budget).div_ceil(2);
                for &t in &top_indices(delta, side) {
                    pooled[t] = true;
                }
                let negated: Vec<f64> = delta.iter().map(|d| -d).collect();
                for &t in &top_indices(&negated, side) {
                    pooled[t] = true;
                }
                for (s, &d) in scores.iter_mut().zip(delta.iter()) {
                    if d.abs() > *s {
                        *s = d.abs();
                    }
                }
            }
        }
        _ => {
            return Err(Error::Config(format!(
                "{kind:?} is not a lens-stack attack"
            )))
        }
    }

    let pool: Vec<(usize, f64)> = (0..vocab)
        .filter(|&t| pooled[t])
        .map(|t| (t, scores[t]))
        .collect();
    let (tokens, out_scores) = rank_truncate(&pool, budget);
    Ok(CandidateSet {
        fact_id,
        kind,
        budget,
        tokens,
        scores: out_scores,
    })
}

/// Lens-exploiting whitebox attack against an edited model.
pub fn whitebox_attack(state: &ModelState, fact: &Fact, spec: &AttackSpec) -> Result<CandidateSet> {
    let stack = lens_distributions(state, &fact.image, &fact.question)?;
    whitebox_from_stack(spec.kind, &stack, fact.id, spec)
}

/// Copy the edited model, finetune every parameter on unrelated control
/// facts, then run the lens attack on the tuned copy. The edited state
/// itself is never touched.
pub fn finetune_then_attack(
    edited: &ModelState,
    control_facts: &[Fact],
    fact: &Fact,
    spec: &AttackSpec,
) -> Result<CandidateSet> {
    spec.validate()?;
    let ft = spec
        .ft
        .as_ref()
        .ok_or_else(|| Error::Config("ft_hp requires finetune parameters".into()))?;
    if control_facts.is_empty() {
        return Err(Error::InvalidInput("no control facts for finetuning".into()));
    }
    if control_facts.iter().any(|c| c.id == fact.id) {
        return Err(Error::InvalidInput(
            "control facts overlap the attacked fact".into(),
        ));
    }
    let mut tuned = if edited.adapter.is_some() {
        merge_lora(edited)?
    } else {
        edited.clone()
    };
    let batch: Vec<BatchItem> = control_facts
        .iter()
        .take(ft.facts.max(1))
        .map(|c| BatchItem {
            image: c.image.clone(),
            question: c.question.clone(),
            target: c.answer,
        })
        .collect();
    let mut velocity: std::collections::BTreeMap<String, Vec<f64>> = tuned
        .trainable_names(TrainScope::All)
        .into_iter()
        .map(|n| {
            let len = tuned.any_param(&n).len();
            (n, vec![0.0; len])
        })
        .collect();
    for _ in 0..ft.steps {
        let (_, grads) =
            forward_backward(&tuned, &batch, &Objective::CrossEntropy, TrainScope::All)?;
        for (name, grad) in grads.iter() {
            let vel = velocity.get_mut(name).expect("velocity slot");
            let param = tuned.any_param_mut(name);
            for (i, g) in grad.data().iter().enumerate() {
                vel[i] = 0.9 * vel[i] - ft.lr * g;
                param.data_mut()[i] += vel[i];
            }
        }
    }
    let stack = lens_distributions(&tuned, &fact.image, &fact.question)?;
    let mut set = whitebox_from_stack(AttackKind::Hp, &stack, fact.id, &{
        let mut hp = AttackSpec::whitebox(AttackKind::Hp, spec.budget);
        hp.probed_layers = spec.probed_layers.clone();
        hp.k_schedule = spec.k_schedule.clone();
        hp
    })?;
    set.kind = AttackKind::FtHp;
    Ok(set)
}

/// Blackbox rephrase attack: query the edited model with rephrased inputs
/// and pool the top output tokens of each query.
pub fn blackbox_rephrase_attack(
    state: &ModelState,
    fact: &Fact,
    bundle: &EvalBundle,
    spec: &AttackSpec,
) -> Result<CandidateSet> {
    spec.validate()?;
    let level = spec
        .level
        .ok_or_else(|| Error::Config("blackbox attack needs a rephrase level".into()))?;
    let queries: Vec<(Vec<f64>, Vec<Token>)> = match spec.kind {
        AttackKind::BbImage => vec![(
            bundle.image_rephrases[level.index()].clone(),
            fact.question.clone(),
        )],
        AttackKind::BbQuestion => vec![(
            fact.image.clone(),
            bundle.question_rephrases[level.index()].clone(),
        )],
        // the multimodal attack always uses the strongest (hard) rephrases,
        // plus the two hard unimodal combinations
        AttackKind::BbMultimodal => {
            let hard_img = bundle.image_rephrases[Level::Hard.index()].clone();
            let hard_q = bundle.question_rephrases[Level::Hard.index()].clone();
            vec![
                (hard_img.clone(), hard_q.clone()),
                (hard_img, fact.question.clone()),
                (fact.image.clone(), hard_q),
            ]
        }
        other => return Err(Error::Config(format!("{other:?} is not a blackbox kind"))),
    };

    let vocab = state.config.vocab_size;
    let budget = spec.budget.min(vocab);
    let per_query = budget.div_ceil(queries.len());
    let mut pooled = vec![false; vocab];
    let mut scores = vec![f64::NEG_INFINITY; vocab];
    for (image, question) in &queries {
        let (_, dist) = state.forward(image, question)?;
        for &t in &top_indices(dist.data(), per_query) {
            pooled[t] = true;
        }
        for (s, &p) in scores.iter_mut().zip(dist.data()) {
            if p > *s {
                *s = p;
            }
        }
    }
    let pool: Vec<(usize, f64)> = (0..vocab)
        .filter(|&t| pooled[t])
        .map(|t| (t, scores[t]))
        .collect();
    let (tokens, out_scores) = rank_truncate(&pool, budget);
    Ok(CandidateSet {
        fact_id: fact.id,
        kind: spec.kind,
        budget,
        tokens,
        scores: out_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(dists: Vec<Vec<f64>>) -> LensStack {
        LensStack {
            dists,
            prompt_id: None,
        }
    }

    #[test]
    fn pd_worked_example() {
        // two layers over a vocabulary of four
        let s = stack(vec![
            vec![0.7, 0.1, 0.1, 0.1],
            vec![0.1, 0.6, 0.2, 0.1],
        ]);
        let mut spec = AttackSpec::whitebox(AttackKind::Pd, 2);
        // one riser and one faller per pair
        spec.k_schedule = Some(vec![2]);
        let set = whitebox_from_stack(AttackKind::Pd, &s, 0, &spec).unwrap();
        // deltas are [-0.6, +0.5, +0.1, 0]; riser token1, faller token0;
        // token0 outranks token1 on |delta|
        assert_eq!(set.tokens, vec![Token(0), Token(1)]);
        let as_set: std::collections::BTreeSet<Token> = set.tokens.iter().cloned().collect();
        assert!(as_set.contains(&Token(1)) && as_set.contains(&Token(0)));
    }

    #[test]
    fn pd2_worked_example() {
        let s = stack(vec![
            vec![0.8, 0.1, 0.05, 0.05],
            vec![0.5, 0.3, 0.1, 0.1],
            vec![0.1, 0.3, 0.5, 0.1],
        ]);
        let mut spec = AttackSpec::whitebox(AttackKind::Pd2, 2);
        spec.k_schedule = Some(vec![2]);
        let set = whitebox_from_stack(AttackKind::Pd2, &s, 0, &spec).unwrap();
        // delta^2 = [-0.1, -0.2, 0.35, -0.05]: top riser token2, top faller token1
        assert!(set.contains(Token(2)) && set.contains(Token(1)));
        assert_eq!(set.tokens[0], Token(2));
    }

    #[test]
    fn hp_with_full_budget_exhausts_the_vocabulary() {
        let s = stack(vec![
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.1, 0.2, 0.3, 0.4],
        ]);
        let spec = AttackSpec::whitebox(AttackKind::Hp, 4);
        let set = whitebox_from_stack(AttackKind::Hp, &s, 0, &spec).unwrap();
        assert_eq!(set.tokens.len(), 4);
        let mut tokens = set.tokens.clone();
        tokens.sort();
        assert_eq!(tokens, vec![Token(0), Token(1), Token(2), Token(3)]);
    }

    #[test]
    fn oversized_budget_is_clamped_to_vocab() {
        let s = stack(vec![vec![0.5, 0.5]]);
        let spec = AttackSpec::whitebox(AttackKind::Hp, 10);
        let set = whitebox_from_stack(AttackKind::Hp, &s, 0, &spec).unwrap();
        assert_eq!(set.budget, 2);
        assert_eq!(set.tokens.len(), 2);
    }

    #[test]
    fn spec_validation_catches_mismatched_fields() {
        let mut spec = AttackSpec::whitebox(AttackKind::Hp, 20);
        spec.ft = Some(FtParams::default());
        assert!(spec.validate().is_err());
        let mut spec = AttackSpec::blackbox(AttackKind::BbImage, Level::Easy, 20);
        spec.level = None;
        assert!(spec.validate().is_err());
        let spec = AttackSpec::whitebox(AttackKind::Pd, 0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn candidate_sets_are_unique_and_score_ordered() {
        let s = stack(vec![
            vec![0.1, 0.3, 0.2, 0.15, 0.25],
            vec![0.3, 0.1, 0.25, 0.2, 0.15],
            vec![0.2, 0.2, 0.2, 0.2, 0.2],
        ]);
        for kind in [AttackKind::Hp, AttackKind::Pd, AttackKind::Pd2] {
            let spec = AttackSpec::whitebox(kind, 3);
            let set = whitebox_from_stack(kind, &s, 0, &spec).unwrap();
            assert!(set.tokens.len() <= 3);
            let unique: std::collections::BTreeSet<_> = set.tokens.iter().collect();
            assert_eq!(unique.len(), set.tokens.len());
            for pair in set.scores.windows(2) {
                assert!(pair[0] >= pair[1]);
            }
        }
    }

    #[test]
    fn budget_monotonicity_on_a_fixed_stack() {
        let s = stack(vec![
            vec![0.05, 0.3, 0.2, 0.15, 0.25, 0.05],
            vec![0.3, 0.05, 0.25, 0.2, 0.15, 0.05],
            vec![0.1, 0.2, 0.3, 0.05, 0.05, 0.3],
        ]);
        for kind in [AttackKind::Hp, AttackKind::Pd, AttackKind::Pd2] {
            let mut prev: Vec<Token> = Vec::new();
            for b in 1..=6 {
                let spec = AttackSpec::whitebox(kind, b);
                let set = whitebox_from_stack(kind, &s, 0, &spec).unwrap();
                for t in &prev {
                    assert!(set.contains(*t), "{kind:?}: B={b} lost token {t:?}");
                }
                prev = set.tokens;
            }
        }
    }
}
