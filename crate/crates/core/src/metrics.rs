//! Evaluation quantities: attack success at a budget, rewrite score, and
//! the delta-accuracy damage measures.

use serde::{Deserialize, Serialize};

use crate::attacks::CandidateSet;
use crate::error::{Error, Result};
use crate::model::{ModelState, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Random,
    QuestionNeighborhood,
    ImageNeighborhood,
}

/// Inputs with expected answers used to measure edit damage. Expected
/// answers are the pre-edit answers of the unedited model, verified when the
/// set is built.
#[derive(Debug, Clone)]
pub struct ControlSet {
    pub kind: ControlKind,
    pub items: Vec<(Vec<f64>, Vec<Token>, Token)>,
}

impl ControlSet {
    /// Build a control set, verifying every expected answer against the
    /// unedited model.
    pub fn verified(
        kind: ControlKind,
        items: Vec<(Vec<f64>, Vec<Token>, Token)>,
        unedited: &ModelState,
    ) -> Result<Self> {
        for (image, question, expected) in &items {
            let (tok, _) = unedited.answer(image, question)?;
            if tok != *expected {
                return Err(Error::InvalidInput(format!(
                    "control expects token {} but the unedited model answers {}",
                    expected.0, tok.0
                )));
            }
        }
        Ok(ControlSet { kind, items })
    }

    pub fn accuracy(&self, state: &ModelState) -> Result<f64> {
        if self.items.is_empty() {
            return Err(Error::InvalidInput("empty control set".into()));
        }
        let mut hits = 0usize;
        for (image, question, expected) in &self.items {
            if state.answer(image, question)?.0 == *expected {
                hits += 1;
            }
        }
        Ok(hits as f64 / self.items.len() as f64)
    }
}

/// Fraction of facts whose answer appears in its candidate set.
pub fn attack_success(candidates: &[CandidateSet], answers: &[Token]) -> Result<f64> {
    if candidates.len() != answers.len() {
        return Err(Error::InvalidInput(format!(
            "{} candidate sets vs {} answers",
            candidates.len(),
            answers.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate sets".into()));
    }
    let budget = candidates[0].budget;
    if candidates.iter().any(|c| c.budget != budget) {
        return Err(Error::InvalidInput(
            "candidate sets do not share one budget".into(),
        ));
    }
    let hits = candidates
        .iter()
        .zip(answers)
        .filter(|(c, a)| c.contains(**a))
        .count();
    Ok(hits as f64 / candidates.len() as f64)
}

/// (p_pre − p_post) / p_pre. Negative when the edit raised the probability.
pub fn rewrite_score(p_pre: f64, p_post: f64) -> Result<f64> {
    if p_pre <= 0.0 || p_pre > 1.0 || !(0.0..=1.0).contains(&p_post) {
        return Err(Error::InvalidInput(format!(
            "rewrite score undefined for p_pre={p_pre}, p_post={p_post}"
        )));
    }
    Ok((p_pre - p_post) / p_pre)
}

/// acc(pre) − acc(post) on a control set; positive means damage.
pub fn delta_accuracy(
    pre_state: &ModelState,
    post_state: &ModelState,
    control: &ControlSet,
) -> Result<f64> {
    if pre_state.config != post_state.config {
        return Err(Error::Config(
            "delta accuracy requires states sharing one config".into(),
        ));
    }
    Ok(control.accuracy(pre_state)? - control.accuracy(post_state)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackKind;
    use crate::model::{init_model, ModelConfig};

    fn set(tokens: Vec<u32>, budget: usize) -> CandidateSet {
        CandidateSet {
            fact_id: 0,
            kind: AttackKind::Hp,
            budget,
            scores: vec![0.0; tokens.len()],
            tokens: tokens.into_iter().map(Token).collect(),
        }
    }

    #[test]
    fn attack_success_counts_membership() {
        let candidates = vec![
            set(vec![1, 2], 2),
            set(vec![3, 4], 2),
            set(vec![5, 6], 2),
            set(vec![7, 8], 2),
        ];
        let answers = vec![Token(2), Token(9), Token(5), Token(0)];
        assert_eq!(attack_success(&candidates, &answers).unwrap(), 0.5);
    }

    #[test]
    fn empty_candidate_sets_never_succeed() {
        let candidates = vec![set(vec![], 2), set(vec![], 2)];
        let answers = vec![Token(0), Token(1)];
        assert_eq!(attack_success(&candidates, &answers).unwrap(), 0.0);
    }

    #[test]
    fn full_vocab_candidate_sets_always_succeed() {
        let all: Vec<u32> = (0..8).collect();
        let candidates = vec![set(all.clone(), 8), set(all, 8)];
        let answers = vec![Token(3), Token(7)];
        assert_eq!(attack_success(&candidates, &answers).unwrap(), 1.0);
    }

    #[test]
    fn attack_success_validates_lengths_and_budgets() {
        let candidates = vec![set(vec![1], 2)];
        assert!(attack_success(&candidates, &[]).is_err());
        let mixed = vec![set(vec![1], 2), set(vec![1], 3)];
        assert!(attack_success(&mixed, &[Token(0), Token(1)]).is_err());
    }

    #[test]
    fn rewrite_score_fixtures() {
        assert!((rewrite_score(0.8, 0.08).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(rewrite_score(0.4, 0.4).unwrap(), 0.0);
        assert_eq!(rewrite_score(0.7, 0.0).unwrap(), 1.0);
        assert!(rewrite_score(0.0, 0.1).is_err());
    }

    #[test]
    fn rewrite_score_is_scale_invariant() {
        let a = rewrite_score(0.8, 0.2).unwrap();
        let b = rewrite_score(0.4, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn delta_accuracy_of_identical_states_is_zero() {
        let state = init_model(&ModelConfig {
            vocab_size: 32,
            width: 16,
            n_layers: 2,
            heads: 2,
            mlp_expansion: 2,
            image_dim: 8,
            prefix_len: 2,
            max_seq: 16,
            seed: 3,
        })
        .unwrap();
        let image = vec![0.2; 8];
        let q = vec![Token(9), Token(10)];
        let (expected, _) = state.answer(&image, &q).unwrap();
        let control =
            ControlSet::verified(ControlKind::Random, vec![(image, q, expected)], &state).unwrap();
        assert_eq!(delta_accuracy(&state, &state, &control).unwrap(), 0.0);
    }

    #[test]
    fn empty_control_set_is_rejected() {
        let state = init_model(&ModelConfig {
            vocab_size: 32,
            width: 16,
            n_layers: 2,
            heads: 2,
            mlp_expansion: 2,
            image_dim: 8,
            prefix_len: 2,
            max_seq: 16,
            seed: 3,
        })
        .unwrap();
        let control = ControlSet {
            kind: ControlKind::Random,
            items: vec![],
        };
        assert!(delta_accuracy(&state, &state, &control).is_err());
    }
}
