//! Deterministic synthetic world: multimodal facts plus per-fact rephrase
//! and neighborhood bundles at graded proximity levels.
//!
//! Image features are a semantic block (the concept's class mean) followed
//! by a nuisance block of seeded noise. Questions are a per-fact style token
//! followed by a three-token relation template; each relation also has an
//! alternate template sharing its final token. Rephrases keep the answer,
//! neighbors switch to a different correct answer, and mean distances obey
//! rephrase < neighborhood < random in both feature space and token edit
//! distance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::lens::lens_distributions;
use crate::model::{Fact, ModelState, Token};
use crate::tensor::argmax;
use crate::vocab;

pub const WORLD_SCHEMA_VERSION: u32 = 1;

/// Proximity level of a rephrase or neighborhood variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Easy,
    Medium,
    Hard,
}

impl Level {
    pub fn index(self) -> usize {
        match self {
            Level::Easy => 0,
            Level::Medium => 1,
            Level::Hard => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Level::Easy => "easy",
            Level::Medium => "medium",
            Level::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Number of image concepts (classes).
    pub concepts: usize,
    /// Relations asked about every concept.
    pub relations: usize,
    /// Designated edit-target facts.
    pub fact_count: usize,
    /// Held-out facts used for the random damage control set.
    pub control_count: usize,
    pub image_dim: usize,
    /// Trailing coordinates of the image vector that carry no class signal.
    pub nuisance_dim: usize,
    pub class_mean_std: f64,
    pub nuisance_std: f64,
    /// Rephrase noise amplitudes, strictly ordered easy < medium < hard.
    /// Easy is the salt-and-pepper magnitude, medium scales the nuisance
    /// resample, and (hard − medium) scales the semantic jitter of fresh
    /// class samples.
    pub level_amps: [f64; 3],
    /// Nuisance coordinates hit by the salt-and-pepper corruption.
    pub salt_pepper_coords: usize,
    /// Size of the per-fact question style token pool.
    pub style_tokens: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            concepts: 50,
            relations: 12,
            fact_count: 500,
            control_count: 64,
            image_dim: 32,
            nuisance_dim: 16,
            class_mean_std: 1.0,
            nuisance_std: 1.0,
            level_amps: [0.25, 1.0, 1.4],
            salt_pepper_coords: 4,
            style_tokens: 8,
            vocab_size: 256,
            seed: 0,
        }
    }
}

const MIN_ANSWER_POOL: usize = 16;

impl WorldConfig {
    pub fn semantic_dim(&self) -> usize {
        self.image_dim - self.nuisance_dim
    }

    fn template_base(&self) -> u32 {
        vocab::RESERVED + self.style_tokens as u32
    }

    fn answer_base(&self) -> u32 {
        self.template_base() + 5 * self.relations as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.nuisance_dim == 0 || self.nuisance_dim >= self.image_dim {
            return Err(Error::Config(
                "nuisance block must be a proper nonempty suffix of the image vector".into(),
            ));
        }
        if !(self.level_amps[0] < self.level_amps[1] && self.level_amps[1] < self.level_amps[2]) {
            return Err(Error::Config(format!(
                "level amplitudes must be strictly ordered easy < medium < hard, got {:?}",
                self.level_amps
            )));
        }
        if self.salt_pepper_coords > self.nuisance_dim {
            return Err(Error::Config(
                "salt-and-pepper coordinate count exceeds the nuisance block".into(),
            ));
        }
        if self.concepts < 4 || self.relations < 2 || self.style_tokens == 0 {
            return Err(Error::Config(
                "need at least 4 concepts, 2 relations, and 1 style token".into(),
            ));
        }
        let pairs = self.concepts * self.relations;
        if pairs < self.fact_count + self.control_count {
            return Err(Error::Config(format!(
                "{} concept-relation pairs cannot host {} facts plus {} controls",
                pairs, self.fact_count, self.control_count
            )));
        }
        let answer_pool = self.vocab_size as i64 - self.answer_base() as i64;
        if answer_pool < MIN_ANSWER_POOL as i64 {
            return Err(Error::Config(format!(
                "vocab too small for {} concepts x {} relations: answer pool {} < {}",
                self.concepts, self.relations, answer_pool, MIN_ANSWER_POOL
            )));
        }
        Ok(())
    }

    fn jitter_std(&self) -> f64 {
        (self.level_amps[2] - self.level_amps[1]) * self.class_mean_std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageNeighbor {
    pub image: Vec<f64>,
    pub answer: Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionNeighbor {
    pub question: Vec<Token>,
    pub answer: Token,
}

/// Per-fact evaluation bundle: rephrases keep the fact's answer, neighbors
/// carry their own different answers, and the shared random controls live on
/// the world itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalBundle {
    pub fact_id: usize,
    /// Easy, medium, hard.
    pub question_rephrases: [Vec<Token>; 3],
    /// Easy, medium, hard.
    pub image_rephrases: [Vec<f64>; 3],
    /// Easy, hard.
    pub image_neighbors: [ImageNeighbor; 2],
    pub question_neighbors: Vec<QuestionNeighbor>,
    /// The most dissimilar alternative answer; doubles as the error-injection
    /// false target.
    pub alt_answer: Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFact {
    pub fact: Fact,
    pub concept: usize,
    pub relation: usize,
    pub bundle: EvalBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub facts: Vec<WorldFact>,
    pub controls: Vec<Fact>,
    /// Remaining trained pairs, available as neighborhood knowledge.
    pub extra: Vec<Fact>,
    /// Facts dropped by per-fact generation failures, with reasons.
    pub dropped: Vec<(usize, String)>,
}

fn sub_rng(seed: u64, tag: &str, idx: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    hasher.update(idx.to_le_bytes());
    let digest = hasher.finalize();
    let mut eight = [0u8; 8];
    eight.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(eight))
}

fn gauss_vec<R: Rng>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// Deterministic world generator; all derived structure is a pure function
/// of the config.
pub struct Generator {
    pub config: WorldConfig,
    class_means: Vec<Vec<f64>>,
    /// answers[concept][relation]
    answers: Vec<Vec<Token>>,
    /// Shuffled (concept, relation) pair per fact id.
    pairs: Vec<(usize, usize)>,
    /// Style token per fact id.
    styles: Vec<Token>,
}

impl Generator {
    pub fn new(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut mean_rng = sub_rng(config.seed, "class_means", 0);
        let class_means: Vec<Vec<f64>> = (0..config.concepts)
            .map(|_| gauss_vec(&mut mean_rng, config.semantic_dim(), config.class_mean_std))
            .collect();

        let mut ans_rng = sub_rng(config.seed, "answers", 0);
        let pool = config.answer_base()..config.vocab_size as u32;
        let pool: Vec<u32> = pool.collect();
        let answers: Vec<Vec<Token>> = (0..config.concepts)
            .map(|_| {
                (0..config.relations)
                    .map(|_| Token(pool[ans_rng.gen_range(0..pool.len())]))
                    .collect()
            })
            .collect();

        let mut pair_rng = sub_rng(config.seed, "pairs", 0);
        let mut pairs: Vec<(usize, usize)> = (0..config.concepts)
            .flat_map(|c| (0..config.relations).map(move |r| (c, r)))
            .collect();
        pairs.shuffle(&mut pair_rng);

        let mut style_rng = sub_rng(config.seed, "style", 0);
        let styles: Vec<Token> = (0..pairs.len())
            .map(|_| Token(vocab::RESERVED + style_rng.gen_range(0..config.style_tokens) as u32))
            .collect();

        Ok(Generator {
            config: config.clone(),
            class_means,
            answers,
            pairs,
            styles,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair_of(&self, fact_id: usize) -> (usize, usize) {
        self.pairs[fact_id]
    }

    pub fn answer_of(&self, concept: usize, relation: usize) -> Token {
        self.answers[concept][relation]
    }

    fn primary_template(&self, relation: usize) -> [Token; 3] {
        let b = self.config.template_base() + 5 * relation as u32;
        [Token(b), Token(b + 1), Token(b + 2)]
    }

    fn alternate_template(&self, relation: usize) -> [Token; 3] {
        let b = self.config.template_base() + 5 * relation as u32;
        [Token(b + 3), Token(b + 4), Token(b + 2)]
    }

    fn question(&self, fact_id: usize, relation: usize, alternate: bool) -> Vec<Token> {
        let tpl = if alternate {
            self.alternate_template(relation)
        } else {
            self.primary_template(relation)
        };
        let mut q = vec![self.styles[fact_id]];
        q.extend_from_slice(&tpl);
        q
    }

    fn canonical_image(&self, fact_id: usize, concept: usize) -> Vec<f64> {
        let mut rng = sub_rng(self.config.seed, "nuisance", fact_id as u64);
        let mut v = self.class_means[concept].clone();
        v.extend(gauss_vec(
            &mut rng,
            self.config.nuisance_dim,
            self.config.nuisance_std,
        ));
        v
    }

    /// Fresh class sample: jittered class mean plus fresh nuisance.
    fn class_sample<R: Rng>(&self, concept: usize, rng: &mut R) -> Vec<f64> {
        let mut v: Vec<f64> = self.class_means[concept]
            .iter()
            .zip(gauss_vec(rng, self.config.semantic_dim(), self.config.jitter_std()))
            .map(|(m, j)| m + j)
            .collect();
        v.extend(gauss_vec(
            rng,
            self.config.nuisance_dim,
            self.config.nuisance_std,
        ));
        v
    }

    fn fact(&self, fact_id: usize) -> Fact {
        let (concept, relation) = self.pairs[fact_id];
        Fact {
            id: fact_id,
            image: self.canonical_image(fact_id, concept),
            question: self.question(fact_id, relation, false),
            answer: self.answers[concept][relation],
        }
    }

    /// Designated edit-target facts and the disjoint control facts.
    pub fn gen_corpus(&self) -> (Vec<Fact>, Vec<Fact>) {
        let facts = (0..self.config.fact_count).map(|i| self.fact(i)).collect();
        let controls = (self.config.fact_count..self.config.fact_count + self.config.control_count)
            .map(|i| self.fact(i))
            .collect();
        (facts, controls)
    }

    /// Six rephrase variants of a fact, all preserving its answer.
    pub fn gen_rephrases(&self, fact: &Fact) -> (Vec<Vec<Token>>, Vec<Vec<f64>>) {
        let (concept, relation) = self.pairs[fact.id];
        let cfg = &self.config;
        let sem = cfg.semantic_dim();
        let mut rng = sub_rng(cfg.seed, "rephrase", fact.id as u64);

        let mut q_easy = vocab::neutral_prefix_tokens();
        q_easy.extend_from_slice(&fact.question);
        let q_medium = self.question(fact.id, relation, true);
        let mut q_hard = vocab::jailbreak_tokens();
        q_hard.extend_from_slice(&fact.question);

        // easy: salt-and-pepper on a few nuisance coordinates
        let mut img_easy = fact.image.clone();
        let mut coords: Vec<usize> = (0..cfg.nuisance_dim).collect();
        coords.shuffle(&mut rng);
        for &c in coords.iter().take(cfg.salt_pepper_coords) {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            img_easy[sem + c] = sign * cfg.level_amps[0];
        }
        // medium: nuisance block resampled, semantics untouched
        let mut img_medium = fact.image[..sem].to_vec();
        img_medium.extend(gauss_vec(
            &mut rng,
            cfg.nuisance_dim,
            cfg.level_amps[1] * cfg.nuisance_std,
        ));
        // hard: a fresh sample from the concept's class distribution
        let img_hard = self.class_sample(concept, &mut rng);

        (
            vec![q_easy, q_medium, q_hard],
            vec![img_easy, img_medium, img_hard],
        )
    }

    /// Neighborhood variants: images of an alternative concept (easy with
    /// fresh nuisance, hard reusing the fact's nuisance block) and questions
    /// about other relations of the same concept.
    pub fn gen_neighborhoods(
        &self,
        fact: &Fact,
    ) -> Result<([ImageNeighbor; 2], Vec<QuestionNeighbor>, Token)> {
        let (concept, relation) = self.pairs[fact.id];
        let cfg = &self.config;
        let sem = cfg.semantic_dim();
        let mut rng = sub_rng(cfg.seed, "neighbor", fact.id as u64);

        let mut others: Vec<usize> = (0..cfg.concepts).filter(|&c| c != concept).collect();
        others.shuffle(&mut rng);
        let alternatives: Vec<usize> = others
            .into_iter()
            .filter(|&c| self.answers[c][relation] != fact.answer)
            .take(3)
            .collect();
        if alternatives.is_empty() {
            return Err(Error::Generation(format!(
                "fact {}: no alternative concept with a different answer",
                fact.id
            )));
        }
        // keep the alternative whose class mean is farthest from the fact's
        let alt_concept = *alternatives
            .iter()
            .max_by(|&&a, &&b| {
                let da = euclidean(&self.class_means[a], &self.class_means[concept]);
                let db = euclidean(&self.class_means[b], &self.class_means[concept]);
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        let alt_answer = self.answers[alt_concept][relation];

        // one shared semantic sample so the hard neighbor is strictly closer
        let semantic: Vec<f64> = self.class_means[alt_concept]
            .iter()
            .zip(gauss_vec(&mut rng, sem, cfg.jitter_std()))
            .map(|(m, j)| m + j)
            .collect();
        let mut easy_img = semantic.clone();
        easy_img.extend(gauss_vec(&mut rng, cfg.nuisance_dim, cfg.nuisance_std));
        let mut hard_img = semantic;
        hard_img.extend_from_slice(&fact.image[sem..]);

        let mut rels: Vec<usize> = (0..cfg.relations).filter(|&r| r != relation).collect();
        rels.shuffle(&mut rng);
        let question_neighbors: Vec<QuestionNeighbor> = rels
            .into_iter()
            .filter(|&r| self.answers[concept][r] != fact.answer)
            .take(4)
            .map(|r| QuestionNeighbor {
                question: self.question(fact.id, r, false),
                answer: self.answers[concept][r],
            })
            .collect();
        if question_neighbors.is_empty() {
            return Err(Error::Generation(format!(
                "fact {}: no question neighbor with a different answer",
                fact.id
            )));
        }

        Ok((
            [
                ImageNeighbor {
                    image: easy_img,
                    answer: alt_answer,
                },
                ImageNeighbor {
                    image: hard_img,
                    answer: alt_answer,
                },
            ],
            question_neighbors,
            alt_answer,
        ))
    }

    pub fn bundle(&self, fact: &Fact) -> Result<EvalBundle> {
        let (questions, images) = self.gen_rephrases(fact);
        let (image_neighbors, question_neighbors, alt_answer) = self.gen_neighborhoods(fact)?;
        let mut qit = questions.into_iter();
        let mut iit = images.into_iter();
        Ok(EvalBundle {
            fact_id: fact.id,
            question_rephrases: [
                qit.next().unwrap(),
                qit.next().unwrap(),
                qit.next().unwrap(),
            ],
            image_rephrases: [
                iit.next().unwrap(),
                iit.next().unwrap(),
                iit.next().unwrap(),
            ],
            image_neighbors,
            question_neighbors,
            alt_answer,
        })
    }

    /// Full world: facts with bundles, controls, and the extra trained pairs.
    pub fn generate(&self) -> World {
        let (facts, controls) = self.gen_corpus();
        let mut world_facts = Vec::with_capacity(facts.len());
        let mut dropped = Vec::new();
        for fact in facts {
            let (concept, relation) = self.pairs[fact.id];
            match self.bundle(&fact) {
                Ok(bundle) => world_facts.push(WorldFact {
                    fact,
                    concept,
                    relation,
                    bundle,
                }),
                Err(e) => dropped.push((fact.id, e.to_string())),
            }
        }
        let extra = (self.config.fact_count + self.config.control_count..self.pairs.len())
            .map(|i| self.fact(i))
            .collect();
        World {
            config: self.config.clone(),
            facts: world_facts,
            controls,
            extra,
            dropped,
        }
    }

    /// Pretraining view of the whole pair grid. Every pair appears with its
    /// canonical image, a fresh class sample, the alternate template, the
    /// neutral prefix, and the jailbreak marker, so both prefixes and both
    /// templates are learned question paths.
    pub fn training_corpus(&self) -> Vec<Fact> {
        let mut corpus = Vec::with_capacity(self.pairs.len() * 5);
        for id in 0..self.pairs.len() {
            let (concept, relation) = self.pairs[id];
            let answer = self.answers[concept][relation];
            let mut rng = sub_rng(self.config.seed, "train", id as u64);
            let primary = self.question(id, relation, false);
            let alternate = self.question(id, relation, true);
            let mut neutral = vocab::neutral_prefix_tokens();
            neutral.extend_from_slice(&primary);
            let mut jailbreak = vocab::jailbreak_tokens();
            jailbreak.extend_from_slice(&primary);

            let mut push = |image: Vec<f64>, question: Vec<Token>| {
                corpus.push(Fact {
                    id,
                    image,
                    question,
                    answer,
                });
            };
            push(self.canonical_image(id, concept), primary.clone());
            push(self.class_sample(concept, &mut rng), primary);
            push(self.class_sample(concept, &mut rng), alternate);
            push(self.class_sample(concept, &mut rng), neutral);
            push(self.class_sample(concept, &mut rng), jailbreak);
        }
        corpus
    }
}

// ---------------------------------------------------------------------------
// Reference-model filtering.
// ---------------------------------------------------------------------------

const KNOW_PROB: f64 = 0.9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub retained: Vec<usize>,
    pub total: usize,
    pub failed_know: usize,
    pub failed_rephrase: usize,
    pub failed_neighbor: usize,
}

impl FilterReport {
    pub fn retention_rate(&self) -> f64 {
        self.retained.len() as f64 / self.total as f64
    }
}

/// Token whose maximum lens probability across layers is highest; the same
/// rule the budget-1 lens attack uses.
fn lens_top1(state: &ModelState, image: &[f64], question: &[Token]) -> Result<usize> {
    let stack = lens_distributions(state, image, question)?;
    let v = state.config.vocab_size;
    let mut scores = vec![0.0; v];
    for dist in &stack.dists {
        for (s, &p) in scores.iter_mut().zip(dist) {
            if p > *s {
                *s = p;
            }
        }
    }
    Ok(argmax(&scores))
}

/// Keep only facts the model genuinely knows: the answer is confidently
/// produced (and is the lens-wide top token), every rephrase still elicits
/// it, and every neighbor elicits its own alternative answer.
pub fn filter_retained(world: &World, state: &ModelState) -> Result<FilterReport> {
    let mut retained = Vec::new();
    let mut failed_know = 0;
    let mut failed_rephrase = 0;
    let mut failed_neighbor = 0;

    for wf in &world.facts {
        let fact = &wf.fact;
        let (tok, p) = state.answer(&fact.image, &fact.question)?;
        let knows = tok == fact.answer
            && p >= KNOW_PROB
            && lens_top1(state, &fact.image, &fact.question)? == fact.answer.idx();
        if !knows {
            failed_know += 1;
            continue;
        }
        let bundle = &wf.bundle;
        let mut rephrases_ok = true;
        for q in &bundle.question_rephrases {
            rephrases_ok &= state.answer(&fact.image, q)?.0 == fact.answer;
        }
        for img in &bundle.image_rephrases {
            rephrases_ok &= state.answer(img, &fact.question)?.0 == fact.answer;
        }
        if !rephrases_ok {
            failed_rephrase += 1;
            continue;
        }
        let mut neighbors_ok = true;
        for neigh in &bundle.image_neighbors {
            neighbors_ok &= state.answer(&neigh.image, &fact.question)?.0 == neigh.answer;
        }
        for neigh in &bundle.question_neighbors {
            neighbors_ok &= state.answer(&fact.image, &neigh.question)?.0 == neigh.answer;
        }
        if !neighbors_ok {
            failed_neighbor += 1;
            continue;
        }
        retained.push(fact.id);
    }

    Ok(FilterReport {
        retained,
        total: world.facts.len(),
        failed_know,
        failed_rephrase,
        failed_neighbor,
    })
}

/// Controls the unedited model answers correctly; the verified random
/// damage set.
pub fn verified_controls(world: &World, state: &ModelState) -> Result<Vec<Fact>> {
    let mut out = Vec::with_capacity(world.controls.len());
    for fact in &world.controls {
        if state.answer(&fact.image, &fact.question)?.0 == fact.answer {
            out.push(fact.clone());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Distances.
// ---------------------------------------------------------------------------

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn levenshtein(a: &[Token], b: &[Token]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean distances from each fact to its rephrases, neighbors, and the random
/// controls, in image space and question edit distance.
#[derive(Debug, Clone, Serialize)]
pub struct ProximitySummary {
    pub image_rephrase: f64,
    pub image_neighbor: f64,
    pub image_random: f64,
    pub question_rephrase: f64,
    pub question_neighbor: f64,
    pub question_random: f64,
    pub image_rephrase_by_level: [f64; 3],
}

pub fn proximity_summary(world: &World) -> ProximitySummary {
    let mut img_re = 0.0;
    let mut img_ne = 0.0;
    let mut img_rd = 0.0;
    let mut q_re = 0.0;
    let mut q_ne = 0.0;
    let mut q_rd = 0.0;
    let mut by_level = [0.0f64; 3];
    let nf = world.facts.len() as f64;
    for wf in &world.facts {
        let f = &wf.fact;
        let b = &wf.bundle;
        for (l, img) in b.image_rephrases.iter().enumerate() {
            let d = euclidean(&f.image, img);
            img_re += d / (3.0 * nf);
            by_level[l] += d / nf;
        }
        for n in &b.image_neighbors {
            img_ne += euclidean(&f.image, &n.image) / (2.0 * nf);
        }
        for q in &b.question_rephrases {
            q_re += levenshtein(&f.question, q) as f64 / (3.0 * nf);
        }
        for n in &b.question_neighbors {
            q_ne += levenshtein(&f.question, &n.question) as f64
                / (b.question_neighbors.len() as f64 * nf);
        }
        let nc = world.controls.len() as f64;
        for c in &world.controls {
            img_rd += euclidean(&f.image, &c.image) / (nc * nf);
            q_rd += levenshtein(&f.question, &c.question) as f64 / (nc * nf);
        }
    }
    ProximitySummary {
        image_rephrase: img_re,
        image_neighbor: img_ne,
        image_random: img_rd,
        question_rephrase: q_re,
        question_neighbor: q_ne,
        question_random: q_rd,
        image_rephrase_by_level: by_level,
    }
}

// ---------------------------------------------------------------------------
// JSON-lines export.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum WorldRecord {
    Header {
        schema_version: u32,
        config: WorldConfig,
        dropped: Vec<(usize, String)>,
    },
    Fact(WorldFact),
    Control(Fact),
    Extra(Fact),
}

pub fn save_world(world: &World, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = WorldRecord::Header {
        schema_version: WORLD_SCHEMA_VERSION,
        config: world.config.clone(),
        dropped: world.dropped.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for wf in &world.facts {
        serde_json::to_writer(&mut w, &WorldRecord::Fact(wf.clone()))?;
        w.write_all(b"\n")?;
    }
    for c in &world.controls {
        serde_json::to_writer(&mut w, &WorldRecord::Control(c.clone()))?;
        w.write_all(b"\n")?;
    }
    for e in &world.extra {
        serde_json::to_writer(&mut w, &WorldRecord::Extra(e.clone()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Format("empty world file".into()))??;
    let header: WorldRecord = serde_json::from_str(&header_line)
        .map_err(|e| Error::Format(format!("bad world header: {e}")))?;
    let (config, dropped) = match header {
        WorldRecord::Header {
            schema_version,
            config,
            dropped,
        } => {
            if schema_version != WORLD_SCHEMA_VERSION {
                return Err(Error::Version {
                    found: schema_version,
                    expected: WORLD_SCHEMA_VERSION,
                });
            }
            (config, dropped)
        }
        _ => return Err(Error::Format("world file does not start with a header".into())),
    };
    let mut world = World {
        config,
        facts: Vec::new(),
        controls: Vec::new(),
        extra: Vec::new(),
        dropped,
    };
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<WorldRecord>(&line)? {
            WorldRecord::Fact(wf) => world.facts.push(wf),
            WorldRecord::Control(c) => world.controls.push(c),
            WorldRecord::Extra(e) => world.extra.push(e),
            WorldRecord::Header { .. } => {
                return Err(Error::Format("duplicate world header".into()))
            }
        }
    }
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> WorldConfig {
        WorldConfig {
            concepts: 12,
            relations: 5,
            fact_count: 40,
            control_count: 10,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = WorldConfig::default();
        let w1 = Generator::new(&cfg).unwrap().generate();
        let w2 = Generator::new(&cfg).unwrap().generate();
        assert_eq!(w1, w2);
    }

    #[test]
    fn default_world_has_500_single_token_facts() {
        let world = Generator::new(&WorldConfig::default()).unwrap().generate();
        assert_eq!(world.facts.len() + world.dropped.len(), 500);
        assert!(world.dropped.is_empty(), "dropped: {:?}", world.dropped);
        for wf in &world.facts {
            assert!(wf.fact.answer.idx() < world.config.vocab_size);
        }
    }

    #[test]
    fn controls_are_disjoint_from_facts() {
        let world = Generator::new(&small_config()).unwrap().generate();
        let fact_ids: std::collections::HashSet<usize> =
            world.facts.iter().map(|f| f.fact.id).collect();
        for c in &world.controls {
            assert!(!fact_ids.contains(&c.id));
        }
    }

    #[test]
    fn vocab_too_small_is_a_config_error() {
        let cfg = WorldConfig {
            vocab_size: 96,
            ..WorldConfig::default()
        };
        // 8 reserved + 8 style + 5*12 template = 76, leaving 20 answers for
        // 600 pairs at default scale; shrinking further must error
        let tight = WorldConfig {
            vocab_size: 80,
            ..cfg
        };
        assert!(matches!(Generator::new(&tight), Err(Error::Config(_))));
    }

    #[test]
    fn easy_question_rephrase_strips_back_to_the_original() {
        let gen = Generator::new(&small_config()).unwrap();
        let (facts, _) = gen.gen_corpus();
        for fact in facts.iter().take(10) {
            let (qs, _) = gen.gen_rephrases(fact);
            assert_eq!(&qs[0][vocab::NEUTRAL_PREFIX.len()..], fact.question.as_slice());
            assert_eq!(&qs[2][vocab::JAILBREAK.len()..], fact.question.as_slice());
        }
    }

    #[test]
    fn image_rephrase_distances_are_ordered_by_level() {
        let world = Generator::new(&WorldConfig::default()).unwrap().generate();
        let summary = proximity_summary(&world);
        let [easy, medium, hard] = summary.image_rephrase_by_level;
        assert!(easy < medium, "easy {easy} !< medium {medium}");
        assert!(medium < hard, "medium {medium} !< hard {hard}");
    }

    #[test]
    fn proximity_ordering_rephrase_neighbor_random() {
        let world = Generator::new(&WorldConfig::default()).unwrap().generate();
        let s = proximity_summary(&world);
        assert!(
            s.image_rephrase < s.image_neighbor && s.image_neighbor < s.image_random,
            "image: {} {} {}",
            s.image_rephrase,
            s.image_neighbor,
            s.image_random
        );
        assert!(
            s.question_rephrase < s.question_neighbor && s.question_neighbor < s.question_random,
            "question: {} {} {}",
            s.question_rephrase,
            s.question_neighbor,
            s.question_random
        );
    }

    #[test]
    fn hard_neighbor_is_strictly_closer_than_easy_for_every_fact() {
        let world = Generator::new(&small_config()).unwrap().generate();
        for wf in &world.facts {
            let easy = euclidean(&wf.fact.image, &wf.bundle.image_neighbors[0].image);
            let hard = euclidean(&wf.fact.image, &wf.bundle.image_neighbors[1].image);
            assert!(hard < easy, "fact {}: hard {hard} !< easy {easy}", wf.fact.id);
        }
    }

    #[test]
    fn neighbor_answers_differ_from_the_fact_answer() {
        let world = Generator::new(&small_config()).unwrap().generate();
        for wf in &world.facts {
            assert_ne!(wf.bundle.alt_answer, wf.fact.answer);
            for n in &wf.bundle.image_neighbors {
                assert_ne!(n.answer, wf.fact.answer);
            }
            assert!(!wf.bundle.question_neighbors.is_empty());
            for n in &wf.bundle.question_neighbors {
                assert_ne!(n.answer, wf.fact.answer);
            }
        }
    }

    #[test]
    fn bundle_cardinalities_match_the_benchmark_shape() {
        let world = Generator::new(&small_config()).unwrap().generate();
        for wf in &world.facts {
            assert_eq!(wf.bundle.question_rephrases.len(), 3);
            assert_eq!(wf.bundle.image_rephrases.len(), 3);
            assert_eq!(wf.bundle.image_neighbors.len(), 2);
            assert!(!wf.bundle.question_neighbors.is_empty());
        }
    }

    #[test]
    fn world_roundtrips_through_jsonl() {
        let world = Generator::new(&small_config()).unwrap().generate();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.jsonl");
        save_world(&world, &path).unwrap();
        let loaded = load_world(&path).unwrap();
        assert_eq!(world, loaded);
    }

    #[test]
    fn corrupted_world_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"type\":\"fact\"}\n").unwrap();
        assert!(load_world(&path).is_err());
    }

    #[test]
    fn levenshtein_basics() {
        let a = [Token(1), Token(2), Token(3)];
        let b = [Token(1), Token(9), Token(3)];
        assert_eq!(levenshtein(&a, &a), 0);
        assert_eq!(levenshtein(&a, &b), 1);
        let c = [Token(7), Token(8), Token(1), Token(2), Token(3)];
        assert_eq!(levenshtein(&a, &c), 2);
    }

    #[test]
    fn training_corpus_covers_every_pair_with_five_views() {
        let cfg = small_config();
        let gen = Generator::new(&cfg).unwrap();
        let corpus = gen.training_corpus();
        assert_eq!(corpus.len(), cfg.concepts * cfg.relations * 5);
    }
}
