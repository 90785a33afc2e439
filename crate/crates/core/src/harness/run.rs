//! Experiment execution: per-seed preparation (world, pretraining, filter,
//! verified control sets), per-fact edit/attack/metric jobs, and the grid
//! driver. Each fact's edit starts from the pristine pretrained checkpoint;
//! a hash assert enforces the isolation.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::attacks::{
    blackbox_rephrase_attack, finetune_then_attack, whitebox_attack, AttackKind, AttackSpec,
    CandidateSet,
};
use crate::editor::{edit, lens_rank, DefenseKind, DefenseSpec, EditTarget};
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::harness::config::{EditTargetConfig, ExperimentConfig, ModelScale};
use crate::harness::report::{FactRecord, ResultsTable, TableRow};
use crate::lens::lens_distributions;
use crate::metrics::{attack_success, ControlKind, ControlSet};
use crate::model::{init_model, pretrain, Fact, ModelState, Token};
use crate::tensor::entropy_slice;
use crate::worldgen::{filter_retained, verified_controls, Generator, World, WorldFact};

/// Everything shared by the per-fact jobs of one (scale, seed) cell.
pub struct SeedContext {
    pub seed: u64,
    pub scale: ModelScale,
    pub world: World,
    pub base: Arc<ModelState>,
    pub base_hash: [u8; 32],
    /// Fact ids picked for editing (retained, shuffled, truncated).
    pub picked: Vec<usize>,
    pub retained_total: usize,
    pub fact_total: usize,
    pub random_controls: Arc<ControlSet>,
    pub control_facts: Arc<Vec<Fact>>,
    /// fact id -> verified per-fact neighborhood control sets
    pub fact_controls: BTreeMap<usize, FactControls>,
    /// Training provenance, preserved across checkpoint cache hits.
    pub pretrain: PretrainMeta,
}

/// Pretraining provenance stored next to cached checkpoints.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PretrainMeta {
    pub steps_run: usize,
    pub final_accuracy: f64,
    pub accuracy_trace: Vec<(usize, f64)>,
    pub wall_seconds: f64,
}

pub struct FactControls {
    pub question: ControlSet,
    pub image_easy: ControlSet,
    pub image_hard: ControlSet,
    pub image_combined: ControlSet,
}

fn derived_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut eight = [0u8; 8];
    eight.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(eight)
}

fn cache_key(cfg: &ExperimentConfig, scale: ModelScale, seed: u64) -> Result<String> {
    let mut world = cfg.world.clone();
    world.seed = derived_seed(seed, "world");
    let mut model = scale.apply(&cfg.model);
    model.seed = derived_seed(seed, "model");
    let mut hyper = cfg.pretrain.clone();
    hyper.seed = derived_seed(seed, "pretrain");
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&world)?);
    hasher.update(serde_json::to_vec(&model)?);
    hasher.update(serde_json::to_vec(&hyper)?);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Generate the world, pretrain (or load a cached checkpoint), filter, and
/// build the verified control sets for one (scale, seed) cell.
pub fn prepare_seed(cfg: &ExperimentConfig, scale: ModelScale, seed: u64) -> Result<SeedContext> {
    let mut world_cfg = cfg.world.clone();
    world_cfg.seed = derived_seed(seed, "world");
    let generator = Generator::new(&world_cfg)?;
    let world = generator.generate();

    let mut model_cfg = scale.apply(&cfg.model);
    model_cfg.seed = derived_seed(seed, "model");
    let mut hyper = cfg.pretrain.clone();
    hyper.seed = derived_seed(seed, "pretrain");

    let cache_path = match &cfg.cache_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(dir.join(format!("{}.ckpt", cache_key(cfg, scale, seed)?)))
        }
        None => None,
    };
    let meta_path = cache_path.as_ref().map(|p| p.with_extension("meta.json"));
    let cache_hit = cache_path.as_ref().is_some_and(|p| p.exists())
        && meta_path.as_ref().is_some_and(|p| p.exists());
    let (base, meta) = if cache_hit {
        let base = load_checkpoint(cache_path.as_ref().unwrap())?;
        let meta: PretrainMeta =
            serde_json::from_str(&std::fs::read_to_string(meta_path.as_ref().unwrap())?)?;
        (base, meta)
    } else {
        let init = init_model(&model_cfg)?;
        let corpus = generator.training_corpus();
        let t0 = std::time::Instant::now();
        let (trained, report) = pretrain(&init, &corpus, &hyper)?;
        let meta = PretrainMeta {
            steps_run: report.steps_run,
            final_accuracy: report.final_accuracy,
            accuracy_trace: report.accuracy_trace,
            wall_seconds: t0.elapsed().as_secs_f64(),
        };
        if let (Some(path), Some(mpath)) = (&cache_path, &meta_path) {
            save_checkpoint(&trained, path)?;
            std::fs::write(mpath, serde_json::to_string(&meta)?)?;
        }
        (trained, meta)
    };

    let filter = filter_retained(&world, &base)?;
    let mut picked = filter.retained.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, "factpick"));
    picked.shuffle(&mut rng);
    picked.truncate(cfg.facts_per_seed);
    picked.sort_unstable();

    let control_facts = verified_controls(&world, &base)?;
    if control_facts.is_empty() {
        return Err(Error::Generation(
            "no verified random controls; pretraining too weak".into(),
        ));
    }
    let random_controls = ControlSet::verified(
        ControlKind::Random,
        control_facts
            .iter()
            .map(|f| (f.image.clone(), f.question.clone(), f.answer))
            .collect(),
        &base,
    )?;

    let mut fact_controls = BTreeMap::new();
    for &id in &picked {
        let wf = world
            .facts
            .iter()
            .find(|w| w.fact.id == id)
            .expect("picked fact exists");
        let b = &wf.bundle;
        let question = ControlSet::verified(
            ControlKind::QuestionNeighborhood,
            b.question_neighbors
                .iter()
                .map(|n| (wf.fact.image.clone(), n.question.clone(), n.answer))
                .collect(),
            &base,
        )?;
        let easy_item = (
            b.image_neighbors[0].image.clone(),
            wf.fact.question.clone(),
            b.image_neighbors[0].answer,
        );
        let hard_item = (
            b.image_neighbors[1].image.clone(),
            wf.fact.question.clone(),
            b.image_neighbors[1].answer,
        );
        let image_easy =
            ControlSet::verified(ControlKind::ImageNeighborhood, vec![easy_item.clone()], &base)?;
        let image_hard =
            ControlSet::verified(ControlKind::ImageNeighborhood, vec![hard_item.clone()], &base)?;
        let image_combined = ControlSet::verified(
            ControlKind::ImageNeighborhood,
            vec![easy_item, hard_item],
            &base,
        )?;
        fact_controls.insert(
            id,
            FactControls {
                question,
                image_easy,
                image_hard,
                image_combined,
            },
        );
    }

    let base_hash = base.content_hash();
    Ok(SeedContext {
        seed,
        scale,
        world,
        base: Arc::new(base),
        base_hash,
        picked,
        retained_total: filter.retained.len(),
        fact_total: filter.total,
        random_controls: Arc::new(random_controls),
        control_facts: Arc::new(control_facts),
        fact_controls,
        pretrain: meta,
    })
}

fn run_attack(
    state: &ModelState,
    wf: &WorldFact,
    control_facts: &[Fact],
    spec: &AttackSpec,
) -> Result<CandidateSet> {
    match spec.kind {
        AttackKind::Hp | AttackKind::Pd | AttackKind::Pd2 => {
            whitebox_attack(state, &wf.fact, spec)
        }
        AttackKind::FtHp => finetune_then_attack(state, control_facts, &wf.fact, spec),
        _ => blackbox_rephrase_attack(state, &wf.fact, &wf.bundle, spec),
    }
}

fn mean_lens_entropy(state: &ModelState, wf: &WorldFact, layers: &[usize]) -> Result<f64> {
    let stack = lens_distributions(state, &wf.fact.image, &wf.fact.question)?;
    let mut total = 0.0;
    for &l in layers {
        total += entropy_slice(&stack.dists[l - 1]);
    }
    Ok(total / layers.len() as f64)
}

struct FactOutcome {
    record: FactRecord,
    /// (attack label, candidate set); labels disambiguate blackbox levels.
    candidates: Vec<(String, CandidateSet)>,
}

#[allow(clippy::too_many_arguments)]
fn run_fact(
    ctx: &SeedContext,
    spec: &DefenseSpec,
    target: EditTarget,
    wf: &WorldFact,
    attacks: &[AttackSpec],
    run_ft: bool,
) -> Result<FactOutcome> {
    // isolation: the shared base checkpoint must be pristine for every edit
    assert_eq!(
        ctx.base.content_hash(),
        ctx.base_hash,
        "base checkpoint mutated between edits"
    );
    let entropy_pre = if spec.kind == DefenseKind::MaxEntropy {
        Some(mean_lens_entropy(&ctx.base, wf, &spec.layers)?)
    } else {
        None
    };
    let (edited, report) = edit(&ctx.base, &wf.fact, Some(&wf.bundle), spec, target)?;

    let mut record = FactRecord {
        seed: ctx.seed,
        scale: ctx.scale.label().to_string(),
        target: target.label(),
        defense: spec.kind.label().to_string(),
        fact_id: wf.fact.id,
        answer: wf.fact.answer.0,
        p_pre: report.p_pre,
        p_post: report.p_post,
        rewrite: report.rewrite_score(),
        steps: report.steps,
        converged: report.converged,
        attack_hits: BTreeMap::new(),
        damage: BTreeMap::new(),
        hp_postcondition: None,
        lens_entropy: None,
    };
    if !report.converged {
        // failed edits count toward the failure rate and nothing else
        return Ok(FactOutcome {
            record,
            candidates: Vec::new(),
        });
    }

    if spec.kind == DefenseKind::HeadProjection {
        let stack = lens_distributions(&edited, &wf.fact.image, &wf.fact.question)?;
        let ok = spec
            .layers
            .iter()
            .all(|&l| lens_rank(&stack.dists[l - 1], wf.fact.answer) >= spec.top_k);
        record.hp_postcondition = Some(ok);
    }
    if let Some(pre) = entropy_pre {
        let post = mean_lens_entropy(&edited, wf, &spec.layers)?;
        record.lens_entropy = Some((pre, post));
    }

    let mut candidates = Vec::new();
    for attack in attacks {
        if attack.kind == AttackKind::FtHp && !run_ft {
            continue;
        }
        let set = run_attack(&edited, wf, &ctx.control_facts, attack)?;
        record
            .attack_hits
            .insert(attack.label(), set.contains(wf.fact.answer));
        candidates.push((attack.label(), set));
    }

    // verified control sets have pre-edit accuracy exactly 1
    let fc = ctx.fact_controls.get(&wf.fact.id).expect("picked fact");
    let mut damage = |label: &str, set: &ControlSet| -> Result<()> {
        let post = set.accuracy(&edited)?;
        record
            .damage
            .insert(label.to_string(), (1.0, post, set.items.len()));
        Ok(())
    };
    damage("random", &ctx.random_controls)?;
    damage("question_neighborhood", &fc.question)?;
    damage("image_neighborhood", &fc.image_combined)?;
    damage("image_neighborhood_easy", &fc.image_easy)?;
    damage("image_neighborhood_hard", &fc.image_hard)?;

    Ok(FactOutcome { record, candidates })
}

/// Records -> one table row for a (scale, target, defense, seed) cell.
fn aggregate_cell(
    records: &[FactRecord],
    answers_by_attack: &BTreeMap<String, (Vec<CandidateSet>, Vec<Token>)>,
    lambda: Option<f64>,
) -> TableRow {
    let first = &records[0];
    let total = records.len();
    let converged: Vec<&FactRecord> = records.iter().filter(|r| r.converged).collect();
    let failure_rate = 1.0 - converged.len() as f64 / total as f64;
    let rewrite_mean = if converged.is_empty() {
        0.0
    } else {
        converged.iter().map(|r| r.rewrite).sum::<f64>() / converged.len() as f64
    };

    let mut attack_rates = BTreeMap::new();
    for (label, (sets, answers)) in answers_by_attack {
        if !sets.is_empty() {
            let rate = attack_success(sets, answers).expect("consistent candidate sets");
            attack_rates.insert(label.clone(), rate);
        }
    }

    let mut dacc = BTreeMap::new();
    let labels: Vec<String> = converged
        .first()
        .map(|r| r.damage.keys().cloned().collect())
        .unwrap_or_default();
    for label in labels {
        let mut per_fact = 0.0;
        let mut pooled_missed = 0.0;
        let mut pooled_items = 0.0;
        for r in &converged {
            let (pre, post, items) = r.damage[&label];
            per_fact += (pre - post) / converged.len() as f64;
            pooled_missed += (pre - post) * items as f64;
            pooled_items += items as f64;
        }
        let pooled = if pooled_items > 0.0 {
            pooled_missed / pooled_items
        } else {
            0.0
        };
        dacc.insert(label, (per_fact, pooled));
    }

    let combined_score = lambda.map(|l| {
        let mean_attack = if attack_rates.is_empty() {
            0.0
        } else {
            attack_rates.values().sum::<f64>() / attack_rates.len() as f64
        };
        let rand_dacc = dacc.get("random").map(|(pf, _)| *pf).unwrap_or(0.0);
        mean_attack + l * rand_dacc
    });

    TableRow {
        defense: first.defense.clone(),
        target: first.target.clone(),
        scale: first.scale.clone(),
        seed: first.seed,
        facts: total,
        edit_failure_rate: failure_rate,
        rewrite_mean,
        attack_success: attack_rates,
        dacc,
        combined_score,
    }
}

pub struct RunOutput {
    pub table: ResultsTable,
    pub records: Vec<FactRecord>,
    pub candidates: Vec<CandidateSet>,
}

/// Run one (scale, target) experiment over all seeds and defenses. For each
/// (seed, defense, fact): edit, attack, measure; aggregation is per cell.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.model_scales.len() != 1 || cfg.edit_targets.len() != 1 {
        return Err(Error::Config(
            "run_experiment takes exactly one scale and one edit target; use grid for axes".into(),
        ));
    }
    run_cell_experiment(cfg, cfg.model_scales[0], cfg.edit_targets[0])
}

fn run_cell_experiment(
    cfg: &ExperimentConfig,
    scale: ModelScale,
    target_cfg: EditTargetConfig,
) -> Result<RunOutput> {
    let mut all_records = Vec::new();
    let mut all_candidates = Vec::new();
    let mut table = ResultsTable::default();

    for &seed in &cfg.seeds {
        let ctx = prepare_seed(cfg, scale, seed)?;
        let model_cfg = scale.apply(&cfg.model);
        let target = target_cfg.materialize(model_cfg.n_layers);
        let facts: Vec<&WorldFact> = ctx
            .picked
            .iter()
            .map(|id| {
                ctx.world
                    .facts
                    .iter()
                    .find(|w| w.fact.id == *id)
                    .expect("picked fact")
            })
            .collect();
        let ft_cap = cfg.ft_facts_cap.unwrap_or(usize::MAX);

        for defense_cfg in &cfg.defenses {
            let spec = defense_cfg.materialize(model_cfg.n_layers);
            let outcomes: Result<Vec<FactOutcome>> = facts
                .par_iter()
                .enumerate()
                .map(|(i, wf)| run_fact(&ctx, &spec, target, wf, &cfg.attacks, i < ft_cap))
                .collect();
            let outcomes = outcomes?;

            let mut records: Vec<FactRecord> = Vec::with_capacity(outcomes.len());
            let mut by_attack: BTreeMap<String, (Vec<CandidateSet>, Vec<Token>)> = BTreeMap::new();
            let mut candidates = Vec::new();
            for outcome in outcomes {
                for (label, set) in outcome.candidates {
                    let slot = by_attack.entry(label).or_default();
                    slot.0.push(set.clone());
                    slot.1.push(Token(outcome.record.answer));
                    candidates.push(set);
                }
                records.push(outcome.record);
            }

            if !records.is_empty() {
                table
                    .rows
                    .push(aggregate_cell(&records, &by_attack, cfg.lambda));
            }
            all_records.extend(records);
            all_candidates.extend(candidates);
        }
    }

    table.sort();
    all_records.sort_by_key(|r| {
        (
            r.scale.clone(),
            r.target.clone(),
            r.defense.clone(),
            r.seed,
            r.fact_id,
        )
    });
    Ok(RunOutput {
        table,
        records: all_records,
        candidates: all_candidates,
    })
}

pub struct GridOutput {
    pub tables: Vec<(ModelScale, EditTargetConfig, ResultsTable)>,
    pub merged: ResultsTable,
    pub records: Vec<FactRecord>,
    pub candidates: Vec<CandidateSet>,
}

/// Cross-product execution over the scale and target axes; worlds and
/// pretrained checkpoints are shared per scale through the cache.
pub fn grid(cfg: &ExperimentConfig) -> Result<GridOutput> {
    cfg.validate()?;
    let cells = cfg.cell_count();
    if cells > cfg.max_cells {
        return Err(Error::Config(format!(
            "grid would run {cells} cells, above the cap of {}",
            cfg.max_cells
        )));
    }
    let mut tables = Vec::new();
    let mut merged = ResultsTable::default();
    let mut records = Vec::new();
    let mut candidates = Vec::new();
    for &scale in &cfg.model_scales {
        for &target in &cfg.edit_targets {
            let out = run_cell_experiment(cfg, scale, target)?;
            merged.rows.extend(out.table.rows.clone());
            records.extend(out.records);
            candidates.extend(out.candidates);
            tables.push((scale, target, out.table));
        }
    }
    merged.sort();
    Ok(GridOutput {
        tables,
        merged,
        records,
        candidates,
    })
}
