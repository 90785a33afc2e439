//! Command-line driver: world generation, pretraining, single edits and
//! attacks, full experiment runs, grids, and report regeneration.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use eraselab_core::attacks::{AttackKind, AttackSpec, FtParams};
use eraselab_core::editor::{edit, DefenseKind, DefenseSpec, EditTarget};
use eraselab_core::harness::report::rows_from_records;
use eraselab_core::harness::{
    grid, load_checkpoint, run_experiment, save_checkpoint, ExperimentConfig,
};
use eraselab_core::lens::{lens_distributions, save_stacks};
use eraselab_core::model::{init_model, pretrain, ModelConfig, PretrainHyper};
use eraselab_core::worldgen::{
    load_world, proximity_summary, save_world, Generator, Level, World, WorldConfig,
};

#[derive(Parser)]
#[command(name = "eraselab", version, about = "Desk-scale multimodal fact-deletion lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world with per-fact evaluation bundles.
    GenWorld(GenWorldArgs),
    /// Memorize a world's training corpus into a fresh model.
    Pretrain(PretrainArgs),
    /// Delete one fact from a pretrained checkpoint.
    Edit(EditArgs),
    /// Attack an edited checkpoint and emit the candidate set.
    Attack(AttackArgs),
    /// Run a full experiment (one scale, one edit target).
    Eval(RunArgs),
    /// Run a multi-axis experiment grid.
    Grid(RunArgs),
    /// Rebuild summary tables from per-fact records.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenWorldArgs {
    /// World config as TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Print mean rephrase/neighbor/random distances.
    #[arg(long)]
    proximity: bool,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    world: PathBuf,
    /// Model config as TOML; defaults apply when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    fact_id: usize,
    /// empty | fact_erasure | error_injection | head_projection | max_entropy | input_rephrasing
    #[arg(long)]
    defense: String,
    /// llm | projector
    #[arg(long, default_value = "llm")]
    target: String,
    /// 1-based layer for the llm target; defaults to the middle layer.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Append the defense report as a JSON line.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    fact_id: usize,
    /// hp | pd | pd2 | ft_hp | bb_image | bb_question | bb_multimodal
    #[arg(long)]
    kind: String,
    /// easy | medium | hard (blackbox kinds)
    #[arg(long)]
    level: Option<String>,
    #[arg(long, default_value_t = 20)]
    budget: usize,
    #[arg(long)]
    ft_steps: Option<usize>,
    #[arg(long)]
    ft_facts: Option<usize>,
    #[arg(long)]
    ft_lr: Option<f64>,
    /// Append the candidate set as a JSON line.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the prompt's lens stack for offline replay.
    #[arg(long)]
    dump_lens: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// table1 | table2 | table3 | table5 | fig5
    #[arg(long)]
    preset: Option<String>,
    /// Full experiment config as TOML (overrides --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seed list override.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    facts: Option<usize>,
    #[arg(long)]
    ft_cap: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the seed-aggregated table.
    #[arg(long)]
    aggregate: Option<PathBuf>,
}

fn parse_level(s: &str) -> Result<Level> {
    match s {
        "easy" => Ok(Level::Easy),
        "medium" => Ok(Level::Medium),
        "hard" => Ok(Level::Hard),
        other => bail!("unknown level {other}"),
    }
}

fn parse_defense(s: &str) -> Result<DefenseKind> {
    DefenseKind::ALL
        .iter()
        .find(|k| k.label() == s)
        .copied()
        .ok_or_else(|| anyhow!("unknown defense {s}"))
}

fn load_world_file(path: &PathBuf) -> Result<World> {
    load_world(path).with_context(|| format!("loading world {}", path.display()))
}

fn find_fact(world: &World, id: usize) -> Result<&eraselab_core::worldgen::WorldFact> {
    world
        .facts
        .iter()
        .find(|wf| wf.fact.id == id)
        .ok_or_else(|| anyhow!("fact {id} not in world"))
}

fn resolve_run_config(args: &RunArgs, default_preset: &str) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::from_toml_file(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::preset(default_preset)?,
    };
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds
            .split(',')
            .map(|s| s.trim().parse::<u64>().context("bad seed list"))
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(f) = args.facts {
        cfg.facts_per_seed = f;
    }
    if let Some(c) = args.ft_cap {
        cfg.ft_facts_cap = Some(c);
    }
    if args.lambda.is_some() {
        cfg.lambda = args.lambda;
    }
    if args.out_dir.is_some() {
        cfg.out_dir = args.out_dir.clone();
    }
    if args.cache_dir.is_some() {
        cfg.cache_dir = args.cache_dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every run echoes its fully resolved flags into the output directory.
fn write_header(cfg: &ExperimentConfig, out_dir: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let argv: Vec<String> = std::env::args().collect();
    let header = serde_json::json!({
        "argv": argv,
        "config": cfg,
        "candidate_rule": "per-source top-k pools, dedup, rank by (score desc, token asc), truncate to budget",
        "dacc_sign": "pre minus post; positive = damage",
    });
    std::fs::write(
        out_dir.join("header.json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    Ok(())
}

fn persist_run(
    cfg: &ExperimentConfig,
    table: &eraselab_core::harness::ResultsTable,
    records: &[eraselab_core::harness::FactRecord],
    candidates: &[eraselab_core::attacks::CandidateSet],
) -> Result<()> {
    let Some(out_dir) = cfg.resolved_out_dir() else {
        return Ok(());
    };
    std::fs::create_dir_all(&out_dir)?;
    write_header(cfg, &out_dir)?;
    std::fs::write(out_dir.join("results.csv"), table.to_csv())?;
    std::fs::write(out_dir.join("results_agg.csv"), table.aggregate_csv())?;
    eraselab_core::harness::report::save_records(records, &out_dir.join("records.jsonl"))?;
    eraselab_core::harness::report::save_candidates(candidates, &out_dir.join("candidates.jsonl"))?;
    println!("wrote results under {}", out_dir.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenWorld(args) => {
            let mut config = match &args.config {
                Some(path) => toml::from_str::<WorldConfig>(&std::fs::read_to_string(path)?)?,
                None => WorldConfig::default(),
            };
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            let world = Generator::new(&config)?.generate();
            save_world(&world, &args.out)?;
            println!(
                "world: {} facts, {} controls, {} dropped -> {}",
                world.facts.len(),
                world.controls.len(),
                world.dropped.len(),
                args.out.display()
            );
            if args.proximity {
                let s = proximity_summary(&world);
                println!(
                    "image distances: rephrase {:.3} < neighbor {:.3} < random {:.3}",
                    s.image_rephrase, s.image_neighbor, s.image_random
                );
                println!(
                    "question distances: rephrase {:.3} < neighbor {:.3} < random {:.3}",
                    s.question_rephrase, s.question_neighbor, s.question_random
                );
            }
            Ok(())
        }
        Command::Pretrain(args) => {
            let world = load_world_file(&args.world)?;
            let mut model_cfg = match &args.model {
                Some(path) => toml::from_str::<ModelConfig>(&std::fs::read_to_string(path)?)?,
                None => ModelConfig {
                    vocab_size: world.config.vocab_size,
                    image_dim: world.config.image_dim,
                    ..ModelConfig::default()
                },
            };
            if let Some(seed) = args.seed {
                model_cfg.seed = seed;
            }
            let mut hyper = PretrainHyper {
                verbose: true,
                ..PretrainHyper::default()
            };
            if let Some(s) = args.steps {
                hyper.max_steps = s;
            }
            if let Some(lr) = args.lr {
                hyper.lr = lr;
            }
            if let Some(b) = args.batch {
                hyper.batch_size = b;
            }
            let generator = Generator::new(&world.config)?;
            let corpus = generator.training_corpus();
            let state = init_model(&model_cfg)?;
            let (trained, report) = pretrain(&state, &corpus, &hyper)?;
            save_checkpoint(&trained, &args.out)?;
            println!(
                "pretrained to accuracy {:.4} in {} steps -> {}",
                report.final_accuracy,
                report.steps_run,
                args.out.display()
            );
            Ok(())
        }
        Command::Edit(args) => {
            let world = load_world_file(&args.world)?;
            let state = load_checkpoint(&args.ckpt)?;
            let wf = find_fact(&world, args.fact_id)?;
            let kind = parse_defense(&args.defense)?;
            let mut spec = DefenseSpec::new(kind, state.config.n_layers);
            if let Some(tau) = args.tau {
                spec.stop_threshold = tau;
            }
            if let Some(ms) = args.max_steps {
                spec.max_steps = ms;
            }
            let target = match args.target.as_str() {
                "llm" => EditTarget::LlmMlpDown {
                    layer: args.layer.unwrap_or((state.config.n_layers / 2).max(1)),
                },
                "projector" => EditTarget::ProjectorMlp,
                other => bail!("unknown edit target {other}"),
            };
            let (edited, report) = edit(&state, &wf.fact, Some(&wf.bundle), &spec, target)?;
            save_checkpoint(&edited, &args.out)?;
            println!(
                "edit {}: rewrite {:.4} in {} steps (converged: {}) -> {}",
                kind.label(),
                report.rewrite_score(),
                report.steps,
                report.converged,
                args.out.display()
            );
            if let Some(path) = &args.report {
                let mut line = serde_json::to_string(&report)?;
                line.push('\n');
                use std::io::Write;
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?;
                f.write_all(line.as_bytes())?;
            }
            Ok(())
        }
        Command::Attack(args) => {
            let world = load_world_file(&args.world)?;
            let state = load_checkpoint(&args.ckpt)?;
            let wf = find_fact(&world, args.fact_id)?;
            let spec = match args.kind.as_str() {
                "hp" => AttackSpec::whitebox(AttackKind::Hp, args.budget),
                "pd" => AttackSpec::whitebox(AttackKind::Pd, args.budget),
                "pd2" => AttackSpec::whitebox(AttackKind::Pd2, args.budget),
                "ft_hp" => {
                    let mut ft = FtParams::default();
                    if let Some(s) = args.ft_steps {
                        ft.steps = s;
                    }
                    if let Some(f) = args.ft_facts {
                        ft.facts = f;
                    }
                    if let Some(lr) = args.ft_lr {
                        ft.lr = lr;
                    }
                    AttackSpec::ft_hp(args.budget, ft)
                }
                bb @ ("bb_image" | "bb_question" | "bb_multimodal") => {
                    let kind = match bb {
                        "bb_image" => AttackKind::BbImage,
                        "bb_question" => AttackKind::BbQuestion,
                        _ => AttackKind::BbMultimodal,
                    };
                    let level = parse_level(args.level.as_deref().unwrap_or("hard"))?;
                    AttackSpec::blackbox(kind, level, args.budget)
                }
                other => bail!("unknown attack kind {other}"),
            };
            let set = match spec.kind {
                AttackKind::FtHp => eraselab_core::attacks::finetune_then_attack(
                    &state,
                    &world.controls,
                    &wf.fact,
                    &spec,
                )?,
                k if k.is_blackbox() => eraselab_core::attacks::blackbox_rephrase_attack(
                    &state, &wf.fact, &wf.bundle, &spec,
                )?,
                _ => eraselab_core::attacks::whitebox_attack(&state, &wf.fact, &spec)?,
            };
            let hit = set.contains(wf.fact.answer);
            println!(
                "{} candidates (budget {}): answer {} {}",
                set.tokens.len(),
                set.budget,
                wf.fact.answer.0,
                if hit { "RECOVERED" } else { "not recovered" }
            );
            if let Some(path) = &args.out {
                let mut line = serde_json::to_string(&set)?;
                line.push('\n');
                use std::io::Write;
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?;
                f.write_all(line.as_bytes())?;
            }
            if let Some(path) = &args.dump_lens {
                let mut stack = lens_distributions(&state, &wf.fact.image, &wf.fact.question)?;
                stack.prompt_id = Some(format!("fact-{}", wf.fact.id));
                save_stacks(&[stack], path)?;
            }
            Ok(())
        }
        Command::Eval(args) => {
            let cfg = resolve_run_config(&args, "table1")?;
            let out = run_experiment(&cfg)?;
            persist_run(&cfg, &out.table, &out.records, &out.candidates)?;
            print!("{}", out.table.aggregate_csv());
            Ok(())
        }
        Command::Grid(args) => {
            let cfg = resolve_run_config(&args, "fig5")?;
            let out = grid(&cfg)?;
            persist_run(&cfg, &out.merged, &out.records, &out.candidates)?;
            print!("{}", out.merged.aggregate_csv());
            Ok(())
        }
        Command::Report(args) => {
            let records = eraselab_core::harness::report::load_records(&args.records)?;
            let table = rows_from_records(&records);
            std::fs::write(&args.out, table.to_csv())?;
            if let Some(path) = &args.aggregate {
                std::fs::write(path, table.aggregate_csv())?;
            }
            println!("{} rows -> {}", table.rows.len(), args.out.display());
            Ok(())
        }
    }
}
