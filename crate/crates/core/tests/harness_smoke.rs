//! End-to-end smoke test on a miniature world: pretrain, edit every defense,
//! run every attack, and check the table schema and determinism contracts.

use eraselab_core::attacks::{AttackKind, AttackSpec, FtParams};
use eraselab_core::editor::DefenseKind;
use eraselab_core::harness::report::rows_from_records;
use eraselab_core::harness::{run_experiment, DefenseConfig, ExperimentConfig};
use eraselab_core::model::{ModelConfig, PretrainHyper};
use eraselab_core::worldgen::{Level, WorldConfig};

fn tiny_config(tmp: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::base("smoke");
    cfg.world = WorldConfig {
        concepts: 12,
        relations: 5,
        fact_count: 40,
        control_count: 12,
        vocab_size: 96,
        style_tokens: 6,
        ..WorldConfig::default()
    };
    cfg.model = ModelConfig {
        vocab_size: 96,
        width: 32,
        n_layers: 2,
        heads: 2,
        mlp_expansion: 2,
        ..ModelConfig::default()
    };
    cfg.pretrain = PretrainHyper {
        max_steps: 4000,
        batch_size: 32,
        eval_every: 250,
        ..PretrainHyper::default()
    };
    cfg.defenses = vec![
        DefenseConfig::plain(DefenseKind::FactErasure),
        DefenseConfig::plain(DefenseKind::HeadProjection),
    ];
    cfg.attacks = vec![
        AttackSpec::whitebox(AttackKind::Hp, 10),
        AttackSpec::whitebox(AttackKind::Pd, 10),
        AttackSpec::ft_hp(
            10,
            FtParams {
                steps: 5,
                facts: 8,
                lr: 0.01,
            },
        ),
        AttackSpec::blackbox(AttackKind::BbMultimodal, Level::Hard, 10),
    ];
    cfg.budget = 10;
    cfg.seeds = vec![1];
    cfg.facts_per_seed = 4;
    cfg.ft_facts_cap = Some(2);
    cfg.cache_dir = Some(tmp.join("cache"));
    cfg
}

#[test]
fn tiny_world_runs_end_to_end_and_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());

    let out1 = run_experiment(&cfg).unwrap();
    assert_eq!(out1.table.rows.len(), 2, "one row per (defense, seed)");
    for row in &out1.table.rows {
        assert_eq!(row.facts, 4);
        assert!(row.rewrite_mean >= 0.85 || row.edit_failure_rate > 0.0);
        for label in ["hp", "pd", "bb_multimodal"] {
            assert!(
                row.attack_success.contains_key(label),
                "missing column {label}"
            );
        }
        assert!(row.dacc.contains_key("random"));
        assert!(row.dacc.contains_key("question_neighborhood"));
        assert!(row.dacc.contains_key("image_neighborhood"));
    }

    // second run hits the checkpoint cache and must reproduce byte-identical
    // tables and records
    let out2 = run_experiment(&cfg).unwrap();
    assert_eq!(out1.table.to_csv(), out2.table.to_csv());
    assert_eq!(
        serde_json::to_string(&out1.records).unwrap(),
        serde_json::to_string(&out2.records).unwrap()
    );

    // the per-fact records rebuild the same success rates the table reports
    let rebuilt = rows_from_records(&out1.records);
    for (a, b) in out1.table.rows.iter().zip(&rebuilt.rows) {
        assert_eq!(a.defense, b.defense);
        for (label, rate) in &a.attack_success {
            let ft_capped = label == "ft_hp";
            let rebuilt_rate = b.attack_success.get(label).copied().unwrap_or(f64::NAN);
            if !ft_capped {
                assert!(
                    (rate - rebuilt_rate).abs() < 1e-12,
                    "{label}: {rate} vs {rebuilt_rate}"
                );
            }
        }
    }

    // every candidate set respects the shared budget
    for set in &out1.candidates {
        assert!(set.tokens.len() <= 10);
    }
}
