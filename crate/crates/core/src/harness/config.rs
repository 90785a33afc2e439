//! Experiment configuration: fully explicit once resolved, loadable from a
//! sectioned key-value (TOML) file, with named presets mirroring the main
//! experiment grids.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackKind, AttackSpec, FtParams};
use crate::editor::{DefenseKind, DefenseSpec, EditTarget};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PretrainHyper};
use crate::worldgen::{Level, WorldConfig};

/// Model size axis: the scaled variant doubles both width and depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScale {
    Base,
    Scaled,
}

impl ModelScale {
    pub fn label(self) -> &'static str {
        match self {
            ModelScale::Base => "base",
            ModelScale::Scaled => "scaled",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        match self {
            ModelScale::Base => base.clone(),
            ModelScale::Scaled => base.scaled_up(),
        }
    }
}

/// Edit-target axis entry; the default layer resolves to the middle of the
/// stack once the model scale is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditTargetConfig {
    LlmMlpDefault,
    LlmMlpLayer { layer: usize },
    ProjectorMlp,
}

impl EditTargetConfig {
    pub fn materialize(self, n_layers: usize) -> EditTarget {
        match self {
            EditTargetConfig::LlmMlpDefault => EditTarget::LlmMlpDown {
                layer: (n_layers / 2).max(1),
            },
            EditTargetConfig::LlmMlpLayer { layer } => EditTarget::LlmMlpDown { layer },
            EditTargetConfig::ProjectorMlp => EditTarget::ProjectorMlp,
        }
    }
}

/// Per-defense overrides on top of the scale-dependent defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub lr: Option<f64>,
    pub max_steps: Option<usize>,
    pub stop_threshold: Option<f64>,
    pub top_k: Option<usize>,
    pub margin: Option<f64>,
}

impl DefenseConfig {
    pub fn plain(kind: DefenseKind) -> Self {
        DefenseConfig {
            kind,
            lr: None,
            max_steps: None,
            stop_threshold: None,
            top_k: None,
            margin: None,
        }
    }

    pub fn materialize(&self, n_layers: usize) -> DefenseSpec {
        let mut spec = DefenseSpec::new(self.kind, n_layers);
        if let Some(lr) = self.lr {
            spec.lr = lr;
        }
        if let Some(ms) = self.max_steps {
            spec.max_steps = ms;
        }
        if let Some(tau) = self.stop_threshold {
            spec.stop_threshold = tau;
        }
        if let Some(k) = self.top_k {
            spec.top_k = k;
        }
        if let Some(m) = self.margin {
            spec.margin = m;
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainHyper,
    pub model_scales: Vec<ModelScale>,
    pub edit_targets: Vec<EditTargetConfig>,
    pub defenses: Vec<DefenseConfig>,
    pub attacks: Vec<AttackSpec>,
    pub budget: usize,
    pub seeds: Vec<u64>,
    /// Retained facts edited per seed.
    pub facts_per_seed: usize,
    /// Cap on how many of those receive the finetuning attack (it re-trains
    /// the whole model per fact); `None` runs it on every fact.
    pub ft_facts_cap: Option<usize>,
    /// Optional report weight combining attack success and random damage.
    pub lambda: Option<f64>,
    pub out_dir: Option<PathBuf>,
    /// Checkpoint cache directory; reruns with equal configs reuse it.
    pub cache_dir: Option<PathBuf>,
    pub workers: usize,
    /// Refuse grids whose (scale x target x seed x defense) cell count
    /// exceeds this.
    pub max_cells: usize,
}

fn default_attacks(budget: usize) -> Vec<AttackSpec> {
    vec![
        AttackSpec::whitebox(AttackKind::Hp, budget),
        AttackSpec::whitebox(AttackKind::Pd, budget),
        AttackSpec::whitebox(AttackKind::Pd2, budget),
        AttackSpec::ft_hp(budget, FtParams::default()),
        AttackSpec::blackbox(AttackKind::BbImage, Level::Hard, budget),
        AttackSpec::blackbox(AttackKind::BbQuestion, Level::Hard, budget),
        AttackSpec::blackbox(AttackKind::BbMultimodal, Level::Hard, budget),
    ]
}

fn level_sweep_attacks(budget: usize) -> Vec<AttackSpec> {
    let mut out = Vec::new();
    for level in [Level::Easy, Level::Medium, Level::Hard] {
        out.push(AttackSpec::blackbox(AttackKind::BbImage, level, budget));
        out.push(AttackSpec::blackbox(AttackKind::BbQuestion, level, budget));
    }
    out.push(AttackSpec::blackbox(AttackKind::BbMultimodal, Level::Hard, budget));
    out
}

impl ExperimentConfig {
    /// Base configuration shared by the presets.
    pub fn base(name: &str) -> Self {
        let budget = 20;
        ExperimentConfig {
            name: name.to_string(),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainHyper::default(),
            model_scales: vec![ModelScale::Base],
            edit_targets: vec![EditTargetConfig::LlmMlpDefault],
            defenses: DefenseKind::ALL.iter().map(|&k| DefenseConfig::plain(k)).collect(),
            attacks: default_attacks(budget),
            budget,
            seeds: vec![1, 2, 3, 4, 5],
            facts_per_seed: 100,
            ft_facts_cap: Some(40),
            lambda: None,
            out_dir: None,
            cache_dir: None,
            workers: 0,
            max_cells: 256,
        }
    }

    /// Smaller world for the scaling comparison; both scales share it.
    fn scaling_world() -> WorldConfig {
        WorldConfig {
            concepts: 30,
            relations: 10,
            fact_count: 240,
            control_count: 40,
            ..WorldConfig::default()
        }
    }

    /// Named presets mirroring the main experiment grids. Values are
    /// desk-scale: they target trend reproduction, not absolute numbers.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::base(name);
        match name {
            // full defense-by-attack matrix
            "table1" => {}
            // rephrase-level ablation: blackbox attacks at all three levels
            "table2" => {
                cfg.attacks = level_sweep_attacks(cfg.budget);
            }
            // neighborhood-level ablation; the per-level image-neighborhood
            // damage columns carry the signal, attacks stay minimal
            "table3" => {
                cfg.attacks = vec![AttackSpec::whitebox(AttackKind::Hp, cfg.budget)];
            }
            // edit-target comparison under the head-projection defense at a
            // matched rewrite bar
            "table5" => {
                cfg.edit_targets = vec![
                    EditTargetConfig::LlmMlpDefault,
                    EditTargetConfig::ProjectorMlp,
                ];
                cfg.defenses = vec![DefenseConfig {
                    stop_threshold: Some(0.95),
                    ..DefenseConfig::plain(DefenseKind::HeadProjection)
                }];
                cfg.facts_per_seed = 50;
            }
            // scaling comparison: base vs doubled model against fact erasure
            "fig5" => {
                cfg.world = Self::scaling_world();
                cfg.model_scales = vec![ModelScale::Base, ModelScale::Scaled];
                cfg.defenses = vec![DefenseConfig::plain(DefenseKind::FactErasure)];
                cfg.attacks = vec![
                    AttackSpec::whitebox(AttackKind::Hp, cfg.budget),
                    AttackSpec::blackbox(AttackKind::BbMultimodal, Level::Hard, cfg.budget),
                ];
                cfg.facts_per_seed = 40;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other}; expected table1, table2, table3, table5, or fig5"
                )))
            }
        }
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config to toml: {e}")))
    }

    pub fn cell_count(&self) -> usize {
        self.model_scales.len() * self.edit_targets.len() * self.seeds.len() * self.defenses.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.defenses.is_empty() || self.attacks.is_empty() {
            return Err(Error::Config("need at least one defense and one attack".into()));
        }
        if self.model_scales.is_empty() || self.edit_targets.is_empty() {
            return Err(Error::Config("need at least one scale and one edit target".into()));
        }
        if self.facts_per_seed == 0 {
            return Err(Error::Config("facts_per_seed must be positive".into()));
        }
        if self.world.vocab_size != self.model.vocab_size {
            return Err(Error::Config(
                "world and model vocabulary sizes must match".into(),
            ));
        }
        if self.world.image_dim != self.model.image_dim {
            return Err(Error::Config(
                "world and model image dimensions must match".into(),
            ));
        }
        self.world.validate()?;
        self.model.validate()?;
        for attack in &self.attacks {
            attack.validate()?;
        }
        for scale in &self.model_scales {
            let n = scale.apply(&self.model).n_layers;
            for defense in &self.defenses {
                defense.materialize(n).validate(n)?;
            }
            for target in &self.edit_targets {
                if let EditTarget::LlmMlpDown { layer } = target.materialize(n) {
                    if layer == 0 || layer > n {
                        return Err(Error::Config(format!(
                            "edit layer {layer} outside 1..={n}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Output directory with the environment override applied. Only the
    /// output location may come from the environment.
    pub fn resolved_out_dir(&self) -> Option<PathBuf> {
        std::env::var_os("ERASELAB_OUT_DIR")
            .map(PathBuf::from)
            .or_else(|| self.out_dir.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_validate() {
        for name in ["table1", "table2", "table3", "table5", "fig5"] {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(ExperimentConfig::preset("table9").is_err());
    }

    #[test]
    fn table1_preset_has_six_defenses_and_seven_attacks() {
        let cfg = ExperimentConfig::preset("table1").unwrap();
        assert_eq!(cfg.defenses.len(), 6);
        assert_eq!(cfg.attacks.len(), 7);
        assert_eq!(cfg.budget, 20);
    }

    #[test]
    fn table5_preset_compares_two_targets_under_head_projection() {
        let cfg = ExperimentConfig::preset("table5").unwrap();
        assert_eq!(cfg.edit_targets.len(), 2);
        assert_eq!(cfg.defenses.len(), 1);
        assert_eq!(cfg.defenses[0].kind, DefenseKind::HeadProjection);
        assert_eq!(cfg.defenses[0].stop_threshold, Some(0.95));
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = ExperimentConfig::preset("fig5").unwrap();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn mismatched_world_and_model_vocab_is_rejected() {
        let mut cfg = ExperimentConfig::preset("table1").unwrap();
        cfg.model.vocab_size = 128;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn default_edit_layer_is_the_middle_of_the_stack() {
        assert_eq!(
            EditTargetConfig::LlmMlpDefault.materialize(4),
            EditTarget::LlmMlpDown { layer: 2 }
        );
        assert_eq!(
            EditTargetConfig::LlmMlpDefault.materialize(8),
            EditTarget::LlmMlpDown { layer: 4 }
        );
    }
}
