//! Ablation grids over fusion mode, VAE augmentation and side features,
//! with MF/NeuMF baselines, cross-validated and written as reports.

mod grid;
mod pipeline;
mod report;
mod suite;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};
use crate::numerics::OptimizerConfig;
use crate::recsys::{HeadKind, ModelConfig, Objective, TrainConfig};
use crate::vae::VaeConfig;

pub use grid::{run_ablation_grid, run_cell, GridOptions};

pub use pipeline::{evaluate_split, EvalProtocol, Recommender, Scorer, TrainedBranch, VaeStage};
pub use report::{
    emit_report, read_sidecar, write_report, ReportFormat, ReportRow, RunMetrics, Summary,
};
pub use suite::{gradcheck_suite, SuiteModule, SuiteResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Row label; derived from the settings when absent.
    pub label: Option<String>,
    pub model: HeadKind,
    /// Off for the pure collaborative baselines.
    pub content: bool,
    pub fusion: FusionMode,
    pub vae: bool,
    pub side_features: bool,
    pub k: usize,
    pub epochs: usize,
    /// 1 uses a single 80/20 split of the warm interactions.
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub embedding_dim: usize,
    pub projection_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub vae_hidden: Vec<usize>,
    pub vae_beta: f64,
    pub vae_epochs: usize,
    pub tau: f64,
    pub lambda: f64,
    /// Generated samples per cold entity.
    pub pseudo_per_cold: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training loss; follows the dataset manifest when absent.
    pub objective: Option<Objective>,
    pub cold_user_fraction: f64,
    pub cold_item_fraction: f64,
    /// Unobserved items added to each user's ranking candidates.
    pub eval_negatives: usize,
    /// Normalized rating at or above which a held-out item is relevant.
    pub relevance_threshold: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            label: None,
            model: HeadKind::NeuMf,
            content: true,
            fusion: FusionMode::Intermediate,
            vae: false,
            side_features: false,
            k: 5,
            epochs: 10,
            folds: 3,
            seeds: vec![42],
            embedding_dim: 16,
            projection_dim: 32,
            mlp_hidden: vec![128, 64],
            latent_dim: 8,
            vae_hidden: vec![32],
            vae_beta: 1.0,
            vae_epochs: 10,
            tau: 0.2,
            lambda: 0.5,
            pseudo_per_cold: 5,
            negatives: 4,
            learning_rate: 1e-3,
            batch_size: 32,
            objective: None,
            cold_user_fraction: 0.3,
            cold_item_fraction: 0.0,
            eval_negatives: 0,
            relevance_threshold: 0.5,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.folds == 0 {
            return Err(Error::Config("folds must be at least 1".into()));
        }
        if self.embedding_dim == 0
            || self.projection_dim == 0
            || self.latent_dim == 0
            || self.batch_size == 0
        {
            return Err(Error::Config(
                "dimensions and batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1)", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.vae_beta >= 0.0 && self.vae_beta.is_finite()) {
            return Err(Error::Config("vae_beta must be non-negative".into()));
        }
        if !self.content && (self.vae || self.side_features) {
            return Err(Error::Config(
                "VAE and side features need content features".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let head = match self.model {
            HeadKind::Mf => "MF",
            HeadKind::NeuMf => "NeuMF",
        };
        if !self.content {
            return head.to_string();
        }
        let mut s = format!("Multi {} fusion", self.fusion.as_str());
        if self.model == HeadKind::Mf {
            s.push_str(" (MF head)");
        }
        if self.vae {
            s.push_str(" + VAE");
        }
        if self.side_features {
            s.push_str(" + side");
        }
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            head: self.model,
            embedding_dim: self.embedding_dim,
            mlp_hidden: self.mlp_hidden.clone(),
            use_content: self.content,
            ..ModelConfig::default()
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            mode: self.fusion,
            projection_dim: self.projection_dim,
            ..FusionConfig::default()
        }
    }

    pub fn objective_for(&self, dataset: &Dataset) -> Objective {
        self.objective.unwrap_or(if dataset.manifest.implicit {
            Objective::Implicit
        } else {
            Objective::Explicit
        })
    }

    pub fn train_config(&self, objective: Objective) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: OptimizerConfig {
                learning_rate: self.learning_rate,
                ..OptimizerConfig::default()
            },
            negatives: self.negatives,
            objective,
        }
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig {
            hidden_dims: self.vae_hidden.clone(),
            latent_dim: self.latent_dim,
            beta: self.vae_beta,
            epochs: self.vae_epochs,
            optimizer: OptimizerConfig {
                learning_rate: self.learning_rate,
                ..OptimizerConfig::default()
            },
            ..VaeConfig::default()
        }
    }

    /// The desk-scale grid: {early, intermediate, late} × {VAE off, on}
    /// followed by the MF and NeuMF baselines.
    pub fn desk_grid(base: &AblationConfig) -> Vec<AblationConfig> {
        let mut grid = Vec::new();
        for fusion in [
            FusionMode::Early,
            FusionMode::Intermediate,
            FusionMode::Late,
        ] {
            for vae in [false, true] {
                grid.push(AblationConfig {
                    label: None,
                    fusion,
                    vae,
                    ..base.clone()
                });
            }
        }
        for model in [HeadKind::Mf, HeadKind::NeuMf] {
            grid.push(AblationConfig {
                label: None,
                model,
                content: false,
                vae: false,
                side_features: false,
                ..base.clone()
            });
        }
        grid
    }
}

/// Where the grid's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthSpec),
    /// A data directory as written by `synth`.
    Dir(PathBuf),
}

/// Experiment file: grid, data source and output paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: Vec<AblationConfig>,
    pub data: DataSource,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        if cfg.grid.is_empty() {
            return Err(Error::Config("experiment grid is empty".into()));
        }
        for c in &cfg.grid {
            c.validate()?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_grid_has_six_cells_and_two_baselines() {
        let grid = AblationConfig::desk_grid(&AblationConfig::default());
        assert_eq!(grid.len(), 8);
        let labels: Vec<String> = grid.iter().map(AblationConfig::label).collect();
        let mut unique = labels.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), 8);
        assert_eq!(labels[3], "Multi intermediate fusion + VAE");
        assert_eq!(labels[6], "MF");
        assert_eq!(labels[7], "NeuMF");
    }

    #[test]
    fn config_json_uses_defaults_and_rejects_unknown_fields() {
        let c: AblationConfig =
            serde_json::from_str(r#"{"fusion": "middle", "vae": true}"#).unwrap();
        assert_eq!(c.fusion, FusionMode::Intermediate);
        assert_eq!(c.k, 5);
        assert!(serde_json::from_str::<AblationConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            AblationConfig {
                k: 0,
                ..AblationConfig::default()
            },
            AblationConfig {
                seeds: vec![],
                ..AblationConfig::default()
            },
            AblationConfig {
                tau: 1.0,
                ..AblationConfig::default()
            },
            AblationConfig {
                content: false,
                vae: true,
                ..AblationConfig::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert!(AblationConfig {
            epochs: 0,
            ..AblationConfig::default()
        }
        .validate()
        .is_ok());
    }
}
