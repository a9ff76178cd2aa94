use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::admm::{strong_lambda, PhaseConfig, PhaseKind};
use crate::expr::EquivalenceConfig;
use crate::extraction::FitConfig;
use crate::losses::LossConfig;
use crate::net::ActivationConfig;
use crate::sampling::OversampleConfig;

use super::BenchError;

/// Hyperparameters of one ADMM phase. A missing `lambda` in the strong
/// phase means `5·10^-(n-1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSettings {
    pub epochs: usize,
    pub rho: f64,
    pub lambda: Option<f64>,
    pub lr: f64,
    pub lr_final: Option<f64>,
    pub batch_size: usize,
    pub decay: f64,
    pub eps: f64,
    pub project_on_finish: bool,
}

impl PhaseSettings {
    fn weak() -> Self {
        PhaseSettings {
            epochs: 20,
            rho: 0.5,
            lambda: Some(5e-4),
            lr: 1.5e-2,
            lr_final: None,
            batch_size: 16,
            decay: 0.9,
            eps: 1e-8,
            project_on_finish: false,
        }
    }

    fn strong() -> Self {
        PhaseSettings { epochs: 30, rho: 0.005, lambda: None, lr_final: Some(1e-5), ..PhaseSettings::weak() }
    }

    pub fn to_phase(&self, kind: PhaseKind, n: usize, loss: &LossConfig) -> PhaseConfig {
        PhaseConfig {
            kind,
            epochs: self.epochs,
            rho: self.rho,
            lambda: self.lambda.unwrap_or_else(|| strong_lambda(n)),
            lr: self.lr,
            batch_size: self.batch_size,
            decay: self.decay,
            eps: self.eps,
            project_on_finish: self.project_on_finish,
            lr_final: self.lr_final,
            loss: loss.clone(),
        }
    }
}

/// Pipeline stages that can be switched off for ablations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub oversample: bool,
    pub gradient_prune: bool,
    pub round_to_zero: bool,
    pub optimize_coefficients: bool,
    pub round_final: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages { oversample: true, gradient_prune: true, round_to_zero: true, optimize_coefficients: true, round_final: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Samples per task; a task's own count is used when this is `None`.
    pub samples: Option<usize>,
    /// Multiplier on the `sqrt(6/fan_in)` initialisation bound.
    pub init_scale: f64,
    pub activation: ActivationConfig,
    pub loss: LossConfig,
    pub weak: PhaseSettings,
    pub strong: PhaseSettings,
    pub oversample: OversampleConfig,
    pub prune_threshold: f64,
    pub round_threshold: f64,
    pub fit: FitConfig,
    pub equivalence: EquivalenceConfig,
    /// Fraction of the post-oversampling data held out for testing.
    pub test_fraction: f64,
    /// Expected wall time of one run; `None` disables the deadline unless a
    /// suite measures it.
    pub typical_runtime_secs: Option<f64>,
    pub deadline_factor: f64,
    /// Lower bound on the measured typical runtime.
    pub min_typical_secs: f64,
    pub stages: Stages,
    pub cache_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            samples: None,
            init_scale: 0.1,
            activation: ActivationConfig::default(),
            loss: LossConfig { alpha: 3e-3, ..LossConfig::default() },
            weak: PhaseSettings::weak(),
            strong: PhaseSettings::strong(),
            oversample: OversampleConfig::default(),
            prune_threshold: 0.01,
            round_threshold: 0.1,
            fit: FitConfig::default(),
            equivalence: EquivalenceConfig::default(),
            test_fraction: 0.2,
            typical_runtime_secs: None,
            deadline_factor: 5.0,
            min_typical_secs: 2.0,
            stages: Stages::default(),
            cache_dir: None,
        }
    }
}

impl Config {
    /// Defaults overridden by the keys present in a TOML document; nested
    /// tables are merged key by key.
    pub fn from_toml(text: &str) -> Result<Config, BenchError> {
        let err = |e: &dyn std::fmt::Display| BenchError::Config(e.to_string());
        let overrides: toml::Table = text.parse().map_err(|e| err(&e))?;
        let mut merged = toml::Table::try_from(Config::default()).map_err(|e| err(&e))?;
        merge(&mut merged, overrides);
        toml::Value::Table(merged).try_into().map_err(|e| err(&e))
    }

    pub fn load(path: &Path) -> Result<Config, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Config::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if !(self.init_scale > 0.0) {
            return bad("init_scale must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        if !(self.deadline_factor > 0.0) {
            return bad("deadline_factor must be positive");
        }
        if self.oversample.k < 2 {
            return bad("oversample.k must be at least 2");
        }
        if !self.activation.is_valid() {
            return bad("activation cutoffs are invalid");
        }
        for p in [&self.weak, &self.strong] {
            p.to_phase(PhaseKind::Weak, 1, &self.loss).validate().map_err(|e| BenchError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Short digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let c = Config::from_toml("prune_threshold = 0.02\n[weak]\nepochs = 5\n").unwrap();
        assert_eq!(c.prune_threshold, 0.02);
        assert_eq!(c.weak.epochs, 5);
        assert_eq!(c.weak.rho, 0.5);
        assert_eq!(c.strong.rho, 0.005);
        assert_eq!(c.round_threshold, 0.1);
        assert_eq!((c.oversample.k, c.oversample.max_iter, c.oversample.percent), (8, 2, 30.0));
        assert!(Config::from_toml("no_such_key = 1").is_err());
        assert!(Config::from_toml("[strong]\nbogus = 1").is_err());
        let c = Config::from_toml("[strong]\nepochs = 7\nlambda = 0.3\n").unwrap();
        assert_eq!((c.strong.epochs, c.strong.rho, c.strong.lambda), (7, 0.005, Some(0.3)));
        assert_eq!(c.strong.lr_final, Some(1e-5));
    }

    #[test]
    fn strong_lambda_follows_arity() {
        let c = Config::default();
        let p = c.strong.to_phase(PhaseKind::Strong, 2, &c.loss);
        assert!((p.lambda - 0.5).abs() < 1e-15);
        let p = c.weak.to_phase(PhaseKind::Weak, 3, &c.loss);
        assert_eq!((p.rho, p.lambda, p.epochs, p.lr), (0.5, 5e-4, 20, 1.5e-2));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(a.hash(), b.hash());
        b.round_threshold = 0.2;
        assert_ne!(a.hash(), b.hash());
    }
}
