//! TOML experiment configuration.
//!
//! Every ε-dependent quantity is derived from the `[budget]` section: the
//! training and attack budget ε, the PGD step `α = alpha_ratio·ε`, and the
//! defense budget and step `β = beta_ratio·ε`. With the defaults
//! (ε = 8/255, ratios 1/4) this gives α = β = 2/255.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackContext, AttackSpec, DomainBox};
use crate::defense::DefenseConfig;
use crate::deq::{Nonlinearity, SolverConfig};
use crate::error::{Error, Result};
use crate::metrics::{EntropyState, EvalConfig};
use crate::training::{Framework, TrainConfig};

use super::dataset::{gen_dataset, load_csv, Dataset, DatasetKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GenData,
    Train,
    Attack,
    Defend,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::GenData, Stage::Train, Stage::Attack, Stage::Defend, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen_data",
            Stage::Train => "train",
            Stage::Attack => "attack",
            Stage::Defend => "defend",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    TwoMoons,
    GaussianBlobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    pub n: usize,
    pub noise: f64,
    pub classes: usize,
    /// CSV file for `source = "csv"`.
    pub path: Option<PathBuf>,
    /// Domain box `[lo, hi]` for every feature of CSV data.
    pub domain: Option<[f64; 2]>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::GaussianBlobs,
            n: 600,
            noise: 0.35,
            classes: 3,
            path: None,
            domain: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub nonlinearity: Nonlinearity,
    /// Spectral bound on `W`.
    pub gamma: f64,
    /// Checkpoint read by stages that run without `train`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: 16,
            nonlinearity: Nonlinearity::Tanh,
            gamma: 0.9,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    /// Absolute ℓ∞ budget.
    pub eps: f64,
    /// For synthetic data: ε as a fraction of the generator's class margin
    /// (overrides `eps`).
    pub margin_fraction: Option<f64>,
    pub alpha_ratio: f64,
    pub beta_ratio: f64,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            eps: 8.0 / 255.0,
            margin_fraction: None,
            alpha_ratio: 0.25,
            beta_ratio: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub framework: Framework,
    pub random_intermediate: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub betas: [f64; 2],
    pub eps_adam: f64,
    pub attack_steps: usize,
    pub random_start: bool,
    pub trades_weight: f64,
    pub k_p: usize,
    pub spectral_rescale: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            framework: t.framework,
            random_intermediate: t.random_intermediate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            betas: t.betas,
            eps_adam: t.eps_adam,
            attack_steps: t.attack_steps,
            random_start: t.random_start,
            trades_weight: t.trades_weight,
            k_p: t.k_p,
            spectral_rescale: t.spectral_rescale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub steps: usize,
    pub random_start: bool,
    /// Fixed prediction state; absent selects the state on validation data.
    pub prediction_state: Option<usize>,
    pub entropy_state: EntropyState,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            steps: 10,
            random_start: true,
            prediction_state: None,
            entropy_state: EntropyState::Final,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub enabled: bool,
    pub iterations: usize,
    pub frequency: usize,
}

impl Default for DefenseSection {
    fn default() -> Self {
        let d = DefenseConfig::default();
        Self {
            enabled: d.enabled,
            iterations: d.iterations,
            frequency: d.frequency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub stages: Vec<Stage>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub solver: SolverConfig,
    pub budget: BudgetSection,
    pub training: TrainingSection,
    pub attack: AttackSection,
    pub defense: DefenseSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stages: Stage::ALL.to_vec(),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            solver: SolverConfig::default(),
            budget: BudgetSection::default(),
            training: TrainingSection::default(),
            attack: AttackSection::default(),
            defense: DefenseSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// ε-dependent values after resolving the budget against the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedBudget {
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Checks every section before any compute.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.solver.validate().map_err(|e| Error::Config(e.to_string()))?;
        let n = self.solver.iterations;
        let d = &self.dataset;
        match d.source {
            DataSource::Csv => {
                if d.path.is_none() {
                    return bad("dataset.source = \"csv\" needs dataset.path".into());
                }
            }
            DataSource::TwoMoons | DataSource::GaussianBlobs => {
                if d.classes < 2 || d.n < 10 * d.classes {
                    return bad(format!("dataset needs classes >= 2 and n >= 10·classes, got n = {}, classes = {}", d.n, d.classes));
                }
                if d.source == DataSource::TwoMoons && d.classes != 2 {
                    return bad("two_moons has exactly 2 classes".into());
                }
            }
        }
        if let Some([lo, hi]) = d.domain {
            if !(lo < hi) {
                return bad(format!("dataset.domain [{lo}, {hi}] is empty"));
            }
        }
        if self.model.hidden == 0 {
            return bad("model.hidden must be >= 1".into());
        }
        if !(self.model.gamma > 0.0 && self.model.gamma <= 1.0) {
            return bad(format!("model.gamma = {} outside (0, 1]", self.model.gamma));
        }
        let b = &self.budget;
        if !(b.eps >= 0.0) || !b.eps.is_finite() {
            return bad(format!("budget.eps = {} must be >= 0", b.eps));
        }
        if let Some(f) = b.margin_fraction {
            if !(f >= 0.0) {
                return bad(format!("budget.margin_fraction = {f} must be >= 0"));
            }
        }
        if !(b.alpha_ratio > 0.0 && b.alpha_ratio <= 1.0) {
            return bad(format!("budget.alpha_ratio = {} outside (0, 1]", b.alpha_ratio));
        }
        if !(b.beta_ratio >= 0.0) {
            return bad(format!("budget.beta_ratio = {} must be >= 0", b.beta_ratio));
        }
        self.train_config(ResolvedBudget {
            eps: 1.0,
            alpha: 1.0,
            beta: 1.0,
        })
        .validate()?;
        if let Some(s) = self.attack.prediction_state {
            if s < 1 || s > n {
                return bad(format!("attack.prediction_state = {s} outside 1..={n}"));
            }
        }
        if self.defense.iterations == 0 || self.defense.frequency == 0 {
            return bad("defense.iterations and defense.frequency must be >= 1".into());
        }
        let needs_checkpoint = !self.stages.contains(&Stage::Train)
            && self
                .stages
                .iter()
                .any(|s| matches!(s, Stage::Attack | Stage::Defend | Stage::Report));
        if needs_checkpoint && self.model.checkpoint.is_none() {
            return bad("stages after training need model.checkpoint when `train` is not run".into());
        }
        Ok(())
    }

    /// Builds the dataset the config describes.
    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        match d.source {
            DataSource::TwoMoons => gen_dataset(DatasetKind::TwoMoons, d.n, d.noise, d.classes, self.seed),
            DataSource::GaussianBlobs => {
                gen_dataset(DatasetKind::GaussianBlobs, d.n, d.noise, d.classes, self.seed)
            }
            DataSource::Csv => load_csv(
                d.path.as_deref().expect("validated"),
                d.domain.map(|[lo, hi]| (lo, hi)),
                self.seed,
            ),
        }
    }

    pub fn resolve_budget(&self, data: &Dataset) -> Result<ResolvedBudget> {
        let b = &self.budget;
        let eps = match (b.margin_fraction, data.margin) {
            (Some(f), Some(m)) => {
                if !(m > 0.0) {
                    return Err(Error::Config(format!(
                        "class margin {m} is not positive; lower dataset.noise or set budget.eps"
                    )));
                }
                f * m
            }
            (Some(_), None) => {
                return Err(Error::Config(
                    "budget.margin_fraction needs synthetic data with a known margin".into(),
                ))
            }
            (None, _) => b.eps,
        };
        Ok(ResolvedBudget {
            eps,
            alpha: b.alpha_ratio * eps,
            beta: b.beta_ratio * eps,
        })
    }

    pub fn train_config(&self, budget: ResolvedBudget) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            framework: t.framework,
            random_intermediate: t.random_intermediate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr0: t.lr0,
            betas: t.betas,
            eps_adam: t.eps_adam,
            eps: budget.eps,
            alpha: budget.alpha,
            attack_steps: t.attack_steps,
            random_start: t.random_start,
            trades_weight: t.trades_weight,
            k_p: t.k_p,
            spectral_rescale: t.spectral_rescale,
            seed: self.seed,
        }
    }

    pub fn defense_config(&self, budget: ResolvedBudget) -> DefenseConfig {
        DefenseConfig {
            beta: budget.beta,
            iterations: self.defense.iterations,
            frequency: self.defense.frequency,
            eps: budget.eps,
            enabled: self.defense.enabled,
        }
    }

    pub fn attack_spec(&self, budget: ResolvedBudget) -> AttackSpec {
        AttackSpec {
            steps: self.attack.steps,
            step_size: budget.alpha,
            random_start: self.attack.random_start,
            ..AttackSpec::readymade(budget.eps, self.seed ^ 0x6576_616c)
        }
    }

    pub fn eval_config(&self, budget: ResolvedBudget, domain: &DomainBox<f64>) -> EvalConfig<f64> {
        EvalConfig {
            ctx: AttackContext {
                solver: self.solver.clone(),
                domain: domain.clone(),
                k_p: self.training.k_p,
            },
            attack: self.attack_spec(budget),
            defense: Some(self.defense_config(budget)).filter(|d| d.enabled),
            prediction_state: self.attack.prediction_state,
            entropy_state: self.attack.entropy_state,
        }
    }
}
