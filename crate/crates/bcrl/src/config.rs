//! Experiment configuration documents (TOML).
//!
//! Every field except `mdp` and `data` has a default. Unknown keys are
//! rejected. [`ExperimentConfig::validate`] reports every violation at
//! once, and [`ExperimentConfig::hash`] identifies a configuration in all
//! outputs.
//!
//! Per-run seeds: for run seed `k`, the MDP is generated from
//! `mdp.seed + k`, the evaluation policy from `policy.seed + k`, the
//! behavior policy from `sampling.behavior_seed + k`, and the dataset,
//! split, network initialization and batch order from `k`.

use std::path::{Path, PathBuf};

use bcrl_core::bcrl::{DesignKind, Regime, ThetaBounds, TrainConfig, DEFAULT_M_BOUND};
use bcrl_core::optim::OptimizerKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MdpKind {
    LowRank,
    Tabular,
    /// An MDP document on disk; `mdp.seed` is ignored.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub kind: MdpKind,
    #[serde(default)]
    pub states: usize,
    #[serde(default)]
    pub actions: usize,
    /// Feature dimension of a low-rank MDP.
    #[serde(default)]
    pub dim: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub stochastic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Random,
    Uniform,
    /// Softmax over `Q` of the uniform policy.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(default = "default_policy_kind")]
    pub kind: PolicyKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_inverse_temperature")]
    pub inverse_temperature: f64,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self { kind: PolicyKind::Random, seed: 0, inverse_temperature: default_inverse_temperature() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingKind {
    Uniform,
    /// Occupancy of a random behavior policy from `d0`.
    Behavior,
    /// `w · d^{π_e} + (1 − w) · d^{π_b}`.
    Mixture,
    /// `weights[s][a]`, normalized.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    #[serde(default = "default_sampling_kind")]
    pub kind: SamplingKind,
    #[serde(default = "default_behavior_seed")]
    pub behavior_seed: u64,
    #[serde(default = "half")]
    pub mixture_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self { kind: SamplingKind::Uniform, behavior_seed: default_behavior_seed(), mixture_weight: 0.5, weights: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Transitions per split; `2n` are sampled.
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureChoice {
    Trainable,
    OneHot,
    LowRankTruth,
    RandomFixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    #[serde(default = "default_feature_kind")]
    pub kind: FeatureChoice,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { kind: FeatureChoice::Trainable, dim: default_dim(), hidden: default_hidden() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesignChoice {
    None,
    Logdet,
    MinEig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeChoice {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub steps: usize,
    pub learning_rate: f64,
    pub inner_learning_rate: f64,
    pub ema_tau: f64,
    pub design_weight: f64,
    pub design_kind: DesignChoice,
    pub regime: RegimeChoice,
    pub batch_size: usize,
    pub refit_every: usize,
    pub use_target: bool,
    pub bc_weight: f64,
    pub optimizer: OptimizerChoice,
    pub g_steps: usize,
    /// Keep the witness inside `‖ρ‖ ≤ lspe.radius`, `‖M‖₂ ≤ m_spectral_bound`.
    pub enforce_theta: bool,
    pub m_spectral_bound: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let r = TrainConfig::reference(0, 1.0);
        Self {
            steps: r.steps,
            learning_rate: r.learning_rate,
            inner_learning_rate: r.inner_learning_rate,
            ema_tau: r.ema_tau,
            design_weight: r.design_weight,
            design_kind: DesignChoice::Logdet,
            regime: RegimeChoice::Stochastic,
            batch_size: r.batch_size,
            refit_every: r.refit_every,
            use_target: r.use_target,
            bc_weight: r.bc_weight,
            optimizer: OptimizerChoice::Adam,
            g_steps: r.g_steps,
            enforce_theta: true,
            m_spectral_bound: DEFAULT_M_BOUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LspeSpec {
    pub iterations: usize,
    /// Ball radius `W` of the regressions.
    pub radius: f64,
}

impl Default for LspeSpec {
    fn default() -> Self {
        Self { iterations: 100, radius: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSpec {
    pub fqe: bool,
    pub fqe_iterations: usize,
    pub fqe_inner_steps: usize,
    pub fqe_learning_rate: f64,
    pub fqe_batch_size: usize,
    /// Also train the no-design and design-only ablations.
    pub ablations: bool,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self { fqe: false, fqe_iterations: 50, fqe_inner_steps: 20, fqe_learning_rate: 0.05, fqe_batch_size: 1024, ablations: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    /// Timesteps `h` whose state marginal is used as an alternative `p0`.
    pub slices: Vec<usize>,
    pub lbc_probes: usize,
    /// Rank four graded softmax policies (one training each).
    pub ranking: bool,
    /// Write the MDP and dataset files of every run.
    pub save_inputs: bool,
    /// `certify` passes when `ε_ν ≤ certify_tolerance · (1 + W)`.
    pub certify_tolerance: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { slices: vec![0, 1, 2, 5, 10], lbc_probes: 64, ranking: false, save_inputs: true, certify_tolerance: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub sampling: SamplingSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub lspe: LspeSpec,
    #[serde(default)]
    pub baselines: BaselineSpec,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Root of the run directories. Not part of the hash.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn yes() -> bool {
    true
}
fn half() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.9
}
fn default_policy_kind() -> PolicyKind {
    PolicyKind::Random
}
fn default_inverse_temperature() -> f64 {
    1.0
}
fn default_sampling_kind() -> SamplingKind {
    SamplingKind::Uniform
}
fn default_behavior_seed() -> u64 {
    1000
}
fn default_feature_kind() -> FeatureChoice {
    FeatureChoice::Trainable
}
fn default_dim() -> usize {
    8
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn positive(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Validation(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // A relative MDP path is relative to the config file.
        if let (Some(p), Some(dir)) = (cfg.mdp.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Every violated constraint; empty when the configuration is valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let m = &self.mdp;
        match m.kind {
            MdpKind::File => {
                if m.path.is_none() {
                    v.push("mdp.path is required when mdp.kind = \"file\"".into());
                }
            }
            kind => {
                if m.states == 0 {
                    v.push("mdp.states must be at least 1".into());
                }
                if m.actions == 0 {
                    v.push("mdp.actions must be at least 1".into());
                }
                if !(m.gamma > 0.0 && m.gamma < 1.0) {
                    v.push(format!("mdp.gamma must lie in (0, 1), got {}", m.gamma));
                }
                if kind == MdpKind::LowRank && (m.dim == 0 || m.dim > m.states * m.actions) {
                    v.push("mdp.dim must lie in 1..=states*actions for a low-rank MDP".into());
                }
            }
        }
        if !self.policy.inverse_temperature.is_finite() {
            v.push("policy.inverse_temperature must be finite".into());
        }
        let s = &self.sampling;
        if !(0.0..=1.0).contains(&s.mixture_weight) {
            v.push("sampling.mixture_weight must lie in [0, 1]".into());
        }
        match (s.kind, &s.weights) {
            (SamplingKind::Explicit, None) => v.push("sampling.weights is required when sampling.kind = \"explicit\"".into()),
            (SamplingKind::Explicit, Some(w)) => {
                if m.kind != MdpKind::File && (w.len() != m.states || w.iter().any(|r| r.len() != m.actions)) {
                    v.push(format!("sampling.weights must be {}x{}", m.states, m.actions));
                }
                if w.iter().flatten().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    v.push("sampling.weights must be finite and nonnegative".into());
                }
            }
            (_, Some(_)) => v.push("sampling.weights is only used with sampling.kind = \"explicit\"".into()),
            _ => {}
        }
        if self.data.n == 0 {
            v.push("data.n must be at least 1".into());
        }
        let f = &self.features;
        if matches!(f.kind, FeatureChoice::Trainable | FeatureChoice::RandomFixed) && f.dim == 0 {
            v.push("features.dim must be at least 1".into());
        }
        if f.kind == FeatureChoice::Trainable && f.hidden.iter().any(|&h| h == 0) {
            v.push("features.hidden widths must be positive".into());
        }
        if f.kind == FeatureChoice::LowRankTruth && m.kind != MdpKind::LowRank {
            v.push("features.kind = \"low-rank-truth\" needs mdp.kind = \"low-rank\"".into());
        }
        if f.kind == FeatureChoice::Trainable {
            for e in self.train_config(0).violations() {
                v.push(format!("train.{e}"));
            }
        }
        if self.lspe.iterations == 0 {
            v.push("lspe.iterations must be at least 1".into());
        }
        if !positive(self.lspe.radius) {
            v.push("lspe.radius must be positive".into());
        }
        let b = &self.baselines;
        if b.fqe {
            if b.fqe_iterations == 0 || b.fqe_inner_steps == 0 || b.fqe_batch_size == 0 {
                v.push("baselines.fqe_iterations, fqe_inner_steps and fqe_batch_size must be at least 1".into());
            }
            if !positive(b.fqe_learning_rate) {
                v.push("baselines.fqe_learning_rate must be positive".into());
            }
            if f.kind != FeatureChoice::Trainable {
                v.push("baselines.fqe needs features.kind = \"trainable\"".into());
            }
        }
        if b.ablations && f.kind != FeatureChoice::Trainable {
            v.push("baselines.ablations needs features.kind = \"trainable\"".into());
        }
        if self.eval.lbc_probes < 2 * f.dim.max(1) && f.kind != FeatureChoice::OneHot {
            v.push("eval.lbc_probes must be at least twice the feature dimension".into());
        }
        if !positive(self.eval.certify_tolerance) {
            v.push("eval.certify_tolerance must be positive".into());
        }
        if self.eval.ranking && f.kind != FeatureChoice::Trainable {
            v.push("eval.ranking needs features.kind = \"trainable\"".into());
        }
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            v.push("seeds must be distinct".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Validation(v))
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form, with
    /// `output_dir` cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("configuration serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    /// The core training configuration for run seed `seed`.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            learning_rate: t.learning_rate,
            inner_learning_rate: t.inner_learning_rate,
            ema_tau: t.ema_tau,
            design_weight: t.design_weight,
            design_kind: match t.design_kind {
                DesignChoice::None => DesignKind::None,
                DesignChoice::Logdet => DesignKind::LogDet,
                DesignChoice::MinEig => DesignKind::MinEig,
            },
            regime: match t.regime {
                RegimeChoice::Deterministic => Regime::Deterministic,
                RegimeChoice::Stochastic => Regime::Stochastic,
            },
            batch_size: t.batch_size,
            seed,
            refit_every: t.refit_every,
            use_target: t.use_target,
            bc_weight: t.bc_weight,
            bounds: if t.enforce_theta {
                ThetaBounds { rho_bound: self.lspe.radius, m_spectral_bound: t.m_spectral_bound, enforce: true }
            } else {
                ThetaBounds::unconstrained()
            },
            optimizer: match t.optimizer {
                OptimizerChoice::Adam => OptimizerKind::ADAM,
                OptimizerChoice::Sgd => OptimizerKind::Sgd,
            },
            g_steps: t.g_steps,
        }
    }
}
