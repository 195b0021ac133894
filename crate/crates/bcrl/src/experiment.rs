//! End-to-end runs: build the MDP and sampling distribution, sample `2N`
//! transitions, split them, learn features on the first half, run LSPE on
//! the second half and score everything against the exact oracles.
//!
//! # Output layout
//!
//! ```text
//! <out>/<config hash>/
//!   config.toml       normalized configuration
//!   manifest.json     hash, seeds, version, files, creation time
//!   report.json       one record per (method, seed)
//!   reports.csv       the same records, flattened
//!   summary.csv       per-method RMSE, median and IQR of |error|
//!   seed-<k>/
//!     mdp.toml, dataset.bin, dataset.bin.meta
//!     split.json      indices of the two halves
//!     trace.csv       training traces with a method column
//!     <method>.ckpt   learned feature networks
//! <out>/quarantine/<config hash>-<unix time>/
//!   partial outputs of an aborted run and error.txt
//! ```
//!
//! Everything except `manifest.json` is a pure function of the
//! configuration, so re-running a configuration reproduces it byte for
//! byte.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use bcrl_core::baselines::{ablation_config, fqe_run, Ablation, FqeConfig, QModel};
use bcrl_core::bcrl::{train, Aborted, TrainConfig, TrainOutcome};
use bcrl_core::features::{covariance, CovarianceSource, FeatureMap, FeatureTable};
use bcrl_core::lspe::{lspe_run, LspeConfig};
use bcrl_core::mdp::{
    make_low_rank_mdp, make_random_tabular_mdp, mixture_dist, sample_offline_dataset, DatasetSplit, FiniteMdp,
    OfflineDataset, Policy, StateActionDist,
};
use bcrl_core::metrics::{aggregate, beyond_d0_profile, spearman_rank_correlation, CovarianceSummary, EvalReport, SliceError};
use bcrl_core::net::{Architecture, TrainableNet};
use bcrl_core::oracles::{exact_lbc_error, exact_value, occupancy, ValueFunction};
use bcrl_core::rng::stream;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FeatureChoice, MdpKind, PolicyKind, SamplingKind};
use crate::error::{HarnessError, Result};
use crate::files::{load_mdp, save_checkpoint, save_dataset, save_mdp, write_atomic};

/// Inverse temperatures of the graded policies, worst to best.
pub const GRADED_INVERSE_TEMPERATURES: [f64; 4] = [-8.0, -2.0, 2.0, 8.0];

/// Everything derived from the configuration for one run seed.
#[derive(Debug, Clone)]
pub struct SeedInputs {
    pub seed: u64,
    pub mdp: FiniteMdp,
    /// The generating features of a low-rank MDP.
    pub truth_features: Option<FeatureTable>,
    pub pi_e: Policy,
    pub nu: StateActionDist,
    pub data: OfflineDataset,
    pub split: DatasetSplit,
}

pub fn build_mdp(cfg: &ExperimentConfig, seed: u64) -> Result<(FiniteMdp, Option<FeatureTable>)> {
    let m = &cfg.mdp;
    let s = m.seed.wrapping_add(seed);
    Ok(match m.kind {
        MdpKind::LowRank => {
            let lr = make_low_rank_mdp(s, m.states, m.actions, m.dim, m.gamma)?;
            (lr.mdp, Some(lr.features))
        }
        MdpKind::Tabular => (make_random_tabular_mdp(s, m.states, m.actions, m.gamma, m.stochastic)?, None),
        MdpKind::File => (load_mdp(m.path.as_deref().expect("validated"))?, None),
    })
}

pub fn build_policy(cfg: &ExperimentConfig, mdp: &FiniteMdp, seed: u64) -> Result<Policy> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let p = &cfg.policy;
    Ok(match p.kind {
        PolicyKind::Random => Policy::random(p.seed.wrapping_add(seed), ns, na)?,
        PolicyKind::Uniform => Policy::uniform(ns, na)?,
        PolicyKind::Softmax => {
            let q = exact_value(mdp, &Policy::uniform(ns, na)?)?;
            Policy::softmax(ns, na, q.values(), p.inverse_temperature)?
        }
    })
}

pub fn build_sampling(cfg: &ExperimentConfig, mdp: &FiniteMdp, pi_e: &Policy, seed: u64) -> Result<StateActionDist> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let s = &cfg.sampling;
    let behavior = || -> Result<StateActionDist> {
        let pi_b = Policy::random(s.behavior_seed.wrapping_add(seed), ns, na)?;
        Ok(occupancy(mdp, &pi_b, mdp.initial_dist())?)
    };
    Ok(match s.kind {
        SamplingKind::Uniform => StateActionDist::uniform(ns, na)?,
        SamplingKind::Behavior => behavior()?,
        SamplingKind::Mixture => mixture_dist(&occupancy(mdp, pi_e, mdp.initial_dist())?, &behavior()?, s.mixture_weight)?,
        SamplingKind::Explicit => {
            let w = s.weights.as_ref().expect("validated");
            if w.len() != ns || w.iter().any(|r| r.len() != na) {
                return Err(HarnessError::Validation(vec![format!("sampling.weights must be {ns}x{na}")]));
            }
            StateActionDist::from_unnormalized(ns, na, w.iter().flatten().copied().collect())?
        }
    })
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedInputs> {
    let (mdp, truth_features) = build_mdp(cfg, seed)?;
    let pi_e = build_policy(cfg, &mdp, seed)?;
    let nu = build_sampling(cfg, &mdp, &pi_e, seed)?;
    let data = sample_offline_dataset(&mdp, &nu, 2 * cfg.data.n, seed)?;
    let split = data.split_in_half(seed);
    check_split(&split)?;
    Ok(SeedInputs { seed, mdp, truth_features, pi_e, nu, data, split })
}

/// The two halves must not share a sample.
pub fn check_split(split: &DatasetSplit) -> Result<()> {
    let first: BTreeSet<usize> = split.first_indices.iter().copied().collect();
    if first.len() != split.first_indices.len() || split.second_indices.iter().any(|i| first.contains(i)) {
        return Err(HarnessError::Numeric("dataset halves overlap".into()));
    }
    Ok(())
}

/// Softmax policies over `Q^{π_e}` at [`GRADED_INVERSE_TEMPERATURES`].
pub fn graded_policies(mdp: &FiniteMdp, pi_e: &Policy) -> Result<Vec<Policy>> {
    let q = exact_value(mdp, pi_e)?;
    GRADED_INVERSE_TEMPERATURES
        .iter()
        .map(|&b| Ok(Policy::softmax(mdp.num_states(), mdp.num_actions(), q.values(), b)?))
        .collect()
}

pub fn feature_architecture(cfg: &ExperimentConfig, mdp: &FiniteMdp) -> Result<Architecture> {
    Ok(Architecture::feature_net(mdp.num_states(), mdp.num_actions(), cfg.features.hidden.clone(), cfg.features.dim)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub slice: usize,
    pub estimate: f64,
    pub truth: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceRecord {
    /// Spectrum of `Σ(φ)` under `ν`, descending.
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    /// `λ_min` of `Σ̂(φ)` on the training half.
    pub empirical_lambda_min: f64,
    /// `None` when singular.
    pub condition_number: Option<f64>,
    pub logdet: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub inverse_temperatures: Vec<f64>,
    pub estimates: Vec<f64>,
    pub truths: Vec<f64>,
    pub spearman: Option<f64>,
}

/// Outcome of one method on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: String,
    pub seed: u64,
    pub ope_estimate: f64,
    pub exact_value: f64,
    pub abs_error: f64,
    /// Estimate at `d0` after each iteration, starting from the zero
    /// function.
    pub iterates: Vec<f64>,
    pub slices: Vec<SliceRecord>,
    /// Lower bound on the linear BC error at radius `lspe.radius`.
    pub lbc_error: Option<f64>,
    pub covariance: Option<CovarianceRecord>,
    pub final_bc_loss: Option<f64>,
    pub ranking: Option<RankingRecord>,
}

impl MethodRecord {
    pub fn to_eval_report(&self, config_hash: &str) -> EvalReport {
        EvalReport {
            method: self.method.clone(),
            config_hash: config_hash.into(),
            seed: self.seed,
            ope_estimate: self.ope_estimate,
            exact_value: self.exact_value,
            spearman: self.ranking.as_ref().and_then(|r| r.spearman),
            beyond_d0: self
                .slices
                .iter()
                .map(|s| SliceError { slice: s.slice, estimate: s.estimate, truth: s.truth, abs_error: s.abs_error })
                .collect(),
            covariance: self.covariance.as_ref().map(|c| CovarianceSummary {
                lambda_min: c.lambda_min,
                logdet: c.logdet.unwrap_or(f64::NEG_INFINITY),
                condition_number: c.condition_number.unwrap_or(f64::INFINITY),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub method: String,
    pub config_hash: String,
    pub runs: usize,
    pub rmse: f64,
    pub median_abs_error: f64,
    pub iqr_abs_error: f64,
    pub median_spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub records: Vec<MethodRecord>,
    pub summary: Vec<SummaryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub crate_version: String,
    pub seeds: Vec<u64>,
    pub stage: String,
    pub created_unix_seconds: u64,
    pub files: Vec<String>,
}

/// One row of `trace.csv`. Columns that do not apply to a method are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub method: String,
    pub step: usize,
    pub loss: f64,
    pub correction: Option<f64>,
    pub penalty: Option<f64>,
    pub lambda_min: Option<f64>,
    pub logdet: Option<f64>,
    pub refit: Option<bool>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Scores a fixed feature table: LSPE on `eval_data`, then oracle checks.
pub fn evaluate_features(
    cfg: &ExperimentConfig,
    inputs: &SeedInputs,
    method: &str,
    phi: &FeatureTable,
    pi: &Policy,
) -> Result<MethodRecord> {
    let mdp = &inputs.mdp;
    let lspe = LspeConfig { iterations: cfg.lspe.iterations, radius: cfg.lspe.radius, gamma: mdp.gamma() };
    let result = lspe_run(phi, &inputs.split.second, pi, lspe)?;
    let d0 = mdp.initial_dist();
    let iterates: Vec<f64> = (0..result.thetas.len()).map(|k| result.q_function_at(k, phi).value_at(pi, d0)).collect();
    let q_hat = result.q_function(phi);
    let population = covariance(phi, CovarianceSource::Distribution(&inputs.nu))?;
    let empirical = covariance(phi, CovarianceSource::Dataset(&inputs.split.first))?;
    let probes = cfg.eval.lbc_probes.max(2 * phi.dim());
    let lbc = exact_lbc_error(mdp, &inputs.nu, phi, pi, cfg.lspe.radius, probes)?;
    let mut rec = score(cfg, inputs, method, &q_hat, pi, iterates)?;
    rec.lbc_error = Some(lbc.epsilon);
    rec.covariance = Some(CovarianceRecord {
        eigenvalues: population.eigenvalues.clone(),
        lambda_min: population.lambda_min,
        empirical_lambda_min: empirical.lambda_min,
        condition_number: finite(population.condition_number),
        logdet: finite(population.logdet),
    });
    Ok(rec)
}

fn score(
    cfg: &ExperimentConfig,
    inputs: &SeedInputs,
    method: &str,
    q_hat: &ValueFunction,
    pi: &Policy,
    iterates: Vec<f64>,
) -> Result<MethodRecord> {
    let mdp = &inputs.mdp;
    let truth = exact_value(mdp, pi)?.value_at(pi, mdp.initial_dist());
    let estimate = q_hat.value_at(pi, mdp.initial_dist());
    let slices = beyond_d0_profile(q_hat, mdp, pi, &cfg.eval.slices)?
        .into_iter()
        .map(|s| SliceRecord { slice: s.slice, estimate: s.estimate, truth: s.truth, abs_error: s.abs_error })
        .collect();
    Ok(MethodRecord {
        method: method.into(),
        seed: inputs.seed,
        ope_estimate: estimate,
        exact_value: truth,
        abs_error: (estimate - truth).abs(),
        iterates,
        slices,
        lbc_error: None,
        covariance: None,
        final_bc_loss: None,
        ranking: None,
    })
}

/// A training that stopped early, with the rows it produced.
struct FailedTraining {
    error: HarnessError,
    trace: Vec<TraceRecord>,
}

fn bcrl_trace(method: &str, outcome_trace: &[bcrl_core::bcrl::TraceRow]) -> Vec<TraceRecord> {
    outcome_trace
        .iter()
        .map(|r| TraceRecord {
            method: method.into(),
            step: r.step,
            loss: r.bc_loss,
            correction: Some(r.correction),
            penalty: Some(r.penalty),
            lambda_min: Some(r.lambda_min),
            logdet: finite(r.logdet),
            refit: Some(r.refit),
        })
        .collect()
}

fn core_abort(e: bcrl_core::Error) -> HarnessError {
    match e {
        bcrl_core::Error::NonFinite { .. } => HarnessError::Numeric(e.to_string()),
        other => HarnessError::Core(other),
    }
}

fn train_bcrl(
    cfg: &ExperimentConfig,
    inputs: &SeedInputs,
    method: &str,
    train_cfg: &TrainConfig,
    pi: &Policy,
) -> std::result::Result<(TrainOutcome, Vec<TraceRecord>), FailedTraining> {
    let arch = feature_architecture(cfg, &inputs.mdp).map_err(|error| FailedTraining { error, trace: Vec::new() })?;
    let net = TrainableNet::new(arch, inputs.seed, stream::NET_INIT);
    match train(net, train_cfg, &inputs.split.first, pi, inputs.mdp.gamma()) {
        Ok(outcome) => {
            let trace = bcrl_trace(method, &outcome.trace);
            Ok((outcome, trace))
        }
        Err(Aborted { error, trace }) => Err(FailedTraining { error: core_abort(error), trace: bcrl_trace(method, &trace) }),
    }
}

/// Per-seed products before they are written out.
struct SeedProducts {
    records: Vec<MethodRecord>,
    trace: Vec<TraceRecord>,
    checkpoints: Vec<(String, TrainableNet)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// MDP, dataset and split only.
    Generate,
    /// Also learn and checkpoint the features.
    Train,
    /// The full pipeline.
    Evaluate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "gen",
            Stage::Train => "train",
            Stage::Evaluate => "eval",
        }
    }
}

fn run_seed(cfg: &ExperimentConfig, inputs: &SeedInputs, stage: Stage) -> std::result::Result<SeedProducts, FailedTraining> {
    let plain = |error: HarnessError| FailedTraining { error, trace: Vec::new() };
    let mut out = SeedProducts { records: Vec::new(), trace: Vec::new(), checkpoints: Vec::new() };
    if stage == Stage::Generate {
        return Ok(out);
    }
    let evaluate = stage == Stage::Evaluate;
    let fixed = match cfg.features.kind {
        FeatureChoice::Trainable => None,
        FeatureChoice::OneHot => Some(("one-hot", FeatureTable::one_hot(inputs.mdp.num_states(), inputs.mdp.num_actions()))),
        FeatureChoice::RandomFixed => Some((
            "random-fixed",
            FeatureTable::random_fixed(inputs.seed, inputs.mdp.num_states(), inputs.mdp.num_actions(), cfg.features.dim),
        )),
        FeatureChoice::LowRankTruth => Some(("low-rank-truth", Ok(inputs.truth_features.clone().expect("validated")))),
    };
    if let Some((name, table)) = fixed {
        if evaluate {
            let table = table.map_err(|e| plain(e.into()))?;
            out.records.push(evaluate_features(cfg, inputs, name, &table, &inputs.pi_e).map_err(plain)?);
        }
        return Ok(out);
    }

    let reference = cfg.train_config(inputs.seed);
    let mut variants = vec![("bcrl".to_string(), reference.clone())];
    if cfg.baselines.ablations {
        for (name, kind) in [("bcrl-no-design", Ablation::NoDesign), ("bcrl-design-only", Ablation::DesignOnly)] {
            variants.push((name.into(), ablation_config(&reference, kind).map_err(|e| plain(e.into()))?));
        }
    }
    for (name, train_cfg) in &variants {
        let (outcome, trace) = match train_bcrl(cfg, inputs, name, train_cfg, &inputs.pi_e) {
            Ok(r) => r,
            Err(mut failed) => {
                out.trace.append(&mut failed.trace);
                return Err(FailedTraining { error: failed.error, trace: out.trace });
            }
        };
        out.trace.extend(trace);
        if evaluate {
            let phi = outcome.features.tabulate();
            let mut rec = evaluate_features(cfg, inputs, name, &phi, &inputs.pi_e).map_err(plain)?;
            rec.final_bc_loss = outcome.trace.last().map(|r| r.bc_loss);
            if name == "bcrl" && cfg.eval.ranking {
                rec.ranking = Some(rank_graded(cfg, inputs, &reference).map_err(plain)?);
            }
            out.records.push(rec);
        }
        out.checkpoints.push((name.clone(), outcome.features.net));
    }

    if cfg.baselines.fqe {
        let b = &cfg.baselines;
        let arch = feature_architecture(cfg, &inputs.mdp).map_err(plain)?;
        let model = QModel::with_net(TrainableNet::new(arch, inputs.seed, stream::NET_INIT), inputs.mdp.num_states(), inputs.mdp.num_actions())
            .map_err(|e| plain(e.into()))?;
        let fqe_cfg = FqeConfig {
            iterations: b.fqe_iterations,
            inner_steps: b.fqe_inner_steps,
            learning_rate: b.fqe_learning_rate,
            batch_size: b.fqe_batch_size,
            seed: inputs.seed,
            freeze_features: false,
            gamma: inputs.mdp.gamma(),
        };
        let to_rows = |rows: &[bcrl_core::baselines::FqeTraceRow]| -> Vec<TraceRecord> {
            rows.iter()
                .enumerate()
                .map(|(i, r)| TraceRecord {
                    method: "fqe".into(),
                    step: i + 1,
                    loss: r.loss,
                    correction: None,
                    penalty: None,
                    lambda_min: None,
                    logdet: None,
                    refit: None,
                })
                .collect()
        };
        // Same half BCRL learns from, so the two see identical data.
        match fqe_run(model, &inputs.split.first, &inputs.pi_e, &fqe_cfg) {
            Ok(res) => {
                out.trace.extend(to_rows(&res.trace));
                if evaluate {
                    let d0 = inputs.mdp.initial_dist();
                    let iterates = res.q_iterates.iter().map(|q| q.value_at(&inputs.pi_e, d0)).collect();
                    out.records.push(score(cfg, inputs, "fqe", res.final_q(), &inputs.pi_e, iterates).map_err(plain)?);
                }
            }
            Err(Aborted { error, trace }) => {
                out.trace.extend(to_rows(&trace));
                return Err(FailedTraining { error: core_abort(error), trace: out.trace });
            }
        }
    }
    Ok(out)
}

/// Trains features for each graded policy and ranks the LSPE estimates.
pub fn rank_graded(cfg: &ExperimentConfig, inputs: &SeedInputs, reference: &TrainConfig) -> Result<RankingRecord> {
    let mut estimates = Vec::new();
    let mut truths = Vec::new();
    for pi in graded_policies(&inputs.mdp, &inputs.pi_e)? {
        let (outcome, _) = train_bcrl(cfg, inputs, "ranking", reference, &pi).map_err(|f| f.error)?;
        let rec = evaluate_features(cfg, inputs, "ranking", &outcome.features.tabulate(), &pi)?;
        estimates.push(rec.ope_estimate);
        truths.push(rec.exact_value);
    }
    let spearman = spearman_rank_correlation(&estimates, &truths)?;
    Ok(RankingRecord { inverse_temperatures: GRADED_INVERSE_TEMPERATURES.to_vec(), estimates, truths, spearman })
}

/// Order-preserving map over `items` on up to `jobs` threads.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("threads joined").into_iter().map(|r| r.expect("every slot filled")).collect()
}

fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).map_err(|e| HarnessError::Numeric(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Numeric(e.to_string()))?;
    }
    w.into_inner().map_err(|e| HarnessError::Numeric(e.to_string()))
}

pub const TRACE_COLUMNS: [&str; 8] = ["method", "step", "loss", "correction", "penalty", "lambda_min", "logdet", "refit"];

#[derive(Serialize)]
struct ReportRow<'a> {
    method: &'a str,
    seed: u64,
    ope_estimate: f64,
    exact_value: f64,
    abs_error: f64,
    lbc_error: Option<f64>,
    lambda_min: Option<f64>,
    empirical_lambda_min: Option<f64>,
    spearman: Option<f64>,
}

#[derive(Serialize)]
struct SplitLog<'a> {
    first_indices: &'a [usize],
    second_indices: &'a [usize],
}

/// The finished directory of a run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub report: RunReport,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn relative_files(root: &Path) -> Vec<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        let mut entries: Vec<_> = entries.flatten().map(|e| e.path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else if let Ok(rel) = p.strip_prefix(root) {
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

/// Runs `stage` for every seed into `<out>/<hash>` (see the module docs).
///
/// The configuration is validated before anything is computed or written.
/// On failure the partial directory is moved to `<out>/quarantine/`.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path, stage: Stage, jobs: usize) -> Result<RunOutput> {
    cfg.validate()?;
    let hash = cfg.hash();
    let final_dir = out_root.join(&hash);
    let partial = out_root.join(format!(".{hash}.partial-{}", std::process::id()));
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| HarnessError::io(&partial, e))?;
    }
    fs::create_dir_all(&partial).map_err(|e| HarnessError::io(&partial, e))?;
    match fill_run_dir(cfg, &hash, &partial, stage, jobs) {
        Ok(report) => {
            write_manifest(cfg, &hash, &partial, stage)?;
            if final_dir.exists() {
                fs::remove_dir_all(&final_dir).map_err(|e| HarnessError::io(&final_dir, e))?;
            }
            fs::rename(&partial, &final_dir).map_err(|e| HarnessError::io(&final_dir, e))?;
            Ok(RunOutput { dir: final_dir, report })
        }
        Err(error) => {
            let q = out_root.join("quarantine").join(format!("{hash}-{}", now_unix()));
            let moved = fs::create_dir_all(out_root.join("quarantine")).and_then(|_| fs::rename(&partial, &q));
            if moved.is_ok() {
                let _ = fs::write(q.join("error.txt"), format!("{error}\n"));
            }
            Err(error)
        }
    }
}

fn write_manifest(cfg: &ExperimentConfig, hash: &str, dir: &Path, stage: Stage) -> Result<()> {
    let manifest = Manifest {
        config_hash: hash.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        seeds: cfg.seeds.clone(),
        stage: stage.as_str().into(),
        created_unix_seconds: now_unix(),
        files: relative_files(dir),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), json.as_bytes())
}

fn fill_run_dir(cfg: &ExperimentConfig, hash: &str, dir: &Path, stage: Stage, jobs: usize) -> Result<RunReport> {
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let results = parallel_map(&cfg.seeds, jobs, |&seed| -> Result<Vec<MethodRecord>> {
        let seed_dir = dir.join(format!("seed-{seed}"));
        let inputs = prepare_seed(cfg, seed)?;
        if cfg.eval.save_inputs || stage == Stage::Generate {
            save_mdp(&seed_dir.join("mdp.toml"), &inputs.mdp)?;
            save_dataset(&seed_dir.join("dataset.bin"), &inputs.data, &inputs.mdp)?;
        }
        let split = SplitLog { first_indices: &inputs.split.first_indices, second_indices: &inputs.split.second_indices };
        write_atomic(&seed_dir.join("split.json"), serde_json::to_string(&split).expect("split serializes").as_bytes())?;
        match run_seed(cfg, &inputs, stage) {
            Ok(products) => {
                if stage != Stage::Generate && !products.trace.is_empty() {
                    write_atomic(&seed_dir.join("trace.csv"), &csv_bytes(&products.trace, &TRACE_COLUMNS)?)?;
                }
                for (name, net) in &products.checkpoints {
                    save_checkpoint(&seed_dir.join(format!("{name}.ckpt")), net)?;
                }
                Ok(products.records)
            }
            Err(failed) => {
                write_atomic(&seed_dir.join("trace.csv"), &csv_bytes(&failed.trace, &TRACE_COLUMNS)?)?;
                Err(failed.error)
            }
        }
    });
    let mut records = Vec::new();
    for r in results {
        records.extend(r?);
    }
    let summary = if records.is_empty() {
        Vec::new()
    } else {
        let reports: Vec<EvalReport> = records.iter().map(|r| r.to_eval_report(hash)).collect();
        aggregate(&reports)?
            .into_iter()
            .map(|row| SummaryRecord {
                method: row.method,
                config_hash: row.config_hash,
                runs: row.per_seed.len(),
                rmse: row.rmse,
                median_abs_error: row.median_abs_error,
                iqr_abs_error: row.iqr_abs_error,
                median_spearman: row.median_spearman,
            })
            .collect()
    };
    let report = RunReport { config_hash: hash.into(), records, summary };
    if stage == Stage::Evaluate {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_atomic(&dir.join("report.json"), json.as_bytes())?;
        let rows: Vec<ReportRow> = report
            .records
            .iter()
            .map(|r| ReportRow {
                method: &r.method,
                seed: r.seed,
                ope_estimate: r.ope_estimate,
                exact_value: r.exact_value,
                abs_error: r.abs_error,
                lbc_error: r.lbc_error,
                lambda_min: r.covariance.as_ref().map(|c| c.lambda_min),
                empirical_lambda_min: r.covariance.as_ref().map(|c| c.empirical_lambda_min),
                spearman: r.ranking.as_ref().and_then(|k| k.spearman),
            })
            .collect();
        write_atomic(
            &dir.join("reports.csv"),
            &csv_bytes(&rows, &["method", "seed", "ope_estimate", "exact_value", "abs_error", "lbc_error", "lambda_min", "empirical_lambda_min", "spearman"])?,
        )?;
        write_atomic(
            &dir.join("summary.csv"),
            &csv_bytes(&report.summary, &["method", "config_hash", "runs", "rmse", "median_abs_error", "iqr_abs_error", "median_spearman"])?,
        )?;
    }
    Ok(report)
}

/// The configuration field a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    /// Samples per half, `data.n`.
    N,
    /// LSPE iterations.
    K,
    /// Design weight.
    Lambda,
    /// A single run seed per point.
    Seed,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::N => "n",
            SweepAxis::K => "k",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Seed => "seed",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let integer = || -> Result<u64> {
            if value >= 0.0 && value.fract() == 0.0 && value < 2f64.powi(53) {
                Ok(value as u64)
            } else {
                Err(HarnessError::Validation(vec![format!("sweep over {} needs integer values, got {value}", self.as_str())]))
            }
        };
        match self {
            SweepAxis::N => cfg.data.n = integer()? as usize,
            SweepAxis::K => cfg.lspe.iterations = integer()? as usize,
            SweepAxis::Lambda => cfg.train.design_weight = value,
            SweepAxis::Seed => cfg.seeds = vec![integer()?],
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow<'a> {
    axis: &'a str,
    value: f64,
    config_hash: &'a str,
    method: &'a str,
    seed: u64,
    ope_estimate: f64,
    exact_value: f64,
    abs_error: f64,
}

/// One finished point of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub run: RunOutput,
}

/// Runs the full pipeline once per value and writes
/// `<out>/sweep-<axis>-<base hash>.csv` in long format.
///
/// Every point is validated before the first one runs, and duplicate
/// values are rejected.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], out_root: &Path, jobs: usize) -> Result<Vec<SweepPoint>> {
    let mut problems = Vec::new();
    if values.is_empty() {
        problems.push("a sweep needs at least one value".to_string());
    }
    for (i, v) in values.iter().enumerate() {
        if values[..i].iter().any(|u| u == v) {
            problems.push(format!("duplicate sweep value {v}"));
        }
    }
    let mut configs = Vec::new();
    for &v in values {
        match axis.apply(base, v) {
            Ok(cfg) => match cfg.validate() {
                Ok(()) => configs.push(cfg),
                Err(HarnessError::Validation(list)) => problems.extend(list.into_iter().map(|p| format!("{}={v}: {p}", axis.as_str()))),
                Err(e) => return Err(e),
            },
            Err(HarnessError::Validation(list)) => problems.extend(list),
            Err(e) => return Err(e),
        }
    }
    if !problems.is_empty() {
        return Err(HarnessError::Validation(problems));
    }
    let mut points = Vec::with_capacity(values.len());
    for (cfg, &value) in configs.iter().zip(values) {
        points.push(SweepPoint { value, run: run_experiment(cfg, out_root, Stage::Evaluate, jobs)? });
    }
    let rows: Vec<SweepRow> = points
        .iter()
        .flat_map(|p| {
            p.run.report.records.iter().map(move |r| SweepRow {
                axis: axis.as_str(),
                value: p.value,
                config_hash: &p.run.report.config_hash,
                method: &r.method,
                seed: r.seed,
                ope_estimate: r.ope_estimate,
                exact_value: r.exact_value,
                abs_error: r.abs_error,
            })
        })
        .collect();
    let header = ["axis", "value", "config_hash", "method", "seed", "ope_estimate", "exact_value", "abs_error"];
    write_atomic(&out_root.join(format!("sweep-{}-{}.csv", axis.as_str(), base.hash())), &csv_bytes(&rows, &header)?)?;
    Ok(points)
}
