//! Exact Bellman completeness check of a saved feature checkpoint.
//!
//! The witness is fit in closed form under `ν` and the true kernel with no
//! bounds. Its implied radius `W = ‖ρ‖ / (1 − ‖M‖₂)` sets the ball for the
//! linear BC error, and the features pass when `‖M‖₂ < 1` and
//! `ε ≤ tol · (1 + W)`.

use std::path::Path;

use bcrl_core::bcrl::{fit_witness, ideal_bc_loss, ThetaBounds, WitnessSource};
use bcrl_core::linalg::spectral_norm;
use bcrl_core::net::NetFeatures;
use bcrl_core::oracles::exact_lbc_error;
use bcrl_core::{FeatureMap, FiniteMdp, Policy, StateActionDist};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiment::{build_mdp, build_policy, build_sampling, feature_architecture};
use crate::files::load_checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub seed: u64,
    pub method: String,
    #[serde(flatten)]
    pub check: CompletenessCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessCheck {
    /// Ideal BC loss at the exact witness.
    pub bc_loss: f64,
    pub m_spectral_norm: f64,
    /// `None` when `‖M‖₂ ≥ 1`.
    pub implied_radius: Option<f64>,
    pub lbc_error: Option<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Certifies a feature map against exact oracles.
pub fn certify_features(
    mdp: &FiniteMdp,
    nu: &StateActionDist,
    pi_e: &Policy,
    phi: &dyn FeatureMap,
    tolerance: f64,
    probes: usize,
) -> Result<CompletenessCheck> {
    let fit = fit_witness(phi, WitnessSource::Exact { mdp, nu }, pi_e, None, ThetaBounds::unconstrained())?;
    let bc = ideal_bc_loss(phi, &fit.witness, mdp, nu, pi_e, phi)?;
    let m_norm = spectral_norm(&fit.witness.m);
    let w = fit.witness.implied_radius();
    if !w.is_finite() {
        return Ok(CompletenessCheck {
            bc_loss: bc,
            m_spectral_norm: m_norm,
            implied_radius: None,
            lbc_error: None,
            tolerance,
            passed: false,
        });
    }
    // A zero witness still needs a ball to probe.
    let radius = w.max(f64::EPSILON);
    let eps = exact_lbc_error(mdp, nu, phi, pi_e, radius, probes.max(2 * phi.dim()))?.epsilon;
    Ok(CompletenessCheck {
        bc_loss: bc,
        m_spectral_norm: m_norm,
        implied_radius: Some(w),
        lbc_error: Some(eps),
        tolerance,
        passed: eps <= tolerance * (1.0 + w),
    })
}

/// Certifies `<run_dir>/seed-<seed>/<method>.ckpt` for the configuration
/// that produced it.
pub fn certify_checkpoint(cfg: &ExperimentConfig, run_dir: &Path, seed: u64, method: &str) -> Result<Certificate> {
    cfg.validate()?;
    let (mdp, _) = build_mdp(cfg, seed)?;
    let pi_e = build_policy(cfg, &mdp, seed)?;
    let nu = build_sampling(cfg, &mdp, &pi_e, seed)?;
    let path = run_dir.join(format!("seed-{seed}")).join(format!("{method}.ckpt"));
    if !path.is_file() {
        return Err(HarnessError::MissingInputs(vec![path.display().to_string()]));
    }
    let net = load_checkpoint(&path, &feature_architecture(cfg, &mdp)?)?;
    let phi = NetFeatures::new(net, mdp.num_states(), mdp.num_actions())?;
    let check = certify_features(&mdp, &nu, &pi_e, &phi, cfg.eval.certify_tolerance, cfg.eval.lbc_probes)?;
    Ok(Certificate { seed, method: method.into(), check })
}
