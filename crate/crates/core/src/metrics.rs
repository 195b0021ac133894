//! OPE error reports, rank correlation and error profiles away from the
//! initial distribution.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mdp::{FiniteMdp, Policy};
use crate::oracles::{exact_value, state_marginal_at, ValueFunction};

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of average ranks. `None` when
/// either argument is constant.
pub fn spearman_rank_correlation(estimates: &[f64], truths: &[f64]) -> Result<Option<f64>> {
    if estimates.len() != truths.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} values", truths.len()),
            found: format!("{}", estimates.len()),
        });
    }
    if estimates.len() < 2 {
        return Err(Error::InvalidDimension(String::from("rank correlation needs at least two values")));
    }
    if estimates.iter().chain(truths).any(|v| v.is_nan()) {
        return Err(Error::InvalidEntry(String::from("NaN in rank correlation input")));
    }
    Ok(pearson(&average_ranks(estimates), &average_ranks(truths)))
}

/// Error of an estimate started from the step-`h` state marginal of `π_e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceError {
    pub slice: usize,
    pub estimate: f64,
    pub truth: f64,
    pub abs_error: f64,
}

/// For each `h`, `|E_{p_h}[Q̂(s, π_e)] − E_{p_h}[V^{π_e}(s)]|` with `p_h` the
/// exact step-`h` state marginal of `π_e` from the MDP's initial
/// distribution.
pub fn beyond_d0_profile(q_hat: &ValueFunction, mdp: &FiniteMdp, pi_e: &Policy, slices: &[usize]) -> Result<Vec<SliceError>> {
    let truth = exact_value(mdp, pi_e)?;
    slices
        .iter()
        .map(|&h| {
            let p = state_marginal_at(mdp, pi_e, mdp.initial_dist(), h)?;
            let estimate = q_hat.value_at(pi_e, &p);
            let t = truth.value_at(pi_e, &p);
            Ok(SliceError { slice: h, estimate, truth: t, abs_error: (estimate - t).abs() })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceSummary {
    pub lambda_min: f64,
    pub logdet: f64,
    pub condition_number: f64,
}

/// Outcome of one method on one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub config_hash: String,
    pub seed: u64,
    pub ope_estimate: f64,
    pub exact_value: f64,
    pub spearman: Option<f64>,
    pub beyond_d0: Vec<SliceError>,
    pub covariance: Option<CovarianceSummary>,
}

impl EvalReport {
    pub fn signed_error(&self) -> f64 {
        self.ope_estimate - self.exact_value
    }

    pub fn abs_error(&self) -> f64 {
        self.signed_error().abs()
    }
}

/// Aggregate of one method across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub config_hash: String,
    /// `(seed, abs_error)` in input order.
    pub per_seed: Vec<(u64, f64)>,
    pub rmse: f64,
    pub median_abs_error: f64,
    pub iqr_abs_error: f64,
    pub median_spearman: Option<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = libm::ceil(pos) as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

/// Groups reports by method (in name order). All reports must come from
/// one configuration.
pub fn aggregate(reports: &[EvalReport]) -> Result<Vec<SummaryRow>> {
    let first = reports.first().ok_or(Error::Empty)?;
    if let Some(other) = reports.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(Error::MixedConfig(first.config_hash.clone(), other.config_hash.clone()));
    }
    let mut groups: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.method.as_str()).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|(method, rs)| {
            let per_seed: Vec<(u64, f64)> = rs.iter().map(|r| (r.seed, r.abs_error())).collect();
            let mse = rs.iter().map(|r| r.signed_error() * r.signed_error()).sum::<f64>() / rs.len() as f64;
            let mut errs: Vec<f64> = per_seed.iter().map(|p| p.1).collect();
            errs.sort_by(f64::total_cmp);
            let spearman: Vec<f64> = rs.iter().filter_map(|r| r.spearman).collect();
            SummaryRow {
                method: String::from(method),
                config_hash: first.config_hash.clone(),
                per_seed,
                rmse: libm::sqrt(mse),
                median_abs_error: quantile_sorted(&errs, 0.5),
                iqr_abs_error: quantile_sorted(&errs, 0.75) - quantile_sorted(&errs, 0.25),
                median_spearman: if spearman.is_empty() { None } else { Some(median(&spearman)) },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::make_random_tabular_mdp;
    use alloc::vec;

    #[test]
    fn spearman_exact_cases() {
        assert_eq!(spearman_rank_correlation(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), Some(1.0));
        assert_eq!(spearman_rank_correlation(&[3.0, 2.0, 1.0], &[4.0, 5.0, 6.0]).unwrap(), Some(-1.0));
        assert_eq!(spearman_rank_correlation(&[3.0, 1.0, 2.0], &[30.0, 10.0, 20.0]).unwrap(), Some(1.0));
        assert_eq!(spearman_rank_correlation(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), None);
        assert!(spearman_rank_correlation(&[1.0], &[1.0, 2.0]).is_err());
        assert!(spearman_rank_correlation(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
    }

    fn report(method: &str, hash: &str, seed: u64, est: f64, truth: f64) -> EvalReport {
        EvalReport {
            method: method.into(),
            config_hash: hash.into(),
            seed,
            ope_estimate: est,
            exact_value: truth,
            spearman: None,
            beyond_d0: Vec::new(),
            covariance: None,
        }
    }

    #[test]
    fn aggregation_cases() {
        assert_eq!(aggregate(&[]).unwrap_err(), Error::Empty);
        let one = aggregate(&[report("lspe", "h", 1, 2.5, 2.0)]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].rmse, 0.5);
        assert_eq!(one[0].median_abs_error, 0.5);
        assert_eq!(one[0].iqr_abs_error, 0.0);
        let two = aggregate(&[report("m", "h", 1, 1.0, 0.0), report("m", "h", 2, -1.0, 0.0)]).unwrap();
        assert_eq!(two[0].rmse, 1.0);
        assert!(matches!(
            aggregate(&[report("m", "a", 1, 0.0, 0.0), report("m", "b", 1, 0.0, 0.0)]),
            Err(Error::MixedConfig(_, _))
        ));
    }

    #[test]
    fn slice_zero_profile_is_the_headline_error() {
        let mdp = make_random_tabular_mdp(1, 5, 2, 0.9, true).unwrap();
        let pi = Policy::random(1, 5, 2).unwrap();
        let q = ValueFunction::new(5, 2, vec![1.0; 10]).unwrap();
        let profile = beyond_d0_profile(&q, &mdp, &pi, &[0, 3]).unwrap();
        let truth = exact_value(&mdp, &pi).unwrap().value_at(&pi, mdp.initial_dist());
        assert_eq!(profile[0].abs_error, (q.value_at(&pi, mdp.initial_dist()) - truth).abs());
        assert_eq!(profile[1].slice, 3);
    }
}
