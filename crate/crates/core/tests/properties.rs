use bcrl_core::bcrl::{ThetaBounds, Witness};
use bcrl_core::linalg::{spectral_norm, BallLeastSquares};
use bcrl_core::mdp::{make_random_tabular_mdp, Policy};
use bcrl_core::metrics::{aggregate, spearman_rank_correlation, EvalReport};
use bcrl_core::oracles::occupancy;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn objective(g: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * g * x)[0] - 2.0 * b.dot(x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spearman_ignores_strictly_monotone_maps(
        xs in prop::collection::vec(-100.0f64..100.0, 2..12),
        ys in prop::collection::vec(-100.0f64..100.0, 12),
        shift in -5.0f64..5.0,
    ) {
        let ys = &ys[..xs.len()];
        let base = spearman_rank_correlation(&xs, ys).unwrap();
        let mapped: Vec<f64> = xs.iter().map(|x| (x / 50.0).exp() + shift).collect();
        let cubed: Vec<f64> = ys.iter().map(|y| y * y * y).collect();
        prop_assert_eq!(spearman_rank_correlation(&mapped, &cubed).unwrap(), base);
        if let Some(r) = base {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn ball_solution_is_feasible_and_beats_feasible_points(
        entries in prop::collection::vec(-1.0f64..1.0, 9),
        b in prop::collection::vec(-3.0f64..3.0, 3),
        radius in 0.01f64..5.0,
        probe in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let a = DMatrix::from_row_slice(3, 3, &entries);
        let g = a.transpose() * &a;
        let b = DVector::from_vec(b);
        let sol = BallLeastSquares::new(&g).solve(&b, radius);
        prop_assert!(sol.theta.norm() <= radius * (1.0 + 1e-9));
        let probe = DVector::from_vec(probe);
        let probe = if probe.norm() > radius { &probe * (radius / probe.norm()) } else { probe };
        prop_assert!(objective(&g, &b, &sol.theta) <= objective(&g, &b, &probe) + 1e-9);
        // An active constraint puts the solution on the sphere.
        if sol.constrained {
            prop_assert!((sol.theta.norm() - radius).abs() <= 1e-6 * radius.max(1.0));
        }
    }

    #[test]
    fn projected_witness_satisfies_theta(
        m in prop::collection::vec(-3.0f64..3.0, 16),
        rho in prop::collection::vec(-10.0f64..10.0, 4),
        rho_bound in 0.1f64..5.0,
        m_bound in 0.0f64..0.99,
    ) {
        let mut w = Witness::zeros(4, ThetaBounds { rho_bound, m_spectral_bound: m_bound, enforce: true });
        w.m = DMatrix::from_row_slice(4, 4, &m);
        w.rho = DVector::from_vec(rho);
        w.project();
        prop_assert!(w.is_feasible());
        prop_assert!(spectral_norm(&w.m) <= m_bound + 1e-9);
        prop_assert!(w.rho.norm() <= rho_bound + 1e-9);
    }

    #[test]
    fn occupancy_is_a_distribution(seed in 0u64..10_000, gamma in 0.0f64..0.99) {
        let mdp = make_random_tabular_mdp(seed, 4, 3, gamma, seed % 2 == 0).unwrap();
        let pi = Policy::random(seed, 4, 3).unwrap();
        let d = occupancy(&mdp, &pi, mdp.initial_dist()).unwrap();
        prop_assert!((d.weights().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(d.weights().iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn rmse_squared_is_mean_squared_error(errors in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let reports: Vec<EvalReport> = errors
            .iter()
            .enumerate()
            .map(|(i, e)| EvalReport {
                method: "m".into(),
                config_hash: "h".into(),
                seed: i as u64,
                ope_estimate: *e,
                exact_value: 0.0,
                spearman: None,
                beyond_d0: Vec::new(),
                covariance: None,
            })
            .collect();
        let row = &aggregate(&reports).unwrap()[0];
        let mse = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
        prop_assert!((row.rmse * row.rmse - mse).abs() <= 1e-12 * mse.max(1.0));
    }
}
