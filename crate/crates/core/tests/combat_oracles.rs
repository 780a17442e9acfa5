use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use clusterharm::combat::{
    combat_fit, eb_fit, fit_feature_model, fit_priors, group_moments, harmonize, priors_from_moments, standardize,
    BatchEffects, CombatOptions, EBPriors, EbOptions, FitOptions, GroupMoments,
};
use clusterharm::data::Dataset;
use clusterharm::numerics::Matrix;
use clusterharm::synth::{generate, SynthConfig};

/// Unbalanced sites with shifted means and scales.
fn messy_dataset(seed: u64, sizes: &[usize], g: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = sizes.iter().sum();
    let mut site_of = Vec::with_capacity(n);
    for (s, &k) in sizes.iter().enumerate() {
        site_of.extend(std::iter::repeat(format!("s{s}")).take(k));
    }
    let shifts: Vec<f64> = (0..sizes.len() * g).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let scales: Vec<f64> = (0..sizes.len() * g).map(|_| rng.gen_range(0.5..2.0)).collect();
    let x = Matrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0));
    let codes: Vec<usize> = site_of.iter().map(|s| s[1..].parse().unwrap()).collect();
    let y = Matrix::from_fn(n, g, |i, f| {
        let lin: f64 = (0..p).map(|k| x[(i, k)] * (k + f + 1) as f64).sum();
        let s = codes[i] * g + f;
        lin + shifts[s] + scales[s] * rng.gen_range(-1.0..1.0)
    });
    Dataset::new(y, x, site_of).unwrap()
}

fn synth(seed: u64) -> Dataset {
    generate(&SynthConfig::new(4, 12, 6, 2, 2).with_seed(seed)).unwrap().0
}

#[test]
fn feature_model_matches_indicator_regression() {
    let ds = messy_dataset(1, &[7, 15, 10], 4, 2);
    let model = fit_feature_model(&ds, &FitOptions::default()).unwrap();
    let (n, p, m) = (ds.n_samples(), 2, 3);
    let design = DMatrix::from_fn(n, p + m, |i, j| {
        if j < p {
            ds.covariates()[(i, j)]
        } else if ds.site_codes()[i] == j - p {
            1.0
        } else {
            0.0
        }
    });
    let pinv = design.clone().pseudo_inverse(1e-14).unwrap();
    let sizes = [7.0, 15.0, 10.0];
    for f in 0..4 {
        let y = DVector::from_vec(ds.features().column(f));
        let coef = &pinv * &y;
        let alpha = (0..m).map(|i| sizes[i] * coef[p + i]).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(model.alpha[f], alpha, epsilon = 1e-8);
        for k in 0..p {
            assert_abs_diff_eq!(model.beta[(k, f)], coef[k], epsilon = 1e-8);
        }
        for i in 0..m {
            assert_abs_diff_eq!(model.gamma_hat[(i, f)], coef[p + i] - alpha, epsilon = 1e-8);
        }
        let resid = &y - &design * &coef;
        assert_abs_diff_eq!(model.sigma[f], (resid.norm_squared() / n as f64).sqrt(), epsilon = 1e-8);
    }
}

#[test]
fn pooled_standardized_data_has_zero_mean() {
    let ds = messy_dataset(2, &[5, 9, 21, 4], 3, 1);
    let model = fit_feature_model(&ds, &FitOptions::default()).unwrap();
    let z = standardize(&ds, &model).unwrap();
    for f in 0..3 {
        let mean: f64 = z.column(f).iter().sum::<f64>() / z.nrows() as f64;
        assert!(mean.abs() < 1e-10, "feature {f}: {mean}");
    }
}

fn moments_with_delta(row: Vec<f64>) -> GroupMoments {
    let g = row.len();
    GroupMoments {
        gamma_hat: Matrix::from_vec(1, g, vec![0.5, -0.5]).unwrap(),
        delta_sq_hat: Matrix::from_vec(1, g, row).unwrap(),
        centered_ss: Matrix::zeros(1, g),
        sizes: vec![10],
    }
}

#[test]
fn inverse_gamma_priors_match_moments() {
    let h = 1.0 / 2f64.sqrt();
    let priors = priors_from_moments(&moments_with_delta(vec![2.0 - h, 2.0 + h])).unwrap();
    assert_abs_diff_eq!(priors.lambda_bar[0], 6.0, epsilon = 1e-12);
    assert_abs_diff_eq!(priors.theta_bar[0], 10.0, epsilon = 1e-12);
    // γ̄ and τ̄² from the two-point γ̂ row {0.5, -0.5}
    assert_abs_diff_eq!(priors.gamma_bar[0], 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(priors.tau_sq_bar[0], 0.5, epsilon = 1e-15);
    assert!(!priors.degenerate[0]);

    // δ² = 1/Gamma(λ, scale 1/θ) should reproduce mean 2 and variance 1.
    let gamma = Gamma::new(6.0, 1.0 / 10.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws: Vec<f64> = (0..1_000_000).map(|_| 1.0 / gamma.sample(&mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    assert!((mean - 2.0).abs() < 0.05 * 2.0, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "variance {var}");
}

#[test]
fn constant_delta_falls_back() {
    let priors = priors_from_moments(&moments_with_delta(vec![1.5, 1.5])).unwrap();
    assert!(priors.degenerate[0]);
    assert_abs_diff_eq!(priors.lambda_bar[0], 2.0 + 1e-6, epsilon = 1e-15);
    assert!(priors.theta_bar[0] > 0.0);
}

/// Plain fixed-point iteration written against the raw Z values.
fn oracle_eb(z: &Matrix, groups: &[usize], priors: &EBPriors, grp: usize, f: usize) -> (f64, f64) {
    let vals: Vec<f64> = groups
        .iter()
        .enumerate()
        .filter(|(_, &g)| g == grp)
        .map(|(i, _)| z[(i, f)])
        .collect();
    let n = vals.len() as f64;
    let gh = vals.iter().sum::<f64>() / n;
    let mut gs = gh;
    let mut ds = vals.iter().map(|v| (v - gh).powi(2)).sum::<f64>() / (n - 1.0);
    for _ in 0..10_000 {
        let (gb, t2) = (priors.gamma_bar[grp], priors.tau_sq_bar[grp]);
        let gn = (n * t2 * gh + ds * gb) / (n * t2 + ds);
        let sse: f64 = vals.iter().map(|v| (v - gn).powi(2)).sum();
        let dn = (priors.theta_bar[grp] + 0.5 * sse) / (0.5 * n + priors.lambda_bar[grp] - 1.0);
        let done = (gn - gs).abs().max((dn - ds).abs()) < 1e-12;
        gs = gn;
        ds = dn;
        if done {
            break;
        }
    }
    (gs, ds)
}

#[test]
fn eb_matches_hand_iterated_fixed_point() {
    let z = Matrix::from_rows(&[
        vec![0.3, -1.2, 2.0],
        vec![1.1, 0.4, 1.5],
        vec![-0.2, -0.9, 2.6],
        vec![-1.0, 0.8, -2.1],
        vec![-1.4, 1.6, -1.7],
        vec![-0.6, 0.2, -2.5],
        vec![-0.9, 1.1, -1.9],
    ], 3)
    .unwrap();
    let groups = [0, 0, 0, 1, 1, 1, 1];
    let priors = fit_priors(&z, &groups).unwrap();
    let opts = EbOptions { tol: 1e-12, max_iter: 10_000 };
    let eff = eb_fit(&z, &groups, &priors, &opts).unwrap();
    for grp in 0..2 {
        for f in 0..3 {
            let (g, d) = oracle_eb(&z, &groups, &priors, grp, f);
            assert_abs_diff_eq!(eff.gamma_star[(grp, f)], g, epsilon = 1e-9);
            assert_abs_diff_eq!(eff.delta_sq_star[(grp, f)], d, epsilon = 1e-9);
        }
    }
}

#[test]
fn flat_prior_recovers_group_mle() {
    let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 4.0], vec![4.0, -1.0], vec![0.0, 0.5], vec![-2.0, 1.5]], 2)
        .unwrap();
    let groups = [0, 0, 0, 1, 1];
    let flat = EBPriors {
        gamma_bar: vec![0.0; 2],
        tau_sq_bar: vec![1e15; 2],
        lambda_bar: vec![1.0; 2],
        theta_bar: vec![0.0; 2],
        degenerate: vec![false; 2],
    };
    let eff = eb_fit(&z, &groups, &flat, &EbOptions::default()).unwrap();
    let mom = group_moments(&z, &groups).unwrap();
    for grp in 0..2 {
        for f in 0..2 {
            assert_abs_diff_eq!(eff.gamma_star[(grp, f)], mom.gamma_hat[(grp, f)], epsilon = 1e-6);
            let mle = mom.centered_ss[(grp, f)] / mom.sizes[grp] as f64;
            assert_abs_diff_eq!(eff.delta_sq_star[(grp, f)], mle, epsilon = 1e-6);
        }
    }
}

#[test]
fn neutral_effects_leave_data_unchanged() {
    let ds = messy_dataset(3, &[6, 8], 3, 2);
    let model = fit_feature_model(&ds, &FitOptions::default()).unwrap();
    let eff = BatchEffects {
        gamma_star: Matrix::zeros(2, 3),
        delta_sq_star: Matrix::from_fn(2, 3, |_, _| 1.0),
        group_labels: vec!["a".into(), "b".into()],
    };
    let out = harmonize(&ds, &model, &eff, ds.site_codes()).unwrap();
    assert!(out.max_abs_diff(ds.features()) < 1e-10);
}

#[test]
fn non_convergence_is_reported() {
    let ds = synth(1);
    let opts = CombatOptions {
        eb: EbOptions { tol: 1e-300, max_iter: 2 },
        ..CombatOptions::default()
    };
    let err = combat_fit(&ds, &opts).unwrap_err();
    assert!(err.to_string().contains("did not converge"), "{err}");
}

#[test]
fn single_sample_site_is_rejected() {
    let ds = messy_dataset(4, &[5, 1, 5], 2, 1);
    assert!(fit_feature_model(&ds, &FitOptions::default()).is_err());
}

#[test]
fn constant_feature_needs_the_floor() {
    let ds = synth(2);
    let mut y = ds.features().clone();
    for i in 0..y.nrows() {
        y[(i, 0)] = 4.0;
    }
    let flat = ds.with_features(y).unwrap();
    assert!(fit_feature_model(&flat, &FitOptions::default()).is_err());
    let floored = FitOptions {
        variance_floor: true,
        ..FitOptions::default()
    };
    assert!(fit_feature_model(&flat, &floored).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn site_effects_sum_to_zero(seed in any::<u64>(), a in 3usize..12, b in 3usize..12, c in 3usize..12) {
        let ds = messy_dataset(seed, &[a, b, c], 3, 1);
        let model = fit_feature_model(&ds, &FitOptions::default()).unwrap();
        for f in 0..3 {
            let s: f64 = (0..3).map(|i| model.site_sizes[i] as f64 * model.gamma_hat[(i, f)]).sum();
            prop_assert!(s.abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn eb_output_is_a_fixed_point(seed in any::<u64>()) {
        let ds = synth(seed);
        let opts = CombatOptions::default();
        let model = combat_fit(&ds, &opts).unwrap();
        let z = standardize(&ds, &model.feature_model).unwrap();
        let mom = group_moments(&z, ds.site_codes()).unwrap();
        let p = &model.priors;
        let e = &model.effects;
        for grp in 0..mom.sizes.len() {
            let n = mom.sizes[grp] as f64;
            for f in 0..ds.n_features() {
                let (gs, dsq) = (e.gamma_star[(grp, f)], e.delta_sq_star[(grp, f)]);
                let gh = mom.gamma_hat[(grp, f)];
                let gn = (n * p.tau_sq_bar[grp] * gh + dsq * p.gamma_bar[grp]) / (n * p.tau_sq_bar[grp] + dsq);
                let sse = mom.centered_ss[(grp, f)] + n * (gh - gs).powi(2);
                let dn = (p.theta_bar[grp] + 0.5 * sse) / (0.5 * n + p.lambda_bar[grp] - 1.0);
                prop_assert!((gn - gs).abs() <= 10.0 * opts.eb.tol);
                prop_assert!((dn - dsq).abs() <= 10.0 * opts.eb.tol);
                prop_assert!(dsq > 0.0);
            }
        }
    }

    #[test]
    fn shrinkage_stays_between_estimate_and_prior(seed in any::<u64>()) {
        let ds = synth(seed);
        let model = combat_fit(&ds, &CombatOptions::default()).unwrap();
        let z = standardize(&ds, &model.feature_model).unwrap();
        let mom = group_moments(&z, ds.site_codes()).unwrap();
        for grp in 0..mom.sizes.len() {
            let gb = model.priors.gamma_bar[grp];
            for f in 0..ds.n_features() {
                let gh = mom.gamma_hat[(grp, f)];
                let gs = model.effects.gamma_star[(grp, f)];
                prop_assert!(gs >= gh.min(gb) - 1e-9 && gs <= gh.max(gb) + 1e-9);
            }
        }
    }

    #[test]
    fn fit_is_deterministic_and_row_order_free(seed in any::<u64>(), shuffle in any::<u64>()) {
        let ds = synth(seed);
        let a = combat_fit(&ds, &CombatOptions::default()).unwrap();
        let b = combat_fit(&ds, &CombatOptions::default()).unwrap();
        prop_assert_eq!(&a, &b);

        // Reordering rows keeps site order (first appearance) when each site's
        // first row stays first.
        let mut rows: Vec<usize> = (0..ds.n_samples()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        for code in 0..ds.n_sites() {
            let mut r = ds.rows_of_site(code)[1..].to_vec();
            for i in (1..r.len()).rev() {
                r.swap(i, rng.gen_range(0..=i));
            }
            for (k, &row) in ds.rows_of_site(code)[1..].iter().enumerate() {
                rows[row] = r[k];
            }
        }
        let shuffled = ds.subset_rows(&rows).unwrap();
        let c = combat_fit(&shuffled, &CombatOptions::default()).unwrap();
        prop_assert!(a.effects.gamma_star.max_abs_diff(&c.effects.gamma_star) < 1e-9);
        prop_assert!(a.effects.delta_sq_star.max_abs_diff(&c.effects.delta_sq_star) < 1e-9);
        let ha = a.harmonize(&ds).unwrap().select_rows(&rows);
        prop_assert!(ha.max_abs_diff(&c.harmonize(&shuffled).unwrap()) < 1e-8);
    }
}

#[test]
fn effect_free_data_is_nearly_unchanged() {
    for seed in 0..10 {
        let mut cfg = SynthConfig::new(4, 50, 8, 1, 2).with_seed(seed);
        cfg.scales.gamma = 0.0;
        cfg.scales.delta_low = 1.0;
        cfg.scales.delta_high = 1.0;
        let (ds, _) = generate(&cfg).unwrap();
        let model = combat_fit(&ds, &CombatOptions::default()).unwrap();
        let out = model.harmonize(&ds).unwrap();
        let n_min = *model.feature_model.site_sizes.iter().min().unwrap() as f64;
        for f in 0..ds.n_features() {
            let bound = 5.0 * model.feature_model.sigma[f] / n_min.sqrt();
            let worst = (0..ds.n_samples())
                .map(|i| (out[(i, f)] - ds.features()[(i, f)]).abs())
                .fold(0.0, f64::max);
            assert!(worst < bound, "seed {seed} feature {f}: {worst} vs {bound}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn harmonized_site_offset_is_the_shrinkage_residual(seed in any::<u64>()) {
        let ds = synth(seed);
        let model = combat_fit(&ds, &CombatOptions::default()).unwrap();
        let (fm, fx) = (&model.feature_model, &model.effects);
        let out = model.harmonize(&ds).unwrap();
        for code in 0..ds.n_sites() {
            let rows = ds.rows_of_site(code);
            let gb = model.priors.gamma_bar[code];
            for f in 0..ds.n_features() {
                let after = rows
                    .iter()
                    .map(|&r| (out[(r, f)] - fm.fitted_mean(ds.covariates().row(r))[f]) / fm.sigma[f])
                    .sum::<f64>()
                    / rows.len() as f64;
                // the site mean of Z is γ̂/σ̂, so what survives is (γ̂/σ̂ − γ*)/δ*
                let gz = fm.gamma_hat[(code, f)] / fm.sigma[f];
                let ds_ = fx.delta_sq_star[(code, f)].sqrt();
                let expect = (gz - fx.gamma_star[(code, f)]) / ds_;
                prop_assert!((after - expect).abs() < 1e-9, "site {code} feature {f}: {after} vs {expect}");
                // and it is never more than the distance to the prior mean
                prop_assert!(after.abs() * ds_ <= (gz - gb).abs() + 1e-9);
            }
        }
    }
}
