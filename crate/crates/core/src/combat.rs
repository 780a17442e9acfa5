//! Location/scale (L/S) batch-effect model.
//!
//! The pipeline is the same whether groups are sites (ComBat) or clusters
//! (Cluster ComBat): feature-wise least squares with site indicators, feature-wise
//! standardization, method-of-moments hyperpriors per group, the empirical Bayes
//! fixed point for (γ*, δ*²), then the inverse L/S transform.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{mean, sample_variance, Matrix, OlsSolver};

/// Smallest admissible σ̂_g, τ̄² and prior mean of δ̂².
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// λ̄ used when the δ̂² spread across features is zero.
pub const DEGENERATE_LAMBDA: f64 = 2.0 + 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Floor σ̂_g at [`VARIANCE_FLOOR`] instead of failing on constant features.
    pub variance_floor: bool,
    /// Ridge added to the normal equations; 0 means plain OLS.
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            variance_floor: false,
            ridge: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EbOptions {
    /// Max-abs change between successive (γ*, δ*²) iterates.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EbOptions {
    fn default() -> Self {
        EbOptions {
            tol: 1e-6,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CombatOptions {
    pub fit: FitOptions,
    pub eb: EbOptions,
}

/// Global least-squares estimates shared by every group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureWiseModel {
    /// α̂_g, the sample-weighted grand mean of the site intercepts.
    pub alpha: Vec<f64>,
    /// β̂, P×G.
    pub beta: Matrix,
    /// σ̂_g > 0.
    pub sigma: Vec<f64>,
    /// γ̂_ig, M×G, with Σ_i (N_i/N) γ̂_ig = 0.
    pub gamma_hat: Matrix,
    pub site_ids: Vec<String>,
    pub site_sizes: Vec<usize>,
}

impl FeatureWiseModel {
    pub fn n_features(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.beta.nrows()
    }

    /// α̂ + x·β̂ for one covariate row.
    pub fn fitted_mean(&self, covariates: &[f64]) -> Vec<f64> {
        let mut out = self.alpha.clone();
        for (p, &x) in covariates.iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(self.beta.row(p)) {
                *o += x * b;
            }
        }
        out
    }

    pub fn check_dims(&self, ds: &Dataset) -> Result<()> {
        if ds.n_features() != self.n_features() || ds.n_covariates() != self.n_covariates() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features and {} covariates, data has {} and {}",
                self.n_features(),
                self.n_covariates(),
                ds.n_features(),
                ds.n_covariates()
            )));
        }
        Ok(())
    }
}

/// Method-of-moments hyperparameters, one entry per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EBPriors {
    pub gamma_bar: Vec<f64>,
    pub tau_sq_bar: Vec<f64>,
    pub lambda_bar: Vec<f64>,
    pub theta_bar: Vec<f64>,
    /// Set when a moment was degenerate and a floor/fallback was applied.
    pub degenerate: Vec<bool>,
}

impl EBPriors {
    pub fn n_groups(&self) -> usize {
        self.gamma_bar.len()
    }
}

/// Empirical Bayes posteriors per group and feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchEffects {
    pub gamma_star: Matrix,
    pub delta_sq_star: Matrix,
    pub group_labels: Vec<String>,
}

impl BatchEffects {
    pub fn n_groups(&self) -> usize {
        self.gamma_star.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.gamma_star.ncols()
    }
}

/// Per-group sample moments of the standardized data.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMoments {
    /// Group mean of Z per feature, K×G.
    pub gamma_hat: Matrix,
    /// Unbiased within-group variance of Z per feature, K×G.
    pub delta_sq_hat: Matrix,
    /// Σ_j (Z − γ̂)² per group and feature, K×G.
    pub centered_ss: Matrix,
    pub sizes: Vec<usize>,
}

/// Feature-wise OLS of y on [covariates | site indicators], then re-centring of
/// the site coefficients so that their sample-weighted mean is zero.
pub fn fit_feature_model(ds: &Dataset, opts: &FitOptions) -> Result<FeatureWiseModel> {
    let n = ds.n_samples();
    let p = ds.n_covariates();
    let m = ds.n_sites();
    let g = ds.n_features();
    let sizes = ds.site_sizes();
    if let Some((code, &size)) = sizes.iter().enumerate().find(|(_, &s)| s < 2) {
        return Err(Error::UnderDetermined(format!(
            "site `{}` has {size} sample(s); at least 2 are required",
            ds.site_ids()[code]
        )));
    }
    if n <= p + m {
        return Err(Error::UnderDetermined(format!(
            "{n} samples cannot identify {p} covariates and {m} site effects"
        )));
    }

    let codes = ds.site_codes();
    let design = Matrix::from_fn(n, p + m, |i, j| {
        if j < p {
            ds.covariates()[(i, j)]
        } else if codes[i] == j - p {
            1.0
        } else {
            0.0
        }
    });
    let solver = OlsSolver::new(&design, opts.ridge)?;

    let weights: Vec<f64> = sizes.iter().map(|&s| s as f64 / n as f64).collect();
    let mut alpha = vec![0.0; g];
    let mut beta = Matrix::zeros(p, g);
    let mut sigma = vec![0.0; g];
    let mut gamma_hat = Matrix::zeros(m, g);
    for f in 0..g {
        let sol = solver.solve(&ds.features().column(f))?;
        let coef = &sol.coefficients;
        let a: f64 = weights.iter().zip(&coef[p..]).map(|(w, c)| w * c).sum();
        alpha[f] = a;
        for k in 0..p {
            beta[(k, f)] = coef[k];
        }
        for i in 0..m {
            gamma_hat[(i, f)] = coef[p + i] - a;
        }
        let s = sol.residual_variance.sqrt();
        sigma[f] = if s >= VARIANCE_FLOOR {
            s
        } else if opts.variance_floor {
            VARIANCE_FLOOR
        } else {
            return Err(Error::DegenerateFeature { feature: f, sigma: s });
        };
    }
    Ok(FeatureWiseModel {
        alpha,
        beta,
        sigma,
        gamma_hat,
        site_ids: ds.site_ids().to_vec(),
        site_sizes: sizes,
    })
}

/// Z_ijg = (y_ijg − α̂_g − X_ij β̂_g) / σ̂_g
pub fn standardize(ds: &Dataset, model: &FeatureWiseModel) -> Result<Matrix> {
    model.check_dims(ds)?;
    let mut z = Matrix::zeros(ds.n_samples(), ds.n_features());
    for i in 0..ds.n_samples() {
        let mu = model.fitted_mean(ds.covariates().row(i));
        let y = ds.features().row(i);
        for (f, out) in z.row_mut(i).iter_mut().enumerate() {
            *out = (y[f] - mu[f]) / model.sigma[f];
        }
    }
    Ok(z)
}

fn group_count(groups: &[usize]) -> usize {
    groups.iter().copied().max().map_or(0, |k| k + 1)
}

/// Group means, unbiased variances and centered sums of squares of Z.
pub fn group_moments(z: &Matrix, groups: &[usize]) -> Result<GroupMoments> {
    if groups.len() != z.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} group indices for {} rows",
            groups.len(),
            z.nrows()
        )));
    }
    let k = group_count(groups);
    let g = z.ncols();
    let mut sizes = vec![0usize; k];
    let mut sums = Matrix::zeros(k, g);
    for (row, &grp) in z.rows_iter().zip(groups) {
        sizes[grp] += 1;
        for (s, &v) in sums.row_mut(grp).iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some((grp, &size)) = sizes.iter().enumerate().find(|(_, &s)| s < 2) {
        return Err(Error::GroupTooSmall { group: grp, size });
    }
    let mut gamma_hat = sums;
    for (grp, &size) in sizes.iter().enumerate() {
        gamma_hat.row_mut(grp).iter_mut().for_each(|s| *s /= size as f64);
    }
    let mut centered_ss = Matrix::zeros(k, g);
    for (row, &grp) in z.rows_iter().zip(groups) {
        let mu = gamma_hat.row(grp).to_vec();
        for ((s, &v), m) in centered_ss.row_mut(grp).iter_mut().zip(row).zip(mu) {
            *s += (v - m).powi(2);
        }
    }
    let delta_sq_hat = Matrix::from_fn(k, g, |grp, f| centered_ss[(grp, f)] / (sizes[grp] - 1) as f64);
    Ok(GroupMoments {
        gamma_hat,
        delta_sq_hat,
        centered_ss,
        sizes,
    })
}

/// Hyperpriors from moments across features within each group.
///
/// γ̄ and τ̄² are the mean and unbiased variance of γ̂_·g; λ̄ and θ̄ invert the
/// inverse-gamma mean m and variance v of δ̂²_·g: λ̄ = m²/v + 2, θ̄ = m(λ̄ − 1).
pub fn fit_priors(z: &Matrix, groups: &[usize]) -> Result<EBPriors> {
    let moments = group_moments(z, groups)?;
    priors_from_moments(&moments)
}

pub fn priors_from_moments(moments: &GroupMoments) -> Result<EBPriors> {
    let (k, g) = moments.gamma_hat.shape();
    if g < 2 {
        return Err(Error::InvalidArgument(
            "prior moments need at least 2 features".into(),
        ));
    }
    let mut priors = EBPriors {
        gamma_bar: Vec::with_capacity(k),
        tau_sq_bar: Vec::with_capacity(k),
        lambda_bar: Vec::with_capacity(k),
        theta_bar: Vec::with_capacity(k),
        degenerate: Vec::with_capacity(k),
    };
    for grp in 0..k {
        let gh = moments.gamma_hat.row(grp);
        let ds = moments.delta_sq_hat.row(grp);
        let mut degenerate = false;
        let mut tau_sq = sample_variance(gh);
        if !(tau_sq >= VARIANCE_FLOOR) {
            tau_sq = VARIANCE_FLOOR;
            degenerate = true;
        }
        let m = mean(ds);
        let v = sample_variance(ds);
        let ratio = m * m / v;
        let (lambda, theta) = if v > 0.0 && ratio.is_finite() && m >= VARIANCE_FLOOR {
            let lambda = ratio + 2.0;
            (lambda, m * (lambda - 1.0))
        } else {
            degenerate = true;
            log::warn!("group {grp}: degenerate δ̂² moments (mean {m:e}, variance {v:e}); using fallback prior");
            (DEGENERATE_LAMBDA, m.max(VARIANCE_FLOOR) * (DEGENERATE_LAMBDA - 1.0))
        };
        priors.gamma_bar.push(mean(gh));
        priors.tau_sq_bar.push(tau_sq);
        priors.lambda_bar.push(lambda);
        priors.theta_bar.push(theta);
        priors.degenerate.push(degenerate);
    }
    Ok(priors)
}

/// Alternates the γ* and δ*² posterior updates per (group, feature) until the
/// max-abs change of both falls below `opts.tol`.
pub fn eb_fit(z: &Matrix, groups: &[usize], priors: &EBPriors, opts: &EbOptions) -> Result<BatchEffects> {
    let moments = group_moments(z, groups)?;
    eb_from_moments(&moments, priors, opts)
}

pub fn eb_from_moments(moments: &GroupMoments, priors: &EBPriors, opts: &EbOptions) -> Result<BatchEffects> {
    let (k, g) = moments.gamma_hat.shape();
    if priors.n_groups() != k {
        return Err(Error::DimensionMismatch(format!(
            "priors cover {} groups, data has {k}",
            priors.n_groups()
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidArgument("EB tolerance must be positive".into()));
    }
    let mut gamma_star = Matrix::zeros(k, g);
    let mut delta_sq_star = Matrix::zeros(k, g);
    for grp in 0..k {
        let n = moments.sizes[grp] as f64;
        let (gbar, tau_sq) = (priors.gamma_bar[grp], priors.tau_sq_bar[grp]);
        let (lambda, theta) = (priors.lambda_bar[grp], priors.theta_bar[grp]);
        for f in 0..g {
            let gh = moments.gamma_hat[(grp, f)];
            let ss = moments.centered_ss[(grp, f)];
            let mut gs = gh;
            let mut ds = moments.delta_sq_hat[(grp, f)];
            let mut converged = false;
            let mut change = f64::INFINITY;
            for _ in 0..opts.max_iter {
                let gn = (n * tau_sq * gh + ds * gbar) / (n * tau_sq + ds);
                // Σ_j (Z − γ*)² = Σ_j (Z − γ̂)² + n (γ̂ − γ*)²
                let sse = ss + n * (gh - gn).powi(2);
                let dn = (theta + 0.5 * sse) / (0.5 * n + lambda - 1.0);
                change = (gn - gs).abs().max((dn - ds).abs());
                gs = gn;
                ds = dn;
                if change < opts.tol {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NotConverged {
                    iterations: opts.max_iter,
                    group: grp,
                    feature: f,
                    residual: change,
                });
            }
            gamma_star[(grp, f)] = gs;
            delta_sq_star[(grp, f)] = ds;
        }
    }
    Ok(BatchEffects {
        gamma_star,
        delta_sq_star,
        group_labels: (0..k).map(|i| i.to_string()).collect(),
    })
}

/// y* = (σ̂/δ*)(Z − γ*) + α̂ + Xβ̂ with (γ*, δ*) taken from each row's group.
pub fn harmonize(
    ds: &Dataset,
    model: &FeatureWiseModel,
    effects: &BatchEffects,
    group_of: &[usize],
) -> Result<Matrix> {
    model.check_dims(ds)?;
    if effects.n_features() != model.n_features() {
        return Err(Error::DimensionMismatch(format!(
            "batch effects cover {} features, model has {}",
            effects.n_features(),
            model.n_features()
        )));
    }
    if group_of.len() != ds.n_samples() {
        return Err(Error::DimensionMismatch(format!(
            "{} group indices for {} rows",
            group_of.len(),
            ds.n_samples()
        )));
    }
    let mut out = Matrix::zeros(ds.n_samples(), ds.n_features());
    for (i, &grp) in group_of.iter().enumerate() {
        if grp >= effects.n_groups() {
            return Err(Error::UnknownGroup(grp));
        }
        let mu = model.fitted_mean(ds.covariates().row(i));
        let y = ds.features().row(i);
        let gs = effects.gamma_star.row(grp);
        let dss = effects.delta_sq_star.row(grp);
        for (f, o) in out.row_mut(i).iter_mut().enumerate() {
            let z = (y[f] - mu[f]) / model.sigma[f];
            *o = model.sigma[f] / dss[f].sqrt() * (z - gs[f]) + mu[f];
        }
    }
    Ok(out)
}

/// Everything needed to harmonize data from the training sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombatModel {
    pub feature_model: FeatureWiseModel,
    pub priors: EBPriors,
    pub effects: BatchEffects,
}

/// Fits the feature model and runs EB with an arbitrary grouping of the rows.
/// Group labels are attached to the resulting effects in index order.
pub fn fit_grouped(
    ds: &Dataset,
    groups: &[usize],
    labels: Vec<String>,
    opts: &CombatOptions,
) -> Result<CombatModel> {
    let feature_model = fit_feature_model(ds, &opts.fit)?;
    let z = standardize(ds, &feature_model)?;
    let moments = group_moments(&z, groups)?;
    if labels.len() != moments.sizes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} group labels for {} groups",
            labels.len(),
            moments.sizes.len()
        )));
    }
    let priors = priors_from_moments(&moments)?;
    let mut effects = eb_from_moments(&moments, &priors, &opts.eb)?;
    effects.group_labels = labels;
    Ok(CombatModel {
        feature_model,
        priors,
        effects,
    })
}

/// ComBat with one group per site.
pub fn combat_fit(ds: &Dataset, opts: &CombatOptions) -> Result<CombatModel> {
    fit_grouped(ds, ds.site_codes(), ds.site_ids().to_vec(), opts)
}

impl CombatModel {
    /// Harmonizes rows from sites that were part of the fit.
    pub fn harmonize(&self, ds: &Dataset) -> Result<Matrix> {
        let groups = ds
            .site_of()
            .iter()
            .map(|s| {
                self.effects
                    .group_labels
                    .iter()
                    .position(|l| l == s)
                    .ok_or_else(|| {
                        Error::ModelMismatch(format!(
                            "site `{s}` was not part of the ComBat fit; refit including it"
                        ))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        harmonize(ds, &self.feature_model, &self.effects, &groups)
    }
}
