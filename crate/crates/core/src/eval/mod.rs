//! Metrics, downstream models and the experiment harnesses.

mod experiments;

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean, pca_project, sample_variance, Matrix, OlsSolver, Pca};

pub use experiments::{
    harmonize_split, identifiability, k_sweep, onboarding_timing, regression_mae, table2, table2_seed, Algorithm,
    ExperimentOptions, IdentifiabilityOutcome, OnboardingTiming, SeedOutcome, SplitOutput, Table2, Table2Cell,
};

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if a.nrows() * a.ncols() == 0 {
        return Err(Error::InvalidArgument("metric of an empty matrix".into()));
    }
    Ok(())
}

/// Root mean squared elementwise difference.
pub fn rmse(a: &Matrix, b: &Matrix) -> Result<f64> {
    same_shape(a, b)?;
    let ss: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / a.as_slice().len() as f64).sqrt())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn classification_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / pred.len() as f64)
}

fn with_intercept(x: &Matrix) -> Matrix {
    Matrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

/// Ordinary least squares with an intercept. A rank-deficient design falls
/// back to a 1e-8 ridge.
pub fn linreg_fit_predict(train_x: &Matrix, train_y: &[f64], test_x: &Matrix) -> Result<Vec<f64>> {
    if train_x.nrows() != train_y.len() || train_x.ncols() != test_x.ncols() {
        return Err(Error::DimensionMismatch("regression inputs disagree in shape".into()));
    }
    let design = with_intercept(train_x);
    let solver = match OlsSolver::new(&design, 0.0) {
        Ok(s) => s,
        Err(Error::RankDeficient) => {
            log::warn!("regression design is rank deficient, using ridge 1e-8");
            OlsSolver::new(&design, 1e-8)?
        }
        Err(e) => return Err(e),
    };
    let coef = solver.solve(train_y)?.coefficients;
    Ok(with_intercept(test_x).mul_vec(&coef))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegOptions {
    /// Penalty (λ/2)‖W‖² on the non-intercept weights.
    pub l2: f64,
    pub max_epochs: usize,
    /// Stop once the gradient norm falls below this.
    pub grad_tol: f64,
    /// z-score each input column with training statistics first.
    pub standardize: bool,
}

impl Default for LogRegOptions {
    fn default() -> Self {
        LogRegOptions {
            l2: 1e-4,
            max_epochs: 500,
            grad_tol: 1e-6,
            standardize: true,
        }
    }
}

/// Multinomial logistic regression.
#[derive(Clone, Debug)]
pub struct LogisticModel {
    /// (D+1)×K, first row is the intercept.
    pub weights: Matrix,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Penalized training loss after every epoch, starting with the initial loss.
    pub loss_trace: Vec<f64>,
}

fn scaled_design(x: &Matrix, mean: &[f64], scale: &[f64]) -> Matrix {
    Matrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            (x[(i, j - 1)] - mean[j - 1]) / scale[j - 1]
        }
    })
}

/// Mean negative log-likelihood plus penalty, and optionally its gradient.
fn logistic_loss(x: &Matrix, y: &[usize], w: &Matrix, l2: f64, grad: Option<&mut Matrix>) -> f64 {
    let (n, k) = (x.nrows(), w.ncols());
    let logits = x.matmul(w).expect("shapes checked by caller");
    let mut loss = 0.0;
    let mut resid = Matrix::zeros(n, k);
    for i in 0..n {
        let row = logits.row(i);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = row.iter().map(|v| (v - top).exp()).sum();
        let lse = top + norm.ln();
        loss += lse - row[y[i]];
        for c in 0..k {
            resid[(i, c)] = (row[c] - lse).exp() - f64::from(u8::from(c == y[i]));
        }
    }
    loss /= n as f64;
    let penalty: f64 = w.as_slice()[k..].iter().map(|v| v * v).sum();
    loss += 0.5 * l2 * penalty;
    if let Some(g) = grad {
        *g = x.transpose().matmul(&resid).expect("shapes checked by caller");
        for (idx, v) in g.as_mut_slice().iter_mut().enumerate() {
            *v /= n as f64;
            if idx >= k {
                *v += l2 * w.as_slice()[idx];
            }
        }
    }
    loss
}

/// Full-batch gradient descent from zero weights with a backtracking
/// (Armijo) line search, so the loss never increases between epochs.
pub fn logreg_fit(train_x: &Matrix, labels: &[usize], n_classes: usize, opts: &LogRegOptions) -> Result<LogisticModel> {
    if train_x.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows for {} labels",
            train_x.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{n_classes}")));
    }
    let present = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if present < 2 {
        return Err(Error::InvalidArgument(
            "logistic regression needs at least two classes in training".into(),
        ));
    }
    let d = train_x.ncols();
    let (mu, scale) = if opts.standardize {
        let mu: Vec<f64> = (0..d).map(|j| mean(&train_x.column(j))).collect();
        let scale = (0..d)
            .map(|j| {
                let col = train_x.column(j);
                let sd = (col.iter().map(|v| (v - mu[j]).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        (mu, scale)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let x = scaled_design(train_x, &mu, &scale);
    let mut w = Matrix::zeros(d + 1, n_classes);
    let mut grad = Matrix::zeros(d + 1, n_classes);
    let mut loss = logistic_loss(&x, labels, &w, opts.l2, Some(&mut grad));
    let mut trace = vec![loss];
    let mut step = 1.0;
    for _ in 0..opts.max_epochs {
        let gnorm2: f64 = grad.as_slice().iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < opts.grad_tol {
            break;
        }
        step *= 2.0;
        let (next, next_loss) = loop {
            let cand = Matrix::from_fn(d + 1, n_classes, |i, j| w[(i, j)] - step * grad[(i, j)]);
            let l = logistic_loss(&x, labels, &cand, opts.l2, None);
            if l <= loss - 0.5 * step * gnorm2 {
                break (cand, l);
            }
            step *= 0.5;
            if step < 1e-20 {
                break (w.clone(), loss);
            }
        };
        w = next;
        loss = logistic_loss(&x, labels, &w, opts.l2, Some(&mut grad));
        debug_assert!((loss - next_loss).abs() <= 1e-12 * loss.abs().max(1.0));
        trace.push(loss);
        if step < 1e-20 {
            break;
        }
    }
    Ok(LogisticModel {
        weights: w,
        mean: mu,
        scale,
        loss_trace: trace,
    })
}

impl LogisticModel {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} inputs, data has {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        let logits = scaled_design(x, &self.mean, &self.scale).matmul(&self.weights)?;
        Ok(logits
            .rows_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect())
    }
}

pub fn logreg_fit_predict(train_x: &Matrix, labels: &[usize], test_x: &Matrix, n_classes: usize) -> Result<Vec<usize>> {
    logreg_fit(train_x, labels, n_classes, &LogRegOptions::default())?.predict(test_x)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch("labelings differ in length".into()));
    }
    let pairs = |n: usize| (n * n.saturating_sub(1)) as f64 / 2.0;
    let mut table = std::collections::BTreeMap::<(usize, usize), usize>::new();
    let mut rows = std::collections::BTreeMap::<usize, usize>::new();
    let mut cols = std::collections::BTreeMap::<usize, usize>::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| pairs(n)).sum();
    let sa: f64 = rows.values().map(|&n| pairs(n)).sum();
    let sb: f64 = cols.values().map(|&n| pairs(n)).sum();
    let total = pairs(a.len());
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both labelings trivial (all singletons or one block)
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Writes `pc1,pc2,site,cluster,label` per row and returns the projection.
pub fn export_pca_plot_data(
    data: &Matrix,
    sites: &[String],
    clusters: &[usize],
    labels: &[u8],
    path: &Path,
) -> Result<Pca> {
    let n = data.nrows();
    if sites.len() != n || clusters.len() != n || labels.len() != n {
        return Err(Error::DimensionMismatch("label columns must have one entry per row".into()));
    }
    let pca = pca_project(data, 2.min(data.ncols()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["pc1", "pc2", "site", "cluster", "label"])?;
    for i in 0..n {
        let pc2 = if pca.scores.ncols() > 1 { pca.scores[(i, 1)] } else { 0.0 };
        w.write_record([
            pca.scores[(i, 0)].to_string(),
            pc2.to_string(),
            sites[i].clone(),
            clusters[i].to_string(),
            labels[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(pca)
}

/// One metric across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Unbiased sample variance across seeds (0 for a single seed).
    pub variance: f64,
}

impl EvalReport {
    pub fn new(metric: impl Into<String>, config: impl Into<String>, seeds: Vec<u64>, values: Vec<f64>) -> Self {
        let variance = if values.len() > 1 { sample_variance(&values) } else { 0.0 };
        EvalReport {
            metric: metric.into(),
            config: config.into(),
            mean: mean(&values),
            variance,
            seeds,
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_of_constant_offset() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_fn(2, 2, |i, j| a[(i, j)] + 2.0);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert!((rmse(&a, &b).unwrap() - 2.0).abs() < 1e-15);
        assert!(rmse(&a, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn mae_and_accuracy_basics() {
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(classification_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(classification_accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn separable_toy_problem() {
        let x = Matrix::from_vec(6, 2, vec![0.0, 0.0, 0.2, 0.1, 0.1, 0.3, 3.0, 3.0, 3.2, 2.9, 2.8, 3.1]).unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let m = logreg_fit(&x, &y, 2, &LogRegOptions::default()).unwrap();
        assert_eq!(m.predict(&x).unwrap(), y);
        assert!(m.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(logreg_fit(&x, &[0; 6], 2, &LogRegOptions::default()).is_err());
    }

    #[test]
    fn regression_recovers_exact_line() {
        let x = Matrix::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = [1.0, 3.0, 5.0, 7.0];
        let pred = linreg_fit_predict(&x, &y, &Matrix::from_vec(1, 1, vec![10.0]).unwrap()).unwrap();
        assert!((pred[0] - 21.0).abs() < 1e-9);
    }

    #[test]
    fn ari_known_values() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        // one pair agrees, expected agreement 1/3
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!((v + 0.5).abs() < 1e-12);
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::new("rmse", "x", vec![0, 1, 2], vec![1.0, 2.0, 3.0]);
        assert_eq!(r.mean, 2.0);
        assert_eq!(r.variance, 1.0);
    }
}
