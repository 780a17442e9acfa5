//! K-means and centralized Cluster ComBat.
//!
//! Cluster ComBat replaces per-site batch parameters with per-cluster ones. In
//! the centralized setting every sample is clustered individually, so a site's
//! samples may end up in different clusters; an unseen site is harmonized by
//! predicting each sample's cluster from the stored centroids, with nothing
//! re-estimated.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::combat::{self, BatchEffects, CombatModel, CombatOptions, EBPriors, FeatureWiseModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix};

/// Which vectors a [`ClusterModel`] was fitted on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterSpace {
    /// One point per sample (raw or standardized feature row).
    SampleFeature,
    /// One point per site: concatenated locally estimated (α̂, β̂, γ̂).
    SiteParameter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Matrix,
    pub space: ClusterSpace,
    pub n_clusters: usize,
    /// Within-cluster sum of squares at fit time.
    pub inertia: f64,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Centroids as the means of labelled points; every label must be populated.
    pub fn from_labels(points: &Matrix, labels: &[usize], space: ClusterSpace) -> Result<Self> {
        let c = labels.iter().copied().max().map_or(0, |k| k + 1);
        let (centroids, counts) = label_means(points, labels, c);
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("cluster {empty} has no members")));
        }
        let inertia = inertia(points, &centroids, labels);
        Ok(ClusterModel {
            centroids,
            space,
            n_clusters: c,
            inertia,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    /// Independent k-means++ starts; the lowest inertia wins.
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            max_iter: 300,
            tol: 1e-8,
            restarts: 1,
        }
    }
}

/// A fitted model plus the training assignment and the per-step inertia.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub labels: Vec<usize>,
    pub inertia_trace: Vec<f64>,
}

fn nearest(centroids: &Matrix, point: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.rows_iter().enumerate() {
        let d = squared_distance(centre, point);
        // strict comparison keeps the lowest index on ties
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let labels = points
        .rows_iter()
        .map(|p| {
            let (c, d) = nearest(centroids, p);
            total += d;
            c
        })
        .collect();
    (labels, total)
}

fn label_means(points: &Matrix, labels: &[usize], c: usize) -> (Matrix, Vec<usize>) {
    let mut sums = Matrix::zeros(c, points.ncols());
    let mut counts = vec![0usize; c];
    for (p, &l) in points.rows_iter().zip(labels) {
        counts[l] += 1;
        for (s, &x) in sums.row_mut(l).iter_mut().zip(p) {
            *s += x;
        }
    }
    for (l, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(l).iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    (sums, counts)
}

fn inertia(points: &Matrix, centroids: &Matrix, labels: &[usize]) -> f64 {
    points
        .rows_iter()
        .zip(labels)
        .map(|(p, &l)| squared_distance(p, centroids.row(l)))
        .sum()
}

/// Greedy k-means++: each new centre is the best of `2 + ln C` candidates
/// drawn with probability proportional to D², judged by the resulting
/// potential.
fn kmeans_plus_plus(points: &Matrix, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let q = points.nrows();
    let trials = 2 + (c as f64).ln().floor() as usize;
    let mut chosen = vec![rng.gen_range(0..q)];
    let mut d2: Vec<f64> = points
        .rows_iter()
        .map(|p| squared_distance(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < c {
        let weights = match WeightedIndex::new(&d2) {
            Ok(w) => w,
            Err(_) => {
                // every remaining point coincides with a centre
                chosen.push((0..q).find(|i| !chosen.contains(i)).unwrap_or(0));
                continue;
            }
        };
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = weights.sample(rng);
            let next: Vec<f64> = d2
                .iter()
                .zip(points.rows_iter())
                .map(|(d, p)| d.min(squared_distance(p, points.row(cand))))
                .collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().map_or(true, |b| potential < b.1) {
                best = Some((cand, potential, next));
            }
        }
        let (cand, _, next) = best.expect("at least one trial");
        chosen.push(cand);
        d2 = next;
    }
    points.select_rows(&chosen)
}

fn lloyd(points: &Matrix, c: usize, rng: &mut ChaCha8Rng, opts: &KMeansOptions) -> (Matrix, Vec<usize>, Vec<f64>) {
    let mut centroids = kmeans_plus_plus(points, c, rng);
    let (mut labels, first) = assign(points, &centroids);
    let mut trace = vec![first];
    for _ in 0..opts.max_iter {
        let (mut next, counts) = label_means(points, &labels, c);
        for empty in (0..c).filter(|&l| counts[l] == 0) {
            // reseed on the point farthest from its current centre
            let far = points
                .rows_iter()
                .zip(&labels)
                .map(|(p, &l)| squared_distance(p, next.row(l)))
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map_or(0, |(i, _)| i);
            next.row_mut(empty).copy_from_slice(points.row(far));
            labels[far] = empty;
        }
        let shift = centroids
            .rows_iter()
            .zip(next.rows_iter())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let (new_labels, total) = assign(points, &centroids);
        trace.push(total);
        let changed = new_labels != labels;
        labels = new_labels;
        if !changed || shift < opts.tol {
            break;
        }
    }
    (centroids, labels, trace)
}

/// k-means++ seeding followed by Lloyd iterations; deterministic given `seed`.
pub fn kmeans_fit(
    points: &Matrix,
    c: usize,
    seed: u64,
    opts: &KMeansOptions,
    space: ClusterSpace,
) -> Result<KMeansFit> {
    let (q, d) = points.shape();
    if c == 0 || c > q {
        return Err(Error::InvalidArgument(format!(
            "cannot form {c} clusters from {q} points"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("points have no coordinates".into()));
    }
    let mut best: Option<KMeansFit> = None;
    for restart in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        let (centroids, labels, trace) = lloyd(points, c, &mut rng, opts);
        let total = inertia(points, &centroids, &labels);
        if best.as_ref().map_or(true, |b| total < b.model.inertia) {
            best = Some(KMeansFit {
                model: ClusterModel {
                    centroids,
                    space,
                    n_clusters: c,
                    inertia: total,
                },
                labels,
                inertia_trace: trace,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Nearest centroid in Euclidean distance, ties to the lowest index.
pub fn kmeans_predict(model: &ClusterModel, points: &Matrix) -> Result<Vec<usize>> {
    if points.ncols() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "points have {} coordinates, centroids {}",
            points.ncols(),
            model.dim()
        )));
    }
    Ok(points.rows_iter().map(|p| nearest(&model.centroids, p).0).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCombatOptions {
    pub n_clusters: usize,
    pub seed: u64,
    pub kmeans: KMeansOptions,
    /// Cluster standardized rows Z instead of raw feature rows.
    pub cluster_standardized: bool,
    pub combat: CombatOptions,
}

impl Default for ClusterCombatOptions {
    fn default() -> Self {
        ClusterCombatOptions {
            n_clusters: 5,
            seed: 0,
            kmeans: KMeansOptions::default(),
            cluster_standardized: false,
            combat: CombatOptions::default(),
        }
    }
}

/// Parameters shipped to unseen sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCombatArtifact {
    pub feature_model: FeatureWiseModel,
    pub priors: EBPriors,
    pub effects: BatchEffects,
    pub cluster_model: ClusterModel,
    pub cluster_standardized: bool,
}

#[derive(Clone, Debug)]
pub struct ClusterCombatFit {
    pub artifact: ClusterCombatArtifact,
    /// Training-time cluster of every row.
    pub assignment: Vec<usize>,
}

fn cluster_points(ds: &Dataset, model: &FeatureWiseModel, standardized: bool) -> Result<Matrix> {
    if standardized {
        combat::standardize(ds, model)
    } else {
        Ok(ds.features().clone())
    }
}

/// Cluster ComBat with K-means on sample rows.
pub fn cluster_combat_fit(ds: &Dataset, opts: &ClusterCombatOptions) -> Result<ClusterCombatFit> {
    if opts.n_clusters > ds.n_samples() {
        return Err(Error::InvalidArgument(format!(
            "{} clusters requested for {} samples",
            opts.n_clusters,
            ds.n_samples()
        )));
    }
    cluster_combat_fit_with(ds, opts, |points| {
        let fit = kmeans_fit(points, opts.n_clusters, opts.seed, &opts.kmeans, ClusterSpace::SampleFeature)?;
        // training labels must be what prediction would give for the same rows
        let labels = kmeans_predict(&fit.model, points)?;
        Ok((fit.model, labels))
    })
}

/// Cluster ComBat with a caller-supplied assignment of the clustering points
/// (raw or standardized rows, per `opts.cluster_standardized`).
pub fn cluster_combat_fit_with<F>(ds: &Dataset, opts: &ClusterCombatOptions, assign: F) -> Result<ClusterCombatFit>
where
    F: FnOnce(&Matrix) -> Result<(ClusterModel, Vec<usize>)>,
{
    let feature_model = combat::fit_feature_model(ds, &opts.combat.fit)?;
    let points = cluster_points(ds, &feature_model, opts.cluster_standardized)?;
    let (cluster_model, assignment) = assign(&points)?;
    if assignment.len() != ds.n_samples() {
        return Err(Error::DimensionMismatch("assignment length differs from row count".into()));
    }
    let labels = (0..cluster_model.n_clusters).map(|c| c.to_string()).collect();
    let z = combat::standardize(ds, &feature_model)?;
    let moments = combat::group_moments(&z, &assignment)?;
    if moments.sizes.len() != cluster_model.n_clusters {
        return Err(Error::GroupTooSmall {
            group: moments.sizes.len(),
            size: 0,
        });
    }
    let priors = combat::priors_from_moments(&moments)?;
    let mut effects = combat::eb_from_moments(&moments, &priors, &opts.combat.eb)?;
    effects.group_labels = labels;
    Ok(ClusterCombatFit {
        artifact: ClusterCombatArtifact {
            feature_model,
            priors,
            effects,
            cluster_model,
            cluster_standardized: opts.cluster_standardized,
        },
        assignment,
    })
}

impl ClusterCombatArtifact {
    pub fn as_combat_model(&self) -> CombatModel {
        CombatModel {
            feature_model: self.feature_model.clone(),
            priors: self.priors.clone(),
            effects: self.effects.clone(),
        }
    }

    /// Predicted cluster of every row of `ds`.
    pub fn predict_clusters(&self, ds: &Dataset) -> Result<Vec<usize>> {
        if self.cluster_model.space != ClusterSpace::SampleFeature {
            return Err(Error::ModelMismatch(
                "centralized harmonization needs a sample-space cluster model".into(),
            ));
        }
        self.feature_model.check_dims(ds)?;
        let points = cluster_points(ds, &self.feature_model, self.cluster_standardized)?;
        kmeans_predict(&self.cluster_model, &points)
    }

    /// Harmonizes rows from any site, seen or unseen, without refitting.
    pub fn harmonize(&self, ds: &Dataset) -> Result<Matrix> {
        let clusters = self.predict_clusters(ds)?;
        combat::harmonize(ds, &self.feature_model, &self.effects, &clusters)
    }
}

pub fn harmonize_unseen_centralized(artifact: &ClusterCombatArtifact, ds_new: &Dataset) -> Result<Matrix> {
    artifact.harmonize(ds_new)
}
