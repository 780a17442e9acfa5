//! Experiment protocols on synthetic data: the reconstruction/accuracy table,
//! site and cluster identifiability, downstream regression, cluster-count
//! sweeps and onboarding cost.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{classification_accuracy, linreg_fit_predict, logreg_fit, mae, rmse, EvalReport, LogRegOptions};
use crate::cluster::{cluster_combat_fit, harmonize_unseen_centralized, ClusterCombatOptions, KMeansOptions};
use crate::combat::{combat_fit, CombatOptions};
use crate::data::{split_by_sites, Dataset, SiteSplit};
use crate::error::{Error, Result};
use crate::federated::{
    onboard_unseen_site, run_distributed, scan_messages, DistributedMode, DistributedOptions, InMemoryTransport,
    Transport, Weighting,
};
use crate::numerics::Matrix;
use crate::synth::{generate, table1_config, EffectScales, SynthConfig, SynthTruth};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    None,
    Combat,
    ClusterCombat,
    DistCombat,
    DistClusterCombat,
}

impl Algorithm {
    /// Row order of the comparison table.
    pub const ALL: [Algorithm; 5] = [
        Algorithm::None,
        Algorithm::Combat,
        Algorithm::ClusterCombat,
        Algorithm::DistCombat,
        Algorithm::DistClusterCombat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::None => "none",
            Algorithm::Combat => "combat",
            Algorithm::ClusterCombat => "cluster-combat",
            Algorithm::DistCombat => "dist-combat",
            Algorithm::DistClusterCombat => "dist-cluster-combat",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::None => "No Harmonization",
            Algorithm::Combat => "ComBat",
            Algorithm::ClusterCombat => "Cluster ComBat",
            Algorithm::DistCombat => "Distributed ComBat",
            Algorithm::DistClusterCombat => "Distributed Cluster ComBat",
        }
    }

    fn index(self) -> usize {
        Algorithm::ALL.iter().position(|&a| a == self).unwrap_or(0)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    /// Cluster count; `None` uses the generating cluster count of the config.
    pub n_clusters: Option<usize>,
    /// Fraction of sites held out (rounded to a whole number of sites).
    pub test_fraction: f64,
    pub scales: EffectScales,
    pub kmeans: KMeansOptions,
    pub combat: CombatOptions,
    pub cluster_standardized: bool,
    pub weighting: Weighting,
    pub standardize_params: bool,
    pub logreg: LogRegOptions,
    /// Worker threads for seed-parallel runs; 0 lets the pool decide.
    pub jobs: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            n_clusters: None,
            test_fraction: 0.3,
            scales: EffectScales::default(),
            kmeans: KMeansOptions::default(),
            combat: CombatOptions::default(),
            cluster_standardized: false,
            weighting: Weighting::Uniform,
            standardize_params: false,
            logreg: LogRegOptions::default(),
            jobs: 0,
        }
    }
}

impl ExperimentOptions {
    fn distributed(&self, mode: DistributedMode, n_clusters: usize, seed: u64) -> DistributedOptions {
        DistributedOptions {
            mode,
            n_clusters,
            seed,
            weighting: self.weighting,
            standardize_params: self.standardize_params,
            kmeans: self.kmeans,
            combat: self.combat,
        }
    }

    fn cluster(&self, n_clusters: usize, seed: u64) -> ClusterCombatOptions {
        ClusterCombatOptions {
            n_clusters,
            seed,
            kmeans: self.kmeans,
            cluster_standardized: self.cluster_standardized,
            combat: self.combat,
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
    }
}

/// Harmonized training and test rows for one algorithm.
#[derive(Clone, Debug)]
pub struct SplitOutput {
    pub train: Matrix,
    pub test: Matrix,
    /// Rows of the full dataset, in the order of `train` / `test`.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    /// Findings of the transcript scanner for federated algorithms.
    pub privacy_violations: usize,
}

fn run_scanned(ds: &Dataset, opts: &DistributedOptions) -> Result<(crate::federated::DistributedRun, usize)> {
    let mut transport = InMemoryTransport::new();
    let run = run_distributed(ds, opts, &mut transport)?;
    let found = scan_messages(transport.transcript(), ds)?;
    Ok((run, found.len()))
}

/// Harmonizes according to the evaluation protocol: ComBat and Distributed
/// ComBat cannot harmonize sites they were not fitted on, so they are refitted
/// on all sites; the cluster methods are fitted on the training sites and the
/// test sites go through unseen-site harmonization.
pub fn harmonize_split(
    ds: &Dataset,
    split: &SiteSplit,
    algo: Algorithm,
    n_clusters: usize,
    seed: u64,
    opts: &ExperimentOptions,
) -> Result<SplitOutput> {
    let (train_rows, test_rows): (Vec<usize>, Vec<usize>) =
        (0..ds.n_samples()).partition(|&r| split.train_sites.contains(&ds.site_of()[r]));
    let mut privacy_violations = 0;
    let (train, test) = match algo {
        Algorithm::None => (ds.features().select_rows(&train_rows), ds.features().select_rows(&test_rows)),
        Algorithm::Combat => {
            let all = combat_fit(ds, &opts.combat)?.harmonize(ds)?;
            (all.select_rows(&train_rows), all.select_rows(&test_rows))
        }
        Algorithm::DistCombat => {
            let (run, found) = run_scanned(ds, &opts.distributed(DistributedMode::PerSite, ds.n_sites(), seed))?;
            privacy_violations += found;
            let all = run.harmonized_like(ds)?;
            (all.select_rows(&train_rows), all.select_rows(&test_rows))
        }
        Algorithm::ClusterCombat => {
            let train_ds = ds.subset_rows(&train_rows)?;
            let test_ds = ds.subset_rows(&test_rows)?;
            let fit = cluster_combat_fit(&train_ds, &opts.cluster(n_clusters, seed))?;
            (
                fit.artifact.harmonize(&train_ds)?,
                harmonize_unseen_centralized(&fit.artifact, &test_ds)?,
            )
        }
        Algorithm::DistClusterCombat => {
            let train_ds = ds.subset_rows(&train_rows)?;
            let test_ds = ds.subset_rows(&test_rows)?;
            let (run, found) =
                run_scanned(&train_ds, &opts.distributed(DistributedMode::Clustered, n_clusters, seed))?;
            privacy_violations += found;
            let mut test = Matrix::zeros(test_ds.n_samples(), test_ds.n_features());
            for (code, site) in test_ds.split_per_site()?.iter().enumerate() {
                let out = onboard_unseen_site(site, &run.global, &run.effects)?;
                for (k, &row) in test_ds.rows_of_site(code).iter().enumerate() {
                    test.row_mut(row).copy_from_slice(out.harmonized.row(k));
                }
            }
            (run.harmonized_like(&train_ds)?, test)
        }
    };
    Ok(SplitOutput {
        train,
        test,
        train_rows,
        test_rows,
        privacy_violations,
    })
}

fn held_out_sites(cfg: &SynthConfig, opts: &ExperimentOptions) -> usize {
    ((opts.test_fraction * cfg.n_sites as f64).round() as usize).clamp(1, cfg.n_sites - 1)
}

fn labels_of(truth: &SynthTruth, rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&r| usize::from(truth.labels[r])).collect()
}

fn label_accuracy(train_x: &Matrix, test_x: &Matrix, truth: &SynthTruth, out: &SplitOutput, opts: &LogRegOptions) -> Result<f64> {
    let model = logreg_fit(train_x, &labels_of(truth, &out.train_rows), 2, opts)?;
    classification_accuracy(&model.predict(test_x)?, &labels_of(truth, &out.test_rows))
}

/// Metrics of every algorithm for one generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub preset: usize,
    pub seed: u64,
    pub n_test_sites: usize,
    /// Test-row reconstruction RMSE per algorithm, in [`Algorithm::ALL`] order.
    pub rmse: [f64; 5],
    /// Test-row label accuracy per algorithm, in [`Algorithm::ALL`] order.
    pub accuracy: [f64; 5],
    /// Accuracy of the same classifier on ground-truth features.
    pub truth_accuracy: f64,
    pub privacy_violations: usize,
}

impl SeedOutcome {
    pub fn rmse_of(&self, algo: Algorithm) -> f64 {
        self.rmse[algo.index()]
    }

    pub fn accuracy_of(&self, algo: Algorithm) -> f64 {
        self.accuracy[algo.index()]
    }
}

/// Generates `cfg` (its seed drives data, split and clustering) and scores all
/// five algorithms.
pub fn table2_seed(cfg: &SynthConfig, preset: usize, opts: &ExperimentOptions) -> Result<SeedOutcome> {
    let (ds, truth) = generate(cfg)?;
    let n_test = held_out_sites(cfg, opts);
    let (_, _, split) = split_by_sites(&ds, n_test, cfg.seed)?;
    let n_clusters = opts.n_clusters.unwrap_or_else(|| cfg.n_clusters());
    let mut outcome = SeedOutcome {
        preset,
        seed: cfg.seed,
        n_test_sites: n_test,
        rmse: [0.0; 5],
        accuracy: [0.0; 5],
        truth_accuracy: 0.0,
        privacy_violations: 0,
    };
    for algo in Algorithm::ALL {
        let out = harmonize_split(&ds, &split, algo, n_clusters, cfg.seed, opts)?;
        let gt_test = truth.ground_truth.select_rows(&out.test_rows);
        outcome.rmse[algo.index()] = rmse(&out.test, &gt_test)?;
        outcome.accuracy[algo.index()] = label_accuracy(&out.train, &out.test, &truth, &out, &opts.logreg)?;
        outcome.privacy_violations += out.privacy_violations;
        if algo == Algorithm::None {
            let gt_train = truth.ground_truth.select_rows(&out.train_rows);
            outcome.truth_accuracy = label_accuracy(&gt_train, &gt_test, &truth, &out, &opts.logreg)?;
        }
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Cell {
    pub preset: usize,
    pub algorithm: Algorithm,
    pub rmse: EvalReport,
    pub accuracy: EvalReport,
}

/// Seed-aggregated comparison of the five algorithms over a set of presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2 {
    pub presets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cells: Vec<Table2Cell>,
    /// Ground-truth-feature accuracy per preset.
    pub truth_accuracy: Vec<EvalReport>,
    pub outcomes: Vec<SeedOutcome>,
}

impl Table2 {
    pub fn cell(&self, preset: usize, algo: Algorithm) -> Option<&Table2Cell> {
        self.cells.iter().find(|c| c.preset == preset && c.algorithm == algo)
    }

    /// One row per algorithm and metric, one `mean±variance` column per preset.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["metric".to_string(), "algorithm".to_string()];
        header.extend(self.presets.iter().map(|p| format!("Data-{p}")));
        w.write_record(&header)?;
        let fmt = |r: &EvalReport, scale: f64, digits: usize| {
            format!(
                "{:.digits$}±{:.digits$}",
                r.mean * scale,
                r.variance * scale * scale,
                digits = digits
            )
        };
        for (metric, scale, digits) in [("rmse", 1.0, 2), ("accuracy", 100.0, 1)] {
            for algo in Algorithm::ALL {
                let mut rec = vec![metric.to_string(), algo.label().to_string()];
                for &p in &self.presets {
                    let cell = self.cell(p, algo).expect("every preset has every algorithm");
                    let r = if metric == "rmse" { &cell.rmse } else { &cell.accuracy };
                    rec.push(fmt(r, scale, digits));
                }
                w.write_record(&rec)?;
            }
        }
        let mut rec = vec!["accuracy".to_string(), "Ground Truth".to_string()];
        rec.extend(self.truth_accuracy.iter().map(|r| fmt(r, 100.0, 1)));
        w.write_record(&rec)?;
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    /// Every seed's metrics as flat rows.
    pub fn write_seed_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["preset", "seed", "algorithm", "rmse", "accuracy", "truth_accuracy"])?;
        for o in &self.outcomes {
            for algo in Algorithm::ALL {
                w.write_record([
                    o.preset.to_string(),
                    o.seed.to_string(),
                    algo.name().to_string(),
                    o.rmse_of(algo).to_string(),
                    o.accuracy_of(algo).to_string(),
                    o.truth_accuracy.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }
}

/// Runs every (preset, seed) pair, in parallel, and aggregates in seed order.
pub fn table2(presets: &[usize], seeds: &[u64], opts: &ExperimentOptions) -> Result<Table2> {
    let configs = presets
        .iter()
        .map(|&p| table1_config(p).map(|c| (p, c)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, SynthConfig)> = configs
        .iter()
        .flat_map(|(p, c)| {
            seeds.iter().map(move |&s| {
                let mut cfg = c.with_seed(s);
                cfg.scales = opts.scales;
                (*p, cfg)
            })
        })
        .collect();
    let outcomes = opts.pool()?.install(|| {
        jobs.par_iter()
            .map(|(p, cfg)| table2_seed(cfg, *p, opts))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut cells = Vec::new();
    let mut truth_accuracy = Vec::new();
    for &(p, cfg) in &configs {
        let rows: Vec<&SeedOutcome> = outcomes.iter().filter(|o| o.preset == p).collect();
        let desc = format!(
            "Data-{p}: {} sites x {} samples, {} features, {} sites/cluster, {} covariates",
            cfg.n_sites, cfg.samples_per_site, cfg.n_features, cfg.sites_per_cluster, cfg.n_covariates
        );
        for algo in Algorithm::ALL {
            cells.push(Table2Cell {
                preset: p,
                algorithm: algo,
                rmse: EvalReport::new("rmse", &desc, seeds.to_vec(), rows.iter().map(|o| o.rmse_of(algo)).collect()),
                accuracy: EvalReport::new(
                    "accuracy",
                    &desc,
                    seeds.to_vec(),
                    rows.iter().map(|o| o.accuracy_of(algo)).collect(),
                ),
            });
        }
        truth_accuracy.push(EvalReport::new(
            "truth_accuracy",
            &desc,
            seeds.to_vec(),
            rows.iter().map(|o| o.truth_accuracy).collect(),
        ));
    }
    Ok(Table2 {
        presets: presets.to_vec(),
        seeds: seeds.to_vec(),
        cells,
        truth_accuracy,
        outcomes,
    })
}

/// Site and cluster classification accuracy before and after Cluster ComBat.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityOutcome {
    pub n_sites: usize,
    pub n_clusters: usize,
    pub site_before: f64,
    pub site_after: f64,
    pub cluster_before: f64,
    pub cluster_after: f64,
}

/// Rows of every site split 70/30 at random; a logistic regression is trained
/// to predict the site (and the generating cluster) from raw and from Cluster
/// ComBat-harmonized features.
pub fn identifiability(cfg: &SynthConfig, opts: &ExperimentOptions) -> Result<IdentifiabilityOutcome> {
    let (ds, truth) = generate(cfg)?;
    let n_clusters = opts.n_clusters.unwrap_or_else(|| cfg.n_clusters());
    let fit = cluster_combat_fit(&ds, &opts.cluster(n_clusters, cfg.seed))?;
    let harmonized = fit.artifact.harmonize(&ds)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_rows, mut test_rows) = (Vec::new(), Vec::new());
    for code in 0..ds.n_sites() {
        let mut rows = ds.rows_of_site(code).to_vec();
        rows.shuffle(&mut rng);
        let n_train = ((1.0 - opts.test_fraction) * rows.len() as f64).round() as usize;
        train_rows.extend_from_slice(&rows[..n_train]);
        test_rows.extend_from_slice(&rows[n_train..]);
    }
    let sites = ds.site_codes();
    let clusters = truth.row_clusters(&ds);
    let score = |x: &Matrix, y: &[usize], k: usize| -> Result<f64> {
        let pick = |rows: &[usize]| rows.iter().map(|&r| y[r]).collect::<Vec<_>>();
        let model = logreg_fit(&x.select_rows(&train_rows), &pick(&train_rows), k, &opts.logreg)?;
        classification_accuracy(&model.predict(&x.select_rows(&test_rows))?, &pick(&test_rows))
    };
    let c = cfg.n_clusters();
    Ok(IdentifiabilityOutcome {
        n_sites: ds.n_sites(),
        n_clusters: c,
        site_before: score(ds.features(), sites, ds.n_sites())?,
        site_after: score(&harmonized, sites, ds.n_sites())?,
        cluster_before: score(ds.features(), &clusters, c)?,
        cluster_after: score(&harmonized, &clusters, c)?,
    })
}

/// Downstream regression of the first covariate from harmonized features:
/// trained on the training sites, MAE on the held-out sites.
pub fn regression_mae(cfg: &SynthConfig, algos: &[Algorithm], opts: &ExperimentOptions) -> Result<Vec<(Algorithm, f64)>> {
    let (ds, _) = generate(cfg)?;
    if ds.n_covariates() == 0 {
        return Err(Error::InvalidArgument("regression target needs at least one covariate".into()));
    }
    let (_, _, split) = split_by_sites(&ds, held_out_sites(cfg, opts), cfg.seed)?;
    let n_clusters = opts.n_clusters.unwrap_or_else(|| cfg.n_clusters());
    let target = ds.covariates().column(0);
    algos
        .iter()
        .map(|&algo| {
            let out = harmonize_split(&ds, &split, algo, n_clusters, cfg.seed, opts)?;
            let y_train: Vec<f64> = out.train_rows.iter().map(|&r| target[r]).collect();
            let y_test: Vec<f64> = out.test_rows.iter().map(|&r| target[r]).collect();
            let pred = linreg_fit_predict(&out.train, &y_train, &out.test)?;
            Ok((algo, mae(&pred, &y_test)?))
        })
        .collect()
}

/// Held-out reconstruction RMSE of Cluster ComBat for each cluster count.
pub fn k_sweep(cfg: &SynthConfig, ks: &[usize], opts: &ExperimentOptions) -> Result<Vec<(usize, f64)>> {
    let (ds, truth) = generate(cfg)?;
    let (_, _, split) = split_by_sites(&ds, held_out_sites(cfg, opts), cfg.seed)?;
    ks.iter()
        .map(|&k| {
            let out = harmonize_split(&ds, &split, Algorithm::ClusterCombat, k, cfg.seed, opts)?;
            Ok((k, rmse(&out.test, &truth.ground_truth.select_rows(&out.test_rows))?))
        })
        .collect()
}

/// Cost and effect of onboarding one held-out site against a distributed model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnboardingTiming {
    /// Fastest of the repetitions, in seconds.
    pub onboard_secs: f64,
    pub refit_secs: f64,
    /// The stored global parameters and effects compare equal afterwards.
    pub model_unchanged: bool,
    pub rmse_raw: f64,
    pub rmse_onboarded: f64,
}

/// Trains Distributed Cluster ComBat without the last site, onboards it, and
/// times that against a full protocol run that includes it.
pub fn onboarding_timing(cfg: &SynthConfig, repeats: usize, opts: &ExperimentOptions) -> Result<OnboardingTiming> {
    let (ds, truth) = generate(cfg)?;
    let n_clusters = opts.n_clusters.unwrap_or_else(|| cfg.n_clusters());
    let new_site = ds.site_ids()[ds.n_sites() - 1].clone();
    let (train_rows, new_rows): (Vec<usize>, Vec<usize>) =
        (0..ds.n_samples()).partition(|&r| ds.site_of()[r] != new_site);
    let train = ds.subset_rows(&train_rows)?;
    let fresh = ds.subset_rows(&new_rows)?;
    let dopts = opts.distributed(DistributedMode::Clustered, n_clusters, cfg.seed);
    let run = run_distributed(&train, &dopts, &mut InMemoryTransport::new())?;
    let (global, effects) = (run.global.clone(), run.effects.clone());

    let mut onboard_secs = f64::INFINITY;
    let mut onboarded = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let out = onboard_unseen_site(&fresh, &run.global, &run.effects)?;
        onboard_secs = onboard_secs.min(t.elapsed().as_secs_f64());
        onboarded = Some(out);
    }
    let mut refit_secs = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        run_distributed(&ds, &dopts, &mut InMemoryTransport::new())?;
        refit_secs = refit_secs.min(t.elapsed().as_secs_f64());
    }
    let onboarded = onboarded.expect("at least one repetition");
    let gt = truth.ground_truth.select_rows(&new_rows);
    Ok(OnboardingTiming {
        onboard_secs,
        refit_secs,
        model_unchanged: global == run.global && effects == run.effects,
        rmse_raw: rmse(fresh.features(), &gt)?,
        rmse_onboarded: rmse(&onboarded.harmonized, &gt)?,
    })
}
