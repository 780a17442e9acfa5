//! Synthetic multi-site data with cluster-level batch effects.
//!
//! y_ijg ~ Normal(α_g + X_ij β_g + γ_cg, δ_cg² σ_g²), where c is the cluster of
//! site i. Sites are assigned to clusters contiguously. Each sample carries a
//! binary label that shifts every covariate to +0.5 or −0.5, so the ground
//! truth α_g + X_ij β_g is linearly separable by label.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Schema};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Spread of the latent parameters.
///
/// The defaults are calibration choices: they put the reconstruction errors of
/// the five presets in the range of the published simulation study. They are
/// not values taken from any publication.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectScales {
    /// Standard deviation of α_g.
    pub alpha: f64,
    /// Standard deviation of each β entry.
    pub beta: f64,
    /// Standard deviation of γ_cg.
    pub gamma: f64,
    /// δ_cg ~ Uniform(delta_low, delta_high).
    pub delta_low: f64,
    pub delta_high: f64,
    /// σ_g ~ sigma · Uniform(0.5, 1.5).
    pub sigma: f64,
    /// Mean shift of every covariate for positive (+) and negative (−) labels.
    pub covariate_shift: f64,
    /// Standard deviation of each covariate around its label-dependent mean.
    pub covariate_sd: f64,
    /// Subtract the across-cluster mean from γ_cg, so that the batch effects
    /// of a balanced design average to zero and α_g + X_ij β_g is the
    /// identifiable harmonization target.
    pub center_gamma: bool,
}

impl Default for EffectScales {
    fn default() -> Self {
        EffectScales {
            alpha: 1.0,
            beta: 6.0,
            gamma: 20.0,
            delta_low: 0.5,
            delta_high: 2.5,
            sigma: 3.5,
            covariate_shift: 0.5,
            covariate_sd: 0.5,
            center_gamma: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sites: usize,
    pub samples_per_site: usize,
    pub n_features: usize,
    pub sites_per_cluster: usize,
    pub n_covariates: usize,
    pub seed: u64,
    pub scales: EffectScales,
}

impl SynthConfig {
    pub fn new(
        n_sites: usize,
        samples_per_site: usize,
        n_features: usize,
        sites_per_cluster: usize,
        n_covariates: usize,
    ) -> Self {
        SynthConfig {
            n_sites,
            samples_per_site,
            n_features,
            sites_per_cluster,
            n_covariates,
            seed: 0,
            scales: EffectScales::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn n_clusters(&self) -> usize {
        self.n_sites / self.sites_per_cluster
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_sites,
            self.samples_per_site,
            self.n_features,
            self.sites_per_cluster,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("synthetic counts must be >= 1".into()));
        }
        if self.n_sites % self.sites_per_cluster != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} sites cannot be split into clusters of {}",
                self.n_sites, self.sites_per_cluster
            )));
        }
        let s = &self.scales;
        let positive = [s.alpha, s.beta, s.sigma, s.covariate_sd];
        if positive.iter().any(|v| !(*v >= 0.0) || !v.is_finite())
            || !(s.gamma >= 0.0)
            || !(s.delta_low > 0.0 && s.delta_high >= s.delta_low)
        {
            return Err(Error::InvalidArgument("invalid effect scales".into()));
        }
        Ok(())
    }
}

/// The five simulation presets (1-based index).
pub fn table1_config(index: usize) -> Result<SynthConfig> {
    let (m, n, g) = match index {
        1 => (20, 20, 20),
        2 => (25, 25, 25),
        3 => (30, 30, 30),
        4 => (35, 35, 40),
        5 => (40, 40, 50),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "preset index must be 1..=5, got {index}"
            )))
        }
    };
    Ok(SynthConfig::new(m, n, g, 5, 5))
}

/// Nine sites in three clusters, used to check that site-parameter clustering
/// recovers the sample-space cluster structure.
pub fn parameter_space_config() -> SynthConfig {
    SynthConfig::new(9, 10, 20, 3, 5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratingParams {
    pub alpha: Vec<f64>,
    /// P×G
    pub beta: Matrix,
    /// C×G
    pub gamma: Matrix,
    /// C×G
    pub delta: Matrix,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    /// α_g + X_ij β_g, N×G.
    pub ground_truth: Matrix,
    pub labels: Vec<u8>,
    pub cluster_of_site: BTreeMap<String, usize>,
    pub params: GeneratingParams,
}

impl SynthTruth {
    /// Generating cluster of every row of `ds`.
    pub fn row_clusters(&self, ds: &Dataset) -> Vec<usize> {
        ds.site_of().iter().map(|s| self.cluster_of_site[s]).collect()
    }

    pub fn subset_rows(&self, rows: &[usize]) -> SynthTruth {
        SynthTruth {
            ground_truth: self.ground_truth.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            cluster_of_site: self.cluster_of_site.clone(),
            params: self.params.clone(),
        }
    }
}

pub fn site_name(i: usize) -> String {
    format!("site{:02}", i + 1)
}

/// Draws a dataset and its ground truth. Latent parameters come from one
/// stream; each site's samples come from their own stream keyed by the site
/// index.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    cfg.validate()?;
    let s = cfg.scales;
    let (m, n_i, g, p) = (cfg.n_sites, cfg.samples_per_site, cfg.n_features, cfg.n_covariates);
    let c = cfg.n_clusters();
    let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::InvalidArgument(e.to_string()));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let alpha: Vec<f64> = normal(s.alpha)?.sample_iter(&mut rng).take(g).collect();
    let beta = {
        let d = normal(s.beta)?;
        Matrix::from_fn(p, g, |_, _| d.sample(&mut rng))
    };
    let mut gamma = {
        let d = normal(s.gamma)?;
        Matrix::from_fn(c, g, |_, _| d.sample(&mut rng))
    };
    if s.center_gamma && c > 1 {
        for f in 0..g {
            let m = (0..c).map(|k| gamma[(k, f)]).sum::<f64>() / c as f64;
            (0..c).for_each(|k| gamma[(k, f)] -= m);
        }
    }
    let delta = {
        let d = Uniform::new_inclusive(s.delta_low, s.delta_high);
        Matrix::from_fn(c, g, |_, _| d.sample(&mut rng))
    };
    let sigma: Vec<f64> = Uniform::new(0.5, 1.5)
        .sample_iter(&mut rng)
        .take(g)
        .map(|u| u * s.sigma)
        .collect();

    let noise = normal(1.0)?;
    let cov_noise = normal(s.covariate_sd)?;
    let n = m * n_i;
    let mut features = Matrix::zeros(n, g);
    let mut covariates = Matrix::zeros(n, p);
    let mut truth = Matrix::zeros(n, g);
    let mut labels = Vec::with_capacity(n);
    let mut site_of = Vec::with_capacity(n);
    let mut cluster_of_site = BTreeMap::new();
    for site in 0..m {
        let cluster = site / cfg.sites_per_cluster;
        cluster_of_site.insert(site_name(site), cluster);
        let mut srng = ChaCha8Rng::seed_from_u64(cfg.seed);
        srng.set_stream(site as u64 + 1);
        // balanced labels; an odd extra sample gets a coin flip
        let mut site_labels: Vec<u8> = (0..n_i).map(|j| u8::from(j < n_i / 2)).collect();
        if n_i % 2 == 1 {
            site_labels[n_i - 1] = u8::from(srng.gen_bool(0.5));
        }
        site_labels.shuffle(&mut srng);
        for (j, &label) in site_labels.iter().enumerate() {
            let row = site * n_i + j;
            let shift = if label == 1 { s.covariate_shift } else { -s.covariate_shift };
            for k in 0..p {
                covariates[(row, k)] = shift + cov_noise.sample(&mut srng);
            }
            for f in 0..g {
                let mut mu = alpha[f];
                for k in 0..p {
                    mu += covariates[(row, k)] * beta[(k, f)];
                }
                truth[(row, f)] = mu;
                features[(row, f)] =
                    mu + gamma[(cluster, f)] + delta[(cluster, f)] * sigma[f] * noise.sample(&mut srng);
            }
            labels.push(label);
            site_of.push(site_name(site));
        }
    }
    let ds = Dataset::new(features, covariates, site_of)?;
    Ok((
        ds,
        SynthTruth {
            ground_truth: truth,
            labels,
            cluster_of_site,
            params: GeneratingParams {
                alpha,
                beta,
                gamma,
                delta,
                sigma,
            },
        },
    ))
}

/// Writes `data.csv`, `schema.json`, `truth.csv` and `params.json` into `dir`.
pub fn write_outputs(dir: &Path, cfg: &SynthConfig, ds: &Dataset, truth: &SynthTruth) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ds.save_csv(&dir.join("data.csv"))?;
    let path = dir.join("schema.json");
    let schema = serde_json::to_string_pretty(&Schema::for_dataset(ds))?;
    std::fs::write(&path, schema).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("truth.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["site".to_string(), "cluster".to_string(), "label".to_string()];
    header.extend(ds.feature_names.iter().map(|f| format!("truth_{f}")));
    w.write_record(&header)?;
    for r in 0..ds.n_samples() {
        let site = &ds.site_of()[r];
        let mut rec = vec![
            site.clone(),
            truth.cluster_of_site[site].to_string(),
            truth.labels[r].to_string(),
        ];
        rec.extend(truth.ground_truth.row(r).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    #[derive(Serialize)]
    struct ParamsDoc<'a> {
        config: &'a SynthConfig,
        cluster_of_site: &'a BTreeMap<String, usize>,
        generating_params: &'a GeneratingParams,
    }
    let path = dir.join("params.json");
    let doc = ParamsDoc {
        config: cfg,
        cluster_of_site: &truth.cluster_of_site,
        generating_params: &truth.params,
    };
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads `truth.csv` back: ground-truth rows, labels and clusters.
pub fn read_truth(path: &Path) -> Result<(Matrix, Vec<u8>, Vec<usize>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut clusters = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |col: usize| -> Result<f64> {
            let raw = rec.get(col).unwrap_or("");
            raw.parse().map_err(|_| Error::Parse {
                row: i + 1,
                column: col.to_string(),
                value: raw.to_string(),
            })
        };
        clusters.push(parse(1)? as usize);
        labels.push(parse(2)? as u8);
        rows.push((3..rec.len()).map(parse).collect::<Result<Vec<_>>>()?);
    }
    let g = rows.first().map_or(0, Vec::len);
    Ok((Matrix::from_rows(&rows, g)?, labels, clusters))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let c1 = table1_config(1).unwrap();
        assert_eq!((c1.n_sites, c1.samples_per_site, c1.n_features), (20, 20, 20));
        assert_eq!((c1.sites_per_cluster, c1.n_covariates), (5, 5));
        let c5 = table1_config(5).unwrap();
        assert_eq!((c5.n_sites, c5.samples_per_site, c5.n_features), (40, 40, 50));
        assert!(table1_config(6).is_err());
        assert!(table1_config(0).is_err());
    }

    #[test]
    fn invalid_cluster_size() {
        let cfg = SynthConfig::new(10, 4, 3, 3, 1);
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn same_cluster_shares_effects() {
        let cfg = SynthConfig::new(6, 4, 3, 3, 2).with_seed(9);
        let (ds, truth) = generate(&cfg).unwrap();
        assert_eq!(truth.params.gamma.nrows(), 2);
        assert_eq!(truth.cluster_of_site["site01"], truth.cluster_of_site["site03"]);
        assert_ne!(truth.cluster_of_site["site03"], truth.cluster_of_site["site04"]);
        assert_eq!(ds.n_samples(), 24);
        let positives = truth.labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(positives, 12);
    }

    #[test]
    fn null_effects() {
        let mut cfg = SynthConfig::new(4, 6, 3, 2, 1).with_seed(2);
        cfg.scales.gamma = 0.0;
        cfg.scales.delta_low = 1.0;
        cfg.scales.delta_high = 1.0;
        let (_, truth) = generate(&cfg).unwrap();
        assert!(truth.params.gamma.as_slice().iter().all(|&v| v == 0.0));
        assert!(truth.params.delta.as_slice().iter().all(|&v| v == 1.0));
    }
}
