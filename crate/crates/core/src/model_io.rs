//! Persisted models: one JSON document per fitted harmonizer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_combat_fit, ClusterCombatArtifact, ClusterCombatOptions, KMeansOptions};
use crate::combat::{self, combat_fit, BatchEffects, CombatModel, CombatOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::Algorithm;
use crate::federated::{
    onboard_unseen_site, run_distributed, site_harmonize, DistributedMode, DistributedOptions, GlobalParams,
    InMemoryTransport, Weighting,
};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algorithm", rename_all = "kebab-case")]
pub enum ModelArtifact {
    Combat(CombatModel),
    ClusterCombat(ClusterCombatArtifact),
    DistCombat { global: GlobalParams, effects: BatchEffects },
    DistClusterCombat { global: GlobalParams, effects: BatchEffects },
}

impl ModelArtifact {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            ModelArtifact::Combat(_) => Algorithm::Combat,
            ModelArtifact::ClusterCombat(_) => Algorithm::ClusterCombat,
            ModelArtifact::DistCombat { .. } => Algorithm::DistCombat,
            ModelArtifact::DistClusterCombat { .. } => Algorithm::DistClusterCombat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub feature_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub artifact: ModelArtifact,
}

/// Settings for [`fit_model`]; fields that do not apply to the chosen
/// algorithm are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub algorithm: Algorithm,
    pub n_clusters: usize,
    pub seed: u64,
    pub kmeans: KMeansOptions,
    pub combat: CombatOptions,
    pub cluster_standardized: bool,
    pub weighting: Weighting,
    pub standardize_params: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            algorithm: Algorithm::Combat,
            n_clusters: 5,
            seed: 0,
            kmeans: KMeansOptions::default(),
            combat: CombatOptions::default(),
            cluster_standardized: false,
            weighting: Weighting::Uniform,
            standardize_params: false,
        }
    }
}

/// Harmonized rows and the batch group each row was assigned to.
#[derive(Clone, Debug, PartialEq)]
pub struct Harmonized {
    pub features: Matrix,
    pub groups: Vec<usize>,
}

pub fn fit_model(ds: &Dataset, cfg: &FitConfig) -> Result<ModelDocument> {
    let distributed = |mode| DistributedOptions {
        mode,
        n_clusters: cfg.n_clusters,
        seed: cfg.seed,
        weighting: cfg.weighting,
        standardize_params: cfg.standardize_params,
        kmeans: cfg.kmeans,
        combat: cfg.combat,
    };
    let artifact = match cfg.algorithm {
        Algorithm::None => {
            return Err(Error::InvalidArgument("`none` has no model to fit".into()));
        }
        Algorithm::Combat => ModelArtifact::Combat(combat_fit(ds, &cfg.combat)?),
        Algorithm::ClusterCombat => {
            let opts = ClusterCombatOptions {
                n_clusters: cfg.n_clusters,
                seed: cfg.seed,
                kmeans: cfg.kmeans,
                cluster_standardized: cfg.cluster_standardized,
                combat: cfg.combat,
            };
            ModelArtifact::ClusterCombat(cluster_combat_fit(ds, &opts)?.artifact)
        }
        Algorithm::DistCombat => {
            let run = run_distributed(ds, &distributed(DistributedMode::PerSite), &mut InMemoryTransport::new())?;
            ModelArtifact::DistCombat {
                global: run.global,
                effects: run.effects,
            }
        }
        Algorithm::DistClusterCombat => {
            let run = run_distributed(ds, &distributed(DistributedMode::Clustered), &mut InMemoryTransport::new())?;
            ModelArtifact::DistClusterCombat {
                global: run.global,
                effects: run.effects,
            }
        }
    };
    Ok(ModelDocument::new(ds, artifact))
}

impl ModelDocument {
    pub fn new(ds: &Dataset, artifact: ModelArtifact) -> Self {
        ModelDocument {
            format_version: FORMAT_VERSION,
            feature_names: ds.feature_names.clone(),
            covariate_names: ds.covariate_names.clone(),
            artifact,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let version = serde_json::from_str::<serde_json::Value>(text)?
            .get("format_version")
            .and_then(serde_json::Value::as_u64);
        if version != Some(u64::from(FORMAT_VERSION)) {
            return Err(Error::ModelMismatch(format!(
                "unsupported model format version {version:?} (expected {FORMAT_VERSION})"
            )));
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Rejects data whose feature or covariate layout differs from the model.
    pub fn check_columns(&self, ds: &Dataset) -> Result<()> {
        if ds.n_features() != self.feature_names.len() || ds.n_covariates() != self.covariate_names.len() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features and {} covariates, data has {} and {}",
                self.feature_names.len(),
                self.covariate_names.len(),
                ds.n_features(),
                ds.n_covariates()
            )));
        }
        if ds.feature_names != self.feature_names || ds.covariate_names != self.covariate_names {
            return Err(Error::DimensionMismatch("column names differ from the model's".into()));
        }
        Ok(())
    }

    /// Harmonizes rows from sites that took part in the fit. Cluster ComBat
    /// accepts any site.
    pub fn harmonize(&self, ds: &Dataset) -> Result<Harmonized> {
        self.check_columns(ds)?;
        match &self.artifact {
            ModelArtifact::Combat(model) => {
                let features = model.harmonize(ds)?;
                let groups = ds
                    .site_of()
                    .iter()
                    .map(|s| model.effects.group_labels.iter().position(|l| l == s).unwrap_or(0))
                    .collect();
                Ok(Harmonized { features, groups })
            }
            ModelArtifact::ClusterCombat(a) => {
                let groups = a.predict_clusters(ds)?;
                let features = combat::harmonize(ds, &a.feature_model, &a.effects, &groups)?;
                Ok(Harmonized { features, groups })
            }
            ModelArtifact::DistCombat { global, effects } | ModelArtifact::DistClusterCombat { global, effects } => {
                per_site(ds, |site| {
                    let id = &site.site_ids()[0];
                    let cluster = *global.cluster_of_site.get(id).ok_or_else(|| {
                        Error::ModelMismatch(format!("site `{id}` did not take part in the federation; onboard it instead"))
                    })?;
                    Ok((site_harmonize(site, global, effects, cluster)?, cluster))
                })
            }
        }
    }

    /// Harmonizes sites that were not part of the fit, without changing the model.
    pub fn onboard(&self, ds: &Dataset) -> Result<Harmonized> {
        self.check_columns(ds)?;
        match &self.artifact {
            ModelArtifact::ClusterCombat(_) => self.harmonize(ds),
            ModelArtifact::DistClusterCombat { global, effects } => per_site(ds, |site| {
                let out = onboard_unseen_site(site, global, effects)?;
                Ok((out.harmonized, out.cluster))
            }),
            ModelArtifact::Combat(_) | ModelArtifact::DistCombat { .. } => Err(Error::ModelMismatch(format!(
                "{} cannot harmonize unseen sites; refit including them",
                self.artifact.algorithm().label()
            ))),
        }
    }
}

fn per_site<F>(ds: &Dataset, mut f: F) -> Result<Harmonized>
where
    F: FnMut(&Dataset) -> Result<(Matrix, usize)>,
{
    let mut features = Matrix::zeros(ds.n_samples(), ds.n_features());
    let mut groups = vec![0; ds.n_samples()];
    for code in 0..ds.n_sites() {
        let rows = ds.rows_of_site(code);
        let (h, cluster) = f(&ds.subset_rows(rows)?)?;
        for (k, &r) in rows.iter().enumerate() {
            features.row_mut(r).copy_from_slice(h.row(k));
            groups[r] = cluster;
        }
    }
    Ok(Harmonized { features, groups })
}
