//! Distributed ComBat and Distributed Cluster ComBat.
//!
//! Four message rounds between sites and a coordinator:
//!
//! 1. sites → coordinator: local least-squares summaries ([`SiteLocalParams`]);
//! 2. coordinator → sites: global α̂, β̂, σ̂ and the site clustering ([`GlobalParams`]);
//! 3. sites → coordinator: local empirical Bayes posteriors ([`SiteEBParams`]);
//! 4. coordinator → sites: cluster-averaged posteriors ([`BatchEffects`]).
//!
//! Each site then harmonizes its own rows. Raw rows never leave a site.
//! A site that joins later fits its local summary, picks its cluster from the
//! stored centroids and harmonizes without any round trip.

mod messages;
mod transport;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_fit, kmeans_predict, ClusterModel, ClusterSpace, KMeansOptions};
use crate::combat::{self, BatchEffects, CombatOptions, FeatureWiseModel, VARIANCE_FLOOR};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, OlsSolver};

pub use messages::{
    GlobalParams, ParamScaling, Payload, Round, RoundMessage, SiteEBParams, SiteLocalParams, COORDINATOR,
    PROTOCOL_VERSION,
};
pub use transport::{FileTransport, InMemoryTransport, Transport};

/// Ridge used when a site's local normal equations are singular.
pub const LOCAL_RIDGE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributedMode {
    /// One cluster per site: Distributed ComBat.
    PerSite,
    /// K-means over site parameter vectors: Distributed Cluster ComBat.
    Clustered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Uniform,
    BySamples,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributedOptions {
    pub mode: DistributedMode,
    pub n_clusters: usize,
    pub seed: u64,
    pub weighting: Weighting,
    /// z-score each parameter coordinate across sites before clustering.
    pub standardize_params: bool,
    pub kmeans: KMeansOptions,
    pub combat: CombatOptions,
}

impl Default for DistributedOptions {
    fn default() -> Self {
        DistributedOptions {
            mode: DistributedMode::Clustered,
            n_clusters: 5,
            seed: 0,
            weighting: Weighting::Uniform,
            standardize_params: false,
            kmeans: KMeansOptions::default(),
            combat: CombatOptions::default(),
        }
    }
}

fn single_site_id(ds: &Dataset) -> Result<&str> {
    match ds.site_ids() {
        [id] => Ok(id),
        ids => Err(Error::InvalidArgument(format!(
            "expected data from exactly one site, got {}",
            ids.len()
        ))),
    }
}

/// Per-feature OLS of the site's rows on [1 | covariates].
pub fn site_local_fit(ds: &Dataset) -> Result<SiteLocalParams> {
    let site_id = single_site_id(ds)?.to_string();
    let (n, p, g) = (ds.n_samples(), ds.n_covariates(), ds.n_features());
    if n < 2 {
        return Err(Error::UnderDetermined(format!(
            "site `{site_id}` has {n} sample(s); at least 2 are required"
        )));
    }
    let design = Matrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { ds.covariates()[(i, j - 1)] });
    let (solver, ridge_fallback) = match OlsSolver::new(&design, 0.0) {
        Ok(s) if n > p + 1 => (s, false),
        _ => {
            log::warn!("site `{site_id}`: local design is under-determined, using ridge {LOCAL_RIDGE:e}");
            (OlsSolver::new(&design, LOCAL_RIDGE)?, true)
        }
    };
    let mut alpha_local = vec![0.0; g];
    let mut beta_local = Matrix::zeros(p, g);
    for f in 0..g {
        let sol = solver.solve(&ds.features().column(f))?;
        alpha_local[f] = sol.coefficients[0];
        for k in 0..p {
            beta_local[(k, f)] = sol.coefficients[k + 1];
        }
    }
    let y = ds.features();
    Ok(SiteLocalParams {
        site_id,
        alpha_local,
        beta_local,
        gamma_local: vec![0.0; g],
        gram: design.gram(),
        cross: design.transpose().matmul(y)?,
        sum_sq: (0..g).map(|f| y.column(f).iter().map(|v| v * v).sum()).collect(),
        n_samples: n,
        ridge_fallback,
    })
}

/// [α̂_i ‖ vec(β̂_i) ‖ γ̂_i]
fn parameter_vector(alpha_local: &[f64], beta_local: &Matrix, gamma: &[f64]) -> Vec<f64> {
    let mut v = alpha_local.to_vec();
    v.extend_from_slice(beta_local.as_slice());
    v.extend_from_slice(gamma);
    v
}

/// Averages local summaries into global parameters and clusters the sites in
/// parameter space.
pub fn server_aggregate_global(msgs: &[SiteLocalParams], opts: &DistributedOptions) -> Result<GlobalParams> {
    if msgs.len() < 2 {
        return Err(Error::Protocol(format!("need at least 2 sites, got {}", msgs.len())));
    }
    let mut msgs: Vec<&SiteLocalParams> = msgs.iter().collect();
    msgs.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    if msgs.windows(2).any(|w| w[0].site_id == w[1].site_id) {
        return Err(Error::Protocol("duplicate site id among local summaries".into()));
    }
    let g = msgs[0].alpha_local.len();
    let p = msgs[0].beta_local.nrows();
    for m in &msgs {
        if m.alpha_local.len() != g
            || m.beta_local.shape() != (p, g)
            || m.gram.shape() != (p + 1, p + 1)
            || m.cross.shape() != (p + 1, g)
            || m.sum_sq.len() != g
        {
            return Err(Error::DimensionMismatch(format!(
                "site `{}` reports a different feature/covariate layout",
                m.site_id
            )));
        }
    }
    let total: usize = msgs.iter().map(|m| m.n_samples).sum();
    let weights: Vec<f64> = match opts.weighting {
        Weighting::Uniform => vec![1.0 / msgs.len() as f64; msgs.len()],
        Weighting::BySamples => msgs.iter().map(|m| m.n_samples as f64 / total as f64).collect(),
    };

    let mut alpha = vec![0.0; g];
    let mut beta = Matrix::zeros(p, g);
    for (m, &w) in msgs.iter().zip(&weights) {
        for f in 0..g {
            alpha[f] += w * m.alpha_local[f];
            for k in 0..p {
                beta[(k, f)] += w * m.beta_local[(k, f)];
            }
        }
    }
    // Σ_ij (y − a_ig − X β̂_g)², expanded over each site's moments, where a_ig
    // is the site intercept that minimizes the site's residuals given β̂_g.
    let mut rss = vec![0.0; g];
    for m in &msgs {
        let n_i = m.gram[(0, 0)];
        for (f, r) in rss.iter_mut().enumerate() {
            let slope: f64 = (0..p).map(|k| m.gram[(0, k + 1)] * beta[(k, f)]).sum();
            let b: Vec<f64> = std::iter::once((m.cross[(0, f)] - slope) / n_i)
                .chain((0..p).map(|k| beta[(k, f)]))
                .collect();
            let cross: f64 = (0..=p).map(|k| b[k] * m.cross[(k, f)]).sum();
            let quad: f64 = (0..=p)
                .map(|k| b[k] * (0..=p).map(|l| m.gram[(k, l)] * b[l]).sum::<f64>())
                .sum();
            *r += (m.sum_sq[f] - 2.0 * cross + quad).max(0.0);
        }
    }
    let mut sigma = Vec::with_capacity(g);
    for (f, r) in rss.iter().enumerate() {
        let s = (r / total as f64).sqrt();
        sigma.push(if s >= VARIANCE_FLOOR {
            s
        } else if opts.combat.fit.variance_floor {
            VARIANCE_FLOOR
        } else {
            return Err(Error::DegenerateFeature { feature: f, sigma: s });
        });
    }

    let gamma_hat: BTreeMap<String, Vec<f64>> = msgs
        .iter()
        .map(|m| {
            let gam = m.alpha_local.iter().zip(&alpha).map(|(a, b)| a - b).collect();
            (m.site_id.clone(), gam)
        })
        .collect();
    let rows: Vec<Vec<f64>> = msgs
        .iter()
        .map(|m| parameter_vector(&m.alpha_local, &m.beta_local, &gamma_hat[&m.site_id]))
        .collect();
    let mut points = Matrix::from_rows(&rows, 0)?;
    let param_scaling = opts.standardize_params.then(|| {
        let d = points.ncols();
        let q = points.nrows() as f64;
        let mean: Vec<f64> = (0..d).map(|j| points.column(j).iter().sum::<f64>() / q).collect();
        let scale = (0..d)
            .map(|j| {
                let sd = (points.column(j).iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / q).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        ParamScaling { mean, scale }
    });
    if let Some(sc) = &param_scaling {
        for i in 0..points.nrows() {
            sc.apply(points.row_mut(i));
        }
    }

    let (cluster_model, labels) = match opts.mode {
        DistributedMode::PerSite => {
            let labels: Vec<usize> = (0..msgs.len()).collect();
            (ClusterModel::from_labels(&points, &labels, ClusterSpace::SiteParameter)?, labels)
        }
        DistributedMode::Clustered => {
            if opts.n_clusters == 0 || opts.n_clusters > msgs.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} clusters requested for {} sites",
                    opts.n_clusters,
                    msgs.len()
                )));
            }
            let fit = kmeans_fit(&points, opts.n_clusters, opts.seed, &opts.kmeans, ClusterSpace::SiteParameter)?;
            let labels = kmeans_predict(&fit.model, &points)?;
            (fit.model, labels)
        }
    };
    let cluster_of_site = msgs.iter().zip(labels).map(|(m, c)| (m.site_id.clone(), c)).collect();
    Ok(GlobalParams {
        alpha,
        beta,
        sigma,
        gamma_hat,
        cluster_model,
        cluster_of_site,
        param_scaling,
    })
}

impl GlobalParams {
    pub fn n_features(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_model.n_clusters
    }

    /// The standardization model implied by the global parameters.
    pub fn feature_model(&self) -> FeatureWiseModel {
        let ids: Vec<String> = self.gamma_hat.keys().cloned().collect();
        let rows: Vec<Vec<f64>> = self.gamma_hat.values().cloned().collect();
        FeatureWiseModel {
            alpha: self.alpha.clone(),
            beta: self.beta.clone(),
            sigma: self.sigma.clone(),
            gamma_hat: Matrix::from_rows(&rows, self.alpha.len()).unwrap_or_else(|_| Matrix::zeros(0, 0)),
            site_sizes: vec![0; ids.len()],
            site_ids: ids,
        }
    }

    /// Cluster of a site from its local summary.
    pub fn predict_site_cluster(&self, local: &SiteLocalParams) -> Result<usize> {
        if local.alpha_local.len() != self.alpha.len() || local.beta_local.shape() != self.beta.shape() {
            return Err(Error::DimensionMismatch(format!(
                "site `{}` has a {}x{} covariate layout, the model expects {}x{}",
                local.site_id,
                local.beta_local.nrows(),
                local.alpha_local.len(),
                self.beta.nrows(),
                self.alpha.len()
            )));
        }
        let gamma: Vec<f64> = local.alpha_local.iter().zip(&self.alpha).map(|(a, b)| a - b).collect();
        let mut v = parameter_vector(&local.alpha_local, &local.beta_local, &gamma);
        if let Some(sc) = &self.param_scaling {
            sc.apply(&mut v);
        }
        let point = Matrix::from_vec(1, v.len(), v)?;
        Ok(kmeans_predict(&self.cluster_model, &point)?[0])
    }
}

/// Standardizes with the global parameters and runs EB with the site as a
/// single group.
pub fn site_local_eb(ds: &Dataset, global: &GlobalParams, opts: &CombatOptions) -> Result<SiteEBParams> {
    let site_id = single_site_id(ds)?.to_string();
    let model = global.feature_model();
    let z = combat::standardize(ds, &model)?;
    let groups = vec![0; ds.n_samples()];
    let priors = combat::fit_priors(&z, &groups)?;
    let effects = combat::eb_fit(&z, &groups, &priors, &opts.eb)?;
    Ok(SiteEBParams {
        site_id,
        gamma_star_local: effects.gamma_star.row(0).to_vec(),
        delta_sq_star_local: effects.delta_sq_star.row(0).to_vec(),
    })
}

/// Averages γ* and δ*² over the member sites of each cluster.
pub fn server_aggregate_cluster_effects(
    msgs: &[SiteEBParams],
    cluster_of_site: &BTreeMap<String, usize>,
    n_clusters: usize,
) -> Result<BatchEffects> {
    let g = msgs
        .first()
        .map(|m| m.gamma_star_local.len())
        .ok_or_else(|| Error::Protocol("no EB summaries received".into()))?;
    let mut msgs: Vec<&SiteEBParams> = msgs.iter().collect();
    msgs.sort_by(|a, b| a.site_id.cmp(&b.site_id));
    let mut gamma = Matrix::zeros(n_clusters, g);
    let mut delta = Matrix::zeros(n_clusters, g);
    let mut counts = vec![0usize; n_clusters];
    for m in msgs {
        let c = *cluster_of_site
            .get(&m.site_id)
            .ok_or_else(|| Error::Protocol(format!("site `{}` has no cluster", m.site_id)))?;
        if c >= n_clusters {
            return Err(Error::UnknownGroup(c));
        }
        if m.gamma_star_local.len() != g || m.delta_sq_star_local.len() != g {
            return Err(Error::DimensionMismatch(format!(
                "site `{}` sent EB summaries of the wrong length",
                m.site_id
            )));
        }
        counts[c] += 1;
        for f in 0..g {
            gamma[(c, f)] += m.gamma_star_local[f];
            delta[(c, f)] += m.delta_sq_star_local[f];
        }
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Protocol(format!("cluster {empty} has no member sites")));
    }
    for (c, &n) in counts.iter().enumerate() {
        gamma.row_mut(c).iter_mut().for_each(|x| *x /= n as f64);
        delta.row_mut(c).iter_mut().for_each(|x| *x /= n as f64);
    }
    Ok(BatchEffects {
        gamma_star: gamma,
        delta_sq_star: delta,
        group_labels: (0..n_clusters).map(|c| c.to_string()).collect(),
    })
}

/// Applies a cluster's effects to a site's rows.
pub fn site_harmonize(ds: &Dataset, global: &GlobalParams, effects: &BatchEffects, cluster: usize) -> Result<Matrix> {
    let groups = vec![cluster; ds.n_samples()];
    combat::harmonize(ds, &global.feature_model(), effects, &groups)
}

/// Outcome of a complete protocol run.
#[derive(Clone, Debug)]
pub struct DistributedRun {
    pub global: GlobalParams,
    pub effects: BatchEffects,
    /// Harmonized rows per site id.
    pub harmonized: BTreeMap<String, Matrix>,
}

impl DistributedRun {
    /// Reassembles the per-site outputs into the row order of `ds`.
    pub fn harmonized_like(&self, ds: &Dataset) -> Result<Matrix> {
        let mut out = Matrix::zeros(ds.n_samples(), ds.n_features());
        for (code, id) in ds.site_ids().iter().enumerate() {
            let h = self
                .harmonized
                .get(id)
                .ok_or_else(|| Error::ModelMismatch(format!("no harmonized output for site `{id}`")))?;
            for (k, &row) in ds.rows_of_site(code).iter().enumerate() {
                out.row_mut(row).copy_from_slice(h.row(k));
            }
        }
        Ok(out)
    }
}

fn expect_payload<T>(msgs: Vec<RoundMessage>, pick: impl Fn(Payload) -> Option<T>) -> Result<Vec<T>> {
    msgs.into_iter()
        .map(|m| {
            let round = m.round();
            pick(m.payload).ok_or_else(|| Error::Protocol(format!("unexpected {round} payload")))
        })
        .collect()
}

/// Simulates every site and the coordinator over `transport`.
pub fn run_distributed(ds: &Dataset, opts: &DistributedOptions, transport: &mut dyn Transport) -> Result<DistributedRun> {
    let sites = ds.split_per_site()?;
    if sites.len() < 2 {
        return Err(Error::InvalidArgument("the protocol needs at least 2 sites".into()));
    }
    let ids: Vec<String> = ds.site_ids().to_vec();
    let coordinator = [COORDINATOR.to_string()];

    // round 1
    let locals = sites.par_iter().map(site_local_fit).collect::<Result<Vec<_>>>()?;
    for local in locals {
        let sender = local.site_id.clone();
        transport.post(RoundMessage::new(sender, COORDINATOR, Payload::LocalParams(local))?)?;
    }
    let received = transport.collect(Round::LocalParams, COORDINATOR, &ids)?;
    let locals = expect_payload(received, |p| match p {
        Payload::LocalParams(x) => Some(x),
        _ => None,
    })?;
    let global = server_aggregate_global(&locals, opts)?;

    // round 2
    for id in &ids {
        transport.post(RoundMessage::new(COORDINATOR, id, Payload::GlobalParams(global.clone()))?)?;
    }
    let globals = ids
        .iter()
        .map(|id| {
            let msg = transport.collect(Round::GlobalParams, id, &coordinator)?;
            expect_payload(msg, |p| match p {
                Payload::GlobalParams(x) => Some(x),
                _ => None,
            })
            .map(|mut v| v.remove(0))
        })
        .collect::<Result<Vec<_>>>()?;

    // round 3
    let ebs = sites
        .par_iter()
        .zip(&globals)
        .map(|(site, g)| site_local_eb(site, g, &opts.combat))
        .collect::<Result<Vec<_>>>()?;
    for eb in ebs {
        let sender = eb.site_id.clone();
        transport.post(RoundMessage::new(sender, COORDINATOR, Payload::LocalEb(eb))?)?;
    }
    let received = transport.collect(Round::LocalEb, COORDINATOR, &ids)?;
    let ebs = expect_payload(received, |p| match p {
        Payload::LocalEb(x) => Some(x),
        _ => None,
    })?;
    let mut effects = server_aggregate_cluster_effects(&ebs, &global.cluster_of_site, global.n_clusters())?;
    if opts.mode == DistributedMode::PerSite {
        let mut labels = vec![String::new(); global.n_clusters()];
        for (site, &c) in &global.cluster_of_site {
            labels[c] = site.clone();
        }
        effects.group_labels = labels;
    }

    // round 4
    for id in &ids {
        transport.post(RoundMessage::new(COORDINATOR, id, Payload::ClusterEb(effects.clone()))?)?;
    }
    let mut delivered = Vec::with_capacity(ids.len());
    for id in &ids {
        let msg = transport.collect(Round::ClusterEb, id, &coordinator)?;
        let mut v = expect_payload(msg, |p| match p {
            Payload::ClusterEb(x) => Some(x),
            _ => None,
        })?;
        delivered.push(v.remove(0));
    }
    let harmonized = sites
        .par_iter()
        .zip(globals.par_iter().zip(&delivered))
        .map(|(site, (g, fx))| {
            let id = single_site_id(site)?;
            let c = g.cluster_of_site[id];
            Ok((id.to_string(), site_harmonize(site, g, fx, c)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;

    transport.publish("global.json", &serde_json::to_string_pretty(&global)?)?;
    transport.publish("effects.json", &serde_json::to_string_pretty(&effects)?)?;
    Ok(DistributedRun {
        global,
        effects,
        harmonized,
    })
}

/// Result of harmonizing a site that did not take part in training.
#[derive(Clone, Debug)]
pub struct Onboarded {
    pub cluster: usize,
    pub harmonized: Matrix,
}

/// Local fit, cluster lookup in parameter space, local harmonization. Nothing
/// is sent anywhere and the stored parameters are only read.
pub fn onboard_unseen_site(ds_new: &Dataset, global: &GlobalParams, effects: &BatchEffects) -> Result<Onboarded> {
    if ds_new.n_features() != global.n_features() || ds_new.n_covariates() != global.beta.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} features and {} covariates, data has {} and {}",
            global.n_features(),
            global.beta.nrows(),
            ds_new.n_features(),
            ds_new.n_covariates()
        )));
    }
    if effects.n_groups() != global.n_clusters() {
        return Err(Error::ModelMismatch(format!(
            "{} cluster effects for {} clusters",
            effects.n_groups(),
            global.n_clusters()
        )));
    }
    let local = site_local_fit(ds_new)?;
    let cluster = global.predict_site_cluster(&local)?;
    let harmonized = site_harmonize(ds_new, global, effects, cluster)?;
    Ok(Onboarded { cluster, harmonized })
}

/// A finding of [`scan_transcript`].
#[derive(Clone, Debug, PartialEq)]
pub enum PrivacyViolation {
    /// A message that is not one of the four summary types.
    UnexpectedMessage { index: usize, detail: String },
    /// A numeric array in a payload reproduces a raw feature row.
    RawRow { index: usize, site: String, row: usize },
}

fn numeric_arrays<'a>(v: &'a serde_json::Value, out: &mut Vec<Vec<f64>>) {
    match v {
        serde_json::Value::Array(items) => {
            if !items.is_empty() && items.iter().all(serde_json::Value::is_number) {
                out.push(items.iter().filter_map(serde_json::Value::as_f64).collect());
            } else {
                items.iter().for_each(|x| numeric_arrays(x, out));
            }
        }
        serde_json::Value::Object(map) => map.values().for_each(|x| numeric_arrays(x, out)),
        _ => {}
    }
}

/// Checks a transcript (as raw JSON documents) against the sites' data: every
/// message must be one of the four round types, and no numeric vector in any
/// payload may equal a raw feature row.
pub fn scan_transcript(messages: &[serde_json::Value], sites: &Dataset) -> Vec<PrivacyViolation> {
    let allowed: BTreeSet<&str> = ["local_params", "global_params", "local_eb", "cluster_eb"].into();
    let mut found = Vec::new();
    for (index, msg) in messages.iter().enumerate() {
        let round = msg.get("round").and_then(|r| r.as_str()).unwrap_or("");
        if !allowed.contains(round) {
            found.push(PrivacyViolation::UnexpectedMessage {
                index,
                detail: format!("round tag {round:?}"),
            });
            continue;
        }
        if serde_json::from_value::<RoundMessage>(msg.clone()).is_err() {
            found.push(PrivacyViolation::UnexpectedMessage {
                index,
                detail: "payload does not match the round schema".into(),
            });
        }
        let mut arrays = Vec::new();
        if let Some(p) = msg.get("payload") {
            numeric_arrays(p, &mut arrays);
        }
        for arr in arrays.iter().filter(|a| a.len() == sites.n_features()) {
            for r in 0..sites.n_samples() {
                let raw = sites.features().row(r);
                if arr.iter().zip(raw).all(|(a, b)| (a - b).abs() <= 1e-12 * b.abs().max(1.0)) {
                    found.push(PrivacyViolation::RawRow {
                        index,
                        site: sites.site_of()[r].clone(),
                        row: r,
                    });
                }
            }
        }
    }
    found
}

/// [`scan_transcript`] over typed messages.
pub fn scan_messages(messages: &[RoundMessage], sites: &Dataset) -> Result<Vec<PrivacyViolation>> {
    let values = messages
        .iter()
        .map(serde_json::to_value)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(scan_transcript(&values, sites))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(id: &str, values: &[f64]) -> Dataset {
        Dataset::new(
            Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap(),
            Matrix::zeros(values.len(), 0),
            vec![id.to_string(); values.len()],
        )
        .unwrap()
    }

    #[test]
    fn constant_feature_local_intercept() {
        let p = site_local_fit(&site("a", &[4.0, 4.0, 4.0])).unwrap();
        assert!((p.alpha_local[0] - 4.0).abs() < 1e-12);
        assert_eq!(p.gamma_local, vec![0.0]);
        assert!(!p.ridge_fallback);
    }

    #[test]
    fn local_fit_rejects_multi_site_data() {
        let ds = Dataset::new(Matrix::zeros(2, 1), Matrix::zeros(2, 0), vec!["a".into(), "b".into()]).unwrap();
        assert!(site_local_fit(&ds).is_err());
    }

    #[test]
    fn underdetermined_site_uses_ridge() {
        let ds = Dataset::new(
            Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap(),
            Matrix::from_vec(2, 2, vec![0.5, 1.0, -0.5, 0.3]).unwrap(),
            vec!["a".into(); 2],
        )
        .unwrap();
        assert!(site_local_fit(&ds).unwrap().ridge_fallback);
    }

    #[test]
    fn two_point_global_average() {
        let a = SiteLocalParams {
            site_id: "a".into(),
            alpha_local: vec![1.0],
            beta_local: Matrix::zeros(0, 1),
            gamma_local: vec![0.0],
            // y = (0, 1, 2): Σy = 3, Σy² = 5, local mean 1
            gram: Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
            cross: Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
            sum_sq: vec![5.0],
            n_samples: 3,
            ridge_fallback: false,
        };
        // y = (2, 3, 4)
        let b = SiteLocalParams {
            site_id: "b".into(),
            alpha_local: vec![3.0],
            cross: Matrix::from_vec(1, 1, vec![9.0]).unwrap(),
            sum_sq: vec![29.0],
            ..a.clone()
        };
        let opts = DistributedOptions {
            n_clusters: 2,
            ..Default::default()
        };
        let g = server_aggregate_global(&[b.clone(), a.clone()], &opts).unwrap();
        assert!((g.alpha[0] - 2.0).abs() < 1e-12);
        assert!((g.gamma_hat["a"][0] + 1.0).abs() < 1e-12);
        assert!((g.gamma_hat["b"][0] - 1.0).abs() < 1e-12);
        // residuals (−1, 0, 1) at both sites
        assert!((g.sigma[0] - (4.0f64 / 6.0).sqrt()).abs() < 1e-12);
        let weighted = DistributedOptions {
            weighting: Weighting::BySamples,
            ..opts
        };
        assert_eq!(server_aggregate_global(&[a.clone(), b.clone()], &weighted).unwrap().alpha, g.alpha);
        let too_many = DistributedOptions { n_clusters: 3, ..opts };
        assert!(server_aggregate_global(&[a.clone(), b], &too_many).is_err());
        assert!(server_aggregate_global(&[a], &opts).is_err());
    }

    #[test]
    fn cluster_effect_average() {
        let msgs = vec![
            SiteEBParams {
                site_id: "a".into(),
                gamma_star_local: vec![1.0],
                delta_sq_star_local: vec![1.0],
            },
            SiteEBParams {
                site_id: "b".into(),
                gamma_star_local: vec![3.0],
                delta_sq_star_local: vec![4.0],
            },
        ];
        let map: BTreeMap<String, usize> = [("a".to_string(), 0), ("b".to_string(), 0)].into();
        let fx = server_aggregate_cluster_effects(&msgs, &map, 1).unwrap();
        assert_eq!(fx.gamma_star[(0, 0)], 2.0);
        // variances are averaged, not standard deviations
        assert_eq!(fx.delta_sq_star[(0, 0)], 2.5);
        assert!(server_aggregate_cluster_effects(&msgs, &map, 2).is_err());
    }
}
