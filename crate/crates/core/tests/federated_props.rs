use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clusterharm::combat::{eb_fit, fit_feature_model, fit_priors, CombatOptions, FitOptions};
use clusterharm::data::Dataset;
use clusterharm::federated::{
    onboard_unseen_site, run_distributed, scan_messages, site_local_eb, DistributedMode, DistributedOptions,
    FileTransport, InMemoryTransport, Round, RoundMessage, Transport, Weighting, COORDINATOR,
};
use clusterharm::numerics::Matrix;
use clusterharm::synth::{generate, SynthConfig};
use clusterharm::Error;

fn data(seed: u64) -> Dataset {
    generate(&SynthConfig::new(6, 15, 8, 2, 2).with_seed(seed)).unwrap().0
}

fn opts(mode: DistributedMode, c: usize) -> DistributedOptions {
    DistributedOptions {
        mode,
        n_clusters: c,
        ..DistributedOptions::default()
    }
}

fn sorted_json(msgs: &[RoundMessage]) -> Vec<String> {
    let mut v: Vec<String> = msgs.iter().map(|m| m.to_json().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn file_and_memory_transports_agree() {
    let ds = data(1);
    let o = opts(DistributedMode::Clustered, 3);
    let mut mem = InMemoryTransport::new();
    let a = run_distributed(&ds, &o, &mut mem).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut file = FileTransport::new(dir.path(), Duration::from_secs(5)).unwrap();
    let b = run_distributed(&ds, &o, &mut file).unwrap();
    assert_eq!(a.global, b.global);
    assert_eq!(a.effects, b.effects);
    assert_eq!(a.harmonized, b.harmonized);

    let on_disk = FileTransport::read_transcript(dir.path()).unwrap();
    assert_eq!(on_disk.len(), 4 * ds.n_sites());
    assert_eq!(sorted_json(&on_disk), sorted_json(mem.transcript()));
    for name in ["global.json", "effects.json"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert_eq!(Some(text.as_str()), mem.published(name));
    }
    for id in ds.site_ids() {
        for round in Round::ALL {
            assert!(dir.path().join(FileTransport::file_name(round, id)).exists());
        }
    }
}

#[test]
fn transcripts_are_reproducible() {
    let ds = data(2);
    let o = opts(DistributedMode::Clustered, 3);
    let mut t1 = InMemoryTransport::new();
    let mut t2 = InMemoryTransport::new();
    run_distributed(&ds, &o, &mut t1).unwrap();
    run_distributed(&ds, &o, &mut t2).unwrap();
    let j1: Vec<String> = t1.transcript().iter().map(|m| m.to_json().unwrap()).collect();
    let j2: Vec<String> = t2.transcript().iter().map(|m| m.to_json().unwrap()).collect();
    assert_eq!(j1, j2);
    assert!(scan_messages(t1.transcript(), &ds).unwrap().is_empty());
}

#[test]
fn one_cluster_per_site_equals_per_site_mode() {
    let ds = data(3);
    let per_site = run_distributed(&ds, &opts(DistributedMode::PerSite, 0), &mut InMemoryTransport::new()).unwrap();
    let clustered = run_distributed(
        &ds,
        &opts(DistributedMode::Clustered, ds.n_sites()),
        &mut InMemoryTransport::new(),
    )
    .unwrap();
    let mut clusters: Vec<usize> = clustered.global.cluster_of_site.values().copied().collect();
    clusters.sort_unstable();
    assert_eq!(clusters, (0..ds.n_sites()).collect::<Vec<_>>());
    for (id, h) in &per_site.harmonized {
        assert!(h.max_abs_diff(&clustered.harmonized[id]) < 1e-12, "site {id}");
    }
    // per-site effects are labelled by site id
    for (site, &c) in &per_site.global.cluster_of_site {
        assert_eq!(&per_site.effects.group_labels[c], site);
    }
}

#[test]
fn weighting_is_irrelevant_for_equal_sizes() {
    let ds = data(4);
    let mut by_samples = opts(DistributedMode::Clustered, 3);
    by_samples.weighting = Weighting::BySamples;
    let a = run_distributed(&ds, &opts(DistributedMode::Clustered, 3), &mut InMemoryTransport::new()).unwrap();
    let b = run_distributed(&ds, &by_samples, &mut InMemoryTransport::new()).unwrap();
    for (x, y) in a.global.alpha.iter().zip(&b.global.alpha) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(a.global.beta.max_abs_diff(&b.global.beta) < 1e-12);
    assert_eq!(a.global.cluster_of_site, b.global.cluster_of_site);
}

#[test]
fn local_eb_is_single_group_combat_under_global_parameters() {
    let ds = data(5);
    let run = run_distributed(&ds, &opts(DistributedMode::Clustered, 3), &mut InMemoryTransport::new()).unwrap();
    let g = &run.global;
    let site = ds.subset_sites(&[ds.site_ids()[2].clone()]).unwrap();
    let local = site_local_eb(&site, g, &CombatOptions::default()).unwrap();

    let z = Matrix::from_fn(site.n_samples(), site.n_features(), |i, f| {
        let x = site.covariates().row(i);
        let mu = g.alpha[f] + (0..x.len()).map(|k| x[k] * g.beta[(k, f)]).sum::<f64>();
        (site.features()[(i, f)] - mu) / g.sigma[f]
    });
    let groups = vec![0; site.n_samples()];
    let priors = fit_priors(&z, &groups).unwrap();
    let eff = eb_fit(&z, &groups, &priors, &Default::default()).unwrap();
    assert_eq!(local.site_id, site.site_ids()[0]);
    for f in 0..site.n_features() {
        assert!((local.gamma_star_local[f] - eff.gamma_star[(0, f)]).abs() < 1e-12);
        assert!((local.delta_sq_star_local[f] - eff.delta_sq_star[(0, f)]).abs() < 1e-12);
    }
}

#[test]
fn replayed_site_joins_its_own_cluster() {
    let ds = data(6);
    let run = run_distributed(&ds, &opts(DistributedMode::Clustered, 3), &mut InMemoryTransport::new()).unwrap();
    for code in 0..ds.n_sites() {
        let id = &ds.site_ids()[code];
        let site = ds.subset_rows(ds.rows_of_site(code)).unwrap();
        let renamed = Dataset::new(
            site.features().clone(),
            site.covariates().clone(),
            vec!["newcomer".into(); site.n_samples()],
        )
        .unwrap();
        let before = run.global.clone();
        let out = onboard_unseen_site(&renamed, &run.global, &run.effects).unwrap();
        assert_eq!(out.cluster, run.global.cluster_of_site[id]);
        assert!(out.harmonized.max_abs_diff(&run.harmonized[id]) < 1e-12);
        assert_eq!(before, run.global);
    }
}

#[test]
fn onboarding_checks_the_layout() {
    let ds = data(7);
    let run = run_distributed(&ds, &opts(DistributedMode::Clustered, 3), &mut InMemoryTransport::new()).unwrap();
    let narrow = Dataset::new(Matrix::zeros(5, 3), Matrix::zeros(5, 2), vec!["x".into(); 5]).unwrap();
    assert!(matches!(
        onboard_unseen_site(&narrow, &run.global, &run.effects),
        Err(Error::DimensionMismatch(_))
    ));
}

/// Loses every message a given site sends.
struct Dropping {
    inner: InMemoryTransport,
    silent: String,
}

impl Transport for Dropping {
    fn post(&mut self, msg: RoundMessage) -> clusterharm::Result<()> {
        if msg.sender == self.silent {
            return Ok(());
        }
        self.inner.post(msg)
    }
    fn collect(&mut self, round: Round, recipient: &str, senders: &[String]) -> clusterharm::Result<Vec<RoundMessage>> {
        self.inner.collect(round, recipient, senders)
    }
    fn transcript(&self) -> &[RoundMessage] {
        self.inner.transcript()
    }
    fn publish(&mut self, name: &str, contents: &str) -> clusterharm::Result<()> {
        self.inner.publish(name, contents)
    }
}

#[test]
fn silent_site_times_out_by_name() {
    let ds = data(8);
    let mut t = Dropping {
        inner: InMemoryTransport::new(),
        silent: ds.site_ids()[3].clone(),
    };
    match run_distributed(&ds, &opts(DistributedMode::Clustered, 3), &mut t) {
        Err(Error::RoundTimeout { round, site }) => {
            assert_eq!(round, "local_params");
            assert_eq!(site, ds.site_ids()[3]);
        }
        other => panic!("expected a timeout, got {other:?}"),
    }
}

#[test]
fn file_transport_deadline() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = FileTransport::new(dir.path(), Duration::from_millis(100)).unwrap();
    let err = t
        .collect(Round::LocalEb, COORDINATOR, &["site07".to_string()])
        .unwrap_err();
    assert!(matches!(err, Error::RoundTimeout { ref site, .. } if site == "site07"));
    assert!(err.to_string().contains("site07"));
}

/// Every site observes the same covariate rows, so the local and pooled
/// regressions share one design.
fn shared_design(seed: u64, m: usize, n: usize, g: usize, p: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, p, |_, _| rng.gen_range(-2.0..2.0));
    let mut rows = Vec::new();
    let mut covs = Vec::new();
    let mut sites = Vec::new();
    for s in 0..m {
        let shift = rng.gen_range(-4.0..4.0);
        let scale = rng.gen_range(0.5..2.0);
        for i in 0..n {
            let xi = x.row(i);
            rows.push(
                (0..g)
                    .map(|f| {
                        let lin: f64 = xi.iter().enumerate().map(|(k, v)| v * (k + f) as f64).sum();
                        lin + shift + scale * rng.gen_range(-1.0..1.0)
                    })
                    .collect::<Vec<_>>(),
            );
            covs.push(xi.to_vec());
            sites.push(format!("s{s}"));
        }
    }
    Dataset::new(Matrix::from_rows(&rows, g).unwrap(), Matrix::from_rows(&covs, p).unwrap(), sites).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shared_design_matches_pooled_fit(seed in any::<u64>(), m in 2usize..5, n in 5usize..12, p in 0usize..3) {
        let ds = shared_design(seed, m, n, 3, p);
        let pooled = fit_feature_model(&ds, &FitOptions::default()).unwrap();
        let run = run_distributed(&ds, &opts(DistributedMode::PerSite, 0), &mut InMemoryTransport::new()).unwrap();
        let g = &run.global;
        for f in 0..3 {
            prop_assert!((g.alpha[f] - pooled.alpha[f]).abs() < 1e-8);
            prop_assert!((g.sigma[f] - pooled.sigma[f]).abs() < 1e-8 * pooled.sigma[f].max(1.0));
            // site offsets are taken from local intercepts, which only agree
            // with the pooled ones when there is no covariate slope to share
            for (i, id) in ds.site_ids().iter().enumerate().filter(|_| p == 0) {
                prop_assert!((g.gamma_hat[id][f] - pooled.gamma_hat[(i, f)]).abs() < 1e-8);
            }
        }
        prop_assert!(g.beta.max_abs_diff(&pooled.beta) < 1e-8);
    }
}
