//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use clusterharm::cluster::KMeansOptions;
use clusterharm::combat::{CombatOptions, EbOptions, FitOptions};
use clusterharm::data::{load_csv, Dataset, Schema};
use clusterharm::eval::{
    export_pca_plot_data, identifiability, k_sweep, onboarding_timing, regression_mae, rmse, table2, Algorithm,
    EvalReport, ExperimentOptions,
};
use clusterharm::federated::{
    run_distributed, scan_messages, DistributedMode, DistributedOptions, FileTransport, Transport, Weighting,
};
use clusterharm::model_io::{fit_model, FitConfig, ModelArtifact, ModelDocument};
use clusterharm::synth::{generate, read_truth, table1_config, write_outputs, EffectScales, SynthConfig};
use clusterharm::Error;

#[derive(Debug, Parser)]
#[command(name = "clusterharm", version, about = "Multi-site feature harmonization with (Cluster) ComBat")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-site dataset with known ground truth.
    Gen(GenArgs),
    /// Fit a harmonization model and save it as JSON.
    Fit(FitArgs),
    /// Harmonize a CSV with a saved model, or fit one on the fly.
    Harmonize(HarmonizeArgs),
    /// Harmonize sites that were not part of the fit, without refitting.
    Onboard(OnboardArgs),
    /// Run the federated protocol over a file exchange, one process simulating all sites.
    Federate(FederateArgs),
    /// Score harmonized data or run one of the evaluation protocols.
    Eval(EvalArgs),
    /// Compare all algorithms over the five simulation presets.
    Table2(Table2Args),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AlgoArg {
    None,
    Combat,
    ClusterCombat,
    DistCombat,
    DistClusterCombat,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::None => Algorithm::None,
            AlgoArg::Combat => Algorithm::Combat,
            AlgoArg::ClusterCombat => Algorithm::ClusterCombat,
            AlgoArg::DistCombat => Algorithm::DistCombat,
            AlgoArg::DistClusterCombat => Algorithm::DistClusterCombat,
        }
    }
}

/// Column roles of an input CSV.
#[derive(Debug, Clone, Args, Serialize)]
struct SchemaArgs {
    /// JSON schema {"site", "features", "covariates", "targets"}; defaults to
    /// `schema.json` next to the data file when no column flags are given.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Site column name.
    #[arg(long, default_value = "site")]
    site_col: String,
    /// Comma-separated feature columns.
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Comma-separated target columns carried through unchanged.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
}

/// Numerical settings shared by the fitting subcommands.
#[derive(Debug, Clone, Args, Serialize)]
struct ModelArgs {
    /// Number of clusters for the cluster variants.
    #[arg(short = 'c', long, default_value_t = 5)]
    clusters: usize,
    /// Seed for K-means initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Floor zero residual variances at 1e-12 instead of failing.
    #[arg(long)]
    variance_floor: bool,
    /// Ridge added to the normal equations of the global fit.
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    /// Empirical Bayes convergence tolerance.
    #[arg(long, default_value_t = 1e-6)]
    eb_tol: f64,
    /// Empirical Bayes iteration limit.
    #[arg(long, default_value_t = 100)]
    eb_max_iter: usize,
    /// Independent K-means starts; the lowest inertia wins.
    #[arg(long, default_value_t = 1)]
    kmeans_restarts: usize,
    #[arg(long, default_value_t = 300)]
    kmeans_max_iter: usize,
    /// Cluster standardized rows instead of raw feature rows (centralized Cluster ComBat).
    #[arg(long)]
    cluster_standardized: bool,
    /// Weight site estimates by sample count when aggregating (federated variants).
    #[arg(long)]
    weight_by_samples: bool,
    /// Z-score site parameter vectors before clustering them (federated variants).
    #[arg(long)]
    standardize_params: bool,
}

impl ModelArgs {
    fn combat(&self) -> CombatOptions {
        CombatOptions {
            fit: FitOptions {
                variance_floor: self.variance_floor,
                ridge: self.ridge,
            },
            eb: EbOptions {
                tol: self.eb_tol,
                max_iter: self.eb_max_iter,
            },
        }
    }

    fn kmeans(&self) -> KMeansOptions {
        KMeansOptions {
            max_iter: self.kmeans_max_iter,
            restarts: self.kmeans_restarts,
            ..KMeansOptions::default()
        }
    }

    fn weighting(&self) -> Weighting {
        if self.weight_by_samples {
            Weighting::BySamples
        } else {
            Weighting::Uniform
        }
    }

    fn fit_config(&self, algorithm: Algorithm) -> FitConfig {
        FitConfig {
            algorithm,
            n_clusters: self.clusters,
            seed: self.seed,
            kmeans: self.kmeans(),
            combat: self.combat(),
            cluster_standardized: self.cluster_standardized,
            weighting: self.weighting(),
            standardize_params: self.standardize_params,
        }
    }

    fn experiment(&self, jobs: usize) -> ExperimentOptions {
        ExperimentOptions {
            kmeans: self.kmeans(),
            combat: self.combat(),
            cluster_standardized: self.cluster_standardized,
            weighting: self.weighting(),
            standardize_params: self.standardize_params,
            jobs,
            ..ExperimentOptions::default()
        }
    }
}

/// Latent effect scales of the generator.
#[derive(Debug, Clone, Args, Serialize)]
struct ScaleArgs {
    #[arg(long, default_value_t = EffectScales::default().alpha)]
    alpha_scale: f64,
    #[arg(long, default_value_t = EffectScales::default().beta)]
    beta_scale: f64,
    #[arg(long, default_value_t = EffectScales::default().gamma)]
    gamma_scale: f64,
    #[arg(long, default_value_t = EffectScales::default().delta_low)]
    delta_low: f64,
    #[arg(long, default_value_t = EffectScales::default().delta_high)]
    delta_high: f64,
    #[arg(long, default_value_t = EffectScales::default().sigma)]
    sigma_scale: f64,
    /// Keep the raw cluster effects instead of centring them across clusters.
    #[arg(long)]
    uncentered_gamma: bool,
}

impl ScaleArgs {
    fn scales(&self) -> EffectScales {
        EffectScales {
            alpha: self.alpha_scale,
            beta: self.beta_scale,
            gamma: self.gamma_scale,
            delta_low: self.delta_low,
            delta_high: self.delta_high,
            sigma: self.sigma_scale,
            center_gamma: !self.uncentered_gamma,
            ..EffectScales::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    /// Simulation preset 1..=5; explicit sizes override it.
    #[arg(long)]
    preset: Option<usize>,
    #[arg(long)]
    sites: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long = "n-features")]
    n_features: Option<usize>,
    #[arg(long)]
    sites_per_cluster: Option<usize>,
    #[arg(long = "n-covariates")]
    n_covariates: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    scales: ScaleArgs,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    data: PathBuf,
    #[arg(long, value_enum)]
    algo: AlgoArg,
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Model JSON to write.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct HarmonizeArgs {
    data: PathBuf,
    /// Saved model to apply.
    #[arg(long, conflicts_with = "algo")]
    model: Option<PathBuf>,
    /// Fit this algorithm on `data` first.
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
    /// Where to save the model fitted with --algo.
    #[arg(long, requires = "algo")]
    save_model: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    model_args: ModelArgs,
    /// Harmonized CSV to write.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct OnboardArgs {
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FederateArgs {
    data: PathBuf,
    #[arg(long, value_enum, default_value = "dist-cluster-combat")]
    algo: AlgoArg,
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Directory for the round files; a temporary directory when omitted.
    #[arg(long)]
    exchange_dir: Option<PathBuf>,
    /// Seconds to wait for a round file.
    #[arg(long, default_value_t = 60)]
    round_timeout: u64,
    /// Output directory: harmonized.csv, model.json, privacy.json.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Protocol {
    /// RMSE of a harmonized CSV against truth.csv.
    Score,
    /// Site and cluster classification before and after harmonization.
    Identifiability,
    /// Held-out-site regression MAE of the first covariate.
    Regression,
    /// Cluster ComBat RMSE across cluster counts.
    KSweep,
    /// Onboarding cost against a full refit.
    Onboarding,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "score")]
    protocol: Protocol,
    /// Harmonized CSV (score).
    #[arg(long)]
    harmonized: Option<PathBuf>,
    /// truth.csv written by `gen` (score).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
    /// Also write PCA coordinates of the harmonized data (score).
    #[arg(long)]
    pca: Option<PathBuf>,
    /// Preset for the synthetic protocols.
    #[arg(long, default_value_t = 1)]
    preset: usize,
    /// Number of seeds for the synthetic protocols.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    /// Cluster counts for k-sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,8")]
    ks: Vec<usize>,
    #[command(flatten)]
    scales: ScaleArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// JSON report to write.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct Table2Args {
    #[arg(long, default_value_t = 30)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    presets: Vec<usize>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[command(flatten)]
    scales: ScaleArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Per-seed results CSV.
    #[arg(long)]
    per_seed: Option<PathBuf>,
    /// Comparison table CSV.
    #[arg(short, long)]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Harmonize(a) => cmd_harmonize(a),
        Command::Onboard(a) => cmd_onboard(a),
        Command::Federate(a) => cmd_federate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Table2(a) => cmd_table2(a),
    }
}

fn resolve_schema(args: &SchemaArgs, data: &Path) -> CliResult<Schema> {
    if let Some(path) = &args.schema {
        return Ok(Schema::from_json_file(path)?);
    }
    if !args.features.is_empty() {
        return Ok(Schema {
            site: args.site_col.clone(),
            features: args.features.clone(),
            covariates: args.covariates.clone(),
            targets: args.targets.clone(),
        });
    }
    let sibling = data.parent().unwrap_or(Path::new(".")).join("schema.json");
    if sibling.exists() {
        return Ok(Schema::from_json_file(&sibling)?);
    }
    Err(usage(format!(
        "no schema for {}: pass --schema, --features, or place schema.json next to it",
        data.display()
    )))
}

fn load(data: &Path, schema: &SchemaArgs) -> CliResult<Dataset> {
    let schema = resolve_schema(schema, data)?;
    let ds = load_csv(data, &schema)?;
    log::info!(
        "loaded {}: {} rows, {} sites, {} features, {} covariates",
        data.display(),
        ds.n_samples(),
        ds.n_sites(),
        ds.n_features(),
        ds.n_covariates()
    );
    Ok(ds)
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_harmonized(ds: &Dataset, features: clusterharm::numerics::Matrix, path: &Path) -> CliResult<()> {
    let mut buf = Vec::new();
    ds.with_features(features)?.write_csv(&mut buf)?;
    write_file(path, &buf)
}

fn digest_file(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| hex::encode(Sha256::digest(b)))
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: Option<String>,
}

#[derive(Serialize)]
struct Manifest<'a, A: Serialize> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    config: &'a A,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

fn entries(paths: &[&Path]) -> Vec<FileEntry> {
    paths
        .iter()
        .map(|p| FileEntry {
            path: p.display().to_string(),
            sha256: digest_file(p),
        })
        .collect()
}

/// Writes `<output>.manifest.json`, or `manifest.json` inside an output directory.
fn write_manifest<A: Serialize>(
    subcommand: &'static str,
    config: &A,
    inputs: &[&Path],
    outputs: &[&Path],
    at: &Path,
) -> CliResult<()> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        config,
        inputs: entries(inputs),
        outputs: entries(outputs),
    };
    let path = if at.is_dir() {
        at.join("manifest.json")
    } else {
        let mut name = at.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    write_file(&path, text.as_bytes())
}

fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let base = match a.preset {
        Some(p) => table1_config(p).map_err(|e| usage(e.to_string()))?,
        None => SynthConfig::new(20, 20, 20, 5, 5),
    };
    let mut cfg = SynthConfig::new(
        a.sites.unwrap_or(base.n_sites),
        a.samples.unwrap_or(base.samples_per_site),
        a.n_features.unwrap_or(base.n_features),
        a.sites_per_cluster.unwrap_or(base.sites_per_cluster),
        a.n_covariates.unwrap_or(base.n_covariates),
    )
    .with_seed(a.seed);
    cfg.scales = a.scales.scales();
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (ds, truth) = generate(&cfg)?;
    write_outputs(&a.out, &cfg, &ds, &truth)?;
    let outs: Vec<PathBuf> = ["data.csv", "schema.json", "truth.csv", "params.json"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    let refs: Vec<&Path> = outs.iter().map(PathBuf::as_path).collect();
    write_manifest("gen", a, &[], &refs, &a.out)
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    if a.algo == AlgoArg::None {
        return Err(usage("`--algo none` has no model to fit"));
    }
    let ds = load(&a.data, &a.schema)?;
    let doc = fit_model(&ds, &a.model.fit_config(a.algo.into()))?;
    write_file(&a.out, doc.to_json()?.as_bytes())?;
    write_manifest("fit", a, &[&a.data], &[&a.out], &a.out)
}

fn cmd_harmonize(a: &HarmonizeArgs) -> CliResult<()> {
    let ds = load(&a.data, &a.schema)?;
    let mut inputs = vec![a.data.as_path()];
    let mut outputs = vec![a.out.as_path()];
    let features = match (&a.model, a.algo) {
        (Some(path), None) => {
            inputs.push(path);
            ModelDocument::load(path)?.harmonize(&ds)?.features
        }
        (None, Some(AlgoArg::None)) => ds.features().clone(),
        (None, Some(algo)) => {
            let doc = fit_model(&ds, &a.model_args.fit_config(algo.into()))?;
            if let Some(path) = &a.save_model {
                write_file(path, doc.to_json()?.as_bytes())?;
                outputs.push(path);
            }
            doc.harmonize(&ds)?.features
        }
        _ => return Err(usage("pass either --model or --algo")),
    };
    write_harmonized(&ds, features, &a.out)?;
    write_manifest("harmonize", a, &inputs, &outputs, &a.out)
}

fn cmd_onboard(a: &OnboardArgs) -> CliResult<()> {
    let doc = ModelDocument::load(&a.model)?;
    let ds = load(&a.data, &a.schema)?;
    let out = doc.onboard(&ds)?;
    for code in 0..ds.n_sites() {
        let r = ds.rows_of_site(code)[0];
        log::info!("site `{}` assigned to cluster {}", ds.site_ids()[code], out.groups[r]);
    }
    write_harmonized(&ds, out.features, &a.out)?;
    write_manifest("onboard", a, &[&a.data, &a.model], &[&a.out], &a.out)
}

#[derive(Serialize)]
struct PrivacyReport {
    messages: usize,
    findings: Vec<String>,
}

fn cmd_federate(a: &FederateArgs) -> CliResult<()> {
    let mode = match a.algo {
        AlgoArg::DistCombat => DistributedMode::PerSite,
        AlgoArg::DistClusterCombat => DistributedMode::Clustered,
        _ => return Err(usage("federate runs dist-combat or dist-cluster-combat")),
    };
    let ds = load(&a.data, &a.schema)?;
    let tmp;
    let exchange = match &a.exchange_dir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir().map_err(|e| Error::Io {
                path: std::env::temp_dir(),
                source: e,
            })?;
            tmp.path().to_path_buf()
        }
    };
    let mut transport = FileTransport::new(&exchange, Duration::from_secs(a.round_timeout))?;
    let opts = DistributedOptions {
        mode,
        n_clusters: if mode == DistributedMode::PerSite { ds.n_sites() } else { a.model.clusters },
        seed: a.model.seed,
        weighting: a.model.weighting(),
        standardize_params: a.model.standardize_params,
        kmeans: a.model.kmeans(),
        combat: a.model.combat(),
    };
    let run = run_distributed(&ds, &opts, &mut transport)?;
    let findings = scan_messages(transport.transcript(), &ds)?;
    let privacy = PrivacyReport {
        messages: transport.transcript().len(),
        findings: findings.iter().map(|f| format!("{f:?}")).collect(),
    };
    let h = run.harmonized_like(&ds)?;
    let artifact = match mode {
        DistributedMode::PerSite => ModelArtifact::DistCombat {
            global: run.global,
            effects: run.effects,
        },
        DistributedMode::Clustered => ModelArtifact::DistClusterCombat {
            global: run.global,
            effects: run.effects,
        },
    };
    let (hp, mp, pp) = (a.out.join("harmonized.csv"), a.out.join("model.json"), a.out.join("privacy.json"));
    write_harmonized(&ds, h, &hp)?;
    write_file(&mp, ModelDocument::new(&ds, artifact).to_json()?.as_bytes())?;
    write_file(&pp, serde_json::to_string_pretty(&privacy).map_err(Error::from)?.as_bytes())?;
    if !findings.is_empty() {
        log::warn!("privacy scanner reported {} finding(s)", findings.len());
    }
    write_manifest("federate", a, &[&a.data], &[&hp, &mp, &pp], &a.out)
}

fn seeds(base: u64, n: u64) -> CliResult<Vec<u64>> {
    if n == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    Ok((base..base + n).collect())
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let mut opts = a.model.experiment(a.jobs);
    opts.scales = a.scales.scales();
    let mut inputs: Vec<&Path> = Vec::new();
    let mut outputs: Vec<&Path> = vec![&a.out];
    let report: serde_json::Value = match a.protocol {
        Protocol::Score => {
            let (Some(h), Some(t)) = (&a.harmonized, &a.truth) else {
                return Err(usage("score needs --harmonized and --truth"));
            };
            inputs.extend([h.as_path(), t.as_path()]);
            let ds = load(h, &a.schema)?;
            let (gt, labels, clusters) = read_truth(t)?;
            let value = rmse(ds.features(), &gt)?;
            if let Some(p) = &a.pca {
                export_pca_plot_data(ds.features(), ds.site_of(), &clusters, &labels, p)?;
                outputs.push(p);
            }
            serde_json::json!({ "rmse": value, "rows": ds.n_samples() })
        }
        Protocol::Identifiability | Protocol::Regression | Protocol::KSweep | Protocol::Onboarding => {
            let base = table1_config(a.preset).map_err(|e| usage(e.to_string()))?;
            let mut rows = Vec::new();
            for seed in seeds(a.base_seed, a.seeds)? {
                let mut cfg = base.with_seed(seed);
                cfg.scales = opts.scales;
                let v = match a.protocol {
                    Protocol::Identifiability => serde_json::to_value(identifiability(&cfg, &opts)?),
                    Protocol::Regression => {
                        let algos: Vec<Algorithm> = Algorithm::ALL.to_vec();
                        let res: Vec<_> = regression_mae(&cfg, &algos, &opts)?
                            .into_iter()
                            .map(|(a, m)| serde_json::json!({ "algorithm": a, "mae": m }))
                            .collect();
                        Ok(serde_json::Value::from(res))
                    }
                    Protocol::KSweep => serde_json::to_value(k_sweep(&cfg, &a.ks, &opts)?),
                    _ => serde_json::to_value(onboarding_timing(&cfg, 3, &opts)?),
                }
                .map_err(Error::from)?;
                rows.push(serde_json::json!({ "seed": seed, "result": v }));
            }
            serde_json::json!({ "preset": a.preset, "runs": rows })
        }
    };
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write_file(&a.out, text.as_bytes())?;
    write_manifest("eval", a, &inputs, &outputs, &a.out)
}

fn cmd_table2(a: &Table2Args) -> CliResult<()> {
    for &p in &a.presets {
        table1_config(p).map_err(|e| usage(e.to_string()))?;
    }
    let mut opts = a.model.experiment(a.jobs);
    opts.scales = a.scales.scales();
    let seeds = seeds(a.base_seed, a.seeds)?;
    let tab = table2(&a.presets, &seeds, &opts)?;
    let mut buf = Vec::new();
    tab.write_csv(&mut buf)?;
    write_file(&a.out, &buf)?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(p) = &a.per_seed {
        let mut buf = Vec::new();
        tab.write_seed_csv(&mut buf)?;
        write_file(p, &buf)?;
        outputs.push(p);
    }
    let summary: Vec<&EvalReport> = tab.cells.iter().flat_map(|c| [&c.rmse, &c.accuracy]).collect();
    log::info!("{} report cells over {} seeds", summary.len(), seeds.len());
    write_manifest("table2", a, &[], &outputs, &a.out)
}
