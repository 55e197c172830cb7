//! The `fibercluster` command-line tool.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::atlas::{load_atlas, save_atlas, Atlas};
use crate::dfc::{train, ClusterTrace, PretrainTrace, TrainConfig};
use crate::encoder::{finite_difference_check, EncoderConfig, GradCheckConfig};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::parcellation::{load_parcellation, parcellate, save_parcellation, ParcellationConfig};
use crate::tractogram::{
    filter_by_length, generate_synthetic, load_tractogram, save_tractogram, SyntheticSpec, OUTLIER_TRUTH,
};

/// Everything a run can be configured with, as read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub parcellation: ParcellationConfig,
    pub synthetic: SyntheticSpec,
    /// Fibers shorter than this (mm) are dropped before training.
    pub min_length: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            parcellation: ParcellationConfig::default(),
            synthetic: SyntheticSpec::default(),
            min_length: 40.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", p.display())))
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fibercluster", version, about = "Deep embedding-based white matter fiber clustering")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic tractogram with known bundles and outliers.
    Synth(SynthArgs),
    /// Train an atlas on one or more tractograms.
    Train(TrainArgs),
    /// Parcellate a tractogram with a trained atlas.
    Infer(InferArgs),
    /// Score a parcellation.
    Eval(EvalArgs),
    /// Verify the analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

macro_rules! apply {
    ($src:expr => $dst:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $src.$field.clone() { $dst.$field = v; } )*
    };
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, alias = "n_bundles")]
    n_bundles: Option<usize>,
    #[arg(long, alias = "fibers_per_bundle")]
    fibers_per_bundle: Option<usize>,
    #[arg(long, alias = "points_per_centerline")]
    points_per_centerline: Option<usize>,
    #[arg(long, alias = "noise_sigma")]
    noise_sigma: Option<f64>,
    #[arg(long, alias = "bundle_separation")]
    bundle_separation: Option<f64>,
    #[arg(long, alias = "flip_fraction")]
    flip_fraction: Option<f64>,
    #[arg(long, alias = "outlier_fraction")]
    outlier_fraction: Option<f64>,
    #[arg(long, alias = "label_noise")]
    label_noise: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long, alias = "n_c")]
    n_c: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, alias = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long, alias = "pretrain_iters")]
    pretrain_iters: Option<usize>,
    #[arg(long, alias = "pretrain_lr")]
    pretrain_lr: Option<f64>,
    #[arg(long, alias = "pretrain_tail_iters")]
    pretrain_tail_iters: Option<usize>,
    #[arg(long, alias = "pretrain_tail_lr")]
    pretrain_tail_lr: Option<f64>,
    #[arg(long, alias = "cluster_iters")]
    cluster_iters: Option<usize>,
    #[arg(long, alias = "cluster_lr")]
    cluster_lr: Option<f64>,
    #[arg(long, alias = "profile_update_interval")]
    profile_update_interval: Option<usize>,
    #[arg(long, alias = "target_update_interval")]
    target_update_interval: Option<usize>,
    #[arg(long, alias = "samples_per_subject")]
    samples_per_subject: Option<usize>,
    #[arg(long, alias = "kmeans_restarts")]
    kmeans_restarts: Option<usize>,
}

#[derive(Debug, Args)]
struct EncoderOverrides {
    #[arg(long, alias = "n_p")]
    n_p: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, alias = "edgeconv_widths", value_delimiter = ',')]
    edgeconv_widths: Option<Vec<usize>>,
    #[arg(long, alias = "fc_widths", value_delimiter = ',')]
    fc_widths: Option<Vec<usize>>,
    #[arg(long, alias = "leaky_slope")]
    leaky_slope: Option<f64>,
}

#[derive(Debug, Args)]
struct ParcellationOverrides {
    #[arg(long, alias = "outlier_sigma")]
    outlier_sigma: Option<f64>,
    #[arg(long, alias = "use_anatomy")]
    use_anatomy: Option<bool>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training tractograms.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write loss traces; defaults to the atlas path plus `.trace.json`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Value stored in the atlas `created` field. Falls back to
    /// `SOURCE_DATE_EPOCH`, then to none.
    #[arg(long)]
    timestamp: Option<String>,
    #[arg(long, alias = "min_length")]
    min_length: Option<f64>,
    #[command(flatten)]
    train: TrainOverrides,
    #[command(flatten)]
    encoder: EncoderOverrides,
}

#[derive(Debug, Args)]
struct InferArgs {
    input: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    parcellation: ParcellationOverrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    tractogram: PathBuf,
    parcellation: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics JSON destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, alias = "n_p")]
    n_p: Option<usize>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Serialize)]
struct TrainingTraces<'a> {
    pretrain: &'a PretrainTrace,
    cluster: &'a ClusterTrace,
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut spec = RunConfig::load(a.config.as_deref())?.synthetic;
    apply!(a => spec; n_bundles, fibers_per_bundle, points_per_centerline, noise_sigma,
        bundle_separation, flip_fraction, outlier_fraction, label_noise);
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let t = generate_synthetic(&spec)?;
    save_tractogram(&t, &a.out)?;
    let outliers = t
        .truth_labels
        .as_ref()
        .map_or(0, |l| l.iter().filter(|&&x| x == OUTLIER_TRUTH).count());
    println!(
        "wrote {} fibers ({} bundle, {outliers} outlier) to {}",
        t.len(),
        t.len() - outliers,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply!(a.train => cfg.train; n_c, lambda, batch_size, pretrain_iters, pretrain_lr,
        pretrain_tail_iters, pretrain_tail_lr, cluster_iters, cluster_lr, profile_update_interval,
        target_update_interval, samples_per_subject, kmeans_restarts);
    apply!(a.encoder => cfg.encoder; n_p, k, edgeconv_widths, fc_widths, leaky_slope);
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.encoder.seed = s;
    }
    if let Some(m) = a.min_length {
        cfg.min_length = m;
    }
    cfg.train.validate()?;
    cfg.encoder.validate()?;

    let mut tractograms = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let t = load_tractogram(p)?;
        let kept = filter_by_length(&t, cfg.min_length);
        info!("{}: kept {} of {} fibers", p.display(), kept.len(), t.len());
        tractograms.push(kept);
    }
    let (model, report) = train(&tractograms, &cfg.train, &cfg.encoder)?;
    let created = a.timestamp.or_else(|| std::env::var("SOURCE_DATE_EPOCH").ok());
    let atlas = Atlas::new(model, cfg.train.clone(), created);
    save_atlas(&atlas, &a.out)?;

    let trace_path = a.trace.unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".trace.json");
        PathBuf::from(s)
    });
    let traces = TrainingTraces {
        pretrain: &report.pretrain,
        cluster: &report.cluster,
    };
    write_output(Some(&trace_path), &(serde_json::to_string(&traces)? + "\n"))?;
    println!(
        "trained {} clusters on {} fibers; distance loss {:.4} -> {:.4}; atlas {}",
        cfg.train.n_c,
        report.pool_labels.len(),
        report.pretrain.initial_eval_loss,
        report.pretrain.final_eval_loss,
        a.out.display()
    );
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let mut pcfg = RunConfig::load(a.config.as_deref())?.parcellation;
    apply!(a.parcellation => pcfg; outlier_sigma, use_anatomy);
    pcfg.validate()?;
    let atlas = load_atlas(&a.atlas)?;
    let t = load_tractogram(&a.input)?;
    let result = parcellate(&t, &atlas.model(), &pcfg)?;
    save_parcellation(&result, Some(&pcfg), &a.out)?;
    let removed = result.fibers.iter().filter(|f| f.outlier).count();
    println!(
        "parcellated {} fibers into {} clusters, {removed} outliers; wrote {}",
        result.fibers.len(),
        result.n_c(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let n_p = a.n_p.unwrap_or(cfg.encoder.n_p);
    let t = load_tractogram(&a.tractogram)?;
    let (result, _) = load_parcellation(&a.parcellation)?;
    if result.fibers.len() != t.len() {
        return Err(Error::invalid(format!(
            "parcellation covers {} fibers, tractogram has {}",
            result.fibers.len(),
            t.len()
        )));
    }
    let (fibers, labels): (Vec<_>, Vec<_>) = result
        .fibers
        .iter()
        .filter(|f| !f.outlier)
        .map(|f| (t.fibers[f.index].clone(), f.cluster))
        .unzip();
    let report = evaluate(&fibers, &labels, result.n_c(), n_p)?;
    write_output(a.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        seed: a.seed.unwrap_or(0),
        ..GradCheckConfig::default()
    };
    let report = finite_difference_check(&cfg)?;
    write_output(a.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    let worst = report.max_distance_error().max(report.max_cluster_error());
    if worst > a.tolerance {
        return Err(Error::Invariant(format!(
            "gradient check failed: max relative error {worst:e} exceeds {:e}",
            a.tolerance
        )));
    }
    Ok(())
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs the tool and returns its exit status. Failures are reported on
/// stderr as a single `error[<kind>]: <message>` line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return 2;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            1
        }
    }
}
