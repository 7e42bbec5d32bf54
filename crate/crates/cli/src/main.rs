use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use corepoint::fingerprint::{generate_fingerprint, CoreTrace, Fingerprint};
use corepoint::harness::{
    build_split, emit_insight_curves, read_zoo, render_report, run_experiment, write_zoo, zoo_manifest,
    ExperimentConfig,
};
use corepoint::identify::{decide, query_suspect, Calibration, ClusterModel, Method, SuspectTranscript, Thresholds};
use corepoint::io::{load_json, save_json, write_text};
use corepoint::nn::Network;
use corepoint::zoo::build_zoo;
use corepoint::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_MISSING_FILE: u8 = 3;
const EXIT_SCHEMA: u8 = 4;
const OUT_ENV: &str = "COREPOINT_OUT";

#[derive(Parser)]
#[command(
    name = "corepoint",
    version,
    about = "Decision-boundary fingerprinting for model piracy detection"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print per-stage progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the victim and suspect zoo.
    TrainZoo(ExperimentArgs),
    /// Generate core points for the victim of a trained zoo.
    Fingerprint(ExperimentArgs),
    /// Decide whether one suspect is a piracy copy of the fingerprinted victim.
    Identify(IdentifyArgs),
    /// Run the full protocol and write the report.
    Evaluate(ExperimentArgs),
    /// Write plotting CSVs from a finished run.
    InsightCurves(CurveArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// Config file (TOML) or `demo`; a missing file is created with defaults.
    #[arg(long, default_value = "demo")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Output directory (else $COREPOINT_OUT, else the config value, else ./corepoint-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IdentifyArgs {
    #[arg(long)]
    fingerprint: PathBuf,
    /// Victim network; its outputs on the core points are the reference.
    #[arg(long)]
    victim: PathBuf,
    /// Suspect network.
    #[arg(long, conflicts_with = "transcript", required_unless_present = "transcript")]
    suspect: Option<PathBuf>,
    /// Suspect transcript already collected on the core points.
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long, value_parser = parse_method, default_value = "cos")]
    method: Method,
    /// calibration.json from an evaluate run.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// clusters.json from an evaluate run (cluster method).
    #[arg(long)]
    clusters: Option<PathBuf>,
    #[arg(long)]
    d1: Option<f64>,
    #[arg(long)]
    d2: Option<f64>,
}

#[derive(Args)]
struct CurveArgs {
    /// Directory of a finished fingerprint or evaluate run.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_FAILURE);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err.root() {
                Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_FILE,
                Error::Schema { .. } | Error::Parse { .. } => EXIT_SCHEMA,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let verbose = cli.verbose;
    match cli.command {
        Command::TrainZoo(args) => train_zoo(&args, verbose),
        Command::Fingerprint(args) => fingerprint(&args, verbose),
        Command::Identify(args) => identify(&args),
        Command::Evaluate(args) => evaluate(&args, verbose),
        Command::InsightCurves(args) => insight_curves(&args),
    }
}

fn load_config(args: &ExperimentArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = if args.config == "demo" {
        ExperimentConfig::demo()
    } else {
        let path = Path::new(&args.config);
        if path.exists() {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml(&text).map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
        } else {
            let cfg = ExperimentConfig::demo();
            write_text(path, &cfg.to_toml())?;
            eprintln!("wrote default configuration to {}", path.display());
            cfg
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(method) = args.method {
        cfg.identify.methods = vec![method];
    }
    if args.top_k.is_some() {
        cfg.identify.top_k = args.top_k;
    }
    cfg.output_dir = Some(
        args.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("corepoint-out")),
    );
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> &Path {
    cfg.output_dir.as_deref().expect("set by load_config")
}

fn train_zoo(args: &ExperimentArgs, verbose: bool) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg);
    let split = build_split(&cfg)?;
    if verbose {
        eprintln!("training zoo into {}", dir.display());
    }
    let zoo = build_zoo(&split, &cfg.zoo_config()).map_err(|e| stage("zoo", e))?;
    write_zoo(dir, &zoo, &zoo_manifest(&zoo, cfg.seed, &[]))?;
    write_text(dir.join("config.toml"), &cfg.to_toml())?;
    println!("trained {} models into {}", zoo.suspects.len() + 1, dir.display());
    Ok(())
}

fn fingerprint(args: &ExperimentArgs, verbose: bool) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg);
    let (_, zoo) = read_zoo(dir)?;
    let split = build_split(&cfg)?;
    if verbose {
        eprintln!("generating core points for {}", zoo.victim.id);
    }
    let run = generate_fingerprint(
        &zoo.victim.net,
        &zoo.victim.id,
        &cfg.coregen_config(),
        Some(&split.victim),
        cfg.identify.top_k,
    )
    .map_err(|e| stage("fingerprint", e))?;
    save_json(dir.join("fingerprint/fingerprint.json"), &run.fingerprint)?;
    save_json(dir.join("fingerprint/traces.json"), &run.traces)?;
    for c in &run.fingerprint.core_points {
        println!(
            "label {} radius {:.6} score {:.6} epochs {}",
            c.label, c.radius, c.score, c.epochs_used
        );
    }
    Ok(())
}

fn evaluate(args: &ExperimentArgs, verbose: bool) -> anyhow::Result<()> {
    let cfg = load_config(args)?;
    if verbose {
        eprintln!("running experiment into {}", out_dir(&cfg).display());
    }
    let exp = run_experiment(&cfg)?;
    print!("{}", render_report(&exp.report, &exp.config));
    Ok(())
}

fn insight_curves(args: &CurveArgs) -> anyhow::Result<()> {
    let dir = args
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .ok_or_else(|| anyhow!("no run directory: pass --out or set {OUT_ENV}"))?;
    let (_, zoo) = read_zoo(&dir)?;
    let fp: Fingerprint = load_json(dir.join("fingerprint/fingerprint.json"))?;
    let traces: Vec<CoreTrace> = load_json(dir.join("fingerprint/traces.json"))?;
    for path in emit_insight_curves(&zoo, &traces, &fp, &dir.join("curves"))? {
        println!("{}", path.display());
    }
    Ok(())
}

fn identify(args: &IdentifyArgs) -> anyhow::Result<()> {
    let fp: Fingerprint = load_json(&args.fingerprint)?;
    let victim: Network = load_json(&args.victim)?;
    let victim_t = query_suspect(&fp.victim_id, &victim, &fp)?;
    let suspect_t: SuspectTranscript = match (&args.suspect, &args.transcript) {
        (Some(path), _) => {
            let net: Network = load_json(path)?;
            let id = path
                .file_stem()
                .map_or("suspect".into(), |s| s.to_string_lossy().into_owned());
            query_suspect(&id, &net, &fp)?
        }
        (None, Some(path)) => load_json(path)?,
        (None, None) => unreachable!("clap requires one of --suspect/--transcript"),
    };

    let verdict = if args.method == Method::Cluster {
        let path = args
            .clusters
            .as_ref()
            .ok_or_else(|| anyhow!("--method cluster needs --clusters"))?;
        let model: ClusterModel = load_json(path)?;
        model.classify(&suspect_t)?
    } else {
        let mut th = match &args.thresholds {
            Some(path) => load_json::<Calibration>(path)?.thresholds,
            None => Thresholds {
                d1: f64::NAN,
                d2: f64::NAN,
            },
        };
        if let Some(d1) = args.d1 {
            th.d1 = d1;
        }
        if let Some(d2) = args.d2 {
            th.d2 = d2;
        }
        let needed = if args.method == Method::L1 { th.d1 } else { th.d2 };
        if needed.is_nan() {
            return Err(anyhow!(
                "no threshold for {}: pass --thresholds or --{}",
                args.method,
                if args.method == Method::L1 { "d1" } else { "d2" }
            ));
        }
        decide(&victim_t, &suspect_t, &th, args.method)?
    };
    println!("{verdict}");
    Ok(())
}

fn stage(name: &'static str, e: Error) -> anyhow::Error {
    anyhow::Error::new(e).context(name)
}
