//! `scenesig`: train models, encode depth frames, build and query signature
//! databases, and run relocalization benchmarks.
//!
//! Exit status: 0 on success, 2 for configuration or usage errors, 3 for
//! data errors (missing or malformed files, model mismatches, ...).

mod commands;
mod data;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scenesig::dpp::DppConfig;
use scenesig::pipeline::{PipelineConfig, Variant};

#[derive(Parser, Debug)]
#[command(name = "scenesig", version, about = "Geometric scene-view signatures: retrieval, diversification, validation")]
struct Cli {
    /// Pipeline configuration (TOML). Relative model and database paths in
    /// it are resolved against the file's directory.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Start from the 160×120 desk preset instead of the library defaults
    /// (ignored with --config).
    #[arg(long, global = true)]
    desk: bool,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the ICA projection on raw pair features of training frames.
    TrainIca(TrainIcaArgs),
    /// Fit the Gaussian mixture on ICA-projected features.
    TrainGmm(TrainGmmArgs),
    /// Write one signature file per frame.
    Encode(EncodeArgs),
    /// Encode frames into a signature database.
    Index(IndexArgs),
    /// Retrieve (and optionally diversify and validate) database views.
    Query(QueryArgs),
    /// Relocalization accuracy of query sequences against a database.
    Evaluate(EvaluateArgs),
    /// Render synthetic rooms as 7-scenes style sequences.
    Synth(SynthArgs),
    /// Database inspection.
    Db {
        #[command(subcommand)]
        command: DbCommand,
    },
}

#[derive(Subcommand, Debug)]
enum DbCommand {
    /// Entry count, dimension, model version.
    Stats {
        #[arg(value_name = "DB")]
        db: Option<PathBuf>,
        #[arg(long = "db", value_name = "DB", conflicts_with = "db")]
        db_path: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug)]
struct Models {
    /// ICA model (default: paths.ica)
    #[arg(long)]
    ica: Option<PathBuf>,
    /// GMM model (default: paths.gmm)
    #[arg(long)]
    gmm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainIcaArgs {
    /// Sequence directories, or directories containing them.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Use every n-th frame.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Output model (default: paths.ica). A `.txt` extension writes text.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainGmmArgs {
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// ICA model (default: paths.ica)
    #[arg(long)]
    ica: Option<PathBuf>,
    /// Mixture components G.
    #[arg(long, short = 'G')]
    components: Option<usize>,
    /// Output model (default: paths.gmm). A `.txt` extension writes text.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    models: Models,
    /// Stored float width, 4 or 8 bytes.
    #[arg(long, default_value_t = 4)]
    float_width: u32,
    /// Also write the raw feature dump of each frame.
    #[arg(long)]
    features: bool,
    /// Also export each frame's segmentation hierarchy.
    #[arg(long)]
    segmentation: bool,
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Database file (default: paths.db).
    #[arg(long)]
    db: Option<PathBuf>,
    #[command(flatten)]
    models: Models,
    /// Keep one frame in n of every sequence.
    #[arg(long, default_value_t = 1)]
    sparsity: usize,
    /// Add to an existing database instead of creating one.
    #[arg(long, conflicts_with = "force")]
    append: bool,
    /// Replace an existing database file.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct Retrieval {
    /// Relocalization variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Retrieval set size.
    #[arg(long)]
    k: Option<usize>,
    /// DPP selection size and kernel parameters: k[,sigma,omega,kappa];
    /// empty fields keep their defaults.
    #[arg(long, value_name = "k[,sigma,omega,kappa]")]
    diversify: Option<DppConfig>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    /// Database file (default: paths.db).
    #[arg(long)]
    db: Option<PathBuf>,
    /// Query frames: sequence directories.
    #[arg(long, num_args = 1.., conflicts_with = "signature")]
    data: Vec<PathBuf>,
    /// Only this frame index of each sequence.
    #[arg(long, requires = "data")]
    frame: Option<usize>,
    /// Query signature files (R and DR only; validation needs frames).
    #[arg(long, num_args = 1..)]
    signature: Vec<PathBuf>,
    #[command(flatten)]
    models: Models,
    #[command(flatten)]
    retrieval: Retrieval,
    /// Append each query's DPP kernel to this file.
    #[arg(long)]
    dump_kernel: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Database file (default: paths.db).
    #[arg(long)]
    db: Option<PathBuf>,
    /// Query sequences with ground-truth poses.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[command(flatten)]
    models: Models,
    /// Variants to run, comma separated (default: the configured one).
    #[arg(long, value_delimiter = ',')]
    variant: Vec<Variant>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_name = "k[,sigma,omega,kappa]")]
    diversify: Option<DppConfig>,
    /// Evaluate against the database thinned to one frame in n per sequence.
    #[arg(long, default_value_t = 1)]
    sparsity: usize,
    /// Write JSON-lines records here; the summary table then goes to stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    rooms: usize,
    /// Database frames per room.
    #[arg(long, default_value_t = 60)]
    db_frames: usize,
    /// Held-out query frames per room.
    #[arg(long, default_value_t = 20)]
    queries: usize,
    /// Depth noise standard deviation, m.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Database as CLUSTERSxPER tight view clusters, e.g. 12x5.
    #[arg(long, value_parser = parse_clusters, conflicts_with = "db_frames")]
    clustered: Option<(usize, usize)>,
    /// Render this scene description instead of generated rooms.
    #[arg(long, conflicts_with = "rooms")]
    scene: Option<PathBuf>,
}

fn parse_clusters(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or("expected CLUSTERSxPER")?;
    let n = |t: &str| t.trim().parse::<usize>().ok().filter(|&v| v > 0).ok_or(format!("bad count {t:?}"));
    Ok((n(a)?, n(b)?))
}

/// A failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl From<scenesig::Error> for Failure {
    fn from(e: scenesig::Error) -> Self {
        let code = if matches!(e, scenesig::Error::InvalidConfig(_)) { 2 } else { 3 };
        Self { code, msg: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let mut c = PipelineConfig::load(path).map_err(|e| Failure::config(format!("config {}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new("."));
            resolve(base, &mut c.paths.ica);
            resolve(base, &mut c.paths.gmm);
            resolve(base, &mut c.paths.db);
            c
        }
        None if cli.desk => PipelineConfig::desk(),
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::TrainIca(a) => commands::train_ica(&cfg, a),
        Command::TrainGmm(a) => {
            if let Some(g) = a.components {
                cfg.gmm.components = g;
            }
            commands::train_gmm(&cfg, a)
        }
        Command::Encode(a) => commands::encode(&cfg, a),
        Command::Index(a) => commands::index(&cfg, a),
        Command::Query(a) => {
            apply_retrieval(&mut cfg, a.retrieval.variant, a.retrieval.k, a.retrieval.diversify);
            commands::query(&cfg, a)
        }
        Command::Evaluate(a) => {
            apply_retrieval(&mut cfg, None, a.k, a.diversify);
            commands::evaluate(&cfg, a)
        }
        Command::Synth(a) => commands::synth(&cfg, cli.config.is_some(), a),
        Command::Db { command: DbCommand::Stats { db, db_path, json } } => commands::db_stats(&cfg, db.as_ref().or(db_path.as_ref()), *json),
    }
}

fn apply_retrieval(cfg: &mut PipelineConfig, variant: Option<Variant>, k: Option<usize>, div: Option<DppConfig>) {
    if let Some(v) = variant {
        cfg.variant = v;
    }
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(d) = div {
        cfg.k_dpp = d.k;
        cfg.dpp.sigma = d.sigma;
        cfg.dpp.omega = d.omega;
        cfg.dpp.kappa = d.kappa;
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
