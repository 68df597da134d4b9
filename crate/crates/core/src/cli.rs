//! The `tonestyle` command line.
//!
//! Exit codes: 0 success, 1 usage (bad flags, bad spec/config/codebook
//! arguments), 2 runtime (I/O, corrupt checkpoints, numerics). Every
//! failure prints one diagnostic line on stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::load_checkpoint;
use crate::config::TrainConfig;
use crate::error::Error;
use crate::eval::{evaluate, Protocol, ProtocolKind};
use crate::flow::LatentVector;
use crate::image::Image;
use crate::model::Model;
use crate::service::{serve, ServeConfig, DEFAULT_MAX_SESSIONS};
use crate::style_ops::{
    average_latent, cluster_latents, encode_pair, optimize_latent, sample_retouch_with_latents, AverageSpace,
    CodebookSource, LatentCodebook, OptimizeConfig,
};
use crate::synth::{generate_synthetic_dataset, load_dataset, ExpertSpec, Pair};
use crate::trainer::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tonestyle", version, about = "Diverse tone-style retouching with a conditional flow over style vectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic paired dataset from expert specs.
    Generate(GenerateArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Fit an expert latent or a clustered codebook.
    FitStyle(FitStyleArgs),
    /// Retouch one image with sampled, codebook or explicit latents.
    Retouch(RetouchArgs),
    /// Run an evaluation protocol and write a report.
    Eval(EvalArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Expert spec JSON (one spec or an array of specs).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pairs per expert.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 72)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "train")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` config file; defaults apply without it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Config override `key=value`; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Print a progress line every this many iterations (0 = quiet).
    #[arg(long, default_value_t = 0)]
    pub log_every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpaceArg {
    Latent,
    Style,
}

#[derive(Debug, Args)]
pub struct FitStyleArgs {
    /// Training checkpoint (the encoder is needed).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// `average`, `optimize` or `cluster:K`.
    #[arg(long)]
    pub mode: String,
    /// Output codebook path.
    #[arg(long)]
    pub out: PathBuf,
    /// Only use pairs of this expert.
    #[arg(long)]
    pub expert: Option<String>,
    /// Where styles are averaged.
    #[arg(long, value_enum, default_value_t = SpaceArg::Latent)]
    pub space: SpaceArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optimizer steps for `optimize`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Optimizer step size for `optimize`.
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RetouchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of random styles.
    #[arg(long, conflicts_with_all = ["codebook", "latent_file"])]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, conflicts_with = "latent_file", requires = "center")]
    pub codebook: Option<PathBuf>,
    #[arg(long)]
    pub center: Option<usize>,
    /// JSON array of d numbers, or an array of such arrays.
    #[arg(long)]
    pub latent_file: Option<PathBuf>,
    /// Also write a contact sheet of the input followed by every output.
    #[arg(long)]
    pub grid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    SingleLatent,
    BestOfK,
    PerExpert,
    Extracted,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub protocol: ProtocolArg,
    /// Codebook for single-latent and best-of-k.
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Center used by single-latent.
    #[arg(long, default_value_t = 0)]
    pub center: usize,
    /// `EXPERT=PATH` codebook for per-expert; repeatable.
    #[arg(long = "expert-codebook", value_name = "EXPERT=PATH")]
    pub expert_codebooks: Vec<String>,
    /// Report path (line-delimited JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "TONESTYLE_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "TONESTYLE_CODEBOOK_DIR")]
    pub codebook_dir: Option<PathBuf>,
    #[arg(long, env = "TONESTYLE_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "TONESTYLE_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "TONESTYLE_MAX_SESSIONS", default_value_t = DEFAULT_MAX_SESSIONS)]
    pub max_sessions: usize,
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    pub code: i32,
    pub outputs: Vec<PathBuf>,
    /// One human-readable line (or clap's help text); the diagnostic on failure.
    pub summary: String,
}

impl CommandResult {
    fn ok(outputs: Vec<PathBuf>, summary: String) -> Self {
        Self {
            code: EXIT_OK,
            outputs,
            summary,
        }
    }
}

/// A command error with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parameter(_) | Error::Index { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Errors in files the user names as arguments are usage errors; a missing
/// or unreadable file keeps its runtime code.
fn argument_file(e: Error) -> Failure {
    match e {
        Error::Io { .. } => e.into(),
        other => Failure::usage(other.to_string()),
    }
}

pub type CmdResult = std::result::Result<CommandResult, Failure>;

/// Parses and runs without printing.
pub fn execute<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            return CommandResult {
                code,
                outputs: Vec::new(),
                summary: e.render().to_string(),
            };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::FitStyle(a) => cmd_fit_style(&a),
        Command::Retouch(a) => cmd_retouch(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Serve(a) => cmd_serve(&a),
    };
    result.unwrap_or_else(|f| CommandResult {
        code: f.code,
        outputs: Vec::new(),
        summary: format!("error: {}", f.message),
    })
}

/// Runs and prints: the summary to stdout on success, to stderr otherwise.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let r = execute(args);
    let text = r.summary.trim_end();
    if r.code == EXIT_OK {
        println!("{text}");
    } else {
        eprintln!("{text}");
    }
    r.code
}

pub fn cmd_generate(a: &GenerateArgs) -> CmdResult {
    let specs = ExpertSpec::load(&a.spec).map_err(argument_file)?;
    let manifest = generate_synthetic_dataset(&specs, a.count, a.size, a.seed, &a.split, &a.out).map_err(|e| match e {
        Error::Input(m) => Failure::usage(m),
        other => other.into(),
    })?;
    let path = a.out.join(crate::synth::MANIFEST_FILE);
    Ok(CommandResult::ok(
        vec![path.clone()],
        format!(
            "generated {} pairs for {} expert(s) -> {}",
            manifest.entries.len(),
            specs.len(),
            path.display()
        ),
    ))
}

pub fn resolve_train_config(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).map_err(argument_file)?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = a.iterations {
        cfg.total_iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> CmdResult {
    let cfg = resolve_train_config(a)?;
    let pairs = load_dataset(&a.manifest).map_err(argument_file)?.load_all()?;
    let every = a.log_every;
    let outcome = train(&pairs, &cfg, &a.out, a.resume.as_deref(), |r| {
        if every > 0 && r.iteration % every == 0 {
            eprintln!(
                "iter {:>7}  l_ret {:.5}  l_nll {:>9.3}  l_total {:>9.3}",
                r.iteration, r.retouching_loss, r.nll_loss, r.total_loss
            );
        }
    })?;
    Ok(CommandResult::ok(
        vec![
            outcome.checkpoint.clone(),
            outcome.deploy_checkpoint.clone(),
            outcome.loss_log.clone(),
        ],
        format!(
            "trained to iteration {} -> {}",
            outcome.final_iteration,
            outcome.checkpoint.display()
        ),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMode {
    Average,
    Optimize,
    Cluster(usize),
}

pub fn parse_fit_mode(s: &str) -> Option<FitMode> {
    match s {
        "average" => Some(FitMode::Average),
        "optimize" => Some(FitMode::Optimize),
        other => other
            .strip_prefix("cluster:")
            .and_then(|k| k.parse().ok())
            .filter(|k| *k >= 1)
            .map(FitMode::Cluster),
    }
}

fn load_pairs(manifest: &Path, expert: Option<&str>) -> std::result::Result<Vec<Pair>, Failure> {
    let mut pairs = load_dataset(manifest).map_err(argument_file)?.load_all()?;
    if let Some(name) = expert {
        pairs.retain(|p| p.expert == name);
        if pairs.is_empty() {
            return Err(Failure::usage(format!(
                "no pairs of expert {name:?} in {}",
                manifest.display()
            )));
        }
    }
    Ok(pairs)
}

pub fn cmd_fit_style(a: &FitStyleArgs) -> CmdResult {
    let mode = parse_fit_mode(&a.mode)
        .ok_or_else(|| Failure::usage(format!("--mode must be average, optimize or cluster:K, got {:?}", a.mode)))?;
    let model = load_checkpoint(&a.checkpoint)?.model;
    let pairs = load_pairs(&a.manifest, a.expert.as_deref())?;
    let space = match a.space {
        SpaceArg::Latent => AverageSpace::Latent,
        SpaceArg::Style => AverageSpace::Style,
    };
    let dataset = Some(a.manifest.display().to_string());
    let (codebook, note) = match mode {
        FitMode::Average => {
            let z = average_latent(&pairs, &model, space)?;
            (
                LatentCodebook::new(vec![z], CodebookSource::Averaged, Some(a.seed), dataset)?,
                String::new(),
            )
        }
        FitMode::Optimize => {
            let z0 = average_latent(&pairs, &model, space)?;
            let mut cfg = OptimizeConfig::default();
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            if let Some(lr) = a.lr {
                cfg.learning_rate = lr;
            }
            let r = optimize_latent(&pairs, &z0, &model, &cfg)?;
            (
                LatentCodebook::new(vec![r.latent], CodebookSource::Optimized, Some(a.seed), dataset)?,
                format!(", objective {:.6} -> {:.6}", r.initial_objective, r.objective),
            )
        }
        FitMode::Cluster(k) => {
            if k > pairs.len() {
                return Err(Failure::usage(format!("cluster:{k} needs at least {k} pairs, have {}", pairs.len())));
            }
            let latents = pairs
                .iter()
                .map(|p| encode_pair(&model, &p.input, &p.reference).map(|(_, z)| z))
                .collect::<crate::error::Result<Vec<_>>>()?;
            let mut cb = cluster_latents(&latents, k, a.seed)?;
            cb.dataset = dataset;
            (cb, String::new())
        }
    };
    codebook.save(&a.out)?;
    Ok(CommandResult::ok(
        vec![a.out.clone()],
        format!(
            "{} codebook with K = {} from {} pairs{note} -> {}",
            codebook.source,
            codebook.k,
            pairs.len(),
            a.out.display()
        ),
    ))
}

fn read_latent_file(path: &Path, d: usize) -> std::result::Result<Vec<LatentVector>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    let bad = |m: String| Failure::usage(format!("{}: {m}", path.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let latents: Vec<Vec<f32>> = if value.as_array().is_some_and(|a| a.iter().all(|v| v.is_number())) {
        vec![serde_json::from_value(value).map_err(|e| bad(e.to_string()))?]
    } else {
        serde_json::from_value(value).map_err(|e| bad(e.to_string()))?
    };
    if latents.is_empty() {
        return Err(bad("no latents".into()));
    }
    if let Some(z) = latents.iter().find(|z| z.len() != d || z.iter().any(|v| !v.is_finite())) {
        return Err(bad(format!("latent of length {} for d = {d}", z.len())));
    }
    Ok(latents.into_iter().map(LatentVector).collect())
}

fn render_all(model: &Model, x: &Image, latents: &[LatentVector]) -> crate::error::Result<Vec<Image>> {
    latents.iter().map(|z| model.render(x, z)).collect()
}

pub fn cmd_retouch(a: &RetouchArgs) -> CmdResult {
    let sources = [a.sample.is_some(), a.codebook.is_some(), a.latent_file.is_some()];
    if sources.iter().filter(|s| **s).count() != 1 {
        return Err(Failure::usage(
            "exactly one of --sample N, --codebook PATH --center J, --latent-file PATH is required",
        ));
    }
    let model = load_checkpoint(&a.checkpoint)?.model;
    let x = Image::read_png(&a.image).map_err(argument_file)?;
    let d = model.style_dim();
    let (stem, latents, images) = if let Some(n) = a.sample {
        if n == 0 {
            return Err(Failure::usage("--sample must be at least 1"));
        }
        let (zs, imgs): (Vec<_>, Vec<_>) = sample_retouch_with_latents(&x, n, a.seed, &model)?.into_iter().unzip();
        ("sample", zs, imgs)
    } else if let Some(path) = &a.codebook {
        let cb = LatentCodebook::load(path).map_err(argument_file)?;
        if cb.d != d {
            return Err(Failure::usage(format!("codebook d = {} but the model has d = {d}", cb.d)));
        }
        let j = a.center.expect("clap requires --center with --codebook");
        let z = cb.center(j)?.clone();
        let imgs = render_all(&model, &x, std::slice::from_ref(&z))?;
        ("center", vec![z], imgs)
    } else {
        let path = a.latent_file.as_ref().expect("one source is set");
        let zs = read_latent_file(path, d)?;
        let imgs = render_all(&model, &x, &zs)?;
        ("latent", zs, imgs)
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::from(Error::Io {
        path: a.out.clone(),
        source: e,
    }))?;
    let mut outputs = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let index = match (stem, a.center) {
            ("center", Some(j)) => j,
            _ => i,
        };
        let p = a.out.join(format!("{stem}_{index:03}.png"));
        img.write_png(&p, false)?;
        outputs.push(p);
    }
    let latent_path = a.out.join("latents.json");
    let text = serde_json::to_string_pretty(&latents).expect("latents serialize");
    std::fs::write(&latent_path, text + "\n").map_err(|e| Failure::from(Error::Io {
        path: latent_path.clone(),
        source: e,
    }))?;
    outputs.push(latent_path);
    if a.grid {
        let mut tiles = vec![x.clone()];
        tiles.extend(images.iter().cloned());
        let p = a.out.join("grid.png");
        Image::hstack(&tiles)?.write_png(&p, false)?;
        outputs.push(p);
    }
    Ok(CommandResult::ok(
        outputs,
        format!("wrote {} retouched image(s) to {}", images.len(), a.out.display()),
    ))
}

fn parse_expert_codebooks(items: &[String]) -> std::result::Result<BTreeMap<String, LatentCodebook>, Failure> {
    let mut out = BTreeMap::new();
    for item in items {
        let (name, path) = item
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--expert-codebook expects EXPERT=PATH, got {item:?}")))?;
        let cb = LatentCodebook::load(Path::new(path)).map_err(argument_file)?;
        out.insert(name.to_string(), cb);
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let need_codebook = || {
        a.codebook.as_deref().ok_or_else(|| {
            Failure::usage(format!(
                "--protocol {} requires --codebook",
                match a.protocol {
                    ProtocolArg::SingleLatent => ProtocolKind::SingleLatent,
                    _ => ProtocolKind::BestOfK,
                }
            ))
        })
    };
    let protocol = match a.protocol {
        ProtocolArg::SingleLatent => {
            let codebook = LatentCodebook::load(need_codebook()?).map_err(argument_file)?;
            codebook.center(a.center)?;
            Protocol::SingleLatent {
                codebook,
                center: a.center,
            }
        }
        ProtocolArg::BestOfK => Protocol::BestOfK {
            codebook: LatentCodebook::load(need_codebook()?).map_err(argument_file)?,
        },
        ProtocolArg::PerExpert => {
            if a.expert_codebooks.is_empty() {
                return Err(Failure::usage("--protocol per-expert requires --expert-codebook EXPERT=PATH"));
            }
            Protocol::PerExpert {
                codebooks: parse_expert_codebooks(&a.expert_codebooks)?,
            }
        }
        ProtocolArg::Extracted => Protocol::Extracted,
    };
    let model = load_checkpoint(&a.checkpoint)?.model;
    let pairs = load_dataset(&a.manifest).map_err(argument_file)?.load_all()?;
    let report = evaluate(&model, &pairs, &protocol).map_err(|e| match e {
        Error::Shape(m) => Failure::usage(m),
        other => other.into(),
    })?;
    report.write(&a.out)?;
    Ok(CommandResult::ok(
        vec![a.out.clone()],
        format!(
            "{} on {} images: psnr {:.3} dB, ssim {}, delta_e {:.3} -> {}",
            report.protocol,
            report.rows.len(),
            report.mean_psnr,
            report.mean_ssim.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            report.mean_delta_e,
            a.out.display()
        ),
    ))
}

pub fn cmd_serve(a: &ServeArgs) -> CmdResult {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Failure::usage(format!("bad --host/--port: {e}")))?;
    let cfg = ServeConfig {
        addr,
        checkpoint: a.checkpoint.clone(),
        codebook_dir: a.codebook_dir.clone(),
        max_sessions: a.max_sessions,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("cannot start the async runtime: {e}"),
    })?;
    runtime.block_on(serve(cfg, |local| eprintln!("listening on http://{local}")))?;
    Ok(CommandResult::ok(Vec::new(), "server stopped".into()))
}
