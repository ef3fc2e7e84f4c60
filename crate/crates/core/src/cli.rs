//! Command-line front end: `train`, `enhance`, `eval`, `gradcheck`, `inspect`.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::{collect_inputs, Dataset};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::image::{load_image, save_image, ImageBuffer};
use crate::kv::KvMap;
use crate::metrics::{ImageMetrics, MetricReport, Peak};
use crate::model::{Jcrnet, ModelConfig};
use crate::params::ParamStore;
use crate::train::{TrainConfig, Trainer};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "JCRNET_THREADS";

#[derive(Debug, Parser)]
#[command(name = "jcrnet", version, about = "Low-light image enhancement", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a paired directory (DIR/low, DIR/high).
    Train(TrainArgs),
    /// Enhance one image or every image of a directory.
    Enhance(EnhanceArgs),
    /// PSNR/SSIM of a checkpoint on a paired directory.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every building block.
    Gradcheck(GradcheckArgs),
    /// Print the configuration echo and parameter table of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// key=value file with model and training keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from a checkpoint that carries training state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Loss trace; defaults to the output path with extension `loss`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Quantize to bytes and use peak 255 instead of comparing raw [0, 1] values.
    #[arg(long)]
    pub byte_peak: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub module: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    configure_threads();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() {
    let Ok(v) = std::env::var(THREADS_ENV) else { return };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                warn!("thread pool already initialized; ignoring {THREADS_ENV}={v}");
            }
        }
        _ => warn!("ignoring invalid {THREADS_ENV}={v}"),
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train(a) => train(&a).map(|_| 0),
        Command::Enhance(a) => enhance(&a).map(|_| 0),
        Command::Eval(a) => eval(&a).map(|r| {
            print!("{}", r.render_table());
            0
        }),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Inspect(a) => {
            print!("{}", inspect(&Checkpoint::load(&a.ckpt)?));
            Ok(0)
        }
    }
}

/// Reads a key=value configuration file, rejecting keys no component knows.
pub fn read_config(path: &Path) -> Result<KvMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kv = KvMap::parse(&text)?;
    let known: Vec<&str> = ModelConfig::KEYS.iter().chain(TrainConfig::KEYS.iter()).copied().collect();
    kv.reject_unknown(&known)?;
    Ok(kv)
}

/// Model and training keys of a run, as stored in its checkpoints.
pub fn run_echo(model: &ModelConfig, train: &TrainConfig) -> KvMap {
    let mut kv = model.to_kv();
    kv.merge(&train.to_kv());
    kv
}

/// `out.stepNNNNNN.ext` for the checkpoint written after `steps` steps.
pub fn periodic_path(out: &Path, steps: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.step{steps:06}.{}", ext.to_string_lossy()),
        None => format!("{stem}.step{steps:06}"),
    };
    out.with_file_name(name)
}

fn load_model(ck: &Checkpoint) -> Result<(Jcrnet, ParamStore<f32>)> {
    let model = Jcrnet::new(ck.model_config()?)?;
    model.registry().validate(&ck.params)?;
    Ok((model, ck.params.clone()))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let file = a.config.as_deref().map(read_config).transpose()?.unwrap_or_default();
    let resumed = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let (model_cfg, mut cfg, params, state) = match resumed {
        Some(ck) => {
            if a.seed.is_some() || a.steps.is_some() {
                return Err(Error::Usage("--seed and --steps come from the checkpoint when resuming".into()));
            }
            let model_cfg = ck.model_config()?;
            if model_cfg.updated_from(&file)? != model_cfg {
                return Err(Error::config("config file disagrees with the checkpoint's model keys"));
            }
            let cfg = TrainConfig::default().updated_from(&ck.echo)?.updated_from(&file)?;
            let state = ck.require_state()?.clone();
            (model_cfg, cfg, ck.params, Some(state))
        }
        None => {
            let model_cfg = ModelConfig::default().updated_from(&file)?;
            let mut cfg = TrainConfig::default().updated_from(&file)?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            if let Some(steps) = a.steps {
                cfg.schedule.total_steps = steps;
            }
            let params = Jcrnet::new(model_cfg)?.init_params(cfg.seed);
            (model_cfg, cfg, params, None)
        }
    };
    let model = Jcrnet::new(model_cfg)?;
    let (data, pairing) = Dataset::load(&a.data)?;
    for line in pairing.report() {
        eprintln!("{line}");
    }
    if data.is_empty() {
        return Err(Error::config(format!("{}: no paired images", a.data.display())));
    }
    let resuming = state.is_some();
    let mut trainer = match state {
        Some(state) => Trainer::resume(&model, params, state, cfg)?,
        None => Trainer::new(&model, params, cfg)?,
    };
    cfg = trainer.cfg;
    let echo = run_echo(&model_cfg, &cfg);
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("loss"));
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let snapshot = |t: &Trainer| Checkpoint {
        echo: echo.clone(),
        params: t.params.clone(),
        state: Some(t.state.clone()),
    };
    trainer.run(&data, |entry, t| {
        writeln!(log, "{}", entry.render()).map_err(|e| Error::io(&log_path, e))?;
        if t.checkpoint_due(entry) {
            let path = periodic_path(&a.out, t.state.step);
            info!("checkpoint {}", path.display());
            snapshot(t).save(&path)?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    snapshot(&trainer).save(&a.out)?;
    info!("wrote {} and {}", a.out.display(), log_path.display());
    Ok(())
}

/// Enhances one file into `out`, or each image of a directory into the directory `out`.
pub fn enhance(a: &EnhanceArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let (model, params) = load_model(&ck)?;
    let inputs = collect_inputs(&a.input)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        inputs
            .into_iter()
            .map(|p| {
                let dst = a.out.join(p.file_name().expect("file path"));
                (p, dst)
            })
            .collect()
    } else {
        inputs.into_iter().map(|p| (p, a.out.clone())).collect()
    };
    jobs.par_iter().try_for_each(|(src, dst)| {
        let img = load_image(src)?;
        let out = enhance_image(&model, &params, &img)?;
        save_image(&out, dst)?;
        info!("{} -> {}", src.display(), dst.display());
        Ok(())
    })
}

pub fn enhance_image(model: &Jcrnet, params: &ParamStore<f32>, img: &ImageBuffer) -> Result<ImageBuffer> {
    let y = model.enhance_padded(params, &img.to_tensor())?;
    ImageBuffer::from_tensor(&y, 0)
}

/// Scores every pair of `a.data` and writes the key=value report.
pub fn eval(a: &EvalArgs) -> Result<MetricReport> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let (model, params) = load_model(&ck)?;
    let (data, pairing) = Dataset::load(&a.data)?;
    for line in pairing.report() {
        eprintln!("{line}");
    }
    if data.is_empty() {
        return Err(Error::config(format!("{}: no paired images", a.data.display())));
    }
    let peak = if a.byte_peak { Peak::Byte } else { Peak::Unit };
    let scored = data
        .pairs
        .par_iter()
        .map(|pair| {
            let pred = enhance_image(&model, &params, &pair.low)?;
            ImageMetrics::measure(&pair.name, &pred, &pair.high, peak)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricReport::default();
    scored.into_iter().for_each(|m| report.push(m));
    fs::write(&a.report, report.to_kv().render()).map_err(|e| Error::io(&a.report, e))?;
    Ok(report)
}

/// Prints one line per case; exit code 3 if any case fails.
pub fn gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let reports = gradsuite::run_suite(a.module.as_deref(), a.seed)?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.report.pass).count();
    println!("{} of {} cases passed", reports.len() - failed, reports.len());
    Ok(if failed == 0 { 0 } else { 3 })
}

/// Configuration echo, then `name shape count` per tensor and the total.
pub fn inspect(ck: &Checkpoint) -> String {
    use std::fmt::Write as _;
    let mut out = ck.echo.render();
    out.push('\n');
    for (name, t) in ck.params.iter() {
        let _ = writeln!(out, "{name} {:?} {}", t.shape(), t.numel());
    }
    let _ = writeln!(out, "total {} tensors {} parameters", ck.params.len(), ck.params.num_elements());
    if let Some(s) = &ck.state {
        let _ = writeln!(out, "training state at step {} of {}", s.step, s.schedule.total_steps);
    }
    out
}
