//! Command-line front end.
//!
//! Every subcommand resolves a [`RunConfig`] from defaults, an optional
//! `--config` file and flags, writes the resolved values next to its
//! outputs and can be rerun from that file alone.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bridges::verify::{gronwall_check, verify_pinning, GronwallReport, GronwallSeries, PinningReport};
use crate::bridges::{BridgeSpec, Force, StepSize};
use crate::config::RunConfig;
use crate::energies::{EnergyConfig, EnergyForce, EnergyKind, TermMask};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, SampleOptions};
use crate::geometry::{extract_stats, io, synth, AtomTables, DatasetStats, MarkedPointSet};
use crate::model::train::{write_log, BridgeChoice, OptimizerKind};
use crate::model::{load_checkpoint, save_checkpoint, train, AlphaMode, TrainConfig};
use crate::sde::{make_grid, NoiseSchedule, ScheduleKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const RESOLVED: &str = "resolved.cfg";

#[derive(Parser, Debug)]
#[command(name = "prior-bridge", version, about = "Prior-informed diffusion bridges for molecules and point clouds")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log filter, e.g. `info` or `debug`.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Dataset statistics for the statistical and knn energies.
    ExtractStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        tables: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a drift model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        energy: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Terminal pinning and Gronwall divergence checks.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Metrics of generated sets against a reference set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Energy and gradient of one input file.
    Energy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        energy: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Domain(_) => EXIT_CONFIG,
        Error::Parse { .. } | Error::Io(_) | Error::Json(_) | Error::Table(_) | Error::Integrity(_) => EXIT_DATA,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_OTHER,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli.command)),
            Err(e) => Err(Error::Config(format!("thread pool: {e}"))),
        },
        None => run(&cli.command),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::ExtractStats {
            common,
            data,
            k,
            tables,
            out,
        } => {
            let mut c = resolve(common, STATS_DEFAULTS)?;
            c.apply_flag("data", data.as_ref().map(|p| p.display()))?;
            c.apply_flag("k", *k)?;
            c.apply_flag("tables", tables.as_ref())?;
            c.apply_flag("out", out.as_ref().map(|p| p.display()))?;
            cmd_extract_stats(&mut c)
        }
        Command::Train {
            common,
            data,
            out_dir,
            energy,
            epochs,
            seed,
        } => {
            let mut c = resolve(common, TRAIN_DEFAULTS)?;
            c.apply_flag("data", data.as_ref().map(|p| p.display()))?;
            c.apply_flag("out_dir", out_dir.as_ref().map(|p| p.display()))?;
            c.apply_flag("energy", energy.as_ref())?;
            c.apply_flag("epochs", *epochs)?;
            c.apply_flag("seed", *seed)?;
            cmd_train(&mut c)
        }
        Command::Sample {
            common,
            checkpoint,
            out_dir,
            n,
            steps,
            seed,
        } => {
            let mut c = resolve(common, SAMPLE_DEFAULTS)?;
            c.apply_flag("checkpoint", checkpoint.as_ref().map(|p| p.display()))?;
            c.apply_flag("out_dir", out_dir.as_ref().map(|p| p.display()))?;
            c.apply_flag("n", *n)?;
            c.apply_flag("steps", *steps)?;
            c.apply_flag("seed", *seed)?;
            cmd_sample(&mut c)
        }
        Command::Verify { common, out_dir, seed } => {
            let mut c = resolve(common, VERIFY_DEFAULTS)?;
            c.apply_flag("out_dir", out_dir.as_ref().map(|p| p.display()))?;
            c.apply_flag("seed", *seed)?;
            cmd_verify(&mut c)
        }
        Command::Eval {
            common,
            samples,
            reference,
            out_dir,
        } => {
            let mut c = resolve(common, EVAL_DEFAULTS)?;
            c.apply_flag("samples", samples.as_ref().map(|p| p.display()))?;
            c.apply_flag("reference", reference.as_ref().map(|p| p.display()))?;
            c.apply_flag("out_dir", out_dir.as_ref().map(|p| p.display()))?;
            cmd_eval(&mut c)
        }
        Command::Energy {
            common,
            input,
            energy,
            out,
        } => {
            let mut c = resolve(common, ENERGY_DEFAULTS)?;
            c.apply_flag("input", input.as_ref().map(|p| p.display()))?;
            c.apply_flag("energy", energy.as_ref())?;
            c.apply_flag("out", out.as_ref().map(|p| p.display()))?;
            cmd_energy(&mut c)
        }
    }
}

/// Defaults, then the config file; flags are applied by the caller on top
/// of `--set` overrides.
fn resolve(common: &Common, defaults: &[(&str, &str)]) -> Result<RunConfig> {
    let mut c = RunConfig::with_defaults(defaults);
    if let Some(path) = &common.config {
        c.apply_file(path)?;
    }
    c.apply_flags(&common.set)?;
    Ok(c)
}

fn required_path(c: &RunConfig, key: &str) -> Result<PathBuf> {
    match c.raw(key)? {
        "" => Err(Error::Config(format!("{key} must be set"))),
        p => Ok(PathBuf::from(p)),
    }
}

/// Reads the seed, generating and recording one when unset.
fn seed(c: &mut RunConfig) -> Result<u64> {
    if c.raw("seed")?.is_empty() {
        let s = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        log::info!("no seed given; using {s}");
        c.record("seed", s)?;
    }
    c.get("seed")
}

fn load_tables(c: &RunConfig) -> Result<AtomTables> {
    match c.raw("tables")? {
        "" | "builtin" => Ok(AtomTables::builtin()),
        p => AtomTables::load(Path::new(p)),
    }
}

/// Tables restricted to the configured symbols; `auto` scans `data` for the
/// symbols that occur. `None` when the data holds no molecules.
pub fn data_tables(c: &mut RunConfig, data: &Path) -> Result<Option<AtomTables>> {
    let all = load_tables(c)?;
    let symbols: Vec<String> = match c.raw("symbols")? {
        "auto" => {
            let s = io::scan_symbols(data, &all)?;
            c.record("symbols", if s.is_empty() { "none".to_string() } else { s.join(",") })?;
            s
        }
        "none" | "" => Vec::new(),
        _ => c.get_list("symbols")?,
    };
    if symbols.is_empty() {
        Ok(None)
    } else {
        all.select(&symbols).map(Some)
    }
}

fn parse_schedule(c: &RunConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleKind::parse(c.raw("schedule")?)?, c.get("horizon")?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub const STATS_DEFAULTS: &[(&str, &str)] = &[
    ("data", ""),
    ("k", "4"),
    ("tables", "builtin"),
    ("symbols", "auto"),
    ("out", "stats.json"),
];

pub fn cmd_extract_stats(c: &mut RunConfig) -> Result<()> {
    let data = required_path(c, "data")?;
    let tables = data_tables(c, &data)?;
    let out = required_path(c, "out")?;
    c.log_resolution();
    let dataset = io::load_dataset(&data, tables.as_ref())?;
    let stats = extract_stats(&dataset, c.get("k")?, tables.as_ref())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    stats.save(&out)?;
    c.write(&out.with_extension("resolved.cfg"))?;
    println!("{} items -> {} (fingerprint {})", dataset.len(), out.display(), stats.fingerprint());
    Ok(())
}

pub const TRAIN_DEFAULTS: &[(&str, &str)] = &[
    ("data", ""),
    ("out_dir", ""),
    ("tables", "builtin"),
    ("symbols", "auto"),
    ("energy", "none"),
    ("k", "4"),
    ("stats", "auto"),
    ("term_mask", "all"),
    ("clip", "1000"),
    ("force_weight", "1"),
    ("steps", "100"),
    ("epochs", "100"),
    ("batch_size", "16"),
    ("learning_rate", "0.0001"),
    ("seed", ""),
    ("schedule", "constant:1"),
    ("horizon", "1"),
    ("bridge", "auto"),
    ("times_per_item", "4"),
    ("optimizer", "sgd"),
    ("momentum", "0"),
    ("grad_clip", "0"),
    ("hidden", "64"),
    ("depth", "2"),
    ("time_freqs", "4"),
    ("alpha_mode", "auto"),
    ("alpha_init", "0.1"),
    ("alpha_start", "auto"),
    ("type_scale", "0.25"),
    ("charge_scale", "0.1"),
    ("alpha_lr_scale", "1"),
];

/// Energy force from `energy`, `k`, `stats`, ... keys; `None` for `none`.
pub fn build_force(
    c: &RunConfig,
    dataset: &[MarkedPointSet],
    tables: Option<&AtomTables>,
    stats_out: Option<&Path>,
) -> Result<Option<Arc<EnergyForce>>> {
    let kind = match c.raw("energy")? {
        "none" | "" => return Ok(None),
        s => s.parse::<EnergyKind>()?,
    };
    let k: usize = c.get("k")?;
    let stats = match kind {
        EnergyKind::Riesz => None,
        _ => Some(Arc::new(match c.raw("stats")? {
            "auto" => {
                let s = extract_stats(dataset, k, tables)?;
                if let Some(p) = stats_out {
                    s.save(p)?;
                }
                s
            }
            p => DatasetStats::load(Path::new(p))?,
        })),
    };
    let type_channels = dataset.first().map_or(0, |s| s.k);
    let cfg = EnergyConfig {
        kind,
        k,
        term_mask: c.get::<TermMask>("term_mask")?,
        clip: c.get("clip")?,
        weight: c.get("force_weight")?,
    };
    let tables = tables.filter(|_| type_channels > 0).cloned().map(Arc::new);
    EnergyForce::from_config(&cfg, stats, tables, type_channels).map(|f| Some(Arc::new(f)))
}

pub fn train_config(c: &mut RunConfig, typed: bool, has_force: bool) -> Result<TrainConfig> {
    let schedule = parse_schedule(c)?;
    let bridge = match c.raw("bridge")? {
        "auto" => {
            let b = if has_force { "forced" } else { "brownian" };
            c.record("bridge", b)?;
            b.parse::<BridgeChoice>()?
        }
        s => s.parse::<BridgeChoice>()?,
    };
    if c.raw("alpha_start")? == "auto" {
        c.record("alpha_start", 1e-3 / schedule.horizon())?;
    }
    let mode = match c.raw("alpha_mode")? {
        "auto" => {
            let m = if typed { "scheduled" } else { "learnable" };
            c.record("alpha_mode", m)?;
            m.to_string()
        }
        s => s.to_string(),
    };
    let alpha_mode = match mode.as_str() {
        "learnable" => AlphaMode::Learnable { init: c.get("alpha_init")? },
        "scheduled" => AlphaMode::Scheduled { start: c.get("alpha_start")? },
        other => return Err(Error::Config(format!("alpha_mode must be learnable or scheduled, got {other:?}"))),
    };
    let seed = seed(c)?;
    let cfg = TrainConfig {
        steps: c.get("steps")?,
        epochs: c.get("epochs")?,
        batch_size: c.get("batch_size")?,
        learning_rate: c.get("learning_rate")?,
        seed,
        schedule,
        bridge,
        times_per_item: c.get("times_per_item")?,
        optimizer: c.get::<OptimizerKind>("optimizer")?,
        momentum: c.get("momentum")?,
        grad_clip: c.get("grad_clip")?,
        hidden: c.get("hidden")?,
        depth: c.get("depth")?,
        time_freqs: c.get("time_freqs")?,
        alpha_mode,
        type_scale: c.get("type_scale")?,
        charge_scale: c.get("charge_scale")?,
        alpha_lr_scale: c.get("alpha_lr_scale")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(c: &mut RunConfig) -> Result<()> {
    let data = required_path(c, "data")?;
    let out_dir = required_path(c, "out_dir")?;
    let tables = data_tables(c, &data)?;
    let dataset = io::load_dataset(&data, tables.as_ref())?;
    std::fs::create_dir_all(&out_dir)?;
    let force = build_force(c, &dataset, tables.as_ref(), Some(&out_dir.join("stats.json")))?;
    let typed = dataset.first().is_some_and(MarkedPointSet::is_typed);
    let cfg = train_config(c, typed, force.is_some())?;
    c.log_resolution();
    c.write(&out_dir.join(RESOLVED))?;
    let mut run = train(&cfg, &dataset, force)?;
    if let Some(t) = tables.as_ref().filter(|_| typed) {
        run.checkpoint.symbols = t.symbols();
    }
    save_checkpoint(&run.checkpoint, &out_dir.join("model.ckpt"))?;
    write_log(&run.log, std::fs::File::create(out_dir.join("train_log.csv"))?)?;
    if let Some(reason) = run.diverged {
        return Err(Error::Diverged {
            epoch: run.log.len(),
            reason: format!("{reason}; last good checkpoint written"),
        });
    }
    if let Some(last) = run.log.last() {
        println!("trained {} epochs, final loss {:.6e}, alpha {:.6e}", run.log.len(), last.loss, last.alpha);
    }
    Ok(())
}

pub const SAMPLE_DEFAULTS: &[(&str, &str)] = &[
    ("checkpoint", ""),
    ("out_dir", ""),
    ("n", "16"),
    ("points", "auto"),
    ("steps", "100"),
    ("seed", ""),
    ("trajectories", "false"),
];

#[derive(Serialize)]
struct BatchInfo<'a> {
    n_items: usize,
    m_points: usize,
    steps: usize,
    seed: u64,
    checkpoint_fingerprint: &'a str,
}

pub fn cmd_sample(c: &mut RunConfig) -> Result<()> {
    let ckpt_path = required_path(c, "checkpoint")?;
    let out_dir = required_path(c, "out_dir")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    if c.raw("points")? == "auto" {
        if ckpt.m_points == 0 {
            return Err(Error::Config("checkpoint records no point count; set points".into()));
        }
        c.record("points", ckpt.m_points)?;
    }
    let opts = SampleOptions {
        n_items: c.get("n")?,
        m_points: c.get("points")?,
        steps: c.get("steps")?,
        seed: seed(c)?,
        keep_trajectories: c.get_bool("trajectories")?,
    };
    c.log_resolution();
    let batch = eval::sample(&ckpt, opts)?;
    std::fs::create_dir_all(&out_dir)?;
    eval::write_batch(&batch, &out_dir, &ckpt.symbols)?;
    write_json(
        &out_dir.join("batch.json"),
        &BatchInfo {
            n_items: opts.n_items,
            m_points: opts.m_points,
            steps: opts.steps,
            seed: opts.seed,
            checkpoint_fingerprint: &batch.checkpoint_fingerprint,
        },
    )?;
    c.write(&out_dir.join(RESOLVED))?;
    println!("{} samples -> {}", batch.items.len(), out_dir.display());
    Ok(())
}

pub const VERIFY_DEFAULTS: &[(&str, &str)] = &[
    ("out_dir", ""),
    ("bridge", "brownian"),
    ("pin", ""),
    ("points", "64"),
    ("pin_seed", "0"),
    ("energy", "knn"),
    ("k", "4"),
    ("clip", "1000"),
    ("force_weight", "1"),
    ("schedule", "constant:1"),
    ("horizon", "1"),
    ("steps_list", "50,200,1000"),
    ("paths", "200"),
    ("seed", ""),
    ("gronwall_alpha", "inverse"),
    ("gronwall_steps", "10000"),
    ("pl_beta", "0.25"),
    ("pl_gamma", "0.25"),
];

#[derive(Serialize)]
struct VerifyReport {
    pinning: PinningReport,
    gronwall: GronwallReport,
    pass: bool,
}

/// `inverse` gives `1 / (T - t)`, `constant:C` a constant.
fn step_size(text: &str, horizon: f64) -> Result<StepSize> {
    match text.split_once(':') {
        None if text == "inverse" => Ok(Arc::new(move |t: f64| 1.0 / (horizon - t))),
        Some(("constant", v)) => {
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad constant in {text:?}")))?;
            Ok(Arc::new(move |_| v))
        }
        _ => Err(Error::Config(format!("gronwall_alpha must be inverse or constant:C, got {text:?}"))),
    }
}

pub fn cmd_verify(c: &mut RunConfig) -> Result<()> {
    let out_dir = required_path(c, "out_dir")?;
    let schedule = parse_schedule(c)?;
    let seed = seed(c)?;
    let pin_set = match c.raw("pin")? {
        "" => synth::sphere_cloud(c.get("points")?, 1.0, c.get("pin_seed")?)?,
        p => io::read_point_set(Path::new(p), None)?,
    }
    .centered();
    let pin = pin_set.to_state(1.0);
    let spec = match c.raw("bridge")? {
        "brownian" => BridgeSpec::brownian(pin, schedule)?,
        "forced" => {
            let kind: EnergyKind = c.get("energy")?;
            let k: usize = c.get("k")?;
            let stats = match kind {
                EnergyKind::Riesz => None,
                _ => Some(Arc::new(extract_stats(std::slice::from_ref(&pin_set), k, None)?)),
            };
            let f = EnergyForce::new(kind, stats, None, k, 0)?
                .with_clip(c.get("clip")?)?
                .with_weight(c.get("force_weight")?)?;
            BridgeSpec::forced(pin, schedule, Arc::new(f) as Arc<dyn Force>)?
        }
        other => return Err(Error::Config(format!("bridge must be brownian or forced, got {other:?}"))),
    };
    let steps: Vec<usize> = c.get_list("steps_list")?;
    c.log_resolution();
    let pinning = verify_pinning(&spec, &steps, c.get("paths")?, seed)?;
    let h = schedule.horizon();
    let beta: f64 = c.get("pl_beta")?;
    let gamma: f64 = c.get("pl_gamma")?;
    let series = GronwallSeries {
        alpha: step_size(c.raw("gronwall_alpha")?, h)?,
        pl_beta: Arc::new(move |_| beta),
        pl_gamma: Arc::new(move |_| gamma),
        grid: make_grid(c.get("gronwall_steps")?, h)?,
    };
    let gronwall = gronwall_check(&series)?;
    let report = VerifyReport {
        pass: pinning.pass && gronwall.pass,
        pinning,
        gronwall,
    };
    write_json(&out_dir.join("verify.json"), &report)?;
    c.write(&out_dir.join(RESOLVED))?;
    for l in &report.pinning.levels {
        println!("steps {:>6}  mean error {:.5}  tolerance {:.5}", l.steps, l.mean_error, l.tolerance);
    }
    println!(
        "pinning {}  gronwall {}",
        if report.pinning.pass { "PASS" } else { "FAIL" },
        if report.gronwall.pass { "PASS" } else { "FAIL" }
    );
    Ok(())
}

pub const EVAL_DEFAULTS: &[(&str, &str)] = &[
    ("samples", ""),
    ("reference", ""),
    ("out_dir", ""),
    ("tables", "builtin"),
    ("symbols", "auto"),
    ("knn_k", "4"),
    ("emd", "true"),
];

pub fn cmd_eval(c: &mut RunConfig) -> Result<()> {
    let samples = required_path(c, "samples")?;
    let reference = required_path(c, "reference")?;
    let out_dir = required_path(c, "out_dir")?;
    let tables = data_tables(c, &reference)?;
    c.log_resolution();
    let generated = io::load_dataset(&samples, tables.as_ref())?;
    let refs = io::load_dataset(&reference, tables.as_ref())?;
    let opts = EvalOptions {
        knn_k: c.get("knn_k")?,
        emd: c.get_bool("emd")?,
    };
    let report = eval::evaluate(&generated, &refs, tables.as_ref(), opts)?;
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("report.json"), report.to_json() + "\n")?;
    std::fs::write(out_dir.join("report.txt"), report.to_string() + "\n")?;
    c.write(&out_dir.join(RESOLVED))?;
    println!("{report}");
    Ok(())
}

pub const ENERGY_DEFAULTS: &[(&str, &str)] = &[
    ("input", ""),
    ("energy", "riesz"),
    ("k", "4"),
    ("stats", "auto"),
    ("tables", "builtin"),
    ("symbols", "auto"),
    ("term_mask", "all"),
    ("clip", "1000"),
    ("force_weight", "1"),
    ("out", ""),
    ("fd_step", "0"),
];

#[derive(Serialize)]
struct EnergyDump {
    kind: String,
    energy: f64,
    gradient: Vec<[f64; 3]>,
    fd_relative_error: Option<f64>,
}

pub fn cmd_energy(c: &mut RunConfig) -> Result<()> {
    let input = required_path(c, "input")?;
    let tables = data_tables(c, &input)?;
    let set = io::read_point_set(&input, tables.as_ref())?;
    let force = build_force(c, std::slice::from_ref(&set), tables.as_ref(), None)?
        .ok_or_else(|| Error::Config("energy must name an energy".into()))?;
    c.log_resolution();
    let (energy, gradient) = force.energy_grad(&set)?;
    let h: f64 = c.get("fd_step")?;
    let fd_relative_error = if h > 0.0 {
        let fd = force.fd_gradient(&set, h)?;
        Some(crate::energies::relative_error(&gradient, &fd, 1e-12))
    } else {
        None
    };
    let dump = EnergyDump {
        kind: force.kind.to_string(),
        energy,
        gradient,
        fd_relative_error,
    };
    match c.raw("out")? {
        "" => println!("{}", serde_json::to_string_pretty(&dump)?),
        p => {
            let p = Path::new(p);
            write_json(p, &dump)?;
            c.write(&p.with_extension("resolved.cfg"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_per_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::parse("f", 1, "x")), EXIT_DATA);
        assert_eq!(exit_code(&Error::Singularity("x".into())), EXIT_NUMERICAL);
        assert_eq!(
            exit_code(&Error::Diverged {
                epoch: 1,
                reason: "nan".into()
            }),
            EXIT_NUMERICAL
        );
    }

    #[test]
    fn unknown_flags_are_config_errors() {
        assert_eq!(main_with_args(["prior-bridge", "train", "--bogus"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["prior-bridge", "train", "--set", "nokey=1"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["prior-bridge", "sample"]), EXIT_CONFIG);
    }

    #[test]
    fn step_size_forms() {
        assert_eq!(step_size("inverse", 2.0).unwrap()(1.0), 1.0);
        assert_eq!(step_size("constant:3", 2.0).unwrap()(1.0), 3.0);
        assert!(step_size("sqrt", 1.0).is_err());
    }
}
