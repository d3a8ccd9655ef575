//! `teleop`: data generation, training, evaluation, benchmarks and the live
//! session server.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use teleop_core::config::{load_config, Profile, RunConfig};
use teleop_core::demos::{generate_dataset, load_dataset, GenConfig};
use teleop_core::error::{Error, Result};
use teleop_core::model::TrajectoryModel;
use teleop_core::rollout::{benchmark, BenchmarkReport, BenchmarkSpec, EvalMode, RolloutConfig};
use teleop_core::sim::{TaskId, TaskRegistry};
use teleop_core::training::{train_loop, TrainOutputs};

#[derive(Parser, Debug)]
#[command(
    name = "teleop",
    version,
    about = "Trajectory auto-complete for assisted teleoperation"
)]
struct Cli {
    /// Root for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Log level (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record scripted expert demonstrations.
    GenData(GenData),
    /// Train from scratch, typically on several tasks.
    Pretrain(Train),
    /// Train from a checkpoint (or from scratch without --init).
    Finetune(Finetune),
    /// Roll out a checkpoint on held-out scenes of one task.
    Eval(Eval),
    /// Every task x mode of a suite; CSV report plus a JSON twin.
    Benchmark(Bench),
    /// Live WebSocket sessions.
    Serve(Serve),
}

#[derive(Args, Debug)]
struct GenData {
    /// Task name; repeat or comma-separate for several.
    #[arg(long, required = true, value_delimiter = ',')]
    task: Vec<TaskId>,
    /// Demonstrations per task.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Task registry JSON (defaults to the built-in tasks).
    #[arg(long)]
    tasks: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Base settings.
    #[arg(long, default_value = "toy")]
    profile: Profile,
    /// Partial JSON config applied over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct Train {
    /// Dataset directory or manifest.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write; the loss curve goes next to it as `<out>.curve.csv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct Finetune {
    #[command(flatten)]
    train: Train,
    /// Starting checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: TaskId,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value = "auto")]
    mode: EvalMode,
    /// Scene seed stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV report path; a `.json` twin is written beside it.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Bench {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Suite JSON (`{"tasks": [...], "modes": [...], "episodes": n, "seed": s}`)
    /// or a comma-separated task list run in every mode.
    #[arg(long)]
    suite: String,
    /// Episodes per task and mode when `--suite` is a task list.
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV report path; a `.json` twin is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Serve {
    #[arg(long, env = "TELEOP_BIND", default_value = "127.0.0.1:8765")]
    bind: std::net::SocketAddr,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task registry JSON (defaults to the checkpoint's, then the built-ins).
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, default_value_t = 15.0)]
    tick_hz: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn run(cli: Cli) -> Result<()> {
    let wd = cli.workdir.as_path();
    match cli.command {
        Command::GenData(a) => gen_data(wd, a),
        Command::Pretrain(a) => train(wd, a, None),
        Command::Finetune(a) => train(wd, a.train, a.init),
        Command::Eval(a) => {
            let spec = BenchmarkSpec {
                tasks: vec![a.task],
                modes: vec![a.mode],
                episodes: a.episodes,
                seed: a.seed,
            };
            let r = run_benchmark(wd, &a.checkpoint, &spec, &a.out)?;
            let row = &r.rows[0];
            println!(
                "{} {}: success {:.3} over {} episodes, mean manual time {:.2} s",
                row.task, row.mode, row.success_rate, row.n, row.mean_manual_time_s
            );
            Ok(())
        }
        Command::Benchmark(a) => {
            let spec = parse_suite(wd, &a)?;
            let r = run_benchmark(wd, &a.checkpoint, &spec, &a.out)?;
            print!("{}", r.csv());
            Ok(())
        }
        Command::Serve(a) => serve(wd, a),
    }
}

fn gen_data(wd: &Path, a: GenData) -> Result<()> {
    let mut cfg = GenConfig::default();
    if let Some(p) = &a.tasks {
        cfg.tasks = TaskRegistry::load(&resolve(wd, p))?;
    }
    let tasks: Vec<(TaskId, usize)> = a.task.iter().map(|t| (*t, a.n)).collect();
    let out = resolve(wd, &a.out);
    let m = generate_dataset(&out, &tasks, a.seed, &cfg)?;
    println!(
        "wrote {} demonstrations to {}",
        m.files.len(),
        out.display()
    );
    Ok(())
}

fn effective_config(wd: &Path, a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::profile(a.profile);
    if let Some(p) = &a.config {
        cfg = load_config(&resolve(wd, p), &cfg)?;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr_start = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn curve_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".curve.csv");
    PathBuf::from(s)
}

fn train(wd: &Path, a: Train, init: Option<PathBuf>) -> Result<()> {
    let mut cfg = effective_config(wd, &a.cfg)?;
    let data = load_dataset(&resolve(wd, &a.data))?;
    let mut model = match &init {
        Some(p) => {
            let (m, _) = TrajectoryModel::load(&resolve(wd, p))?;
            if m.config() != &cfg.model {
                log::warn!(
                    "using the model shape of {} instead of the configured one",
                    p.display()
                );
                cfg.model = m.config().clone();
                cfg.validate()?;
            }
            m
        }
        None => TrajectoryModel::new(cfg.model.clone(), cfg.train.seed)?,
    };
    let out = resolve(wd, &a.out);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let meta = json!({
        "config": cfg.to_value(),
        "gen": data.manifest.config,
        "data": {
            "path": a.data,
            "generator_config_hash": data.manifest.generator_config_hash,
            "counts": data.manifest.counts,
            "seed": data.manifest.seed,
        },
        "init": init,
    });
    let curve = curve_path(&out);
    let report = train_loop(
        &data.trajectories,
        &mut model,
        &cfg.train,
        &TrainOutputs {
            checkpoint: Some(&out),
            curve: Some(&curve),
            meta,
        },
    )?;
    let last = report.all.last().expect("at least one step");
    println!(
        "trained {} steps, final loss {:.4}; wrote {}",
        cfg.train.steps,
        last.parts.total,
        out.display()
    );
    Ok(())
}

/// Model plus the generator and rollout settings recorded with it.
fn load_checkpoint(path: &Path) -> Result<(TrajectoryModel, GenConfig, RolloutConfig, Value)> {
    let (model, meta) = TrajectoryModel::load(path)?;
    let run = &meta["run"];
    let gen = match run.get("gen") {
        Some(v) if !v.is_null() => serde_json::from_value(v.clone())
            .map_err(|e| Error::file(path, format!("bad generator config: {e}")))?,
        _ => GenConfig::default(),
    };
    let rollout = match run.get("config") {
        Some(v) if !v.is_null() => {
            serde_json::from_value::<RunConfig>(v.clone())
                .map_err(|e| Error::file(path, format!("bad run config: {e}")))?
                .rollout
        }
        _ if model.config().seq_len >= 400 => RunConfig::paper().rollout,
        _ => RunConfig::toy().rollout,
    };
    Ok((model, gen, rollout, meta))
}

fn parse_suite(wd: &Path, a: &Bench) -> Result<BenchmarkSpec> {
    let p = resolve(wd, Path::new(&a.suite));
    if a.suite.ends_with(".json") || p.is_file() {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::file(&p, e))?;
        return serde_json::from_str(&text).map_err(|e| Error::file(&p, format!("bad suite: {e}")));
    }
    let tasks = a
        .suite
        .split(',')
        .map(str::parse)
        .collect::<Result<Vec<TaskId>>>()?;
    Ok(BenchmarkSpec {
        tasks,
        modes: EvalMode::ALL.to_vec(),
        episodes: a.episodes,
        seed: a.seed,
    })
}

fn run_benchmark(
    wd: &Path,
    checkpoint: &Path,
    spec: &BenchmarkSpec,
    out: &Path,
) -> Result<BenchmarkReport> {
    let (model, gen, rollout, meta) = load_checkpoint(&resolve(wd, checkpoint))?;
    let config = json!({
        "checkpoint": checkpoint,
        "checkpoint_step": meta["step"],
        "suite": spec,
        "rollout": rollout,
        "generator_config_hash": gen.hash(),
    });
    let report = benchmark(&Arc::new(model), spec, &gen, &rollout, config)?;
    let out = resolve(wd, out);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&out, report.csv())?;
    std::fs::write(out.with_extension("json"), report.json())?;
    Ok(report)
}

fn serve(wd: &Path, a: Serve) -> Result<()> {
    let (model, mut gen, rollout, _) = load_checkpoint(&resolve(wd, &a.checkpoint))?;
    if let Some(p) = &a.tasks {
        gen.tasks = TaskRegistry::load(&resolve(wd, p))?;
    }
    if !(a.tick_hz > 0.0 && a.tick_hz.is_finite()) {
        return Err(Error::Config(format!(
            "--tick-hz must be positive, got {}",
            a.tick_hz
        )));
    }
    let ctx = Arc::new(teleop_service::ServiceContext {
        model: Arc::new(model),
        gen,
        rollout,
    });
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = teleop_service::bind(a.bind).await?;
        println!("listening on ws://{}/ws", listener.local_addr()?);
        teleop_service::serve(listener, ctx, a.tick_hz).await
    })?;
    Ok(())
}
