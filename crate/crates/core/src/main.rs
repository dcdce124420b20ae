use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hsd::config::{ExperimentConfig, Method};
use hsd::envs::{Environment, Split};
use hsd::evaluation::{evaluate, placement_by_seed, source_ablation, target_turn_histogram};
use hsd::io::{self, JsonlWriter, MetricsWriter, RunManifest, TrajectoryRecord};
use hsd::parallel::Exec;
use hsd::policy::{load_checkpoint, save_checkpoint, ActionSpace};
use hsd::seed::{SeedTree, Stream};
use hsd::training::train;
use hsd::Error;

#[derive(Parser)]
#[command(name = "hsd", version, about = "Hindsight self-distillation on toy multi-turn environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics, trajectories and the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "HSD_OUT_DIR")]
        out: PathBuf,
        /// Overrides the config's base seed.
        #[arg(long, env = "HSD_SEED")]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, env = "HSD_OUT_DIR")]
        out: Option<PathBuf>,
        #[arg(long, env = "HSD_SEED")]
        seed: Option<u64>,
    },
    /// Run an analysis over a training output directory.
    Analyze {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long, value_enum)]
        kind: Analysis,
        #[arg(long, env = "HSD_SEED")]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Turns,
    Placement,
    Sources,
}

fn load_config(path: &Path, seed: Option<u64>) -> hsd::Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::config("config", format!("cannot read {}: {e}", path.display()))
    })?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, exec: Exec) -> hsd::Result<()> {
    let cfg = load_config(config, seed)?;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("train", cfg.hash(), cfg.seed);
    fs::write(out.join(io::CONFIG_FILE), cfg.to_toml())?;
    manifest.add_file("config", io::CONFIG_FILE);

    let mut metrics = MetricsWriter::create(&out.join(io::METRICS_FILE))?;
    manifest.add_file("metrics", io::METRICS_FILE);
    let mut log = JsonlWriter::create(&out.join(io::TRAJECTORIES_FILE))?;
    manifest.add_file("trajectories", io::TRAJECTORIES_FILE);
    let source = matches!(
        cfg.method,
        Method::RefocusSingle | Method::RefocusMulti | Method::FullTrajDistill
    )
    .then_some(cfg.feedback_source);

    let outcome = train(&cfg, exec, &mut |epoch| {
        metrics.append(&epoch.metrics)?;
        let records: Vec<TrajectoryRecord> = epoch
            .trajectories
            .iter()
            .map(|l| TrajectoryRecord {
                schema_version: io::SCHEMA_VERSION,
                epoch: epoch.metrics.epoch,
                method: cfg.method,
                source,
                trajectory: l.trajectory.clone(),
                hindsight: l.hindsight.clone(),
            })
            .collect();
        log.append(&records)
    })?;
    log.finish()?;

    save_checkpoint(&out.join(io::CHECKPOINT_FILE), &outcome.best)?;
    manifest.add_file("checkpoint", io::CHECKPOINT_FILE);
    io::write_curve(&out.join(io::CURVE_FILE), &outcome.metrics)?;
    manifest.add_file("curve", io::CURVE_FILE);
    manifest.write(out, io::MANIFEST_FILE)?;
    match outcome.best_avg {
        Some(avg) => println!("best epoch {} avg_at_k {avg:.4}", outcome.best.epoch),
        None => println!("no epochs run"),
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    config: &Path,
    k: usize,
    out: Option<&Path>,
    seed: Option<u64>,
    exec: Exec,
) -> hsd::Result<()> {
    let cfg = load_config(config, seed)?;
    if k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let ck = load_checkpoint(checkpoint).map_err(|e| {
        Error::config("checkpoint", format!("{}: {e}", checkpoint.display()))
    })?;
    let env = Environment::new(&cfg.environment)?;
    if ck.params.vocab_size() != env.vocab().size() {
        return Err(Error::config("checkpoint", "vocabulary size does not match the config"));
    }
    let space = ActionSpace::new(env.vocab());
    let tasks = env.tasks(cfg.seed, Split::Eval, cfg.eval_tasks);
    let root = SeedTree::new(cfg.seed).stream(Stream::EvalRollouts).derive(u64::MAX);
    let r = evaluate(&ck.params, &space, cfg.decoding_limits(), &tasks, k, root, exec)?;
    println!("avg_at_{k} {:.4}", r.avg_at_k);
    println!("best_at_{k} {:.4}", r.best_at_k);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        io::write_eval(&dir.join("eval.csv"), k, r.avg_at_k, r.best_at_k)?;
        let mut m = RunManifest::new("eval", cfg.hash(), cfg.seed);
        m.add_file("eval", "eval.csv");
        m.write(dir, "eval-manifest.json")?;
    }
    Ok(())
}

fn cmd_analyze(logs: &Path, kind: Analysis, seed: Option<u64>, exec: Exec) -> hsd::Result<()> {
    if !logs.is_dir() {
        return Err(Error::config("logs", format!("{} is not a directory", logs.display())));
    }
    let (name, hash, base) = match kind {
        Analysis::Turns => {
            let path = logs.join(io::TRAJECTORIES_FILE);
            if !path.exists() {
                return Err(Error::config("logs", "no trajectory log in directory"));
            }
            let records = io::read_trajectory_log(&path)?;
            let h = target_turn_histogram(records.iter().filter_map(|r| r.hindsight.as_ref()));
            io::write_histogram(&logs.join("turns.csv"), &h)?;
            println!(
                "targets {} regions 1-3: {} ({:.3}) 4-8: {} ({:.3}) 9+: {} ({:.3})",
                h.total,
                h.regions[0],
                h.region_fractions[0],
                h.regions[1],
                h.region_fractions[1],
                h.regions[2],
                h.region_fractions[2],
            );
            ("turns", String::new(), 0)
        }
        Analysis::Placement => {
            let cfg = load_config(&logs.join(io::CONFIG_FILE), seed)?;
            let ck = load_checkpoint(&logs.join(io::CHECKPOINT_FILE))
                .map_err(|e| Error::config("checkpoint", e.to_string()))?;
            let seeds: Vec<u64> = (0..3).map(|i| cfg.seed + i).collect();
            let rows = placement_by_seed(&ck.params, &cfg, &seeds, exec)?;
            io::write_placement(&logs.join("placement.csv"), &rows)?;
            for (s, r) in &rows {
                println!(
                    "seed {s}: failed {} start_gain {:+.2} target_gain {:+.2} target-start {:+.2}",
                    r.failed, r.start_gain, r.target_gain, r.target_minus_start
                );
            }
            let (s, t, d) = io::placement_means(&rows);
            println!("mean: start_gain {s:+.2} target_gain {t:+.2} target-start {d:+.2}");
            ("placement", cfg.hash(), cfg.seed)
        }
        Analysis::Sources => {
            let cfg = load_config(&logs.join(io::CONFIG_FILE), seed)?;
            let rows = source_ablation(&cfg, exec)?;
            io::write_ablation(&logs.join("sources.csv"), &rows)?;
            for r in &rows {
                println!(
                    "{}: avg_at_k {:.4} best_at_k {:.4}",
                    r.label, r.eval.avg_at_k, r.eval.best_at_k
                );
            }
            ("sources", cfg.hash(), cfg.seed)
        }
    };
    let mut m = RunManifest::new(&format!("analyze {name}"), hash, base);
    m.add_file(name, &format!("{name}.csv"));
    m.write(logs, &format!("{name}-manifest.json"))?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parse(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("HSD_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let result = match &cli.command {
        Command::Train { config, out, seed } => cmd_train(config, out, *seed, exec),
        Command::Eval {
            checkpoint,
            config,
            k,
            out,
            seed,
        } => cmd_eval(checkpoint, config, *k, out.as_deref(), *seed, exec),
        Command::Analyze { logs, kind, seed } => cmd_analyze(logs, *kind, *seed, exec),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
