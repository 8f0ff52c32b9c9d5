use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use spinconv::checks::run_suite;
use spinconv::config::{key_help, ConfigError, RunConfig};
use spinconv::data::{generate_dataset, oracle_reference, Dataset, StructureRecord};
use spinconv::geometry::AtomicSystem;
use spinconv::model::Model;
use spinconv::relax::{max_force, relax_all, relaxation_metrics, RelaxError};
use spinconv::train::{evaluate, median_baseline, metrics, MetricsRow, Trainer};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("--threads must be at least 1")]
    Threads,
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Threads => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "spinconv", version, about = "Spin-convolution potentials: data, training, evaluation, relaxation, checks")]
#[command(after_long_help = long_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.max_steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Replace every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset with the analytic oracle.
    GenData(#[command(flatten)] Common),
    /// Train a model on the dataset's training split.
    Train(#[command(flatten)] Common),
    /// Score a trained model and the median baseline on one split.
    Eval(#[command(flatten)] Common),
    /// Relax structures of one split with model forces and compare to the oracle.
    Relax(#[command(flatten)] Common),
    /// Run the invariant suite on a freshly initialized model.
    Check(#[command(flatten)] Common),
}

fn long_help() -> String {
    format!("Config keys (set with --set KEY=VALUE or in the --config file):\n{}", key_help())
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Threads);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(CliError::runtime)?;
    }
    Ok(cfg)
}

fn read_split(cfg: &RunConfig) -> Result<(Dataset, Vec<StructureRecord>), CliError> {
    let ds = Dataset::read(&cfg.paths.dataset).map_err(CliError::runtime)?;
    let p = ds.partition();
    let records = match cfg.eval.split.as_str() {
        "train" => p.train,
        "val" => p.val,
        "test" => p.test,
        _ => p.ood,
    };
    if records.is_empty() {
        return Err(CliError::Runtime(format!("split `{}` of {} is empty", cfg.eval.split, cfg.paths.dataset.display())));
    }
    Ok((ds, records))
}

fn load_model(cfg: &RunConfig) -> Result<Model, CliError> {
    let path = cfg.paths.checkpoint();
    Model::load(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let ds = Dataset::new(generate_dataset(&cfg.data, &cfg.oracle).map_err(CliError::runtime)?);
    ensure_parent(&cfg.paths.dataset)?;
    ds.write(&cfg.paths.dataset).map_err(CliError::runtime)?;
    let s = &ds.stats;
    println!(
        "wrote {} structures ({} in-domain, {} out-of-domain) to {} in {:.1} s",
        s.structures,
        s.id_structures,
        s.ood_structures,
        cfg.paths.dataset.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(CliError::runtime),
        _ => Ok(()),
    }
}

fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let ds = Dataset::read(&cfg.paths.dataset).map_err(CliError::runtime)?;
    let p = ds.partition();
    let model = Model::new(cfg.model.clone()).map_err(CliError::runtime)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), p.train, p.val).map_err(CliError::runtime)?;
    let start = Instant::now();
    eprintln!("{}", MetricsRow::HEADER);
    trainer
        .run(Some(&cfg.paths.run_dir), |row| eprintln!("{}  ({:.0} s)", row.to_csv(), start.elapsed().as_secs_f64()))
        .map_err(CliError::runtime)?;
    fs::write(cfg.paths.run_dir.join("config.json"), cfg.to_json()).map_err(CliError::runtime)?;
    println!("trained {} steps; model in {}", trainer.step_count(), cfg.paths.run_dir.join("model.json").display());
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let (ds, records) = read_split(cfg)?;
    let report = evaluate(&model, &records, cfg.eval.seed).map_err(CliError::runtime)?;
    let base: Vec<_> = records.iter().map(|r| median_baseline(&ds.stats, r)).collect();
    let baseline = metrics(&base, &records).map_err(CliError::runtime)?;
    let out = json!({ "split": cfg.eval.split, "model": report, "median_baseline": baseline });
    println!("{}", serde_json::to_string_pretty(&out).map_err(CliError::runtime)?);
    Ok(())
}

fn relax_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let (_, mut records) = read_split(cfg)?;
    if cfg.eval.relax_structures > 0 {
        records.truncate(cfg.eval.relax_structures);
    }
    let starts: Vec<AtomicSystem> = records.iter().map(StructureRecord::system).collect();
    let references = starts
        .iter()
        .map(|s| oracle_reference(&cfg.oracle, s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(CliError::runtime)?;
    let seed = cfg.eval.seed;
    let model = &model;
    let runs = relax_all(
        &starts,
        |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            move |s: &AtomicSystem| model.predict(s, &mut rng).map(|p| p.forces).map_err(|e| RelaxError::Provider(e.to_string()))
        },
        &cfg.relax,
    )
    .map_err(CliError::runtime)?;
    let finals: Vec<AtomicSystem> = runs.iter().map(|t| t.last().clone()).collect();
    let summary = relaxation_metrics(&finals, &references, &mut cfg.oracle.provider()).map_err(CliError::runtime)?;

    let dir = &cfg.paths.relax_dir;
    fs::create_dir_all(dir).map_err(CliError::runtime)?;
    let mut traj = fs::File::create(dir.join("trajectories.jsonl")).map_err(CliError::runtime)?;
    let mut csv = String::from("index,atoms,steps,status,model_max_force,oracle_max_force,max_distance_to_reference\n");
    for (i, ((run, fin), reference)) in runs.iter().zip(&finals).zip(&references).enumerate() {
        let frames: Vec<_> = run.frames.iter().map(|f| &f.positions).collect();
        let line = json!({
            "index": i,
            "numbers": fin.numbers,
            "status": run.status,
            "max_forces": run.max_forces,
            "frames": frames,
            "reference": reference.positions,
        });
        writeln!(traj, "{line}").map_err(CliError::runtime)?;
        let oracle_f = cfg.oracle.energy_forces(fin).map(|(_, f)| max_force(&f)).unwrap_or(f64::NAN);
        let dist = fin
            .positions
            .iter()
            .zip(&reference.positions)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        let status = serde_json::to_value(run.status).map_err(CliError::runtime)?;
        csv.push_str(&format!(
            "{i},{},{},{},{},{oracle_f},{dist}\n",
            fin.len(),
            run.steps(),
            status.as_str().unwrap_or_default(),
            run.max_forces.last().copied().unwrap_or(f64::NAN),
        ));
    }
    fs::write(dir.join("metrics.csv"), csv).map_err(CliError::runtime)?;
    let out = json!({ "structures": finals.len(), "adwt": summary.adwt, "afbt": summary.afbt });
    fs::write(dir.join("summary.json"), out.to_string()).map_err(CliError::runtime)?;
    println!("{out}");
    Ok(())
}

fn check(cfg: &RunConfig) -> Result<(), CliError> {
    let outcomes = run_suite(&cfg.model, cfg.model.seed).map_err(CliError::runtime)?;
    let mut failed = 0;
    for o in &outcomes {
        println!(
            "{} {:<20} {:.3e} (tolerance {:.0e})  {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.value,
            o.tolerance,
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} checks failed", outcomes.len())));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(c) => gen_data(&load(&c)?),
        Command::Train(c) => train(&load(&c)?),
        Command::Eval(c) => eval(&load(&c)?),
        Command::Relax(c) => relax_cmd(&load(&c)?),
        Command::Check(c) => check(&load(&c)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
