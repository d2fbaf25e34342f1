use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use epifit_core::data::{load_case_csv, CovidWindow, DataError, Dataset, DatasetMeta};
use epifit_core::experiment::{
    prepare_covid, run_check, run_covid, run_probe, run_synthetic, DatasetSidecar,
    ExperimentConfig, ExperimentError,
};
use epifit_core::train::{IterationRecord, TrainError};
use log::info;

/// Train hybrid neural-network epidemic models and emit plot-ready tables.
#[derive(Parser)]
#[command(name = "epifit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic data set from the configured infection function.
    Generate(GenerateArgs),
    /// Train the hybrid model on synthetic data and evaluate it.
    Train(TrainArgs),
    /// Fit the scaled SIR model to daily case counts.
    Covid(CovidArgs),
    /// Compare plain and penalized gradient norms below threshold.
    Probe(ProbeArgs),
    /// Spot-check the structural conditions along the generating trajectory.
    Check(CheckArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output CSV; a `.meta.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the noise seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Data CSV (`t,infected`); generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Network initialisation seed; repeat to train several seeds.
    #[arg(long)]
    seed: Vec<u64>,
    /// Overrides the penalty weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Worker threads for multiple seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct CovidArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Case CSV (`date,cases`); defaults to the config's `covid.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Window(s) to fit; defaults to the config's window.
    #[arg(long)]
    window: Vec<CovidWindow>,
    /// Output directory; each window gets its own subdirectory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Worker threads for multiple windows.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes with stable exit codes.
#[derive(Debug)]
enum Failure {
    /// Bad config or input (2).
    Input(String),
    /// Output could not be written (3).
    Output(String),
    /// Training produced non-finite values (4).
    Divergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Output(_) => 3,
            Failure::Divergence(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Output(m) | Failure::Divergence(m) => m,
        }
    }
}

fn input(e: impl std::fmt::Display) -> Failure {
    Failure::Input(e.to_string())
}

fn output(e: impl std::fmt::Display) -> Failure {
    Failure::Output(e.to_string())
}

/// Classifies an error raised while running an experiment. Divergence leaves
/// its partial history in `partial_dir` when given.
fn run_failure(e: ExperimentError, partial_dir: &Path) -> Failure {
    match e {
        ExperimentError::Train(TrainError::Divergence {
            iteration,
            reason,
            report,
        }) => {
            let path = partial_dir.join("report_partial.csv");
            let saved = fs::create_dir_all(partial_dir)
                .map_err(TrainError::from)
                .and_then(|_| fs::File::create(&path).map_err(TrainError::from))
                .and_then(|f| report.write_csv(f));
            let note = match saved {
                Ok(()) => format!("; partial history in {}", path.display()),
                Err(err) => format!("; could not save partial history: {err}"),
            };
            Failure::Divergence(format!("training diverged at iteration {iteration}: {reason}{note}"))
        }
        ExperimentError::Io { .. } => output(e),
        other => input(other),
    }
}

fn load_config(arg: &ConfigArg) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(&arg.config).map_err(input)
}

fn progress(label: String, total: usize) -> impl FnMut(usize, &IterationRecord) {
    let every = (total / 20).max(1);
    move |i, r| {
        if i % every == 0 || i + 1 == total {
            info!(
                "{label} iteration {i}/{total}: mse {:.6e} penalty {:.3e} r0 {:.4}",
                r.mse, r.penalty, r.r0
            );
        }
    }
}

/// Runs `work` over `items` on up to `jobs` threads, returning results in order.
fn fan_out<T: Sync, R: Send>(items: &[T], jobs: usize, work: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<R>>> = Mutex::new(items.iter().map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(k) else { break };
                let r = work(item);
                results.lock().expect("worker panicked")[k] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

fn first_failure(results: Vec<Result<(), Failure>>) -> Result<(), Failure> {
    let mut failures: Vec<Failure> = results.into_iter().filter_map(Result::err).collect();
    failures.sort_by_key(|f| std::cmp::Reverse(f.code()));
    match failures.into_iter().next() {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    out.with_file_name(name)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| output(format!("{}: {e}", path.display())))
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.config)?;
    if let (Some(seed), Some(s)) = (args.seed, config.synthetic.as_mut()) {
        s.seed = seed;
    }
    let data = config.generate().map_err(input)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| output(format!("{}: {e}", parent.display())))?;
    }
    data.save(&args.out)
        .map_err(|e| output(format!("{}: {e}", args.out.display())))?;
    let sidecar = DatasetSidecar::new(&config, &data).map_err(input)?;
    write_json(&sidecar_path(&args.out), &sidecar)?;
    println!("wrote {} points to {}", data.values.len(), args.out.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset, Failure> {
    let file = fs::File::open(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    let meta = DatasetMeta::File {
        path: path.to_path_buf(),
        window: None,
    };
    Dataset::read_csv(file, meta).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.config)?;
    if let Some(alpha) = args.alpha {
        config.train.alpha = alpha;
        config.validate().map_err(input)?;
    }
    let data = match &args.data {
        Some(path) => load_dataset(path)?,
        None => config.generate().map_err(input)?,
    };
    let seeds = if args.seed.is_empty() {
        vec![config.train.seed]
    } else {
        args.seed.clone()
    };
    let nested = seeds.len() > 1;
    let results = fan_out(&seeds, args.jobs, |&seed| {
        let mut config = config.clone();
        config.train.seed = seed;
        let dir = if nested {
            args.out.join(format!("seed-{seed}"))
        } else {
            args.out.clone()
        };
        let label = format!("{} seed {seed}", config.name);
        let outcome = run_synthetic(&config, &data, progress(label.clone(), config.train.iterations))
            .map_err(|e| run_failure(e, &dir))?;
        outcome.write(&dir).map_err(output)?;
        let ev = &outcome.evaluation;
        println!(
            "{label}: mse {:.4e} -> {:.4e} (ratio {:.4}), max |beta - beta_fit| {:.4e} = {:.2}% of range {:.4}, r0 {:.4}",
            ev.initial_mse,
            ev.final_mse,
            ev.mse_ratio(),
            ev.max_abs_error,
            100.0 * ev.relative_error(),
            ev.true_range,
            ev.final_r0
        );
        Ok(())
    });
    first_failure(results)
}

fn cmd_covid(args: CovidArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.config)?;
    if let Some(alpha) = args.alpha {
        config.train.alpha = alpha;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    config.validate().map_err(input)?;
    let covid = config
        .covid
        .clone()
        .ok_or_else(|| input("config has no [covid] section"))?;
    let path = match (&args.data, &covid.data) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => config.resolve(p),
        (None, None) => return Err(input("no case data given (use --data or covid.data)")),
    };
    let series = load_case_csv(&path).map_err(|e| match e {
        DataError::Io(io) => input(format!("{}: {io}", path.display())),
        other => input(format!("{}: {other}", path.display())),
    })?;
    let windows = if args.window.is_empty() {
        vec![covid.window]
    } else {
        args.window.clone()
    };
    let prepared = windows
        .iter()
        .map(|&w| prepare_covid(&series, w, covid.population, &path).map_err(input))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<_> = windows.iter().copied().zip(prepared).collect();
    let results = fan_out(&jobs, args.jobs, |(window, cases)| {
        let dir = args.out.join(window.label());
        let label = format!("{} {window}", config.name);
        let outcome = run_covid(&config, cases, *window, progress(label.clone(), config.train.iterations))
            .map_err(|e| run_failure(e, &dir))?;
        outcome.write(&dir).map_err(output)?;
        let s = &outcome.summary;
        println!(
            "{label}: {} days from {}, mse {:.4e} -> {:.4e}, beta in [{:.4}, {:.4}], shape {:?}",
            s.days, s.start_date, s.initial_mse, s.final_mse, s.beta_min, s.beta_max, s.shape
        );
        Ok(())
    });
    first_failure(results)
}

fn cmd_probe(args: ProbeArgs) -> Result<(), Failure> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    let report = run_probe(&config, args.alpha).map_err(input)?;
    println!("r0 {}", report.r0);
    println!("grad_norm_plain {:e}", report.grad_norm_plain);
    println!("grad_norm_augmented {:e}", report.grad_norm_augmented);
    println!("ratio_augmented_over_plain {:e}", 1.0 / report.ratio());
    println!("ratio_plain_over_augmented {:e}", report.ratio());
    if let Some(out) = &args.out {
        write_json(
            out,
            &serde_json::json!({
                "r0": report.r0,
                "grad_norm_plain": report.grad_norm_plain,
                "grad_norm_augmented": report.grad_norm_augmented,
                "ratio_plain_over_augmented": report.ratio(),
            }),
        )?;
    }
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<(), Failure> {
    let config = load_config(&args.config)?;
    let r = run_check(&config).map_err(input)?;
    let verdict = |ok: bool| if ok { "ok" } else { "FAILED" };
    println!("C1 sampled Lipschitz (state)   {:.6e} {}", r.c1_lipschitz, verdict(r.c1_lipschitz.is_finite()));
    println!("C2 sampled Lipschitz (beta)    {:.6e} {}", r.c2_lipschitz, verdict(r.c2_lipschitz.is_finite()));
    println!("C3 min infected sensitivity    {:.6e} {}", r.c3_min_sensitivity, verdict(r.c3_holds()));
    println!("C4 equilibrium residual        {:.6e} {}", r.c4_residual, verdict(r.c4_holds()));
    println!("C5 max |g_I| at zero infection {:.6e} {}", r.c5_max_abs, verdict(r.c5_holds()));
    if let Some(out) = &args.out {
        write_json(
            out,
            &serde_json::json!({
                "c1_lipschitz": r.c1_lipschitz,
                "c2_lipschitz": r.c2_lipschitz,
                "c3_min_sensitivity": r.c3_min_sensitivity,
                "c4_residual": r.c4_residual,
                "c5_max_abs": r.c5_max_abs,
            }),
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EPIFIT_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Covid(a) => cmd_covid(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
