use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flexlora::allocator::BudgetSchedule;
use flexlora::checkpoint::Checkpoint;
use flexlora::importance::{
    elem_energy_entropy, frobenius_importance, mat_energy_entropy, nuclear_importance, spectral_entropy,
    DEFAULT_EPSILON,
};
use flexlora::matrix::{parse_csv_row, Spectrum};
use flexlora::trace::Trace;
use flexlora::{run_training, Error, ExperimentConfig};

/// Environment variable that overrides the output directory of `train`.
const OUTPUT_DIR_ENV: &str = "FLEXLORA_OUTPUT_DIR";

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "flexlora", version, about = "Dynamic rank allocation for SVD-form low-rank adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic task and write trace, metrics, checkpoint and effective config.
    Train(TrainArgs),
    /// Print every importance metric for a spectrum given as one CSV row.
    Importance {
        spectrum: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Print the budget schedule at its boundaries and allocation steps.
    Schedule(ScheduleArgs),
    /// Replay a trace into a rank-per-step CSV table.
    ExportHeatmap { trace: PathBuf },
    /// Re-check every invariant of a trace.
    ReplayVerify { trace: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    /// Dotted-path override, e.g. `schedule.b0=2`. May be repeated.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    b0: usize,
    #[arg(long)]
    t_warmup: usize,
    #[arg(long)]
    t_final: usize,
    #[arg(long)]
    total_steps: usize,
    #[arg(long)]
    delta_t: usize,
}

enum Failure {
    Config(String),
    Diverged(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Parse { .. } | Error::Parameter(_) => Failure::Config(e.to_string()),
            Error::Divergence { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train(args),
        Command::Importance { spectrum, epsilon } => importance(&spectrum, epsilon),
        Command::Schedule(args) => schedule(args),
        Command::ExportHeatmap { trace } => export_heatmap(&trace),
        Command::ReplayVerify { trace } => replay_verify(&trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

/// Writes through a temporary sibling and renames it into place.
fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(contents.as_bytes())?;
    f.sync_all()?;
    fs::rename(&tmp, dir.join(name))?;
    Ok(())
}

struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self, Failure> {
        let path = dir.join(".flexlora.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Other(format!(
                "output directory {} is locked by another run ({} exists)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let text = read(&args.config)?;
    let mut overrides = args.overrides;
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = ExperimentConfig::parse(&text, &overrides)?;
    let dir = args
        .output_dir
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&config.output.dir));
    fs::create_dir_all(&dir)?;
    let _lock = OutputLock::acquire(&dir)?;

    let outcome = run_training(&config)?;
    write_atomic(&dir, "effective_config.json", &config.to_json_pretty())?;
    write_atomic(&dir, "trace.jsonl", &outcome.trace.to_jsonl())?;
    write_atomic(&dir, "metrics.csv", &outcome.metrics_csv())?;
    let checkpoint = Checkpoint {
        config_hash: config.hash(),
        steps_completed: outcome.steps_completed,
        model: outcome.model.clone(),
    };
    write_atomic(&dir, "checkpoint.txt", &checkpoint.to_text())?;

    if let Some((step, loss)) = outcome.divergence {
        return Err(Error::Divergence { step, loss }.into());
    }
    let ranks: Vec<String> = outcome.final_ranks().iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "{}: {} steps, final loss {:.6e}, ranks {}",
        config.name,
        outcome.steps_completed,
        outcome.final_loss,
        ranks.join(" ")
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn importance(path: &Path, epsilon: f64) -> Result<(), Failure> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Failure::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let text = read(path)?;
    let mut rows = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((i, line)) = rows.next() else {
        return Err(Error::Parse {
            line: 1,
            message: "empty spectrum file".into(),
        }
        .into());
    };
    if let Some((j, _)) = rows.next() {
        return Err(Error::Parse {
            line: j + 1,
            message: "expected a single row".into(),
        }
        .into());
    }
    let values = parse_csv_row(line, i + 1)?;
    let spectrum = Spectrum::new(values)?;

    let entropy = spectral_entropy(&spectrum, epsilon);
    let elem = elem_energy_entropy(&spectrum, epsilon);
    let mat = mat_energy_entropy(&spectrum, epsilon);
    println!("spectral_entropy={:.12}", entropy.value);
    println!("nuclear={:.12}", nuclear_importance(&spectrum));
    println!("frobenius={:.12}", frobenius_importance(&spectrum));
    println!("elem_energy_entropy={:.12}", elem.value);
    println!("mat_energy_entropy={:.12}", mat.value);
    println!("sensitivity=n/a");
    let flags: Vec<String> = entropy
        .flag
        .into_iter()
        .map(|f| serde_json::to_value(f).expect("flag serializes").as_str().unwrap_or_default().to_string())
        .collect();
    println!("flags={}", if flags.is_empty() { "none".to_string() } else { flags.join(",") });
    Ok(())
}

fn schedule(args: ScheduleArgs) -> Result<(), Failure> {
    let s = BudgetSchedule {
        b0: args.b0,
        t_warmup: args.t_warmup,
        t_final: args.t_final,
        total_steps: args.total_steps,
        delta_t: args.delta_t,
    };
    s.validate()?;
    let mut steps: Vec<usize> = s.allocation_steps().collect();
    if s.t_warmup > 0 {
        steps.push(s.t_warmup - 1);
    }
    steps.push(s.t_warmup);
    steps.push(s.window_end());
    steps.sort_unstable();
    steps.dedup();
    println!("t,budget,allocation_step");
    for t in steps {
        println!("{t},{},{}", s.budget(t), s.is_allocation_step(t));
    }
    Ok(())
}

fn load_trace(path: &Path) -> Result<Trace, Failure> {
    Ok(Trace::parse(&read(path)?)?)
}

fn export_heatmap(path: &Path) -> Result<(), Failure> {
    let heatmap = load_trace(path)?.heatmap()?;
    print!("{}", heatmap.to_csv());
    Ok(())
}

fn replay_verify(path: &Path) -> Result<(), Failure> {
    let report = load_trace(path)?.verify()?;
    let ranks: Vec<String> = report.final_ranks.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "ok: {} events over {} allocation steps; final ranks {}",
        report.event_count,
        report.allocation_steps,
        ranks.join(" ")
    );
    Ok(())
}
