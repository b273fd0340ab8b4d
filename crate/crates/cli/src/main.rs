use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use enkpf::experiment::{run_experiment_with_threads, spinup, write_outputs};
use enkpf::scoring::read_scores;
use enkpf::sweq::write_state_csv;
use enkpf::{parse_config_with, Error, ExperimentConfig, Method, Scenario};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "enkpf", version, about = "Cycled twin experiments with ensemble Kalman particle filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a twin experiment and write scores.csv and ranks.csv.
    Run(RunArgs),
    /// Write the initial ensemble and truth of one repetition.
    Spinup(SpinupArgs),
    /// Average a scores.csv over repetitions, per method, field and cycle.
    Score(ScoreArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration; all keys are optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated, e.g. `lenkf,block_lenkpf,free`.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SpinupArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Repetition whose spin-up to write.
    #[arg(long, default_value_t = 0)]
    rep: u64,
}

#[derive(Args)]
struct ScoreArgs {
    /// A scores.csv written by `run`.
    scores: PathBuf,
    /// Output file; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let text = match &args.config {
        Some(path) => fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut cfg = parse_config_with(&text, args.scenario)?;
    if let Some(seed) = args.seed {
        cfg.base_seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.common)?;
    if let Some(reps) = args.reps {
        cfg.repetitions = reps;
    }
    if let Some(methods) = args.methods {
        cfg.methods = methods;
    }
    cfg.validate()?;
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let start = Instant::now();
    let out = run_experiment_with_threads(&cfg, threads)?;
    write_outputs(&out, &cfg.output, cfg.trace)?;
    eprintln!(
        "{} repetitions x {} cycles in {:.1} s -> {}",
        cfg.repetitions,
        cfg.n_cycles(),
        start.elapsed().as_secs_f64(),
        cfg.output.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct MemberRow {
    member: usize,
    grid_index: usize,
    h: f64,
    u: f64,
    r: f64,
}

fn spinup_cmd(args: SpinupArgs) -> Result<(), Error> {
    let cfg = load_config(&args.common)?;
    let (ensemble, truth) = spinup(&cfg, args.rep)?;
    fs::create_dir_all(&cfg.output)?;
    let n = cfg.model.n_points;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(cfg.output.join("ensemble.csv"))?));
    for (member, row) in ensemble.members().row_iter().enumerate() {
        for i in 0..n {
            w.serialize(MemberRow {
                member,
                grid_index: i,
                h: row[i],
                u: row[n + i],
                r: row[2 * n + i],
            })?;
        }
    }
    w.flush()?;
    write_state_csv(&truth, BufWriter::new(File::create(cfg.output.join("truth.csv"))?))?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    method: String,
    field: String,
    cycle: usize,
    reps: usize,
    failed: usize,
    mean_crps: Option<f64>,
    mean_relative_pct: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn score(args: ScoreArgs) -> Result<(), Error> {
    let records = read_scores(File::open(&args.scores).map_err(|e| Error::Io(format!("{}: {e}", args.scores.display())))?)?;
    #[derive(Default)]
    struct Acc {
        reps: usize,
        crps: Vec<f64>,
        relative: Vec<f64>,
    }
    let mut groups: BTreeMap<(String, &'static str, usize), Acc> = BTreeMap::new();
    for r in &records {
        let acc = groups.entry((r.method.clone(), r.field.name(), r.cycle)).or_default();
        acc.reps += 1;
        acc.crps.extend(r.crps);
        acc.relative.extend(r.relative_pct);
    }
    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for ((method, field, cycle), acc) in groups {
        w.serialize(SummaryRow {
            method,
            field: field.to_string(),
            cycle,
            reps: acc.reps,
            failed: acc.reps - acc.crps.len(),
            mean_crps: mean(&acc.crps),
            mean_relative_pct: mean(&acc.relative),
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
}

fn report(err: &Error) {
    let line = ErrorLine {
        error: err.kind(),
        message: err.to_string(),
    };
    eprintln!("{}", serde_json::to_string(&line).expect("plain strings serialize"));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let line = ErrorLine {
                error: "usage",
                message: e.kind().to_string() + ": " + e.to_string().lines().next().unwrap_or_default(),
            };
            eprintln!("{}", serde_json::to_string(&line).expect("plain strings serialize"));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Spinup(a) => spinup_cmd(a),
        Command::Score(a) => score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}

