use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use fogloop::engine::{simulate, EngineError, RunReport};
use fogloop::model::ValidationReport;
use fogloop::scenario::{apply_variant, validate, Scenario, ScenarioError, Variant};
use fogloop::simnet::trace::{DigestSink, JsonlSink, NullSink};
use fogloop::smartbuilding::BuildMode;

#[derive(Parser)]
#[command(name = "fogloop", version, about = "Simulate MAPE-K control loops on a fog/cloud hierarchy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and list every violation.
    Validate { path: PathBuf },
    /// Run one simulation and write trace, metrics and summary.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        until_ms: u64,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Output directory; defaults to $FOGLOOP_OUT, then ./out.
        #[arg(long, env = "FOGLOOP_OUT", default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "jsonl,csv,txt")]
        format: Vec<Format>,
    },
    /// Run several variants of one scenario side by side.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated variants, each a '+'-joined set of
        /// standalone|centralized|decentralized and mapeaas|apaas_split.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        until_ms: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Centralized,
    Decentralized,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Jsonl,
    Csv,
    Txt,
}

enum Failure {
    Validation(ValidationReport),
    Input(anyhow::Error),
    Output(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Input(_) => 2,
            Failure::Output(_) => 3,
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Invalid(r) => Failure::Validation(r),
            ScenarioError::Build(_) => Failure::Validation(single(&e.to_string())),
            other => Failure::Input(other.into()),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Scenario(s) => s.into(),
            other => Failure::Input(anyhow!(other).context("simulation failed")),
        }
    }
}

fn single(msg: &str) -> ValidationReport {
    let mut r = ValidationReport::default();
    r.push("scenario", msg);
    r
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { path } => cmd_validate(&path),
        Command::Run { scenario, seed, until_ms, mode, out, format } => {
            cmd_run(&scenario, seed, until_ms, mode, &out, &format)
        }
        Command::Compare { scenario, variants, seed, until_ms } => cmd_compare(&scenario, &variants, seed, until_ms),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(r) => eprint!("{r}"),
                Failure::Input(e) | Failure::Output(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    Ok(Scenario::load(path)?)
}

fn check_horizon(until_ms: u64) -> Result<(), Failure> {
    if until_ms == 0 {
        return Err(Failure::Input(anyhow!("--until-ms must be greater than 0")));
    }
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<(), Failure> {
    let s = load(path)?;
    let report = validate(&s);
    if !report.is_empty() {
        return Err(Failure::Validation(report));
    }
    println!("{}: ok", path.display());
    Ok(())
}

fn cmd_run(
    path: &Path,
    seed: u64,
    until_ms: u64,
    mode: Option<ModeArg>,
    out: &Path,
    formats: &[Format],
) -> Result<(), Failure> {
    check_horizon(until_ms)?;
    let mut s = load(path)?;
    if let Some(m) = mode {
        let mode = match m {
            ModeArg::Centralized => BuildMode::Centralized,
            ModeArg::Decentralized => BuildMode::Decentralized,
        };
        s = apply_variant(&s, &Variant { mode: Some(mode), offering: None })?;
    }
    let report = validate(&s);
    if !report.is_empty() {
        return Err(Failure::Validation(report));
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display())).map_err(Failure::Output)?;

    let report = if formats.contains(&Format::Jsonl) {
        let trace_path = out.join("trace.jsonl");
        let file = File::create(&trace_path)
            .with_context(|| format!("creating {}", trace_path.display()))
            .map_err(Failure::Output)?;
        let mut sink = JsonlSink::new(BufWriter::new(file));
        let report = simulate(&s, seed, until_ms, &mut sink)?;
        sink.finish().with_context(|| format!("writing {}", trace_path.display())).map_err(Failure::Output)?;
        report
    } else {
        simulate(&s, seed, until_ms, &mut NullSink)?
    };

    let summary = summary_text(&s, &report);
    if formats.contains(&Format::Csv) {
        write_file(&out.join("metrics.csv"), report.metrics.to_csv().as_bytes())?;
    }
    if formats.contains(&Format::Txt) {
        write_file(&out.join("summary.txt"), summary.as_bytes())?;
    }
    print!("{summary}");
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display())).map_err(Failure::Output)?;
    f.write_all(bytes)
        .and_then(|_| f.flush())
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::Output)
}

fn summary_text(s: &Scenario, r: &RunReport) -> String {
    format!(
        "scenario: {}\nseed: {}\nhorizon ms: {}\nconfig digest: {}\n{}final state: {}\n",
        s.name,
        r.seed,
        r.horizon_ms,
        r.config_digest,
        r.metrics.summary(),
        r.snapshot_digest(),
    )
}

struct Row {
    variant: String,
    report: RunReport,
    trace_digest: String,
}

fn cmd_compare(path: &Path, variants: &[String], seed: u64, until_ms: u64) -> Result<(), Failure> {
    check_horizon(until_ms)?;
    let base = load(path)?;
    let mut scenarios = Vec::with_capacity(variants.len());
    for v in variants {
        let variant: Variant = v.parse()?;
        let s = apply_variant(&base, &variant)?;
        let report = validate(&s);
        if !report.is_empty() {
            let mut tagged = ValidationReport::default();
            for viol in report.iter() {
                tagged.push(format!("{variant}: {}", viol.path), &viol.message);
            }
            return Err(Failure::Validation(tagged));
        }
        scenarios.push((variant.to_string(), s));
    }

    let results: Vec<Result<Row, EngineError>> = thread::scope(|scope| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|(name, s)| {
                scope.spawn(move || {
                    let mut sink = DigestSink::new();
                    let report = simulate(s, seed, until_ms, &mut sink)?;
                    Ok(Row { variant: name.clone(), report, trace_digest: sink.hex_digest() })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }

    println!(
        "{:<28} {:>9} {:>12} {:>11} {:>11} {:>12} {:>14}  {:<12} {:<12}",
        "variant",
        "decisions",
        "mean_lat_ms",
        "max_lat_ms",
        "fog->cloud",
        "messages",
        "total_kwh",
        "final_state",
        "trace"
    );
    for row in &rows {
        let m = &row.report.metrics;
        let mean = m.mean_latency(None).map_or("n/a".into(), |v| format!("{v:.3}"));
        let max = m.max_latency(None).map_or("n/a".into(), |v| v.to_string());
        println!(
            "{:<28} {:>9} {:>12} {:>11} {:>11} {:>12} {:>14.6}  {:<12} {:<12}",
            row.variant,
            m.decisions.len(),
            mean,
            max,
            m.fog_to_cloud(),
            m.messages,
            m.total_kwh(),
            &row.report.snapshot_digest()[..12],
            &row.trace_digest[..12],
        );
    }
    Ok(())
}
