//! `locattn`: desk-scale alignment experiments.
//!
//! Results go to `--out`, else `$LOCATTN_OUT_DIR`, else the config's
//! `out_dir`, else `./results`. Failures print a one-line JSON error record
//! on stderr and exit with status 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use locattn::bench::{
    export_table, gradcheck_mechanism, read_json_table, rollout_rows, run_length_sweep, run_trials,
    BenchConfig, CsvAppender, Format, Metadata, Precision, RawConfig, SweepSpec, Table, TrialOutcome,
    TrialRow, ROBUSTNESS_NOTE, SUCCESS_DEFINITION,
};
use locattn::model::{save_checkpoint, Mechanism, SyntheticTask};
use locattn::numerics::Real;
use locattn::prior::beta_binomial_taps;
use locattn::{Error, Result};

const OUT_ENV: &str = "LOCATTN_OUT_DIR";

#[derive(Parser)]
#[command(name = "locattn", version, about = "Location-relative attention alignment benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; run k of each mechanism uses seed + k.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Mechanism name(s), comma separated (CBA, LSA, DCA, GMMv0, GMMv1, GMMv1b, GMMv2, GMMv2b).
    #[arg(long)]
    mechanism: Option<String>,
    /// Training steps per run.
    #[arg(long)]
    steps: Option<usize>,
    /// Floating-point width for training and inference.
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured mechanism for several seeds and score alignment.
    Trials(Common),
    /// Train, then measure alignment robustness on inputs longer than training.
    Sweep(Common),
    /// Alignment produced by the prior filter alone, step by step.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 0.9)]
        beta: f64,
        /// Filter support (taps = support + 1).
        #[arg(long, default_value_t = 10)]
        support: usize,
        /// Encoder length.
        #[arg(long, default_value_t = 100)]
        length: usize,
    },
    /// Finite-difference check of end-to-end gradients at tiny dimensions.
    Gradcheck(Common),
    /// Convert a JSON result table to CSV or re-emit it as JSON.
    Export {
        /// JSON table written by another subcommand.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
}

struct Setup {
    config: BenchConfig,
    raw: RawConfig,
    out: PathBuf,
}

fn setup(c: &Common) -> Result<Setup> {
    let mut config = BenchConfig::default();
    let mut raw = RawConfig::default();
    if let Some(path) = &c.config {
        raw = locattn::bench::parse_config_file(path)?;
        config.apply(&raw)?;
    }
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    if let Some(steps) = c.steps {
        config.steps = steps;
    }
    if let Some(list) = &c.mechanism {
        config.mechanisms = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::parse::<Mechanism>)
            .collect::<Result<_>>()?;
    }
    if let Some(p) = &c.precision {
        config.precision = p.parse()?;
    }
    config.validate()?;
    let out = c
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    Ok(Setup { config, raw, out })
}

fn metadata(s: &Setup, notes: &[&str]) -> Result<Metadata> {
    Ok(Metadata {
        config_text: s.raw.text.clone(),
        settings: serde_json::to_value(&s.config)?,
        notes: notes.iter().map(|n| n.to_string()).collect(),
    })
}

fn write_both<R: serde::Serialize>(table: &Table<R>, dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(vec![
        export_table(table, dir, Format::Csv)?,
        export_table(table, dir, Format::Json)?,
    ])
}

fn progress(row: &TrialRow) {
    match (&row.error, row.coverage, row.mcd_dtw) {
        (Some(e), _, _) => eprintln!("{} seed {} step {}: FAILED {e}", row.mechanism, row.seed, row.step),
        (None, Some(c), Some(m)) => eprintln!(
            "{} seed {} step {}: mcd_dtw {m:.3} coverage {c:.3} aligned {}",
            row.mechanism,
            row.seed,
            row.step,
            row.aligned.unwrap_or(false)
        ),
        _ => {}
    }
}

fn trials<T: Real>(s: &Setup) -> Result<(TrialOutcome<T>, Vec<PathBuf>)> {
    let appender = CsvAppender::create(&s.out.join("trial_rows.partial.csv"))?;
    let sink = |row: &TrialRow| {
        progress(row);
        appender.append(row)
    };
    let outcome = run_trials::<T>(&s.config, Some(&sink))?;
    let meta = metadata(s, &[SUCCESS_DEFINITION, ROBUSTNESS_NOTE])?;
    let mut files = vec![appender.path().to_path_buf()];
    files.extend(write_both(&Table::new("trials", meta.clone(), outcome.rows.clone()), &s.out)?);
    files.extend(write_both(&Table::new("runs", meta, outcome.runs.clone()), &s.out)?);
    Ok((outcome, files))
}

fn sweep<T: Real>(s: &Setup) -> Result<Vec<PathBuf>> {
    let (outcome, mut files) = trials::<T>(s)?;
    let ckpt_dir = s.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::Io {
        path: ckpt_dir.clone(),
        source: e,
    })?;
    for m in &outcome.models {
        let path = ckpt_dir.join(format!("{}_seed{}.ckpt", m.mechanism, m.seed));
        save_checkpoint(&m.model, &path)?;
        files.push(path);
    }
    let task = SyntheticTask::new(s.config.task.clone())?;
    let spec = SweepSpec {
        lengths: s.config.sweep_lengths(),
        samples: s.config.sweep_samples,
        sample_seed: s.config.sweep_seed,
        tail_steps: s.config.tail_steps,
        max_steps_factor: s.config.max_steps_factor,
        parallelism: s.config.parallelism,
    };
    let rows = run_length_sweep(&outcome.models, &task, &spec)?;
    let meta = metadata(s, &[ROBUSTNESS_NOTE])?;
    files.extend(write_both(&Table::new("sweep", meta, rows), &s.out)?);
    Ok(files)
}

fn run(cli: Cli) -> Result<Value> {
    let files = match cli.command {
        Command::Trials(c) => {
            let s = setup(&c)?;
            match s.config.precision {
                Precision::F32 => trials::<f32>(&s)?.1,
                Precision::F64 => trials::<f64>(&s)?.1,
            }
        }
        Command::Sweep(c) => {
            let s = setup(&c)?;
            match s.config.precision {
                Precision::F32 => sweep::<f32>(&s)?,
                Precision::F64 => sweep::<f64>(&s)?,
            }
        }
        Command::Rollout {
            common,
            alpha,
            beta,
            support,
            length,
        } => {
            let s = setup(&common)?;
            let filter = beta_binomial_taps(alpha, beta, support)?;
            let steps = common.steps.unwrap_or(60);
            let rows = rollout_rows(&filter, steps, length)?;
            let mut meta = metadata(&s, &[])?;
            meta.settings = json!({ "alpha": alpha, "beta": beta, "support": support, "length": length, "steps": steps, "taps": filter.taps() });
            write_both(&Table::new("rollout", meta, rows), &s.out)?
        }
        Command::Gradcheck(c) => {
            let s = setup(&c)?;
            let mechanisms = if c.mechanism.is_some() {
                s.config.mechanisms.clone()
            } else {
                Mechanism::ALL.to_vec()
            };
            let rows = mechanisms
                .iter()
                .map(|&m| {
                    let r = gradcheck_mechanism(m, s.config.seed)?;
                    eprintln!("{}: max relative error {:.2e} ({})", r.mechanism, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
                    Ok(r)
                })
                .collect::<Result<Vec<_>>>()?;
            let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| r.mechanism.clone()).collect();
            let files = write_both(&Table::new("gradcheck", metadata(&s, &[])?, rows), &s.out)?;
            if !failed.is_empty() {
                return Err(Error::InvalidArgument(format!("gradient check failed for {}", failed.join(", "))));
            }
            files
        }
        Command::Export { input, format, out } => {
            let format: Format = format.parse()?;
            let table: Table<Value> = read_json_table(&input)?;
            let dir = out.unwrap_or_else(|| input.parent().unwrap_or(Path::new(".")).to_path_buf());
            vec![export_table(&table, &dir, format)?]
        }
    };
    Ok(json!({ "status": "ok", "files": files }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "status": "error", "kind": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
