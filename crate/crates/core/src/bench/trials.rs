//! Multi-seed alignment trials.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::BenchConfig;
use crate::error::{Error, Result};
use crate::metrics::{mcd_dtw, robustness_score, FeatureSequence};
use crate::model::{stream, train, Example, Mechanism, Seq2Seq, SyntheticTask, TrainEvent, STREAM_INIT};
use crate::numerics::{argmax, Real, Tape};

/// Human-readable statement of what counts as a successful run.
pub const SUCCESS_DEFINITION: &str = "alignment success: every held-out sample reaches terminal coverage > 0.9 \
with fewer than 3 monotonicity violations (peak moving back by more than 2) under free-running generation; \
success step is the first evaluation meeting this, step 0 being the untrained model";

/// Label attached to coverage-style outputs.
pub const ROBUSTNESS_NOTE: &str = "coverage/violations/stalls are an alignment-robustness proxy \
for transcription error rate; no speech recognizer is involved";

/// Held-out scores of one model snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mcd_dtw: f64,
    pub coverage: f64,
    pub min_coverage: f64,
    pub max_violations: usize,
    pub stalls: usize,
    pub aligned: bool,
    /// Teacher-forced fraction of decoder steps whose attention peak lies on
    /// an input position that emits one of the step's frames.
    pub alignment_accuracy: f64,
}

/// Generation budget for an input: `factor ×` the teacher-forced step count.
pub fn generation_budget<T: Real>(model: &Seq2Seq<T>, task: &SyntheticTask, symbols: &[usize], factor: f64) -> usize {
    let steps = model.steps_for(task.nominal_frames(symbols)).max(1);
    ((steps as f64 * factor).ceil() as usize).max(1)
}

pub fn evaluate<T: Real>(
    model: &Seq2Seq<T>,
    task: &SyntheticTask,
    holdout: &[Example],
    max_steps_factor: f64,
    tail_steps: usize,
) -> Result<EvalSummary> {
    if holdout.is_empty() {
        return Err(Error::Empty("holdout set"));
    }
    let mut mcd_sum = 0.0;
    let mut cov_sum = 0.0;
    let mut min_cov = f64::INFINITY;
    let mut max_viol = 0;
    let mut stalls = 0;
    let mut aligned = true;
    let mut hits = 0usize;
    let mut total = 0usize;
    let r = model.config.frames_per_step;
    for ex in holdout {
        let budget = generation_budget(model, task, &ex.symbols, max_steps_factor);
        let gen = model.generate(&ex.symbols, budget, tail_steps)?;
        let score = robustness_score(&gen.trace, ex.symbols.len())?;
        mcd_sum += mcd_dtw(&FeatureSequence::new(gen.frames)?, &FeatureSequence::new(ex.frames.clone())?)?;
        cov_sum += score.coverage;
        min_cov = min_cov.min(score.coverage);
        max_viol = max_viol.max(score.violations);
        stalls += score.stalls;
        aligned &= score.is_aligned();

        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let pass = model.forward_loss(&mut tape, &p, ex, None)?;
        for (i, &a) in pass.alphas.iter().enumerate() {
            let alpha: Vec<f64> = tape.data(a).iter().map(|v| v.to_f64_lossy()).collect();
            let peak = argmax(&alpha);
            let frames = &ex.frame_source[i * r..((i + 1) * r).min(ex.frame_source.len())];
            hits += usize::from(frames.contains(&peak));
            total += 1;
        }
    }
    let n = holdout.len() as f64;
    Ok(EvalSummary {
        mcd_dtw: mcd_sum / n,
        coverage: cov_sum / n,
        min_coverage: min_cov,
        max_violations: max_viol,
        stalls,
        aligned,
        alignment_accuracy: hits as f64 / total.max(1) as f64,
    })
}

/// One evaluation of one run. Metrics are `None` for failure records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub mechanism: String,
    pub seed: u64,
    pub step: usize,
    pub status: String,
    /// Batch loss of the last update (none before training).
    pub train_loss: Option<f64>,
    pub mcd_dtw: Option<f64>,
    pub coverage: Option<f64>,
    pub min_coverage: Option<f64>,
    pub max_violations: Option<usize>,
    pub stalls: Option<usize>,
    pub aligned: Option<bool>,
    pub alignment_accuracy: Option<f64>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

impl TrialRow {
    fn ok(mechanism: Mechanism, seed: u64, step: usize, loss: Option<f64>, e: &EvalSummary, wall: f64) -> Self {
        TrialRow {
            mechanism: mechanism.name(),
            seed,
            step,
            status: "ok".into(),
            train_loss: loss,
            mcd_dtw: Some(e.mcd_dtw),
            coverage: Some(e.coverage),
            min_coverage: Some(e.min_coverage),
            max_violations: Some(e.max_violations),
            stalls: Some(e.stalls),
            aligned: Some(e.aligned),
            alignment_accuracy: Some(e.alignment_accuracy),
            wall_time_s: wall,
            error: None,
        }
    }

    fn failed(mechanism: Mechanism, seed: u64, step: usize, wall: f64, error: &Error) -> Self {
        TrialRow {
            mechanism: mechanism.name(),
            seed,
            step,
            status: "failed".into(),
            train_loss: None,
            mcd_dtw: None,
            coverage: None,
            min_coverage: None,
            max_violations: None,
            stalls: None,
            aligned: None,
            alignment_accuracy: None,
            wall_time_s: wall,
            error: Some(format!("{}: {error}", error.kind())),
        }
    }
}

/// Per-run outcome derived from its evaluation rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mechanism: String,
    pub seed: u64,
    pub status: String,
    pub steps_completed: usize,
    pub success_step: Option<usize>,
    /// MCD-DTW of the untrained model.
    pub initial_mcd_dtw: Option<f64>,
    pub final_mcd_dtw: Option<f64>,
    pub final_coverage: Option<f64>,
    pub final_alignment_accuracy: Option<f64>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

impl RunSummary {
    pub fn from_rows(mechanism: Mechanism, seed: u64, rows: &[TrialRow], steps_completed: usize) -> Self {
        let ok: Vec<&TrialRow> = rows.iter().filter(|r| r.status == "ok").collect();
        let failure = rows.iter().find(|r| r.status != "ok");
        RunSummary {
            mechanism: mechanism.name(),
            seed,
            status: if failure.is_some() { "failed" } else { "ok" }.into(),
            steps_completed,
            success_step: ok.iter().find(|r| r.aligned == Some(true)).map(|r| r.step),
            initial_mcd_dtw: ok.first().filter(|r| r.step == 0).and_then(|r| r.mcd_dtw),
            final_mcd_dtw: ok.last().and_then(|r| r.mcd_dtw),
            final_coverage: ok.last().and_then(|r| r.coverage),
            final_alignment_accuracy: ok.last().and_then(|r| r.alignment_accuracy),
            wall_time_s: rows.last().map_or(0.0, |r| r.wall_time_s),
            error: failure.and_then(|r| r.error.clone()),
        }
    }
}

/// A model together with the training it received.
#[derive(Clone, Debug)]
pub struct TrainedModel<T> {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub steps_trained: usize,
    pub model: Seq2Seq<T>,
}

#[derive(Clone, Debug)]
pub struct TrialOutcome<T> {
    pub rows: Vec<TrialRow>,
    pub runs: Vec<RunSummary>,
    /// Models of runs that finished without failure, in run order.
    pub models: Vec<TrainedModel<T>>,
}

/// Receives each row as soon as it is produced.
pub type RowSink<'a> = &'a (dyn Fn(&TrialRow) -> Result<()> + Sync);

fn run_one<T: Real>(
    config: &BenchConfig,
    task: &SyntheticTask,
    holdout: &[Example],
    mechanism: Mechanism,
    seed: u64,
    sink: Option<RowSink<'_>>,
) -> (Vec<TrialRow>, RunSummary, Option<TrainedModel<T>>) {
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut sink_error = None;
    let mut emit = |row: TrialRow, rows: &mut Vec<TrialRow>| {
        if let Some(s) = sink {
            if let Err(e) = s(&row) {
                sink_error.get_or_insert(e);
            }
        }
        rows.push(row);
    };
    let tc = config.train_config();
    let mut done = 0;
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<Seq2Seq<T>> {
        let mut model = Seq2Seq::<T>::new(config.model_for(mechanism), &mut stream(seed, STREAM_INIT))?;
        let e0 = evaluate(&model, task, holdout, config.max_steps_factor, config.tail_steps)?;
        emit(TrialRow::ok(mechanism, seed, 0, None, &e0, start.elapsed().as_secs_f64()), &mut rows);
        train(&mut model, task, &tc, seed, |ev: &TrainEvent, m| {
            done = ev.step;
            let due = (tc.eval_interval > 0 && ev.step % tc.eval_interval == 0) || ev.step == tc.steps;
            if due {
                let e = evaluate(m, task, holdout, config.max_steps_factor, config.tail_steps)?;
                let wall = start.elapsed().as_secs_f64();
                emit(TrialRow::ok(mechanism, seed, ev.step, Some(ev.loss), &e, wall), &mut rows);
            }
            Ok(true)
        })?;
        Ok(model)
    }));
    let model = match result {
        Ok(Ok(model)) => Some(model),
        Ok(Err(e)) => {
            let step = match &e {
                Error::Diverged { step, .. } => *step,
                _ => done,
            };
            emit(TrialRow::failed(mechanism, seed, step, start.elapsed().as_secs_f64(), &e), &mut rows);
            None
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            let e = Error::Unsupported(format!("run panicked: {msg}"));
            emit(TrialRow::failed(mechanism, seed, done, start.elapsed().as_secs_f64(), &e), &mut rows);
            None
        }
    };
    if let Some(e) = sink_error {
        let e = Error::Unsupported(format!("row sink failed: {e}"));
        rows.push(TrialRow::failed(mechanism, seed, done, start.elapsed().as_secs_f64(), &e));
    }
    let summary = RunSummary::from_rows(mechanism, seed, &rows, done);
    let trained = model.filter(|_| summary.status == "ok").map(|model| TrainedModel {
        mechanism,
        seed,
        steps_trained: done,
        model,
    });
    (rows, summary, trained)
}

/// Trains `seeds` runs of every configured mechanism and scores them on a
/// shared held-out set. Runs execute on up to `parallelism` threads; a run
/// that fails is recorded and does not stop the others.
pub fn run_trials<T: Real>(config: &BenchConfig, sink: Option<RowSink<'_>>) -> Result<TrialOutcome<T>> {
    config.validate()?;
    let task = SyntheticTask::new(config.task.clone())?;
    let holdout = task.holdout(config.holdout, config.holdout_seed);
    let jobs: Vec<(Mechanism, u64)> = config
        .mechanisms
        .iter()
        .flat_map(|&m| (0..config.seeds as u64).map(move |k| (m, config.seed + k)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| Error::Unsupported(format!("worker pool: {e}")))?;
    let sink_lock = Mutex::new(());
    let serialized = |row: &TrialRow| -> Result<()> {
        let _guard = sink_lock.lock().unwrap_or_else(|p| p.into_inner());
        match sink {
            Some(s) => s(row),
            None => Ok(()),
        }
    };
    let results: Vec<_> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, seed)| run_one::<T>(config, &task, &holdout, m, seed, Some(&serialized)))
            .collect()
    });
    let mut outcome = TrialOutcome {
        rows: Vec::new(),
        runs: Vec::new(),
        models: Vec::new(),
    };
    for (rows, summary, model) in results {
        outcome.rows.extend(rows);
        outcome.runs.push(summary);
        outcome.models.extend(model);
    }
    Ok(outcome)
}

/// Median success step over all runs of `mechanism`, counting runs that
/// never succeeded as infinitely slow. `None` if there are no runs or the
/// median falls on a run that never succeeded.
pub fn median_success_step(runs: &[RunSummary], mechanism: Mechanism) -> Option<f64> {
    let mut steps: Vec<f64> = runs
        .iter()
        .filter(|r| r.mechanism == mechanism.name())
        .map(|r| r.success_step.map_or(f64::INFINITY, |s| s as f64))
        .collect();
    if steps.is_empty() {
        return None;
    }
    steps.sort_by(f64::total_cmp);
    let n = steps.len();
    let m = if n % 2 == 1 {
        steps[n / 2]
    } else {
        (steps[n / 2 - 1] + steps[n / 2]) / 2.0
    };
    m.is_finite().then_some(m)
}
