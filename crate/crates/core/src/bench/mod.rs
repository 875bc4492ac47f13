//! Experiment orchestration: configuration files, multi-seed trials, length
//! sweeps, prior-filter rollouts, gradient checks and result export.

mod config;
mod export;
mod sweep;
mod trials;

pub use config::{parse_config_file, parse_config_str, BenchConfig, Entry, Precision, RawConfig};
pub use export::{
    csv_header, export_table, read_json_table, write_csv, CsvAppender, Format, Metadata, Table, SCHEMA_VERSION,
};
pub use sweep::{coverage_by_length, failure_onset, run_length_sweep, SweepRow, SweepSpec};
pub use trials::{
    evaluate, generation_budget, median_success_step, run_trials, EvalSummary, RowSink, RunSummary,
    TrainedModel, TrialOutcome, TrialRow, ROBUSTNESS_NOTE, SUCCESS_DEFINITION,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{stream, Example, Mechanism, ModelConfig, Seq2Seq};
use crate::numerics::{grad_check, Tape};
use crate::params::Bound;
use crate::prior::{position_moments, prior_rollout, PriorFilter};

/// One cell of a prior-filter rollout: alignment mass at `position` after
/// `step` applications, with the distribution's mean and std repeated for
/// convenience.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub step: usize,
    pub position: usize,
    pub mass: f64,
    pub mean: f64,
    pub std: f64,
}

/// Repeatedly applies the prior filter to a one-hot start (the prior-only
/// alignment dynamics), over an encoder of length `len`.
pub fn rollout_rows(filter: &PriorFilter, steps: usize, len: usize) -> Result<Vec<RolloutRow>> {
    let snaps = prior_rollout(filter, steps, len)?;
    let mut rows = Vec::with_capacity(snaps.len() * len);
    for (step, alpha) in snaps.iter().enumerate() {
        let (mean, std) = position_moments(alpha);
        rows.extend(alpha.iter().enumerate().map(|(position, &mass)| RolloutRow {
            step,
            position,
            mass,
            mean,
            std,
        }));
    }
    Ok(rows)
}

/// Tolerance for end-to-end gradient checks.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub mechanism: String,
    pub seed: u64,
    pub parameters: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub passed: bool,
}

/// Finite-difference check of the full teacher-forced loss with respect to
/// every parameter, at tiny dimensions: 6 input symbols, 2 decoder steps.
pub fn gradcheck_mechanism(mechanism: Mechanism, seed: u64) -> Result<GradcheckRow> {
    let config = ModelConfig::tiny(mechanism, 5);
    let mut model = Seq2Seq::<f64>::new(config.clone(), &mut stream(seed, 0))?;
    let mut rng = stream(seed, 1);
    // Zero-initialized biases put ReLU units exactly on their kink at the
    // first step; move every parameter to a generic point.
    for t in model.store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let symbols: Vec<usize> = (0..6).map(|_| rng.random_range(0..config.vocab)).collect();
    let n_frames = 2 * config.frames_per_step - 1;
    let frames: Vec<Vec<f64>> = (0..n_frames)
        .map(|_| (0..config.feat_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let example = Example {
        frame_source: (0..n_frames).map(|i| i * symbols.len() / n_frames).collect(),
        symbols,
        frames,
    };
    let report = grad_check(
        |tape: &mut Tape<f64>, vars| {
            let p = Bound::from_vars(vars.to_vec());
            Ok(model.forward_loss(tape, &p, &example, None)?.loss)
        },
        model.store.tensors(),
    )?;
    let worst_parameter = model
        .store
        .iter()
        .nth(report.worst.0)
        .map(|(n, _)| n.to_string())
        .unwrap_or_default();
    Ok(GradcheckRow {
        mechanism: mechanism.name(),
        seed,
        parameters: model.store.len(),
        coordinates: report.coordinates,
        max_rel_error: report.max_rel_error,
        worst_parameter,
        passed: report.max_rel_error < GRADCHECK_TOLERANCE,
    })
}
