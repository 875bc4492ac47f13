//! Length-generalization sweeps over trained models.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trials::{generation_budget, TrainedModel};
use crate::error::{Error, Result};
use crate::metrics::robustness_score;
use crate::model::{stream, SyntheticTask};
use crate::numerics::Real;

/// Stream purpose for sweep inputs, distinct from the training streams.
const STREAM_SWEEP: u64 = 7;

/// Robustness of one generated utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mechanism: String,
    pub seed: u64,
    pub length: usize,
    /// `length / train_max_len`.
    pub multiplier: f64,
    pub sample: usize,
    pub coverage: f64,
    pub violations: usize,
    pub stalls: usize,
    pub reached_end: bool,
    pub decoder_steps: usize,
    pub max_steps: usize,
    /// Longest input seen in training.
    pub train_max_len: usize,
    pub beyond_train: bool,
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub lengths: Vec<usize>,
    pub samples: usize,
    pub sample_seed: u64,
    pub tail_steps: usize,
    pub max_steps_factor: f64,
    pub parallelism: usize,
}

/// Generates `samples` inputs per length (shared by every model) and scores
/// each model's free-running alignment on them.
pub fn run_length_sweep<T: Real>(
    models: &[TrainedModel<T>],
    task: &SyntheticTask,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>> {
    if models.is_empty() {
        return Err(Error::Empty("model set"));
    }
    if let Some(m) = models.iter().find(|m| m.steps_trained == 0) {
        return Err(Error::InvalidArgument(format!(
            "{} seed {} has not been trained",
            m.mechanism, m.seed
        )));
    }
    if spec.lengths.is_empty() || spec.samples == 0 {
        return Err(Error::Empty("sweep lengths or samples"));
    }
    if spec.lengths.contains(&0) {
        return Err(Error::InvalidArgument("sweep lengths must be positive".into()));
    }
    let inputs: Vec<(usize, usize, Vec<usize>)> = spec
        .lengths
        .iter()
        .flat_map(|&len| {
            let mut rng = stream(spec.sample_seed, STREAM_SWEEP ^ ((len as u64) << 8));
            (0..spec.samples)
                .map(|k| (len, k, task.sample_symbols(&mut rng, len)))
                .collect::<Vec<_>>()
        })
        .collect();
    let jobs: Vec<(&TrainedModel<T>, &(usize, usize, Vec<usize>))> =
        models.iter().flat_map(|m| inputs.iter().map(move |i| (m, i))).collect();
    let train_max = task.config.max_len;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism.max(1))
        .build()
        .map_err(|e| Error::Unsupported(format!("worker pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|&(m, (len, k, symbols))| {
                let budget = generation_budget(&m.model, task, symbols, spec.max_steps_factor);
                let gen = m.model.generate(symbols, budget, spec.tail_steps)?;
                let score = robustness_score(&gen.trace, symbols.len())?;
                Ok(SweepRow {
                    mechanism: m.mechanism.name(),
                    seed: m.seed,
                    length: *len,
                    multiplier: *len as f64 / train_max as f64,
                    sample: *k,
                    coverage: score.coverage,
                    violations: score.violations,
                    stalls: score.stalls,
                    reached_end: gen.trace.reached_end,
                    decoder_steps: gen.trace.steps(),
                    max_steps: budget,
                    train_max_len: train_max,
                    beyond_train: *len > train_max,
                })
            })
            .collect()
    })
}

/// Mean coverage per `(mechanism, length)` over all seeds and samples.
pub fn coverage_by_length(rows: &[SweepRow]) -> BTreeMap<(String, usize), f64> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.mechanism.clone(), r.length)).or_default();
        e.0 += r.coverage;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Shortest length at which `mechanism`'s mean coverage drops below
/// `threshold`, if any.
pub fn failure_onset(rows: &[SweepRow], mechanism: &str, threshold: f64) -> Option<usize> {
    coverage_by_length(rows)
        .into_iter()
        .filter(|((m, _), c)| m == mechanism && *c < threshold)
        .map(|((_, len), _)| len)
        .min()
}
