//! Teacher-forced training with Adam and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::{stream, Seq2Seq, SyntheticTask};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor};
use crate::params::ParamStore;

/// Random stream purposes derived from a run seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_DATA: u64 = 1;
pub const STREAM_DROPOUT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate after `lr_drop_at × steps` updates.
    pub final_learning_rate: f64,
    pub lr_drop_at: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Call the evaluation hook every this many updates (0 disables it).
    pub eval_interval: usize,
    /// Disable prenet dropout regardless of the model setting.
    pub no_dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            final_learning_rate: 5e-4,
            lr_drop_at: 0.5,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eval_interval: 50,
            no_dropout: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate used for update number `step` (0-based).
pub fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    if (step as f64) < config.lr_drop_at * config.steps as f64 {
        config.learning_rate
    } else {
        config.final_learning_rate
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.to_f64_lossy();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g = *g * k;
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Adam {
            beta1,
            beta2,
            epsilon,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::lit(lr * c2.sqrt() / c1);
        let eps = T::lit(self.epsilon * c2.sqrt());
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w = *w - step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Per-update record passed to the hook.
#[derive(Clone, Copy, Debug)]
pub struct TrainEvent {
    /// Updates completed so far.
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// False when the evaluation hook stopped training early.
    pub completed: bool,
}

/// Mean batch loss and gradients for one set of examples.
pub fn batch_gradients<T: Real>(
    model: &Seq2Seq<T>,
    batch: &[super::Example],
    dropout: Option<&mut crate::params::SeedRng>,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut dropout = dropout;
    let mut sum: Vec<Vec<T>> = model
        .store
        .tensors()
        .iter()
        .map(|t| vec![T::zero(); t.numel()])
        .collect();
    let mut loss = 0.0;
    let mut tape = Tape::new();
    for ex in batch {
        tape.truncate(0);
        let p = model.bind(&mut tape);
        let pass = model.forward_loss(&mut tape, &p, ex, dropout.as_deref_mut())?;
        let l = tape.scalar(pass.loss).to_f64_lossy();
        if !l.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        loss += l;
        let grads = tape.backward(pass.loss)?;
        for (acc, &v) in sum.iter_mut().zip(p.vars()) {
            if let Some(g) = grads.get(v) {
                for (a, &g) in acc.iter_mut().zip(g) {
                    *a = *a + g;
                }
            }
        }
    }
    let k = T::lit(1.0 / batch.len() as f64);
    for g in sum.iter_mut().flatten() {
        *g = *g * k;
    }
    Ok((loss / batch.len() as f64, sum))
}

/// Trains `model` in place on examples drawn from `task`.
///
/// The hook runs after every update; it returns `false` to stop early.
/// Batches come from the data stream of `seed`, dropout masks from its
/// dropout stream, so a run is fully determined by the seed, the initial
/// model and the configs. A non-finite loss or gradient aborts with
/// [`Error::Diverged`].
pub fn train<T: Real>(
    model: &mut Seq2Seq<T>,
    task: &SyntheticTask,
    config: &TrainConfig,
    seed: u64,
    mut hook: impl FnMut(&TrainEvent, &Seq2Seq<T>) -> Result<bool>,
) -> Result<TrainReport> {
    config.validate()?;
    if task.config.feat_dim != model.config.feat_dim {
        return Err(Error::InvalidArgument(format!(
            "task emits {} features but the model predicts {}",
            task.config.feat_dim, model.config.feat_dim
        )));
    }
    if task.vocab() > model.config.vocab {
        return Err(Error::InvalidArgument(format!(
            "task vocabulary {} exceeds model vocabulary {}",
            task.vocab(),
            model.config.vocab
        )));
    }
    let mut data_rng = stream(seed, STREAM_DATA);
    let mut drop_rng = stream(seed, STREAM_DROPOUT);
    let mut adam = Adam::new(&model.store, config.beta1, config.beta2, config.epsilon);
    let mut report = TrainReport::default();
    for step in 0..config.steps {
        let batch: Vec<_> = (0..config.batch_size).map(|_| task.sample(&mut data_rng)).collect();
        let dropout = (!config.no_dropout).then_some(&mut drop_rng);
        let (loss, mut grads) = batch_gradients(model, &batch, dropout).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged {
                step,
                reason: format!("non-finite {what}"),
            },
            other => other,
        })?;
        let grad_norm = clip_global_norm(&mut grads, config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite gradient norm".into(),
            });
        }
        adam.step(&mut model.store, &grads, lr_at(config, step));
        if model.store.tensors().iter().any(|t: &Tensor<T>| !t.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: "non-finite parameters after update".into(),
            });
        }
        report.losses.push(loss);
        report.grad_norms.push(grad_norm);
        let event = TrainEvent {
            step: step + 1,
            loss,
            grad_norm,
        };
        if !hook(&event, model)? {
            return Ok(report);
        }
    }
    report.completed = true;
    Ok(report)
}
