//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! include common.cfg          path relative to this file
//! mechanisms = DCA, GMMv2b, LSA
//! steps = 2000
//! task.max_len = 12
//! ```
//!
//! Later assignments override earlier ones, including those pulled in by
//! `include`. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mechanism, ModelConfig, TaskConfig, TrainConfig};

const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            other => Err(Error::InvalidArgument(format!("precision must be 32 or 64, got `{other}`"))),
        }
    }
}

/// Everything a trial batch or length sweep needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub mechanisms: Vec<Mechanism>,
    /// Runs per mechanism; run `k` uses seed `seed + k`.
    pub seeds: usize,
    pub seed: u64,
    pub steps: usize,
    pub eval_interval: usize,
    /// Held-out examples scored at every evaluation.
    pub holdout: usize,
    pub holdout_seed: u64,
    /// Worker threads for independent runs.
    pub parallelism: usize,
    pub precision: Precision,
    pub out_dir: Option<PathBuf>,
    /// Generation continues this many steps after the peak reaches the end.
    pub tail_steps: usize,
    /// Generation budget as a multiple of the teacher-forced step count.
    pub max_steps_factor: f64,
    pub task: TaskConfig,
    /// Template; mechanism and vocabulary are filled in per run.
    pub model: ModelConfig,
    /// `steps` above takes precedence over `train.steps`.
    pub train: TrainConfig,
    /// Test lengths as multiples of the longest training input.
    pub sweep_multipliers: Vec<f64>,
    pub sweep_samples: usize,
    pub sweep_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let task = TaskConfig::default();
        BenchConfig {
            mechanisms: Mechanism::ALL.to_vec(),
            seeds: 10,
            seed: 1,
            steps: 2000,
            eval_interval: 50,
            holdout: 8,
            holdout_seed: 9001,
            parallelism: 1,
            precision: Precision::F32,
            out_dir: None,
            tail_steps: 2,
            max_steps_factor: 3.0,
            model: ModelConfig {
                feat_dim: task.feat_dim,
                ..ModelConfig::desk(Mechanism::Dca, task.symbols)
            },
            task,
            train: TrainConfig::default(),
            sweep_multipliers: vec![1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 10.0],
            sweep_samples: 4,
            sweep_seed: 4242,
        }
    }
}

/// A parsed file: resolved text (includes expanded) and assignments in order.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    pub text: String,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    /// `file:line`
    pub origin: String,
}

pub fn parse_config_file(path: &Path) -> Result<RawConfig> {
    let mut raw = RawConfig::default();
    let mut stack = Vec::new();
    read_into(path, &mut raw, &mut stack)?;
    Ok(raw)
}

/// Parses text that has no file of its own; includes resolve against `base`.
pub fn parse_config_str(text: &str, base: &Path) -> Result<RawConfig> {
    let mut raw = RawConfig::default();
    let mut stack = Vec::new();
    parse_lines(text, "<input>", base, &mut raw, &mut stack)?;
    Ok(raw)
}

fn read_into(path: &Path, raw: &mut RawConfig, stack: &mut Vec<PathBuf>) -> Result<()> {
    let canonical = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
    if stack.contains(&canonical) {
        return Err(Error::Config {
            location: path.display().to_string(),
            message: "include cycle".into(),
        });
    }
    if stack.len() >= MAX_INCLUDE_DEPTH {
        return Err(Error::Config {
            location: path.display().to_string(),
            message: "includes nested too deeply".into(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    stack.push(canonical);
    parse_lines(&text, &path.display().to_string(), &base, raw, stack)?;
    stack.pop();
    Ok(())
}

fn parse_lines(
    text: &str,
    name: &str,
    base: &Path,
    raw: &mut RawConfig,
    stack: &mut Vec<PathBuf>,
) -> Result<()> {
    for (i, line) in text.lines().enumerate() {
        let origin = format!("{name}:{}", i + 1);
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix("include") {
            if rest.starts_with(char::is_whitespace) {
                let target = base.join(rest.trim());
                raw.text.push_str(&format!("# begin include {}\n", rest.trim()));
                read_into(&target, raw, stack).map_err(|e| match e {
                    Error::Io { path, source } => Error::Config {
                        location: origin.clone(),
                        message: format!("cannot include {}: {source}", path.display()),
                    },
                    other => other,
                })?;
                raw.text.push_str(&format!("# end include {}\n", rest.trim()));
                continue;
            }
        }
        raw.text.push_str(line);
        raw.text.push('\n');
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::Config {
                location: origin,
                message: format!("expected `key = value`, got `{trimmed}`"),
            });
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config {
                location: origin,
                message: "empty key".into(),
            });
        }
        raw.entries.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            origin,
        });
    }
    Ok(())
}

fn parse<V: FromStr>(e: &Entry) -> Result<V> {
    e.value.parse().map_err(|_| Error::Config {
        location: e.origin.clone(),
        message: format!("bad value `{}` for `{}`", e.value, e.key),
    })
}

fn parse_list<V: FromStr>(e: &Entry) -> Result<Vec<V>> {
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| Error::Config {
                location: e.origin.clone(),
                message: format!("bad list item `{s}` for `{}`", e.key),
            })
        })
        .collect()
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = parse_config_file(path)?;
        let mut c = BenchConfig::default();
        c.apply(&raw)?;
        Ok(c)
    }

    /// Applies assignments on top of the current values.
    pub fn apply(&mut self, raw: &RawConfig) -> Result<()> {
        for e in &raw.entries {
            self.set(e)?;
        }
        self.validate()
    }

    fn set(&mut self, e: &Entry) -> Result<()> {
        let (t, m, tr) = (&mut self.task, &mut self.model, &mut self.train);
        match e.key.as_str() {
            "mechanisms" => {
                self.mechanisms = e
                    .value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<Mechanism>().map_err(|_| Error::Config {
                            location: e.origin.clone(),
                            message: format!("unknown mechanism `{s}`"),
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "seeds" => self.seeds = parse(e)?,
            "seed" => self.seed = parse(e)?,
            "steps" => self.steps = parse(e)?,
            "eval_interval" => self.eval_interval = parse(e)?,
            "holdout" => self.holdout = parse(e)?,
            "holdout_seed" => self.holdout_seed = parse(e)?,
            "parallelism" => self.parallelism = parse(e)?,
            "precision" => self.precision = parse(e)?,
            "out_dir" => self.out_dir = Some(PathBuf::from(&e.value)),
            "tail_steps" => self.tail_steps = parse(e)?,
            "max_steps_factor" => self.max_steps_factor = parse(e)?,
            "task.symbols" => t.symbols = parse(e)?,
            "task.feat_dim" => t.feat_dim = parse(e)?,
            "task.min_frames" => t.min_frames = parse(e)?,
            "task.max_frames" => t.max_frames = parse(e)?,
            "task.duration_jitter" => t.duration_jitter = parse(e)?,
            "task.noise_std" => t.noise_std = parse(e)?,
            "task.pause_prob" => t.pause_prob = parse(e)?,
            "task.min_len" => t.min_len = parse(e)?,
            "task.max_len" => t.max_len = parse(e)?,
            "task.seed" => t.seed = parse(e)?,
            "model.embed_dim" => m.embed_dim = parse(e)?,
            "model.enc_dim" => m.enc_dim = parse(e)?,
            "model.att_dim" => m.att_dim = parse(e)?,
            "model.dec_dim" => m.dec_dim = parse(e)?,
            "model.prenet_dim" => m.prenet_dim = parse(e)?,
            "model.prenet_dropout" => m.prenet_dropout = parse(e)?,
            "model.frames_per_step" => m.frames_per_step = parse(e)?,
            "model.attention_hidden" => m.attention_hidden = parse(e)?,
            "model.gmm_components" => m.gmm_components = parse(e)?,
            "model.prior_alpha" => m.prior_alpha = parse(e)?,
            "model.prior_beta" => m.prior_beta = parse(e)?,
            "model.prior_support" => m.prior_support = parse(e)?,
            "train.batch_size" => tr.batch_size = parse(e)?,
            "train.learning_rate" => tr.learning_rate = parse(e)?,
            "train.final_learning_rate" => tr.final_learning_rate = parse(e)?,
            "train.lr_drop_at" => tr.lr_drop_at = parse(e)?,
            "train.clip_norm" => tr.clip_norm = parse(e)?,
            "train.no_dropout" => tr.no_dropout = parse(e)?,
            "sweep.multipliers" => self.sweep_multipliers = parse_list(e)?,
            "sweep.samples" => self.sweep_samples = parse(e)?,
            "sweep.seed" => self.sweep_seed = parse(e)?,
            other => {
                return Err(Error::Config {
                    location: e.origin.clone(),
                    message: format!("unknown key `{other}`"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.mechanisms.is_empty() {
            return bad("at least one mechanism is required".into());
        }
        if self.seeds == 0 {
            return bad("seeds must be at least 1".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.holdout == 0 {
            return bad("holdout must be at least 1".into());
        }
        if !(self.max_steps_factor >= 1.0) {
            return bad(format!("max_steps_factor must be at least 1, got {}", self.max_steps_factor));
        }
        if self.sweep_multipliers.iter().any(|&k| !(k > 0.0)) {
            return bad("sweep multipliers must be positive".into());
        }
        self.train_config().validate()?;
        self.model_for(self.mechanisms[0]).validate()
    }

    /// Model config for one mechanism, sized to the task.
    pub fn model_for(&self, mechanism: Mechanism) -> ModelConfig {
        ModelConfig {
            mechanism,
            vocab: self.task.symbols + usize::from(self.task.pause_prob > 0.0),
            feat_dim: self.task.feat_dim,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            eval_interval: self.eval_interval,
            ..self.train.clone()
        }
    }

    /// Test lengths of the sweep, in input symbols.
    pub fn sweep_lengths(&self) -> Vec<usize> {
        let base = self.task.max_len as f64;
        let mut out: Vec<usize> = self
            .sweep_multipliers
            .iter()
            .map(|k| ((k * base).round() as usize).max(1))
            .collect();
        out.dedup();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments_and_overrides() {
        let raw = parse_config_str(
            "# trial\nmechanisms = DCA, gmmv2b\nsteps = 10\nsteps = 20\ntask.max_len = 6\nsweep.multipliers = 1, 2.5\n",
            Path::new("."),
        )
        .unwrap();
        let mut c = BenchConfig::default();
        c.apply(&raw).unwrap();
        assert_eq!(c.mechanisms, vec![Mechanism::Dca, "GMMv2b".parse().unwrap()]);
        assert_eq!(c.steps, 20);
        assert_eq!(c.sweep_lengths(), vec![6, 15]);
        assert!(raw.text.starts_with("# trial\n"));
    }

    #[test]
    fn errors_carry_locations() {
        for (text, needle) in [
            ("steps = ten\n", "<input>:1"),
            ("\nbogus = 1\n", "<input>:2"),
            ("mechanisms = DCA, XYZ\n", "XYZ"),
            ("no equals sign\n", "<input>:1"),
        ] {
            let raw = parse_config_str(text, Path::new("."));
            let err = raw.and_then(|r| BenchConfig::default().apply(&r)).unwrap_err();
            assert!(err.to_string().contains(needle), "{err}");
        }
    }

    #[test]
    fn includes_resolve_relative_and_detect_cycles() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/base.cfg"), "steps = 5\nseeds = 3\n").unwrap();
        fs::write(dir.path().join("main.cfg"), "include sub/base.cfg\nseeds = 2\n").unwrap();
        let c = BenchConfig::load(&dir.path().join("main.cfg")).unwrap();
        assert_eq!((c.steps, c.seeds), (5, 2));
        fs::write(dir.path().join("a.cfg"), "include b.cfg\n").unwrap();
        fs::write(dir.path().join("b.cfg"), "include a.cfg\n").unwrap();
        let err = BenchConfig::load(&dir.path().join("a.cfg")).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
        let err = BenchConfig::load(&dir.path().join("missing.cfg")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
