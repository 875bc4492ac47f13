//! Desk-scale attention encoder/decoder.
//!
//! ```text
//! H        = Encoder(x)                           embedding + bidirectional GRU
//! s_i      = GRU_att(s_{i−1}, [prenet(y_{i−1}); c_{i−1}])
//! α_i      = Attention(s_i, …)
//! c_i      = Σ_j α_ij h_j
//! d_i      = GRU_dec(d_{i−1}, [c_i; s_i])
//! y_i      = W_o d_i + b_o                        r frames per step
//! ```
//!
//! Decoding starts from zero recurrent states, a zero previous frame and
//! `α_0` one-hot at encoder position 0 (so `c_0 = h_0`). GMM means start at 0.

mod checkpoint;
mod layers;
mod task;
mod trace;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use layers::Gru;
pub use task::{Example, SyntheticTask, TaskConfig};
pub use trace::AlignmentTrace;
pub use train::{
    batch_gradients, clip_global_norm, lr_at, train, Adam, TrainConfig, TrainEvent, TrainReport, STREAM_DATA,
    STREAM_DROPOUT, STREAM_INIT,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::energy::{initial_alignment, EncoderMemory, EnergyAttention, EnergyHyper, EnergyTermConfig, FilterBank};
use crate::error::{Error, Result};
use crate::gmm::{GmmAttention, GmmConfig, GmmVariant};
use crate::numerics::{argmax, Real, Tape, Tensor, Var};
use crate::params::{Bound, Linear, ParamId, ParamStore, SeedRng};
use crate::prior::beta_binomial_taps;

/// The eight attention configurations compared by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    Cba,
    Lsa,
    Dca,
    Gmm(GmmVariant),
}

impl Mechanism {
    pub const ALL: [Mechanism; 8] = [
        Mechanism::Cba,
        Mechanism::Lsa,
        Mechanism::Dca,
        Mechanism::Gmm(GmmVariant::V0),
        Mechanism::Gmm(GmmVariant::V1),
        Mechanism::Gmm(GmmVariant::V1B),
        Mechanism::Gmm(GmmVariant::V2),
        Mechanism::Gmm(GmmVariant::V2B),
    ];

    pub fn name(self) -> String {
        self.to_string()
    }

    /// True for mechanisms whose alignment depends only on location.
    pub fn is_location_relative(self) -> bool {
        !matches!(self, Mechanism::Cba | Mechanism::Lsa)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mechanism::Cba => f.write_str("CBA"),
            Mechanism::Lsa => f.write_str("LSA"),
            Mechanism::Dca => f.write_str("DCA"),
            Mechanism::Gmm(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Mechanism::ALL
            .into_iter()
            .find(|m| m.to_string().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::UnknownMechanism(s.trim().to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mechanism: Mechanism,
    pub vocab: usize,
    pub embed_dim: usize,
    /// Encoder output width (split evenly between the two directions).
    pub enc_dim: usize,
    pub att_dim: usize,
    pub dec_dim: usize,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub feat_dim: usize,
    /// Output frames per decoder step.
    pub frames_per_step: usize,
    /// Width of the attention tanh layers (energy MLP, GMM MLP, filter generator).
    pub attention_hidden: usize,
    pub gmm_components: usize,
    pub lsa_filters: FilterBank,
    pub dca_static_filters: FilterBank,
    pub dca_dynamic_filters: FilterBank,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    pub prior_support: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 32-wide encoder/attention/decoder, 8 features,
    /// two frames per step.
    pub fn desk(mechanism: Mechanism, vocab: usize) -> Self {
        let lsa = EnergyHyper::location_sensitive();
        let dca = EnergyHyper::dynamic_convolution();
        ModelConfig {
            mechanism,
            vocab,
            embed_dim: 32,
            enc_dim: 32,
            att_dim: 32,
            dec_dim: 32,
            prenet_dim: 32,
            prenet_dropout: 0.5,
            feat_dim: 8,
            frames_per_step: 2,
            attention_hidden: 128,
            gmm_components: 5,
            lsa_filters: lsa.static_filters,
            dca_static_filters: dca.static_filters,
            dca_dynamic_filters: dca.dynamic_filters,
            prior_alpha: crate::prior::DEFAULT_ALPHA,
            prior_beta: crate::prior::DEFAULT_BETA,
            prior_support: crate::prior::DEFAULT_SUPPORT,
        }
    }

    /// Very small dimensions for finite-difference checks.
    pub fn tiny(mechanism: Mechanism, vocab: usize) -> Self {
        ModelConfig {
            embed_dim: 3,
            enc_dim: 4,
            att_dim: 3,
            dec_dim: 3,
            prenet_dim: 3,
            prenet_dropout: 0.0,
            feat_dim: 2,
            frames_per_step: 2,
            attention_hidden: 4,
            gmm_components: 2,
            lsa_filters: FilterBank { count: 2, len: 3 },
            dca_static_filters: FilterBank { count: 2, len: 3 },
            dca_dynamic_filters: FilterBank { count: 2, len: 3 },
            ..ModelConfig::desk(mechanism, vocab)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.frames_per_step == 0 {
            return bad("frames per step must be at least 1");
        }
        if self.enc_dim < 2 || self.enc_dim % 2 != 0 {
            return bad("encoder width must be even and at least 2");
        }
        if [self.vocab, self.embed_dim, self.att_dim, self.dec_dim, self.prenet_dim, self.feat_dim]
            .contains(&0)
        {
            return bad("model dimensions must be nonzero");
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return bad("prenet dropout must be in [0, 1)");
        }
        Ok(())
    }

    fn energy_setup(&self) -> Option<(EnergyTermConfig, EnergyHyper)> {
        let h = self.attention_hidden;
        let none = FilterBank { count: 0, len: 1 };
        match self.mechanism {
            Mechanism::Cba => Some((
                EnergyTermConfig::CONTENT,
                EnergyHyper {
                    hidden: h,
                    static_filters: none,
                    dynamic_filters: none,
                    generator_hidden: h,
                },
            )),
            Mechanism::Lsa => Some((
                EnergyTermConfig::LOCATION_SENSITIVE,
                EnergyHyper {
                    hidden: h,
                    static_filters: self.lsa_filters,
                    dynamic_filters: none,
                    generator_hidden: h,
                },
            )),
            Mechanism::Dca => Some((
                EnergyTermConfig::DYNAMIC_CONVOLUTION,
                EnergyHyper {
                    hidden: h,
                    static_filters: self.dca_static_filters,
                    dynamic_filters: self.dca_dynamic_filters,
                    generator_hidden: h,
                },
            )),
            Mechanism::Gmm(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Attention {
    Energy(EnergyAttention),
    Gmm(GmmAttention),
}

/// Attention-specific recurrent state.
#[derive(Clone, Copy, Debug)]
pub enum AttnState {
    /// Previous alignment `α_{i−1}` (energy family).
    Alignment(Var),
    /// Component means `μ_{i−1}` (GMM family).
    Means(Var),
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub s: Var,
    pub d: Var,
    pub context: Var,
    pub attn: AttnState,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub alpha: Var,
    pub context: Var,
    /// `frames_per_step × feat_dim` values.
    pub output: Var,
    pub state: DecoderState,
}

/// Free-running output.
#[derive(Clone, Debug)]
pub struct Generation {
    pub frames: Vec<Vec<f64>>,
    pub trace: AlignmentTrace,
}

/// Teacher-forced loss plus the alignments produced along the way.
pub struct ForwardPass {
    pub loss: Var,
    pub alphas: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    embedding: ParamId,
    enc_fwd: Gru,
    enc_bwd: Gru,
    prenet: Linear,
    att_rnn: Gru,
    pub attention: Attention,
    dec_rnn: Gru,
    out: Linear,
}

impl<T: Real> Seq2Seq<T> {
    pub fn new(config: ModelConfig, rng: &mut SeedRng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = &config;
        let embedding = store.add(
            "encoder.embedding",
            Tensor::from_fn(&[c.vocab, c.embed_dim], |_| T::lit(rng.random_range(-0.5..0.5))),
        );
        let half = c.enc_dim / 2;
        let enc_fwd = Gru::new(&mut store, "encoder.forward", c.embed_dim, half, rng);
        let enc_bwd = Gru::new(&mut store, "encoder.backward", c.embed_dim, half, rng);
        let prenet = Linear::new(&mut store, "decoder.prenet", c.feat_dim, c.prenet_dim, true, rng);
        let att_rnn = Gru::new(&mut store, "decoder.attention_rnn", c.prenet_dim + c.enc_dim, c.att_dim, rng);
        let attention = match c.energy_setup() {
            Some((terms, hyper)) => {
                let prior = if terms.use_prior {
                    Some(beta_binomial_taps(c.prior_alpha, c.prior_beta, c.prior_support)?)
                } else {
                    None
                };
                Attention::Energy(EnergyAttention::new(
                    &mut store,
                    "attention",
                    c.att_dim,
                    c.enc_dim,
                    terms,
                    hyper,
                    prior,
                    rng,
                )?)
            }
            None => {
                let Mechanism::Gmm(variant) = c.mechanism else {
                    unreachable!("energy_setup covers every energy mechanism")
                };
                Attention::Gmm(GmmAttention::new(
                    &mut store,
                    "attention",
                    c.att_dim,
                    GmmConfig {
                        variant,
                        components: c.gmm_components,
                        hidden: c.attention_hidden,
                    },
                    rng,
                )?)
            }
        };
        let dec_rnn = Gru::new(&mut store, "decoder.decoder_rnn", c.enc_dim + c.att_dim, c.dec_dim, rng);
        let out = Linear::new(
            &mut store,
            "decoder.output",
            c.dec_dim,
            c.frames_per_step * c.feat_dim,
            true,
            rng,
        );
        Ok(Seq2Seq {
            config,
            store,
            embedding,
            enc_fwd,
            enc_bwd,
            prenet,
            att_rnn,
            attention,
            dec_rnn,
            out,
        })
    }

    pub fn mechanism(&self) -> Mechanism {
        self.config.mechanism
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.store.bind(tape)
    }

    /// Encoder outputs `[L, enc_dim]`.
    pub fn encode(&self, tape: &mut Tape<T>, p: &Bound, symbols: &[usize]) -> Result<Var> {
        if symbols.is_empty() {
            return Err(Error::Empty("encoder input"));
        }
        if let Some(&bad) = symbols.iter().find(|&&s| s >= self.config.vocab) {
            return Err(Error::UnknownSymbol {
                symbol: bad,
                vocab: self.config.vocab,
            });
        }
        let half = self.config.enc_dim / 2;
        let embedded = symbols
            .iter()
            .map(|&s| tape.gather_row(p[self.embedding], s))
            .collect::<Result<Vec<_>>>()?;
        let zero = tape.constant(Tensor::zeros(&[half]));
        let mut fwd = Vec::with_capacity(symbols.len());
        let mut h = zero;
        for &x in &embedded {
            h = self.enc_fwd.step(tape, p, x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; symbols.len()];
        let mut h = zero;
        for (i, &x) in embedded.iter().enumerate().rev() {
            h = self.enc_bwd.step(tape, p, x, h)?;
            bwd[i] = h;
        }
        let rows = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| tape.concat(&[f, b]))
            .collect::<Result<Vec<_>>>()?;
        tape.stack_rows(&rows)
    }

    pub fn prepare(&self, tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<EncoderMemory> {
        match &self.attention {
            Attention::Energy(a) => a.prepare(tape, p, h),
            Attention::Gmm(_) => {
                let len = tape.shape(h)[0];
                Ok(EncoderMemory { h, keys: None, len })
            }
        }
    }

    pub fn initial_state(&self, tape: &mut Tape<T>, memory: &EncoderMemory) -> Result<DecoderState> {
        let c = &self.config;
        let s = tape.constant(Tensor::zeros(&[c.att_dim]));
        let d = tape.constant(Tensor::zeros(&[c.dec_dim]));
        let alpha0 = tape.constant(Tensor::vector(initial_alignment(memory.len)));
        let context = tape.weighted_rows(alpha0, memory.h)?;
        let attn = match &self.attention {
            Attention::Energy(_) => AttnState::Alignment(alpha0),
            Attention::Gmm(g) => AttnState::Means(tape.constant(Tensor::zeros(&[g.components()]))),
        };
        Ok(DecoderState { s, d, context, attn })
    }

    /// One decoder step. `prev_frame` is the last frame of the previous
    /// output (zeros at the first step). When `dropout` is given, the prenet
    /// output is dropped with the configured probability.
    pub fn decode_step(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        memory: &EncoderMemory,
        state: &DecoderState,
        prev_frame: Var,
        dropout: Option<&mut SeedRng>,
    ) -> Result<StepOutput> {
        let c = &self.config;
        if tape.value(prev_frame).numel() != c.feat_dim
            || tape.value(state.s).numel() != c.att_dim
            || tape.value(state.d).numel() != c.dec_dim
            || tape.value(state.context).numel() != c.enc_dim
        {
            return Err(Error::shape("decode_step", "decoder state does not match the model"));
        }
        let pre = self.prenet.forward(tape, p, prev_frame)?;
        let mut pre = tape.relu(pre);
        if let (Some(rng), true) = (dropout, c.prenet_dropout > 0.0) {
            let keep = 1.0 - c.prenet_dropout;
            let mask = Tensor::from_fn(&[c.prenet_dim], |_| {
                if rng.random_bool(keep) {
                    T::lit(1.0 / keep)
                } else {
                    T::zero()
                }
            });
            let mask = tape.constant(mask);
            pre = tape.mul(pre, mask)?;
        }
        let x = tape.concat(&[pre, state.context])?;
        let s = self.att_rnn.step(tape, p, x, state.s)?;
        let (alpha, attn) = match (&self.attention, state.attn) {
            (Attention::Energy(a), AttnState::Alignment(prev)) => {
                let alpha = a.attend(tape, p, s, memory, prev)?;
                (alpha, AttnState::Alignment(alpha))
            }
            (Attention::Gmm(g), AttnState::Means(mu_prev)) => {
                let (alpha, mu, _) = g.step(tape, p, s, mu_prev, memory.len)?;
                (alpha, AttnState::Means(mu))
            }
            _ => return Err(Error::shape("decode_step", "attention state does not match mechanism")),
        };
        let context = tape.weighted_rows(alpha, memory.h)?;
        let dec_in = tape.concat(&[context, s])?;
        let d = self.dec_rnn.step(tape, p, dec_in, state.d)?;
        let output = self.out.forward(tape, p, d)?;
        Ok(StepOutput {
            alpha,
            context,
            output,
            state: DecoderState { s, d, context, attn },
        })
    }

    /// Number of decoder steps needed to emit `frames` frames.
    pub fn steps_for(&self, frames: usize) -> usize {
        frames.div_ceil(self.config.frames_per_step)
    }

    /// Teacher-forced mean squared error over the example's frames.
    pub fn forward_loss(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        example: &Example,
        mut dropout: Option<&mut SeedRng>,
    ) -> Result<ForwardPass> {
        let c = &self.config;
        let n = example.frames.len();
        if n == 0 {
            return Err(Error::Empty("target frames"));
        }
        if example.frames.iter().any(|f| f.len() != c.feat_dim) {
            return Err(Error::shape("forward_loss", "frame width differs from the model"));
        }
        let r = c.frames_per_step;
        let h = self.encode(tape, p, &example.symbols)?;
        let memory = self.prepare(tape, p, h)?;
        let mut state = self.initial_state(tape, &memory)?;
        let steps = self.steps_for(n);
        let mut sq_terms = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        for i in 0..steps {
            let prev = if i == 0 {
                vec![T::zero(); c.feat_dim]
            } else {
                example.frames[i * r - 1].iter().map(|&v| T::lit(v)).collect()
            };
            let prev = tape.constant(Tensor::vector(prev));
            let out = self.decode_step(tape, p, &memory, &state, prev, dropout.as_deref_mut())?;
            let mut target = Vec::with_capacity(r * c.feat_dim);
            let mut mask = Vec::with_capacity(r * c.feat_dim);
            for k in 0..r {
                let idx = i * r + k;
                let valid = idx < n;
                for d in 0..c.feat_dim {
                    target.push(if valid { T::lit(example.frames[idx][d]) } else { T::zero() });
                    mask.push(if valid { T::one() } else { T::zero() });
                }
            }
            let target = tape.constant(Tensor::vector(target));
            let mut diff = tape.sub(out.output, target)?;
            if i * r + r > n {
                let mask = tape.constant(Tensor::vector(mask));
                diff = tape.mul(diff, mask)?;
            }
            sq_terms.push(tape.dot(diff, diff)?);
            alphas.push(out.alpha);
            state = out.state;
        }
        let all = tape.concat(&sq_terms)?;
        let total = tape.sum(all);
        let loss = tape.scale(total, T::lit(1.0 / (n * c.feat_dim) as f64));
        Ok(ForwardPass { loss, alphas })
    }

    /// Free-running generation. Stops `tail_steps` steps after the alignment
    /// peak first reaches the last encoder position, or after `max_steps`.
    pub fn generate(&self, symbols: &[usize], max_steps: usize, tail_steps: usize) -> Result<Generation> {
        if max_steps == 0 {
            return Err(Error::InvalidArgument("generation needs at least one step".into()));
        }
        let c = &self.config;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let h = self.encode(&mut tape, &p, symbols)?;
        let memory = self.prepare(&mut tape, &p, h)?;
        let base = tape.len();
        let init = self.initial_state(&mut tape, &memory)?;
        let mut s = tape.value(init.s).clone();
        let mut d = tape.value(init.d).clone();
        let mut context = tape.value(init.context).clone();
        let mut attn = match init.attn {
            AttnState::Alignment(v) | AttnState::Means(v) => tape.value(v).clone(),
        };
        let mut prev = Tensor::zeros(&[c.feat_dim]);
        let len = memory.len;
        let mut frames = Vec::new();
        let mut alignments = Vec::new();
        let mut end_seen: Option<usize> = None;
        for step in 0..max_steps {
            tape.truncate(base);
            let state = DecoderState {
                s: tape.constant(s),
                d: tape.constant(d),
                context: tape.constant(context),
                attn: match &self.attention {
                    Attention::Energy(_) => AttnState::Alignment(tape.constant(attn)),
                    Attention::Gmm(_) => AttnState::Means(tape.constant(attn)),
                },
            };
            let prev_var = tape.constant(prev);
            let out = self.decode_step(&mut tape, &p, &memory, &state, prev_var, None)?;
            let alpha: Vec<f64> = tape.data(out.alpha).iter().map(|v| v.to_f64_lossy()).collect();
            if alpha.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("generated alignment"));
            }
            let y = tape.data(out.output);
            for k in 0..c.frames_per_step {
                frames.push(
                    y[k * c.feat_dim..(k + 1) * c.feat_dim]
                        .iter()
                        .map(|v| v.to_f64_lossy())
                        .collect::<Vec<f64>>(),
                );
            }
            let last = c.frames_per_step - 1;
            prev = Tensor::vector(y[last * c.feat_dim..].to_vec());
            s = tape.value(out.state.s).clone();
            d = tape.value(out.state.d).clone();
            context = tape.value(out.state.context).clone();
            attn = match out.state.attn {
                AttnState::Alignment(v) | AttnState::Means(v) => tape.value(v).clone(),
            };
            let peak = argmax(&alpha);
            alignments.push(alpha);
            if end_seen.is_none() && peak + 1 >= len {
                end_seen = Some(step);
            }
            if let Some(at) = end_seen {
                if step >= at + tail_steps {
                    break;
                }
            }
        }
        let trace = AlignmentTrace::new(alignments, len, end_seen.is_some());
        Ok(Generation { frames, trace })
    }
}

/// Deterministic sub-stream for a run: `purpose` separates initialization,
/// data and dropout streams derived from the same seed.
pub fn stream(seed: u64, purpose: u64) -> SeedRng {
    let mut rng = SeedRng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mech: Mechanism) -> Seq2Seq<f64> {
        Seq2Seq::new(ModelConfig::tiny(mech, 5), &mut stream(1, 0)).unwrap()
    }

    #[test]
    fn mechanism_names_roundtrip() {
        for m in Mechanism::ALL {
            assert_eq!(m.name().parse::<Mechanism>().unwrap(), m);
        }
        assert_eq!("gmmv2b".parse::<Mechanism>().unwrap(), Mechanism::Gmm(GmmVariant::V2B));
        assert!(matches!("GMMv0b".parse::<Mechanism>(), Err(Error::UnknownMechanism(_))));
    }

    #[test]
    fn encoder_shape_and_determinism() {
        let m = tiny(Mechanism::Dca);
        let run = || {
            let mut tape = Tape::new();
            let p = m.bind(&mut tape);
            let h = m.encode(&mut tape, &p, &[0, 3, 1, 4, 2]).unwrap();
            tape.value(h).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[5, 4]);
        assert_eq!(a, run());
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        assert!(matches!(m.encode(&mut tape, &p, &[0, 7]), Err(Error::UnknownSymbol { .. })));
        assert!(m.encode(&mut tape, &p, &[]).is_err());
    }

    #[test]
    fn context_is_weighted_sum_of_encoder_rows() {
        let m = tiny(Mechanism::Lsa);
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        let h = m.encode(&mut tape, &p, &[1, 2, 3, 0]).unwrap();
        let hv = tape.value(h).clone();
        for (alpha, want) in [
            (vec![0.0, 0.0, 1.0, 0.0], hv.row(2).to_vec()),
            (
                vec![0.25; 4],
                (0..4).map(|c| (0..4).map(|j| hv.row(j)[c]).sum::<f64>() / 4.0).collect(),
            ),
        ] {
            let a = tape.constant(Tensor::vector(alpha));
            let c = tape.weighted_rows(a, h).unwrap();
            for (x, y) in tape.data(c).iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_output_width() {
        for mech in Mechanism::ALL {
            let m = tiny(mech);
            let mut tape = Tape::new();
            let p = m.bind(&mut tape);
            let h = m.encode(&mut tape, &p, &[1, 2, 3]).unwrap();
            let mem = m.prepare(&mut tape, &p, h).unwrap();
            let st = m.initial_state(&mut tape, &mem).unwrap();
            let prev = tape.constant(Tensor::zeros(&[2]));
            let out = m.decode_step(&mut tape, &p, &mem, &st, prev, None).unwrap();
            assert_eq!(tape.value(out.output).numel(), 4);
            assert_eq!(tape.value(out.alpha).numel(), 3);
            let bad = tape.constant(Tensor::zeros(&[3]));
            assert!(m.decode_step(&mut tape, &p, &mem, &st, bad, None).is_err());
        }
    }

    #[test]
    fn generate_records_trace() {
        let m = tiny(Mechanism::Dca);
        let g = m.generate(&[0, 1, 2, 3], 12, 1).unwrap();
        assert!(!g.trace.alignments.is_empty());
        assert_eq!(g.frames.len(), 2 * g.trace.alignments.len());
        assert!(m.generate(&[0, 1], 0, 1).is_err());
        assert!(m.generate(&[], 5, 1).is_err());
    }
}
