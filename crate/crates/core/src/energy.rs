//! Additive energy-based attention.
//!
//! ```text
//! e_ij = vᵀ tanh(W s_i + V h_j + U f_ij + T g_ij + b) + p_ij
//! α_i  = softmax(e_i)
//! f_i  = F ∗ α_{i−1}                 (static filters, centered)
//! g_i  = G(s_i) ∗ α_{i−1}            G(s) = V_G tanh(W_G s + b_G)
//! p_i  = max(log(P ∗ α_{i−1}), −1e6) (causal prior filter)
//! ```
//!
//! Which terms are present is controlled by [`EnergyTermConfig`]:
//! content-based attention uses the query and key terms, location-sensitive
//! attention adds static filters, and dynamic convolution attention drops
//! the content terms in favor of static, dynamic and prior terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ConvMode, Real, Tape, Tensor, Var};
use crate::params::{Bound, Linear, ParamId, ParamStore, SeedRng};
use crate::prior::{PriorFilter, PRIOR_LOGIT_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnergyTermConfig {
    /// `W s_i`
    pub use_query: bool,
    /// `V h_j`
    pub use_key: bool,
    /// `U f_ij`
    pub use_static: bool,
    /// `T g_ij`
    pub use_dynamic: bool,
    /// `p_ij`
    pub use_prior: bool,
}

impl EnergyTermConfig {
    pub const CONTENT: EnergyTermConfig = EnergyTermConfig {
        use_query: true,
        use_key: true,
        use_static: false,
        use_dynamic: false,
        use_prior: false,
    };
    pub const LOCATION_SENSITIVE: EnergyTermConfig = EnergyTermConfig {
        use_query: true,
        use_key: true,
        use_static: true,
        use_dynamic: false,
        use_prior: false,
    };
    pub const DYNAMIC_CONVOLUTION: EnergyTermConfig = EnergyTermConfig {
        use_query: false,
        use_key: false,
        use_static: true,
        use_dynamic: true,
        use_prior: true,
    };
    pub const NONE: EnergyTermConfig = EnergyTermConfig {
        use_query: false,
        use_key: false,
        use_static: false,
        use_dynamic: false,
        use_prior: false,
    };

    /// True when every term enabled here is also enabled in `other`.
    pub fn is_subset_of(self, other: EnergyTermConfig) -> bool {
        (!self.use_query || other.use_query)
            && (!self.use_key || other.use_key)
            && (!self.use_static || other.use_static)
            && (!self.use_dynamic || other.use_dynamic)
            && (!self.use_prior || other.use_prior)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub count: usize,
    pub len: usize,
}

/// Sizes for an energy mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyHyper {
    /// Width of the tanh energy layer.
    pub hidden: usize,
    pub static_filters: FilterBank,
    pub dynamic_filters: FilterBank,
    /// Hidden width of the dynamic-filter generator.
    pub generator_hidden: usize,
}

impl EnergyHyper {
    /// 32 static filters of length 31.
    pub fn location_sensitive() -> Self {
        EnergyHyper {
            hidden: 128,
            static_filters: FilterBank { count: 32, len: 31 },
            dynamic_filters: FilterBank { count: 0, len: 1 },
            generator_hidden: 128,
        }
    }

    /// 8 static and 8 dynamic filters, all of length 21.
    pub fn dynamic_convolution() -> Self {
        EnergyHyper {
            hidden: 128,
            static_filters: FilterBank { count: 8, len: 21 },
            dynamic_filters: FilterBank { count: 8, len: 21 },
            generator_hidden: 128,
        }
    }

    pub fn content() -> Self {
        EnergyHyper {
            hidden: 128,
            static_filters: FilterBank { count: 0, len: 1 },
            dynamic_filters: FilterBank { count: 0, len: 1 },
            generator_hidden: 128,
        }
    }
}

#[derive(Clone, Debug)]
struct DynamicGenerator {
    hidden: Linear,
    out: ParamId,
}

/// Parameters of an energy mechanism. Params exist for every term in the
/// configuration it was built with; [`EnergyAttention::energies`] may be
/// called with any subset of that configuration.
#[derive(Clone, Debug)]
pub struct EnergyAttention {
    pub terms: EnergyTermConfig,
    pub hyper: EnergyHyper,
    pub prior: Option<PriorFilter>,
    query: Option<ParamId>,
    key: Option<ParamId>,
    static_filters: Option<ParamId>,
    static_proj: Option<ParamId>,
    generator: Option<DynamicGenerator>,
    dynamic_proj: Option<ParamId>,
    v: ParamId,
    b: ParamId,
}

/// Encoder outputs prepared for repeated attention steps.
#[derive(Clone, Copy, Debug)]
pub struct EncoderMemory {
    /// `[L, d]`
    pub h: Var,
    /// `V h_j` for every position, `[L, hidden]`, when the key term is used.
    pub keys: Option<Var>,
    pub len: usize,
}

impl EnergyAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        state_dim: usize,
        enc_dim: usize,
        terms: EnergyTermConfig,
        hyper: EnergyHyper,
        prior: Option<PriorFilter>,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if terms.use_prior && prior.is_none() {
            return Err(Error::InvalidArgument(
                "prior term enabled without a prior filter".into(),
            ));
        }
        let h = hyper.hidden;
        let weight = |store: &mut ParamStore<T>, rng: &mut SeedRng, name: &str, rows: usize, cols: usize| {
            let bound = 1.0 / (cols.max(1) as f64).sqrt();
            store.add_uniform(format!("{prefix}.{name}"), &[rows, cols], bound, rng)
        };
        let query = terms.use_query.then(|| weight(store, rng, "query", h, state_dim));
        let key = terms.use_key.then(|| weight(store, rng, "key", h, enc_dim));
        let (static_filters, static_proj) = if terms.use_static {
            let fb = hyper.static_filters;
            check_bank("static", fb)?;
            (
                Some(weight(store, rng, "static_filters", fb.count, fb.len)),
                Some(weight(store, rng, "static_proj", h, fb.count)),
            )
        } else {
            (None, None)
        };
        let (generator, dynamic_proj) = if terms.use_dynamic {
            let fb = hyper.dynamic_filters;
            check_bank("dynamic", fb)?;
            let hidden = Linear::new(
                store,
                &format!("{prefix}.generator_in"),
                state_dim,
                hyper.generator_hidden,
                true,
                rng,
            );
            let out = weight(store, rng, "generator_out", fb.count * fb.len, hyper.generator_hidden);
            (
                Some(DynamicGenerator { hidden, out }),
                Some(weight(store, rng, "dynamic_proj", h, fb.count)),
            )
        } else {
            (None, None)
        };
        let v = weight(store, rng, "v", 1, h);
        let b = store.add_zeros(format!("{prefix}.b"), &[h]);
        Ok(EnergyAttention {
            terms,
            hyper,
            prior,
            query,
            key,
            static_filters,
            static_proj,
            generator,
            dynamic_proj,
            v,
            b,
        })
    }

    pub fn static_proj(&self) -> Option<ParamId> {
        self.static_proj
    }

    pub fn static_filter_bank(&self) -> Option<ParamId> {
        self.static_filters
    }

    pub fn dynamic_proj(&self) -> Option<ParamId> {
        self.dynamic_proj
    }

    /// Ids of the dynamic-filter generator (`W_G`, `b_G`, `V_G`).
    pub fn generator_params(&self) -> Option<[ParamId; 3]> {
        self.generator.as_ref().map(|g| {
            [
                g.hidden.weight,
                g.hidden.bias.expect("generator has a bias"),
                g.out,
            ]
        })
    }

    pub fn query_param(&self) -> Option<ParamId> {
        self.query
    }

    pub fn key_param(&self) -> Option<ParamId> {
        self.key
    }

    pub fn energy_vector(&self) -> ParamId {
        self.v
    }

    pub fn energy_bias(&self) -> ParamId {
        self.b
    }

    /// Precomputes the key term over the encoder outputs `h: [L, d]`.
    pub fn prepare<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, h: Var) -> Result<EncoderMemory> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::shape("prepare", format!("encoder outputs {shape:?}")));
        }
        let keys = match self.key {
            Some(k) => Some(tape.matmul_t(h, p[k])?),
            None => None,
        };
        Ok(EncoderMemory {
            h,
            keys,
            len: shape[0],
        })
    }

    /// `F ∗ α_prev` for every static filter: `[L, count]`.
    pub fn static_features<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, alpha_prev: Var) -> Result<Var> {
        let f = self
            .static_filters
            .ok_or_else(|| Error::InvalidArgument("mechanism has no static filters".into()))?;
        tape.conv1d_bank(alpha_prev, p[f], ConvMode::Centered)
    }

    /// State-dependent filters `G(s)`, reshaped to `[count, len]`.
    pub fn dynamic_filters<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, s: Var) -> Result<Var> {
        let g = self
            .generator
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("mechanism has no dynamic filters".into()))?;
        let hidden = g.hidden.forward(tape, p, s)?;
        let hidden = tape.tanh(hidden);
        let flat = tape.matmul_t(hidden, p[g.out])?;
        let fb = self.hyper.dynamic_filters;
        tape.reshape(flat, &[fb.count, fb.len])
    }

    /// `G(s) ∗ α_prev`: `[L, count]`.
    pub fn dynamic_features<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        s: Var,
        alpha_prev: Var,
    ) -> Result<Var> {
        let filters = self.dynamic_filters(tape, p, s)?;
        tape.conv1d_bank(alpha_prev, filters, ConvMode::Centered)
    }

    /// Prior logits `max(log(P ∗ α_prev), floor)`: `[L]`.
    pub fn prior_term<T: Real>(&self, tape: &mut Tape<T>, alpha_prev: Var) -> Result<Var> {
        let prior = self
            .prior
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("prior term enabled without a prior filter".into()))?;
        let taps: Vec<T> = prior.taps().iter().map(|&t| T::lit(t)).collect();
        let taps = tape.constant(Tensor::matrix(1, taps.len(), taps)?);
        let smoothed = tape.conv1d_bank(alpha_prev, taps, ConvMode::Causal)?;
        let len = tape.value(alpha_prev).numel();
        let smoothed = tape.reshape(smoothed, &[len])?;
        Ok(tape.log_floor(smoothed, T::lit(PRIOR_LOGIT_FLOOR)))
    }

    /// Attention energies for one decoder step under `terms` (which must be
    /// a subset of the terms this mechanism was built with).
    pub fn energies<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        terms: EnergyTermConfig,
        s: Var,
        memory: &EncoderMemory,
        alpha_prev: Var,
    ) -> Result<Var> {
        if !terms.is_subset_of(self.terms) {
            if terms.use_prior && self.prior.is_none() {
                return Err(Error::InvalidArgument(
                    "prior term enabled without a prior filter".into(),
                ));
            }
            return Err(Error::InvalidArgument(format!(
                "terms {terms:?} not available in a mechanism built with {:?}",
                self.terms
            )));
        }
        let len = memory.len;
        if tape.value(alpha_prev).numel() != len {
            return Err(Error::shape(
                "energies",
                format!(
                    "previous alignment has {} entries for {len} encoder positions",
                    tape.value(alpha_prev).numel()
                ),
            ));
        }
        let hidden = self.hyper.hidden;
        let mut acc: Option<Var> = None;
        let mut add = |tape: &mut Tape<T>, term: Var| -> Result<()> {
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
            Ok(())
        };
        if terms.use_key {
            add(tape, memory.keys.expect("keys prepared for key term"))?;
        }
        if terms.use_static {
            let f = self.static_features(tape, p, alpha_prev)?;
            let uf = tape.matmul_t(f, p[self.static_proj.expect("static projection")])?;
            add(tape, uf)?;
        }
        if terms.use_dynamic {
            let g = self.dynamic_features(tape, p, s, alpha_prev)?;
            let tg = tape.matmul_t(g, p[self.dynamic_proj.expect("dynamic projection")])?;
            add(tape, tg)?;
        }
        let acc = match acc {
            Some(a) => a,
            None => tape.constant(Tensor::zeros(&[len, hidden])),
        };
        let row = if terms.use_query {
            let ws = tape.matmul_t(s, p[self.query.expect("query weight")])?;
            tape.add(ws, p[self.b])?
        } else {
            p[self.b]
        };
        let pre = tape.add_row(acc, row)?;
        let act = tape.tanh(pre);
        let e = tape.matmul_t(act, p[self.v])?;
        let e = tape.reshape(e, &[len])?;
        if terms.use_prior {
            let prior = self.prior_term(tape, alpha_prev)?;
            tape.add(e, prior)
        } else {
            Ok(e)
        }
    }

    /// One attention step with the mechanism's own terms: `α = softmax(e)`.
    pub fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        s: Var,
        memory: &EncoderMemory,
        alpha_prev: Var,
    ) -> Result<Var> {
        let e = self.energies(tape, p, self.terms, s, memory, alpha_prev)?;
        tape.softmax(e)
    }
}

fn check_bank(what: &str, fb: FilterBank) -> Result<()> {
    if fb.count == 0 || fb.len % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "{what} filter bank needs a nonzero count and odd length, got {}×{}",
            fb.count, fb.len
        )));
    }
    Ok(())
}

/// One-hot alignment at position 0: the initial `α_0`.
pub fn initial_alignment<T: Real>(len: usize) -> Vec<T> {
    let mut a = vec![T::zero(); len];
    if let Some(first) = a.first_mut() {
        *first = T::one();
    }
    a
}
