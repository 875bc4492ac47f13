//! Gaussian-mixture attention.
//!
//! An MLP maps the attention-RNN state to raw parameters `(ŵ, Δ̂, σ̂)`, which
//! one of three parameterizations turns into mixture weights `w`, mean
//! offsets `Δ`, widths `σ` and normalizers `Z`:
//!
//! ```text
//!        Z             w            Δ            σ
//! V0     1             exp(ŵ)       exp(Δ̂)       sqrt(exp(−σ̂) / 2)
//! V1     sqrt(2πσ²)    softmax(ŵ)   exp(Δ̂)       sqrt(exp(σ̂))
//! V2     sqrt(2πσ²)    softmax(ŵ)   softplus(Δ̂)  softplus(σ̂)
//! ```
//!
//! Means advance as `μ_i = μ_{i−1} + Δ_i` (updated before the weights are
//! sampled; `μ_0 = 0`) and the attention weight at encoder position `j` is
//! `α_j = Σ_k (w_k / Z_k) exp(−(j − μ_k)² / 2σ_k²)`. The weights are not
//! renormalized.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mixture_density, Real, Tape, Tensor, Var};
use crate::params::{Bound, Linear, ParamId, ParamStore, SeedRng};

/// Initial forward movement targeted by the bias initialization.
pub const BIAS_DELTA_TARGET: f64 = 1.0;
/// Initial standard deviation targeted by the bias initialization.
pub const BIAS_SIGMA_TARGET: f64 = 10.0;
/// Output-layer init range; small so the biases dominate early behavior.
pub const OUTPUT_INIT_RANGE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GmmVersion {
    V0,
    V1,
    V2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GmmVariant {
    version: GmmVersion,
    use_bias: bool,
}

impl GmmVariant {
    pub fn new(version: GmmVersion, use_bias: bool) -> Result<Self> {
        if use_bias && version == GmmVersion::V0 {
            return Err(Error::Unsupported(
                "initial bias is only defined for GMM V1 and V2".into(),
            ));
        }
        Ok(GmmVariant { version, use_bias })
    }

    pub const V0: GmmVariant = GmmVariant {
        version: GmmVersion::V0,
        use_bias: false,
    };
    pub const V1: GmmVariant = GmmVariant {
        version: GmmVersion::V1,
        use_bias: false,
    };
    pub const V1B: GmmVariant = GmmVariant {
        version: GmmVersion::V1,
        use_bias: true,
    };
    pub const V2: GmmVariant = GmmVariant {
        version: GmmVersion::V2,
        use_bias: false,
    };
    pub const V2B: GmmVariant = GmmVariant {
        version: GmmVersion::V2,
        use_bias: true,
    };

    pub fn version(self) -> GmmVersion {
        self.version
    }

    pub fn use_bias(self) -> bool {
        self.use_bias
    }
}

impl fmt::Display for GmmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self.version {
            GmmVersion::V0 => "v0",
            GmmVersion::V1 => "v1",
            GmmVersion::V2 => "v2",
        };
        write!(f, "GMM{v}{}", if self.use_bias { "b" } else { "" })
    }
}

/// Raw MLP outputs, each of length K.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMixture<T> {
    pub w_hat: Vec<T>,
    pub delta_hat: Vec<T>,
    pub sigma_hat: Vec<T>,
}

/// Final mixture parameters. `mu` stays empty until [`gmm_weights`] advances
/// the means.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams<T> {
    pub w: Vec<T>,
    pub delta: Vec<T>,
    pub sigma: Vec<T>,
    pub z: Vec<T>,
    pub mu: Vec<T>,
}

/// Component means carried across decoder steps.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmState<T> {
    pub mu: Vec<T>,
}

impl<T: Real> GmmState<T> {
    pub fn initial(k: usize) -> Self {
        GmmState {
            mu: vec![T::zero(); k],
        }
    }
}

/// Tape handles for converted mixture parameters.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub w: Var,
    pub delta: Var,
    pub sigma: Var,
    pub z: Var,
}

/// Applies the row of the conversion table for `variant` on a tape.
pub fn convert_on_tape<T: Real>(
    tape: &mut Tape<T>,
    w_hat: Var,
    delta_hat: Var,
    sigma_hat: Var,
    variant: GmmVariant,
) -> Result<MixtureVars> {
    let k = tape.value(w_hat).numel();
    let normal_z = |tape: &mut Tape<T>, sigma: Var| {
        let var = tape.square(sigma);
        let scaled = tape.scale(var, T::lit(2.0 * PI));
        tape.sqrt(scaled)
    };
    let out = match variant.version {
        GmmVersion::V0 => {
            let z = tape.constant(Tensor::vector(vec![T::one(); k]));
            let w = tape.exp(w_hat);
            let delta = tape.exp(delta_hat);
            let neg = tape.scale(sigma_hat, -T::one());
            let e = tape.exp(neg);
            let half = tape.scale(e, T::lit(0.5));
            let sigma = tape.sqrt(half);
            MixtureVars { w, delta, sigma, z }
        }
        GmmVersion::V1 => {
            let w = tape.softmax(w_hat)?;
            let delta = tape.exp(delta_hat);
            let e = tape.exp(sigma_hat);
            let sigma = tape.sqrt(e);
            let z = normal_z(tape, sigma);
            MixtureVars { w, delta, sigma, z }
        }
        GmmVersion::V2 => {
            let w = tape.softmax(w_hat)?;
            let delta = tape.softplus(delta_hat);
            let sigma = tape.softplus(sigma_hat);
            let z = normal_z(tape, sigma);
            MixtureVars { w, delta, sigma, z }
        }
    };
    Ok(out)
}

/// Converts raw MLP outputs to mixture parameters (`mu` left empty).
pub fn convert_params<T: Real>(raw: &RawMixture<T>, variant: GmmVariant) -> Result<MixtureParams<T>> {
    let k = raw.w_hat.len();
    if k == 0 || raw.delta_hat.len() != k || raw.sigma_hat.len() != k {
        return Err(Error::shape(
            "convert_params",
            format!(
                "raw parameter lengths {}, {}, {}",
                k,
                raw.delta_hat.len(),
                raw.sigma_hat.len()
            ),
        ));
    }
    for part in [&raw.w_hat, &raw.delta_hat, &raw.sigma_hat] {
        crate::numerics::ensure_finite(part, "raw mixture parameters")?;
    }
    let mut tape = Tape::new();
    let w = tape.constant(Tensor::vector(raw.w_hat.clone()));
    let d = tape.constant(Tensor::vector(raw.delta_hat.clone()));
    let s = tape.constant(Tensor::vector(raw.sigma_hat.clone()));
    let m = convert_on_tape(&mut tape, w, d, s, variant)?;
    Ok(MixtureParams {
        w: tape.data(m.w).to_vec(),
        delta: tape.data(m.delta).to_vec(),
        sigma: tape.data(m.sigma).to_vec(),
        z: tape.data(m.z).to_vec(),
        mu: Vec::new(),
    })
}

/// Output-bias values for the `Δ̂` and `σ̂` slices that make a zero raw
/// output convert to the requested `Δ` and `σ`.
pub fn initial_bias(variant: GmmVariant, delta_target: f64, sigma_target: f64) -> Result<(f64, f64)> {
    if !(delta_target > 0.0) || !(sigma_target > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bias targets must be positive, got Δ={delta_target}, σ={sigma_target}"
        )));
    }
    // ln(e^x − 1), stable for large x.
    let inv_softplus = |x: f64| x + (-(-x).exp()).ln_1p();
    match variant.version {
        GmmVersion::V0 => Err(Error::Unsupported(
            "initial bias is only defined for GMM V1 and V2".into(),
        )),
        GmmVersion::V1 => Ok((delta_target.ln(), 2.0 * sigma_target.ln())),
        GmmVersion::V2 => Ok((inv_softplus(delta_target), inv_softplus(sigma_target))),
    }
}

/// Advances the means by `params.delta` and samples the mixture at
/// `0..len`. Returns the (unnormalized) weights and the new state; the
/// returned params copy has `mu` filled in.
pub fn gmm_weights<T: Real>(
    params: &MixtureParams<T>,
    state: &GmmState<T>,
    len: usize,
) -> Result<(Vec<T>, GmmState<T>)> {
    if len == 0 {
        return Err(Error::Empty("gmm_weights length"));
    }
    let k = params.w.len();
    if [params.delta.len(), params.sigma.len(), params.z.len(), state.mu.len()]
        .iter()
        .any(|&n| n != k)
    {
        return Err(Error::shape("gmm_weights", "component counts differ"));
    }
    if params.sigma.iter().any(|&s| !(s > T::zero())) {
        return Err(Error::InvalidArgument(
            "mixture widths must be strictly positive".into(),
        ));
    }
    let mu: Vec<T> = state
        .mu
        .iter()
        .zip(&params.delta)
        .map(|(&m, &d)| m + d)
        .collect();
    let alpha = mixture_density(&params.w, &params.z, &mu, &params.sigma, len);
    Ok((alpha, GmmState { mu }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub variant: GmmVariant,
    /// Mixture components.
    pub components: usize,
    /// Width of the tanh hidden layer.
    pub hidden: usize,
}

impl GmmConfig {
    pub fn new(variant: GmmVariant) -> Self {
        GmmConfig {
            variant,
            components: 5,
            hidden: 128,
        }
    }
}

/// Trainable GMM attention: `(ŵ, Δ̂, σ̂) = V tanh(W s + b) + b_out`.
#[derive(Clone, Debug)]
pub struct GmmAttention {
    pub config: GmmConfig,
    hidden: Linear,
    output: ParamId,
    output_bias: ParamId,
}

/// Raw MLP outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct RawVars {
    pub w_hat: Var,
    pub delta_hat: Var,
    pub sigma_hat: Var,
}

impl GmmAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        state_dim: usize,
        config: GmmConfig,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if config.components == 0 || config.hidden == 0 || state_dim == 0 {
            return Err(Error::InvalidArgument(
                "GMM attention needs nonzero components, hidden and state sizes".into(),
            ));
        }
        let k = config.components;
        let hidden = Linear::new(store, &format!("{prefix}.mlp_in"), state_dim, config.hidden, true, rng);
        let output = store.add_uniform(
            format!("{prefix}.mlp_out.weight"),
            &[3 * k, config.hidden],
            OUTPUT_INIT_RANGE,
            rng,
        );
        let mut bias = vec![T::zero(); 3 * k];
        if config.variant.use_bias {
            let (db, sb) = initial_bias(config.variant, BIAS_DELTA_TARGET, BIAS_SIGMA_TARGET)?;
            for c in 0..k {
                bias[k + c] = T::lit(db);
                bias[2 * k + c] = T::lit(sb);
            }
        }
        let output_bias = store.add(format!("{prefix}.mlp_out.bias"), Tensor::vector(bias));
        Ok(GmmAttention {
            config,
            hidden,
            output,
            output_bias,
        })
    }

    pub fn components(&self) -> usize {
        self.config.components
    }

    pub fn output_weight(&self) -> ParamId {
        self.output
    }

    pub fn output_bias(&self) -> ParamId {
        self.output_bias
    }

    /// The intermediate-parameter MLP.
    pub fn mlp<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, s: Var) -> Result<RawVars> {
        let h = self.hidden.forward(tape, p, s)?;
        let h = tape.tanh(h);
        let o = tape.matmul_t(h, p[self.output])?;
        let o = tape.add_row(o, p[self.output_bias])?;
        let k = self.config.components;
        Ok(RawVars {
            w_hat: tape.slice(o, 0, k)?,
            delta_hat: tape.slice(o, k, k)?,
            sigma_hat: tape.slice(o, 2 * k, k)?,
        })
    }

    /// One decoder step: returns `(α, μ, converted parameters)`.
    pub fn step<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        s: Var,
        mu_prev: Var,
        len: usize,
    ) -> Result<(Var, Var, MixtureVars)> {
        let raw = self.mlp(tape, p, s)?;
        let m = convert_on_tape(tape, raw.w_hat, raw.delta_hat, raw.sigma_hat, self.config.variant)?;
        let mu = tape.add(mu_prev, m.delta)?;
        let alpha = tape.mixture(m.w, m.z, mu, m.sigma, len)?;
        Ok((alpha, mu, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn raw(w: f64, d: f64, s: f64) -> RawMixture<f64> {
        RawMixture {
            w_hat: vec![w],
            delta_hat: vec![d],
            sigma_hat: vec![s],
        }
    }

    #[test]
    fn v0_at_zero() {
        let m = convert_params(&raw(0.0, 0.0, 0.0), GmmVariant::V0).unwrap();
        assert_eq!(m.z, vec![1.0]);
        assert_eq!(m.w, vec![1.0]);
        assert_eq!(m.delta, vec![1.0]);
        assert!((m.sigma[0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn v2_delta_at_zero_is_ln2() {
        let m = convert_params(&raw(0.0, 0.0, 0.0), GmmVariant::V2).unwrap();
        assert!((m.delta[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn v1_sigma_ten() {
        let m = convert_params(&raw(0.0, 0.0, 100f64.ln()), GmmVariant::V1).unwrap();
        assert!((m.sigma[0] - 10.0).abs() < 1e-12);
        // sqrt(200π) = 25.066282746310005...
        assert!((m.z[0] - 25.066_282_746_310_005).abs() < 1e-12);
    }

    #[test]
    fn bias_values() {
        let (d1, s1) = initial_bias(GmmVariant::V1B, 1.0, 10.0).unwrap();
        assert_eq!(d1, 0.0);
        assert!((s1 - 4.605_170_185_988_091).abs() < 1e-12);
        let (d2, s2) = initial_bias(GmmVariant::V2B, 1.0, 10.0).unwrap();
        // ln(e − 1) and ln(e^10 − 1)
        assert!((d2 - 0.541_324_854_612_918_1).abs() < 1e-12);
        assert!((s2 - 9.999_954_599_039_63).abs() < 1e-12);
        assert!(initial_bias(GmmVariant::V0, 1.0, 10.0).is_err());
        for v in [GmmVariant::V1B, GmmVariant::V2B] {
            let (d, s) = initial_bias(v, 1.0, 10.0).unwrap();
            let m = convert_params(&raw(0.0, d, s), v).unwrap();
            assert!((m.delta[0] - 1.0).abs() < 1e-9);
            assert!((m.sigma[0] - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn v0_with_bias_is_rejected() {
        assert!(GmmVariant::new(GmmVersion::V0, true).is_err());
        assert_eq!(GmmVariant::new(GmmVersion::V2, true).unwrap(), GmmVariant::V2B);
        assert_eq!(GmmVariant::V2B.to_string(), "GMMv2b");
    }

    #[test]
    fn wide_normalized_component_sums_to_one() {
        let m = MixtureParams {
            w: vec![1.0],
            delta: vec![50.0],
            sigma: vec![10.0],
            z: vec![(2.0 * PI * 100.0f64).sqrt()],
            mu: vec![],
        };
        let (a, st) = gmm_weights(&m, &GmmState::initial(1), 100).unwrap();
        assert_eq!(st.mu, vec![50.0]);
        let total: f64 = a.iter().sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        assert!(a.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_offset_is_a_fixed_point() {
        let m = MixtureParams {
            w: vec![1.0],
            delta: vec![0.0],
            sigma: vec![2.0],
            z: vec![1.0],
            mu: vec![],
        };
        let s0 = GmmState { mu: vec![5.0] };
        let (a1, s1) = gmm_weights(&m, &s0, 20).unwrap();
        let (a2, s2) = gmm_weights(&m, &s1, 20).unwrap();
        assert_eq!(s1, s0);
        assert_eq!(s2, s0);
        assert_eq!(a1, a2);
    }

    #[test]
    fn two_components_two_peaks() {
        let m = MixtureParams {
            w: vec![0.5, 0.5],
            delta: vec![6.2, 21.7],
            sigma: vec![1.5, 1.5],
            z: vec![1.0, 1.0],
            mu: vec![],
        };
        let (a, _) = gmm_weights(&m, &GmmState::initial(2), 30).unwrap();
        let peaks: Vec<usize> = (1..29)
            .filter(|&j| a[j] > a[j - 1] && a[j] > a[j + 1])
            .collect();
        assert_eq!(peaks, vec![6, 22]);
    }

    #[test]
    fn nonpositive_sigma_is_an_error() {
        let m = MixtureParams {
            w: vec![1.0],
            delta: vec![0.0],
            sigma: vec![0.0],
            z: vec![1.0],
            mu: vec![],
        };
        assert!(gmm_weights(&m, &GmmState::initial(1), 5).is_err());
    }

    #[test]
    fn zero_network_gives_zero_raw() {
        let mut rng = SeedRng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let att = GmmAttention::new(&mut store, "gmm", 4, GmmConfig::new(GmmVariant::V1), &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let s = tape.constant(Tensor::vector(vec![0.3, -0.2, 1.0, 0.5]));
        let r = att.mlp(&mut tape, &p, s).unwrap();
        for v in [r.w_hat, r.delta_hat, r.sigma_hat] {
            assert_eq!(tape.data(v), &[0.0; 5]);
        }
        assert_eq!(att.config.hidden, 128);
    }

    #[test]
    fn mlp_is_deterministic() {
        let build = || {
            let mut rng = SeedRng::seed_from_u64(11);
            let mut store = ParamStore::<f64>::new();
            let att = GmmAttention::new(&mut store, "gmm", 3, GmmConfig::new(GmmVariant::V2B), &mut rng).unwrap();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let s = tape.constant(Tensor::vector(vec![0.1, 0.2, 0.3]));
            let mu = tape.constant(Tensor::vector(vec![0.0; 5]));
            let (a, _, _) = att.step(&mut tape, &p, s, mu, 12).unwrap();
            tape.data(a).to_vec()
        };
        assert_eq!(build(), build());
    }
}
