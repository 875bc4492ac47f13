//! Differentiable primitives.
//!
//! Every model in this crate is assembled from the small op set recorded by
//! [`Tape`]: matrix-vector products, elementwise nonlinearities, softmax, a
//! 1-D convolution bank and the Gaussian-mixture density used by GMM
//! attention. The free functions in this module are the forward kernels; the
//! tape calls the same kernels so that forward values never diverge between
//! the recorded and the plain code paths.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f64` (verification mode)
/// and `f32` (speed mode).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Boundary handling for [`conv1d`].
///
/// Both modes zero-pad. `Centered` keeps the output aligned with the input
/// (odd filter length, tap `len / 2` sits on the output position). `Causal`
/// only reads current and earlier samples, so mass in a one-hot signal can
/// only move toward higher indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ConvMode {
    Centered,
    Causal,
}

impl ConvMode {
    /// Index shift applied to the tap index: `out[j] = Σ_k taps[k] · signal[j − k + offset]`.
    #[inline]
    pub(crate) fn offset(self, taps: usize) -> isize {
        match self {
            ConvMode::Centered => (taps / 2) as isize,
            ConvMode::Causal => 0,
        }
    }
}

pub(crate) fn ensure_finite<T: Real>(xs: &[T], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Numerically stable softmax over a vector.
pub fn softmax<T: Real>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    ensure_finite(x, "softmax input")?;
    Ok(softmax_unchecked(x))
}

pub(crate) fn softmax_unchecked<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = out.iter().copied().sum();
    for v in &mut out {
        *v = *v / total;
    }
    out
}

/// `ln(1 + e^x)`, evaluated as `x + ln(1 + e^-x)` for positive `x`.
pub fn softplus<T: Real>(x: T) -> Result<T> {
    if !x.is_finite() {
        return Err(Error::NonFinite("softplus input"));
    }
    Ok(softplus_unchecked(x))
}

#[inline]
pub(crate) fn softplus_unchecked<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Single-filter 1-D convolution with zero padding; the output has the
/// signal's length.
///
/// `out[j] = Σ_k taps[k] · signal[j − k + offset]`, where `offset` is
/// `taps.len() / 2` for [`ConvMode::Centered`] and 0 for [`ConvMode::Causal`].
pub fn conv1d<T: Real>(signal: &[T], taps: &[T], mode: ConvMode) -> Result<Vec<T>> {
    check_conv_args(signal.len(), taps.len(), mode)?;
    Ok(conv1d_bank_unchecked(signal, taps, 1, taps.len(), mode))
}

pub(crate) fn check_conv_args(signal: usize, taps: usize, mode: ConvMode) -> Result<()> {
    if signal == 0 {
        return Err(Error::Empty("conv1d signal"));
    }
    if taps == 0 {
        return Err(Error::Empty("conv1d taps"));
    }
    if mode == ConvMode::Centered && taps % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "centered convolution needs an odd filter length, got {taps}"
        )));
    }
    Ok(())
}

/// Filter-bank convolution. `filters` is row-major `[count × len]`; the
/// result is row-major `[signal.len() × count]` (one column per filter).
pub(crate) fn conv1d_bank_unchecked<T: Real>(
    signal: &[T],
    filters: &[T],
    count: usize,
    len: usize,
    mode: ConvMode,
) -> Vec<T> {
    let l = signal.len() as isize;
    let offset = mode.offset(len);
    let mut out = vec![T::zero(); signal.len() * count];
    for (s_idx, &s) in signal.iter().enumerate() {
        if s == T::zero() {
            continue;
        }
        // signal[s_idx] contributes to out[j] for j = s_idx + k - offset.
        for k in 0..len {
            let j = s_idx as isize + k as isize - offset;
            if j < 0 || j >= l {
                continue;
            }
            let row = &mut out[j as usize * count..(j as usize + 1) * count];
            for (f, o) in row.iter_mut().enumerate() {
                *o = *o + filters[f * len + k] * s;
            }
        }
    }
    out
}

/// Samples an unnormalized Gaussian mixture at integer positions `0..len`:
/// `α_j = Σ_k (w_k / z_k) · exp(−(j − μ_k)² / 2σ_k²)`.
pub fn mixture_density<T: Real>(w: &[T], z: &[T], mu: &[T], sigma: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    let half = T::lit(0.5);
    for k in 0..w.len() {
        let amp = w[k] / z[k];
        let inv_var = T::one() / (sigma[k] * sigma[k]);
        for (j, o) in out.iter_mut().enumerate() {
            let d = T::lit(j as f64) - mu[k];
            *o = *o + amp * (-half * d * d * inv_var).exp();
        }
    }
    out
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Real>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}
