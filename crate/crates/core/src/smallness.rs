//! Logarithmic moduli `ω_b`, their iterates, and the geometric chain used
//! to propagate smallness across interfaces.

use serde::Serialize;
use thiserror::Error;

use crate::scalar::Real;

/// Deepest composition evaluated by [`omega_iter`].
pub const MAX_OMEGA_ITER: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmallnessError {
    #[error("{0} must be positive")]
    NonPositiveInput(&'static str),
    #[error("the zeroth iterate t^b needs 0 < b < 1, got b = {0}")]
    InvalidExponentForZeroIter(f64),
    #[error("r = {r:e} outside (0, d_1 = {d1:e}]")]
    OutOfRange { r: f64, d1: f64 },
}

/// `ω_b(t) = 2^b e^{−2} |log t|^{−b}` on `(0, e^{−2})`, `e^{−2}` beyond.
pub fn omega<T: Real>(b: T, t: T) -> Result<T, SmallnessError> {
    if !(b > T::zero()) {
        return Err(SmallnessError::NonPositiveInput("b"));
    }
    if !(t > T::zero()) {
        return Err(SmallnessError::NonPositiveInput("t"));
    }
    Ok(omega_unchecked(b, t))
}

#[inline]
fn omega_unchecked<T: Real>(b: T, t: T) -> T {
    let two = T::lit(2.0);
    let lt = t.ln();
    if lt >= -two {
        return (-two).exp();
    }
    // log ω = b log 2 − 2 − b log|log t|
    (b * two.ln() - two - b * (-lt).ln()).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OmegaIterate<T> {
    pub value: T,
    /// Compositions actually applied.
    pub applied: usize,
    /// Requested depth exceeded [`MAX_OMEGA_ITER`].
    pub capped: bool,
    /// Value reached the plateau `e^{−2}`.
    pub saturated: bool,
}

/// `ω_b^{(0)}(t) = t^b`, `ω_b^{(1)} = ω_b`, `ω_b^{(j)} = ω_b ∘ ω_b^{(j−1)}`.
pub fn omega_iter<T: Real>(b: T, j: usize, t: T) -> Result<T, SmallnessError> {
    omega_iter_detailed(b, j, t).map(|it| it.value)
}

pub fn omega_iter_detailed<T: Real>(b: T, j: usize, t: T) -> Result<OmegaIterate<T>, SmallnessError> {
    if !(t > T::zero()) {
        return Err(SmallnessError::NonPositiveInput("t"));
    }
    if j == 0 {
        if !(b > T::zero() && b < T::one()) {
            return Err(SmallnessError::InvalidExponentForZeroIter(b.as_f64()));
        }
        return Ok(OmegaIterate { value: t.powf(b), applied: 0, capped: false, saturated: false });
    }
    if !(b > T::zero()) {
        return Err(SmallnessError::NonPositiveInput("b"));
    }
    let applied = j.min(MAX_OMEGA_ITER);
    let mut v = t;
    for _ in 0..applied {
        v = omega_unchecked(b, v);
    }
    let plateau = (-T::lit(2.0)).exp();
    Ok(OmegaIterate { value: v, applied, capped: j > MAX_OMEGA_ITER, saturated: v >= plateau })
}

/// Geometric parameters of the chain of balls along a Lipschitz boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ChainParams<T> {
    pub beta: T,
    pub beta1: T,
    pub lambda1: T,
    pub rho1: T,
    pub a: T,
    pub r0: T,
}

pub fn chain_parameters<T: Real>(lipschitz: T, r0: T) -> Result<ChainParams<T>, SmallnessError> {
    if !(lipschitz > T::zero()) {
        return Err(SmallnessError::NonPositiveInput("lipschitz"));
    }
    if !(r0 > T::zero()) {
        return Err(SmallnessError::NonPositiveInput("r0"));
    }
    let beta = lipschitz.recip().atan();
    let beta1 = (beta.sin() / T::lit(4.0)).atan();
    let s1 = beta1.sin();
    let lambda1 = r0 / (T::one() + s1);
    Ok(ChainParams { beta, beta1, lambda1, rho1: lambda1 * s1, a: (T::one() - s1) / (T::one() + s1), r0 })
}

impl<T: Real> ChainParams<T> {
    /// `λ_m = a λ_{m−1}`, `m ≥ 1`.
    pub fn lambda(&self, m: usize) -> T {
        assert!(m >= 1);
        (1..m).fold(self.lambda1, |l, _| l * self.a)
    }

    /// `ρ_m = a ρ_{m−1}`, `m ≥ 1`.
    pub fn rho(&self, m: usize) -> T {
        assert!(m >= 1);
        (1..m).fold(self.rho1, |r, _| r * self.a)
    }

    /// `d_m = λ_m − ρ_m`.
    pub fn d(&self, m: usize) -> T {
        self.lambda(m) - self.rho(m)
    }

    /// `C = 1 / |log a|`.
    pub fn log_constant(&self) -> T {
        self.a.ln().abs().recip()
    }
}

/// `h̄(r) = min{l ≥ 1 : d_l ≤ r}` for `r ∈ (0, d_1]`.
pub fn h_bar<T: Real>(r: T, cp: &ChainParams<T>) -> Result<usize, SmallnessError> {
    let d1 = cp.d(1);
    if !(r > T::zero() && r <= d1) {
        return Err(SmallnessError::OutOfRange { r: r.as_f64(), d1: d1.as_f64() });
    }
    let (mut lam, mut rho) = (cp.lambda1, cp.rho1);
    let mut l = 1;
    while lam - rho > r {
        lam = lam * cp.a;
        rho = rho * cp.a;
        l += 1;
    }
    debug_assert!(sandwich(r, cp, l).holds);
    Ok(l)
}

/// Both sides of `C log(d_1/r) ≤ h̄(r) − 1 ≤ C log(d_1/r) + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Sandwich<T> {
    pub lower: T,
    pub middle: T,
    pub upper: T,
    pub holds: bool,
}

pub fn sandwich<T: Real>(r: T, cp: &ChainParams<T>, h: usize) -> Sandwich<T> {
    let lower = cp.log_constant() * (cp.d(1) / r).ln();
    let middle = T::from_count(h) - T::one();
    let upper = lower + T::one();
    let slack = T::lit(1e-9) * (T::one() + middle);
    Sandwich { lower, middle, upper, holds: lower <= middle + slack && middle <= upper + slack }
}
