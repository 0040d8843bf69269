//! Closed-form singular kernels: the Laplace fundamental solution, the
//! anisotropy frame `L = R J` and the two-layer image kernel `H`.
//!
//! Kernels are generic over the dimension `N ≥ 3`. Sign convention follows
//! `Δ Γ = δ`, so `Γ < 0`; the finite element code works with `−Γ`.

use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::dense::{Matrix, SymmetricEigen};
use crate::scalar::Real;

pub type SquareMatrix<T, const N: usize> = [[T; N]; N];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension {0} is below 3")]
    DimensionTooSmall(usize),
    #[error("kernel evaluated at coincident points")]
    CoincidentPoints,
    #[error("point lies on the interface x_n = 0")]
    OnInterface,
    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    AsymmetricInput(f64),
    #[error("conductivity values must be positive")]
    NonPositiveConductivity,
    #[error("probe at distance {distance:e} from a singularity, need at least {required:e}")]
    ProbeTooCloseToSingularity { distance: f64, required: f64 },
}

fn check_dim(n: usize) -> Result<(), KernelError> {
    if n < 3 {
        Err(KernelError::DimensionTooSmall(n))
    } else {
        Ok(())
    }
}

/// `Γ(k)` for integer or half-integer `k = m/2`, `m ≥ 1`.
fn gamma_half_integer(m: usize) -> f64 {
    let (mut value, mut x) = if m % 2 == 0 { (1.0, 1.0) } else { (std::f64::consts::PI.sqrt(), 0.5) };
    let target = m as f64 / 2.0;
    while x < target {
        value *= x;
        x += 1.0;
    }
    value
}

/// Volume of the unit ball `ω_n = 2 π^{n/2} / (n Γ(n/2))`.
pub fn unit_ball_volume<T: Real>(n: usize) -> Result<T, KernelError> {
    check_dim(n)?;
    let nf = n as f64;
    Ok(T::lit(2.0 * std::f64::consts::PI.powf(nf / 2.0) / (nf * gamma_half_integer(n))))
}

/// `1 / (n (2 − n) ω_n)`.
fn laplace_constant<T: Real>(n: usize) -> T {
    let w: T = unit_ball_volume(n).expect("dimension checked by caller");
    let nf = T::from_count(n);
    (nf * (T::lit(2.0) - nf) * w).recip()
}

#[inline]
fn dist<T: Real, const N: usize>(x: &[T; N], y: &[T; N]) -> T {
    x.iter().zip(y).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt()
}

#[inline]
fn matvec<T: Real, const N: usize>(m: &SquareMatrix<T, N>, v: &[T; N]) -> [T; N] {
    std::array::from_fn(|i| (0..N).map(|j| m[i][j] * v[j]).sum())
}

#[inline]
fn matvec_t<T: Real, const N: usize>(m: &SquareMatrix<T, N>, v: &[T; N]) -> [T; N] {
    std::array::from_fn(|j| (0..N).map(|i| m[i][j] * v[i]).sum())
}

fn to_array<T: Real, const N: usize>(m: &Matrix<T>) -> SquareMatrix<T, N> {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// `Γ(x, y) = |x − y|^{2−n} / (n (2 − n) ω_n)`.
pub fn laplace_fundamental<T: Real, const N: usize>(x: &[T; N], y: &[T; N]) -> Result<T, KernelError> {
    check_dim(N)?;
    let r = dist(x, y);
    if r == T::zero() {
        return Err(KernelError::CoincidentPoints);
    }
    Ok(laplace_constant::<T>(N) * r.powi(2 - N as i32))
}

/// `∇_x Γ(x, y) = (x − y) / (n ω_n |x − y|^n)`.
pub fn laplace_fundamental_grad<T: Real, const N: usize>(x: &[T; N], y: &[T; N]) -> Result<[T; N], KernelError> {
    check_dim(N)?;
    let r = dist(x, y);
    if r == T::zero() {
        return Err(KernelError::CoincidentPoints);
    }
    let w: T = unit_ball_volume(N)?;
    let c = (T::from_count(N) * w * r.powi(N as i32)).recip();
    Ok(std::array::from_fn(|i| (x[i] - y[i]) * c))
}

/// Linear change of coordinates flattening `A(0)` to the identity while
/// keeping the interface `x_n = 0` horizontal.
#[derive(Clone, Debug, PartialEq)]
pub struct AnisotropyFrame<T, const N: usize> {
    /// `√(A(0)⁻¹)`.
    pub j: SquareMatrix<T, N>,
    /// Rotation taking `v/|v|` to `e_n`.
    pub r: SquareMatrix<T, N>,
    pub l: SquareMatrix<T, N>,
    /// `L` with the last row negated.
    pub l_star: SquareMatrix<T, N>,
    /// `|√(A(0)) e_n|`.
    pub v_norm: T,
    /// `det J`.
    pub det_j: T,
}

pub fn build_frame<T: Real, const N: usize>(a0: &SquareMatrix<T, N>) -> Result<AnisotropyFrame<T, N>, KernelError> {
    check_dim(N)?;
    let a = Matrix::from_rows(a0);
    let asym = a.asymmetry();
    if asym > T::lit(1e-12) {
        return Err(KernelError::AsymmetricInput(asym.as_f64()));
    }
    let eig = SymmetricEigen::new(&a);
    if !(eig.values[0] > T::zero()) {
        return Err(KernelError::NotPositiveDefinite(eig.values[0].as_f64()));
    }
    let j: SquareMatrix<T, N> = to_array(&eig.map(|l| l.sqrt().recip()));
    let sqrt_a: SquareMatrix<T, N> = to_array(&eig.map(|l| l.sqrt()));
    let det_j = eig.values.iter().fold(T::one(), |p, &l| p / l.sqrt());

    let v: [T; N] = std::array::from_fn(|i| sqrt_a[i][N - 1]);
    let v_norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let u: [T; N] = v.map(|x| x / v_norm);
    let c = u[N - 1];
    let mut w = u;
    w[N - 1] = w[N - 1] - c;
    let s = w.iter().map(|&x| x * x).sum::<T>().sqrt();
    let mut r: SquareMatrix<T, N> = std::array::from_fn(|i| std::array::from_fn(|k| if i == k { T::one() } else { T::zero() }));
    if s > T::lit(1e-15) {
        let w = w.map(|x| x / s);
        let e: [T; N] = std::array::from_fn(|i| if i == N - 1 { T::one() } else { T::zero() });
        for i in 0..N {
            for k in 0..N {
                r[i][k] = r[i][k] + (c - T::one()) * (e[i] * e[k] + w[i] * w[k]) + s * (e[i] * w[k] - w[i] * e[k]);
            }
        }
    }
    let l: SquareMatrix<T, N> = std::array::from_fn(|i| std::array::from_fn(|k| (0..N).map(|m| r[i][m] * j[m][k]).sum()));
    let mut l_star = l;
    for x in l_star[N - 1].iter_mut() {
        *x = -*x;
    }
    Ok(AnisotropyFrame { j, r, l, l_star, v_norm, det_j })
}

/// Coefficients of the frozen two-layer operator
/// `div((γ⁻ + (γ⁺ − γ⁻) χ⁺) A0 ∇·)`, with `χ⁺` the indicator of `x_n > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerParams<T, const N: usize> {
    pub gamma_plus: T,
    pub gamma_minus: T,
    pub a0: SquareMatrix<T, N>,
}

impl<T: Real, const N: usize> TwoLayerParams<T, N> {
    pub fn isotropic(gamma_plus: T, gamma_minus: T) -> Self {
        let a0 = std::array::from_fn(|i| std::array::from_fn(|k| if i == k { T::one() } else { T::zero() }));
        Self { gamma_plus, gamma_minus, a0 }
    }

    /// `γ0(x)`.
    pub fn gamma_at(&self, x: &[T; N]) -> T {
        if x[N - 1] > T::zero() {
            self.gamma_plus
        } else {
            self.gamma_minus
        }
    }
}

/// Two-layer kernel with its frame precomputed.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoLayerKernel<T, const N: usize> {
    pub params: TwoLayerParams<T, N>,
    pub frame: AnisotropyFrame<T, N>,
    c_gamma: T,
}

#[derive(Clone, Copy)]
enum Branch<T> {
    Same { direct: T, image: T },
    Cross(T),
}

impl<T: Real, const N: usize> TwoLayerKernel<T, N> {
    pub fn new(params: TwoLayerParams<T, N>) -> Result<Self, KernelError> {
        if !(params.gamma_plus > T::zero() && params.gamma_minus > T::zero()) {
            return Err(KernelError::NonPositiveConductivity);
        }
        let frame = build_frame(&params.a0)?;
        Ok(Self { params, frame, c_gamma: laplace_constant(N) })
    }

    fn branch(&self, xi: &[T; N], eta: &[T; N], closed: bool) -> Result<Branch<T>, KernelError> {
        let (a, b) = (xi[N - 1], eta[N - 1]);
        if b == T::zero() || (a == T::zero() && !closed) {
            return Err(KernelError::OnInterface);
        }
        if xi == eta {
            return Err(KernelError::CoincidentPoints);
        }
        let (gp, gm) = (self.params.gamma_plus, self.params.gamma_minus);
        let dj = self.frame.det_j;
        Ok(if a == T::zero() {
            // continuous extension: both one-sided limits equal the cross term
            Branch::Cross(dj * T::lit(2.0) / (gp + gm))
        } else if a > T::zero() && b > T::zero() {
            Branch::Same { direct: dj / gp, image: dj * (gp - gm) / (gp * (gp + gm)) }
        } else if a < T::zero() && b < T::zero() {
            Branch::Same { direct: dj / gm, image: dj * (gm - gp) / (gm * (gp + gm)) }
        } else {
            Branch::Cross(dj * T::lit(2.0) / (gp + gm))
        })
    }

    #[inline]
    fn gamma_lap(&self, d: &[T; N]) -> T {
        let r = d.iter().map(|&x| x * x).sum::<T>().sqrt();
        self.c_gamma * r.powi(2 - N as i32)
    }

    /// `∇Γ` at displacement `d`.
    #[inline]
    fn grad_lap(&self, d: &[T; N]) -> [T; N] {
        let r2 = d.iter().map(|&x| x * x).sum::<T>();
        let r = r2.sqrt();
        let c = self.c_gamma * (T::lit(2.0) - T::from_count(N)) * r.powi(-(N as i32));
        d.map(|x| x * c)
    }

    /// `H(ξ, η)`.
    pub fn eval(&self, xi: &[T; N], eta: &[T; N]) -> Result<T, KernelError> {
        self.eval_branch(xi, eta, false)
    }

    /// Like [`eval`](Self::eval) but allows `ξ` on the interface, where `H`
    /// is continuous.
    pub fn eval_closed(&self, xi: &[T; N], eta: &[T; N]) -> Result<T, KernelError> {
        self.eval_branch(xi, eta, true)
    }

    fn eval_branch(&self, xi: &[T; N], eta: &[T; N], closed: bool) -> Result<T, KernelError> {
        let branch = self.branch(xi, eta, closed)?;
        let lx = matvec(&self.frame.l, xi);
        let ly = matvec(&self.frame.l, eta);
        let d: [T; N] = std::array::from_fn(|i| lx[i] - ly[i]);
        Ok(match branch {
            Branch::Cross(c) => c * self.gamma_lap(&d),
            Branch::Same { direct, image } => {
                let ls = matvec(&self.frame.l_star, eta);
                let ds: [T; N] = std::array::from_fn(|i| lx[i] - ls[i]);
                direct * self.gamma_lap(&d) + image * self.gamma_lap(&ds)
            }
        })
    }

    /// `∇_ξ H(ξ, η)`.
    pub fn grad_xi(&self, xi: &[T; N], eta: &[T; N]) -> Result<[T; N], KernelError> {
        let branch = self.branch(xi, eta, false)?;
        let lx = matvec(&self.frame.l, xi);
        let ly = matvec(&self.frame.l, eta);
        let d: [T; N] = std::array::from_fn(|i| lx[i] - ly[i]);
        let g = match branch {
            Branch::Cross(c) => self.grad_lap(&d).map(|x| x * c),
            Branch::Same { direct, image } => {
                let ls = matvec(&self.frame.l_star, eta);
                let ds: [T; N] = std::array::from_fn(|i| lx[i] - ls[i]);
                let (g1, g2) = (self.grad_lap(&d), self.grad_lap(&ds));
                std::array::from_fn(|i| direct * g1[i] + image * g2[i])
            }
        };
        Ok(matvec_t(&self.frame.l, &g))
    }
}

/// One-shot evaluation of `H(ξ, η)`.
pub fn two_layer_fundamental<T: Real, const N: usize>(xi: &[T; N], eta: &[T; N], p: &TwoLayerParams<T, N>) -> Result<T, KernelError> {
    TwoLayerKernel::new(p.clone())?.eval(xi, eta)
}

/// Probe layout for [`verify_two_layer`]: a lateral grid on
/// `[−extent, extent]^{n−1}`, poles at `η = h e_n` for each entry of
/// `pole_heights`, PDE probes at the heights in `probe_heights`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeGrid<T> {
    pub pole_heights: Vec<T>,
    pub probe_heights: Vec<T>,
    pub extent: T,
    pub per_axis: usize,
    pub fd_step: T,
}

impl<T: Real> Default for ProbeGrid<T> {
    fn default() -> Self {
        Self {
            pole_heights: vec![T::lit(0.5), T::lit(-0.5)],
            probe_heights: vec![T::lit(0.75), T::lit(0.25), T::lit(-0.25), T::lit(-0.75)],
            extent: T::lit(0.6),
            per_axis: 4,
            fd_step: T::lit(1e-4),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Pde,
    Interface,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub kind: ProbeKind,
    pub pole: Vec<f64>,
    pub point: Vec<f64>,
    pub h: f64,
    /// `|div(γ0 A0 ∇H)|` (PDE probes).
    pub pde_residual: f64,
    /// `|H(0⁺) − H(0⁻)|` (interface probes).
    pub value_jump: f64,
    /// `|[γ0 A0 ∇H · e_n]|` (interface probes).
    pub flux_jump: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    pub rows: Vec<ProbeRow>,
    pub max_pde_residual: f64,
    /// Largest `|div(γ0 A0 ∇H)| / |H|`.
    pub max_pde_relative: f64,
    pub max_value_jump: f64,
    pub max_flux_jump: f64,
}

impl ResidualReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "kind,pole,point,h,pde_residual,value_jump,flux_jump")?;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        for r in &self.rows {
            let kind = match r.kind {
                ProbeKind::Pde => "pde",
                ProbeKind::Interface => "interface",
            };
            writeln!(
                w,
                "{kind},{},{},{:e},{:e},{:e},{:e}",
                join(&r.pole),
                join(&r.point),
                r.h,
                r.pde_residual,
                r.value_jump,
                r.flux_jump
            )?;
        }
        Ok(())
    }
}

/// Finite-difference check that `H` solves the transmission problem.
pub fn verify_two_layer<T: Real, const N: usize>(p: &TwoLayerParams<T, N>, grid: &ProbeGrid<T>) -> Result<ResidualReport, KernelError> {
    let k = TwoLayerKernel::new(p.clone())?;
    let h = grid.fd_step;
    let guard = T::lit(10.0) * h;
    let two = T::lit(2.0);

    let lateral: Vec<[T; N]> = {
        let m = grid.per_axis.max(1);
        let coord = |i: usize| {
            if m == 1 {
                T::zero()
            } else {
                -grid.extent + two * grid.extent * T::from_count(i) / T::from_count(m - 1)
            }
        };
        (0..m.pow(N as u32 - 1))
            .map(|mut idx| {
                let mut x = [T::zero(); N];
                for xi in x.iter_mut().take(N - 1) {
                    *xi = coord(idx % m);
                    idx /= m;
                }
                x
            })
            .collect()
    };

    let eval = |x: &[T; N], eta: &[T; N]| k.eval(x, eta);
    let shifted = |x: &[T; N], i: usize, d: T| {
        let mut y = *x;
        y[i] = y[i] + d;
        y
    };
    let fd_grad = |x: &[T; N], eta: &[T; N]| -> Result<[T; N], KernelError> {
        let mut g = [T::zero(); N];
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = (eval(&shifted(x, i, h), eta)? - eval(&shifted(x, i, -h), eta)?) / (two * h);
        }
        Ok(g)
    };
    let conormal = |x: &[T; N], eta: &[T; N]| -> Result<T, KernelError> {
        let g = fd_grad(x, eta)?;
        let ag = matvec(&p.a0, &g);
        Ok(p.gamma_at(x) * ag[N - 1])
    };
    let check_far = |x: &[T; N], eta: &[T; N], interface: bool| -> Result<(), KernelError> {
        let d = dist(x, eta);
        let di = if interface { T::infinity() } else { x[N - 1].abs() };
        let m = d.min(di);
        if m < guard {
            return Err(KernelError::ProbeTooCloseToSingularity { distance: m.as_f64(), required: guard.as_f64() });
        }
        Ok(())
    };
    let to_vec = |x: &[T; N]| x.iter().map(|v| v.as_f64()).collect::<Vec<_>>();

    let mut rows = Vec::new();
    for &ph in &grid.pole_heights {
        let mut eta = [T::zero(); N];
        eta[N - 1] = ph;
        if ph.abs() < guard {
            return Err(KernelError::ProbeTooCloseToSingularity { distance: ph.abs().as_f64(), required: guard.as_f64() });
        }
        for base in &lateral {
            for &z in &grid.probe_heights {
                let mut x = *base;
                x[N - 1] = z;
                check_far(&x, &eta, false)?;
                let h0 = eval(&x, &eta)?;
                let mut div = T::zero();
                for i in 0..N {
                    for j in 0..N {
                        let a = p.a0[i][j];
                        if a == T::zero() {
                            continue;
                        }
                        let dij = if i == j {
                            (eval(&shifted(&x, i, h), &eta)? - two * h0 + eval(&shifted(&x, i, -h), &eta)?) / (h * h)
                        } else {
                            let pp = eval(&shifted(&shifted(&x, i, h), j, h), &eta)?;
                            let pm = eval(&shifted(&shifted(&x, i, h), j, -h), &eta)?;
                            let mp = eval(&shifted(&shifted(&x, i, -h), j, h), &eta)?;
                            let mm = eval(&shifted(&shifted(&x, i, -h), j, -h), &eta)?;
                            (pp - pm - mp + mm) / (T::lit(4.0) * h * h)
                        };
                        div = div + a * dij;
                    }
                }
                let res = (p.gamma_at(&x) * div).abs();
                rows.push(ProbeRow {
                    kind: ProbeKind::Pde,
                    pole: to_vec(&eta),
                    point: to_vec(&x),
                    h: h0.as_f64(),
                    pde_residual: res.as_f64(),
                    value_jump: 0.0,
                    flux_jump: 0.0,
                });
            }
            // One-sided limits by quadratic extrapolation from three offsets
            // on each side, far enough that no stencil crosses the interface.
            let at = |z: T| {
                let mut x = *base;
                x[N - 1] = z;
                x
            };
            let three = T::lit(3.0);
            let (d1, d2, d3) = (guard, two * guard, three * guard);
            for d in [d1, d2, d3] {
                check_far(&at(d), &eta, true)?;
                check_far(&at(-d), &eta, true)?;
            }
            let limit = |f: &dyn Fn(T) -> Result<T, KernelError>, sign: T| -> Result<T, KernelError> {
                Ok(three * f(sign * d1)? - three * f(sign * d2)? + f(sign * d3)?)
            };
            let hv = |z: T| eval(&at(z), &eta);
            let fl = |z: T| conormal(&at(z), &eta);
            let vj = (limit(&hv, T::one())? - limit(&hv, -T::one())?).abs();
            let fj = (limit(&fl, T::one())? - limit(&fl, -T::one())?).abs();
            rows.push(ProbeRow {
                kind: ProbeKind::Interface,
                pole: to_vec(&eta),
                point: to_vec(base),
                h: limit(&hv, T::one())?.as_f64(),
                pde_residual: 0.0,
                value_jump: vj.as_f64(),
                flux_jump: fj.as_f64(),
            });
        }
    }
    let fold = |f: &dyn Fn(&ProbeRow) -> f64| rows.iter().map(f).fold(0.0, f64::max);
    Ok(ResidualReport {
        max_pde_residual: fold(&|r| r.pde_residual),
        max_pde_relative: fold(&|r| if r.kind == ProbeKind::Pde { r.pde_residual / r.h.abs() } else { 0.0 }),
        max_value_jump: fold(&|r| r.value_jump),
        max_flux_jump: fold(&|r| r.flux_jump),
        rows,
    })
}
