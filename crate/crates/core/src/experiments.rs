//! Numerical probes: stability sweeps, misfit scaling, near-interface
//! asymptotics of Green functions, chain smallness, and reconstruction.
//!
//! Everything here runs in `f64`.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::conductivity::{check_bounds, linf_distance, AffinePatch, Conductivity, ConductivityError, MatrixFieldSpec};
use crate::dense::{DenseCholesky, Matrix};
use crate::fem::{FemError, FemSystem, MeshField, PoleKernel, Region, Subtraction};
use crate::geometry::{build_augmented_mesh, pole_quadrature, Aabb, GeometryError, GeometrySpec, Mesh, PoleRegion};
use crate::kernels::KernelError;
use crate::misfit::{dn_norm_diff_operators, misfit_from_data, misfit_j, pair_boundary, pole_cache, s_volume, DnOperator, MisfitError, SigmaData};
use crate::smallness::{chain_parameters, h_bar, omega_iter, ChainParams, SmallnessError};

/// Rejection-sampling budget of [`stability_sweep`].
pub const SAMPLER_TRIES: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("no admissible conductivity after {0} draws")]
    SamplerExhausted(usize),
    #[error("perturbation is identically zero")]
    ZeroPerturbation,
    #[error("radius {radius:e} is below two cells ({min:e})")]
    RadiiBelowResolution { radius: f64, min: f64 },
    #[error("chain point {0:?} lies outside the meshed domain")]
    ChainPointOutsideMesh([f64; 3]),
    #[error("line search failed at iteration {0}: damping fell below 1e-8")]
    LineSearchFailure(usize),
    #[error("conductivity violates the a-priori bounds: {0}")]
    Inadmissible(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Conductivity(#[from] ConductivityError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Misfit(#[from] MisfitError),
    #[error(transparent)]
    Smallness(#[from] SmallnessError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// The two pole grids `D_y`, `D_z`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoleRegions {
    pub dy: PoleRegion<f64>,
    pub dz: PoleRegion<f64>,
}

impl PoleRegions {
    pub fn new(spec: &GeometrySpec<f64>, dy: Aabb<f64>, dz: Aabb<f64>, per_axis: usize) -> Result<Self, GeometryError> {
        Ok(Self { dy: pole_quadrature(spec, dy, per_axis)?, dz: pole_quadrature(spec, dz, per_axis)? })
    }

    /// `D_y = D_z` = [`GeometrySpec::reference_pole_box`].
    pub fn reference(spec: &GeometrySpec<f64>, per_axis: usize) -> Result<Self, GeometryError> {
        let b = spec.reference_pole_box();
        Self::new(spec, b, b, per_axis)
    }
}

fn admissible(c: &Conductivity<f64>, mesh: &Mesh<f64>, gamma_bar: f64, lambda: f64) -> bool {
    check_bounds(c, mesh, gamma_bar, lambda).pass()
}

// ---------------------------------------------------------------------------
// stability sweep

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepOptions {
    pub gamma_bar: f64,
    pub lambda: f64,
    pub a_field: MatrixFieldSpec<f64>,
    /// Offsets are drawn uniformly from this interval.
    pub offset_range: (f64, f64),
    /// Gradient components are drawn from `[−g, g]`.
    pub gradient_max: f64,
    /// Draw `σ⁽²⁾ = σ⁽¹⁾` (degenerate pairs).
    pub identical: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            gamma_bar: 5.0,
            lambda: 5.0,
            a_field: MatrixFieldSpec::identity(),
            offset_range: (0.6, 2.0),
            gradient_max: 0.5,
            identical: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairRecord {
    pub index: usize,
    pub sigma1: Conductivity<f64>,
    pub sigma2: Conductivity<f64>,
    /// `E`, the L∞ distance of the scalar factors.
    pub e: f64,
    pub sigma_dist: f64,
    pub sqrt_j: f64,
    pub dn_diff: f64,
    pub dn_converged: bool,
    pub degenerate: bool,
    pub ratio_theorem: Option<f64>,
    pub ratio_corollary: Option<f64>,
    /// `√J ≤ C_d · ‖Λ₁ − Λ₂‖_*` with the run constant.
    pub corollary_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub max_ratio_theorem: Option<f64>,
    pub max_ratio_corollary: Option<f64>,
    /// `max √J / ‖Λ₁ − Λ₂‖_*` over the pairs.
    pub c_d: Option<f64>,
    pub n_degenerate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityReport {
    pub seed: u64,
    pub resolution: usize,
    pub n_cells: usize,
    pub n_vertices: usize,
    pub pairs: Vec<PairRecord>,
    pub summary: SweepSummary,
}

fn draw_conductivity(rng: &mut ChaCha8Rng, n_sub: usize, mesh: &Mesh<f64>, opts: &SweepOptions) -> Result<Conductivity<f64>, ExperimentError> {
    let g = opts.gradient_max;
    for _ in 0..SAMPLER_TRIES {
        let patches = (1..=n_sub)
            .map(|m| {
                let s = rng.gen_range(opts.offset_range.0..=opts.offset_range.1);
                let grad = [rng.gen_range(-g..=g), rng.gen_range(-g..=g), rng.gen_range(-g..=g)];
                AffinePatch::new(m, s, grad)
            })
            .collect();
        let c = Conductivity::new(patches, opts.a_field.clone())?;
        if admissible(&c, mesh, opts.gamma_bar, opts.lambda) {
            return Ok(c);
        }
    }
    Err(ExperimentError::SamplerExhausted(SAMPLER_TRIES))
}

/// Draws `n_pairs` admissible pairs and compares `‖σ⁽¹⁾ − σ⁽²⁾‖_∞` with
/// `√J` and with `‖Λ₁ − Λ₂‖_*`.
pub fn stability_sweep(
    spec: &GeometrySpec<f64>,
    resolution: usize,
    poles: &PoleRegions,
    n_pairs: usize,
    seed: u64,
    opts: &SweepOptions,
) -> Result<StabilityReport, ExperimentError> {
    if n_pairs == 0 {
        return Err(ExperimentError::InvalidInput("n_pairs must be at least 1".into()));
    }
    let mesh = build_augmented_mesh(spec, resolution)?;
    let n_sub = spec.n_sub();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut drawn = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let c1 = draw_conductivity(&mut rng, n_sub, &mesh, opts)?;
        let c2 = if opts.identical { c1.clone() } else { draw_conductivity(&mut rng, n_sub, &mesh, opts)? };
        drawn.push((c1, c2));
    }
    let lap = Conductivity::homogeneous(n_sub, 1.0);
    let gram = DnOperator::new(&FemSystem::assemble_region(&mesh, &lap, Region::Physical)?)?;
    let raw = drawn
        .par_iter()
        .enumerate()
        .map(|(index, (c1, c2))| -> Result<_, ExperimentError> {
            let dist = linf_distance(c1, c2, &mesh)?;
            let rep = misfit_j(c1, c2, &mesh, &poles.dy, &poles.dz)?;
            let j = if rep.j <= rep.floor() { 0.0 } else { rep.j };
            let m1 = DnOperator::new(&FemSystem::assemble_region(&mesh, c1, Region::Physical)?)?;
            let m2 = DnOperator::new(&FemSystem::assemble_region(&mesh, c2, Region::Physical)?)?;
            let dn = dn_norm_diff_operators(&m1, &m2, &gram)?;
            Ok((index, dist, j.sqrt(), dn))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let c_d = raw
        .iter()
        .filter(|(_, _, sj, dn)| *sj > 0.0 && dn.value > 0.0)
        .map(|(_, _, sj, dn)| sj / dn.value)
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let mut pairs = Vec::with_capacity(n_pairs);
    for ((index, dist, sqrt_j, dn), (c1, c2)) in raw.into_iter().zip(drawn) {
        let degenerate = dist.gamma_dist == 0.0 || sqrt_j == 0.0 || dn.value == 0.0;
        pairs.push(PairRecord {
            index,
            sigma1: c1,
            sigma2: c2,
            e: dist.gamma_dist,
            sigma_dist: dist.sigma_dist,
            sqrt_j,
            dn_diff: dn.value,
            dn_converged: dn.converged,
            degenerate,
            ratio_theorem: (!degenerate).then(|| dist.sigma_dist / sqrt_j),
            ratio_corollary: (!degenerate).then(|| dist.sigma_dist / dn.value),
            corollary_holds: sqrt_j <= c_d.unwrap_or(0.0) * dn.value * (1.0 + 1e-12),
        });
    }
    let max_of = |f: fn(&PairRecord) -> Option<f64>| pairs.iter().filter_map(f).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let summary = SweepSummary {
        max_ratio_theorem: max_of(|p| p.ratio_theorem),
        max_ratio_corollary: max_of(|p| p.ratio_corollary),
        c_d,
        n_degenerate: pairs.iter().filter(|p| p.degenerate).count(),
    };
    Ok(StabilityReport { seed, resolution, n_cells: mesh.n_cells(), n_vertices: mesh.n_vertices(), pairs, summary })
}

impl StabilityReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "pair,E,sigma_dist,sqrt_J,dn_diff,ratio_theorem,ratio_corollary,degenerate")?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
        for p in &self.pairs {
            writeln!(
                w,
                "{},{:e},{:e},{:e},{:e},{},{},{}",
                p.index,
                p.e,
                p.sigma_dist,
                p.sqrt_j,
                p.dn_diff,
                opt(p.ratio_theorem),
                opt(p.ratio_corollary),
                p.degenerate
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// scaling

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub t: Vec<f64>,
    pub e: Vec<f64>,
    pub j: Vec<f64>,
    pub sqrt_j: Vec<f64>,
    /// Slope of `log J` against `log t`.
    pub slope_j: f64,
    /// Slope of `log √J` against `log E`.
    pub slope_sqrt_j_e: f64,
    /// `max |E(t)/t − E(t₀)/t₀| / (E(t₀)/t₀)`.
    pub e_linearity_error: f64,
}

/// `σ⁽¹⁾ + t·δ`, `δ` given patch by patch.
pub fn perturbed(c: &Conductivity<f64>, delta: &[AffinePatch<f64>], t: f64) -> Conductivity<f64> {
    let mut out = c.clone();
    for d in delta {
        let p = &mut out.patches[d.m - 1];
        p.s += t * d.s;
        for i in 0..3 {
            p.grad[i] += t * d.grad[i];
        }
    }
    out
}

pub fn scaling_probe(
    c1: &Conductivity<f64>,
    delta: &[AffinePatch<f64>],
    t_grid: &[f64],
    mesh: &Mesh<f64>,
    poles: &PoleRegions,
) -> Result<ScalingReport, ExperimentError> {
    if delta.iter().all(|d| d.s == 0.0 && d.grad.iter().all(|g| *g == 0.0)) {
        return Err(ExperimentError::ZeroPerturbation);
    }
    if let Some(d) = delta.iter().find(|d| d.m == 0 || d.m > c1.n_sub()) {
        return Err(ExperimentError::InvalidInput(format!("perturbation for subdomain {} of {}", d.m, c1.n_sub())));
    }
    if t_grid.len() < 2 || t_grid.iter().any(|t| !(*t > 0.0)) {
        return Err(ExperimentError::InvalidInput("t grid needs at least two positive values".into()));
    }
    let sys1 = FemSystem::assemble(mesh, c1)?;
    let base = pole_cache(&sys1, &poles.dy.nodes)?;
    let mut e = Vec::new();
    let mut j = Vec::new();
    for &t in t_grid {
        let c2 = perturbed(c1, delta, t);
        if c2.patches.iter().any(|p| crate::conductivity::subdomain_bounds(mesh, p.m).is_some_and(|b| p.range_on(&b).0 <= 0.0)) {
            return Err(ExperimentError::Inadmissible(format!("γ not positive at t = {t}")));
        }
        e.push(linf_distance(c1, &c2, mesh)?.gamma_dist);
        let sys2 = FemSystem::assemble(mesh, &c2)?;
        let other = pole_cache(&sys2, &poles.dz.nodes)?;
        j.push(misfit_from_data(&base, &other, &poles.dy, &poles.dz, mesh.resolution).j);
    }
    let sqrt_j: Vec<f64> = j.iter().map(|v| v.sqrt()).collect();
    let lt: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
    let lj: Vec<f64> = j.iter().map(|v| v.ln()).collect();
    let le: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    let ls: Vec<f64> = sqrt_j.iter().map(|v| v.ln()).collect();
    let k0 = e[0] / t_grid[0];
    let e_linearity_error = e.iter().zip(t_grid).map(|(e, t)| (e / t - k0).abs() / k0).fold(0.0, f64::max);
    Ok(ScalingReport {
        t: t_grid.to_vec(),
        slope_j: fit_slope(&lt, &lj),
        slope_sqrt_j_e: fit_slope(&le, &ls),
        e,
        j,
        sqrt_j,
        e_linearity_error,
    })
}

impl ScalingReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,E,J,sqrt_J")?;
        for i in 0..self.t.len() {
            writeln!(w, "{:e},{:e},{:e},{:e}", self.t[i], self.e[i], self.j[i], self.sqrt_j[i])?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// asymptotics

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsymptoticsSample {
    pub r: f64,
    /// Pole on the `D_k` side.
    pub y: [f64; 3],
    /// Evaluation point on the `D_{k+1}` side.
    pub x: [f64; 3],
    pub green: f64,
    pub leading: f64,
    pub residual_0: f64,
    pub relative_0: f64,
    /// Same residual with the roles of `x` and `y` exchanged.
    pub relative_0_swapped: f64,
    /// Normal-derivative residual, central differences in `x`.
    pub residual_1: f64,
    pub relative_1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsymptoticsReport {
    pub interface: usize,
    pub resolution: usize,
    pub point: [f64; 3],
    pub gamma_minus: f64,
    pub gamma_plus: f64,
    /// `2 / (γ⁻ + γ⁺)`.
    pub c_tilde: f64,
    pub samples: Vec<AsymptoticsSample>,
    /// Slope of `log residual_0` against `log r`.
    pub exponent_0: f64,
    pub exponent_1: f64,
    pub monotone: bool,
    /// `max |relative_0 − relative_0_swapped| / relative_0`.
    pub reciprocity_gap: f64,
}

/// Compares `G(x, y)` across interface `k` (between `D_k` and `D_{k+1}`)
/// with `c̃ K(x, y)`, `K` the kernel of `A(P)`, at `y = P + r e₃`,
/// `x = P − r e₃` for each radius.
pub fn asymptotics_probe(
    spec: &GeometrySpec<f64>,
    c: &Conductivity<f64>,
    k: usize,
    radii: &[f64],
    resolution: usize,
) -> Result<AsymptoticsReport, ExperimentError> {
    if k == 0 || k >= spec.n_sub() {
        return Err(ExperimentError::InvalidInput(format!("interface {k} is not between two layers of {}", spec.n_sub())));
    }
    if radii.is_empty() || radii.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(ExperimentError::InvalidInput("radii must be strictly decreasing".into()));
    }
    let mesh = build_augmented_mesh(spec, resolution)?;
    let h = mesh.cell_size();
    if let Some(&r) = radii.iter().find(|&&r| r < 2.0 * h) {
        return Err(ExperimentError::RadiiBelowResolution { radius: r, min: 2.0 * h });
    }
    let p = spec.chain_point(k + 1);
    let sys = FemSystem::assemble(&mesh, c)?;
    let kernel = PoleKernel::two_layer(c, k, p)?;
    let leading = PoleKernel::homogeneous(1.0, c.a_field.eval(&p))?;
    let gamma_minus = c.patch(k).eval(&p);
    let gamma_plus = c.patch(k + 1).eval(&p);
    let c_tilde = 2.0 / (gamma_minus + gamma_plus);
    let samples = radii
        .par_iter()
        .map(|&r| -> Result<AsymptoticsSample, ExperimentError> {
            let y = [p[0], p[1], p[2] + r];
            let x = [p[0], p[1], p[2] - r];
            for q in [&x, &y] {
                if mesh.locate(q).is_none() {
                    return Err(ExperimentError::InvalidInput(format!("point {q:?} outside the mesh")));
                }
            }
            let gy = sys.green_with_kernel(&y, kernel.clone(), Subtraction::Global)?;
            let gx = sys.green_with_kernel(&x, kernel.clone(), Subtraction::Global)?;
            let lead = c_tilde * leading.value(&x, &y)?;
            let green = gy.value_at(&mesh, &x)?;
            let swapped = gx.value_at(&mesh, &y)?;
            let d = 0.5 * h;
            let up = [x[0], x[1], x[2] + d];
            let dn = [x[0], x[1], x[2] - d];
            let dg = (gy.value_at(&mesh, &up)? - gy.value_at(&mesh, &dn)?) / (2.0 * d);
            let dl = c_tilde * (leading.value(&up, &y)? - leading.value(&dn, &y)?) / (2.0 * d);
            Ok(AsymptoticsSample {
                r,
                y,
                x,
                green,
                leading: lead,
                residual_0: (green - lead).abs(),
                relative_0: (green - lead).abs() / green.abs(),
                relative_0_swapped: (swapped - lead).abs() / swapped.abs(),
                residual_1: (dg - dl).abs(),
                relative_1: (dg - dl).abs() / dl.abs(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let lr: Vec<f64> = samples.iter().map(|s| s.r.ln()).collect();
    let fit = |f: fn(&AsymptoticsSample) -> f64| {
        if samples.len() < 2 {
            f64::NAN
        } else {
            fit_slope(&lr, &samples.iter().map(|s| f(s).ln()).collect::<Vec<_>>())
        }
    };
    Ok(AsymptoticsReport {
        interface: k,
        resolution,
        point: p,
        gamma_minus,
        gamma_plus,
        c_tilde,
        exponent_0: fit(|s| s.residual_0),
        exponent_1: fit(|s| s.residual_1),
        monotone: samples.windows(2).all(|w| w[1].relative_0 < w[0].relative_0),
        reciprocity_gap: samples.iter().map(|s| (s.relative_0 - s.relative_0_swapped).abs() / s.relative_0).fold(0.0, f64::max),
        samples,
    })
}

impl AsymptoticsReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "r,G,leading,residual_0,relative_0,relative_0_swapped,residual_1,relative_1")?;
        for s in &self.samples {
            writeln!(w, "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}", s.r, s.green, s.leading, s.residual_0, s.relative_0, s.relative_0_swapped, s.residual_1, s.relative_1)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// smallness

/// Candidate constants tried by [`smallness_probe`].
pub const SMALLNESS_CONSTANTS: [f64; 4] = [2.0, 5.0, 10.0, 50.0];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmallnessBound {
    pub c: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmallnessReport {
    pub k: usize,
    pub r: f64,
    pub chain: ChainParams<f64>,
    pub h_bar: usize,
    pub lambda_h: f64,
    /// `w = P_{k+1} + λ_h̄ e₃`.
    pub w: [f64; 3],
    /// `r0^{n−2} · max |S_{U_0}|` over the pole grids.
    pub eps0: f64,
    pub e: f64,
    pub lhs: f64,
    /// `r0^{2−n} ε₀`.
    pub estim0_bound: f64,
    pub bounds: Vec<SmallnessBound>,
    pub smallest_c: Option<f64>,
}

/// Evaluates both sides of the propagation-of-smallness estimate at the
/// chain point `w_h̄(P_{k+1})` for radius `r`.
pub fn smallness_probe(
    spec: &GeometrySpec<f64>,
    c1: &Conductivity<f64>,
    c2: &Conductivity<f64>,
    mesh: &Mesh<f64>,
    poles: &PoleRegions,
    k: usize,
    r: f64,
) -> Result<SmallnessReport, ExperimentError> {
    if k >= spec.n_sub() {
        return Err(ExperimentError::InvalidInput(format!("chain index {k} beyond {} layers", spec.n_sub())));
    }
    let chain = chain_parameters(spec.lipschitz, spec.r0)?;
    let hb = h_bar(r, &chain)?;
    let lambda_h = chain.lambda(hb);
    let q = spec.chain_point(k + 1);
    // ν points out of D_k, i.e. downwards, so w sits above the interface
    let w = [q[0], q[1], q[2] + lambda_h];
    match mesh.locate(&w) {
        Some((cell, _)) if mesh.cell_domain[cell] <= k => {}
        _ => return Err(ExperimentError::ChainPointOutsideMesh(w)),
    }
    let (s1, s2) = rayon::join(|| FemSystem::assemble(mesh, c1), || FemSystem::assemble(mesh, c2));
    let (s1, s2) = (s1?, s2?);
    let a = pole_cache(&s1, &poles.dy.nodes)?;
    let b = pole_cache(&s2, &poles.dz.nodes)?;
    let sup = misfit_from_data(&a, &b, &poles.dy, &poles.dz, mesh.resolution).samples.iter().fold(0.0f64, |m, s| m.max(s.value.abs()));
    // n = 3
    let eps0 = spec.r0 * sup;
    let e = linf_distance(c1, c2, mesh)?.gamma_dist;
    let g1 = s1.green(&w)?;
    let g2 = s2.green(&w)?;
    let lhs = s_volume(k, &g1, &g2, c1, c2, mesh)?.abs();
    let mut bounds = Vec::with_capacity(SMALLNESS_CONSTANTS.len());
    for &cc in &SMALLNESS_CONSTANTS {
        let total = e + eps0;
        let rhs = if total > 0.0 && eps0 > 0.0 {
            let om = omega_iter(1.0 / cc, 2 * k, eps0 / total)?;
            cc.powi(hb as i32) * total * om.powf(cc.powi(-(hb as i32)))
        } else {
            0.0
        };
        bounds.push(SmallnessBound { c: cc, rhs, holds: lhs <= rhs });
    }
    let smallest_c = bounds.iter().find(|b| b.holds).map(|b| b.c);
    Ok(SmallnessReport {
        k,
        r,
        chain,
        h_bar: hb,
        lambda_h,
        w,
        eps0,
        e,
        lhs,
        estim0_bound: eps0 / spec.r0,
        bounds,
        smallest_c,
    })
}

impl SmallnessReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "C,lhs,rhs,holds")?;
        for b in &self.bounds {
            writeln!(w, "{:e},{:e},{:e},{}", b.c, self.lhs, b.rhs, b.holds)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// reconstruction

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconstructOptions {
    pub max_iter: usize,
    /// Stop when the accepted coefficient update is below this (max norm).
    pub tol: f64,
    /// Indices into [`Conductivity::coefficients`] that are unknown; all
    /// when `None`.
    pub free: Option<Vec<usize>>,
    pub fd_step: f64,
    pub gamma_bar: f64,
    pub lambda: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self { max_iter: 10, tol: 1e-6, free: None, fd_step: 1e-4, gamma_bar: 5.0, lambda: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub e_to_truth: f64,
    /// Step length of the accepted update (1 for the initial record).
    pub damping: f64,
    pub coefficients: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ObjectiveAtFloor,
    SmallUpdate,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub result: Conductivity<f64>,
    pub iterations: usize,
    pub stop: StopReason,
    pub trace: Vec<IterationRecord>,
}

impl ReconstructionReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iter,objective,E_to_truth,damping")?;
        for t in &self.trace {
            writeln!(w, "{},{:e},{:e},{:e}", t.iter, t.objective, t.e_to_truth, t.damping)?;
        }
        Ok(())
    }
}

struct Forward<'a> {
    mesh: &'a Mesh<f64>,
    poles: &'a PoleRegions,
    data: Vec<SigmaData<f64>>,
    sqrt_w: Vec<f64>,
}

impl Forward<'_> {
    /// Weighted `S_{U_0}(p, q; σ, σ_true)` over all pole pairs.
    fn residuals(&self, c: &Conductivity<f64>) -> Result<Vec<f64>, ExperimentError> {
        Ok(self.residuals_scaled(c)?.0)
    }

    /// Residuals and the largest weighted magnitude of their terms.
    fn residuals_scaled(&self, c: &Conductivity<f64>) -> Result<(Vec<f64>, f64), ExperimentError> {
        let sys = FemSystem::assemble(self.mesh, c)?;
        let a = pole_cache(&sys, &self.poles.dy.nodes)?;
        let mut r = Vec::with_capacity(self.sqrt_w.len());
        let mut scale = 0.0f64;
        for ap in &a {
            for bq in &self.data {
                let (v, sc) = pair_boundary(ap, bq);
                let w = self.sqrt_w[r.len()];
                r.push(v * w);
                scale = scale.max(sc * w);
            }
        }
        Ok((r, scale))
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Damped Gauss–Newton on the affine coefficients, minimizing the misfit
/// against the Σ data of `c_true`.
pub fn reconstruct(
    c_true: &Conductivity<f64>,
    c_init: &Conductivity<f64>,
    mesh: &Mesh<f64>,
    poles: &PoleRegions,
    opts: &ReconstructOptions,
) -> Result<ReconstructionReport, ExperimentError> {
    if !c_true.compatible_with(c_init) {
        return Err(ConductivityError::IncompatibleFields.into());
    }
    if !admissible(c_init, mesh, opts.gamma_bar, opts.lambda) {
        return Err(ExperimentError::Inadmissible("initial guess".into()));
    }
    let n_coef = 4 * c_init.n_sub();
    let free: Vec<usize> = opts.free.clone().unwrap_or_else(|| (0..n_coef).collect());
    if free.is_empty() || free.iter().any(|&i| i >= n_coef) {
        return Err(ExperimentError::InvalidInput("free coefficient indices out of range".into()));
    }
    let sys_true = FemSystem::assemble(mesh, c_true)?;
    let data = pole_cache(&sys_true, &poles.dz.nodes)?;
    let sqrt_w: Vec<f64> = poles.dy.weights.iter().flat_map(|wy| poles.dz.weights.iter().map(move |wz| (wy * wz).sqrt())).collect();
    let fwd = Forward { mesh, poles, data, sqrt_w };
    let e_to_truth = |c: &Conductivity<f64>| linf_distance(c, c_true, mesh).map(|d| d.gamma_dist);

    let mut coef = c_init.coefficients();
    let mut c = c_init.clone();
    let (mut r, scale) = fwd.residuals_scaled(&c)?;
    let mut obj = sum_sq(&r);
    // roundoff level of the objective
    let floor = (1e-14 * scale).powi(2) * r.len() as f64;
    let mut trace = vec![IterationRecord { iter: 0, objective: obj, e_to_truth: e_to_truth(&c)?, damping: 1.0, coefficients: coef.clone() }];
    if obj <= floor {
        return Ok(ReconstructionReport { result: c, iterations: 0, stop: StopReason::ObjectiveAtFloor, trace });
    }
    let mut stop = StopReason::MaxIterations;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        let cols = free
            .par_iter()
            .map(|&i| -> Result<Vec<f64>, ExperimentError> {
                let mut cp = coef.clone();
                cp[i] += opts.fd_step;
                let rp = fwd.residuals(&c.with_coefficients(&cp))?;
                Ok(rp.iter().zip(&r).map(|(a, b)| (a - b) / opts.fd_step).collect())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let nf = free.len();
        let mut jtj = Matrix::zeros(nf, nf);
        let mut jtr = vec![0.0; nf];
        for a in 0..nf {
            for b in 0..nf {
                jtj[(a, b)] = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum();
            }
            jtr[a] = -cols[a].iter().zip(&r).map(|(x, y)| x * y).sum::<f64>();
        }
        let diag_max = (0..nf).map(|a| jtj[(a, a)]).fold(0.0, f64::max);
        for a in 0..nf {
            jtj[(a, a)] += 1e-12 * diag_max;
        }
        let step = DenseCholesky::new(&jtj).ok_or(ExperimentError::LineSearchFailure(it))?.solve(&jtr);
        let mut alpha = 1.0;
        let accepted = loop {
            if alpha < 1e-8 {
                break None;
            }
            let mut trial = coef.clone();
            for (a, &i) in free.iter().enumerate() {
                trial[i] += alpha * step[a];
            }
            let ct = c.with_coefficients(&trial);
            if admissible(&ct, mesh, opts.gamma_bar, opts.lambda) {
                let rt = fwd.residuals(&ct)?;
                let ot = sum_sq(&rt);
                if ot < obj {
                    break Some((trial, ct, rt, ot));
                }
            }
            alpha *= 0.5;
        };
        let Some((trial, ct, rt, ot)) = accepted else {
            return Err(ExperimentError::LineSearchFailure(it));
        };
        let update = step.iter().map(|s| (alpha * s).abs()).fold(0.0, f64::max);
        coef = trial;
        c = ct;
        r = rt;
        obj = ot;
        trace.push(IterationRecord { iter: it, objective: obj, e_to_truth: e_to_truth(&c)?, damping: alpha, coefficients: coef.clone() });
        if obj <= floor {
            stop = StopReason::ObjectiveAtFloor;
            break;
        }
        if update < opts.tol {
            stop = StopReason::SmallUpdate;
            break;
        }
    }
    Ok(ReconstructionReport { result: c, iterations: it, stop, trace })
}
