//! Singular-solution functionals `S_{U_k}`, the misfit `J`, and the local
//! Dirichlet-to-Neumann map on `Σ`.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::conductivity::{mat3_vec, Conductivity};
use crate::dense::{DenseCholesky, Matrix};
use crate::fem::{bary_point, box_distance, dot, quadrature_depth, subdivided_rule, FemError, FemSystem, GreenField, MeshField, Region};
use crate::geometry::{Mesh, PoleRegion};
use crate::scalar::{dot3, Point3, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MisfitError {
    #[error("fields or systems live on different meshes")]
    MismatchedMesh,
    #[error("pole {0:?} lies inside the integration region")]
    PoleInsideRegion([f64; 3]),
    #[error("boundary data is nonzero at vertex {0}, which is not interior to Σ")]
    DataNotSupportedOnSigma(usize),
    #[error("the D-N operator needs systems on the physical region")]
    WrongRegion,
    #[error(transparent)]
    Fem(#[from] FemError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMethod {
    Boundary,
    Volume,
}

/// One evaluation of `S_{U_k}(y, z)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SingularSolutionSample<T> {
    pub y: Point3<T>,
    pub z: Point3<T>,
    pub k: usize,
    pub value: T,
    pub method: SampleMethod,
    pub weight_y: T,
    pub weight_z: T,
    /// `Σ |terms|` of the discrete sum, the size roundoff is measured against.
    pub scale: T,
}

/// Trace and variational flux of one Green function on the `Σ` vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaData<T> {
    pub trace: Vec<T>,
    pub flux: Vec<T>,
}

pub fn sigma_data<T: Real>(sys: &FemSystem<'_, T>, g: &GreenField<T>) -> Result<SigmaData<T>, FemError> {
    let f = sys.green_flux_on_sigma(g)?;
    let trace = f.vertices.iter().map(|&v| g.values[v]).collect();
    Ok(SigmaData { trace, flux: f.weights })
}

/// `Σ_v G₂(v) F₁(v) − G₁(v) F₂(v)` and the sum of absolute terms.
pub fn pair_boundary<T: Real>(a: &SigmaData<T>, b: &SigmaData<T>) -> (T, T) {
    let mut s = T::zero();
    let mut scale = T::zero();
    for i in 0..a.trace.len() {
        let t1 = b.trace[i] * a.flux[i];
        let t2 = a.trace[i] * b.flux[i];
        s = s + (t1 - t2);
        scale = scale + t1.abs() + t2.abs();
    }
    (s, scale)
}

fn same_mesh<T: Real>(a: &FemSystem<'_, T>, b: &FemSystem<'_, T>) -> Result<(), MisfitError> {
    if std::ptr::eq(a.mesh(), b.mesh()) {
        Ok(())
    } else {
        Err(MisfitError::MismatchedMesh)
    }
}

/// `∫_Σ G₂ σ⁽¹⁾∇G₁·ν − G₁ σ⁽²⁾∇G₂·ν` from traces and variational fluxes.
pub fn s_boundary<T: Real>(sys1: &FemSystem<'_, T>, g1: &GreenField<T>, sys2: &FemSystem<'_, T>, g2: &GreenField<T>) -> Result<T, MisfitError> {
    same_mesh(sys1, sys2)?;
    let a = sigma_data(sys1, g1)?;
    let b = sigma_data(sys2, g2)?;
    Ok(pair_boundary(&a, &b).0)
}

/// `∫_{U_k} (σ⁽¹⁾ − σ⁽²⁾)∇F₁·∇F₂`, `U_k` the union of layers below
/// interface `k` (`U_0 = Ω`).
pub fn s_volume<T: Real, F1: MeshField<T>, F2: MeshField<T>>(
    k: usize,
    f1: &F1,
    f2: &F2,
    c1: &Conductivity<T>,
    c2: &Conductivity<T>,
    mesh: &Mesh<T>,
) -> Result<T, MisfitError> {
    let poles: Vec<Point3<T>> = f1.poles().into_iter().chain(f2.poles()).collect();
    for p in &poles {
        if let Some((cell, _)) = mesh.locate(p) {
            if mesh.cell_domain[cell] > k {
                return Err(MisfitError::PoleInsideRegion(p.map(|v| v.as_f64())));
            }
        }
    }
    let rules: Vec<Vec<([T; 4], T)>> = (0..4).map(subdivided_rule).collect();
    let h = mesh.cell_size();
    let mut total = T::zero();
    for cell in 0..mesh.n_cells() {
        let dom = mesh.cell_domain[cell];
        if dom <= k {
            continue;
        }
        let p = mesh.cell_points(cell);
        let gap = poles.iter().fold(T::infinity(), |m, y| m.min(box_distance(&p, y)));
        let rule = &rules[if poles.is_empty() { 0 } else { quadrature_depth(gap / h) }];
        let vol = mesh.cell_volume(cell);
        let mut acc = T::zero();
        for (lam, w) in rule {
            let x = bary_point(&p, lam);
            let s1 = c1.sigma_unchecked(&x, dom);
            let s2 = c2.sigma_unchecked(&x, dom);
            let mut ds = s1;
            let mut zero = true;
            for a in 0..3 {
                for b in 0..3 {
                    ds[a][b] = s1[a][b] - s2[a][b];
                    zero &= ds[a][b] == T::zero();
                }
            }
            if zero {
                continue;
            }
            let g1 = f1.grad_at(mesh, cell, &x)?;
            let g2 = f2.grad_at(mesh, cell, &x)?;
            acc = acc + *w * dot3(&mat3_vec(&ds, &g1), &g2);
        }
        total = total + acc * vol;
    }
    Ok(total)
}

/// `∂_{y_i}∂_{z_j} S_{U_k}(y, z)` by central differences in each pole.
#[allow(clippy::too_many_arguments)]
pub fn s_second_derivative<T: Real>(
    k: usize,
    sys1: &FemSystem<'_, T>,
    sys2: &FemSystem<'_, T>,
    y: &Point3<T>,
    z: &Point3<T>,
    axes: (usize, usize),
    step: Option<T>,
) -> Result<T, MisfitError> {
    same_mesh(sys1, sys2)?;
    let d1 = sys1.green_pole_derivative(y, axes.0, step)?;
    let d2 = sys2.green_pole_derivative(z, axes.1, step)?;
    s_volume(k, &d1, &d2, sys1.conductivity(), sys2.conductivity(), sys1.mesh())
}

/// Samples and value of `J = Σ_p Σ_q w_p w_q |S_{U_0}(p, q)|²`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MisfitReport<T> {
    pub j: T,
    pub resolution: usize,
    pub n_poles_y: usize,
    pub n_poles_z: usize,
    /// Largest sample scale; `J` below `(1e−14·scale·Σw)²` is zero.
    pub scale: T,
    pub samples: Vec<SingularSolutionSample<T>>,
}

impl<T: Real> MisfitReport<T> {
    /// Roundoff level of `J` for this run.
    pub fn floor(&self) -> T {
        let wy: T = self.samples.iter().map(|s| s.weight_y).fold(T::zero(), |a, b| a.max(b));
        let wz: T = self.samples.iter().map(|s| s.weight_z).fold(T::zero(), |a, b| a.max(b));
        let n = T::from_count(self.samples.len().max(1));
        let e = T::lit(1e-14) * self.scale * n * wy * wz;
        e * e
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "y0,y1,y2,z0,z1,z2,weight_y,weight_z,S,method")?;
        for s in &self.samples {
            writeln!(
                w,
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},boundary",
                s.y[0].as_f64(),
                s.y[1].as_f64(),
                s.y[2].as_f64(),
                s.z[0].as_f64(),
                s.z[1].as_f64(),
                s.z[2].as_f64(),
                s.weight_y.as_f64(),
                s.weight_z.as_f64(),
                s.value.as_f64()
            )?;
        }
        Ok(())
    }
}

/// Σ data of the Green functions of one system at a set of poles, solved
/// in parallel and returned in pole order.
pub fn pole_cache<T: Real>(sys: &FemSystem<'_, T>, poles: &[Point3<T>]) -> Result<Vec<SigmaData<T>>, MisfitError> {
    poles
        .par_iter()
        .map(|p| {
            let g = sys.green(p)?;
            Ok(sigma_data(sys, &g)?)
        })
        .collect::<Result<Vec<_>, FemError>>()
        .map_err(MisfitError::from)
}

/// Misfit with already assembled systems on the augmented region.
pub fn misfit_j_with_systems<T: Real>(
    sys1: &FemSystem<'_, T>,
    sys2: &FemSystem<'_, T>,
    dy: &PoleRegion<T>,
    dz: &PoleRegion<T>,
) -> Result<MisfitReport<T>, MisfitError> {
    same_mesh(sys1, sys2)?;
    let a = pole_cache(sys1, &dy.nodes)?;
    let b = pole_cache(sys2, &dz.nodes)?;
    Ok(misfit_from_data(&a, &b, dy, dz, sys1.mesh().resolution))
}

/// Misfit from cached Σ data, `a` over the nodes of `dy` and `b` over `dz`.
pub fn misfit_from_data<T: Real>(a: &[SigmaData<T>], b: &[SigmaData<T>], dy: &PoleRegion<T>, dz: &PoleRegion<T>, resolution: usize) -> MisfitReport<T> {
    let mut samples = Vec::with_capacity(a.len() * b.len());
    let mut j = T::zero();
    let mut scale = T::zero();
    for (p, ap) in a.iter().enumerate() {
        for (q, bq) in b.iter().enumerate() {
            let (s, sc) = pair_boundary(ap, bq);
            let (wy, wz) = (dy.weights[p], dz.weights[q]);
            j = j + wy * wz * s * s;
            scale = scale.max(sc);
            samples.push(SingularSolutionSample {
                y: dy.nodes[p],
                z: dz.nodes[q],
                k: 0,
                value: s,
                method: SampleMethod::Boundary,
                weight_y: wy,
                weight_z: wz,
                scale: sc,
            });
        }
    }
    MisfitReport { j, resolution, n_poles_y: a.len(), n_poles_z: b.len(), scale, samples }
}

/// `J(σ⁽¹⁾, σ⁽²⁾)` on `mesh` with pole grids `dy`, `dz` in D0.
pub fn misfit_j<T: Real>(
    c1: &Conductivity<T>,
    c2: &Conductivity<T>,
    mesh: &Mesh<T>,
    dy: &PoleRegion<T>,
    dz: &PoleRegion<T>,
) -> Result<MisfitReport<T>, MisfitError> {
    let (s1, s2) = rayon::join(|| FemSystem::assemble(mesh, c1), || FemSystem::assemble(mesh, c2));
    misfit_j_with_systems(&s1?, &s2?, dy, dz)
}

fn check_sigma_support<T: Real>(mesh: &Mesh<T>, data: &[T]) -> Result<(), MisfitError> {
    if data.len() != mesh.n_vertices() {
        return Err(FemError::LengthMismatch { expected: mesh.n_vertices(), got: data.len() }.into());
    }
    match data.iter().enumerate().find(|(v, x)| **x != T::zero() && !mesh.sigma_interior[*v]) {
        Some((v, _)) => Err(MisfitError::DataNotSupportedOnSigma(v)),
        None => Ok(()),
    }
}

fn physical(sys: &FemSystem<'_, impl Real>) -> Result<(), MisfitError> {
    if sys.region() == Region::Physical {
        Ok(())
    } else {
        Err(MisfitError::WrongRegion)
    }
}

/// `⟨Λ_σ g, η⟩ = ∫_Ω σ∇u·∇Φ` with `u` the solution for data `g` and `Φ`
/// the discrete harmonic lift of `η`. Both are nodal vectors supported on
/// the interior of `Σ`.
pub fn dn_apply<T: Real>(sys: &FemSystem<'_, T>, g: &[T], eta: &[T]) -> Result<T, MisfitError> {
    physical(sys)?;
    check_sigma_support(sys.mesh(), g)?;
    check_sigma_support(sys.mesh(), eta)?;
    let u = sys.solve_dirichlet(g)?;
    let lift = sys.solve_dirichlet(eta)?;
    Ok(dot(&lift, &sys.stiffness().mul_vec(&u)))
}

/// Same pairing with the zero extension of `η` as the lift.
pub fn dn_apply_zero_extension<T: Real>(sys: &FemSystem<'_, T>, g: &[T], eta: &[T]) -> Result<T, MisfitError> {
    physical(sys)?;
    check_sigma_support(sys.mesh(), g)?;
    check_sigma_support(sys.mesh(), eta)?;
    let u = sys.solve_dirichlet(g)?;
    Ok(dot(eta, &sys.stiffness().mul_vec(&u)))
}

/// Matrix of the local D-N map on the hat functions of interior `Σ`
/// vertices, `M_ij = ⟨Λ φ_i, φ_j⟩`.
#[derive(Clone, Debug)]
pub struct DnOperator<T> {
    /// Mesh vertex of each basis function.
    pub basis: Vec<usize>,
    pub action: Matrix<T>,
}

impl<T: Real> DnOperator<T> {
    pub fn new(sys: &FemSystem<'_, T>) -> Result<Self, MisfitError> {
        physical(sys)?;
        let mesh = sys.mesh();
        let basis: Vec<usize> = (0..mesh.n_vertices()).filter(|&v| mesh.sigma_interior[v]).collect();
        let n = basis.len();
        let cols = basis
            .par_iter()
            .map(|&v| {
                let mut g = vec![T::zero(); mesh.n_vertices()];
                g[v] = T::one();
                let u = sys.solve_dirichlet(&g)?;
                Ok(basis.iter().map(|&w| sys.stiffness().row_dot(w, &u)).collect::<Vec<T>>())
            })
            .collect::<Result<Vec<_>, FemError>>()?;
        let mut action = Matrix::zeros(n, n);
        for (j, col) in cols.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                action[(i, j)] = x;
            }
        }
        Ok(Self { basis, action })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }
}

/// Result of the generalized power iteration for `M x = μ B x`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DnNormReport<T> {
    pub value: T,
    pub iterations: usize,
    pub converged: bool,
    pub dim: usize,
}

pub const POWER_TOL: f64 = 1e-8;
pub const POWER_MAX_ITER: usize = 500;

/// `max |μ|` for `M x = μ B x`, `B` SPD, by power iteration in the
/// `B`-inner product.
pub fn generalized_power_iteration<T: Real>(m: &Matrix<T>, b: &Matrix<T>) -> Result<DnNormReport<T>, MisfitError> {
    let n = m.rows();
    let chol = DenseCholesky::new(b).ok_or(FemError::SingularSystem { pivot: 0, value: 0.0 })?;
    let b_norm = |x: &[T]| dot(x, &b.mul_vec(x)).max(T::zero()).sqrt();
    // ones, slightly perturbed so symmetric start vectors cannot miss a mode
    let mut x: Vec<T> = (0..n).map(|i| T::one() + T::lit(1e-3) * T::from_count(i % 7)).collect();
    let nx = b_norm(&x);
    x.iter_mut().for_each(|v| *v = *v / nx);
    let mut est = T::zero();
    for it in 1..=POWER_MAX_ITER {
        let y = chol.solve(&m.mul_vec(&x));
        let ny = b_norm(&y);
        if ny == T::zero() {
            return Ok(DnNormReport { value: T::zero(), iterations: it, converged: true, dim: n });
        }
        let done = (ny - est).abs() <= T::lit(POWER_TOL) * ny;
        est = ny;
        x = y.into_iter().map(|v| v / ny).collect();
        if done {
            return Ok(DnNormReport { value: est, iterations: it, converged: true, dim: n });
        }
    }
    Ok(DnNormReport { value: est, iterations: POWER_MAX_ITER, converged: false, dim: n })
}

/// `‖Λ₁ − Λ₂‖_*` in the discrete `H^{1/2}_{00}(Σ)` duality, with the Gram
/// matrix of the Laplace harmonic-extension energy.
pub fn dn_norm_diff<T: Real>(c1: &Conductivity<T>, c2: &Conductivity<T>, mesh: &Mesh<T>) -> Result<DnNormReport<T>, MisfitError> {
    let lap = Conductivity::homogeneous(mesh.n_sub, T::one());
    let systems: Vec<Result<FemSystem<'_, T>, FemError>> =
        [c1, c2, &lap].par_iter().map(|c| FemSystem::assemble_region(mesh, c, Region::Physical)).collect();
    let mut ops = Vec::with_capacity(3);
    for s in systems {
        ops.push(DnOperator::new(&s?)?);
    }
    dn_norm_diff_operators(&ops[0], &ops[1], &ops[2])
}

pub fn dn_norm_diff_operators<T: Real>(m1: &DnOperator<T>, m2: &DnOperator<T>, gram: &DnOperator<T>) -> Result<DnNormReport<T>, MisfitError> {
    let mut m = m1.action.sub(&m2.action);
    m.symmetrize();
    let mut b = gram.action.clone();
    b.symmetrize();
    generalized_power_iteration(&m, &b)
}
