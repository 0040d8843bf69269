//! P1 finite elements for `div(σ∇u) = 0` on the augmented or physical
//! domain, Green functions by singularity subtraction, and
//! variationally consistent boundary fluxes.

use std::collections::HashMap;
use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::conductivity::{mat3_identity, mat3_vec, subdomain_bounds, Conductivity, Mat3};
use crate::geometry::{Aabb, Mesh};
use crate::kernels::{build_frame, KernelError, TwoLayerKernel, TwoLayerParams};
use crate::scalar::{dot3, norm3, sub3, Point3, Real};
use crate::sparse::{CsrMatrix, SkylineCholesky};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("stiffness matrix is singular at pivot {pivot} ({value:e})")]
    SingularSystem { pivot: usize, value: f64 },
    #[error("linear solve residual {0:e} above tolerance")]
    SolveFailure(f64),
    #[error("conductivity has {got} layers, mesh has {expected}")]
    IncompatibleConductivity { expected: usize, got: usize },
    #[error("pole at distance {distance:e} from a subdomain boundary, need at least {required:e}")]
    PoleTooCloseToInterface { distance: f64, required: f64 },
    #[error("point {0:?} is outside the meshed region")]
    OutsideMesh([f64; 3]),
    #[error("pole coincides with a mesh vertex")]
    PoleOnVertex,
    #[error("vector of length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Which part of the mesh carries the problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    /// `Ω̃ = Ω ∪ D0`, Dirichlet data on `∂Ω̃`.
    Augmented,
    /// `Ω` alone, Dirichlet data on `∂Ω`.
    Physical,
}

/// Gradients of the four barycentric coordinates of a tetrahedron.
pub fn p1_gradients<T: Real>(p: &[Point3<T>; 4]) -> [[T; 3]; 4] {
    let e1 = sub3(&p[1], &p[0]);
    let e2 = sub3(&p[2], &p[0]);
    let e3 = sub3(&p[3], &p[0]);
    let c23 = crate::scalar::cross3(&e2, &e3);
    let det = dot3(&e1, &c23);
    let g1 = c23.map(|v| v / det);
    let g2 = crate::scalar::cross3(&e3, &e1).map(|v| v / det);
    let g3 = crate::scalar::cross3(&e1, &e2).map(|v| v / det);
    let g0 = [-(g1[0] + g2[0] + g3[0]), -(g1[1] + g2[1] + g3[1]), -(g1[2] + g2[2] + g3[2])];
    [g0, g1, g2, g3]
}

/// Vertices on the boundary of the union of the flagged cells.
fn boundary_vertices<T: Real>(mesh: &Mesh<T>, active: &[bool]) -> Vec<bool> {
    let mut faces: HashMap<[usize; 3], u8> = HashMap::with_capacity(mesh.n_cells() * 2);
    for (c, tet) in mesh.cells.iter().enumerate() {
        if !active[c] {
            continue;
        }
        for skip in 0..4 {
            let mut f = [0usize; 3];
            let mut t = 0;
            for (l, &v) in tet.iter().enumerate() {
                if l != skip {
                    f[t] = v;
                    t += 1;
                }
            }
            f.sort_unstable();
            *faces.entry(f).or_insert(0) += 1;
        }
    }
    let mut out = vec![false; mesh.n_vertices()];
    for (f, count) in faces {
        if count == 1 {
            for v in f {
                out[v] = true;
            }
        }
    }
    out
}

/// Degree-2 four-point rule on the reference simplex, in barycentric form.
const TET4_A: f64 = 0.585_410_196_624_968_5;
const TET4_B: f64 = 0.138_196_601_125_010_5;

/// Four-point rule on `8^depth` congruent-volume subtetrahedra, as
/// (barycentric point, weight fraction of the cell volume).
pub fn subdivided_rule<T: Real>(depth: usize) -> Vec<([T; 4], T)> {
    let unit: [[T; 4]; 4] = std::array::from_fn(|i| std::array::from_fn(|k| if i == k { T::one() } else { T::zero() }));
    let mut tets = vec![unit];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(tets.len() * 8);
        for t in &tets {
            let mid = |a: usize, b: usize| -> [T; 4] { std::array::from_fn(|k| (t[a][k] + t[b][k]) * T::lit(0.5)) };
            let (m01, m02, m03, m12, m13, m23) = (mid(0, 1), mid(0, 2), mid(0, 3), mid(1, 2), mid(1, 3), mid(2, 3));
            next.extend_from_slice(&[
                [t[0], m01, m02, m03],
                [m01, t[1], m12, m13],
                [m02, m12, t[2], m23],
                [m03, m13, m23, t[3]],
                [m01, m02, m03, m13],
                [m01, m02, m12, m13],
                [m02, m03, m13, m23],
                [m02, m12, m13, m23],
            ]);
        }
        tets = next;
    }
    let w = T::lit(0.25) / T::from_count(tets.len());
    let (a, b) = (T::lit(TET4_A), T::lit(TET4_B));
    let mut rule = Vec::with_capacity(tets.len() * 4);
    for t in &tets {
        for q in 0..4 {
            let lam: [T; 4] = std::array::from_fn(|k| (0..4).map(|v| t[v][k] * if v == q { a } else { b }).sum());
            rule.push((lam, w));
        }
    }
    rule
}

#[inline]
pub(crate) fn bary_point<T: Real>(p: &[Point3<T>; 4], lam: &[T; 4]) -> Point3<T> {
    std::array::from_fn(|i| lam[0] * p[0][i] + lam[1] * p[1][i] + lam[2] * p[2][i] + lam[3] * p[3][i])
}

/// `χ(r)` and `χ'(r)`: `χ(0) = 1`, `χ = 0` for `r ≥ ρ`, C³, with the
/// transition spread over the whole ball.
#[inline]
pub fn cutoff<T: Real>(r: T, rho: T) -> (T, T) {
    if r >= rho {
        return (T::zero(), T::zero());
    }
    let s = r / rho;
    let s2 = s * s;
    let s3 = s2 * s;
    let s4 = s3 * s;
    let p = s4 * (T::lit(35.0) - T::lit(84.0) * s + T::lit(70.0) * s2 - T::lit(20.0) * s3);
    let dp = s3 * (T::lit(140.0) - T::lit(420.0) * s + T::lit(420.0) * s2 - T::lit(140.0) * s3);
    (T::one() - p, -dp / rho)
}

/// Positive singular kernel `K` with `−div(σ0 ∇K(·, y)) = δ_y`.
#[derive(Clone, Debug, PartialEq)]
pub enum PoleKernel<T> {
    /// `1 / (4π|x − y|)`, `σ0 = I`.
    Laplace,
    /// Frozen constant coefficient `σ0 = γ A0`.
    Homogeneous { gamma: T, a0: Mat3<T>, j: Mat3<T>, det_j: T },
    /// Two-layer kernel about the horizontal plane through `origin`;
    /// `γ⁺` is the value below the plane.
    TwoLayer { kernel: TwoLayerKernel<T, 3>, origin: Point3<T>, a_global: Mat3<T> },
}

fn flip<T: Real>(v: &Point3<T>) -> Point3<T> {
    [v[0], v[1], -v[2]]
}

impl<T: Real> PoleKernel<T> {
    pub fn homogeneous(gamma: T, a0: Mat3<T>) -> Result<Self, KernelError> {
        if !(gamma > T::zero()) {
            return Err(KernelError::NonPositiveConductivity);
        }
        let f = build_frame(&a0)?;
        Ok(PoleKernel::Homogeneous { gamma, a0, j: f.j, det_j: f.det_j })
    }

    /// Coefficients frozen at `p` on interface `k` (between `D_k` above and
    /// `D_{k+1}` below).
    pub fn two_layer(c: &Conductivity<T>, k: usize, p: Point3<T>) -> Result<Self, KernelError> {
        let gamma_minus = c.patch(k).eval(&p);
        let gamma_plus = c.patch(k + 1).eval(&p);
        let a = c.a_field.eval(&p);
        let mut a0 = a;
        for i in 0..2 {
            a0[i][2] = -a0[i][2];
            a0[2][i] = -a0[2][i];
        }
        let kernel = TwoLayerKernel::new(TwoLayerParams { gamma_plus, gamma_minus, a0 })?;
        Ok(PoleKernel::TwoLayer { kernel, origin: p, a_global: a })
    }

    pub fn value(&self, x: &Point3<T>, y: &Point3<T>) -> Result<T, KernelError> {
        let four_pi = T::lit(4.0) * T::PI();
        match self {
            PoleKernel::Laplace => {
                let r = norm3(&sub3(x, y));
                if r == T::zero() {
                    return Err(KernelError::CoincidentPoints);
                }
                Ok((four_pi * r).recip())
            }
            PoleKernel::Homogeneous { gamma, j, det_j, .. } => {
                let r = norm3(&mat3_vec(j, &sub3(x, y)));
                if r == T::zero() {
                    return Err(KernelError::CoincidentPoints);
                }
                Ok(*det_j / (*gamma * four_pi * r))
            }
            PoleKernel::TwoLayer { kernel, origin, .. } => {
                let xi = flip(&sub3(x, origin));
                let eta = flip(&sub3(y, origin));
                Ok(-kernel.eval_closed(&xi, &eta)?)
            }
        }
    }

    pub fn grad(&self, x: &Point3<T>, y: &Point3<T>) -> Result<Point3<T>, KernelError> {
        let four_pi = T::lit(4.0) * T::PI();
        match self {
            PoleKernel::Laplace => {
                let d = sub3(x, y);
                let r = norm3(&d);
                if r == T::zero() {
                    return Err(KernelError::CoincidentPoints);
                }
                let c = -(four_pi * r * r * r).recip();
                Ok(d.map(|v| v * c))
            }
            PoleKernel::Homogeneous { gamma, j, det_j, .. } => {
                let jd = mat3_vec(j, &sub3(x, y));
                let r = norm3(&jd);
                if r == T::zero() {
                    return Err(KernelError::CoincidentPoints);
                }
                let c = -*det_j / (*gamma * four_pi * r * r * r);
                // J symmetric: ∇ = Jᵀ J d
                Ok(mat3_vec(j, &jd).map(|v| v * c))
            }
            PoleKernel::TwoLayer { kernel, origin, .. } => {
                let xi = flip(&sub3(x, origin));
                let eta = flip(&sub3(y, origin));
                let g = kernel.grad_xi(&xi, &eta)?;
                Ok(flip(&g).map(|v| -v))
            }
        }
    }

    /// Coefficient the kernel solves exactly, at `x`.
    pub fn sigma0(&self, x: &Point3<T>) -> Mat3<T> {
        match self {
            PoleKernel::Laplace => mat3_identity(),
            PoleKernel::Homogeneous { gamma, a0, .. } => a0.map(|r| r.map(|v| v * *gamma)),
            PoleKernel::TwoLayer { kernel, origin, a_global } => {
                let g = if x[2] < origin[2] { kernel.params.gamma_plus } else { kernel.params.gamma_minus };
                a_global.map(|r| r.map(|v| v * g))
            }
        }
    }
}

/// Assembled, factored P1 system for one conductivity.
#[derive(Clone, Debug)]
pub struct FemSystem<'m, T> {
    mesh: &'m Mesh<T>,
    sigma: Conductivity<T>,
    region: Region,
    cell_active: Vec<bool>,
    grads: Vec<[[T; 3]; 4]>,
    stiffness: CsrMatrix<T>,
    omega_stiffness: Option<CsrMatrix<T>>,
    in_region: Vec<bool>,
    dirichlet: Vec<bool>,
    dof: Vec<Option<usize>>,
    dof_vertices: Vec<usize>,
    factor: SkylineCholesky<T>,
    domain_boxes: Vec<Option<Aabb<T>>>,
    /// Subdivided quadrature rules by depth.
    rules: Vec<Vec<([T; 4], T)>>,
}

/// Relative residual accepted by [`FemSystem::solve_dirichlet`].
pub const SOLVE_TOL: f64 = 1e-10;

impl<'m, T: Real> FemSystem<'m, T> {
    /// Augmented-domain system.
    pub fn assemble(mesh: &'m Mesh<T>, c: &Conductivity<T>) -> Result<Self, FemError> {
        Self::assemble_region(mesh, c, Region::Augmented)
    }

    pub fn assemble_region(mesh: &'m Mesh<T>, c: &Conductivity<T>, region: Region) -> Result<Self, FemError> {
        if c.n_sub() != mesh.n_sub {
            return Err(FemError::IncompatibleConductivity { expected: mesh.n_sub, got: c.n_sub() });
        }
        let cell_active: Vec<bool> = mesh
            .cell_domain
            .iter()
            .map(|&d| region == Region::Augmented || d > 0)
            .collect();
        let grads: Vec<[[T; 3]; 4]> = (0..mesh.n_cells()).map(|k| p1_gradients(&mesh.cell_points(k))).collect();
        let build = |keep: &dyn Fn(usize) -> bool| {
            let mut triplets = Vec::with_capacity(mesh.n_cells() * 16);
            for (k, tet) in mesh.cells.iter().enumerate() {
                if !keep(k) {
                    continue;
                }
                let s = c.sigma_unchecked(&mesh.cell_centroid(k), mesh.cell_domain[k]);
                let vol = mesh.cell_volume(k);
                let g = &grads[k];
                for a in 0..4 {
                    let sg = mat3_vec(&s, &g[a]);
                    for b in 0..4 {
                        triplets.push((tet[a], tet[b], dot3(&sg, &g[b]) * vol));
                    }
                }
            }
            CsrMatrix::from_triplets(mesh.n_vertices(), &triplets)
        };
        let stiffness = build(&|k| cell_active[k]);
        let omega_stiffness = match region {
            Region::Augmented => Some(build(&|k| mesh.cell_domain[k] > 0)),
            Region::Physical => None,
        };
        let mut in_region = vec![false; mesh.n_vertices()];
        for (k, tet) in mesh.cells.iter().enumerate() {
            if cell_active[k] {
                for &v in tet {
                    in_region[v] = true;
                }
            }
        }
        let dirichlet = boundary_vertices(mesh, &cell_active);
        let mut dof = vec![None; mesh.n_vertices()];
        let mut dof_vertices = Vec::new();
        for v in 0..mesh.n_vertices() {
            if in_region[v] && !dirichlet[v] {
                dof[v] = Some(dof_vertices.len());
                dof_vertices.push(v);
            }
        }
        let interior = stiffness.submatrix(&dof, dof_vertices.len());
        let factor = SkylineCholesky::factor(&interior).map_err(|e| FemError::SingularSystem { pivot: e.pivot, value: e.value })?;
        let domain_boxes = (0..=mesh.n_sub).map(|m| subdomain_bounds(mesh, m)).collect();
        Ok(Self {
            mesh,
            sigma: c.clone(),
            region,
            cell_active,
            grads,
            stiffness,
            omega_stiffness,
            in_region,
            dirichlet,
            dof,
            dof_vertices,
            factor,
            domain_boxes,
            rules: (0..4).map(subdivided_rule).collect(),
        })
    }

    pub fn mesh(&self) -> &'m Mesh<T> {
        self.mesh
    }

    pub fn conductivity(&self) -> &Conductivity<T> {
        &self.sigma
    }

    pub fn region(&self) -> Region {
        self.region
    }

    /// Stiffness over all vertices of the region, before elimination.
    pub fn stiffness(&self) -> &CsrMatrix<T> {
        &self.stiffness
    }

    /// Stiffness restricted to cells of `Ω`.
    pub fn omega_stiffness(&self) -> &CsrMatrix<T> {
        self.omega_stiffness.as_ref().unwrap_or(&self.stiffness)
    }

    pub fn is_dirichlet(&self, v: usize) -> bool {
        self.dirichlet[v]
    }

    pub fn in_region(&self, v: usize) -> bool {
        self.in_region[v]
    }

    pub fn cell_active(&self, k: usize) -> bool {
        self.cell_active[k]
    }

    pub fn n_dofs(&self) -> usize {
        self.dof_vertices.len()
    }

    pub fn cell_gradients(&self, k: usize) -> &[[T; 3]; 4] {
        &self.grads[k]
    }

    /// Bounding box of the cells of subdomain `m`.
    pub fn domain_box(&self, m: usize) -> Option<Aabb<T>> {
        self.domain_boxes.get(m).copied().flatten()
    }

    /// Solves `K u = load` at free vertices with `u = g` on Dirichlet
    /// vertices. Both vectors are indexed by mesh vertex.
    pub fn solve_with_load(&self, load: &[T], g: &[T]) -> Result<Vec<T>, FemError> {
        let n = self.mesh.n_vertices();
        for v in [load.len(), g.len()] {
            if v != n {
                return Err(FemError::LengthMismatch { expected: n, got: v });
            }
        }
        let mut u = vec![T::zero(); n];
        for v in 0..n {
            if self.dirichlet[v] && self.in_region[v] {
                u[v] = g[v];
            }
        }
        let rhs: Vec<T> = self
            .dof_vertices
            .iter()
            .map(|&v| {
                let (cols, vals) = self.stiffness.row(v);
                let mut r = load[v];
                for (&c, &a) in cols.iter().zip(vals) {
                    if self.dof[c].is_none() {
                        r = r - a * u[c];
                    }
                }
                r
            })
            .collect();
        let x = self.factor.solve(&rhs);
        for (i, &v) in self.dof_vertices.iter().enumerate() {
            u[v] = x[i];
        }
        // Galerkin residual at free vertices.
        let mut res = T::zero();
        let mut scale = T::zero();
        for (i, &v) in self.dof_vertices.iter().enumerate() {
            let r = self.stiffness.row_dot(v, &u) - load[v];
            res = res.max(r.abs());
            scale = scale.max(rhs[i].abs()).max(load[v].abs());
        }
        let row_scale = self.stiffness.max_abs() * u.iter().fold(T::zero(), |m, x| m.max(x.abs()));
        let tol = T::lit(SOLVE_TOL).max(T::lit(1e4) * T::epsilon());
        if res > tol * scale.max(row_scale).max(T::min_positive_value()) {
            return Err(FemError::SolveFailure(res.as_f64()));
        }
        Ok(u)
    }

    /// Discrete solution with Dirichlet data `g` (read on boundary vertices).
    pub fn solve_dirichlet(&self, g: &[T]) -> Result<Vec<T>, FemError> {
        self.solve_with_load(&vec![T::zero(); self.mesh.n_vertices()], g)
    }

    /// Convenience: Dirichlet data sampled from a function.
    pub fn solve_dirichlet_fn(&self, g: impl Fn(&Point3<T>) -> T) -> Result<Vec<T>, FemError> {
        let data: Vec<T> = self.mesh.vertices.iter().map(&g).collect();
        self.solve_dirichlet(&data)
    }

    /// `F_v = ∫ σ∇u·∇φ_v` over the region, for every vertex.
    pub fn residual_flux(&self, u: &[T]) -> Vec<T> {
        self.stiffness.mul_vec(u)
    }

    /// Discrete energy `∫ σ∇u·∇u`.
    pub fn energy(&self, u: &[T]) -> T {
        dot(u, &self.stiffness.mul_vec(u))
    }

    /// Variational conormal flux through `Σ`, outward from `Ω`.
    pub fn conormal_flux_on_sigma(&self, u: &[T]) -> BoundaryFlux<T> {
        let mesh = self.mesh;
        let k = self.omega_stiffness();
        let vertices: Vec<usize> = (0..mesh.n_vertices()).filter(|&v| mesh.on_sigma[v]).collect();
        let mut area = vec![T::zero(); mesh.n_vertices()];
        for f in mesh.sigma_facets() {
            let (_, a) = mesh.facet_normal_area(f);
            for &v in &f.vertices {
                area[v] = area[v] + a / T::lit(3.0);
            }
        }
        let weights: Vec<T> = vertices.iter().map(|&v| k.row_dot(v, u)).collect();
        let areas: Vec<T> = vertices.iter().map(|&v| area[v]).collect();
        BoundaryFlux { vertices, weights, areas }
    }

    /// Kernel subtracted at a pole (Laplace in D0, frozen homogeneous kernel
    /// inside a layer) and the distance from the pole to the boundary of
    /// its subdomain box.
    pub fn auto_kernel(&self, pole: &Point3<T>) -> Result<(PoleKernel<T>, T), FemError> {
        let (cell, _) = self.mesh.locate(pole).ok_or(FemError::OutsideMesh(pole.map(|v| v.as_f64())))?;
        if !self.cell_active[cell] {
            return Err(FemError::OutsideMesh(pole.map(|v| v.as_f64())));
        }
        let m = self.mesh.cell_domain[cell];
        let b = self.domain_box(m).expect("domain of an existing cell");
        let dist = b.distance_to_boundary(pole);
        let h = self.mesh.cell_size();
        if dist < h {
            return Err(FemError::PoleTooCloseToInterface { distance: dist.as_f64(), required: h.as_f64() });
        }
        let kernel = if m == 0 {
            PoleKernel::Laplace
        } else {
            PoleKernel::homogeneous(self.sigma.patch(m).eval(pole), self.sigma.a_field.eval(pole))?
        };
        Ok((kernel, dist))
    }

    /// Green function with pole `y`, the default kernel and a cutoff ball
    /// of radius `0.9·dist`.
    pub fn green(&self, pole: &Point3<T>) -> Result<GreenField<T>, FemError> {
        let (kernel, dist) = self.auto_kernel(pole)?;
        self.green_with_kernel(pole, kernel, Subtraction::Ball(T::lit(0.9) * dist))
    }

    /// `G = χK + (1 − χ)I_hK + w` (or `K + w` for [`Subtraction::Global`]),
    /// `w` the P1 corrector with `G = 0` on the boundary.
    pub fn green_with_kernel(&self, pole: &Point3<T>, kernel: PoleKernel<T>, mode: Subtraction<T>) -> Result<GreenField<T>, FemError> {
        let mesh = self.mesh;
        let n = mesh.n_vertices();
        let mut nodal_kernel = vec![T::zero(); n];
        for v in 0..n {
            if !self.in_region[v] {
                continue;
            }
            let x = &mesh.vertices[v];
            if norm3(&sub3(x, pole)) == T::zero() {
                return Err(FemError::PoleOnVertex);
            }
            nodal_kernel[v] = kernel.value(x, pole)?;
        }
        let load = self.corrector_load_with(pole, &kernel, mode, &nodal_kernel)?;
        let g: Vec<T> = (0..n).map(|v| if self.dirichlet[v] { -nodal_kernel[v] } else { T::zero() }).collect();
        let corrector = self.solve_with_load(&load, &g)?;
        let values = corrector.iter().zip(&nodal_kernel).map(|(&a, &b)| a + b).collect();
        Ok(GreenField { pole: *pole, kernel, mode, corrector, nodal_kernel, values })
    }

    /// Right-hand side of the corrector problem, `δ_y − a(S, ·)` with `S`
    /// the subtracted part.
    pub fn corrector_load(&self, pole: &Point3<T>, kernel: &PoleKernel<T>, mode: Subtraction<T>) -> Result<Vec<T>, FemError> {
        let nodal: Vec<T> = self
            .mesh
            .vertices
            .iter()
            .enumerate()
            .map(|(v, x)| if self.in_region[v] { kernel.value(x, pole) } else { Ok(T::zero()) })
            .collect::<Result<_, _>>()?;
        self.corrector_load_with(pole, kernel, mode, &nodal)
    }

    fn corrector_load_with(&self, pole: &Point3<T>, kernel: &PoleKernel<T>, mode: Subtraction<T>, nodal: &[T]) -> Result<Vec<T>, FemError> {
        let mesh = self.mesh;
        let rho = match mode {
            Subtraction::Global => {
                // −∫ (σ − σ0)∇K·∇φ
                let mut load = vec![T::zero(); mesh.n_vertices()];
                for (k, tet) in mesh.cells.iter().enumerate() {
                    if !self.cell_active[k] {
                        continue;
                    }
                    let Some(acc) = self.kernel_cell_term(k, pole, kernel, true)? else { continue };
                    for a in 0..4 {
                        load[tet[a]] = load[tet[a]] - acc[a];
                    }
                }
                return Ok(load);
            }
            Subtraction::Ball(rho) => rho,
        };
        let h = mesh.cell_size();
        // outside the ball S is the interpolant
        let mut load: Vec<T> = self.stiffness.mul_vec(nodal).into_iter().map(|x| -x).collect();
        for (k, tet) in mesh.cells.iter().enumerate() {
            if !self.cell_active[k] {
                continue;
            }
            let p = mesh.cell_points(k);
            let gap = box_distance(&p, pole);
            if gap >= rho {
                continue;
            }
            let rule = &self.rules[quadrature_depth(gap / h)];
            let vol = mesh.cell_volume(k);
            let dom = mesh.cell_domain[k];
            let g = &self.grads[k];
            let kn: [T; 4] = std::array::from_fn(|a| nodal[tet[a]]);
            let mut grad_kh = [T::zero(); 3];
            for a in 0..4 {
                for i in 0..3 {
                    grad_kh[i] = grad_kh[i] + kn[a] * g[a][i];
                }
            }
            let mut acc = [T::zero(); 4];
            let sc = self.sigma.sigma_unchecked(&mesh.cell_centroid(k), dom);
            let sgk = mat3_vec(&sc, &grad_kh);
            for a in 0..4 {
                acc[a] = acc[a] + vol * dot3(&sgk, &g[a]);
            }
            for (lam, wf) in rule {
                let x = bary_point(&p, lam);
                let d = sub3(&x, pole);
                let r = norm3(&d);
                if r <= T::epsilon() * h {
                    continue;
                }
                let (chi, dchi) = cutoff(r, rho);
                let s = self.sigma.sigma_unchecked(&x, dom);
                let s0 = kernel.sigma0(&x);
                let mut ds = s;
                for a in 0..3 {
                    for b in 0..3 {
                        ds[a][b] = s[a][b] - s0[a][b];
                    }
                }
                let kv = kernel.value(&x, pole)?;
                let gk = kernel.grad(&x, pole)?;
                let kh = (0..4).fold(T::zero(), |acc, a| acc + lam[a] * kn[a]);
                let gchi = d.map(|v| v * dchi / r);
                // δ_y − a(χK, φ), the delta absorbed by integrating by parts
                let t1 = dot3(&mat3_vec(&s0, &gk), &gchi);
                let s0gchi = mat3_vec(&s0, &gchi);
                let inner: Point3<T> = std::array::from_fn(|i| chi * gk[i] + kv * gchi[i]);
                let dsi = mat3_vec(&ds, &inner);
                // − a((1 − χ)I_hK, φ)
                let outer: Point3<T> = std::array::from_fn(|i| (T::one() - chi) * grad_kh[i] - kh * gchi[i]);
                let so = mat3_vec(&s, &outer);
                let q: Point3<T> = std::array::from_fn(|i| kv * s0gchi[i] + dsi[i] + so[i]);
                let w = *wf * vol;
                for a in 0..4 {
                    acc[a] = acc[a] + w * (lam[a] * t1 - dot3(&q, &g[a]));
                }
            }
            for a in 0..4 {
                load[tet[a]] = load[tet[a]] + acc[a];
            }
        }
        Ok(load)
    }

    /// `∫_T (σ − σ0)∇K·∇φ_a` (or without `σ0`), `None` when the integrand
    /// vanishes identically on the cell.
    fn kernel_cell_term(&self, k: usize, pole: &Point3<T>, kernel: &PoleKernel<T>, subtract: bool) -> Result<Option<[T; 4]>, FemError> {
        let mesh = self.mesh;
        let dom = mesh.cell_domain[k];
        if subtract && dom == 0 && *kernel == PoleKernel::Laplace {
            return Ok(None);
        }
        let h = mesh.cell_size();
        let p = mesh.cell_points(k);
        let rule = &self.rules[quadrature_depth(box_distance(&p, pole) / h)];
        let vol = mesh.cell_volume(k);
        let g = &self.grads[k];
        let mut acc = [T::zero(); 4];
        let mut any = false;
        for (lam, wf) in rule {
            let x = bary_point(&p, lam);
            if norm3(&sub3(&x, pole)) <= T::epsilon() * h {
                continue;
            }
            let mut s = self.sigma.sigma_unchecked(&x, dom);
            if subtract {
                let s0 = kernel.sigma0(&x);
                for a in 0..3 {
                    for b in 0..3 {
                        s[a][b] = s[a][b] - s0[a][b];
                    }
                }
                if s.iter().all(|r| r.iter().all(|&v| v == T::zero())) {
                    continue;
                }
            }
            any = true;
            let q = mat3_vec(&s, &kernel.grad(&x, pole)?);
            let w = *wf * vol;
            for a in 0..4 {
                acc[a] = acc[a] + w * dot3(&q, &g[a]);
            }
        }
        Ok(any.then_some(acc))
    }

    /// Conormal flux of a Green function through `Σ`. Cells of `Ω` where
    /// `G` is not P1 are integrated by quadrature.
    pub fn green_flux_on_sigma(&self, g: &GreenField<T>) -> Result<BoundaryFlux<T>, FemError> {
        let mesh = self.mesh;
        let mut flux = self.conormal_flux_on_sigma(&g.values);
        let mut slot = vec![usize::MAX; mesh.n_vertices()];
        for (i, &v) in flux.vertices.iter().enumerate() {
            slot[v] = i;
        }
        let h = mesh.cell_size();
        for (k, tet) in mesh.cells.iter().enumerate() {
            if mesh.cell_domain[k] == 0 || !tet.iter().any(|&v| slot[v] != usize::MAX) {
                continue;
            }
            let p = mesh.cell_points(k);
            let gap = box_distance(&p, &g.pole);
            if let Subtraction::Ball(rho) = g.mode {
                if gap >= rho {
                    continue;
                }
            }
            // replace the stiffness row contribution by the exact integral
            let dom = mesh.cell_domain[k];
            let grads = &self.grads[k];
            let sc = self.sigma.sigma_unchecked(&mesh.cell_centroid(k), dom);
            let mut gp1 = [T::zero(); 3];
            for a in 0..4 {
                for i in 0..3 {
                    gp1[i] = gp1[i] + g.values[tet[a]] * grads[a][i];
                }
            }
            let sg = mat3_vec(&sc, &gp1);
            let vol = mesh.cell_volume(k);
            let mut acc: [T; 4] = std::array::from_fn(|a| -vol * dot3(&sg, &grads[a]));
            for (lam, wf) in &self.rules[quadrature_depth(gap / h)] {
                let x = bary_point(&p, lam);
                let (_, gx) = g.eval_in(mesh, k, &x, Some(lam))?;
                let q = mat3_vec(&self.sigma.sigma_unchecked(&x, dom), &gx);
                for a in 0..4 {
                    acc[a] = acc[a] + *wf * vol * dot3(&q, &grads[a]);
                }
            }
            for a in 0..4 {
                let i = slot[tet[a]];
                if i != usize::MAX {
                    flux.weights[i] = flux.weights[i] + acc[a];
                }
            }
        }
        Ok(flux)
    }

    /// Central difference `(G(·, y + h e) − G(·, y − h e)) / 2h`, default
    /// `h = 1/(4·resolution)`. Uses the global subtraction, which keeps the
    /// kernel exact near the pole.
    pub fn green_pole_derivative(&self, pole: &Point3<T>, axis: usize, step: Option<T>) -> Result<GreenDifference<T>, FemError> {
        let step = step.unwrap_or_else(|| self.default_pole_step());
        self.green_pole_derivative_with(pole, axis, step, Subtraction::Global)
    }

    pub fn default_pole_step(&self) -> T {
        (T::lit(4.0) * T::from_count(self.mesh.resolution)).recip()
    }

    pub fn green_pole_derivative_with(&self, pole: &Point3<T>, axis: usize, step: T, mode: Subtraction<T>) -> Result<GreenDifference<T>, FemError> {
        let mut yp = *pole;
        let mut ym = *pole;
        yp[axis] = yp[axis] + step;
        ym[axis] = ym[axis] - step;
        let (kp, _) = self.auto_kernel(&yp)?;
        let (km, _) = self.auto_kernel(&ym)?;
        let plus = self.green_with_kernel(&yp, kp, mode)?;
        let minus = self.green_with_kernel(&ym, km, mode)?;
        Ok(GreenDifference::new(plus, minus, step))
    }

    /// Discrete-delta Green function: load `φ_v(y)`, zero Dirichlet data.
    pub fn green_discrete_delta(&self, pole: &Point3<T>) -> Result<Vec<T>, FemError> {
        let (cell, lam) = self.mesh.locate(pole).ok_or(FemError::OutsideMesh(pole.map(|v| v.as_f64())))?;
        let mut load = vec![T::zero(); self.mesh.n_vertices()];
        for (a, &v) in self.mesh.cells[cell].iter().enumerate() {
            load[v] = lam[a];
        }
        self.solve_with_load(&load, &vec![T::zero(); self.mesh.n_vertices()])
    }
}

/// Subdivision depth for integrating kernel terms on a cell at distance
/// `gap` (in cells) from the pole.
pub(crate) fn quadrature_depth<T: Real>(gap: T) -> usize {
    if gap < T::one() {
        3
    } else if gap < T::lit(3.0) {
        2
    } else if gap < T::lit(6.0) {
        1
    } else {
        0
    }
}

/// Distance from `y` to the bounding box of a cell.
pub(crate) fn box_distance<T: Real>(p: &[Point3<T>; 4], y: &Point3<T>) -> T {
    let mut s = T::zero();
    for i in 0..3 {
        let lo = p.iter().fold(T::infinity(), |m, q| m.min(q[i]));
        let hi = p.iter().fold(T::neg_infinity(), |m, q| m.max(q[i]));
        let d = (lo - y[i]).max(y[i] - hi).max(T::zero());
        s = s + d * d;
    }
    s.sqrt()
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Field that can be sampled on the mesh: nodal values plus exact
/// gradients inside cells.
pub trait MeshField<T: Real> {
    /// Nodal values (the P1 part plus the singular part at vertices).
    fn nodal(&self) -> &[T];
    fn grad_at(&self, mesh: &Mesh<T>, cell: usize, x: &Point3<T>) -> Result<Point3<T>, FemError>;
    fn value_at(&self, mesh: &Mesh<T>, x: &Point3<T>) -> Result<T, FemError>;
    /// Singular points of the field.
    fn poles(&self) -> Vec<Point3<T>> {
        Vec::new()
    }
}

/// How the singular kernel is split off a Green function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Subtraction<T> {
    /// `S = χK + (1 − χ)I_hK` with a cutoff ball of the given radius: away
    /// from the ball `G` is a P1 function and discrete Green identities
    /// hold exactly.
    Ball(T),
    /// `S = K` everywhere: the most accurate pointwise values near the pole.
    Global,
}

/// Green function `G(·, y) = S + w`.
#[derive(Clone, Debug)]
pub struct GreenField<T> {
    pub pole: Point3<T>,
    pub kernel: PoleKernel<T>,
    pub mode: Subtraction<T>,
    /// Nodal values of `w`.
    pub corrector: Vec<T>,
    /// Nodal values of `K(·, y)`.
    pub nodal_kernel: Vec<T>,
    /// Nodal values of `G`.
    pub values: Vec<T>,
}

impl<T: Real> GreenField<T> {
    /// Value and gradient of `G` at `x` in `cell`.
    fn eval_in(&self, mesh: &Mesh<T>, cell: usize, x: &Point3<T>, lam: Option<&[T; 4]>) -> Result<(T, Point3<T>), FemError> {
        let p = mesh.cell_points(cell);
        let g = p1_gradients(&p);
        let lam = match lam {
            Some(l) => *l,
            None => mesh.barycentric(cell, x),
        };
        let tet = &mesh.cells[cell];
        let mut val = T::zero();
        let mut grad = [T::zero(); 3];
        let mut kh = T::zero();
        let mut gkh = [T::zero(); 3];
        for a in 0..4 {
            let v = tet[a];
            val = val + lam[a] * self.corrector[v];
            kh = kh + lam[a] * self.nodal_kernel[v];
            for i in 0..3 {
                grad[i] = grad[i] + self.corrector[v] * g[a][i];
                gkh[i] = gkh[i] + self.nodal_kernel[v] * g[a][i];
            }
        }
        let d = sub3(x, &self.pole);
        let r = norm3(&d);
        let (chi, dchi) = match self.mode {
            Subtraction::Global => (T::one(), T::zero()),
            Subtraction::Ball(rho) => cutoff(r, rho),
        };
        if chi == T::zero() {
            return Ok((val + kh, std::array::from_fn(|i| grad[i] + gkh[i])));
        }
        if r == T::zero() {
            return Err(KernelError::CoincidentPoints.into());
        }
        let k = self.kernel.value(x, &self.pole)?;
        let gk = self.kernel.grad(x, &self.pole)?;
        let val = val + chi * k + (T::one() - chi) * kh;
        let grad = std::array::from_fn(|i| grad[i] + chi * gk[i] + (T::one() - chi) * gkh[i] + (k - kh) * dchi * d[i] / r);
        Ok((val, grad))
    }
}

impl<T: Real> MeshField<T> for GreenField<T> {
    fn nodal(&self) -> &[T] {
        &self.values
    }

    fn grad_at(&self, mesh: &Mesh<T>, cell: usize, x: &Point3<T>) -> Result<Point3<T>, FemError> {
        Ok(self.eval_in(mesh, cell, x, None)?.1)
    }

    fn value_at(&self, mesh: &Mesh<T>, x: &Point3<T>) -> Result<T, FemError> {
        let (cell, lam) = mesh.locate(x).ok_or(FemError::OutsideMesh(x.map(|v| v.as_f64())))?;
        Ok(self.eval_in(mesh, cell, x, Some(&lam))?.0)
    }

    fn poles(&self) -> Vec<Point3<T>> {
        vec![self.pole]
    }
}

/// Central pole difference of two Green functions.
#[derive(Clone, Debug)]
pub struct GreenDifference<T> {
    pub plus: GreenField<T>,
    pub minus: GreenField<T>,
    pub step: T,
    values: Vec<T>,
}

impl<T: Real> GreenDifference<T> {
    pub fn new(plus: GreenField<T>, minus: GreenField<T>, step: T) -> Self {
        let two_h = T::lit(2.0) * step;
        let values = plus.values.iter().zip(&minus.values).map(|(&a, &b)| (a - b) / two_h).collect();
        Self { plus, minus, step, values }
    }

    /// Same pair with the roles of the two poles exchanged.
    pub fn reversed(&self) -> Self {
        Self::new(self.minus.clone(), self.plus.clone(), self.step)
    }
}

impl<T: Real> MeshField<T> for GreenDifference<T> {
    fn nodal(&self) -> &[T] {
        &self.values
    }

    fn grad_at(&self, mesh: &Mesh<T>, cell: usize, x: &Point3<T>) -> Result<Point3<T>, FemError> {
        let a = self.plus.grad_at(mesh, cell, x)?;
        let b = self.minus.grad_at(mesh, cell, x)?;
        let two_h = T::lit(2.0) * self.step;
        Ok(std::array::from_fn(|i| (a[i] - b[i]) / two_h))
    }

    fn value_at(&self, mesh: &Mesh<T>, x: &Point3<T>) -> Result<T, FemError> {
        Ok((self.plus.value_at(mesh, x)? - self.minus.value_at(mesh, x)?) / (T::lit(2.0) * self.step))
    }

    fn poles(&self) -> Vec<Point3<T>> {
        vec![self.plus.pole, self.minus.pole]
    }
}

/// Plain P1 field.
#[derive(Clone, Debug, PartialEq)]
pub struct NodalField<T>(pub Vec<T>);

impl<T: Real> MeshField<T> for NodalField<T> {
    fn nodal(&self) -> &[T] {
        &self.0
    }

    fn grad_at(&self, mesh: &Mesh<T>, cell: usize, _x: &Point3<T>) -> Result<Point3<T>, FemError> {
        let g = p1_gradients(&mesh.cell_points(cell));
        let mut out = [T::zero(); 3];
        for (a, &v) in mesh.cells[cell].iter().enumerate() {
            for i in 0..3 {
                out[i] = out[i] + self.0[v] * g[a][i];
            }
        }
        Ok(out)
    }

    fn value_at(&self, mesh: &Mesh<T>, x: &Point3<T>) -> Result<T, FemError> {
        let (cell, lam) = mesh.locate(x).ok_or(FemError::OutsideMesh(x.map(|v| v.as_f64())))?;
        Ok(mesh.cells[cell].iter().zip(&lam).fold(T::zero(), |acc, (&v, &l)| acc + l * self.0[v]))
    }
}

/// Variational flux through `Σ`: `weights[i] = ∫_Ω σ∇u·∇φ_v` for
/// `v = vertices[i]`, with lumped facet areas for a density.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryFlux<T> {
    pub vertices: Vec<usize>,
    pub weights: Vec<T>,
    pub areas: Vec<T>,
}

impl<T: Real> BoundaryFlux<T> {
    /// Flux per unit area at each Σ vertex.
    pub fn density(&self) -> Vec<T> {
        self.weights.iter().zip(&self.areas).map(|(&w, &a)| w / a).collect()
    }

    pub fn total(&self) -> T {
        self.weights.iter().copied().sum()
    }
}

/// CSV `vertex_index,x,y,z,value`.
pub fn write_nodal_csv<T: Real, W: Write>(mesh: &Mesh<T>, values: &[T], mut w: W) -> io::Result<()> {
    writeln!(w, "vertex_index,x,y,z,value")?;
    for (i, (p, v)) in mesh.vertices.iter().zip(values).enumerate() {
        writeln!(w, "{i},{:e},{:e},{:e},{:e}", p[0].as_f64(), p[1].as_f64(), p[2].as_f64(), v.as_f64())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductivity::{AffinePatch, MatrixFieldSpec};
    use crate::geometry::{build_augmented_mesh, build_layered_geometry, Rect};

    fn mesh(heights: &[f64], res: usize) -> Mesh<f64> {
        let spec = build_layered_geometry(
            1.5,
            1.0,
            heights.len() - 1,
            heights,
            Rect::new([0.0, 0.0], [1.0, 1.0]),
            Aabb::new([0.25, 0.25, 0.0], [0.75, 0.75, 0.5]),
        )
        .unwrap();
        build_augmented_mesh(&spec, res).unwrap()
    }

    #[test]
    fn rule_integrates_quadratics() {
        for depth in 0..3 {
            let rule = subdivided_rule::<f64>(depth);
            let total: f64 = rule.iter().map(|r| r.1).sum();
            assert!((total - 1.0).abs() < 1e-14);
            // ∫ λ0 λ1 = vol/20, ∫ λ0² = vol/10
            let m01: f64 = rule.iter().map(|(l, w)| w * l[0] * l[1]).sum();
            let m00: f64 = rule.iter().map(|(l, w)| w * l[0] * l[0]).sum();
            assert!((m01 - 1.0 / 20.0).abs() < 1e-14 && (m00 - 0.1).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_sum_to_zero() {
        let m = mesh(&[0.0, -1.0], 4);
        for k in 0..m.n_cells() {
            let g = p1_gradients(&m.cell_points(k));
            for i in 0..3 {
                assert!((g[0][i] + g[1][i] + g[2][i] + g[3][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_data_reproduced() {
        let m = mesh(&[0.0, -0.5, -1.0], 4);
        let c = Conductivity::new(
            vec![AffinePatch::new(1, 1.0, [0.0; 3]), AffinePatch::new(2, 1.0, [0.0; 3])],
            MatrixFieldSpec::constant([[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 5.0).unwrap(),
        )
        .unwrap();
        let sys = FemSystem::assemble_region(&m, &c, Region::Physical).unwrap();
        let u = sys.solve_dirichlet_fn(|x| x[0]).unwrap();
        for (v, p) in m.vertices.iter().enumerate() {
            if sys.in_region(v) {
                assert!((u[v] - p[0]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn global_load_only_in_omega() {
        let m = mesh(&[0.0, -1.0], 8);
        let c = Conductivity::homogeneous(1, 1.5);
        let sys = FemSystem::assemble(&m, &c).unwrap();
        let y = [0.47, 0.52, 0.26];
        let (k, _) = sys.auto_kernel(&y).unwrap();
        assert_eq!(k, PoleKernel::Laplace);
        let load = sys.corrector_load(&y, &k, Subtraction::Global).unwrap();
        for (v, l) in load.iter().enumerate() {
            if m.vertices[v][2] > 1e-12 {
                assert_eq!(*l, 0.0);
            }
        }
        // ℓ(1) = 0
        let total: f64 = load.iter().sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn ball_load_mass_and_locality() {
        let m = mesh(&[0.0, -1.0], 8);
        let c = Conductivity::homogeneous(1, 1.5);
        let sys = FemSystem::assemble(&m, &c).unwrap();
        let y = [0.47, 0.52, 0.26];
        let (k, dist) = sys.auto_kernel(&y).unwrap();
        let rho = 0.9 * dist;
        let load = sys.corrector_load(&y, &k, Subtraction::Ball(rho)).unwrap();
        let total: f64 = load.iter().sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        // away from the ball only the interpolant term remains
        let kn: Vec<f64> = m.vertices.iter().map(|x| k.value(x, &y).unwrap()).collect();
        let ak = sys.stiffness().mul_vec(&kn);
        let h = m.cell_size();
        for (v, p) in m.vertices.iter().enumerate() {
            if norm3(&sub3(p, &y)) > rho + 2.0 * h {
                assert!((load[v] + ak[v]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(cutoff(0.0f64, 1.0), (1.0, 0.0));
        assert_eq!(cutoff(1.0, 1.0), (0.0, 0.0));
        let (c, _) = cutoff(0.5f64, 1.0);
        assert!((c - 0.5).abs() < 1e-15);
        let h = 1e-6;
        let fd = (cutoff(0.7 + h, 1.0).0 - cutoff(0.7 - h, 1.0).0) / (2.0 * h);
        assert!((fd - cutoff(0.7f64, 1.0).1).abs() < 1e-8);
    }

    #[test]
    fn homogeneous_kernel_gradient() {
        let k = PoleKernel::homogeneous(1.7, [[2.0, 0.3, 0.0], [0.3, 1.0, 0.1], [0.0, 0.1, 1.5]]).unwrap();
        let y = [0.1f64, 0.2, 0.3];
        let x = [0.4, -0.1, 0.5];
        let g = k.grad(&x, &y).unwrap();
        for i in 0..3 {
            let mut p = x;
            let mut q = x;
            p[i] += 1e-6;
            q[i] -= 1e-6;
            let fd = (k.value(&p, &y).unwrap() - k.value(&q, &y).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn two_layer_kernel_orientation() {
        let c = Conductivity::new(
            vec![AffinePatch::new(1, 1.0, [0.0; 3]), AffinePatch::new(2, 2.0, [0.0; 3])],
            MatrixFieldSpec::identity(),
        )
        .unwrap();
        let p = [0.5, 0.5, -0.5];
        let k = PoleKernel::two_layer(&c, 1, p).unwrap();
        assert_eq!(k.sigma0(&[0.5, 0.5, -0.7])[0][0], 2.0);
        assert_eq!(k.sigma0(&[0.5, 0.5, -0.3])[0][0], 1.0);
        // across the plane the kernel is the transmitted Laplace kernel
        let y = [0.5, 0.5, -0.4];
        let x = [0.5, 0.5, -0.6];
        let want = 2.0 / 3.0 / (4.0 * std::f64::consts::PI * 0.2);
        assert!((k.value(&x, &y).unwrap() - want).abs() < 1e-14);
        let on = [0.6, 0.5, -0.5];
        assert!(k.value(&on, &y).unwrap() > 0.0);
    }
}
