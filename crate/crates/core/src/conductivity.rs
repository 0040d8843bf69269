//! Piecewise-affine anisotropic conductivities `σ = γ A`, extended by the
//! identity on the exterior box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::{symmetric_spectral_norm, Matrix, SymmetricEigen};
use crate::geometry::{Aabb, Mesh};
use crate::scalar::{Point3, Real};

pub type Mat3<T> = [[T; 3]; 3];

pub(crate) fn mat3_zero<T: Real>() -> Mat3<T> {
    [[T::zero(); 3]; 3]
}

pub(crate) fn mat3_identity<T: Real>() -> Mat3<T> {
    let mut m = mat3_zero();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

pub(crate) fn mat3_to_dense<T: Real>(m: &Mat3<T>) -> Matrix<T> {
    Matrix::from_rows(m)
}

pub(crate) fn mat3_vec<T: Real>(m: &Mat3<T>, v: &Point3<T>) -> Point3<T> {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConductivityError {
    #[error("subdomain index {index} out of range 0..={n_sub}")]
    IndexOutOfRange { index: usize, n_sub: usize },
    #[error("expected one patch per subdomain 1..={n_sub}; patch for m = {m} is missing or repeated")]
    BadPatchSet { m: usize, n_sub: usize },
    #[error("matrix field is not symmetric (asymmetry {0:e})")]
    AsymmetricField(f64),
    #[error("affine matrix field needs three coefficient matrices")]
    MissingAffineCoefficients,
    #[error("conductivities use different matrix fields or partitions")]
    IncompatibleFields,
}

/// `γ_m(x) = s + S·x` on `D_m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinePatch<T> {
    pub m: usize,
    pub s: T,
    #[serde(rename = "S")]
    pub grad: Point3<T>,
}

impl<T: Real> AffinePatch<T> {
    pub fn new(m: usize, s: T, grad: Point3<T>) -> Self {
        Self { m, s, grad }
    }

    #[inline]
    pub fn eval(&self, x: &Point3<T>) -> T {
        self.s + self.grad[0] * x[0] + self.grad[1] * x[1] + self.grad[2] * x[2]
    }

    /// Min and max over the corners of a box (exact for affine functions).
    pub fn range_on(&self, b: &Aabb<T>) -> (T, T) {
        b.corners()
            .iter()
            .map(|c| self.eval(c))
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Constant,
    Affine,
}

/// `A(x) = A0 + Σ_i x_i A1_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixFieldSpec<T> {
    pub kind: FieldKind,
    pub a0: Mat3<T>,
    pub a1: Option<[Mat3<T>; 3]>,
    /// Bound on the Lipschitz seminorm.
    pub a_bar: T,
}

impl<T: Real> MatrixFieldSpec<T> {
    pub fn constant(a0: Mat3<T>, a_bar: T) -> Result<Self, ConductivityError> {
        let f = Self { kind: FieldKind::Constant, a0, a1: None, a_bar };
        f.validate()?;
        Ok(f)
    }

    pub fn identity() -> Self {
        Self { kind: FieldKind::Constant, a0: mat3_identity(), a1: None, a_bar: T::lit(5.0) }
    }

    pub fn affine(a0: Mat3<T>, a1: [Mat3<T>; 3], a_bar: T) -> Result<Self, ConductivityError> {
        let f = Self { kind: FieldKind::Affine, a0, a1: Some(a1), a_bar };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), ConductivityError> {
        let tol = T::lit(1e-12);
        let mut asym = mat3_to_dense(&self.a0).asymmetry();
        match (self.kind, &self.a1) {
            (FieldKind::Affine, None) => return Err(ConductivityError::MissingAffineCoefficients),
            (FieldKind::Affine, Some(a1)) => {
                for m in a1 {
                    asym = asym.max(mat3_to_dense(m).asymmetry());
                }
            }
            _ => {}
        }
        if asym > tol {
            return Err(ConductivityError::AsymmetricField(asym.as_f64()));
        }
        Ok(())
    }

    /// Symmetric by construction: only the upper triangle is evaluated.
    pub fn eval(&self, x: &Point3<T>) -> Mat3<T> {
        let mut a = self.a0;
        if let (FieldKind::Affine, Some(a1)) = (self.kind, &self.a1) {
            for (i, m) in a1.iter().enumerate() {
                for r in 0..3 {
                    for c in r..3 {
                        a[r][c] = a[r][c] + x[i] * m[r][c];
                    }
                }
            }
        }
        for r in 0..3 {
            for c in 0..r {
                a[r][c] = a[c][r];
            }
        }
        a
    }

    /// Lipschitz seminorm with respect to the spectral norm: `Σ_i |A1_i|`.
    pub fn lipschitz_seminorm(&self) -> T {
        match (&self.kind, &self.a1) {
            (FieldKind::Affine, Some(a1)) => a1.iter().map(|m| symmetric_spectral_norm(&mat3_to_dense(m))).sum(),
            _ => T::zero(),
        }
    }

    /// Same field with every coefficient multiplied by `t`.
    pub fn scaled(&self, t: T) -> Self {
        let sc = |m: &Mat3<T>| m.map(|r| r.map(|v| v * t));
        Self { kind: self.kind, a0: sc(&self.a0), a1: self.a1.as_ref().map(|a| a.each_ref().map(sc)), a_bar: self.a_bar * t }
    }
}

/// `σ = γ A` on Ω and `σ = I` on D0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conductivity<T> {
    /// Sorted by subdomain, `patches[m - 1].m == m`.
    pub patches: Vec<AffinePatch<T>>,
    pub a_field: MatrixFieldSpec<T>,
}

impl<T: Real> Conductivity<T> {
    pub fn new(mut patches: Vec<AffinePatch<T>>, a_field: MatrixFieldSpec<T>) -> Result<Self, ConductivityError> {
        a_field.validate()?;
        patches.sort_by_key(|p| p.m);
        let n_sub = patches.len();
        for (i, p) in patches.iter().enumerate() {
            if p.m != i + 1 {
                return Err(ConductivityError::BadPatchSet { m: p.m, n_sub });
            }
        }
        Ok(Self { patches, a_field })
    }

    /// Constant `γ = s` on every layer with `A = I`.
    pub fn homogeneous(n_sub: usize, s: T) -> Self {
        let patches = (1..=n_sub).map(|m| AffinePatch::new(m, s, [T::zero(); 3])).collect();
        Self { patches, a_field: MatrixFieldSpec::identity() }
    }

    pub fn n_sub(&self) -> usize {
        self.patches.len()
    }

    pub fn patch(&self, m: usize) -> &AffinePatch<T> {
        &self.patches[m - 1]
    }

    /// `γ` with the identity extension on D0.
    #[inline]
    pub fn gamma(&self, x: &Point3<T>, domain: usize) -> T {
        if domain == 0 {
            T::one()
        } else {
            self.patches[domain - 1].eval(x)
        }
    }

    /// `σ(x)` evaluated on the side of subdomain `domain`.
    pub fn eval_sigma(&self, x: &Point3<T>, domain: usize) -> Result<Mat3<T>, ConductivityError> {
        if domain > self.n_sub() {
            return Err(ConductivityError::IndexOutOfRange { index: domain, n_sub: self.n_sub() });
        }
        Ok(self.sigma_unchecked(x, domain))
    }

    #[inline]
    pub(crate) fn sigma_unchecked(&self, x: &Point3<T>, domain: usize) -> Mat3<T> {
        if domain == 0 {
            return mat3_identity();
        }
        let g = self.patches[domain - 1].eval(x);
        self.a_field.eval(x).map(|r| r.map(|v| v * g))
    }

    /// Flattened `(s_m, S_m)` coefficients, four per layer.
    pub fn coefficients(&self) -> Vec<T> {
        self.patches.iter().flat_map(|p| [p.s, p.grad[0], p.grad[1], p.grad[2]]).collect()
    }

    /// Same matrix field with coefficients replaced.
    pub fn with_coefficients(&self, coeffs: &[T]) -> Self {
        assert_eq!(coeffs.len(), 4 * self.n_sub());
        let patches = coeffs
            .chunks(4)
            .enumerate()
            .map(|(i, c)| AffinePatch::new(i + 1, c[0], [c[1], c[2], c[3]]))
            .collect();
        Self { patches, a_field: self.a_field.clone() }
    }

    pub fn compatible_with(&self, other: &Self) -> bool {
        self.n_sub() == other.n_sub() && self.a_field == other.a_field
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchBounds {
    pub m: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub pass: bool,
}

/// Outcome of the a-priori bound checks; violations are reported, not raised.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsDiagnostics {
    pub patches: Vec<PatchBounds>,
    pub a_eig_min: f64,
    pub a_eig_max: f64,
    pub ellipticity_pass: bool,
    pub lipschitz: f64,
    pub lipschitz_pass: bool,
    pub symmetric: bool,
}

impl BoundsDiagnostics {
    pub fn pass(&self) -> bool {
        self.patches.iter().all(|p| p.pass) && self.ellipticity_pass && self.lipschitz_pass && self.symmetric
    }
}

/// Bounding box of the cells of subdomain `m`.
pub fn subdomain_bounds<T: Real>(mesh: &Mesh<T>, m: usize) -> Option<Aabb<T>> {
    let mut lo = [T::infinity(); 3];
    let mut hi = [T::neg_infinity(); 3];
    let mut any = false;
    for (c, &d) in mesh.cell_domain.iter().enumerate() {
        if d != m {
            continue;
        }
        any = true;
        for p in mesh.cell_points(c) {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
    }
    any.then(|| Aabb::new(lo, hi))
}

pub fn check_bounds<T: Real>(c: &Conductivity<T>, mesh: &Mesh<T>, gamma_bar: T, lambda: T) -> BoundsDiagnostics {
    let patches = c
        .patches
        .iter()
        .map(|p| {
            let (lo, hi) = subdomain_bounds(mesh, p.m).map(|b| p.range_on(&b)).unwrap_or((p.s, p.s));
            PatchBounds {
                m: p.m,
                gamma_min: lo.as_f64(),
                gamma_max: hi.as_f64(),
                pass: lo >= gamma_bar.recip() && hi <= gamma_bar,
            }
        })
        .collect();
    let (mut emin, mut emax) = (T::infinity(), T::neg_infinity());
    let mut symmetric = true;
    let mut seen = vec![false; mesh.n_vertices()];
    for (cell, &d) in mesh.cells.iter().zip(&mesh.cell_domain) {
        if d == 0 {
            continue;
        }
        for &v in cell {
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            let a = mat3_to_dense(&c.a_field.eval(&mesh.vertices[v]));
            symmetric &= a.asymmetry() == T::zero();
            let e = SymmetricEigen::new(&a);
            emin = emin.min(e.values[0]);
            emax = emax.max(e.values[2]);
        }
    }
    let lip = c.a_field.lipschitz_seminorm();
    BoundsDiagnostics {
        patches,
        a_eig_min: emin.as_f64(),
        a_eig_max: emax.as_f64(),
        ellipticity_pass: emin >= lambda.recip() * (T::one() - T::lit(1e-12)) && emax <= lambda * (T::one() + T::lit(1e-12)),
        lipschitz: lip.as_f64(),
        lipschitz_pass: lip <= c.a_field.a_bar,
        symmetric,
    }
}

/// Result of [`linf_distance`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinfDistance<T> {
    /// `max_x |σ1(x) − σ2(x)|₂` over mesh vertices and subdomain corners.
    pub sigma_dist: T,
    /// `E = max_m ‖γ_m¹ − γ_m²‖_{L∞(D_m)}`, exact from box corners.
    pub gamma_dist: T,
    /// Subdomain attaining `E`.
    pub argmax: usize,
}

pub fn linf_distance<T: Real>(c1: &Conductivity<T>, c2: &Conductivity<T>, mesh: &Mesh<T>) -> Result<LinfDistance<T>, ConductivityError> {
    if !c1.compatible_with(c2) || c1.n_sub() != mesh.n_sub {
        return Err(ConductivityError::IncompatibleFields);
    }
    let boxes: Vec<Option<Aabb<T>>> = (0..=mesh.n_sub).map(|m| subdomain_bounds(mesh, m)).collect();
    let mut gamma_dist = T::zero();
    let mut argmax = 1;
    for m in 1..=c1.n_sub() {
        let (p1, p2) = (c1.patch(m), c2.patch(m));
        let diff = AffinePatch::new(m, p1.s - p2.s, [p1.grad[0] - p2.grad[0], p1.grad[1] - p2.grad[1], p1.grad[2] - p2.grad[2]]);
        if let Some(b) = &boxes[m] {
            let (lo, hi) = diff.range_on(b);
            let e = lo.abs().max(hi.abs());
            if e > gamma_dist {
                gamma_dist = e;
                argmax = m;
            }
        }
    }
    let norm_at = |x: &Point3<T>, m: usize| {
        let d = c1.sigma_unchecked(x, m);
        let e = c2.sigma_unchecked(x, m);
        let mut diff = mat3_zero();
        for r in 0..3 {
            for s in 0..3 {
                diff[r][s] = d[r][s] - e[r][s];
            }
        }
        symmetric_spectral_norm(&mat3_to_dense(&diff))
    };
    let mut sigma_dist = T::zero();
    let mut seen = std::collections::HashSet::new();
    for (cell, &m) in mesh.cells.iter().zip(&mesh.cell_domain) {
        if m == 0 {
            continue;
        }
        for &v in cell {
            if seen.insert((v, m)) {
                sigma_dist = sigma_dist.max(norm_at(&mesh.vertices[v], m));
            }
        }
    }
    for (m, b) in boxes.iter().enumerate().skip(1) {
        if let Some(b) = b {
            for corner in b.corners() {
                sigma_dist = sigma_dist.max(norm_at(&corner, m));
            }
        }
    }
    Ok(LinfDistance { sigma_dist, gamma_dist, argmax })
}
