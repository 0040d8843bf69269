//! Layered box domain, the exterior box glued on top of it, interface-aligned
//! tetrahedral meshes and tensor Gauss rules for pole regions.
//!
//! The physical domain is `Ω = (0,1)² × (−1, 0)` split into horizontal slabs
//! `D_m = (0,1)² × (h_m, h_{m−1})`. The flat patch `Σ` sits on the top face and
//! the box `D0` is glued on `Σ` from above; their union is the augmented domain.

use std::collections::HashMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{cross3, norm3, sub3, Point3, Real};

/// Snapping tolerance for grid-aligned planes.
pub const GRID_SNAP_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("layer heights are not strictly decreasing at position {index}")]
    NonMonotoneHeights { index: usize },
    #[error("expected {expected} layer heights (N + 1), got {got}")]
    HeightsMismatch { expected: usize, got: usize },
    #[error("layer heights must start at 0 and end at -1")]
    HeightsNotSpanning,
    #[error("at least one subdomain is required")]
    NoSubdomains,
    #[error("non-positive length parameter `{0}`")]
    InvalidLength(&'static str),
    #[error("D0 must sit on x_n = 0 and stay below r0/3")]
    D0OutsideSlab,
    #[error("bottom face of D0 is not strictly inside the flat patch Σ")]
    D0NotAboveSigma,
    #[error("flat patch Σ leaves the top face of Ω")]
    SigmaOutsideTopFace,
    #[error("flat portion of size {extent} is smaller than r0/3 = {required}")]
    FlatPortionTooSmall { extent: f64, required: f64 },
    #[error("resolution must be at least 2, got {0}")]
    InvalidResolution(usize),
    #[error("{what} = {value} is not on the 1/{resolution} grid")]
    IncommensurateGeometry { what: &'static str, value: f64, resolution: usize },
    #[error("cell {0} has non-positive volume")]
    DegenerateCell(usize),
    #[error("pole region is not compactly contained in D0 (margin {margin})")]
    RegionTouchesBoundary { margin: f64 },
    #[error("quadrature needs at least one point per axis")]
    InvalidQuadratureOrder,
}

/// Axis-aligned rectangle in the plane `x_n = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect<T> {
    pub min: [T; 2],
    pub max: [T; 2],
}

impl<T: Real> Rect<T> {
    pub fn new(min: [T; 2], max: [T; 2]) -> Self {
        Self { min, max }
    }

    pub fn area(&self) -> T {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }

    pub fn min_extent(&self) -> T {
        (self.max[0] - self.min[0]).min(self.max[1] - self.min[1])
    }

    pub fn contains_closed(&self, x: T, y: T, tol: T) -> bool {
        x >= self.min[0] - tol && x <= self.max[0] + tol && y >= self.min[1] - tol && y <= self.max[1] + tol
    }

    pub fn contains_open(&self, x: T, y: T, tol: T) -> bool {
        x > self.min[0] + tol && x < self.max[0] - tol && y > self.min[1] + tol && y < self.max[1] - tol
    }
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb<T> {
    pub min: Point3<T>,
    pub max: Point3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: Point3<T>, max: Point3<T>) -> Self {
        Self { min, max }
    }

    pub fn volume(&self) -> T {
        (0..3).map(|i| self.max[i] - self.min[i]).fold(T::one(), |a, b| a * b)
    }

    pub fn center(&self) -> Point3<T> {
        let h = T::lit(0.5);
        [
            (self.min[0] + self.max[0]) * h,
            (self.min[1] + self.max[1]) * h,
            (self.min[2] + self.max[2]) * h,
        ]
    }

    pub fn contains_open(&self, p: &Point3<T>) -> bool {
        (0..3).all(|i| p[i] > self.min[i] && p[i] < self.max[i])
    }

    pub fn contains_closed(&self, p: &Point3<T>, tol: T) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    /// Smallest gap between this box and the faces of `outer` (negative if it
    /// sticks out).
    pub fn margin_inside(&self, outer: &Aabb<T>) -> T {
        let mut m = T::infinity();
        for i in 0..3 {
            m = m.min(self.min[i] - outer.min[i]).min(outer.max[i] - self.max[i]);
        }
        m
    }

    /// Distance from an interior point to the boundary of the box.
    pub fn distance_to_boundary(&self, p: &Point3<T>) -> T {
        let mut m = T::infinity();
        for i in 0..3 {
            m = m.min(p[i] - self.min[i]).min(self.max[i] - p[i]);
        }
        m
    }

    /// Box shrunk by `r` on every side.
    pub fn inset(&self, r: T) -> Self {
        Self {
            min: [self.min[0] + r, self.min[1] + r, self.min[2] + r],
            max: [self.max[0] - r, self.max[1] - r, self.max[2] - r],
        }
    }

    pub fn corners(&self) -> [Point3<T>; 8] {
        let mut out = [[T::zero(); 3]; 8];
        for (c, p) in out.iter_mut().enumerate() {
            for i in 0..3 {
                p[i] = if (c >> i) & 1 == 0 { self.min[i] } else { self.max[i] };
            }
        }
        out
    }
}

/// Validated description of the layered domain and its exterior box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySpec<T> {
    pub r0: T,
    pub lipschitz: T,
    pub layer_heights: Vec<T>,
    pub sigma_patch: Rect<T>,
    pub d0_box: Aabb<T>,
    /// `P_1, …, P_N`: `P_1` is the centroid of `Σ`, `P_{k+1}` the centroid of
    /// the interface at height `h_k`.
    pub chain_points: Vec<Point3<T>>,
}

/// Validates the inputs and records the chain points.
pub fn build_layered_geometry<T: Real>(
    r0: T,
    lipschitz: T,
    n_sub: usize,
    layer_heights: &[T],
    sigma_patch: Rect<T>,
    d0_box: Aabb<T>,
) -> Result<GeometrySpec<T>, GeometryError> {
    if n_sub == 0 {
        return Err(GeometryError::NoSubdomains);
    }
    if !(r0 > T::zero()) {
        return Err(GeometryError::InvalidLength("r0"));
    }
    if !(lipschitz > T::zero()) {
        return Err(GeometryError::InvalidLength("lipschitz"));
    }
    if layer_heights.len() != n_sub + 1 {
        return Err(GeometryError::HeightsMismatch { expected: n_sub + 1, got: layer_heights.len() });
    }
    for i in 1..layer_heights.len() {
        if !(layer_heights[i] < layer_heights[i - 1]) {
            return Err(GeometryError::NonMonotoneHeights { index: i });
        }
    }
    let tol = T::lit(GRID_SNAP_TOL);
    if layer_heights[0].abs() > tol || (layer_heights[n_sub] + T::one()).abs() > tol {
        return Err(GeometryError::HeightsNotSpanning);
    }
    let third = r0 / T::lit(3.0);
    if (0..2).any(|i| sigma_patch.min[i] < -tol || sigma_patch.max[i] > T::one() + tol || sigma_patch.min[i] >= sigma_patch.max[i]) {
        return Err(GeometryError::SigmaOutsideTopFace);
    }
    // Interfaces span the full unit square, so only Σ can be too small.
    if sigma_patch.min_extent() < third.min(T::one()) {
        return Err(GeometryError::FlatPortionTooSmall {
            extent: sigma_patch.min_extent().as_f64(),
            required: third.as_f64(),
        });
    }
    if d0_box.min[2].abs() > tol || !(d0_box.max[2] > d0_box.min[2]) || d0_box.max[2] > third + tol {
        return Err(GeometryError::D0OutsideSlab);
    }
    let margin = r0 / T::lit(100.0);
    for i in 0..2 {
        if !(d0_box.max[i] > d0_box.min[i])
            || d0_box.min[i] - sigma_patch.min[i] < margin
            || sigma_patch.max[i] - d0_box.max[i] < margin
        {
            return Err(GeometryError::D0NotAboveSigma);
        }
    }
    let half = T::lit(0.5);
    let mut chain_points = Vec::with_capacity(n_sub);
    chain_points.push([
        (sigma_patch.min[0] + sigma_patch.max[0]) * half,
        (sigma_patch.min[1] + sigma_patch.max[1]) * half,
        T::zero(),
    ]);
    for &h in &layer_heights[1..n_sub] {
        chain_points.push([half, half, h]);
    }
    Ok(GeometrySpec {
        r0,
        lipschitz,
        layer_heights: layer_heights.to_vec(),
        sigma_patch,
        d0_box,
        chain_points,
    })
}

impl<T: Real> GeometrySpec<T> {
    /// Unit-box configuration used throughout the tests and the CLI defaults:
    /// `r0 = 1.5`, `Σ` the whole top face, `D0 = (1/4, 3/4)² × (0, 1/2)`,
    /// layer interfaces on the quarter grid (`n_sub ≤ 4`).
    pub fn reference(n_sub: usize) -> Result<Self, GeometryError> {
        let q = |x: f64| T::lit(x);
        let heights: Vec<T> = match n_sub {
            1 => vec![q(0.0), q(-1.0)],
            2 => vec![q(0.0), q(-0.5), q(-1.0)],
            3 => vec![q(0.0), q(-0.25), q(-0.5), q(-1.0)],
            4 => vec![q(0.0), q(-0.25), q(-0.5), q(-0.75), q(-1.0)],
            _ => return Err(GeometryError::HeightsMismatch { expected: 5, got: n_sub + 1 }),
        };
        build_layered_geometry(
            q(1.5),
            q(1.0),
            n_sub,
            &heights,
            Rect::new([q(0.0), q(0.0)], [q(1.0), q(1.0)]),
            Aabb::new([q(0.25), q(0.25), q(0.0)], [q(0.75), q(0.75), q(0.5)]),
        )
    }

    /// Pole boxes `D_y = D_z` centred in D0, half its width.
    pub fn reference_pole_box(&self) -> Aabb<T> {
        let c = self.d0_box.center();
        let half = T::lit(0.25);
        let mut min = c;
        let mut max = c;
        for i in 0..3 {
            let w = (self.d0_box.max[i] - self.d0_box.min[i]) * half;
            min[i] = c[i] - w;
            max[i] = c[i] + w;
        }
        Aabb::new(min, max)
    }

    pub fn n_sub(&self) -> usize {
        self.layer_heights.len() - 1
    }

    /// Bounding box of `D_m` (`m = 0` is the exterior box).
    pub fn subdomain_box(&self, m: usize) -> Aabb<T> {
        if m == 0 {
            return self.d0_box;
        }
        Aabb::new(
            [T::zero(), T::zero(), self.layer_heights[m]],
            [T::one(), T::one(), self.layer_heights[m - 1]],
        )
    }

    /// Index of the subdomain containing `p` in its interior, if any.
    pub fn domain_of_point(&self, p: &Point3<T>) -> Option<usize> {
        if self.d0_box.contains_open(p) {
            return Some(0);
        }
        (1..=self.n_sub()).find(|&m| self.subdomain_box(m).contains_open(p))
    }

    /// `P_k` for `k = 1..=N`.
    pub fn chain_point(&self, k: usize) -> Point3<T> {
        self.chain_points[k - 1]
    }

    /// `|Ω̃| = |Ω| + |D0|`.
    pub fn augmented_volume(&self) -> T {
        T::one() + self.d0_box.volume()
    }

    /// `|Ω| ≤ N r0³`.
    pub fn volume_bound_holds(&self) -> bool {
        T::one() <= T::from_count(self.n_sub()) * self.r0.powi(3)
    }

    /// `(D0)_r`: points of D0 farther than `r` from its boundary.
    pub fn d0_inset(&self, r: T) -> Aabb<T> {
        self.d0_box.inset(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FacetMarker {
    Sigma,
    Outer,
}

impl FacetMarker {
    pub fn name(self) -> &'static str {
        match self {
            FacetMarker::Sigma => "SIGMA",
            FacetMarker::Outer => "OUTER",
        }
    }
}

/// Marked triangle. Vertex order gives the outward normal (outward of Ω̃ for
/// `Outer`, outward of Ω, i.e. `+e_3`, for `Sigma`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Facet {
    pub vertices: [usize; 3],
    pub marker: FacetMarker,
}

/// Structured tetrahedral mesh of the augmented domain.
#[derive(Clone, Debug)]
pub struct Mesh<T> {
    pub vertices: Vec<Point3<T>>,
    pub cells: Vec<[usize; 4]>,
    /// Subdomain of each cell, `0` for D0.
    pub cell_domain: Vec<usize>,
    /// Facets on `∂Ω̃` plus the glued part of `Σ`.
    pub facets: Vec<Facet>,
    pub resolution: usize,
    pub n_sub: usize,
    /// Vertex lies on the closed patch `Σ`.
    pub on_sigma: Vec<bool>,
    /// Vertex lies in the relative interior of `Σ`.
    pub sigma_interior: Vec<bool>,
    sigma_patch: Rect<T>,
    grid: GridLookup,
}

#[derive(Clone, Debug)]
struct GridLookup {
    dims: [usize; 3],
    /// First cell of each cube, `usize::MAX` if the cube is not meshed.
    cube_first_cell: Vec<usize>,
}

// Kuhn split of the unit cube along its main diagonal.
const KUHN_PATHS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

fn snap_to_grid<T: Real>(value: T, resolution: usize, what: &'static str) -> Result<usize, GeometryError> {
    let scaled = value * T::from_count(resolution);
    let rounded = scaled.round();
    if (scaled - rounded).abs() > T::lit(GRID_SNAP_TOL) * T::from_count(resolution).max(T::one()) {
        return Err(GeometryError::IncommensurateGeometry { what, value: value.as_f64(), resolution });
    }
    Ok(rounded.to_i64().unwrap_or(0).max(0) as usize)
}

/// Signed volume of a tetrahedron.
pub fn tet_volume<T: Real>(p: &[Point3<T>; 4]) -> T {
    let a = sub3(&p[1], &p[0]);
    let b = sub3(&p[2], &p[0]);
    let c = sub3(&p[3], &p[0]);
    crate::scalar::dot3(&a, &cross3(&b, &c)) / T::lit(6.0)
}

/// Meshes the augmented domain with cubes of edge `1/resolution`, each split
/// into six tetrahedra.
pub fn build_augmented_mesh<T: Real>(spec: &GeometrySpec<T>, resolution: usize) -> Result<Mesh<T>, GeometryError> {
    if resolution < 2 {
        return Err(GeometryError::InvalidResolution(resolution));
    }
    let r = resolution;
    // Required planes, converted to grid indices. z indices are offset by r so
    // that k = 0 is the bottom face x_3 = -1.
    let mut layer_k = Vec::with_capacity(spec.layer_heights.len());
    for &h in &spec.layer_heights {
        layer_k.push(r - snap_to_grid(-h, r, "layer height")?);
    }
    let d0_lo = [
        snap_to_grid(spec.d0_box.min[0], r, "D0 x-min")?,
        snap_to_grid(spec.d0_box.min[1], r, "D0 y-min")?,
    ];
    let d0_hi = [
        snap_to_grid(spec.d0_box.max[0], r, "D0 x-max")?,
        snap_to_grid(spec.d0_box.max[1], r, "D0 y-max")?,
    ];
    let d0_top = snap_to_grid(spec.d0_box.max[2], r, "D0 top")?;
    let sig_lo = [
        snap_to_grid(spec.sigma_patch.min[0], r, "Σ x-min")?,
        snap_to_grid(spec.sigma_patch.min[1], r, "Σ y-min")?,
    ];
    let sig_hi = [
        snap_to_grid(spec.sigma_patch.max[0], r, "Σ x-max")?,
        snap_to_grid(spec.sigma_patch.max[1], r, "Σ y-max")?,
    ];

    let dims = [r, r, r + d0_top];
    let cube_index = |i: usize, j: usize, k: usize| (k * dims[1] + j) * dims[0] + i;
    let cube_domain = |i: usize, j: usize, k: usize| -> Option<usize> {
        if k < r {
            // layer_k is decreasing in m: D_m spans k in [layer_k[m], layer_k[m-1]).
            (1..layer_k.len()).find(|&m| k >= layer_k[m] && k < layer_k[m - 1])
        } else if i >= d0_lo[0] && i < d0_hi[0] && j >= d0_lo[1] && j < d0_hi[1] && k < r + d0_top {
            Some(0)
        } else {
            None
        }
    };

    // Mark used grid vertices.
    let vdims = [dims[0] + 1, dims[1] + 1, dims[2] + 1];
    let vindex = |i: usize, j: usize, k: usize| (k * vdims[1] + j) * vdims[0] + i;
    let mut used = vec![false; vdims[0] * vdims[1] * vdims[2]];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                if cube_domain(i, j, k).is_some() {
                    for c in 0..8 {
                        used[vindex(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1))] = true;
                    }
                }
            }
        }
    }
    // Lexicographic numbering in (k, j, i).
    let mut number = vec![usize::MAX; used.len()];
    let mut vertices = Vec::new();
    let mut grid_of_vertex = Vec::new();
    let rf = T::from_count(r);
    for k in 0..vdims[2] {
        for j in 0..vdims[1] {
            for i in 0..vdims[0] {
                let g = vindex(i, j, k);
                if used[g] {
                    number[g] = vertices.len();
                    vertices.push([
                        T::from_count(i) / rf,
                        T::from_count(j) / rf,
                        (T::from_count(k) - rf) / rf,
                    ]);
                    grid_of_vertex.push([i, j, k]);
                }
            }
        }
    }

    let mut cells = Vec::new();
    let mut cell_domain = Vec::new();
    let mut cube_first_cell = vec![usize::MAX; dims[0] * dims[1] * dims[2]];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let Some(dom) = cube_domain(i, j, k) else { continue };
                cube_first_cell[cube_index(i, j, k)] = cells.len();
                for path in KUHN_PATHS {
                    let mut g = [i, j, k];
                    let mut tet = [number[vindex(g[0], g[1], g[2])]; 4];
                    for (s, &axis) in path.iter().enumerate() {
                        g[axis] += 1;
                        tet[s + 1] = number[vindex(g[0], g[1], g[2])];
                    }
                    let pts = tet.map(|v| vertices[v]);
                    if tet_volume(&pts) < T::zero() {
                        tet.swap(2, 3);
                    }
                    let pts = tet.map(|v| vertices[v]);
                    if !(tet_volume(&pts) > T::zero()) {
                        return Err(GeometryError::DegenerateCell(cells.len()));
                    }
                    cells.push(tet);
                    cell_domain.push(dom);
                }
            }
        }
    }

    let on_sigma_grid = |g: &[usize; 3]| {
        g[2] == r && g[0] >= sig_lo[0] && g[0] <= sig_hi[0] && g[1] >= sig_lo[1] && g[1] <= sig_hi[1]
    };
    let on_sigma: Vec<bool> = grid_of_vertex.iter().map(on_sigma_grid).collect();
    let sigma_interior: Vec<bool> = grid_of_vertex
        .iter()
        .map(|g| g[2] == r && g[0] > sig_lo[0] && g[0] < sig_hi[0] && g[1] > sig_lo[1] && g[1] < sig_hi[1])
        .collect();

    // Facet incidence.
    let mut faces: HashMap<[usize; 3], (u8, usize, usize)> = HashMap::with_capacity(cells.len() * 2);
    for (c, tet) in cells.iter().enumerate() {
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
            let e = faces.entry(f).or_insert((0, c, skip));
            e.0 += 1;
        }
    }
    let mut facets = Vec::new();
    for (key, (count, cell, skip)) in faces {
        let sigma = key.iter().all(|&v| on_sigma[v]);
        let marker = if sigma { FacetMarker::Sigma } else { FacetMarker::Outer };
        if count == 1 || (count == 2 && sigma) {
            let tet = cells[cell];
            let apex = vertices[tet[skip]];
            let mut tri = key;
            let p = tri.map(|v| vertices[v]);
            let n = cross3(&sub3(&p[1], &p[0]), &sub3(&p[2], &p[0]));
            let outward = if sigma {
                n[2] > T::zero()
            } else {
                crate::scalar::dot3(&n, &sub3(&p[0], &apex)) > T::zero()
            };
            if !outward {
                tri.swap(1, 2);
            }
            facets.push(Facet { vertices: tri, marker });
        }
    }
    facets.sort_by_key(|f| {
        let mut k = f.vertices;
        k.sort_unstable();
        k
    });

    Ok(Mesh {
        vertices,
        cells,
        cell_domain,
        facets,
        resolution: r,
        n_sub: spec.n_sub(),
        on_sigma,
        sigma_interior,
        sigma_patch: spec.sigma_patch,
        grid: GridLookup { dims, cube_first_cell },
    })
}

impl<T: Real> Mesh<T> {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Grid step `1/resolution`.
    pub fn cell_size(&self) -> T {
        T::one() / T::from_count(self.resolution)
    }

    pub fn sigma_patch(&self) -> &Rect<T> {
        &self.sigma_patch
    }

    pub fn cell_points(&self, c: usize) -> [Point3<T>; 4] {
        self.cells[c].map(|v| self.vertices[v])
    }

    pub fn cell_volume(&self, c: usize) -> T {
        tet_volume(&self.cell_points(c))
    }

    pub fn cell_centroid(&self, c: usize) -> Point3<T> {
        let p = self.cell_points(c);
        let q = T::lit(0.25);
        [
            (p[0][0] + p[1][0] + p[2][0] + p[3][0]) * q,
            (p[0][1] + p[1][1] + p[2][1] + p[3][1]) * q,
            (p[0][2] + p[1][2] + p[2][2] + p[3][2]) * q,
        ]
    }

    /// Unit outward normal and area of a facet.
    pub fn facet_normal_area(&self, f: &Facet) -> (Point3<T>, T) {
        let p = f.vertices.map(|v| self.vertices[v]);
        let n = cross3(&sub3(&p[1], &p[0]), &sub3(&p[2], &p[0]));
        let len = norm3(&n);
        ([n[0] / len, n[1] / len, n[2] / len], len * T::lit(0.5))
    }

    pub fn sigma_facets(&self) -> impl Iterator<Item = &Facet> {
        self.facets.iter().filter(|f| f.marker == FacetMarker::Sigma)
    }

    /// Locates the cell containing `x` and its barycentric coordinates.
    pub fn locate(&self, x: &Point3<T>) -> Option<(usize, [T; 4])> {
        let rf = T::from_count(self.resolution);
        let g = [x[0] * rf, x[1] * rf, (x[2] + T::one()) * rf];
        let tol = T::lit(1e-9);
        let mut best: Option<(usize, [T; 4], T)> = None;
        let base: Vec<i64> = g.iter().map(|v| v.floor().to_i64().unwrap_or(-1)).collect();
        // Points on cube faces may belong to a neighbouring cube that is
        // meshed while this one is not.
        for dk in -1..=0i64 {
            for dj in -1..=0i64 {
                for di in -1..=0i64 {
                    let (i, j, k) = (base[0] + di, base[1] + dj, base[2] + dk);
                    if i < 0 || j < 0 || k < 0 {
                        continue;
                    }
                    let (i, j, k) = (i as usize, j as usize, k as usize);
                    if i >= self.grid.dims[0] || j >= self.grid.dims[1] || k >= self.grid.dims[2] {
                        continue;
                    }
                    let first = self.grid.cube_first_cell[(k * self.grid.dims[1] + j) * self.grid.dims[0] + i];
                    if first == usize::MAX {
                        continue;
                    }
                    for c in first..first + 6 {
                        let b = self.barycentric(c, x);
                        let worst = b.iter().fold(T::infinity(), |m, &v| m.min(v));
                        if worst >= -tol && best.as_ref().is_none_or(|(_, _, w)| worst > *w) {
                            best = Some((c, b, worst));
                        }
                    }
                }
            }
        }
        best.map(|(c, b, _)| (c, b))
    }

    /// Barycentric coordinates of `x` with respect to cell `c`.
    pub fn barycentric(&self, c: usize, x: &Point3<T>) -> [T; 4] {
        let p = self.cell_points(c);
        let vol = tet_volume(&p);
        let mut b = [T::zero(); 4];
        for (l, bl) in b.iter_mut().enumerate() {
            let mut q = p;
            q[l] = *x;
            *bl = tet_volume(&q) / vol;
        }
        b
    }

    /// Writes the ASCII dump: header, vertices, cells with domain marker,
    /// marked facets.
    pub fn write_ascii<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "mesh n=3 v={} c={}", self.vertices.len(), self.cells.len())?;
        for v in &self.vertices {
            writeln!(w, "{:.16e} {:.16e} {:.16e}", v[0].as_f64(), v[1].as_f64(), v[2].as_f64())?;
        }
        for (c, dom) in self.cells.iter().zip(&self.cell_domain) {
            writeln!(w, "{} {} {} {} {}", c[0], c[1], c[2], c[3], dom)?;
        }
        for f in &self.facets {
            writeln!(w, "{} {} {} {}", f.vertices[0], f.vertices[1], f.vertices[2], f.marker.name())?;
        }
        Ok(())
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    let mut nodes = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Newton on P_n in f64, starting from the Chebyshev-like guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = T::lit(-x);
        nodes[n - 1 - i] = T::lit(x);
        weights[i] = T::lit(w);
        weights[n - 1 - i] = T::lit(w);
    }
    if n % 2 == 1 {
        nodes[n / 2] = T::zero();
    }
    (nodes, weights)
}

/// Tensor Gauss rule over a box compactly contained in D0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoleRegion<T> {
    pub region: Aabb<T>,
    pub nodes: Vec<Point3<T>>,
    pub weights: Vec<T>,
}

pub fn pole_quadrature<T: Real>(spec: &GeometrySpec<T>, region: Aabb<T>, per_axis: usize) -> Result<PoleRegion<T>, GeometryError> {
    if per_axis == 0 {
        return Err(GeometryError::InvalidQuadratureOrder);
    }
    let margin = region.margin_inside(&spec.d0_box);
    if !(margin >= spec.r0 / T::lit(100.0)) || (0..3).any(|i| !(region.max[i] > region.min[i])) {
        return Err(GeometryError::RegionTouchesBoundary { margin: margin.as_f64() });
    }
    Ok(tensor_gauss(region, per_axis))
}

/// Tensor Gauss rule on an arbitrary box, nodes in lexicographic (x, y, z)
/// order with x fastest.
pub fn tensor_gauss<T: Real>(region: Aabb<T>, per_axis: usize) -> PoleRegion<T> {
    let (x, w) = gauss_legendre::<T>(per_axis);
    let half = T::lit(0.5);
    let map = |axis: usize, t: T| region.min[axis] + (t + T::one()) * half * (region.max[axis] - region.min[axis]);
    let jac: Vec<T> = (0..3).map(|a| (region.max[a] - region.min[a]) * half).collect();
    let mut nodes = Vec::with_capacity(per_axis.pow(3));
    let mut weights = Vec::with_capacity(per_axis.pow(3));
    for k in 0..per_axis {
        for j in 0..per_axis {
            for i in 0..per_axis {
                nodes.push([map(0, x[i]), map(1, x[j]), map(2, x[k])]);
                weights.push(w[i] * w[j] * w[k] * jac[0] * jac[1] * jac[2]);
            }
        }
    }
    PoleRegion { region, nodes, weights }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn reference_spec(heights: &[f64]) -> GeometrySpec<f64> {
        build_layered_geometry(
            1.5,
            1.0,
            heights.len() - 1,
            heights,
            Rect::new([0.0, 0.0], [1.0, 1.0]),
            Aabb::new([0.25, 0.25, 0.0], [0.75, 0.75, 0.5]),
        )
        .unwrap()
    }

    #[test]
    fn single_layer_small_r0() {
        let spec = build_layered_geometry(
            0.3,
            1.0,
            1,
            &[0.0, -1.0],
            Rect::new([0.25, 0.25], [0.75, 0.75]),
            Aabb::new([0.4, 0.4, 0.0], [0.6, 0.6, 0.1]),
        )
        .unwrap();
        assert_eq!(spec.n_sub(), 1);
        assert_eq!(spec.chain_point(1), [0.5, 0.5, 0.0]);
        // |Ω| = 1 > 0.3³: the scaling bound is reported, not enforced.
        assert!(!spec.volume_bound_holds());
    }

    #[test]
    fn two_layer_chain_point() {
        let spec = reference_spec(&[0.0, -0.5, -1.0]);
        assert_eq!(spec.chain_point(2), [0.5, 0.5, -0.5]);
        assert_eq!(spec.domain_of_point(&[0.5, 0.5, -0.7]), Some(2));
        assert_eq!(spec.domain_of_point(&[0.5, 0.5, 0.2]), Some(0));
        assert_eq!(spec.domain_of_point(&[0.1, 0.1, 0.2]), None);
    }

    #[test]
    fn geometry_errors() {
        let sig = Rect::new([0.0, 0.0], [1.0, 1.0]);
        let d0 = Aabb::new([0.25, 0.25, 0.0], [0.75, 0.75, 0.5]);
        assert_eq!(
            build_layered_geometry(1.5, 1.0, 3, &[0.0, -0.5, -0.4, -1.0], sig, d0),
            Err(GeometryError::NonMonotoneHeights { index: 2 })
        );
        let d0_off = Aabb::new([0.0, 0.25, 0.0], [0.5, 0.75, 0.5]);
        assert_eq!(
            build_layered_geometry(1.5, 1.0, 1, &[0.0, -1.0], sig, d0_off),
            Err(GeometryError::D0NotAboveSigma)
        );
        let tiny = Rect::new([0.45, 0.45], [0.55, 0.55]);
        assert!(matches!(
            build_layered_geometry(1.5, 1.0, 1, &[0.0, -1.0], tiny, d0),
            Err(GeometryError::FlatPortionTooSmall { .. })
        ));
        let tall = Aabb::new([0.25, 0.25, 0.0], [0.75, 0.75, 0.6]);
        assert_eq!(build_layered_geometry(1.5, 1.0, 1, &[0.0, -1.0], sig, tall), Err(GeometryError::D0OutsideSlab));
    }

    #[test]
    fn structured_counts_and_volume() {
        let spec = reference_spec(&[0.0, -1.0]);
        let mesh = build_augmented_mesh(&spec, 4).unwrap();
        let omega_cells = mesh.cell_domain.iter().filter(|&&d| d >= 1).count();
        assert_eq!(omega_cells, 6 * 4 * 4 * 4);
        // D0 is 2 × 2 × 2 cubes at this resolution.
        assert_eq!(mesh.n_cells() - omega_cells, 6 * 8);
        let vol: f64 = (0..mesh.n_cells()).map(|c| mesh.cell_volume(c)).sum();
        assert!((vol - spec.augmented_volume()).abs() < 1e-12);
        assert!((0..mesh.n_cells()).all(|c| mesh.cell_volume(c) > 0.0));
    }

    #[test]
    fn incommensurate_heights() {
        let spec = reference_spec(&[0.0, -1.0 / 3.0, -1.0]);
        assert!(matches!(build_augmented_mesh(&spec, 4), Err(GeometryError::IncommensurateGeometry { .. })));
        assert_eq!(build_augmented_mesh(&spec, 1).unwrap_err(), GeometryError::InvalidResolution(1));
    }

    #[test]
    fn conformity_and_markers() {
        let spec = reference_spec(&[0.0, -0.5, -1.0]);
        for res in [4usize, 8] {
            let mesh = build_augmented_mesh(&spec, res).unwrap();
            let mut count: HashMap<[usize; 3], usize> = HashMap::new();
            for tet in &mesh.cells {
                for skip in 0..4 {
                    let mut f: Vec<usize> = (0..4).filter(|&l| l != skip).map(|l| tet[l]).collect();
                    f.sort_unstable();
                    *count.entry([f[0], f[1], f[2]]).or_default() += 1;
                }
            }
            assert!(count.values().all(|&c| c == 1 || c == 2));
            let n_boundary = count.values().filter(|&&c| c == 1).count();
            let n_outer = mesh.facets.iter().filter(|f| f.marker == FacetMarker::Outer).count();
            let n_sigma_exposed = mesh
                .sigma_facets()
                .filter(|f| {
                    let mut k = f.vertices;
                    k.sort_unstable();
                    count[&k] == 1
                })
                .count();
            assert_eq!(n_boundary, n_outer + n_sigma_exposed);
            let sigma_area: f64 = mesh.sigma_facets().map(|f| mesh.facet_normal_area(f).1).sum();
            assert!((sigma_area - spec.sigma_patch.area()).abs() < 1e-12);
            for f in mesh.sigma_facets() {
                let (n, _) = mesh.facet_normal_area(f);
                assert!((n[2] - 1.0).abs() < 1e-14);
            }
            // Every cell in exactly one subdomain, split at interfaces.
            for (c, &d) in mesh.cell_domain.iter().enumerate() {
                let box_ = spec.subdomain_box(d);
                for p in mesh.cell_points(c) {
                    assert!(box_.contains_closed(&p, 1e-14));
                }
            }
        }
    }

    #[test]
    fn refinement_nesting() {
        let spec = reference_spec(&[0.0, -0.5, -1.0]);
        let a = build_augmented_mesh(&spec, 4).unwrap();
        let b = build_augmented_mesh(&spec, 8).unwrap();
        assert_eq!(b.sigma_facets().count(), 4 * a.sigma_facets().count());
        assert_eq!(b.n_cells(), 8 * a.n_cells());
    }

    #[test]
    fn locate_points() {
        let spec = reference_spec(&[0.0, -0.5, -1.0]);
        let mesh = build_augmented_mesh(&spec, 4).unwrap();
        for p in [[0.3, 0.6, -0.2], [0.5, 0.5, 0.3], [1.0, 1.0, -1.0], [0.25, 0.25, 0.5], [0.5, 0.5, 0.0]] {
            let (c, b) = mesh.locate(&p).expect("inside");
            assert!(b.iter().all(|&v| v > -1e-9));
            let q = mesh.cell_points(c);
            for i in 0..3 {
                let x: f64 = (0..4).map(|l| b[l] * q[l][i]).sum();
                assert!((x - p[i]).abs() < 1e-12);
            }
        }
        assert!(mesh.locate(&[0.1, 0.1, 0.3]).is_none());
    }

    #[test]
    fn ascii_dump_header() {
        let spec = reference_spec(&[0.0, -1.0]);
        let mesh = build_augmented_mesh(&spec, 4).unwrap();
        let mut buf = Vec::new();
        mesh.write_ascii(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!("mesh n=3 v={} c={}", mesh.n_vertices(), mesh.n_cells()));
        assert_eq!(text.lines().count(), 1 + mesh.n_vertices() + mesh.n_cells() + mesh.facets.len());
        assert!(text.lines().last().unwrap().ends_with("OUTER") || text.lines().last().unwrap().ends_with("SIGMA"));
    }

    #[test]
    fn gauss_rules() {
        let spec = reference_spec(&[0.0, -1.0]);
        let one = tensor_gauss(Aabb::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]), 1);
        assert_eq!(one.nodes, vec![[0.5, 0.5, 0.5]]);
        assert_eq!(one.weights, vec![1.0]);

        let region = Aabb::new([0.4, 0.4, 0.2], [0.6, 0.6, 0.22]);
        let pr = pole_quadrature(&spec, region, 2).unwrap();
        assert_eq!(pr.nodes.len(), 8);
        let total: f64 = pr.weights.iter().sum();
        assert!((total - 8e-4).abs() <= 1e-15 * 8e-4 * 10.0);
        // ∫ x_3² over the box, exact: (b³ - a³)/3 · area.
        let exact = (0.22f64.powi(3) - 0.2f64.powi(3)) / 3.0 * 0.04;
        let rule: f64 = pr.nodes.iter().zip(&pr.weights).map(|(p, w)| w * p[2] * p[2]).sum();
        assert!((rule - exact).abs() <= 1e-12 * exact);

        assert!(matches!(
            pole_quadrature(&spec, Aabb::new([0.25, 0.4, 0.1], [0.5, 0.6, 0.3]), 2),
            Err(GeometryError::RegionTouchesBoundary { .. })
        ));
        for n in 1..8 {
            let (x, w) = gauss_legendre::<f64>(n);
            // Exact for x^(2n-1) and x^(2n-2).
            let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(2 * n as i32 - 2)).sum();
            assert!((m - 2.0 / (2 * n - 1) as f64).abs() < 1e-14, "n={n}");
        }
    }
}
