//! Forward solves, Green's functions and the boundary misfit functional for
//! piecewise-affine anisotropic conductivities on a layered unit box, plus
//! numerical probes of the associated stability estimates.
//!
//! The numerical core is generic over [`scalar::Real`]; the aliases below fix
//! it to `f64`, which is what the experiments and the CLI use.

pub mod conductivity;
pub mod dense;
pub mod experiments;
pub mod fem;
pub mod geometry;
pub mod kernels;
pub mod misfit;
pub mod scalar;
pub mod smallness;
pub mod sparse;

pub type Point = scalar::Point3<f64>;
pub type GeometrySpec = geometry::GeometrySpec<f64>;
pub type Mesh = geometry::Mesh<f64>;
pub type PoleRegion = geometry::PoleRegion<f64>;
pub type Aabb = geometry::Aabb<f64>;
pub type Rect = geometry::Rect<f64>;
pub type AffinePatch = conductivity::AffinePatch<f64>;
pub type MatrixFieldSpec = conductivity::MatrixFieldSpec<f64>;
pub type Conductivity = conductivity::Conductivity<f64>;
pub type FemSystem<'m> = fem::FemSystem<'m, f64>;
pub type GreenField = fem::GreenField<f64>;
pub type MisfitReport = misfit::MisfitReport<f64>;
pub type DnNormReport = misfit::DnNormReport<f64>;
pub type ChainParams = smallness::ChainParams<f64>;
