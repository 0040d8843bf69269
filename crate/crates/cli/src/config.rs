//! Run configuration: a TOML document with fixed sections and strict keys.

use std::collections::BTreeMap;
use std::path::Path;

use calderon::conductivity::{AffinePatch, Conductivity, MatrixFieldSpec};
use calderon::geometry::{build_layered_geometry, Aabb, GeometrySpec, Rect};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Validation(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryBlock,
    #[serde(default)]
    pub mesh: MeshBlock,
    /// Named conductivities; `sigma1` and `sigma2` are the ones commands use.
    #[serde(default)]
    pub conductivity: BTreeMap<String, ConductivityBlock>,
    #[serde(default)]
    pub poles: PoleBlock,
    #[serde(default)]
    pub experiment: ExperimentBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryBlock {
    #[serde(default = "default_r0")]
    pub r0: f64,
    #[serde(default = "one")]
    pub lipschitz: f64,
    /// Number of layers `N`.
    pub n_sub: usize,
    /// `N + 1` interface heights from `0` down to `−1`.
    pub heights: Vec<f64>,
    #[serde(default = "default_sigma_patch")]
    pub sigma_patch: [[f64; 2]; 2],
    #[serde(default = "default_d0_box")]
    pub d0_box: [[f64; 3]; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshBlock {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

impl Default for MeshBlock {
    fn default() -> Self {
        Self { resolution: default_resolution() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKindName {
    Identity,
    Constant,
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEntry {
    pub m: usize,
    pub s: f64,
    #[serde(rename = "S", default)]
    pub grad: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConductivityBlock {
    #[serde(default = "default_field")]
    pub field: FieldKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a0: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a1: Option<[[[f64; 3]; 3]; 3]>,
    #[serde(default = "default_bound")]
    pub a_bar: f64,
    #[serde(default)]
    pub patch: Vec<PatchEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoleBlock {
    /// Defaults to the centred box of half the D0 width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dy: Option<[[f64; 3]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dz: Option<[[f64; 3]; 2]>,
    #[serde(default = "default_per_axis")]
    pub per_axis: usize,
}

impl Default for PoleBlock {
    fn default() -> Self {
        Self { dy: None, dz: None, per_axis: default_per_axis() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<f64>,
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    /// Interface (asymptotics) or chain index (smallness).
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_bound")]
    pub gamma_bar: f64,
    #[serde(default = "default_bound")]
    pub lambda: f64,
    /// Pole of the `green` command.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pole: Option<[f64; 3]>,
    /// Affine Dirichlet data `c + g·x` of the `forward` command, as `[c, g1, g2, g3]`.
    #[serde(default = "default_dirichlet")]
    pub dirichlet: [f64; 4],
    /// Coefficients left free in `reconstruct` (all when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free: Option<Vec<usize>>,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        toml::from_str("").expect("experiment defaults")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// File stem of the reports; the subcommand name when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { name: None, formats: default_formats() }
    }
}

fn default_r0() -> f64 {
    1.5
}
fn one() -> f64 {
    1.0
}
fn default_sigma_patch() -> [[f64; 2]; 2] {
    [[0.0, 0.0], [1.0, 1.0]]
}
fn default_d0_box() -> [[f64; 3]; 2] {
    [[0.25, 0.25, 0.0], [0.75, 0.75, 0.5]]
}
fn default_resolution() -> usize {
    8
}
fn default_field() -> FieldKindName {
    FieldKindName::Identity
}
fn default_bound() -> f64 {
    5.0
}
fn default_per_axis() -> usize {
    2
}
fn default_n_pairs() -> usize {
    20
}
fn default_t_grid() -> Vec<f64> {
    vec![0.02, 0.04, 0.08]
}
fn default_radii() -> Vec<f64> {
    vec![0.36, 0.18, 0.09]
}
fn default_k() -> usize {
    1
}
fn default_max_iter() -> usize {
    10
}
fn default_tol() -> f64 {
    1e-6
}
fn default_dirichlet() -> [f64; 4] {
    [0.0, 0.0, 0.0, 1.0]
}
fn default_formats() -> Vec<Format> {
    vec![Format::Json, Format::Csv]
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML text: sections and keys in a fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let g = &self.geometry;
        let bad = |s: String| Err(ConfigError::Validation(s));
        if g.heights.len() != g.n_sub + 1 {
            return bad(format!("geometry.heights needs n_sub + 1 = {} entries, got {}", g.n_sub + 1, g.heights.len()));
        }
        if self.mesh.resolution == 0 {
            return bad("mesh.resolution must be positive".into());
        }
        if self.poles.per_axis == 0 {
            return bad("poles.per_axis must be positive".into());
        }
        for (name, c) in &self.conductivity {
            for p in &c.patch {
                if p.m == 0 || p.m > g.n_sub {
                    return bad(format!("conductivity.{name}: patch m = {} outside 1..={}", p.m, g.n_sub));
                }
            }
            let mut seen = vec![false; g.n_sub + 1];
            for p in &c.patch {
                if std::mem::replace(&mut seen[p.m], true) {
                    return bad(format!("conductivity.{name}: patch m = {} given twice", p.m));
                }
            }
            match c.field {
                FieldKindName::Identity if c.a0.is_some() || c.a1.is_some() => {
                    return bad(format!("conductivity.{name}: identity field takes no a0/a1"));
                }
                FieldKindName::Constant if c.a0.is_none() || c.a1.is_some() => {
                    return bad(format!("conductivity.{name}: constant field needs a0 and no a1"));
                }
                FieldKindName::Affine if c.a0.is_none() || c.a1.is_none() => {
                    return bad(format!("conductivity.{name}: affine field needs a0 and a1"));
                }
                _ => {}
            }
        }
        if self.output.formats.is_empty() {
            return bad("output.formats is empty".into());
        }
        if let Some(n) = &self.output.name {
            if n.is_empty() || n.contains(['/', '\\']) {
                return bad("output.name must be a plain file stem".into());
            }
        }
        Ok(())
    }

    pub fn geometry_spec(&self) -> Result<GeometrySpec<f64>, ConfigError> {
        let g = &self.geometry;
        build_layered_geometry(
            g.r0,
            g.lipschitz,
            g.n_sub,
            &g.heights,
            Rect::new(g.sigma_patch[0], g.sigma_patch[1]),
            Aabb::new(g.d0_box[0], g.d0_box[1]),
        )
        .map_err(|e| ConfigError::Validation(format!("geometry: {e}")))
    }

    /// Named conductivity; missing blocks and missing patches default to
    /// `γ = 1` with the identity matrix field.
    pub fn conductivity(&self, name: &str) -> Result<Conductivity<f64>, ConfigError> {
        let n = self.geometry.n_sub;
        let Some(block) = self.conductivity.get(name) else {
            return Ok(Conductivity::homogeneous(n, 1.0));
        };
        let err = |e: calderon::conductivity::ConductivityError| ConfigError::Validation(format!("conductivity.{name}: {e}"));
        let field = match block.field {
            FieldKindName::Identity => MatrixFieldSpec { a_bar: block.a_bar, ..MatrixFieldSpec::identity() },
            FieldKindName::Constant => MatrixFieldSpec::constant(block.a0.unwrap_or_default(), block.a_bar).map_err(err)?,
            FieldKindName::Affine => MatrixFieldSpec::affine(block.a0.unwrap_or_default(), block.a1.unwrap_or_default(), block.a_bar).map_err(err)?,
        };
        let patches = (1..=n)
            .map(|m| match block.patch.iter().find(|p| p.m == m) {
                Some(p) => AffinePatch::new(m, p.s, p.grad),
                None => AffinePatch::new(m, 1.0, [0.0; 3]),
            })
            .collect();
        Conductivity::new(patches, field).map_err(err)
    }

    pub fn pole_boxes(&self, spec: &GeometrySpec<f64>) -> (Aabb<f64>, Aabb<f64>) {
        let b = |v: Option<[[f64; 3]; 2]>| v.map(|[lo, hi]| Aabb::new(lo, hi)).unwrap_or_else(|| spec.reference_pole_box());
        (b(self.poles.dy), b(self.poles.dz))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
    RunConfig::parse(&text, &path.display().to_string())
}
