//! Command-line front end: reads a run configuration, calls the library,
//! writes JSON/CSV reports.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use calderon::conductivity::check_bounds;
use calderon::experiments::{self, ExperimentError, PoleRegions, ReconstructOptions, SweepOptions};
use calderon::fem::{write_nodal_csv, FemSystem, Region};
use calderon::geometry::{build_augmented_mesh, GeometrySpec, Mesh};
use calderon::misfit::{dn_norm_diff, misfit_j_with_systems, MisfitError};
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{load_config, ConfigError, Format, RunConfig};
use output::Sink;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "calderon", version, about = "Misfit functional and stability probes for layered anisotropic conductivities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Dirichlet solve for `sigma1` with affine data.
    Forward,
    /// Green function of `sigma1` at `experiment.pole`.
    Green,
    /// Misfit J(sigma1, sigma2).
    Misfit,
    /// D-N operator distance of sigma1 and sigma2.
    DnNorm,
    /// Random-pair stability sweep.
    StabilitySweep,
    /// J along sigma1 + t (sigma2 − sigma1).
    Scaling,
    /// Green function against the two-layer leading term at an interface.
    Asymptotics,
    /// Smallness propagation probe for sigma1, sigma2.
    Smallness,
    /// Gauss–Newton recovery of sigma1 (truth) from sigma2 (start).
    Reconstruct,
    /// ASCII dump of the augmented mesh.
    MeshDump,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Green => "green",
            Command::Misfit => "misfit",
            Command::DnNorm => "dn-norm",
            Command::StabilitySweep => "stability-sweep",
            Command::Scaling => "scaling",
            Command::Asymptotics => "asymptotics",
            Command::Smallness => "smallness",
            Command::Reconstruct => "reconstruct",
            Command::MeshDump => "mesh-dump",
        }
    }
}

#[derive(Debug, thiserror::Error)]
enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    fn code(&self) -> i32 {
        match self {
            RunError::Config(ConfigError::Read { .. }) | RunError::Io(_) => EXIT_IO,
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<ExperimentError> for RunError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::InvalidInput(_)
            | ExperimentError::RadiiBelowResolution { .. }
            | ExperimentError::Inadmissible(_)
            | ExperimentError::ZeroPerturbation
            | ExperimentError::Geometry(_)
            | ExperimentError::Conductivity(_) => RunError::Config(ConfigError::Validation(e.to_string())),
            _ => RunError::Numerical(e.to_string()),
        }
    }
}

fn numerical(e: impl std::fmt::Display) -> RunError {
    RunError::Numerical(e.to_string())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to standard error; the paths of the
/// written reports go to standard output.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, RunError> {
    let n = match std::env::var("CALDERON_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| ConfigError::Validation(format!("CALDERON_THREADS must be a non-negative integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(numerical)
}

fn execute(cli: &Cli) -> Result<Vec<PathBuf>, RunError> {
    let path = cli.config.as_ref().ok_or_else(|| ConfigError::Validation("--config <path> is required".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(s) = cli.seed {
        cfg.experiment.seed = s;
    }
    let pool = thread_pool()?;
    std::fs::create_dir_all(&cli.out)?;
    let start = Instant::now();
    let command = cli.command;
    let stem = cfg.output.name.clone().unwrap_or_else(|| command.name().to_string());
    let mut sink = Sink { dir: cli.out.clone(), stem, command: command.name(), config: &cfg, written: Vec::new() };
    pool.install(|| dispatch(command, &cfg, &mut sink))?;
    eprintln!("{} finished in {:.2} s", command.name(), start.elapsed().as_secs_f64());
    Ok(sink.written)
}

struct Setup {
    spec: GeometrySpec<f64>,
    mesh: Mesh<f64>,
}

fn setup(cfg: &RunConfig) -> Result<Setup, RunError> {
    let spec = cfg.geometry_spec()?;
    let mesh = build_augmented_mesh(&spec, cfg.mesh.resolution).map_err(|e| ConfigError::Validation(format!("mesh: {e}")))?;
    Ok(Setup { spec, mesh })
}

fn poles(cfg: &RunConfig, spec: &GeometrySpec<f64>) -> Result<PoleRegions, RunError> {
    let (dy, dz) = cfg.pole_boxes(spec);
    PoleRegions::new(spec, dy, dz, cfg.poles.per_axis).map_err(|e| ConfigError::Validation(format!("poles: {e}")).into())
}

fn wants(cfg: &RunConfig, f: Format) -> bool {
    cfg.output.formats.contains(&f)
}

macro_rules! emit {
    ($cfg:expr, $sink:expr, $report:expr) => {{
        if wants($cfg, Format::Json) {
            $sink.json(&$report)?;
        }
        if wants($cfg, Format::Csv) {
            $sink.file(".csv", |w| $report.write_csv(w))?;
        }
    }};
}

#[derive(Serialize)]
struct ForwardReport {
    n_vertices: usize,
    n_cells: usize,
    energy: f64,
    sigma_flux_total: f64,
    max_interior_residual: f64,
}

#[derive(Serialize)]
struct GreenReport {
    pole: [f64; 3],
    n_vertices: usize,
    min_value: f64,
    max_value: f64,
    sigma_flux_total: f64,
}

#[derive(Serialize)]
struct MeshReport {
    resolution: usize,
    n_vertices: usize,
    n_cells: usize,
    n_facets: usize,
    n_sigma_facets: usize,
    augmented_volume: f64,
    volume_bound_holds: bool,
}

fn dispatch(command: Command, cfg: &RunConfig, sink: &mut Sink<'_>) -> Result<(), RunError> {
    let Setup { spec, mesh } = setup(cfg)?;
    let ex = &cfg.experiment;
    match command {
        Command::MeshDump => {
            let rep = MeshReport {
                resolution: mesh.resolution,
                n_vertices: mesh.n_vertices(),
                n_cells: mesh.n_cells(),
                n_facets: mesh.facets.len(),
                n_sigma_facets: mesh.sigma_facets().count(),
                augmented_volume: spec.augmented_volume(),
                volume_bound_holds: spec.volume_bound_holds(),
            };
            sink.file(".mesh", |w| mesh.write_ascii(w))?;
            if wants(cfg, Format::Json) {
                sink.json(&rep)?;
            }
        }
        Command::Forward => {
            let c = cfg.conductivity("sigma1")?;
            let sys = FemSystem::assemble_region(&mesh, &c, Region::Physical).map_err(numerical)?;
            let d = ex.dirichlet;
            let u = sys.solve_dirichlet_fn(|x| d[0] + d[1] * x[0] + d[2] * x[1] + d[3] * x[2]).map_err(numerical)?;
            let res = sys.residual_flux(&u);
            let max_res = (0..mesh.n_vertices()).filter(|&v| sys.in_region(v) && !sys.is_dirichlet(v)).map(|v| res[v].abs()).fold(0.0, f64::max);
            let rep = ForwardReport {
                n_vertices: mesh.n_vertices(),
                n_cells: mesh.n_cells(),
                energy: sys.energy(&u),
                sigma_flux_total: sys.conormal_flux_on_sigma(&u).total(),
                max_interior_residual: max_res,
            };
            if wants(cfg, Format::Json) {
                sink.json(&rep)?;
            }
            if wants(cfg, Format::Csv) {
                sink.file(".csv", |w| write_nodal_csv(&mesh, &u, w))?;
            }
        }
        Command::Green => {
            let pole = ex.pole.ok_or_else(|| ConfigError::Validation("green needs experiment.pole".into()))?;
            let c = cfg.conductivity("sigma1")?;
            let sys = FemSystem::assemble(&mesh, &c).map_err(numerical)?;
            let g = sys.green(&pole).map_err(numerical)?;
            let flux = sys.green_flux_on_sigma(&g).map_err(numerical)?;
            let rep = GreenReport {
                pole,
                n_vertices: mesh.n_vertices(),
                min_value: g.values.iter().copied().fold(f64::INFINITY, f64::min),
                max_value: g.values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                sigma_flux_total: flux.total(),
            };
            if wants(cfg, Format::Json) {
                sink.json(&rep)?;
            }
            if wants(cfg, Format::Csv) {
                sink.file(".csv", |w| write_nodal_csv(&mesh, &g.values, w))?;
            }
        }
        Command::Misfit => {
            let (c1, c2) = (cfg.conductivity("sigma1")?, cfg.conductivity("sigma2")?);
            let pr = poles(cfg, &spec)?;
            let s1 = FemSystem::assemble(&mesh, &c1).map_err(numerical)?;
            let s2 = FemSystem::assemble(&mesh, &c2).map_err(numerical)?;
            let rep = misfit_j_with_systems(&s1, &s2, &pr.dy, &pr.dz).map_err(|e: MisfitError| numerical(e))?;
            #[derive(Serialize)]
            struct Out<'a> {
                j: f64,
                floor: f64,
                at_floor: bool,
                misfit: &'a calderon::misfit::MisfitReport<f64>,
            }
            let out = Out { j: rep.j, floor: rep.floor(), at_floor: rep.j <= rep.floor(), misfit: &rep };
            if wants(cfg, Format::Json) {
                sink.json(&out)?;
            }
            if wants(cfg, Format::Csv) {
                sink.file(".csv", |w| rep.write_csv(w))?;
            }
        }
        Command::DnNorm => {
            let (c1, c2) = (cfg.conductivity("sigma1")?, cfg.conductivity("sigma2")?);
            let rep = dn_norm_diff(&c1, &c2, &mesh).map_err(numerical)?;
            sink.json(&rep)?;
        }
        Command::StabilitySweep => {
            let pr = poles(cfg, &spec)?;
            let field = cfg.conductivity("sigma1")?.a_field;
            let opts = SweepOptions { gamma_bar: ex.gamma_bar, lambda: ex.lambda, a_field: field, ..SweepOptions::default() };
            let rep = experiments::stability_sweep(&spec, cfg.mesh.resolution, &pr, ex.n_pairs, ex.seed, &opts)?;
            emit!(cfg, sink, rep);
        }
        Command::Scaling => {
            let (c1, c2) = (cfg.conductivity("sigma1")?, cfg.conductivity("sigma2")?);
            let pr = poles(cfg, &spec)?;
            let delta: Vec<_> = c1
                .patches
                .iter()
                .zip(&c2.patches)
                .map(|(a, b)| calderon::conductivity::AffinePatch::new(a.m, b.s - a.s, std::array::from_fn(|i| b.grad[i] - a.grad[i])))
                .collect();
            let rep = experiments::scaling_probe(&c1, &delta, &ex.t_grid, &mesh, &pr)?;
            emit!(cfg, sink, rep);
        }
        Command::Asymptotics => {
            let c = cfg.conductivity("sigma1")?;
            let rep = experiments::asymptotics_probe(&spec, &c, ex.k, &ex.radii, cfg.mesh.resolution)?;
            emit!(cfg, sink, rep);
        }
        Command::Smallness => {
            let (c1, c2) = (cfg.conductivity("sigma1")?, cfg.conductivity("sigma2")?);
            let pr = poles(cfg, &spec)?;
            let r = match ex.r {
                Some(r) => r,
                None => calderon::smallness::chain_parameters(spec.lipschitz, spec.r0).map_err(numerical)?.d(5),
            };
            let rep = experiments::smallness_probe(&spec, &c1, &c2, &mesh, &pr, ex.k, r)?;
            emit!(cfg, sink, rep);
        }
        Command::Reconstruct => {
            let (truth, init) = (cfg.conductivity("sigma1")?, cfg.conductivity("sigma2")?);
            for (name, c) in [("sigma1", &truth), ("sigma2", &init)] {
                if !check_bounds(c, &mesh, ex.gamma_bar, ex.lambda).pass() {
                    return Err(ConfigError::Validation(format!("conductivity.{name} violates the a-priori bounds")).into());
                }
            }
            let pr = poles(cfg, &spec)?;
            let opts = ReconstructOptions {
                max_iter: ex.max_iter,
                tol: ex.tol,
                free: ex.free.clone(),
                gamma_bar: ex.gamma_bar,
                lambda: ex.lambda,
                ..ReconstructOptions::default()
            };
            let rep = experiments::reconstruct(&truth, &init, &mesh, &pr, &opts)?;
            emit!(cfg, sink, rep);
        }
    }
    Ok(())
}
