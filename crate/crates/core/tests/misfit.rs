mod common;

use calderon::conductivity::{AffinePatch, Conductivity, MatrixFieldSpec};
use calderon::dense::Matrix;
use calderon::fem::{FemSystem, Region};
use calderon::geometry::{build_augmented_mesh, build_layered_geometry, pole_quadrature, Aabb, GeometrySpec, Rect};
use calderon::misfit::*;
use common::*;
use nalgebra::DMatrix;

const Y: [f64; 3] = [0.45, 0.48, 0.2];
const Z: [f64; 3] = [0.55, 0.52, 0.3];

fn layered(s1: f64, s2: f64) -> Conductivity<f64> {
    Conductivity::new(
        vec![AffinePatch::new(1, s1, [0.1, -0.2, 0.15]), AffinePatch::new(2, s2, [0.0, 0.1, -0.1])],
        MatrixFieldSpec::identity(),
    )
    .unwrap()
}

#[test]
fn identical_conductivities_give_zero() {
    let m = mesh(2, 8);
    let c = layered(1.4, 0.9);
    let spec = GeometrySpec::reference(2).unwrap();
    let d = pole_quadrature(&spec, spec.reference_pole_box(), 2).unwrap();
    let sys = FemSystem::assemble(&m, &c).unwrap();
    let rep = misfit_j_with_systems(&sys, &sys, &d, &d).unwrap();
    for s in &rep.samples {
        assert!(s.value.abs() <= 1e-6 * s.scale, "{} vs {}", s.value, s.scale);
    }
    assert!(rep.j <= rep.floor());
    let g1 = sys.green(&Y).unwrap();
    let g2 = sys.green(&Z).unwrap();
    assert_eq!(s_volume(0, &g1, &g2, &c, &c, &m).unwrap(), 0.0);
    assert_eq!(s_second_derivative(0, &sys, &sys, &Y, &Z, (0, 2), None).unwrap(), 0.0);
}

#[test]
fn boundary_form_is_antisymmetric() {
    let m = mesh(2, 8);
    let (c1, c2) = (layered(1.4, 0.9), layered(1.1, 1.3));
    let s1 = FemSystem::assemble(&m, &c1).unwrap();
    let s2 = FemSystem::assemble(&m, &c2).unwrap();
    let g1 = s1.green(&Y).unwrap();
    let g2 = s2.green(&Z).unwrap();
    let a = s_boundary(&s1, &g1, &s2, &g2).unwrap();
    let b = s_boundary(&s2, &g2, &s1, &g1).unwrap();
    assert!(a != 0.0);
    assert_eq!(a, -b);
}

#[test]
fn mismatched_meshes_rejected() {
    let (m1, m2) = (mesh(2, 8), mesh(2, 8));
    let c = layered(1.0, 1.0);
    let s1 = FemSystem::assemble(&m1, &c).unwrap();
    let s2 = FemSystem::assemble(&m2, &c).unwrap();
    let g1 = s1.green(&Y).unwrap();
    let g2 = s2.green(&Z).unwrap();
    assert_eq!(s_boundary(&s1, &g1, &s2, &g2), Err(MisfitError::MismatchedMesh));
}

#[test]
fn boundary_and_volume_forms_agree() {
    let mut r = rng(11);
    let mut gaps = Vec::new();
    let a = random_field(&mut r);
    let c1 = Conductivity::new(random_patches(&mut r, 2), a.clone()).unwrap();
    let c2 = Conductivity::new(random_patches(&mut r, 2), a).unwrap();
    for res in [8, 16] {
        let m = mesh(2, res);
        let s1 = FemSystem::assemble(&m, &c1).unwrap();
        let s2 = FemSystem::assemble(&m, &c2).unwrap();
        let g1 = s1.green(&Y).unwrap();
        let g2 = s2.green(&Z).unwrap();
        let b = s_boundary(&s1, &g1, &s2, &g2).unwrap();
        let v = s_volume(0, &g1, &g2, &c1, &c2, &m).unwrap();
        gaps.push(rel(b, v));
    }
    assert!(gaps[0] <= 0.02, "{gaps:?}");
    assert!(gaps[1] <= gaps[0], "{gaps:?}");
}

#[test]
fn volume_form_linear_in_small_perturbation() {
    let m = mesh(2, 8);
    let c1 = layered(1.4, 0.9);
    let sys1 = FemSystem::assemble(&m, &c1).unwrap();
    let g1 = sys1.green(&Y).unwrap();
    let vals: Vec<f64> = [1e-3, 2e-3]
        .iter()
        .map(|&t| {
            let c2 = Conductivity::new(c1.patches.iter().map(|p| AffinePatch::new(p.m, p.s * (1.0 + t), p.grad.map(|g| g * (1.0 + t)))).collect(), MatrixFieldSpec::identity()).unwrap();
            let sys2 = FemSystem::assemble(&m, &c2).unwrap();
            let g2 = sys2.green(&Z).unwrap();
            s_volume(0, &g1, &g2, &c1, &c2, &m).unwrap()
        })
        .collect();
    assert!((vals[1] / vals[0] - 2.0).abs() <= 0.02, "{vals:?}");
}

#[test]
fn volume_form_rejects_pole_in_region() {
    let m = mesh(2, 8);
    let c = layered(1.0, 1.2);
    let sys = FemSystem::assemble(&m, &c).unwrap();
    let g = sys.green(&Y).unwrap();
    let inner = calderon::fem::NodalField(g.values.clone());
    assert!(s_volume(0, &g, &inner, &c, &c, &m).is_ok());
    let mut shifted = g.clone();
    shifted.pole = [0.5, 0.5, -0.3];
    assert!(matches!(s_volume(0, &shifted, &g, &c, &layered(1.1, 1.2), &m), Err(MisfitError::PoleInsideRegion(_))));
    // for k = 1 only layer 2 is integrated; a pole in layer 1 is fine
    assert!(s_volume(1, &shifted, &g, &c, &layered(1.1, 1.2), &m).is_ok());
}

#[test]
fn second_derivative_exchange_and_step_order() {
    let m = mesh(2, 8);
    let (c1, c2) = (layered(1.4, 0.9), layered(1.1, 1.3));
    let s1 = FemSystem::assemble(&m, &c1).unwrap();
    let s2 = FemSystem::assemble(&m, &c2).unwrap();
    let a = s_second_derivative(0, &s1, &s2, &Y, &Z, (0, 2), None).unwrap();
    let b = s_second_derivative(0, &s2, &s1, &Z, &Y, (2, 0), None).unwrap();
    assert!(rel(-b, a) <= 0.05, "{a} {b}");
    let h = s1.default_pole_step();
    let v: Vec<f64> = [h, h / 2.0, h / 4.0].iter().map(|&st| s_second_derivative(0, &s1, &s2, &Y, &Z, (2, 2), Some(st)).unwrap()).collect();
    let ratio = (v[0] - v[1]) / (v[1] - v[2]);
    assert!((3.0..=5.0).contains(&ratio), "{ratio} {v:?}");
}

#[test]
fn misfit_symmetric_and_quadratic() {
    let m = mesh(2, 8);
    let spec = GeometrySpec::reference(2).unwrap();
    let d = pole_quadrature(&spec, spec.reference_pole_box(), 2).unwrap();
    let c1 = layered(1.4, 0.9);
    let family = |t: f64| {
        let mut c = c1.clone();
        c.patches[0].s += t;
        c.patches[1].grad[2] += t;
        c
    };
    let j12 = misfit_j(&c1, &family(0.04), &m, &d, &d).unwrap();
    let j21 = misfit_j(&family(0.04), &c1, &m, &d, &d).unwrap();
    assert!(rel(j21.j, j12.j) <= 1e-12);
    assert_eq!(j12.samples.len(), 64);
    let ts = [0.02, 0.04, 0.08];
    let lj: Vec<f64> = ts.iter().map(|&t| misfit_j(&c1, &family(t), &m, &d, &d).unwrap().j.ln()).collect();
    let lt: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let slope = fit_slope(&lt, &lj);
    assert!((slope - 2.0).abs() <= 0.1, "{slope}");
}

fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn singular_solution_growth_toward_sigma() {
    // wide D0 so the exterior Dirichlet walls do not dominate the path
    let spec = build_layered_geometry(3.0, 1.0, 2, &[0.0, -0.5, -1.0], Rect::new([0.0, 0.0], [1.0, 1.0]), Aabb::new([0.125, 0.125, 0.0], [0.875, 0.875, 1.0])).unwrap();
    let m = build_augmented_mesh(&spec, 24).unwrap();
    let (c1, c2) = (layered(1.4, 0.9), layered(1.1, 1.3));
    let s1 = FemSystem::assemble(&m, &c1).unwrap();
    let s2 = FemSystem::assemble(&m, &c2).unwrap();
    let ds = [0.1, 0.075, 0.05];
    let vals: Vec<f64> = ds
        .iter()
        .map(|&d| {
            let g1 = s1.green(&[0.4, 0.5, d]).unwrap();
            let g2 = s2.green(&[0.6, 0.5, d]).unwrap();
            s_boundary(&s1, &g1, &s2, &g2).unwrap()
        })
        .collect();
    assert!(vals.iter().all(|v| v.is_finite() && *v != 0.0));
    let slope = fit_slope(&ds.map(f64::ln), &vals.iter().map(|v| v.abs().ln()).collect::<Vec<_>>());
    assert!(slope >= -1.3, "{slope} {vals:?}");
}

fn sigma_hat(m: &calderon::geometry::Mesh<f64>, v: usize) -> Vec<f64> {
    let mut g = vec![0.0; m.n_vertices()];
    g[v] = 1.0;
    g
}

#[test]
fn dn_pairing_properties() {
    let m = mesh(2, 8);
    let c = Conductivity::new(random_patches(&mut rng(5), 2), random_field(&mut rng(6))).unwrap();
    let sys = FemSystem::assemble_region(&m, &c, Region::Physical).unwrap();
    let sig: Vec<usize> = (0..m.n_vertices()).filter(|&v| m.sigma_interior[v]).collect();
    let g: Vec<f64> = (0..m.n_vertices()).map(|v| if m.sigma_interior[v] { (3.0 * m.vertices[v][0]).sin() + m.vertices[v][1] } else { 0.0 }).collect();
    let eta: Vec<f64> = (0..m.n_vertices()).map(|v| if m.sigma_interior[v] { m.vertices[v][0] * m.vertices[v][1] } else { 0.0 }).collect();
    let gg = dn_apply(&sys, &g, &g).unwrap();
    assert!(gg > 0.0);
    let a = dn_apply(&sys, &g, &eta).unwrap();
    let b = dn_apply(&sys, &eta, &g).unwrap();
    assert!((a - b).abs() <= 1e-11 * gg.max(a.abs()), "{a} {b}");
    let z = dn_apply_zero_extension(&sys, &g, &eta).unwrap();
    assert!((a - z).abs() <= 1e-9 * a.abs().max(1.0), "{a} {z}");
    let mut bad = g.clone();
    let off = (0..m.n_vertices()).find(|&v| !m.sigma_interior[v]).unwrap();
    bad[off] = 1.0;
    assert_eq!(dn_apply(&sys, &bad, &eta), Err(MisfitError::DataNotSupportedOnSigma(off)));
    let aug = FemSystem::assemble(&m, &c).unwrap();
    assert_eq!(dn_apply(&aug, &g, &eta), Err(MisfitError::WrongRegion));
    assert!(sig.len() == 49);
}

#[test]
fn dn_diagonal_matches_dense_schur_complement() {
    let m = mesh(1, 4);
    let c = Conductivity::homogeneous(1, 1.0);
    let sys = FemSystem::assemble_region(&m, &c, Region::Physical).unwrap();
    let k = sys.stiffness();
    let active: Vec<usize> = (0..m.n_vertices()).filter(|&v| sys.in_region(v)).collect();
    let free: Vec<usize> = active.iter().copied().filter(|&v| !sys.is_dirichlet(v)).collect();
    let sig: Vec<usize> = (0..m.n_vertices()).filter(|&v| m.sigma_interior[v]).collect();
    let dense = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| k.get(rows[i], cols[j]));
    let kss = dense(&sig, &sig);
    let ksf = dense(&sig, &free);
    let kff = dense(&free, &free);
    let schur = &kss - &ksf * kff.clone().cholesky().unwrap().solve(&ksf.transpose());
    let op = DnOperator::new(&sys).unwrap();
    assert_eq!(op.basis, sig);
    for (i, &v) in sig.iter().enumerate() {
        let h = sigma_hat(&m, v);
        let d = dn_apply(&sys, &h, &h).unwrap();
        assert!((d - schur[(i, i)]).abs() <= 1e-10 * schur[(i, i)]);
        for j in 0..sig.len() {
            assert!((op.action[(i, j)] - schur[(i, j)]).abs() <= 1e-10 * schur[(i, i)]);
        }
    }
}

#[test]
fn dn_operator_symmetric_and_norm_properties() {
    let m = mesh(2, 8);
    let c1 = Conductivity::new(random_patches(&mut rng(1), 2), random_field(&mut rng(2))).unwrap();
    let c2 = layered(1.2, 1.0);
    let op = DnOperator::new(&FemSystem::assemble_region(&m, &c1, Region::Physical).unwrap()).unwrap();
    assert!(op.action.asymmetry() <= 1e-11 * op.action.max_abs());
    let same = dn_norm_diff(&c1, &c1, &m).unwrap();
    assert!(same.value <= 1e-10, "{}", same.value);
    let op2 = DnOperator::new(&FemSystem::assemble_region(&m, &c2, Region::Physical).unwrap()).unwrap();
    let gram = DnOperator::new(&FemSystem::assemble_region(&m, &Conductivity::homogeneous(2, 1.0), Region::Physical).unwrap()).unwrap();
    let base = dn_norm_diff_operators(&op, &op2, &gram).unwrap();
    assert!(base.converged && base.value > 0.0);
    let doubled = DnOperator { basis: op.basis.clone(), action: op.action.scale(2.0) };
    let doubled2 = DnOperator { basis: op2.basis.clone(), action: op2.action.scale(2.0) };
    let twice = dn_norm_diff_operators(&doubled, &doubled2, &gram).unwrap();
    assert!(rel(twice.value, 2.0 * base.value) <= 1e-8, "{} {}", twice.value, base.value);
    let direct = dn_norm_diff(&c1, &c2, &m).unwrap();
    assert_eq!(direct.value, base.value);
}

#[test]
fn power_iteration_matches_dense_eigenvalue() {
    let m = Matrix::from_rows(&[[2.0, 1.0, 0.0], [1.0, -3.0, 0.5], [0.0, 0.5, 1.0]]);
    let b = Matrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.5]]);
    let r = generalized_power_iteration(&m, &b).unwrap();
    // B^{-1/2} M B^{-1/2}
    let s = [2f64.sqrt().recip(), 1.0, 2f64.sqrt()];
    let c = DMatrix::from_fn(3, 3, |i, j| s[i] * m[(i, j)] * s[j]);
    let want = c.symmetric_eigen().eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(r.converged);
    assert!(rel(r.value, want) <= 1e-7, "{} {want}", r.value);
}
