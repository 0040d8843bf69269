mod common;

use calderon::conductivity::{linf_distance, AffinePatch, Conductivity, MatrixFieldSpec};
use calderon::experiments::*;
use calderon::fem::FemSystem;
use calderon::geometry::{build_augmented_mesh, GeometrySpec};
use calderon::misfit::s_boundary;
use calderon::smallness::chain_parameters;
use common::*;

fn layered(s1: f64, s2: f64) -> Conductivity<f64> {
    Conductivity::new(
        vec![AffinePatch::new(1, s1, [0.1, -0.2, 0.15]), AffinePatch::new(2, s2, [0.0, 0.1, -0.1])],
        MatrixFieldSpec::identity(),
    )
    .unwrap()
}

fn constant_layers(s1: f64, s2: f64) -> Conductivity<f64> {
    Conductivity::new(vec![AffinePatch::new(1, s1, [0.0; 3]), AffinePatch::new(2, s2, [0.0; 3])], MatrixFieldSpec::identity()).unwrap()
}

#[test]
fn sweep_flags_identical_pairs() {
    let spec = GeometrySpec::reference(2).unwrap();
    let poles = PoleRegions::reference(&spec, 2).unwrap();
    let opts = SweepOptions { identical: true, ..Default::default() };
    let rep = stability_sweep(&spec, 8, &poles, 1, 3, &opts).unwrap();
    assert!(rep.pairs[0].degenerate);
    assert_eq!(rep.pairs[0].ratio_theorem, None);
    assert_eq!(rep.summary.max_ratio_theorem, None);
    assert_eq!(rep.summary.n_degenerate, 1);
}

#[test]
fn sweep_is_reproducible_and_finite() {
    let spec = GeometrySpec::reference(2).unwrap();
    let poles = PoleRegions::reference(&spec, 2).unwrap();
    let a = stability_sweep(&spec, 8, &poles, 3, 11, &SweepOptions::default()).unwrap();
    let b = stability_sweep(&spec, 8, &poles, 3, 11, &SweepOptions::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for p in &a.pairs {
        assert!(!p.degenerate);
        assert!(p.ratio_theorem.unwrap().is_finite() && p.ratio_corollary.unwrap().is_finite());
        assert!(p.corollary_holds);
    }
    let c = stability_sweep(&spec, 8, &poles, 3, 12, &SweepOptions::default()).unwrap();
    assert_ne!(a.pairs[0].sigma1, c.pairs[0].sigma1);
}

#[test]
fn sampler_gives_up_on_impossible_bounds() {
    let spec = GeometrySpec::reference(1).unwrap();
    let poles = PoleRegions::reference(&spec, 2).unwrap();
    let opts = SweepOptions { offset_range: (6.0, 7.0), gradient_max: 0.0, ..Default::default() };
    assert_eq!(stability_sweep(&spec, 4, &poles, 1, 0, &opts).unwrap_err(), ExperimentError::SamplerExhausted(SAMPLER_TRIES));
}

#[test]
fn misfit_scales_quadratically() {
    let spec = GeometrySpec::reference(2).unwrap();
    let m = build_augmented_mesh(&spec, 8).unwrap();
    let poles = PoleRegions::reference(&spec, 2).unwrap();
    let delta = [AffinePatch::new(1, 1.0, [0.0, 0.5, 0.0]), AffinePatch::new(2, -0.5, [0.0, 0.0, 1.0])];
    let rep = scaling_probe(&layered(1.4, 0.9), &delta, &[0.02, 0.04, 0.08], &m, &poles).unwrap();
    assert!((rep.slope_j - 2.0).abs() <= 0.1, "{}", rep.slope_j);
    assert!((rep.slope_sqrt_j_e - 1.0).abs() <= 0.05);
    assert!(rep.e_linearity_error <= 1e-12);
    // doubling the perturbation doubles √J in the linear regime
    let pair = scaling_probe(&layered(1.4, 0.9), &delta, &[0.025, 0.05], &m, &poles).unwrap();
    assert!((pair.sqrt_j[1] / pair.sqrt_j[0] - 2.0).abs() <= 0.2);
    assert_eq!(scaling_probe(&layered(1.4, 0.9), &[AffinePatch::new(1, 0.0, [0.0; 3])], &[0.1, 0.2], &m, &poles).unwrap_err(), ExperimentError::ZeroPerturbation);
}

#[test]
fn two_layer_asymptotics() {
    let spec = GeometrySpec::reference(2).unwrap();
    let rep = asymptotics_probe(&spec, &constant_layers(1.0, 2.0), 1, &[0.36, 0.18, 0.09], 24).unwrap();
    assert!(rep.monotone);
    assert!(rep.reciprocity_gap <= 0.05, "{}", rep.reciprocity_gap);
    assert_eq!(rep.c_tilde, 2.0 / 3.0);
    assert!(matches!(
        asymptotics_probe(&spec, &constant_layers(1.0, 2.0), 1, &[0.36, 0.05], 24),
        Err(ExperimentError::RadiiBelowResolution { .. })
    ));
    assert!(matches!(asymptotics_probe(&spec, &constant_layers(1.0, 2.0), 1, &[0.1, 0.2], 24), Err(ExperimentError::InvalidInput(_))));
}

#[test]
#[ignore = "the Dirichlet walls of the unit box keep the residual near 40% at two cells on feasible meshes"]
fn homogeneous_asymptotics_leading_term() {
    let spec = GeometrySpec::reference(2).unwrap();
    let rep = asymptotics_probe(&spec, &constant_layers(1.5, 1.5), 1, &[2.0 / 24.0 + 1e-4], 24).unwrap();
    assert!(rep.samples[0].relative_0 <= 0.10, "{}", rep.samples[0].relative_0);
}

#[test]
fn smallness_probe_cases() {
    let spec = GeometrySpec::reference(2).unwrap();
    let m = build_augmented_mesh(&spec, 8).unwrap();
    let poles = PoleRegions::reference(&spec, 2).unwrap();
    let cp = chain_parameters(spec.lipschitz, spec.r0).unwrap();
    let (c1, c2) = (layered(1.4, 0.9), layered(1.1, 1.3));

    let same = smallness_probe(&spec, &c1, &c1, &m, &poles, 1, cp.d(5)).unwrap();
    assert_eq!(same.lhs, 0.0);
    assert!(same.bounds.iter().all(|b| b.holds));

    let base = smallness_probe(&spec, &c1, &c2, &m, &poles, 0, cp.d(5)).unwrap();
    assert_eq!(base.h_bar, 5);
    assert!((base.w[2] - cp.lambda(5)).abs() < 1e-15);
    assert!(base.eps0 > 0.0 && base.lhs.is_finite() && base.estim0_bound.is_finite());
    // k = 0: the volume form at the chain point against the boundary form
    let s1 = FemSystem::assemble(&m, &c1).unwrap();
    let s2 = FemSystem::assemble(&m, &c2).unwrap();
    let w = base.w;
    let b = s_boundary(&s1, &s1.green(&w).unwrap(), &s2, &s2.green(&w).unwrap()).unwrap();
    assert!(rel(base.lhs, b.abs()) <= 0.02, "{} {b}", base.lhs);

    let deep = smallness_probe(&spec, &c1, &c2, &m, &poles, 1, cp.d(5)).unwrap();
    assert!(deep.lhs > 0.0 && deep.w[2] > -0.5 && deep.w[2] < 0.0);

    let top = smallness_probe(&spec, &c1, &c2, &m, &poles, 1, cp.d(1));
    assert!(matches!(top, Err(ExperimentError::ChainPointOutsideMesh(_))));
}

#[test]
fn reconstruction_from_truth_stops_immediately() {
    let spec = GeometrySpec::reference(1).unwrap();
    let m = build_augmented_mesh(&spec, 8).unwrap();
    let poles = PoleRegions::reference(&spec, 2).unwrap();
    let c = Conductivity::new(vec![AffinePatch::new(1, 1.3, [0.1, -0.1, 0.2])], MatrixFieldSpec::identity()).unwrap();
    let rep = reconstruct(&c, &c, &m, &poles, &ReconstructOptions::default()).unwrap();
    assert_eq!(rep.iterations, 0);
    assert_eq!(rep.stop, StopReason::ObjectiveAtFloor);
}

#[test]
fn reconstruction_recovers_single_offset() {
    let spec = GeometrySpec::reference(1).unwrap();
    let m = build_augmented_mesh(&spec, 8).unwrap();
    let poles = PoleRegions::reference(&spec, 2).unwrap();
    let truth = Conductivity::new(vec![AffinePatch::new(1, 1.3, [0.1, -0.1, 0.2])], MatrixFieldSpec::identity()).unwrap();
    let mut init = truth.clone();
    init.patches[0].s += 0.1;
    let rep = reconstruct(&truth, &init, &m, &poles, &ReconstructOptions { free: Some(vec![0]), ..Default::default() }).unwrap();
    assert!(rep.iterations <= 10);
    assert!((rep.result.patches[0].s - 1.3).abs() <= 1e-3);
    assert!(rep.trace.windows(2).all(|w| w[1].objective < w[0].objective));
    assert_eq!(rep.result.patches[0].grad, truth.patches[0].grad);
    let mut csv = Vec::new();
    rep.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("iter,objective,E_to_truth,damping\n"));
}

#[test]
fn reconstruction_rejects_inadmissible_start() {
    let spec = GeometrySpec::reference(1).unwrap();
    let m = build_augmented_mesh(&spec, 8).unwrap();
    let poles = PoleRegions::reference(&spec, 2).unwrap();
    let truth = Conductivity::new(vec![AffinePatch::new(1, 1.3, [0.0; 3])], MatrixFieldSpec::identity()).unwrap();
    let mut init = truth.clone();
    init.patches[0].s = 13.0;
    assert!(matches!(reconstruct(&truth, &init, &m, &poles, &ReconstructOptions::default()), Err(ExperimentError::Inadmissible(_))));
    // far but admissible start: converges or reports a line-search failure,
    // never an inadmissible result
    init.patches[0].s = 4.5;
    match reconstruct(&truth, &init, &m, &poles, &ReconstructOptions::default()) {
        Ok(rep) => {
            let d = linf_distance(&rep.result, &truth, &m).unwrap();
            assert!(rep.result.patches[0].s <= 5.0 && rep.result.patches[0].s >= 0.2, "{d:?}");
        }
        Err(e) => assert!(matches!(e, ExperimentError::LineSearchFailure(_)), "{e}"),
    }
}
