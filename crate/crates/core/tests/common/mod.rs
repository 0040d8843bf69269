#![allow(dead_code)]

use calderon::conductivity::{AffinePatch, Conductivity, MatrixFieldSpec};
use calderon::geometry::{build_augmented_mesh, GeometrySpec, Mesh};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mesh(n_sub: usize, res: usize) -> Mesh<f64> {
    build_augmented_mesh(&GeometrySpec::reference(n_sub).unwrap(), res).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_patches(rng: &mut ChaCha8Rng, n_sub: usize) -> Vec<AffinePatch<f64>> {
    (1..=n_sub)
        .map(|m| AffinePatch::new(m, rng.gen_range(0.8..2.0), [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]))
        .collect()
}

/// Symmetric affine matrix field `A0 + Σ x_i A1_i`, positive on the unit box.
pub fn random_field(rng: &mut ChaCha8Rng) -> MatrixFieldSpec<f64> {
    let mut sym = |scale: f64, diag: f64| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                let v = rng.gen_range(-scale..scale);
                m[i][j] = v;
                m[j][i] = v;
            }
            m[i][i] += diag;
        }
        m
    };
    let a0 = sym(0.1, 1.0);
    let a1 = [sym(0.05, 0.0), sym(0.05, 0.0), sym(0.05, 0.0)];
    MatrixFieldSpec::affine(a0, a1, 5.0).unwrap()
}

pub fn random_conductivity(rng: &mut ChaCha8Rng, n_sub: usize) -> Conductivity<f64> {
    let patches = random_patches(rng, n_sub);
    let field = random_field(rng);
    Conductivity::new(patches, field).unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}
