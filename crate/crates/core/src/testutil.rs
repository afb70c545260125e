//! Random fixtures shared by unit and integration tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::space::{c, CMat, DensityOperator, SpaceLayout};

fn ginibre(n: usize, rng: &mut ChaCha8Rng) -> CMat {
    CMat::from_fn(n, n, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        c(re, im)
    })
}

/// Haar-distributed unitary via QR with the phase fix on R's diagonal.
pub fn random_unitary(n: usize, seed: u64) -> CMat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qr = ginibre(n, &mut rng).qr();
    let (q, r) = (qr.q(), qr.r());
    let mut q = q;
    for j in 0..n {
        let d = r[(j, j)];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { c(1.0, 0.0) };
        for i in 0..n {
            q[(i, j)] *= ph;
        }
    }
    q
}

/// Random full-rank density operator on the layout.
pub fn random_density(layout: SpaceLayout, seed: u64) -> DensityOperator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = ginibre(layout.d, &mut rng);
    let m = &g * g.adjoint();
    let tr = m.trace();
    DensityOperator { layout, matrix: m.map(|z| z / tr) }
}
