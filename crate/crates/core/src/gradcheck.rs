//! Central finite-difference oracle for the manual backward pass.
//!
//! Runs miniature gated networks in f64, perturbs every coordinate of
//! every parameter tensor and every population mass by `±h`, and compares
//! the loss differences against the analytic gradients. Instances whose
//! gated pre-activations sit too close to the relu kink are skipped, since
//! a central difference straddling the kink does not estimate the
//! subgradient.

use ndarray::Array2;
use rand_chacha::rand_core::RngCore;

use crate::data::{stream_rng, Batch, STREAM_GRADCHECK};
use crate::dynamics::PopulationState;
use crate::model::{backward, forward, init_params_with_dims, ModelDims, ModelParams};

/// The miniature architecture used by default gradient checks.
pub const TINY_DIMS: ModelDims = ModelDims {
    input: 6,
    hidden1: 4,
    hidden2: 3,
    classes: 2,
};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;

/// Minimum distance of any gated pre-activation from the relu kink for an
/// instance to count as well-conditioned.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckReport {
    /// Worst relative error across all checked coordinates and networks.
    pub max_rel_error: f64,
    /// Number of networks actually checked.
    pub networks: usize,
    /// Seeds skipped because an activation sat within `KINK_MARGIN` of the
    /// relu kink.
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE
    }
}

fn unit<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64) * (1.0 / 9007199254740992.0)
}

/// Deterministic random instance: init-scheme weights, masses in
/// `[0.2, 1.2]`, inputs in `[0, 1)`, uniform random targets.
pub fn random_instance(
    dims: ModelDims,
    seed: u64,
    batch_size: usize,
) -> (ModelParams<f64>, PopulationState<f64>, Batch<f64>) {
    let params = init_params_with_dims::<f64>(dims, seed);
    let mut rng = stream_rng(seed, STREAM_GRADCHECK, 0);
    let masses: Vec<f64> = (0..dims.populations()).map(|_| 0.2 + unit(&mut rng)).collect();
    let pop = PopulationState::from_vec(masses);
    let inputs = Array2::from_shape_fn((batch_size, dims.input), |_| unit(&mut rng));
    let targets: Vec<u8> = (0..batch_size)
        .map(|_| (rng.next_u64() % dims.classes as u64) as u8)
        .collect();
    let indices = (0..batch_size as u32).collect();
    (
        params,
        pop,
        Batch {
            inputs,
            targets,
            indices,
        },
    )
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn loss_of(params: &ModelParams<f64>, pop: &PopulationState<f64>, batch: &Batch<f64>) -> f64 {
    forward(params, pop, batch).expect("finite gradcheck forward").loss
}

/// Central-difference check of one instance. Returns `None` when the
/// instance is ill-conditioned (an activation within `KINK_MARGIN` of the
/// relu kink), otherwise the max relative error over all coordinates.
pub fn check_instance(dims: ModelDims, seed: u64, batch_size: usize) -> Option<f64> {
    let (params, pop, batch) = random_instance(dims, seed, batch_size);
    let trace = forward(&params, &pop, &batch).ok()?;
    let near_kink = trace
        .z1
        .iter()
        .chain(trace.z2.iter())
        .any(|&z| z.abs() < KINK_MARGIN);
    if near_kink {
        return None;
    }
    let grads = backward(&trace, &params, &pop, &batch);

    let mut worst = 0.0f64;
    let mut check = |analytic: f64, bump: &mut dyn FnMut(&mut ModelParams<f64>, &mut PopulationState<f64>, f64)| {
        let mut plus_params = params.clone();
        let mut plus_pop = pop.clone();
        bump(&mut plus_params, &mut plus_pop, FD_STEP);
        let mut minus_params = params.clone();
        let mut minus_pop = pop.clone();
        bump(&mut minus_params, &mut minus_pop, -FD_STEP);
        let numeric = (loss_of(&plus_params, &plus_pop, &batch)
            - loss_of(&minus_params, &minus_pop, &batch))
            / (2.0 * FD_STEP);
        worst = worst.max(rel_error(analytic, numeric));
    };

    macro_rules! check_tensor {
        ($field:ident) => {
            for (idx, &g) in grads.d_params.$field.indexed_iter() {
                check(g, &mut |p: &mut ModelParams<f64>, _pop, h| {
                    p.$field[idx] += h;
                });
            }
        };
    }
    check_tensor!(w1);
    check_tensor!(b1);
    check_tensor!(w2);
    check_tensor!(b2);
    check_tensor!(w3);
    check_tensor!(b3);
    for (i, &g) in grads.d_p.indexed_iter() {
        check(g, &mut |_p, pop: &mut PopulationState<f64>, h| {
            pop.masses[i] += h;
        });
    }
    Some(worst)
}

/// Checks `networks` well-conditioned random instances starting from
/// `base_seed`, skipping ill-conditioned seeds.
pub fn run(dims: ModelDims, networks: usize, base_seed: u64, batch_size: usize) -> GradcheckReport {
    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    let mut seed = base_seed;
    while checked < networks {
        match check_instance(dims, seed, batch_size) {
            Some(err) => {
                max_rel_error = max_rel_error.max(err);
                checked += 1;
            }
            None => skipped += 1,
        }
        seed += 1;
    }
    GradcheckReport {
        max_rel_error,
        networks: checked,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let report = run(TINY_DIMS, 3, 0, 5);
        assert!(
            report.passed(),
            "max relative error {} over {} nets",
            report.max_rel_error,
            report.networks
        );
    }

    #[test]
    fn report_counts_requested_networks() {
        let report = run(TINY_DIMS, 2, 100, 4);
        assert_eq!(report.networks, 2);
    }
}
