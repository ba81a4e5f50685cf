//! Selection dynamics over per-neuron population masses.
//!
//! Masses grow or decay multiplicatively by how a population's fitness
//! compares to a mean fitness term. Three discrete dynamics are provided:
//!
//! * replicator      — mean term is the population-weighted average,
//! * normalized      — mean term divides by the fixed mass cap `Z`,
//! * mutation        — replicator plus a diffusion pull toward `1/N` that
//!                     lets extinct populations recover.
//!
//! The selection signal `s_i = phi_i - mean` is clipped symmetrically to
//! `±clip` before the multiplicative update; the mutation term is not
//! clipped. Every step ends with projection onto the non-negative orthant.

use ndarray::{Array1, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which discrete selection dynamic to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DynamicsKind {
    #[default]
    Replicator,
    Normalized,
    Mutation,
}

impl std::fmt::Display for DynamicsKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            DynamicsKind::Replicator => "replicator",
            DynamicsKind::Normalized => "normalized",
            DynamicsKind::Mutation => "mutation",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for DynamicsKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "replicator" => Ok(DynamicsKind::Replicator),
            "normalized" => Ok(DynamicsKind::Normalized),
            "mutation" => Ok(DynamicsKind::Mutation),
            other => Err(format!(
                "unknown dynamic '{other}' (expected replicator, normalized, or mutation)"
            )),
        }
    }
}

/// Non-negative mass per prunable neuron. For the MNIST network the layout
/// is hidden layer 1 at indices `0..512` and hidden layer 2 at `512..768`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState<F> {
    pub masses: Array1<F>,
}

impl<F: NdFloat> PopulationState<F> {
    /// All masses at 1.0, the initial condition.
    pub fn ones(n: usize) -> Self {
        Self {
            masses: Array1::from_elem(n, F::one()),
        }
    }

    pub fn from_vec(masses: Vec<F>) -> Self {
        Self {
            masses: Array1::from_vec(masses),
        }
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    /// Sequential sum of all masses (fixed reduction order).
    pub fn total_mass(&self) -> F {
        self.masses.iter().fold(F::zero(), |acc, &m| acc + m)
    }
}

/// Per-population fitness for one update step: the raw contribution `c`
/// and the regularized fitness `phi = c - lambda * p`.
#[derive(Debug, Clone)]
pub struct FitnessVector<F> {
    pub contribution: Array1<F>,
    pub fitness: Array1<F>,
}

/// Hyperparameters of the selection step.
#[derive(Debug, Clone, Copy)]
pub struct DynamicsConfig<F> {
    pub kind: DynamicsKind,
    /// Population learning rate.
    pub eta_p: F,
    /// Linear decay pressure on mass.
    pub lambda: F,
    /// Mutation rate (mutation dynamic only).
    pub mu: F,
    /// Fixed mass cap dividing the mean term of the normalized dynamic.
    pub z: F,
    /// Symmetric bound on the selection signal.
    pub clip: F,
}

impl<F: NdFloat> DynamicsConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_p >= F::zero()) {
            return Err(Error::Config("eta_p must be >= 0".into()));
        }
        if !(self.lambda >= F::zero()) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(self.mu >= F::zero()) {
            return Err(Error::Config("mu must be >= 0".into()));
        }
        if !(self.z > F::zero()) {
            return Err(Error::Config("z must be > 0".into()));
        }
        if !(self.clip > F::zero()) {
            return Err(Error::Config("clip must be > 0".into()));
        }
        Ok(())
    }
}

/// `c_i = |d_p_i|`, `phi_i = c_i - lambda * p_i`.
pub fn compute_fitness<F: NdFloat>(
    d_p: &Array1<F>,
    pop: &PopulationState<F>,
    lambda: F,
) -> FitnessVector<F> {
    assert_eq!(
        d_p.len(),
        pop.len(),
        "fitness input length must match population"
    );
    let contribution = d_p.mapv(|g| g.abs());
    let fitness = Array1::from_shape_fn(pop.len(), |i| contribution[i] - lambda * pop.masses[i]);
    FitnessVector {
        contribution,
        fitness,
    }
}

/// Sequential weighted sum `sum_j p_j * phi_j`.
fn weighted_fitness_sum<F: NdFloat>(pop: &PopulationState<F>, fitness: &Array1<F>) -> F {
    pop.masses
        .iter()
        .zip(fitness.iter())
        .fold(F::zero(), |acc, (&p, &phi)| acc + p * phi)
}

/// Population-weighted mean fitness `sum(p*phi) / sum(p)`. Errors when the
/// total mass is zero.
pub fn weighted_mean_fitness<F: NdFloat>(
    pop: &PopulationState<F>,
    fitness: &Array1<F>,
) -> Result<F> {
    assert_eq!(pop.len(), fitness.len(), "fitness length must match population");
    let total = pop.total_mass();
    if !(total > F::zero()) {
        return Err(Error::DegeneratePopulation);
    }
    Ok(weighted_fitness_sum(pop, fitness) / total)
}

fn clip_signal<F: NdFloat>(s: F, bound: F) -> F {
    if s > bound {
        bound
    } else if s < -bound {
        -bound
    } else {
        s
    }
}

/// Shared multiplicative update `p' = max(0, p + eta_p * p * clip(phi - mean))`.
fn selection_update<F: NdFloat>(
    pop: &PopulationState<F>,
    fitness: &Array1<F>,
    cfg: &DynamicsConfig<F>,
    mean_term: F,
) -> PopulationState<F> {
    let masses = Array1::from_shape_fn(pop.len(), |i| {
        let s = clip_signal(fitness[i] - mean_term, cfg.clip);
        let next = pop.masses[i] + cfg.eta_p * pop.masses[i] * s;
        next.max(F::zero())
    });
    PopulationState { masses }
}

/// Replicator step: mean term is the population-weighted average fitness.
pub fn replicator_step<F: NdFloat>(
    pop: &PopulationState<F>,
    fitness: &Array1<F>,
    cfg: &DynamicsConfig<F>,
) -> Result<PopulationState<F>> {
    assert_eq!(pop.len(), fitness.len(), "fitness length must match population");
    let total = pop.total_mass();
    if !(total > F::zero()) {
        return Err(Error::DegeneratePopulation);
    }
    let mean_term = weighted_fitness_sum(pop, fitness) / total;
    Ok(selection_update(pop, fitness, cfg, mean_term))
}

/// Normalized growth step: the mean term divides by the fixed cap `Z`
/// instead of the current total mass, so it coincides with the replicator
/// step bit-for-bit exactly when `sum(p) == Z`.
pub fn normalized_step<F: NdFloat>(
    pop: &PopulationState<F>,
    fitness: &Array1<F>,
    cfg: &DynamicsConfig<F>,
) -> Result<PopulationState<F>> {
    assert_eq!(pop.len(), fitness.len(), "fitness length must match population");
    if !(cfg.z > F::zero()) {
        return Err(Error::Config("z must be > 0".into()));
    }
    let mean_term = weighted_fitness_sum(pop, fitness) / cfg.z;
    Ok(selection_update(pop, fitness, cfg, mean_term))
}

/// Selection-mutation step: replicator selection plus an unclipped
/// diffusion term `mu * (1/N - p_i)` inside the bracket, so extinct
/// populations are lifted back to `eta_p * mu / N`.
pub fn mutation_step<F: NdFloat>(
    pop: &PopulationState<F>,
    fitness: &Array1<F>,
    cfg: &DynamicsConfig<F>,
) -> Result<PopulationState<F>> {
    assert_eq!(pop.len(), fitness.len(), "fitness length must match population");
    let total = pop.total_mass();
    if !(total > F::zero()) {
        return Err(Error::DegeneratePopulation);
    }
    let mean_term = weighted_fitness_sum(pop, fitness) / total;
    let inv_n = F::one() / F::from(pop.len()).unwrap();
    let masses = Array1::from_shape_fn(pop.len(), |i| {
        let p = pop.masses[i];
        let s = clip_signal(fitness[i] - mean_term, cfg.clip);
        let delta = p * s + cfg.mu * (inv_n - p);
        (p + cfg.eta_p * delta).max(F::zero())
    });
    Ok(PopulationState { masses })
}

/// Orthogonal projection onto the non-negative orthant: `p_i' = max(0, p_i)`.
pub fn project_nonneg<F: NdFloat>(pop: &PopulationState<F>) -> PopulationState<F> {
    PopulationState {
        masses: pop.masses.mapv(|p| p.max(F::zero())),
    }
}

/// Dispatches to the configured dynamic. This is the only place the kind
/// selection lives; the steps themselves are pure functions.
pub fn dynamics_step<F: NdFloat>(
    pop: &PopulationState<F>,
    fitness: &Array1<F>,
    cfg: &DynamicsConfig<F>,
) -> Result<PopulationState<F>> {
    match cfg.kind {
        DynamicsKind::Replicator => replicator_step(pop, fitness, cfg),
        DynamicsKind::Normalized => normalized_step(pop, fitness, cfg),
        DynamicsKind::Mutation => mutation_step(pop, fitness, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn cfg(kind: DynamicsKind) -> DynamicsConfig<f64> {
        DynamicsConfig {
            kind,
            eta_p: 5e-4,
            lambda: 1e-3,
            mu: 2e-3,
            z: 768.0,
            clip: 0.10,
        }
    }

    #[test]
    fn fitness_zero_gradient_zero_lambda() {
        let pop = PopulationState::ones(3);
        let fit = compute_fitness(&Array1::zeros(3), &pop, 0.0);
        assert!(fit.fitness.iter().all(|&phi| phi == 0.0));
    }

    #[test]
    fn fitness_takes_absolute_value() {
        let pop = PopulationState::ones(1);
        let fit = compute_fitness(&array![-0.3], &pop, 0.0);
        assert_eq!(fit.contribution[0], 0.3);
    }

    #[test]
    fn fitness_hand_case() {
        let pop = PopulationState::from_vec(vec![1.0, 1.0]);
        let fit = compute_fitness(&array![0.5, 0.1], &pop, 0.001);
        assert_eq!(fit.fitness[0], 0.499);
        assert_eq!(fit.fitness[1], 0.099);
    }

    #[test]
    fn weighted_mean_uniform_masses_is_plain_mean() {
        let pop = PopulationState::ones(4);
        let phi = array![1.0, 2.0, 3.0, 4.0];
        assert_eq!(weighted_mean_fitness(&pop, &phi).unwrap(), 2.5);
    }

    #[test]
    fn weighted_mean_hand_case() {
        let pop = PopulationState::from_vec(vec![2.0, 1.0]);
        let phi = array![3.0, 0.0];
        assert_eq!(weighted_mean_fitness(&pop, &phi).unwrap(), 2.0);
    }

    #[test]
    fn weighted_mean_single_population() {
        let pop = PopulationState::from_vec(vec![0.7]);
        let phi = array![5.0];
        assert_eq!(weighted_mean_fitness(&pop, &phi).unwrap(), 5.0);
    }

    #[test]
    fn weighted_mean_zero_mass_errors() {
        let pop = PopulationState::from_vec(vec![0.0, 0.0]);
        let phi = array![1.0, 2.0];
        assert!(matches!(
            weighted_mean_fitness(&pop, &phi),
            Err(Error::DegeneratePopulation)
        ));
    }

    #[test]
    fn replicator_uniform_fitness_is_fixed_point() {
        let pop = PopulationState::from_vec(vec![0.5, 1.5, 1.0]);
        let phi = array![0.3, 0.3, 0.3];
        let next = replicator_step(&pop, &phi, &cfg(DynamicsKind::Replicator)).unwrap();
        assert_eq!(next.masses, pop.masses);
    }

    #[test]
    fn replicator_hand_case() {
        let pop = PopulationState::from_vec(vec![1.0, 1.0]);
        let phi = array![1.0, 0.0];
        let mut c = cfg(DynamicsKind::Replicator);
        c.eta_p = 0.1;
        c.clip = 10.0;
        let next = replicator_step(&pop, &phi, &c).unwrap();
        assert!((next.masses[0] - 1.05).abs() < 1e-12);
        assert!((next.masses[1] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn replicator_extinction_is_absorbing() {
        let pop = PopulationState::from_vec(vec![0.0, 1.0]);
        let phi = array![100.0, 0.0];
        let next = replicator_step(&pop, &phi, &cfg(DynamicsKind::Replicator)).unwrap();
        assert_eq!(next.masses[0], 0.0);
    }

    #[test]
    fn normalized_matches_replicator_when_total_mass_is_z() {
        let pop = PopulationState::from_vec(vec![1.25, 0.75, 2.0]);
        let phi = array![0.4, -0.2, 0.05];
        let mut c = cfg(DynamicsKind::Normalized);
        c.z = 4.0; // == total mass
        let a = replicator_step(&pop, &phi, &c).unwrap();
        let b = normalized_step(&pop, &phi, &c).unwrap();
        assert_eq!(a.masses, b.masses);
    }

    #[test]
    fn normalized_hand_case() {
        let pop = PopulationState::from_vec(vec![1.0, 1.0]);
        let phi = array![1.0, 0.0];
        let mut c = cfg(DynamicsKind::Normalized);
        c.z = 4.0;
        c.eta_p = 0.1;
        c.clip = 10.0;
        let next = normalized_step(&pop, &phi, &c).unwrap();
        assert!((next.masses[0] - 1.075).abs() < 1e-12);
        assert!((next.masses[1] - 0.975).abs() < 1e-12);
    }

    #[test]
    fn normalized_extinction_is_absorbing() {
        let pop = PopulationState::from_vec(vec![0.0, 2.0]);
        let phi = array![10.0, 0.0];
        let next = normalized_step(&pop, &phi, &cfg(DynamicsKind::Normalized)).unwrap();
        assert_eq!(next.masses[0], 0.0);
    }

    #[test]
    fn mutation_lifts_extinct_mass() {
        let pop = PopulationState::from_vec(vec![0.0, 1.0]);
        let phi = array![0.0, 0.0];
        let c = cfg(DynamicsKind::Mutation);
        let next = mutation_step(&pop, &phi, &c).unwrap();
        let expected = c.eta_p * (c.mu * (1.0 / 2.0));
        assert_eq!(next.masses[0], expected);
        assert!(next.masses[0] > 0.0);
    }

    #[test]
    fn mutation_with_zero_mu_is_replicator() {
        let pop = PopulationState::from_vec(vec![0.9, 1.2, 0.4]);
        let phi = array![0.5, -0.3, 0.1];
        let mut c = cfg(DynamicsKind::Mutation);
        c.mu = 0.0;
        let a = mutation_step(&pop, &phi, &c).unwrap();
        let b = replicator_step(&pop, &phi, &c).unwrap();
        assert_eq!(a.masses, b.masses);
    }

    #[test]
    fn mutation_hand_case_pull_toward_uniform() {
        let pop = PopulationState::from_vec(vec![1.0, 1.0]);
        let phi = array![0.7, 0.7];
        let c = cfg(DynamicsKind::Mutation);
        let next = mutation_step(&pop, &phi, &c).unwrap();
        // s = 0, delta = mu * (1/2 - 1) => p' = 1 + 5e-4 * 2e-3 * (-0.5)
        assert!((next.masses[0] - 0.9999995).abs() < 1e-15);
    }

    #[test]
    fn project_clamps_negatives() {
        let pop = PopulationState::from_vec(vec![-0.1, 0.5]);
        let next = project_nonneg(&pop);
        assert_eq!(next.masses, array![0.0, 0.5]);
    }

    #[test]
    fn project_is_idempotent() {
        let pop = PopulationState::from_vec(vec![-1.0, 0.0, 2.0]);
        let once = project_nonneg(&pop);
        let twice = project_nonneg(&once);
        assert_eq!(once.masses, twice.masses);
        let clean = project_nonneg(&twice);
        assert_eq!(clean.masses, twice.masses);
    }

    proptest! {
        /// Unclipped, unfloored replicator steps conserve total mass.
        #[test]
        fn replicator_conserves_mass(
            raw in proptest::collection::vec((0.1f64..2.0, -1.0f64..1.0), 2..100)
        ) {
            let masses: Vec<f64> = raw.iter().map(|(p, _)| *p).collect();
            let phi = Array1::from_vec(raw.iter().map(|(_, f)| *f).collect());
            let pop = PopulationState::from_vec(masses);
            let mut c = cfg(DynamicsKind::Replicator);
            c.clip = 1e18;
            let next = replicator_step(&pop, &phi, &c).unwrap();
            let before = pop.total_mass();
            let after = next.total_mass();
            prop_assert!(((after - before) / before).abs() < 1e-9);
        }

        /// Selection direction follows the sign of phi - mean when the clip
        /// is inactive and the mass is positive.
        #[test]
        fn selection_sign_matches_relative_fitness(
            raw in proptest::collection::vec((0.05f64..2.0, -1.0f64..1.0), 2..50)
        ) {
            let masses: Vec<f64> = raw.iter().map(|(p, _)| *p).collect();
            let phi = Array1::from_vec(raw.iter().map(|(_, f)| *f).collect());
            let pop = PopulationState::from_vec(masses);
            let mut c = cfg(DynamicsKind::Replicator);
            c.clip = 1e18;
            let mean = weighted_mean_fitness(&pop, &phi).unwrap();
            let next = replicator_step(&pop, &phi, &c).unwrap();
            for i in 0..pop.len() {
                let delta = next.masses[i] - pop.masses[i];
                let rel = phi[i] - mean;
                if rel > 0.0 {
                    prop_assert!(delta > 0.0);
                } else if rel < 0.0 {
                    prop_assert!(delta < 0.0);
                }
            }
        }

        /// Adding a constant to every fitness leaves the replicator update
        /// unchanged up to floating tolerance (the mean shifts with it).
        #[test]
        fn uniform_fitness_shift_is_invariant(
            raw in proptest::collection::vec((0.1f64..2.0, -1.0f64..1.0), 2..50),
            shift in -5.0f64..5.0
        ) {
            let masses: Vec<f64> = raw.iter().map(|(p, _)| *p).collect();
            let phi = Array1::from_vec(raw.iter().map(|(_, f)| *f).collect::<Vec<f64>>());
            let shifted = phi.mapv(|v| v + shift);
            let pop = PopulationState::from_vec(masses);
            let c = cfg(DynamicsKind::Replicator);
            let a = replicator_step(&pop, &phi, &c).unwrap();
            let b = replicator_step(&pop, &shifted, &c).unwrap();
            for i in 0..pop.len() {
                prop_assert!((a.masses[i] - b.masses[i]).abs() < 1e-9);
            }
        }
    }
}
