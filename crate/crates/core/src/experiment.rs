//! The joint training loop: SGD on the weights interleaved with selection
//! updates on the population masses, plus the post-training benchmark
//! sweeps.
//!
//! Per mini-batch the loop runs forward -> backward -> SGD step on the
//! weights -> fitness -> selection step on the masses -> projection. Two
//! details of the fitness/projection stage are calibrated to reproduce the
//! reference benchmark and are documented here because they are easy to
//! get wrong:
//!
//! * The contribution signal is the magnitude of the *cumulative* mass
//!   gradient: a running accumulator `G += dL/dp` over all steps since the
//!   start of training, with `c = |G|`. The per-batch gradient alone is
//!   two orders of magnitude too small to engage the selection clipping
//!   and produces no meaningful mass separation in 20 epochs.
//! * After the selection step, masses are clamped to the ceiling 1.0 (the
//!   initial mass). Selection redistributes influence; the ceiling keeps
//!   surviving neurons at their trained scale instead of letting a few
//!   winners absorb the freed mass.
//!
//! For the normalized dynamic the run uses the live total mass as the
//! normalizer (the source formulation defines `Z = sum_j p_j`), so the
//! replicator and normalized runs coincide; a fixed cap would make them
//! drift apart as the total mass decays. The `normalized_step` operation
//! itself still takes the cap from its config.

use std::path::PathBuf;

use ndarray::{Array1, NdFloat};
use serde::{Deserialize, Serialize};

use crate::data::{make_epoch_batches, Batch, Dataset};
use crate::dynamics::{
    compute_fitness, dynamics_step, DynamicsConfig, DynamicsKind, PopulationState,
};
use crate::error::{Error, Result};
use crate::model::{
    backward, evaluate, forward, init_params_with_dims, sgd_step, ModelDims, ModelParams,
    MomentumState, MNIST_DIMS,
};
use crate::pruning::{prune_and_report, PruneReport, PruneSpec};

/// Mass ceiling applied after every selection step (the initial mass).
pub const MASS_CEILING: f64 = 1.0;

/// Every hyperparameter of the benchmark protocol. Defaults are the
/// reference values; `validate` enforces the documented ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight learning rate.
    pub eta_theta: f64,
    /// Momentum coefficient for the weight updates.
    pub momentum: f64,
    /// Population learning rate.
    pub eta_p: f64,
    /// Linear decay pressure on mass.
    pub lambda: f64,
    /// Mutation rate (mutation dynamic).
    pub mu: f64,
    /// Mass cap for the normalized dynamic's config.
    pub z: f64,
    /// Symmetric clip bound on the selection signal.
    pub clip: f64,
    pub seed: u64,
    pub dynamic: DynamicsKind,
    /// Directory holding the four MNIST IDX files.
    pub data_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            eta_theta: 0.01,
            momentum: 0.9,
            eta_p: 5e-4,
            lambda: 1e-3,
            mu: 2e-3,
            z: 768.0,
            clip: 0.10,
            seed: 0,
            dynamic: DynamicsKind::Replicator,
            data_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.eta_theta > 0.0) {
            return Err(Error::Config("eta_theta must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        // eta_p = 0 is allowed: it disables the selection dynamics.
        if !(self.eta_p >= 0.0) {
            return Err(Error::Config("eta_p must be >= 0".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::Config("mu must be >= 0".into()));
        }
        if !(self.z > 0.0) {
            return Err(Error::Config("z must be > 0".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip must be > 0".into()));
        }
        Ok(())
    }

    pub fn dynamics_config<F: NdFloat>(&self) -> DynamicsConfig<F> {
        DynamicsConfig {
            kind: self.dynamic,
            eta_p: F::from(self.eta_p).unwrap(),
            lambda: F::from(self.lambda).unwrap(),
            mu: F::from(self.mu).unwrap(),
            z: F::from(self.z).unwrap(),
            clip: F::from(self.clip).unwrap(),
        }
    }

    /// Canonical JSON used for the checkpoint hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// FNV-1a over the canonical JSON.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical_json().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Full mutable training state. `(config.seed, epochs_completed)` is the
/// RNG state: the shuffle stream for each epoch is derived from exactly
/// that pair, so a state reloaded at an epoch boundary resumes
/// bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F> {
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub params: ModelParams<F>,
    pub momentum: MomentumState<F>,
    pub population: PopulationState<F>,
    /// Running sum of the per-batch mass gradients (the contribution
    /// signal is its magnitude).
    pub grad_accum: Array1<F>,
    pub epochs_completed: u64,
    pub steps_completed: u64,
}

impl<F: NdFloat> TrainState<F> {
    /// Fresh state for the benchmark architecture.
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::with_dims(config, MNIST_DIMS)
    }

    /// Fresh state for an arbitrary architecture (used by miniature tests).
    pub fn with_dims(config: TrainConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        let params = init_params_with_dims(dims, config.seed);
        Ok(Self {
            momentum: MomentumState::zeros(dims),
            population: PopulationState::ones(dims.populations()),
            grad_accum: Array1::zeros(dims.populations()),
            epochs_completed: 0,
            steps_completed: 0,
            config,
            dims,
            params,
        })
    }
}

/// Per-step result (the batch loss).
#[derive(Debug, Clone, Copy)]
pub struct StepStats<F> {
    pub loss: F,
}

/// One mini-batch update: the learning step on the weights followed by the
/// selection step on the masses.
pub fn train_step<F: NdFloat>(state: &mut TrainState<F>, batch: &Batch<F>) -> Result<StepStats<F>> {
    let trace = forward(&state.params, &state.population, batch)?;
    let grads = backward(&trace, &state.params, &state.population, batch);

    sgd_step(
        &mut state.params,
        &mut state.momentum,
        &grads.d_params,
        F::from(state.config.eta_theta).unwrap(),
        F::from(state.config.momentum).unwrap(),
    );

    state.grad_accum += &grads.d_p;
    let fitness = compute_fitness(
        &state.grad_accum,
        &state.population,
        F::from(state.config.lambda).unwrap(),
    );

    let mut cfg: DynamicsConfig<F> = state.config.dynamics_config();
    if cfg.kind == DynamicsKind::Normalized {
        // Source formulation: the normalizer is the live total mass.
        cfg.z = state.population.total_mass();
    }
    let next = dynamics_step(&state.population, &fitness.fitness, &cfg)?;
    let ceiling = F::from(MASS_CEILING).unwrap();
    state.population = PopulationState {
        masses: next.masses.mapv(|p| p.min(ceiling)),
    };

    state.steps_completed += 1;
    Ok(StepStats { loss: trace.loss })
}

/// Loss averaged over one epoch of batches.
#[derive(Debug, Clone, Copy)]
pub struct EpochTrainStats {
    pub mean_loss: f64,
    pub batches: usize,
}

/// Runs one full epoch of shuffled batches. The shuffle is keyed by
/// `(seed, epochs_completed)`.
pub fn train_epoch<F: NdFloat>(
    state: &mut TrainState<F>,
    train_set: &Dataset<F>,
) -> Result<EpochTrainStats> {
    assert_eq!(
        train_set.feature_dim(),
        state.dims.input,
        "dataset width must match the model input"
    );
    let epoch = state.epochs_completed;
    let mut loss_sum = 0.0f64;
    let mut batches = 0usize;
    for batch in make_epoch_batches(
        train_set,
        state.config.batch_size,
        state.config.seed,
        epoch,
    ) {
        let stats = train_step(state, &batch)?;
        loss_sum += stats.loss.to_f64().unwrap();
        batches += 1;
    }
    state.epochs_completed += 1;
    Ok(EpochTrainStats {
        mean_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
        batches,
    })
}

/// Mass distribution summary plus accuracy for one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub mass_total: f64,
    pub mass_min: f64,
    pub mass_q25: f64,
    pub mass_median: f64,
    pub mass_q75: f64,
    pub mass_max: f64,
    /// Count of masses below 0.1 (effectively extinct).
    pub near_extinct: usize,
}

/// Per-epoch records for one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,test_accuracy,mass_total,mass_min,mass_q25,mass_median,mass_q75,mass_max,near_extinct";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.train_loss,
                r.test_accuracy,
                r.mass_total,
                r.mass_min,
                r.mass_q25,
                r.mass_median,
                r.mass_q75,
                r.mass_max,
                r.near_extinct
            ));
        }
        out
    }
}

/// Rank-based quantile of a sorted slice (`sorted[round(q * (n-1))]`);
/// used for the metrics log only.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Builds the epoch record for the current population and accuracy.
pub fn epoch_record<F: NdFloat>(
    epoch: u64,
    stats: &EpochTrainStats,
    test_accuracy: f64,
    pop: &PopulationState<F>,
) -> EpochRecord {
    let mut sorted: Vec<f64> = pop.masses.iter().map(|p| p.to_f64().unwrap()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    EpochRecord {
        epoch,
        train_loss: stats.mean_loss,
        test_accuracy,
        mass_total: sorted.iter().sum(),
        mass_min: sorted[0],
        mass_q25: sorted_quantile(&sorted, 0.25),
        mass_median: sorted_quantile(&sorted, 0.5),
        mass_q75: sorted_quantile(&sorted, 0.75),
        mass_max: sorted[sorted.len() - 1],
        near_extinct: sorted.iter().filter(|&&p| p < 0.1).count(),
    }
}

/// Trains the benchmark architecture from scratch for `config.epochs`
/// epochs, evaluating on the test split after each epoch. Fully
/// deterministic for a fixed config.
pub fn train<F: NdFloat>(
    config: TrainConfig,
    train_set: &Dataset<F>,
    test_set: &Dataset<F>,
) -> Result<(TrainState<F>, MetricsLog)> {
    let state = TrainState::new(config)?;
    resume(state, train_set, test_set)
}

/// Same as [`train`] for an arbitrary architecture.
pub fn train_with_dims<F: NdFloat>(
    config: TrainConfig,
    dims: ModelDims,
    train_set: &Dataset<F>,
    test_set: &Dataset<F>,
) -> Result<(TrainState<F>, MetricsLog)> {
    let state = TrainState::with_dims(config, dims)?;
    resume(state, train_set, test_set)
}

/// Continues a state until `config.epochs` epochs are complete. A state
/// saved and reloaded at an epoch boundary produces bit-identical results
/// to an uninterrupted run.
pub fn resume<F: NdFloat>(
    mut state: TrainState<F>,
    train_set: &Dataset<F>,
    test_set: &Dataset<F>,
) -> Result<(TrainState<F>, MetricsLog)> {
    let mut log = MetricsLog::default();
    while state.epochs_completed < state.config.epochs as u64 {
        let stats = train_epoch(&mut state, train_set)?;
        let acc = evaluate(&state.params, &state.population, test_set);
        log.records.push(epoch_record(
            state.epochs_completed,
            &stats,
            acc,
            &state.population,
        ));
    }
    Ok((state, log))
}

/// Quantile-mode benchmark: one report row per target pruned fraction.
pub fn sparsity_sweep<F: NdFloat>(
    state: &TrainState<F>,
    test_set: &Dataset<F>,
    fractions: &[f64],
) -> Vec<PruneReport> {
    let baseline = evaluate(&state.params, &state.population, test_set);
    fractions
        .iter()
        .map(|&f| {
            prune_and_report(
                &state.params,
                &state.population,
                test_set,
                PruneSpec::Quantile { target_fraction: f },
                baseline,
                state.config.dynamic,
            )
        })
        .collect()
}

/// Default quantile sweep targets.
pub const DEFAULT_FRACTIONS: [f64; 4] = [0.35, 0.40, 0.45, 0.50];

/// Fixed-threshold benchmark: one report row per threshold.
pub fn threshold_sweep<F: NdFloat>(
    state: &TrainState<F>,
    test_set: &Dataset<F>,
    thresholds: &[f64],
) -> Vec<PruneReport> {
    let baseline = evaluate(&state.params, &state.population, test_set);
    thresholds
        .iter()
        .map(|&eps| {
            prune_and_report(
                &state.params,
                &state.population,
                test_set,
                PruneSpec::Fixed { epsilon: eps },
                baseline,
                state.config.dynamic,
            )
        })
        .collect()
}

/// Default fixed-threshold sweep values.
pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.6, 0.7, 0.8, 0.9];

/// Serializes report rows as the benchmark CSV.
pub fn reports_to_csv(reports: &[PruneReport]) -> String {
    let mut out = String::from(PruneReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Serializes report rows as a JSON array.
pub fn reports_to_json(reports: &[PruneReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::dynamics::{replicator_step, weighted_mean_fitness};
    use ndarray::Array2;

    const TINY: ModelDims = ModelDims {
        input: 6,
        hidden1: 4,
        hidden2: 3,
        classes: 2,
    };

    fn tiny_config(dynamic: DynamicsKind) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            z: TINY.hidden1 as f64 + TINY.hidden2 as f64,
            dynamic,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(n: usize, seed: u64) -> Dataset<f64> {
        use rand_chacha::rand_core::RngCore;
        let mut rng = crate::data::stream_rng(seed, 11, 0);
        let images = Array2::from_shape_fn((n, TINY.input), |_| {
            (rng.next_u64() >> 11) as f64 / 9007199254740992.0
        });
        let labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() % 2) as u8).collect();
        Dataset::new(images, labels, Split::Train).unwrap()
    }

    #[test]
    fn config_defaults_match_protocol() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.eta_theta, 0.01);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.eta_p, 5e-4);
        assert_eq!(cfg.lambda, 1e-3);
        assert_eq!(cfg.mu, 2e-3);
        assert_eq!(cfg.z, 768.0);
        assert_eq!(cfg.clip, 0.10);
        assert_eq!(cfg.seed, 0);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.clip = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_round_trips() {
        let cfg = TrainConfig {
            dynamic: DynamicsKind::Mutation,
            seed: 7,
            ..TrainConfig::default()
        };
        let json = cfg.canonical_json();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn zero_population_rate_freezes_masses() {
        let mut cfg = tiny_config(DynamicsKind::Replicator);
        cfg.eta_p = 0.0;
        let ds = tiny_dataset(16, 3);
        let (state, _) = train_with_dims::<f64>(cfg, TINY, &ds, &ds).unwrap();
        assert!(state.population.masses.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn one_batch_matches_hand_stepped_oracle() {
        let cfg = tiny_config(DynamicsKind::Replicator);
        let ds = tiny_dataset(8, 5);
        let mut state = TrainState::<f64>::with_dims(cfg.clone(), TINY).unwrap();
        let batch = make_epoch_batches(&ds, cfg.batch_size, cfg.seed, 0)
            .next()
            .unwrap();

        // oracle: replay the sub-steps in order on an independent copy
        let mut oracle_params = init_params_with_dims::<f64>(TINY, cfg.seed);
        let mut oracle_momentum = MomentumState::zeros(TINY);
        let oracle_pop = PopulationState::ones(TINY.populations());
        let trace = forward(&oracle_params, &oracle_pop, &batch).unwrap();
        let grads = backward(&trace, &oracle_params, &oracle_pop, &batch);
        sgd_step(
            &mut oracle_params,
            &mut oracle_momentum,
            &grads.d_params,
            cfg.eta_theta,
            cfg.momentum,
        );
        let accum = grads.d_p.clone();
        let fitness = compute_fitness(&accum, &oracle_pop, cfg.lambda);
        let stepped =
            replicator_step(&oracle_pop, &fitness.fitness, &cfg.dynamics_config()).unwrap();
        let expected_pop = stepped.masses.mapv(|p| p.min(1.0));

        train_step(&mut state, &batch).unwrap();
        assert_eq!(state.params, oracle_params);
        assert_eq!(state.population.masses, expected_pop);
        assert_eq!(state.grad_accum, accum);
        assert_eq!(state.steps_completed, 1);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let cfg = tiny_config(DynamicsKind::Mutation);
        let ds = tiny_dataset(20, 9);
        let (a, log_a) = train_with_dims::<f64>(cfg.clone(), TINY, &ds, &ds).unwrap();
        let (b, log_b) = train_with_dims::<f64>(cfg, TINY, &ds, &ds).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.population.masses, b.population.masses);
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn normalized_run_coincides_with_replicator_run() {
        let ds = tiny_dataset(24, 13);
        let (a, _) = train_with_dims::<f64>(tiny_config(DynamicsKind::Replicator), TINY, &ds, &ds).unwrap();
        let (b, _) = train_with_dims::<f64>(tiny_config(DynamicsKind::Normalized), TINY, &ds, &ds).unwrap();
        assert_eq!(a.population.masses, b.population.masses);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn population_stays_feasible_throughout() {
        let cfg = tiny_config(DynamicsKind::Mutation);
        let ds = tiny_dataset(20, 17);
        let mut state = TrainState::<f64>::with_dims(cfg, TINY).unwrap();
        for _ in 0..2 {
            for batch in make_epoch_batches(&ds, 4, 0, state.epochs_completed) {
                train_step(&mut state, &batch).unwrap();
                assert!(state.population.masses.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
            state.epochs_completed += 1;
        }
    }

    #[test]
    fn weighted_mean_is_exposed_for_diagnostics() {
        let pop = PopulationState::from_vec(vec![1.0, 3.0]);
        let phi = ndarray::array![2.0, 2.0];
        assert_eq!(weighted_mean_fitness(&pop, &phi).unwrap(), 2.0);
    }

    #[test]
    fn sweep_fraction_zero_equals_baseline() {
        let cfg = tiny_config(DynamicsKind::Replicator);
        let ds = tiny_dataset(16, 19);
        let (state, _) = train_with_dims::<f64>(cfg, TINY, &ds, &ds).unwrap();
        let reports = sparsity_sweep(&state, &ds, &[0.0]);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].pruned_accuracy, reports[0].baseline_accuracy);
        assert_eq!(reports[0].accuracy_drop, 0.0);
        assert_eq!(reports[0].sparsity, 0.0);
    }

    #[test]
    fn threshold_below_min_mass_prunes_nothing() {
        let cfg = tiny_config(DynamicsKind::Replicator);
        let ds = tiny_dataset(16, 23);
        let (state, _) = train_with_dims::<f64>(cfg, TINY, &ds, &ds).unwrap();
        let min_mass = state
            .population
            .masses
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let reports = threshold_sweep(&state, &ds, &[min_mass * 0.5]);
        assert_eq!(reports[0].sparsity, 0.0);
        assert_eq!(reports[0].pruned_accuracy, reports[0].baseline_accuracy);
    }

    #[test]
    fn csv_headers_are_stable() {
        assert_eq!(
            PruneReport::CSV_HEADER,
            "dynamic,mode,target,epsilon,sparsity,baseline_acc,pruned_acc,drop"
        );
        assert!(MetricsLog::CSV_HEADER.starts_with("epoch,train_loss,test_accuracy"));
    }
}
