//! Post-training hard pruning.
//!
//! Quantile mode prunes exactly the `k = round(f * N)` smallest masses
//! (ties broken by pruning the lower index first) and reports the smallest
//! kept mass as the threshold. Fixed mode prunes strictly below a preset
//! threshold. With the smallest-kept-mass convention, `fixed(epsilon)`
//! prunes a subset-or-equal of the quantile mask's set: quantile pruning
//! also removes entries tied with the reported threshold value.

use ndarray::NdFloat;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dynamics::{DynamicsKind, PopulationState};
use crate::model::{evaluate, ModelParams};

/// Threshold selection mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMode {
    Quantile,
    Fixed,
}

impl std::fmt::Display for PruneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneMode::Quantile => "quantile",
            PruneMode::Fixed => "fixed",
        })
    }
}

/// What to prune: a target pruned fraction (quantile mode) or a fixed mass
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PruneSpec {
    Quantile { target_fraction: f64 },
    Fixed { epsilon: f64 },
}

impl PruneSpec {
    pub fn mode(&self) -> PruneMode {
        match self {
            PruneSpec::Quantile { .. } => PruneMode::Quantile,
            PruneSpec::Fixed { .. } => PruneMode::Fixed,
        }
    }

    /// The mode's authoritative parameter (fraction or threshold).
    pub fn target(&self) -> f64 {
        match self {
            PruneSpec::Quantile { target_fraction } => *target_fraction,
            PruneSpec::Fixed { epsilon } => *epsilon,
        }
    }
}

/// Boolean keep-mask plus the threshold and sparsity it realizes.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub keep: Vec<bool>,
    pub epsilon_used: f64,
    pub sparsity_achieved: f64,
}

impl PruneMask {
    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn pruned_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| (!k).then_some(i))
            .collect()
    }
}

/// One row of the benchmark tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub dynamic: DynamicsKind,
    pub mode: PruneMode,
    /// Requested target: pruned fraction (quantile) or threshold (fixed).
    pub target: f64,
    /// Threshold actually used / reported.
    pub epsilon: f64,
    pub sparsity: f64,
    pub baseline_accuracy: f64,
    pub pruned_accuracy: f64,
    pub accuracy_drop: f64,
}

impl PruneReport {
    pub const CSV_HEADER: &'static str =
        "dynamic,mode,target,epsilon,sparsity,baseline_acc,pruned_acc,drop";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.dynamic,
            self.mode,
            self.target,
            self.epsilon,
            self.sparsity,
            self.baseline_accuracy,
            self.pruned_accuracy,
            self.accuracy_drop
        )
    }
}

/// Prunes exactly the `k = round(f * N)` smallest masses, ties broken by
/// lower index first. Returns the reported threshold (the smallest kept
/// mass, or infinity if everything is pruned) and the mask.
pub fn quantile_threshold<F: NdFloat>(
    pop: &PopulationState<F>,
    target_fraction: f64,
) -> (f64, PruneMask) {
    assert!(
        (0.0..1.0).contains(&target_fraction),
        "target_fraction must be in [0, 1), got {target_fraction}"
    );
    let n = pop.len();
    let k = ((target_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        pop.masses[a]
            .partial_cmp(&pop.masses[b])
            .expect("finite masses")
            .then(a.cmp(&b))
    });
    let mut keep = vec![true; n];
    for &i in &order[..k] {
        keep[i] = false;
    }
    let epsilon_used = if k < n {
        pop.masses[order[k]].to_f64().unwrap()
    } else {
        f64::INFINITY
    };
    let mask = PruneMask {
        keep,
        epsilon_used,
        sparsity_achieved: k as f64 / n as f64,
    };
    (epsilon_used, mask)
}

/// Prunes exactly the entries with `p_i < epsilon` (strict comparison).
pub fn fixed_threshold_prune<F: NdFloat>(pop: &PopulationState<F>, epsilon: f64) -> PruneMask {
    assert!(epsilon >= 0.0, "epsilon must be non-negative");
    let eps = F::from(epsilon).unwrap();
    let keep: Vec<bool> = pop.masses.iter().map(|&p| !(p < eps)).collect();
    let pruned = keep.iter().filter(|&&k| !k).count();
    PruneMask {
        sparsity_achieved: pruned as f64 / pop.len() as f64,
        epsilon_used: epsilon,
        keep,
    }
}

/// Zeroes the masked-out masses; keeps the rest unchanged. Idempotent.
pub fn apply_mask<F: NdFloat>(pop: &PopulationState<F>, mask: &PruneMask) -> PopulationState<F> {
    assert_eq!(pop.len(), mask.keep.len(), "mask length mismatch");
    let masses = ndarray::Array1::from_shape_fn(pop.len(), |i| {
        if mask.keep[i] {
            pop.masses[i]
        } else {
            F::zero()
        }
    });
    PopulationState { masses }
}

/// Builds the mask per `spec`, evaluates the masked model on `testset`,
/// and fills a report row against the given dense baseline.
pub fn prune_and_report<F: NdFloat>(
    params: &ModelParams<F>,
    pop: &PopulationState<F>,
    testset: &Dataset<F>,
    spec: PruneSpec,
    baseline_accuracy: f64,
    dynamic: DynamicsKind,
) -> PruneReport {
    let mask = match spec {
        PruneSpec::Quantile { target_fraction } => quantile_threshold(pop, target_fraction).1,
        PruneSpec::Fixed { epsilon } => fixed_threshold_prune(pop, epsilon),
    };
    let masked = apply_mask(pop, &mask);
    let pruned_accuracy = evaluate(params, &masked, testset);
    PruneReport {
        dynamic,
        mode: spec.mode(),
        target: spec.target(),
        epsilon: mask.epsilon_used,
        sparsity: mask.sparsity_achieved,
        baseline_accuracy,
        pruned_accuracy,
        accuracy_drop: baseline_accuracy - pruned_accuracy,
    }
}
