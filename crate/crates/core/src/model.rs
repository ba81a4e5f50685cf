//! Population-gated MLP: deterministic init, forward pass, manual backward
//! pass (weight gradients plus `dL/dp`), SGD with momentum, and evaluation.
//!
//! Hidden layer `l` computes `h_i = relu(p_i * (w_i . x + b_i))`: the gate
//! `p_i` multiplies the pre-activation, so a neuron's group (incoming
//! weight row + bias) is scaled as a unit. The output layer is a plain
//! ungated linear map. Loss is mean softmax cross-entropy over the batch.
//!
//! Initialization (fixed, documented scheme): weights are drawn from
//! `N(0, GAIN^2 / fan_in)` with `GAIN = 2`, realized by Box-Muller over a
//! ChaCha8 stream keyed by the seed; biases start at zero. The relu
//! subgradient at zero is taken as 0.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, NdFloat};
use rand_chacha::rand_core::RngCore;

use crate::data::{stream_rng, Batch, Dataset, STREAM_INIT};
use crate::dynamics::PopulationState;
use crate::error::{Error, Result};

/// Layer widths. The benchmark network is `MNIST_DIMS`; smaller instances
/// are used for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub classes: usize,
}

/// The 784-512-256-10 benchmark architecture (768 prunable neurons).
pub const MNIST_DIMS: ModelDims = ModelDims {
    input: 784,
    hidden1: 512,
    hidden2: 256,
    classes: 10,
};

impl ModelDims {
    /// Number of prunable neuron populations (both hidden layers).
    pub fn populations(&self) -> usize {
        self.hidden1 + self.hidden2
    }
}

/// Dense weights and biases. Weight matrices are `(out, in)` row-major, so
/// row `i` of a hidden layer is neuron `i`'s incoming weight group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
    pub w3: Array2<F>,
    pub b3: Array1<F>,
}

impl<F: NdFloat> ModelParams<F> {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            w1: Array2::zeros((dims.hidden1, dims.input)),
            b1: Array1::zeros(dims.hidden1),
            w2: Array2::zeros((dims.hidden2, dims.hidden1)),
            b2: Array1::zeros(dims.hidden2),
            w3: Array2::zeros((dims.classes, dims.hidden2)),
            b3: Array1::zeros(dims.classes),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.w1.ncols(),
            hidden1: self.w1.nrows(),
            hidden2: self.w2.nrows(),
            classes: self.w3.nrows(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().into_iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn tensors(&self) -> [ndarray::ArrayViewD<'_, F>; 6] {
        [
            self.w1.view().into_dyn(),
            self.b1.view().into_dyn(),
            self.w2.view().into_dyn(),
            self.b2.view().into_dyn(),
            self.w3.view().into_dyn(),
            self.b3.view().into_dyn(),
        ]
    }
}

/// Velocity buffers for classical momentum, same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState<F> {
    pub v: ModelParams<F>,
}

impl<F: NdFloat> MomentumState<F> {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            v: ModelParams::zeros(dims),
        }
    }
}

/// Everything the backward pass needs from one forward evaluation.
///
/// `a*` are the ungated pre-activations `w.x + b`, `z*` the gated values
/// `p * a`, `h*` the post-relu outputs. `probs` holds the softmax rows and
/// `loss` the batch-mean cross-entropy.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F> {
    pub a1: Array2<F>,
    pub z1: Array2<F>,
    pub h1: Array2<F>,
    pub a2: Array2<F>,
    pub z2: Array2<F>,
    pub h2: Array2<F>,
    pub logits: Array2<F>,
    pub probs: Array2<F>,
    pub loss: F,
}

/// Gradients of the batch-mean loss: one tensor per parameter plus the
/// per-population vector `dL/dp` (layer-1 entries first).
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub d_params: ModelParams<F>,
    pub d_p: Array1<F>,
}

/// Standard deviation of the weight init distribution for a given fan-in.
pub fn init_std(fan_in: usize) -> f64 {
    INIT_GAIN / (fan_in as f64).sqrt()
}

/// Gain of the fan-in-scaled normal init (`sigma = GAIN / sqrt(fan_in)`).
pub const INIT_GAIN: f64 = 2.0;

/// Uniform in `(0, 1]` from the top 53 bits of a `u64`.
fn unit_open<R: RngCore>(rng: &mut R) -> f64 {
    (((rng.next_u64() >> 11) + 1) as f64) * (1.0 / 9007199254740992.0)
}

/// Uniform in `[0, 1)`.
fn unit_half_open<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64) * (1.0 / 9007199254740992.0)
}

/// Standard normal via Box-Muller; one draw consumes two `u64`s.
fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = unit_open(rng);
    let u2 = unit_half_open(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn fill_normal<F: NdFloat, R: RngCore>(w: &mut Array2<F>, std: f64, rng: &mut R) {
    for v in w.iter_mut() {
        *v = F::from(standard_normal(rng) * std).unwrap();
    }
}

/// Deterministic init for the benchmark architecture.
pub fn init_params<F: NdFloat>(seed: u64) -> ModelParams<F> {
    init_params_with_dims(MNIST_DIMS, seed)
}

/// Deterministic init: weights `N(0, INIT_GAIN^2/fan_in)` drawn in f64 on
/// the ChaCha8 init stream for `seed` (w1 row-major, then w2, then w3),
/// biases zero. Bit-reproducible for a fixed seed.
pub fn init_params_with_dims<F: NdFloat>(dims: ModelDims, seed: u64) -> ModelParams<F> {
    let mut rng = stream_rng(seed, STREAM_INIT, 0);
    let mut params = ModelParams::zeros(dims);
    fill_normal(&mut params.w1, init_std(dims.input), &mut rng);
    fill_normal(&mut params.w2, init_std(dims.hidden1), &mut rng);
    fill_normal(&mut params.w3, init_std(dims.hidden2), &mut rng);
    params
}

fn relu<F: NdFloat>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| v.max(F::zero()))
}

/// Zeroes `grad` wherever the gated pre-activation was not strictly
/// positive (relu subgradient at 0 is 0).
fn mask_by_active<F: NdFloat>(grad: &mut Array2<F>, z: &Array2<F>) {
    grad.zip_mut_with(z, |g, &zv| {
        if zv <= F::zero() {
            *g = F::zero();
        }
    });
}

/// Forward pass on raw views; see [`forward`] for the batch wrapper.
pub fn forward_views<F: NdFloat>(
    params: &ModelParams<F>,
    pop: &PopulationState<F>,
    inputs: &ArrayView2<F>,
    targets: &[u8],
) -> Result<ForwardTrace<F>> {
    let dims = params.dims();
    assert_eq!(inputs.ncols(), dims.input, "input width mismatch");
    assert_eq!(inputs.nrows(), targets.len(), "targets length mismatch");
    assert_eq!(pop.len(), dims.populations(), "population length mismatch");
    debug_assert!(pop.masses.iter().all(|&p| p >= F::zero()));

    let gates1 = pop.masses.slice(s![..dims.hidden1]);
    let gates2 = pop.masses.slice(s![dims.hidden1..]);

    let mut a1 = inputs.dot(&params.w1.t());
    a1 += &params.b1;
    let z1 = &a1 * &gates1;
    let h1 = relu(&z1);

    let mut a2 = h1.dot(&params.w2.t());
    a2 += &params.b2;
    let z2 = &a2 * &gates2;
    let h2 = relu(&z2);

    let mut logits = h2.dot(&params.w3.t());
    logits += &params.b3;

    let rows = logits.nrows();
    let mut probs = Array2::zeros(logits.raw_dim());
    let mut loss_sum = F::zero();
    for (r, row) in logits.outer_iter().enumerate() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut denom = F::zero();
        for &v in row.iter() {
            denom = denom + (v - max).exp();
        }
        for (c, &v) in row.iter().enumerate() {
            probs[[r, c]] = (v - max).exp() / denom;
        }
        let target = targets[r] as usize;
        assert!(target < dims.classes, "target class out of range");
        loss_sum = loss_sum + denom.ln() + max - row[target];
    }
    let loss = loss_sum / F::from(rows).unwrap();
    if !loss.is_finite() {
        return Err(Error::NumericOverflow(format!(
            "non-finite loss {loss} in forward pass"
        )));
    }

    Ok(ForwardTrace {
        a1,
        z1,
        h1,
        a2,
        z2,
        h2,
        logits,
        probs,
        loss,
    })
}

/// Forward pass over a batch. Errors with `NumericOverflow` if the loss is
/// not finite.
pub fn forward<F: NdFloat>(
    params: &ModelParams<F>,
    pop: &PopulationState<F>,
    batch: &Batch<F>,
) -> Result<ForwardTrace<F>> {
    forward_views(params, pop, &batch.inputs.view(), &batch.targets)
}

/// Exact gradients of the batch-mean loss from a trace produced by
/// [`forward`] on the same `(params, pop, batch)`.
///
/// `dL/dp_i = sum_samples delta_i * a_i` where `delta_i = dL/dz_i` (the
/// `1/batch` factor is carried inside `delta`); a gated neuron's weight-row
/// gradient carries the factor `p_i`.
pub fn backward<F: NdFloat>(
    trace: &ForwardTrace<F>,
    params: &ModelParams<F>,
    pop: &PopulationState<F>,
    batch: &Batch<F>,
) -> Gradients<F> {
    let dims = params.dims();
    assert_eq!(batch.inputs.nrows(), trace.logits.nrows(), "trace/batch mismatch");
    assert_eq!(pop.len(), dims.populations(), "population length mismatch");

    let gates1 = pop.masses.slice(s![..dims.hidden1]);
    let gates2 = pop.masses.slice(s![dims.hidden1..]);
    let inv_batch = F::one() / F::from(batch.len()).unwrap();

    // dL/dlogits = (softmax - onehot) / batch
    let mut dlogits = trace.probs.clone();
    for (r, &t) in batch.targets.iter().enumerate() {
        dlogits[[r, t as usize]] = dlogits[[r, t as usize]] - F::one();
    }
    dlogits.mapv_inplace(|v| v * inv_batch);

    let d_w3 = dlogits.t().dot(&trace.h2);
    let d_b3 = dlogits.sum_axis(Axis(0));

    let dh2 = dlogits.dot(&params.w3);
    let mut dz2 = dh2;
    mask_by_active(&mut dz2, &trace.z2);
    let d_p2 = (&dz2 * &trace.a2).sum_axis(Axis(0));
    let da2 = &dz2 * &gates2;

    let d_w2 = da2.t().dot(&trace.h1);
    let d_b2 = da2.sum_axis(Axis(0));

    let dh1 = da2.dot(&params.w2);
    let mut dz1 = dh1;
    mask_by_active(&mut dz1, &trace.z1);
    let d_p1 = (&dz1 * &trace.a1).sum_axis(Axis(0));
    let da1 = &dz1 * &gates1;

    let d_w1 = da1.t().dot(&batch.inputs);
    let d_b1 = da1.sum_axis(Axis(0));

    let d_p = concatenate![Axis(0), d_p1, d_p2];

    Gradients {
        d_params: ModelParams {
            w1: d_w1,
            b1: d_b1,
            w2: d_w2,
            b2: d_b2,
            w3: d_w3,
            b3: d_b3,
        },
        d_p,
    }
}

fn momentum_update<F, D>(
    theta: &mut ndarray::ArrayBase<ndarray::OwnedRepr<F>, D>,
    vel: &mut ndarray::ArrayBase<ndarray::OwnedRepr<F>, D>,
    grad: &ndarray::ArrayBase<ndarray::OwnedRepr<F>, D>,
    eta: F,
    beta: F,
) where
    F: NdFloat,
    D: ndarray::Dimension,
{
    assert_eq!(theta.shape(), grad.shape(), "gradient shape mismatch");
    ndarray::Zip::from(theta)
        .and(vel)
        .and(grad)
        .for_each(|t, v, &g| {
            *v = beta * *v + g;
            *t = *t - eta * *v;
        });
}

/// Classical momentum: `v <- beta*v + g`, `theta <- theta - eta*v`.
pub fn sgd_step<F: NdFloat>(
    params: &mut ModelParams<F>,
    momentum: &mut MomentumState<F>,
    grads: &ModelParams<F>,
    eta: F,
    beta: F,
) {
    momentum_update(&mut params.w1, &mut momentum.v.w1, &grads.w1, eta, beta);
    momentum_update(&mut params.b1, &mut momentum.v.b1, &grads.b1, eta, beta);
    momentum_update(&mut params.w2, &mut momentum.v.w2, &grads.w2, eta, beta);
    momentum_update(&mut params.b2, &mut momentum.v.b2, &grads.b2, eta, beta);
    momentum_update(&mut params.w3, &mut momentum.v.w3, &grads.w3, eta, beta);
    momentum_update(&mut params.b3, &mut momentum.v.b3, &grads.b3, eta, beta);
}

/// Argmax with ties broken toward the lowest class index.
fn predict_row<F: NdFloat>(row: ndarray::ArrayView1<'_, F>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of dataset samples whose argmax logit matches the label.
/// Processes fixed-size chunks sequentially, so the result is
/// deterministic.
pub fn evaluate<F: NdFloat>(
    params: &ModelParams<F>,
    pop: &PopulationState<F>,
    dataset: &Dataset<F>,
) -> f64 {
    assert!(!dataset.is_empty(), "evaluate needs a non-empty dataset");
    const CHUNK: usize = 512;
    let n = dataset.len();
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + CHUNK).min(n);
        let inputs = dataset.images.slice(s![start..end, ..]);
        let targets = &dataset.labels[start..end];
        let trace = forward_views(params, pop, &inputs, targets)
            .expect("finite evaluation forward pass");
        for (r, &t) in targets.iter().enumerate() {
            if predict_row(trace.logits.row(r)) == t as usize {
                correct += 1;
            }
        }
        start = end;
    }
    correct as f64 / n as f64
}
