//! Neural net kernel transport maps.
//!
//! The kernel value for a sample pair `(a, b)` is a feed-forward network on
//! the features `|a_j − b_j|`: tanh hidden layers, then a final affine map to
//! a scalar `z` and `k = (1 + tanh z)/2 ∈ [0, 1]`. Predictions take the form
//! `M₁ = k(M*, M∘)·α` with fixed anchors `M∘` and coefficients `α`.
//!
//! Parameters are flattened layer by layer (`W` row-major, then `b`),
//! followed by `α` row-major.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::inversion::{newton_step, TikhonovSchedule};
use crate::{Error, Result, SampleMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct KernelNetwork {
    layer_sizes: Vec<usize>,
    /// `W⁽ˡ⁾` is `n_l × n_{l−1}`.
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    /// `n∘ × d_out`.
    alpha: DMatrix<f64>,
    /// `n∘ × d_in`.
    anchors: SampleMatrix,
}

/// Activations of a batched forward pass; column `c = s·n_b + q` holds the
/// pair `(a_s, b_q)`.
struct Forward {
    /// `inputs[l]` feeds layer `l`: the features for `l = 0`, then tanh outputs.
    inputs: Vec<DMatrix<f64>>,
    /// `tanh` of the final pre-activation.
    out_tanh: DVector<f64>,
    n_b: usize,
}

impl Forward {
    fn kernel(&self) -> DMatrix<f64> {
        let n_a = self.out_tanh.len() / self.n_b.max(1);
        DMatrix::from_fn(n_a, self.n_b, |s, q| 0.5 * (1.0 + self.out_tanh[s * self.n_b + q]))
    }
}

impl KernelNetwork {
    pub fn new(
        layer_sizes: Vec<usize>,
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
        alpha: DMatrix<f64>,
        anchors: SampleMatrix,
    ) -> Result<Self> {
        validate_sizes(&layer_sizes)?;
        let n_layers = layer_sizes.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::DimensionMismatch { context: "network layers", expected: n_layers, actual: weights.len() });
        }
        for l in 0..n_layers {
            if weights[l].shape() != (layer_sizes[l + 1], layer_sizes[l]) || biases[l].len() != layer_sizes[l + 1] {
                return Err(Error::InvalidArgument(format!("layer {l} parameters do not match sizes {layer_sizes:?}")));
            }
        }
        if anchors.ncols() != layer_sizes[0] {
            return Err(Error::DimensionMismatch { context: "anchor columns", expected: layer_sizes[0], actual: anchors.ncols() });
        }
        if alpha.nrows() != anchors.nrows() {
            return Err(Error::DimensionMismatch { context: "alpha rows", expected: anchors.nrows(), actual: alpha.nrows() });
        }
        Ok(Self { layer_sizes, weights, biases, alpha, anchors })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn anchors(&self) -> &SampleMatrix {
        &self.anchors
    }

    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    /// Number of network weights and biases.
    pub fn n_network_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn n_params(&self) -> usize {
        self.n_network_params() + self.alpha.len()
    }

    pub fn params(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for row in w.row_iter() {
                out.extend(row.iter());
            }
            out.extend(b.iter());
        }
        for row in self.alpha.row_iter() {
            out.extend(row.iter());
        }
        DVector::from_vec(out)
    }

    pub fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch { context: "parameter vector", expected: self.n_params(), actual: theta.len() });
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = theta[k];
                    k += 1;
                }
            }
            for v in b.iter_mut() {
                *v = theta[k];
                k += 1;
            }
        }
        for i in 0..self.alpha.nrows() {
            for j in 0..self.alpha.ncols() {
                self.alpha[(i, j)] = theta[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn forward(&self, a: &SampleMatrix, b: &SampleMatrix) -> Result<Forward> {
        let d = self.input_dim();
        for (context, m) in [("kernel left argument", a), ("kernel right argument", b)] {
            if m.ncols() != d {
                return Err(Error::DimensionMismatch { context, expected: d, actual: m.ncols() });
            }
        }
        let (n_a, n_b) = (a.nrows(), b.nrows());
        let features = DMatrix::from_fn(d, n_a * n_b, |j, c| (a[(c / n_b, j)] - b[(c % n_b, j)]).abs());
        let mut inputs = vec![features];
        let last = self.weights.len() - 1;
        for l in 0..last {
            let mut z = &self.weights[l] * &inputs[l];
            for mut col in z.column_iter_mut() {
                col += &self.biases[l];
                col.apply(|v| *v = v.tanh());
            }
            inputs.push(z);
        }
        let z = &self.weights[last] * &inputs[last];
        let out_tanh = DVector::from_iterator(z.ncols(), z.row(0).iter().map(|v| (v + self.biases[last][0]).tanh()));
        Ok(Forward { inputs, out_tanh, n_b })
    }

    /// `K[s, q] = k(a_s, b_q)`.
    pub fn kernel_forward(&self, a: &SampleMatrix, b: &SampleMatrix) -> Result<DMatrix<f64>> {
        Ok(self.forward(a, b)?.kernel())
    }

    /// `k(M*, M∘)·α`.
    pub fn predict(&self, inputs: &SampleMatrix) -> Result<SampleMatrix> {
        Ok(self.kernel_forward(inputs, &self.anchors)? * &self.alpha)
    }

    /// Residual `R[s·d_out + j] = pred[s, j] − target[s, j]` and its Jacobian
    /// with respect to every parameter, by reverse-mode differentiation of
    /// each kernel entry.
    pub fn residual_and_jacobian(&self, inputs: &SampleMatrix, targets: &SampleMatrix) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (n_s, d_out) = (inputs.nrows(), self.output_dim());
        if targets.shape() != (n_s, d_out) {
            return Err(Error::DimensionMismatch { context: "training targets", expected: n_s * d_out, actual: targets.len() });
        }
        let fwd = self.forward(inputs, &self.anchors)?;
        let kernel = fwd.kernel();
        let pred = &kernel * &self.alpha;
        let residual = DVector::from_fn(n_s * d_out, |r, _| pred[(r / d_out, r % d_out)] - targets[(r / d_out, r % d_out)]);

        let n_q = self.n_anchors();
        let p_net = self.n_network_params();
        let mut jac = DMatrix::zeros(n_s * d_out, self.n_params());

        // δ for the output layer: ∂k/∂z = (1 − tanh²z)/2.
        let last = self.weights.len() - 1;
        let mut delta = DMatrix::from_fn(1, fwd.out_tanh.len(), |_, c| 0.5 * (1.0 - fwd.out_tanh[c].powi(2)));
        let offsets: Vec<usize> = self
            .layer_sizes
            .windows(2)
            .scan(0, |acc, w| {
                let start = *acc;
                *acc += w[1] * w[0] + w[1];
                Some(start)
            })
            .collect();
        for l in (0..=last).rev() {
            let h_in = &fwd.inputs[l];
            let (n_out, n_in) = (self.layer_sizes[l + 1], self.layer_sizes[l]);
            for s in 0..n_s {
                let block = s * n_q;
                let d_blk = delta.columns(block, n_q);
                let h_blk = h_in.columns(block, n_q);
                for j in 0..d_out {
                    let mut weighted = d_blk.clone_owned();
                    for q in 0..n_q {
                        let a = self.alpha[(q, j)];
                        weighted.column_mut(q).scale_mut(a);
                    }
                    let g_w = &weighted * h_blk.transpose();
                    let row = s * d_out + j;
                    let mut k = offsets[l];
                    for i in 0..n_out {
                        for c in 0..n_in {
                            jac[(row, k)] = g_w[(i, c)];
                            k += 1;
                        }
                    }
                    for i in 0..n_out {
                        jac[(row, k)] = weighted.row(i).sum();
                        k += 1;
                    }
                }
            }
            if l > 0 {
                let mut next = self.weights[l].transpose() * &delta;
                next.zip_apply(h_in, |d, h| *d *= 1.0 - h * h);
                delta = next;
            }
        }
        for s in 0..n_s {
            for j in 0..d_out {
                for q in 0..n_q {
                    jac[(s * d_out + j, p_net + q * d_out + j)] = kernel[(s, q)];
                }
            }
        }
        Ok((residual, jac))
    }

    pub fn to_checkpoint(&self, history: Option<TrainingHistory>) -> NetworkCheckpoint {
        NetworkCheckpoint {
            layer_sizes: self.layer_sizes.clone(),
            output_dim: self.output_dim(),
            parameters: self.params().iter().copied().collect(),
            anchors: self.anchors.row_iter().map(|r| r.iter().copied().collect()).collect(),
            history,
        }
    }

    pub fn from_checkpoint(ck: &NetworkCheckpoint) -> Result<Self> {
        validate_sizes(&ck.layer_sizes)?;
        let d = ck.layer_sizes[0];
        if ck.anchors.iter().any(|r| r.len() != d) {
            return Err(Error::Parse("checkpoint anchor rows have the wrong length".into()));
        }
        let anchors = DMatrix::from_fn(ck.anchors.len(), d, |i, j| ck.anchors[i][j]);
        let mut net = zero_network(&ck.layer_sizes, anchors, ck.output_dim)?;
        net.set_params(&DVector::from_column_slice(&ck.parameters))
            .map_err(|e| Error::Parse(format!("checkpoint parameters: {e}")))?;
        Ok(net)
    }

    pub fn save_json<W: Write>(&self, history: Option<TrainingHistory>, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, &self.to_checkpoint(history))?;
        Ok(())
    }

    pub fn load_json<R: Read>(r: R) -> Result<(Self, Option<TrainingHistory>)> {
        let ck: NetworkCheckpoint = serde_json::from_reader(r)?;
        Ok((Self::from_checkpoint(&ck)?, ck.history))
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!("invalid layer sizes {layer_sizes:?}")));
    }
    if *layer_sizes.last().unwrap() != 1 {
        return Err(Error::InvalidArgument(format!("last layer must have one unit, got {layer_sizes:?}")));
    }
    Ok(())
}

fn zero_network(layer_sizes: &[usize], anchors: SampleMatrix, d_out: usize) -> Result<KernelNetwork> {
    let weights = layer_sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect();
    let biases = layer_sizes.windows(2).map(|w| DVector::zeros(w[1])).collect();
    let alpha = DMatrix::zeros(anchors.nrows(), d_out);
    KernelNetwork::new(layer_sizes.to_vec(), weights, biases, alpha, anchors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub output_dim: usize,
    pub parameters: Vec<f64>,
    pub anchors: Vec<Vec<f64>>,
    pub history: Option<TrainingHistory>,
}

/// Weights and biases `~ U[−1/√fan_in, 1/√fan_in]`, `α ~ U[−0.1, 0.1]` and
/// anchors uniform over `bounds` (one `(lo, hi)` per input dimension).
pub fn init_network<R: Rng + ?Sized>(
    layer_sizes: &[usize],
    n_anchors: usize,
    d_out: usize,
    bounds: &[(f64, f64)],
    rng: &mut R,
) -> Result<KernelNetwork> {
    validate_sizes(layer_sizes)?;
    if bounds.len() != layer_sizes[0] {
        return Err(Error::DimensionMismatch { context: "anchor bounds", expected: layer_sizes[0], actual: bounds.len() });
    }
    if n_anchors == 0 || d_out == 0 {
        return Err(Error::InvalidArgument("need at least one anchor and one output".into()));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in layer_sizes.windows(2) {
        let s = 1.0 / (w[0] as f64).sqrt();
        weights.push(DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-s..=s)));
        biases.push(DVector::from_fn(w[1], |_, _| rng.random_range(-s..=s)));
    }
    let alpha = DMatrix::from_fn(n_anchors, d_out, |_, _| rng.random_range(-0.1..=0.1));
    let anchors = DMatrix::from_fn(n_anchors, bounds.len(), |_, j| {
        let (lo, hi) = bounds[j];
        lo + (hi - lo) * rng.random::<f64>()
    });
    KernelNetwork::new(layer_sizes.to_vec(), weights, biases, alpha, anchors)
}

/// Each row repeated `n_per` times (consecutively) with `σ·N(0,1)` jitter.
pub fn augment_prior<R: Rng + ?Sized>(m0: &SampleMatrix, n_per: usize, sigma: f64, rng: &mut R) -> Result<SampleMatrix> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument("augmentation noise must be nonnegative".into()));
    }
    let mut out = DMatrix::zeros(m0.nrows() * n_per, m0.ncols());
    for i in 0..m0.nrows() {
        for r in 0..n_per {
            for j in 0..m0.ncols() {
                let z: f64 = rng.sample(StandardNormal);
                out[(i * n_per + r, j)] = m0[(i, j)] + sigma * z;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainer {
    NewtonRaphson,
    GradientDescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingOptions {
    pub trainer: Trainer,
    pub learning_rate: f64,
    pub tikhonov: TikhonovSchedule,
    /// Absolute tolerance on `‖R‖`.
    pub residual_tol: f64,
    pub max_iter: usize,
}

impl TrainingOptions {
    pub fn newton_raphson() -> Self {
        Self {
            trainer: Trainer::NewtonRaphson,
            learning_rate: 5e-3,
            tikhonov: TikhonovSchedule::default(),
            residual_tol: 1e-3,
            max_iter: 2000,
        }
    }

    pub fn gradient_descent() -> Self {
        Self { trainer: Trainer::GradientDescent, learning_rate: 5e-4, max_iter: 10_000, ..Self::newton_raphson() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("training.learning_rate", "must be positive"));
        }
        if !(self.residual_tol > 0.0) {
            return Err(Error::config("training.residual_tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("training.max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self::newton_raphson()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// `‖R‖` before each update, followed by the final value.
    pub residual_norms: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl TrainingHistory {
    pub fn final_residual(&self) -> f64 {
        *self.residual_norms.last().unwrap_or(&f64::NAN)
    }
}

/// Fits `net` so that `predict(inputs) ≈ targets`.
///
/// Newton-Raphson: `θ ← θ − β (JᵀJ + δI)⁻¹ JᵀR` with the residual-dependent
/// `δ`. Gradient descent: `θ ← θ − β ∇‖R‖² = θ − 2β JᵀR`.
pub fn train(net: &mut KernelNetwork, inputs: &SampleMatrix, targets: &SampleMatrix, opts: &TrainingOptions) -> Result<TrainingHistory> {
    opts.validate()?;
    if inputs.nrows() != targets.nrows() {
        return Err(Error::DimensionMismatch { context: "training rows", expected: inputs.nrows(), actual: targets.nrows() });
    }
    let mut norms = Vec::new();
    let mut theta = net.params();
    for iter in 0..opts.max_iter {
        let (r, j) = net.residual_and_jacobian(inputs, targets)?;
        let norm = r.norm();
        norms.push(norm);
        if norm <= opts.residual_tol {
            return Ok(TrainingHistory { residual_norms: norms, iterations: iter, converged: true });
        }
        let step = match opts.trainer {
            Trainer::NewtonRaphson => newton_step(&j, &r, opts.tikhonov.delta(norm))? * opts.learning_rate,
            Trainer::GradientDescent => j.tr_mul(&r) * (2.0 * opts.learning_rate),
        };
        theta -= step;
        net.set_params(&theta)?;
        if log::log_enabled!(log::Level::Debug) && iter % 100 == 0 {
            log::debug!("training iteration {iter}: |R| = {norm:.4e}");
        }
    }
    let pred = net.predict(inputs)?;
    let norm = (pred - targets).norm();
    norms.push(norm);
    Ok(TrainingHistory { residual_norms: norms, iterations: opts.max_iter, converged: norm <= opts.residual_tol })
}
