//! Three-layer dense encoder: `[dense → batchnorm → ReLU] × 2 → dense`,
//! with a hand-written backward pass and plain SGD updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fully connected layer; `weight` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut y = x.matmul_t(&self.weight)?;
        for i in 0..y.rows() {
            for (v, &b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

/// Per-feature batch normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(features: usize) -> Self {
        Self {
            scale: vec![T::one(); features],
            shift: vec![T::zero(); features],
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            momentum: T::lit(BN_MOMENTUM),
            epsilon: T::lit(BN_EPSILON),
        }
    }
}

/// Biased batch mean and variance of one batchnorm input.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub rows: usize,
}

#[derive(Clone, Debug)]
struct NormCache<T> {
    normalized: Matrix<T>,
    inv_std: Vec<T>,
    activated: Matrix<T>,
    stats: Option<BatchStats<T>>,
}

/// Intermediate values kept by [`MlpModel::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    mode: Mode,
    input: Matrix<T>,
    norms: [NormCache<T>; 2],
}

impl<T> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Batch statistics of both batchnorm layers (training mode only).
    pub fn batch_stats(&self) -> Option<[&BatchStats<T>; 2]> {
        match (&self.norms[0].stats, &self.norms[1].stats) {
            (Some(a), Some(b)) => Some([a, b]),
            _ => None,
        }
    }
}

/// Gradients laid out like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradients<T> {
    pub dense: [Dense<T>; 3],
    pub norm_scale: [Vec<T>; 2],
    pub norm_shift: [Vec<T>; 2],
}

impl<T: Scalar> MlpGradients<T> {
    /// Flattened in [`MlpModel::parameters`] order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in 0..3 {
            out.extend_from_slice(self.dense[l].weight.as_slice());
            out.extend_from_slice(&self.dense[l].bias);
            if l < 2 {
                out.extend_from_slice(&self.norm_scale[l]);
                out.extend_from_slice(&self.norm_shift[l]);
            }
        }
        out
    }
}

/// The encoder `m → h1 → h2 → m_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel<T> {
    pub dense: [Dense<T>; 3],
    pub norms: [BatchNorm<T>; 2],
}

fn he_dense<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Dense {
        weight: Matrix::from_fn(fan_out, fan_in, |_, _| {
            T::lit(std * rng.sample::<f64, _>(StandardNormal))
        }),
        bias: vec![T::zero(); fan_out],
    }
}

fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

impl<T: Scalar> MlpModel<T> {
    /// Scaled-Gaussian weights (std `√(2/fan_in)`), zero biases, identity
    /// batchnorm with running statistics `(0, 1)`.
    pub fn init(m: usize, h1: usize, h2: usize, m_out: usize, seed: u64) -> Result<Self> {
        if [m, h1, h2, m_out].contains(&0) {
            return Err(Error::InvalidConfig("all layer widths must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d1 = he_dense(&mut rng, m, h1);
        let d2 = he_dense(&mut rng, h1, h2);
        let d3 = he_dense(&mut rng, h2, m_out);
        Ok(Self {
            dense: [d1, d2, d3],
            norms: [BatchNorm::new(h1), BatchNorm::new(h2)],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.dense[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.dense[2].weight.rows()
    }

    /// Layer widths `[m, h1, h2, m_out]`.
    pub fn dims(&self) -> [usize; 4] {
        [
            self.input_dim(),
            self.dense[0].weight.rows(),
            self.dense[1].weight.rows(),
            self.output_dim(),
        ]
    }

    /// Trainable parameters in a fixed order: for each layer, weight, bias,
    /// then (hidden layers) batchnorm scale and shift.
    pub fn parameters(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::with_capacity(10);
        for l in 0..3 {
            out.push(self.dense[l].weight.as_slice());
            out.push(&self.dense[l].bias);
            if l < 2 {
                out.push(&self.norms[l].scale);
                out.push(&self.norms[l].shift);
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(10);
        let (dense, norms) = (&mut self.dense, &mut self.norms);
        let mut norm_iter = norms.iter_mut();
        for (l, layer) in dense.iter_mut().enumerate() {
            out.push(layer.weight.as_mut_slice());
            out.push(&mut layer.bias);
            if l < 2 {
                let bn = norm_iter.next().expect("two batchnorm layers");
                out.push(&mut bn.scale);
                out.push(&mut bn.shift);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.iter().all(|x| x.is_finite()))
            && self
                .norms
                .iter()
                .all(|bn| bn.running_mean.iter().chain(&bn.running_var).all(|x| x.is_finite()))
    }

    /// Runs the network. Training mode normalizes with batch statistics and
    /// needs at least two rows; the running statistics are left untouched
    /// (see [`MlpModel::update_running_stats`]).
    pub fn forward(&self, x: &Matrix<T>, mode: Mode) -> Result<(Matrix<T>, ForwardCache<T>)> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "model input width",
                expected: self.input_dim(),
                found: x.cols(),
            });
        }
        if mode == Mode::Train && x.rows() < 2 {
            return Err(Error::BatchTooSmall { min: 2, got: x.rows() });
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(2);
        for l in 0..2 {
            let pre = self.dense[l].forward(&h)?;
            let cache = self.norm_forward(l, &pre, mode);
            h = cache.activated.clone();
            caches.push(cache);
        }
        let out = self.dense[2].forward(&h)?;
        let [c0, c1]: [NormCache<T>; 2] = caches.try_into().expect("two caches");
        Ok((
            out,
            ForwardCache {
                mode,
                input: x.clone(),
                norms: [c0, c1],
            },
        ))
    }

    fn norm_forward(&self, l: usize, pre: &Matrix<T>, mode: Mode) -> NormCache<T> {
        let bn = &self.norms[l];
        let (n, f) = pre.shape();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                let nt = T::lit(n as f64);
                let mean: Vec<T> = (0..f).map(|j| (0..n).map(|i| pre[(i, j)]).sum::<T>() / nt).collect();
                let var: Vec<T> = (0..f)
                    .map(|j| {
                        (0..n)
                            .map(|i| {
                                let c = pre[(i, j)] - mean[j];
                                c * c
                            })
                            .sum::<T>()
                            / nt
                    })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    rows: n,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), None),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + bn.epsilon).sqrt()).collect();
        let normalized = Matrix::from_fn(n, f, |i, j| (pre[(i, j)] - mean[j]) * inv_std[j]);
        let activated = Matrix::from_fn(n, f, |i, j| relu(bn.scale[j] * normalized[(i, j)] + bn.shift[j]));
        NormCache {
            normalized,
            inv_std,
            activated,
            stats,
        }
    }

    /// Folds a training-mode batch into the running statistics (unbiased
    /// variance, exponential moving average with the layer's momentum).
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let Some(stats) = cache.batch_stats() else {
            return;
        };
        for (bn, s) in self.norms.iter_mut().zip(stats) {
            let m = bn.momentum;
            let correction = if s.rows > 1 {
                T::lit(s.rows as f64 / (s.rows - 1) as f64)
            } else {
                T::one()
            };
            for j in 0..bn.running_mean.len() {
                bn.running_mean[j] = (T::one() - m) * bn.running_mean[j] + m * s.mean[j];
                bn.running_var[j] = (T::one() - m) * bn.running_var[j] + m * s.var[j] * correction;
            }
        }
    }

    /// Backpropagates `grad_out` (∂L/∂output) to every trainable parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Matrix<T>) -> Result<MlpGradients<T>> {
        let n = cache.input.rows();
        if grad_out.shape() != (n, self.output_dim()) {
            return Err(Error::DimensionMismatch {
                context: "backward upstream gradient",
                expected: n * self.output_dim(),
                found: grad_out.rows() * grad_out.cols(),
            });
        }
        let layer_input = |l: usize| -> &Matrix<T> {
            if l == 0 {
                &cache.input
            } else {
                &cache.norms[l - 1].activated
            }
        };

        let mut dense_grads: Vec<Dense<T>> = Vec::with_capacity(3);
        let mut scale_grads: Vec<Vec<T>> = Vec::with_capacity(2);
        let mut shift_grads: Vec<Vec<T>> = Vec::with_capacity(2);

        // output layer
        let mut g = grad_out.clone();
        dense_grads.push(dense_backward(layer_input(2), &g)?);
        g = g.matmul(&self.dense[2].weight)?;

        for l in (0..2).rev() {
            let bn = &self.norms[l];
            let nc = &cache.norms[l];
            let f = g.cols();
            // through ReLU
            for i in 0..n {
                for j in 0..f {
                    if nc.activated[(i, j)] <= T::zero() {
                        g[(i, j)] = T::zero();
                    }
                }
            }
            let mut d_scale = vec![T::zero(); f];
            let mut d_shift = vec![T::zero(); f];
            for i in 0..n {
                for j in 0..f {
                    d_scale[j] += g[(i, j)] * nc.normalized[(i, j)];
                    d_shift[j] += g[(i, j)];
                }
            }
            let mut dpre = Matrix::zeros(n, f);
            match cache.mode {
                Mode::Train => {
                    let nt = T::lit(n as f64);
                    for j in 0..f {
                        let mean_dx: T = (0..n).map(|i| g[(i, j)] * bn.scale[j]).sum::<T>() / nt;
                        let mean_dx_x: T = (0..n)
                            .map(|i| g[(i, j)] * bn.scale[j] * nc.normalized[(i, j)])
                            .sum::<T>()
                            / nt;
                        for i in 0..n {
                            let dxhat = g[(i, j)] * bn.scale[j];
                            dpre[(i, j)] = nc.inv_std[j] * (dxhat - mean_dx - nc.normalized[(i, j)] * mean_dx_x);
                        }
                    }
                }
                Mode::Eval => {
                    for i in 0..n {
                        for j in 0..f {
                            dpre[(i, j)] = g[(i, j)] * bn.scale[j] * nc.inv_std[j];
                        }
                    }
                }
            }
            scale_grads.push(d_scale);
            shift_grads.push(d_shift);
            dense_grads.push(dense_backward(layer_input(l), &dpre)?);
            if l > 0 {
                g = dpre.matmul(&self.dense[l].weight)?;
            }
        }
        dense_grads.reverse();
        scale_grads.reverse();
        shift_grads.reverse();
        let dense: [Dense<T>; 3] = dense_grads.try_into().expect("three dense layers");
        let norm_scale: [Vec<T>; 2] = scale_grads.try_into().expect("two norms");
        let norm_shift: [Vec<T>; 2] = shift_grads.try_into().expect("two norms");
        Ok(MlpGradients {
            dense,
            norm_scale,
            norm_shift,
        })
    }

    /// `θ ← θ − lr · ∇θ`.
    pub fn sgd_step(&mut self, grads: &MlpGradients<T>, learning_rate: T) {
        let flat = grads.flatten();
        let mut offset = 0;
        for p in self.parameters_mut() {
            let len = p.len();
            for (x, &g) in p.iter_mut().zip(&flat[offset..offset + len]) {
                *x -= learning_rate * g;
            }
            offset += len;
        }
    }

    /// Plain-`f64` copy of every parameter and running statistic.
    pub fn snapshot(&self) -> MlpSnapshot {
        let v = |s: &[T]| s.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        MlpSnapshot {
            dims: self.dims(),
            layers: self
                .dense
                .iter()
                .map(|d| LayerSnapshot {
                    weight: d.weight.to_f64_rows(),
                    bias: v(&d.bias),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|bn| NormSnapshot {
                    scale: v(&bn.scale),
                    shift: v(&bn.shift),
                    running_mean: v(&bn.running_mean),
                    running_var: v(&bn.running_var),
                    momentum: bn.momentum.as_f64(),
                    epsilon: bn.epsilon.as_f64(),
                })
                .collect(),
        }
    }
}

fn dense_backward<T: Scalar>(input: &Matrix<T>, grad_pre: &Matrix<T>) -> Result<Dense<T>> {
    let weight = grad_pre.t_matmul(input)?;
    let bias = (0..grad_pre.cols())
        .map(|j| (0..grad_pre.rows()).map(|i| grad_pre[(i, j)]).sum())
        .collect();
    Ok(Dense { weight, bias })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSnapshot {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Serializable model state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub dims: [usize; 4],
    pub layers: Vec<LayerSnapshot>,
    pub norms: Vec<NormSnapshot>,
}

impl MlpSnapshot {
    pub fn restore<T: Scalar>(&self) -> Result<MlpModel<T>> {
        if self.layers.len() != 3 || self.norms.len() != 2 {
            return Err(Error::InvalidConfig("snapshot must hold 3 layers and 2 norms".into()));
        }
        let v = |s: &[f64]| s.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        let mut dense = Vec::with_capacity(3);
        for l in &self.layers {
            dense.push(Dense {
                weight: Matrix::from_f64_rows(&l.weight)?,
                bias: v(&l.bias),
            });
        }
        let norms: Vec<BatchNorm<T>> = self
            .norms
            .iter()
            .map(|n| BatchNorm {
                scale: v(&n.scale),
                shift: v(&n.shift),
                running_mean: v(&n.running_mean),
                running_var: v(&n.running_var),
                momentum: T::lit(n.momentum),
                epsilon: T::lit(n.epsilon),
            })
            .collect();
        let model = MlpModel {
            dense: dense.try_into().expect("checked length"),
            norms: norms.try_into().expect("checked length"),
        };
        if model.dims() != self.dims {
            return Err(Error::InvalidConfig("snapshot dims disagree with layer shapes".into()));
        }
        Ok(model)
    }
}
