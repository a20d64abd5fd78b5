//! Norm-constrained ReLU feedforward networks.
//!
//! A network with `depth` hidden layers is the composition
//! `T_depth ∘ σ ∘ ... ∘ σ ∘ T_0` of `depth + 1` affine maps, with σ the
//! componentwise ReLU. Its weight norm is
//!
//! ```text
//! kappa = ||A_last|| * prod_{hidden l} max(||(A_l, b_l)||, 1)
//! ```
//!
//! where `||.||` is the max-row-sum norm and `(A_l, b_l)` is the weight with
//! the bias appended as an extra column. `kappa` bounds the ℓ∞ → ℓ∞
//! Lipschitz constant of the network.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out_dim × in_dim`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Frozen biases stay at their initial value (zero) and receive no gradient.
    pub trainable_bias: bool,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Max-row-sum norm of the weight alone.
    pub fn weight_row_norm(&self) -> f64 {
        self.weight
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|w| w.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Max-row-sum norm of the block `(A, b)`.
    pub fn block_row_norm(&self) -> f64 {
        self.weight
            .rows()
            .into_iter()
            .zip(self.bias.iter())
            .map(|(row, b)| row.iter().map(|w| w.abs()).sum::<f64>() + b.abs())
            .fold(0.0, f64::max)
    }
}

/// Which layers carry a bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasMode {
    /// Every affine map has a trainable bias.
    #[default]
    Full,
    /// Only the first affine map has a bias (the augmented-input form).
    FirstOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetSpec {
    pub in_dim: usize,
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub out_dim: usize,
    pub norm_budget: f64,
    pub output_clamp: Option<f64>,
    pub bias: BiasMode,
}

impl NetSpec {
    pub fn new(in_dim: usize, width: usize, depth: usize, out_dim: usize, norm_budget: f64) -> Self {
        NetSpec {
            in_dim,
            width,
            depth,
            out_dim,
            norm_budget,
            output_clamp: None,
            bias: BiasMode::Full,
        }
    }

    pub fn with_clamp(mut self, bound: f64) -> Self {
        self.output_clamp = Some(bound);
        self
    }

    pub fn with_bias(mut self, bias: BiasMode) -> Self {
        self.bias = bias;
        self
    }
}

#[derive(Debug, Clone)]
pub struct NormNet {
    layers: Vec<Layer>,
    norm_budget: f64,
    output_clamp: Option<f64>,
    /// Bumped on every parameter mutation; ties caches to a parameter state.
    generation: u64,
}

impl PartialEq for NormNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.norm_budget == other.norm_budget
            && self.output_clamp == other.output_clamp
    }
}

/// Activations recorded by [`NormNet::forward`] for one batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each affine map; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<f64>>,
    /// Output of each affine map before activation (or clamp, for the last).
    pre: Vec<Array2<f64>>,
    generation: u64,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrad>,
}

impl NetGrads {
    pub fn zeros_like(net: &NormNet) -> Self {
        NetGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    /// Flat views in the same order as [`NormNet::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn add_assign(&mut self, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight *= c;
            l.bias *= c;
        }
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl NormNet {
    /// Uniform `±1/sqrt(in_dim)` weights, zero biases, then one projection
    /// onto the norm budget.
    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Result<Self> {
        if spec.in_dim == 0 || spec.out_dim == 0 || (spec.depth > 0 && spec.width == 0) {
            return Err(Error::shape("network dimensions must be positive"));
        }
        if !(spec.norm_budget > 0.0) {
            return Err(Error::Config(format!(
                "norm budget must be positive, got {}",
                spec.norm_budget
            )));
        }
        let mut dims = vec![spec.in_dim];
        dims.extend(std::iter::repeat_n(spec.width, spec.depth));
        dims.push(spec.out_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..=bound));
                let trainable_bias = match spec.bias {
                    BiasMode::Full => true,
                    BiasMode::FirstOnly => l == 0,
                };
                Layer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    trainable_bias,
                }
            })
            .collect();
        let mut net = NormNet::from_layers(layers, spec.norm_budget, spec.output_clamp)?;
        net.project_norm();
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Layer>, norm_budget: f64, output_clamp: Option<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.in_dim() == 0 || layer.out_dim() == 0 {
                return Err(Error::shape(format!("layer {l} has an empty dimension")));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(format!(
                    "layer {l}: bias length {} != out_dim {}",
                    layer.bias.len(),
                    layer.out_dim()
                )));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("layer{l}")));
            }
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::shape(format!(
                    "layer {} in_dim {} does not chain with layer {l} out_dim {}",
                    l + 1,
                    pair[1].in_dim(),
                    pair[0].out_dim()
                )));
            }
        }
        if !(norm_budget > 0.0) {
            return Err(Error::Config(format!("norm budget must be positive, got {norm_budget}")));
        }
        if let Some(b) = output_clamp {
            if !(b > 0.0) {
                return Err(Error::Config(format!("output clamp must be positive, got {b}")));
            }
        }
        // Standard layout is needed for flat parameter slices.
        let layers = layers
            .into_iter()
            .map(|l| Layer {
                weight: l.weight.as_standard_layout().into_owned(),
                bias: l.bias.as_standard_layout().into_owned(),
                trainable_bias: l.trainable_bias,
            })
            .collect();
        Ok(NormNet {
            layers,
            norm_budget,
            output_clamp,
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to the layers. Invalidates existing caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Largest hidden width (0 for a purely affine network).
    pub fn width(&self) -> usize {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::out_dim)
            .max()
            .unwrap_or(0)
    }

    pub fn norm_budget(&self) -> f64 {
        self.norm_budget
    }

    pub fn output_clamp(&self) -> Option<f64> {
        self.output_clamp
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// The weight-norm functional kappa.
    pub fn weight_norm(&self) -> f64 {
        let (last, hidden) = self.layers.split_last().expect("nonempty");
        hidden
            .iter()
            .fold(last.weight_row_norm(), |acc, l| acc * l.block_row_norm().max(1.0))
    }

    /// Rescale the final affine map so that `weight_norm() <= norm_budget`.
    /// Returns the factor applied (1 when already feasible).
    pub fn project_norm(&mut self) -> f64 {
        let budget = self.norm_budget;
        let mut total = 1.0;
        let mut kappa = self.weight_norm();
        while kappa > budget {
            let c = if total == 1.0 {
                budget / kappa
            } else {
                // Rounding left us a hair above the budget.
                (budget / kappa) * (1.0 - f64::EPSILON)
            };
            self.scale_output(c);
            total *= c;
            kappa = self.weight_norm();
        }
        total
    }

    /// Multiply the final weight and bias by `c`.
    pub fn scale_output(&mut self, c: f64) {
        let last = self.layers_mut().last_mut().expect("nonempty");
        last.weight *= c;
        last.bias *= c;
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    fn clamp(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.output_clamp {
            Some(b) => z.mapv(|v| v.clamp(-b, b)),
            None => z.clone(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let z = inputs[l].dot(&layer.weight.t()) + &layer.bias;
            if l < last {
                inputs.push(z.mapv(relu));
            }
            pre.push(z);
        }
        let y = self.clamp(&pre[last]);
        Ok((
            y,
            ForwardCache {
                inputs,
                pre,
                generation: self.generation,
            },
        ))
    }

    /// Forward pass without retaining activations.
    pub fn eval(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.weight.t()) + &layer.bias;
            a = if l < last { z.mapv(relu) } else { z };
        }
        Ok(self.clamp(&a))
    }

    /// Exact reverse-mode pass. Returns parameter gradients and the input
    /// cotangent for the given output cotangent.
    pub fn backward(&self, cache: &ForwardCache, out_cotangent: ArrayView2<f64>) -> Result<(NetGrads, Array2<f64>)> {
        if cache.generation != self.generation || cache.pre.len() != self.layers.len() {
            return Err(Error::Cache(format!(
                "cache generation {} / {} layers, network generation {} / {} layers",
                cache.generation,
                cache.pre.len(),
                self.generation,
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if cache.inputs[l].ncols() != layer.in_dim() || cache.pre[l].ncols() != layer.out_dim() {
                return Err(Error::Cache(format!("layer {l} shapes differ from cache")));
            }
        }
        let n = cache.batch_size();
        if out_cotangent.dim() != (n, self.out_dim()) {
            return Err(Error::shape(format!(
                "cotangent is {:?}, expected ({n}, {})",
                out_cotangent.dim(),
                self.out_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut delta = out_cotangent.to_owned();
        if let Some(b) = self.output_clamp {
            ndarray::Zip::from(&mut delta)
                .and(&cache.pre[last])
                .for_each(|d, &z| {
                    if z < -b || z > b {
                        *d = 0.0;
                    }
                });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let gw = delta.t().dot(&cache.inputs[l]).as_standard_layout().into_owned();
            let gb = if layer.trainable_bias {
                delta.sum_axis(Axis(0))
            } else {
                Array1::zeros(layer.out_dim())
            };
            grads.push(LayerGrad { weight: gw, bias: gb });
            let mut d_in = delta.dot(&layer.weight);
            if l > 0 {
                ndarray::Zip::from(&mut d_in)
                    .and(&cache.pre[l - 1])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            delta = d_in;
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, delta))
    }

    /// Flat mutable parameter views: `w0, b0, w1, b1, ...`. Invalidates caches.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|l| [format!("layer{l}.weight"), format!("layer{l}.bias")])
            .collect()
    }

    /// Flat copy of every parameter, in slice order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}
