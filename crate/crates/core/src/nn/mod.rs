//! Small feed-forward classifiers with reverse-mode gradients.
//!
//! A [`Network`] maps an input vector in `[0,1]^M` to `N` raw logits. Gradients
//! are available both with respect to parameters (for training) and with
//! respect to the input (for boundary-distance estimates and core-point
//! optimization). All arithmetic is `f64`.

mod train;

pub use train::{pgd_linf, PgdConfig, Target, TrainConfig, TrainOptions, TrainReport, Trainable};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the layer input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Shape-level description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    Activation { activation: Activation, dim: usize },
}

impl LayerSpec {
    pub fn in_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_dim, .. } => in_dim,
            LayerSpec::Activation { dim, .. } => dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { out_dim, .. } => out_dim,
            LayerSpec::Activation { dim, .. } => dim,
        }
    }
}

/// An MLP architecture: dense layers of the given hidden widths, each followed
/// by the same activation, and a final dense layer producing logits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl ArchSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation,
        }
    }

    /// Tag distinguishing architectures, e.g. `mlp-16-64-64-5-relu`.
    pub fn arch_id(&self) -> String {
        let mut id = format!("mlp-{}", self.input_dim);
        for h in &self.hidden {
            id.push_str(&format!("-{h}"));
        }
        id.push_str(&format!("-{}-{}", self.output_dim, self.activation.name()));
        id
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(2 * self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            specs.push(LayerSpec::Dense {
                in_dim: prev,
                out_dim: h,
            });
            specs.push(LayerSpec::Activation {
                activation: self.activation,
                dim: h,
            });
            prev = h;
        }
        specs.push(LayerSpec::Dense {
            in_dim: prev,
            out_dim: self.output_dim,
        });
        specs
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "architecture {} has a zero-width layer",
                self.arch_id()
            )));
        }
        Ok(())
    }
}

/// Fully connected layer; `weight` is row-major `out_dim x in_dim`.
///
/// `unit_mask`, when present, marks which output units are alive. Dead units
/// have zero incoming weights and bias, and the next dense layer reads zero
/// weight from them; [`Network::apply_masks`] restores that after updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_mask: Option<Vec<bool>>,
}

impl Dense {
    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weight
                .chunks_exact(self.in_dim)
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b),
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Layer {
    Dense(Dense),
    Activation { activation: Activation, dim: usize },
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense(d) => LayerSpec::Dense {
                in_dim: d.in_dim,
                out_dim: d.out_dim,
            },
            Layer::Activation { activation, dim } => LayerSpec::Activation {
                activation: *activation,
                dim: *dim,
            },
        }
    }
}

/// Per-dense-layer parameter gradients, aligned with `Network::layers`.
#[derive(Debug, Clone)]
pub(crate) struct Gradients {
    pub(crate) layers: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Gradients {
    pub(crate) fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Dense(d) => Some((vec![0.0; d.weight.len()], vec![0.0; d.bias.len()])),
                    Layer::Activation { .. } => None,
                })
                .collect(),
        }
    }

    pub(crate) fn clear(&mut self) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.fill(0.0);
            b.fill(0.0);
        }
    }
}

/// A differentiable classifier `[0,1]^M -> R^N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork")]
pub struct Network {
    pub arch_id: String,
    pub layers: Vec<Layer>,
}

#[derive(Deserialize)]
struct RawNetwork {
    arch_id: String,
    layers: Vec<Layer>,
}

impl TryFrom<RawNetwork> for Network {
    type Error = Error;

    fn try_from(raw: RawNetwork) -> Result<Self> {
        let net = Network {
            arch_id: raw.arch_id,
            layers: raw.layers,
        };
        net.validate()?;
        Ok(net)
    }
}

impl Network {
    /// Fresh network with weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = arch
            .layer_specs()
            .into_iter()
            .map(|spec| match spec {
                LayerSpec::Dense { in_dim, out_dim } => {
                    let bound = 1.0 / (in_dim as f64).sqrt();
                    let weight = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
                    let bias = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
                    Layer::Dense(Dense {
                        in_dim,
                        out_dim,
                        weight,
                        bias,
                        unit_mask: None,
                    })
                }
                LayerSpec::Activation { activation, dim } => Layer::Activation { activation, dim },
            })
            .collect();
        Ok(Self {
            arch_id: arch.arch_id(),
            layers,
        })
    }

    /// Builds a network from explicit layers, checking that dimensions compose.
    pub fn from_layers(arch_id: impl Into<String>, layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            arch_id: arch_id.into(),
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Single affine layer `x -> Wx + b`.
    pub fn linear(weight: Vec<f64>, bias: Vec<f64>, in_dim: usize) -> Result<Self> {
        let out_dim = bias.len();
        Self::from_layers(
            format!("linear-{in_dim}-{out_dim}"),
            vec![Layer::Dense(Dense {
                in_dim,
                out_dim,
                weight,
                bias,
                unit_mask: None,
            })],
        )
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::InvalidConfig("network has no layers".into()))?;
        if !matches!(self.layers.last(), Some(Layer::Dense(_))) {
            return Err(Error::InvalidConfig("network must end with a dense layer".into()));
        }
        let mut prev = first.spec().in_dim();
        for layer in &self.layers {
            let spec = layer.spec();
            if spec.in_dim() != prev || spec.out_dim() == 0 {
                return Err(Error::DimensionMismatch {
                    expected: prev,
                    actual: spec.in_dim(),
                });
            }
            if let Layer::Dense(d) = layer {
                if d.weight.len() != d.in_dim * d.out_dim {
                    return Err(Error::DimensionMismatch {
                        expected: d.in_dim * d.out_dim,
                        actual: d.weight.len(),
                    });
                }
                if d.bias.len() != d.out_dim {
                    return Err(Error::DimensionMismatch {
                        expected: d.out_dim,
                        actual: d.bias.len(),
                    });
                }
                if d.weight.iter().chain(&d.bias).any(|v| !v.is_finite()) {
                    return Err(Error::InvalidConfig("non-finite parameter".into()));
                }
                if let Some(mask) = &d.unit_mask {
                    if mask.len() != d.out_dim {
                        return Err(Error::DimensionMismatch {
                            expected: d.out_dim,
                            actual: mask.len(),
                        });
                    }
                }
            }
            prev = spec.out_dim();
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec().in_dim()
    }

    /// Number of classes `N`.
    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.spec().out_dim()).unwrap_or(0)
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Indices into `layers` of the dense layers, in order.
    pub fn dense_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, Layer::Dense(_)).then_some(i))
            .collect()
    }

    pub fn dense(&self, index: usize) -> Option<&Dense> {
        match self.layers.get(index) {
            Some(Layer::Dense(d)) => Some(d),
            _ => None,
        }
    }

    pub(crate) fn dense_mut(&mut self, index: usize) -> Option<&mut Dense> {
        match self.layers.get_mut(index) {
            Some(Layer::Dense(d)) => Some(d),
            _ => None,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.output_dim() {
            return Err(Error::InvalidConfig(format!(
                "class index {class} out of range for {} classes",
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Raw logits for `x`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    d.forward_into(&cur, &mut next);
                    std::mem::swap(&mut cur, &mut next);
                }
                Layer::Activation { activation, .. } => {
                    cur.iter_mut().for_each(|v| *v = activation.apply(*v));
                }
            }
        }
        cur
    }

    /// Predicted class (lowest index wins ties).
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Layer inputs: `trace[k]` feeds layer `k`, the final entry is the logits.
    pub(crate) fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.to_vec());
        for layer in &self.layers {
            let cur = trace.last().expect("trace starts non-empty");
            let out = match layer {
                Layer::Dense(d) => {
                    let mut out = Vec::with_capacity(d.out_dim);
                    d.forward_into(cur, &mut out);
                    out
                }
                Layer::Activation { activation, .. } => cur.iter().map(|v| activation.apply(*v)).collect(),
            };
            trace.push(out);
        }
        trace
    }

    /// Reverse pass from a logit cotangent. Accumulates parameter gradients
    /// into `grads` when given and returns the input gradient.
    pub(crate) fn backward(
        &self,
        trace: &[Vec<f64>],
        grad_out: Vec<f64>,
        mut grads: Option<&mut Gradients>,
    ) -> Vec<f64> {
        let mut g = grad_out;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace[k];
            match layer {
                Layer::Dense(d) => {
                    if let Some(grads) = grads.as_deref_mut() {
                        if let Some((gw, gb)) = grads.layers[k].as_mut() {
                            for (i, gi) in g.iter().enumerate() {
                                gb[i] += gi;
                                let row = &mut gw[i * d.in_dim..(i + 1) * d.in_dim];
                                for (w, x) in row.iter_mut().zip(input) {
                                    *w += gi * x;
                                }
                            }
                        }
                    }
                    let mut gin = vec![0.0; d.in_dim];
                    for (row, gi) in d.weight.chunks_exact(d.in_dim).zip(&g) {
                        for (acc, w) in gin.iter_mut().zip(row) {
                            *acc += w * gi;
                        }
                    }
                    g = gin;
                }
                Layer::Activation { activation, .. } => {
                    let output = &trace[k + 1];
                    for ((gi, x), y) in g.iter_mut().zip(input).zip(output) {
                        *gi *= activation.derivative(*x, *y);
                    }
                }
            }
        }
        g
    }

    /// Gradient of `logits[component]` with respect to the input.
    pub fn grad_input(&self, x: &[f64], component: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_class(component)?;
        let trace = self.trace(x);
        let mut seed = vec![0.0; self.output_dim()];
        seed[component] = 1.0;
        Ok(self.backward(&trace, seed, None))
    }

    /// Logits and the full input Jacobian (one row per class).
    pub fn jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let n = self.output_dim();
        let rows = (0..n)
            .map(|c| {
                let mut seed = vec![0.0; n];
                seed[c] = 1.0;
                self.backward(&trace, seed, None)
            })
            .collect();
        Ok((trace.last().cloned().unwrap_or_default(), rows))
    }

    /// Cross-entropy `-log softmax(f(x))[target]` together with its input gradient.
    pub fn loss_and_grad_input(&self, x: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        self.check_class(target)?;
        let trace = self.trace(x);
        let logits = trace.last().expect("non-empty trace");
        let loss = cross_entropy(logits, target);
        let mut seed = softmax(logits);
        seed[target] -= 1.0;
        Ok((loss, self.backward(&trace, seed, None)))
    }

    /// Input gradient of `-log softmax(f(x))[target]`.
    pub fn grad_loss_input(&self, x: &[f64], target: usize) -> Result<Vec<f64>> {
        self.loss_and_grad_input(x, target).map(|(_, g)| g)
    }

    /// Re-zeroes parameters tied to masked (pruned) units.
    pub fn apply_masks(&mut self) {
        let dense = self.dense_indices();
        for (pos, &k) in dense.iter().enumerate() {
            let Some(mask) = self.dense(k).and_then(|d| d.unit_mask.clone()) else {
                continue;
            };
            if let Some(d) = self.dense_mut(k) {
                for (unit, alive) in mask.iter().enumerate() {
                    if !alive {
                        d.weight[unit * d.in_dim..(unit + 1) * d.in_dim].fill(0.0);
                        d.bias[unit] = 0.0;
                    }
                }
            }
            if let Some(&next) = dense.get(pos + 1) {
                if let Some(d) = self.dense_mut(next) {
                    for row in d.weight.chunks_exact_mut(d.in_dim) {
                        for (unit, alive) in mask.iter().enumerate() {
                            if !alive {
                                row[unit] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fraction of `xs` whose prediction equals `labels`.
    pub fn accuracy<'a>(&self, xs: impl IntoIterator<Item = &'a [f64]>, labels: &[usize]) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (x, &y) in xs.into_iter().zip(labels) {
            total += 1;
            if argmax(&self.forward_unchecked(x)) == y {
                hits += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax with max-subtraction.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(z)[target]`, computed without forming the probabilities.
pub fn cross_entropy(z: &[f64], target: usize) -> f64 {
    log_sum_exp(z) - z[target]
}

/// Cross-entropy against a probability vector: `-sum_k p_k log softmax(z)_k`.
pub fn soft_cross_entropy(z: &[f64], p: &[f64]) -> f64 {
    let lse = log_sum_exp(z);
    z.iter().zip(p).map(|(zk, pk)| pk * (lse - zk)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_relu(seed: u64) -> Network {
        Network::new(&ArchSpec::new(3, &[5, 4], 3, Activation::Relu), seed).unwrap()
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let mut net = small_relu(1);
        for layer in &mut net.layers {
            if let Layer::Dense(d) = layer {
                d.weight.fill(0.0);
                d.bias.fill(0.0);
            }
        }
        assert_eq!(net.forward(&[0.3, 0.9, 0.1]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_dense_is_affine() {
        let net = Network::linear(vec![1.0, 2.0, -1.0, 0.5], vec![0.25, -0.75], 2).unwrap();
        let z = net.forward(&[2.0, 3.0]).unwrap();
        assert_eq!(z, vec![1.0 * 2.0 + 2.0 * 3.0 + 0.25, -2.0 + 1.5 - 0.75]);
        assert_eq!(net.grad_input(&[2.0, 3.0], 0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(net.grad_input(&[2.0, 3.0], 1).unwrap(), vec![-1.0, 0.5]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let net = small_relu(2);
        assert!(matches!(
            net.forward(&[0.1, 0.2]),
            Err(Error::DimensionMismatch { expected: 3, actual: 2 })
        ));
        assert!(net.grad_input(&[0.1; 4], 0).is_err());
        assert!(net.grad_input(&[0.1; 3], 3).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
        let p = softmax(&[1.0, 2.0, 3.0]);
        // e^k / (e + e^2 + e^3)
        let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (k, expected) in [0.09003057, 0.24472847, 0.66524096].iter().enumerate() {
            assert_abs_diff_eq!(p[k], *expected, epsilon = 1e-6);
            assert_abs_diff_eq!(p[k], ((k + 1) as f64).exp() / denom, epsilon = 1e-15);
        }
    }

    #[test]
    fn relu_gradient_is_product_of_active_weights() {
        // 2 -> 2 -> 2 with all hidden pre-activations positive at x.
        let w1 = vec![1.0, 2.0, -0.5, 1.5];
        let w2 = vec![0.3, -0.7, 1.1, 0.4];
        let net = Network::from_layers(
            "manual",
            vec![
                Layer::Dense(Dense {
                    in_dim: 2,
                    out_dim: 2,
                    weight: w1.clone(),
                    bias: vec![0.1, 0.1],
                    unit_mask: None,
                }),
                Layer::Activation {
                    activation: Activation::Relu,
                    dim: 2,
                },
                Layer::Dense(Dense {
                    in_dim: 2,
                    out_dim: 2,
                    weight: w2.clone(),
                    bias: vec![0.0, 0.0],
                    unit_mask: None,
                }),
            ],
        )
        .unwrap();
        let x = [0.5, 0.5];
        for c in 0..2 {
            let g = net.grad_input(&x, c).unwrap();
            // (W2 W1)[c, :]
            let expected = [
                w2[2 * c] * w1[0] + w2[2 * c + 1] * w1[2],
                w2[2 * c] * w1[1] + w2[2 * c + 1] * w1[3],
            ];
            assert_abs_diff_eq!(g[0], expected[0], epsilon = 1e-15);
            assert_abs_diff_eq!(g[1], expected[1], epsilon = 1e-15);
        }
    }

    #[test]
    fn loss_gradient_single_dense_closed_form() {
        let w = vec![0.2, -0.4, 1.0, 0.3, -0.6, 0.8];
        let net = Network::linear(w.clone(), vec![0.1, 0.0, -0.2], 2).unwrap();
        let x = [0.7, 0.2];
        let z = net.forward(&x).unwrap();
        let p = softmax(&z);
        let target = 1;
        let g = net.grad_loss_input(&x, target).unwrap();
        for j in 0..2 {
            let expected: f64 = (0..3)
                .map(|i| w[i * 2 + j] * (p[i] - if i == target { 1.0 } else { 0.0 }))
                .sum();
            assert_abs_diff_eq!(g[j], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn loss_gradient_vanishes_at_certainty() {
        let net = Network::linear(vec![100.0, 0.0, -100.0, 0.0], vec![0.0, 0.0], 2).unwrap();
        let g = net.grad_loss_input(&[1.0, 0.0], 0).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-60);
    }

    #[test]
    fn masks_zero_tied_parameters() {
        let mut net = small_relu(5);
        let first = net.dense_indices()[0];
        net.dense_mut(first).unwrap().unit_mask = Some(vec![true, false, true, true, false]);
        net.apply_masks();
        let d = net.dense(first).unwrap();
        assert!(d.weight[3..6].iter().all(|v| *v == 0.0));
        assert_eq!(d.bias[1], 0.0);
        let next = net.dense(net.dense_indices()[1]).unwrap();
        for row in next.weight.chunks_exact(next.in_dim) {
            assert_eq!(row[1], 0.0);
            assert_eq!(row[4], 0.0);
        }
    }

    #[test]
    fn deserialization_checks_composition() {
        let net = small_relu(3);
        let mut json: serde_json::Value = serde_json::to_value(&net).unwrap();
        json["layers"][2]["in_dim"] = serde_json::json!(7);
        assert!(serde_json::from_value::<Network>(json).is_err());
    }

    #[test]
    fn arch_id_reflects_shape() {
        let arch = ArchSpec::new(16, &[64, 32], 5, Activation::Tanh);
        assert_eq!(arch.arch_id(), "mlp-16-64-32-5-tanh");
        assert_eq!(Network::new(&arch, 0).unwrap().arch_id, arch.arch_id());
    }
}
