//! Small fully connected ReLU networks: forward and reverse passes, scoring
//! heads, SGD training and the binary checkpoint format.

mod checkpoint;
mod train;

pub use checkpoint::{
    from_checkpoint_bytes, load_checkpoint, load_model, save_checkpoint, save_model, to_checkpoint_bytes,
    CheckpointKind,
};
pub use train::{train_classifier, Sgd, TrainConfig, TrainReport, Trained};

use rand_distr::{Distribution, Normal};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{RngStream, Vector};

/// Affine layer `y = W x + b` with `W` stored row-major (`out_dim x in_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_dim(in_dim * out_dim, weights.len())?;
        check_dim(out_dim, bias.len())?;
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub(crate) fn apply(&self, x: &[f64]) -> Vector {
        (0..self.out_dim)
            .map(|i| {
                let mut acc = self.bias[i];
                for (w, v) in self.row(i).iter().zip(x) {
                    acc += w * v;
                }
                acc
            })
            .collect()
    }

    /// `Wᵀ g`
    pub(crate) fn transpose_apply(&self, g: &[f64]) -> Vector {
        let mut out = vec![0.0; self.in_dim];
        for (i, gi) in g.iter().enumerate() {
            if *gi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += w * gi;
            }
        }
        out
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Feedforward network: ReLU between layers, identity at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Per-layer intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[l]` is what layer `l` consumed (post-ReLU of layer `l - 1`).
    pub inputs: Vec<Vector>,
    /// Pre-activation outputs of every layer; the last entry is the network output.
    pub pre: Vec<Vector>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("non-empty network")
    }
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("network needs at least one layer"));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::domain(format!(
                    "layer {} expects {} inputs, previous layer produces {}",
                    l + 1,
                    pair[1].in_dim,
                    pair[0].out_dim
                )));
            }
        }
        for (l, layer) in layers.iter().enumerate() {
            check_dim(layer.in_dim * layer.out_dim, layer.weights.len())?;
            check_dim(layer.out_dim, layer.bias.len())?;
            if !layer.is_finite() {
                return Err(Error::Numeric(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(Self { layers })
    }

    /// He-normal weights, zero biases. `sizes` lists every width including
    /// input and output, e.g. `[2, 64, 64, 4]`.
    pub fn init(sizes: &[usize], stream: &RngStream) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::domain(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = stream.rng();
        let layers = sizes
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                let weights = (0..w[0] * w[1]).map(|_| normal.sample(&mut rng)).collect();
                Dense {
                    in_dim: w[0],
                    out_dim: w[1],
                    weights,
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn zeros_like(&self) -> Vec<Dense> {
        self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        check_dim(self.input_dim(), x.len())?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vector {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h);
            if l < last {
                relu_in_place(&mut h);
            }
        }
        h
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        check_dim(self.input_dim(), x.len())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(h);
            h = z.clone();
            if l < last {
                relu_in_place(&mut h);
            }
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }

    /// Reverse pass: given `grad_out = dL/d(output)`, returns `dL/dx` and, when
    /// `param_grads` is supplied, accumulates parameter gradients into it.
    pub fn backward(&self, trace: &Trace, grad_out: &[f64], mut param_grads: Option<&mut [Dense]>) -> Vector {
        let mut g = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                for (gi, z) in g.iter_mut().zip(&trace.pre[l]) {
                    if *z <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let layer = &self.layers[l];
            if let Some(grads) = param_grads.as_deref_mut() {
                let acc = &mut grads[l];
                let input = &trace.inputs[l];
                for (i, gi) in g.iter().enumerate() {
                    acc.bias[i] += gi;
                    if *gi == 0.0 {
                        continue;
                    }
                    let row = &mut acc.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
                    for (w, v) in row.iter_mut().zip(input) {
                        *w += gi * v;
                    }
                }
            }
            g = layer.transpose_apply(&g);
        }
        g
    }

    /// Vector-Jacobian product `(d output / d x)ᵀ grad_out` at `x`.
    pub fn vjp_input(&self, x: &[f64], grad_out: &[f64]) -> Result<Vector> {
        let trace = self.forward_trace(x)?;
        check_dim(self.output_dim(), grad_out.len())?;
        Ok(self.backward(&trace, grad_out, None))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

fn relu_in_place(h: &mut [f64]) {
    for v in h {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn check_logits(logits: &[f64], min_len: usize, temperature: f64) -> Result<()> {
    if logits.len() < min_len {
        return Err(Error::domain(format!("need at least {min_len} logits, got {}", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::domain(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(())
}

/// softmax(logits / temperature) with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Vector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vector = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Maximum softmax probability.
pub fn msp(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits, 2, temperature)?;
    Ok(softmax(logits, temperature).into_iter().fold(0.0, f64::max))
}

/// Energy score `-T log Σ exp(z_k / T)`.
pub fn energy_score(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits, 1, temperature)?;
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok(-temperature * lse)
}

/// Scalar readouts of a classifier that [`input_gradient`] can differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Logit(usize),
    /// Softmax probability of a fixed class (temperature 1).
    ClassProbability(usize),
    /// Softmax probability of the arg-max class.
    Msp,
}

/// Value of `head` at `x` and its exact gradient with respect to `x`.
pub fn head_value_and_gradient(model: &Mlp, x: &[f64], head: Head) -> Result<(f64, Vector)> {
    let trace = model.forward_trace(x)?;
    let logits = trace.output();
    let k = logits.len();
    let class = match head {
        Head::Logit(c) | Head::ClassProbability(c) => {
            if c >= k {
                return Err(Error::domain(format!("class {c} out of range for {k} outputs")));
            }
            c
        }
        Head::Msp => argmax(logits),
    };
    let (value, grad_out) = match head {
        Head::Logit(_) => {
            let mut g = vec![0.0; k];
            g[class] = 1.0;
            (logits[class], g)
        }
        Head::ClassProbability(_) | Head::Msp => {
            let p = softmax(logits, 1.0);
            let pc = p[class];
            let g = p
                .iter()
                .enumerate()
                .map(|(j, pj)| if j == class { pc * (1.0 - pc) } else { -pc * pj })
                .collect::<Vec<_>>();
            (pc, g)
        }
    };
    Ok((value, model.backward(&trace, &grad_out, None)))
}

pub fn input_gradient(model: &Mlp, x: &[f64], head: Head) -> Result<Vector> {
    head_value_and_gradient(model, x, head).map(|(_, g)| g)
}
