use rand::seq::SliceRandom;
use rand::Rng;

use super::{argmax, log_softmax, softmax, Dense, Mlp};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::synthdata::{LabeledDataset, OodDataset};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight λ of the outlier-exposure term; 0 disables it.
    pub oe_weight: f64,
    pub seed: u64,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.02,
            momentum: 0.9,
            oe_weight: 0.5,
            seed: 0,
            hidden: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::domain("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::domain("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain("momentum must lie in [0, 1)"));
        }
        if !(self.oe_weight >= 0.0) || !self.oe_weight.is_finite() {
            return Err(Error::domain("oe_weight must be >= 0"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::domain("hidden widths must be positive"));
        }
        Ok(())
    }

    pub(crate) fn layer_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(output);
        sizes
    }
}

/// SGD with heavy-ball momentum: `v <- μ v - lr g; w <- w + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<Dense>,
    learning_rate: f64,
    momentum: f64,
}

impl Sgd {
    pub fn new(model: &Mlp, learning_rate: f64, momentum: f64) -> Self {
        Self {
            velocity: model.zeros_like(),
            learning_rate,
            momentum,
        }
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &[Dense]) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        for ((layer, vel), g) in model.layers_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((w, v), gw) in layer.weights.iter_mut().zip(&mut vel.weights).zip(&g.weights) {
                *v = mu * *v - lr * gw;
                *w += *v;
            }
            for ((b, v), gb) in layer.bias.iter_mut().zip(&mut vel.bias).zip(&g.bias) {
                *v = mu * *v - lr * gb;
                *b += *v;
            }
        }
    }
}

pub(crate) fn zero_grads(grads: &mut [Dense]) {
    for g in grads {
        g.weights.iter_mut().for_each(|v| *v = 0.0);
        g.bias.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Mlp,
    pub report: TrainReport,
}

/// Mean cross-entropy over the whole dataset (plus the OE term when enabled).
fn full_loss(model: &Mlp, data: &LabeledDataset, ood: Option<&OodDataset>, lambda: f64) -> f64 {
    let ce: f64 = data
        .points
        .iter()
        .zip(&data.labels)
        .map(|(x, &y)| -log_softmax(&model.forward_unchecked(x))[y])
        .sum::<f64>()
        / data.len() as f64;
    match ood {
        Some(o) if lambda > 0.0 && !o.is_empty() => {
            let oe: f64 = o
                .points
                .iter()
                .map(|x| uniform_cross_entropy(&log_softmax(&model.forward_unchecked(x))))
                .sum::<f64>()
                / o.len() as f64;
            ce + lambda * oe
        }
        _ => ce,
    }
}

fn uniform_cross_entropy(log_probs: &[f64]) -> f64 {
    -log_probs.iter().sum::<f64>() / log_probs.len() as f64
}

pub(crate) fn accuracy(model: &Mlp, data: &LabeledDataset) -> f64 {
    let hits = data
        .points
        .iter()
        .zip(&data.labels)
        .filter(|(x, &y)| argmax(&model.forward_unchecked(x)) == y)
        .count();
    hits as f64 / data.len().max(1) as f64
}

/// Cross-entropy training, optionally with outlier exposure.
///
/// With `ood` supplied and `cfg.oe_weight > 0`, every ID minibatch is paired
/// with an equally sized outlier minibatch whose loss is the cross-entropy to
/// the uniform distribution over the `class_count` classes, weighted by λ.
pub fn train_classifier(
    data: &LabeledDataset,
    class_count: usize,
    cfg: &TrainConfig,
    ood: Option<&OodDataset>,
) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("training data is empty"));
    }
    if class_count < 2 {
        return Err(Error::domain("classifier needs at least two classes"));
    }
    data.validate(class_count)?;
    let ood = ood.filter(|o| cfg.oe_weight > 0.0 && !o.is_empty());
    if let Some(o) = ood {
        crate::error::check_dim(data.dim, o.dim)?;
    }

    let root = RngStream::new(cfg.seed);
    let mut model = Mlp::init(&cfg.layer_sizes(data.dim, class_count), &root.derive(0))?;
    let initial_loss = full_loss(&model, data, ood, cfg.oe_weight);
    let mut sgd = Sgd::new(&model, cfg.learning_rate, cfg.momentum);
    let mut grads = model.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let uniform = 1.0 / class_count as f64;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut root.derive(1).derive(epoch as u64).rng());
        let mut ood_rng = root.derive(2).derive(epoch as u64).rng();
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            zero_grads(&mut grads);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let trace = model.forward_trace(&data.points[i])?;
                let mut g = softmax(trace.output(), 1.0);
                let y = data.labels[i];
                epoch_loss -= log_softmax(trace.output())[y] * scale;
                g[y] -= 1.0;
                g.iter_mut().for_each(|v| *v *= scale);
                model.backward(&trace, &g, Some(&mut grads));
            }
            if let Some(o) = ood {
                let w = cfg.oe_weight * scale;
                for _ in 0..batch.len() {
                    let x = &o.points[ood_rng.random_range(0..o.len())];
                    let trace = model.forward_trace(x)?;
                    let p = softmax(trace.output(), 1.0);
                    epoch_loss += w * uniform_cross_entropy(&log_softmax(trace.output()));
                    let g: Vec<f64> = p.iter().map(|pk| w * (pk - uniform)).collect();
                    model.backward(&trace, &g, Some(&mut grads));
                }
            }
            sgd.step(&mut model, &grads);
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}")));
        }
    }
    let final_loss = full_loss(&model, data, ood, cfg.oe_weight);
    if !final_loss.is_finite() {
        return Err(Error::Numeric(format!("training diverged at epoch {}", cfg.epochs - 1)));
    }
    log::debug!("classifier loss {initial_loss:.4} -> {final_loss:.4}");
    Ok(Trained {
        report: TrainReport {
            initial_loss,
            final_loss,
            train_accuracy: accuracy(&model, data),
        },
        model,
    })
}
