//! Interval bound propagation (IBP) through ReLU networks.
//!
//! Boxes are propagated in lower/upper form: for an affine layer,
//! `l' = W⁺l + W⁻u + b` and `u' = W⁺u + W⁻l + b`, which is the same box as
//! the center/radius form `μ = Wc + b`, `r' = |W|r`. Accumulation follows the
//! order of [`Mlp::forward`], so a degenerate box reproduces the forward pass
//! bit for bit.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::neuralnet::{Dense, Mlp, Sgd, TrainConfig, TrainReport, Trained};
use crate::numerics::{sigmoid, softplus, RngStream, Vector};
use crate::synthdata::{LabeledDataset, OodDataset};

/// Elementwise bounds `lower <= x <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBox {
    pub lower: Vector,
    pub upper: Vector,
}

impl IntervalBox {
    pub fn new(lower: Vector, upper: Vector) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::domain("interval box needs lower <= upper"));
        }
        Ok(Self { lower, upper })
    }

    pub fn point(x: &[f64]) -> Self {
        Self {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    /// `{x : ‖x - z‖∞ <= eps}`
    pub fn linf_ball(z: &[f64], eps: f64) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::domain(format!("epsilon must be >= 0, got {eps}")));
        }
        Ok(Self {
            lower: z.iter().map(|v| v - eps).collect(),
            upper: z.iter().map(|v| v + eps).collect(),
        })
    }

    /// Intersection with the data box `[-half, half]^d`.
    pub fn clip(mut self, half: f64) -> Self {
        for (l, u) in self.lower.iter_mut().zip(self.upper.iter_mut()) {
            *l = l.clamp(-half, half);
            *u = u.clamp(-half, half);
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vector {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn radius(&self) -> Vector {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }
}

fn affine_bounds(layer: &Dense, lower: &[f64], upper: &[f64]) -> (Vector, Vector) {
    let mut lo = Vec::with_capacity(layer.out_dim);
    let mut hi = Vec::with_capacity(layer.out_dim);
    for i in 0..layer.out_dim {
        let (mut a, mut b) = (layer.bias[i], layer.bias[i]);
        for ((w, l), u) in layer.row(i).iter().zip(lower).zip(upper) {
            if *w >= 0.0 {
                a += w * l;
                b += w * u;
            } else {
                a += w * u;
                b += w * l;
            }
        }
        lo.push(a);
        hi.push(b);
    }
    (lo, hi)
}

pub fn propagate_affine(input: &IntervalBox, layer: &Dense) -> Result<IntervalBox> {
    check_dim(layer.in_dim, input.dim())?;
    let (lower, upper) = affine_bounds(layer, &input.lower, &input.upper);
    Ok(IntervalBox { lower, upper })
}

pub fn propagate_relu(input: &IntervalBox) -> IntervalBox {
    IntervalBox {
        lower: input.lower.iter().map(|v| v.max(0.0)).collect(),
        upper: input.upper.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Output box of the whole network.
pub fn propagate_network(model: &Mlp, input: &IntervalBox) -> Result<IntervalBox> {
    let last = model.layers().len() - 1;
    let mut b = input.clone();
    for (l, layer) in model.layers().iter().enumerate() {
        b = propagate_affine(&b, layer)?;
        if l < last {
            b = propagate_relu(&b);
        }
    }
    Ok(b)
}

/// Sound upper bound on the discriminator logit over the ℓ∞ ball of radius
/// `epsilon` around `z`, intersected with the data box `[-box_half, box_half]^d`.
pub fn discriminator_upper_logit(model: &Mlp, z: &[f64], epsilon: f64, box_half: f64) -> Result<f64> {
    if model.output_dim() != 1 {
        return Err(Error::domain("discriminator must have a single output"));
    }
    check_dim(model.input_dim(), z.len())?;
    let input = IntervalBox::linf_ball(z, epsilon)?.clip(box_half);
    Ok(propagate_network(model, &input)?.upper[0])
}

struct BoundTrace {
    /// Box fed into each layer.
    inputs: Vec<(Vector, Vector)>,
    /// Pre-activation box of each layer.
    pre: Vec<(Vector, Vector)>,
}

fn bound_trace(model: &Mlp, input: &IntervalBox) -> BoundTrace {
    let last = model.layers().len() - 1;
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    let (mut l, mut u) = (input.lower.clone(), input.upper.clone());
    for (k, layer) in model.layers().iter().enumerate() {
        let (pl, pu) = affine_bounds(layer, &l, &u);
        inputs.push((l, u));
        l = pl.clone();
        u = pu.clone();
        if k < last {
            l.iter_mut().for_each(|v| *v = v.max(0.0));
            u.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        pre.push((pl, pu));
    }
    BoundTrace { inputs, pre }
}

/// Backpropagate `(dL/dlower_out, dL/dupper_out)` through the bound network,
/// accumulating parameter gradients.
fn bound_backward(model: &Mlp, trace: &BoundTrace, mut gl: Vector, mut gu: Vector, grads: &mut [Dense]) {
    let n = model.layers().len();
    for k in (0..n).rev() {
        if k + 1 < n {
            let (pl, pu) = &trace.pre[k];
            for i in 0..gl.len() {
                if pl[i] <= 0.0 {
                    gl[i] = 0.0;
                }
                if pu[i] <= 0.0 {
                    gu[i] = 0.0;
                }
            }
        }
        let layer = &model.layers()[k];
        let (il, iu) = &trace.inputs[k];
        let acc = &mut grads[k];
        let mut next_gl = vec![0.0; layer.in_dim];
        let mut next_gu = vec![0.0; layer.in_dim];
        for i in 0..layer.out_dim {
            let (a, b) = (gl[i], gu[i]);
            acc.bias[i] += a + b;
            if a == 0.0 && b == 0.0 {
                continue;
            }
            let row = layer.row(i);
            let grow = &mut acc.weights[i * layer.in_dim..(i + 1) * layer.in_dim];
            for j in 0..layer.in_dim {
                let w = row[j];
                if w >= 0.0 {
                    grow[j] += a * il[j] + b * iu[j];
                    next_gl[j] += a * w;
                    next_gu[j] += b * w;
                } else {
                    grow[j] += a * iu[j] + b * il[j];
                    next_gl[j] += b * w;
                    next_gu[j] += a * w;
                }
            }
        }
        gl = next_gl;
        gu = next_gu;
    }
}

/// Certified binary cross-entropy of the discriminator and its parameter
/// gradient.
///
/// In-distribution points use the plain logit with target 1; OOD points use
/// the IBP upper logit over their ε-ball (clipped to the data box) with
/// target 0. The two terms are batch means, summed.
pub fn ibp_training_loss(
    model: &Mlp,
    id_batch: &[Vector],
    ood_batch: &[Vector],
    epsilon: f64,
    box_half: f64,
) -> Result<(f64, Vec<Dense>)> {
    if id_batch.is_empty() || ood_batch.is_empty() {
        return Err(Error::domain("ibp_training_loss needs non-empty batches"));
    }
    if model.output_dim() != 1 {
        return Err(Error::domain("discriminator must have a single output"));
    }
    let mut grads = model.zeros_like();
    let mut loss = 0.0;
    let s_id = 1.0 / id_batch.len() as f64;
    for x in id_batch {
        let trace = model.forward_trace(x)?;
        let g = trace.output()[0];
        loss += s_id * softplus(-g);
        model.backward(&trace, &[-(1.0 - sigmoid(g)) * s_id], Some(&mut grads));
    }
    let s_ood = 1.0 / ood_batch.len() as f64;
    for z in ood_batch {
        check_dim(model.input_dim(), z.len())?;
        let input = IntervalBox::linf_ball(z, epsilon)?.clip(box_half);
        let trace = bound_trace(model, &input);
        let upper = trace.pre.last().expect("non-empty").1[0];
        loss += s_ood * softplus(upper);
        bound_backward(model, &trace, vec![0.0], vec![sigmoid(upper) * s_ood], &mut grads);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite IBP training loss".into()));
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub train: TrainConfig,
    /// Target ℓ∞ radius, reached by a linear ramp over the first half of training.
    pub epsilon: f64,
    pub box_half: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 100,
                learning_rate: 0.01,
                hidden: vec![32, 32],
                oe_weight: 0.0,
                ..TrainConfig::default()
            },
            epsilon: 0.1,
            box_half: 6.0,
        }
    }
}

/// Train a single-logit discriminator with the certified loss. Each epoch
/// walks the in-distribution points in shuffled minibatches and pairs each
/// with an equally sized minibatch drawn from `ood`.
pub fn train_discriminator(id: &LabeledDataset, ood: &OodDataset, cfg: &DiscriminatorConfig) -> Result<Trained> {
    cfg.train.validate()?;
    if id.is_empty() || ood.is_empty() {
        return Err(Error::domain("discriminator training needs ID and OOD data"));
    }
    check_dim(id.dim, ood.dim)?;
    let tc = &cfg.train;
    let root = RngStream::new(tc.seed);
    let mut model = Mlp::init(&tc.layer_sizes(id.dim, 1), &root.derive(0))?;
    let eval_loss = |m: &Mlp, eps: f64| ibp_training_loss(m, &id.points, &ood.points, eps, cfg.box_half).map(|r| r.0);
    let initial_loss = eval_loss(&model, cfg.epsilon)?;
    let mut sgd = Sgd::new(&model, tc.learning_rate, tc.momentum);
    let mut order: Vec<usize> = (0..id.len()).collect();
    let batches_per_epoch = id.len().div_ceil(tc.batch_size);
    let ramp_steps = ((tc.epochs * batches_per_epoch) / 2).max(1);
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut root.derive(1).derive(epoch as u64).rng());
        let mut ood_rng = root.derive(2).derive(epoch as u64).rng();
        for batch in order.chunks(tc.batch_size) {
            let eps = cfg.epsilon * (step as f64 / ramp_steps as f64).min(1.0);
            let id_batch: Vec<Vector> = batch.iter().map(|&i| id.points[i].clone()).collect();
            let ood_batch: Vec<Vector> = (0..batch.len())
                .map(|_| ood.points[ood_rng.random_range(0..ood.len())].clone())
                .collect();
            let (loss, grads) = ibp_training_loss(&model, &id_batch, &ood_batch, eps, cfg.box_half)
                .map_err(|e| match e {
                    Error::Numeric(_) => Error::Numeric(format!("discriminator training diverged at epoch {epoch}")),
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("discriminator training diverged at epoch {epoch}")));
            }
            sgd.step(&mut model, &grads);
            step += 1;
        }
    }
    let final_loss = eval_loss(&model, cfg.epsilon)?;
    let correct = id
        .points
        .iter()
        .filter(|x| model.forward_unchecked(x)[0] > 0.0)
        .count()
        + ood
            .points
            .iter()
            .filter(|x| model.forward_unchecked(x)[0] <= 0.0)
            .count();
    Ok(Trained {
        report: TrainReport {
            initial_loss,
            final_loss,
            train_accuracy: correct as f64 / (id.len() + ood.len()) as f64,
        },
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_noise;

    fn disc(seed: u64) -> Mlp {
        let mut m = Mlp::init(&[2, 12, 12, 1], &RngStream::new(seed)).unwrap();
        for (k, l) in m.layers_mut().iter_mut().enumerate() {
            l.bias = gaussian_noise(&RngStream::with_substream(seed, 50 + k as u64), l.out_dim, 0.5).unwrap();
        }
        m
    }

    #[test]
    fn affine_examples() {
        let b = IntervalBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let layer = Dense::new(2, 1, vec![1.0, -1.0], vec![0.0]).unwrap();
        let out = propagate_affine(&b, &layer).unwrap();
        assert_eq!((out.lower[0], out.upper[0]), (-1.0, 1.0));
        // center/radius form gives the same box
        assert_eq!(out.center(), vec![0.0]);
        assert_eq!(out.radius(), vec![1.0]);

        let id = Dense::new(2, 2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
        let b2 = IntervalBox::new(vec![-0.5, 2.0], vec![0.25, 3.0]).unwrap();
        assert_eq!(propagate_affine(&b2, &id).unwrap(), b2);

        let x = [0.3, -0.7];
        let l = Dense::new(2, 3, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.0], vec![0.1, 0.2, -0.3]).unwrap();
        let p = propagate_affine(&IntervalBox::point(&x), &l).unwrap();
        let y = l.apply(&x);
        assert_eq!(p.lower, y);
        assert_eq!(p.upper, y);
        assert!(propagate_affine(&IntervalBox::point(&[1.0]), &l).is_err());
    }

    #[test]
    fn relu_examples() {
        let r = propagate_relu(&IntervalBox::new(vec![-1.0], vec![1.0]).unwrap());
        assert_eq!((r.lower[0], r.upper[0]), (0.0, 1.0));
        let pos = IntervalBox::new(vec![0.5, 1.0], vec![2.0, 3.0]).unwrap();
        assert_eq!(propagate_relu(&pos), pos);
        let neg = propagate_relu(&IntervalBox::new(vec![-3.0], vec![-1.0]).unwrap());
        assert_eq!((neg.lower[0], neg.upper[0]), (0.0, 0.0));
    }

    #[test]
    fn zero_epsilon_is_forward() {
        let m = disc(3);
        for i in 0..20 {
            let z = gaussian_noise(&RngStream::with_substream(2, i), 2, 2.0).unwrap();
            assert_eq!(discriminator_upper_logit(&m, &z, 0.0, 6.0).unwrap(), m.forward(&z).unwrap()[0]);
        }
    }

    #[test]
    fn nonnegative_weights_are_exact() {
        let layer = Dense::new(3, 2, vec![0.5, 1.0, 0.0, 2.0, 0.25, 3.0], vec![0.1, -0.2]).unwrap();
        let b = IntervalBox::new(vec![-1.0, 0.0, 2.0], vec![1.0, 0.5, 4.0]).unwrap();
        let out = propagate_affine(&b, &layer).unwrap();
        assert_eq!(out.upper, layer.apply(&b.upper));
        assert_eq!(out.lower, layer.apply(&b.lower));
    }

    #[test]
    fn sound_over_corners_and_samples() {
        let m = disc(8);
        for i in 0..20u64 {
            let z = gaussian_noise(&RngStream::with_substream(4, i), 2, 2.0).unwrap();
            for eps in [0.05, 0.3, 1.0] {
                let ub = discriminator_upper_logit(&m, &z, eps, 6.0).unwrap();
                let mut rng = RngStream::with_substream(5, i).rng();
                for s in 0..2000 {
                    let x: Vec<f64> = if s < 4 {
                        vec![
                            z[0] + if s & 1 == 0 { -eps } else { eps },
                            z[1] + if s & 2 == 0 { -eps } else { eps },
                        ]
                    } else {
                        z.iter().map(|v| v + rng.random_range(-eps..=eps)).collect()
                    };
                    assert!(m.forward(&x).unwrap()[0] <= ub + 1e-12);
                }
            }
        }
    }

    #[test]
    fn monotone_in_epsilon() {
        let m = disc(9);
        let z = [1.1, -0.4];
        let mut prev = f64::NEG_INFINITY;
        for k in 0..20 {
            let ub = discriminator_upper_logit(&m, &z, k as f64 * 0.05, 6.0).unwrap();
            assert!(ub >= prev);
            prev = ub;
        }
    }

    #[test]
    fn loss_reduces_to_bce_and_grows_with_epsilon() {
        let m = disc(10);
        let id: Vec<Vector> = (0..8).map(|i| gaussian_noise(&RngStream::with_substream(1, i), 2, 1.0).unwrap()).collect();
        let ood: Vec<Vector> = (0..8).map(|i| gaussian_noise(&RngStream::with_substream(2, i), 2, 3.0).unwrap()).collect();
        let (l0, _) = ibp_training_loss(&m, &id, &ood, 0.0, 6.0).unwrap();
        let bce: f64 = id.iter().map(|x| softplus(-m.forward(x).unwrap()[0])).sum::<f64>() / 8.0
            + ood
                .iter()
                .map(|x| {
                    let c: Vec<f64> = x.iter().map(|v| v.clamp(-6.0, 6.0)).collect();
                    softplus(m.forward(&c).unwrap()[0])
                })
                .sum::<f64>()
                / 8.0;
        assert!((l0 - bce).abs() < 1e-12);
        let mut prev = l0;
        for eps in [0.05, 0.1, 0.5] {
            let (l, _) = ibp_training_loss(&m, &id, &ood, eps, 6.0).unwrap();
            assert!(l >= prev);
            prev = l;
        }
        assert!(ibp_training_loss(&m, &[], &ood, 0.1, 6.0).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let m = disc(12);
        let id: Vec<Vector> = (0..5).map(|i| gaussian_noise(&RngStream::with_substream(7, i), 2, 1.0).unwrap()).collect();
        let ood: Vec<Vector> = (0..5).map(|i| gaussian_noise(&RngStream::with_substream(8, i), 2, 3.0).unwrap()).collect();
        let eps = 0.2;
        let (_, grads) = ibp_training_loss(&m, &id, &ood, eps, 6.0).unwrap();
        let h = 1e-6;
        for k in 0..m.layers().len() {
            for idx in [0usize, 3, 7] {
                let n_w = m.layers()[k].weights.len();
                let idx = idx % n_w;
                let mut mp = m.clone();
                let mut mm = m.clone();
                mp.layers_mut()[k].weights[idx] += h;
                mm.layers_mut()[k].weights[idx] -= h;
                let fd = (ibp_training_loss(&mp, &id, &ood, eps, 6.0).unwrap().0
                    - ibp_training_loss(&mm, &id, &ood, eps, 6.0).unwrap().0)
                    / (2.0 * h);
                let g = grads[k].weights[idx];
                assert!((fd - g).abs() <= 1e-5 * (1.0 + g.abs()), "layer {k} w{idx}: {fd} vs {g}");
            }
            let mut mp = m.clone();
            let mut mm = m.clone();
            mp.layers_mut()[k].bias[0] += h;
            mm.layers_mut()[k].bias[0] -= h;
            let fd = (ibp_training_loss(&mp, &id, &ood, eps, 6.0).unwrap().0
                - ibp_training_loss(&mm, &id, &ood, eps, 6.0).unwrap().0)
                / (2.0 * h);
            let g = grads[k].bias[0];
            assert!((fd - g).abs() <= 1e-5 * (1.0 + g.abs()), "layer {k} bias: {fd} vs {g}");
        }
    }
}
