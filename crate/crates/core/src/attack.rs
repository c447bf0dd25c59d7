//! ℓ∞ PGD with momentum and backtracking over an ensemble of starting points.
//!
//! Step sizes are fractions of ε: an iteration moves by `step · ε` along the
//! sign of the momentum buffer, then projects onto the ε-ball around the
//! attacked point intersected with the data box `[-B, B]^d`. A step is kept
//! only if it raises the score (the step then grows); otherwise it shrinks.
//!
//! Score functions receive a [`RngStream`] alongside the input. It is fixed
//! for a whole trajectory, which freezes any internal noise per restart. The
//! final start is the clean point itself, scored with the caller's stream,
//! so the returned score is never below `score_fn(z, stream)`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::neuralnet::{argmax, Mlp};
use crate::numerics::{fill_gaussian, RngStream, Vector};
use crate::synthdata::LabeledDataset;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub momentum: f64,
    pub initial_step: f64,
    pub shrink: f64,
    pub grow: f64,
    pub uniform_starts: usize,
    pub gaussian_starts: usize,
    pub gaussian_start_sigma: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            steps: 200,
            momentum: 0.9,
            initial_step: 0.1,
            shrink: 0.5,
            grow: 1.1,
            uniform_starts: 3,
            gaussian_starts: 3,
            gaussian_start_sigma: 1e-4,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::domain(format!("attack epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0 && self.grow > 1.0) {
            return Err(Error::domain("attack needs 0 < shrink < 1 < grow"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain("attack momentum must lie in [0, 1)"));
        }
        if !(self.initial_step > 0.0) || !(self.gaussian_start_sigma >= 0.0) {
            return Err(Error::domain("attack step and jitter must be positive"));
        }
        Ok(())
    }
}

/// Projection onto `{‖x − z‖∞ ≤ ε} ∩ [-B, B]^d`.
pub fn project(x: &mut [f64], z: &[f64], epsilon: f64, box_half: f64) {
    for (v, c) in x.iter_mut().zip(z) {
        let lo = (c - epsilon).max(-box_half);
        let hi = (c + epsilon).min(box_half);
        *v = v.clamp(lo, hi);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_inside(z: &[f64], box_half: f64) -> Result<()> {
    if z.iter().any(|v| !v.is_finite() || v.abs() > box_half) {
        return Err(Error::domain("attacked point lies outside the data box"));
    }
    Ok(())
}

/// Decontrasted start, uniform starts, Gaussian-jittered starts, then `z`.
pub fn starting_points(
    z: &[f64],
    epsilon: f64,
    box_half: f64,
    cfg: &AttackConfig,
    stream: &RngStream,
) -> Result<Vec<Vector>> {
    check_inside(z, box_half)?;
    let mut starts = Vec::with_capacity(cfg.uniform_starts + cfg.gaussian_starts + 2);
    // box center 0 projected onto the feasible set
    let mut center = vec![0.0; z.len()];
    project(&mut center, z, epsilon, box_half);
    starts.push(center);
    for j in 0..cfg.uniform_starts {
        let mut rng = stream.derive(1 + j as u64).rng();
        let mut p: Vector = z
            .iter()
            .map(|c| if epsilon > 0.0 { c + rng.random_range(-epsilon..=epsilon) } else { *c })
            .collect();
        project(&mut p, z, epsilon, box_half);
        starts.push(p);
    }
    for j in 0..cfg.gaussian_starts {
        let mut rng = stream.derive(1 + (cfg.uniform_starts + j) as u64).rng();
        let mut p = vec![0.0; z.len()];
        fill_gaussian(&mut rng, &mut p, cfg.gaussian_start_sigma);
        p.iter_mut().zip(z).for_each(|(v, c)| *v += c);
        project(&mut p, z, epsilon, box_half);
        starts.push(p);
    }
    starts.push(z.to_vec());
    Ok(starts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub point: Vector,
    pub score: f64,
    /// Index into [`starting_points`] of the winning trajectory.
    pub start: usize,
    /// Best score after each iteration of the winning trajectory.
    pub history: Vec<f64>,
}

fn trajectory<S>(
    score_fn: &S,
    z: &[f64],
    start: Vector,
    cfg: &AttackConfig,
    box_half: f64,
    stream: &RngStream,
) -> Result<(Vector, f64, Vec<f64>)>
where
    S: Fn(&[f64], &RngStream) -> Result<(f64, Vector)>,
{
    let mut x = start;
    let (mut f, mut g) = score_fn(&x, stream)?;
    check_dim(x.len(), g.len())?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite score or gradient".into()));
    }
    let mut velocity = vec![0.0; x.len()];
    let mut step = cfg.initial_step;
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        if cfg.epsilon == 0.0 || step * cfg.epsilon < 1e-12 {
            break;
        }
        let l1: f64 = g.iter().map(|v| v.abs()).sum();
        if l1 > 0.0 {
            velocity.iter_mut().zip(&g).for_each(|(v, gi)| *v = cfg.momentum * *v + gi / l1);
        } else {
            velocity.iter_mut().for_each(|v| *v *= cfg.momentum);
        }
        let mut cand: Vector = x
            .iter()
            .zip(&velocity)
            .map(|(xi, v)| xi + step * cfg.epsilon * sign(*v))
            .collect();
        project(&mut cand, z, cfg.epsilon, box_half);
        let (fc, gc) = score_fn(&cand, stream)?;
        if !fc.is_finite() || gc.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite score or gradient".into()));
        }
        if fc > f {
            x = cand;
            f = fc;
            g = gc;
            step *= cfg.grow;
        } else {
            step *= cfg.shrink;
        }
        history.push(f);
    }
    Ok((x, f, history))
}

/// Maximize `score_fn` over the ε-ball around `z` intersected with the data box.
///
/// Start `j` uses the frozen stream `stream.derive(j).derive(0)` except the
/// final (clean) start, which uses `stream` itself.
pub fn pgd_maximize<S>(score_fn: &S, z: &[f64], cfg: &AttackConfig, box_half: f64, stream: &RngStream) -> Result<AttackResult>
where
    S: Fn(&[f64], &RngStream) -> Result<(f64, Vector)>,
{
    cfg.validate()?;
    let starts = starting_points(z, cfg.epsilon, box_half, cfg, stream)?;
    let last = starts.len() - 1;
    let mut best: Option<AttackResult> = None;
    for (j, start) in starts.into_iter().enumerate() {
        let s = if j == last { stream.clone() } else { stream.derive(j as u64).derive(0) };
        let (point, score, history) = trajectory(score_fn, z, start, cfg, box_half, &s).map_err(|e| {
            Error::Numeric(format!("attack start {j} failed: {e}"))
        })?;
        // ties keep the clean start so ε = 0 reproduces the clean score
        if best.as_ref().is_none_or(|b| score > b.score || (score == b.score && j == last)) {
            best = Some(AttackResult {
                point,
                score,
                start: j,
                history,
            });
        }
    }
    Ok(best.expect("at least one start"))
}

/// `max_{c≠y} logit_c − logit_y` and its input gradient.
pub fn negative_margin(model: &Mlp, x: &[f64], label: usize) -> Result<(f64, Vector)> {
    let logits = model.forward(x)?;
    if label >= logits.len() || logits.len() < 2 {
        return Err(Error::domain("label out of range for margin"));
    }
    let other = (0..logits.len())
        .filter(|&c| c != label)
        .max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)))
        .expect("two classes");
    let mut grad_out = vec![0.0; logits.len()];
    grad_out[other] = 1.0;
    grad_out[label] = -1.0;
    Ok((logits[other] - logits[label], model.vjp_input(x, &grad_out)?))
}

/// Fraction of points still classified correctly after a margin attack.
pub fn attack_id_accuracy(
    model: &Mlp,
    data: &LabeledDataset,
    cfg: &AttackConfig,
    box_half: f64,
    stream: &RngStream,
) -> Result<f64> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("attack_id_accuracy needs data"));
    }
    let survived: Vec<bool> = data
        .points
        .par_iter()
        .zip(data.labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let clean = model.forward(x)?;
            if argmax(&clean) != y {
                return Ok(false);
            }
            if cfg.epsilon == 0.0 {
                return Ok(true);
            }
            let score = |p: &[f64], _: &RngStream| negative_margin(model, p, y);
            let res = pgd_maximize(&score, x, cfg, box_half, &stream.derive(i as u64))?;
            Ok(argmax(&model.forward(&res.point)?) == y)
        })
        .collect::<Result<_>>()?;
    Ok(survived.iter().filter(|s| **s).count() as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::Dense;
    use crate::numerics::gaussian_noise;
    use crate::synthdata::{sample_id, MixtureSpec};

    fn linear(w: Vec<f64>) -> impl Fn(&[f64], &RngStream) -> Result<(f64, Vector)> {
        move |x: &[f64], _: &RngStream| Ok((w.iter().zip(x).map(|(a, b)| a * b).sum(), w.clone()))
    }

    #[test]
    fn starting_point_rules() {
        let cfg = AttackConfig::default();
        let z = [0.5, -1.0, 2.0];
        let starts = starting_points(&z, 0.0, 6.0, &cfg, &RngStream::new(1)).unwrap();
        assert_eq!(starts.len(), 8);
        assert!(starts.iter().all(|s| s == &z.to_vec()));

        let origin = [0.0, 0.0];
        assert_eq!(starting_points(&origin, 0.3, 6.0, &cfg, &RngStream::new(1)).unwrap()[0], vec![0.0, 0.0]);

        for i in 0..50u64 {
            let z = gaussian_noise(&RngStream::with_substream(2, i), 3, 2.5).unwrap();
            let z: Vec<f64> = z.iter().map(|v| v.clamp(-6.0, 6.0)).collect();
            for eps in [1e-5, 0.1, 1.0] {
                for p in starting_points(&z, eps, 6.0, &cfg, &RngStream::new(i)).unwrap() {
                    for (a, b) in p.iter().zip(&z) {
                        assert!((a - b).abs() <= eps + 1e-12 && a.abs() <= 6.0);
                    }
                }
            }
        }
        assert!(starting_points(&[7.0], 0.1, 6.0, &cfg, &RngStream::new(1)).is_err());
    }

    #[test]
    fn zero_gradient_returns_a_start() {
        let flat = |_: &[f64], _: &RngStream| Ok((1.0, vec![0.0, 0.0]));
        let z = [0.2, 0.3];
        let r = pgd_maximize(&flat, &z, &AttackConfig::default(), 6.0, &RngStream::new(3)).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.point, z.to_vec());
    }

    #[test]
    fn linear_score_reaches_corner() {
        let cfg = AttackConfig::with_epsilon(0.1);
        for i in 0..20u64 {
            let w = gaussian_noise(&RngStream::with_substream(4, i), 4, 1.0).unwrap();
            let z = gaussian_noise(&RngStream::with_substream(5, i), 4, 1.0).unwrap();
            let r = pgd_maximize(&linear(w.clone()), &z, &cfg, 6.0, &RngStream::new(i)).unwrap();
            let corner: Vec<f64> = z.iter().zip(&w).map(|(a, b)| a + 0.1 * b.signum()).collect();
            let opt: f64 = w.iter().zip(&corner).map(|(a, b)| a * b).sum();
            assert!(r.point.iter().zip(&corner).all(|(a, b)| (a - b).abs() < 1e-6));
            assert!((r.score - opt).abs() < 1e-9);
            assert!(r.history.windows(2).all(|h| h[1] >= h[0]));
        }
    }

    #[test]
    fn best_never_below_clean() {
        // rugged score: the attack may fail to improve but never loses the clean value
        let rugged = |x: &[f64], _: &RngStream| {
            let f = (5.0 * x[0]).sin() * (3.0 * x[1]).cos();
            Ok((f, vec![5.0 * (5.0 * x[0]).cos() * (3.0 * x[1]).cos(), -3.0 * (5.0 * x[0]).sin() * (3.0 * x[1]).sin()]))
        };
        for i in 0..30u64 {
            let z = gaussian_noise(&RngStream::with_substream(6, i), 2, 1.0).unwrap();
            let clean = rugged(&z, &RngStream::new(0)).unwrap().0;
            let r = pgd_maximize(&rugged, &z, &AttackConfig::with_epsilon(0.2), 6.0, &RngStream::new(i)).unwrap();
            assert!(r.score >= clean);
        }
    }

    #[test]
    fn errors_name_the_start() {
        let bad = |x: &[f64], _: &RngStream| Ok((x[0], vec![f64::NAN]));
        match pgd_maximize(&bad, &[0.1], &AttackConfig::default(), 6.0, &RngStream::new(1)) {
            Err(Error::Numeric(m)) => assert!(m.contains("start 0"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn id_accuracy_rules() {
        let spec = MixtureSpec::circle(2, 2, 2.0, 0.15).unwrap();
        let data = sample_id(&spec, 200, 6.0, &RngStream::new(8)).unwrap();
        // linear two-class model separating along the first axis
        let (w0, w1, b0, b1) = ([-1.3, 0.2], [0.9, -0.4], 0.1, -0.05);
        let model = Mlp::new(vec![Dense::new(2, 2, vec![w0[0], w0[1], w1[0], w1[1]], vec![b0, b1]).unwrap()]).unwrap();
        let clean = data
            .points
            .iter()
            .zip(&data.labels)
            .filter(|(x, &y)| argmax(&model.forward(x).unwrap()) == y)
            .count() as f64
            / 200.0;
        let acc0 = attack_id_accuracy(&model, &data, &AttackConfig::with_epsilon(0.0), 6.0, &RngStream::new(1)).unwrap();
        assert_eq!(acc0, clean);
        let mut prev = acc0;
        for eps in [0.05, 0.1, 0.5] {
            let cfg = AttackConfig {
                steps: 60,
                ..AttackConfig::with_epsilon(eps)
            };
            let acc = attack_id_accuracy(&model, &data, &cfg, 6.0, &RngStream::new(1)).unwrap();
            assert!(acc <= prev);
            prev = acc;
            // closed form: survives iff its margin exceeds ε‖w_y − w_other‖₁
            let robust = data
                .points
                .iter()
                .zip(&data.labels)
                .filter(|(x, &y)| {
                    let (wy, wo, by, bo) = if y == 0 { (w0, w1, b0, b1) } else { (w1, w0, b1, b0) };
                    let margin = (wy[0] - wo[0]) * x[0] + (wy[1] - wo[1]) * x[1] + by - bo;
                    margin > eps * ((wy[0] - wo[0]).abs() + (wy[1] - wo[1]).abs())
                })
                .count() as f64
                / 200.0;
            assert_eq!(acc, robust, "eps {eps}");
        }
    }
}
