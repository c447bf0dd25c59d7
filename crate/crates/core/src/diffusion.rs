//! Forward diffusion with a cosine schedule and a one-shot denoiser.
//!
//! The denoiser takes `x_t = √ᾱ_t (x + δ)` in the scaled domain and returns
//! an estimate of the clean `x`. Internally it works on the unscaled
//! observation `y = x_t / √ᾱ_t = x + δ` with effective noise variance
//! `s² = (1 − ᾱ_t) / ᾱ_t` per coordinate.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::neuralnet::{Mlp, Sgd, TrainConfig, TrainReport, Trained};
use crate::numerics::{gaussian_noise, RngStream, Vector};
use crate::synthdata::{sq_dist, LabeledDataset, MixtureSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct CosineSchedule {
    steps: usize,
    offset: f64,
    alpha_bar: Vec<f64>,
}

impl Default for CosineSchedule {
    fn default() -> Self {
        Self::new(1000, 0.008).expect("valid default schedule")
    }
}

impl CosineSchedule {
    /// `ᾱ[t] = f(t) / f(0)`, `f(t) = cos²(((t/T + s) / (1 + s)) · π/2)`.
    pub fn new(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::domain("schedule needs at least one step"));
        }
        if !(offset > 0.0) || !offset.is_finite() {
            return Err(Error::domain("schedule offset must be > 0"));
        }
        let f = |t: usize| {
            let c = ((t as f64 / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos();
            c * c
        };
        let f0 = f(0);
        let alpha_bar = (0..=steps).map(|t| f(t) / f0).collect();
        Ok(Self {
            steps,
            offset,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `(1 − ᾱ[t]) / ᾱ[t]`, the per-coordinate noise variance in the unscaled domain.
    pub fn noise_ratio(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]) / self.alpha_bar[t]
    }
}

/// Timestep whose noise ratio is closest to `sigma²`.
pub fn find_timestep(schedule: &CosineSchedule, sigma: f64) -> Result<usize> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("sigma must be >= 0, got {sigma}")));
    }
    let target = sigma * sigma;
    if target > schedule.noise_ratio(schedule.steps) {
        return Err(Error::domain(format!("sigma {sigma} exceeds the schedule's noise range")));
    }
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for t in 0..=schedule.steps {
        let gap = (schedule.noise_ratio(t) - target).abs();
        if gap < best_gap {
            best = t;
            best_gap = gap;
        }
    }
    Ok(best)
}

/// Scale an already-noised input `x + δ` into the diffusion domain at step `t`.
pub fn scale_to_timestep(noisy: &[f64], t: usize, schedule: &CosineSchedule) -> Vector {
    let s = schedule.alpha_bar(t).sqrt();
    noisy.iter().map(|v| s * v).collect()
}

/// `x_t = √ᾱ[t*] (x + δ)` with `δ ~ N(0, σ²I)` drawn from `stream`.
pub fn noise_and_scale(x: &[f64], sigma: f64, schedule: &CosineSchedule, stream: &RngStream) -> Result<(Vector, usize)> {
    let t = find_timestep(schedule, sigma)?;
    let delta = gaussian_noise(stream, x.len(), sigma)?;
    let noisy: Vector = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
    Ok((scale_to_timestep(&noisy, t, schedule), t))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserSpec {
    /// Exact posterior mean under a Gaussian-mixture prior.
    AnalyticMixture(MixtureSpec),
    /// Network mapping `[x_t, t/T]` to a correction added to `x_t / √ᾱ_t`.
    Learned(Mlp),
}

impl DenoiserSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            DenoiserSpec::AnalyticMixture(prior) => {
                prior.validate()?;
                check_dim(dim, prior.dim)
            }
            DenoiserSpec::Learned(model) => {
                check_dim(dim + 1, model.input_dim())?;
                check_dim(dim, model.output_dim())
            }
        }
    }
}

/// Posterior mean `E[x | y]` for `y = x + N(0, s2·I)` under the mixture prior.
pub fn posterior_mean(prior: &MixtureSpec, y: &[f64], s2: f64) -> Vector {
    if s2 == 0.0 {
        return y.to_vec();
    }
    let v = prior.cov_scale;
    let total = v + s2;
    let a = v / total;
    let r = responsibilities(prior, y, total);
    let mut out: Vector = y.iter().map(|yi| a * yi).collect();
    for (c, rk) in prior.components.iter().zip(&r) {
        if *rk == 0.0 {
            continue;
        }
        for (o, m) in out.iter_mut().zip(&c.mean) {
            *o += (1.0 - a) * rk * m;
        }
    }
    out
}

/// Component responsibilities of `y` under marginal variance `total` per
/// coordinate, normalized in log space.
fn responsibilities(prior: &MixtureSpec, y: &[f64], total: f64) -> Vec<f64> {
    let logs: Vec<f64> = prior
        .components
        .iter()
        .map(|c| {
            if c.weight > 0.0 {
                c.weight.ln() - sq_dist(y, &c.mean) / (2.0 * total)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut r: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = r.iter().sum();
    r.iter_mut().for_each(|v| *v /= sum);
    r
}

/// `gᵀ ∂m/∂y` for the posterior mean `m(y)`.
fn posterior_mean_vjp(prior: &MixtureSpec, y: &[f64], s2: f64, g: &[f64]) -> Vector {
    if s2 == 0.0 {
        return g.to_vec();
    }
    let v = prior.cov_scale;
    let total = v + s2;
    let a = v / total;
    let r = responsibilities(prior, y, total);
    // ∇ log p_k = −(y − μ_k) / total; ∇r_k = r_k (∇ log p_k − Σ_j r_j ∇ log p_j)
    let mut mean_grad = vec![0.0; y.len()];
    for (c, rk) in prior.components.iter().zip(&r) {
        for ((mg, yi), mi) in mean_grad.iter_mut().zip(y).zip(&c.mean) {
            *mg -= rk * (yi - mi) / total;
        }
    }
    let mut out: Vector = g.iter().map(|gi| a * gi).collect();
    for (c, rk) in prior.components.iter().zip(&r) {
        if *rk == 0.0 {
            continue;
        }
        let gm: f64 = g.iter().zip(&c.mean).map(|(gi, mi)| gi * mi).sum();
        let coef = (1.0 - a) * gm * rk;
        for ((o, yi), (mi, mg)) in out.iter_mut().zip(y).zip(c.mean.iter().zip(&mean_grad)) {
            *o += coef * (-(yi - mi) / total - mg);
        }
    }
    out
}

fn learned_input(x_t: &[f64], t: usize, schedule: &CosineSchedule) -> Vector {
    let mut input = x_t.to_vec();
    input.push(t as f64 / schedule.steps() as f64);
    input
}

/// One-shot estimate of the clean input from `x_t` at step `t`.
pub fn denoise_once(spec: &DenoiserSpec, x_t: &[f64], t: usize, schedule: &CosineSchedule) -> Result<Vector> {
    if t > schedule.steps() {
        return Err(Error::domain(format!("timestep {t} outside schedule")));
    }
    spec.validate(x_t.len())?;
    let scale = schedule.alpha_bar(t).sqrt();
    let y: Vector = x_t.iter().map(|v| v / scale).collect();
    match spec {
        DenoiserSpec::AnalyticMixture(prior) => Ok(posterior_mean(prior, &y, schedule.noise_ratio(t))),
        DenoiserSpec::Learned(model) => {
            let correction = model.forward_unchecked(&learned_input(x_t, t, schedule));
            Ok(y.iter().zip(&correction).map(|(a, b)| a + b).collect())
        }
    }
}

/// `gᵀ ∂denoise_once/∂x_t`.
pub fn denoise_vjp(spec: &DenoiserSpec, x_t: &[f64], t: usize, schedule: &CosineSchedule, g: &[f64]) -> Result<Vector> {
    if t > schedule.steps() {
        return Err(Error::domain(format!("timestep {t} outside schedule")));
    }
    spec.validate(x_t.len())?;
    check_dim(x_t.len(), g.len())?;
    let scale = schedule.alpha_bar(t).sqrt();
    match spec {
        DenoiserSpec::AnalyticMixture(prior) => {
            let y: Vector = x_t.iter().map(|v| v / scale).collect();
            let gy = posterior_mean_vjp(prior, &y, schedule.noise_ratio(t), g);
            Ok(gy.into_iter().map(|v| v / scale).collect())
        }
        DenoiserSpec::Learned(model) => {
            let mut through = model.vjp_input(&learned_input(x_t, t, schedule), g)?;
            through.truncate(x_t.len());
            Ok(through.iter().zip(g).map(|(a, gi)| a + gi / scale).collect())
        }
    }
}

/// Train a learned denoiser by MSE between its prediction and the clean
/// point. Timesteps are drawn uniformly from `1..=max_timestep`.
pub fn train_denoiser(
    data: &LabeledDataset,
    schedule: &CosineSchedule,
    max_timestep: usize,
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::domain("denoiser training data is empty"));
    }
    if max_timestep == 0 || max_timestep > schedule.steps() {
        return Err(Error::domain(format!(
            "max_timestep must lie in 1..={}, got {max_timestep}",
            schedule.steps()
        )));
    }
    let d = data.dim;
    let root = RngStream::new(cfg.seed);
    let mut model = Mlp::init(&cfg.layer_sizes(d + 1, d), &root.derive(0))?;
    // zero the output layer so training starts from the identity map y
    if let Some(last) = model.layers_mut().last_mut() {
        last.weights.iter_mut().for_each(|w| *w = 0.0);
    }
    let holdout = |m: &Mlp| -> Result<f64> {
        let spec = DenoiserSpec::Learned(m.clone());
        let stream = root.derive(3);
        let mut total = 0.0;
        for (i, x) in data.points.iter().enumerate() {
            let s = stream.derive(i as u64);
            let t = 1 + s.derive(0).rng().random_range(0..max_timestep);
            let sigma = schedule.noise_ratio(t).sqrt();
            let delta = gaussian_noise(&s.derive(1), d, sigma)?;
            let noisy: Vector = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let est = denoise_once(&spec, &scale_to_timestep(&noisy, t, schedule), t, schedule)?;
            total += sq_dist(&est, x);
        }
        Ok(total / data.len() as f64)
    };
    let initial_loss = holdout(&model)?;
    let mut sgd = Sgd::new(&model, cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut root.derive(1).derive(epoch as u64).rng());
        let mut rng = root.derive(2).derive(epoch as u64).rng();
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let x = &data.points[i];
                let t = 1 + rng.random_range(0..max_timestep);
                let sigma = schedule.noise_ratio(t).sqrt();
                let a = schedule.alpha_bar(t).sqrt();
                let mut x_t = vec![0.0; d];
                crate::numerics::fill_gaussian(&mut rng, &mut x_t, sigma);
                x_t.iter_mut().zip(x).for_each(|(v, xi)| *v = a * (*v + xi));
                let trace = model.forward_trace(&learned_input(&x_t, t, schedule))?;
                let resid: Vector = trace
                    .output()
                    .iter()
                    .zip(&x_t)
                    .zip(x)
                    .map(|((c, xt), xi)| xt / a + c - xi)
                    .collect();
                epoch_loss += scale * resid.iter().map(|r| r * r).sum::<f64>();
                let g: Vector = resid.iter().map(|r| 2.0 * scale * r).collect();
                model.backward(&trace, &g, Some(&mut grads));
            }
            sgd.step(&mut model, &grads);
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!("denoiser training diverged at epoch {epoch}")));
        }
    }
    let final_loss = holdout(&model)?;
    log::debug!("denoiser mse {initial_loss:.5} -> {final_loss:.5}");
    Ok(Trained {
        model,
        report: TrainReport {
            initial_loss,
            final_loss,
            train_accuracy: f64::NAN,
        },
    })
}
