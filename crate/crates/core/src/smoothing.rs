//! Randomized smoothing: `G(x) = E[F(x + δ)]`, `δ ~ N(0, σ²I)`, with
//! Clopper-Pearson certification of the top-class probability.
//!
//! Monte-Carlo draw `i` of a point uses the substream `stream.derive(i)` for
//! its noise and class vote, and hands `stream.derive(i).derive(1)` to `F`
//! for any internal randomness. Draws are evaluated in batches (possibly in
//! parallel) and combined in batch order, so results do not depend on the
//! number of threads.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{clopper_pearson_lower, fill_gaussian, norm_quantile, RngStream, Vector};

/// Largest probability fed to the normal quantile.
pub const P_MAX: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n_samples: usize,
    pub alpha: f64,
    pub batch_size: usize,
}

impl SmoothingConfig {
    pub fn new(sigma: f64) -> Self {
        Self {
            sigma,
            n_samples: 10_000,
            alpha: 0.001,
            batch_size: 500,
        }
    }

    /// ℓ2 noise level matching an ℓ∞ budget: `σ = √d · ε`.
    pub fn from_linf(epsilon: f64, dim: usize) -> Self {
        Self::new((dim as f64).sqrt() * epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::domain(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.n_samples < 100 {
            return Err(Error::domain(format!("n_samples must be >= 100, got {}", self.n_samples)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedScore {
    /// Lower confidence bound on the top-class smoothed probability.
    pub p_lower: f64,
    pub radius: f64,
    /// `√(2/π) Φ⁻¹(p_lower) + p_lower`; 0 when not certified.
    pub upper_bound: f64,
    pub certified: bool,
    pub top_class: usize,
    pub hits: u64,
    pub n_samples: u64,
}

impl CertifiedScore {
    /// Score used by guaranteed ℓ2 metrics: the upper bound, or 0 on abstention.
    pub fn score(&self) -> f64 {
        if self.certified {
            self.upper_bound
        } else {
            0.0
        }
    }
}

/// Checks that `p` is a probability vector (entries ≥ 0, sum 1 ± 1e-9).
pub fn validate_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Contract("classifier returned an empty vector".into()));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < -1e-12) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("classifier output is not a probability vector: {p:?}")));
    }
    Ok(())
}

fn batches(n: usize, size: usize) -> Vec<Range<usize>> {
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

/// Noisy copy `x + δ_i` and the generator positioned after the noise.
fn draw(x: &[f64], sigma: f64, stream: &RngStream, i: usize) -> (Vector, ChaCha8Rng) {
    let mut rng = stream.derive(i as u64).rng();
    let mut noisy = vec![0.0; x.len()];
    fill_gaussian(&mut rng, &mut noisy, sigma);
    noisy.iter_mut().zip(x).for_each(|(v, xi)| *v += xi);
    (noisy, rng)
}

fn eval<F>(f: &F, noisy: &[f64], stream: &RngStream, i: usize, classes: &mut Option<usize>) -> Result<Vector>
where
    F: Fn(&[f64], &RngStream) -> Result<Vector>,
{
    let p = f(noisy, &stream.derive(i as u64).derive(1))?;
    validate_simplex(&p)?;
    match classes {
        Some(k) if *k != p.len() => {
            return Err(Error::Contract(format!(
                "classifier output length changed from {k} to {}",
                p.len()
            )))
        }
        _ => *classes = Some(p.len()),
    }
    Ok(p)
}

fn merge_len(a: usize, b: usize) -> Result<usize> {
    if a != b {
        return Err(Error::Contract(format!("classifier output length changed from {a} to {b}")));
    }
    Ok(a)
}

/// Monte-Carlo estimate of `G(x)` with per-class standard errors.
pub fn estimate_smoothed_probs_with_error<F>(
    f: &F,
    x: &[f64],
    cfg: &SmoothingConfig,
    stream: &RngStream,
) -> Result<(Vector, Vector)>
where
    F: Fn(&[f64], &RngStream) -> Result<Vector> + Sync,
{
    cfg.validate()?;
    let parts: Vec<(Vector, Vector)> = batches(cfg.n_samples, cfg.batch_size)
        .into_par_iter()
        .map(|range| {
            let mut classes = None;
            let (mut sum, mut sq) = (Vec::new(), Vec::new());
            for i in range {
                let (noisy, _) = draw(x, cfg.sigma, stream, i);
                let p = eval(f, &noisy, stream, i, &mut classes)?;
                if sum.is_empty() {
                    sum = vec![0.0; p.len()];
                    sq = vec![0.0; p.len()];
                }
                for (k, v) in p.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            Ok((sum, sq))
        })
        .collect::<Result<_>>()?;
    let k = parts[0].0.len();
    let (mut sum, mut sq) = (vec![0.0; k], vec![0.0; k]);
    for (s, q) in &parts {
        merge_len(k, s.len())?;
        for c in 0..k {
            sum[c] += s[c];
            sq[c] += q[c];
        }
    }
    let n = cfg.n_samples as f64;
    let mean: Vector = sum.iter().map(|s| s / n).collect();
    let se = mean
        .iter()
        .zip(&sq)
        .map(|(m, q)| ((q / n - m * m).max(0.0) / (n - 1.0)).sqrt())
        .collect();
    Ok((mean, se))
}

/// Monte-Carlo estimate of `G(x)`.
pub fn estimate_smoothed_probs<F>(f: &F, x: &[f64], cfg: &SmoothingConfig, stream: &RngStream) -> Result<Vector>
where
    F: Fn(&[f64], &RngStream) -> Result<Vector> + Sync,
{
    estimate_smoothed_probs_with_error(f, x, cfg, stream).map(|r| r.0)
}

/// Per-class vote counts. Each draw votes for one class sampled from
/// `F(x + δ_i)`, so the count of class `c` is Binomial(n, G(x)_c). For
/// one-hot `F` this is the ordinary argmax vote.
pub fn count_votes<F>(f: &F, x: &[f64], cfg: &SmoothingConfig, stream: &RngStream) -> Result<Vec<u64>>
where
    F: Fn(&[f64], &RngStream) -> Result<Vector> + Sync,
{
    cfg.validate()?;
    let parts: Vec<Vec<u64>> = batches(cfg.n_samples, cfg.batch_size)
        .into_par_iter()
        .map(|range| {
            let mut classes = None;
            let mut votes = Vec::new();
            for i in range {
                let (noisy, mut rng) = draw(x, cfg.sigma, stream, i);
                let p = eval(f, &noisy, stream, i, &mut classes)?;
                if votes.is_empty() {
                    votes = vec![0u64; p.len()];
                }
                votes[sample_class(&p, rng.random::<f64>())] += 1;
            }
            Ok(votes)
        })
        .collect::<Result<_>>()?;
    let k = parts[0].len();
    let mut votes = vec![0u64; k];
    for part in &parts {
        merge_len(k, part.len())?;
        votes.iter_mut().zip(part).for_each(|(v, p)| *v += p);
    }
    Ok(votes)
}

fn sample_class(p: &[f64], u: f64) -> usize {
    let total: f64 = p.iter().map(|v| v.max(0.0)).sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (c, v) in p.iter().enumerate() {
        if *v <= 0.0 {
            continue;
        }
        acc += v;
        last = c;
        if target < acc {
            return c;
        }
    }
    last
}

/// `σ Φ⁻¹(p)`; `None` (abstain) when `p ≤ 1/2`.
pub fn certify_radius(p: f64, sigma: f64) -> Option<f64> {
    if !(p > 0.5) {
        return None;
    }
    Some(sigma * norm_quantile(clamp_p(p)))
}

/// `√(2/π) Φ⁻¹(p) + p`; `None` (abstain) when `p ≤ 1/2`. Not clamped to 1.
pub fn certified_confidence_upper(p: f64) -> Option<f64> {
    if !(p > 0.5) {
        return None;
    }
    let p = clamp_p(p);
    Some((2.0 / std::f64::consts::PI).sqrt() * norm_quantile(p) + p)
}

fn clamp_p(p: f64) -> f64 {
    if p > P_MAX {
        log::warn!("probability {p} clamped to 1 - 1e-12");
        P_MAX
    } else {
        p
    }
}

/// `√(2 / (π σ²))`, the ℓ2 Lipschitz constant of every smoothed output.
pub fn lipschitz_constant(sigma: f64) -> f64 {
    (2.0 / (std::f64::consts::PI * sigma * sigma)).sqrt()
}

/// Certify the smoothed top-class probability at `x`.
///
/// One sample set selects the top class and bounds its probability.
pub fn certified_ood_score<F>(f: &F, x: &[f64], cfg: &SmoothingConfig, stream: &RngStream) -> Result<CertifiedScore>
where
    F: Fn(&[f64], &RngStream) -> Result<Vector> + Sync,
{
    let votes = count_votes(f, x, cfg, stream)?;
    let mut top = 0;
    for (c, v) in votes.iter().enumerate() {
        if *v > votes[top] {
            top = c;
        }
    }
    let n = cfg.n_samples as u64;
    let p_lower = clopper_pearson_lower(votes[top], n, cfg.alpha)?;
    let (certified, radius, upper_bound) = match (certify_radius(p_lower, cfg.sigma), certified_confidence_upper(p_lower)) {
        (Some(r), Some(u)) => (true, r, u),
        _ => (false, 0.0, 0.0),
    };
    Ok(CertifiedScore {
        p_lower,
        radius,
        upper_bound,
        certified,
        top_class: top,
        hits: votes[top],
        n_samples: n,
    })
}
