//! Scalar numerical primitives shared by the certifiers: the standard normal
//! CDF and quantile, seeded counter-based Gaussian sampling, the one-sided
//! Clopper-Pearson lower bound and a Gaussian kernel density estimate.

use std::f64::consts::{PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A dense real vector. All public operations expect finite entries.
pub type Vector = Vec<f64>;

/// Immutable descriptor of an independent random stream.
///
/// The pair `(global_seed, substream_index)` selects a ChaCha8 key and stream
/// id, so draws depend only on the descriptor and never on evaluation order.
/// Nested streams (per point, per Monte-Carlo sample, per attack start) are
/// obtained with [`RngStream::derive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub global_seed: u64,
    pub substream_index: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(global_seed: u64) -> Self {
        Self {
            global_seed,
            substream_index: 0,
        }
    }

    pub fn with_substream(global_seed: u64, substream_index: u64) -> Self {
        Self {
            global_seed,
            substream_index,
        }
    }

    /// Child stream `index` of this stream.
    pub fn derive(&self, index: u64) -> Self {
        Self {
            global_seed: self.global_seed,
            substream_index: splitmix64(self.substream_index ^ splitmix64(index ^ 0xA076_1D64_78BD_642F)),
        }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.global_seed);
        rng.set_stream(self.substream_index);
        rng
    }
}

/// Φ(x) without input validation; callers guarantee finiteness.
pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub(crate) fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF Φ(x).
pub fn std_normal_cdf(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::domain(format!("std_normal_cdf of non-finite {x}")));
    }
    Ok(norm_cdf(x))
}

/// Standard normal quantile Φ⁻¹(p) for 0 < p < 1.
///
/// Starts from the Abramowitz-Stegun 26.2.23 rational approximation on the
/// smaller tail and polishes with Halley steps against [`std_normal_cdf`].
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("quantile needs 0 < p < 1, got {p}")));
    }
    Ok(norm_quantile(p))
}

pub(crate) fn norm_quantile(p: f64) -> f64 {
    // For p >= 0.5, 1 - p is exact (Sterbenz), so solving on the lower tail
    // loses nothing.
    let lower = p < 0.5;
    let q = if lower { p } else { 1.0 - p };
    if q == 0.5 {
        return 0.0;
    }
    let t = (-2.0 * q.ln()).sqrt();
    let num = 2.515517 + t * (0.802853 + t * 0.010328);
    let den = 1.0 + t * (1.432788 + t * (0.189269 + t * 0.001308));
    let mut x = -(t - num / den);
    for _ in 0..10 {
        let err = norm_cdf(x) - q;
        let u = err * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        let step = u / (1.0 + 0.5 * x * u);
        x -= step;
        if step.abs() <= 1e-16 * x.abs().max(1.0) {
            break;
        }
    }
    if lower {
        x
    } else {
        -x
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)`
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `dim` i.i.d. N(0, sigma²) draws from `stream`.
pub fn gaussian_noise(stream: &RngStream, dim: usize, sigma: f64) -> Result<Vector> {
    if dim == 0 {
        return Err(Error::domain("gaussian_noise needs dim >= 1"));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::domain(format!("gaussian_noise sigma must be >= 0, got {sigma}")));
    }
    let mut rng = stream.rng();
    let mut out = vec![0.0; dim];
    fill_gaussian(&mut rng, &mut out, sigma);
    Ok(out)
}

pub(crate) fn fill_gaussian<R: Rng>(rng: &mut R, out: &mut [f64], sigma: f64) {
    for v in out.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = sigma * z;
    }
}

/// One-sided (1 - alpha) Clopper-Pearson lower bound on a binomial proportion.
///
/// Returns the `p` solving `Pr[Binomial(trials, p) >= successes] = alpha`,
/// capped at `successes / trials`. Found by bisection on the exact binomial
/// tail.
pub fn clopper_pearson_lower(successes: u64, trials: u64, alpha: f64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::domain("clopper_pearson_lower needs trials >= 1"));
    }
    if successes > trials {
        return Err(Error::domain(format!(
            "successes {successes} exceed trials {trials}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if successes == 0 {
        return Ok(0.0);
    }
    if successes == trials {
        // p^n = alpha
        return Ok(alpha.powf(1.0 / trials as f64));
    }
    let cap = successes as f64 / trials as f64;
    if binomial_upper_tail(successes, trials, cap) <= alpha {
        return Ok(cap);
    }
    let (mut lo, mut hi) = (0.0_f64, cap);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if binomial_upper_tail(successes, trials, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn ln_binomial_pmf(k: u64, n: u64, p: f64) -> f64 {
    let (kf, nf) = (k as f64, n as f64);
    let ln_choose = libm::lgamma(nf + 1.0) - libm::lgamma(kf + 1.0) - libm::lgamma(nf - kf + 1.0);
    let a = if k == 0 { 0.0 } else { kf * p.ln() };
    let b = if k == n { 0.0 } else { (nf - kf) * (-p).ln_1p() };
    ln_choose + a + b
}

/// `Pr[X >= k]` for `X ~ Binomial(n, p)`, `1 <= k <= n`.
///
/// Sums whichever tail lies away from the mode, walking outward with
/// successive pmf ratios and stopping once terms are negligible.
pub(crate) fn binomial_upper_tail(k: u64, n: u64, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let odds = p / (1.0 - p);
    if k as f64 > n as f64 * p {
        let first = ln_binomial_pmf(k, n, p).exp();
        let (mut sum, mut term) = (1.0, 1.0);
        for j in k..n {
            term *= (n - j) as f64 / (j + 1) as f64 * odds;
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
        }
        (first * sum).min(1.0)
    } else {
        let first = ln_binomial_pmf(k - 1, n, p).exp();
        let (mut sum, mut term) = (1.0, 1.0);
        let mut j = k - 1;
        while j > 0 {
            term *= j as f64 / (n - j + 1) as f64 / odds;
            sum += term;
            if term < 1e-17 * sum {
                break;
            }
            j -= 1;
        }
        (1.0 - first * sum).clamp(0.0, 1.0)
    }
}

/// Gaussian KDE of `scores` evaluated on `grid`.
pub fn gaussian_kde(scores: &[f64], bandwidth: f64, grid: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::domain("gaussian_kde needs at least one score"));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::domain(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    let norm = 1.0 / (scores.len() as f64 * bandwidth);
    Ok(grid
        .iter()
        .map(|&g| {
            let s: f64 = scores.iter().map(|&s| norm_pdf((g - s) / bandwidth)).sum();
            s * norm
        })
        .collect())
}
