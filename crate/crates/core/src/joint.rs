//! Joint classifier/discriminator detector.
//!
//! `P(y|x) = P(y|x,i) P(i|x) + (1 − P(i|x)) / K` with
//! `P(i|x) = sigmoid(g(x) + Δ)`. The classifier term optionally sees a
//! denoised input; the discriminator always sees the raw input.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attack::negative_margin;
use crate::diffusion::{denoise_once, denoise_vjp, find_timestep, scale_to_timestep, CosineSchedule, DenoiserSpec};
use crate::error::{check_dim, Error, Result};
use crate::ibp::discriminator_upper_logit;
use crate::neuralnet::{
    argmax, energy_score, head_value_and_gradient, load_checkpoint, save_checkpoint, softmax, CheckpointKind, Head, Mlp,
};
use crate::numerics::{gaussian_noise, sigmoid, RngStream, Vector};
use crate::smoothing::{certified_ood_score, CertifiedScore, SmoothingConfig};
use crate::synthdata::{MixtureComponent, MixtureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PipelineKind {
    Plain,
    Oe,
    ProodLike,
    Distro,
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 4] = [Self::Plain, Self::Oe, Self::ProodLike, Self::Distro];

    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::Oe => "oe",
            Self::ProodLike => "prood_like",
            Self::Distro => "distro",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn has_discriminator(self) -> bool {
        matches!(self, Self::ProodLike | Self::Distro)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub model: Mlp,
    /// Δ, added to the logit before the sigmoid.
    pub bias_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserStage {
    pub spec: DenoiserSpec,
    pub schedule: CosineSchedule,
    /// Noise level of a standalone evaluation.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDetector {
    pub kind: PipelineKind,
    pub classifier: Mlp,
    pub discriminator: Option<Discriminator>,
    pub denoiser: Option<DenoiserStage>,
    pub class_count: usize,
}

impl JointDetector {
    pub fn new(
        kind: PipelineKind,
        classifier: Mlp,
        discriminator: Option<Discriminator>,
        denoiser: Option<DenoiserStage>,
    ) -> Result<Self> {
        let det = Self {
            kind,
            class_count: classifier.output_dim(),
            classifier,
            discriminator,
            denoiser,
        };
        det.validate()?;
        Ok(det)
    }

    pub fn plain(classifier: Mlp) -> Result<Self> {
        Self::new(PipelineKind::Plain, classifier, None, None)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 || self.classifier.output_dim() != self.class_count {
            return Err(Error::domain("classifier must have class_count >= 2 outputs"));
        }
        let wants_disc = self.kind.has_discriminator();
        let wants_den = self.kind == PipelineKind::Distro;
        if wants_disc != self.discriminator.is_some() || wants_den != self.denoiser.is_some() {
            return Err(Error::domain(format!(
                "pipeline `{}` has the wrong set of components",
                self.kind.name()
            )));
        }
        let d = self.dim();
        if let Some(disc) = &self.discriminator {
            check_dim(d, disc.model.input_dim())?;
            check_dim(1, disc.model.output_dim())?;
            if !disc.bias_shift.is_finite() {
                return Err(Error::domain("bias shift must be finite"));
            }
        }
        if let Some(den) = &self.denoiser {
            den.spec.validate(d)?;
            find_timestep(&den.schedule, den.sigma)?;
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.classifier.input_dim()
    }

    /// `P(i|x)`, or `None` without a discriminator.
    pub fn in_distribution_prob(&self, x: &[f64]) -> Result<Option<f64>> {
        match &self.discriminator {
            Some(d) => Ok(Some(sigmoid(d.model.forward(x)?[0] + d.bias_shift))),
            None => Ok(None),
        }
    }
}

/// Mix class probabilities with the uniform distribution.
pub fn combine(class_probs: &[f64], p_in: f64) -> Vector {
    let k = class_probs.len() as f64;
    class_probs.iter().map(|p| p * p_in + (1.0 - p_in) / k).collect()
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Joint probabilities for an input that already carries Gaussian noise of
/// level `noise_sigma`. A denoiser, if present, removes that noise at the
/// matching timestep.
pub fn joint_probs_at_noisy(det: &JointDetector, noisy: &[f64], noise_sigma: f64) -> Result<Vector> {
    check_dim(det.dim(), noisy.len())?;
    let class_input = match &det.denoiser {
        Some(den) => {
            let t = find_timestep(&den.schedule, noise_sigma)?;
            denoise_once(&den.spec, &scale_to_timestep(noisy, t, &den.schedule), t, &den.schedule)?
        }
        None => noisy.to_vec(),
    };
    let probs = softmax(&det.classifier.forward(&class_input)?, 1.0);
    Ok(match det.in_distribution_prob(noisy)? {
        Some(p_in) => combine(&probs, p_in),
        None => probs,
    })
}

/// Noise draw used by a standalone evaluation: `(x + δ, σ)`, or `(x, 0)`
/// without a denoiser.
fn standalone_input(det: &JointDetector, x: &[f64], stream: &RngStream) -> Result<(Vector, f64)> {
    match &det.denoiser {
        Some(den) => {
            let delta = gaussian_noise(stream, x.len(), den.sigma)?;
            Ok((x.iter().zip(&delta).map(|(a, b)| a + b).collect(), den.sigma))
        }
        None => Ok((x.to_vec(), 0.0)),
    }
}

/// Joint probabilities and their maximum at `x`. With a denoiser, one noise
/// draw from `stream` feeds the classifier branch.
pub fn joint_confidence(det: &JointDetector, x: &[f64], stream: &RngStream) -> Result<(Vector, f64)> {
    check_dim(det.dim(), x.len())?;
    let (noisy, sigma) = standalone_input(det, x, stream)?;
    let probs = match &det.denoiser {
        Some(den) => {
            let t = find_timestep(&den.schedule, sigma)?;
            let clean = denoise_once(&den.spec, &scale_to_timestep(&noisy, t, &den.schedule), t, &den.schedule)?;
            let probs = softmax(&det.classifier.forward(&clean)?, 1.0);
            match det.in_distribution_prob(x)? {
                Some(p_in) => combine(&probs, p_in),
                None => probs,
            }
        }
        None => joint_probs_at_noisy(det, x, 0.0)?,
    };
    let m = max_of(&probs);
    Ok((probs, m))
}

/// Joint maximum probability at `x` and its gradient with respect to `x`,
/// with the noise draw frozen by `stream`.
pub fn joint_msp_and_gradient(det: &JointDetector, x: &[f64], stream: &RngStream) -> Result<(f64, Vector)> {
    check_dim(det.dim(), x.len())?;
    let (noisy, sigma) = standalone_input(det, x, stream)?;
    let (class_input, den_ctx) = match &det.denoiser {
        Some(den) => {
            let t = find_timestep(&den.schedule, sigma)?;
            let x_t = scale_to_timestep(&noisy, t, &den.schedule);
            (denoise_once(&den.spec, &x_t, t, &den.schedule)?, Some((den, x_t, t)))
        }
        None => (x.to_vec(), None),
    };
    let logits = det.classifier.forward(&class_input)?;
    let top = argmax(&logits);
    let (p_top, grad_u) = head_value_and_gradient(&det.classifier, &class_input, Head::ClassProbability(top))?;
    // chain through the denoiser: u = m(√ᾱ (x + δ))
    let grad_top = match den_ctx {
        Some((den, x_t, t)) => {
            let scale = den.schedule.alpha_bar(t).sqrt();
            denoise_vjp(&den.spec, &x_t, t, &den.schedule, &grad_u)?
                .into_iter()
                .map(|v| v * scale)
                .collect()
        }
        None => grad_u,
    };
    match &det.discriminator {
        None => Ok((p_top, grad_top)),
        Some(disc) => {
            let k = det.class_count as f64;
            let (g, grad_g) = head_value_and_gradient(&disc.model, x, Head::Logit(0))?;
            let p_in = sigmoid(g + disc.bias_shift);
            let value = p_top * p_in + (1.0 - p_in) / k;
            let dp_in = p_in * (1.0 - p_in);
            let grad = grad_top
                .iter()
                .zip(&grad_g)
                .map(|(gt, gg)| p_in * gt + (p_top - 1.0 / k) * dp_in * gg)
                .collect();
            Ok((value, grad))
        }
    }
}

/// Classifier margin `max_{c≠y} logit_c − logit_y` on the (denoised) class
/// input and its gradient with respect to `x`, noise frozen by `stream`.
/// The joint argmax equals the classifier argmax, so a positive margin means
/// the joint prediction is wrong.
pub fn joint_negative_margin(det: &JointDetector, x: &[f64], label: usize, stream: &RngStream) -> Result<(f64, Vector)> {
    check_dim(det.dim(), x.len())?;
    let (noisy, sigma) = standalone_input(det, x, stream)?;
    match &det.denoiser {
        None => negative_margin(&det.classifier, x, label),
        Some(den) => {
            let t = find_timestep(&den.schedule, sigma)?;
            let x_t = scale_to_timestep(&noisy, t, &den.schedule);
            let u = denoise_once(&den.spec, &x_t, t, &den.schedule)?;
            let (m, grad_u) = negative_margin(&det.classifier, &u, label)?;
            let scale = den.schedule.alpha_bar(t).sqrt();
            let g = denoise_vjp(&den.spec, &x_t, t, &den.schedule, &grad_u)?;
            Ok((m, g.into_iter().map(|v| v * scale).collect()))
        }
    }
}

/// `(K − 1)/K · sigmoid(ḡ + Δ) + 1/K` with `ḡ` the IBP upper logit over the
/// ε-ball around `z` within the data box.
pub fn guaranteed_linf_msp_upper(det: &JointDetector, z: &[f64], epsilon: f64, box_half: f64) -> Result<f64> {
    let disc = det
        .discriminator
        .as_ref()
        .ok_or_else(|| Error::domain(format!("pipeline `{}` has no discriminator", det.kind.name())))?;
    let upper = discriminator_upper_logit(&disc.model, z, epsilon, box_half)?;
    let k = det.class_count as f64;
    Ok((k - 1.0) / k * sigmoid(upper + disc.bias_shift) + 1.0 / k)
}

/// Smoothing certificate of the joint maximum probability. The smoothing
/// noise doubles as the denoiser's input noise.
pub fn certified_l2_score(det: &JointDetector, x: &[f64], cfg: &SmoothingConfig, stream: &RngStream) -> Result<CertifiedScore> {
    check_dim(det.dim(), x.len())?;
    let sigma = cfg.sigma;
    let f = move |noisy: &[f64], _: &RngStream| joint_probs_at_noisy(det, noisy, sigma);
    certified_ood_score(&f, x, cfg, stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepScore {
    Msp,
    Energy,
}

/// Scores at `β · x` for each β. Every β reuses `stream`.
pub fn scale_sweep(det: &JointDetector, x: &[f64], betas: &[f64], score: SweepScore, stream: &RngStream) -> Result<Vec<f64>> {
    if betas.iter().any(|b| !(*b > 0.0) || !b.is_finite()) || betas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::domain("betas must be positive and ascending"));
    }
    betas
        .iter()
        .map(|b| {
            let scaled: Vector = x.iter().map(|v| b * v).collect();
            match score {
                SweepScore::Msp => joint_confidence(det, &scaled, stream).map(|r| r.1),
                SweepScore::Energy => energy_score(&det.classifier.forward(&scaled)?, 1.0),
            }
        })
        .collect()
}

/// `count` points spaced logarithmically over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| {
            if i == 0 {
                lo
            } else if i + 1 == count {
                hi
            } else {
                (a + (b - a) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

const MANIFEST_HEADER: &str = "# smoothcert detector v1";

/// Write the detector's checkpoints next to `path` and a manifest at `path`.
///
/// ```text
/// # smoothcert detector v1
/// kind = distro
/// class_count = 4
/// classifier = <stem>.classifier.ckpt
/// discriminator = <stem>.discriminator.ckpt
/// bias_shift = 3
/// sigma = 0.12
/// schedule_steps = 1000
/// schedule_offset = 0.008
/// denoiser = analytic | <stem>.denoiser.ckpt
/// prior.dim = 2
/// prior.cov_scale = 0.15
/// prior.component = <class> <weight> <mean...>
/// ```
pub fn save_manifest(det: &JointDetector, path: &Path) -> Result<()> {
    det.validate()?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::domain("manifest path needs a file name"))?;
    let mut out = format!("{MANIFEST_HEADER}\nkind = {}\nclass_count = {}\n", det.kind.name(), det.class_count);
    let cls = format!("{stem}.classifier.ckpt");
    save_checkpoint(&det.classifier, CheckpointKind::Model, &dir.join(&cls))?;
    let _ = writeln!(out, "classifier = {cls}");
    if let Some(disc) = &det.discriminator {
        let name = format!("{stem}.discriminator.ckpt");
        save_checkpoint(&disc.model, CheckpointKind::Model, &dir.join(&name))?;
        let _ = writeln!(out, "discriminator = {name}\nbias_shift = {}", disc.bias_shift);
    }
    if let Some(den) = &det.denoiser {
        let _ = writeln!(
            out,
            "sigma = {}\nschedule_steps = {}\nschedule_offset = {}",
            den.sigma,
            den.schedule.steps(),
            den.schedule.offset()
        );
        match &den.spec {
            DenoiserSpec::AnalyticMixture(prior) => {
                let _ = writeln!(out, "denoiser = analytic\nprior.dim = {}\nprior.cov_scale = {}", prior.dim, prior.cov_scale);
                for c in &prior.components {
                    let mean: Vec<String> = c.mean.iter().map(|m| m.to_string()).collect();
                    let _ = writeln!(out, "prior.component = {} {} {}", c.class, c.weight, mean.join(" "));
                }
            }
            DenoiserSpec::Learned(model) => {
                let name = format!("{stem}.denoiser.ckpt");
                save_checkpoint(model, CheckpointKind::Denoiser, &dir.join(&name))?;
                let _ = writeln!(out, "denoiser = {name}");
            }
        }
    }
    crate::fsutil::write_atomic(path, out.as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<JointDetector> {
    let text = crate::fsutil::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(perr(1, format!("expected header `{MANIFEST_HEADER}`"))),
    }
    let mut kv: Vec<(usize, String, String)> = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| perr(i + 1, format!("expected `key = value`, got `{line}`")))?;
        kv.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    let get = |key: &str| kv.iter().find(|(_, k, _)| k == key).map(|(l, _, v)| (*l, v.as_str()));
    let need = |key: &str| get(key).ok_or_else(|| perr(0, format!("missing key `{key}`")));
    fn num<T: std::str::FromStr>(v: (usize, &str), perr: &dyn Fn(usize, String) -> Error) -> Result<T> {
        v.1.parse().map_err(|_| perr(v.0, format!("cannot parse `{}`", v.1)))
    }
    let resolve = |p: &str| -> PathBuf { dir.join(p) };

    let (l, kind_s) = need("kind")?;
    let kind = PipelineKind::parse(kind_s).ok_or_else(|| perr(l, format!("unknown kind `{kind_s}`")))?;
    let classifier = load_checkpoint(&resolve(need("classifier")?.1))?.0;
    let class_count: usize = num(need("class_count")?, &perr)?;
    let discriminator = match get("discriminator") {
        Some((_, p)) => Some(Discriminator {
            model: load_checkpoint(&resolve(p))?.0,
            bias_shift: num(need("bias_shift")?, &perr)?,
        }),
        None => None,
    };
    let denoiser = match get("denoiser") {
        None => None,
        Some((_, d)) => {
            let schedule = CosineSchedule::new(num(need("schedule_steps")?, &perr)?, num(need("schedule_offset")?, &perr)?)?;
            let sigma: f64 = num(need("sigma")?, &perr)?;
            let spec = if d == "analytic" {
                let dim: usize = num(need("prior.dim")?, &perr)?;
                let mut components = Vec::new();
                for (l, _, v) in kv.iter().filter(|(_, k, _)| k == "prior.component") {
                    let parts: Vec<&str> = v.split_whitespace().collect();
                    if parts.len() != dim + 2 {
                        return Err(perr(*l, format!("prior.component needs {} fields", dim + 2)));
                    }
                    let f = |s: &str| s.parse::<f64>().map_err(|_| perr(*l, format!("cannot parse `{s}`")));
                    components.push(MixtureComponent {
                        class: parts[0].parse().map_err(|_| perr(*l, format!("bad class `{}`", parts[0])))?,
                        weight: f(parts[1])?,
                        mean: parts[2..].iter().map(|s| f(s)).collect::<Result<_>>()?,
                    });
                }
                let prior = MixtureSpec {
                    dim,
                    class_count: components.iter().map(|c| c.class + 1).max().unwrap_or(0),
                    components,
                    cov_scale: num(need("prior.cov_scale")?, &perr)?,
                };
                DenoiserSpec::AnalyticMixture(prior)
            } else {
                DenoiserSpec::Learned(load_checkpoint(&resolve(d))?.0)
            };
            Some(DenoiserStage { spec, schedule, sigma })
        }
    };
    let det = JointDetector::new(kind, classifier, discriminator, denoiser)?;
    if det.class_count != class_count {
        return Err(perr(0, format!("class_count {class_count} does not match the classifier")));
    }
    Ok(det)
}
