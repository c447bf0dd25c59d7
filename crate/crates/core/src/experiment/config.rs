//! Experiment configuration: line-based `key = value` text with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are
//! comma-separated. Unknown keys are rejected. Relative paths resolve against
//! the directory containing the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::ibp::DiscriminatorConfig;
use crate::joint::PipelineKind;
use crate::metrics::L2IdScoring;
use crate::neuralnet::TrainConfig;
use crate::smoothing::SmoothingConfig;
use crate::synthdata::{MixtureSpec, OodFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Quick,
    Full,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "quick" => Some(Self::Quick),
            "full" => Some(Self::Full),
            _ => None,
        }
    }

    pub fn n_samples(self) -> usize {
        match self {
            Self::Quick => 2000,
            Self::Full => 10_000,
        }
    }

    pub fn attack_steps(self) -> usize {
        match self {
            Self::Quick => 50,
            Self::Full => 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub dim: usize,
    pub class_count: usize,
    pub radius: f64,
    /// Per-coordinate variance of every mixture component.
    pub cov_scale: f64,
    pub box_half: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub families: Vec<OodFamily>,
    /// Size of the auxiliary outlier set used by OE and the discriminator.
    pub n_outliers: usize,
}

impl DataConfig {
    pub fn mixture(&self) -> Result<MixtureSpec> {
        MixtureSpec::circle(self.dim, self.class_count, self.radius, self.cov_scale)
            .map_err(|e| Error::config("data", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserChoice {
    Analytic,
    Learned(TrainConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingSection {
    pub sigmas: Vec<f64>,
    pub n_samples: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub id_scoring: L2IdScoring,
}

impl SmoothingSection {
    pub fn config(&self, sigma: f64) -> SmoothingConfig {
        SmoothingConfig {
            sigma,
            n_samples: self.n_samples,
            alpha: self.alpha,
            batch_size: self.batch_size,
        }
    }

    /// Noise level used for the guaranteed ℓ2 columns of the OOD table.
    pub fn report_sigma(&self) -> f64 {
        self.sigmas[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub pipelines: Vec<PipelineKind>,
    pub n_id: usize,
    pub n_ood: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifySection {
    pub pipeline: PipelineKind,
    pub n_id: usize,
    pub n_ood: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSection {
    pub n_betas: usize,
    pub beta_max: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeSection {
    pub bandwidth: f64,
    pub grid_points: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    pub pipeline: PipelineKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub profile: Profile,
    pub data: DataConfig,
    pub classifier: TrainConfig,
    pub discriminator: DiscriminatorConfig,
    pub bias_shift: f64,
    pub denoiser: DenoiserChoice,
    pub smoothing: SmoothingSection,
    /// OOD attack settings; `attack.epsilon` is also the ℓ∞ guarantee radius.
    pub attack: AttackConfig,
    pub accuracy_epsilons: Vec<f64>,
    pub eval: EvalSection,
    pub certify: CertifySection,
    pub sweep: SweepSection,
    pub kde: KdeSection,
}

struct Fields {
    values: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::config(format!("line {}", i + 1), "empty key"));
            }
            if values.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(Error::config(key, format!("duplicate key on line {}", i + 1)));
            }
        }
        Ok(Self { values })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.values.remove(key).map(|(_, v)| v)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            Some(v) => v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
            None => Ok(default),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key) {
            Some(v) if v.is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    let s = s.trim();
                    s.parse().map_err(|_| Error::config(key, format!("cannot parse list item `{s}`")))
                })
                .collect(),
            None => Ok(default),
        }
    }

    fn pipeline(&mut self, key: &str, default: PipelineKind) -> Result<PipelineKind> {
        match self.raw(key) {
            Some(v) => PipelineKind::parse(&v).ok_or_else(|| Error::config(key, format!("unknown pipeline `{v}`"))),
            None => Ok(default),
        }
    }

    fn train(&mut self, prefix: &str, base: TrainConfig) -> Result<TrainConfig> {
        let k = |s: &str| format!("{prefix}.{s}");
        Ok(TrainConfig {
            epochs: self.get(&k("epochs"), base.epochs)?,
            batch_size: self.get(&k("batch_size"), base.batch_size)?,
            learning_rate: self.get(&k("learning_rate"), base.learning_rate)?,
            momentum: self.get(&k("momentum"), base.momentum)?,
            oe_weight: self.get(&k("oe_weight"), base.oe_weight)?,
            seed: self.get(&k("seed"), base.seed)?,
            hidden: self.list(&k("hidden"), base.hidden)?,
        })
    }

    fn finish(self) -> Result<()> {
        match self.values.into_iter().next() {
            Some((k, (line, _))) => Err(Error::config(k, format!("unknown key on line {line}"))),
            None => Ok(()),
        }
    }
}

fn check(ok: bool, key: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(key, message))
    }
}

fn train_check(cfg: &TrainConfig, prefix: &str) -> Result<()> {
    cfg.validate().map_err(|e| Error::config(prefix, e.to_string()))
}

impl ExperimentConfig {
    /// Defaults for every key (the output directory is `out`).
    pub fn default_with(profile: Profile) -> Self {
        Self::parse("", Path::new("."), Some(profile)).expect("defaults are valid")
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), profile)
    }

    /// Parse config text. `profile` overrides the file's `profile` key.
    pub fn parse(text: &str, base_dir: &Path, profile: Option<Profile>) -> Result<Self> {
        let mut f = Fields::parse(text)?;
        let file_profile = match f.raw("profile") {
            Some(p) => Some(Profile::parse(&p).ok_or_else(|| Error::config("profile", format!("unknown profile `{p}`")))?),
            None => None,
        };
        let profile = profile.or(file_profile).unwrap_or(Profile::Quick);
        let output_dir = base_dir.join(f.get("output_dir", "out".to_string())?);
        let seed = f.get("seed", 0u64)?;

        let family_names = f.list(
            "data.ood_families",
            OodFamily::defaults().iter().map(|fam| fam.name().to_string()).collect(),
        )?;
        let families = family_names
            .iter()
            .map(|n| {
                OodFamily::default_by_name(n).ok_or_else(|| Error::config("data.ood_families", format!("unknown family `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let data = DataConfig {
            dim: f.get("data.dim", 2)?,
            class_count: f.get("data.class_count", 4)?,
            radius: f.get("data.radius", 2.0)?,
            cov_scale: f.get("data.cov_scale", 0.15)?,
            box_half: f.get("data.box_half", 6.0)?,
            n_train: f.get("data.n_train", 2000)?,
            n_test: f.get("data.n_test", 1000)?,
            n_ood: f.get("data.n_ood", 1000)?,
            families,
            n_outliers: f.get("data.n_outliers", 4000)?,
        };

        let classifier = f.train(
            "classifier",
            TrainConfig {
                epochs: 60,
                ..TrainConfig::default()
            },
        )?;
        let disc_defaults = DiscriminatorConfig::default();
        let disc_train = f.train(
            "discriminator",
            TrainConfig {
                epochs: 60,
                ..disc_defaults.train.clone()
            },
        )?;
        let discriminator = DiscriminatorConfig {
            train: disc_train,
            epsilon: f.get("discriminator.epsilon", 0.1)?,
            box_half: data.box_half,
        };
        let bias_shift = f.get("discriminator.bias_shift", 3.0)?;
        let denoiser = match f.get("denoiser.kind", "analytic".to_string())?.as_str() {
            "analytic" => DenoiserChoice::Analytic,
            "learned" => DenoiserChoice::Learned(f.train(
                "denoiser",
                TrainConfig {
                    epochs: 60,
                    learning_rate: 0.01,
                    hidden: vec![64, 64],
                    oe_weight: 0.0,
                    ..TrainConfig::default()
                },
            )?),
            other => return Err(Error::config("denoiser.kind", format!("expected analytic or learned, got `{other}`"))),
        };

        let id_scoring = match f.get("smoothing.id_scoring", "certified".to_string())?.as_str() {
            "certified" => L2IdScoring::Certified,
            "clean" => L2IdScoring::Clean,
            other => return Err(Error::config("smoothing.id_scoring", format!("expected certified or clean, got `{other}`"))),
        };
        let smoothing = SmoothingSection {
            sigmas: f.list("smoothing.sigmas", vec![0.12, 0.25])?,
            n_samples: f.get("smoothing.n_samples", profile.n_samples())?,
            alpha: f.get("smoothing.alpha", 0.001)?,
            batch_size: f.get("smoothing.batch_size", 500)?,
            id_scoring,
        };

        let ad = AttackConfig::default();
        let attack = AttackConfig {
            epsilon: f.get("attack.epsilon", 0.1)?,
            steps: f.get("attack.steps", profile.attack_steps())?,
            momentum: f.get("attack.momentum", ad.momentum)?,
            initial_step: f.get("attack.initial_step", ad.initial_step)?,
            shrink: f.get("attack.shrink", ad.shrink)?,
            grow: f.get("attack.grow", ad.grow)?,
            uniform_starts: f.get("attack.uniform_starts", ad.uniform_starts)?,
            gaussian_starts: f.get("attack.gaussian_starts", ad.gaussian_starts)?,
            gaussian_start_sigma: f.get("attack.gaussian_start_sigma", ad.gaussian_start_sigma)?,
            seed,
        };
        let accuracy_epsilons = f.list("attack.accuracy_epsilons", vec![0.05, 0.1])?;

        let eval = EvalSection {
            pipelines: f
                .list::<String>("eval.pipelines", PipelineKind::ALL.iter().map(|k| k.name().to_string()).collect())?
                .iter()
                .map(|p| PipelineKind::parse(p).ok_or_else(|| Error::config("eval.pipelines", format!("unknown pipeline `{p}`"))))
                .collect::<Result<_>>()?,
            n_id: f.get("eval.n_id", data.n_test)?,
            n_ood: f.get("eval.n_ood", data.n_ood)?,
        };
        let certify = CertifySection {
            pipeline: f.pipeline("certify.pipeline", PipelineKind::Distro)?,
            n_id: f.get("certify.n_id", 200)?,
            n_ood: f.get("certify.n_ood", 100)?,
        };
        let sweep = SweepSection {
            n_betas: f.get("sweep.n_betas", 30)?,
            beta_max: f.get("sweep.beta_max", 1e3)?,
            n_points: f.get("sweep.n_points", 100)?,
        };
        let kde = KdeSection {
            bandwidth: f.get("kde.bandwidth", 1.0)?,
            grid_points: f.get("kde.grid_points", 201)?,
            grid_min: f.get("kde.grid_min", -1.0)?,
            grid_max: f.get("kde.grid_max", 3.0)?,
            pipeline: f.pipeline("kde.pipeline", PipelineKind::Distro)?,
        };
        f.finish()?;

        let cfg = Self {
            output_dir,
            seed,
            profile,
            data,
            classifier,
            discriminator,
            bias_shift,
            denoiser,
            smoothing,
            attack,
            accuracy_epsilons,
            eval,
            certify,
            sweep,
            kde,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        check(d.dim >= 1, "data.dim", "must be >= 1")?;
        check(d.class_count >= 2, "data.class_count", "must be >= 2")?;
        check(d.radius > 0.0 && d.radius.is_finite(), "data.radius", "must be > 0")?;
        check(d.cov_scale > 0.0 && d.cov_scale.is_finite(), "data.cov_scale", "must be > 0")?;
        check(d.box_half > 0.0 && d.box_half.is_finite(), "data.box_half", "must be > 0")?;
        check(d.n_train >= 1, "data.n_train", "must be >= 1")?;
        check(d.n_test >= 20, "data.n_test", "must be >= 20")?;
        check(d.n_ood >= 1, "data.n_ood", "must be >= 1")?;
        check(!d.families.is_empty(), "data.ood_families", "must name at least one family")?;
        check(d.n_outliers >= 1, "data.n_outliers", "must be >= 1")?;
        d.mixture()?;

        train_check(&self.classifier, "classifier")?;
        train_check(&self.discriminator.train, "discriminator")?;
        if let DenoiserChoice::Learned(t) = &self.denoiser {
            train_check(t, "denoiser")?;
        }
        check(
            self.discriminator.epsilon >= 0.0 && self.discriminator.epsilon.is_finite(),
            "discriminator.epsilon",
            "must be >= 0",
        )?;
        check(self.bias_shift.is_finite(), "discriminator.bias_shift", "must be finite")?;

        let s = &self.smoothing;
        check(!s.sigmas.is_empty(), "smoothing.sigmas", "must list at least one sigma")?;
        check(s.sigmas.iter().all(|v| *v > 0.0 && v.is_finite()), "smoothing.sigmas", "every sigma must be > 0")?;
        check(s.n_samples >= 100, "smoothing.n_samples", "must be >= 100")?;
        check(s.alpha > 0.0 && s.alpha < 1.0, "smoothing.alpha", "must lie in (0, 1)")?;
        check(s.batch_size >= 1, "smoothing.batch_size", "must be >= 1")?;

        self.attack.validate().map_err(|e| Error::config("attack", e.to_string()))?;
        check(
            self.accuracy_epsilons.iter().all(|e| *e >= 0.0 && e.is_finite()),
            "attack.accuracy_epsilons",
            "every epsilon must be >= 0",
        )?;

        check(!self.eval.pipelines.is_empty(), "eval.pipelines", "must list at least one pipeline")?;
        check(
            self.eval.n_id >= 20 && self.eval.n_id <= d.n_test,
            "eval.n_id",
            "must lie in 20..=data.n_test",
        )?;
        check(self.eval.n_ood >= 1 && self.eval.n_ood <= d.n_ood, "eval.n_ood", "must lie in 1..=data.n_ood")?;
        check(self.certify.n_id <= d.n_test, "certify.n_id", "must be <= data.n_test")?;
        check(self.certify.n_ood <= d.n_ood, "certify.n_ood", "must be <= data.n_ood")?;
        check(self.sweep.n_betas >= 2, "sweep.n_betas", "must be >= 2")?;
        check(self.sweep.beta_max > 1.0 && self.sweep.beta_max.is_finite(), "sweep.beta_max", "must be > 1")?;
        check(self.sweep.n_points >= 1 && self.sweep.n_points <= d.n_test, "sweep.n_points", "must lie in 1..=data.n_test")?;
        check(self.kde.bandwidth > 0.0, "kde.bandwidth", "must be > 0")?;
        check(self.kde.grid_points >= 2, "kde.grid_points", "must be >= 2")?;
        check(self.kde.grid_max > self.kde.grid_min, "kde.grid_max", "must exceed kde.grid_min")?;
        Ok(())
    }
}
