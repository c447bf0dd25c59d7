//! Command drivers: data generation, training, certification, attacks,
//! evaluation, the scaling sweep and the certified-score KDE.
//!
//! Every command reads its inputs from and writes its outputs under
//! `config.output_dir`:
//!
//! ```text
//! data/id_train.csv  data/id_test.csv  data/ood_<family>.csv
//! models/<pipeline>.manifest (+ checkpoints)  models/train_report.csv
//! certify_<pipeline>.csv  attack_<pipeline>.csv
//! report.csv  accuracy.csv  report.md
//! scale_sweep.csv  kde.csv
//! ```
//!
//! Randomness comes from `RngStream::new(config.seed)`: substream 1 for ID
//! data, 2 for OOD families, 3 for training outliers, 4 for training seeds,
//! 5 for certification, 6 for evaluation and attacks, 7 for the sweep.

pub mod config;
pub mod report;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::RngCore;
use rayon::prelude::*;

use crate::attack::{pgd_maximize, AttackConfig};
use crate::diffusion::{find_timestep, train_denoiser, CosineSchedule, DenoiserSpec};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::ibp::{train_discriminator, DiscriminatorConfig};
use crate::joint::{
    joint_confidence, joint_negative_margin, load_manifest, log_grid, save_manifest, scale_sweep, DenoiserStage,
    Discriminator, JointDetector, PipelineKind, SweepScore,
};
use crate::metrics::{
    adversarial_side, all_metrics, certified_side, check_ordering_chain, linf_side, score_points, L2IdScoring,
    Metrics, ScoreSet, ScoreVariant,
};
use crate::neuralnet::{argmax, train_classifier, Mlp, TrainConfig, TrainReport};
use crate::numerics::{gaussian_kde, RngStream, Vector};
use crate::smoothing::CertifiedScore;
use crate::synthdata::{load_csv, sample_id, sample_ood, save_csv, Dataset, LabeledDataset, OodDataset, OodOptions, OodFamily};

use config::{DenoiserChoice, ExperimentConfig};
use report::{col, with_average, AccuracyRow, EvalReport, ReportRow};

/// In-memory copy of the generated datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub ood: Vec<OodDataset>,
}

fn root(cfg: &ExperimentConfig) -> RngStream {
    RngStream::new(cfg.seed)
}

pub fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("data")
}

pub fn models_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("models")
}

pub fn manifest_path(cfg: &ExperimentConfig, kind: PipelineKind) -> PathBuf {
    models_dir(cfg).join(format!("{}.manifest", kind.name()))
}

fn ood_file(family: &OodFamily) -> String {
    format!("ood_{}.csv", family.name())
}

/// Sample every dataset from the config's seed.
pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let prior = d.mixture()?;
    let r = root(cfg);
    let train = sample_id(&prior, d.n_train, d.box_half, &r.derive(1).derive(0))?;
    let test = sample_id(&prior, d.n_test, d.box_half, &r.derive(1).derive(1))?;
    let opts = OodOptions::new(d.box_half, Some(&prior));
    let ood = d
        .families
        .iter()
        .enumerate()
        .map(|(f, fam)| sample_ood(fam, d.dim, d.n_ood, &opts, &r.derive(2).derive(f as u64)))
        .collect::<Result<_>>()?;
    Ok(Datasets { train, test, ood })
}

/// Uniform points over the data box outside the mixture cores, used for
/// outlier exposure and discriminator training.
pub fn training_outliers(cfg: &ExperimentConfig) -> Result<OodDataset> {
    let d = &cfg.data;
    let prior = d.mixture()?;
    sample_ood(
        &OodFamily::UniformNoise,
        d.dim,
        d.n_outliers,
        &OodOptions::new(d.box_half, Some(&prior)),
        &root(cfg).derive(3),
    )
}

/// Write the ID train/test sets and one file per OOD family. On failure,
/// files written by this call are removed.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = generate_datasets(cfg)?;
    let dir = data_dir(cfg);
    let mut jobs = vec![
        (dir.join("id_train.csv"), Dataset::Id(data.train)),
        (dir.join("id_test.csv"), Dataset::Id(data.test)),
    ];
    for (fam, o) in cfg.data.families.iter().zip(data.ood) {
        jobs.push((dir.join(ood_file(fam)), Dataset::Ood(o)));
    }
    let mut written = Vec::new();
    for (path, ds) in &jobs {
        if let Err(e) = save_csv(ds, path) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path.clone());
    }
    log::info!("wrote {} dataset files to {}", written.len(), dir.display());
    Ok(written)
}

/// Load the datasets written by [`cmd_generate`].
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    let dir = data_dir(cfg);
    let id = |name: &str| load_csv(&dir.join(name)).and_then(Dataset::into_id);
    let train = id("id_train.csv")?;
    let test = id("id_test.csv")?;
    let ood = cfg
        .data
        .families
        .iter()
        .map(|f| load_csv(&dir.join(ood_file(f))).and_then(Dataset::into_ood))
        .collect::<Result<Vec<_>>>()?;
    let stale = |key: &str, what: String| Error::config(key, format!("data files have {what}; rerun generate"));
    for ds in [train.dim, test.dim].into_iter().chain(ood.iter().map(|o| o.dim)) {
        if ds != cfg.data.dim {
            return Err(stale("data.dim", format!("dim {ds}")));
        }
    }
    if train.len() != cfg.data.n_train {
        return Err(stale("data.n_train", format!("{} training points", train.len())));
    }
    if test.len() != cfg.data.n_test {
        return Err(stale("data.n_test", format!("{} test points", test.len())));
    }
    if let Some(o) = ood.iter().find(|o| o.len() != cfg.data.n_ood) {
        return Err(stale("data.n_ood", format!("{} `{}` points", o.len(), o.family)));
    }
    Ok(Datasets { train, test, ood })
}

fn with_seed(tc: &TrainConfig, stream: &RngStream) -> TrainConfig {
    TrainConfig {
        seed: stream.derive(tc.seed).rng().next_u64(),
        ..tc.clone()
    }
}

/// One trained component and its training report.
#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: &'static str,
    pub report: TrainReport,
}

/// Trains components on demand and shares them across pipelines.
pub struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Datasets,
    outliers: Option<OodDataset>,
    plain: Option<Mlp>,
    oe: Option<Mlp>,
    disc: Option<Mlp>,
    denoiser: Option<DenoiserSpec>,
    pub reports: Vec<ComponentReport>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a Datasets) -> Self {
        Self {
            cfg,
            data,
            outliers: None,
            plain: None,
            oe: None,
            disc: None,
            denoiser: None,
            reports: Vec::new(),
        }
    }

    fn seeds(&self, k: u64) -> RngStream {
        root(self.cfg).derive(4).derive(k)
    }

    fn outliers(&mut self) -> Result<&OodDataset> {
        if self.outliers.is_none() {
            self.outliers = Some(training_outliers(self.cfg)?);
        }
        Ok(self.outliers.as_ref().expect("just set"))
    }

    fn record(&mut self, name: &'static str, report: TrainReport) {
        log::info!(
            "{name}: loss {:.4} -> {:.4}, train accuracy {:.4}",
            report.initial_loss,
            report.final_loss,
            report.train_accuracy
        );
        self.reports.push(ComponentReport { name, report });
    }

    fn plain_classifier(&mut self) -> Result<Mlp> {
        if let Some(m) = &self.plain {
            return Ok(m.clone());
        }
        let tc = TrainConfig {
            oe_weight: 0.0,
            ..with_seed(&self.cfg.classifier, &self.seeds(0))
        };
        let t = train_classifier(&self.data.train, self.cfg.data.class_count, &tc, None)?;
        self.record("plain_classifier", t.report);
        self.plain = Some(t.model.clone());
        Ok(t.model)
    }

    fn oe_classifier(&mut self) -> Result<Mlp> {
        if let Some(m) = &self.oe {
            return Ok(m.clone());
        }
        let tc = with_seed(&self.cfg.classifier, &self.seeds(1));
        let k = self.cfg.data.class_count;
        self.outliers()?;
        let t = train_classifier(&self.data.train, k, &tc, self.outliers.as_ref())?;
        self.record("oe_classifier", t.report);
        self.oe = Some(t.model.clone());
        Ok(t.model)
    }

    fn discriminator(&mut self) -> Result<Discriminator> {
        if self.disc.is_none() {
            let dc = DiscriminatorConfig {
                train: with_seed(&self.cfg.discriminator.train, &self.seeds(2)),
                ..self.cfg.discriminator.clone()
            };
            self.outliers()?;
            let t = train_discriminator(&self.data.train, self.outliers.as_ref().expect("just set"), &dc)?;
            self.record("discriminator", t.report);
            self.disc = Some(t.model);
        }
        Ok(Discriminator {
            model: self.disc.clone().expect("just set"),
            bias_shift: self.cfg.bias_shift,
        })
    }

    fn denoiser(&mut self) -> Result<DenoiserStage> {
        let schedule = CosineSchedule::default();
        if self.denoiser.is_none() {
            let spec = match &self.cfg.denoiser {
                DenoiserChoice::Analytic => DenoiserSpec::AnalyticMixture(self.cfg.data.mixture()?),
                DenoiserChoice::Learned(tc) => {
                    let sigma_max = self.cfg.smoothing.sigmas.iter().copied().fold(0.0, f64::max);
                    let t_max = find_timestep(&schedule, sigma_max)?.max(1);
                    let t = train_denoiser(&self.data.train, &schedule, t_max, &with_seed(tc, &self.seeds(3)))?;
                    self.record("denoiser", t.report);
                    DenoiserSpec::Learned(t.model)
                }
            };
            self.denoiser = Some(spec);
        }
        Ok(DenoiserStage {
            spec: self.denoiser.clone().expect("just set"),
            schedule,
            sigma: self.cfg.smoothing.report_sigma(),
        })
    }

    /// Assemble (training as needed) the detector of `kind`.
    pub fn detector(&mut self, kind: PipelineKind) -> Result<JointDetector> {
        match kind {
            PipelineKind::Plain => JointDetector::new(kind, self.plain_classifier()?, None, None),
            PipelineKind::Oe => JointDetector::new(kind, self.oe_classifier()?, None, None),
            PipelineKind::ProodLike => {
                let c = self.oe_classifier()?;
                JointDetector::new(kind, c, Some(self.discriminator()?), None)
            }
            PipelineKind::Distro => {
                let c = self.oe_classifier()?;
                let d = self.discriminator()?;
                JointDetector::new(kind, c, Some(d), Some(self.denoiser()?))
            }
        }
    }
}

/// Train the listed pipelines (all of `eval.pipelines` when `None`) and
/// write their manifests plus `models/train_report.csv` with header
/// `component,initial_loss,final_loss,train_accuracy`.
pub fn cmd_train(cfg: &ExperimentConfig, only: Option<PipelineKind>) -> Result<Vec<PathBuf>> {
    let data = load_datasets(cfg)?;
    let kinds = match only {
        Some(k) => vec![k],
        None => cfg.eval.pipelines.clone(),
    };
    let mut trainer = Trainer::new(cfg, &data);
    let mut written = Vec::new();
    for kind in kinds {
        let det = trainer.detector(kind)?;
        let path = manifest_path(cfg, kind);
        save_manifest(&det, &path)?;
        written.push(path);
    }
    let mut csv = String::from("component,initial_loss,final_loss,train_accuracy\n");
    for c in &trainer.reports {
        let r = &c.report;
        let _ = writeln!(csv, "{},{:.6},{:.6},{:.6}", c.name, r.initial_loss, r.final_loss, r.train_accuracy);
    }
    let path = models_dir(cfg).join("train_report.csv");
    write_atomic(&path, csv.as_bytes())?;
    written.push(path);
    Ok(written)
}

pub fn load_detector(cfg: &ExperimentConfig, kind: PipelineKind) -> Result<JointDetector> {
    let det = load_manifest(&manifest_path(cfg, kind))?;
    if det.kind != kind {
        return Err(Error::Invariant(format!(
            "manifest for `{}` describes a `{}` pipeline",
            kind.name(),
            det.kind.name()
        )));
    }
    Ok(det)
}

/// One certified point of [`certify_points`].
#[derive(Debug, Clone)]
pub struct CertifiedPoint {
    pub point_id: String,
    pub ood: bool,
    pub score: CertifiedScore,
}

/// Certificates for the first `certify.n_id` test points and the first
/// `certify.n_ood` points of every OOD family at the report σ.
pub fn certify_points(cfg: &ExperimentConfig, det: &JointDetector, data: &Datasets) -> Result<Vec<CertifiedPoint>> {
    let scfg = cfg.smoothing.config(cfg.smoothing.report_sigma());
    let base = root(cfg).derive(5);
    let mut out = Vec::new();
    let id = &data.test.points[..cfg.certify.n_id];
    for (i, s) in certified_side(det, id, &scfg, &base.derive(0))?.into_iter().enumerate() {
        out.push(CertifiedPoint {
            point_id: format!("id-{i}"),
            ood: false,
            score: s,
        });
    }
    for (f, o) in data.ood.iter().enumerate() {
        let pts = &o.points[..cfg.certify.n_ood.min(o.len())];
        for (i, s) in certified_side(det, pts, &scfg, &base.derive(1).derive(f as u64))?.into_iter().enumerate() {
            out.push(CertifiedPoint {
                point_id: format!("{}-{i}", o.family),
                ood: true,
                score: s,
            });
        }
    }
    Ok(out)
}

pub const CERTIFY_HEADER: &str = "point_id,side,p_lower,radius,confidence_bound,certified";

/// Write `certify_<pipeline>.csv` for `certify.pipeline`.
pub fn cmd_certify(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let data = load_datasets(cfg)?;
    let det = load_detector(cfg, cfg.certify.pipeline)?;
    let points = certify_points(cfg, &det, &data)?;
    let mut csv = format!("{CERTIFY_HEADER}\n");
    for p in &points {
        let s = &p.score;
        let _ = writeln!(
            csv,
            "{},{},{:.10},{:.10},{:.10},{}",
            p.point_id,
            if p.ood { "ood" } else { "id" },
            s.p_lower,
            s.radius,
            s.score(),
            u8::from(s.certified)
        );
    }
    let path = cfg.output_dir.join(format!("certify_{}.csv", cfg.certify.pipeline.name()));
    write_atomic(&path, csv.as_bytes())?;
    Ok(path)
}

fn eval_stream(cfg: &ExperimentConfig, kind: PipelineKind) -> RngStream {
    let idx = PipelineKind::ALL.iter().position(|k| *k == kind).expect("known kind");
    root(cfg).derive(6).derive(idx as u64)
}

/// Per-point streams: ID side `base.derive(0)`, OOD family `f`
/// `base.derive(1).derive(f)`; certification uses `base.derive(2)` and
/// `base.derive(3)` in the same layout.
fn ood_stream(base: &RngStream, f: usize) -> RngStream {
    base.derive(1).derive(f as u64)
}

pub const ATTACK_HEADER: &str = "ood_family,point_id,clean,adversarial,start";

/// Attack the evaluation OOD points of every pipeline and write
/// `attack_<pipeline>.csv`. The streams match [`cmd_evaluate`].
pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = load_datasets(cfg)?;
    let mut written = Vec::new();
    for &kind in &cfg.eval.pipelines {
        let det = load_detector(cfg, kind)?;
        let base = eval_stream(cfg, kind);
        let mut csv = format!("{ATTACK_HEADER}\n");
        for (f, o) in data.ood.iter().enumerate() {
            let pts = &o.points[..cfg.eval.n_ood];
            let score = |x: &[f64], s: &RngStream| crate::joint::joint_msp_and_gradient(&det, x, s);
            let rows = score_points(pts, &ood_stream(&base, f), |z, s| {
                let clean = joint_confidence(&det, z, s)?.1;
                let res = pgd_maximize(&score, z, &cfg.attack, cfg.data.box_half, s)?;
                Ok((clean, res.score, res.start))
            })?;
            for (i, (c, a, start)) in rows.into_iter().enumerate() {
                let _ = writeln!(csv, "{},{}-{i},{c:.10},{a:.10},{start}", o.family, o.family);
            }
        }
        let path = cfg.output_dir.join(format!("attack_{}.csv", kind.name()));
        write_atomic(&path, csv.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Fraction of points whose joint prediction survives a margin attack.
/// Point `i` uses `stream.derive(i)` for both the attack and the final
/// prediction.
pub fn joint_attack_accuracy(
    det: &JointDetector,
    data: &LabeledDataset,
    cfg: &AttackConfig,
    box_half: f64,
    stream: &RngStream,
) -> Result<f64> {
    cfg.validate()?;
    let survived = data
        .points
        .par_iter()
        .zip(data.labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| {
            let s = stream.derive(i as u64);
            if argmax(&joint_confidence(det, x, &s)?.0) != y {
                return Ok(false);
            }
            if cfg.epsilon == 0.0 {
                return Ok(true);
            }
            let score = |p: &[f64], s: &RngStream| joint_negative_margin(det, p, y, s);
            let res = pgd_maximize(&score, x, cfg, box_half, &s)?;
            Ok(argmax(&joint_confidence(det, &res.point, &s)?.0) == y)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(survived.iter().filter(|s| **s).count() as f64 / data.len().max(1) as f64)
}

fn pct(m: Metrics) -> [f64; 3] {
    [100.0 * m.auc, 100.0 * m.aupr, 100.0 * m.fpr]
}

/// Report rows and accuracy block for one pipeline.
pub fn evaluate_pipeline(
    cfg: &ExperimentConfig,
    det: &JointDetector,
    data: &Datasets,
) -> Result<(Vec<ReportRow>, AccuracyRow)> {
    let kind = det.kind;
    let base = eval_stream(cfg, kind);
    let id = data.test.head(cfg.eval.n_id);
    let box_half = cfg.data.box_half;

    let clean_id_full = score_points(&id.points, &base.derive(0), |x, s| joint_confidence(det, x, s))?;
    let clean_id: Vec<f64> = clean_id_full.iter().map(|r| r.1).collect();
    let clean_acc = clean_id_full
        .iter()
        .zip(&id.labels)
        .filter(|((p, _), y)| argmax(p) == **y)
        .count() as f64
        / id.len() as f64;

    let mut certified_acc = Vec::new();
    let mut cert_id_report = Vec::new();
    for (si, &sigma) in cfg.smoothing.sigmas.iter().enumerate() {
        let cert = certified_side(det, &id.points, &cfg.smoothing.config(sigma), &base.derive(2).derive(si as u64))?;
        let hits = cert
            .iter()
            .zip(&id.labels)
            .filter(|(c, y)| c.certified && c.top_class == **y)
            .count();
        certified_acc.push(100.0 * hits as f64 / id.len() as f64);
        if si == 0 {
            cert_id_report = cert.iter().map(CertifiedScore::score).collect();
        }
    }
    let l2_id = match cfg.smoothing.id_scoring {
        L2IdScoring::Certified => cert_id_report,
        L2IdScoring::Clean => clean_id.clone(),
    };

    let adversarial_acc = cfg
        .accuracy_epsilons
        .iter()
        .map(|&e| {
            let ac = AttackConfig {
                epsilon: e,
                ..cfg.attack.clone()
            };
            joint_attack_accuracy(det, &id, &ac, box_half, &base.derive(0)).map(|a| 100.0 * a)
        })
        .collect::<Result<Vec<_>>>()?;

    let report_cfg = cfg.smoothing.config(cfg.smoothing.report_sigma());
    let mut rows = Vec::new();
    for (f, o) in data.ood.iter().enumerate() {
        let pts = &o.points[..cfg.eval.n_ood];
        let stream = ood_stream(&base, f);
        let clean_ood = score_points(pts, &stream, |x, s| joint_confidence(det, x, s).map(|r| r.1))?;
        let adv_ood = adversarial_side(det, pts, &cfg.attack, box_half, &stream)?;
        let clean = ScoreSet::new(clean_id.clone(), clean_ood, ScoreVariant::Clean)?;
        let adv = ScoreSet::new(clean_id.clone(), adv_ood, ScoreVariant::Adversarial)?;
        let linf = if kind.has_discriminator() {
            let upper = linf_side(det, pts, cfg.attack.epsilon, box_half)?;
            Some(ScoreSet::new(clean_id.clone(), upper, ScoreVariant::GuaranteedLinf)?)
        } else {
            None
        };
        check_ordering_chain(&clean, &adv, linf.as_ref())
            .map_err(|e| Error::Invariant(format!("{}/{}: {e}", kind.name(), o.family)))?;
        let cert_ood = certified_side(det, pts, &report_cfg, &base.derive(3).derive(f as u64))?;
        let l2 = ScoreSet::new(
            l2_id.clone(),
            cert_ood.iter().map(CertifiedScore::score).collect(),
            ScoreVariant::GuaranteedL2,
        )?;

        let [auc, aupr, fpr] = pct(all_metrics(&clean)?);
        let [aauc, aaupr, afpr] = pct(all_metrics(&adv)?);
        let [gauc2, gaupr2, gfpr2] = pct(all_metrics(&l2)?);
        // no discriminator: no ℓ∞ guarantee at all
        let [gaucinf, gauprinf, gfprinf] = match &linf {
            Some(s) => pct(all_metrics(s)?),
            None => [0.0, 0.0, 100.0],
        };
        let mut values = [0.0; 13];
        values[col::ACC] = 100.0 * clean_acc;
        values[col::AUC] = auc;
        values[col::GAUC_L2] = gauc2;
        values[col::GAUC_LINF] = gaucinf;
        values[col::AAUC] = aauc;
        values[col::AUPR] = aupr;
        values[col::GAUPR_L2] = gaupr2;
        values[col::GAUPR_LINF] = gauprinf;
        values[col::AAUPR] = aaupr;
        values[col::FPR] = fpr;
        values[col::GFPR_L2] = gfpr2;
        values[col::GFPR_LINF] = gfprinf;
        values[col::AFPR] = afpr;
        rows.push(ReportRow {
            pipeline: kind.name().into(),
            family: o.family.clone(),
            values,
        });
    }
    let accuracy = AccuracyRow {
        pipeline: kind.name().into(),
        clean: 100.0 * clean_acc,
        adversarial: adversarial_acc,
        certified: certified_acc,
    };
    Ok((with_average(kind.name(), rows), accuracy))
}

/// Evaluate every pipeline of `eval.pipelines` from its manifest.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let data = load_datasets(cfg)?;
    let mut report = EvalReport {
        rows: Vec::new(),
        accuracy_epsilons: cfg.accuracy_epsilons.clone(),
        sigmas: cfg.smoothing.sigmas.clone(),
        accuracy: Vec::new(),
    };
    for &kind in &cfg.eval.pipelines {
        let det = load_detector(cfg, kind)?;
        log::info!("evaluating {}", kind.name());
        let (rows, acc) = evaluate_pipeline(cfg, &det, &data)?;
        report.rows.extend(rows);
        report.accuracy.push(acc);
    }
    report.validate()?;
    Ok(report)
}

/// Run [`evaluate`] and write `report.csv`, `accuracy.csv` and `report.md`.
/// Nothing is written when an ordering check fails.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let report = evaluate(cfg)?;
    write_atomic(&cfg.output_dir.join("report.csv"), report.to_csv().as_bytes())?;
    write_atomic(&cfg.output_dir.join("accuracy.csv"), report.accuracy_csv().as_bytes())?;
    write_atomic(&cfg.output_dir.join("report.md"), report.to_markdown().as_bytes())?;
    Ok(report)
}

/// One row of the scaling sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub pipeline: PipelineKind,
    pub msp: f64,
    pub energy: f64,
}

/// Mean joint MSP and classifier energy at `β·x` over the first
/// `sweep.n_points` test points, for `β` on a log grid over `[1, beta_max]`.
pub fn scale_sweep_rows(cfg: &ExperimentConfig, det: &JointDetector, directions: &[Vector]) -> Result<Vec<SweepRow>> {
    let betas = log_grid(1.0, cfg.sweep.beta_max, cfg.sweep.n_betas);
    let stream = root(cfg).derive(7);
    let per_point = score_points(directions, &stream, |x, s| {
        Ok((
            scale_sweep(det, x, &betas, SweepScore::Msp, s)?,
            scale_sweep(det, x, &betas, SweepScore::Energy, s)?,
        ))
    })?;
    let n = directions.len() as f64;
    Ok(betas
        .iter()
        .enumerate()
        .map(|(b, &beta)| SweepRow {
            beta,
            pipeline: det.kind,
            msp: per_point.iter().map(|p| p.0[b]).sum::<f64>() / n,
            energy: per_point.iter().map(|p| p.1[b]).sum::<f64>() / n,
        })
        .collect())
}

pub const SWEEP_HEADER: &str = "beta,pipeline,msp,energy";

pub fn cmd_scale_sweep(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let data = load_datasets(cfg)?;
    let dirs = &data.test.points[..cfg.sweep.n_points];
    let mut csv = format!("{SWEEP_HEADER}\n");
    for &kind in &cfg.eval.pipelines {
        let det = load_detector(cfg, kind)?;
        for r in scale_sweep_rows(cfg, &det, dirs)? {
            let _ = writeln!(csv, "{:.6},{},{:.10},{:.10}", r.beta, kind.name(), r.msp, r.energy);
        }
    }
    let path = cfg.output_dir.join("scale_sweep.csv");
    write_atomic(&path, csv.as_bytes())?;
    Ok(path)
}

/// `(grid, id_density, ood_density)` of the certified scores.
pub fn kde_curves(cfg: &ExperimentConfig, points: &[CertifiedPoint]) -> Result<Vec<(f64, f64, f64)>> {
    let k = &cfg.kde;
    let grid: Vec<f64> = (0..k.grid_points)
        .map(|i| k.grid_min + (k.grid_max - k.grid_min) * i as f64 / (k.grid_points - 1) as f64)
        .collect();
    let side = |ood: bool| -> Vec<f64> { points.iter().filter(|p| p.ood == ood).map(|p| p.score.score()).collect() };
    let id = gaussian_kde(&side(false), k.bandwidth, &grid)?;
    let ood = gaussian_kde(&side(true), k.bandwidth, &grid)?;
    Ok(grid.into_iter().zip(id).zip(ood).map(|((g, a), b)| (g, a, b)).collect())
}

pub const KDE_HEADER: &str = "grid,id_density,ood_density";

pub fn cmd_kde(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let data = load_datasets(cfg)?;
    let det = load_detector(cfg, cfg.kde.pipeline)?;
    let points = certify_points(cfg, &det, &data)?;
    let mut csv = format!("{KDE_HEADER}\n");
    for (g, a, b) in kde_curves(cfg, &points)? {
        let _ = writeln!(csv, "{g:.6},{a:.10},{b:.10}");
    }
    let path = cfg.output_dir.join("kde.csv");
    write_atomic(&path, csv.as_bytes())?;
    Ok(path)
}
