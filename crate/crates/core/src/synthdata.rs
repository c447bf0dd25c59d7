//! Synthetic in-distribution mixtures, out-of-distribution families and their
//! CSV persistence.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::fsutil;
use crate::numerics::{fill_gaussian, RngStream, Vector};

/// One Gaussian component of the in-distribution prior.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub class: usize,
    pub mean: Vector,
    pub weight: f64,
}

/// Isotropic Gaussian mixture with one or more components per class.
///
/// `cov_scale` is the per-coordinate variance: every component has
/// covariance `cov_scale * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub dim: usize,
    pub class_count: usize,
    pub components: Vec<MixtureComponent>,
    pub cov_scale: f64,
}

impl MixtureSpec {
    /// `class_count` equal-weight components with means evenly spaced on a
    /// circle of `radius` in the first two coordinates (on a segment when
    /// `dim == 1`).
    pub fn circle(dim: usize, class_count: usize, radius: f64, cov_scale: f64) -> Result<Self> {
        if dim == 0 || class_count == 0 {
            return Err(Error::domain("mixture needs dim >= 1 and class_count >= 1"));
        }
        let components = (0..class_count)
            .map(|c| {
                let mut mean = vec![0.0; dim];
                if dim == 1 {
                    mean[0] = if class_count == 1 {
                        0.0
                    } else {
                        -radius + 2.0 * radius * c as f64 / (class_count - 1) as f64
                    };
                } else {
                    let angle = 2.0 * std::f64::consts::PI * c as f64 / class_count as f64;
                    mean[0] = radius * angle.cos();
                    mean[1] = radius * angle.sin();
                }
                MixtureComponent {
                    class: c,
                    mean,
                    weight: 1.0 / class_count as f64,
                }
            })
            .collect();
        let spec = Self {
            dim,
            class_count,
            components,
            cov_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.class_count == 0 || self.components.is_empty() {
            return Err(Error::domain("mixture needs dim, classes and components"));
        }
        if !(self.cov_scale > 0.0) || !self.cov_scale.is_finite() {
            return Err(Error::domain(format!("cov_scale must be > 0, got {}", self.cov_scale)));
        }
        let mut total = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            check_dim(self.dim, c.mean.len())?;
            if c.class >= self.class_count {
                return Err(Error::domain(format!("component {i} has class {} >= K", c.class)));
            }
            if !(c.weight >= 0.0) || c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("component {i} has invalid weight or mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Radius of the 3-standard-deviation core around each component mean.
    pub fn core_radius(&self) -> f64 {
        3.0 * self.cov_scale.sqrt()
    }

    pub fn in_core(&self, x: &[f64]) -> bool {
        let r2 = self.core_radius().powi(2);
        self.components.iter().any(|c| sq_dist(&c.mean, x) <= r2)
    }

    fn pick_component<R: Rng>(&self, rng: &mut R) -> &MixtureComponent {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        self.components.last().expect("validated non-empty")
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn clip_to_box(x: &mut [f64], half: f64) {
    for v in x {
        *v = v.clamp(-half, half);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub dim: usize,
    pub points: Vec<Vector>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.points.len() != self.labels.len() {
            return Err(Error::domain("points and labels differ in length"));
        }
        for p in &self.points {
            check_dim(self.dim, p.len())?;
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::domain(format!("label {l} out of range for K = {class_count}")));
        }
        Ok(())
    }

    /// First `n` points (or all of them).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            dim: self.dim,
            points: self.points[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodDataset {
    pub dim: usize,
    pub family: String,
    pub points: Vec<Vector>,
}

impl OodDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            dim: self.dim,
            family: self.family.clone(),
            points: self.points[..n].to_vec(),
        }
    }
}

/// Out-of-distribution families with their geometric parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum OodFamily {
    /// Uniform in the shell `inner <= |x| <= outer`.
    Annulus { inner: f64, outer: f64 },
    /// Uniform in `[-half_width, half_width]^d`.
    UniformBox { half_width: f64 },
    /// N(distance * 1/sqrt(d), std² I): a blob along the diagonal.
    FarGaussian { distance: f64, std: f64 },
    /// The in-distribution mixture rotated by `rotation` radians in the first
    /// coordinate plane and pushed out by `radius_scale`.
    ShiftedMixture { rotation: f64, radius_scale: f64 },
    /// N(0, std² I) around the box center.
    GaussianNoise { std: f64 },
    /// Uniform over the whole data box.
    UniformNoise,
}

impl OodFamily {
    pub fn name(&self) -> &'static str {
        match self {
            OodFamily::Annulus { .. } => "annulus",
            OodFamily::UniformBox { .. } => "uniform_box",
            OodFamily::FarGaussian { .. } => "far_gaussian",
            OodFamily::ShiftedMixture { .. } => "shifted_mixture",
            OodFamily::GaussianNoise { .. } => "gaussian_noise",
            OodFamily::UniformNoise => "uniform_noise",
        }
    }

    /// The six families at their default desk geometry.
    pub fn defaults() -> Vec<OodFamily> {
        vec![
            OodFamily::Annulus { inner: 4.0, outer: 5.0 },
            OodFamily::UniformBox { half_width: 5.0 },
            OodFamily::FarGaussian { distance: 5.0, std: 0.4 },
            OodFamily::ShiftedMixture {
                rotation: std::f64::consts::FRAC_PI_4,
                radius_scale: 1.75,
            },
            OodFamily::GaussianNoise { std: 2.0 },
            OodFamily::UniformNoise,
        ]
    }

    pub fn default_by_name(name: &str) -> Option<OodFamily> {
        Self::defaults().into_iter().find(|f| f.name() == name)
    }

    fn validate(&self, box_half: f64) -> Result<()> {
        let ok = match *self {
            OodFamily::Annulus { inner, outer } => inner >= 0.0 && inner < outer && outer.is_finite(),
            OodFamily::UniformBox { half_width } => half_width > 0.0 && half_width <= box_half,
            OodFamily::FarGaussian { distance, std } => distance.is_finite() && std >= 0.0,
            OodFamily::ShiftedMixture { rotation, radius_scale } => {
                rotation.is_finite() && radius_scale > 0.0
            }
            OodFamily::GaussianNoise { std } => std >= 0.0 && std.is_finite(),
            OodFamily::UniformNoise => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid parameters for OOD family {self:?}")))
        }
    }
}

/// Shared knobs for OOD generation.
#[derive(Debug, Clone, Copy)]
pub struct OodOptions<'a> {
    /// Half width `B` of the data box `[-B, B]^d`; every point is clipped into it.
    pub box_half: f64,
    /// In-distribution prior. Required by `ShiftedMixture`; when
    /// `exclude_cores` is set, draws landing in its 3σ cores are rejected.
    pub id_prior: Option<&'a MixtureSpec>,
    pub exclude_cores: bool,
}

impl<'a> OodOptions<'a> {
    pub fn new(box_half: f64, id_prior: Option<&'a MixtureSpec>) -> Self {
        Self {
            box_half,
            id_prior,
            exclude_cores: id_prior.is_some(),
        }
    }
}

/// Draw `n` labeled points from the mixture, point `i` from substream `i`.
pub fn sample_id(spec: &MixtureSpec, n: usize, box_half: f64, stream: &RngStream) -> Result<LabeledDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::domain("sample_id needs n >= 1"));
    }
    let std = spec.cov_scale.sqrt();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut noise = vec![0.0; spec.dim];
    for i in 0..n {
        let mut rng = stream.derive(i as u64).rng();
        let comp = spec.pick_component(&mut rng);
        fill_gaussian(&mut rng, &mut noise, std);
        let mut x: Vector = comp.mean.iter().zip(&noise).map(|(m, e)| m + e).collect();
        clip_to_box(&mut x, box_half);
        points.push(x);
        labels.push(comp.class);
    }
    Ok(LabeledDataset {
        dim: spec.dim,
        points,
        labels,
    })
}

const MAX_REJECTIONS_PER_POINT: usize = 10_000;

/// Draw `n` points of `family`, point `i` from substream `i`.
pub fn sample_ood(
    family: &OodFamily,
    dim: usize,
    n: usize,
    opts: &OodOptions<'_>,
    stream: &RngStream,
) -> Result<OodDataset> {
    if n == 0 || dim == 0 {
        return Err(Error::domain("sample_ood needs n >= 1 and dim >= 1"));
    }
    family.validate(opts.box_half)?;
    if let Some(prior) = opts.id_prior {
        prior.validate()?;
        check_dim(dim, prior.dim)?;
    }
    let shifted = match family {
        OodFamily::ShiftedMixture { rotation, radius_scale } => {
            let prior = opts
                .id_prior
                .ok_or_else(|| Error::domain("shifted_mixture needs the in-distribution prior"))?;
            Some(shift_mixture(prior, *rotation, *radius_scale))
        }
        _ => None,
    };
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream.derive(i as u64).rng();
        let mut accepted = None;
        for _ in 0..MAX_REJECTIONS_PER_POINT {
            let mut x = draw_family(family, dim, opts.box_half, shifted.as_ref(), &mut rng);
            clip_to_box(&mut x, opts.box_half);
            let rejected = opts.exclude_cores && opts.id_prior.is_some_and(|p| p.in_core(&x));
            if !rejected {
                accepted = Some(x);
                break;
            }
        }
        let x = accepted.ok_or_else(|| {
            Error::domain(format!(
                "{}: could not draw a point outside the in-distribution cores",
                family.name()
            ))
        })?;
        points.push(x);
    }
    Ok(OodDataset {
        dim,
        family: family.name().to_string(),
        points,
    })
}

fn shift_mixture(prior: &MixtureSpec, rotation: f64, radius_scale: f64) -> MixtureSpec {
    let (s, c) = rotation.sin_cos();
    let mut out = prior.clone();
    for comp in &mut out.components {
        if comp.mean.len() >= 2 {
            let (a, b) = (comp.mean[0], comp.mean[1]);
            comp.mean[0] = c * a - s * b;
            comp.mean[1] = s * a + c * b;
        }
        for v in &mut comp.mean {
            *v *= radius_scale;
        }
    }
    out
}

fn draw_family<R: Rng>(
    family: &OodFamily,
    dim: usize,
    box_half: f64,
    shifted: Option<&MixtureSpec>,
    rng: &mut R,
) -> Vector {
    let mut x = vec![0.0; dim];
    match *family {
        OodFamily::Annulus { inner, outer } => {
            fill_gaussian(rng, &mut x, 1.0);
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let d = dim as f64;
            let u: f64 = rng.random();
            let r = (inner.powf(d) + u * (outer.powf(d) - inner.powf(d))).powf(1.0 / d);
            let r = r.clamp(inner, outer);
            for v in &mut x {
                *v *= r / norm;
            }
        }
        OodFamily::UniformBox { half_width } => {
            for v in &mut x {
                *v = rng.random_range(-half_width..=half_width);
            }
        }
        OodFamily::FarGaussian { distance, std } => {
            fill_gaussian(rng, &mut x, std);
            let c = distance / (dim as f64).sqrt();
            for v in &mut x {
                *v += c;
            }
        }
        OodFamily::ShiftedMixture { .. } => {
            let spec = shifted.expect("prepared by caller");
            let comp = spec.pick_component(rng);
            fill_gaussian(rng, &mut x, spec.cov_scale.sqrt());
            for (v, m) in x.iter_mut().zip(&comp.mean) {
                *v += m;
            }
        }
        OodFamily::GaussianNoise { std } => fill_gaussian(rng, &mut x, std),
        OodFamily::UniformNoise => {
            for v in &mut x {
                *v = rng.random_range(-box_half..=box_half);
            }
        }
    }
    x
}

/// Either kind of dataset, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Id(LabeledDataset),
    Ood(OodDataset),
}

impl Dataset {
    pub fn dim(&self) -> usize {
        match self {
            Dataset::Id(d) => d.dim,
            Dataset::Ood(d) => d.dim,
        }
    }

    pub fn into_id(self) -> Result<LabeledDataset> {
        match self {
            Dataset::Id(d) => Ok(d),
            Dataset::Ood(_) => Err(Error::domain("expected an in-distribution dataset")),
        }
    }

    pub fn into_ood(self) -> Result<OodDataset> {
        match self {
            Dataset::Ood(d) => Ok(d),
            Dataset::Id(_) => Err(Error::domain("expected an OOD dataset")),
        }
    }
}

const CSV_MAGIC: &str = "# smoothcert-data v1";
const ID_FAMILY: &str = "mixture";

pub fn dataset_to_csv(dataset: &Dataset) -> String {
    let mut out = String::new();
    match dataset {
        Dataset::Id(d) => {
            let _ = writeln!(out, "{CSV_MAGIC} dim={} kind=id family={ID_FAMILY}", d.dim);
            for (p, l) in d.points.iter().zip(&d.labels) {
                for v in p {
                    let _ = write!(out, "{v:.16e},");
                }
                let _ = writeln!(out, "{l}");
            }
        }
        Dataset::Ood(d) => {
            let _ = writeln!(out, "{CSV_MAGIC} dim={} kind=ood family={}", d.dim, d.family);
            for p in &d.points {
                let row: Vec<String> = p.iter().map(|v| format!("{v:.16e}")).collect();
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
    }
    out
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, dataset_to_csv(dataset).as_bytes())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fsutil::read_to_string(path)?;
    parse_csv(&text, path)
}

pub fn parse_csv(text: &str, path: &Path) -> Result<Dataset> {
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| perr(1, "empty file, expected a smoothcert-data header".into()))?;
    let rest = header
        .strip_prefix(CSV_MAGIC)
        .ok_or_else(|| perr(1, format!("bad header `{header}`")))?;
    let (mut dim, mut kind, mut family) = (None, None, None);
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("dim", v)) => {
                dim = Some(v.parse::<usize>().map_err(|_| perr(1, format!("bad dim `{v}`")))?)
            }
            Some(("kind", v)) => kind = Some(v.to_string()),
            Some(("family", v)) => family = Some(v.to_string()),
            _ => return Err(perr(1, format!("unknown header field `{field}`"))),
        }
    }
    let dim = dim.filter(|&d| d > 0).ok_or_else(|| perr(1, "missing dim".into()))?;
    let family = family.ok_or_else(|| perr(1, "missing family".into()))?;
    let is_id = match kind.as_deref() {
        Some("id") => true,
        Some("ood") => false,
        other => return Err(perr(1, format!("kind must be id or ood, got {other:?}"))),
    };
    let expected_cols = if is_id { dim + 1 } else { dim };
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != expected_cols {
            return Err(perr(
                lineno,
                format!("expected {expected_cols} columns, found {}", cols.len()),
            ));
        }
        let mut p = Vec::with_capacity(dim);
        for c in &cols[..dim] {
            let v: f64 = c
                .trim()
                .parse()
                .map_err(|_| perr(lineno, format!("non-numeric value `{c}`")))?;
            if !v.is_finite() {
                return Err(perr(lineno, format!("non-finite value `{c}`")));
            }
            p.push(v);
        }
        if is_id {
            let l: usize = cols[dim]
                .trim()
                .parse()
                .map_err(|_| perr(lineno, format!("bad label `{}`", cols[dim])))?;
            labels.push(l);
        }
        points.push(p);
    }
    Ok(if is_id {
        Dataset::Id(LabeledDataset { dim, points, labels })
    } else {
        Dataset::Ood(OodDataset { dim, family, points })
    })
}
