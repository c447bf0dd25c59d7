//! Acceptance suite. Each criterion runs in turn and prints one
//! `criterion N ... PASS|FAIL` line; the test fails if any criterion fails.
//!
//! Sizes are reduced where a criterion only fixes a minimum (points, pairs,
//! directions) so the suite fits in a normal `cargo test` run.

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use smoothcert::attack::{pgd_maximize, AttackConfig};
use smoothcert::diffusion::{denoise_once, find_timestep, posterior_mean, scale_to_timestep, CosineSchedule, DenoiserSpec};
use smoothcert::experiment::config::{ExperimentConfig, Profile};
use smoothcert::experiment::report::{col, EvalReport, AVERAGE_FAMILY};
use smoothcert::experiment::{evaluate_pipeline, generate_datasets, Datasets, Trainer};
use smoothcert::ibp::discriminator_upper_logit;
use smoothcert::joint::{certified_l2_score, joint_confidence, joint_probs_at_noisy, JointDetector, PipelineKind};
use smoothcert::metrics::{adversarial_side, auc, aupr, clean_side, fpr_at_95_tpr, ScoreSet, ScoreVariant};
use smoothcert::neuralnet::msp;
use smoothcert::numerics::{clopper_pearson_lower, std_normal_quantile, RngStream, Vector};
use smoothcert::smoothing::{lipschitz_constant, SmoothingConfig};
use smoothcert::synthdata::{sample_id, MixtureComponent, MixtureSpec};

struct Fixture {
    cfg: ExperimentConfig,
    data: Datasets,
    plain: JointDetector,
    oe: JointDetector,
    prood: JointDetector,
    distro: JointDetector,
}

fn build(seed: u64) -> Fixture {
    let mut cfg = ExperimentConfig::default_with(Profile::Quick);
    cfg.seed = seed;
    cfg.eval.n_id = 200;
    cfg.eval.n_ood = 100;
    let data = generate_datasets(&cfg).unwrap();
    let (plain, oe, prood, distro) = {
        let mut t = Trainer::new(&cfg, &data);
        (
            t.detector(PipelineKind::Plain).unwrap(),
            t.detector(PipelineKind::Oe).unwrap(),
            t.detector(PipelineKind::ProodLike).unwrap(),
            t.detector(PipelineKind::Distro).unwrap(),
        )
    };
    Fixture {
        cfg,
        data,
        plain,
        oe,
        prood,
        distro,
    }
}

/// Default-geometry run shared by the criteria that need trained models.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| build(0))
}

fn rng(seed: u64) -> ChaCha8Rng {
    RngStream::new(seed).rng()
}

fn normal(r: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = StandardNormal.sample(r);
    sigma * z
}

/// Monte-Carlo mean and standard error of each smoothed class probability
/// at `x`.
fn smoothed(det: &JointDetector, x: &[f64], sigma: f64, m: usize, r: &mut ChaCha8Rng) -> (Vector, Vector) {
    let k = det.class_count;
    let (mut sum, mut sq) = (vec![0.0; k], vec![0.0; k]);
    let mut noisy = vec![0.0; x.len()];
    for _ in 0..m {
        for (n, xi) in noisy.iter_mut().zip(x) {
            *n = xi + normal(r, sigma);
        }
        let p = joint_probs_at_noisy(det, &noisy, sigma).unwrap();
        for c in 0..k {
            sum[c] += p[c];
            sq[c] += p[c] * p[c];
        }
    }
    let mf = m as f64;
    let mean: Vector = sum.iter().map(|s| s / mf).collect();
    let se = mean
        .iter()
        .zip(&sq)
        .map(|(mu, s)| ((s / mf - mu * mu).max(0.0) / (mf - 1.0)).sqrt())
        .collect();
    (mean, se)
}

fn criterion_1() -> String {
    let f = fixture();
    let det = &f.distro;
    let sigma = f.cfg.smoothing.report_sigma();
    let cfg = SmoothingConfig {
        n_samples: f.cfg.smoothing.n_samples,
        ..SmoothingConfig::new(sigma)
    };
    let stream = RngStream::new(101);
    let mut ood_points = Vec::new();
    'outer: for (fi, o) in f.data.ood.iter().enumerate() {
        for (i, x) in o.points.iter().take(150).enumerate() {
            let s = certified_l2_score(det, x, &cfg, &stream.derive(1).derive(fi as u64).derive(i as u64)).unwrap();
            if s.certified {
                ood_points.push((x.clone(), s));
                if ood_points.len() == 35 {
                    break 'outer;
                }
            }
        }
    }
    let mut id_points = Vec::new();
    for (i, x) in f.data.test.points.iter().enumerate() {
        if id_points.len() + ood_points.len() >= 50 && id_points.len() >= 15 {
            break;
        }
        let s = certified_l2_score(det, x, &cfg, &stream.derive(0).derive(i as u64)).unwrap();
        if s.certified {
            id_points.push((x.clone(), s));
        }
    }
    let n_points = id_points.len() + ood_points.len();
    assert!(n_points >= 50, "only {n_points} certified points");
    let mut r = rng(102);
    let (mut violations, mut nontrivial) = (0, 0);
    let mut bad_points: Vec<String> = Vec::new();
    for (x, s) in id_points.iter().chain(&ood_points) {
        let bound = (2.0 / std::f64::consts::PI).sqrt() * std_normal_quantile(s.p_lower).unwrap() + s.p_lower;
        if bound < 1.0 {
            nontrivial += 1;
        }
        let mut point_violations = 0;
        for _ in 0..1000 {
            let theta = r.random::<f64>() * std::f64::consts::TAU;
            let rad = s.radius * r.random::<f64>().sqrt() * (1.0 - 1e-12);
            let xp = [x[0] + rad * theta.cos(), x[1] + rad * theta.sin()];
            let (mean, se) = smoothed(det, &xp, sigma, 128, &mut r);
            let c = (0..mean.len()).max_by(|a, b| mean[*a].total_cmp(&mean[*b])).unwrap();
            if mean[c] - bound > 3.0 * se[c] {
                point_violations += 1;
            }
        }
        if point_violations > 0 {
            violations += point_violations;
            let (center, _) = smoothed(det, x, sigma, 20_000, &mut r);
            bad_points.push(format!(
                "p_lower {:.4} bound {:.4} G(x) {:.4} ({point_violations})",
                s.p_lower,
                bound,
                center.iter().copied().fold(0.0, f64::max)
            ));
        }
    }
    assert_eq!(
        violations,
        0,
        "{violations} of {} perturbations exceed the bound by > 3 SE, on {} points (center G from 20000 draws): [{}]",
        1000 * n_points,
        bad_points.len(),
        bad_points.join("; ")
    );
    format!(
        "{n_points} certified points ({} OOD, {nontrivial} with bound < 1), 1000 perturbations each, 0 violations",
        ood_points.len()
    )
}

fn criterion_2() -> String {
    let f = fixture();
    let det = &f.distro;
    let mut r = rng(201);
    let mut checked = 0;
    for sigma in [0.12, 0.25] {
        let l = lipschitz_constant(sigma);
        for i in 0..100 {
            let x: Vector = if i % 2 == 0 {
                f.data.test.points[i].clone()
            } else {
                f.data.ood[i % f.data.ood.len()].points[i].clone()
            };
            let theta = r.random::<f64>() * std::f64::consts::TAU;
            let d = 0.5 * r.random::<f64>();
            let xp = [x[0] + d * theta.cos(), x[1] + d * theta.sin()];
            let (g1, s1) = smoothed(det, &x, sigma, 2000, &mut r);
            let (g2, s2) = smoothed(det, &xp, sigma, 2000, &mut r);
            for c in 0..g1.len() {
                let se = (s1[c] * s1[c] + s2[c] * s2[c]).sqrt();
                assert!(
                    (g1[c] - g2[c]).abs() <= l * d + 6.0 * se,
                    "σ={sigma} pair {i} class {c}: |ΔG| = {} > {} + 6·{se}",
                    (g1[c] - g2[c]).abs(),
                    l * d
                );
                checked += 1;
            }
        }
    }
    format!("{checked} class differences over 200 pairs, 0 violations")
}

fn criterion_3() -> String {
    let f = fixture();
    let model = &f.prood.discriminator.as_ref().unwrap().model;
    let half = f.cfg.data.box_half;
    let mut points: Vec<Vector> = f.data.test.points[..25].to_vec();
    for i in 0..25 {
        points.push(f.data.ood[i % f.data.ood.len()].points[i].clone());
    }
    let mut r = rng(301);
    let mut checks = 0u64;
    for z in &points {
        for eps in [0.05, 0.1, 0.3] {
            let upper = discriminator_upper_logit(model, z, eps, half).unwrap();
            let clip = |v: f64| v.clamp(-half, half);
            let mut candidates: Vec<Vector> = (0..4)
                .map(|c| vec![clip(z[0] + if c & 1 == 0 { -eps } else { eps }), clip(z[1] + if c & 2 == 0 { -eps } else { eps })])
                .collect();
            for _ in 0..10_000 {
                candidates.push(z.iter().map(|v| clip(v + eps * (2.0 * r.random::<f64>() - 1.0))).collect());
            }
            for p in &candidates {
                let g = model.forward(p).unwrap()[0];
                assert!(g <= upper, "z={z:?} eps={eps}: g({p:?}) = {g} > {upper}");
                checks += 1;
            }
        }
    }
    format!("{checks} corner and interior points over 50 centers x 3 radii, 0 violations")
}

fn ln_binom_tail(k: u64, n: u64, p: f64) -> f64 {
    // log Pr[Bin(n, p) >= k]
    let lc = |j: u64| libm::lgamma(n as f64 + 1.0) - libm::lgamma(j as f64 + 1.0) - libm::lgamma((n - j) as f64 + 1.0);
    let terms: Vec<f64> = (k..=n)
        .map(|j| lc(j) + j as f64 * p.ln() + (n - j) as f64 * (-p).ln_1p())
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn cp_oracle(k: u64, n: u64, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ln_binom_tail(k, n, mid) < alpha.ln() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn criterion_4() -> String {
    let mut r = rng(401);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = r.random_range(1..=2000u64);
        let k = r.random_range(0..=n);
        let alpha = 10f64.powf(r.random_range(-4.0..-0.7));
        let got = clopper_pearson_lower(k, n, alpha).unwrap();
        let want = cp_oracle(k, n, alpha);
        let err = (got - want).abs();
        worst = worst.max(err);
        assert!(err <= 1e-6, "k={k} n={n} alpha={alpha}: {got} vs {want}");
    }
    let (mut trials, mut failures) = (0u64, 0u64);
    for p in [0.5, 0.9, 0.99, 0.999] {
        let bin = Binomial::new(1000, p).unwrap();
        for _ in 0..5000 {
            let k = bin.sample(&mut r);
            if clopper_pearson_lower(k, 1000, 0.001).unwrap() > p {
                failures += 1;
            }
            trials += 1;
        }
    }
    let rate = failures as f64 / trials as f64;
    assert!(rate <= 0.005, "coverage failure rate {rate}");
    format!("500 triples within {worst:.1e} of the bisection oracle; coverage failure rate {rate:.4} at alpha = 0.001")
}

fn auc_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut twice = 0u64;
    for a in id {
        for b in ood {
            twice += if a > b { 2 } else if a == b { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * id.len() * ood.len()) as f64
}

fn aupr_oracle(id: &[f64], ood: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let n = id.len() as f64;
    let mut prev_tp = 0usize;
    let mut area = 0.0;
    for t in thresholds {
        let tp = id.iter().filter(|v| **v >= t).count();
        let fp = ood.iter().filter(|v| **v >= t).count();
        area += ((tp - prev_tp) as f64 / n) * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    area
}

fn fpr_oracle(id: &[f64], ood: &[f64]) -> f64 {
    // largest threshold with TPR >= 95%
    let tau = id
        .iter()
        .copied()
        .filter(|t| 100 * id.iter().filter(|v| *v >= t).count() >= 95 * id.len())
        .fold(f64::NEG_INFINITY, f64::max);
    ood.iter().filter(|v| **v >= tau).count() as f64 / ood.len() as f64
}

fn criterion_5() -> String {
    let mut r = rng(501);
    for i in 0..1000 {
        let grid = [4.0, 16.0, 1e9][i % 3];
        let mut draw = |n: usize| (0..n).map(|_| (r.random::<f64>() * grid).floor() / grid).collect::<Vec<f64>>();
        let n = 20 + i % 21;
        let id = draw(n);
        let m = 1 + (i * 7) % 40;
        let ood = draw(m);
        let s = ScoreSet::new(id.clone(), ood.clone(), ScoreVariant::Clean).unwrap();
        assert_eq!(auc(&s).unwrap(), auc_oracle(&id, &ood), "set {i}");
        assert_eq!(aupr(&s).unwrap(), aupr_oracle(&id, &ood), "set {i}");
        assert_eq!(fpr_at_95_tpr(&s).unwrap(), fpr_oracle(&id, &ood), "set {i}");
    }
    "1000 score sets (with ties) match the pairwise / exhaustive-threshold oracles exactly".into()
}

/// One reduced evaluation per seed, shared by criteria 6 and 7.
fn runs() -> &'static Vec<Result<EvalReport, String>> {
    static R: OnceLock<Vec<Result<EvalReport, String>>> = OnceLock::new();
    R.get_or_init(|| {
        [0u64, 1, 2]
            .iter()
            .map(|&seed| {
                let owned;
                let f = if seed == 0 {
                    fixture()
                } else {
                    owned = build(seed);
                    &owned
                };
                let mut report = EvalReport {
                    rows: Vec::new(),
                    accuracy_epsilons: f.cfg.accuracy_epsilons.clone(),
                    sigmas: f.cfg.smoothing.sigmas.clone(),
                    accuracy: Vec::new(),
                };
                for det in [&f.plain, &f.oe, &f.prood, &f.distro] {
                    let (rows, acc) = evaluate_pipeline(&f.cfg, det, &f.data).map_err(|e| e.to_string())?;
                    report.rows.extend(rows);
                    report.accuracy.push(acc);
                }
                report.validate().map_err(|e| e.to_string())?;
                Ok(report)
            })
            .collect()
    })
}

fn criterion_6() -> String {
    for (seed, run) in runs().iter().enumerate() {
        if let Err(e) = run {
            panic!("seed {seed}: {e}");
        }
    }
    "3 evaluation runs: score-wise chain asserted per family, report validator passes".into()
}

fn average(report: &EvalReport, pipeline: &str, column: usize) -> f64 {
    report
        .rows
        .iter()
        .find(|r| r.pipeline == pipeline && r.family == AVERAGE_FAMILY)
        .unwrap()
        .values[column]
}

fn criterion_7() -> String {
    let reports: Vec<&EvalReport> = runs().iter().filter_map(|r| r.as_ref().ok()).collect();
    assert_eq!(reports.len(), 3, "an evaluation run failed");
    let a: Vec<(f64, f64)> = reports
        .iter()
        .map(|r| (average(r, "distro", col::GAUC_L2), average(r, "plain", col::GAUC_L2)))
        .collect();
    let b = reports
        .iter()
        .filter(|r| {
            r.rows
                .iter()
                .filter(|row| row.pipeline == "plain" || row.pipeline == "oe")
                .all(|row| row.values[col::GAUC_LINF] == 0.0)
        })
        .count();
    let c: Vec<(f64, f64)> = reports
        .iter()
        .map(|r| (average(r, "oe", col::FPR), average(r, "plain", col::FPR)))
        .collect();
    let a_wins = a.iter().filter(|(d, p)| d > p).count();
    let c_wins = c.iter().filter(|(o, p)| o < p).count();
    let summary = format!(
        "(a) DISTRO vs plain GAUC_l2 {a:.2?} [{a_wins}/3]; (b) no-discriminator GAUC_linf = 0 [{b}/3]; (c) OE vs plain FPR {c:.2?} [{c_wins}/3]"
    );
    assert!(a_wins >= 2 && b >= 2 && c_wins >= 2, "{summary}");
    summary
}

fn criterion_8() -> String {
    let f = fixture();
    let mut r = rng(801);
    let mut checks = 0;
    for det in [&f.prood, &f.distro] {
        let k = det.class_count as f64;
        for i in 0..10_000u64 {
            let x: Vector = (0..2).map(|_| r.random_range(-8.0..8.0)).collect();
            let (p, m) = joint_confidence(det, &x, &RngStream::new(i)).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "sum {sum} at {x:?}");
            let p_in = det.in_distribution_prob(&x).unwrap().unwrap();
            let bound = (k - 1.0) / k * p_in + 1.0 / k;
            assert!(m <= bound + 1e-15, "msp {m} > {bound} at {x:?}");
            checks += 1;
        }
    }
    format!("{checks} inputs (ProoD-like and DISTRO), 0 violations")
}

fn criterion_9() -> String {
    let f = fixture();
    let k = f.distro.class_count as f64;
    let dirs = &f.data.test.points[..100];
    let beta = 1e3;
    let (mut near_uniform, mut overconfident) = (0, 0);
    for (i, x) in dirs.iter().enumerate() {
        let bx: Vector = x.iter().map(|v| beta * v).collect();
        let (_, m) = joint_confidence(&f.distro, &bx, &RngStream::new(900).derive(i as u64)).unwrap();
        if (m - 1.0 / k).abs() <= 0.05 {
            near_uniform += 1;
        }
        if msp(&f.plain.classifier.forward(&bx).unwrap(), 1.0).unwrap() > 0.9 {
            overconfident += 1;
        }
    }
    let summary = format!(
        "beta = 1e3: DISTRO within 0.05 of 1/K on {near_uniform}/100 (need 90), plain msp > 0.9 on {overconfident}/100 (need 50)"
    );
    assert!(near_uniform >= 90 && overconfident >= 50, "{summary}");
    summary
}

fn criterion_10() -> String {
    let f = fixture();
    let prior = f.cfg.data.mixture().unwrap();
    let spec = DenoiserSpec::AnalyticMixture(prior.clone());
    let schedule = CosineSchedule::default();
    let sigma = 0.12;
    let t = find_timestep(&schedule, sigma).unwrap();
    let clean = sample_id(&prior, 10_000, f.cfg.data.box_half, &RngStream::new(1001)).unwrap();
    let mut r = rng(1002);
    let diffs: Vec<f64> = clean
        .points
        .iter()
        .map(|x| {
            let noisy: Vector = x.iter().map(|v| v + normal(&mut r, sigma)).collect();
            let est = denoise_once(&spec, &scale_to_timestep(&noisy, t, &schedule), t, &schedule).unwrap();
            let sq = |a: &[f64]| a.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            sq(&noisy) - sq(&est)
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let se = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!(mean >= 5.0 * se, "MSE gain {mean} < 5 SE ({se})");

    let mut worst = 0.0f64;
    for i in 0..200 {
        let mean_c = vec![r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
        let v = r.random_range(0.01..2.0);
        let s2 = r.random_range(0.001..2.0);
        let one = MixtureSpec {
            dim: 2,
            class_count: 1,
            components: vec![MixtureComponent {
                class: 0,
                mean: mean_c.clone(),
                weight: 1.0,
            }],
            cov_scale: v,
        };
        let y = [r.random_range(-6.0..6.0), r.random_range(-6.0..6.0)];
        let got = posterior_mean(&one, &y, s2);
        for d in 0..2 {
            let want = mean_c[d] + v / (v + s2) * (y[d] - mean_c[d]);
            worst = worst.max((got[d] - want).abs());
            assert!((got[d] - want).abs() <= 1e-10, "case {i}: {} vs {want}", got[d]);
        }
    }
    format!("MSE gain over no-op {mean:.5} = {:.1} SE; conjugate closed form within {worst:.1e}", mean / se)
}

fn criterion_11() -> String {
    let mut r = rng(1101);
    let half = 6.0;
    let mut worst = 0.0f64;
    for i in 0..50 {
        let w: Vector = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let z: Vector = (0..3).map(|_| r.random_range(-half..half)).collect();
        let eps = [0.05, 0.1, 0.5][i % 3];
        let cfg = AttackConfig {
            steps: 200,
            ..AttackConfig::with_epsilon(eps)
        };
        let wc = w.clone();
        let score = move |x: &[f64], _: &RngStream| Ok((wc.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(), wc.clone()));
        let res = pgd_maximize(&score, &z, &cfg, half, &RngStream::new(i as u64)).unwrap();
        let best: f64 = w
            .iter()
            .zip(&z)
            .map(|(wi, zi)| wi * (zi + eps * wi.signum()).clamp((zi - eps).max(-half), (zi + eps).min(half)))
            .sum();
        worst = worst.max((res.score - best).abs());
        assert!((res.score - best).abs() <= 1e-6, "case {i}: {} vs {best}", res.score);
    }
    let f = fixture();
    let mut attacked = 0;
    for det in [&f.plain, &f.distro] {
        for (fi, o) in f.data.ood.iter().enumerate() {
            let pts = &o.points[..20];
            let stream = RngStream::new(1102).derive(fi as u64);
            let clean = clean_side(det, pts, &stream).unwrap();
            let adv = adversarial_side(det, pts, &f.cfg.attack, f.cfg.data.box_half, &stream).unwrap();
            for (c, a) in clean.iter().zip(&adv) {
                assert!(a >= c, "attacked {a} < clean {c}");
                attacked += 1;
            }
        }
    }
    format!("linear optimum recovered within {worst:.1e} on 50 cases; attacked >= clean on {attacked}/{attacked} points")
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> String); 11] = [
        ("certified confidence bound soundness", criterion_1),
        ("Lipschitz property of smoothed outputs", criterion_2),
        ("IBP soundness", criterion_3),
        ("Clopper-Pearson bound and coverage", criterion_4),
        ("metric correctness", criterion_5),
        ("ordering chain", criterion_6),
        ("directional trends", criterion_7),
        ("joint probability algebra", criterion_8),
        ("scaling experiment", criterion_9),
        ("denoiser optimality", criterion_10),
        ("attack sanity", criterion_11),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = std::time::Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run));
        let secs = start.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok(detail) => format!("criterion {} ({name}): PASS [{secs:.1}s] {detail}\n", i + 1),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                failed.push(i + 1);
                format!("criterion {} ({name}): FAIL [{secs:.1}s] {msg}\n", i + 1)
            }
        };
        // bypass the test harness capture so the lines always show
        let _ = std::io::stdout().lock().write_all(line.as_bytes());
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
