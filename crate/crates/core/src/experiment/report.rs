//! OOD metric table and ID accuracy block, written as CSV and markdown.
//!
//! All values are percentages printed with two decimals; both writers use
//! the same formatted strings.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const METRIC_COLUMNS: [&str; 13] = [
    "Acc", "AUC", "GAUC_l2", "GAUC_linf", "AAUC", "AUPR", "GAUPR_l2", "GAUPR_linf", "AAUPR", "FPR", "GFPR_l2",
    "GFPR_linf", "AFPR",
];

/// Column indices into [`ReportRow::values`].
pub mod col {
    pub const ACC: usize = 0;
    pub const AUC: usize = 1;
    pub const GAUC_L2: usize = 2;
    pub const GAUC_LINF: usize = 3;
    pub const AAUC: usize = 4;
    pub const AUPR: usize = 5;
    pub const GAUPR_L2: usize = 6;
    pub const GAUPR_LINF: usize = 7;
    pub const AAUPR: usize = 8;
    pub const FPR: usize = 9;
    pub const GFPR_L2: usize = 10;
    pub const GFPR_LINF: usize = 11;
    pub const AFPR: usize = 12;
}

pub const AVERAGE_FAMILY: &str = "average";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub pipeline: String,
    pub family: String,
    /// Percentages in [`METRIC_COLUMNS`] order.
    pub values: [f64; 13],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub pipeline: String,
    pub clean: f64,
    /// One entry per ε of [`EvalReport::accuracy_epsilons`].
    pub adversarial: Vec<f64>,
    /// One entry per σ of [`EvalReport::sigmas`].
    pub certified: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub accuracy_epsilons: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub accuracy: Vec<AccuracyRow>,
}

pub fn fmt2(v: f64) -> String {
    // avoid printing "-0.00"
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Per-family rows followed by their column-wise mean.
pub fn with_average(pipeline: &str, rows: Vec<ReportRow>) -> Vec<ReportRow> {
    let n = rows.len() as f64;
    let mut mean = [0.0; 13];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(&r.values) {
            *m += v / n;
        }
    }
    let mut out = rows;
    out.push(ReportRow {
        pipeline: pipeline.into(),
        family: AVERAGE_FAMILY.into(),
        values: mean,
    });
    out
}

impl EvalReport {
    /// Percent ranges and the ordering chain
    /// `GAUC(ℓ∞) ≤ AAUC ≤ AUC`, `GAUPR(ℓ∞) ≤ AAUPR ≤ AUPR`,
    /// `GFPR(ℓ∞) ≥ AFPR ≥ FPR` on every row.
    pub fn validate(&self) -> Result<()> {
        const SLACK: f64 = 1e-9;
        for r in &self.rows {
            let v = &r.values;
            if let Some(i) = v.iter().position(|x| !(-SLACK..=100.0 + SLACK).contains(x)) {
                return Err(Error::Invariant(format!(
                    "{}/{}: {} = {} outside [0, 100]",
                    r.pipeline, r.family, METRIC_COLUMNS[i], v[i]
                )));
            }
            let chains = [
                (col::GAUC_LINF, col::AAUC, col::AUC, true),
                (col::GAUPR_LINF, col::AAUPR, col::AUPR, true),
                (col::GFPR_LINF, col::AFPR, col::FPR, false),
            ];
            for (g, a, c, ascending) in chains {
                let ok = if ascending {
                    v[g] <= v[a] + SLACK && v[a] <= v[c] + SLACK
                } else {
                    v[g] + SLACK >= v[a] && v[a] + SLACK >= v[c]
                };
                if !ok {
                    return Err(Error::Invariant(format!(
                        "{}/{}: ordering chain violated for {} / {} / {} = {} / {} / {}",
                        r.pipeline, r.family, METRIC_COLUMNS[g], METRIC_COLUMNS[a], METRIC_COLUMNS[c], v[g], v[a], v[c]
                    )));
                }
            }
        }
        for a in &self.accuracy {
            if a.adversarial.len() != self.accuracy_epsilons.len() || a.certified.len() != self.sigmas.len() {
                return Err(Error::Invariant(format!("{}: accuracy block has wrong width", a.pipeline)));
            }
        }
        Ok(())
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["pipeline".to_string(), "ood_family".to_string()];
        h.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
        h
    }

    fn cells(r: &ReportRow) -> Vec<String> {
        let mut c = vec![r.pipeline.clone(), r.family.clone()];
        c.extend(r.values.iter().map(|v| fmt2(*v)));
        c
    }

    fn accuracy_header(&self) -> Vec<String> {
        let mut h = vec!["pipeline".to_string(), "clean".to_string()];
        h.extend(self.accuracy_epsilons.iter().map(|e| format!("adv_eps={e}")));
        h.extend(self.sigmas.iter().map(|s| format!("cert_sigma={s}")));
        h
    }

    fn accuracy_cells(a: &AccuracyRow) -> Vec<String> {
        let mut c = vec![a.pipeline.clone(), fmt2(a.clean)];
        c.extend(a.adversarial.iter().chain(&a.certified).map(|v| fmt2(*v)));
        c
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",") + "\n";
        for r in &self.rows {
            out += &(Self::cells(r).join(",") + "\n");
        }
        out
    }

    pub fn accuracy_csv(&self) -> String {
        let mut out = self.accuracy_header().join(",") + "\n";
        for a in &self.accuracy {
            out += &(Self::accuracy_cells(a).join(",") + "\n");
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        fn table(out: &mut String, header: &[String], rows: impl Iterator<Item = Vec<String>>) {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for r in rows {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
        }
        let mut out = String::from("## ID accuracy (%)\n\n");
        table(&mut out, &self.accuracy_header(), self.accuracy.iter().map(Self::accuracy_cells));
        out += "\n## OOD detection (%)\n\n";
        table(&mut out, &self.header(), self.rows.iter().map(Self::cells));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: [f64; 13]) -> ReportRow {
        ReportRow {
            pipeline: "plain".into(),
            family: "annulus".into(),
            values,
        }
    }

    fn good() -> [f64; 13] {
        [99.0, 90.0, 50.0, 0.0, 80.0, 95.0, 60.0, 0.0, 90.0, 30.0, 70.0, 100.0, 40.0]
    }

    fn report(rows: Vec<ReportRow>) -> EvalReport {
        EvalReport {
            rows,
            accuracy_epsilons: vec![0.05],
            sigmas: vec![0.12],
            accuracy: vec![AccuracyRow {
                pipeline: "plain".into(),
                clean: 99.5,
                adversarial: vec![90.126],
                certified: vec![80.0],
            }],
        }
    }

    #[test]
    fn validator() {
        assert!(report(vec![row(good())]).validate().is_ok());
        let mut bad = good();
        bad[col::AAUC] = 95.0;
        assert!(matches!(report(vec![row(bad)]).validate(), Err(Error::Invariant(_))));
        let mut bad = good();
        bad[col::AFPR] = 20.0;
        assert!(report(vec![row(bad)]).validate().is_err());
        let mut bad = good();
        bad[col::ACC] = 101.0;
        assert!(report(vec![row(bad)]).validate().is_err());
    }

    #[test]
    fn csv_and_markdown_agree() {
        let rows = with_average("plain", vec![row(good()), row(good())]);
        assert_eq!(rows.last().unwrap().family, AVERAGE_FAMILY);
        let r = report(rows);
        let csv = r.to_csv();
        let md = r.to_markdown();
        assert!(csv.starts_with("pipeline,ood_family,Acc,AUC,GAUC_l2,GAUC_linf,AAUC,AUPR,GAUPR_l2,GAUPR_linf,AAUPR,FPR,GFPR_l2,GFPR_linf,AFPR\n"));
        for line in csv.lines().skip(1) {
            assert!(md.contains(&format!("| {} |", line.split(',').collect::<Vec<_>>().join(" | "))));
        }
        assert!(r.accuracy_csv().contains("plain,99.50,90.13,80.00"));
        assert_eq!(fmt2(-0.0001), "0.00");
    }
}
