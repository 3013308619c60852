//! Summary tables over result bundles, as CSV or aligned text.

use std::fmt::Write as _;

use super::{HarnessError, ResultsBundle};
use crate::metrics::MetricReport;

/// A rectangular table of formatted cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| HarnessError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Report(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
            .collect::<Result<_, csv::Error>>()?;
        Ok(Self { header, rows })
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, cells: &[String]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(&mut s, &self.header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(s, "{}", rule.join("  "));
        for r in &self.rows {
            line(&mut s, r);
        }
        s
    }
}

/// Per-stage, final and forgetting tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub per_stage: Table,
    pub final_metrics: Table,
    pub forgetting: Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

impl Report {
    /// `(file name, contents)` pairs.
    pub fn render(&self, format: ReportFormat) -> Result<Vec<(String, String)>, HarnessError> {
        let tables = [
            ("per_stage", &self.per_stage),
            ("final", &self.final_metrics),
            ("forgetting", &self.forgetting),
        ];
        tables
            .into_iter()
            .map(|(name, t)| {
                Ok(match format {
                    ReportFormat::Csv => (format!("{name}.csv"), t.to_csv()?),
                    ReportFormat::Text => (format!("{name}.txt"), t.to_text()),
                })
            })
            .collect()
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn cells(v: &[f64], with_std: bool) -> Vec<String> {
    let (m, s) = mean_std(v);
    if with_std {
        vec![format!("{m:.4}"), format!("{s:.4}")]
    } else {
        vec![format!("{m:.4}")]
    }
}

fn heads(name: &str, with_std: bool) -> Vec<String> {
    if with_std {
        vec![name.to_string(), format!("{name}_std")]
    } else {
        vec![name.to_string()]
    }
}

struct Group<'a> {
    name: &'a str,
    runs: Vec<&'a ResultsBundle>,
}

fn group(bundles: &[ResultsBundle]) -> Result<Vec<Group<'_>>, HarnessError> {
    let first = bundles
        .first()
        .ok_or_else(|| HarnessError::Report("no result bundles".into()))?;
    let mut groups: Vec<Group> = Vec::new();
    for b in bundles {
        if b.config.stages != first.config.stages || b.config.eval_ks != first.config.eval_ks {
            return Err(HarnessError::Report(format!(
                "{:?} uses a different number of stages or K values than {:?}",
                b.config.name, first.config.name
            )));
        }
        if b.reports.len() != b.config.stages {
            return Err(HarnessError::Report(format!(
                "{:?} seed {} is incomplete",
                b.config.name, b.seed
            )));
        }
        match groups.iter_mut().find(|g| g.name == b.config.name) {
            Some(g) => {
                let mut diff = g.runs[0].config.diff(&b.config);
                diff.retain(|k| k != "seeds" && k != "out");
                if !diff.is_empty() {
                    return Err(HarnessError::Report(format!(
                        "runs named {:?} differ in {}",
                        g.name,
                        diff.join(", ")
                    )));
                }
                if g.runs.iter().any(|r| r.seed == b.seed) {
                    return Err(HarnessError::Report(format!(
                        "seed {} of {:?} given twice",
                        b.seed, g.name
                    )));
                }
                g.runs.push(b);
            }
            None => groups.push(Group {
                name: &b.config.name,
                runs: vec![b],
            }),
        }
    }
    Ok(groups)
}

fn collect(runs: &[&ResultsBundle], f: impl Fn(&ResultsBundle) -> Option<f64>) -> Option<Vec<f64>> {
    runs.iter().map(|r| f(r)).collect()
}

/// Builds the report; std columns appear only when some configuration has
/// more than one seed.
pub fn build_report(bundles: &[ResultsBundle]) -> Result<Report, HarnessError> {
    let groups = group(bundles)?;
    let with_std = groups.iter().any(|g| g.runs.len() > 1);
    let ks = bundles[0].config.eval_ks.clone();
    let stages = bundles[0].config.stages;

    let mut header = vec![
        "config".to_string(),
        "seeds".into(),
        "k".into(),
        "task".into(),
    ];
    for t in 0..stages {
        header.extend(heads(&format!("stage{t}"), with_std));
    }
    let mut rows = Vec::new();
    for g in &groups {
        for (ki, k) in ks.iter().enumerate() {
            for task in (0..stages).map(Some).chain([None]) {
                let mut row = vec![
                    g.name.to_string(),
                    g.runs.len().to_string(),
                    k.to_string(),
                    task.map_or("all".into(), |j| j.to_string()),
                ];
                for t in 0..stages {
                    let value = |r: &ResultsBundle| -> Option<f64> {
                        let rep: &MetricReport = &r.reports[t];
                        match task {
                            Some(j) => rep.per_task.get(j).map(|v| v[ki]),
                            None => Some(rep.mean_recall[ki]),
                        }
                    };
                    match collect(&g.runs, value) {
                        Some(v) => row.extend(cells(&v, with_std)),
                        None => row.extend(vec![String::new(); if with_std { 2 } else { 1 }]),
                    }
                }
                rows.push(row);
            }
        }
    }
    let per_stage = Table { header, rows };

    let mut header = vec!["config".to_string(), "seeds".into()];
    for k in &ks {
        header.extend(heads(&format!("R@{k}"), with_std));
        header.extend(heads(&format!("mR@{k}"), with_std));
        header.extend(heads(&format!("M@{k}"), with_std));
    }
    for name in ["wmAP_rel", "wmAP_phr", "score_wtd"] {
        header.extend(heads(name, with_std));
    }
    let mut rows = Vec::new();
    for g in &groups {
        let mut row = vec![g.name.to_string(), g.runs.len().to_string()];
        for ki in 0..ks.len() {
            row.extend(cells(
                &collect(&g.runs, |r| Some(r.final_report().recall[ki])).unwrap(),
                with_std,
            ));
            row.extend(cells(
                &collect(&g.runs, |r| Some(r.final_report().mean_recall[ki])).unwrap(),
                with_std,
            ));
            row.extend(cells(
                &collect(&g.runs, |r| Some(r.final_report().m[ki])).unwrap(),
                with_std,
            ));
        }
        let optional: [fn(&MetricReport) -> Option<f64>; 3] =
            [|r| r.wmap_rel, |r| r.wmap_phr, |r| r.score_wtd];
        for f in optional {
            match collect(&g.runs, |r| f(r.final_report())) {
                Some(v) => row.extend(cells(&v, with_std)),
                None => row.extend(vec![String::new(); if with_std { 2 } else { 1 }]),
            }
        }
        rows.push(row);
    }
    let final_metrics = Table { header, rows };

    let mut header = vec!["config".to_string(), "seeds".into()];
    for k in &ks {
        header.extend(heads(&format!("FM@{k}"), with_std));
    }
    let mut rows = Vec::new();
    for g in &groups {
        let mut row = vec![g.name.to_string(), g.runs.len().to_string()];
        for k in &ks {
            match collect(&g.runs, |r| r.forgetting_at(*k)) {
                Some(v) => row.extend(cells(&v, with_std)),
                None => row.extend(vec![String::new(); if with_std { 2 } else { 1 }]),
            }
        }
        rows.push(row);
    }
    let forgetting = Table { header, rows };

    Ok(Report {
        per_stage,
        final_metrics,
        forgetting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ExperimentConfig;
    use crate::metrics::AccuracyMatrix;

    fn bundle(name: &str, seed: u64, mr: f64) -> ResultsBundle {
        let config = ExperimentConfig {
            name: name.into(),
            stages: 2,
            ..ExperimentConfig::default()
        };
        let report = |stage: usize, x: f64| MetricReport {
            stage,
            ks: vec![50, 100],
            recall: vec![x + 10.0, x + 12.0],
            mean_recall: vec![x, x + 1.0],
            m: vec![x + 5.0, x + 6.5],
            per_task: (0..=stage)
                .map(|j| vec![x - j as f64, x + 1.0 - j as f64])
                .collect(),
            wmap_rel: None,
            wmap_phr: None,
            score_wtd: None,
        };
        let acc = AccuracyMatrix::from_rows(vec![vec![mr], vec![mr - 1.0, mr]]).unwrap();
        ResultsBundle {
            config,
            seed,
            schedule: vec![vec![0], vec![1]],
            reports: vec![report(0, mr), report(1, mr)],
            accuracy: vec![(50, acc.clone()), (100, acc)],
            forgetting: vec![(50, -1.0), (100, -1.0)],
            summaries: vec![],
            checks: vec![],
            stage_seconds: vec![],
        }
    }

    #[test]
    fn single_bundle_omits_std() {
        let r = build_report(&[bundle("full", 0, 20.0)]).unwrap();
        assert!(!r.final_metrics.header.iter().any(|h| h.ends_with("_std")));
        assert_eq!(r.final_metrics.rows.len(), 1);
        assert_eq!(r.final_metrics.rows[0][3], "20.0000");
        // 2 Ks × (2 tasks + overall)
        assert_eq!(r.per_stage.rows.len(), 6);
        assert_eq!(r.per_stage.rows[1][4], "");
    }

    #[test]
    fn seeds_give_mean_and_std() {
        let bs: Vec<_> = (0..5).map(|s| bundle("full", s, 10.0 + s as f64)).collect();
        let r = build_report(&bs).unwrap();
        let h = &r.final_metrics.header;
        let i = h.iter().position(|c| c == "mR@50").unwrap();
        assert_eq!(h[i + 1], "mR@50_std");
        assert_eq!(r.final_metrics.rows[0][i], "12.0000");
        // sample std of 10..14
        assert_eq!(
            r.final_metrics.rows[0][i + 1],
            format!("{:.4}", 2.5f64.sqrt())
        );
        assert_eq!(r.forgetting.rows[0][2], "-1.0000");
    }

    #[test]
    fn one_row_per_config() {
        let bs = vec![
            bundle("full", 0, 20.0),
            bundle("w/o-inc", 0, 15.0),
            bundle("full", 1, 22.0),
        ];
        let r = build_report(&bs).unwrap();
        let names: Vec<&str> = r.final_metrics.rows.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(names, ["full", "w/o-inc"]);
    }

    #[test]
    fn mixed_configs_are_rejected() {
        let mut b = bundle("full", 1, 20.0);
        b.config.n_e = 3;
        assert!(build_report(&[bundle("full", 0, 20.0), b]).is_err());
        let mut b = bundle("other", 1, 20.0);
        b.config.eval_ks = vec![20];
        assert!(build_report(&[bundle("full", 0, 20.0), b]).is_err());
        assert!(build_report(&[bundle("full", 0, 20.0), bundle("full", 0, 21.0)]).is_err());
        assert!(build_report(&[]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let bs: Vec<_> = (0..3).map(|s| bundle("full", s, 10.0 + s as f64)).collect();
        let r = build_report(&bs).unwrap();
        for t in [&r.per_stage, &r.final_metrics, &r.forgetting] {
            assert_eq!(&Table::from_csv(&t.to_csv().unwrap()).unwrap(), t);
        }
        let text = r.final_metrics.to_text();
        assert!(text.lines().next().unwrap().starts_with("config"));
    }
}
