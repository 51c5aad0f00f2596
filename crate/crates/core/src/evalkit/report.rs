//! Canonical experiment reports: fixed columns, 6-decimal floats, sorted rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "experiment,seed,cohort,source,config,k,recall,aux_name,aux_value";
pub const SUMMARY_HEADER: &str = "experiment,cohort,source,config,k,n_seeds,recall_mean,recall_std,aux_name,aux_mean";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Jsonl,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Jsonl => "jsonl",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" => Ok(ReportFormat::Jsonl),
            other => Err(Error::config("format", format!("expected csv or jsonl, got {other:?}"))),
        }
    }
}

/// One report row. `recall` is `None` when undefined (no eligible users, an
/// empty store); `aux_*` carry a secondary metric or a flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub experiment: String,
    pub seed: u64,
    pub cohort: String,
    pub source: String,
    pub config: String,
    pub k: usize,
    pub recall: Option<f64>,
    pub aux_name: String,
    pub aux_value: Option<f64>,
}

impl Row {
    fn sort_key(&self) -> (&str, u64, &str, &str, &str, usize, &str) {
        (
            &self.experiment,
            self.seed,
            &self.cohort,
            &self.source,
            &self.config,
            self.k,
            &self.aux_name,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<Row>,
}

impl ExperimentReport {
    pub fn canonicalize(&mut self) {
        self.rows.sort_by(|a, b| {
            a.sort_key()
                .cmp(&b.sort_key())
                .then(a.recall.map(f64::to_bits).cmp(&b.recall.map(f64::to_bits)))
        });
    }

    pub fn extend(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if let Some(x) = r.recall {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::config("report.recall", format!("{x} outside [0, 1]")));
                }
            }
            for f in [&r.experiment, &r.cohort, &r.source, &r.config, &r.aux_name] {
                if f.contains([',', '"', '\n']) {
                    return Err(Error::config("report", format!("field {f:?} is not a plain token")));
                }
            }
        }
        Ok(())
    }

    /// Rows matching the given experiment, cohort, source, and config.
    pub fn select<'a>(
        &'a self,
        cohort: &'a str,
        source: &'a str,
        config: &'a str,
    ) -> impl Iterator<Item = &'a Row> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.cohort == cohort && r.source == source && r.config == config)
    }
}

fn num(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn json_num(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "null".into())
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Renders the report canonically. Rows are sorted on a copy.
pub fn render(report: &ExperimentReport, format: ReportFormat) -> String {
    let mut sorted = report.clone();
    sorted.canonicalize();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in &sorted.rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    r.experiment,
                    r.seed,
                    r.cohort,
                    r.source,
                    r.config,
                    r.k,
                    num(r.recall),
                    r.aux_name,
                    num(r.aux_value)
                );
            }
        }
        ReportFormat::Jsonl => {
            for r in &sorted.rows {
                let _ = writeln!(
                    out,
                    "{{\"experiment\":{},\"seed\":{},\"cohort\":{},\"source\":{},\"config\":{},\"k\":{},\"recall\":{},\"aux_name\":{},\"aux_value\":{}}}",
                    json_str(&r.experiment),
                    r.seed,
                    json_str(&r.cohort),
                    json_str(&r.source),
                    json_str(&r.config),
                    r.k,
                    json_num(r.recall),
                    json_str(&r.aux_name),
                    json_num(r.aux_value)
                );
            }
        }
    }
    out
}

pub fn emit_report(report: &ExperimentReport, path: &Path, format: ReportFormat) -> Result<()> {
    report.validate()?;
    fs::write(path, render(report, format)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub cohort: String,
    pub source: String,
    pub config: String,
    pub k: usize,
    pub n_seeds: usize,
    pub recall_mean: Option<f64>,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub recall_std: Option<f64>,
    pub aux_name: String,
    pub aux_mean: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(std))
}

/// Mean and standard deviation over seeds for every row group.
pub fn summarize(report: &ExperimentReport) -> Vec<SummaryRow> {
    type Key = (String, String, String, String, usize, String);
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &report.rows {
        let key = (
            r.experiment.clone(),
            r.cohort.clone(),
            r.source.clone(),
            r.config.clone(),
            r.k,
            r.aux_name.clone(),
        );
        let g = groups.entry(key).or_default();
        g.0.extend(r.recall);
        g.1.extend(r.aux_value);
    }
    groups
        .into_iter()
        .map(|((experiment, cohort, source, config, k, aux_name), (recalls, aux))| {
            let (recall_mean, recall_std) = mean_std(&recalls);
            SummaryRow {
                experiment,
                cohort,
                source,
                config,
                k,
                n_seeds: recalls.len(),
                recall_mean,
                recall_std,
                aux_name,
                aux_mean: mean_std(&aux).0,
            }
        })
        .collect()
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.experiment,
            r.cohort,
            r.source,
            r.config,
            r.k,
            r.n_seeds,
            num(r.recall_mean),
            num(r.recall_std),
            r.aux_name,
            num(r.aux_mean)
        );
    }
    out
}

pub fn emit_summary(report: &ExperimentReport, path: &Path) -> Result<()> {
    fs::write(path, render_summary(&summarize(report))).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(exp: &str, seed: u64, source: &str, recall: Option<f64>) -> Row {
        Row {
            experiment: exp.into(),
            seed,
            cohort: "all".into(),
            source: source.into(),
            config: "default".into(),
            k: 200,
            recall,
            aux_name: "n_users".into(),
            aux_value: Some(10.0),
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = ExperimentReport::default();
        assert_eq!(render(&r, ReportFormat::Csv), format!("{CSV_HEADER}\n"));
        assert_eq!(render(&r, ReportFormat::Jsonl), "");
    }

    #[test]
    fn rows_are_sorted_and_output_stable() {
        let r = ExperimentReport {
            rows: vec![row("t", 1, "b", Some(0.5)), row("t", 0, "z", None), row("t", 0, "a", Some(0.25))],
        };
        let a = render(&r, ReportFormat::Csv);
        assert_eq!(a, render(&r, ReportFormat::Csv));
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines[1], "t,0,all,a,default,200,0.250000,n_users,10.000000");
        assert_eq!(lines[2], "t,0,all,z,default,200,,n_users,10.000000");
        assert!(lines[3].starts_with("t,1,all,b"));
        let j = render(&r, ReportFormat::Jsonl);
        assert!(j.lines().nth(1).unwrap().contains("\"recall\":null"));
        for line in j.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
    }

    #[test]
    fn summary_mean_and_sample_std() {
        let r = ExperimentReport {
            rows: vec![row("t", 0, "a", Some(0.1)), row("t", 1, "a", Some(0.3)), row("t", 2, "a", None)],
        };
        let s = summarize(&r);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].n_seeds, 2);
        assert!((s[0].recall_mean.unwrap() - 0.2).abs() < 1e-12);
        assert!((s[0].recall_std.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[0].aux_mean, Some(10.0));
    }

    #[test]
    fn out_of_range_recall_rejected() {
        let r = ExperimentReport {
            rows: vec![row("t", 0, "a", Some(1.5))],
        };
        assert!(r.validate().is_err());
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
