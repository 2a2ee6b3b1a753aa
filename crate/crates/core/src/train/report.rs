use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;

/// One row per iteration. Empty fields are quantities the mode does not
/// compute or that were not computed on this iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub iter: usize,
    #[serde(rename = "L_actor")]
    pub l_actor: f64,
    #[serde(rename = "L_vanilla")]
    pub l_vanilla: Option<f64>,
    #[serde(rename = "L_meta")]
    pub l_meta: f64,
    #[serde(rename = "L_C")]
    pub l_c: Option<f64>,
    pub w_mean: f64,
    pub w_zero_frac: f64,
    pub inner: Option<f64>,
    pub g2sq: Option<f64>,
    pub implied_k: Option<f64>,
    pub eval_score: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "iter",
    "L_actor",
    "L_vanilla",
    "L_meta",
    "L_C",
    "w_mean",
    "w_zero_frac",
    "inner",
    "g2sq",
    "implied_K",
    "eval_score",
];

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ReportRow {
    fn record(&self) -> [String; 11] {
        [
            self.iter.to_string(),
            self.l_actor.to_string(),
            field(self.l_vanilla),
            self.l_meta.to_string(),
            field(self.l_c),
            self.w_mean.to_string(),
            self.w_zero_frac.to_string(),
            field(self.inner),
            field(self.g2sq),
            field(self.implied_k),
            field(self.eval_score),
        ]
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> TrainError + '_ {
    move |e| TrainError::Report(format!("{}: {e}", path.display()))
}

/// Append-only CSV sink for report rows.
pub struct ReportWriter {
    inner: csv::Writer<File>,
}

impl ReportWriter {
    /// Creates `path` with a header, discarding any previous content.
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let mut inner = csv::Writer::from_path(path).map_err(csv_err(path))?;
        inner.write_record(REPORT_COLUMNS).map_err(csv_err(path))?;
        Ok(ReportWriter { inner })
    }

    /// Rewrites `path` keeping only the rows before `iter`, then appends.
    pub fn resume(path: &Path, iter: usize) -> Result<Self, TrainError> {
        let kept: Vec<ReportRow> = read_report(path)?.into_iter().filter(|r| r.iter < iter).collect();
        let mut w = Self::create(path)?;
        for r in &kept {
            w.push(r)?;
        }
        Ok(w)
    }

    pub fn push(&mut self, row: &ReportRow) -> Result<(), TrainError> {
        self.inner
            .write_record(row.record())
            .map_err(|e| TrainError::Report(e.to_string()))
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.inner.flush().map_err(|e| TrainError::Report(e.to_string()))
    }
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>, TrainError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(REPORT_COLUMNS.iter().copied()) {
        return Err(TrainError::Report(format!("{}: unexpected header", path.display())));
    }
    let parse = |s: &str| -> Result<Option<f64>, TrainError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| TrainError::Report(format!("{}: bad number `{s}`", path.display())))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        let opt = |i: usize| parse(&rec[i]);
        let req = |i: usize| {
            parse(&rec[i])?
                .ok_or_else(|| TrainError::Report(format!("{}: missing {}", path.display(), REPORT_COLUMNS[i])))
        };
        rows.push(ReportRow {
            iter: rec[0]
                .parse()
                .map_err(|_| TrainError::Report(format!("{}: bad iteration `{}`", path.display(), &rec[0])))?,
            l_actor: req(1)?,
            l_vanilla: opt(2)?,
            l_meta: req(3)?,
            l_c: opt(4)?,
            w_mean: req(5)?,
            w_zero_frac: req(6)?,
            inner: opt(7)?,
            g2sq: opt(8)?,
            implied_k: opt(9)?,
            eval_score: opt(10)?,
        });
    }
    Ok(rows)
}

/// Summary of the alignment diagnostic over a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub steps: usize,
    pub non_increasing_frac: Option<f64>,
    pub implied_k_defined: usize,
    pub implied_k_min: Option<f64>,
    pub implied_k_median: Option<f64>,
    pub implied_k_max: Option<f64>,
    pub implied_k_positive_frac: Option<f64>,
}
