//! CSV tables for run artifacts.

use std::path::Path;

use crate::error::Result;
use crate::mge::TermKind;
use crate::trainer::TrainHistory;
use crate::wu::WorkUnitLedger;

use super::csv::{emit_csv, fmt_f64, to_string};
use super::experiments::{CropRow, Example1Row, ResidualRow, VarianceResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> Result<String> {
        to_string(&self.header, &self.rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        emit_csv(path, &self.header, &self.rows)
    }
}

pub fn history(h: &TrainHistory) -> Table {
    let rows = h
        .records
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.level.to_string(),
                fmt_f64(r.loss),
                fmt_f64(r.metric),
                r.wu.numer().to_string(),
                r.wu.denom().to_string(),
                fmt_f64(r.seconds),
            ]
        })
        .collect();
    Table { header: vec!["step", "level", "loss", "metric", "wu_num", "wu_den", "seconds"], rows }
}

/// One row per level plus a `total` row.
pub fn ledger(l: &WorkUnitLedger) -> Table {
    Table {
        header: vec!["level", "images", "wu_numerator", "wu_denominator"],
        rows: l.csv_rows().into_iter().map(Vec::from).collect(),
    }
}

pub fn example1(rows: &[Example1Row]) -> Table {
    Table {
        header: vec!["sigma", "level_pair", "delta_g", "oracle_delta_g"],
        rows: rows
            .iter()
            .map(|r| vec![fmt_f64(r.sigma), r.level_pair.to_string(), fmt_f64(r.delta_g), fmt_f64(r.oracle_delta_g)])
            .collect(),
    }
}

pub fn coarsen_crop(rows: &[CropRow]) -> Table {
    Table {
        header: vec!["h", "r_coarsen", "r_crop", "n_samples"],
        rows: rows
            .iter()
            .map(|r| vec![fmt_f64(r.h), fmt_f64(r.r_coarsen), fmt_f64(r.r_crop), r.n_samples.to_string()])
            .collect(),
    }
}

pub fn residuals(rows: &[ResidualRow]) -> Table {
    Table {
        header: vec!["h", "size", "mean_norm"],
        rows: rows.iter().map(|r| vec![fmt_f64(r.h), r.size.to_string(), fmt_f64(r.mean_norm)]).collect(),
    }
}

/// Scaling rows (`kind = batch_mean`) followed by per-term rows.
pub fn variance(v: &VarianceResult) -> Table {
    let mut rows: Vec<Vec<String>> = v
        .scaling
        .iter()
        .map(|(n, var)| vec!["batch_mean".into(), "1".into(), String::new(), n.to_string(), String::new(), fmt_f64(*var)])
        .collect();
    for t in &v.terms {
        let kind = match t.kind {
            TermKind::Base => "base",
            TermKind::Diff => "diff",
        };
        rows.push(vec![
            kind.into(),
            t.fine.index().to_string(),
            t.coarse.map(|c| c.index().to_string()).unwrap_or_default(),
            t.batch.to_string(),
            fmt_f64(t.mean_norm),
            fmt_f64(t.variance),
        ]);
    }
    Table { header: vec!["kind", "fine", "coarse", "batch", "mean_norm", "variance"], rows }
}
