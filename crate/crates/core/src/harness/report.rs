//! CSV and JSON exports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so identical
//! values always produce identical bytes.

use std::io::Write;

use serde::Serialize;

use super::ablate::AblationTable;
use super::config::ExperimentConfig;
use super::train::MetricsRecord;
use crate::msm::FrameInspection;

pub const EPOCH_HEADER: [&str; 11] = [
    "seed",
    "epoch",
    "ce_s",
    "cl_s",
    "clip_s",
    "proj",
    "ce_n",
    "lambda_n",
    "total",
    "seen_accuracy",
    "unseen_accuracy",
];

pub const ABLATION_HEADER: [&str; 17] = [
    "config",
    "da",
    "msm",
    "mab",
    "splitting",
    "losses",
    "seed",
    "epochs",
    "ce_s",
    "cl_s",
    "clip_s",
    "proj",
    "ce_n",
    "total",
    "seen_accuracy",
    "unseen_accuracy",
    "confusion",
];

pub const INSPECT_HEADER: [&str; 10] = [
    "t", "v", "c", "v_norm", "c_norm", "m", "delta_g", "delta_d", "idx_g", "idx_d",
];

fn f(x: f64) -> String {
    format!("{x}")
}

/// `a|b;c|d` rows of a confusion matrix.
fn confusion_cell(m: &[Vec<usize>]) -> String {
    m.iter()
        .map(|r| r.iter().map(usize::to_string).collect::<Vec<_>>().join("|"))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn write_epoch_csv<W: Write>(out: W, records: &[MetricsRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EPOCH_HEADER)?;
    for r in records {
        let l = &r.loss;
        w.write_record([
            r.seed.to_string(),
            r.epoch.to_string(),
            f(l.ce_s),
            f(l.cl_s),
            f(l.clip_s),
            f(l.proj),
            f(l.ce_n),
            f(l.lambda_n),
            f(l.total),
            f(r.seen_accuracy),
            f(r.unseen_accuracy),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ablation_csv<W: Write>(out: W, table: &AblationTable) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ABLATION_HEADER)?;
    for row in &table.rows {
        let a = row.cell.arch;
        let r = &row.final_record;
        let l = &r.loss;
        w.write_record([
            row.cell.label(),
            a.da.to_string(),
            a.msm.to_string(),
            a.mab.to_string(),
            a.splitting.as_str().to_string(),
            row.cell.losses.label(),
            row.seed.to_string(),
            r.epoch.to_string(),
            f(l.ce_s),
            f(l.cl_s),
            f(l.clip_s),
            f(l.proj),
            f(l.ce_n),
            f(l.total),
            f(r.seen_accuracy),
            f(r.unseen_accuracy),
            confusion_cell(&r.confusion),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_inspection_csv<W: Write>(out: W, rows: &[FrameInspection]) -> csv::Result<()> {
    let opt = |x: Option<f64>| x.map_or_else(String::new, f);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(INSPECT_HEADER)?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            f(r.v),
            f(r.c),
            f(r.v_norm),
            f(r.c_norm),
            f(r.m),
            f(r.delta_global),
            f(r.delta_dynamic),
            opt(r.idx_global),
            opt(r.idx_dynamic),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct SeedSummary<'a> {
    pub seed: u64,
    pub final_record: &'a MetricsRecord,
    pub training_view_sha256: &'a str,
}

#[derive(Debug, Serialize)]
pub struct TrainSummary<'a> {
    pub config: &'a ExperimentConfig,
    pub seeds: Vec<SeedSummary<'a>>,
    pub unseen_mean: f64,
    pub unseen_std: f64,
    pub seen_mean: f64,
    pub seen_std: f64,
}

#[derive(Debug, Serialize)]
pub struct AblationSummary<'a> {
    pub config: &'a ExperimentConfig,
    pub table: &'a AblationTable,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossBreakdown;

    #[test]
    fn epoch_csv_shape() {
        let r = MetricsRecord {
            seed: 1,
            epoch: 0,
            loss: LossBreakdown {
                total: 0.5,
                ..Default::default()
            },
            seen_accuracy: 1.0,
            unseen_accuracy: 0.25,
            confusion: vec![vec![1, 0], vec![0, 1]],
        };
        let mut buf = Vec::new();
        write_epoch_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], EPOCH_HEADER.join(","));
        assert_eq!(lines[1], "1,0,0,0,0,0,0,0,0.5,1,0.25");
        assert_eq!(confusion_cell(&[vec![1, 0], vec![2, 3]]), "1|0;2|3");
    }
}
