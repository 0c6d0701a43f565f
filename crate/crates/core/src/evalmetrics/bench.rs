use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifter::RunLog;

/// Totals of one run and their ratios to the first run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub rounds: u64,
    pub fwd_evals: u64,
    pub bwd_evals: u64,
    pub field_updates: u64,
    pub wall_ms: f64,
    pub fwd_ratio: Option<f64>,
    pub update_ratio: Option<f64>,
    pub wall_ratio: Option<f64>,
}

/// Published full-scale timing, reported alongside measured rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub minutes: f64,
    pub scale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub reference: Vec<ReferenceRow>,
    /// First reference time over second.
    pub reference_ratio: f64,
}

pub const REFERENCE_SCALE: &str = "full-scale reference";

pub fn reference_rows() -> Vec<ReferenceRow> {
    [("Our-SDS", 14.0), ("Our-Decoupled", 5.0)]
        .into_iter()
        .map(|(l, m)| ReferenceRow { label: l.into(), minutes: m, scale: REFERENCE_SCALE.into() })
        .collect()
}

fn ratio(x: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| x / base)
}

/// Comparison table of labeled run logs; ratios are relative to the first.
pub fn bench_report(runs: &[(String, RunLog)]) -> Result<BenchReport> {
    let (_, first) = runs.first().ok_or_else(|| Error::InvalidInput("benchmark needs at least one run log".into()))?;
    let base = first.totals;
    let rows = runs
        .iter()
        .map(|(label, log)| {
            let t = log.totals;
            BenchRow {
                label: label.clone(),
                rounds: t.rounds,
                fwd_evals: t.fwd_evals,
                bwd_evals: t.bwd_evals,
                field_updates: t.field_updates,
                wall_ms: t.wall_ms,
                fwd_ratio: ratio(t.fwd_evals as f64, base.fwd_evals as f64),
                update_ratio: ratio(t.field_updates as f64, base.field_updates as f64),
                wall_ratio: ratio(t.wall_ms, base.wall_ms),
            }
        })
        .collect();
    let reference = reference_rows();
    let reference_ratio = reference[0].minutes / reference[1].minutes;
    Ok(BenchReport { rows, reference, reference_ratio })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bench report serializes")
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let r = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let width = self.rows.iter().map(|row| row.label.len()).chain(self.reference.iter().map(|x| x.label.len())).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<width$}  {:>7}  {:>9}  {:>9}  {:>13}  {:>11}  {:>9}  {:>12}  {:>10}\n",
            "label", "rounds", "fwd", "bwd", "field_updates", "wall_ms", "fwd_ratio", "update_ratio", "wall_ratio"
        );
        for row in &self.rows {
            s += &format!(
                "{:<width$}  {:>7}  {:>9}  {:>9}  {:>13}  {:>11.1}  {:>9}  {:>12}  {:>10}\n",
                row.label,
                row.rounds,
                row.fwd_evals,
                row.bwd_evals,
                row.field_updates,
                row.wall_ms,
                r(row.fwd_ratio),
                r(row.update_ratio),
                r(row.wall_ratio)
            );
        }
        s += "\n";
        for x in &self.reference {
            s += &format!("{:<width$}  {:>7.1} min  ({})\n", x.label, x.minutes, x.scale);
        }
        s += &format!("reference time ratio {:.2}\n", self.reference_ratio);
        s
    }
}
