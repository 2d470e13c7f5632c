//! Metrics-log post-processing: JSONL to CSV for external plotting.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::StepRecord;

/// Column order mirrors the step-record field order.
pub const COLUMNS: [&str; 16] = [
    "step",
    "mean_reward",
    "loss_grpo",
    "loss_reg",
    "buffer_size",
    "admitted_count",
    "evicted_count",
    "approx_entropy_mean",
    "rank1_prob",
    "rank2_prob",
    "rank3_prob",
    "eval_pass1",
    "eval_pass16",
    "eval_mean_reward",
    "distinct_correct_mean",
    "clamp_hits",
];

fn cell<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("record field serializes")
}

fn optional_cell(value: &Option<f64>) -> String {
    match value {
        Some(v) => cell(v),
        None => String::new(),
    }
}

/// Render one parsed log as CSV text: header plus one row per step, cells
/// formatted exactly as in the JSONL (nulls become empty cells).
pub fn records_to_csv(records: &[StepRecord]) -> String {
    let mut out = String::new();
    out.push_str(&COLUMNS.join(","));
    out.push('\n');
    for r in records {
        let row = [
            cell(&r.step),
            cell(&r.mean_reward),
            cell(&r.loss_grpo),
            cell(&r.loss_reg),
            cell(&r.buffer_size),
            cell(&r.admitted_count),
            cell(&r.evicted_count),
            cell(&r.approx_entropy_mean),
            cell(&r.rank1_prob),
            cell(&r.rank2_prob),
            cell(&r.rank3_prob),
            optional_cell(&r.eval_pass1),
            optional_cell(&r.eval_pass16),
            optional_cell(&r.eval_mean_reward),
            optional_cell(&r.distinct_correct_mean),
            cell(&r.clamp_hits),
        ];
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parse a JSONL metrics log; malformed lines report their 1-based number.
pub fn parse_log(text: &str) -> Result<Vec<StepRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: StepRecord = serde_json::from_str(line)
            .map_err(|e| Error::Io(std::io::Error::other(format!("line {}: {e}", i + 1))))?;
        records.push(record);
    }
    Ok(records)
}

pub fn report(log_path: &Path, out_path: &Path) -> Result<()> {
    let text = fs::read_to_string(log_path)?;
    let records = parse_log(&text)?;
    fs::write(out_path, records_to_csv(&records))?;
    Ok(())
}
