//! Metrics CSV and accounting.
//!
//! The CSV schema is a compatibility surface: one `#`-prefixed header
//! line carrying tool version and arm metadata, the fixed column row,
//! then one row per optimizer step. Token columns are per-step counts;
//! totals are their sums. `heldout_loss` is empty on steps without an
//! evaluation. Floats print in shortest round-trip form, so files are
//! byte-identical across runs of the same seed (timing columns are
//! forced to zero unless timing capture is on).

use super::HarnessError;
use crate::VERSION;
use std::io::Write;
use std::path::Path;

pub const METRICS_COLUMNS: &str =
    "step,p,tokens_forwarded,label_tokens_kept,train_loss,heldout_loss,ms_per_step";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub p: f64,
    pub tokens_forwarded: u64,
    pub label_tokens_kept: u64,
    pub train_loss: f64,
    pub heldout_loss: Option<f64>,
    pub ms_per_step: f64,
}

/// Writes `# regate v<version> <meta>`, the column row, then data rows.
pub fn write_metrics_csv(path: &Path, meta: &str, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut out = String::new();
    out.push_str(&format!("# regate v{VERSION} {meta}\n"));
    out.push_str(METRICS_COLUMNS);
    out.push('\n');
    for r in rows {
        let heldout = match r.heldout_loss {
            Some(h) => format!("{h}"),
            None => String::new(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.p, r.tokens_forwarded, r.label_tokens_kept, r.train_loss, heldout, r.ms_per_step
        ));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a metrics CSV back, returning (meta line without `# `, rows).
pub fn read_metrics_csv(path: &Path) -> Result<(String, Vec<MetricsRow>), HarnessError> {
    let bad = |msg: String| HarnessError::BadMetrics {
        path: path.display().to_string(),
        msg,
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut meta = String::new();
    let mut rows = Vec::new();
    let mut saw_columns = false;
    for (ln, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix('#') {
            if !saw_columns {
                meta = rest.trim().to_string();
            }
            continue;
        }
        if !saw_columns {
            if line != METRICS_COLUMNS {
                return Err(bad(format!("unexpected column row {line:?}")));
            }
            saw_columns = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(format!("line {}: {} fields, expected 7", ln + 1, fields.len())));
        }
        let parse_err = |what: &str| bad(format!("line {}: bad {what}", ln + 1));
        let row = MetricsRow {
            step: fields[0].parse().map_err(|_| parse_err("step"))?,
            p: fields[1].parse().map_err(|_| parse_err("p"))?,
            tokens_forwarded: fields[2].parse().map_err(|_| parse_err("tokens_forwarded"))?,
            label_tokens_kept: fields[3]
                .parse()
                .map_err(|_| parse_err("label_tokens_kept"))?,
            train_loss: fields[4].parse().map_err(|_| parse_err("train_loss"))?,
            heldout_loss: if fields[5].is_empty() {
                None
            } else {
                Some(fields[5].parse().map_err(|_| parse_err("heldout_loss"))?)
            },
            ms_per_step: fields[6].parse().map_err(|_| parse_err("ms_per_step"))?,
        };
        if !row.p.is_finite() || !row.train_loss.is_finite() {
            return Err(bad(format!("line {}: non-finite value", ln + 1)));
        }
        rows.push(row);
    }
    if !saw_columns {
        return Err(bad("missing column row".into()));
    }
    Ok((meta, rows))
}

/// Column sums and final values of one arm's metrics file.
///
/// Three token-counting conventions are reported: `tokens_forwarded`
/// (everything entering the forward pass), `label_tokens_kept` (labels
/// that contributed loss and gradients), and `label_tokens_seen`
/// (labels the data loader presented, gated or not). The last is not a
/// CSV column; it is recovered from full-keep rows, where kept labels
/// per step equal presented labels per step. Batch geometry is
/// constant within a run, so any full-keep row determines it.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTotals {
    pub label: String,
    pub steps: usize,
    pub tokens_forwarded: u64,
    pub label_tokens_kept: u64,
    pub label_tokens_seen: Option<u64>,
    pub wall_clock_s: f64,
    pub final_train_loss: f64,
    pub final_heldout_loss: Option<f64>,
}

pub fn totals_from_csv(path: &Path) -> Result<CsvTotals, HarnessError> {
    let (meta, rows) = read_metrics_csv(path)?;
    if rows.is_empty() {
        return Err(HarnessError::BadMetrics {
            path: path.display().to_string(),
            msg: "no data rows".into(),
        });
    }
    // the arm name from the meta line, else the file stem
    let label = meta
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix("arm=").map(str::to_string))
        .unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into())
        });
    let mut labels_per_step: Option<u64> = None;
    let mut consistent = true;
    for r in rows.iter().filter(|r| r.p == 1.0) {
        match labels_per_step {
            None => labels_per_step = Some(r.label_tokens_kept),
            Some(v) if v != r.label_tokens_kept => consistent = false,
            Some(_) => {}
        }
    }
    let label_tokens_seen = match (labels_per_step, consistent) {
        (Some(v), true) => Some(v * rows.len() as u64),
        _ => None,
    };
    Ok(CsvTotals {
        label,
        steps: rows.len(),
        tokens_forwarded: rows.iter().map(|r| r.tokens_forwarded).sum(),
        label_tokens_kept: rows.iter().map(|r| r.label_tokens_kept).sum(),
        label_tokens_seen,
        wall_clock_s: rows.iter().map(|r| r.ms_per_step).sum::<f64>() / 1e3,
        final_train_loss: rows.last().expect("non-empty").train_loss,
        final_heldout_loss: rows.iter().rev().find_map(|r| r.heldout_loss),
    })
}

/// Per-arm totals with a percentage-reduction column against the
/// baseline arm (by label `baseline`, else the first entry).
pub fn accounting_table(totals: &[CsvTotals]) -> String {
    let base = totals
        .iter()
        .find(|t| t.label == "baseline")
        .or_else(|| totals.first());
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>7} {:>16} {:>18} {:>18} {:>12} {:>14} {:>12}\n",
        "arm",
        "steps",
        "tokens_forwarded",
        "label_tokens_kept",
        "label_tokens_seen",
        "wall_clock_s",
        "final_heldout",
        "vs_baseline"
    ));
    for t in totals {
        let reduction = match base {
            Some(b) if b.label != t.label && b.tokens_forwarded > 0 => {
                let pct = 100.0 * (1.0 - t.tokens_forwarded as f64 / b.tokens_forwarded as f64);
                format!("down {pct:.1}%")
            }
            _ => "n/a".to_string(),
        };
        let heldout = t
            .final_heldout_loss
            .map(|h| format!("{h:.4}"))
            .unwrap_or_else(|| "-".into());
        let seen = t
            .label_tokens_seen
            .map(|v| v.to_string())
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<12} {:>7} {:>16} {:>18} {:>18} {:>12.3} {:>14} {:>12}\n",
            t.label, t.steps, t.tokens_forwarded, t.label_tokens_kept, seen, t.wall_clock_s, heldout, reduction
        ));
    }
    out
}
