//! Accuracy tables: text, CSV and JSON renderings of one experiment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, write_json};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub variant: String,
    /// Accuracy in percent per column; `None` for a skipped cell.
    pub cells: Vec<Option<f64>>,
    /// Why the row is skipped, when it is.
    pub note: Option<String>,
}

impl ReportRow {
    pub fn filled(group: &str, variant: &str, cells: Vec<f64>) -> Self {
        Self {
            group: group.into(),
            variant: variant.into(),
            cells: cells.into_iter().map(Some).collect(),
            note: None,
        }
    }

    pub fn skipped(group: &str, variant: &str, width: usize, note: impl Into<String>) -> Self {
        Self {
            group: group.into(),
            variant: variant.into(),
            cells: vec![None; width],
            note: Some(note.into()),
        }
    }

    pub fn is_skipped(&self) -> bool {
        self.cells.iter().all(Option::is_none)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub title: String,
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    /// Content hashes of every checkpoint the cells were computed from.
    pub inputs: BTreeMap<String, String>,
    /// Run manifest paths, relative to the workspace.
    pub manifests: Vec<String>,
}

impl ExperimentReport {
    pub fn new(title: &str, seed: u64, columns: Vec<String>) -> Self {
        Self {
            title: title.into(),
            seed,
            columns,
            ..Default::default()
        }
    }

    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        if row.cells.len() != self.columns.len() {
            return Err(Error::Shape(format!(
                "report row `{} / {}` has {} cells for {} columns",
                row.group,
                row.variant,
                row.cells.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn row(&self, group: &str, variant: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.group == group && r.variant == variant)
    }

    pub fn cell(&self, group: &str, variant: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|k| k == column)?;
        self.row(group, variant)?.cells[c]
    }

    pub fn to_text(&self) -> String {
        let head_w = self.rows.iter().map(|r| r.group.len()).chain([5]).max().unwrap_or(5);
        let var_w = self.rows.iter().map(|r| r.variant.len()).chain([7]).max().unwrap_or(7);
        let col_w: Vec<usize> = self.columns.iter().map(|c| c.len().max(6)).collect();
        let mut out = String::new();
        let _ = writeln!(out, "{} (seed {})", self.title, self.seed);
        let mut line = format!("{:<head_w$} | {:<var_w$}", "model", "variant");
        for (c, w) in self.columns.iter().zip(&col_w) {
            let _ = write!(line, " | {c:>w$}");
        }
        let rule = "-".repeat(line.len());
        let _ = writeln!(out, "{line}\n{rule}");
        let mut last_group = "";
        for r in &self.rows {
            let group = if r.group == last_group { "" } else { r.group.as_str() };
            last_group = &r.group;
            let mut line = format!("{group:<head_w$} | {:<var_w$}", r.variant);
            for (v, w) in r.cells.iter().zip(&col_w) {
                match v {
                    Some(v) => {
                        let _ = write!(line, " | {v:>w$.2}");
                    }
                    None => {
                        let _ = write!(line, " | {:>w$}", "-");
                    }
                }
            }
            if let Some(n) = &r.note {
                let _ = write!(line, "  ({n})");
            }
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["group".to_string(), "variant".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("note".into());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.group.clone(), r.variant.clone()];
            rec.extend(r.cells.iter().map(|v| v.map(|v| format!("{v:.4}")).unwrap_or_default()));
            rec.push(r.note.clone().unwrap_or_default());
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Writes `<stem>.txt`, `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.txt")), self.to_text().as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        write_json(&dir.join(format!("{stem}.json")), self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

/// Full-scale reference numbers (percent), for orientation only; desk runs
/// are not expected to match them.
pub fn reference_table() -> ExperimentReport {
    let cols = ["clean", "sigma=0.1", "sigma=0.2", "sigma=0.3", "sigma=0.4", "sigma=0.5"];
    let mut r = ExperimentReport::new(
        "Full-scale reference (ResNet-50 on 256 object classes, not asserted)",
        0,
        cols.iter().map(|s| s.to_string()).collect(),
    );
    let partial = |group: &str, variant: &str, clean: Option<f64>, s3: Option<f64>, s5: Option<f64>, note: &str| ReportRow {
        group: group.into(),
        variant: variant.into(),
        cells: vec![clean, None, None, s3, None, s5],
        note: Some(note.into()),
    };
    r.rows = vec![
        partial("setup1", "without restoration", Some(83.20), None, Some(1.65), "row endpoints only"),
        partial("setup1", "with restoration", None, Some(56.05), None, ""),
        partial("proposed oracle", "without ensemble", None, Some(76.24), Some(72.38), ""),
        partial("ablation", "without spatial_add", None, None, Some(67.43), ""),
        partial("metric study", "cosine", None, None, Some(55.70), ""),
    ];
    for row in &mut r.rows {
        if row.note.as_deref() == Some("") {
            row.note = None;
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentReport {
        let mut r = ExperimentReport::new("t", 3, vec!["clean".into(), "sigma=0.5".into()]);
        r.push(ReportRow::filled("setup1", "without restoration", vec![90.0, 10.25]))
            .unwrap();
        r.push(ReportRow::skipped(
            "setup2",
            "with restoration",
            2,
            "run `fidcal train-classifier --regime setup2`",
        ))
        .unwrap();
        r
    }

    #[test]
    fn rows_must_match_the_columns() {
        let mut r = sample();
        assert!(r.push(ReportRow::filled("x", "y", vec![1.0])).is_err());
        assert_eq!(r.cell("setup1", "without restoration", "sigma=0.5"), Some(10.25));
        assert_eq!(r.cell("setup2", "with restoration", "clean"), None);
        assert!(r.rows[1].is_skipped());
    }

    #[test]
    fn renderings_carry_every_cell() {
        let r = sample();
        let text = r.to_text();
        assert!(text.contains("10.25") && text.contains("fidcal train-classifier"));
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("group,variant,clean,sigma=0.5,note\n"));
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), "m").unwrap();
        assert_eq!(ExperimentReport::read(&dir.path().join("m.json")).unwrap(), r);
    }

    #[test]
    fn reference_rows_are_labelled() {
        let r = reference_table();
        assert!(r.title.contains("not asserted"));
        assert_eq!(r.cell("setup1", "without restoration", "clean"), Some(83.20));
    }
}
