//! Result tables rendered from method-level summaries.

use std::path::{Path, PathBuf};

use rankup::MeanStd;

use crate::output::{read_json, MethodSummary};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Better {
    Lower,
    Higher,
}

pub const COLUMNS: [(&str, Better); 3] = [("MAE", Better::Lower), ("R2", Better::Higher), ("SRCC", Better::Higher)];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub n_labeled: usize,
    pub n_runs: usize,
    pub cells: [MeanStd; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Per column, whether each row holds the best mean.
    pub best: Vec<[bool; 3]>,
}

pub fn format_cell(m: MeanStd) -> String {
    format!("{:.2}±{:.2}", m.mean, m.std)
}

/// Every `<experiment>/<method>/summary.json` below `root`, sorted.
pub fn find_method_summaries(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut found = Vec::new();
    let experiments = std::fs::read_dir(root).map_err(|e| CliError::Input(format!("{}: {e}", root.display())))?;
    for exp in experiments {
        let exp = exp.map_err(|e| CliError::runtime(root, e))?.path();
        if !exp.is_dir() {
            continue;
        }
        for method in std::fs::read_dir(&exp).map_err(|e| CliError::runtime(&exp, e))? {
            let path = method.map_err(|e| CliError::runtime(&exp, e))?.path().join("summary.json");
            if path.is_file() {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn build(summaries: &[MethodSummary]) -> Report {
    let rows: Vec<ReportRow> = summaries
        .iter()
        .map(|s| ReportRow {
            label: format!("{}/{}", s.experiment, s.method),
            n_labeled: s.n_labeled,
            n_runs: s.aggregate.n_runs,
            cells: [s.aggregate.mae, s.aggregate.r2, s.aggregate.srcc],
        })
        .collect();
    let mut best = vec![[false; 3]; rows.len()];
    for (c, (_, dir)) in COLUMNS.iter().enumerate() {
        let means = rows.iter().map(|r| r.cells[c].mean);
        let target = match dir {
            Better::Lower => means.fold(f64::INFINITY, f64::min),
            Better::Higher => means.fold(f64::NEG_INFINITY, f64::max),
        };
        for (r, row) in rows.iter().enumerate() {
            best[r][c] = row.cells[c].mean == target;
        }
    }
    Report { rows, best }
}

pub fn load(root: &Path) -> Result<Report, CliError> {
    let paths = find_method_summaries(root)?;
    if paths.is_empty() {
        return Err(CliError::Input(format!("{}: no method summaries found", root.display())));
    }
    let summaries = paths
        .iter()
        .map(|p| read_json::<MethodSummary>(p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(build(&summaries))
}

impl Report {
    /// Fixed-width text table; `*` marks the best value in each column.
    pub fn render_text(&self) -> String {
        let header = ["method", "labels", "runs", "MAE (lower)", "R2 (higher)", "SRCC (higher)"];
        let mut lines: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for (row, best) in self.rows.iter().zip(&self.best) {
            let mut cells = vec![row.label.clone(), row.n_labeled.to_string(), row.n_runs.to_string()];
            for c in 0..3 {
                let mark = if best[c] { " *" } else { "" };
                cells.push(format!("{}{mark}", format_cell(row.cells[c])));
            }
            lines.push(cells);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let padded: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            out.push_str(padded.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "n_labeled", "n_runs", "mae", "r2", "srcc", "best"])
            .expect("in-memory write");
        for (row, best) in self.rows.iter().zip(&self.best) {
            let flags: Vec<&str> = COLUMNS
                .iter()
                .zip(best)
                .filter(|(_, b)| **b)
                .map(|((name, _), _)| *name)
                .collect();
            w.write_record([
                row.label.clone(),
                row.n_labeled.to_string(),
                row.n_runs.to_string(),
                format_cell(row.cells[0]),
                format_cell(row.cells[1]),
                format_cell(row.cells[2]),
                flags.join(";"),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_uses_population_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(format_cell(m), "2.00±0.82");
    }
}
