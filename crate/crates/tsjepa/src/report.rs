//! Plain-text summaries of finished runs.
//!
//! `render_report` scans a directory tree for `results.csv` files written
//! by [`crate::config::run`] and prints one aligned table per
//! (dataset, task) group, so runs of different methods line up.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::ResultRow;

#[derive(Error, Debug)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("no results.csv found under {0}")]
    NoResults(String),
}

/// Collect every result row under `dir`, recursively.
pub fn collect_rows(dir: &Path) -> Result<Vec<ResultRow>, ReportError> {
    let mut rows = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    let io = |p: &Path, source| ReportError::Io { path: p.display().to_string(), source };
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = fs::read_dir(&d)
            .map_err(|e| io(&d, e))?
            .collect::<Result<_, _>>()
            .map_err(|e| io(&d, e))?;
        entries.sort_by_key(|e| e.path());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "results.csv") {
                rows.extend(read_results_csv(&path)?);
            }
        }
    }
    if rows.is_empty() {
        return Err(ReportError::NoResults(dir.display().to_string()));
    }
    Ok(rows)
}

fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>, ReportError> {
    let csv_err = |source| ReportError::Csv { path: path.display().to_string(), source };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record.map_err(csv_err)?;
        let field = |i: usize| r.get(i).unwrap_or("").to_string();
        let opt = |i: usize| {
            let s = field(i);
            (!s.is_empty()).then_some(s)
        };
        out.push(ResultRow {
            dataset: field(0),
            method: field(1),
            task: field(2),
            metric: field(3),
            value: field(4).parse().unwrap_or(f64::NAN),
            std: opt(5).and_then(|s| s.parse().ok()),
            extra: opt(6),
            best: opt(7).and_then(|s| s.parse().ok()),
        });
    }
    Ok(out)
}

/// Aligned text tables for all results under `dir`, grouped by
/// (dataset, task). Rows flagged best are marked with `*`.
pub fn render_report(dir: &Path) -> Result<String, ReportError> {
    let rows = collect_rows(dir)?;
    let mut groups: BTreeMap<(String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.dataset.clone(), r.task.clone())).or_default().push(r);
    }

    let mut out = String::new();
    for ((dataset, task), group) in &groups {
        out.push_str(&format!("## {dataset} / {task}\n"));
        let mut lines: Vec<[String; 4]> = Vec::new();
        for r in group {
            let value = match r.std {
                Some(s) => format!("{:.4} ± {:.4}", r.value, s),
                None => format!("{:.6}", r.value),
            };
            let mark = if r.best == Some(true) { " *".to_string() } else { String::new() };
            lines.push([
                r.method.clone(),
                r.metric.clone(),
                r.extra.clone().unwrap_or_default(),
                format!("{value}{mark}"),
            ]);
        }
        let headers = ["method", "metric", "", "value"];
        let mut widths = headers.map(str::len);
        for l in &lines {
            for (w, cell) in widths.iter_mut().zip(l.iter()) {
                *w = (*w).max(cell.len());
            }
        }
        let fmt_line = |cells: [&str; 4]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
                if i > 0 {
                    s.push_str("  ");
                }
                s.push_str(&format!("{cell:<w$}"));
            }
            s.trim_end().to_string() + "\n"
        };
        out.push_str(&fmt_line(headers));
        for l in &lines {
            out.push_str(&fmt_line([&l[0], &l[1], &l[2], &l[3]]));
        }
        out.push('\n');
    }
    Ok(out.trim_end().to_string() + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ResultRow;

    fn write_results(dir: &Path, rows: &[ResultRow]) {
        let mut w = csv::Writer::from_path(dir.join("results.csv")).unwrap();
        w.write_record(["dataset", "method", "task", "metric", "value", "std", "extra", "best"])
            .unwrap();
        for r in rows {
            w.write_record([
                r.dataset.as_str(),
                r.method.as_str(),
                r.task.as_str(),
                r.metric.as_str(),
                &format!("{:.17e}", r.value),
                &r.std.map(|s| format!("{s:.17e}")).unwrap_or_default(),
                r.extra.as_deref().unwrap_or(""),
                &r.best.map(|b| b.to_string()).unwrap_or_default(),
            ])
            .unwrap();
        }
        w.flush().unwrap();
    }

    fn row(method: &str, metric: &str, value: f64, best: Option<bool>) -> ResultRow {
        ResultRow {
            dataset: "demo".into(),
            method: method.into(),
            task: "probe".into(),
            metric: metric.into(),
            value,
            std: Some(0.01),
            extra: None,
            best,
        }
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(render_report(dir.path()), Err(ReportError::NoResults(_))));
    }

    #[test]
    fn groups_methods_under_one_table() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        std::fs::create_dir_all(&a).unwrap();
        std::fs::create_dir_all(&b).unwrap();
        write_results(&a, &[row("jepa", "accuracy", 0.91, None)]);
        write_results(&b, &[row("random", "accuracy", 0.42, None)]);
        let text = render_report(dir.path()).unwrap();
        assert_eq!(text.matches("## demo / probe").count(), 1, "{text}");
        assert!(text.contains("jepa"), "{text}");
        assert!(text.contains("random"), "{text}");
        assert!(text.contains("0.9100 ± 0.0100"), "{text}");
    }

    #[test]
    fn best_rows_are_marked() {
        let dir = tempfile::tempdir().unwrap();
        write_results(
            dir.path(),
            &[row("jepa", "mse", 0.2, Some(false)), row("jepa", "mse", 0.1, Some(true))],
        );
        let text = render_report(dir.path()).unwrap();
        assert!(text.contains('*'), "{text}");
    }

    #[test]
    fn round_trips_written_rows() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("jepa", "accuracy", 0.5, None)];
        write_results(dir.path(), &rows);
        let back = collect_rows(dir.path()).unwrap();
        assert_eq!(back, rows);
    }
}
