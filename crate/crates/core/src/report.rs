//! Comparison tables over completed runs.
//!
//! One rendering path serves both `ablate` (straight from its summaries) and
//! `report` (from summary.json files on disk), so regenerating a table from
//! run directories reproduces it byte for byte. Gain is always against the
//! first run.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::RunSummary;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{path:?}: {source}")]
    BadSummary {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("incompatible stream specs: run {name:?} does not match the baseline")]
    IncompatibleRuns { name: String },
    #[error("no runs given")]
    Empty,
}

fn check_layouts(rows: &[RunSummary]) -> Result<(), ReportError> {
    let base = rows.first().ok_or(ReportError::Empty)?;
    for row in rows {
        if row.layout != base.layout {
            return Err(ReportError::IncompatibleRuns {
                name: row.name.clone(),
            });
        }
    }
    Ok(())
}

/// CSV: one row per run with mean mAP, gain vs the first run, adapted
/// iteration count, and skip rate.
pub fn render_comparison(rows: &[RunSummary]) -> Result<String, ReportError> {
    check_layouts(rows)?;
    let baseline = rows[0].mean_map;
    let mut s = String::from("group,name,seed,mean_map,gain,iter,skip_rate\n");
    for row in rows {
        s.push_str(&format!(
            "{},{},{},{:.4},{:+.4},{},{:.4}\n",
            row.group,
            row.name,
            row.seed,
            row.mean_map,
            row.mean_map - baseline,
            row.adapted_iterations,
            row.skip_rate,
        ));
    }
    Ok(s)
}

/// CSV: per-(round, domain) mAP cells for every run.
pub fn render_cells(rows: &[RunSummary]) -> Result<String, ReportError> {
    check_layouts(rows)?;
    let mut s = String::from("name,round,domain,map\n");
    for row in rows {
        for (r, per_domain) in row.cell_map.iter().enumerate() {
            for (d, v) in per_domain.iter().enumerate() {
                s.push_str(&format!(
                    "{},{},{},{:.4}\n",
                    row.name, r, row.layout.domain_tags[d], v
                ));
            }
        }
    }
    Ok(s)
}

/// CSV: per-round mean mAP curves.
pub fn render_rounds(rows: &[RunSummary]) -> Result<String, ReportError> {
    check_layouts(rows)?;
    let mut s = String::from("name,round,mean_map\n");
    for row in rows {
        for (r, v) in row.round_mean.iter().enumerate() {
            s.push_str(&format!("{},{},{:.4}\n", row.name, r, v));
        }
    }
    Ok(s)
}

fn text_line(row: &RunSummary, baseline: f64) -> String {
    format!(
        "  {:<10} mean mAP {:.4}  gain {:+.4}  iter {:>6}  skip {:.1}%",
        row.name,
        row.mean_map,
        row.mean_map - baseline,
        row.adapted_iterations,
        row.skip_rate * 100.0
    )
}

/// Human-readable summary, one sub-table per group. When a later group lacks
/// the `full` row, it is echoed there as the reference line, with the same
/// rendered numbers as in its home group.
pub fn render_text(rows: &[RunSummary]) -> Result<String, ReportError> {
    check_layouts(rows)?;
    let baseline = rows[0].mean_map;
    let full_line = rows
        .iter()
        .find(|r| r.name == "full")
        .map(|r| text_line(r, baseline));

    let mut groups: Vec<String> = Vec::new();
    for row in rows {
        if !groups.contains(&row.group) {
            groups.push(row.group.clone());
        }
    }
    let mut s = String::new();
    for (gi, group) in groups.iter().enumerate() {
        let title = if group.is_empty() { "runs" } else { group };
        s.push_str(&format!("== {title} ==\n"));
        let members: Vec<&RunSummary> = rows.iter().filter(|r| &r.group == group).collect();
        if gi > 0 && !members.iter().any(|r| r.name == "full") {
            if let Some(line) = &full_line {
                s.push_str(line);
                s.push('\n');
            }
        }
        for row in members {
            s.push_str(&text_line(row, baseline));
            s.push('\n');
        }
        s.push('\n');
    }
    Ok(s)
}

/// Write comparison.csv, cells.csv, rounds.csv, and report.txt into `dir`.
pub fn write_report(dir: &Path, rows: &[RunSummary]) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("comparison.csv"), render_comparison(rows)?)?;
    fs::write(dir.join("cells.csv"), render_cells(rows)?)?;
    fs::write(dir.join("rounds.csv"), render_rounds(rows)?)?;
    fs::write(dir.join("report.txt"), render_text(rows)?)?;
    Ok(())
}

/// Load summary.json from each run directory, preserving order.
pub fn load_summaries(dirs: &[PathBuf]) -> Result<Vec<RunSummary>, ReportError> {
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let path = dir.join("summary.json");
        let text = fs::read_to_string(&path)?;
        let summary: RunSummary =
            serde_json::from_str(&text).map_err(|source| ReportError::BadSummary {
                path: path.clone(),
                source,
            })?;
        rows.push(summary);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::StreamLayout;

    fn summary(name: &str, group: &str, mean: f64) -> RunSummary {
        let layout = StreamLayout {
            domain_tags: vec!["a".into(), "b".into()],
            rounds: 2,
            frames_per_domain: 1,
        };
        RunSummary {
            name: name.into(),
            group: group.into(),
            seed: 0,
            layout,
            cell_map: vec![vec![mean, mean]; 2],
            mean_map: mean,
            adapted_iterations: 3,
            paused_iterations: 1,
            skip_rate: 0.25,
            round_mean: vec![mean, mean],
        }
    }

    #[test]
    fn gain_column_is_vs_first_run() {
        let rows = vec![summary("base", "", 0.5), summary("cand", "", 0.62)];
        let csv = render_comparison(&rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[1].contains("+0.0000"));
        assert!(lines[2].contains("+0.1200"));
    }

    #[test]
    fn single_run_gain_is_zero() {
        let rows = vec![summary("only", "", 0.4)];
        let csv = render_comparison(&rows).unwrap();
        assert!(csv.lines().nth(1).unwrap().contains("+0.0000"));
    }

    #[test]
    fn incompatible_layouts_rejected() {
        let mut other = summary("other", "", 0.3);
        other.layout.rounds = 5;
        let rows = vec![summary("base", "", 0.5), other];
        assert!(matches!(
            render_comparison(&rows),
            Err(ReportError::IncompatibleRuns { .. })
        ));
    }

    #[test]
    fn full_row_is_echoed_into_later_groups() {
        let rows = vec![
            summary("mt", "components", 0.4),
            summary("full", "components", 0.6),
            summary("sr", "variants", 0.55),
        ];
        let text = render_text(&rows).unwrap();
        let full_lines: Vec<&str> = text.lines().filter(|l| l.contains("full")).collect();
        assert_eq!(full_lines.len(), 2);
        assert_eq!(full_lines[0], full_lines[1]);
    }

    #[test]
    fn rendering_is_idempotent() {
        let rows = vec![summary("a", "", 0.5), summary("b", "", 0.61)];
        assert_eq!(
            render_comparison(&rows).unwrap(),
            render_comparison(&rows).unwrap()
        );
        assert_eq!(render_text(&rows).unwrap(), render_text(&rows).unwrap());
    }
}
