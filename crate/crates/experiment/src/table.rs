//! Result tables in the ablation layout: markdown with bolded best cells
//! and raw-fraction CSV.

use std::path::Path;

use pfda_core::metrics::{Metric, MetricsReport};

use crate::error::Result;

pub const FIRST_COLUMN: &str = "DiceCE/Focal";
pub const FAILED: &str = "FAILED";

#[derive(Clone, Debug, PartialEq)]
pub enum Row {
    Values(String, [f64; 6]),
    Failed(String),
    /// A label-only divider row.
    Section(String),
}

impl Row {
    pub fn from_report(label: impl Into<String>, report: &MetricsReport) -> Self {
        Row::Values(label.into(), Metric::ALL.map(|m| report.mean(m)))
    }

    fn label(&self) -> &str {
        match self {
            Row::Values(l, _) | Row::Failed(l) | Row::Section(l) => l,
        }
    }
}

/// Which cells get bolded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Highlight {
    /// Highest Dice and lowest HD95.
    DiceAndHd95,
    /// The best value of every column.
    EveryMetric,
}

fn higher_is_better(m: Metric) -> bool {
    m.is_overlap()
}

fn cell(m: Metric, v: f64) -> String {
    if v.is_nan() {
        return "n/a".into();
    }
    match m {
        Metric::Dice | Metric::Precision | Metric::Recall => format!("{:.2}", v * 100.0),
        Metric::Hd | Metric::Hd95 => format!("{v:.2}"),
        Metric::Asd => format!("{v:.3}"),
    }
}

fn header(first: &str) -> Vec<String> {
    std::iter::once(first.to_string())
        .chain(Metric::ALL.iter().map(|m| m.name().to_string()))
        .collect()
}

/// Best displayed value per column over the `Values` rows; comparison is
/// on the rounded text so equal-looking cells are bolded together.
fn best_cells(rows: &[Row], hl: Highlight) -> Vec<Option<String>> {
    Metric::ALL
        .iter()
        .map(|&m| {
            let wanted = match hl {
                Highlight::DiceAndHd95 => matches!(m, Metric::Dice | Metric::Hd95),
                Highlight::EveryMetric => true,
            };
            if !wanted {
                return None;
            }
            let idx = Metric::ALL.iter().position(|&x| x == m).unwrap();
            rows.iter()
                .filter_map(|r| match r {
                    Row::Values(_, v) if !v[idx].is_nan() => Some(cell(m, v[idx]).parse::<f64>().unwrap()),
                    _ => None,
                })
                .reduce(|a, b| if higher_is_better(m) == (b > a) { b } else { a })
                .map(|best| cell(m, if m.is_overlap() { best / 100.0 } else { best }))
        })
        .collect()
}

pub fn markdown(first: &str, rows: &[Row], hl: Highlight) -> String {
    let best = best_cells(rows, hl);
    let mut s = format!("| {} |\n", header(first).join(" | "));
    s.push_str(&format!("|{}\n", "---|".repeat(7)));
    for r in rows {
        let cells: Vec<String> = match r {
            Row::Values(_, v) => Metric::ALL
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    let c = cell(m, v[i]);
                    if best[i].as_deref() == Some(c.as_str()) {
                        format!("**{c}**")
                    } else {
                        c
                    }
                })
                .collect(),
            Row::Failed(_) => vec![FAILED.to_string(); 6],
            Row::Section(_) => vec![String::new(); 6],
        };
        let label = match r {
            Row::Section(l) => format!("*{l}*"),
            _ => r.label().to_string(),
        };
        s.push_str(&format!("| {label} | {} |\n", cells.join(" | ")));
    }
    s
}

/// Raw fractions and millimetres; section rows are skipped.
pub fn write_csv(path: &Path, first: &str, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(first))?;
    for r in rows {
        match r {
            Row::Values(l, v) => {
                w.write_record(std::iter::once(l.clone()).chain(v.iter().map(|x| x.to_string())))?;
            }
            Row::Failed(l) => {
                w.write_record(std::iter::once(l.clone()).chain(std::iter::repeat_n(FAILED.to_string(), 6)))?;
            }
            Row::Section(_) => {}
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<Row> {
        vec![
            Row::Values("0.5/0.5".into(), [0.9952, 0.9960, 0.9944, 3.42, 0.82, 0.073]),
            Row::Values("0.6/0.4".into(), [0.9953, 0.9964, 0.9943, 3.13, 0.77, 0.062]),
            Row::Values("0.7/0.3".into(), [0.99531, 0.9960, 0.9946, 2.36, 0.79, 0.062]),
        ]
    }

    #[test]
    fn grid_table_layout() {
        let md = markdown(FIRST_COLUMN, &rows(), Highlight::DiceAndHd95);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines[0], "| DiceCE/Focal | Dice | Precision | Recall | HD | HD95 | ASD |");
        assert_eq!(lines[1], "|---|---|---|---|---|---|---|");
        // 99.53 appears twice after rounding: both bolded
        assert_eq!(lines[3], "| 0.6/0.4 | **99.53** | 99.64 | 99.43 | 3.13 | **0.77** | 0.062 |");
        assert_eq!(lines[4], "| 0.7/0.3 | **99.53** | 99.60 | 99.46 | 2.36 | 0.79 | 0.062 |");
        assert_eq!(lines[2], "| 0.5/0.5 | 99.52 | 99.60 | 99.44 | 3.42 | 0.82 | 0.073 |");
        assert_eq!(lines.len(), 5);
    }

    #[test]
    fn every_metric_highlight() {
        let md = markdown("Methods", &rows(), Highlight::EveryMetric);
        assert!(md.contains("| 0.7/0.3 | **99.53** | 99.60 | **99.46** | **2.36** | 0.79 | **0.062** |"), "{md}");
    }

    #[test]
    fn failed_and_section_rows() {
        let mut r = rows();
        r[0] = Row::Failed("0.5/0.5".into());
        r.insert(0, Row::Section("Domain Adaptation".into()));
        let md = markdown(FIRST_COLUMN, &r, Highlight::DiceAndHd95);
        assert!(md.contains("| 0.5/0.5 | FAILED | FAILED | FAILED | FAILED | FAILED | FAILED |"));
        assert!(md.contains("| *Domain Adaptation* |  |  |  |  |  |  |"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, FIRST_COLUMN, &r).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "DiceCE/Focal,Dice,Precision,Recall,HD,HD95,ASD");
        assert_eq!(lines[1], "0.5/0.5,FAILED,FAILED,FAILED,FAILED,FAILED,FAILED");
        assert_eq!(lines[2], "0.6/0.4,0.9953,0.9964,0.9943,3.13,0.77,0.062");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn nan_cells() {
        let r = vec![Row::Values("x".into(), [0.5, f64::NAN, 0.5, f64::NAN, f64::NAN, f64::NAN])];
        let md = markdown(FIRST_COLUMN, &r, Highlight::DiceAndHd95);
        assert!(md.contains("| x | **50.00** | n/a | 50.00 | n/a | n/a | n/a |"), "{md}");
    }
}
