//! The study × ratio ablation grid.

use std::fs;
use std::path::{Path, PathBuf};

use pfda_core::adaptation::StudyMode;

use crate::config::{ExperimentConfig, Ratio};
use crate::error::Result;
use crate::run::{load_cases, run_with_cases, SUMMARY, TABLE};
use crate::table::{self, Highlight, Row, FAILED, FIRST_COLUMN};

#[derive(Clone, Debug)]
pub struct Cell {
    pub study: StudyMode,
    pub ratio: Ratio,
    pub dir: PathBuf,
    /// Mean target-validation metrics, or the failure message.
    pub result: std::result::Result<[f64; 6], String>,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub cells: Vec<Cell>,
}

impl GridOutcome {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.result.is_ok())
    }

    pub fn cell(&self, study: StudyMode, ratio: Ratio) -> Option<&Cell> {
        self.cells.iter().find(|c| c.study == study && c.ratio == ratio)
    }

    fn rows(&self, study: StudyMode) -> Vec<Row> {
        Ratio::GRID
            .iter()
            .map(|&r| match self.cell(study, r).map(|c| &c.result) {
                Some(Ok(v)) => Row::Values(r.label(), *v),
                _ => Row::Failed(r.label()),
            })
            .collect()
    }
}

pub fn cell_dir(out: &Path, study: StudyMode, ratio: Ratio) -> PathBuf {
    out.join(study.name()).join(ratio.slug())
}

/// The configuration of one grid cell: `base` with study and ratio set.
pub fn cell_config(base: &ExperimentConfig, study: StudyMode, ratio: Ratio) -> ExperimentConfig {
    let mut c = base.clone();
    c.train.study = study;
    c.ratio = ratio;
    c
}

/// Runs every cell in order. A failing cell is recorded and the grid
/// continues; only errors outside the cells (bad config, unreadable data,
/// output I/O) abort.
pub fn run_ablation_grid(base: &ExperimentConfig, out: &Path, mut progress: impl FnMut(&Cell)) -> Result<GridOutcome> {
    base.validate()?;
    let cases = load_cases(base)?;
    fs::create_dir_all(out)?;
    let mut grid = GridOutcome { cells: Vec::new() };
    for study in StudyMode::ALL {
        for ratio in Ratio::GRID {
            let dir = cell_dir(out, study, ratio);
            let result = run_with_cases(&cell_config(base, study, ratio), &cases, &dir)
                .map(|o| o.means())
                .map_err(|e| e.to_string());
            if let Err(msg) = &result {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("error.txt"), format!("{msg}\n"))?;
            }
            let cell = Cell {
                study,
                ratio,
                dir,
                result,
            };
            progress(&cell);
            grid.cells.push(cell);
        }
    }
    write_tables(&grid, base.ratio, out)?;
    Ok(grid)
}

/// Per-study tables under `<out>/<study>/` and the combined table at the top.
pub fn write_tables(grid: &GridOutcome, selected: Ratio, out: &Path) -> Result<()> {
    let mut combined = String::new();
    let mut long = csv::Writer::from_path(out.join(SUMMARY))?;
    long.write_record(
        ["study", FIRST_COLUMN]
            .into_iter()
            .chain(["Dice", "Precision", "Recall", "HD", "HD95", "ASD"]),
    )?;
    for study in StudyMode::ALL {
        let rows = grid.rows(study);
        let dir = out.join(study.name());
        fs::create_dir_all(&dir)?;
        let md = table::markdown(FIRST_COLUMN, &rows, Highlight::DiceAndHd95);
        fs::write(dir.join(TABLE), &md)?;
        table::write_csv(&dir.join(SUMMARY), FIRST_COLUMN, &rows)?;
        combined.push_str(&format!("## {}\n\n{md}\n", study.title()));
        for r in &rows {
            let (label, vals): (&str, Vec<String>) = match r {
                Row::Values(l, v) => (l, v.iter().map(|x| x.to_string()).collect()),
                Row::Failed(l) => (l, vec![FAILED.to_string(); 6]),
                Row::Section(_) => continue,
            };
            long.write_record([study.name().to_string(), label.to_string()].into_iter().chain(vals))?;
        }
    }
    long.flush()?;

    let pick = |study: StudyMode, label: &str| match grid.cell(study, selected).map(|c| &c.result) {
        Some(Ok(v)) => Row::Values(label.into(), *v),
        _ => Row::Failed(label.into()),
    };
    let overview = [
        Row::Section("Base model (No DA)".into()),
        pick(StudyMode::None, "No DA"),
        Row::Section("Domain Adaptation".into()),
        pick(StudyMode::Mmd, "DA (MMD only)"),
        pick(StudyMode::Grl, "DA (GRL only)"),
        pick(StudyMode::GrlMmd, "DA (GRL + MMD)"),
    ];
    let head = format!(
        "## Overview (DiceCE/Focal {})\n\n{}\n",
        selected.label(),
        table::markdown("Methods", &overview, Highlight::EveryMetric)
    );
    fs::write(out.join(TABLE), head + &combined)?;
    Ok(())
}
