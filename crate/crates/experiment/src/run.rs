//! A single training run and its self-describing output directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use pfda_core::checkpoint::save_checkpoint;
use pfda_core::data::{generate_phantoms, load_dataset, Case, Split};
use pfda_core::metrics::{CaseMetrics, Metric, MetricsReport};
use pfda_core::train::{fit, predict_mask, LogRow, TrainState};
use pfda_core::volume::{MaskVolume, Volume};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::table::{self, Highlight, Row};

pub const SUMMARY: &str = "summary.csv";
pub const CASES: &str = "cases.csv";
pub const TABLE: &str = "table.md";
pub const STATS: &str = "stats.csv";
pub const MANIFEST: &str = "manifest.txt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const CHECKPOINT: &str = "checkpoint.pfdc";
pub const BEST_CHECKPOINT: &str = "best.pfdc";
pub const PREDICTIONS: &str = "predictions";

pub const VERSION_TAG: &str = concat!("pfda-experiment ", env!("CARGO_PKG_VERSION"), " (f64)");

/// Cases grouped by role.
pub struct Splits<'a> {
    pub source_train: Vec<&'a Case>,
    pub target_train: Vec<&'a Case>,
    pub source_val: Vec<&'a Case>,
    pub target_val: Vec<&'a Case>,
}

impl<'a> Splits<'a> {
    pub fn new(cases: &'a [Case], cfg: &ExperimentConfig) -> Result<Self> {
        let pick = |site: &str, split: Split| -> Vec<&'a Case> {
            cases.iter().filter(|c| c.site == site && c.split == split).collect()
        };
        let (src, tgt) = (&cfg.data.source_site, &cfg.data.target_site);
        let s = Splits {
            source_train: pick(src, Split::Train),
            target_train: pick(tgt, Split::Train),
            source_val: pick(src, Split::Val),
            target_val: pick(tgt, Split::Val),
        };
        for (name, v) in [
            ("source train", &s.source_train),
            ("target train", &s.target_train),
            ("source val", &s.source_val),
            ("target val", &s.target_val),
        ] {
            if v.is_empty() {
                return Err(Error::Config(format!("{name} split is empty (sites {src:?} / {tgt:?})")));
            }
        }
        Ok(s)
    }
}

/// Loads the dataset or generates the phantom benchmark.
pub fn load_cases(cfg: &ExperimentConfig) -> Result<Vec<Case>> {
    Ok(match &cfg.data.root {
        Some(root) => load_dataset(root, cfg.model.input_side)?,
        None => generate_phantoms(&cfg.phantom)?,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// Target-site validation metrics of the selected parameters.
    pub report: MetricsReport,
    pub best_epoch: usize,
    pub source_val_dice: f64,
    /// Mean domain-classifier batch accuracy over the last epoch.
    pub final_domain_acc: Option<f64>,
}

impl RunOutcome {
    pub fn means(&self) -> [f64; 6] {
        Metric::ALL.map(|m| self.report.mean(m))
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let cases = load_cases(cfg)?;
    run_with_cases(cfg, &cases, out)
}

/// Like [`run_experiment`] but on already loaded cases.
pub fn run_with_cases(cfg: &ExperimentConfig, cases: &[Case], out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let splits = Splits::new(cases, cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(MANIFEST), manifest_text(cfg))?;

    let tc = cfg.train_config();
    let mut log = BufWriter::new(File::create(out.join(TRAIN_LOG))?);
    let fit = fit(
        &cfg.model,
        &tc,
        &splits.source_train,
        &splits.target_train,
        &splits.source_val,
        Some(&mut log),
    )?;
    drop(log);
    save_checkpoint(out.join(CHECKPOINT), &cfg.model, &fit.state)?;
    let best_state = TrainState {
        params: fit.best.clone(),
        ..fit.state.clone()
    };
    save_checkpoint(out.join(BEST_CHECKPOINT), &cfg.model, &best_state)?;

    let mut report = MetricsReport::default();
    for c in &splits.target_val {
        let pred = predict_mask(&fit.best, &cfg.model, c, tc.zscore)?;
        let dir = out.join(PREDICTIONS).join(&c.id);
        fs::create_dir_all(&dir)?;
        c.volume.save(dir.join("volume.pfda"))?;
        c.mask.save(dir.join("mask.pfda"))?;
        pred.save(dir.join("pred.pfda"))?;
        report.cases.push(CaseMetrics::evaluate(&c.id, &pred, &c.mask)?);
    }
    write_cases(&out.join(CASES), &report.cases)?;

    let steps_per_epoch = fit.log.len() / tc.epochs.max(1);
    let outcome = RunOutcome {
        dir: out.to_path_buf(),
        report,
        best_epoch: fit.best_epoch,
        source_val_dice: fit.best_dice,
        final_domain_acc: final_domain_acc(&fit.log, steps_per_epoch),
    };
    let row = Row::Values(cfg.ratio.label(), outcome.means());
    write_summary(&out.join(SUMMARY), cfg, &outcome)?;
    fs::write(out.join(TABLE), table::markdown(table::FIRST_COLUMN, &[row], Highlight::DiceAndHd95))?;
    write_diagnostics(&out.join(DIAGNOSTICS), &outcome)?;
    Ok(outcome)
}

pub fn manifest_text(cfg: &ExperimentConfig) -> String {
    let header = [
        "pfda run manifest; reload with `pfda run --config manifest.txt`".to_string(),
        format!("version = {VERSION_TAG}"),
        format!(
            "seeds: train.seed = {}, phantom.seed = {}",
            cfg.train.seed,
            if cfg.data.root.is_some() { "unused".to_string() } else { cfg.phantom.seed.to_string() }
        ),
    ];
    cfg.to_manifest(&header)
}

fn final_domain_acc(log: &[LogRow], per_epoch: usize) -> Option<f64> {
    let tail = &log[log.len().saturating_sub(per_epoch.max(1))..];
    let acc: Vec<f64> = tail.iter().filter_map(|r| r.domain_acc).collect();
    (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
}

const CASE_HEADER: [&str; 7] = ["case_id", "dice", "precision", "recall", "hd", "hd95", "asd"];

pub fn write_cases(path: &Path, cases: &[CaseMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CASE_HEADER)?;
    for c in cases {
        w.write_record(std::iter::once(c.case_id.clone()).chain(Metric::ALL.iter().map(|&m| c.get(m).to_string())))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cases(path: &Path) -> Result<Vec<CaseMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(CASE_HEADER) {
        return Err(Error::Config(format!("{}: unexpected header", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad number {:?}", path.display(), &rec[i])))
        };
        out.push(CaseMetrics {
            case_id: rec[0].to_string(),
            dice: num(1)?,
            precision: num(2)?,
            recall: num(3)?,
            hd: num(4)?,
            hd95: num(5)?,
            asd: num(6)?,
        });
    }
    Ok(out)
}

fn write_summary(path: &Path, cfg: &ExperimentConfig, o: &RunOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(
        ["study", table::FIRST_COLUMN]
            .into_iter()
            .map(String::from)
            .chain(Metric::ALL.iter().map(|m| m.name().to_string())),
    )?;
    w.write_record(
        [cfg.train.study.name().to_string(), cfg.ratio.label()]
            .into_iter()
            .chain(o.means().iter().map(|v| v.to_string())),
    )?;
    w.flush()?;
    Ok(())
}

fn write_diagnostics(path: &Path, o: &RunOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["best_epoch", "source_val_dice", "final_domain_acc", "target_cases"])?;
    w.write_record([
        o.best_epoch.to_string(),
        o.source_val_dice.to_string(),
        o.final_domain_acc.map_or(String::new(), |a| a.to_string()),
        o.report.cases.len().to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// One stored target-validation case of a run.
pub struct StoredCase {
    pub id: String,
    pub volume: Volume,
    pub gt: MaskVolume,
    pub pred: MaskVolume,
}

pub fn load_prediction(run: &Path, case_id: &str) -> Result<StoredCase> {
    let dir = run.join(PREDICTIONS).join(case_id);
    if !dir.is_dir() {
        return Err(Error::Config(format!("run {} has no stored prediction for {case_id:?}", run.display())));
    }
    Ok(StoredCase {
        id: case_id.to_string(),
        volume: Volume::load(dir.join("volume.pfda"))?,
        gt: MaskVolume::load(dir.join("mask.pfda"))?,
        pred: MaskVolume::load(dir.join("pred.pfda"))?,
    })
}

/// Every stored prediction, in `cases.csv` order.
pub fn load_predictions(run: &Path) -> Result<Vec<StoredCase>> {
    read_cases(&run.join(CASES))?
        .iter()
        .map(|c| load_prediction(run, &c.case_id))
        .collect()
}
