use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pfda_core::data::{generate_phantoms, write_dataset};
use pfda_core::volume::MaskVolume;
use pfda_experiment::compare::{compare_runs, write_stats};
use pfda_experiment::export::{surface_points, write_surface_map, SURFACE_MAP};
use pfda_experiment::features::{consistency, extract, write_features};
use pfda_experiment::grid::run_ablation_grid;
use pfda_experiment::run::{load_prediction, load_predictions, manifest_text, run_experiment, MANIFEST, STATS};
use pfda_experiment::ExperimentConfig;

#[derive(Parser)]
#[command(name = "pfda", version, about = "Domain-adaptive 3D segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Dotted-key TOML file; a run's manifest.txt works too.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.epochs=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig::load(self.config.as_deref(), &self.sets)?)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train, validate on the target site and write a run directory.
    Run(ConfigArgs),
    /// All four studies at all three DiceCE/Focal ratios.
    Grid(ConfigArgs),
    /// Paired t-tests between two runs over their common cases.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predicted-surface distance point cloud.
    SurfaceMap {
        /// Run directory holding stored predictions.
        #[arg(long, requires = "case", conflicts_with_all = ["pred", "gt"])]
        run: Option<PathBuf>,
        #[arg(long)]
        case: Option<String>,
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pearson r between predicted- and reference-mask features.
    Features {
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the phantom benchmark as a dataset directory.
    PhantomGen(ConfigArgs),
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Run(a) => {
            let cfg = a.load()?;
            let t = Instant::now();
            let o = run_experiment(&cfg, &a.out)?;
            let m = o.means();
            eprintln!(
                "{} {}: dice {:.4} hd95 {:.3} (best epoch {}, {:.0}s)",
                cfg.train.study,
                cfg.ratio,
                m[0],
                m[4],
                o.best_epoch,
                t.elapsed().as_secs_f64()
            );
            Ok(true)
        }
        Cmd::Grid(a) => {
            let cfg = a.load()?;
            let t = Instant::now();
            let grid = run_ablation_grid(&cfg, &a.out, |c| match &c.result {
                Ok(m) => eprintln!("{} {}: dice {:.4} ({:.0}s)", c.study, c.ratio, m[0], t.elapsed().as_secs_f64()),
                Err(e) => eprintln!("{} {}: FAILED: {e}", c.study, c.ratio),
            })?;
            Ok(grid.all_ok())
        }
        Cmd::Compare { run_a, run_b, out } => {
            let rows = compare_runs(&run_a, &run_b)?;
            fs::create_dir_all(&out)?;
            write_stats(&out.join(STATS), &rows)?;
            for r in &rows {
                let star = if r.significant { " *" } else { "" };
                match &r.flag {
                    Some(f) => eprintln!("{:<9} n={} {f}", r.metric, r.n),
                    None => eprintln!("{:<9} n={} t={:.3} p={:.4}{star}", r.metric, r.n, r.t, r.p),
                }
            }
            Ok(true)
        }
        Cmd::SurfaceMap {
            run,
            case,
            pred,
            gt,
            out,
        } => {
            let (p, g) = match (run, case, pred, gt) {
                (Some(run), Some(case), _, _) => {
                    let c = load_prediction(&run, &case)?;
                    (c.pred, c.gt)
                }
                (None, _, Some(p), Some(g)) => (load_mask(&p)?, load_mask(&g)?),
                _ => bail!("give either --run and --case, or --pred and --gt"),
            };
            let pts = surface_points(&p, &g)?;
            fs::create_dir_all(&out)?;
            write_surface_map(&out.join(SURFACE_MAP), &pts)?;
            eprintln!("{} boundary points", pts.len());
            Ok(true)
        }
        Cmd::Features { run, out } => {
            let t = extract(&load_predictions(&run)?)?;
            let rows = consistency(&t);
            fs::create_dir_all(&out)?;
            write_features(&out, &t, &rows)?;
            for r in &rows {
                eprintln!("{:<13} r={:.4} {}", r.feature, r.r, r.flag.as_deref().unwrap_or(""));
            }
            Ok(true)
        }
        Cmd::PhantomGen(a) => {
            let cfg = a.load()?;
            let cases = generate_phantoms(&cfg.phantom)?;
            fs::create_dir_all(&a.out)?;
            write_dataset(&a.out, &cases)?;
            fs::write(a.out.join(MANIFEST), manifest_text(&cfg))?;
            eprintln!("{} cases written to {}", cases.len(), a.out.display());
            Ok(true)
        }
    }
}

fn load_mask(p: &Path) -> Result<MaskVolume> {
    MaskVolume::load(p).with_context(|| format!("reading {}", p.display()))
}
