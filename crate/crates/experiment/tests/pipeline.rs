use std::fs;
use std::path::Path;
use std::process::Command;

use pfda_core::adaptation::StudyMode;
use pfda_experiment::compare::compare_runs;
use pfda_experiment::config::{ExperimentConfig, Ratio};
use pfda_experiment::grid::{cell_dir, run_ablation_grid};
use pfda_experiment::run::{self, run_experiment};

fn tiny_sets(extra: &[&str]) -> Vec<String> {
    [
        "model.input_side=16",
        "phantom.side=16",
        "model.base_channels=2",
        "model.embed_dim=16",
        "model.num_heads=2",
        "model.mlp_hidden=32",
        "phantom.train_per_site=4",
        "phantom.val_per_site=3",
        "train.epochs=2",
        "train.adam.lr=0.01",
    ]
    .iter()
    .chain(extra)
    .map(|s| s.to_string())
    .collect()
}

fn tiny(extra: &[&str]) -> ExperimentConfig {
    ExperimentConfig::load(None, &tiny_sets(extra)).unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn run_directory_is_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let o = run_experiment(&tiny(&["train.study=grl_mmd"]), &a).unwrap();
    for f in [run::SUMMARY, run::CASES, run::TABLE, run::MANIFEST, run::TRAIN_LOG, run::CHECKPOINT, run::BEST_CHECKPOINT] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    assert_eq!(o.report.cases.len(), 3);
    assert!(o.final_domain_acc.is_some());
    let summary = read(a.join(run::SUMMARY));
    assert!(summary.starts_with("study,DiceCE/Focal,Dice,Precision,Recall,HD,HD95,ASD\ngrl_mmd,0.6/0.4,"));
    assert_eq!(read(a.join(run::CASES)).lines().count(), 4);

    // the manifest alone reproduces the run
    let reloaded = ExperimentConfig::load(Some(&a.join(run::MANIFEST)), &[]).unwrap();
    let b = dir.path().join("b");
    run_experiment(&reloaded, &b).unwrap();
    for f in [run::SUMMARY, run::CASES, run::MANIFEST, run::TRAIN_LOG] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f} differs");
    }
    assert_eq!(fs::read(a.join(run::CHECKPOINT)).unwrap(), fs::read(b.join(run::CHECKPOINT)).unwrap());
}

#[test]
fn invalid_config_fails_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let e = ExperimentConfig::load(None, &tiny_sets(&["ratio=0.9/0.2"])).unwrap_err();
    assert!(e.to_string().contains("ratio"), "{e}");
    let bin = env!("CARGO_BIN_EXE_pfda");
    let status = Command::new(bin)
        .args(["run", "--out"])
        .arg(&out)
        .args(tiny_sets(&["ratio=0.9/0.2"]).iter().flat_map(|s| ["--set", s.as_str()]))
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("sum"));
    assert!(!out.exists());
}

#[test]
fn compare_is_antisymmetric() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&tiny(&["train.study=none", "train.seed=1"]), &a).unwrap();
    run_experiment(&tiny(&["train.study=none", "train.seed=2", "train.epochs=3"]), &b).unwrap();
    let ab = compare_runs(&a, &b).unwrap();
    let ba = compare_runs(&b, &a).unwrap();
    assert_eq!(ab.len(), 6);
    for (x, y) in ab.iter().zip(&ba) {
        assert_eq!(x.metric, y.metric);
        assert_eq!(x.flag, y.flag);
        if x.flag.is_none() {
            assert_eq!(x.t, -y.t);
            assert_eq!(x.p, y.p);
        }
    }
    let own = compare_runs(&a, &a).unwrap();
    assert!(own.iter().all(|r| r.flag.is_some() || r.t == 0.0));

    // a run over other cases cannot be paired
    let c = dir.path().join("c");
    run_experiment(&tiny(&["train.study=none", "phantom.val_per_site=2"]), &c).unwrap();
    let e = compare_runs(&a, &c).unwrap_err().to_string();
    assert!(e.contains("b_val_002"), "{e}");
}

#[test]
fn cli_exports() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_pfda");
    let run_dir = dir.path().join("run");
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, tiny_sets(&["train.study=\"grl\""]).join("\n").replace("=", " = ")).unwrap();
    let ok = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["run", "--config", cfg.to_str().unwrap(), "--set", "train.epochs=3", "--out", run_dir.to_str().unwrap()]);
    assert!(read(run_dir.join(run::MANIFEST)).contains("train.epochs = 3\n"));
    assert!(read(run_dir.join(run::MANIFEST)).contains("train.study = \"grl\"\n"));

    let stats = dir.path().join("stats");
    ok(&["compare", run_dir.to_str().unwrap(), run_dir.to_str().unwrap(), "--out", stats.to_str().unwrap()]);
    let text = read(stats.join(run::STATS));
    assert_eq!(text.lines().next().unwrap(), "metric,n,t,p,df,significant,flag");

    let feats = dir.path().join("feats");
    ok(&["features", run_dir.to_str().unwrap(), "--out", feats.to_str().unwrap()]);
    let text = read(feats.join("features.csv"));
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["voxel_volume", "surface_area", "sphericity", "energy"]);

    // gt against itself through the file form
    let case = dir.path().join("run/predictions/b_val_000/mask.pfda");
    let smap = dir.path().join("smap");
    ok(&["surface-map", "--pred", case.to_str().unwrap(), "--gt", case.to_str().unwrap(), "--out", smap.to_str().unwrap()]);
    let text = read(smap.join("surface_map.csv"));
    assert_eq!(text.lines().next().unwrap(), "x_mm,y_mm,z_mm,distance_mm");
    assert!(text.lines().skip(1).all(|l| l.ends_with(",0")));
    assert!(text.lines().count() > 1);

    let gen = dir.path().join("data");
    ok(&["phantom-gen", "--out", gen.to_str().unwrap(), "--set", "phantom.train_per_site=2", "--set", "phantom.val_per_site=1"]);
    assert_eq!(read(gen.join("manifest.csv")).lines().count(), 7);

    // the generated dataset trains like the in-memory phantoms
    let from_disk = dir.path().join("disk");
    let root = format!("data.root=\"{}\"", gen.display());
    let mut args = vec!["run".to_string(), "--out".into(), from_disk.display().to_string()];
    for s in tiny_sets(&[&root, "phantom.train_per_site=2", "phantom.val_per_site=1", "model.input_side=48", "phantom.side=48", "train.epochs=1", "train.study=none"]) {
        args.push("--set".into());
        args.push(s);
    }
    let out = Command::new(bin).args(&args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(from_disk.join(run::CASES)).lines().count(), 2);
}

#[test]
fn grid_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    // MMD needs two samples per domain, so both MMD studies fail
    let base = tiny(&["train.study=none", "train.batch_per_domain=1", "train.epochs=1"]);
    let grid = run_ablation_grid(&base, dir.path(), |_| {}).unwrap();
    assert_eq!(grid.cells.len(), 12);
    assert!(!grid.all_ok());
    for c in &grid.cells {
        assert_eq!(c.result.is_err(), c.study.uses_mmd(), "{} {}", c.study, c.ratio);
    }
    let md = read(dir.path().join("mmd/table.md"));
    assert!(md.contains("| 0.5/0.5 | FAILED | FAILED | FAILED | FAILED | FAILED | FAILED |"));
    assert!(cell_dir(dir.path(), StudyMode::Mmd, Ratio::GRID[0]).join("error.txt").is_file());
    let grl = read(dir.path().join("grl/table.md"));
    assert_eq!(grl.lines().count(), 5);
    assert!(!grl.contains("FAILED"));
    let top = read(dir.path().join("table.md"));
    assert!(top.contains("| DA (MMD only) | FAILED |"));
    assert!(top.contains("| DA (GRL only) | "));

    let bin = env!("CARGO_BIN_EXE_pfda");
    let out = Command::new(bin)
        .args(["grid", "--out"])
        .arg(dir.path().join("cli"))
        .args(
            tiny_sets(&["train.study=none", "train.batch_per_domain=1", "train.epochs=1", "phantom.train_per_site=2", "phantom.val_per_site=1"])
                .iter()
                .flat_map(|s| ["--set", s.as_str()]),
        )
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
