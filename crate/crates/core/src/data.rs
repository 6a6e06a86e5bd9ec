//! Datasets: on-disk layout, manifest, phantom generation and batching.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{synth_phantom, SiteParams};
use crate::volume::{MaskVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

/// One `manifest.csv` row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub site: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub site: String,
    pub split: Split,
    pub volume: Volume,
    pub mask: MaskVolume,
}

impl Case {
    fn dir(root: &Path, site: &str, id: &str) -> PathBuf {
        root.join(site).join(id)
    }

    pub fn row(&self) -> ManifestRow {
        ManifestRow {
            case_id: self.id.clone(),
            site: self.site.clone(),
            split: self.split,
        }
    }

    /// Network input `S³` values in z-major order, optionally z-scored.
    pub fn input(&self, zscore: bool) -> Vec<f64> {
        let mut v: Vec<f64> = self.volume.data().iter().map(|&x| f64::from(x)).collect();
        if zscore {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
        }
        v
    }

    pub fn target(&self) -> Vec<f64> {
        self.mask.data().iter().map(|&m| f64::from(m)).collect()
    }
}

pub const MANIFEST: &str = "manifest.csv";

pub fn write_manifest(root: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(root.join(MANIFEST)).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(root.join(MANIFEST)).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("manifest: {other:?}")),
    }
}

/// Writes every case under `<root>/<site>/<case_id>/` plus the manifest.
pub fn write_dataset(root: &Path, cases: &[Case]) -> Result<()> {
    for c in cases {
        let dir = Case::dir(root, &c.site, &c.id);
        fs::create_dir_all(&dir)?;
        c.volume.save(dir.join("volume.pfda"))?;
        c.mask.save(dir.join("mask.pfda"))?;
    }
    write_manifest(root, &cases.iter().map(Case::row).collect::<Vec<_>>())
}

/// Loads every manifest case, standardized to an `side³` cube.
pub fn load_dataset(root: &Path, side: usize) -> Result<Vec<Case>> {
    read_manifest(root)?
        .into_iter()
        .map(|row| {
            let dir = Case::dir(root, &row.site, &row.case_id);
            let volume = Volume::load(dir.join("volume.pfda"))?.standardize_cube(side)?;
            let mask = MaskVolume::load(dir.join("mask.pfda"))?.standardize_cube(side)?;
            if volume.shape() != mask.shape() {
                return Err(Error::Shape(format!("case {}: volume and mask differ", row.case_id)));
            }
            Ok(Case {
                id: row.case_id,
                site: row.site,
                split: row.split,
                volume,
                mask,
            })
        })
        .collect()
}

/// Recipe for a two-site phantom dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub train_per_site: usize,
    pub val_per_site: usize,
    pub side: usize,
    pub seed: u64,
    pub source_site: SiteParams,
    pub target_site: SiteParams,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            train_per_site: 40,
            val_per_site: 20,
            side: 48,
            seed: 0,
            source_site: SiteParams::identity(),
            target_site: SiteParams::shifted(),
        }
    }
}

pub const SOURCE_SITE: &str = "site_a";
pub const TARGET_SITE: &str = "site_b";

/// Generates both sites. Every case gets its own geometry seed drawn from
/// `spec.seed`.
pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cases = Vec::new();
    for (site, params, tag) in [
        (SOURCE_SITE, &spec.source_site, "a"),
        (TARGET_SITE, &spec.target_site, "b"),
    ] {
        for (split, n) in [(Split::Train, spec.train_per_site), (Split::Val, spec.val_per_site)] {
            for k in 0..n {
                let case_seed: u64 = rng.gen();
                let (volume, mask) = synth_phantom(case_seed, params, spec.side)?;
                cases.push(Case {
                    id: format!("{tag}_{split}_{k:03}"),
                    site: site.to_string(),
                    split,
                    volume,
                    mask,
                });
            }
        }
    }
    Ok(cases)
}

/// Case indices of one training batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Deterministic batch schedule: every epoch visits each source case once
/// in a fresh order; target cases are drawn from an endless sequence of
/// shuffled passes.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    n_source: usize,
    n_target: usize,
    per_domain: usize,
    seed: u64,
}

impl BatchPlan {
    pub fn new(n_source: usize, n_target: usize, per_domain: usize, seed: u64) -> Result<Self> {
        if n_source == 0 || n_target == 0 {
            return Err(Error::Config(format!(
                "both sites need training cases (source {n_source}, target {n_target})"
            )));
        }
        if per_domain == 0 {
            return Err(Error::Config("batch size per domain must be >= 1".into()));
        }
        Ok(Self {
            n_source,
            n_target,
            per_domain,
            seed,
        })
    }

    /// Batches per epoch; a trailing single source case joins the previous batch.
    pub fn batches_per_epoch(&self) -> usize {
        let full = self.n_source / self.per_domain;
        let rest = self.n_source % self.per_domain;
        if full == 0 || rest >= 2 {
            full + 1
        } else {
            full
        }
    }

    fn permutation(&self, n: usize, stream: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    pub fn epoch(&self, epoch: usize) -> Vec<BatchIndices> {
        let order = self.permutation(self.n_source, 2 * epoch as u64);
        let nb = self.batches_per_epoch();
        let mut batches: Vec<Vec<usize>> = order.chunks(self.per_domain).map(|c| c.to_vec()).collect();
        if batches.len() > nb {
            let last = batches.pop().expect("non-empty");
            batches.last_mut().expect("previous batch").extend(last);
        }
        let mut cursor = (epoch * nb * self.per_domain) as u64;
        batches
            .into_iter()
            .map(|source| {
                let target = (0..self.per_domain)
                    .map(|_| {
                        let pass = cursor / self.n_target as u64;
                        let pos = (cursor % self.n_target as u64) as usize;
                        cursor += 1;
                        self.permutation(self.n_target, 2 * pass + 1)[pos]
                    })
                    .collect();
                BatchIndices { source, target }
            })
            .collect()
    }
}
