//! Overlap and surface-distance metrics, and mask shape/intensity features.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    /// NaN when the prediction is empty.
    pub precision: f64,
    /// NaN when the ground truth is empty.
    pub recall: f64,
}

impl Overlap {
    pub fn precision_defined(&self) -> bool {
        !self.precision.is_nan()
    }

    pub fn recall_defined(&self) -> bool {
        !self.recall.is_nan()
    }
}

fn check_aligned(a: &MaskVolume, b: &MaskVolume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("masks {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.spacing() != b.spacing() {
        return Err(Error::Shape(format!(
            "spacings {:?} vs {:?}",
            a.spacing(),
            b.spacing()
        )));
    }
    Ok(())
}

/// Dice, precision and recall from voxel confusion counts.
pub fn overlap_metrics(pred: &MaskVolume, gt: &MaskVolume) -> Result<Overlap> {
    check_aligned(pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { f64::NAN } else { num as f64 / den as f64 };
    let dice = if tp + fp + fn_ == 0 {
        1.0
    } else {
        ratio(2 * tp, 2 * tp + fp + fn_)
    };
    Ok(Overlap {
        dice,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    })
}

/// Foreground voxels with at least one background 6-neighbour; voxels
/// outside the grid count as background.
pub fn boundary(m: &MaskVolume) -> Vec<[usize; 3]> {
    let d = m.data();
    let [nz, ny, nx] = m.shape();
    let mut out = Vec::new();
    for ((z, y, x), &v) in d.indexed_iter() {
        if v == 0 {
            continue;
        }
        let edge = z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx;
        if edge
            || d[[z - 1, y, x]] == 0
            || d[[z + 1, y, x]] == 0
            || d[[z, y - 1, x]] == 0
            || d[[z, y + 1, x]] == 0
            || d[[z, y, x - 1]] == 0
            || d[[z, y, x + 1]] == 0
        {
            out.push([z, y, x]);
        }
    }
    out
}

/// Physical distance between two voxel centers. Every distance in this
/// module goes through this one expression.
#[inline]
pub fn voxel_distance(p: [usize; 3], q: [usize; 3], sp: Spacing) -> f64 {
    let dz = (p[0] as f64 - q[0] as f64) * sp[0];
    let dy = (p[1] as f64 - q[1] as f64) * sp[1];
    let dx = (p[2] as f64 - q[2] as f64) * sp[2];
    (dz * dz + dy * dy + dx * dx).sqrt()
}

/// Uniform grid of buckets over a point set for nearest-neighbour queries.
struct BucketGrid {
    cell: usize,
    dims: [usize; 3],
    buckets: Vec<Vec<[usize; 3]>>,
    spacing: Spacing,
}

impl BucketGrid {
    fn new(points: &[[usize; 3]], shape: [usize; 3], spacing: Spacing) -> Self {
        let cell = 4;
        let dims = shape.map(|n| n.div_ceil(cell).max(1));
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        for &p in points {
            let c = [p[0] / cell, p[1] / cell, p[2] / cell];
            buckets[(c[0] * dims[1] + c[1]) * dims[2] + c[2]].push(p);
        }
        Self {
            cell,
            dims,
            buckets,
            spacing,
        }
    }

    fn nearest(&self, p: [usize; 3]) -> f64 {
        let c = [p[0] / self.cell, p[1] / self.cell, p[2] / self.cell];
        let min_sp = self.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_ring = *self.dims.iter().max().expect("3 axes");
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            // Every point in ring `ring` is at least (ring - 1) whole cells away.
            if ring >= 1 {
                let bound = ((ring - 1) * self.cell) as f64 * min_sp * (1.0 - 1e-12);
                if bound > best {
                    break;
                }
            }
            let lo = c.map(|v| v.saturating_sub(ring));
            let hi = [0, 1, 2].map(|i| (c[i] + ring).min(self.dims[i] - 1));
            for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        let cheb = z.abs_diff(c[0]).max(y.abs_diff(c[1])).max(x.abs_diff(c[2]));
                        if cheb != ring {
                            continue;
                        }
                        for &q in &self.buckets[(z * self.dims[1] + y) * self.dims[2] + x] {
                            let d = voxel_distance(p, q, self.spacing);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Directed boundary-to-boundary distances `a → b` and `b → a` in mm.
pub fn surface_distances(a: &MaskVolume, b: &MaskVolume) -> Result<(Vec<f64>, Vec<f64>)> {
    check_aligned(a, b)?;
    let ba = boundary(a);
    let bb = boundary(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::SurfaceUndefined("empty mask".into()));
    }
    Ok((directed(&ba, &bb, a.shape(), a.spacing()), directed(&bb, &ba, a.shape(), a.spacing())))
}

fn directed(from: &[[usize; 3]], to: &[[usize; 3]], shape: [usize; 3], sp: Spacing) -> Vec<f64> {
    let grid = BucketGrid::new(to, shape, sp);
    from.iter().map(|&p| grid.nearest(p)).collect()
}

/// Distances from every boundary voxel of `pred` to the nearest boundary
/// voxel of `gt`, with the voxel coordinates.
pub fn surface_map(pred: &MaskVolume, gt: &MaskVolume) -> Result<Vec<([usize; 3], f64)>> {
    check_aligned(pred, gt)?;
    let bp = boundary(pred);
    let bg = boundary(gt);
    if bp.is_empty() || bg.is_empty() {
        return Err(Error::SurfaceUndefined("empty mask".into()));
    }
    let grid = BucketGrid::new(&bg, gt.shape(), gt.spacing());
    Ok(bp.into_iter().map(|p| (p, grid.nearest(p))).collect())
}

/// Percentile with linear interpolation between order statistics
/// (`q` in `[0, 100]`, input sorted ascending).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceMetrics {
    pub hd: f64,
    pub hd95: f64,
    pub asd: f64,
}

/// HD, HD95 and ASD over the pooled directed distance multisets.
pub fn surface_metrics(a: &MaskVolume, b: &MaskVolume) -> Result<SurfaceMetrics> {
    let (ab, ba) = surface_distances(a, b)?;
    Ok(pooled_summary(ab.into_iter().chain(ba).collect()))
}

pub(crate) fn pooled_summary(mut pooled: Vec<f64>) -> SurfaceMetrics {
    pooled.sort_by(f64::total_cmp);
    SurfaceMetrics {
        hd: *pooled.last().expect("non-empty"),
        hd95: percentile_sorted(&pooled, 95.0),
        asd: pooled.iter().sum::<f64>() / pooled.len() as f64,
    }
}

pub fn hd(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    surface_metrics(a, b).map(|s| s.hd)
}

pub fn hd95(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    surface_metrics(a, b).map(|s| s.hd95)
}

pub fn asd(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    surface_metrics(a, b).map(|s| s.asd)
}

/// The six reported metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Dice,
    Precision,
    Recall,
    Hd,
    Hd95,
    Asd,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Dice,
        Metric::Precision,
        Metric::Recall,
        Metric::Hd,
        Metric::Hd95,
        Metric::Asd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Precision => "Precision",
            Metric::Recall => "Recall",
            Metric::Hd => "HD",
            Metric::Hd95 => "HD95",
            Metric::Asd => "ASD",
        }
    }

    /// Overlap metrics are fractions (higher is better); distances are mm.
    pub fn is_overlap(self) -> bool {
        matches!(self, Metric::Dice | Metric::Precision | Metric::Recall)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-case metrics; undefined values are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub hd: f64,
    pub hd95: f64,
    pub asd: f64,
}

impl CaseMetrics {
    pub fn evaluate(case_id: &str, pred: &MaskVolume, gt: &MaskVolume) -> Result<Self> {
        let o = overlap_metrics(pred, gt)?;
        let s = match surface_metrics(pred, gt) {
            Ok(s) => s,
            Err(Error::SurfaceUndefined(_)) => SurfaceMetrics {
                hd: f64::NAN,
                hd95: f64::NAN,
                asd: f64::NAN,
            },
            Err(e) => return Err(e),
        };
        Ok(Self {
            case_id: case_id.to_string(),
            dice: o.dice,
            precision: o.precision,
            recall: o.recall,
            hd: s.hd,
            hd95: s.hd95,
            asd: s.asd,
        })
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Dice => self.dice,
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::Hd => self.hd,
            Metric::Hd95 => self.hd95,
            Metric::Asd => self.asd,
        }
    }

    /// Names of metrics that are undefined for this case.
    pub fn undefined(&self) -> Vec<Metric> {
        Metric::ALL.into_iter().filter(|&m| self.get(m).is_nan()).collect()
    }
}

/// Per-case metrics for a case set plus cohort means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
}

impl MetricsReport {
    /// Mean over cases where the metric is defined (NaN if none).
    pub fn mean(&self, m: Metric) -> f64 {
        let vals: Vec<f64> = self.cases.iter().map(|c| c.get(m)).filter(|v| !v.is_nan()).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Number of cases where the metric is undefined.
    pub fn undefined_count(&self, m: Metric) -> usize {
        self.cases.iter().filter(|c| c.get(m).is_nan()).count()
    }
}

/// Shape and intensity features of a masked region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskFeatures {
    pub voxel_volume: f64,
    pub surface_area: f64,
    pub sphericity: f64,
    pub energy: f64,
}

impl MaskFeatures {
    pub const NAMES: [&'static str; 4] = ["voxel_volume", "surface_area", "sphericity", "energy"];

    pub fn as_array(&self) -> [f64; 4] {
        [self.voxel_volume, self.surface_area, self.sphericity, self.energy]
    }
}

/// Voxel volume, exposed-face surface area, sphericity and energy.
pub fn mask_features(v: &Volume, m: &MaskVolume) -> Result<MaskFeatures> {
    if v.shape() != m.shape() {
        return Err(Error::Shape(format!("volume {:?} vs mask {:?}", v.shape(), m.shape())));
    }
    let sp = m.spacing();
    let face = [sp[1] * sp[2], sp[0] * sp[2], sp[0] * sp[1]];
    let d = m.data();
    let shape = m.shape();
    let (mut count, mut faces, mut energy) = (0usize, [0usize; 3], 0.0);
    for ((z, y, x), &val) in d.indexed_iter() {
        if val == 0 {
            continue;
        }
        count += 1;
        let e = f64::from(v.data()[[z, y, x]]);
        energy += e * e;
        let p = [z, y, x];
        for axis in 0..3 {
            for dir in [-1isize, 1] {
                let c = p[axis] as isize + dir;
                let exposed = if c < 0 || c >= shape[axis] as isize {
                    true
                } else {
                    let mut q = p;
                    q[axis] = c as usize;
                    d[q] == 0
                };
                if exposed {
                    faces[axis] += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::SurfaceUndefined("mask features of an empty mask".into()));
    }
    let volume = count as f64 * sp[0] * sp[1] * sp[2];
    let area: f64 = (0..3).map(|i| faces[i] as f64 * face[i]).sum();
    let sphericity = std::f64::consts::PI.cbrt() * (6.0 * volume).powf(2.0 / 3.0) / area;
    Ok(MaskFeatures {
        voxel_volume: volume,
        surface_area: area,
        sphericity,
        energy,
    })
}
