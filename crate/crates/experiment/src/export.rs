//! Surface-distance point clouds for external rendering.

use std::path::Path;

use pfda_core::metrics::surface_map;
use pfda_core::volume::MaskVolume;

use crate::error::{Error, Result};

pub const SURFACE_MAP: &str = "surface_map.csv";

/// `[x_mm, y_mm, z_mm, distance_mm]` for every boundary voxel of `pred`,
/// with the distance to the nearest boundary voxel of `gt`.
pub fn surface_points(pred: &MaskVolume, gt: &MaskVolume) -> Result<Vec<[f64; 4]>> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Config(format!(
            "surface map needs two non-empty masks (pred {} voxels, gt {} voxels)",
            pred.count(),
            gt.count()
        )));
    }
    let sp = pred.spacing();
    Ok(surface_map(pred, gt)?
        .into_iter()
        .map(|([z, y, x], d)| [x as f64 * sp[2], y as f64 * sp[1], z as f64 * sp[0], d])
        .collect())
}

pub fn write_surface_map(path: &Path, points: &[[f64; 4]]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x_mm", "y_mm", "z_mm", "distance_mm"])?;
    for p in points {
        w.write_record(p.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask(on: &[[usize; 3]], sp: [f64; 3]) -> MaskVolume {
        let mut a = Array3::zeros((6, 6, 6));
        for &p in on {
            a[p] = 1;
        }
        MaskVolume::new(a, sp).unwrap()
    }

    fn block() -> Vec<[usize; 3]> {
        let mut v = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    v.push([z, y, x]);
                }
            }
        }
        v
    }

    #[test]
    fn identical_masks_give_zero_distances() {
        let m = mask(&block(), [1.0; 3]);
        let pts = surface_points(&m, &m).unwrap();
        // every voxel but the centre is on the boundary
        assert_eq!(pts.len(), 26);
        assert!(pts.iter().all(|p| p[3] == 0.0));
    }

    #[test]
    fn single_voxel_offset() {
        let pts = surface_points(&mask(&[[1, 1, 4]], [1.0; 3]), &mask(&[[1, 1, 1]], [1.0; 3])).unwrap();
        assert_eq!(pts, vec![[4.0, 1.0, 1.0, 3.0]]);
    }

    #[test]
    fn coordinates_use_spacing() {
        let pts = surface_points(&mask(&[[1, 2, 3]], [2.0, 0.5, 0.25]), &mask(&[[1, 2, 3]], [2.0, 0.5, 0.25])).unwrap();
        assert_eq!(pts, vec![[0.75, 1.0, 2.0, 0.0]]);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let e = surface_points(&mask(&[], [1.0; 3]), &mask(&block(), [1.0; 3]));
        assert!(e.is_err());
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(SURFACE_MAP);
        write_surface_map(&p, &[[1.0, 2.0, 3.0, 0.5]]).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "x_mm,y_mm,z_mm,distance_mm\n1,2,3,0.5\n");
    }
}
