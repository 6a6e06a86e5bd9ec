//! Synthetic two-site phantoms: a posed "head + shaft" bone shape with a
//! bright shell and textured interior, followed by a per-site intensity
//! transform (blur, gain, offset, noise).

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, Volume};

pub const TISSUE_LEVEL: f64 = 40.0;
pub const CORTICAL_LEVEL: f64 = 700.0;
pub const TRABECULAR_LEVEL: f64 = 250.0;
pub const MIN_SIDE: usize = 16;

/// Scanner/site intensity transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteParams {
    pub intensity_gain: f64,
    pub intensity_offset: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

impl SiteParams {
    pub fn identity() -> Self {
        Self {
            intensity_gain: 1.0,
            intensity_offset: 0.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
        }
    }

    /// The default shifted site: brighter, offset, noisier and blurred.
    pub fn shifted() -> Self {
        Self {
            intensity_gain: 1.3,
            intensity_offset: 50.0,
            noise_sigma: 5.0,
            blur_sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_gain > 0.0 && self.intensity_gain.is_finite()) {
            return Err(Error::Config(format!("intensity_gain {} must be > 0", self.intensity_gain)));
        }
        if !self.intensity_offset.is_finite() {
            return Err(Error::Config("intensity_offset must be finite".into()));
        }
        for (name, v) in [("noise_sigma", self.noise_sigma), ("blur_sigma", self.blur_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// 1-D Gaussian blur along `axis` with clamped borders.
fn blur_axis(a: &Array3<f64>, axis: usize, kernel: &[f64]) -> Array3<f64> {
    let r = (kernel.len() / 2) as isize;
    let n = a.shape()[axis] as isize;
    let mut out = Array3::zeros(a.raw_dim());
    for ((z, y, x), o) in out.indexed_iter_mut() {
        let mut idx = [z, y, x];
        let c = idx[axis] as isize;
        let mut s = 0.0;
        for (k, w) in kernel.iter().enumerate() {
            idx[axis] = (c + k as isize - r).clamp(0, n - 1) as usize;
            s += w * a[idx];
        }
        *o = s;
    }
    out
}

pub(crate) fn gaussian_blur(a: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return a.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let mut out = a.clone();
    for axis in 0..3 {
        out = blur_axis(&out, axis, &kernel);
    }
    out
}

/// Rotation matrix from z-y-x Euler angles.
fn rotation(az: f64, ay: f64, ax: f64) -> [[f64; 3]; 3] {
    let (sz, cz) = az.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sx, cx) = ax.sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

struct Shape {
    center: [f64; 3],
    /// world → local rotation (transpose of the pose)
    rot: [[f64; 3]; 3],
    head_center: [f64; 3],
    head_radii: [f64; 3],
    cap: f64,
    shaft: (f64, f64, f64),
}

impl Shape {
    fn sample(rng: &mut ChaCha8Rng, side: usize) -> Self {
        let s = side as f64;
        let big_r = rng.gen_range(0.16..0.22) * s;
        let r = rng.gen_range(0.08..0.11) * s;
        let len = rng.gen_range(0.40..0.55) * s;
        let z0 = -(len + 1.1 * big_r) / 2.0;
        let a = 20f64.to_radians();
        let pose = rotation(rng.gen_range(-a..a), rng.gen_range(-a..a), rng.gen_range(-a..a));
        let mut rot = [[0.0; 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = pose[j][i];
            }
        }
        let jitter = 0.04 * s;
        let center = [0.0; 3].map(|_| s / 2.0 + rng.gen_range(-jitter..jitter));
        let head_radii = [
            big_r * rng.gen_range(0.95..1.1),
            big_r * rng.gen_range(0.85..1.0),
            big_r * rng.gen_range(0.9..1.05),
        ];
        Shape {
            center,
            rot,
            head_center: [z0 + len, 0.45 * big_r, 0.0],
            head_radii,
            cap: z0 + len - 0.6 * big_r,
            shaft: (z0, z0 + len, r),
        }
    }

    /// Local `(z, y, x)` of the voxel center at `(z, y, x)`.
    fn local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.rot[i][0] * d[0] + self.rot[i][1] * d[1] + self.rot[i][2] * d[2];
        }
        out
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.local(p);
        let (z0, z1, r) = self.shaft;
        if q[0] >= z0 && q[0] <= z1 && q[1] * q[1] + q[2] * q[2] <= r * r {
            return true;
        }
        let e: f64 = (0..3)
            .map(|i| ((q[i] - self.head_center[i]) / self.head_radii[i]).powi(2))
            .sum();
        e <= 1.0 && q[0] >= self.cap
    }
}

fn is_boundary(m: &Array3<u8>, z: usize, y: usize, x: usize) -> bool {
    let sh = m.shape();
    let n = [sh[0], sh[1], sh[2]];
    let p = [z, y, x];
    for axis in 0..3 {
        for dir in [-1isize, 1] {
            let c = p[axis] as isize + dir;
            if c < 0 || c >= n[axis] as isize {
                return true;
            }
            let mut q = p;
            q[axis] = c as usize;
            if m[q] == 0 {
                return true;
            }
        }
    }
    false
}

/// Deterministic phantom for `(seed, site, side)`. The mask and the clean
/// intensities depend on `seed` and `side` only; `site` changes intensities.
pub fn synth_phantom(seed: u64, site: &SiteParams, side: usize) -> Result<(Volume, MaskVolume)> {
    if side < MIN_SIDE {
        return Err(Error::Config(format!("phantom side {side} < {MIN_SIDE}")));
    }
    site.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::sample(&mut rng, side);
    let dim = (side, side, side);
    let mask = Array3::from_shape_fn(dim, |(z, y, x)| {
        u8::from(shape.contains([z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5]))
    });

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let white = Array3::from_shape_fn(dim, |_| unit.sample(&mut rng));
    let mut texture = gaussian_blur(&white, side as f64 / 12.0);
    let sd = (texture.iter().map(|v| v * v).sum::<f64>() / texture.len() as f64).sqrt().max(1e-12);
    texture.mapv_inplace(|v| (1.0 + 0.3 * v / sd).max(0.2));

    let clean = Array3::from_shape_fn(dim, |(z, y, x)| {
        if mask[[z, y, x]] == 0 {
            TISSUE_LEVEL * (0.5 + 0.5 * texture[[z, y, x]])
        } else if is_boundary(&mask, z, y, x) {
            CORTICAL_LEVEL
        } else {
            TRABECULAR_LEVEL * texture[[z, y, x]]
        }
    });

    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let blurred = gaussian_blur(&clean, site.blur_sigma);
    let data = blurred.mapv(|v| {
        let n = if site.noise_sigma > 0.0 {
            site.noise_sigma * unit.sample(&mut noise_rng)
        } else {
            0.0
        };
        (site.intensity_gain * v + site.intensity_offset + n) as f32
    });
    let spacing = [1.0; 3];
    Ok((Volume::new(data, spacing)?, MaskVolume::new(mask, spacing)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &Volume) -> f64 {
        v.data().iter().map(|&x| f64::from(x)).sum::<f64>() / v.data().len() as f64
    }

    #[test]
    fn deterministic() {
        let a = synth_phantom(11, &SiteParams::shifted(), 24).unwrap();
        let b = synth_phantom(11, &SiteParams::shifted(), 24).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, synth_phantom(12, &SiteParams::shifted(), 24).unwrap().1);
    }

    #[test]
    fn sites_share_masks_and_differ_in_intensity() {
        for seed in 0..5 {
            let (va, ma) = synth_phantom(seed, &SiteParams::identity(), 32).unwrap();
            let (vb, mb) = synth_phantom(seed, &SiteParams::shifted(), 32).unwrap();
            assert_eq!(ma, mb);
            assert!(mean(&vb) - mean(&va) >= SiteParams::shifted().intensity_offset);
        }
    }

    #[test]
    fn foreground_fraction_in_range() {
        for seed in 0..100 {
            let (_, m) = synth_phantom(seed, &SiteParams::identity(), 32).unwrap();
            let f = m.count() as f64 / 32f64.powi(3);
            assert!((0.02..=0.15).contains(&f), "seed {seed}: fraction {f}");
        }
    }

    #[test]
    fn rejects_small_side_and_bad_site() {
        assert!(matches!(synth_phantom(0, &SiteParams::identity(), 15), Err(Error::Config(_))));
        let bad = SiteParams {
            intensity_gain: 0.0,
            ..SiteParams::identity()
        };
        assert!(synth_phantom(0, &bad, 16).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let a = Array3::from_elem((5, 6, 7), 3.0);
        let b = gaussian_blur(&a, 1.3);
        assert!(b.iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }
}
