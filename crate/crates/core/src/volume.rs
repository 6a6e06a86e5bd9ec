//! Intensity volumes, binary masks, cropping, cube standardization and the
//! on-disk container.

use std::fs;
use std::path::Path;

use ndarray::{s, Array3};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PFDA";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;
const HEADER_LEN: usize = 4 + 4 + 1 + 12 + 24;

/// Voxel spacing `(sz, sy, sx)` in millimeters.
pub type Spacing = [f64; 3];

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Invariant(format!("spacing {spacing:?} must be positive")))
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().all(|&n| n >= 1) {
        Ok(())
    } else {
        Err(Error::Invariant(format!("volume shape {shape:?} has an empty axis")))
    }
}

/// A 3-D intensity grid, z-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: Spacing,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: Spacing) -> Result<Self> {
        check_shape(data.shape())?;
        check_spacing(spacing)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("volume intensities".into()));
        }
        Ok(Self { data, spacing })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn standardize_cube(&self, side: usize) -> Result<Self> {
        Ok(Self {
            data: standardize_cube(&self.data, side)?,
            spacing: self.spacing,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut payload = Vec::with_capacity(self.data.len() * 4);
        for v in self.data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_container(path.as_ref(), DTYPE_F32, self.shape(), self.spacing, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (shape, spacing, payload) = read_container(path.as_ref(), DTYPE_F32, 4)?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let data = Array3::from_shape_vec(shape, values).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(data, spacing)
    }
}

/// A binary 3-D mask, z-major, values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    data: Array3<u8>,
    spacing: Spacing,
}

impl MaskVolume {
    pub fn new(data: Array3<u8>, spacing: Spacing) -> Result<Self> {
        check_shape(data.shape())?;
        check_spacing(spacing)?;
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Invariant("mask values must be 0 or 1".into()));
        }
        Ok(Self { data, spacing })
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn standardize_cube(&self, side: usize) -> Result<Self> {
        Ok(Self {
            data: standardize_cube(&self.data, side)?,
            spacing: self.spacing,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let payload: Vec<u8> = self.data.iter().copied().collect();
        write_container(path.as_ref(), DTYPE_U8, self.shape(), self.spacing, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (shape, spacing, payload) = read_container(path.as_ref(), DTYPE_U8, 1)?;
        let data = Array3::from_shape_vec(shape, payload).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(data, spacing)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

/// Copies the box out of an aligned volume/mask pair.
pub fn crop_roi(v: &Volume, m: &MaskVolume, b: CropBox) -> Result<(Volume, MaskVolume)> {
    if v.shape() != m.shape() || v.spacing != m.spacing {
        return Err(Error::Shape(format!(
            "volume {:?} and mask {:?} are not aligned",
            v.shape(),
            m.shape()
        )));
    }
    let shape = v.shape();
    for (i, axis) in ['z', 'y', 'x'].into_iter().enumerate() {
        if b.size[i] == 0 || b.origin[i] + b.size[i] > shape[i] {
            return Err(Error::Bounds {
                axis,
                origin: b.origin[i],
                size: b.size[i],
                extent: shape[i],
            });
        }
    }
    let [z, y, x] = b.origin;
    let [dz, dy, dx] = b.size;
    let sl = s![z..z + dz, y..y + dy, x..x + dx];
    Ok((
        Volume {
            data: v.data.slice(sl).to_owned(),
            spacing: v.spacing,
        },
        MaskVolume {
            data: m.data.slice(sl).to_owned(),
            spacing: m.spacing,
        },
    ))
}

/// Source/destination ranges along one axis: short axes are zero-padded
/// symmetrically, long axes center-cropped; the odd voxel goes to the
/// trailing side in both cases.
fn axis_plan(n: usize, side: usize) -> (usize, usize, usize) {
    if n <= side {
        // (src start, dst start, len)
        (0, (side - n) / 2, n)
    } else {
        ((n - side) / 2, 0, side)
    }
}

/// Pads or crops each axis to `side`.
pub fn standardize_cube<T: Copy + Default>(a: &Array3<T>, side: usize) -> Result<Array3<T>> {
    if side == 0 {
        return Err(Error::Config("cube side must be >= 1".into()));
    }
    let sh = a.shape();
    let plans = [axis_plan(sh[0], side), axis_plan(sh[1], side), axis_plan(sh[2], side)];
    let mut out = Array3::from_elem((side, side, side), T::default());
    let src = s![
        plans[0].0..plans[0].0 + plans[0].2,
        plans[1].0..plans[1].0 + plans[1].2,
        plans[2].0..plans[2].0 + plans[2].2
    ];
    let dst = s![
        plans[0].1..plans[0].1 + plans[0].2,
        plans[1].1..plans[1].1 + plans[1].2,
        plans[2].1..plans[2].1 + plans[2].2
    ];
    out.slice_mut(dst).assign(&a.slice(src));
    Ok(out)
}

fn write_container(path: &Path, dtype: u8, shape: [usize; 3], spacing: Spacing, payload: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + payload.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(dtype);
    for n in shape {
        let n = u32::try_from(n).map_err(|_| Error::Format(format!("axis length {n} exceeds u32")))?;
        buf.extend_from_slice(&n.to_le_bytes());
    }
    for s in spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.extend_from_slice(payload);
    fs::write(path, buf)?;
    Ok(())
}

fn read_container(path: &Path, dtype: u8, elem: usize) -> Result<((usize, usize, usize), Spacing, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if bytes[8] != dtype {
        return Err(Error::Format(format!("dtype code {} where {dtype} was expected", bytes[8])));
    }
    let shape = (u32_at(9) as usize, u32_at(13) as usize, u32_at(17) as usize);
    let spacing = [f64_at(21), f64_at(29), f64_at(37)];
    check_spacing(spacing)?;
    check_shape(&[shape.0, shape.1, shape.2])?;
    let expected = shape.0 * shape.1 * shape.2 * elem;
    let found = bytes.len() - HEADER_LEN;
    if expected != found {
        return Err(Error::PayloadLength { expected, found });
    }
    Ok((shape, spacing, bytes[HEADER_LEN..].to_vec()))
}
