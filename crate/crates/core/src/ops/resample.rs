use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{axpy, Tensor};

/// Linear-interpolation taps for ×2 upsampling of an axis of length `n`
/// with half-pixel centers (`align_corners = false`).
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let t = src - lo as f64;
            (lo, hi, 1.0 - t, t)
        })
        .collect()
}

fn upsample_axis(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = 2 * n;
    let mut out = Tensor::zeros(&out_shape);
    let taps = upsample_taps(n);
    let (xd, od) = (x.data(), out.data_mut());
    for o in 0..outer {
        let ib = o * n * inner;
        let ob = o * 2 * n * inner;
        for (j, &(lo, hi, wl, wh)) in taps.iter().enumerate() {
            let dst = &mut od[ob + j * inner..ob + (j + 1) * inner];
            axpy(wl, &xd[ib + lo * inner..ib + (lo + 1) * inner], dst);
            axpy(wh, &xd[ib + hi * inner..ib + (hi + 1) * inner], dst);
        }
    }
    out
}

/// Adjoint of [`upsample_axis`]; `n` is the pre-upsampling length.
fn upsample_axis_adjoint(g: &Tensor, axis: usize) -> Tensor {
    let shape = g.shape();
    let n = shape[axis] / 2;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut in_shape = shape.to_vec();
    in_shape[axis] = n;
    let mut dx = Tensor::zeros(&in_shape);
    let taps = upsample_taps(n);
    let (gd, dd) = (g.data(), dx.data_mut());
    for o in 0..outer {
        let ib = o * n * inner;
        let ob = o * 2 * n * inner;
        for (j, &(lo, hi, wl, wh)) in taps.iter().enumerate() {
            let src = &gd[ob + j * inner..ob + (j + 1) * inner];
            axpy(wl, src, &mut dd[ib + lo * inner..ib + (lo + 1) * inner]);
            axpy(wh, src, &mut dd[ib + hi * inner..ib + (hi + 1) * inner]);
        }
    }
    dx
}

impl Graph {
    /// Trilinear ×2 upsampling of the three spatial axes of a 5-D tensor.
    pub fn upsample_trilinear2(&mut self, x: Var) -> Result<Var> {
        self.value(x).dims5()?;
        let out = upsample_axis(&upsample_axis(&upsample_axis(self.value(x), 4), 3), 2);
        Ok(self.push(
            out,
            &[x],
            Box::new(|_, _, g| {
                let dx = upsample_axis_adjoint(&upsample_axis_adjoint(&upsample_axis_adjoint(g, 2), 3), 4);
                vec![Some(dx)]
            }),
        ))
    }

    /// `(B, C, g, g, g) -> (B, g³, C)`; token `k` is the grid cell with
    /// z-major linear index `k`.
    pub fn channels_to_tokens(&mut self, x: Var) -> Result<Var> {
        let [b, c, d, h, w] = self.value(x).dims5()?;
        let n = d * h * w;
        let mut out = Tensor::zeros(&[b, n, c]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for bi in 0..b {
                for ch in 0..c {
                    for k in 0..n {
                        od[(bi * n + k) * c + ch] = xd[(bi * c + ch) * n + k];
                    }
                }
            }
        }
        Ok(self.push(
            out,
            &[x],
            Box::new(move |_, _, g| {
                let mut dx = Tensor::zeros(&[b, c, d, h, w]);
                let (gd, dd) = (g.data(), dx.data_mut());
                for bi in 0..b {
                    for ch in 0..c {
                        for k in 0..n {
                            dd[(bi * c + ch) * n + k] = gd[(bi * n + k) * c + ch];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `(B, N, C) -> (B, C, g·p, g·p, g·p)` with `N = g³`: each token's vector
    /// is broadcast over the `p³` footprint of its grid cell.
    pub fn tokens_to_volume(&mut self, t: Var, patch: usize) -> Result<Var> {
        let (b, n, c) = match self.shape(t)[..] {
            [b, n, c] => (b, n, c),
            _ => return Err(Error::Shape(format!("tokens_to_volume: {:?}", self.shape(t)))),
        };
        let g = cube_root(n).ok_or_else(|| Error::Shape(format!("token count {n} is not a perfect cube")))?;
        let side = g * patch;
        let sp = side * side * side;
        // voxel -> token index, shared by forward and backward
        let owner: Vec<usize> = (0..sp)
            .map(|v| {
                let (z, y, x) = (v / (side * side), (v / side) % side, v % side);
                ((z / patch) * g + y / patch) * g + x / patch
            })
            .collect();
        let mut out = Tensor::zeros(&[b, c, side, side, side]);
        {
            let td = self.value(t).data();
            let od = out.data_mut();
            for bi in 0..b {
                for ch in 0..c {
                    let plane = &mut od[(bi * c + ch) * sp..(bi * c + ch + 1) * sp];
                    for (v, o) in plane.iter_mut().enumerate() {
                        *o = td[(bi * n + owner[v]) * c + ch];
                    }
                }
            }
        }
        Ok(self.push(
            out,
            &[t],
            Box::new(move |_, _, gr| {
                let mut dt = Tensor::zeros(&[b, n, c]);
                let (gd, dd) = (gr.data(), dt.data_mut());
                for bi in 0..b {
                    for ch in 0..c {
                        let plane = &gd[(bi * c + ch) * sp..(bi * c + ch + 1) * sp];
                        for (v, &gv) in plane.iter().enumerate() {
                            dd[(bi * n + owner[v]) * c + ch] += gv;
                        }
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }
}

pub(crate) fn cube_root(n: usize) -> Option<usize> {
    let g = (n as f64).cbrt().round() as usize;
    (g * g * g == n).then_some(g)
}
