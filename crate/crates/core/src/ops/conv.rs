//! Direct 3-D convolution (cross-correlation) with cubic kernels.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{axpy, dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub const SAME3: ConvSpec = ConvSpec { stride: 1, pad: 1 };
    pub const POINTWISE: ConvSpec = ConvSpec { stride: 1, pad: 0 };

    pub fn patch(p: usize) -> ConvSpec {
        ConvSpec { stride: p, pad: 0 }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    b: usize,
    ci: usize,
    co: usize,
    k: usize,
    s: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    /// Output indices `o` along one axis whose input `o*s + t - pad` is in range.
    fn valid(&self, axis: usize, t: usize) -> std::ops::Range<usize> {
        let (n_in, n_out, s, pad) = (self.inp[axis], self.out[axis], self.s, self.pad);
        // o*s + t >= pad  and  o*s + t - pad < n_in
        let lo = if t >= pad { 0 } else { (pad - t).div_ceil(s) };
        let hi_excl = if n_in + pad > t {
            ((n_in + pad - t - 1) / s + 1).min(n_out)
        } else {
            0
        };
        lo..hi_excl.max(lo)
    }
}

fn geometry(x: &[usize], w: &[usize], spec: ConvSpec) -> Result<Geom> {
    let (b, ci, d, h, wd) = match x[..] {
        [b, c, d, h, w] => (b, c, d, h, w),
        _ => return Err(Error::Shape(format!("conv3d input {x:?}"))),
    };
    let (co, wci, k) = match w[..] {
        [o, i, k0, k1, k2] if k0 == k1 && k1 == k2 => (o, i, k0),
        _ => return Err(Error::Shape(format!("conv3d weight {w:?}"))),
    };
    if wci != ci {
        return Err(Error::Shape(format!(
            "conv3d: input has {ci} channels, weight expects {wci}"
        )));
    }
    if spec.stride == 0 {
        return Err(Error::Config("conv3d stride 0".into()));
    }
    let out_len = |n: usize| -> Result<usize> {
        let padded = n + 2 * spec.pad;
        if padded < k {
            return Err(Error::Shape(format!("conv3d: extent {n} smaller than kernel {k}")));
        }
        Ok((padded - k) / spec.stride + 1)
    };
    Ok(Geom {
        b,
        ci,
        co,
        k,
        s: spec.stride,
        pad: spec.pad,
        inp: [d, h, wd],
        out: [out_len(d)?, out_len(h)?, out_len(wd)?],
    })
}

/// Visits every (output row, input row, output x-range, input x-start) of one
/// kernel tap. `f(out_row_offset, in_row_offset, ox_range, ix_start)`.
#[inline]
fn for_tap_rows(
    g: &Geom,
    (kz, ky, kx): (usize, usize, usize),
    mut f: impl FnMut(usize, usize, std::ops::Range<usize>, usize),
) {
    let [_, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let xr = g.valid(2, kx);
    if xr.is_empty() {
        return;
    }
    let ix0 = xr.start * g.s + kx - g.pad;
    for oz in g.valid(0, kz) {
        let iz = oz * g.s + kz - g.pad;
        for oy in g.valid(1, ky) {
            let iy = oy * g.s + ky - g.pad;
            f((oz * oh + oy) * ow, (iz * ih + iy) * iw, xr.clone(), ix0);
        }
    }
}

/// `o[x] += w0·i[x-1] + w1·i[x] + w2·i[x+1]` with zero padding: the three
/// x-taps of a stride-1, pad-1, 3-wide kernel applied to one row.
#[inline]
fn row3(o: &mut [f64], i: &[f64], w: [f64; 3]) {
    let n = o.len();
    if n == 1 {
        o[0] += w[1] * i[0];
        return;
    }
    o[0] += w[1] * i[0] + w[2] * i[1];
    for (ov, t) in o[1..n - 1].iter_mut().zip(i.windows(3)) {
        *ov += w[0] * t[0] + w[1] * t[1] + w[2] * t[2];
    }
    o[n - 1] += w[0] * i[n - 2] + w[1] * i[n - 1];
}

/// Backward of [`row3`] for one row pair: accumulates the three weight
/// gradients into `acc` and the input gradient into `dx`.
#[inline]
fn row3_backward(dx: &mut [f64], g: &[f64], i: &[f64], w: [f64; 3], acc: &mut [f64; 3]) {
    let n = g.len();
    let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
    for x in 0..n {
        let gv = g[x];
        a1 += gv * i[x];
        if x > 0 {
            a0 += gv * i[x - 1];
            dx[x - 1] += w[0] * gv;
        }
        if x + 1 < n {
            a2 += gv * i[x + 1];
            dx[x + 1] += w[2] * gv;
        }
        dx[x] += w[1] * gv;
    }
    acc[0] += a0;
    acc[1] += a1;
    acc[2] += a2;
}

impl Geom {
    fn is_same3(&self) -> bool {
        self.k == 3 && self.s == 1 && self.pad == 1
    }
}

pub(crate) fn conv3d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let g = geometry(x.shape(), w.shape(), spec)?;
    let in_sp = g.inp.iter().product::<usize>();
    let out_sp = g.out.iter().product::<usize>();
    let k3 = g.k * g.k * g.k;
    let mut out = Tensor::zeros(&[g.b, g.co, g.out[0], g.out[1], g.out[2]]);
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for n in 0..g.b {
        for co in 0..g.co {
            let oplane = &mut od[(n * g.co + co) * out_sp..(n * g.co + co + 1) * out_sp];
            if let Some(b) = bias {
                oplane.fill(b.data()[co]);
            }
            for ci in 0..g.ci {
                let iplane = &xd[(n * g.ci + ci) * in_sp..(n * g.ci + ci + 1) * in_sp];
                let wbase = (co * g.ci + ci) * k3;
                if g.is_same3() {
                    for kz in 0..3 {
                        for ky in 0..3 {
                            let t = wbase + (kz * 3 + ky) * 3;
                            let w3 = [wd[t], wd[t + 1], wd[t + 2]];
                            if w3 == [0.0; 3] {
                                continue;
                            }
                            for_tap_rows(&g, (kz, ky, 1), |orow, irow, xr, _| {
                                let n = xr.len();
                                row3(&mut oplane[orow..orow + n], &iplane[irow..irow + n], w3);
                            });
                        }
                    }
                    continue;
                }
                for kz in 0..g.k {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let wv = wd[wbase + (kz * g.k + ky) * g.k + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for_tap_rows(&g, (kz, ky, kx), |orow, irow, xr, ix0| {
                                let len = xr.len();
                                let o = &mut oplane[orow + xr.start..orow + xr.end];
                                if g.s == 1 {
                                    axpy(wv, &iplane[irow + ix0..irow + ix0 + len], o);
                                } else {
                                    for (j, ov) in o.iter_mut().enumerate() {
                                        *ov += wv * iplane[irow + ix0 + j * g.s];
                                    }
                                }
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    spec: ConvSpec,
) -> (Tensor, Tensor, Tensor) {
    let g = geometry(x.shape(), w.shape(), spec).expect("validated in forward");
    let in_sp = g.inp.iter().product::<usize>();
    let out_sp = g.out.iter().product::<usize>();
    let k3 = g.k * g.k * g.k;
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[g.co]);
    for n in 0..g.b {
        for co in 0..g.co {
            let gplane = &gd[(n * g.co + co) * out_sp..(n * g.co + co + 1) * out_sp];
            db.data_mut()[co] += gplane.iter().sum::<f64>();
            for ci in 0..g.ci {
                let ioff = (n * g.ci + ci) * in_sp;
                let iplane = &xd[ioff..ioff + in_sp];
                let wbase = (co * g.ci + ci) * k3;
                if g.is_same3() {
                    let dxp = &mut dx.data_mut()[ioff..ioff + in_sp];
                    for kz in 0..3 {
                        for ky in 0..3 {
                            let t = wbase + (kz * 3 + ky) * 3;
                            let w3 = [wd[t], wd[t + 1], wd[t + 2]];
                            let mut acc = [0.0; 3];
                            for_tap_rows(&g, (kz, ky, 1), |orow, irow, xr, _| {
                                let n = xr.len();
                                row3_backward(
                                    &mut dxp[irow..irow + n],
                                    &gplane[orow..orow + n],
                                    &iplane[irow..irow + n],
                                    w3,
                                    &mut acc,
                                );
                            });
                            let dwd = dw.data_mut();
                            for kx in 0..3 {
                                dwd[t + kx] += acc[kx];
                            }
                        }
                    }
                    continue;
                }
                for kz in 0..g.k {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let widx = wbase + (kz * g.k + ky) * g.k + kx;
                            let wv = wd[widx];
                            let mut acc = 0.0;
                            let dxp = &mut dx.data_mut()[ioff..ioff + in_sp];
                            for_tap_rows(&g, (kz, ky, kx), |orow, irow, xr, ix0| {
                                let len = xr.len();
                                let gr = &gplane[orow + xr.start..orow + xr.end];
                                if g.s == 1 {
                                    acc += dot(gr, &iplane[irow + ix0..irow + ix0 + len]);
                                    if wv != 0.0 {
                                        axpy(wv, gr, &mut dxp[irow + ix0..irow + ix0 + len]);
                                    }
                                } else {
                                    for (j, &gv) in gr.iter().enumerate() {
                                        let ii = irow + ix0 + j * g.s;
                                        acc += gv * iplane[ii];
                                        dxp[ii] += wv * gv;
                                    }
                                }
                            });
                            dw.data_mut()[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

impl Graph {
    /// 3-D convolution `x (B,Ci,D,H,W) * w (Co,Ci,k,k,k) + bias (Co)`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        if let Some(b) = bias {
            let co = self.shape(w)[0];
            if self.shape(b) != [co] {
                return Err(Error::Shape(format!("conv3d bias {:?}", self.shape(b))));
            }
        }
        let out = conv3d_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), spec)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |p, _, g| {
                let (dx, dw, db) = conv3d_backward(p[0], p[1], g, spec);
                let mut grads = vec![Some(dx), Some(dw)];
                if p.len() == 3 {
                    grads.push(Some(db));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-fold loop used as a reference.
    fn naive(x: &Tensor, w: &Tensor, spec: ConvSpec) -> Tensor {
        let g = geometry(x.shape(), w.shape(), spec).unwrap();
        let mut out = Tensor::zeros(&[g.b, g.co, g.out[0], g.out[1], g.out[2]]);
        let [d, h, wi] = g.inp;
        let [od, oh, ow] = g.out;
        for n in 0..g.b {
            for co in 0..g.co {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = 0.0;
                            for ci in 0..g.ci {
                                for kz in 0..g.k {
                                    for ky in 0..g.k {
                                        for kx in 0..g.k {
                                            let iz = (oz * g.s + kz) as isize - g.pad as isize;
                                            let iy = (oy * g.s + ky) as isize - g.pad as isize;
                                            let ix = (ox * g.s + kx) as isize - g.pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= wi {
                                                continue;
                                            }
                                            s += x.data()[(((n * g.ci + ci) * d + iz) * h + iy) * wi + ix]
                                                * w.data()[(((co * g.ci + ci) * g.k + kz) * g.k + ky) * g.k + kx];
                                        }
                                    }
                                }
                            }
                            out.data_mut()[(((n * g.co + co) * od + oz) * oh + oy) * ow + ox] = s;
                        }
                    }
                }
            }
        }
        out
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matches_naive_loops() {
        for (spec, k, side) in [
            (ConvSpec::SAME3, 3, 5),
            (ConvSpec::SAME3, 3, 1),
            (ConvSpec::SAME3, 3, 2),
            (ConvSpec::POINTWISE, 1, 4),
            (ConvSpec::patch(2), 2, 6),
            (ConvSpec { stride: 2, pad: 1 }, 3, 5),
        ] {
            let x = seq(&[2, 3, side, side + 1, side], 0.1);
            let w = seq(&[2, 3, k, k, k], 0.07);
            let fast = conv3d_forward(&x, &w, None, spec).unwrap();
            let slow = naive(&x, &w, spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{spec:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, dx(g)> and = <w, dw(g)> since conv is bilinear.
        for (spec, side) in [(ConvSpec::SAME3, 4), (ConvSpec::SAME3, 1), (ConvSpec::SAME3, 2), (ConvSpec::patch(2), 4)] {
            let k = if spec.stride == 1 { 3 } else { 2 };
            let x = seq(&[1, 2, side, 3, side], 0.3);
            let w = seq(&[3, 2, k, k, k], 0.2);
            let y = conv3d_forward(&x, &w, None, spec).unwrap();
            let g = seq(y.shape(), 0.5);
            let (dx, dw, _) = conv3d_backward(&x, &w, &g, spec);
            let lhs = dot(y.data(), g.data());
            assert!((lhs - dot(x.data(), dx.data())).abs() < 1e-9);
            assert!((lhs - dot(w.data(), dw.data())).abs() < 1e-9);
        }
    }
}
