use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{axpy, dot, Tensor};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(
            out,
            &[a, b],
            Box::new(|_, _, g| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    /// `Σ w_i · x_i` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Shape("weighted_sum of no terms".into()))?;
        let shape = self.shape(first.0).to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, w) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "weighted_sum: {:?} vs {:?}",
                    t.shape(),
                    shape
                )));
            }
            axpy(w, t.data(), out.data_mut());
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            out,
            &vars,
            Box::new(move |_, _, g| weights.iter().map(|&w| Some(g.scale(w))).collect()),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(
            out,
            &[x],
            Box::new(|p, _, g| {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(p[0].data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let u = GELU_K * (v + GELU_C * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.push(
            out,
            &[x],
            Box::new(|p, _, g| {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(p[0].data()) {
                    let u = GELU_K * (v + GELU_C * v * v * v);
                    let t = u.tanh();
                    let du = GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                    *d *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(x).to_vec();
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |_, _, g| vec![Some(g.clone().reshape(&src_shape).expect("same size"))]),
        ))
    }

    /// Concatenates two 5-D tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, d, h, w] = self.value(a).dims5()?;
        let [bb, cb, d2, h2, w2] = self.value(b).dims5()?;
        if ba != bb || (d, h, w) != (d2, h2, w2) {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let sp = d * h * w;
        let mut out = Tensor::zeros(&[ba, ca + cb, d, h, w]);
        {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let o = out.data_mut();
            for n in 0..ba {
                let dst = n * (ca + cb) * sp;
                o[dst..dst + ca * sp].copy_from_slice(&va[n * ca * sp..(n + 1) * ca * sp]);
                o[dst + ca * sp..dst + (ca + cb) * sp]
                    .copy_from_slice(&vb[n * cb * sp..(n + 1) * cb * sp]);
            }
        }
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |_, _, g| {
                let mut ga = Tensor::zeros(&[ba, ca, d, h, w]);
                let mut gb = Tensor::zeros(&[ba, cb, d, h, w]);
                let gd = g.data();
                for n in 0..ba {
                    let src = n * (ca + cb) * sp;
                    ga.data_mut()[n * ca * sp..(n + 1) * ca * sp]
                        .copy_from_slice(&gd[src..src + ca * sp]);
                    gb.data_mut()[n * cb * sp..(n + 1) * cb * sp]
                        .copy_from_slice(&gd[src + ca * sp..src + (ca + cb) * sp]);
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Stacks `a` and `b` along the leading axis.
    pub fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa[1..] != sb[1..] {
            return Err(Error::Shape(format!("concat_batch: {sa:?} vs {sb:?}")));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let split = self.value(a).len();
        let mut data = Vec::with_capacity(split + self.value(b).len());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |_, _, g| {
                let (ga, gb) = g.data().split_at(split);
                vec![
                    Some(Tensor::from_vec(&sa, ga.to_vec()).expect("shape")),
                    Some(Tensor::from_vec(&sb, gb.to_vec()).expect("shape")),
                ]
            }),
        ))
    }

    /// Gathers rows of the leading axis.
    pub fn select_batch(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let b = shape[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= b) {
            return Err(Error::Shape(format!("select_batch: row {bad} of {b}")));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = rows.len();
        let mut out = Tensor::zeros(&out_shape);
        {
            let src = self.value(x).data();
            for (i, &r) in rows.iter().enumerate() {
                out.data_mut()[i * inner..(i + 1) * inner]
                    .copy_from_slice(&src[r * inner..(r + 1) * inner]);
            }
        }
        let rows = rows.to_vec();
        Ok(self.push(
            out,
            &[x],
            Box::new(move |_, _, g| {
                let mut dx = Tensor::zeros(&shape);
                for (i, &r) in rows.iter().enumerate() {
                    axpy(
                        1.0,
                        &g.data()[i * inner..(i + 1) * inner],
                        &mut dx.data_mut()[r * inner..(r + 1) * inner],
                    );
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Global average pooling `(B, C, D, H, W) -> (B, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, d, h, w] = self.value(x).dims5()?;
        let sp = d * h * w;
        let src = self.value(x).data();
        let data: Vec<f64> = (0..b * c)
            .map(|i| src[i * sp..(i + 1) * sp].iter().sum::<f64>() / sp as f64)
            .collect();
        let out = Tensor::from_vec(&[b, c], data)?;
        Ok(self.push(
            out,
            &[x],
            Box::new(move |_, _, g| {
                let mut dx = Tensor::zeros(&[b, c, d, h, w]);
                for (i, &gi) in g.data().iter().enumerate() {
                    dx.data_mut()[i * sp..(i + 1) * sp].fill(gi / sp as f64);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Gradient reversal: identity forward, `-lambda * g` backward.
    pub fn grl(&mut self, x: Var, lambda: f64) -> Var {
        let out = self.value(x).clone();
        self.push(
            out,
            &[x],
            Box::new(move |_, _, g| vec![Some(crate::adaptation::grl_backward(g, lambda))]),
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(
            out,
            &[x],
            Box::new(move |_, _, g| {
                let mut dx = g.clone();
                for (d, m) in dx.data_mut().iter_mut().zip(&mask) {
                    *d *= m;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax over the channel axis of a 5-D tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [b, c, d, h, w] = self.value(x).dims5()?;
        let sp = d * h * w;
        let mut out = self.value(x).clone();
        {
            let o = out.data_mut();
            for n in 0..b {
                let base = n * c * sp;
                for s in 0..sp {
                    let mut m = f64::NEG_INFINITY;
                    for k in 0..c {
                        m = m.max(o[base + k * sp + s]);
                    }
                    let mut z = 0.0;
                    for k in 0..c {
                        let e = (o[base + k * sp + s] - m).exp();
                        o[base + k * sp + s] = e;
                        z += e;
                    }
                    for k in 0..c {
                        o[base + k * sp + s] /= z;
                    }
                }
            }
        }
        Ok(self.push(
            out,
            &[x],
            Box::new(move |_, y, g| {
                let (yd, gd) = (y.data(), g.data());
                let mut dx = Tensor::zeros(y.shape());
                let dd = dx.data_mut();
                for n in 0..b {
                    let base = n * c * sp;
                    for s in 0..sp {
                        let mut inner = 0.0;
                        for k in 0..c {
                            inner += gd[base + k * sp + s] * yd[base + k * sp + s];
                        }
                        for k in 0..c {
                            let i = base + k * sp + s;
                            dd[i] = yd[i] * (gd[i] - inner);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Affine map on the last axis: `x[..., in] W[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (n_out, n_in) = match ws[..] {
            [o, i] => (o, i),
            _ => return Err(Error::Shape(format!("linear weight {ws:?}"))),
        };
        if xs.last() != Some(&n_in) {
            return Err(Error::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [n_out] {
                return Err(Error::Shape(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / n_in;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().expect("non-empty") = n_out;
        let mut out = Tensor::zeros(&out_shape);
        {
            let (xd, wd) = (self.value(x).data(), self.value(weight).data());
            let bd = bias.map(|b| self.value(b).data());
            let o = out.data_mut();
            for r in 0..rows {
                let xr = &xd[r * n_in..(r + 1) * n_in];
                for k in 0..n_out {
                    let b0 = bd.map_or(0.0, |b| b[k]);
                    o[r * n_out + k] = dot(xr, &wd[k * n_in..(k + 1) * n_in]) + b0;
                }
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(
            out,
            &parents,
            Box::new(move |p, _, g| {
                let (xd, wd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut dx = Tensor::zeros(p[0].shape());
                let mut dw = Tensor::zeros(p[1].shape());
                let mut db = vec![0.0; n_out];
                for r in 0..rows {
                    let gr = &gd[r * n_out..(r + 1) * n_out];
                    let xr = &xd[r * n_in..(r + 1) * n_in];
                    for (k, &gk) in gr.iter().enumerate() {
                        if gk == 0.0 {
                            continue;
                        }
                        axpy(gk, &wd[k * n_in..(k + 1) * n_in], &mut dx.data_mut()[r * n_in..(r + 1) * n_in]);
                        axpy(gk, xr, &mut dw.data_mut()[k * n_in..(k + 1) * n_in]);
                        db[k] += gk;
                    }
                }
                let mut grads = vec![Some(dx), Some(dw)];
                if p.len() == 3 {
                    grads.push(Some(Tensor::from_vec(&[n_out], db).expect("bias shape")));
                }
                grads
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::Shape(format!(
                "layer_norm: input {xs:?}, gamma {:?}",
                self.shape(gamma)
            )));
        }
        let rows = self.value(x).len() / n;
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(&xs);
        {
            let (xd, gd, bd) = (
                self.value(x).data(),
                self.value(gamma).data(),
                self.value(beta).data(),
            );
            let o = out.data_mut();
            for r in 0..rows {
                let row = &xd[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..n {
                    let xh = (row[j] - mean) * is;
                    xhat[r * n + j] = xh;
                    o[r * n + j] = gd[j] * xh + bd[j];
                }
            }
        }
        Ok(self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |p, _, g| {
                let (gam, gd) = (p[1].data(), g.data());
                let mut dx = Tensor::zeros(p[0].shape());
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..rows {
                    let xh = &xhat[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gam[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xh[j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    let dr = &mut dx.data_mut()[r * n..(r + 1) * n];
                    for j in 0..n {
                        dr[j] = inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
                vec![
                    Some(dx),
                    Some(Tensor::from_vec(&[n], dgamma).expect("n")),
                    Some(Tensor::from_vec(&[n], dbeta).expect("n")),
                ]
            }),
        ))
    }

    /// Adds `pos` of shape `(1, ...)` to every batch row of `x`.
    pub fn add_broadcast_batch(&mut self, x: Var, pos: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ps = self.shape(pos).to_vec();
        if ps.first() != Some(&1) || ps[1..] != xs[1..] {
            return Err(Error::Shape(format!("broadcast add: {xs:?} vs {ps:?}")));
        }
        let inner = self.value(pos).len();
        let mut out = self.value(x).clone();
        {
            let pd = self.value(pos).data();
            for chunk in out.data_mut().chunks_mut(inner) {
                axpy(1.0, pd, chunk);
            }
        }
        Ok(self.push(
            out,
            &[x, pos],
            Box::new(move |_, _, g| {
                let mut dp = Tensor::zeros(&ps);
                for chunk in g.data().chunks(inner) {
                    axpy(1.0, chunk, dp.data_mut());
                }
                vec![Some(g.clone()), Some(dp)]
            }),
        ))
    }
}
