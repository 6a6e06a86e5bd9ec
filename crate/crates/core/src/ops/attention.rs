use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{dot, Tensor};

/// Row-wise softmax of the `n × n` score block, in place.
fn softmax_rows(s: &mut [f64], n: usize) {
    for row in s.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Copies head `hd` of sample `bi` out of a `(B, N, d)` buffer into `(N, dh)`.
fn gather_head(src: &[f64], bi: usize, hd: usize, n: usize, d: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dh];
    for t in 0..n {
        let base = (bi * n + t) * d + hd * dh;
        out[t * dh..(t + 1) * dh].copy_from_slice(&src[base..base + dh]);
    }
    out
}

fn scatter_head(dst: &mut [f64], part: &[f64], bi: usize, hd: usize, n: usize, d: usize, dh: usize) {
    for t in 0..n {
        let base = (bi * n + t) * d + hd * dh;
        for j in 0..dh {
            dst[base + j] += part[t * dh + j];
        }
    }
}

impl Graph {
    /// Multi-head scaled dot-product attention
    /// `softmax(Q Kᵀ / sqrt(dh)) V` per head, heads concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let (b, n, d) = match shape[..] {
            [b, n, d] => (b, n, d),
            _ => return Err(Error::Shape(format!("attention input {shape:?}"))),
        };
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::Shape("attention: q, k, v shapes differ".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = Tensor::zeros(&shape);
        // attention weights per (sample, head), kept for backward
        let mut probs = Vec::with_capacity(b * heads);
        for bi in 0..b {
            for hd in 0..heads {
                let (qh, kh, vh) = (
                    gather_head(qd, bi, hd, n, d, dh),
                    gather_head(kd, bi, hd, n, d, dh),
                    gather_head(vd, bi, hd, n, d, dh),
                );
                let mut p = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        p[i * n + j] = scale * dot(&qh[i * dh..(i + 1) * dh], &kh[j * dh..(j + 1) * dh]);
                    }
                }
                softmax_rows(&mut p, n);
                let mut o = vec![0.0; n * dh];
                for i in 0..n {
                    for j in 0..n {
                        let w = p[i * n + j];
                        for c in 0..dh {
                            o[i * dh + c] += w * vh[j * dh + c];
                        }
                    }
                }
                scatter_head(out.data_mut(), &o, bi, hd, n, d, dh);
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            &[q, k, v],
            Box::new(move |p, _, g| {
                let (qd, kd, vd, gd) = (p[0].data(), p[1].data(), p[2].data(), g.data());
                let mut dq = Tensor::zeros(&[b, n, d]);
                let mut dk = Tensor::zeros(&[b, n, d]);
                let mut dv = Tensor::zeros(&[b, n, d]);
                for bi in 0..b {
                    for hd in 0..heads {
                        let pr = &probs[bi * heads + hd];
                        let (qh, kh, vh, gh) = (
                            gather_head(qd, bi, hd, n, d, dh),
                            gather_head(kd, bi, hd, n, d, dh),
                            gather_head(vd, bi, hd, n, d, dh),
                            gather_head(gd, bi, hd, n, d, dh),
                        );
                        // dV = Pᵀ dO ; dP = dO Vᵀ
                        let mut dvh = vec![0.0; n * dh];
                        let mut dp = vec![0.0; n * n];
                        for i in 0..n {
                            for j in 0..n {
                                let w = pr[i * n + j];
                                for c in 0..dh {
                                    dvh[j * dh + c] += w * gh[i * dh + c];
                                }
                                dp[i * n + j] = dot(&gh[i * dh..(i + 1) * dh], &vh[j * dh..(j + 1) * dh]);
                            }
                        }
                        // softmax backward, then the 1/sqrt(dh) scale
                        let mut ds = vec![0.0; n * n];
                        for i in 0..n {
                            let row = i * n..(i + 1) * n;
                            let inner = dot(&dp[row.clone()], &pr[row.clone()]);
                            for j in row {
                                ds[j] = pr[j] * (dp[j] - inner) * scale;
                            }
                        }
                        let mut dqh = vec![0.0; n * dh];
                        let mut dkh = vec![0.0; n * dh];
                        for i in 0..n {
                            for j in 0..n {
                                let s = ds[i * n + j];
                                for c in 0..dh {
                                    dqh[i * dh + c] += s * kh[j * dh + c];
                                    dkh[j * dh + c] += s * qh[i * dh + c];
                                }
                            }
                        }
                        scatter_head(dq.data_mut(), &dqh, bi, hd, n, d, dh);
                        scatter_head(dk.data_mut(), &dkh, bi, hd, n, d, dh);
                        scatter_head(dv.data_mut(), &dvh, bi, hd, n, d, dh);
                    }
                }
                vec![Some(dq), Some(dk), Some(dv)]
            }),
        ))
    }
}
