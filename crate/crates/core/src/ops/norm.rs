use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Which statistics batch normalization uses.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    /// Normalize with the current batch statistics.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel batch statistics observed in train mode: `(mean, unbiased var)`.
pub type BatchStats = (Vec<f64>, Vec<f64>);

impl Graph {
    /// Batch normalization over all axes but the channel axis of a 5-D tensor.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [b, c, d, h, w] = self.value(x).dims5()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: {c} channels, gamma {:?}",
                self.shape(gamma)
            )));
        }
        let sp = d * h * w;
        let count = (b * sp) as f64;
        let xd = self.value(x).data();
        let (mean, var, observed) = match stats {
            BnStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for n in 0..b {
                        s += xd[(n * c + ch) * sp..(n * c + ch + 1) * sp].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut ss = 0.0;
                    for n in 0..b {
                        ss += xd[(n * c + ch) * sp..(n * c + ch + 1) * sp]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                    .collect();
                (mean.clone(), var, Some((mean, unbiased)))
            }
            BnStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("batch_norm running stats length".into()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Tensor::zeros(&[b, c, d, h, w]);
        let mut out = Tensor::zeros(&[b, c, d, h, w]);
        for n in 0..b {
            for ch in 0..c {
                let r = (n * c + ch) * sp..(n * c + ch + 1) * sp;
                for ((xh, o), &v) in xhat.data_mut()[r.clone()]
                    .iter_mut()
                    .zip(&mut out.data_mut()[r.clone()])
                    .zip(&xd[r])
                {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *o = gd[ch] * *xh + bd[ch];
                }
            }
        }
        let batch_mode = observed.is_some();
        let y = self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |p, _, g| {
                let gam = p[1].data();
                let (gd, xh) = (g.data(), xhat.data());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for n in 0..b {
                    for ch in 0..c {
                        let r = (n * c + ch) * sp..(n * c + ch + 1) * sp;
                        for (&gv, &xv) in gd[r.clone()].iter().zip(&xh[r]) {
                            dgamma[ch] += gv * xv;
                            dbeta[ch] += gv;
                        }
                    }
                }
                let mut dx = Tensor::zeros(p[0].shape());
                for ch in 0..c {
                    let scale = gam[ch] * inv_std[ch];
                    // sum(dxhat) = gamma*dbeta, sum(dxhat*xhat) = gamma*dgamma
                    let (m1, m2) = if batch_mode {
                        (dbeta[ch] / count, dgamma[ch] / count)
                    } else {
                        (0.0, 0.0)
                    };
                    for n in 0..b {
                        let r = (n * c + ch) * sp..(n * c + ch + 1) * sp;
                        for ((dv, &gv), &xv) in dx.data_mut()[r.clone()]
                            .iter_mut()
                            .zip(&gd[r.clone()])
                            .zip(&xh[r])
                        {
                            *dv = scale * (gv - m1 - xv * m2);
                        }
                    }
                }
                vec![
                    Some(dx),
                    Some(Tensor::from_vec(&[c], dgamma).expect("c")),
                    Some(Tensor::from_vec(&[c], dbeta).expect("c")),
                ]
            }),
        );
        Ok((y, observed))
    }
}
