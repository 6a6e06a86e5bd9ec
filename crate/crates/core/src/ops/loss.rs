use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{seg_loss_grad, LossWeights, SegComponents};
use crate::tensor::Tensor;

impl Graph {
    /// Segmentation loss on the foreground channel (channel 1) of the
    /// probability map `prob (B, K, D, H, W)`, restricted to batch `rows`.
    /// `masks` holds the matching ground truth, one `D·H·W` block per row.
    pub fn seg_loss(
        &mut self,
        prob: Var,
        rows: &[usize],
        masks: &[f64],
        w: &LossWeights,
    ) -> Result<(Var, SegComponents)> {
        let [b, k, d, h, wd] = self.value(prob).dims5()?;
        if k < 2 {
            return Err(Error::Shape(format!("seg loss needs a foreground channel, got K = {k}")));
        }
        let sp = d * h * wd;
        if rows.is_empty() || masks.len() != rows.len() * sp || rows.iter().any(|&r| r >= b) {
            return Err(Error::Shape(format!(
                "seg loss: {} rows, {} mask voxels, {sp} voxels per row",
                rows.len(),
                masks.len()
            )));
        }
        let pd = self.value(prob).data();
        let mut p = Vec::with_capacity(masks.len());
        for &r in rows {
            p.extend_from_slice(&pd[(r * k + 1) * sp..(r * k + 2) * sp]);
        }
        let comps = SegComponents::compute(&p, masks, w);
        let value = comps.combine(w.alpha_mix);
        let grad = seg_loss_grad(&p, masks, w);
        let rows = rows.to_vec();
        let shape = [b, k, d, h, wd];
        let var = self.push(
            Tensor::scalar(value),
            &[prob],
            Box::new(move |_, _, g| {
                let gv = g.item();
                let mut dp = Tensor::zeros(&shape);
                let dd = dp.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut dd[(r * k + 1) * sp..(r * k + 2) * sp];
                    for (o, v) in dst.iter_mut().zip(&grad[i * sp..(i + 1) * sp]) {
                        *o += gv * v;
                    }
                }
                vec![Some(dp)]
            }),
        );
        Ok((var, comps))
    }
}
