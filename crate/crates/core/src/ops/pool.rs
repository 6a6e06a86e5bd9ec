use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    /// 2×2×2 max pooling with stride 2. Ties resolve to the first voxel in
    /// z-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, d, h, w] = self.value(x).dims5()?;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "max_pool2 needs even extents, got {:?}",
                self.shape(x)
            )));
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let mut out = Tensor::zeros(&[b, c, od, oh, ow]);
        let mut argmax = vec![0usize; out.len()];
        let xd = self.value(x).data();
        for nc in 0..b * c {
            let ibase = nc * d * h * w;
            let obase = nc * od * oh * ow;
            for z in 0..od {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = ibase + (2 * z * h + 2 * y) * w + 2 * xo;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ibase + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                    if xd[i] > best {
                                        best = xd[i];
                                        bi = i;
                                    }
                                }
                            }
                        }
                        let o = obase + (z * oh + y) * ow + xo;
                        out.data_mut()[o] = best;
                        argmax[o] = bi;
                    }
                }
            }
        }
        let in_shape = [b, c, d, h, w];
        Ok(self.push(
            out,
            &[x],
            Box::new(move |_, _, g| {
                let mut dx = Tensor::zeros(&in_shape);
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[i] += gv;
                }
                vec![Some(dx)]
            }),
        ))
    }
}
