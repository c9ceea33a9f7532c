//! Pooling and broadcast-scaling ops over `[n, c, h, w]` activations.

use crate::error::{Error, Result};
use crate::par;

use super::{Element, Tensor};

fn nchw(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(format!("{op}: expected [n,c,h,w], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

impl<E: Element> Tensor<E> {
    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<E>> {
        let (n, c, h, w) = nchw(self.shape(), "global_avg_pool")?;
        let plane = h * w;
        let inv = E::from_f64(1.0 / plane as f64);
        let x = self.data();
        let mut out = vec![E::zero(); n * c];
        par::for_each_chunk_mut(&mut out, 1, |idx, buf| {
            let base = idx * plane;
            let mut acc = E::zero();
            for &v in &x[base..base + plane] {
                acc = acc + v;
            }
            buf[0] = acc * inv;
        });
        Ok(Tensor::from_op(
            out,
            vec![n, c],
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                parents[0].accum_grad(|d| {
                    par::for_each_chunk_mut(d, plane, |idx, buf| {
                        let gv = g[idx] * inv;
                        for v in buf.iter_mut() {
                            *v = *v + gv;
                        }
                    });
                })
            }),
        ))
    }

    /// Max over the spatial axes: `[n, c, h, w] -> [n, c]`. The gradient
    /// routes to the first maximum in row-major order.
    pub fn global_max_pool(&self) -> Result<Tensor<E>> {
        let (n, c, h, w) = nchw(self.shape(), "global_max_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::shape("global_max_pool: empty spatial extent".to_string()));
        }
        let x = self.data();
        let mut out = vec![E::zero(); n * c];
        let mut argmax = vec![0usize; n * c];
        for idx in 0..n * c {
            let base = idx * plane;
            let (mut best, mut best_at) = (x[base], 0usize);
            for (off, &v) in x[base..base + plane].iter().enumerate() {
                if v > best {
                    best = v;
                    best_at = off;
                }
            }
            out[idx] = best;
            argmax[idx] = best_at;
        }
        Ok(Tensor::from_op(
            out,
            vec![n, c],
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                parents[0].accum_grad(|d| {
                    for idx in 0..g.len() {
                        let at = idx * plane + argmax[idx];
                        d[at] = d[at] + g[idx];
                    }
                })
            }),
        ))
    }

    /// Per-position mean and max across channels:
    /// `[n, c, h, w] -> [n, 2, h, w]` (plane 0 mean, plane 1 max). The max
    /// gradient routes to the lowest-index channel that attains it.
    pub fn channel_pool(&self) -> Result<Tensor<E>> {
        let (n, c, h, w) = nchw(self.shape(), "channel_pool")?;
        if c == 0 {
            return Err(Error::shape("channel_pool: zero channels".to_string()));
        }
        let plane = h * w;
        let inv_c = E::from_f64(1.0 / c as f64);
        let x = self.data();
        let mut out = vec![E::zero(); n * 2 * plane];
        let mut argmax = vec![0usize; n * plane];
        for ni in 0..n {
            let in_base = ni * c * plane;
            let out_base = ni * 2 * plane;
            for pos in 0..plane {
                let mut acc = x[in_base + pos];
                let mut best = acc;
                let mut best_ch = 0usize;
                for ci in 1..c {
                    let v = x[in_base + ci * plane + pos];
                    acc = acc + v;
                    if v > best {
                        best = v;
                        best_ch = ci;
                    }
                }
                out[out_base + pos] = acc * inv_c;
                out[out_base + plane + pos] = best;
                argmax[ni * plane + pos] = best_ch;
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![n, 2, h, w],
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                parents[0].accum_grad(|d| {
                    for ni in 0..n {
                        let d_base = ni * c * plane;
                        let g_base = ni * 2 * plane;
                        for pos in 0..plane {
                            let g_mean = g[g_base + pos] * inv_c;
                            for ci in 0..c {
                                let at = d_base + ci * plane + pos;
                                d[at] = d[at] + g_mean;
                            }
                            let at = d_base + argmax[ni * plane + pos] * plane + pos;
                            d[at] = d[at] + g[g_base + plane + pos];
                        }
                    }
                })
            }),
        ))
    }

    /// Multiply every spatial position of channel `c` by `s[n, c]`.
    pub fn scale_channels(&self, s: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, h, w) = nchw(self.shape(), "scale_channels")?;
        if s.shape() != [n, c] {
            return Err(Error::shape(format!(
                "scale_channels: scale shape {:?}, expected [{n}, {c}]",
                s.shape()
            )));
        }
        let plane = h * w;
        let x = self.data();
        let sv = s.data();
        let mut out = vec![E::zero(); x.len()];
        par::for_each_chunk_mut(&mut out, plane, |idx, buf| {
            let scale = sv[idx];
            let base = idx * plane;
            for (o, &v) in buf.iter_mut().zip(&x[base..base + plane]) {
                *o = v * scale;
            }
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), s.clone()],
            Box::new(move |_, g, parents| {
                let x = parents[0].data().to_vec();
                let sv = parents[1].data().to_vec();
                parents[0].accum_grad(|d| {
                    par::for_each_chunk_mut(d, plane, |idx, buf| {
                        let scale = sv[idx];
                        let base = idx * plane;
                        for (o, &gv) in buf.iter_mut().zip(&g[base..base + plane]) {
                            *o = *o + gv * scale;
                        }
                    });
                });
                parents[1].accum_grad(|ds| {
                    par::for_each_chunk_mut(ds, 1, |idx, buf| {
                        let base = idx * plane;
                        let mut acc = E::zero();
                        for off in 0..plane {
                            acc = acc + g[base + off] * x[base + off];
                        }
                        buf[0] = buf[0] + acc;
                    });
                });
            }),
        ))
    }

    /// Multiply every channel by a per-position map `m: [n, 1, h, w]`.
    pub fn scale_spatial(&self, m: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, h, w) = nchw(self.shape(), "scale_spatial")?;
        if m.shape() != [n, 1, h, w] {
            return Err(Error::shape(format!(
                "scale_spatial: map shape {:?}, expected [{n}, 1, {h}, {w}]",
                m.shape()
            )));
        }
        let plane = h * w;
        let x = self.data();
        let mv = m.data();
        let mut out = vec![E::zero(); x.len()];
        par::for_each_chunk_mut(&mut out, plane, |idx, buf| {
            let ni = idx / c;
            let base = idx * plane;
            let mrow = &mv[ni * plane..(ni + 1) * plane];
            for pos in 0..plane {
                buf[pos] = x[base + pos] * mrow[pos];
            }
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), m.clone()],
            Box::new(move |_, g, parents| {
                let x = parents[0].data().to_vec();
                let mv = parents[1].data().to_vec();
                parents[0].accum_grad(|d| {
                    par::for_each_chunk_mut(d, plane, |idx, buf| {
                        let ni = idx / c;
                        let base = idx * plane;
                        let mrow = &mv[ni * plane..(ni + 1) * plane];
                        for pos in 0..plane {
                            buf[pos] = buf[pos] + g[base + pos] * mrow[pos];
                        }
                    });
                });
                parents[1].accum_grad(|dm| {
                    par::for_each_chunk_mut(dm, plane, |ni, buf| {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            for pos in 0..plane {
                                buf[pos] = buf[pos] + g[base + pos] * x[base + pos];
                            }
                        }
                    });
                });
            }),
        ))
    }

    /// Add a per-channel bias `b: [c]` at every sample and position.
    pub fn add_channel_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let (n, c, h, w) = nchw(self.shape(), "add_channel_bias")?;
        if bias.shape() != [c] {
            return Err(Error::shape(format!(
                "add_channel_bias: bias shape {:?}, expected [{c}]",
                bias.shape()
            )));
        }
        let plane = h * w;
        let x = self.data();
        let b = bias.data();
        let mut out = vec![E::zero(); x.len()];
        par::for_each_chunk_mut(&mut out, plane, |idx, buf| {
            let bv = b[idx % c];
            let base = idx * plane;
            for (o, &v) in buf.iter_mut().zip(&x[base..base + plane]) {
                *o = v + bv;
            }
        });
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |_, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i];
                    }
                });
                parents[1].accum_grad(|db| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let mut acc = E::zero();
                            for off in 0..plane {
                                acc = acc + g[base + off];
                            }
                            db[ci] = db[ci] + acc;
                        }
                    }
                });
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn avg_and_max_pool_values() {
        let x = Tensor::<f64>::new(
            vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0],
            &[1, 2, 2, 2],
        )
        .unwrap();
        assert_eq!(x.global_avg_pool().unwrap().to_vec(), vec![2.5, -2.5]);
        assert_eq!(x.global_max_pool().unwrap().to_vec(), vec![4.0, -1.0]);
    }

    #[test]
    fn max_pool_tie_routes_to_first() {
        let x = Tensor::<f64>::param(vec![5.0, 1.0, 5.0, 2.0], &[1, 1, 2, 2]).unwrap();
        let y = x.global_max_pool().unwrap();
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_pool_mean_and_max_planes() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 1.0, 2.0], &[1, 2, 2, 2])
            .unwrap();
        let y = x.channel_pool().unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert_eq!(&y.data()[..4], &[3.0, 1.0, 2.0, 3.0]);
        assert_eq!(&y.data()[4..], &[5.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn scale_channels_broadcasts_per_channel() {
        let x = Tensor::<f64>::new(vec![1.0; 8], &[1, 2, 2, 2]).unwrap();
        let s = Tensor::<f64>::new(vec![2.0, 0.5], &[1, 2]).unwrap();
        let y = x.scale_channels(&s).unwrap();
        assert_eq!(&y.data()[..4], &[2.0; 4]);
        assert_eq!(&y.data()[4..], &[0.5; 4]);
    }

    #[test]
    fn scale_spatial_broadcasts_across_channels() {
        let x = Tensor::<f64>::new(vec![1.0; 8], &[1, 2, 2, 2]).unwrap();
        let m = Tensor::<f64>::new(vec![0.0, 1.0, 2.0, 3.0], &[1, 1, 2, 2]).unwrap();
        let y = x.scale_spatial(&m).unwrap();
        assert_eq!(&y.data()[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&y.data()[4..], &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn add_channel_bias_mean_shift() {
        let x = Tensor::<f64>::zeros(&[2, 2, 2, 2]);
        let b = Tensor::<f64>::new(vec![1.0, -1.0], &[2]).unwrap();
        let y = x.add_channel_bias(&b).unwrap();
        let pooled = y.global_avg_pool().unwrap();
        for ni in 0..2 {
            assert_relative_eq!(pooled.data()[ni * 2], 1.0);
            assert_relative_eq!(pooled.data()[ni * 2 + 1], -1.0);
        }
    }
}
