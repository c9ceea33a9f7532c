//! Elementwise ops, reductions, dense algebra and row softmax.
//!
//! Every op validates shapes, computes its output eagerly and registers a
//! backward rule. Reduction order inside each output element is fixed so
//! results do not depend on worker count.

use crate::error::{Error, Result};
use crate::par;

use super::{Element, Tensor};

fn stable_sigmoid<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

fn ew1<E: Element>(x: &[E], f: impl Fn(E) -> E + Sync) -> Vec<E> {
    par::map_collect(x.len(), |i| f(x[i]))
}

fn ew2<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E + Sync) -> Vec<E> {
    par::map_collect(a.len(), |i| f(a[i], b[i]))
}

impl<E: Element> Tensor<E> {
    pub fn add(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_same_shape(rhs, "add")?;
        let data = ew2(self.data(), rhs.data(), |a, b| a + b);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(|_, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i];
                    }
                });
                parents[1].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i];
                    }
                });
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_same_shape(rhs, "sub")?;
        let data = ew2(self.data(), rhs.data(), |a, b| a - b);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(|_, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i];
                    }
                });
                parents[1].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] - g[i];
                    }
                });
            }),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_same_shape(rhs, "mul")?;
        let data = ew2(self.data(), rhs.data(), |a, b| a * b);
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(|_, g, parents| {
                let a = parents[0].data().to_vec();
                let b = parents[1].data().to_vec();
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i] * b[i];
                    }
                });
                parents[1].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i] * a[i];
                    }
                });
            }),
        ))
    }

    pub fn neg(&self) -> Tensor<E> {
        let data = ew1(self.data(), |a| -a);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|_, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] - g[i];
                    }
                })
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<E> {
        let c = E::from_f64(c);
        let data = ew1(self.data(), move |a| a + c);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|_, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i];
                    }
                })
            }),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<E> {
        let c = E::from_f64(c);
        let data = ew1(self.data(), move |a| a * c);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i] * c;
                    }
                })
            }),
        )
    }

    /// `c - x`, elementwise.
    pub fn rsub_scalar(&self, c: f64) -> Tensor<E> {
        let c = E::from_f64(c);
        let data = ew1(self.data(), move |a| c - a);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|_, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] - g[i];
                    }
                })
            }),
        )
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&self) -> Tensor<E> {
        self.rsub_scalar(1.0)
    }

    pub fn relu(&self) -> Tensor<E> {
        let data = ew1(self.data(), |a| a.max(E::zero()));
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|out, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        if out[i] > E::zero() {
                            d[i] = d[i] + g[i];
                        }
                    }
                })
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data = ew1(self.data(), stable_sigmoid);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|out, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i] * out[i] * (E::one() - out[i]);
                    }
                })
            }),
        )
    }

    pub fn exp(&self) -> Tensor<E> {
        let data = ew1(self.data(), |a| a.exp());
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|out, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i] * out[i];
                    }
                })
            }),
        )
    }

    /// `ln(max(x, floor))`. Below the floor the derivative is taken as 0
    /// (the clamp is active, so the output no longer depends on `x`).
    pub fn ln_clamped(&self, floor: f64) -> Tensor<E> {
        let floor = E::from_f64(floor);
        let data = ew1(self.data(), move |a| a.max(floor).ln());
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                let x = parents[0].data().to_vec();
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        if x[i] > floor {
                            d[i] = d[i] + g[i] / x[i];
                        }
                    }
                })
            }),
        )
    }

    /// `ln(1 + exp(x))`, computed as `max(x, 0) + ln1p(exp(-|x|))`.
    pub fn softplus(&self) -> Tensor<E> {
        let data = ew1(self.data(), |x| x.max(E::zero()) + (-x.abs()).exp().ln_1p());
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|_, g, parents| {
                let x = parents[0].data().to_vec();
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i] * stable_sigmoid(x[i]);
                    }
                })
            }),
        )
    }

    /// Elementwise reciprocal. Pre: no element is zero.
    pub fn recip(&self) -> Tensor<E> {
        let data = ew1(self.data(), |a| E::one() / a);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|out, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] - g[i] * out[i] * out[i];
                    }
                })
            }),
        )
    }

    /// `x^c` with constant exponent. `c = 0` yields exactly 1 with zero
    /// gradient. At `x = 0` with `c < 1` the derivative is taken as 0.
    pub fn pow_const(&self, c: f64) -> Tensor<E> {
        let ce = E::from_f64(c);
        let data = if c == 0.0 {
            vec![E::one(); self.len()]
        } else {
            ew1(self.data(), move |a| a.powf(ce))
        };
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                if c == 0.0 {
                    // Constant output: contribute nothing, but still make
                    // sure the parent ends up with a (zero) buffer.
                    parents[0].accum_grad(|_| {});
                    return;
                }
                let x = parents[0].data().to_vec();
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        if x[i] == E::zero() && c < 1.0 {
                            continue;
                        }
                        d[i] = d[i] + g[i] * ce * x[i].powf(ce - E::one());
                    }
                })
            }),
        )
    }

    /// Sum of all elements, as a scalar tensor. Summation order is fixed
    /// left-to-right over the flat buffer.
    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        Tensor::from_op(
            vec![acc],
            vec![1],
            vec![self.clone()],
            Box::new(|_, g, parents| {
                let g0 = g[0];
                parents[0].accum_grad(|d| {
                    for v in d.iter_mut() {
                        *v = *v + g0;
                    }
                })
            }),
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::from_f64(self.len() as f64);
        let mut acc = E::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        Tensor::from_op(
            vec![acc / n],
            vec![1],
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                let g0 = g[0] / n;
                parents[0].accum_grad(|d| {
                    for v in d.iter_mut() {
                        *v = *v + g0;
                    }
                })
            }),
        )
    }

    /// Matrix product of `[n, d] x [d, m]`.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let (xs, ws) = (self.shape(), rhs.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {xs:?} x {ws:?}"
            )));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let x = self.data();
        let w = rhs.data();
        let mut out = vec![E::zero(); n * m];
        par::for_each_chunk_mut(&mut out, m, |row, buf| {
            for k in 0..d {
                let xv = x[row * d + k];
                let wrow = &w[k * m..(k + 1) * m];
                for (o, &wv) in buf.iter_mut().zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![n, m],
            vec![self.clone(), rhs.clone()],
            Box::new(move |_, g, parents| {
                let x = parents[0].data().to_vec();
                let w = parents[1].data().to_vec();
                parents[0].accum_grad(|dx| {
                    par::for_each_chunk_mut(dx, d, |row, buf| {
                        let grow = &g[row * m..(row + 1) * m];
                        for (k, o) in buf.iter_mut().enumerate() {
                            let wrow = &w[k * m..(k + 1) * m];
                            let mut acc = E::zero();
                            for j in 0..m {
                                acc = acc + grow[j] * wrow[j];
                            }
                            *o = *o + acc;
                        }
                    });
                });
                parents[1].accum_grad(|dw| {
                    par::for_each_chunk_mut(dw, m, |k, buf| {
                        for row in 0..n {
                            let xv = x[row * d + k];
                            if xv == E::zero() {
                                continue;
                            }
                            let grow = &g[row * m..(row + 1) * m];
                            for (o, &gv) in buf.iter_mut().zip(grow) {
                                *o = *o + xv * gv;
                            }
                        }
                    });
                });
            }),
        ))
    }

    /// Add a bias row vector `[m]` to every row of `[n, m]`.
    pub fn add_row_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let xs = self.shape();
        if xs.len() != 2 || bias.shape() != [xs[1]] {
            return Err(Error::shape(format!(
                "add_row_bias: {:?} with bias {:?}",
                xs,
                bias.shape()
            )));
        }
        let (n, m) = (xs[0], xs[1]);
        let x = self.data();
        let b = bias.data();
        let mut out = vec![E::zero(); n * m];
        par::for_each_chunk_mut(&mut out, m, |row, buf| {
            let xrow = &x[row * m..(row + 1) * m];
            for j in 0..m {
                buf[j] = xrow[j] + b[j];
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![n, m],
            vec![self.clone(), bias.clone()],
            Box::new(move |_, g, parents| {
                parents[0].accum_grad(|d| {
                    for i in 0..g.len() {
                        d[i] = d[i] + g[i];
                    }
                });
                parents[1].accum_grad(|db| {
                    for row in 0..n {
                        let grow = &g[row * m..(row + 1) * m];
                        for j in 0..m {
                            db[j] = db[j] + grow[j];
                        }
                    }
                });
            }),
        ))
    }

    /// `x @ w + b` for `x: [n, d]`, `w: [d, m]`, `b: [m]`.
    pub fn dense(&self, weight: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        self.matmul(weight)?.add_row_bias(bias)
    }

    /// Row-wise softmax over the last axis; leading axes are flattened into
    /// rows. Each row is shifted by its max before exponentiation.
    pub fn softmax_rows(&self) -> Result<Tensor<E>> {
        let shape = self.shape().to_vec();
        let Some(&cols) = shape.last() else {
            return Err(Error::shape("softmax_rows: zero-dimensional tensor".to_string()));
        };
        if cols == 0 {
            return Err(Error::shape("softmax_rows: zero-length last axis".to_string()));
        }
        let x = self.data();
        let mut out = vec![E::zero(); x.len()];
        par::for_each_chunk_mut(&mut out, cols, |row, buf| {
            let xrow = &x[row * cols..(row + 1) * cols];
            let mut mx = xrow[0];
            for &v in &xrow[1..] {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = E::zero();
            for j in 0..cols {
                let e = (xrow[j] - mx).exp();
                buf[j] = e;
                sum = sum + e;
            }
            for v in buf.iter_mut() {
                *v = *v / sum;
            }
        });
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |out, g, parents| {
                parents[0].accum_grad(|d| {
                    par::for_each_chunk_mut(d, cols, |row, buf| {
                        let yrow = &out[row * cols..(row + 1) * cols];
                        let grow = &g[row * cols..(row + 1) * cols];
                        let mut dot = E::zero();
                        for j in 0..cols {
                            dot = dot + grow[j] * yrow[j];
                        }
                        for j in 0..cols {
                            buf[j] = buf[j] + yrow[j] * (grow[j] - dot);
                        }
                    });
                })
            }),
        ))
    }

    /// Squared Euclidean distances between rows of `[n, d]` and rows of
    /// `[k, d]`, giving `[n, k]`.
    pub fn pairwise_sqdist(&self, centers: &Tensor<E>) -> Result<Tensor<E>> {
        let (xs, cs) = (self.shape(), centers.shape());
        if xs.len() != 2 || cs.len() != 2 || xs[1] != cs[1] {
            return Err(Error::shape(format!(
                "pairwise_sqdist: {xs:?} vs centers {cs:?}"
            )));
        }
        let (n, d, k) = (xs[0], xs[1], cs[0]);
        let x = self.data();
        let c = centers.data();
        let mut out = vec![E::zero(); n * k];
        par::for_each_chunk_mut(&mut out, k, |row, buf| {
            let xrow = &x[row * d..(row + 1) * d];
            for (j, o) in buf.iter_mut().enumerate() {
                let crow = &c[j * d..(j + 1) * d];
                let mut acc = E::zero();
                for t in 0..d {
                    let diff = xrow[t] - crow[t];
                    acc = acc + diff * diff;
                }
                *o = acc;
            }
        });
        let two = E::from_f64(2.0);
        Ok(Tensor::from_op(
            out,
            vec![n, k],
            vec![self.clone(), centers.clone()],
            Box::new(move |_, g, parents| {
                let x = parents[0].data().to_vec();
                let c = parents[1].data().to_vec();
                parents[0].accum_grad(|dx| {
                    par::for_each_chunk_mut(dx, d, |row, buf| {
                        let xrow = &x[row * d..(row + 1) * d];
                        let grow = &g[row * k..(row + 1) * k];
                        for j in 0..k {
                            let gv = two * grow[j];
                            if gv == E::zero() {
                                continue;
                            }
                            let crow = &c[j * d..(j + 1) * d];
                            for t in 0..d {
                                buf[t] = buf[t] + gv * (xrow[t] - crow[t]);
                            }
                        }
                    });
                });
                parents[1].accum_grad(|dc| {
                    par::for_each_chunk_mut(dc, d, |j, buf| {
                        for row in 0..n {
                            let gv = two * g[row * k + j];
                            if gv == E::zero() {
                                continue;
                            }
                            let xrow = &x[row * d..(row + 1) * d];
                            let crow = &c[j * d..(j + 1) * d];
                            for t in 0..d {
                                buf[t] = buf[t] - gv * (xrow[t] - crow[t]);
                            }
                        }
                    });
                });
            }),
        ))
    }

    /// Scale each column of `[n, k]` by `v[k]`.
    pub fn scale_cols(&self, v: &Tensor<E>) -> Result<Tensor<E>> {
        let xs = self.shape();
        if xs.len() != 2 || v.shape() != [xs[1]] {
            return Err(Error::shape(format!(
                "scale_cols: {:?} with scale {:?}",
                xs,
                v.shape()
            )));
        }
        let (n, k) = (xs[0], xs[1]);
        let x = self.data();
        let s = v.data();
        let mut out = vec![E::zero(); n * k];
        par::for_each_chunk_mut(&mut out, k, |row, buf| {
            let xrow = &x[row * k..(row + 1) * k];
            for j in 0..k {
                buf[j] = xrow[j] * s[j];
            }
        });
        Ok(Tensor::from_op(
            out,
            vec![n, k],
            vec![self.clone(), v.clone()],
            Box::new(move |_, g, parents| {
                let x = parents[0].data().to_vec();
                let s = parents[1].data().to_vec();
                parents[0].accum_grad(|d| {
                    for row in 0..n {
                        for j in 0..k {
                            let i = row * k + j;
                            d[i] = d[i] + g[i] * s[j];
                        }
                    }
                });
                parents[1].accum_grad(|dv| {
                    for row in 0..n {
                        for j in 0..k {
                            let i = row * k + j;
                            dv[j] = dv[j] + g[i] * x[i];
                        }
                    }
                });
            }),
        ))
    }

    /// Sum of one column of `[n, k]`, as a scalar tensor.
    pub fn col_sum(&self, col: usize) -> Result<Tensor<E>> {
        let xs = self.shape();
        if xs.len() != 2 || col >= xs[1] {
            return Err(Error::shape(format!("col_sum: column {col} of {xs:?}")));
        }
        let (n, k) = (xs[0], xs[1]);
        let mut acc = E::zero();
        for row in 0..n {
            acc = acc + self.data()[row * k + col];
        }
        Ok(Tensor::from_op(
            vec![acc],
            vec![1],
            vec![self.clone()],
            Box::new(move |_, g, parents| {
                let g0 = g[0];
                parents[0].accum_grad(|d| {
                    for row in 0..n {
                        d[row * k + col] = d[row * k + col] + g0;
                    }
                })
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::param(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn relu_values() {
        let x = Tensor::<f64>::new(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let x = Tensor::<f64>::new(vec![0.0, 50.0, -50.0], &[3]).unwrap();
        let y = x.sigmoid().to_vec();
        assert_eq!(y[0], 0.5);
        assert!(y[1] > 0.999_999 && y[1] <= 1.0);
        assert!(y[2] < 1e-6 && y[2] >= 0.0);
    }

    #[test]
    fn softplus_is_finite_in_both_tails() {
        let x = Tensor::<f64>::new(vec![-700.0, 0.0, 700.0], &[3]).unwrap();
        let y = x.softplus().to_vec();
        assert!(y[0] >= 0.0 && y[0] < 1e-300);
        assert_relative_eq!(y[1], (2.0f64).ln());
        assert_eq!(y[2], 700.0);
    }

    #[test]
    fn pow_zero_is_one_with_zero_grad() {
        let x = p(&[0.3, 0.0, 2.0], &[3]);
        let y = x.pow_const(0.0);
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 1.0]);
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_identity_roundtrip() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let id = Tensor::<f64>::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        assert_eq!(x.matmul(&id).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn dense_with_identity_weight_and_zero_bias_is_input() {
        let x = Tensor::<f64>::new(vec![0.5, -1.5, 2.5, 0.0, 1.0, -2.0], &[2, 3]).unwrap();
        let w = Tensor::<f64>::new(
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
        )
        .unwrap();
        let b = Tensor::<f64>::zeros(&[3]);
        assert_eq!(x.dense(&w, &b).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3]).unwrap();
        let y = x.softmax_rows().unwrap();
        for row in 0..2 {
            let s: f64 = y.data()[row * 3..(row + 1) * 3].iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
        // Rows differ by a constant shift, so the distributions match.
        for j in 0..3 {
            assert_relative_eq!(y.data()[j], y.data()[3 + j], epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::<f64>::new(vec![1000.0, 1001.0, 999.0], &[1, 3]).unwrap();
        let y = x.softmax_rows().unwrap();
        y.assert_finite("softmax").unwrap();
        let s: f64 = y.data().iter().copied().sum();
        assert_relative_eq!(s, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_sqdist_known_values() {
        let x = Tensor::<f64>::new(vec![0.0, 0.0, 3.0, 4.0], &[2, 2]).unwrap();
        let c = Tensor::<f64>::new(vec![0.0, 0.0, 1.0, 1.0], &[2, 2]).unwrap();
        let d = x.pairwise_sqdist(&c).unwrap();
        assert_eq!(d.to_vec(), vec![0.0, 2.0, 25.0, 13.0]);
    }

    #[test]
    fn col_sum_routes_gradient_to_one_column() {
        let x = p(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let s = x.col_sum(1).unwrap();
        assert_eq!(s.item(), 6.0);
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 3]);
        assert!(a.add(&b).is_err());
        assert!(a.mul(&b).is_err());
        let w = Tensor::<f64>::zeros(&[2, 2]);
        assert!(a.matmul(&w).is_err());
    }
}
