//! 2D convolution over `[n, c, h, w]` activations.
//!
//! Both padding modes zero-pad. `Same` splits the total padding with the
//! extra cell on the bottom/right when it is odd, so output extent is
//! `ceil(in / stride)`. Backward kernels gather rather than scatter: each
//! gradient element has a single writer, which keeps results identical for
//! any worker count.

use crate::error::{Error, Result};
use crate::par;

use super::{Element, Tensor};

/// Zero-padding mode for [`Tensor::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial extent `ceil(in / stride)`.
    Same,
    /// No padding; output extent `floor((in - k) / stride) + 1`.
    Valid,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

fn geometry(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    if input.len() != 4 || kernel.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d: expected input [n,c,h,w] and kernel [k,c,kh,kw], got {input:?} and {kernel:?}"
        )));
    }
    let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
    let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if kc != c_in {
        return Err(Error::shape(format!(
            "conv2d: kernel expects {kc} input channels, input has {c_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d: stride must be at least 1".to_string()));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::shape("conv2d: kernel extent must be at least 1".to_string()));
    }
    let (pad_top, pad_left, out_h, out_w) = match padding {
        Padding::Same => {
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            (pad_h / 2, pad_w / 2, out_h, out_w)
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(Error::shape(format!(
                    "conv2d valid: kernel {kh}x{kw} larger than input {h}x{w}"
                )));
            }
            (0, 0, (h - kh) / stride + 1, (w - kw) / stride + 1)
        }
    };
    Ok(ConvGeom { n, c_in, h, w, c_out, kh, kw, stride, pad_top, pad_left, out_h, out_w })
}

impl<E: Element> Tensor<E> {
    /// Cross-correlation of `[n, c, h, w]` with kernel `[k, c, kh, kw]`,
    /// producing `[n, k, oh, ow]`.
    pub fn conv2d(
        &self,
        kernel: &Tensor<E>,
        stride: usize,
        padding: Padding,
    ) -> Result<Tensor<E>> {
        let geom = geometry(self.shape(), kernel.shape(), stride, padding)?;
        let x = self.data();
        let k = kernel.data();
        let plane = geom.out_h * geom.out_w;
        let mut out = vec![E::zero(); geom.n * geom.c_out * plane];
        par::for_each_chunk_mut(&mut out, plane, |idx, buf| {
            let ni = idx / geom.c_out;
            let ko = idx % geom.c_out;
            forward_plane(&geom, x, k, ni, ko, buf);
        });
        let out_shape = vec![geom.n, geom.c_out, geom.out_h, geom.out_w];
        Ok(Tensor::from_op(
            out,
            out_shape,
            vec![self.clone(), kernel.clone()],
            Box::new(move |_, g, parents| {
                let x = parents[0].data().to_vec();
                let k = parents[1].data().to_vec();
                parents[0].accum_grad(|dx| {
                    let plane = geom.h * geom.w;
                    par::for_each_chunk_mut(dx, plane, |idx, buf| {
                        let ni = idx / geom.c_in;
                        let ci = idx % geom.c_in;
                        input_grad_plane(&geom, g, &k, ni, ci, buf);
                    });
                });
                parents[1].accum_grad(|dk| {
                    let per_filter = geom.c_in * geom.kh * geom.kw;
                    par::for_each_chunk_mut(dk, per_filter, |ko, buf| {
                        kernel_grad_filter(&geom, g, &x, ko, buf);
                    });
                });
            }),
        ))
    }
}

fn forward_plane<E: Element>(
    geom: &ConvGeom,
    x: &[E],
    k: &[E],
    ni: usize,
    ko: usize,
    buf: &mut [E],
) {
    let in_base = ni * geom.c_in * geom.h * geom.w;
    let k_base = ko * geom.c_in * geom.kh * geom.kw;
    for oh in 0..geom.out_h {
        for ow in 0..geom.out_w {
            let mut acc = E::zero();
            for ci in 0..geom.c_in {
                let xc = in_base + ci * geom.h * geom.w;
                let kc = k_base + ci * geom.kh * geom.kw;
                for i in 0..geom.kh {
                    let ih = (oh * geom.stride + i) as isize - geom.pad_top as isize;
                    if ih < 0 || ih as usize >= geom.h {
                        continue;
                    }
                    let xrow = xc + ih as usize * geom.w;
                    let krow = kc + i * geom.kw;
                    for j in 0..geom.kw {
                        let iw = (ow * geom.stride + j) as isize - geom.pad_left as isize;
                        if iw < 0 || iw as usize >= geom.w {
                            continue;
                        }
                        acc = acc + x[xrow + iw as usize] * k[krow + j];
                    }
                }
            }
            buf[oh * geom.out_w + ow] = acc;
        }
    }
}

/// d(loss)/d(input) for one `(sample, input channel)` plane: for each input
/// cell, gather every output position whose window covered it.
fn input_grad_plane<E: Element>(
    geom: &ConvGeom,
    g: &[E],
    k: &[E],
    ni: usize,
    ci: usize,
    buf: &mut [E],
) {
    let g_base = ni * geom.c_out * geom.out_h * geom.out_w;
    for ih in 0..geom.h {
        for iw in 0..geom.w {
            let mut acc = E::zero();
            for i in 0..geom.kh {
                let num_h = ih + geom.pad_top;
                if num_h < i || (num_h - i) % geom.stride != 0 {
                    continue;
                }
                let oh = (num_h - i) / geom.stride;
                if oh >= geom.out_h {
                    continue;
                }
                for j in 0..geom.kw {
                    let num_w = iw + geom.pad_left;
                    if num_w < j || (num_w - j) % geom.stride != 0 {
                        continue;
                    }
                    let ow = (num_w - j) / geom.stride;
                    if ow >= geom.out_w {
                        continue;
                    }
                    for ko in 0..geom.c_out {
                        let gv = g[g_base
                            + ko * geom.out_h * geom.out_w
                            + oh * geom.out_w
                            + ow];
                        let kv = k[ko * geom.c_in * geom.kh * geom.kw
                            + ci * geom.kh * geom.kw
                            + i * geom.kw
                            + j];
                        acc = acc + gv * kv;
                    }
                }
            }
            buf[ih * geom.w + iw] = buf[ih * geom.w + iw] + acc;
        }
    }
}

/// d(loss)/d(kernel) for one output filter, summed over samples and output
/// positions in fixed order.
fn kernel_grad_filter<E: Element>(geom: &ConvGeom, g: &[E], x: &[E], ko: usize, buf: &mut [E]) {
    for ci in 0..geom.c_in {
        for i in 0..geom.kh {
            for j in 0..geom.kw {
                let mut acc = E::zero();
                for ni in 0..geom.n {
                    let g_plane = (ni * geom.c_out + ko) * geom.out_h * geom.out_w;
                    let x_plane = (ni * geom.c_in + ci) * geom.h * geom.w;
                    for oh in 0..geom.out_h {
                        let ih = (oh * geom.stride + i) as isize - geom.pad_top as isize;
                        if ih < 0 || ih as usize >= geom.h {
                            continue;
                        }
                        let xrow = x_plane + ih as usize * geom.w;
                        let grow = g_plane + oh * geom.out_w;
                        for ow in 0..geom.out_w {
                            let iw =
                                (ow * geom.stride + j) as isize - geom.pad_left as isize;
                            if iw < 0 || iw as usize >= geom.w {
                                continue;
                            }
                            acc = acc + g[grow + ow] * x[xrow + iw as usize];
                        }
                    }
                }
                let bi = ci * geom.kh * geom.kw + i * geom.kw + j;
                buf[bi] = buf[bi] + acc;
            }
        }
    }
}
