//! 2-D convolution (cross-correlation) and small conv stacks.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Weights of one convolution layer.
///
/// `kernel` is `[C_out, C_in, kH, kW]` (kH, kW odd) and `bias` is
/// `[1, C_out, 1, 1]`.
#[derive(Clone)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let ks = kernel.shape();
        if ks.h % 2 == 0 || ks.w % 2 == 0 {
            return Err(Error::Config(alloc::format!(
                "convolution kernel extents must be odd, got {}x{}",
                ks.h, ks.w
            )));
        }
        if stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        let bs = bias.shape();
        if bs.c != ks.n || bs.n != 1 || bs.h != 1 || bs.w != 1 {
            return Err(Error::AxisMismatch {
                context: "conv2d bias",
                axis: "channels",
                expected: ks.n,
                got: bs.c,
            });
        }
        Ok(ConvParams {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn c_in(&self) -> usize {
        self.kernel.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.kernel.shape().n
    }
}

/// Valid output range for one kernel tap: all `o` in `lo..hi` satisfy
/// `0 <= o * stride + offset < in_size`.
#[inline]
fn tap_range(in_size: usize, offset: isize, stride: usize, out_size: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 {
        ((-offset) + s - 1) / s
    } else {
        0
    };
    let hi_isize = (in_size as isize - 1 - offset).div_euclid(s) + 1;
    let lo = (lo.max(0) as usize).min(out_size);
    let hi = hi_isize.clamp(0, out_size as isize) as usize;
    (lo, hi.max(lo))
}

/// Standard cross-correlation convolution, differentiable with respect to
/// the input, the kernel and the bias.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let xs = x.shape();
    let ks = p.kernel.shape();
    if xs.c != ks.c {
        return Err(Error::AxisMismatch {
            context: "conv2d",
            axis: "input channels",
            expected: ks.c,
            got: xs.c,
        });
    }
    let oh_num = xs.h + 2 * p.padding;
    let ow_num = xs.w + 2 * p.padding;
    if oh_num < ks.h || ow_num < ks.w {
        return Err(Error::AxisMismatch {
            context: "conv2d",
            axis: "spatial extents",
            expected: ks.h.max(ks.w),
            got: oh_num.min(ow_num),
        });
    }
    let oh = (oh_num - ks.h) / p.stride + 1;
    let ow = (ow_num - ks.w) / p.stride + 1;
    let out_shape = Shape::new(xs.n, ks.n, oh, ow);

    let data = conv_forward(x.data(), xs, p.kernel.data(), ks, p.bias.data(), p.stride, p.padding, out_shape);

    let x_c = x.clone();
    let k_c = p.kernel.clone();
    let stride = p.stride;
    let padding = p.padding;
    let need_dx = x.requires_grad();
    let need_dk = p.kernel.requires_grad();
    let need_db = p.bias.requires_grad();
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![x.clone(), p.kernel.clone(), p.bias.clone()],
        Box::new(move |g| {
            let xs = x_c.shape();
            let ks = k_c.shape();
            let dx = need_dx
                .then(|| conv_backward_input(g, out_shape, k_c.data(), ks, xs, stride, padding));
            let dk = need_dk
                .then(|| conv_backward_kernel(g, out_shape, x_c.data(), xs, ks, stride, padding));
            let db = need_db.then(|| conv_backward_bias(g, out_shape));
            vec![dx, dk, db]
        }),
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f32],
    xs: Shape,
    k: &[f32],
    ks: Shape,
    bias: &[f32],
    stride: usize,
    padding: usize,
    os: Shape,
) -> Vec<f32> {
    let mut out = vec![0.0f32; os.numel()];
    let p = padding as isize;
    for n in 0..xs.n {
        for co in 0..ks.n {
            let b = bias[co];
            let out_plane = &mut out[os.at(n, co, 0, 0)..os.at(n, co, 0, 0) + os.plane()];
            out_plane.fill(b);
            for ci in 0..xs.c {
                let x_plane = &x[xs.at(n, ci, 0, 0)..xs.at(n, ci, 0, 0) + xs.plane()];
                for ky in 0..ks.h {
                    let dy = ky as isize - p;
                    let (oy_lo, oy_hi) = tap_range(xs.h, dy, stride, os.h);
                    for kx in 0..ks.w {
                        let dx = kx as isize - p;
                        let w = k[ks.at(co, ci, ky, kx)];
                        if w == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = tap_range(xs.w, dx, stride, os.w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * stride) as isize + dy;
                            let x_row = &x_plane[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                            let o_row = &mut out_plane[oy * os.w..(oy + 1) * os.w];
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + dx) as usize;
                                let len = ox_hi - ox_lo;
                                let xr = &x_row[ix0..ix0 + len];
                                let or = &mut o_row[ox_lo..ox_hi];
                                for (o, xv) in or.iter_mut().zip(xr) {
                                    *o += w * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * stride) as isize + dx;
                                    o_row[ox] += w * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(
    g: &[f32],
    os: Shape,
    k: &[f32],
    ks: Shape,
    xs: Shape,
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let mut dx = vec![0.0f32; xs.numel()];
    let p = padding as isize;
    for n in 0..xs.n {
        for co in 0..ks.n {
            let g_plane = &g[os.at(n, co, 0, 0)..os.at(n, co, 0, 0) + os.plane()];
            for ci in 0..xs.c {
                let base = xs.at(n, ci, 0, 0);
                let dx_plane = &mut dx[base..base + xs.plane()];
                for ky in 0..ks.h {
                    let dy = ky as isize - p;
                    let (oy_lo, oy_hi) = tap_range(xs.h, dy, stride, os.h);
                    for kx in 0..ks.w {
                        let dxo = kx as isize - p;
                        let w = k[ks.at(co, ci, ky, kx)];
                        if w == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = tap_range(xs.w, dxo, stride, os.w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * stride) as isize + dy) as usize;
                            let g_row = &g_plane[oy * os.w..(oy + 1) * os.w];
                            let dx_row = &mut dx_plane[iy * xs.w..(iy + 1) * xs.w];
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + dxo) as usize;
                                let len = ox_hi - ox_lo;
                                let dr = &mut dx_row[ix0..ix0 + len];
                                let gr = &g_row[ox_lo..ox_hi];
                                for (d, gv) in dr.iter_mut().zip(gr) {
                                    *d += w * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * stride) as isize + dxo) as usize;
                                    dx_row[ix] += w * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_backward_kernel(
    g: &[f32],
    os: Shape,
    x: &[f32],
    xs: Shape,
    ks: Shape,
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let mut dk = vec![0.0f32; ks.numel()];
    let p = padding as isize;
    for n in 0..xs.n {
        for co in 0..ks.n {
            let g_plane = &g[os.at(n, co, 0, 0)..os.at(n, co, 0, 0) + os.plane()];
            for ci in 0..xs.c {
                let x_plane = &x[xs.at(n, ci, 0, 0)..xs.at(n, ci, 0, 0) + xs.plane()];
                for ky in 0..ks.h {
                    let dy = ky as isize - p;
                    let (oy_lo, oy_hi) = tap_range(xs.h, dy, stride, os.h);
                    for kx in 0..ks.w {
                        let dxo = kx as isize - p;
                        let (ox_lo, ox_hi) = tap_range(xs.w, dxo, stride, os.w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * stride) as isize + dy) as usize;
                            let g_row = &g_plane[oy * os.w..(oy + 1) * os.w];
                            let x_row = &x_plane[iy * xs.w..(iy + 1) * xs.w];
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + dxo) as usize;
                                let len = ox_hi - ox_lo;
                                let xr = &x_row[ix0..ix0 + len];
                                let gr = &g_row[ox_lo..ox_hi];
                                for (gv, xv) in gr.iter().zip(xr) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * stride) as isize + dxo) as usize;
                                    acc += g_row[ox] * x_row[ix];
                                }
                            }
                        }
                        dk[ks.at(co, ci, ky, kx)] += acc;
                    }
                }
            }
        }
    }
    dk
}

fn conv_backward_bias(g: &[f32], os: Shape) -> Vec<f32> {
    let mut db = vec![0.0f32; os.c];
    for n in 0..os.n {
        for co in 0..os.c {
            let start = os.at(n, co, 0, 0);
            db[co] += g[start..start + os.plane()].iter().sum::<f32>();
        }
    }
    db
}

/// A generator/decoder stack: every layer but the last is followed by a
/// leaky rectified linear unit; the last layer emits raw values.
#[derive(Clone)]
pub struct ConvStack {
    pub layers: Vec<ConvParams>,
    pub leaky_slope: f32,
}

impl ConvStack {
    pub fn new(layers: Vec<ConvParams>, leaky_slope: f32) -> Self {
        ConvStack {
            layers,
            leaky_slope,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = conv2d(&cur, layer)?;
            if i != last {
                cur = cur.leaky_relu(self.leaky_slope);
            }
        }
        Ok(cur)
    }

    /// Applies all layers with the activation, returning the activated
    /// output of the last layer too (used by decoders that branch heads
    /// off the feature trunk).
    pub fn apply_trunk(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = conv2d(&cur, layer)?.leaky_relu(self.leaky_slope);
        }
        Ok(cur)
    }
}
