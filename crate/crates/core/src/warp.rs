//! Bilinear sampling: the shared kernel behind feature warping, flow-field
//! meta-warping and upsampling between pyramid levels.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Out-of-bounds policy for [`grid_sample`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Padding {
    /// Samples outside the image read zero (suppresses warping ghosts).
    Zeros,
    /// Coordinates clamp to the image border (reuses the nearest value).
    Border,
}

struct TapX {
    x0: isize,
    x1: isize,
    fx: f32,
    /// False when the coordinate was clamped; kills the position gradient.
    inside: bool,
}

#[inline]
fn tap(coord: f32, size: usize, padding: Padding) -> TapX {
    match padding {
        Padding::Zeros => {
            let f = libm::floorf(coord);
            TapX {
                x0: f as isize,
                x1: f as isize + 1,
                fx: coord - f,
                inside: true,
            }
        }
        Padding::Border => {
            let max = (size - 1) as f32;
            let clamped = coord.clamp(0.0, max);
            let f = libm::floorf(clamped);
            let x0 = f as isize;
            let x1 = (x0 + 1).min(size as isize - 1);
            TapX {
                x0,
                x1,
                fx: clamped - f,
                inside: coord == clamped,
            }
        }
    }
}

#[inline]
fn fetch(plane: &[f32], w: usize, h: usize, y: isize, x: isize) -> f32 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Samples `x` at `(j + offsets_x, i + offsets_y)` per pixel with bilinear
/// interpolation. `offsets` is `[N, 2, H, W]`: channel 0 holds x-offsets,
/// channel 1 y-offsets, both in pixels at `x`'s resolution. Differentiable
/// with respect to both the image and the offsets.
pub fn grid_sample(x: &Tensor, offsets: &Tensor, padding: Padding) -> Result<Tensor> {
    let xs = x.shape();
    let os = offsets.shape();
    if os.c != 2 {
        return Err(Error::AxisMismatch {
            context: "grid_sample offsets",
            axis: "channels",
            expected: 2,
            got: os.c,
        });
    }
    if os.n != xs.n || os.h != xs.h || os.w != xs.w {
        return Err(Error::AxisMismatch {
            context: "grid_sample",
            axis: "spatial extents",
            expected: xs.plane() * xs.n,
            got: os.plane() * os.n,
        });
    }

    let data = sample_forward(x.data(), xs, offsets.data(), padding);

    let x_c = x.clone();
    let off_c = offsets.clone();
    let need_dx = x.requires_grad();
    let need_doff = offsets.requires_grad();
    Ok(Tensor::from_op(
        xs,
        data,
        vec![x.clone(), offsets.clone()],
        Box::new(move |g| {
            let (dx, doff) = sample_backward(
                g,
                x_c.data(),
                x_c.shape(),
                off_c.data(),
                padding,
                need_dx,
                need_doff,
            );
            vec![dx, doff]
        }),
    ))
}

fn sample_forward(x: &[f32], xs: Shape, off: &[f32], padding: Padding) -> Vec<f32> {
    let (h, w) = (xs.h, xs.w);
    let plane = xs.plane();
    let mut out = vec![0.0f32; xs.numel()];
    let off_shape = Shape::new(xs.n, 2, h, w);
    for n in 0..xs.n {
        for i in 0..h {
            for j in 0..w {
                let sx = j as f32 + off[off_shape.at(n, 0, i, j)];
                let sy = i as f32 + off[off_shape.at(n, 1, i, j)];
                let tx = tap(sx, w, padding);
                let ty = tap(sy, h, padding);
                for c in 0..xs.c {
                    let pl = &x[(n * xs.c + c) * plane..(n * xs.c + c + 1) * plane];
                    let v00 = fetch(pl, w, h, ty.x0, tx.x0);
                    let v01 = fetch(pl, w, h, ty.x0, tx.x1);
                    let v10 = fetch(pl, w, h, ty.x1, tx.x0);
                    let v11 = fetch(pl, w, h, ty.x1, tx.x1);
                    // Lerp form keeps integer offsets bit-exact.
                    let top = v00 + tx.fx * (v01 - v00);
                    let bot = v10 + tx.fx * (v11 - v10);
                    out[(n * xs.c + c) * plane + i * w + j] = top + ty.fx * (bot - top);
                }
            }
        }
    }
    out
}

fn sample_backward(
    g: &[f32],
    x: &[f32],
    xs: Shape,
    off: &[f32],
    padding: Padding,
    need_dx: bool,
    need_doff: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let (h, w) = (xs.h, xs.w);
    let plane = xs.plane();
    let off_shape = Shape::new(xs.n, 2, h, w);
    let mut dx = need_dx.then(|| vec![0.0f32; xs.numel()]);
    let mut doff = need_doff.then(|| vec![0.0f32; off_shape.numel()]);
    for n in 0..xs.n {
        for i in 0..h {
            for j in 0..w {
                let sx = j as f32 + off[off_shape.at(n, 0, i, j)];
                let sy = i as f32 + off[off_shape.at(n, 1, i, j)];
                let tx = tap(sx, w, padding);
                let ty = tap(sy, h, padding);
                let (w00, w01) = ((1.0 - tx.fx) * (1.0 - ty.fx), tx.fx * (1.0 - ty.fx));
                let (w10, w11) = ((1.0 - tx.fx) * ty.fx, tx.fx * ty.fx);
                let mut gsx = 0.0f32;
                let mut gsy = 0.0f32;
                for c in 0..xs.c {
                    let base = (n * xs.c + c) * plane;
                    let gv = g[base + i * w + j];
                    if gv == 0.0 {
                        continue;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let pl = &mut dx[base..base + plane];
                        scatter(pl, w, h, ty.x0, tx.x0, w00 * gv);
                        scatter(pl, w, h, ty.x0, tx.x1, w01 * gv);
                        scatter(pl, w, h, ty.x1, tx.x0, w10 * gv);
                        scatter(pl, w, h, ty.x1, tx.x1, w11 * gv);
                    }
                    if doff.is_some() {
                        let pl = &x[base..base + plane];
                        let v00 = fetch(pl, w, h, ty.x0, tx.x0);
                        let v01 = fetch(pl, w, h, ty.x0, tx.x1);
                        let v10 = fetch(pl, w, h, ty.x1, tx.x0);
                        let v11 = fetch(pl, w, h, ty.x1, tx.x1);
                        gsx += gv * ((1.0 - ty.fx) * (v01 - v00) + ty.fx * (v11 - v10));
                        gsy += gv * ((1.0 - tx.fx) * (v10 - v00) + tx.fx * (v11 - v01));
                    }
                }
                if let Some(doff) = doff.as_mut() {
                    if tx.inside {
                        doff[off_shape.at(n, 0, i, j)] = gsx;
                    }
                    if ty.inside {
                        doff[off_shape.at(n, 1, i, j)] = gsy;
                    }
                }
            }
        }
    }
    (dx, doff)
}

#[inline]
fn scatter(plane: &mut [f32], w: usize, h: usize, y: isize, x: isize, v: f32) {
    if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
        plane[y as usize * w + x as usize] += v;
    }
}

/// Per-axis interpolation table for a 2x bilinear upsample with the
/// align-corners-false convention: `src = (dst + 0.5) / 2 - 0.5`, edges
/// clamped.
fn upsample_taps(in_size: usize) -> Vec<(usize, usize, f32)> {
    let out_size = in_size * 2;
    let mut taps = Vec::with_capacity(out_size);
    for o in 0..out_size {
        let src = (o as f32 + 0.5) * 0.5 - 0.5;
        let clamped = src.clamp(0.0, (in_size - 1) as f32);
        let f = libm::floorf(clamped);
        let i0 = f as usize;
        let i1 = (i0 + 1).min(in_size - 1);
        taps.push((i0, i1, clamped - f));
    }
    taps
}

/// Bilinear 2x spatial upsampling to `[N, C, 2H, 2W]`. The caller is
/// responsible for any value scaling (flow vectors double when moving one
/// level finer).
pub fn upsample2x(x: &Tensor) -> Tensor {
    let xs = x.shape();
    let out_shape = Shape::new(xs.n, xs.c, xs.h * 2, xs.w * 2);
    let xt = upsample_taps(xs.w);
    let yt = upsample_taps(xs.h);
    let mut out = vec![0.0f32; out_shape.numel()];
    for nc in 0..xs.n * xs.c {
        let src = &x.data()[nc * xs.plane()..(nc + 1) * xs.plane()];
        let dst = &mut out[nc * out_shape.plane()..(nc + 1) * out_shape.plane()];
        for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
            let row0 = &src[y0 * xs.w..y0 * xs.w + xs.w];
            let row1 = &src[y1 * xs.w..y1 * xs.w + xs.w];
            let orow = &mut dst[oy * out_shape.w..(oy + 1) * out_shape.w];
            for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                let a = row0[x0] + fx * (row0[x1] - row0[x0]);
                let b = row1[x0] + fx * (row1[x1] - row1[x0]);
                orow[ox] = a + fy * (b - a);
            }
        }
    }
    let in_shape = xs;
    Tensor::from_op(
        out_shape,
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let xt = upsample_taps(in_shape.w);
            let yt = upsample_taps(in_shape.h);
            let mut dx = vec![0.0f32; in_shape.numel()];
            for nc in 0..in_shape.n * in_shape.c {
                let gsrc = &g[nc * out_shape.plane()..(nc + 1) * out_shape.plane()];
                let ddst = &mut dx[nc * in_shape.plane()..(nc + 1) * in_shape.plane()];
                for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                        let gv = gsrc[oy * out_shape.w + ox];
                        ddst[y0 * in_shape.w + x0] += gv * (1.0 - fx) * (1.0 - fy);
                        ddst[y0 * in_shape.w + x1] += gv * fx * (1.0 - fy);
                        ddst[y1 * in_shape.w + x0] += gv * (1.0 - fx) * fy;
                        ddst[y1 * in_shape.w + x1] += gv * fx * fy;
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}
