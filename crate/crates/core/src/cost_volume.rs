//! Matching-cost volumes: dot-product correlation between two feature maps
//! and auto-correlation of a single feature map against itself.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Per-pixel matching costs over a square displacement window.
///
/// Channel `k` holds the cost of displacement
/// `(dx, dy) = (k mod (2D+1) - D, k div (2D+1) - D)` for search radius `D`:
/// row-major over `dy` then `dx`, so the channel count is `(2D+1)^2`.
#[derive(Clone)]
pub struct CostVolume {
    tensor: Tensor,
    radius: usize,
}

impl CostVolume {
    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn channels(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side
    }

    /// Displacement `(dx, dy)` encoded by channel `k`.
    pub fn displacement(&self, k: usize) -> (isize, isize) {
        let side = 2 * self.radius + 1;
        let r = self.radius as isize;
        ((k % side) as isize - r, (k / side) as isize - r)
    }

    /// Rewraps a tensor that already has cost-volume layout (used by
    /// modulation, which preserves the layout).
    pub fn from_tensor(tensor: Tensor, radius: usize) -> Result<Self> {
        let side = 2 * radius + 1;
        if tensor.shape().c != side * side {
            return Err(Error::AxisMismatch {
                context: "cost volume",
                axis: "channels",
                expected: side * side,
                got: tensor.shape().c,
            });
        }
        Ok(CostVolume { tensor, radius })
    }
}

/// Correlation cost volume between two feature maps.
///
/// For every pixel `x` and displacement `o` with max-norm at most `radius`,
/// the cost is `<f1(x), f2(x + o)> / C` where `C` is the feature length;
/// displacements falling outside the image cost zero. Differentiable with
/// respect to both inputs.
pub fn correlation(f1: &Tensor, f2: &Tensor, radius: usize) -> Result<CostVolume> {
    let s1 = f1.shape();
    let s2 = f2.shape();
    if s1 != s2 {
        return Err(Error::AxisMismatch {
            context: "correlation",
            axis: "shape",
            expected: s1.numel(),
            got: s2.numel(),
        });
    }
    let side = 2 * radius + 1;
    let k_total = side * side;
    let out_shape = Shape::new(s1.n, k_total, s1.h, s1.w);
    let inv_c = 1.0 / s1.c as f32;

    let data = corr_forward(f1.data(), f2.data(), s1, radius, inv_c, out_shape);

    let f1_c = f1.clone();
    let f2_c = f2.clone();
    let need_d1 = f1.requires_grad();
    let need_d2 = f2.requires_grad();
    let tensor = Tensor::from_op(
        out_shape,
        data,
        vec![f1.clone(), f2.clone()],
        Box::new(move |g| {
            let (d1, d2) = corr_backward(
                g,
                f1_c.data(),
                f2_c.data(),
                s1,
                radius,
                inv_c,
                out_shape,
                need_d1,
                need_d2,
            );
            vec![d1, d2]
        }),
    );
    Ok(CostVolume { tensor, radius })
}

/// Auto-correlation cost volume: correlation of a feature map with itself.
pub fn auto_correlation(f1: &Tensor, radius: usize) -> Result<CostVolume> {
    correlation(f1, f1, radius)
}

/// Valid pixel range along one axis for displacement `d`.
#[inline]
fn valid_range(size: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = ((size as isize - d).min(size as isize)).max(0) as usize;
    (lo, hi.max(lo))
}

fn corr_forward(
    f1: &[f32],
    f2: &[f32],
    s: Shape,
    radius: usize,
    inv_c: f32,
    os: Shape,
) -> Vec<f32> {
    let side = 2 * radius + 1;
    let mut out = vec![0.0f32; os.numel()];
    for n in 0..s.n {
        for k in 0..side * side {
            let dx = (k % side) as isize - radius as isize;
            let dy = (k / side) as isize - radius as isize;
            let (y_lo, y_hi) = valid_range(s.h, dy);
            let (x_lo, x_hi) = valid_range(s.w, dx);
            if x_lo >= x_hi {
                continue;
            }
            let o_plane = &mut out[os.at(n, k, 0, 0)..os.at(n, k, 0, 0) + os.plane()];
            for c in 0..s.c {
                let p1 = &f1[s.at(n, c, 0, 0)..s.at(n, c, 0, 0) + s.plane()];
                let p2 = &f2[s.at(n, c, 0, 0)..s.at(n, c, 0, 0) + s.plane()];
                for y in y_lo..y_hi {
                    let y2 = (y as isize + dy) as usize;
                    let r1 = &p1[y * s.w + x_lo..y * s.w + x_hi];
                    let r2_start = (y2 * s.w) as isize + x_lo as isize + dx;
                    let r2 = &p2[r2_start as usize..r2_start as usize + (x_hi - x_lo)];
                    let orow = &mut o_plane[y * s.w + x_lo..y * s.w + x_hi];
                    for ((o, a), b) in orow.iter_mut().zip(r1).zip(r2) {
                        *o += a * b;
                    }
                }
            }
            for v in o_plane.iter_mut() {
                *v *= inv_c;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn corr_backward(
    g: &[f32],
    f1: &[f32],
    f2: &[f32],
    s: Shape,
    radius: usize,
    inv_c: f32,
    os: Shape,
    need_d1: bool,
    need_d2: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let side = 2 * radius + 1;
    let mut d1 = need_d1.then(|| vec![0.0f32; s.numel()]);
    let mut d2 = need_d2.then(|| vec![0.0f32; s.numel()]);
    for n in 0..s.n {
        for k in 0..side * side {
            let dx = (k % side) as isize - radius as isize;
            let dy = (k / side) as isize - radius as isize;
            let (y_lo, y_hi) = valid_range(s.h, dy);
            let (x_lo, x_hi) = valid_range(s.w, dx);
            if x_lo >= x_hi {
                continue;
            }
            let g_plane = &g[os.at(n, k, 0, 0)..os.at(n, k, 0, 0) + os.plane()];
            for c in 0..s.c {
                let base = s.at(n, c, 0, 0);
                for y in y_lo..y_hi {
                    let y2 = (y as isize + dy) as usize;
                    let row1 = y * s.w;
                    let row2 = (y2 * s.w) as isize + dx;
                    for x in x_lo..x_hi {
                        let gv = g_plane[y * s.w + x] * inv_c;
                        if gv == 0.0 {
                            continue;
                        }
                        let i1 = base + row1 + x;
                        let i2 = base + (row2 + x as isize) as usize;
                        if let Some(d1) = d1.as_mut() {
                            d1[i1] += gv * f2[i2];
                        }
                        if let Some(d2) = d2.as_mut() {
                            d2[i2] += gv * f1[i1];
                        }
                    }
                }
            }
        }
    }
    (d1, d2)
}
