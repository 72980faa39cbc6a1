//! Benchmark metrics (average end-point error, Fl outlier rates, per-region
//! breakdowns) and the standard flow color-wheel visualization.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::deformation::FlowField;
use crate::error::{Error, Result};
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Binary valid-pixel / region-membership indicator, `[N, 1, H, W]` with
/// values exactly 0 or 1.
#[derive(Clone)]
pub struct EvalMask(Tensor);

impl EvalMask {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().c != 1 {
            return Err(Error::AxisMismatch {
                context: "eval mask",
                axis: "channels",
                expected: 1,
                got: tensor.shape().c,
            });
        }
        if tensor.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("eval mask values must be exactly 0 or 1".into()));
        }
        Ok(EvalMask(tensor))
    }

    pub fn all_ones(n: usize, h: usize, w: usize) -> Self {
        EvalMask(Tensor::full(Shape::new(n, 1, h, w), 1.0))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }
}

fn check_flow_pair(context: &'static str, u: &FlowField, u_gt: &FlowField) -> Result<()> {
    let (a, b) = (u.tensor().shape(), u_gt.tensor().shape());
    if a != b {
        return Err(Error::AxisMismatch {
            context,
            axis: "shape",
            expected: a.numel(),
            got: b.numel(),
        });
    }
    Ok(())
}

/// Per-pixel end-point error `|u - u_gt|_2`, flattened over the batch.
fn epe_per_pixel(u: &FlowField, u_gt: &FlowField) -> Vec<f32> {
    let s = u.tensor().shape();
    let ud = u.tensor().data();
    let gd = u_gt.tensor().data();
    let mut out = Vec::with_capacity(s.n * s.plane());
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let ex = ud[s.at(n, 0, y, x)] - gd[s.at(n, 0, y, x)];
                let ey = ud[s.at(n, 1, y, x)] - gd[s.at(n, 1, y, x)];
                out.push(libm::sqrtf(ex * ex + ey * ey));
            }
        }
    }
    out
}

fn mask_values(mask: Option<&EvalMask>, len: usize) -> Vec<bool> {
    match mask {
        None => vec![true; len],
        Some(m) => m.tensor().data().iter().map(|&v| v == 1.0).collect(),
    }
}

/// Average end-point error over masked pixels.
pub fn aee(u: &FlowField, u_gt: &FlowField, mask: Option<&EvalMask>) -> Result<f32> {
    check_flow_pair("aee", u, u_gt)?;
    let epe = epe_per_pixel(u, u_gt);
    let keep = mask_values(mask, epe.len());
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (e, k) in epe.iter().zip(&keep) {
        if *k {
            total += *e as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((total / count as f64) as f32)
}

/// Fraction of masked pixels that are outliers. A pixel is an inlier when
/// its end-point error is below 3 pixels or below 5% of the ground-truth
/// magnitude; an outlier fails both tests.
pub fn fl_rate(u: &FlowField, u_gt: &FlowField, mask: Option<&EvalMask>) -> Result<f32> {
    check_flow_pair("fl_rate", u, u_gt)?;
    let s = u.tensor().shape();
    let epe = epe_per_pixel(u, u_gt);
    let keep = mask_values(mask, epe.len());
    let gd = u_gt.tensor().data();
    let mut outliers = 0usize;
    let mut count = 0usize;
    let mut idx = 0usize;
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                if keep[idx] {
                    let gx = gd[s.at(n, 0, y, x)];
                    let gy = gd[s.at(n, 1, y, x)];
                    let mag = libm::sqrtf(gx * gx + gy * gy);
                    let e = epe[idx];
                    let inlier = e < 3.0 || e < 0.05 * mag;
                    if !inlier {
                        outliers += 1;
                    }
                    count += 1;
                }
                idx += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(outliers as f32 / count as f32)
}

/// One row of a per-region error report. Metrics are `None` when the
/// region's mask selects no pixels.
#[derive(Clone, Debug)]
pub struct RegionRow {
    pub region: String,
    pub pixels: usize,
    pub aee: Option<f32>,
    pub fl: Option<f32>,
}

/// Computes AEE and Fl per named region mask, one row per region. Empty
/// regions keep their row with metrics explicitly marked absent.
pub fn region_report(
    u: &FlowField,
    u_gt: &FlowField,
    masks: &[(String, EvalMask)],
) -> Result<Vec<RegionRow>> {
    check_flow_pair("region_report", u, u_gt)?;
    let mut rows = Vec::with_capacity(masks.len());
    for (name, mask) in masks {
        let pixels = mask.count();
        let (aee_v, fl_v) = if pixels == 0 {
            (None, None)
        } else {
            (
                Some(aee(u, u_gt, Some(mask))?),
                Some(fl_rate(u, u_gt, Some(mask))?),
            )
        };
        rows.push(RegionRow {
            region: name.clone(),
            pixels,
            aee: aee_v,
            fl: fl_v,
        });
    }
    Ok(rows)
}

/// The Middlebury-style color wheel: 55 hues over six unevenly sized
/// segments (RY, YG, GC, CB, BM, MR).
fn color_wheel() -> Vec<[f32; 3]> {
    const SEGMENTS: [(usize, usize, usize); 6] = [
        (15, 0, 1), // R -> Y: add green
        (6, 1, 0),  // Y -> G: drop red
        (4, 1, 2),  // G -> C: add blue
        (11, 2, 1), // C -> B: drop green
        (13, 2, 0), // B -> M: add red
        (6, 0, 2),  // M -> R: drop blue
    ];
    let mut wheel = Vec::with_capacity(55);
    let mut color = [1.0f32, 0.0, 0.0];
    for &(len, hold, ramp) in &SEGMENTS {
        let rising = color[ramp] == 0.0;
        for i in 0..len {
            let t = i as f32 / len as f32;
            let mut c = [0.0f32; 3];
            c[hold] = 1.0;
            c[ramp] = if rising { t } else { 1.0 - t };
            wheel.push(c);
        }
        color[ramp] = if rising { 1.0 } else { 0.0 };
        color[hold] = 1.0;
    }
    wheel
}

/// Magnitude used for normalization when the caller does not supply one:
/// the 99th-percentile flow magnitude.
fn default_max_mag(mags: &[f32]) -> f32 {
    let mut sorted: Vec<f32> = mags.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() - 1) as f32 * 0.99) as usize;
    let m = sorted[idx];
    if m > 1e-9 {
        m
    } else {
        1.0
    }
}

/// Renders a flow field with the standard color wheel: hue encodes the
/// flow direction, saturation the magnitude normalized by `max_mag`
/// (default: the 99th-percentile magnitude). Zero flow renders white.
/// Returns an `[N, 3, H, W]` image tensor with values in `[0, 1]`.
pub fn flow_to_color(u: &FlowField, max_mag: Option<f32>) -> Tensor {
    let s = u.tensor().shape();
    let d = u.tensor().data();
    let mut mags = Vec::with_capacity(s.n * s.plane());
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let fx = d[s.at(n, 0, y, x)];
                let fy = d[s.at(n, 1, y, x)];
                mags.push(libm::sqrtf(fx * fx + fy * fy));
            }
        }
    }
    let norm = max_mag.unwrap_or_else(|| default_max_mag(&mags));
    let wheel = color_wheel();
    let ncols = wheel.len();
    let out_shape = Shape::new(s.n, 3, s.h, s.w);
    let mut out = vec![0.0f32; out_shape.numel()];
    let mut idx = 0usize;
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let fx = d[s.at(n, 0, y, x)];
                let fy = d[s.at(n, 1, y, x)];
                let rad = (mags[idx] / norm).clamp(0.0, 1.0);
                idx += 1;
                let a = libm::atan2f(-fy, -fx) / core::f32::consts::PI;
                let fk = (a + 1.0) / 2.0 * (ncols - 1) as f32;
                let k0 = (fk as usize).min(ncols - 1);
                let k1 = (k0 + 1) % ncols;
                let f = fk - k0 as f32;
                for ch in 0..3 {
                    let col = (1.0 - f) * wheel[k0][ch] + f * wheel[k1][ch];
                    // Blend toward white as the magnitude drops.
                    out[out_shape.at(n, ch, y, x)] = 1.0 - rad * (1.0 - col);
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn flow_const(n: usize, h: usize, w: usize, fx: f32, fy: f32) -> FlowField {
        let s = Shape::new(n, 2, h, w);
        let mut data = vec![0.0f32; s.numel()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    data[s.at(b, 0, y, x)] = fx;
                    data[s.at(b, 1, y, x)] = fy;
                }
            }
        }
        FlowField::new(Tensor::from_vec(s, data).unwrap()).unwrap()
    }

    #[test]
    fn aee_zero_for_equal_fields() {
        let u = flow_const(1, 3, 3, 1.0, -2.0);
        assert_eq!(aee(&u, &u, None).unwrap(), 0.0);
    }

    #[test]
    fn aee_three_four_five() {
        let u = flow_const(1, 4, 4, 3.0, 4.0);
        let gt = flow_const(1, 4, 4, 0.0, 0.0);
        assert!((aee(&u, &gt, None).unwrap() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn aee_rejects_empty_mask() {
        let u = flow_const(1, 2, 2, 0.0, 0.0);
        let mask = EvalMask::new(Tensor::zeros(Shape::new(1, 1, 2, 2))).unwrap();
        assert_eq!(aee(&u, &u, Some(&mask)).unwrap_err(), Error::EmptyMask);
    }

    #[test]
    fn fl_rate_small_errors_are_inliers() {
        // EPE 2.9 everywhere: inlier by the 3-pixel rule.
        let u = flow_const(1, 3, 3, 2.9, 0.0);
        let gt = flow_const(1, 3, 3, 0.0, 0.0);
        assert_eq!(fl_rate(&u, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn fl_rate_five_percent_branch() {
        // |u_gt| = 100, EPE 4: inlier because 4 < 5% of 100.
        let u = flow_const(1, 3, 3, 104.0, 0.0);
        let gt = flow_const(1, 3, 3, 100.0, 0.0);
        assert_eq!(fl_rate(&u, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn fl_rate_fails_both_branches() {
        // |u_gt| = 10, EPE 4: fails the 3-pixel and the 5% rule.
        let u = flow_const(1, 3, 3, 14.0, 0.0);
        let gt = flow_const(1, 3, 3, 10.0, 0.0);
        assert_eq!(fl_rate(&u, &gt, None).unwrap(), 1.0);
    }

    #[test]
    fn region_report_partition_identity() {
        let s = Shape::new(1, 2, 2, 2);
        let u = FlowField::new(
            Tensor::from_vec(s, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
        )
        .unwrap();
        let gt = flow_const(1, 2, 2, 0.0, 0.0);
        let left = EvalMask::new(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
        )
        .unwrap();
        let right = EvalMask::new(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let rows = region_report(
            &u,
            &gt,
            &[
                ("all".to_string(), EvalMask::all_ones(1, 2, 2)),
                ("left".to_string(), left),
                ("right".to_string(), right),
            ],
        )
        .unwrap();
        let all = rows[0].aee.unwrap();
        let blended = (rows[1].aee.unwrap() * 2.0 + rows[2].aee.unwrap() * 2.0) / 4.0;
        assert!((all - blended).abs() < 1e-6);
    }

    #[test]
    fn region_report_marks_empty_regions() {
        let u = flow_const(1, 2, 2, 0.0, 0.0);
        let empty = EvalMask::new(Tensor::zeros(Shape::new(1, 1, 2, 2))).unwrap();
        let rows = region_report(&u, &u, &[("unmatched".to_string(), empty)]).unwrap();
        assert_eq!(rows[0].pixels, 0);
        assert!(rows[0].aee.is_none());
        assert!(rows[0].fl.is_none());
    }

    #[test]
    fn zero_flow_renders_white() {
        let u = flow_const(1, 3, 3, 0.0, 0.0);
        let img = flow_to_color(&u, None);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scaling_flow_and_max_mag_together_is_invariant() {
        let s = Shape::new(1, 2, 2, 2);
        let data = vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.25, 2.0, -0.5];
        let u = FlowField::new(Tensor::from_vec(s, data.clone()).unwrap()).unwrap();
        let u2 = FlowField::new(
            Tensor::from_vec(s, data.iter().map(|v| v * 2.0).collect()).unwrap(),
        )
        .unwrap();
        let a = flow_to_color(&u, Some(4.0));
        let b = flow_to_color(&u2, Some(8.0));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn opposite_flow_lands_on_opposite_wheel_position() {
        let u = flow_const(1, 1, 1, 1.0, 0.0);
        let v = flow_const(1, 1, 1, -1.0, 0.0);
        let a = flow_to_color(&u, Some(1.0));
        let b = flow_to_color(&v, Some(1.0));
        // atan2(-fy, -fx) puts (1, 0) at the wheel start and (-1, 0) at the
        // wheel midpoint: exactly opposite positions on the hue circle.
        let wheel = color_wheel();
        let mid = (wheel.len() - 1) / 2;
        for ch in 0..3 {
            assert!((a.data()[ch] - wheel[0][ch]).abs() < 1e-5);
            assert!((b.data()[ch] - wheel[mid][ch]).abs() < 1e-5);
        }
        assert_ne!(a.data(), b.data());
    }
}
