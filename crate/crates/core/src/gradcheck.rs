//! Central finite-difference verification of every differentiable
//! operation, including the full training loss on a tiny model. Shipped as
//! a library feature so the CLI's `gradcheck` subcommand and the test suite
//! run the same checks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d, ConvParams};
use crate::cost_volume::{auto_correlation, correlation, CostVolume};
use crate::deformation::{deform_flow, DisplacementField, FlowField};
use crate::error::Result;
use crate::modulation::{modulate, ModulationTensors};
use crate::network::{forward, init_weights, ModelConfig, Variant, Weights};
use crate::rng::rng_for_name;
use crate::shape::Shape;
use crate::tensor::Tensor;
use crate::training::{loss, synth_sample, TrainConfig};
use crate::warp::{grid_sample, upsample2x, Padding};

/// Relative tolerance of the whole suite.
pub const REL_TOL: f32 = 1e-2;
/// Central-difference step for piecewise-linear ops (convolution,
/// correlation, sampling, modulation). Central differences are unbiased for
/// these at any step that stays clear of the interpolation kinks, so a
/// larger step just dilutes 32-bit forward rounding noise.
pub const FD_EPS: f32 = 2e-2;
/// Step for curved functions (sigmoid, the full loss), balancing rounding
/// noise against truncation.
pub const FD_EPS_SMOOTH: f32 = 8e-3;
/// Step for the bilinear samplers, whose kinks sit at integer fractions;
/// the sampling coordinates keep a 0.2 margin from those.
pub const FD_EPS_SAMPLING: f32 = 5e-2;

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub op: String,
    pub max_rel_err: f32,
    pub passed: bool,
}

fn uniform(r: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    let data: Vec<f32> = (0..shape.numel()).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Fractional sampling coordinates strictly inside the image, away from
/// integer lattice points where bilinear interpolation has kinks.
fn interior_offsets(r: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Tensor {
    let shape = Shape::new(n, 2, h, w);
    let mut data = vec![0.0f32; shape.numel()];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let tx = r.random_range(0.6..w as f32 - 1.6);
                let ty = r.random_range(0.6..h as f32 - 1.6);
                let keep_frac = |v: f32| {
                    let f = v - libm::floorf(v);
                    if f < 0.2 {
                        v + 0.2
                    } else if f > 0.8 {
                        v - 0.2
                    } else {
                        v
                    }
                };
                data[shape.at(b, 0, y, x)] = keep_frac(tx) - x as f32;
                data[shape.at(b, 1, y, x)] = keep_frac(ty) - y as f32;
            }
        }
    }
    Tensor::from_vec(shape, data).unwrap()
}

/// Max relative error between analytic gradients and central differences
/// for a scalar-valued function of the tracked `inputs`:
/// `|g - g_fd| / max(1e-6, |g_fd|)`, maximized over every element.
pub fn fd_max_rel_err(
    inputs: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> Result<Tensor>,
    eps: f32,
) -> Result<f32> {
    let out = f(inputs)?;
    out.backward()?;
    let mut max_rel = 0.0f32;
    for (idx, input) in inputs.iter().enumerate() {
        let numel = input.shape().numel();
        let analytic = input.grad().unwrap_or_else(|| vec![0.0; numel]);
        for j in 0..numel {
            let eval = |delta: f32| -> Result<f32> {
                let perturbed: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        if k == idx {
                            let mut d = t.data().to_vec();
                            d[j] += delta;
                            Tensor::from_vec(t.shape(), d).unwrap()
                        } else {
                            t.detach()
                        }
                    })
                    .collect();
                Ok(f(&perturbed)?.item())
            };
            let fd = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let rel = (analytic[j] - fd).abs() / f32::max(1e-6, fd.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn probe_for(r: &mut ChaCha8Rng, shape: Shape) -> Tensor {
    uniform(r, shape, -1.0, 1.0)
}

fn report(op: &str, max_rel_err: f32) -> CheckReport {
    CheckReport {
        op: String::from(op),
        max_rel_err,
        passed: max_rel_err <= REL_TOL,
    }
}

fn check_conv2d(seed: u64) -> Result<CheckReport> {
    let mut r = rng_for_name(seed, "gradcheck.conv2d");
    let mut worst = 0.0f32;
    for stride in [1usize, 2] {
        let x = uniform(&mut r, Shape::new(1, 3, 6, 6), -1.0, 1.0).tracked();
        let kernel = uniform(&mut r, Shape::new(4, 3, 3, 3), -0.5, 0.5).tracked();
        let bias = uniform(&mut r, Shape::new(1, 4, 1, 1), -0.2, 0.2).tracked();
        let oh = (6 + 2 - 3) / stride + 1;
        let probe = probe_for(&mut r, Shape::new(1, 4, oh, oh));
        let f = move |inp: &[Tensor]| -> Result<Tensor> {
            let p = ConvParams::new(inp[1].clone(), inp[2].clone(), stride, 1)?;
            Ok(conv2d(&inp[0], &p)?.mul(&probe)?.sum())
        };
        worst = worst.max(fd_max_rel_err(&[x, kernel, bias], &f, FD_EPS)?);
    }
    Ok(report("conv2d", worst))
}

fn check_unary(
    seed: u64,
    name: &'static str,
    lo: f32,
    hi: f32,
    eps: f32,
    apply: fn(&Tensor) -> Tensor,
) -> Result<CheckReport> {
    let mut r = rng_for_name(seed, name);
    let shape = Shape::new(1, 4, 6, 6);
    let mut data: Vec<f32> = (0..shape.numel()).map(|_| r.random_range(lo..hi)).collect();
    if name.contains("leaky_relu") {
        // Flip half the signs so both branches are exercised, keeping
        // magnitudes away from the kink at zero.
        for (i, v) in data.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
    }
    let x = Tensor::from_vec(shape, data).unwrap().tracked();
    let probe = probe_for(&mut r, shape);
    let f = move |inp: &[Tensor]| -> Result<Tensor> { Ok(apply(&inp[0]).mul(&probe)?.sum()) };
    Ok(report(name, fd_max_rel_err(&[x], &f, eps)?))
}

fn check_upsample2x(seed: u64) -> Result<CheckReport> {
    let mut r = rng_for_name(seed, "gradcheck.upsample2x");
    let shape = Shape::new(1, 3, 4, 4);
    let x = uniform(&mut r, shape, -1.0, 1.0).tracked();
    let probe = probe_for(&mut r, Shape::new(1, 3, 8, 8));
    let f = move |inp: &[Tensor]| -> Result<Tensor> {
        Ok(upsample2x(&inp[0]).mul(&probe)?.sum())
    };
    Ok(report("upsample2x", fd_max_rel_err(&[x], &f, FD_EPS)?))
}

fn check_grid_sample(seed: u64) -> Result<CheckReport> {
    let mut r = rng_for_name(seed, "gradcheck.grid_sample");
    let mut worst = 0.0f32;
    for padding in [Padding::Zeros, Padding::Border] {
        let x = uniform(&mut r, Shape::new(1, 3, 6, 6), -1.0, 1.0).tracked();
        let off = interior_offsets(&mut r, 1, 6, 6).tracked();
        let probe = probe_for(&mut r, Shape::new(1, 3, 6, 6));
        let f = move |inp: &[Tensor]| -> Result<Tensor> {
            Ok(grid_sample(&inp[0], &inp[1], padding)?.mul(&probe)?.sum())
        };
        worst = worst.max(fd_max_rel_err(&[x, off], &f, FD_EPS_SAMPLING)?);
    }
    Ok(report("grid_sample", worst))
}

fn check_correlation(seed: u64) -> Result<CheckReport> {
    let mut r = rng_for_name(seed, "gradcheck.correlation");
    let shape = Shape::new(1, 4, 5, 5);
    let f1 = uniform(&mut r, shape, -1.0, 1.0).tracked();
    let f2 = uniform(&mut r, shape, -1.0, 1.0).tracked();
    let probe = probe_for(&mut r, Shape::new(1, 25, 5, 5));
    let f = move |inp: &[Tensor]| -> Result<Tensor> {
        Ok(correlation(&inp[0], &inp[1], 2)?.tensor().mul(&probe)?.sum())
    };
    Ok(report("correlation", fd_max_rel_err(&[f1, f2], &f, FD_EPS)?))
}

fn check_auto_correlation(seed: u64) -> Result<CheckReport> {
    let mut r = rng_for_name(seed, "gradcheck.auto_correlation");
    let shape = Shape::new(1, 4, 5, 5);
    let f1 = uniform(&mut r, shape, -1.0, 1.0).tracked();
    let probe = probe_for(&mut r, Shape::new(1, 9, 5, 5));
    let f = move |inp: &[Tensor]| -> Result<Tensor> {
        Ok(auto_correlation(&inp[0], 1)?.tensor().mul(&probe)?.sum())
    };
    Ok(report("auto_correlation", fd_max_rel_err(&[f1], &f, FD_EPS)?))
}

fn check_modulate(seed: u64) -> Result<CheckReport> {
    let mut r = rng_for_name(seed, "gradcheck.modulate");
    let shape = Shape::new(1, 9, 4, 4);
    let c = uniform(&mut r, shape, -1.0, 1.0).tracked();
    let alpha = uniform(&mut r, shape, 0.2, 1.8).tracked();
    let beta = uniform(&mut r, shape, -0.5, 0.5).tracked();
    let probe = probe_for(&mut r, shape);
    let f = move |inp: &[Tensor]| -> Result<Tensor> {
        let volume = CostVolume::from_tensor(inp[0].clone(), 1)?;
        let mt = ModulationTensors {
            alpha: inp[1].clone(),
            beta: inp[2].clone(),
        };
        Ok(modulate(&volume, &mt)?.tensor().mul(&probe)?.sum())
    };
    Ok(report("modulate", fd_max_rel_err(&[c, alpha, beta], &f, FD_EPS)?))
}

fn check_deform_flow(seed: u64) -> Result<CheckReport> {
    let mut r = rng_for_name(seed, "gradcheck.deform_flow");
    let shape = Shape::new(1, 2, 6, 6);
    let u = uniform(&mut r, shape, -2.0, 2.0).tracked();
    let d = interior_offsets(&mut r, 1, 6, 6).tracked();
    let probe = probe_for(&mut r, shape);
    let f = move |inp: &[Tensor]| -> Result<Tensor> {
        let u = FlowField::new(inp[0].clone())?;
        let d = DisplacementField::new(inp[1].clone())?;
        Ok(deform_flow(&u, &d)?.tensor().mul(&probe)?.sum())
    };
    Ok(report("deform_flow", fd_max_rel_err(&[u, d], &f, FD_EPS_SAMPLING)?))
}

/// Tiny end-to-end model used by the loss check.
fn tiny_model() -> (ModelConfig, TrainConfig) {
    let cfg = ModelConfig {
        num_levels: 3,
        finest_decode_level: 2,
        radius_per_level: vec![1, 1, 1],
        // The constant-confidence variant: the detached confidence input
        // would otherwise register as a (deliberate) gradient gap.
        variant: Variant::CmfdMinus,
        weight_sharing: false,
        encoder_widths: vec![3, 4, 4],
        decoder_widths: vec![4],
        generator_widths: vec![3],
        leaky_slope: 0.1,
        skip_coarsest_modules: false,
        skip_finest_modules: false,
    };
    let tc = TrainConfig {
        level_loss_weights: vec![1.0, 1.0, 1.0],
        conf_loss_weight: 0.1,
        image_height: 8,
        image_width: 8,
        max_displacement: 2.0,
        ..TrainConfig::default()
    };
    (cfg, tc)
}

/// Weight values for the loss check. The residual heads initialize to
/// zero, which would leave the trunk without gradients; every blob gets a
/// small random value instead so the check exercises all paths. Flow and
/// displacement head biases get fixed fractional values so every warp
/// samples mid-cell: bilinear interpolation is non-differentiable at
/// integer offsets and central differences would straddle those kinks.
fn loss_check_weights(cfg: &ModelConfig, seed: u64) -> Result<Vec<(String, Tensor)>> {
    let weights = init_weights(cfg, seed)?;
    let mut out = Vec::new();
    for (name, tensor) in weights.iter() {
        let mut r = rng_for_name(seed ^ 0x5eed, name);
        let live = if name.ends_with("flow_head.bias") {
            Tensor::from_vec(tensor.shape(), vec![0.41, -0.33])?
        } else if name.starts_with("fd.") && name.ends_with("out.bias") {
            Tensor::from_vec(tensor.shape(), vec![0.31, -0.27])?
        } else if tensor.data().iter().all(|&v| v == 0.0) {
            uniform(&mut r, tensor.shape(), -0.1, 0.1)
        } else {
            tensor.detach()
        };
        out.push((name.clone(), live));
    }
    Ok(out)
}

/// Directional-derivative check of the full loss: central differences
/// along random +/-1 directions over the blobs selected by `track`,
/// compared with the corresponding gradient-vector products.
///
/// Per-element differences are not a valid oracle for a deep 32-bit
/// composition: gradients of order 1e-5 vanish below the forward rounding
/// noise and a weight step can push a warp across a bilinear-interpolation
/// kink. A directional probe aggregates the whole gradient into a quantity
/// far above the noise floor while individual kink crossings stay
/// negligible relative to it.
fn loss_fd_directional(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    seed: u64,
    track: impl Fn(&str) -> bool,
    directions: usize,
    eps: f32,
) -> Result<f32> {
    let all = loss_check_weights(cfg, seed)?;
    let tracked: Vec<(String, Tensor, bool)> = all
        .into_iter()
        .map(|(name, t)| {
            let probe = track(&name);
            (name, t.tracked(), probe)
        })
        .collect();
    let sample = synth_sample(seed, tc.image_height, tc.image_width, tc.max_displacement, false);

    let eval = |shift: Option<(&[Vec<f32>], f32)>| -> Result<f32> {
        let mut w = Weights::new(Default::default());
        for (i, (name, tensor, probed)) in tracked.iter().enumerate() {
            let t = match shift {
                Some((dirs, delta)) if *probed => {
                    let mut d = tensor.data().to_vec();
                    for (v, dv) in d.iter_mut().zip(&dirs[i]) {
                        *v += delta * dv;
                    }
                    Tensor::from_vec(tensor.shape(), d)?
                }
                _ => tensor.clone(),
            };
            w.insert(name.clone(), t);
        }
        let out = forward(&sample.i1, &sample.i2, cfg, &w)?;
        Ok(loss(&out, &sample.u_gt, tc)?.total.item())
    };

    // Analytic gradients in one reverse pass.
    {
        let mut w = Weights::new(Default::default());
        for (name, tensor, _) in &tracked {
            w.insert(name.clone(), tensor.clone());
        }
        let out = forward(&sample.i1, &sample.i2, cfg, &w)?;
        loss(&out, &sample.u_gt, tc)?.total.backward()?;
    }

    let mut r = rng_for_name(seed, "gradcheck.loss.directions");
    let mut max_rel = 0.0f32;
    for _ in 0..directions {
        let dirs: Vec<Vec<f32>> = tracked
            .iter()
            .map(|(_, t, probed)| {
                (0..t.shape().numel())
                    .map(|_| {
                        if *probed {
                            if r.random_range(0.0..1.0f32) < 0.5 {
                                -1.0
                            } else {
                                1.0
                            }
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let mut analytic = 0.0f64;
        for (i, (_, tensor, probed)) in tracked.iter().enumerate() {
            if !*probed {
                continue;
            }
            if let Some(g) = tensor.grad() {
                for (gv, dv) in g.iter().zip(&dirs[i]) {
                    analytic += (*gv as f64) * (*dv as f64);
                }
            }
        }
        let fd = (eval(Some((&dirs, eps)))? - eval(Some((&dirs, -eps)))?) / (2.0 * eps);
        let rel = (analytic as f32 - fd).abs() / f32::max(1e-6, fd.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn check_loss(seed: u64) -> Result<CheckReport> {
    let (cfg, mut tc) = tiny_model();
    // Two sub-checks. The training gradient intentionally differs from the
    // full derivative in two places: the confidence input to the module
    // generators is detached, and the exp(-EPE^2) confidence target is a
    // constant. Finite differences measure the full derivative, so the
    // flow-path check drops the confidence term (and uses the
    // constant-confidence variant), while the confidence branch is checked
    // separately over the head weights, which the targets do not depend on.
    tc.conf_loss_weight = 0.0;
    let flow_path = loss_fd_directional(&cfg, &tc, seed, |_| true, 24, 2e-4)?;

    tc.conf_loss_weight = 0.1;
    let conf_branch =
        loss_fd_directional(&cfg, &tc, seed ^ 1, |name| name.contains(".conf_head"), 24, 1e-2)?;

    Ok(report("loss", flow_path.max(conf_branch)))
}

/// Runs the full suite: one report per differentiable operation.
pub fn run_all(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_conv2d(seed)?,
        check_unary(seed, "leaky_relu", 0.2, 1.5, FD_EPS, |x| x.leaky_relu(0.1))?,
        check_unary(seed, "sigmoid", -3.0, 3.0, FD_EPS_SMOOTH, |x| x.sigmoid())?,
        check_upsample2x(seed)?,
        check_grid_sample(seed)?,
        check_correlation(seed)?,
        check_auto_correlation(seed)?,
        check_modulate(seed)?,
        check_deform_flow(seed)?,
        check_loss(seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    // The full suite runs in the acceptance tests; here, spot-check the
    // cheap ops so unit runs stay fast.
    #[test]
    fn elementary_ops_pass() {
        for rep in [
            check_unary(3, "leaky_relu", 0.2, 1.5, FD_EPS, |x| x.leaky_relu(0.1)).unwrap(),
            check_unary(3, "sigmoid", -3.0, 3.0, FD_EPS_SMOOTH, |x| x.sigmoid()).unwrap(),
            check_upsample2x(3).unwrap(),
            check_modulate(3).unwrap(),
        ] {
            assert!(rep.passed, "{}: {}", rep.op, rep.max_rel_err);
        }
    }

    #[test]
    fn sampling_ops_pass() {
        for rep in [
            check_grid_sample(5).unwrap(),
            check_deform_flow(5).unwrap(),
        ] {
            assert!(rep.passed, "{}: {}", rep.op, rep.max_rel_err);
        }
    }

    #[test]
    fn conv_and_correlation_pass() {
        for rep in [
            check_conv2d(7).unwrap(),
            check_correlation(7).unwrap(),
            check_auto_correlation(7).unwrap(),
        ] {
            assert!(rep.passed, "{}: {}", rep.op, rep.max_rel_err);
        }
    }
}
