//! Toy-scale supervised training: synthetic flow pairs with exact ground
//! truth, the multiscale flow loss, the confidence loss, and a two-rate
//! adaptive-moment optimizer loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::deformation::FlowField;
use crate::error::{Error, Result};
use crate::evaluate;
use crate::modulation::ConfidenceMap;
use crate::network::{self, forward, init_weights, ForwardOutput, ModelConfig, Weights};
use crate::rng::{index_seed, rng_from};
use crate::shape::Shape;
use crate::tensor::Tensor;
use crate::warp::{grid_sample, Padding};

const HOLDOUT_SALT: u64 = 0x484f_4c44;
const TRAIN_SALT: u64 = 0x5452_4149;

/// Optimization hyperparameters. The newly introduced modules (CM/FD
/// generators and the confidence heads) train at `lr_modules`; the rest of
/// the network uses the reduced `lr_backbone`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_modules: f32,
    pub lr_backbone: f32,
    /// Indexed by pyramid level minus one; entries for undecoded levels are
    /// ignored.
    pub level_loss_weights: Vec<f32>,
    pub conf_loss_weight: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub max_displacement: f32,
    pub holdout_size: usize,
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 1,
            lr_modules: 2e-3,
            lr_backbone: 1e-3,
            level_loss_weights: vec![0.0, 0.005, 0.02, 0.08, 0.32],
            conf_loss_weight: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            image_height: 64,
            image_width: 64,
            max_displacement: 8.0,
            holdout_size: 8,
            eval_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_modules < 0.0 || self.lr_backbone < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.level_loss_weights.len() != model.num_levels {
            return Err(Error::Config(format!(
                "level_loss_weights must have one entry per level ({} expected, {} given)",
                model.num_levels,
                self.level_loss_weights.len()
            )));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.holdout_size == 0 {
            return Err(Error::Config("holdout_size must be positive".into()));
        }
        let div = model.divisor();
        if self.image_height % div != 0 || self.image_width % div != 0 {
            return Err(Error::Config(format!(
                "training image extents must be divisible by {div}"
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let join = |v: &[f32]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut s = String::new();
        s.push_str(&format!("adam_beta1={}\n", self.adam_beta1));
        s.push_str(&format!("adam_beta2={}\n", self.adam_beta2));
        s.push_str(&format!("adam_eps={}\n", self.adam_eps));
        s.push_str(&format!("batch_size={}\n", self.batch_size));
        s.push_str(&format!("conf_loss_weight={}\n", self.conf_loss_weight));
        s.push_str(&format!("eval_interval={}\n", self.eval_interval));
        s.push_str(&format!("holdout_size={}\n", self.holdout_size));
        s.push_str(&format!("image_height={}\n", self.image_height));
        s.push_str(&format!("image_width={}\n", self.image_width));
        s.push_str(&format!("level_loss_weights={}\n", join(&self.level_loss_weights)));
        s.push_str(&format!("lr_backbone={}\n", self.lr_backbone));
        s.push_str(&format!("lr_modules={}\n", self.lr_modules));
        s.push_str(&format!("max_displacement={}\n", self.max_displacement));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("steps={}\n", self.steps));
        s
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config(format!("'{key}' expects {what}, got '{v}'"));
        match key {
            "steps" => self.steps = v.parse().map_err(|_| bad("an integer"))?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| bad("an integer"))?,
            "lr_modules" => self.lr_modules = v.parse().map_err(|_| bad("a float"))?,
            "lr_backbone" => self.lr_backbone = v.parse().map_err(|_| bad("a float"))?,
            "level_loss_weights" => {
                self.level_loss_weights = v
                    .split(',')
                    .map(|p| p.trim().parse::<f32>().map_err(|_| bad("floats")))
                    .collect::<Result<_>>()?
            }
            "conf_loss_weight" => self.conf_loss_weight = v.parse().map_err(|_| bad("a float"))?,
            "adam_beta1" => self.adam_beta1 = v.parse().map_err(|_| bad("a float"))?,
            "adam_beta2" => self.adam_beta2 = v.parse().map_err(|_| bad("a float"))?,
            "adam_eps" => self.adam_eps = v.parse().map_err(|_| bad("a float"))?,
            "seed" => self.seed = v.parse().map_err(|_| bad("an integer"))?,
            "image_height" => self.image_height = v.parse().map_err(|_| bad("an integer"))?,
            "image_width" => self.image_width = v.parse().map_err(|_| bad("an integer"))?,
            "max_displacement" => {
                self.max_displacement = v.parse().map_err(|_| bad("a float"))?
            }
            "holdout_size" => self.holdout_size = v.parse().map_err(|_| bad("an integer"))?,
            "eval_interval" => self.eval_interval = v.parse().map_err(|_| bad("an integer"))?,
            other => return Err(Error::Config(format!("unknown training config key '{other}'"))),
        }
        Ok(())
    }
}

/// One synthetic image pair with exact dense ground truth.
///
/// `i2` is produced by sampling `i1` at `x + u_gt(x)` with border padding,
/// so `i2(x) = i1(x + u_gt(x))` holds to interpolation accuracy on the
/// interior.
pub struct SynthSample {
    pub i1: Tensor,
    pub i2: Tensor,
    pub u_gt: FlowField,
    pub seed: u64,
}

fn resize_bilinear(src: &[f32], h0: usize, w0: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    let sy = h0 as f32 / h as f32;
    let sx = w0 as f32 / w as f32;
    for oy in 0..h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h0 - 1) as f32);
        let y0 = fy as usize;
        let y1 = (y0 + 1).min(h0 - 1);
        let ty = fy - y0 as f32;
        for ox in 0..w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w0 - 1) as f32);
            let x0 = fx as usize;
            let x1 = (x0 + 1).min(w0 - 1);
            let tx = fx - x0 as f32;
            let a = src[y0 * w0 + x0] + tx * (src[y0 * w0 + x1] - src[y0 * w0 + x0]);
            let b = src[y1 * w0 + x0] + tx * (src[y1 * w0 + x1] - src[y1 * w0 + x0]);
            out[oy * w + ox] = a + ty * (b - a);
        }
    }
    out
}

fn quantize_u16(data: &mut [f32]) {
    for v in data.iter_mut() {
        *v = libm::roundf(v.clamp(0.0, 1.0) * 65535.0) / 65535.0;
    }
}

/// Draws one synthetic sample: a multi-scale noise texture for the first
/// image, a capped random global affine plus a smooth low-frequency
/// perturbation for the flow, and the warped second image. With `quantize`
/// the images snap to the 16-bit grid used by the PNG pipeline, so files
/// written to disk reproduce the sample exactly.
pub fn synth_sample(
    seed: u64,
    height: usize,
    width: usize,
    max_displacement: f32,
    quantize: bool,
) -> SynthSample {
    let mut r = rng_from(seed);
    let plane = height * width;

    // Texture: octaves of uniform noise, upsampled and blended. Fine
    // octaves carry most of the energy; matching needs structure at the
    // scale of the displacements being estimated.
    let mut image = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        let chan = &mut image[c * plane..(c + 1) * plane];
        for (scale, amp) in [
            (4usize, 0.20f32),
            (8, 0.25),
            (16, 0.30),
            (32, 0.30),
            (usize::MAX, 0.20),
        ] {
            let s = scale.min(height).min(width);
            let noise: Vec<f32> = (0..s * s).map(|_| r.random_range(0.0..1.0)).collect();
            let up = if s == height && s == width {
                noise
            } else {
                resize_bilinear(&noise, s, s, height, width)
            };
            for (o, v) in chan.iter_mut().zip(&up) {
                *o += amp * v;
            }
        }
        let lo = chan.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = chan.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let span = (hi - lo).max(1e-6);
        for v in chan.iter_mut() {
            *v = (*v - lo) / span;
        }
    }

    // Flow: (M - I)(x - c) + t for a small affine M, plus smooth noise.
    let theta: f32 = r.random_range(-0.08..0.08f32);
    let scale: f32 = 1.0 + r.random_range(-0.06..0.06f32);
    let shear: f32 = r.random_range(-0.04..0.04f32);
    let tx: f32 = r.random_range(-0.55..0.55f32) * max_displacement;
    let ty: f32 = r.random_range(-0.55..0.55f32) * max_displacement;
    let (sin, cos) = (libm::sinf(theta), libm::cosf(theta));
    let m = [
        scale * cos,
        scale * (cos * shear - sin),
        scale * sin,
        scale * (sin * shear + cos),
    ];
    let cx = (width - 1) as f32 * 0.5;
    let cy = (height - 1) as f32 * 0.5;

    let pert_scale = 0.2 * max_displacement;
    let mut pert = Vec::with_capacity(2);
    for _ in 0..2 {
        let noise: Vec<f32> = (0..16).map(|_| r.random_range(-1.0..1.0f32)).collect();
        pert.push(resize_bilinear(&noise, 4, 4, height, width));
    }

    let fshape = Shape::new(1, 2, height, width);
    let mut flow = vec![0.0f32; fshape.numel()];
    for y in 0..height {
        for x in 0..width {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let ux = (m[0] - 1.0) * dx + m[1] * dy + tx + pert_scale * pert[0][y * width + x];
            let uy = m[2] * dx + (m[3] - 1.0) * dy + ty + pert_scale * pert[1][y * width + x];
            flow[fshape.at(0, 0, y, x)] = ux;
            flow[fshape.at(0, 1, y, x)] = uy;
        }
    }
    let mut max_mag = 0.0f32;
    for i in 0..plane {
        let ux = flow[i];
        let uy = flow[plane + i];
        max_mag = max_mag.max(libm::sqrtf(ux * ux + uy * uy));
    }
    if max_mag > max_displacement {
        let s = max_displacement / max_mag;
        for v in flow.iter_mut() {
            *v *= s;
        }
    }

    let mut i1_data = image;
    if quantize {
        quantize_u16(&mut i1_data);
    }
    let i1 = Tensor::from_vec(Shape::new(1, 3, height, width), i1_data).unwrap();
    let u_gt = FlowField::new(Tensor::from_vec(fshape, flow).unwrap()).unwrap();
    let mut i2 = grid_sample(&i1, u_gt.tensor(), Padding::Border)
        .unwrap()
        .data()
        .to_vec();
    if quantize {
        quantize_u16(&mut i2);
    }
    let i2 = Tensor::from_vec(Shape::new(1, 3, height, width), i2).unwrap();
    SynthSample { i1, i2, u_gt, seed }
}

/// Ground-truth label for the confidence head: `exp(-|u_gt - u|^2)` per
/// pixel. The result is a constant (no gradient flows into the target).
pub fn confidence_target(u: &FlowField, u_gt: &FlowField) -> ConfidenceMap {
    let s = u.tensor().shape();
    assert_eq!(s, u_gt.tensor().shape(), "confidence_target shape mismatch");
    let ud = u.tensor().data();
    let gd = u_gt.tensor().data();
    let mut out = vec![0.0f32; s.n * s.plane()];
    let mut idx = 0;
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let ex = gd[s.at(n, 0, y, x)] - ud[s.at(n, 0, y, x)];
                let ey = gd[s.at(n, 1, y, x)] - ud[s.at(n, 1, y, x)];
                out[idx] = libm::expf(-(ex * ex + ey * ey));
                idx += 1;
            }
        }
    }
    ConfidenceMap::new(Tensor::from_vec(Shape::new(s.n, 1, s.h, s.w), out).unwrap()).unwrap()
}

/// Downscales a full-resolution flow field to a pyramid level: each halving
/// averages 2x2 blocks and halves the vector values.
pub fn downscale_flow(u: &FlowField, level: usize) -> FlowField {
    let mut data = u.tensor().data().to_vec();
    let s = u.tensor().shape();
    let (mut h, mut w) = (s.h, s.w);
    for _ in 1..level {
        let (nh, nw) = (h / 2, w / 2);
        let mut next = vec![0.0f32; s.n * 2 * nh * nw];
        for nc in 0..s.n * 2 {
            let src = &data[nc * h * w..(nc + 1) * h * w];
            let dst = &mut next[nc * nh * nw..(nc + 1) * nh * nw];
            for y in 0..nh {
                for x in 0..nw {
                    let sum = src[2 * y * w + 2 * x]
                        + src[2 * y * w + 2 * x + 1]
                        + src[(2 * y + 1) * w + 2 * x]
                        + src[(2 * y + 1) * w + 2 * x + 1];
                    // Average of four, then halve the displacement values.
                    dst[y * nw + x] = sum * 0.125;
                }
            }
        }
        data = next;
        h = nh;
        w = nw;
    }
    FlowField::new(Tensor::from_vec(Shape::new(s.n, 2, h, w), data).unwrap()).unwrap()
}

pub struct LossParts {
    pub total: Tensor,
    pub flow_loss: f32,
    pub conf_loss: f32,
}

/// Multiscale supervision: per decoded level, the mean squared flow error
/// norm against the downscaled ground truth, plus the confidence L2 term
/// against `exp(-EPE^2)` targets.
pub fn loss(out: &ForwardOutput, u_gt: &FlowField, tc: &TrainConfig) -> Result<LossParts> {
    let mut flow_acc: Option<Tensor> = None;
    let mut conf_acc: Option<Tensor> = None;
    for (i, &level) in out.levels.iter().enumerate() {
        let gt_l = downscale_flow(u_gt, level);
        let s = out.flows[i].tensor().shape();
        let pixels = (s.n * s.plane()) as f32;

        let weight = tc.level_loss_weights[level - 1];
        let diff = out.flows[i].tensor().sub(gt_l.tensor())?;
        let term = diff.mul(&diff)?.sum().scale(weight / pixels);
        flow_acc = Some(match flow_acc {
            Some(acc) => acc.add(&term)?,
            None => term,
        });

        let m_gt = confidence_target(&out.flows[i], &gt_l);
        let cdiff = out.confidences[i].tensor().sub(m_gt.tensor())?;
        let cterm = cdiff.mul(&cdiff)?.mean();
        conf_acc = Some(match conf_acc {
            Some(acc) => acc.add(&cterm)?,
            None => cterm,
        });
    }
    let flow = flow_acc.expect("at least one decoded level");
    let conf = conf_acc.unwrap();
    let total = flow.add(&conf.scale(tc.conf_loss_weight))?;
    Ok(LossParts {
        flow_loss: flow.item(),
        conf_loss: conf.item(),
        total,
    })
}

/// Adaptive-moment optimizer with first/second moment bias correction.
/// Weight tensors are immutable, so each step produces a fresh set of
/// tracked leaves.
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every blob; `lr_for` maps a blob name to its group's
    /// learning rate. Missing gradients count as zero.
    pub fn step(&mut self, w: &Weights, lr_for: impl Fn(&str) -> f32) -> Result<Weights> {
        self.t += 1;
        let bc1 = 1.0 - libm::powf(self.beta1, self.t as f32);
        let bc2 = 1.0 - libm::powf(self.beta2, self.t as f32);
        let mut map = BTreeMap::new();
        for (name, tensor) in w.iter() {
            let numel = tensor.shape().numel();
            let grad = tensor.grad().unwrap_or_else(|| vec![0.0; numel]);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; numel]);
            let lr = lr_for(name);
            let mut data = tensor.data().to_vec();
            for i in 0..numel {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (libm::sqrtf(v_hat) + self.eps);
            }
            map.insert(
                name.clone(),
                Tensor::from_vec(tensor.shape(), data)?.tracked(),
            );
        }
        Ok(Weights::new(map))
    }
}

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f32,
    pub flow_loss: f32,
    pub conf_loss: f32,
    pub holdout_aee: Option<f32>,
}

/// Receives metric records as training progresses.
pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord);
}

/// Collects records in memory; handy for tests and library callers.
#[derive(Default)]
pub struct VecSink(pub Vec<MetricsRecord>);

impl MetricsSink for VecSink {
    fn record(&mut self, record: &MetricsRecord) {
        self.0.push(record.clone());
    }
}

/// Held-out synthetic samples for a seed; images quantized to the 16-bit
/// grid so that pairs written to disk reproduce the evaluation exactly.
pub fn holdout_samples(tc: &TrainConfig) -> Vec<SynthSample> {
    (0..tc.holdout_size)
        .map(|i| {
            synth_sample(
                index_seed(tc.seed, HOLDOUT_SALT, i as u64),
                tc.image_height,
                tc.image_width,
                tc.max_displacement,
                true,
            )
        })
        .collect()
}

/// Mean AEE of the model over a set of samples at full resolution.
pub fn holdout_aee(cfg: &ModelConfig, w: &Weights, samples: &[SynthSample]) -> Result<f32> {
    let mut total = 0.0f32;
    for s in samples {
        let out = forward(&s.i1, &s.i2, cfg, w)?;
        total += evaluate::aee(&out.final_flow, &s.u_gt, None)?;
    }
    Ok(total / samples.len() as f32)
}

fn check_finite(step: u64, name: &str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            tensor: name.to_string(),
        })
    }
}

/// Runs the optimizer loop and returns the final checkpoint. Fully
/// deterministic for a given pair of configs: per-sample seeds derive from
/// the run seed and the step index alone.
pub fn train(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<crate::checkpoint::Checkpoint> {
    cfg.validate()?;
    tc.validate(cfg)?;
    let mut w = init_weights(cfg, tc.seed)?;
    let holdout = holdout_samples(tc);
    let initial_aee = holdout_aee(cfg, &w, &holdout)?;
    let mut adam = Adam::new(tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
    let lr_for = |name: &str| {
        if network::is_new_module_param(name) {
            tc.lr_modules
        } else {
            tc.lr_backbone
        }
    };

    if tc.steps == 0 {
        sink.record(&MetricsRecord {
            step: 0,
            loss: 0.0,
            flow_loss: 0.0,
            conf_loss: 0.0,
            holdout_aee: Some(initial_aee),
        });
    }

    for step in 0..tc.steps {
        let mut i1s = Vec::with_capacity(tc.batch_size);
        let mut i2s = Vec::with_capacity(tc.batch_size);
        let mut gts = Vec::with_capacity(tc.batch_size);
        for b in 0..tc.batch_size {
            let s = synth_sample(
                index_seed(tc.seed, TRAIN_SALT, step * tc.batch_size as u64 + b as u64),
                tc.image_height,
                tc.image_width,
                tc.max_displacement,
                false,
            );
            i1s.push(s.i1);
            i2s.push(s.i2);
            gts.push(s.u_gt.into_tensor());
        }
        let i1 = Tensor::stack_batch(&i1s.iter().collect::<Vec<_>>())?;
        let i2 = Tensor::stack_batch(&i2s.iter().collect::<Vec<_>>())?;
        let u_gt = FlowField::new(Tensor::stack_batch(&gts.iter().collect::<Vec<_>>())?)?;

        let out = forward(&i1, &i2, cfg, &w)?;
        for (i, &level) in out.levels.iter().enumerate() {
            check_finite(step, &format!("flow_l{level}"), out.flows[i].tensor())?;
        }
        let parts = loss(&out, &u_gt, tc)?;
        check_finite(step, "loss", &parts.total)?;

        if step == 0 {
            sink.record(&MetricsRecord {
                step: 0,
                loss: parts.total.item(),
                flow_loss: parts.flow_loss,
                conf_loss: parts.conf_loss,
                holdout_aee: Some(initial_aee),
            });
        }

        parts.total.backward()?;
        w = adam.step(&w, lr_for)?;
        for (name, tensor) in w.iter() {
            check_finite(step, name, tensor)?;
        }

        let done = step + 1;
        if done % tc.eval_interval == 0 || done == tc.steps {
            let aee = holdout_aee(cfg, &w, &holdout)?;
            sink.record(&MetricsRecord {
                step: done,
                loss: parts.total.item(),
                flow_loss: parts.flow_loss,
                conf_loss: parts.conf_loss,
                holdout_aee: Some(aee),
            });
        }
    }

    Ok(crate::checkpoint::Checkpoint::from_weights(
        cfg, &w, tc.steps, tc.seed,
    ))
}

/// The ablation ladder: the no-module baseline, both modules without
/// confidence, and both modules with confidence.
pub fn ablation_variants() -> [network::Variant; 5] {
    use network::Variant::*;
    [No, CmMinus, CmfdMinus, Cm, Cmfd]
}
