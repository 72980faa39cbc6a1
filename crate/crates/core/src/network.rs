//! The coarse-to-fine pyramid network: a shared two-stream feature encoder,
//! per-level feature warping and correlation, optional cost-volume
//! modulation before decoding, a residual flow decoder with a confidence
//! head, and optional flow-field deformation between levels.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::conv::{conv2d, ConvParams, ConvStack};
use crate::cost_volume::{auto_correlation, correlation, CostVolume};
use crate::deformation::{deform_flow, generate_displacement, FlowField};
use crate::error::{Error, Result};
use crate::modulation::{generate_modulation, modulate, ConfidenceMap};
use crate::rng;
use crate::shape::Shape;
use crate::tensor::Tensor;
use crate::warp::{grid_sample, upsample2x, Padding};

/// Which of the network augmentations are active.
///
/// `NO` decodes straight from the cost volume, `FF` feed-forwards encoder
/// features, the upsampled flow and previous decoder features alongside it,
/// `CM` modulates the volume first, and `CMFD` additionally deforms the
/// upsampled flow between levels. The `-` variants keep the module weights
/// but feed them a constant confidence.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Variant {
    No,
    Ff,
    Cm,
    CmMinus,
    Cmfd,
    CmfdMinus,
}

pub const VARIANT_NAMES: [&str; 6] = ["NO", "FF", "CM", "CM-", "CMFD", "CMFD-"];

/// Fixed gain applied to cost volumes where they enter a decoder or
/// generator. Normalized dot-product costs of freshly initialized features
/// sit around 0.03, two orders below the other activations; without this
/// the weights reading the volume learn far more slowly than every other
/// path.
const COST_INPUT_SCALE: f32 = 32.0;

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "NO" => Ok(Variant::No),
            "FF" => Ok(Variant::Ff),
            "CM" => Ok(Variant::Cm),
            "CM-" => Ok(Variant::CmMinus),
            "CMFD" => Ok(Variant::Cmfd),
            "CMFD-" => Ok(Variant::CmfdMinus),
            other => Err(Error::Config(format!(
                "unknown variant '{other}'; valid variants: {}",
                VARIANT_NAMES.join(", ")
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::No => "NO",
            Variant::Ff => "FF",
            Variant::Cm => "CM",
            Variant::CmMinus => "CM-",
            Variant::Cmfd => "CMFD",
            Variant::CmfdMinus => "CMFD-",
        }
    }

    pub fn uses_modulation(&self) -> bool {
        matches!(
            self,
            Variant::Cm | Variant::CmMinus | Variant::Cmfd | Variant::CmfdMinus
        )
    }

    pub fn uses_deformation(&self) -> bool {
        matches!(self, Variant::Cmfd | Variant::CmfdMinus)
    }

    /// Whether the predicted confidence map feeds the module generators.
    pub fn uses_confidence(&self) -> bool {
        matches!(self, Variant::Cm | Variant::Cmfd)
    }
}

/// Network hyperparameters. Level 1 is the input resolution; features exist
/// at levels `1..=num_levels` and flow is decoded from the coarsest level
/// down to `finest_decode_level`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_levels: usize,
    pub finest_decode_level: usize,
    pub radius_per_level: Vec<usize>,
    pub variant: Variant,
    pub weight_sharing: bool,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub generator_widths: Vec<usize>,
    pub leaky_slope: f32,
    pub skip_coarsest_modules: bool,
    pub skip_finest_modules: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_levels: 5,
            finest_decode_level: 2,
            radius_per_level: vec![3; 5],
            variant: Variant::Cmfd,
            weight_sharing: false,
            encoder_widths: vec![16, 32, 64, 96, 128],
            decoder_widths: vec![128, 96, 64],
            generator_widths: vec![128, 96, 64],
            leaky_slope: 0.1,
            skip_coarsest_modules: true,
            skip_finest_modules: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset used by the CLI and the training harness: small
    /// widths, radius 2, decoding down to level 3 of a 5-level pyramid.
    pub fn toy() -> Self {
        ModelConfig {
            num_levels: 5,
            finest_decode_level: 3,
            radius_per_level: vec![2; 5],
            variant: Variant::Cmfd,
            weight_sharing: false,
            encoder_widths: vec![8, 12, 16, 24, 32],
            decoder_widths: vec![48, 32, 24],
            generator_widths: vec![24, 16, 12],
            leaky_slope: 0.1,
            skip_coarsest_modules: true,
            skip_finest_modules: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels < 2 {
            return Err(Error::Config("num_levels must be at least 2".into()));
        }
        if self.finest_decode_level < 2 || self.finest_decode_level > self.num_levels {
            return Err(Error::Config(format!(
                "finest_decode_level must lie in 2..={}",
                self.num_levels
            )));
        }
        for (list, name) in [
            (self.radius_per_level.len(), "radius_per_level"),
            (self.encoder_widths.len(), "encoder_widths"),
        ] {
            if list != self.num_levels {
                return Err(Error::Config(format!(
                    "{name} must have one entry per level ({} expected, {list} given)",
                    self.num_levels
                )));
            }
        }
        if self.decoder_widths.is_empty() || self.generator_widths.is_empty() {
            return Err(Error::Config("decoder/generator widths must be non-empty".into()));
        }
        if self.encoder_widths.iter().any(|&w| w == 0)
            || self.decoder_widths.iter().any(|&w| w == 0)
            || self.generator_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::Config("widths must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in (0, 1)".into()));
        }
        if self.weight_sharing {
            let levels = self.decoded_levels();
            let r0 = self.radius_at(levels[0]);
            if levels.iter().any(|&k| self.radius_at(k) != r0) {
                return Err(Error::Config(
                    "weight sharing requires a uniform radius over decoded levels".into(),
                ));
            }
            let needs_uniform_features =
                self.variant.uses_modulation() || self.variant == Variant::Ff;
            if needs_uniform_features {
                let w0 = self.encoder_widths[levels[0] - 1];
                if levels.iter().any(|&k| self.encoder_widths[k - 1] != w0) {
                    return Err(Error::Config(
                        "weight sharing with feature-fed layers requires uniform encoder widths over decoded levels"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn radius_at(&self, level: usize) -> usize {
        self.radius_per_level[level - 1]
    }

    pub fn volume_channels(&self, level: usize) -> usize {
        let side = 2 * self.radius_at(level) + 1;
        side * side
    }

    /// Decoded pyramid levels, coarsest first.
    pub fn decoded_levels(&self) -> Vec<usize> {
        (self.finest_decode_level..=self.num_levels).rev().collect()
    }

    /// Whether the CM/FD modules run at this level.
    pub fn module_at(&self, level: usize) -> bool {
        let levels = self.decoded_levels();
        let coarsest = levels[0];
        let finest = *levels.last().unwrap();
        if self.skip_coarsest_modules && level == coarsest {
            return false;
        }
        if self.skip_finest_modules && level == finest {
            return false;
        }
        levels.contains(&level)
    }

    /// Input extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.num_levels - 1)
    }

    // ── Canonical key-value text (checkpoint header / config files) ──

    pub fn to_kv(&self) -> String {
        let join = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut s = String::new();
        s.push_str(&format!("decoder_widths={}\n", join(&self.decoder_widths)));
        s.push_str(&format!("encoder_widths={}\n", join(&self.encoder_widths)));
        s.push_str(&format!("finest_decode_level={}\n", self.finest_decode_level));
        s.push_str(&format!("generator_widths={}\n", join(&self.generator_widths)));
        s.push_str(&format!("leaky_slope={}\n", self.leaky_slope));
        s.push_str(&format!("num_levels={}\n", self.num_levels));
        s.push_str(&format!("radius_per_level={}\n", join(&self.radius_per_level)));
        s.push_str(&format!("skip_coarsest_modules={}\n", self.skip_coarsest_modules));
        s.push_str(&format!("skip_finest_modules={}\n", self.skip_finest_modules));
        s.push_str(&format!("variant={}\n", self.variant.as_str()));
        s.push_str(&format!("weight_sharing={}\n", self.weight_sharing));
        s
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("'{key}' expects an integer, got '{v}'")))
        };
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            v.split(',').map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("'{key}' expects integers, got '{p}'")))
            }).collect()
        };
        let parse_bool = |v: &str| match v.trim() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!(
                "'{key}' expects true or false, got '{other}'"
            ))),
        };
        match key {
            "num_levels" => self.num_levels = parse_usize(value)?,
            "finest_decode_level" => self.finest_decode_level = parse_usize(value)?,
            "radius_per_level" => self.radius_per_level = parse_list(value)?,
            "variant" => self.variant = Variant::parse(value.trim())?,
            "weight_sharing" => self.weight_sharing = parse_bool(value)?,
            "encoder_widths" => self.encoder_widths = parse_list(value)?,
            "decoder_widths" => self.decoder_widths = parse_list(value)?,
            "generator_widths" => self.generator_widths = parse_list(value)?,
            "leaky_slope" => {
                self.leaky_slope = value.trim().parse::<f32>().map_err(|_| {
                    Error::Config(format!("'leaky_slope' expects a float, got '{value}'"))
                })?
            }
            "skip_coarsest_modules" => self.skip_coarsest_modules = parse_bool(value)?,
            "skip_finest_modules" => self.skip_finest_modules = parse_bool(value)?,
            other => {
                return Err(Error::Config(format!("unknown model config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("expected key=value, got '{line}'"))
            })?;
            cfg.apply_kv(key.trim(), value)?;
        }
        Ok(cfg)
    }
}

/// One convolution layer of the plan: its blob name and geometry.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub zero_init: bool,
}

impl LayerSpec {
    fn new(name: String, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        LayerSpec {
            name,
            c_in,
            c_out,
            k,
            stride,
            padding: k / 2,
            zero_init: false,
        }
    }

    fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn kernel_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in, self.k, self.k)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.c_out, 1, 1)
    }

    pub fn param_count(&self) -> usize {
        self.kernel_shape().numel() + self.c_out
    }
}

fn decoder_prefix(cfg: &ModelConfig, level: usize) -> String {
    if cfg.weight_sharing {
        "decoder.shared".to_string()
    } else {
        format!("decoder.l{level}")
    }
}

fn module_prefix(cfg: &ModelConfig, which: &str, level: usize) -> String {
    if cfg.weight_sharing {
        format!("{which}.shared")
    } else {
        format!("{which}.l{level}")
    }
}

/// Kernel size of a module generator's final layer: 5x5 at pyramid levels
/// 4 and 3, 3x3 elsewhere. Shared generators must use one size, so sharing
/// pins it to 3x3.
fn generator_out_kernel(cfg: &ModelConfig, level: usize) -> usize {
    if !cfg.weight_sharing && (level == 3 || level == 4) {
        5
    } else {
        3
    }
}

/// Decoder trunk input channels at a level.
fn decoder_in_channels(cfg: &ModelConfig, level: usize) -> usize {
    let volume = cfg.volume_channels(level);
    match cfg.variant {
        Variant::Ff => {
            volume + cfg.encoder_widths[level - 1] + 2 + *cfg.decoder_widths.last().unwrap()
        }
        _ => volume,
    }
}

/// Enumerates every weight blob the configuration requires. This is the
/// single source of truth shared by initialization, checkpoint loading,
/// the forward pass and parameter counting.
pub fn layer_specs(cfg: &ModelConfig) -> Result<Vec<LayerSpec>> {
    cfg.validate()?;
    let mut specs: Vec<LayerSpec> = Vec::new();
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    let mut push = |spec: LayerSpec, specs: &mut Vec<LayerSpec>| {
        if seen.insert(spec.name.clone(), ()).is_none() {
            specs.push(spec);
        }
    };

    // Encoder: level 1 keeps resolution, deeper levels halve it.
    push(
        LayerSpec::new("encoder.l1.conv0".into(), 3, cfg.encoder_widths[0], 3, 1),
        &mut specs,
    );
    for level in 2..=cfg.num_levels {
        let c_in = cfg.encoder_widths[level - 2];
        let c_out = cfg.encoder_widths[level - 1];
        push(
            LayerSpec::new(format!("encoder.l{level}.conv0"), c_in, c_out, 3, 2),
            &mut specs,
        );
        push(
            LayerSpec::new(format!("encoder.l{level}.conv1"), c_out, c_out, 3, 1),
            &mut specs,
        );
    }

    for &level in &cfg.decoded_levels() {
        let prefix = decoder_prefix(cfg, level);
        let mut c_in = decoder_in_channels(cfg, level);
        for (i, &width) in cfg.decoder_widths.iter().enumerate() {
            push(
                LayerSpec::new(format!("{prefix}.conv{i}"), c_in, width, 3, 1),
                &mut specs,
            );
            c_in = width;
        }
        push(
            LayerSpec::new(format!("{prefix}.flow_head"), c_in, 2, 3, 1).zero_init(),
            &mut specs,
        );
        push(
            LayerSpec::new(format!("{prefix}.conf_head"), c_in, 1, 3, 1).zero_init(),
            &mut specs,
        );

        if cfg.module_at(level) {
            let volume = cfg.volume_channels(level);
            if cfg.variant.uses_modulation() {
                let prefix = module_prefix(cfg, "cm", level);
                let mut c_in = volume + cfg.encoder_widths[level - 1] + 1;
                for (i, &width) in cfg.generator_widths.iter().enumerate() {
                    push(
                        LayerSpec::new(format!("{prefix}.conv{i}"), c_in, width, 3, 1),
                        &mut specs,
                    );
                    c_in = width;
                }
                let k = generator_out_kernel(cfg, level);
                push(
                    LayerSpec::new(format!("{prefix}.out"), c_in, 2 * volume, k, 1).zero_init(),
                    &mut specs,
                );
            }
            if cfg.variant.uses_deformation() {
                let prefix = module_prefix(cfg, "fd", level);
                let mut c_in = volume + 1;
                for (i, &width) in cfg.generator_widths.iter().enumerate() {
                    push(
                        LayerSpec::new(format!("{prefix}.conv{i}"), c_in, width, 3, 1),
                        &mut specs,
                    );
                    c_in = width;
                }
                let k = generator_out_kernel(cfg, level);
                push(
                    LayerSpec::new(format!("{prefix}.out"), c_in, 2, k, 1).zero_init(),
                    &mut specs,
                );
            }
        }
    }
    Ok(specs)
}

/// Named weight blobs. Kernel tensors live under `<layer>.weight`, biases
/// under `<layer>.bias`; all are gradient-tracked leaves.
#[derive(Clone, Debug)]
pub struct Weights {
    map: BTreeMap<String, Tensor>,
}

impl Weights {
    pub fn new(map: BTreeMap<String, Tensor>) -> Self {
        Weights { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::MissingBlob(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) {
        self.map.insert(name, tensor);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Exact number of learned scalars; shared blobs count once.
    pub fn param_count(&self) -> usize {
        self.map.values().map(|t| t.shape().numel()).sum()
    }

    fn conv(&self, spec_map: &BTreeMap<String, LayerSpec>, name: &str) -> Result<ConvParams> {
        let spec = spec_map
            .get(name)
            .ok_or_else(|| Error::MissingBlob(name.to_string()))?;
        let kernel = self.get(&format!("{name}.weight"))?.clone();
        let bias = self.get(&format!("{name}.bias"))?.clone();
        ConvParams::new(kernel, bias, spec.stride, spec.padding)
    }
}

/// Parameters whose names match the newly introduced modules (the CM and FD
/// generators and the confidence heads) train at the higher learning rate.
pub fn is_new_module_param(name: &str) -> bool {
    name.starts_with("cm.") || name.starts_with("fd.") || name.contains(".conf_head")
}

/// Freshly initialized weights: kernels draw from a zero-mean uniform
/// distribution with a fan-in bound, biases start at zero, and residual
/// output layers start at exactly zero so every module grafts as the
/// identity. Each blob has its own named random stream, so the same seed
/// yields identical shared blobs across variants.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<Weights> {
    let specs = layer_specs(cfg)?;
    let mut map = BTreeMap::new();
    for spec in &specs {
        let kshape = spec.kernel_shape();
        let kernel = if spec.zero_init {
            Tensor::zeros(kshape)
        } else {
            let fan_in = (spec.c_in * spec.k * spec.k) as f32;
            let bound = libm::sqrtf(6.0 / fan_in);
            let mut r = rng::rng_for_name(seed, &spec.name);
            let data: Vec<f32> = (0..kshape.numel())
                .map(|_| r.random_range(-bound..bound))
                .collect();
            Tensor::from_vec(kshape, data)?
        };
        map.insert(format!("{}.weight", spec.name), kernel.tracked());
        map.insert(
            format!("{}.bias", spec.name),
            Tensor::zeros(spec.bias_shape()).tracked(),
        );
    }
    Ok(Weights::new(map))
}

/// Resolved plan: layer geometry by name, for building conv stacks.
pub struct Plan {
    specs: BTreeMap<String, LayerSpec>,
}

pub fn plan(cfg: &ModelConfig) -> Result<Plan> {
    let specs = layer_specs(cfg)?;
    Ok(Plan {
        specs: specs.into_iter().map(|s| (s.name.clone(), s)).collect(),
    })
}

impl Plan {
    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.specs.values()
    }

    fn stack(&self, cfg: &ModelConfig, w: &Weights, names: &[String]) -> Result<ConvStack> {
        let layers = names
            .iter()
            .map(|n| w.conv(&self.specs, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConvStack::new(layers, cfg.leaky_slope))
    }

    fn generator_stack(
        &self,
        cfg: &ModelConfig,
        w: &Weights,
        which: &str,
        level: usize,
    ) -> Result<ConvStack> {
        let prefix = module_prefix(cfg, which, level);
        let mut names: Vec<String> = (0..cfg.generator_widths.len())
            .map(|i| format!("{prefix}.conv{i}"))
            .collect();
        names.push(format!("{prefix}.out"));
        self.stack(cfg, w, &names)
    }

    fn decoder_trunk(&self, cfg: &ModelConfig, w: &Weights, level: usize) -> Result<ConvStack> {
        let prefix = decoder_prefix(cfg, level);
        let names: Vec<String> = (0..cfg.decoder_widths.len())
            .map(|i| format!("{prefix}.conv{i}"))
            .collect();
        self.stack(cfg, w, &names)
    }
}

/// Runs the shared encoder over both images, returning one feature pyramid
/// per image; index `k - 1` holds level `k` at extents `H / 2^(k-1)`.
pub fn encode(
    i1: &Tensor,
    i2: &Tensor,
    cfg: &ModelConfig,
    w: &Weights,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let s = i1.shape();
    if i2.shape() != s {
        return Err(Error::AxisMismatch {
            context: "encode",
            axis: "shape",
            expected: s.numel(),
            got: i2.shape().numel(),
        });
    }
    if s.c != 3 {
        return Err(Error::AxisMismatch {
            context: "encode",
            axis: "channels",
            expected: 3,
            got: s.c,
        });
    }
    let div = cfg.divisor();
    if s.h % div != 0 || s.w % div != 0 {
        return Err(Error::Config(format!(
            "input extents {}x{} must be divisible by {div}; pad the images first (the CLI reflect-pads automatically)",
            s.h, s.w
        )));
    }
    let plan = plan(cfg)?;
    let encode_one = |img: &Tensor| -> Result<Vec<Tensor>> {
        let mut pyramid = Vec::with_capacity(cfg.num_levels);
        let mut cur = conv2d(img, &w.conv(&plan.specs, "encoder.l1.conv0")?)?
            .leaky_relu(cfg.leaky_slope);
        pyramid.push(cur.clone());
        for level in 2..=cfg.num_levels {
            cur = conv2d(&cur, &w.conv(&plan.specs, &format!("encoder.l{level}.conv0"))?)?
                .leaky_relu(cfg.leaky_slope);
            cur = conv2d(&cur, &w.conv(&plan.specs, &format!("encoder.l{level}.conv1"))?)?
                .leaky_relu(cfg.leaky_slope);
            pyramid.push(cur.clone());
        }
        Ok(pyramid)
    };
    Ok((encode_one(i1)?, encode_one(i2)?))
}

/// Output of one pyramid level's decoder.
pub struct LevelDecode {
    pub flow: FlowField,
    pub confidence: ConfidenceMap,
    /// Activated decoder trunk features (feed-forwarded by the FF variant).
    pub features: Tensor,
}

/// Decodes one pyramid level: warps the second feature map by the incoming
/// flow, correlates, optionally modulates the volume, and emits a residual
/// flow plus a confidence map.
///
/// `flow_init` must already be upsampled, value-scaled and (for CMFD)
/// deformed by the caller. The warp samples `f2` with the negated flow so
/// that a correct flow aligns the warped `f2` with `f1` under the sampling
/// convention `i2(x) = i1(x + u(x))`; the cost-volume peak then sits at
/// zero displacement once the estimate converges.
#[allow(clippy::too_many_arguments)]
pub fn decode_level(
    f1: &Tensor,
    f2: &Tensor,
    flow_init: &FlowField,
    conf_init: &ConfidenceMap,
    prev_features: Option<&Tensor>,
    level: usize,
    cfg: &ModelConfig,
    w: &Weights,
) -> Result<LevelDecode> {
    let plan = plan(cfg)?;
    decode_level_planned(f1, f2, flow_init, conf_init, prev_features, level, cfg, w, &plan)
}

#[allow(clippy::too_many_arguments)]
fn decode_level_planned(
    f1: &Tensor,
    f2: &Tensor,
    flow_init: &FlowField,
    conf_init: &ConfidenceMap,
    prev_features: Option<&Tensor>,
    level: usize,
    cfg: &ModelConfig,
    w: &Weights,
    plan: &Plan,
) -> Result<LevelDecode> {
    let radius = cfg.radius_at(level);
    let f2_warped = grid_sample(f2, &flow_init.tensor().scale(-1.0), Padding::Zeros)?;
    let mut volume = correlation(f1, &f2_warped, radius)?;

    if cfg.variant.uses_modulation() && cfg.module_at(level) {
        let s = f1.shape();
        let m_in = if cfg.variant.uses_confidence() {
            conf_init.detach()
        } else {
            ConfidenceMap::constant(s.n, s.h, s.w, 0.5)
        };
        let generator = plan.generator_stack(cfg, w, "cm", level)?;
        let conditioned = CostVolume::from_tensor(
            volume.tensor().scale(COST_INPUT_SCALE),
            volume.radius(),
        )?;
        let mt = generate_modulation(&conditioned, f1, &m_in, &generator)?;
        volume = modulate(&volume, &mt)?;
    }

    let costs = volume.tensor().scale(COST_INPUT_SCALE);
    let trunk_in = match cfg.variant {
        Variant::Ff => {
            let s = f1.shape();
            let feat_w = *cfg.decoder_widths.last().unwrap();
            let prev = match prev_features {
                Some(f) => f.clone(),
                None => Tensor::zeros(Shape::new(s.n, feat_w, s.h, s.w)),
            };
            Tensor::concat_channels(&[&costs, f1, flow_init.tensor(), &prev])?
        }
        _ => costs,
    };

    let trunk = plan.decoder_trunk(cfg, w, level)?.apply_trunk(&trunk_in)?;
    let prefix = decoder_prefix(cfg, level);
    let residual = conv2d(&trunk, &w.conv(&plan.specs, &format!("{prefix}.flow_head"))?)?;
    let flow = FlowField::new(flow_init.tensor().add(&residual)?)?;
    let logit = conv2d(&trunk, &w.conv(&plan.specs, &format!("{prefix}.conf_head"))?)?;
    let confidence = ConfidenceMap::new(logit.sigmoid())?;
    Ok(LevelDecode {
        flow,
        confidence,
        features: trunk,
    })
}

/// Everything the pyramid produces for one image pair.
pub struct ForwardOutput {
    /// Pyramid level of each entry below, coarsest first.
    pub levels: Vec<usize>,
    pub flows: Vec<FlowField>,
    pub confidences: Vec<ConfidenceMap>,
    /// Finest decoded flow upsampled (and value-scaled) to input resolution.
    pub final_flow: FlowField,
}

/// Full coarse-to-fine inference. The coarsest level starts from zero flow;
/// every finer level receives the upsampled, doubled flow — deformed by FD
/// first when the variant enables it — as its initialization.
pub fn forward(i1: &Tensor, i2: &Tensor, cfg: &ModelConfig, w: &Weights) -> Result<ForwardOutput> {
    let plan = plan(cfg)?;
    let (pyr1, pyr2) = encode(i1, i2, cfg, w)?;
    let levels = cfg.decoded_levels();
    let n = i1.shape().n;

    let mut flows: Vec<FlowField> = Vec::with_capacity(levels.len());
    let mut confidences: Vec<ConfidenceMap> = Vec::with_capacity(levels.len());
    let mut prev_features: Option<Tensor> = None;

    for &level in &levels {
        let f1 = &pyr1[level - 1];
        let f2 = &pyr2[level - 1];
        let s = f1.shape();

        let (flow_init, conf_init) = match flows.last() {
            None => (
                FlowField::zeros(n, s.h, s.w),
                ConfidenceMap::constant(n, s.h, s.w, 0.5),
            ),
            Some(prev_flow) => {
                let up = FlowField::new(upsample2x(prev_flow.tensor()).scale(2.0))?;
                let conf_up =
                    ConfidenceMap::new(upsample2x(confidences.last().unwrap().tensor()))?;
                let init = if cfg.variant.uses_deformation() && cfg.module_at(level) {
                    let ca = auto_correlation(f1, cfg.radius_at(level))?;
                    let ca = CostVolume::from_tensor(
                        ca.tensor().scale(COST_INPUT_SCALE),
                        ca.radius(),
                    )?;
                    let m_in = if cfg.variant.uses_confidence() {
                        conf_up.detach()
                    } else {
                        ConfidenceMap::constant(s.n, s.h, s.w, 0.5)
                    };
                    let generator = plan.generator_stack(cfg, w, "fd", level)?;
                    let d = generate_displacement(&ca, &m_in, &generator)?;
                    deform_flow(&up, &d)?
                } else {
                    up
                };
                (init, conf_up)
            }
        };

        let prev_up = prev_features.as_ref().map(upsample2x);
        let decoded = decode_level_planned(
            f1,
            f2,
            &flow_init,
            &conf_init,
            prev_up.as_ref(),
            level,
            cfg,
            w,
            &plan,
        )?;
        prev_features = Some(decoded.features);
        flows.push(decoded.flow);
        confidences.push(decoded.confidence);
    }

    let mut final_flow = flows.last().unwrap().tensor().clone();
    for _ in 1..cfg.finest_decode_level {
        final_flow = upsample2x(&final_flow).scale(2.0);
    }
    Ok(ForwardOutput {
        levels,
        flows,
        confidences,
        final_flow: FlowField::new(final_flow)?,
    })
}
