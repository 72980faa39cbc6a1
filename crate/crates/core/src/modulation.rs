//! Cost-volume modulation: a per-pixel, per-channel affine amendment of the
//! cost volume, generated adaptively from the volume itself, the first
//! image's features and a confidence map.

use crate::conv::ConvStack;
use crate::cost_volume::CostVolume;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine modulation parameters, each shaped like the cost volume they amend.
#[derive(Clone)]
pub struct ModulationTensors {
    pub alpha: Tensor,
    pub beta: Tensor,
}

/// Per-pixel probability in `[0, 1]` that the co-located flow vector is
/// accurate. One channel; the producing head applies a sigmoid.
#[derive(Clone)]
pub struct ConfidenceMap(Tensor);

impl ConfidenceMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().c != 1 {
            return Err(Error::AxisMismatch {
                context: "confidence map",
                axis: "channels",
                expected: 1,
                got: tensor.shape().c,
            });
        }
        Ok(ConfidenceMap(tensor))
    }

    /// A constant map, used where no preceding decoder exists or when the
    /// confidence input is ablated away.
    pub fn constant(n: usize, h: usize, w: usize, value: f32) -> Self {
        ConfidenceMap(Tensor::full(crate::shape::Shape::new(n, 1, h, w), value))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn detach(&self) -> Self {
        ConfidenceMap(self.0.detach())
    }
}

/// Runs the modulation parameter generator on `(C, F1, M)` concatenated
/// along channels. The final layer emits `2 * (2D+1)^2` channels, split
/// into a residual for alpha and the raw beta; alpha is `1 + residual`, so
/// an all-zero final layer yields the identity modulation.
pub fn generate_modulation(
    c: &CostVolume,
    f1: &Tensor,
    m: &ConfidenceMap,
    generator: &ConvStack,
) -> Result<ModulationTensors> {
    let cs = c.tensor().shape();
    for (other, what) in [(f1.shape(), "features"), (m.tensor().shape(), "confidence")] {
        if !cs.same_spatial(&other) {
            return Err(Error::AxisMismatch {
                context: "generate_modulation",
                axis: if what == "features" {
                    "feature extents"
                } else {
                    "confidence extents"
                },
                expected: cs.n * cs.plane(),
                got: other.n * other.plane(),
            });
        }
    }
    let input = Tensor::concat_channels(&[c.tensor(), f1, m.tensor()])?;
    let out = generator.apply(&input)?;
    let k = cs.c;
    if out.shape().c != 2 * k {
        return Err(Error::AxisMismatch {
            context: "modulation generator output",
            axis: "channels",
            expected: 2 * k,
            got: out.shape().c,
        });
    }
    let alpha = out.slice_channels(0, k)?.add_scalar(1.0);
    let beta = out.slice_channels(k, 2 * k)?;
    Ok(ModulationTensors { alpha, beta })
}

/// Amends the cost volume elementwise: `c_m = alpha (*) c (+) beta`. The
/// output keeps the input's dimensions and search radius.
pub fn modulate(c: &CostVolume, mt: &ModulationTensors) -> Result<CostVolume> {
    let amended = c.tensor().mul(&mt.alpha)?.add(&mt.beta)?;
    CostVolume::from_tensor(amended, c.radius())
}
