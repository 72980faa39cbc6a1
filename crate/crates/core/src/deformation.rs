//! Flow-field deformation: decodes a displacement field from an
//! auto-correlation cost volume under confidence guidance, then meta-warps
//! the flow field so inaccurate vectors are replaced by accurate ones from
//! nearby positions.

use crate::conv::ConvStack;
use crate::cost_volume::CostVolume;
use crate::error::{Error, Result};
use crate::modulation::ConfidenceMap;
use crate::tensor::Tensor;
use crate::warp::{grid_sample, Padding};

/// Dense per-pixel optical flow, two channels `(u_x, u_y)` in pixels at
/// this field's own resolution.
#[derive(Clone)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().c != 2 {
            return Err(Error::AxisMismatch {
                context: "flow field",
                axis: "channels",
                expected: 2,
                got: tensor.shape().c,
            });
        }
        Ok(FlowField(tensor))
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(crate::shape::Shape::new(n, 2, h, w)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn detach(&self) -> Self {
        FlowField(self.0.detach())
    }
}

/// Where each flow vector should be fetched from, relative to its own
/// position. Unlike a flow field it does not represent correspondence
/// across images; two channels `(dx, dy)`.
#[derive(Clone)]
pub struct DisplacementField(Tensor);

impl DisplacementField {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().c != 2 {
            return Err(Error::AxisMismatch {
                context: "displacement field",
                axis: "channels",
                expected: 2,
                got: tensor.shape().c,
            });
        }
        Ok(DisplacementField(tensor))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Runs the displacement generator on the auto-correlation volume and the
/// confidence map, concatenated along channels. The final layer emits the
/// two displacement channels; a zero-initialized final layer yields the
/// zero displacement (no deformation).
pub fn generate_displacement(
    ca: &CostVolume,
    m: &ConfidenceMap,
    generator: &ConvStack,
) -> Result<DisplacementField> {
    let cs = ca.tensor().shape();
    let ms = m.tensor().shape();
    if !cs.same_spatial(&ms) {
        return Err(Error::AxisMismatch {
            context: "generate_displacement",
            axis: "confidence extents",
            expected: cs.n * cs.plane(),
            got: ms.n * ms.plane(),
        });
    }
    let input = Tensor::concat_channels(&[ca.tensor(), m.tensor()])?;
    let out = generator.apply(&input)?;
    DisplacementField::new(out)
}

/// Meta-warps the flow field: `u_d(x) = u(x + d(x))`, sampled bilinearly
/// with border padding so flow is never invented outside the field.
/// Differentiable with respect to both the flow and the displacement.
pub fn deform_flow(u: &FlowField, d: &DisplacementField) -> Result<FlowField> {
    let warped = grid_sample(u.tensor(), d.tensor(), Padding::Border)?;
    FlowField::new(warped)
}
