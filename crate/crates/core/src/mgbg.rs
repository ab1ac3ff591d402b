//! Mask-guided bokeh generation at pyramid-residual resolution.
//!
//! G1 predicts a focus mask from the low-frequency image. G2 takes the image
//! and mask as a 4-channel tensor, produces an intermediate RGB image, and
//! the dual-attention merge of (image, intermediate) yields the low-resolution
//! bokeh image.

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{build_backbone, Backbone, DualAttention, HeadActivation};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::types::FocusMask;

/// Mask-conditioned generator with its dual-attention output merge.
#[derive(Clone, Debug)]
pub struct BokehGenerator {
    pub trunk: Backbone,
    pub attention: DualAttention,
}

#[derive(Clone, Debug)]
pub struct Mgbg {
    pub g1: Option<Backbone>,
    pub g2: Option<BokehGenerator>,
}

/// Tape handles for the three MGBG outputs.
#[derive(Clone, Copy, Debug)]
pub struct MgbgVars {
    pub mask: Var,
    pub intermediate: Var,
    pub bokeh: Var,
}

/// Materialized MGBG outputs for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct MgbgOutput {
    pub mask: FocusMask,
    /// G2 trunk output before attention.
    pub intermediate: Tensor<f32>,
    /// Low-resolution bokeh before clamping.
    pub bokeh: Tensor<f32>,
}

impl Mgbg {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Initializer, config: &ModelConfig) -> Result<Self> {
        let spec = config.generator_spec();
        let g1 = if config.use_g1 {
            Some(build_backbone(store, init, "g1", &spec, 3, 1, HeadActivation::Sigmoid)?)
        } else {
            None
        };
        let g2 = if config.use_g2 {
            let trunk = build_backbone(store, init, "g2", &spec, 4, 3, HeadActivation::Linear)?;
            let attention = DualAttention::new(store, init, "g2_att", 3);
            Some(BokehGenerator { trunk, attention })
        } else {
            None
        };
        Ok(Mgbg { g1, g2 })
    }

    /// Graded focus mask in `[0, 1]`; no thresholding.
    pub fn predict_mask<T: Float>(&self, tape: &Tape<'_, T>, i_l: Var) -> Result<Var> {
        let g1 = self.g1.as_ref().ok_or_else(|| Error::Config("model was built without G1".into()))?;
        g1.forward(tape, i_l)
    }

    pub fn generate_bokeh<T: Float>(&self, tape: &Tape<'_, T>, i_l: Var, m_l: Var) -> Result<MgbgVars> {
        let g2 = self.g2.as_ref().ok_or_else(|| Error::Config("model was built without G2".into()))?;
        let [n, _, h, w] = tape.shape(i_l);
        let ms = tape.shape(m_l);
        if ms != [n, 1, h, w] {
            return Err(Error::shape(&[n, 1, h, w], &ms));
        }
        let cond = tape.concat(&[i_l, m_l]);
        let intermediate = g2.trunk.forward(tape, cond)?;
        let bokeh = g2.attention.forward(tape, i_l, intermediate)?;
        Ok(MgbgVars { mask: m_l, intermediate, bokeh })
    }

    /// Dispatches over the ablation flags. An external mask bypasses G1.
    /// Without G2 the bokeh and intermediate images are `i_l` itself.
    pub fn forward<T: Float>(&self, tape: &Tape<'_, T>, i_l: Var, external_mask: Option<Var>) -> Result<MgbgVars> {
        let mask = match external_mask {
            Some(m) => m,
            None if self.g1.is_some() => self.predict_mask(tape, i_l)?,
            None => return Err(Error::InvalidArgument("no mask available: G1 is disabled and no mask was given".into())),
        };
        if self.g2.is_some() {
            self.generate_bokeh(tape, i_l, mask)
        } else {
            let [n, _, h, w] = tape.shape(i_l);
            let ms = tape.shape(mask);
            if ms != [n, 1, h, w] {
                return Err(Error::shape(&[n, 1, h, w], &ms));
            }
            Ok(MgbgVars { mask, intermediate: i_l, bokeh: i_l })
        }
    }
}
