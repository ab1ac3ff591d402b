//! The full pipeline: pyramid decomposition, MGBG at the residual's
//! resolution, LPR back to full resolution, and the masked blend.

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::Resample2d;
use crate::lpr::{blend_on_tape, Lpr, LprVars};
use crate::mgbg::{Mgbg, MgbgOutput, MgbgVars};
use crate::params::{Initializer, ParamStore};
use crate::pyramid::decompose_tensor;
use crate::tensor::{Float, Tensor};
use crate::types::{FocusMask, ImageTensor};

/// Parameter-name prefixes of the checkpointed sub-network groups.
pub const GROUP_G1: &str = "g1.";
pub const GROUP_G2: &str = "g2.";
pub const GROUP_REFINER: &str = "lpr.refiner.";
pub const GROUP_FINETUNE: &str = "lpr.finetune";
pub const ATTENTION_MODULES: [&str; 4] = ["g2_att.input.", "g2_att.output.", "lpr.att.input.", "lpr.att.output."];

/// Network structure; parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AmpnNet {
    pub config: ModelConfig,
    pub mgbg: Mgbg,
    pub lpr: Lpr,
}

/// Where the focus mask of a forward pass came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    Predicted,
    External,
}

impl MaskSource {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskSource::Predicted => "g1",
            MaskSource::External => "external",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub i_l: Var,
    /// Mask at `I_L` resolution, as fed to G2.
    pub mask_low: Var,
    /// Mask at `I_0` resolution, as used by the blend.
    pub mask_full: Var,
    pub mgbg: MgbgVars,
    pub lpr: LprVars,
    pub b0: Var,
    pub mask_source: MaskSource,
}

/// Materialized outputs of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: ImageTensor,
    pub mgbg: MgbgOutput,
    pub b_int: Tensor<f32>,
    pub mask_source: MaskSource,
}

impl AmpnNet {
    pub fn new<T: Float>(config: &ModelConfig, store: &mut ParamStore<T>, init: &mut Initializer) -> Result<Self> {
        config.validate()?;
        let mgbg = Mgbg::new(store, init, config)?;
        let lpr = Lpr::new(store, init, config)?;
        Ok(AmpnNet { config: config.clone(), mgbg, lpr })
    }

    /// Checks that an `h × w` input can go through the pipeline.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let d = self.config.divisor();
        if h < crate::types::MIN_PIPELINE_EXTENT || w < crate::types::MIN_PIPELINE_EXTENT || h % d != 0 || w % d != 0 {
            return Err(Error::Dimension(format!("input {h}x{w} is not a positive multiple of {d}")));
        }
        Ok(())
    }

    /// Runs the pipeline on a batch `[N, 3, H, W]`.
    ///
    /// An external mask `[N, 1, h, w]` may be given at either the input's or
    /// the low-frequency residual's resolution; it bypasses G1.
    pub fn forward<T: Float>(
        &self,
        tape: &Tape<'_, T>,
        input: &Tensor<T>,
        external_mask: Option<&Tensor<T>>,
    ) -> Result<ForwardVars> {
        let [n, c, h, w] = input.shape();
        if c != 3 {
            return Err(Error::shape(&[n, 3, h, w], &input.shape()));
        }
        self.check_input_size(h, w)?;
        let levels = self.config.pyramid_levels;
        let pyr = decompose_tensor(input, levels)?;
        let [_, _, lh, lw] = pyr.residual.shape();
        let i0 = tape.constant(input.clone());
        let i_l = tape.constant(pyr.residual);
        let highfreq: Vec<Var> = pyr.highfreq.into_iter().map(|t| tape.constant(t)).collect();

        let (external_low, external_full) = match external_mask {
            None => (None, None),
            Some(m) => {
                let ms = m.shape();
                if ms == [n, 1, h, w] {
                    let full = tape.constant(m.clone());
                    let low = tape.resample(full, &Resample2d::area((h, w), 1 << levels));
                    (Some(low), Some(full))
                } else if ms == [n, 1, lh, lw] {
                    (Some(tape.constant(m.clone())), None)
                } else {
                    return Err(Error::shape(&[n, 1, h, w], &ms));
                }
            }
        };
        let mask_source = if external_low.is_some() { MaskSource::External } else { MaskSource::Predicted };
        let mgbg = self.mgbg.forward(tape, i_l, external_low)?;
        let mask_full = match external_full {
            Some(full) => full,
            None => tape.resample(mgbg.mask, &Resample2d::bilinear((lh, lw), (h, w))),
        };
        let lpr = self.lpr.refine_and_upsample(tape, &highfreq, i_l, mgbg.mask, mgbg.bokeh)?;
        let b0 = blend_on_tape(tape, i0, lpr.b_int, mask_full);
        Ok(ForwardVars { i_l, mask_low: mgbg.mask, mask_full, mgbg, lpr, b0, mask_source })
    }

    /// Runs only G1 on a single image and returns `M_L`.
    pub fn predict_mask(&self, store: &ParamStore<f32>, image: &ImageTensor) -> Result<FocusMask> {
        let rgb = image.to_rgb();
        self.check_input_size(rgb.height(), rgb.width())?;
        let pyr = decompose_tensor(rgb.tensor(), self.config.pyramid_levels)?;
        let tape = Tape::frozen(store);
        let i_l = tape.constant(pyr.residual);
        let m = self.mgbg.predict_mask(&tape, i_l)?;
        FocusMask::new(tape.to_tensor(m))
    }

    /// Frozen forward pass of one image.
    pub fn render(&self, store: &ParamStore<f32>, image: &ImageTensor, mask: Option<&FocusMask>) -> Result<RenderOutput> {
        let rgb = image.to_rgb();
        let tape = Tape::frozen(store);
        let vars = self.forward(&tape, rgb.tensor(), mask.map(|m| m.tensor()))?;
        Ok(RenderOutput {
            image: ImageTensor::new(tape.to_tensor(vars.b0))?,
            mgbg: MgbgOutput {
                mask: FocusMask::new(tape.to_tensor(vars.mask_low))?,
                intermediate: tape.to_tensor(vars.mgbg.intermediate),
                bokeh: tape.to_tensor(vars.mgbg.bokeh),
            },
            b_int: tape.to_tensor(vars.lpr.b_int),
            mask_source: vars.mask_source,
        })
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: AmpnNet,
    pub params: ParamStore<f32>,
}

impl Model {
    /// Fresh model with Kaiming-initialized weights drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = AmpnNet::new(config, &mut params, &mut Initializer::new(seed))?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn render(&self, image: &ImageTensor, mask: Option<&FocusMask>) -> Result<RenderOutput> {
        self.net.render(&self.params, image, mask)
    }

    pub fn predict_mask(&self, image: &ImageTensor) -> Result<FocusMask> {
        self.net.predict_mask(&self.params, image)
    }
}

/// Parameter counts per sub-network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub g1: usize,
    pub g2: usize,
    pub refiner: usize,
    pub finetune: usize,
    pub attention: usize,
    pub total: usize,
}

pub fn param_breakdown<T: Float>(store: &ParamStore<T>) -> ParamBreakdown {
    let attention = ATTENTION_MODULES.iter().map(|p| store.num_params_with_prefix(p)).sum();
    ParamBreakdown {
        g1: store.num_params_with_prefix(GROUP_G1),
        g2: store.num_params_with_prefix(GROUP_G2),
        refiner: store.num_params_with_prefix(GROUP_REFINER),
        finetune: store.num_params_with_prefix(GROUP_FINETUNE),
        attention,
        total: store.num_params(),
    }
}

/// Parameter count of a configuration without keeping the weights.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(Model::new(config, 0)?.num_params())
}
