//! Differentiable building blocks: convolution layers, inverted-residual
//! blocks, coordinate attention, the dual-attention merge and the
//! encoder–decoder backbone shared by every sub-network.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, Resample2d};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// 2-D convolution with optional bias, Kaiming-initialized.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let cin_g = cin / groups;
        let weight = store.add(
            format!("{name}.weight"),
            init.kaiming([cout, cin_g, kernel, kernel], cin_g * kernel * kernel),
        );
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1])));
        Conv2d { weight, bias, geom: ConvGeom::same(kernel, stride, groups) }
    }

    pub fn forward<T: Float>(&self, tape: &Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.geom)
    }
}

/// MobileNetV2-style block: 1×1 expansion, depthwise 3×3, linear 1×1
/// projection, with an identity shortcut when shapes allow.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: Option<Conv2d>,
    pub depthwise: Conv2d,
    pub project: Conv2d,
    residual: bool,
}

impl InvertedResidual {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        expansion: usize,
    ) -> Self {
        let hidden = cin * expansion;
        let expand =
            (expansion != 1).then(|| Conv2d::new(store, init, &format!("{name}.expand"), cin, hidden, 1, 1, 1));
        let depthwise = Conv2d::new(store, init, &format!("{name}.dw"), hidden, hidden, 3, stride, hidden);
        let project = Conv2d::new(store, init, &format!("{name}.project"), hidden, cout, 1, 1, 1);
        InvertedResidual { expand, depthwise, project, residual: stride == 1 && cin == cout }
    }

    pub fn forward<T: Float>(&self, tape: &Tape<'_, T>, x: Var) -> Var {
        let mut h = x;
        if let Some(e) = &self.expand {
            h = tape.relu6(e.forward(tape, h));
        }
        h = tape.relu6(self.depthwise.forward(tape, h));
        h = self.project.forward(tape, h);
        if self.residual {
            tape.add(x, h)
        } else {
            h
        }
    }
}

/// Reduction ratio of the coordinate-attention bottleneck.
pub const ATTENTION_REDUCTION: usize = 8;
/// Smallest bottleneck width of coordinate attention.
pub const ATTENTION_MIN_MID: usize = 8;

/// Coordinate attention: direction-aware pooled gates along height and width.
#[derive(Clone, Debug)]
pub struct CoordinateAttention {
    pub reduce: Conv2d,
    pub gate_h: Conv2d,
    pub gate_w: Conv2d,
}

impl CoordinateAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, channels: usize) -> Self {
        let mid = (channels / ATTENTION_REDUCTION).max(ATTENTION_MIN_MID);
        CoordinateAttention {
            reduce: Conv2d::new(store, init, &format!("{name}.reduce"), channels, mid, 1, 1, 1),
            gate_h: Conv2d::new(store, init, &format!("{name}.gate_h"), mid, channels, 1, 1, 1),
            gate_w: Conv2d::new(store, init, &format!("{name}.gate_w"), mid, channels, 1, 1, 1),
        }
    }

    pub fn forward<T: Float>(&self, tape: &Tape<'_, T>, x: Var) -> Var {
        // pooling along width yields [N,C,H,1]; along height yields [N,C,1,W]
        let pooled_h = tape.mean_axis(x, 3);
        let pooled_w = tape.mean_axis(x, 2);
        // the shared reduction is pointwise, so applying it to each pooled
        // branch equals applying it to their spatial concatenation
        let yh = tape.hardswish(self.reduce.forward(tape, pooled_h));
        let yw = tape.hardswish(self.reduce.forward(tape, pooled_w));
        let ah = tape.sigmoid(self.gate_h.forward(tape, yh));
        let aw = tape.sigmoid(self.gate_w.forward(tape, yw));
        let gated = tape.mul(x, ah);
        tape.mul(gated, aw)
    }
}

/// Two independent coordinate-attention modules whose outputs are summed.
#[derive(Clone, Debug)]
pub struct DualAttention {
    pub input: CoordinateAttention,
    pub output: CoordinateAttention,
}

impl DualAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, channels: usize) -> Self {
        DualAttention {
            input: CoordinateAttention::new(store, init, &format!("{name}.input"), channels),
            output: CoordinateAttention::new(store, init, &format!("{name}.output"), channels),
        }
    }

    pub fn forward<T: Float>(&self, tape: &Tape<'_, T>, x_in: Var, x_out: Var) -> Result<Var> {
        let (a, b) = (tape.shape(x_in), tape.shape(x_out));
        if a != b {
            return Err(Error::shape(&a, &b));
        }
        let from_in = self.input.forward(tape, x_in);
        let from_out = self.output.forward(tape, x_out);
        Ok(tape.add(from_in, from_out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockType {
    InvertedResidual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadActivation {
    Linear,
    Sigmoid,
}

/// Layout of an encoder–decoder backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub downsample_stages: usize,
    /// Stem width followed by one width per downsampling stage.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub expansion: usize,
    pub block_type: BlockType,
    /// Informational parameter budget; not enforced.
    pub target_params: usize,
}

impl BackboneSpec {
    /// Widths doubling from `base` at every stage.
    pub fn doubling(base: usize, stages: usize, blocks_per_stage: usize) -> Self {
        BackboneSpec {
            downsample_stages: stages,
            stage_widths: (0..=stages).map(|s| base << s).collect(),
            blocks_per_stage,
            expansion: 4,
            block_type: BlockType::InvertedResidual,
            target_params: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample_stages == 0 {
            return Err(Error::Config("backbone needs at least one downsampling stage".into()));
        }
        if self.stage_widths.len() != self.downsample_stages + 1 {
            return Err(Error::Config(format!(
                "expected {} stage widths, got {}",
                self.downsample_stages + 1,
                self.stage_widths.len()
            )));
        }
        if self.stage_widths.contains(&0) || self.blocks_per_stage == 0 || self.expansion == 0 {
            return Err(Error::Config("backbone widths, blocks and expansion must be positive".into()));
        }
        Ok(())
    }

    /// Spatial divisibility required by the input.
    pub fn divisor(&self) -> usize {
        1 << self.downsample_stages
    }
}

/// Encoder of inverted-residual stages; decoder of nearest upsampling,
/// skip concatenation and 3×3 fusion; 1×1 head.
#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    stem: Conv2d,
    stages: Vec<Vec<InvertedResidual>>,
    fuse: Vec<Conv2d>,
    head: Conv2d,
    head_activation: HeadActivation,
}

impl Backbone {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn forward<T: Float>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = tape.shape(x);
        let d = self.spec.divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Dimension(format!("backbone input {h}x{w} is not divisible by {d}")));
        }
        let mut feat = tape.relu6(self.stem.forward(tape, x));
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            skips.push(feat);
            for block in stage {
                feat = block.forward(tape, feat);
            }
        }
        for (fuse, skip) in self.fuse.iter().zip(skips.iter().rev()) {
            let [_, _, sh, sw] = tape.shape(*skip);
            let [_, _, fh, fw] = tape.shape(feat);
            let up = tape.resample(feat, &Resample2d::nearest((fh, fw), (sh, sw)));
            let cat = tape.concat(&[up, *skip]);
            feat = tape.relu6(fuse.forward(tape, cat));
        }
        let out = self.head.forward(tape, feat);
        Ok(match self.head_activation {
            HeadActivation::Linear => out,
            HeadActivation::Sigmoid => tape.sigmoid(out),
        })
    }
}

/// Instantiates a backbone mapping `[in_channels, H, W]` to
/// `[out_channels, H, W]`.
pub fn build_backbone<T: Float>(
    store: &mut ParamStore<T>,
    init: &mut Initializer,
    name: &str,
    spec: &BackboneSpec,
    in_channels: usize,
    out_channels: usize,
    head_activation: HeadActivation,
) -> Result<Backbone> {
    spec.validate()?;
    let widths = &spec.stage_widths;
    let stem = Conv2d::new(store, init, &format!("{name}.stem"), in_channels, widths[0], 3, 1, 1);
    let mut stages = Vec::with_capacity(spec.downsample_stages);
    for s in 1..=spec.downsample_stages {
        let mut blocks = Vec::with_capacity(spec.blocks_per_stage);
        for b in 0..spec.blocks_per_stage {
            let (cin, stride) = if b == 0 { (widths[s - 1], 2) } else { (widths[s], 1) };
            blocks.push(InvertedResidual::new(
                store,
                init,
                &format!("{name}.enc{s}.{b}"),
                cin,
                widths[s],
                stride,
                spec.expansion,
            ));
        }
        stages.push(blocks);
    }
    let fuse = (1..=spec.downsample_stages)
        .rev()
        .map(|s| {
            Conv2d::new(store, init, &format!("{name}.dec{s}"), widths[s] + widths[s - 1], widths[s - 1], 3, 1, 1)
        })
        .collect();
    let head = Conv2d::new(store, init, &format!("{name}.head"), widths[0], out_channels, 1, 1, 1);
    Ok(Backbone { spec: spec.clone(), stem, stages, fuse, head, head_activation })
}
