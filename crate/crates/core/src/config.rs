//! Model and training configuration with a flat `key=value` text format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::BackboneSpec;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_perceptual: f64,
    pub w_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_l1: 10.0, w_perceptual: 2.0, w_ssim: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub image_height: usize,
    pub image_width: usize,
    pub seed: u64,
    /// Steps between evaluations and checkpoints; 0 disables them.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 2e-4,
            optimizer: OptimizerKind::Adam,
            image_height: 128,
            image_width: 192,
            seed: 0,
            eval_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub pyramid_levels: usize,
    /// Stem width of the G1/G2 backbones; stages double it.
    pub base_width: usize,
    pub blocks_per_stage: usize,
    pub backbone_stages: usize,
    pub refiner_width: usize,
    pub refiner_stages: usize,
    pub use_g1: bool,
    pub use_g2: bool,
    pub use_refinement: bool,
    pub use_dual_attention: bool,
    pub loss_weights: LossWeights,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    /// Desk-scale configuration that trains on a CPU.
    fn default() -> Self {
        ModelConfig {
            pyramid_levels: 2,
            base_width: 12,
            blocks_per_stage: 1,
            backbone_stages: 3,
            refiner_width: 8,
            refiner_stages: 2,
            use_g1: true,
            use_g2: true,
            use_refinement: true,
            use_dual_attention: true,
            loss_weights: LossWeights::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Ablation variants of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    WithoutRefinement,
    WithoutG2,
    WithoutAttention,
    WithoutG1,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WithoutRefinement,
        Variant::WithoutG2,
        Variant::WithoutAttention,
        Variant::WithoutG1,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "G1 + G2 + LPR",
            Variant::WithoutRefinement => "G1 + G2 + LPR (w/o ref.)",
            Variant::WithoutG2 => "G1, no G2 + LPR",
            Variant::WithoutAttention => "G1 + G2 + LPR (w/o att.)",
            Variant::WithoutG1 => "no G1, G2 + LPR",
        }
    }
}

impl ModelConfig {
    /// Full-size configuration sized after the published model.
    pub fn paper_scale() -> Self {
        ModelConfig {
            base_width: 40,
            blocks_per_stage: 2,
            refiner_width: 32,
            train: TrainConfig {
                epochs: 500,
                batch_size: 8,
                image_height: 1024,
                image_width: 1536,
                ..TrainConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.use_g1 = true;
        self.use_g2 = true;
        self.use_refinement = true;
        self.use_dual_attention = true;
        match variant {
            Variant::Full => {}
            Variant::WithoutRefinement => self.use_refinement = false,
            Variant::WithoutG2 => self.use_g2 = false,
            Variant::WithoutAttention => self.use_dual_attention = false,
            Variant::WithoutG1 => self.use_g1 = false,
        }
        self
    }

    pub fn generator_spec(&self) -> BackboneSpec {
        BackboneSpec::doubling(self.base_width, self.backbone_stages, self.blocks_per_stage)
    }

    pub fn refiner_spec(&self) -> BackboneSpec {
        BackboneSpec::doubling(self.refiner_width, self.refiner_stages, 1)
    }

    /// Input height and width must be multiples of this.
    pub fn divisor(&self) -> usize {
        let low = self.pyramid_levels + self.backbone_stages;
        let refine = self.pyramid_levels.saturating_sub(1) + self.refiner_stages;
        1 << low.max(refine)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid_levels must be at least 1".into()));
        }
        if self.base_width == 0 || self.refiner_width == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("widths and block counts must be positive".into()));
        }
        if self.backbone_stages == 0 || self.refiner_stages == 0 {
            return Err(Error::Config("backbones need at least one stage".into()));
        }
        let w = &self.loss_weights;
        if [w.w_l1, w.w_perceptual, w.w_ssim].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.image_height == 0 || t.image_width == 0 {
            return Err(Error::Config("training sizes must be positive".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let d = self.divisor();
        if t.image_height % d != 0 || t.image_width % d != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by {d}",
                t.image_height, t.image_width
            )));
        }
        Ok(())
    }

    /// True when parameters trained under `other` load into `self`.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.pyramid_levels == other.pyramid_levels
            && self.base_width == other.base_width
            && self.blocks_per_stage == other.blocks_per_stage
            && self.backbone_stages == other.backbone_stages
            && self.refiner_width == other.refiner_width
            && self.refiner_stages == other.refiner_stages
            && self.use_g1 == other.use_g1
            && self.use_g2 == other.use_g2
            && self.use_refinement == other.use_refinement
            && self.use_dual_attention == other.use_dual_attention
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.loss_weights;
        let t = &self.train;
        let _ = writeln!(s, "pyramid_levels={}", self.pyramid_levels);
        let _ = writeln!(s, "base_width={}", self.base_width);
        let _ = writeln!(s, "blocks_per_stage={}", self.blocks_per_stage);
        let _ = writeln!(s, "backbone_stages={}", self.backbone_stages);
        let _ = writeln!(s, "refiner_width={}", self.refiner_width);
        let _ = writeln!(s, "refiner_stages={}", self.refiner_stages);
        let _ = writeln!(s, "use_g1={}", self.use_g1);
        let _ = writeln!(s, "use_g2={}", self.use_g2);
        let _ = writeln!(s, "use_refinement={}", self.use_refinement);
        let _ = writeln!(s, "use_dual_attention={}", self.use_dual_attention);
        let _ = writeln!(s, "w_l1={}", w.w_l1);
        let _ = writeln!(s, "w_perceptual={}", w.w_perceptual);
        let _ = writeln!(s, "w_ssim={}", w.w_ssim);
        let _ = writeln!(s, "epochs={}", t.epochs);
        let _ = writeln!(s, "batch_size={}", t.batch_size);
        let _ = writeln!(s, "learning_rate={}", t.learning_rate);
        let _ = writeln!(s, "optimizer=adam");
        let _ = writeln!(s, "image_height={}", t.image_height);
        let _ = writeln!(s, "image_width={}", t.image_width);
        let _ = writeln!(s, "seed={}", t.seed);
        let _ = writeln!(s, "eval_every={}", t.eval_every);
        s
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_over(ModelConfig::default(), text)
    }

    pub fn from_text_over(base: ModelConfig, text: &str) -> Result<Self> {
        let mut c = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            c.set(key.trim(), value.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Sets one field by key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
        }
        match key {
            "pyramid_levels" => self.pyramid_levels = parse(key, value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "blocks_per_stage" => self.blocks_per_stage = parse(key, value)?,
            "backbone_stages" => self.backbone_stages = parse(key, value)?,
            "refiner_width" => self.refiner_width = parse(key, value)?,
            "refiner_stages" => self.refiner_stages = parse(key, value)?,
            "use_g1" => self.use_g1 = parse(key, value)?,
            "use_g2" => self.use_g2 = parse(key, value)?,
            "use_refinement" => self.use_refinement = parse(key, value)?,
            "use_dual_attention" => self.use_dual_attention = parse(key, value)?,
            "w_l1" => self.loss_weights.w_l1 = parse(key, value)?,
            "w_perceptual" => self.loss_weights.w_perceptual = parse(key, value)?,
            "w_ssim" => self.loss_weights.w_ssim = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "optimizer" => {
                if !value.eq_ignore_ascii_case("adam") {
                    return Err(Error::Config(format!("unsupported optimizer {value:?}")));
                }
                self.train.optimizer = OptimizerKind::Adam;
            }
            "image_height" => self.train.image_height = parse(key, value)?,
            "image_width" => self.train.image_width = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "eval_every" => self.train.eval_every = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_every_field() {
        let mut c = ModelConfig::paper_scale().with_variant(Variant::WithoutAttention);
        c.loss_weights.w_perceptual = 0.5;
        c.train.learning_rate = 1.25e-4;
        c.train.seed = 99;
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn defaults_follow_published_training_setup() {
        let c = ModelConfig::default();
        assert_eq!(c.loss_weights, LossWeights { w_l1: 10.0, w_perceptual: 2.0, w_ssim: 1.0 });
        assert_eq!(c.train.learning_rate, 2e-4);
        assert_eq!(c.pyramid_levels, 2);
        let p = ModelConfig::paper_scale();
        assert_eq!(p.train.batch_size, 8);
        assert_eq!((p.train.image_height, p.train.image_width), (1024, 1536));
        assert_eq!(p.train.epochs, 500);
        assert!(c.validate().is_ok() && p.validate().is_ok());
    }

    #[test]
    fn bad_text_is_rejected() {
        assert!(ModelConfig::from_text("nonsense").is_err());
        assert!(ModelConfig::from_text("bogus_key=1").is_err());
        assert!(ModelConfig::from_text("use_g1=maybe").is_err());
        assert!(ModelConfig::from_text("optimizer=sgd").is_err());
        let c = ModelConfig::from_text("# comment\n\nbatch_size = 2\n").unwrap();
        assert_eq!(c.train.batch_size, 2);
    }

    #[test]
    fn validation_catches_bad_sizes() {
        let mut c = ModelConfig::default();
        c.train.image_height = 100;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.pyramid_levels = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.loss_weights.w_ssim = -1.0;
        assert!(c.validate().is_err());
    }
}
