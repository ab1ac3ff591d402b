//! Laplacian pyramid refinement: a refinement mask modulates each level's
//! high-frequency residual while the low-resolution bokeh image is expanded
//! back to full resolution, then the result is blended with the input.

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::kernels::Resample2d;
use crate::nn::{build_backbone, Backbone, Conv2d, DualAttention, HeadActivation};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::types::{FocusMask, ImageTensor};

/// Negative slope of the fine-tuning blocks.
pub const FINETUNE_SLOPE: f64 = 0.2;

/// conv 3×3 → LeakyReLU → conv 3×3, channel preserving.
#[derive(Clone, Debug)]
pub struct FineTuneBlock {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl FineTuneBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, channels: usize) -> Self {
        FineTuneBlock {
            first: Conv2d::new(store, init, &format!("{name}.conv1"), channels, channels, 3, 1, 1),
            second: Conv2d::new(store, init, &format!("{name}.conv2"), channels, channels, 3, 1, 1),
        }
    }

    pub fn forward<T: Float>(&self, tape: &Tape<'_, T>, x: Var) -> Var {
        let h = tape.leaky_relu(self.first.forward(tape, x), T::lit(FINETUNE_SLOPE));
        self.second.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct Lpr {
    pub levels: usize,
    pub refiner: Option<Backbone>,
    pub attention: Option<DualAttention>,
    /// One block per pyramid level, indexed by level (finest first).
    pub finetune: Vec<FineTuneBlock>,
}

/// Tape handles produced by refinement.
#[derive(Clone, Debug)]
pub struct LprVars {
    pub b_int: Var,
    /// Refinement mask at `h_{L-1}` resolution, when refinement is enabled.
    pub refinement_mask: Option<Var>,
    /// Modulated residuals, finest first.
    pub modulated: Vec<Var>,
}

fn upsample_to<T: Float>(tape: &Tape<'_, T>, x: Var, h: usize, w: usize) -> Var {
    let [_, _, xh, xw] = tape.shape(x);
    if (xh, xw) == (h, w) {
        return x;
    }
    tape.resample(x, &Resample2d::bilinear((xh, xw), (h, w)))
}

impl Lpr {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Initializer, config: &ModelConfig) -> Result<Self> {
        let levels = config.pyramid_levels;
        if !config.use_refinement {
            return Ok(Lpr { levels, refiner: None, attention: None, finetune: Vec::new() });
        }
        // input: upsampled I_L (3) + M_L (1) + B_L (3) + h_{L-1} (3)
        let refiner =
            build_backbone(store, init, "lpr.refiner", &config.refiner_spec(), 10, 3, HeadActivation::Linear)?;
        let attention = config.use_dual_attention.then(|| DualAttention::new(store, init, "lpr.att", 3));
        let finetune = (0..levels).map(|k| FineTuneBlock::new(store, init, &format!("lpr.finetune{k}"), 3)).collect();
        Ok(Lpr { levels, refiner: Some(refiner), attention, finetune })
    }

    /// Produces `B_int` at the finest residual's resolution.
    ///
    /// The running image starts at `b_l` and at every level is expanded with
    /// the pyramid operator and summed with that level's (modulated)
    /// residual, coarse to fine.
    pub fn refine_and_upsample<T: Float>(
        &self,
        tape: &Tape<'_, T>,
        highfreq: &[Var],
        i_l: Var,
        m_l: Var,
        b_l: Var,
    ) -> Result<LprVars> {
        if highfreq.len() != self.levels {
            return Err(Error::Dimension(format!(
                "expected {} pyramid levels, got {}",
                self.levels,
                highfreq.len()
            )));
        }
        let [n, _, lh, lw] = tape.shape(i_l);
        for (k, h) in highfreq.iter().enumerate() {
            let s = tape.shape(*h);
            let want = [n, 3, lh << (self.levels - k), lw << (self.levels - k)];
            if s != want {
                return Err(Error::shape(&want, &s));
            }
        }
        if tape.shape(b_l) != [n, 3, lh, lw] {
            return Err(Error::shape(&[n, 3, lh, lw], &tape.shape(b_l)));
        }
        if tape.shape(m_l) != [n, 1, lh, lw] {
            return Err(Error::shape(&[n, 1, lh, lw], &tape.shape(m_l)));
        }

        let coarsest = self.levels - 1;
        let mut modulated = highfreq.to_vec();
        let mut refinement_mask = None;
        if let Some(refiner) = &self.refiner {
            let [_, _, rh, rw] = tape.shape(highfreq[coarsest]);
            let iu = upsample_to(tape, i_l, rh, rw);
            let mu = upsample_to(tape, m_l, rh, rw);
            let bu = upsample_to(tape, b_l, rh, rw);
            let input = tape.concat(&[iu, mu, bu, highfreq[coarsest]]);
            let raw = refiner.forward(tape, input)?;
            let m_r = match &self.attention {
                Some(att) => att.forward(tape, bu, raw)?,
                None => raw,
            };
            refinement_mask = Some(m_r);
            let mut cur = m_r;
            for k in (0..self.levels).rev() {
                let [_, _, kh, kw] = tape.shape(highfreq[k]);
                cur = upsample_to(tape, cur, kh, kw);
                cur = self.finetune[k].forward(tape, cur);
                modulated[k] = tape.mul(cur, highfreq[k]);
            }
        }

        let mut running = b_l;
        for k in (0..self.levels).rev() {
            let [_, _, rh, rw] = tape.shape(running);
            let up = tape.resample(running, &Resample2d::pyr_expand((rh, rw)));
            running = tape.add(up, modulated[k]);
        }
        Ok(LprVars { b_int: running, refinement_mask, modulated })
    }
}

/// `clamp(m ⊙ i_0 + (1 − m) ⊙ b_int)` with `m` at full resolution.
pub fn blend_on_tape<T: Float>(tape: &Tape<'_, T>, i_0: Var, b_int: Var, m_full: Var) -> Var {
    let keep = tape.mul(m_full, i_0);
    let inv = tape.one_minus(m_full);
    let fill = tape.mul(inv, b_int);
    tape.clamp01(tape.add(keep, fill))
}

/// Final blend of a single image. A mask at a different resolution is
/// bilinearly resized to the image first.
pub fn blend_final(i_0: &ImageTensor, b_int: &Tensor<f32>, m_l: &FocusMask) -> Result<ImageTensor> {
    if b_int.shape() != i_0.shape() {
        return Err(Error::shape(&i_0.shape(), &b_int.shape()));
    }
    let m = m_l.resize_bilinear(i_0.height(), i_0.width());
    let tape = Tape::<f32>::detached();
    let i = tape.constant(i_0.tensor().clone());
    let b = tape.constant(b_int.clone());
    let mv = tape.constant(m.into_tensor());
    let out = blend_on_tape(&tape, i, b, mv);
    let result = tape.to_tensor(out);
    ImageTensor::new(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::decompose_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.gen())).unwrap()
    }

    #[test]
    fn blend_endpoints() {
        let i0 = random_image(8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b_int = Tensor::from_fn([1, 3, 8, 8], |_, _, _, _| rng.gen_range(-0.5f32..1.5));
        let ones = FocusMask::filled(8, 8, 1.0).unwrap();
        assert_eq!(blend_final(&i0, &b_int, &ones).unwrap(), i0);
        let zeros = FocusMask::filled(8, 8, 0.0).unwrap();
        let out = blend_final(&i0, &b_int, &zeros).unwrap();
        assert_eq!(out.tensor(), &b_int.map(|v| v.clamp(0.0, 1.0)));
    }

    #[test]
    fn blend_uniform_quarter_mask() {
        let i0 = ImageTensor::filled(crate::types::ColorSpace::Rgb, 4, 4, 0.8).unwrap();
        let b_int = Tensor::full([1, 3, 4, 4], 0.2f32);
        let m = FocusMask::filled(4, 4, 0.25).unwrap();
        let out = blend_final(&i0, &b_int, &m).unwrap();
        assert!(out.tensor().data().iter().all(|&v| (v - 0.35).abs() < 1e-6));
    }

    #[test]
    fn low_resolution_mask_is_upsampled_before_blending() {
        let i0 = random_image(8, 8, 4);
        let b_int = Tensor::zeros([1, 3, 8, 8]);
        let ones = FocusMask::filled(2, 2, 1.0).unwrap();
        assert_eq!(blend_final(&i0, &b_int, &ones).unwrap(), i0);
        assert!(blend_final(&i0, &Tensor::zeros([1, 3, 4, 8]), &ones).is_err());
    }

    #[test]
    fn raw_residuals_over_identity_bokeh_reconstruct_input() {
        let config = ModelConfig { use_refinement: false, ..ModelConfig::default() };
        let mut store = ParamStore::<f32>::new();
        let lpr = Lpr::new(&mut store, &mut Initializer::new(0), &config).unwrap();
        assert!(store.is_empty());
        let img = random_image(128, 192, 3);
        let pyr = decompose_tensor(img.tensor(), 2).unwrap();
        let tape = Tape::frozen(&store);
        let i_l = tape.constant(pyr.residual.clone());
        let m_l = tape.constant(Tensor::full([1, 1, 32, 48], 0.5));
        let hs: Vec<Var> = pyr.highfreq.iter().map(|h| tape.constant(h.clone())).collect();
        let out = lpr.refine_and_upsample(&tape, &hs, i_l, m_l, i_l).unwrap();
        assert_eq!(tape.shape(out.b_int), [1, 3, 128, 192]);
        assert!(tape.value(out.b_int).max_abs_diff(img.tensor()) <= 1e-5);
    }

    #[test]
    fn level_count_and_resolution_mismatches_are_rejected() {
        let config = ModelConfig::default();
        let mut store = ParamStore::<f32>::new();
        let lpr = Lpr::new(&mut store, &mut Initializer::new(0), &config).unwrap();
        let img = random_image(64, 64, 3);
        let pyr = decompose_tensor(img.tensor(), 2).unwrap();
        let tape = Tape::frozen(&store);
        let i_l = tape.constant(pyr.residual.clone());
        let m_l = tape.constant(Tensor::full([1, 1, 16, 16], 0.5));
        let one: Vec<Var> = vec![tape.constant(pyr.highfreq[0].clone())];
        assert!(lpr.refine_and_upsample(&tape, &one, i_l, m_l, i_l).is_err());
        let swapped: Vec<Var> = pyr.highfreq.iter().rev().map(|h| tape.constant(h.clone())).collect();
        assert!(lpr.refine_and_upsample(&tape, &swapped, i_l, m_l, i_l).is_err());
    }

    #[test]
    fn finetune_block_matches_scalar_oracle() {
        // 1-channel block with hand-set centre taps acts as 1×1 convs
        let mut store = ParamStore::<f64>::new();
        let ft = FineTuneBlock::new(&mut store, &mut Initializer::new(0), "ft", 1);
        let set = |store: &mut ParamStore<f64>, id, centre: f64| {
            let mut k = Tensor::zeros([1, 1, 3, 3]);
            k.data_mut()[4] = centre;
            *store.get_mut(id) = k;
        };
        set(&mut store, ft.first.weight, 0.5);
        *store.get_mut(ft.first.bias.unwrap()) = Tensor::scalar(-0.1);
        set(&mut store, ft.second.weight, -2.0);
        *store.get_mut(ft.second.bias.unwrap()) = Tensor::scalar(0.3);
        let m = [0.4, -0.6, 0.1, 1.0];
        let h = [1.5, -0.5, 2.0, 0.25];
        let tape = Tape::frozen(&store);
        let mv = tape.constant(Tensor::from_vec([1, 1, 2, 2], m.to_vec()));
        let hv = tape.constant(Tensor::from_vec([1, 1, 2, 2], h.to_vec()));
        let out = tape.mul(ft.forward(&tape, mv), hv);
        for i in 0..4 {
            let a = 0.5 * m[i] - 0.1;
            let a = if a > 0.0 { a } else { 0.2 * a };
            let want = (-2.0 * a + 0.3) * h[i];
            assert!((tape.value(out).data()[i] - want).abs() < 1e-12);
        }
    }
}
