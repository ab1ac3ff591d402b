//! Request-level rendering shared by the CLI and the HTTP service: size
//! normalization, mask selection and background-strength control.

use crate::error::{Error, Result};
use crate::io::encode_png;
use crate::model::{MaskSource, Model};
use crate::tensor::Tensor;
use crate::types::{FocusMask, ImageTensor};

pub const DEFAULT_FOCUS_THRESHOLD: f32 = 0.8;

/// Keeps mask values `≥ tau` and sets every other value to `background`.
pub fn adjust_mask_strength(mask: &FocusMask, background: f32, tau: f32) -> Result<FocusMask> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("focus threshold {tau} is outside (0, 1]")));
    }
    if !(0.0..1.0).contains(&background) {
        return Err(Error::InvalidArgument(format!("background level {background} is outside [0, 1)")));
    }
    if background >= tau {
        return Err(Error::InvalidArgument(format!(
            "background level {background} must be below the focus threshold {tau}"
        )));
    }
    let t = mask.tensor().map(|m| if m >= tau { m } else { background });
    FocusMask::new(t)
}

/// Closest size whose sides are positive multiples of `divisor`.
pub fn nearest_valid_size(h: usize, w: usize, divisor: usize) -> (usize, usize) {
    let snap = |v: usize| (((v as f64 / divisor as f64).round() as usize).max(1)) * divisor;
    (snap(h), snap(w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderRequest {
    pub image: ImageTensor,
    pub mask: Option<FocusMask>,
    pub background_level: Option<f32>,
    pub focus_threshold: f32,
}

impl RenderRequest {
    pub fn new(image: ImageTensor) -> Self {
        RenderRequest { image, mask: None, background_level: None, focus_threshold: DEFAULT_FOCUS_THRESHOLD }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderResponse {
    pub image: ImageTensor,
    /// Mask as fed to the generator, at the low-frequency resolution.
    pub mask: FocusMask,
    pub mask_source: MaskSource,
    /// Original size when the input had to be resized.
    pub resized_from: Option<(usize, usize)>,
}

pub fn render_request(model: &Model, req: &RenderRequest) -> Result<RenderResponse> {
    let mut image = req.image.to_rgb();
    let (h0, w0) = (image.height(), image.width());
    let (h, w) = nearest_valid_size(h0, w0, model.config().divisor());
    let resized_from = ((h, w) != (h0, w0)).then_some((h0, w0));
    if resized_from.is_some() {
        image = image.resize_bilinear(h, w);
    }
    let low = 1usize << model.config().pyramid_levels;
    let (lh, lw) = (h / low, w / low);

    let mut mask = match &req.mask {
        None => None,
        Some(m) if (m.height(), m.width()) == (h0, w0) => {
            Some(if resized_from.is_some() { m.resize_bilinear(h, w) } else { m.clone() })
        }
        Some(m) if (m.height(), m.width()) == (lh, lw) => Some(m.clone()),
        Some(m) => {
            return Err(Error::shape(&[1, 1, h0, w0], &[1, 1, m.height(), m.width()]))
        }
    };
    let mut source = if mask.is_some() { MaskSource::External } else { MaskSource::Predicted };
    if let Some(b) = req.background_level {
        let base = match mask.take() {
            Some(m) => m,
            None => model.predict_mask(&image)?,
        };
        mask = Some(adjust_mask_strength(&base, b, req.focus_threshold)?);
    }
    let out = model.render(&image, mask.as_ref())?;
    if mask.is_some() && req.mask.is_none() {
        // the mask was G1's own, only re-leveled
        source = MaskSource::Predicted;
    }
    Ok(RenderResponse { image: out.image, mask: out.mgbg.mask, mask_source: source, resized_from })
}

/// Renders and encodes the result as an 8-bit PNG.
pub fn render_png(model: &Model, req: &RenderRequest) -> Result<(Vec<u8>, RenderResponse)> {
    let resp = render_request(model, req)?;
    Ok((encode_png(&resp.image)?, resp))
}

/// Binary mask `[1, 1, H, W]` from thresholding.
pub fn binarize(mask: &FocusMask, threshold: f32) -> FocusMask {
    let t: Tensor<f32> = mask.tensor().map(|v| if v >= threshold { 1.0 } else { 0.0 });
    FocusMask::new(t).expect("binary values are in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_mask_levels() {
        let m = FocusMask::from_fn(2, 2, |y, x| if (y + x) % 2 == 0 { 1.0 } else { 0.0 }).unwrap();
        let out = adjust_mask_strength(&m, 0.3, 0.8).unwrap();
        assert_eq!(out.tensor().data(), &[1.0, 0.3, 0.3, 1.0]);
        assert_eq!(adjust_mask_strength(&out, 0.3, 0.8).unwrap(), out);
    }

    #[test]
    fn uniform_background_is_a_fixed_point() {
        let m = FocusMask::from_fn(3, 3, |y, _| if y == 0 { 0.9 } else { 0.4 }).unwrap();
        assert_eq!(adjust_mask_strength(&m, 0.4, 0.8).unwrap(), m);
    }

    #[test]
    fn invalid_levels_are_rejected() {
        let m = FocusMask::filled(2, 2, 0.5).unwrap();
        assert!(adjust_mask_strength(&m, 0.8, 0.8).is_err());
        assert!(adjust_mask_strength(&m, -0.1, 0.8).is_err());
        assert!(adjust_mask_strength(&m, 0.1, 0.0).is_err());
    }

    #[test]
    fn snapping_to_valid_sizes() {
        assert_eq!(nearest_valid_size(128, 192, 32), (128, 192));
        assert_eq!(nearest_valid_size(100, 10, 32), (96, 32));
        assert_eq!(nearest_valid_size(1, 1, 8), (8, 8));
    }

    #[test]
    fn odd_sized_input_is_resized_and_reported() {
        let model = Model::new(&ModelConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageTensor::new(Tensor::from_fn([1, 3, 70, 90], |_, _, _, _| rng.gen())).unwrap();
        let out = render_request(&model, &RenderRequest::new(img)).unwrap();
        assert_eq!(out.resized_from, Some((70, 90)));
        assert_eq!((out.image.height(), out.image.width()), (64, 96));
        assert_eq!(out.mask_source, MaskSource::Predicted);
    }

    #[test]
    fn wrong_mask_size_is_a_shape_error() {
        let model = Model::new(&ModelConfig::default(), 0).unwrap();
        let img = ImageTensor::filled(crate::types::ColorSpace::Rgb, 64, 64, 0.5).unwrap();
        let mut req = RenderRequest::new(img);
        req.mask = Some(FocusMask::filled(10, 10, 1.0).unwrap());
        assert!(matches!(render_request(&model, &req), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn background_sweep_keeps_in_focus_pixels() {
        let model = Model::new(&ModelConfig::default(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImageTensor::new(Tensor::from_fn([1, 3, 64, 64], |_, _, _, _| rng.gen())).unwrap();
        let mask = FocusMask::from_fn(64, 64, |y, x| if (16..48).contains(&y) && (16..48).contains(&x) { 1.0 } else { 0.0 })
            .unwrap();
        let outs: Vec<ImageTensor> = [0.0, 0.3, 0.6]
            .iter()
            .map(|&b| {
                let mut req = RenderRequest::new(img.clone());
                req.mask = Some(mask.clone());
                req.background_level = Some(b);
                render_request(&model, &req).unwrap().image
            })
            .collect();
        assert_ne!(outs[0], outs[1]);
        assert_ne!(outs[1], outs[2]);
        for o in &outs {
            for c in 0..3 {
                for y in 16..48 {
                    for x in 16..48 {
                        assert_eq!(o.tensor().at(0, c, y, x), img.tensor().at(0, c, y, x));
                    }
                }
            }
        }
    }
}
