//! Validated image and mask containers.

use crate::error::{Error, Result};
use crate::kernels::Resample2d;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Grayscale,
    Rgb,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Grayscale => 1,
            ColorSpace::Rgb => 3,
        }
    }
}

/// Smallest spatial extent accepted by the rendering pipeline.
pub const MIN_PIPELINE_EXTENT: usize = 4;

fn check_range(t: &Tensor<f32>, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
        return Err(Error::InvalidImage(format!("{what} value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Image with values in `[0, 1]`, stored as a `[1, C, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
    color: ColorSpace,
}

impl ImageTensor {
    /// Wraps a `[1, C, H, W]` tensor, rejecting out-of-range values.
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let [n, c, h, w] = data.shape();
        if n != 1 {
            return Err(Error::InvalidImage(format!("expected a single image, got batch of {n}")));
        }
        let color = match c {
            1 => ColorSpace::Grayscale,
            3 => ColorSpace::Rgb,
            _ => return Err(Error::InvalidImage(format!("unsupported channel count {c}"))),
        };
        if h == 0 || w == 0 {
            return Err(Error::InvalidImage("zero-sized image".into()));
        }
        check_range(&data, "image")?;
        Ok(ImageTensor { data, color })
    }

    /// Clamps every element into `[0, 1]` (non-finite values become 0).
    pub fn from_clamped(data: Tensor<f32>) -> Result<Self> {
        Self::new(data.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }))
    }

    pub fn filled(color: ColorSpace, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::full([1, color.channels(), height, width], value))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn shape(&self) -> Shape {
        self.data.shape()
    }

    /// Rejects images below the pipeline's minimum extent.
    pub fn check_pipeline_extent(&self) -> Result<()> {
        if self.height() < MIN_PIPELINE_EXTENT || self.width() < MIN_PIPELINE_EXTENT {
            return Err(Error::Dimension(format!(
                "image {}x{} is smaller than {MIN_PIPELINE_EXTENT}x{MIN_PIPELINE_EXTENT}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }

    /// Replicates a grayscale image into three channels.
    pub fn to_rgb(&self) -> ImageTensor {
        match self.color {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::Grayscale => {
                let plane = self.data.plane(0, 0);
                let mut data = Vec::with_capacity(plane.len() * 3);
                for _ in 0..3 {
                    data.extend_from_slice(plane);
                }
                ImageTensor {
                    data: Tensor::from_vec([1, 3, self.height(), self.width()], data),
                    color: ColorSpace::Rgb,
                }
            }
        }
    }

    /// Bilinear resize; values stay in range because weights are convex.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> ImageTensor {
        if (height, width) == (self.height(), self.width()) {
            return self.clone();
        }
        let map = Resample2d::bilinear((self.height(), self.width()), (height, width));
        let data = map.apply(&self.data).map(|v| v.clamp(0.0, 1.0));
        ImageTensor { data, color: self.color }
    }
}

/// Single-channel focus mask in `[0, 1]`, stored as `[1, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusMask {
    data: Tensor<f32>,
}

impl FocusMask {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        let [n, c, h, w] = data.shape();
        if n != 1 || c != 1 {
            return Err(Error::InvalidImage(format!("mask must be [1, 1, H, W], got {:?}", data.shape())));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidImage("zero-sized mask".into()));
        }
        check_range(&data, "mask")?;
        Ok(FocusMask { data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Tensor::full([1, 1, height, width], value))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        Self::new(Tensor::from_fn([1, 1, height, width], |_, _, y, x| f(y, x)))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data.at(0, 0, y, x)
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> FocusMask {
        if (height, width) == (self.height(), self.width()) {
            return self.clone();
        }
        let map = Resample2d::bilinear((self.height(), self.width()), (height, width));
        FocusMask { data: map.apply(&self.data).map(|v| v.clamp(0.0, 1.0)) }
    }

    /// Converts a grayscale image into a mask.
    pub fn from_image(image: &ImageTensor) -> Result<Self> {
        match image.color_space() {
            ColorSpace::Grayscale => Self::new(image.tensor().clone()),
            ColorSpace::Rgb => Err(Error::InvalidImage("mask images must be grayscale".into())),
        }
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor { data: self.data.clone(), color: ColorSpace::Grayscale }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(ImageTensor::new(Tensor::full([1, 3, 4, 4], 1.5)).is_err());
        assert!(ImageTensor::new(Tensor::full([1, 3, 4, 4], f32::NAN)).is_err());
        assert!(FocusMask::new(Tensor::full([1, 1, 4, 4], -0.1)).is_err());
        assert!(ImageTensor::new(Tensor::full([1, 2, 4, 4], 0.5)).is_err());
    }

    #[test]
    fn pipeline_extent_requires_four_pixels() {
        let small = ImageTensor::filled(ColorSpace::Rgb, 3, 8, 0.5).unwrap();
        assert!(small.check_pipeline_extent().is_err());
        let ok = ImageTensor::filled(ColorSpace::Rgb, 4, 4, 0.5).unwrap();
        assert!(ok.check_pipeline_extent().is_ok());
    }

    #[test]
    fn grayscale_promotes_to_identical_rgb_planes() {
        let g = ImageTensor::new(Tensor::from_fn([1, 1, 4, 5], |_, _, y, x| (y * 5 + x) as f32 / 20.0)).unwrap();
        let rgb = g.to_rgb();
        assert_eq!(rgb.channels(), 3);
        for c in 0..3 {
            assert_eq!(rgb.tensor().plane(0, c), g.tensor().plane(0, 0));
        }
    }
}
