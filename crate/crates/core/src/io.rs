//! PNG reading and writing.
//!
//! Integer codes map to `[0, 1]` by dividing by `2^bits - 1`. Writing always
//! produces 8-bit PNGs with round-half-up quantization. Alpha channels, if
//! present, are discarded on read.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{ColorSpace, FocusMask, ImageTensor};

/// 8-bit code for a value in `[0, 1]`: `round(v * 255)` with ties rounded up.
pub fn quantize_u8(v: f32) -> u8 {
    let scaled = (v.clamp(0.0, 1.0) as f64) * 255.0;
    (scaled + 0.5).floor() as u8
}

fn planes_from_interleaved<P: Copy + Into<f64>>(
    raw: &[P],
    width: usize,
    height: usize,
    stride: usize,
    keep: usize,
    max_code: f64,
) -> Tensor<f32> {
    let mut data = vec![0.0f32; keep * width * height];
    let hw = width * height;
    for (p, px) in raw.chunks_exact(stride).enumerate() {
        for c in 0..keep {
            data[c * hw + p] = (px[c].into() / max_code) as f32;
        }
    }
    Tensor::from_vec([1, keep, height, width], data)
}

fn from_dynamic(img: DynamicImage) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage("zero-sized image".into()));
    }
    let t = match img {
        DynamicImage::ImageLuma8(b) => planes_from_interleaved(b.as_raw(), w, h, 1, 1, 255.0),
        DynamicImage::ImageLumaA8(b) => planes_from_interleaved(b.as_raw(), w, h, 2, 1, 255.0),
        DynamicImage::ImageRgb8(b) => planes_from_interleaved(b.as_raw(), w, h, 3, 3, 255.0),
        DynamicImage::ImageRgba8(b) => planes_from_interleaved(b.as_raw(), w, h, 4, 3, 255.0),
        DynamicImage::ImageLuma16(b) => planes_from_interleaved(b.as_raw(), w, h, 1, 1, 65535.0),
        DynamicImage::ImageLumaA16(b) => planes_from_interleaved(b.as_raw(), w, h, 2, 1, 65535.0),
        DynamicImage::ImageRgb16(b) => planes_from_interleaved(b.as_raw(), w, h, 3, 3, 65535.0),
        DynamicImage::ImageRgba16(b) => planes_from_interleaved(b.as_raw(), w, h, 4, 3, 65535.0),
        other => {
            return Err(Error::UnsupportedFormat(format!("pixel layout {:?}", other.color())));
        }
    };
    ImageTensor::new(t)
}

/// Decodes PNG bytes.
pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    match reader.format() {
        Some(ImageFormat::Png) => {}
        Some(f) => return Err(Error::UnsupportedFormat(format!("{f:?}; only PNG is accepted"))),
        None => return Err(Error::UnsupportedFormat("unrecognized image data".into())),
    }
    from_dynamic(reader.decode()?)
}

/// Decodes any image format the codec layer understands (PNG, JPEG).
pub fn decode_any(bytes: &[u8]) -> Result<ImageTensor> {
    let reader = ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    if reader.format().is_none() {
        return Err(Error::UnsupportedFormat("unrecognized image data".into()));
    }
    from_dynamic(reader.decode()?)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    decode_png(&read_file(path.as_ref())?)
}

/// Loads a PNG or JPEG; used for dataset ingestion.
pub fn load_any_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    decode_any(&read_file(path.as_ref())?)
}

/// Loads a mask. Color images whose channels are all equal are accepted as
/// grayscale; otherwise Rec. 601 luma is used.
pub fn load_mask(path: impl AsRef<Path>) -> Result<FocusMask> {
    mask_from_image(&load_image(path)?)
}

pub fn decode_mask_png(bytes: &[u8]) -> Result<FocusMask> {
    mask_from_image(&decode_png(bytes)?)
}

fn mask_from_image(img: &ImageTensor) -> Result<FocusMask> {
    match img.color_space() {
        ColorSpace::Grayscale => FocusMask::new(img.tensor().clone()),
        ColorSpace::Rgb => {
            let t = img.tensor();
            let (r, g, b) = (t.plane(0, 0), t.plane(0, 1), t.plane(0, 2));
            let data = r
                .iter()
                .zip(g.iter().zip(b))
                .map(|(&r, (&g, &b))| {
                    if r == g && g == b {
                        r
                    } else {
                        (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).clamp(0.0, 1.0) as f32
                    }
                })
                .collect();
            FocusMask::new(Tensor::from_vec([1, 1, img.height(), img.width()], data))
        }
    }
}

/// Encodes as an 8-bit PNG.
pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let (h, w) = (image.height(), image.width());
    let t = image.tensor();
    let c = image.channels();
    let hw = h * w;
    let mut raw = vec![0u8; hw * c];
    for p in 0..hw {
        for ch in 0..c {
            raw[p * c + ch] = quantize_u8(t.data()[ch * hw + p]);
        }
    }
    let dynamic = match image.color_space() {
        ColorSpace::Rgb => DynamicImage::ImageRgb8(
            image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"),
        ),
        ColorSpace::Grayscale => DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size"),
        ),
    };
    let mut out = Vec::new();
    dynamic.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

pub fn save_image(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path.as_ref(), bytes)?;
    Ok(())
}

pub fn save_mask(mask: &FocusMask, path: impl AsRef<Path>) -> Result<()> {
    save_image(&mask.to_image(), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png_u8(path: &Path, w: u32, h: u32, gray: bool, raw: Vec<u8>) {
        if gray {
            image::GrayImage::from_raw(w, h, raw).unwrap().save(path).unwrap();
        } else {
            image::RgbImage::from_raw(w, h, raw).unwrap().save(path).unwrap();
        }
    }

    #[test]
    fn eight_bit_codes_map_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        for (code, want) in [(255u8, 1.0f32), (0, 0.0), (128, 128.0 / 255.0)] {
            let p = dir.path().join(format!("px{code}.png"));
            write_png_u8(&p, 1, 1, false, vec![code; 3]);
            let img = load_image(&p).unwrap();
            assert_eq!(img.shape(), [1, 3, 1, 1]);
            for c in 0..3 {
                assert_eq!(img.tensor().at(0, c, 0, 0), want);
            }
        }
        assert!((128.0f32 / 255.0 - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn sixteen_bit_grayscale_is_scaled_by_65535() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g16.png");
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(2, 1, vec![65535u16, 32768]).unwrap();
        buf.save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.color_space(), ColorSpace::Grayscale);
        assert_eq!(img.tensor().data(), &[1.0, (32768.0f64 / 65535.0) as f32]);
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(0.5 / 255.0), 1);
    }

    #[test]
    fn missing_and_non_png_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path().join("nope.png")), Err(Error::MissingFile(_))));
        let txt = dir.path().join("x.png");
        std::fs::write(&txt, b"definitely not an image").unwrap();
        assert!(load_image(&txt).is_err());
    }

    #[test]
    fn equal_channel_rgb_masks_load_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_png_u8(&p, 2, 1, false, vec![255, 255, 255, 77, 77, 77]);
        let m = load_mask(&p).unwrap();
        assert_eq!(m.tensor().data(), &[1.0, 77.0 / 255.0]);
    }
}
