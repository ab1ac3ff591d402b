//! Losses and metrics on `[0, 1]` images: L1, SSIM, a feature-space
//! perceptual distance, their weighted total, and PSNR.

use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::{Tape, Var};
use crate::config::LossWeights;
use crate::container::{Container, ContainerKind};
use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::params::Initializer;
use crate::tensor::{Float, Tensor};
use crate::types::{FocusMask, ImageTensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Added under the square root when unit-normalizing feature vectors.
pub const FEATURE_EPS: f64 = 1e-10;

fn check_pair<T: Float>(tape: &Tape<'_, T>, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape(&sa, &sb));
    }
    Ok(())
}

pub fn l1_on_tape<T: Float>(tape: &Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, a, b)?;
    Ok(tape.mean_all(tape.abs(tape.sub(a, b))))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn gaussian_filter<T: Float>(tape: &Tape<'_, T>, x: Var, taps: &[f64]) -> Var {
    let c = tape.shape(x)[1];
    let k = taps.len();
    let col = Tensor::from_fn([c, 1, k, 1], |_, _, i, _| T::lit(taps[i]));
    let row = Tensor::from_fn([c, 1, 1, k], |_, _, _, j| T::lit(taps[j]));
    let geom = ConvGeom { stride: 1, pad_h: 0, pad_w: 0, groups: c };
    let v = tape.conv2d(x, tape.constant(col), None, geom);
    tape.conv2d(v, tape.constant(row), None, geom)
}

/// Mean SSIM over all valid windows, channels and batch items.
pub fn ssim_on_tape<T: Float>(tape: &Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
    check_pair(tape, a, b)?;
    let [_, _, h, w] = tape.shape(a);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = gaussian_filter(tape, a, &taps);
    let mu_b = gaussian_filter(tape, b, &taps);
    let e_aa = gaussian_filter(tape, tape.square(a), &taps);
    let e_bb = gaussian_filter(tape, tape.square(b), &taps);
    let e_ab = gaussian_filter(tape, tape.mul(a, b), &taps);
    let mu_aa = tape.square(mu_a);
    let mu_bb = tape.square(mu_b);
    let mu_ab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(e_aa, mu_aa);
    let var_b = tape.sub(e_bb, mu_bb);
    let cov = tape.sub(e_ab, mu_ab);
    let two = T::lit(2.0);
    let num_l = tape.affine(mu_ab, two, T::lit(SSIM_C1));
    let num_c = tape.affine(cov, two, T::lit(SSIM_C2));
    let den_l = tape.add_scalar(tape.add(mu_aa, mu_bb), T::lit(SSIM_C1));
    let den_c = tape.add_scalar(tape.add(var_a, var_b), T::lit(SSIM_C2));
    let map = tape.div(tape.mul(num_l, num_c), tape.mul(den_l, den_c));
    Ok(tape.mean_all(map))
}

/// One convolution of the perceptual feature extractor, followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorStage {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub stride: usize,
}

/// Frozen convolutional stack whose ReLU outputs, unit-normalized over
/// channels, are compared stage by stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub stages: Vec<ExtractorStage>,
    /// Names where the weights came from, for reports.
    pub label: String,
}

impl FeatureExtractor {
    /// Deterministic random extractor: 3→16→32→32 channels, 3×3 kernels,
    /// stride 2 at every stage.
    pub fn random(seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        let widths = [3usize, 16, 32, 32];
        let stages = widths
            .windows(2)
            .map(|p| ExtractorStage {
                weight: init.kaiming([p[1], p[0], 3, 3], p[0] * 9),
                bias: Tensor::zeros([1, p[1], 1, 1]),
                stride: 2,
            })
            .collect();
        FeatureExtractor { stages, label: format!("random-conv3(seed={seed})") }
    }

    /// Reads an extractor container: tensors `stage{k}.weight`,
    /// `stage{k}.bias` and a header with `stride{k}=<n>` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let c = Container::load(path)?;
        if c.kind != ContainerKind::Extractor {
            return Err(Error::Checkpoint("container is not a feature extractor".into()));
        }
        let mut strides = std::collections::HashMap::new();
        let mut label = path.display().to_string();
        for line in c.header.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Checkpoint(format!("bad header line {line}")))?;
            if k == "label" {
                label = v.to_owned();
            } else if let Some(i) = k.strip_prefix("stride") {
                let i: usize = i.parse().map_err(|_| Error::Checkpoint(format!("bad key {k}")))?;
                let s: usize = v.parse().map_err(|_| Error::Checkpoint(format!("bad stride {v}")))?;
                strides.insert(i, s);
            }
        }
        let mut stages = Vec::new();
        let mut cin = 3;
        for k in 0.. {
            let find = |n: String| c.tensors.iter().find(|(name, _)| *name == n).map(|(_, t)| t.clone());
            let Some(weight) = find(format!("stage{k}.weight")) else { break };
            let [cout, wc, kh, kw] = weight.shape();
            if wc != cin || kh % 2 == 0 || kh != kw {
                return Err(Error::Checkpoint(format!("stage {k} weight has unusable shape {:?}", weight.shape())));
            }
            let bias = find(format!("stage{k}.bias")).unwrap_or_else(|| Tensor::zeros([1, cout, 1, 1]));
            if bias.numel() != cout {
                return Err(Error::Checkpoint(format!("stage {k} bias has {} values", bias.numel())));
            }
            let stride = *strides.get(&k).unwrap_or(&1);
            if stride == 0 {
                return Err(Error::Checkpoint(format!("stage {k} stride is zero")));
            }
            stages.push(ExtractorStage { weight, bias: bias.reshape([1, cout, 1, 1]), stride });
            cin = cout;
        }
        if stages.is_empty() {
            return Err(Error::Checkpoint("extractor has no stages".into()));
        }
        Ok(FeatureExtractor { stages, label })
    }

    pub fn to_container(&self) -> Container {
        let mut header = format!("label={}\n", self.label);
        let mut tensors = Vec::new();
        for (k, s) in self.stages.iter().enumerate() {
            let _ = writeln!(header, "stride{k}={}", s.stride);
            tensors.push((format!("stage{k}.weight"), s.weight.clone()));
            tensors.push((format!("stage{k}.bias"), s.bias.clone()));
        }
        Container { kind: ContainerKind::Extractor, header, step: 0, tensors, optimizer: None }
    }

    /// Unit-normalized feature maps of every stage for input in `[0, 1]`.
    pub fn features<T: Float>(&self, tape: &Tape<'_, T>, x: Var) -> Vec<Var> {
        let mut h = tape.affine(x, T::lit(2.0), T::lit(-1.0));
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let k = s.weight.shape()[2];
            let w = tape.constant(s.weight.cast());
            let b = tape.constant(s.bias.cast());
            h = tape.relu(tape.conv2d(h, w, Some(b), ConvGeom::same(k, s.stride, 1)));
            let norm = tape.sqrt(tape.add_scalar(tape.sum_axis(tape.square(h), 1), T::lit(FEATURE_EPS)));
            out.push(tape.div(h, norm));
        }
        out
    }

    /// Sum over stages of the mean squared difference of normalized
    /// features.
    pub fn distance_on_tape<T: Float>(&self, tape: &Tape<'_, T>, a: Var, b: Var) -> Result<Var> {
        check_pair(tape, a, b)?;
        let fa = self.features(tape, a);
        let fb = self.features(tape, b);
        let mut total: Option<Var> = None;
        for (x, y) in fa.into_iter().zip(fb) {
            let d = tape.mean_all(tape.square(tape.sub(x, y)));
            total = Some(match total {
                Some(t) => tape.add(t, d),
                None => d,
            });
        }
        Ok(total.expect("extractor has at least one stage"))
    }
}

/// Loss terms of one evaluation, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l1: Var,
    pub perceptual: Var,
    pub ssim: Var,
    pub total: Var,
}

/// `w_l1·L1 + w_p·perceptual + w_s·(1 − SSIM)`.
pub fn total_loss_on_tape<T: Float>(
    tape: &Tape<'_, T>,
    b0: Var,
    target: Var,
    w: &LossWeights,
    extractor: &FeatureExtractor,
) -> Result<LossVars> {
    let l1 = l1_on_tape(tape, b0, target)?;
    let perceptual = extractor.distance_on_tape(tape, b0, target)?;
    let ssim = ssim_on_tape(tape, b0, target)?;
    let a = tape.scale(l1, T::lit(w.w_l1));
    let b = tape.scale(perceptual, T::lit(w.w_perceptual));
    let c = tape.scale(tape.one_minus(ssim), T::lit(w.w_ssim));
    let total = tape.add(tape.add(a, b), c);
    Ok(LossVars { l1, perceptual, ssim, total })
}

/// Scalar loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub l1: f64,
    pub perceptual: f64,
    pub ssim_loss: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read<T: Float>(tape: &Tape<'_, T>, v: &LossVars) -> Self {
        let get = |x: Var| tape.value(x).data()[0].as_f64();
        LossValues { l1: get(v.l1), perceptual: get(v.perceptual), ssim_loss: 1.0 - get(v.ssim), total: get(v.total) }
    }
}

fn with_pair<R>(a: &ImageTensor, b: &ImageTensor, f: impl FnOnce(&Tape<'_, f64>, Var, Var) -> Result<R>) -> Result<R> {
    if a.shape() != b.shape() {
        return Err(Error::shape(&a.shape(), &b.shape()));
    }
    let tape = Tape::<f64>::detached();
    let va = tape.constant(a.tensor().cast());
    let vb = tape.constant(b.tensor().cast());
    f(&tape, va, vb)
}

fn scalar(tape: &Tape<'_, f64>, v: Var) -> f64 {
    tape.value(v).data()[0]
}

pub fn l1_loss(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    with_pair(a, b, |t, x, y| Ok(scalar(t, l1_on_tape(t, x, y)?)))
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    with_pair(a, b, |t, x, y| Ok(scalar(t, ssim_on_tape(t, x, y)?)))
}

pub fn ssim_loss(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    Ok(1.0 - ssim(a, b)?)
}

pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, extractor: &FeatureExtractor) -> Result<f64> {
    with_pair(a, b, |t, x, y| Ok(scalar(t, extractor.distance_on_tape(t, x, y)?)))
}

pub fn total_loss(b0: &ImageTensor, target: &ImageTensor, w: &LossWeights, extractor: &FeatureExtractor) -> Result<LossValues> {
    with_pair(b0, target, |t, x, y| Ok(LossValues::read(t, &total_loss_on_tape(t, x, y, w, extractor)?)))
}

/// Combines already computed loss terms.
pub fn combine(w: &LossWeights, l1: f64, perceptual: f64, ssim: f64) -> f64 {
    w.w_l1 * l1 + w.w_perceptual * perceptual + w.w_ssim * (1.0 - ssim)
}

/// `10·log10(1 / MSE)`; `+∞` for identical inputs.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(&a.shape(), &b.shape()));
    }
    let n = a.tensor().numel() as f64;
    let mse: f64 =
        a.tensor().data().iter().zip(b.tensor().data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// Intersection over union of `pred ≥ threshold` against `truth ≥ 0.5`,
/// with `pred` resized bilinearly to the size of `truth`. Two empty
/// regions score 1.
pub fn mask_iou(pred: &FocusMask, truth: &FocusMask, threshold: f32) -> f64 {
    let pred = if (pred.height(), pred.width()) == (truth.height(), truth.width()) {
        pred.clone()
    } else {
        pred.resize_bilinear(truth.height(), truth.width())
    };
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.tensor().data().iter().zip(truth.tensor().data()) {
        let (p, t) = (p >= threshold, t >= 0.5);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Rounds to 8-bit codes and back.
pub fn quantized(img: &ImageTensor) -> ImageTensor {
    let t = img.tensor().map(|v| crate::io::quantize_u8(v) as f32 / 255.0);
    ImageTensor::new(t).expect("quantized values stay in range")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    /// Whether images were rounded to 8-bit codes before measuring.
    pub quantized: bool,
    pub extractor: String,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>, quantized: bool, extractor: &str) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::InvalidArgument("no images to report".into()));
        }
        let n = per_image.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            perceptual: mean(|m| m.perceptual),
            per_image,
            quantized,
            extractor: extractor.to_owned(),
        })
    }

    /// Measures one pair.
    pub fn measure(
        name: &str,
        output: &ImageTensor,
        target: &ImageTensor,
        quantize: bool,
        extractor: &FeatureExtractor,
    ) -> Result<ImageMetrics> {
        let (o, t) = if quantize { (quantized(output), quantized(target)) } else { (output.clone(), target.clone()) };
        Ok(ImageMetrics {
            name: name.to_owned(),
            psnr: psnr(&o, &t)?,
            ssim: ssim(&o, &t)?,
            perceptual: perceptual_distance(&o, &t, extractor)?,
        })
    }

    /// Tab-separated table with one row per image and a final mean row.
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# quantized={} extractor={}\nimage\tPSNR\tSSIM\tLPIPS\n",
            self.quantized, self.extractor
        );
        for m in &self.per_image {
            let _ = writeln!(s, "{}\t{}\t{:.4}\t{:.4}", m.name, fmt_db(m.psnr), m.ssim, m.perceptual);
        }
        let _ = writeln!(s, "mean\t{}\t{:.4}\t{:.4}", fmt_db(self.psnr), self.ssim, self.perceptual);
        s
    }

    /// LaTeX table row in the layout of published comparisons.
    pub fn table_row(&self, method: &str) -> String {
        let p = if self.psnr.is_infinite() { "\\infty".to_owned() } else { format!("{:.2}", self.psnr) };
        format!("{method} & {p} & {:.4} & {:.4} \\\\", self.ssim, self.perceptual)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ColorSpace;

    fn flat(v: f32, h: usize, w: usize) -> ImageTensor {
        ImageTensor::filled(ColorSpace::Rgb, h, w, v).unwrap()
    }

    #[test]
    fn l1_closed_forms() {
        assert_eq!(l1_loss(&flat(0.0, 4, 4), &flat(1.0, 4, 4)).unwrap(), 1.0);
        let a = ImageTensor::new(Tensor::from_vec([1, 1, 1, 2], vec![0.0, 0.5])).unwrap();
        let b = ImageTensor::new(Tensor::from_vec([1, 1, 1, 2], vec![0.25, 0.25])).unwrap();
        assert!((l1_loss(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        assert!(l1_loss(&a, &flat(0.0, 4, 4)).is_err());
    }

    #[test]
    fn ssim_constant_images() {
        let a = flat(0.0, 16, 16);
        let b = flat(1.0, 16, 16);
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-9);
        assert!((ssim(&b, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&flat(0.0, 8, 16), &flat(0.0, 8, 16)).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = flat(0.5, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = flat(0.6, 8, 8);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-3);
        let c = ImageTensor::new(a.tensor().map(|v| v + 16.0 / 255.0)).unwrap();
        assert!((psnr(&a, &c).unwrap() - 24.048404).abs() < 1e-3);
    }

    #[test]
    fn total_loss_combines_terms() {
        assert!((combine(&LossWeights::default(), 0.1, 0.05, 0.9) - 1.2).abs() < 1e-12);
        let ext = FeatureExtractor::random(0);
        let a = flat(0.3, 16, 16);
        let v = total_loss(&a, &a, &LossWeights::default(), &ext).unwrap();
        assert_eq!(v.l1, 0.0);
        assert_eq!(v.perceptual, 0.0);
        assert!(v.total.abs() < 1e-12);
    }

    #[test]
    fn report_formats() {
        let per = vec![
            ImageMetrics { name: "a".into(), psnr: 20.0, ssim: 0.8, perceptual: 0.2 },
            ImageMetrics { name: "b".into(), psnr: 30.0, ssim: 0.9, perceptual: 0.1 },
        ];
        let r = MetricReport::from_images(per, false, "x").unwrap();
        assert!((r.psnr - 25.0).abs() < 1e-12);
        assert_eq!(r.table_row("Ours"), "Ours & 25.00 & 0.8500 & 0.1500 \\\\");
        assert!(r.to_tsv().lines().last().unwrap().starts_with("mean\t25.0000"));
    }

    #[test]
    fn extractor_file_round_trip() {
        let ext = FeatureExtractor::random(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ampn");
        ext.to_container().save(&path).unwrap();
        assert_eq!(FeatureExtractor::load(&path).unwrap(), ext);
    }
}
