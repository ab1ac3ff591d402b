//! Deterministic synthetic pairs: an all-in-focus input, a target with the
//! background Gaussian-blurred, and the ground-truth focus region.
//!
//! Also reads and writes paired datasets on disk, including the EBB!
//! `original/` + `bokeh/` layout.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{load_any_image, load_image, load_mask, save_image, save_mask};
use crate::kernels::reflect;
use crate::tensor::Tensor;
use crate::types::{FocusMask, ImageTensor};

/// Width of the alpha ramp outside the focus region, in pixels.
pub const FEATHER_PX: f64 = 3.0;
pub const DEFAULT_SIGMA_RANGE: (f64, f64) = (2.0, 4.0);

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub input: ImageTensor,
    pub target: ImageTensor,
    /// Binary focus region.
    pub gt_region: FocusMask,
    pub blur_sigma: f64,
    pub seed: u64,
}

/// Separable Gaussian blur with mirror borders. `sigma == 0` copies.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / s).collect();
    let [n, c, h, w] = img.shape();
    let mut out = Tensor::zeros(img.shape());
    let mut tmp = vec![0.0f64; h * w];
    for ni in 0..n {
        for ci in 0..c {
            let src = img.plane(ni, ci);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in taps.iter().enumerate() {
                        let xx = reflect(x as isize + k as isize - radius, w);
                        acc += t * src[y * w + xx] as f64;
                    }
                    tmp[y * w + x] = acc;
                }
            }
            let dst = out.plane_mut(ni, ci);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, t) in taps.iter().enumerate() {
                        let yy = reflect(y as isize + k as isize - radius, h);
                        acc += t * tmp[yy * w + x];
                    }
                    dst[y * w + x] = acc.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    out
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Polygon { points: Vec<(f64, f64)> },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { points } => {
                let mut inside = false;
                let mut j = points.len() - 1;
                for i in 0..points.len() {
                    let (yi, xi) = points[i];
                    let (yj, xj) = points[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

struct Stripes {
    a: [f64; 3],
    b: [f64; 3],
    period: f64,
    dir: (f64, f64),
}

impl Stripes {
    fn at(&self, y: f64, x: f64) -> [f64; 3] {
        let t = (y * self.dir.0 + x * self.dir.1) / self.period;
        if t.rem_euclid(1.0) < 0.5 {
            self.a
        } else {
            self.b
        }
    }
}

/// Per-sample seed derived from a dataset seed and an index.
pub fn sample_seed(dataset_seed: u64, index: usize) -> u64 {
    dataset_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

pub fn generate_sample(seed: u64, size: (usize, usize), sigma_range: (f64, f64)) -> Result<SyntheticSample> {
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("synthetic samples need at least 16x16, got {h}x{w}")));
    }
    let (lo, hi) = sigma_range;
    if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad sigma range ({lo}, {hi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // background: desaturated smooth gradient, coarse blotches and fine noise
    let base_hue: f64 = rng.gen();
    let c0 = hsv_to_rgb(base_hue, rng.gen_range(0.05..0.2), rng.gen_range(0.3..0.7));
    let c1 = hsv_to_rgb(base_hue + rng.gen_range(-0.1..0.1), rng.gen_range(0.05..0.2), rng.gen_range(0.3..0.7));
    let gdir = rng.gen_range(0.0..2.0 * PI);
    let (gs, gc) = gdir.sin_cos();
    let coarse_h = h / 8 + 2;
    let coarse_w = w / 8 + 2;
    let coarse: Vec<f64> = (0..coarse_h * coarse_w).map(|_| rng.gen_range(-0.12..0.12)).collect();
    let mut input = Tensor::<f32>::zeros([1, 3, h, w]);
    let diag = ((h * h + w * w) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let t = (((y as f64 - h as f64 / 2.0) * gs + (x as f64 - w as f64 / 2.0) * gc) / diag + 0.5).clamp(0.0, 1.0);
            let (fy, fx) = (y as f64 / 8.0, x as f64 / 8.0);
            let (iy, ix) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let blotch = coarse[iy * coarse_w + ix] * (1.0 - ty) * (1.0 - tx)
                + coarse[iy * coarse_w + ix + 1] * (1.0 - ty) * tx
                + coarse[(iy + 1) * coarse_w + ix] * ty * (1.0 - tx)
                + coarse[(iy + 1) * coarse_w + ix + 1] * ty * tx;
            let fine: f64 = rng.gen_range(-0.15..0.15);
            for c in 0..3 {
                let tint: f64 = rng.gen_range(-0.02..0.02);
                let v = c0[c] * (1.0 - t) + c1[c] * t + blotch + fine + tint;
                let i = input.index(0, c, y, x);
                input.data_mut()[i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    // foreground: saturated striped shapes
    let count = rng.gen_range(1..=3);
    let m = h.min(w) as f64;
    let mut region = vec![false; h * w];
    for _ in 0..count {
        let cy = rng.gen_range(0.2..0.8) * h as f64;
        let cx = rng.gen_range(0.2..0.8) * w as f64;
        let shape = if rng.gen_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry: rng.gen_range(0.12..0.3) * m,
                rx: rng.gen_range(0.12..0.3) * m,
                angle: rng.gen_range(0.0..PI),
            }
        } else {
            let k = rng.gen_range(5..=7);
            let r = rng.gen_range(0.15..0.3) * m;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let points = (0..k)
                .map(|i| {
                    let a = phase + 2.0 * PI * i as f64 / k as f64;
                    let rr = r * rng.gen_range(0.7..1.0);
                    (cy + rr * a.sin(), cx + rr * a.cos())
                })
                .collect();
            Shape::Polygon { points }
        };
        let hue: f64 = rng.gen();
        let sdir = rng.gen_range(0.0..PI);
        let stripes = Stripes {
            a: hsv_to_rgb(hue, rng.gen_range(0.75..1.0), rng.gen_range(0.8..1.0)),
            b: hsv_to_rgb(hue + rng.gen_range(0.3..0.7), rng.gen_range(0.75..1.0), rng.gen_range(0.25..0.5)),
            period: rng.gen_range(3.0..7.0),
            dir: (sdir.sin(), sdir.cos()),
        };
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    region[y * w + x] = true;
                    let col = stripes.at(y as f64, x as f64);
                    for (c, v) in col.iter().enumerate() {
                        let i = input.index(0, c, y, x);
                        input.data_mut()[i] = *v as f32;
                    }
                }
            }
        }
    }

    let sigma = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    let blurred = gaussian_blur(&input, sigma);
    let alpha = feather(&region, h, w);
    let mut target = blurred;
    for c in 0..3 {
        for p in 0..h * w {
            let i = c * h * w + p;
            let a = alpha[p];
            if a >= 1.0 {
                target.data_mut()[i] = input.data()[i];
            } else if a > 0.0 {
                let v = a * input.data()[i] as f64 + (1.0 - a) * target.data()[i] as f64;
                target.data_mut()[i] = v as f32;
            }
        }
    }
    let gt = Tensor::from_vec([1, 1, h, w], region.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect());
    Ok(SyntheticSample {
        input: ImageTensor::new(input)?,
        target: ImageTensor::new(target)?,
        gt_region: FocusMask::new(gt)?,
        blur_sigma: sigma,
        seed,
    })
}

/// 1 inside the region, falling linearly to 0 at `FEATHER_PX` outside.
fn feather(region: &[bool], h: usize, w: usize) -> Vec<f64> {
    let r = FEATHER_PX.ceil() as isize;
    let mut alpha = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = (y as usize) * w + x as usize;
            if region[p] {
                alpha[p] = 1.0;
                continue;
            }
            let mut best = f64::INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && region[yy as usize * w + xx as usize] {
                        best = best.min(((dy * dy + dx * dx) as f64).sqrt());
                    }
                }
            }
            alpha[p] = (1.0 - best / FEATHER_PX).max(0.0);
        }
    }
    alpha
}

/// One training or evaluation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub input: ImageTensor,
    pub target: ImageTensor,
    pub gt_mask: Option<FocusMask>,
}

impl From<(String, SyntheticSample)> for Pair {
    fn from((name, s): (String, SyntheticSample)) -> Self {
        Pair { name, input: s.input, target: s.target, gt_mask: Some(s.gt_region) }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub eval: Vec<Pair>,
}

/// First `⌊train_frac · n⌋` indices train, the rest evaluate.
pub fn split_indices(n: usize, train_frac: f64) -> Result<(Range<usize>, Range<usize>)> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("a split needs at least 2 samples, got {n}")));
    }
    if !(0.0..=1.0).contains(&train_frac) {
        return Err(Error::InvalidArgument(format!("train fraction {train_frac} is outside [0, 1]")));
    }
    let k = (train_frac * n as f64).floor() as usize;
    if k == 0 || k == n {
        return Err(Error::InvalidArgument(format!("split of {n} at {train_frac} leaves one side empty")));
    }
    Ok((0..k, k..n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub sigma_range: (f64, f64),
}

impl SyntheticSpec {
    pub fn sample(&self, index: usize) -> Result<SyntheticSample> {
        generate_sample(sample_seed(self.seed, index), (self.height, self.width), self.sigma_range)
    }

    pub fn pair(&self, index: usize) -> Result<Pair> {
        Ok((format!("{index:05}"), self.sample(index)?).into())
    }
}

pub fn make_dataset(n: usize, train_frac: f64, spec: &SyntheticSpec) -> Result<Dataset> {
    let (train, eval) = split_indices(n, train_frac)?;
    Ok(Dataset {
        train: train.map(|i| spec.pair(i)).collect::<Result<_>>()?,
        eval: eval.map(|i| spec.pair(i)).collect::<Result<_>>()?,
    })
}

/// Writes `<root>/{train,eval}/{input,target,gt_mask}/<name>.png`.
pub fn write_dataset(root: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let root = root.as_ref();
    for (split, pairs) in [("train", &data.train), ("eval", &data.eval)] {
        for sub in ["input", "target", "gt_mask"] {
            std::fs::create_dir_all(root.join(split).join(sub))?;
        }
        for p in pairs {
            let file = format!("{}.png", p.name);
            save_image(&p.input, root.join(split).join("input").join(&file))?;
            save_image(&p.target, root.join(split).join("target").join(&file))?;
            if let Some(m) = &p.gt_mask {
                save_mask(m, root.join(split).join("gt_mask").join(&file))?;
            }
        }
    }
    Ok(())
}

fn sorted_entries(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)))
        })
        .collect();
    out.sort_by(|a, b| natural_key(a).cmp(&natural_key(b)));
    Ok(out)
}

/// Numeric stems sort numerically, others lexically after them.
fn natural_key(p: &Path) -> (u8, u64, String) {
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_owned();
    match stem.parse::<u64>() {
        Ok(n) => (0, n, stem),
        Err(_) => (1, 0, stem),
    }
}

fn read_split(dir: &Path) -> Result<Vec<Pair>> {
    let inputs = sorted_entries(&dir.join("input"), &["png"])?;
    inputs
        .into_iter()
        .map(|ip| {
            let file = ip.file_name().expect("listed file has a name").to_owned();
            let name = ip.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_owned();
            let mask_path = dir.join("gt_mask").join(&file);
            Ok(Pair {
                name,
                input: load_image(&ip)?,
                target: load_image(dir.join("target").join(&file))?,
                gt_mask: if mask_path.exists() { Some(load_mask(mask_path)?) } else { None },
            })
        })
        .collect()
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    Ok(Dataset { train: read_split(&root.join("train"))?, eval: read_split(&root.join("eval"))? })
}

/// EBB! layout: `<root>/original/<k>.jpg` paired with `<root>/bokeh/<k>.jpg`
/// by file stem, ordered numerically, first `⌊train_frac · n⌋` train.
/// Images are resized bilinearly to `resize` when given.
pub fn read_ebb(root: impl AsRef<Path>, train_frac: f64, resize: Option<(usize, usize)>) -> Result<Dataset> {
    let root = root.as_ref();
    let exts = ["jpg", "jpeg", "png"];
    let originals = sorted_entries(&root.join("original"), &exts)?;
    let bokeh = sorted_entries(&root.join("bokeh"), &exts)?;
    let mut pairs = Vec::with_capacity(originals.len());
    for op in originals {
        let stem = op.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_owned();
        let Some(bp) = bokeh.iter().find(|b| b.file_stem().and_then(|s| s.to_str()) == Some(stem.as_str())) else {
            log::warn!("no bokeh counterpart for {}", op.display());
            continue;
        };
        let mut input = load_any_image(&op)?.to_rgb();
        let mut target = load_any_image(bp)?.to_rgb();
        if let Some((h, w)) = resize {
            input = input.resize_bilinear(h, w);
            target = target.resize_bilinear(h, w);
        }
        if input.shape() != target.shape() {
            return Err(Error::shape(&input.shape(), &target.shape()));
        }
        pairs.push(Pair { name: stem, input, target, gt_mask: None });
    }
    let (train, _) = split_indices(pairs.len(), train_frac)?;
    let eval = pairs.split_off(train.end);
    Ok(Dataset { train: pairs, eval })
}
