//! Laplacian pyramid decomposition and reconstruction.
//!
//! Each level blurs with the separable binomial kernel `[1, 4, 6, 4, 1] / 16`
//! (mirror borders), decimates by two, expands back (zero insertion plus the
//! same blur with gain two) and keeps the difference as that level's
//! high-frequency residual. Arithmetic runs in `f64` and is stored as `f32`.

use crate::error::{Error, Result};
use crate::kernels::Resample2d;
use crate::tensor::{Float, Tensor};
use crate::types::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidDecomposition<T = f32> {
    /// Low-frequency image at `1 / 2^L` resolution.
    pub residual: Tensor<T>,
    /// `highfreq[k]` is at `1 / 2^k` resolution; finest first.
    pub highfreq: Vec<Tensor<T>>,
}

impl<T> PyramidDecomposition<T> {
    pub fn levels(&self) -> usize {
        self.highfreq.len()
    }
}

/// Checks that `h × w` halves cleanly `levels` times.
pub fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    let f = 1usize << levels;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Dimension(format!(
            "{h}x{w} is not divisible by 2^{levels} = {f}"
        )));
    }
    Ok(())
}

/// Blur and decimate by two.
pub fn pyr_down(x: &Tensor<f64>) -> Tensor<f64> {
    let [_, _, h, w] = x.shape();
    Resample2d::pyr_reduce((h, w)).apply(x)
}

/// Zero insertion followed by blur with gain two along each axis.
pub fn pyr_up(x: &Tensor<f64>) -> Tensor<f64> {
    let [_, _, h, w] = x.shape();
    Resample2d::pyr_expand((h, w)).apply(x)
}

/// Decomposes a batch `[N, C, H, W]` into `levels` residuals.
pub fn decompose_tensor<T: Float>(x: &Tensor<T>, levels: usize) -> Result<PyramidDecomposition<T>> {
    if levels == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let [_, _, h, w] = x.shape();
    check_divisible(h, w, levels)?;
    let mut cur = x.cast::<f64>();
    let mut highfreq = Vec::with_capacity(levels);
    for _ in 0..levels {
        let down = pyr_down(&cur);
        let up = pyr_up(&down);
        highfreq.push(cur.zip_map(&up, |a, b| a - b).cast::<T>());
        cur = down;
    }
    Ok(PyramidDecomposition { residual: cur.cast(), highfreq })
}

pub fn decompose(image: &ImageTensor, levels: usize) -> Result<PyramidDecomposition> {
    decompose_tensor(image.tensor(), levels)
}

/// Inverse of [`decompose_tensor`] without clamping.
pub fn reconstruct_tensor<T: Float>(pyr: &PyramidDecomposition<T>) -> Result<Tensor<T>> {
    if pyr.highfreq.is_empty() {
        return Err(Error::InvalidArgument("pyramid has no levels".into()));
    }
    let mut cur = pyr.residual.cast::<f64>();
    for h in pyr.highfreq.iter().rev() {
        let up = pyr_up(&cur);
        if up.shape() != h.shape() {
            return Err(Error::shape(&h.shape(), &up.shape()));
        }
        cur = up.zip_map(&h.cast::<f64>(), |a, b| a + b);
    }
    Ok(cur.cast())
}

/// Reconstructs a single image, clamping into `[0, 1]` at the end.
pub fn reconstruct(pyr: &PyramidDecomposition) -> Result<ImageTensor> {
    ImageTensor::from_clamped(reconstruct_tensor(pyr)?)
}

/// Mean absolute value of the finest high-frequency band, optionally
/// restricted to pixels where `region` is true.
pub fn highfreq_energy(x: &Tensor<f32>, region: Option<&[bool]>) -> Result<f64> {
    let pyr = decompose_tensor(x, 1)?;
    let h0 = &pyr.highfreq[0];
    let [n, c, hh, ww] = h0.shape();
    let hw = hh * ww;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for (p, v) in h0.plane(ni, ci).iter().enumerate() {
                if region.map_or(true, |r| r[p]) {
                    sum += v.abs() as f64;
                    count += 1;
                }
            }
        }
    }
    debug_assert!(region.map_or(true, |r| r.len() == hw));
    if count == 0 {
        return Err(Error::InvalidArgument("empty region".into()));
    }
    Ok(sum / count as f64)
}
