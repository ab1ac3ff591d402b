//! Raw numeric kernels: 2-D convolution and separable linear resampling.
//!
//! These operate on plain tensors; the autodiff tape wraps them.

use std::sync::Arc;

use crate::tensor::{gemm, Float, Mat, Tensor};

/// Geometry of a 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize, stride: usize, groups: usize) -> Self {
        ConvGeom { stride, pad_h: kernel / 2, pad_w: kernel / 2, groups }
    }

    pub fn valid() -> Self {
        ConvGeom { stride: 1, pad_h: 0, pad_w: 0, groups: 1 }
    }

    pub fn out_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let ho = (h + 2 * self.pad_h - kh) / self.stride + 1;
        let wo = (w + 2 * self.pad_w - kw) / self.stride + 1;
        (ho, wo)
    }
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, g: &ConvGeom) -> ConvDims {
    let [n, cin, h, w] = x.shape();
    let [cout, cin_g, kh, kw] = weight.shape();
    assert!(g.groups >= 1 && cin % g.groups == 0 && cout % g.groups == 0, "conv groups");
    assert_eq!(cin / g.groups, cin_g, "conv weight input channels");
    assert!(h + 2 * g.pad_h >= kh && w + 2 * g.pad_w >= kw, "conv kernel larger than input");
    let (ho, wo) = g.out_size(h, w, kh, kw);
    ConvDims { n, cin, h, w, cout, cin_g, cout_g: cout / g.groups, kh, kw, ho, wo }
}

impl ConvDims {
    fn is_pointwise(&self, g: &ConvGeom) -> bool {
        self.kh == 1 && self.kw == 1 && g.stride == 1 && g.pad_h == 0 && g.pad_w == 0
    }

    fn is_depthwise(&self, g: &ConvGeom) -> bool {
        g.groups == self.cin && self.cin_g == 1 && self.cout_g == 1
    }
}

fn im2col<T: Float>(x: &[T], d: &ConvDims, g: &ConvGeom, c0: usize, cols: &mut [T]) {
    let p = d.ho * d.wo;
    let s = g.stride;
    for ci in 0..d.cin_g {
        let plane = &x[(c0 + ci) * d.h * d.w..(c0 + ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &mut cols[((ci * d.kh + ki) * d.kw + kj) * p..][..p];
                let (lo, hi) = valid_range(kj, g.pad_w, s, d.w, d.wo);
                for oy in 0..d.ho {
                    let iy = (oy * s + ki) as isize - g.pad_h as isize;
                    let dst = &mut row[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let i0 = lo * s + kj - g.pad_w;
                    if s == 1 {
                        dst[lo..hi].copy_from_slice(&src[i0..i0 + hi - lo]);
                    } else {
                        for (j, v) in dst[lo..hi].iter_mut().enumerate() {
                            *v = src[i0 + j * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], d: &ConvDims, g: &ConvGeom, c0: usize, dx: &mut [T]) {
    let p = d.ho * d.wo;
    let s = g.stride;
    for ci in 0..d.cin_g {
        let plane = &mut dx[(c0 + ci) * d.h * d.w..(c0 + ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = &cols[((ci * d.kh + ki) * d.kw + kj) * p..][..p];
                let (lo, hi) = valid_range(kj, g.pad_w, s, d.w, d.wo);
                if lo >= hi {
                    continue;
                }
                let i0 = lo * s + kj - g.pad_w;
                for oy in 0..d.ho {
                    let iy = (oy * s + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let srow = &row[oy * d.wo + lo..oy * d.wo + hi];
                    if s == 1 {
                        for (a, &v) in dst[i0..i0 + hi - lo].iter_mut().zip(srow) {
                            *a += v;
                        }
                    } else {
                        for (j, &v) in srow.iter().enumerate() {
                            dst[i0 + j * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `lo..hi` whose input index `o * stride + k - pad` lies
/// inside `0..in_len`.
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if in_len + pad > k { ((in_len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

fn depthwise_forward<T: Float>(x: &[T], wt: &[T], d: &ConvDims, g: &ConvGeom, out: &mut [T]) {
    let s = g.stride;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        let k = &wt[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
        let dst = &mut out[c * d.ho * d.wo..(c + 1) * d.ho * d.wo];
        for oy in 0..d.ho {
            let drow = &mut dst[oy * d.wo..(oy + 1) * d.wo];
            for ki in 0..d.kh {
                let iy = (oy * s + ki) as isize - g.pad_h as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                for kj in 0..d.kw {
                    let kv = k[ki * d.kw + kj];
                    let (lo, hi) = valid_range(kj, g.pad_w, s, d.w, d.wo);
                    if lo >= hi {
                        continue;
                    }
                    let i0 = lo * s + kj - g.pad_w;
                    if s == 1 {
                        for (acc, &xv) in drow[lo..hi].iter_mut().zip(&src[i0..i0 + hi - lo]) {
                            *acc += kv * xv;
                        }
                    } else {
                        for (j, acc) in drow[lo..hi].iter_mut().enumerate() {
                            *acc += kv * src[i0 + j * s];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Float>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    d: &ConvDims,
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: &mut [T],
) {
    let mut dx = dx;
    let s = g.stride;
    for c in 0..d.cin {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        let k = &wt[c * d.kh * d.kw..(c + 1) * d.kh * d.kw];
        let go = &gout[c * d.ho * d.wo..(c + 1) * d.ho * d.wo];
        for oy in 0..d.ho {
            let grow = &go[oy * d.wo..(oy + 1) * d.wo];
            for ki in 0..d.kh {
                let iy = (oy * s + ki) as isize - g.pad_h as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let row_off = iy as usize * d.w;
                let xrow = &plane[row_off..row_off + d.w];
                for kj in 0..d.kw {
                    let (lo, hi) = valid_range(kj, g.pad_w, s, d.w, d.wo);
                    if lo >= hi {
                        continue;
                    }
                    let i0 = lo * s + kj - g.pad_w;
                    let kv = k[ki * d.kw + kj];
                    let mut acc = T::zero();
                    if s == 1 {
                        for (&gv, &xv) in grow[lo..hi].iter().zip(&xrow[i0..i0 + hi - lo]) {
                            acc += gv * xv;
                        }
                    } else {
                        for (j, &gv) in grow[lo..hi].iter().enumerate() {
                            acc += gv * xrow[i0 + j * s];
                        }
                    }
                    dw[(c * d.kh + ki) * d.kw + kj] += acc;
                    if let Some(dx) = dx.as_deref_mut() {
                        let drow = &mut dx[c * d.h * d.w + row_off..c * d.h * d.w + row_off + d.w];
                        if s == 1 {
                            for (dv, &gv) in drow[i0..i0 + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                                *dv += gv * kv;
                            }
                        } else {
                            for (j, &gv) in grow[lo..hi].iter().enumerate() {
                                drow[i0 + j * s] += gv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `weight`: `[Cout, Cin/groups, kh, kw]`; `bias`: `[1, Cout, 1, 1]`.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeom,
) -> Tensor<T> {
    let d = conv_dims(x, weight, geom);
    let p = d.ho * d.wo;
    let mut out = Tensor::zeros([d.n, d.cout, d.ho, d.wo]);
    let k = d.cin_g * d.kh * d.kw;
    let pointwise = d.is_pointwise(geom);
    let depthwise = d.is_depthwise(geom);
    let mut cols = if pointwise || depthwise { Vec::new() } else { vec![T::zero(); k * p] };
    let xin = x.data();
    let wt = weight.data();
    for n in 0..d.n {
        let xn = &xin[n * d.cin * d.h * d.w..(n + 1) * d.cin * d.h * d.w];
        let on = &mut out.data_mut()[n * d.cout * p..(n + 1) * d.cout * p];
        if depthwise {
            depthwise_forward(xn, wt, &d, geom, on);
        } else {
            for grp in 0..geom.groups {
                let c0 = grp * d.cin_g;
                let wg = &wt[grp * d.cout_g * k..(grp + 1) * d.cout_g * k];
                let og = &mut on[grp * d.cout_g * p..(grp + 1) * d.cout_g * p];
                if pointwise {
                    let xg = &xn[c0 * p..(c0 + d.cin_g) * p];
                    gemm(Mat::new(wg, d.cout_g, k), Mat::new(xg, k, p), og, false);
                } else {
                    im2col(xn, &d, geom, c0, &mut cols);
                    gemm(Mat::new(wg, d.cout_g, k), Mat::new(&cols, k, p), og, false);
                }
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for (co, chunk) in on.chunks_mut(p).enumerate() {
                let bv = bd[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of a convolution: `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    geom: &ConvGeom,
    need_dx: bool,
    need_bias: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let d = conv_dims(x, weight, geom);
    let p = d.ho * d.wo;
    let k = d.cin_g * d.kh * d.kw;
    let pointwise = d.is_pointwise(geom);
    let depthwise = d.is_depthwise(geom);
    let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
    let mut dw = Tensor::zeros(weight.shape());
    let mut cols = if pointwise || depthwise { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if pointwise || depthwise || !need_dx { Vec::new() } else { vec![T::zero(); k * p] };
    let xin = x.data();
    let wt = weight.data();
    let go = gout.data();
    let chw = d.cin * d.h * d.w;
    for n in 0..d.n {
        let xn = &xin[n * chw..(n + 1) * chw];
        let gn = &go[n * d.cout * p..(n + 1) * d.cout * p];
        let mut dxn = dx.as_mut().map(|t| &mut t.data_mut()[n * chw..(n + 1) * chw]);
        if depthwise {
            depthwise_backward(xn, wt, gn, &d, geom, dxn, dw.data_mut());
            continue;
        }
        for grp in 0..geom.groups {
            let c0 = grp * d.cin_g;
            let wg = &wt[grp * d.cout_g * k..(grp + 1) * d.cout_g * k];
            let gg = &gn[grp * d.cout_g * p..(grp + 1) * d.cout_g * p];
            let dwg = &mut dw.data_mut()[grp * d.cout_g * k..(grp + 1) * d.cout_g * k];
            if pointwise {
                let xg = &xn[c0 * p..(c0 + d.cin_g) * p];
                gemm(Mat::new(gg, d.cout_g, p), Mat::new(xg, k, p).t(), dwg, true);
                if let Some(dxn) = dxn.as_deref_mut() {
                    let dxg = &mut dxn[c0 * p..(c0 + d.cin_g) * p];
                    gemm(Mat::new(wg, d.cout_g, k).t(), Mat::new(gg, d.cout_g, p), dxg, true);
                }
            } else {
                im2col(xn, &d, geom, c0, &mut cols);
                gemm(Mat::new(gg, d.cout_g, p), Mat::new(&cols, k, p).t(), dwg, true);
                if let Some(dxn) = dxn.as_deref_mut() {
                    gemm(Mat::new(wg, d.cout_g, k).t(), Mat::new(gg, d.cout_g, p), &mut dcols, false);
                    col2im(&dcols, &d, geom, c0, dxn);
                }
            }
        }
    }
    let db = need_bias.then(|| {
        let mut db = Tensor::zeros([1, d.cout, 1, 1]);
        for n in 0..d.n {
            for co in 0..d.cout {
                let s: T = go[(n * d.cout + co) * p..(n * d.cout + co + 1) * p].iter().copied().sum();
                db.data_mut()[co] += s;
            }
        }
        db
    });
    (dx, dw, db)
}

/// Sparse 1-D linear map: `out[i] = Σ weight · in[src]` over `taps[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap1d {
    pub in_len: usize,
    pub out_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

/// Burt–Adelson binomial kernel.
pub const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Mirror reflection without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

impl LinearMap1d {
    fn from_taps(in_len: usize, taps: Vec<Vec<(usize, f64)>>) -> Self {
        let out_len = taps.len();
        // merge duplicate sources so the map is canonical
        let taps = taps
            .into_iter()
            .map(|row| {
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
                for (s, w) in row {
                    match merged.iter_mut().find(|(ms, _)| *ms == s) {
                        Some(entry) => entry.1 += w,
                        None => merged.push((s, w)),
                    }
                }
                merged.sort_by_key(|&(s, _)| s);
                merged
            })
            .collect();
        LinearMap1d { in_len, out_len, taps }
    }

    /// Bilinear interpolation with half-pixel centers (`align_corners = false`).
    pub fn bilinear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let l = src - i0 as f64;
                if i0 == i1 || l == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - l), (i1, l)]
                }
            })
            .collect();
        Self::from_taps(in_len, taps)
    }

    pub fn nearest(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len)
            .map(|o| vec![(((o * in_len) / out_len).min(in_len - 1), 1.0)])
            .collect();
        Self::from_taps(in_len, taps)
    }

    /// Box average over non-overlapping windows of `factor` samples.
    pub fn area(in_len: usize, factor: usize) -> Self {
        assert!(factor >= 1 && in_len % factor == 0, "area factor must divide length");
        let w = 1.0 / factor as f64;
        let taps = (0..in_len / factor)
            .map(|o| (0..factor).map(|t| (o * factor + t, w)).collect())
            .collect();
        Self::from_taps(in_len, taps)
    }

    /// Binomial blur followed by decimation by two.
    pub fn pyr_reduce(in_len: usize) -> Self {
        assert!(in_len % 2 == 0, "pyramid reduce needs an even length");
        let taps = (0..in_len / 2)
            .map(|o| {
                (0..5)
                    .map(|t| (reflect(2 * o as isize + t as isize - 2, in_len), BINOMIAL5[t]))
                    .collect()
            })
            .collect();
        Self::from_taps(in_len, taps)
    }

    /// Zero insertion followed by binomial blur with gain two.
    pub fn pyr_expand(in_len: usize) -> Self {
        let up_len = 2 * in_len;
        let taps = (0..up_len)
            .map(|o| {
                (0..5)
                    .filter_map(|t| {
                        let j = reflect(o as isize + t as isize - 2, up_len);
                        (j % 2 == 0).then_some((j / 2, 2.0 * BINOMIAL5[t]))
                    })
                    .collect()
            })
            .collect();
        Self::from_taps(in_len, taps)
    }
}

/// Separable resampling along height then width.
#[derive(Clone, Debug, PartialEq)]
pub struct Resample2d {
    pub h: Arc<LinearMap1d>,
    pub w: Arc<LinearMap1d>,
}

impl Resample2d {
    pub fn new(h: LinearMap1d, w: LinearMap1d) -> Self {
        Resample2d { h: Arc::new(h), w: Arc::new(w) }
    }

    pub fn bilinear(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self::new(LinearMap1d::bilinear(in_hw.0, out_hw.0), LinearMap1d::bilinear(in_hw.1, out_hw.1))
    }

    pub fn nearest(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self::new(LinearMap1d::nearest(in_hw.0, out_hw.0), LinearMap1d::nearest(in_hw.1, out_hw.1))
    }

    pub fn area(in_hw: (usize, usize), factor: usize) -> Self {
        Self::new(LinearMap1d::area(in_hw.0, factor), LinearMap1d::area(in_hw.1, factor))
    }

    pub fn pyr_reduce(in_hw: (usize, usize)) -> Self {
        Self::new(LinearMap1d::pyr_reduce(in_hw.0), LinearMap1d::pyr_reduce(in_hw.1))
    }

    pub fn pyr_expand(in_hw: (usize, usize)) -> Self {
        Self::new(LinearMap1d::pyr_expand(in_hw.0), LinearMap1d::pyr_expand(in_hw.1))
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.h.out_len, self.w.out_len)
    }

    pub fn in_hw(&self) -> (usize, usize) {
        (self.h.in_len, self.w.in_len)
    }

    pub fn apply<T: Float>(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!((h, w), self.in_hw(), "resample input size");
        let (ho, wo) = self.out_hw();
        let wt = cast_taps::<T>(&self.w);
        let ht = cast_taps::<T>(&self.h);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut tmp = vec![T::zero(); h * wo];
        for ni in 0..n {
            for ci in 0..c {
                let src = x.plane(ni, ci);
                for y in 0..h {
                    let row = &src[y * w..(y + 1) * w];
                    for (ox, taps) in wt.iter().enumerate() {
                        tmp[y * wo + ox] = taps.iter().fold(T::zero(), |acc, &(s, k)| acc + k * row[s]);
                    }
                }
                let dst = out.plane_mut(ni, ci);
                for (oy, taps) in ht.iter().enumerate() {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for &(s, k) in taps {
                        let srow = &tmp[s * wo..(s + 1) * wo];
                        for (d, &v) in drow.iter_mut().zip(srow) {
                            *d += k * v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Resample2d::apply`].
    pub fn apply_transpose<T: Float>(&self, g: &Tensor<T>) -> Tensor<T> {
        let [n, c, ho, wo] = g.shape();
        assert_eq!((ho, wo), self.out_hw(), "resample gradient size");
        let (h, w) = self.in_hw();
        let wt = cast_taps::<T>(&self.w);
        let ht = cast_taps::<T>(&self.h);
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut tmp = vec![T::zero(); h * wo];
        for ni in 0..n {
            for ci in 0..c {
                tmp.iter_mut().for_each(|v| *v = T::zero());
                let src = g.plane(ni, ci);
                for (oy, taps) in ht.iter().enumerate() {
                    let grow = &src[oy * wo..(oy + 1) * wo];
                    for &(s, k) in taps {
                        let trow = &mut tmp[s * wo..(s + 1) * wo];
                        for (t, &v) in trow.iter_mut().zip(grow) {
                            *t += k * v;
                        }
                    }
                }
                let dst = out.plane_mut(ni, ci);
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for (ox, taps) in wt.iter().enumerate() {
                        let v = tmp[y * wo + ox];
                        for &(s, k) in taps {
                            drow[s] += k * v;
                        }
                    }
                }
            }
        }
        out
    }
}

fn cast_taps<T: Float>(m: &LinearMap1d) -> Vec<Vec<(usize, T)>> {
    m.taps
        .iter()
        .map(|row| row.iter().map(|&(s, w)| (s, T::lit(w))).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct seven-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: &ConvGeom) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape();
        let [cout, cin_g, kh, kw] = w.shape();
        let cout_g = cout / g.groups;
        let (ho, wo) = g.out_size(h, wd, kh, kw);
        Tensor::from_fn([n, cout, ho, wo], |ni, co, oy, ox| {
            let grp = co / cout_g;
            let mut acc = b.map_or(0.0, |b| b.data()[co]);
            for ci in 0..cin_g {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(co, ci, ki, kj) * x.at(ni, grp * cin_g + ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            let _ = cin;
            acc
        })
    }

    #[test]
    fn conv_forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cases = [
            // (cin, cout, k, stride, groups, h, w)
            (3, 5, 3, 1, 1, 6, 7),
            (4, 4, 3, 2, 4, 8, 6),
            (4, 6, 1, 1, 1, 5, 5),
            (4, 6, 3, 2, 2, 7, 9),
            (2, 3, 5, 1, 1, 6, 6),
        ];
        for &(cin, cout, k, stride, groups, h, w) in &cases {
            let x = rand_tensor([2, cin, h, w], &mut rng);
            let wt = rand_tensor([cout, cin / groups, k, k], &mut rng);
            let b = rand_tensor([1, cout, 1, 1], &mut rng);
            let geom = ConvGeom::same(k, stride, groups);
            let got = conv2d_forward(&x, &wt, Some(&b), &geom);
            let want = naive_conv(&x, &wt, Some(&b), &geom);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "case {cin},{cout},{k},{stride},{groups}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> must equal <x, dx> + <w, dw> for a bias-free linear conv
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(cin, cout, k, stride, groups) in &[(3, 4, 3, 1, 1), (4, 4, 3, 2, 4), (4, 2, 1, 1, 2), (2, 4, 3, 2, 1)] {
            let x = rand_tensor([2, cin, 7, 6], &mut rng);
            let wt = rand_tensor([cout, cin / groups, k, k], &mut rng);
            let geom = ConvGeom::same(k, stride, groups);
            let y = conv2d_forward(&x, &wt, None, &geom);
            let g = rand_tensor(y.shape(), &mut rng);
            let (dx, dw, _) = conv2d_backward(&x, &wt, &g, &geom, true, false);
            let dx = dx.unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = wt.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10, "dx adjoint");
            assert!((lhs - via_w).abs() < 1e-10, "dw adjoint");
        }
    }

    #[test]
    fn depthwise_paths_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // (channels, kh, kw, stride, pad_h, pad_w, h, w)
        let cases = [
            (3, 11, 1, 1, 0, 0, 12, 5),
            (3, 1, 11, 1, 0, 0, 4, 13),
            (4, 3, 3, 1, 1, 1, 5, 2),
            (4, 3, 3, 2, 1, 1, 7, 8),
            (2, 5, 5, 2, 2, 2, 3, 4),
        ];
        for &(c, kh, kw, stride, pad_h, pad_w, h, w) in &cases {
            let geom = ConvGeom { stride, pad_h, pad_w, groups: c };
            let x = rand_tensor([2, c, h, w], &mut rng);
            let wt = rand_tensor([c, 1, kh, kw], &mut rng);
            let got = conv2d_forward(&x, &wt, None, &geom);
            let want = naive_conv(&x, &wt, None, &geom);
            assert!(got.max_abs_diff(&want) < 1e-12, "forward {kh}x{kw} s{stride}");
            let g = rand_tensor(got.shape(), &mut rng);
            let (dx, dw, _) = conv2d_backward(&x, &wt, &g, &geom, true, false);
            let lhs: f64 = got.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data().iter().zip(dx.unwrap().data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = wt.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10 && (lhs - via_w).abs() < 1e-10, "backward {kh}x{kw} s{stride}");
        }
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(-2, 4), 2);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(5, 4), 1);
        assert_eq!(reflect(3, 4), 3);
    }

    #[test]
    fn resample_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let maps = [
            Resample2d::bilinear((4, 6), (8, 12)),
            Resample2d::bilinear((8, 6), (5, 3)),
            Resample2d::nearest((3, 4), (6, 8)),
            Resample2d::pyr_reduce((8, 6)),
            Resample2d::pyr_expand((4, 3)),
            Resample2d::area((8, 6), 2),
        ];
        for m in &maps {
            let (h, w) = m.in_hw();
            let (ho, wo) = m.out_hw();
            let x = rand_tensor([1, 2, h, w], &mut rng);
            let g = rand_tensor([1, 2, ho, wo], &mut rng);
            let y = m.apply(&x);
            let gt = m.apply_transpose(&g);
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(gt.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolating_maps_have_unit_row_sums() {
        for m in [
            LinearMap1d::bilinear(5, 10),
            LinearMap1d::pyr_reduce(8),
            LinearMap1d::pyr_expand(4),
            LinearMap1d::area(9, 3),
        ] {
            for row in &m.taps {
                let s: f64 = row.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bilinear_doubling_uses_quarter_weights() {
        let m = LinearMap1d::bilinear(2, 4);
        assert_eq!(m.taps[0], vec![(0, 1.0)]);
        assert_eq!(m.taps[1], vec![(0, 0.75), (1, 0.25)]);
        assert_eq!(m.taps[2], vec![(0, 0.25), (1, 0.75)]);
        assert_eq!(m.taps[3], vec![(1, 1.0)]);
    }
}
