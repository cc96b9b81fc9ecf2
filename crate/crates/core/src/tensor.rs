//! Dense row-major `f64` tensors and the handful of primitives every layer
//! is built from: planar correlation, exact lattice rotation, softmax and a
//! central-difference gradient oracle.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    /// Entries drawn i.i.d. from U[lo, hi).
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entrywise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

/// Planar correlation `out(λ,u) = Σ_{λ',u'} in(λ', u+u') · w(λ,λ',u')`.
///
/// `input` is `[C_in, H, W]`, `filter` is `[C_out, C_in, kH, kW]`; the
/// filter is not flipped. Output spatial size is `H + 2·padding − kH + 1`.
pub fn conv2d(input: &Tensor, filter: &Tensor, padding: usize) -> Result<Tensor> {
    let geom = ConvGeometry::check(input.shape(), filter.shape(), padding)?;
    let mut out = vec![0.0; geom.c_out * geom.oh * geom.ow];
    geom.forward(input.data(), filter.data(), &mut out);
    Tensor::new(vec![geom.c_out, geom.oh, geom.ow], out)
}

/// Vector-Jacobian products of [`conv2d`]: returns `(grad_input, grad_filter)`.
pub fn conv2d_backward(
    input: &Tensor,
    filter: &Tensor,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let geom = ConvGeometry::check(input.shape(), filter.shape(), padding)?;
    if grad_out.shape() != [geom.c_out, geom.oh, geom.ow] {
        return shape_err(format!(
            "conv2d upstream gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            [geom.c_out, geom.oh, geom.ow]
        ));
    }
    let mut gin = vec![0.0; input.len()];
    let mut gf = vec![0.0; filter.len()];
    geom.backward_input(grad_out.data(), filter.data(), &mut gin);
    geom.backward_filter(grad_out.data(), input.data(), &mut gf);
    Ok((
        Tensor::new(input.shape().to_vec(), gin)?,
        Tensor::new(filter.shape().to_vec(), gf)?,
    ))
}

/// Shape bookkeeping plus the slice-level kernels behind [`conv2d`]. The
/// group convolutions reuse these directly on flattened channel stacks.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn check(input: &[usize], filter: &[usize], pad: usize) -> Result<Self> {
        let [c_in, h, w] = input else {
            return shape_err(format!("conv2d input must be [C,H,W], got {input:?}"));
        };
        let [c_out, fc_in, kh, kw] = filter else {
            return shape_err(format!(
                "conv2d filter must be [C_out,C_in,kH,kW], got {filter:?}"
            ));
        };
        Self::new(*c_in, *h, *w, *c_out, *fc_in, *kh, *kw, pad)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        filter_c_in: usize,
        kh: usize,
        kw: usize,
        pad: usize,
    ) -> Result<Self> {
        if c_in == 0 || h == 0 || w == 0 {
            return shape_err(format!("conv2d input has a zero-size axis: [{c_in},{h},{w}]"));
        }
        if c_out == 0 {
            return shape_err("conv2d filter has zero output channels");
        }
        if filter_c_in != c_in {
            return shape_err(format!(
                "conv2d channel mismatch: input has {c_in}, filter expects {filter_c_in}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel must have odd sides, got {kh}x{kw}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        })
    }

    /// Rows `y` of the output for which input row `y + ky − pad` exists.
    fn rows(&self, k: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k);
        let hi = (self.h + self.pad).saturating_sub(k).min(self.oh);
        (lo, hi.max(lo))
    }

    fn cols(&self, k: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k);
        let hi = (self.w + self.pad).saturating_sub(k).min(self.ow);
        (lo, hi.max(lo))
    }

    pub fn forward(&self, input: &[f64], filter: &[f64], out: &mut [f64]) {
        let (h, w, oh, ow) = (self.h, self.w, self.oh, self.ow);
        let ksz = self.kh * self.kw;
        for co in 0..self.c_out {
            let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..self.c_in {
                let in_c = &input[ci * h * w..(ci + 1) * h * w];
                let f = &filter[(co * self.c_in + ci) * ksz..][..ksz];
                for ky in 0..self.kh {
                    let (y0, y1) = self.rows(ky);
                    for kx in 0..self.kw {
                        let wv = f[ky * self.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = self.cols(kx);
                        if x0 == x1 {
                            continue;
                        }
                        let shift = x0 + kx - self.pad;
                        for y in y0..y1 {
                            let iy = y + ky - self.pad;
                            let src = &in_c[iy * w + shift..][..x1 - x0];
                            let dst = &mut out_c[y * ow + x0..y * ow + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn backward_input(&self, grad_out: &[f64], filter: &[f64], grad_in: &mut [f64]) {
        let (h, w, oh, ow) = (self.h, self.w, self.oh, self.ow);
        let ksz = self.kh * self.kw;
        for co in 0..self.c_out {
            let g_c = &grad_out[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..self.c_in {
                let gi_c = &mut grad_in[ci * h * w..(ci + 1) * h * w];
                let f = &filter[(co * self.c_in + ci) * ksz..][..ksz];
                for ky in 0..self.kh {
                    let (y0, y1) = self.rows(ky);
                    for kx in 0..self.kw {
                        let wv = f[ky * self.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = self.cols(kx);
                        if x0 == x1 {
                            continue;
                        }
                        let shift = x0 + kx - self.pad;
                        for y in y0..y1 {
                            let iy = y + ky - self.pad;
                            let src = &g_c[y * ow + x0..y * ow + x1];
                            let dst = &mut gi_c[iy * w + shift..][..x1 - x0];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn backward_filter(&self, grad_out: &[f64], input: &[f64], grad_filter: &mut [f64]) {
        let (h, w, oh, ow) = (self.h, self.w, self.oh, self.ow);
        let ksz = self.kh * self.kw;
        for co in 0..self.c_out {
            let g_c = &grad_out[co * oh * ow..(co + 1) * oh * ow];
            for ci in 0..self.c_in {
                let in_c = &input[ci * h * w..(ci + 1) * h * w];
                let gf = &mut grad_filter[(co * self.c_in + ci) * ksz..][..ksz];
                for ky in 0..self.kh {
                    let (y0, y1) = self.rows(ky);
                    for kx in 0..self.kw {
                        let (x0, x1) = self.cols(kx);
                        if x0 == x1 {
                            continue;
                        }
                        let shift = x0 + kx - self.pad;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let iy = y + ky - self.pad;
                            let a = &g_c[y * ow + x0..y * ow + x1];
                            let b = &in_c[iy * w + shift..][..x1 - x0];
                            acc += a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
                        }
                        gf[ky * self.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Counter-clockwise rotation of a square `[H,W]` plane by `k` quarter turns.
pub fn rotate90(plane: &Tensor, k: i64) -> Result<Tensor> {
    let [h, w] = plane.shape() else {
        return shape_err(format!("rotate90 expects a [H,W] plane, got {:?}", plane.shape()));
    };
    if h != w {
        return Err(Error::InvalidArgument(format!(
            "rotate90 needs a square plane, got {h}x{w}"
        )));
    }
    let mut out = vec![0.0; plane.len()];
    rotate_square(plane.data(), *h, k, &mut out);
    Tensor::new(plane.shape().to_vec(), out)
}

/// Mirror a `[H,W]` plane left-to-right.
pub fn flip_horizontal(plane: &Tensor) -> Result<Tensor> {
    let [h, w] = plane.shape() else {
        return shape_err(format!("flip expects a [H,W] plane, got {:?}", plane.shape()));
    };
    let mut out = vec![0.0; plane.len()];
    flip_rows(plane.data(), *h, *w, &mut out);
    Tensor::new(plane.shape().to_vec(), out)
}

pub(crate) fn rotate_square(src: &[f64], n: usize, k: i64, dst: &mut [f64]) {
    let k = k.rem_euclid(4);
    for i in 0..n {
        for j in 0..n {
            let v = match k {
                0 => src[i * n + j],
                1 => src[j * n + (n - 1 - i)],
                2 => src[(n - 1 - i) * n + (n - 1 - j)],
                _ => src[(n - 1 - j) * n + i],
            };
            dst[i * n + j] = v;
        }
    }
}

pub(crate) fn flip_rows(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            dst[i * w + j] = src[i * w + (w - 1 - j)];
        }
    }
}

/// Numerically stable softmax of a 1-D tensor.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 1 {
        return shape_err(format!("softmax expects a vector, got {:?}", x.shape()));
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    Ok(Tensor::from_vec(softmax_slice(x.data())))
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite_diff_grad needs eps > 0");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe);
        probe.data[i] = orig - eps;
        let down = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, the comparison used by every gradient check.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
