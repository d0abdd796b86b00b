//! Dense row-major tensors and the differentiable primitives the flow needs.
//!
//! Every operation is a pure function of its inputs. Reductions and
//! convolutions accumulate in a fixed order (channel, then kernel row, then
//! kernel column for each output element), so results are bit-reproducible
//! at a given precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training and
/// inference) and `f64` (gradient checks).
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    /// Extent of dimension `i`, panicking on out-of-range axes.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub(crate) fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            s => Err(Error::Shape(format!("expected a 4-d tensor, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    // offset added to an output coordinate to get the input coordinate of tap 0
    off_y: isize,
    off_x: isize,
}

impl ConvGeom {
    fn new<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, padding: Padding) -> Result<Self> {
        let [n, c, h, w] = input.dims4()?;
        let [o, kc, kh, kw] = kernel.dims4()?;
        if kc != c {
            return Err(Error::Shape(format!(
                "kernel expects {kc} input channels, input has {c}"
            )));
        }
        let (oh, ow, off_y, off_x) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::Shape(format!(
                        "same padding needs odd kernel extents, got {kh}x{kw}"
                    )));
                }
                (h, w, -((kh / 2) as isize), -((kw / 2) as isize))
            }
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::Shape(format!(
                        "kernel {kh}x{kw} larger than input {h}x{w}"
                    )));
                }
                (h - kh + 1, w - kw + 1, 0, 0)
            }
        };
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            off_y,
            off_x,
        })
    }

    /// Output index range along one axis for which `out + tap + off` is a
    /// valid input index.
    #[inline]
    fn taps(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn sample<'a, T>(&self, data: &'a [T], n: usize) -> &'a [T] {
        let len = self.c * self.h * self.w;
        &data[n * len..(n + 1) * len]
    }

    /// Unfolds one sample into `[taps, oh * ow]` rows ordered by
    /// `(channel, ki, kj)`; taps falling outside the input are zero.
    fn im2col<T: Real>(&self, src: &[T], col: &mut [T]) {
        let out_plane = self.oh * self.ow;
        let in_plane = self.h * self.w;
        if self.kh == 1 && self.kw == 1 && self.off_y == 0 && self.off_x == 0 {
            col.copy_from_slice(src);
            return;
        }
        col.fill(T::zero());
        for c in 0..self.c {
            let plane = &src[c * in_plane..(c + 1) * in_plane];
            for ki in 0..self.kh {
                let (y0, y1) = Self::valid_range(self.oh, self.h, ki, self.off_y);
                for kj in 0..self.kw {
                    let (x0, x1) = Self::valid_range(self.ow, self.w, kj, self.off_x);
                    if x0 >= x1 {
                        continue;
                    }
                    let row = &mut col[((c * self.kh + ki) * self.kw + kj) * out_plane..][..out_plane];
                    let sx = (x0 as isize + kj as isize + self.off_x) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + ki as isize + self.off_y) as usize;
                        row[y * self.ow + x0..y * self.ow + x1]
                            .copy_from_slice(&plane[sy * self.w + sx..sy * self.w + sx + (x1 - x0)]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters rows back onto the input
    /// grid, accumulating into `dst`.
    fn col2im_add<T: Real>(&self, col: &[T], dst: &mut [T]) {
        let out_plane = self.oh * self.ow;
        let in_plane = self.h * self.w;
        for c in 0..self.c {
            let plane = &mut dst[c * in_plane..(c + 1) * in_plane];
            for ki in 0..self.kh {
                let (y0, y1) = Self::valid_range(self.oh, self.h, ki, self.off_y);
                for kj in 0..self.kw {
                    let (x0, x1) = Self::valid_range(self.ow, self.w, kj, self.off_x);
                    if x0 >= x1 {
                        continue;
                    }
                    let row = &col[((c * self.kh + ki) * self.kw + kj) * out_plane..][..out_plane];
                    let sx = (x0 as isize + kj as isize + self.off_x) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + ki as isize + self.off_y) as usize;
                        let d = &mut plane[sy * self.w + sx..sy * self.w + sx + (x1 - x0)];
                        for (dv, &v) in d.iter_mut().zip(&row[y * self.ow + x0..y * self.ow + x1]) {
                            *dv += v;
                        }
                    }
                }
            }
        }
    }

    fn valid_range(out_len: usize, in_len: usize, tap: usize, off: isize) -> (usize, usize) {
        let shift = tap as isize + off;
        let lo = (-shift).max(0) as usize;
        let hi = (in_len as isize - shift).clamp(0, out_len as isize) as usize;
        (lo.min(hi), hi)
    }
}

/// 2-D cross-correlation over `[N, C, H, W]` with kernel `[O, C, kh, kw]` and
/// zero padding for [`Padding::Same`].
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, padding)?;
    if bias.shape() != [g.o] {
        return Err(Error::Shape(format!(
            "bias shape {:?}, expected [{}]",
            bias.shape(),
            g.o
        )));
    }
    let out_plane = g.oh * g.ow;
    let taps = g.taps();
    let mut out = vec![T::zero(); g.n * g.o * out_plane];
    let mut col = vec![T::zero(); taps * out_plane];
    let k = kernel.data();
    for n in 0..g.n {
        g.im2col(g.sample(input.data(), n), &mut col);
        for o in 0..g.o {
            let dst = &mut out[(n * g.o + o) * out_plane..][..out_plane];
            dst.fill(bias.data()[o]);
            for (&wv, crow) in k[o * taps..(o + 1) * taps].iter().zip(col.chunks_exact(out_plane)) {
                for (d, &s) in dst.iter_mut().zip(crow) {
                    *d += wv * s;
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

/// Gradient of [`conv2d`] with respect to its input only.
pub fn conv2d_grad_input<T: Real>(
    input_shape: &[usize],
    kernel: &Tensor<T>,
    upstream: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_shape);
    let g = ConvGeom::new(&probe, kernel, padding)?;
    check_upstream(&g, upstream)?;
    let in_sample = g.c * g.h * g.w;
    let out_plane = g.oh * g.ow;
    let taps = g.taps();
    let mut gin = vec![T::zero(); g.n * in_sample];
    let mut gcol = vec![T::zero(); taps * out_plane];
    let k = kernel.data();
    let up = upstream.data();
    for n in 0..g.n {
        gcol.fill(T::zero());
        for o in 0..g.o {
            let u = &up[(n * g.o + o) * out_plane..][..out_plane];
            for (&wv, grow) in k[o * taps..(o + 1) * taps].iter().zip(gcol.chunks_exact_mut(out_plane)) {
                for (d, &uv) in grow.iter_mut().zip(u) {
                    *d += wv * uv;
                }
            }
        }
        g.col2im_add(&gcol, &mut gin[n * in_sample..(n + 1) * in_sample]);
    }
    Tensor::new(input_shape.to_vec(), gin)
}

/// Gradients of [`conv2d`] with respect to kernel and bias.
pub fn conv2d_grad_params<T: Real>(
    input: &Tensor<T>,
    kernel_shape: &[usize],
    upstream: &Tensor<T>,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let probe = Tensor::<T>::zeros(kernel_shape);
    let g = ConvGeom::new(input, &probe, padding)?;
    check_upstream(&g, upstream)?;
    let out_plane = g.oh * g.ow;
    let taps = g.taps();
    let mut gk = vec![T::zero(); g.o * taps];
    let mut gb = vec![T::zero(); g.o];
    let mut col = vec![T::zero(); taps * out_plane];
    let up = upstream.data();
    for n in 0..g.n {
        g.im2col(g.sample(input.data(), n), &mut col);
        for o in 0..g.o {
            let u = &up[(n * g.o + o) * out_plane..][..out_plane];
            gb[o] += u.iter().copied().sum::<T>();
            for (gkv, crow) in gk[o * taps..(o + 1) * taps].iter_mut().zip(col.chunks_exact(out_plane)) {
                let mut acc = T::zero();
                for (&uv, &s) in u.iter().zip(crow) {
                    acc += uv * s;
                }
                *gkv += acc;
            }
        }
    }
    Ok((
        Tensor::new(kernel_shape.to_vec(), gk)?,
        Tensor::new(vec![g.o], gb)?,
    ))
}

/// Vector-Jacobian products of [`conv2d`]: `(grad_input, grad_kernel, grad_bias)`.
pub fn vjp_conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    upstream: &Tensor<T>,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let gi = conv2d_grad_input(input.shape(), kernel, upstream, padding)?;
    let (gk, gb) = conv2d_grad_params(input, kernel.shape(), upstream, padding)?;
    Ok((gi, gk, gb))
}

fn check_upstream<T: Real>(g: &ConvGeom, upstream: &Tensor<T>) -> Result<()> {
    let want = [g.n, g.o, g.oh, g.ow];
    if upstream.shape() != want {
        return Err(Error::Shape(format!(
            "upstream shape {:?}, expected {:?}",
            upstream.shape(),
            want
        )));
    }
    Ok(())
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "elementwise operands {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    same_shape(a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    })
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, |x, y| x + y)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, b, |x, y| x * y)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(sigmoid_scalar)
}

pub fn relu<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn exp<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    a.map(T::exp)
}

pub fn log<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(pos) = a.data.iter().position(|&v| !(v > T::zero())) {
        return Err(Error::Domain(format!(
            "log of non-positive value {} at index {pos}",
            a.data[pos]
        )));
    }
    Ok(a.map(T::ln))
}

pub fn vjp_add<T: Real>(upstream: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (upstream.clone(), upstream.clone())
}

pub fn vjp_mul<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((mul(upstream, b)?, mul(upstream, a)?))
}

pub fn vjp_sigmoid<T: Real>(a: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, upstream, |x, u| {
        let s = sigmoid_scalar(x);
        u * s * (T::one() - s)
    })
}

pub fn vjp_relu<T: Real>(a: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, upstream, |x, u| if x > T::zero() { u } else { T::zero() })
}

pub fn vjp_exp<T: Real>(a: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with(a, upstream, |x, u| u * x.exp())
}

pub fn vjp_log<T: Real>(a: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    log(a)?;
    zip_with(a, upstream, |x, u| u / x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct per-output-element loop; summation order matches conv2d.
    fn conv_reference(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        b: &Tensor<f64>,
        padding: Padding,
    ) -> Tensor<f64> {
        let [n, c, h, w] = x.dims4().unwrap();
        let [o, _, kh, kw] = k.dims4().unwrap();
        let (oh, ow, py, px) = match padding {
            Padding::Same => (h, w, (kh / 2) as isize, (kw / 2) as isize),
            Padding::Valid => (h - kh + 1, w - kw + 1, 0, 0),
        };
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[oi];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = y as isize + ki as isize - py;
                                    let ix = xx as isize + kj as isize - px;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += k.data()[((oi * c + ci) * kh + ki) * kw + kj]
                                        * x.data()
                                            [((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn scalar_kernel_doubles() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0f32]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, &b, Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let k = Tensor::zeros(&[4, 3, 3, 3]);
        let y = conv2d(&x, &k, &Tensor::zeros(&[4]), Padding::Same).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_on_ramp_matches_hand_values() {
        // ramp x[i][j] = 4i + j; Sobel-x responds to the column slope only
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let k = Tensor::new(
            vec![1, 1, 3, 3],
            vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        )
        .unwrap();
        let y = conv2d(&x, &k, &Tensor::zeros(&[1]), Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // each response = (1+2+1) * (x[j+1]-x[j-1]) = 4 * 2
        assert_eq!(y.data(), &[8.0, 8.0, 8.0, 8.0]);
        assert_eq!(y, conv_reference(&x, &k, &Tensor::zeros(&[1]), Padding::Valid));
    }

    #[test]
    fn conv_matches_reference_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, c, h, w, o, kh) in &[
            (2, 3, 8, 8, 2, 3),
            (1, 1, 5, 7, 3, 1),
            (2, 2, 4, 3, 1, 3),
            (1, 3, 8, 8, 4, 5),
        ] {
            let x = random(&[n, c, h, w], &mut rng);
            let k = random(&[o, c, kh, kh], &mut rng);
            let b = random(&[o], &mut rng);
            for pad in [Padding::Same, Padding::Valid] {
                let fast = conv2d(&x, &k, &b, pad).unwrap();
                let slow = conv_reference(&x, &k, &b, pad);
                assert_eq!(fast, slow, "{pad:?} {:?}", x.shape());
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &k, &Tensor::zeros(&[1]), Padding::Same),
            Err(Error::Shape(_))
        ));
        let k = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[1]), Padding::Same).is_err());
        let k = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&x, &k, &Tensor::zeros(&[2]), Padding::Same).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let up = Tensor::zeros(&[1, 3, 5, 5]);
        let (gi, gk, gb) = vjp_conv2d(&x, &k, &up, Padding::Same).unwrap();
        assert!(gi.data().iter().chain(gk.data()).chain(gb.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_kernel_gradient_is_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 1, 4, 4], &mut rng);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![0.7]).unwrap();
        let up = random(&[2, 1, 4, 4], &mut rng);
        let (_, gk, _) = vjp_conv2d(&x, &k, &up, Padding::Same).unwrap();
        let dot: f64 = x.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
        assert!((gk.data()[0] - dot).abs() < 1e-12);
    }

    fn rel_close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-5 * a.abs().max(b.abs()) + 1e-7
    }

    #[test]
    fn conv_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let k = random(&[4, 2, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        let up = random(&[1, 4, 5, 5], &mut rng);
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = conv2d(x, k, b, Padding::Same).unwrap();
            y.data().iter().zip(up.data()).map(|(a, u)| a * u).sum()
        };
        let (gi, gk, gb) = vjp_conv2d(&x, &k, &up, Padding::Same).unwrap();
        let eps = 1e-4;
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (loss(&p, &k, &b) - loss(&m, &k, &b)) / (2.0 * eps);
            assert!(rel_close(gi.data()[i], fd), "input {i}: {} vs {fd}", gi.data()[i]);
        }
        for i in 0..k.len() {
            let (mut p, mut m) = (k.clone(), k.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (loss(&x, &p, &b) - loss(&x, &m, &b)) / (2.0 * eps);
            assert!(rel_close(gk.data()[i], fd), "kernel {i}");
        }
        for i in 0..b.len() {
            let (mut p, mut m) = (b.clone(), b.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (loss(&x, &k, &p) - loss(&x, &k, &m)) / (2.0 * eps);
            assert!(rel_close(gb.data()[i], fd), "bias {i}");
        }
    }

    #[test]
    fn pointwise_values() {
        let t = Tensor::new(vec![3], vec![0.0f64, 2.0, -3.0]).unwrap();
        let s = sigmoid(&t);
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((s.data()[1] - 0.880797).abs() < 1e-6);
        assert_eq!(relu(&t).data()[2], 0.0);
        assert!(matches!(log(&t), Err(Error::Domain(_))));
        let pos = Tensor::new(vec![2], vec![1.0f64, std::f64::consts::E]).unwrap();
        assert_eq!(log(&pos).unwrap().data(), &[0.0, 1.0]);
        assert!(add(&t, &pos).is_err());
    }

    #[test]
    fn pointwise_vjps_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[10], &mut rng);
        let b = random(&[10], &mut rng);
        let pos = a.map(|v| v.abs() + 0.5);
        let up = random(&[10], &mut rng);
        let eps = 1e-6;
        let fd = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + eps) - f(x - eps)) / (2.0 * eps);
        let gs = vjp_sigmoid(&a, &up).unwrap();
        let ge = vjp_exp(&a, &up).unwrap();
        let gl = vjp_log(&pos, &up).unwrap();
        let gr = vjp_relu(&a, &up).unwrap();
        let (gma, gmb) = vjp_mul(&a, &b, &up).unwrap();
        let (gaa, gab) = vjp_add(&up);
        for i in 0..10 {
            let u = up.data()[i];
            let x = a.data()[i];
            assert!(rel_close(gs.data()[i], u * fd(&sigmoid_scalar, x)));
            assert!(rel_close(ge.data()[i], u * fd(&f64::exp, x)));
            assert!(rel_close(gl.data()[i], u * fd(&f64::ln, pos.data()[i])));
            assert!(rel_close(gr.data()[i], u * fd(&|v: f64| v.max(0.0), x)));
            assert!(rel_close(gma.data()[i], u * b.data()[i]));
            assert!(rel_close(gmb.data()[i], u * x));
            assert_eq!(gaa.data()[i], u);
            assert_eq!(gab.data()[i], u);
        }
    }
}
