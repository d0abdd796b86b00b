//! Invertible layers with exact log-determinants and hand-written VJPs.
//!
//! Tensors are `[N, C, H, W]`. Every layer offers a forward (normalizing)
//! and inverse (generative) pass, plus reverse-mode rules for both: the
//! forward rule yields parameter gradients for training, the inverse rule
//! yields latent gradients for MAP inference.

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_grad_input, conv2d_grad_params, sigmoid_scalar, Padding, Real, Tensor};

use super::linalg::Lu;

/// Offset added to the raw log-scale before the sigmoid, so a zero network
/// output gives `s = sigmoid(2)`.
pub const SCALE_SHIFT: f64 = 2.0;

/// Smallest `|det W|` accepted for the 1x1 convolution.
pub const MIN_ABS_DET: f64 = 1e-12;

/// ActNorm scale used when a channel has zero variance at initialization.
pub const MAX_INIT_SCALE: f64 = 1e6;

pub(crate) fn split_channels<T: Real>(x: &Tensor<T>, c1: usize) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let c2 = c - c1;
    let mut a = Vec::with_capacity(n * c1 * plane);
    let mut b = Vec::with_capacity(n * c2 * plane);
    for i in 0..n {
        let sample = &x.data()[i * c * plane..(i + 1) * c * plane];
        a.extend_from_slice(&sample[..c1 * plane]);
        b.extend_from_slice(&sample[c1 * plane..]);
    }
    (
        Tensor::new(vec![n, c1, s[2], s[3]], a).unwrap(),
        Tensor::new(vec![n, c2, s[2], s[3]], b).unwrap(),
    )
}

pub(crate) fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    debug_assert!(sa[0] == sb[0] && sa[2..] == sb[2..]);
    let (n, plane) = (sa[0], sa[2] * sa[3]);
    let (ca, cb) = (sa[1], sb[1]);
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, sa[2], sa[3]], out).unwrap()
}

/// Space-to-depth by 2: `x[n, c, 2i+dy, 2j+dx] -> y[n, 4c + 2dy + dx, i, j]`.
pub fn squeeze<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("cannot squeeze odd extent {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::zero(); x.len()];
    let d = x.data();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let oc = 4 * ci + 2 * (i % 2) + (j % 2);
                    out[((ni * 4 * c + oc) * h2 + i / 2) * w2 + j / 2] = d[((ni * c + ci) * h + i) * w + j];
                }
            }
        }
    }
    Tensor::new(vec![n, 4 * c, h2, w2], out)
}

/// Inverse of [`squeeze`].
pub fn unsqueeze<T: Real>(y: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c4, h2, w2] = y.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::Shape(format!("cannot unsqueeze {c4} channels")));
    }
    let (c, h, w) = (c4 / 4, h2 * 2, w2 * 2);
    let mut out = vec![T::zero(); y.len()];
    let d = y.data();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let oc = 4 * ci + 2 * (i % 2) + (j % 2);
                    out[((ni * c + ci) * h + i) * w + j] = d[((ni * c4 + oc) * h2 + i / 2) * w2 + j / 2];
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Per-channel affine map `y = x * exp(log_scale) + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActNorm<T> {
    pub log_scale: Tensor<T>,
    pub bias: Tensor<T>,
    pub initialized: bool,
}

impl<T: Real> ActNorm<T> {
    pub fn identity(channels: usize) -> Self {
        ActNorm {
            log_scale: Tensor::zeros(&[channels]),
            bias: Tensor::zeros(&[channels]),
            initialized: false,
        }
    }

    fn plane_map(&self, x: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Tensor<T> {
        let s = x.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        let mut out = x.clone();
        for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = k % c;
            chunk.iter_mut().for_each(|v| *v = f(ch, *v));
        }
        out
    }

    /// Log-determinant contribution, identical for every sample.
    pub fn logdet(&self, plane: usize) -> T {
        T::lit(plane as f64) * self.log_scale.data().iter().copied().sum::<T>()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let scale: Vec<T> = self.log_scale.data().iter().map(|v| v.exp()).collect();
        let b = self.bias.data();
        self.plane_map(x, |c, v| v * scale[c] + b[c])
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Tensor<T> {
        let inv: Vec<T> = self.log_scale.data().iter().map(|v| (-*v).exp()).collect();
        let b = self.bias.data();
        self.plane_map(y, |c, v| (v - b[c]) * inv[c])
    }

    /// Reverse-mode rule of [`forward`](Self::forward). `gld_total` is the
    /// sum over samples of the log-det cotangent.
    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, gld_total: T) -> (Tensor<T>, [Tensor<T>; 2]) {
        let s = x.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        let scale: Vec<T> = self.log_scale.data().iter().map(|v| v.exp()).collect();
        let mut g_ls = vec![gld_total * T::lit(plane as f64); c];
        let mut g_b = vec![T::zero(); c];
        let mut gx = gy.clone();
        for (k, (gchunk, xchunk)) in gx.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
            let ch = k % c;
            let mut sb = T::zero();
            let mut sl = T::zero();
            for (g, &xv) in gchunk.iter_mut().zip(xchunk) {
                sb += *g;
                sl += *g * xv;
                *g *= scale[ch];
            }
            g_b[ch] += sb;
            g_ls[ch] += sl * scale[ch];
        }
        (gx, [Tensor::new(vec![c], g_ls).unwrap(), Tensor::new(vec![c], g_b).unwrap()])
    }

    /// Reverse-mode rule of [`inverse`](Self::inverse) w.r.t. its input.
    pub fn inverse_backward(&self, gx: &Tensor<T>) -> Tensor<T> {
        let inv: Vec<T> = self.log_scale.data().iter().map(|v| (-*v).exp()).collect();
        self.plane_map(gx, |c, v| v * inv[c])
    }

    /// Data-dependent initialization: per-channel zero mean and unit
    /// variance of the output on `x`. Returns channels whose scale was
    /// clamped because of zero variance.
    pub fn initialize(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        if self.initialized {
            return Err(Error::State("actnorm layer is already initialized".into()));
        }
        let [n, c, h, w] = x.dims4()?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut clamped = Vec::new();
        for ch in 0..c {
            let values = || (0..n).flat_map(move |ni| x.data()[(ni * c + ch) * plane..][..plane].iter().map(|v| v.as_f64()));
            let mean = values().sum::<f64>() / count;
            let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let scale = if var > 0.0 {
                (1.0 / var.sqrt()).min(MAX_INIT_SCALE)
            } else {
                clamped.push(ch);
                MAX_INIT_SCALE
            };
            self.log_scale.data_mut()[ch] = T::lit(scale.ln());
            self.bias.data_mut()[ch] = T::lit(-mean * scale);
        }
        self.initialized = true;
        Ok(clamped)
    }
}

/// Invertible channel mixing with a learned `C x C` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct InvConv1x1<T> {
    pub weight: Tensor<T>,
}

/// Inverse and log-abs-determinant of the 1x1 weight, evaluated in f64.
pub(crate) struct Factored<T> {
    pub inverse: Vec<T>,
    pub log_abs_det: T,
}

impl<T: Real> InvConv1x1<T> {
    pub fn channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub(crate) fn factor(&self) -> Result<Factored<T>> {
        let c = self.channels();
        let w: Vec<f64> = self.weight.data().iter().map(|v| v.as_f64()).collect();
        let lu = Lu::new(&w, c);
        let det = lu.det();
        if !(det.abs() > MIN_ABS_DET) {
            return Err(Error::Singular(det.abs()));
        }
        Ok(Factored {
            inverse: lu.inverse().into_iter().map(T::lit).collect(),
            log_abs_det: T::lit(lu.log_abs_det()),
        })
    }

    /// `y[n, i] = sum_j m[i, j] * x[n, j]` per pixel; `transpose` uses `m^T`.
    fn mix(m: &[T], x: &Tensor<T>, transpose: bool) -> Tensor<T> {
        let s = x.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![T::zero(); x.len()];
        for ni in 0..n {
            let src = &x.data()[ni * c * plane..(ni + 1) * c * plane];
            let dst = &mut out[ni * c * plane..(ni + 1) * c * plane];
            for i in 0..c {
                let drow = &mut dst[i * plane..(i + 1) * plane];
                for j in 0..c {
                    let coef = if transpose { m[j * c + i] } else { m[i * c + j] };
                    for (d, &v) in drow.iter_mut().zip(&src[j * plane..(j + 1) * plane]) {
                        *d += coef * v;
                    }
                }
            }
        }
        Tensor::new(s.to_vec(), out).unwrap()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        Self::mix(self.weight.data(), x, false)
    }

    pub(crate) fn inverse_with(f: &Factored<T>, y: &Tensor<T>) -> Tensor<T> {
        Self::mix(&f.inverse, y, false)
    }

    pub(crate) fn backward(
        &self,
        f: &Factored<T>,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        gld_total: T,
    ) -> (Tensor<T>, Tensor<T>) {
        let gx = Self::mix(self.weight.data(), gy, true);
        let s = x.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut gw = vec![T::zero(); c * c];
        let ld_coef = gld_total * T::lit(plane as f64);
        for i in 0..c {
            for j in 0..c {
                let mut acc = T::zero();
                for ni in 0..n {
                    let g = &gy.data()[(ni * c + i) * plane..][..plane];
                    let xv = &x.data()[(ni * c + j) * plane..][..plane];
                    acc += g.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>();
                }
                // d log|det W| / dW = W^{-T}
                gw[i * c + j] = acc + ld_coef * f.inverse[j * c + i];
            }
        }
        (gx, Tensor::new(vec![c, c], gw).unwrap())
    }

    pub(crate) fn inverse_backward(f: &Factored<T>, gx: &Tensor<T>) -> Tensor<T> {
        Self::mix(&f.inverse, gx, true)
    }
}

/// Affine coupling: `(log s, t) = NN(a2)`, `s = sigmoid(log s + 2)`,
/// `b1 = s * a1 + t`, `b2 = a2`. NN is 3x3 conv, ReLU, 1x1 conv, ReLU, 3x3
/// conv (the last one zero-initialized).
#[derive(Clone, Debug, PartialEq)]
pub struct AffineCoupling<T> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub conv3_w: Tensor<T>,
    pub conv3_b: Tensor<T>,
}

/// Activations kept from a coupling evaluation for its reverse-mode rule.
pub(crate) struct CouplingTape<T> {
    a1: Tensor<T>,
    a2: Tensor<T>,
    r1: Tensor<T>,
    r2: Tensor<T>,
    s: Tensor<T>,
}

fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| {
        if !(*v > T::zero()) {
            *v = T::zero()
        }
    });
}

fn relu_mask<T: Real>(g: &mut Tensor<T>, act: &Tensor<T>) {
    for (gv, &a) in g.data_mut().iter_mut().zip(act.data()) {
        if !(a > T::zero()) {
            *gv = T::zero();
        }
    }
}

impl<T: Real> AffineCoupling<T> {
    pub fn half_channels(&self) -> usize {
        self.conv1_w.dim(1)
    }

    /// Runs NN on `a2`; returns (post-ReLU activations, scale `s`, shift `t`).
    fn network(&self, a2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>)> {
        let mut r1 = conv2d(a2, &self.conv1_w, &self.conv1_b, Padding::Same)?;
        relu_inplace(&mut r1);
        let mut r2 = conv2d(&r1, &self.conv2_w, &self.conv2_b, Padding::Same)?;
        relu_inplace(&mut r2);
        let h = conv2d(&r2, &self.conv3_w, &self.conv3_b, Padding::Same)?;
        let (raw, t) = split_channels(&h, self.half_channels());
        let shift = T::lit(SCALE_SHIFT);
        let s = raw.map(|v| sigmoid_scalar(v + shift));
        Ok((r1, r2, s, t))
    }

    fn sum_log_s(s: &Tensor<T>) -> Vec<T> {
        let n = s.dim(0);
        let per = s.len() / n.max(1);
        s.data().chunks(per.max(1)).take(n).map(|c| c.iter().map(|v| v.ln()).sum()).collect()
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, CouplingTape<T>)> {
        let (a1, a2) = split_channels(x, self.half_channels());
        let (r1, r2, s, t) = self.network(&a2)?;
        let mut b1 = a1.clone();
        for ((b, &sv), &tv) in b1.data_mut().iter_mut().zip(s.data()).zip(t.data()) {
            *b = sv * *b + tv;
        }
        let y = concat_channels(&b1, &a2);
        let ld = Self::sum_log_s(&s);
        Ok((y, ld, CouplingTape { a1, a2, r1, r2, s }))
    }

    /// Inverse pass; the returned log-det is that of the inverse map.
    pub(crate) fn inverse(&self, y: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, CouplingTape<T>)> {
        let (b1, a2) = split_channels(y, self.half_channels());
        let (r1, r2, s, t) = self.network(&a2)?;
        let mut a1 = b1;
        for ((a, &sv), &tv) in a1.data_mut().iter_mut().zip(s.data()).zip(t.data()) {
            *a = (*a - tv) / sv;
        }
        let x = concat_channels(&a1, &a2);
        let ld = Self::sum_log_s(&s).into_iter().map(|v| -v).collect();
        Ok((x, ld, CouplingTape { a1, a2, r1, r2, s }))
    }

    /// Backpropagates `gh` (cotangent of the NN output) to the NN input,
    /// optionally accumulating parameter gradients.
    fn network_backward(
        &self,
        tape: &CouplingTape<T>,
        gh: &Tensor<T>,
        want_params: bool,
    ) -> Result<(Tensor<T>, Option<[Tensor<T>; 6]>)> {
        let mut gr2 = conv2d_grad_input(tape.r2.shape(), &self.conv3_w, gh, Padding::Same)?;
        relu_mask(&mut gr2, &tape.r2);
        let mut gr1 = conv2d_grad_input(tape.r1.shape(), &self.conv2_w, &gr2, Padding::Same)?;
        relu_mask(&mut gr1, &tape.r1);
        let ga2 = conv2d_grad_input(tape.a2.shape(), &self.conv1_w, &gr1, Padding::Same)?;
        if !want_params {
            return Ok((ga2, None));
        }
        let (g3w, g3b) = conv2d_grad_params(&tape.r2, self.conv3_w.shape(), gh, Padding::Same)?;
        let (g2w, g2b) = conv2d_grad_params(&tape.r1, self.conv2_w.shape(), &gr2, Padding::Same)?;
        let (g1w, g1b) = conv2d_grad_params(&tape.a2, self.conv1_w.shape(), &gr1, Padding::Same)?;
        Ok((ga2, Some([g1w, g1b, g2w, g2b, g3w, g3b])))
    }

    /// Reverse-mode rule of the forward pass. `gld[n]` is the log-det
    /// cotangent of sample `n`.
    pub(crate) fn backward(
        &self,
        tape: &CouplingTape<T>,
        gy: &Tensor<T>,
        gld: &[T],
    ) -> Result<(Tensor<T>, [Tensor<T>; 6])> {
        let (gb1, gb2) = split_channels(gy, self.half_channels());
        let per = tape.s.len() / tape.s.dim(0);
        let one = T::one();
        let mut ga1 = gb1.clone();
        let mut graw = gb1.clone();
        for (k, ((ga, gr), (&s, &a1))) in ga1
            .data_mut()
            .iter_mut()
            .zip(graw.data_mut().iter_mut())
            .zip(tape.s.data().iter().zip(tape.a1.data()))
            .enumerate()
        {
            let g = *ga;
            *ga = g * s;
            // d/draw of (g * (s * a1) + gld * log s), s = sigmoid(raw + 2)
            *gr = g * a1 * s * (one - s) + gld[k / per] * (one - s);
        }
        let gh = concat_channels(&graw, &gb1);
        let (ga2_nn, grads) = self.network_backward(tape, &gh, true)?;
        let mut ga2 = gb2;
        for (a, &b) in ga2.data_mut().iter_mut().zip(ga2_nn.data()) {
            *a += b;
        }
        Ok((concat_channels(&ga1, &ga2), grads.unwrap()))
    }

    /// Reverse-mode rule of the inverse pass w.r.t. its input.
    pub(crate) fn inverse_backward(&self, tape: &CouplingTape<T>, gx: &Tensor<T>) -> Result<Tensor<T>> {
        let (ga1, ga2) = split_channels(gx, self.half_channels());
        let one = T::one();
        let mut gb1 = ga1.clone();
        let mut graw = ga1.clone();
        let mut gt = ga1;
        for (((gb, gr), gtv), (&s, &a1)) in gb1
            .data_mut()
            .iter_mut()
            .zip(graw.data_mut().iter_mut())
            .zip(gt.data_mut().iter_mut())
            .zip(tape.s.data().iter().zip(tape.a1.data()))
        {
            let g = *gb;
            *gb = g / s;
            *gtv = -g / s;
            // a1 = (b1 - t) / s  =>  d a1 / d raw = -a1 * (1 - s)
            *gr = -g * a1 * (one - s);
        }
        let gh = concat_channels(&graw, &gt);
        let (ga2_nn, _) = self.network_backward(tape, &gh, false)?;
        let mut gb2 = ga2;
        for (a, &b) in gb2.data_mut().iter_mut().zip(ga2_nn.data()) {
            *a += b;
        }
        Ok(concat_channels(&gb1, &gb2))
    }
}
