//! Glow-style multi-scale normalizing flow over square single-channel
//! patches.
//!
//! Each level squeezes by 2, applies `K` steps of actnorm, invertible 1x1
//! convolution and affine coupling, and optionally factors out half of its
//! channels as a latent. The base distribution is a standard normal over the
//! concatenation of all latents.

mod checkpoint;
mod layers;
mod linalg;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use layers::{squeeze, unsqueeze, ActNorm, AffineCoupling, InvConv1x1, MAX_INIT_SCALE, MIN_ABS_DET, SCALE_SHIFT};

use layers::{concat_channels, split_channels, CouplingTape, Factored};

/// Standard deviation of the Gaussian init of the first two coupling convs.
const HIDDEN_INIT_STD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTopology {
    #[serde(alias = "patch")]
    pub patch_size: usize,
    pub levels: usize,
    #[serde(alias = "steps")]
    pub steps_per_level: usize,
    #[serde(alias = "hidden")]
    pub hidden_channels: usize,
    /// Whether half of the channels are factored out after each level.
    /// Defaults to every level but the last.
    #[serde(default)]
    pub split_after_level: Vec<bool>,
}

impl FlowTopology {
    pub fn new(patch_size: usize, levels: usize, steps_per_level: usize, hidden_channels: usize) -> Self {
        FlowTopology {
            patch_size,
            levels,
            steps_per_level,
            hidden_channels,
            split_after_level: (0..levels).map(|l| l + 1 < levels).collect(),
        }
    }

    /// Fills in the default split pattern when it was left empty.
    pub fn normalized(mut self) -> Self {
        if self.split_after_level.is_empty() {
            self.split_after_level = (0..self.levels).map(|l| l + 1 < self.levels).collect();
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Topology(m));
        if self.levels == 0 || self.steps_per_level == 0 || self.hidden_channels == 0 {
            return bad(format!("levels, steps and hidden width must be positive: {self:?}"));
        }
        if self.patch_size == 0 || self.patch_size % (1 << self.levels) != 0 {
            return bad(format!(
                "patch size {} is not divisible by 2^{}",
                self.patch_size, self.levels
            ));
        }
        if self.split_after_level.len() != self.levels {
            return bad(format!(
                "split_after_level has {} entries for {} levels",
                self.split_after_level.len(),
                self.levels
            ));
        }
        if self.split_after_level[self.levels - 1] {
            return bad("the last level cannot split".into());
        }
        let mut c = 1;
        for &split in &self.split_after_level {
            c *= 4;
            if c % 2 != 0 || (split && c % 2 != 0) {
                return bad(format!("odd channel count {c}"));
            }
            if split {
                c /= 2;
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// `[C, H, W]` of every latent part, in emission order.
    pub fn latent_shapes(&self) -> Vec<[usize; 3]> {
        let mut shapes = Vec::new();
        let (mut c, mut h) = (1, self.patch_size);
        for &split in &self.split_after_level {
            c *= 4;
            h /= 2;
            if split {
                shapes.push([c / 2, h, h]);
                c /= 2;
            }
        }
        shapes.push([c, h, h]);
        shapes
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Squeeze,
    ActNorm(ActNorm<T>),
    InvConv(InvConv1x1<T>),
    Coupling(AffineCoupling<T>),
    /// Factors out the second half of the channels as a latent.
    Split,
}

impl<T: Real> Layer<T> {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Squeeze => "squeeze",
            Layer::ActNorm(_) => "actnorm",
            Layer::InvConv(_) => "invconv",
            Layer::Coupling(_) => "coupling",
            Layer::Split => "split",
        }
    }

    fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::ActNorm(a) => vec![("log_scale", &a.log_scale), ("bias", &a.bias)],
            Layer::InvConv(c) => vec![("weight", &c.weight)],
            Layer::Coupling(c) => vec![
                ("conv1.weight", &c.conv1_w),
                ("conv1.bias", &c.conv1_b),
                ("conv2.weight", &c.conv2_w),
                ("conv2.bias", &c.conv2_b),
                ("conv3.weight", &c.conv3_w),
                ("conv3.bias", &c.conv3_b),
            ],
            Layer::Squeeze | Layer::Split => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::ActNorm(a) => vec![&mut a.log_scale, &mut a.bias],
            Layer::InvConv(c) => vec![&mut c.weight],
            Layer::Coupling(c) => vec![
                &mut c.conv1_w,
                &mut c.conv1_b,
                &mut c.conv2_w,
                &mut c.conv2_b,
                &mut c.conv3_w,
                &mut c.conv3_b,
            ],
            Layer::Squeeze | Layer::Split => vec![],
        }
    }
}

/// Multi-scale latent tensors, one `[N, C, H, W]` part per split plus the
/// final level output.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<T> {
    pub parts: Vec<Tensor<T>>,
}

impl<T: Real> LatentState<T> {
    pub fn zeros(topology: &FlowTopology, n: usize) -> Self {
        LatentState {
            parts: topology
                .latent_shapes()
                .iter()
                .map(|&[c, h, w]| Tensor::zeros(&[n, c, h, w]))
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.parts.first().map_or(0, |p| p.dim(0))
    }

    /// Latent dimensionality per sample.
    pub fn dim(&self) -> usize {
        self.parts.iter().map(|p| p.len() / p.dim(0).max(1)).sum()
    }

    /// Squared norm of each sample's full latent vector.
    pub fn sq_norms(&self) -> Vec<T> {
        let n = self.batch();
        let mut out = vec![T::zero(); n];
        for p in &self.parts {
            let per = p.len() / n.max(1);
            for (i, chunk) in p.data().chunks(per.max(1)).take(n).enumerate() {
                out[i] += chunk.iter().map(|&v| v * v).sum::<T>();
            }
        }
        out
    }

    /// Row-major `[N, D]` flattening (per sample, parts in order).
    pub fn to_flat(&self) -> Vec<T> {
        let n = self.batch();
        let mut out = Vec::with_capacity(n * self.dim());
        for i in 0..n {
            for p in &self.parts {
                let per = p.len() / n;
                out.extend_from_slice(&p.data()[i * per..(i + 1) * per]);
            }
        }
        out
    }

    pub fn from_flat(topology: &FlowTopology, n: usize, flat: &[T]) -> Result<Self> {
        let shapes = topology.latent_shapes();
        let d = topology.dim();
        if flat.len() != n * d {
            return Err(Error::Shape(format!(
                "{} latent values for {n} samples of dimension {d}",
                flat.len()
            )));
        }
        let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(n * s.iter().product::<usize>())).collect();
        for i in 0..n {
            let mut off = i * d;
            for (k, s) in shapes.iter().enumerate() {
                let per: usize = s.iter().product();
                parts[k].extend_from_slice(&flat[off..off + per]);
                off += per;
            }
        }
        Ok(LatentState {
            parts: parts
                .into_iter()
                .zip(&shapes)
                .map(|(data, &[c, h, w])| Tensor::new(vec![n, c, h, w], data).unwrap())
                .collect(),
        })
    }
}

/// Gradients aligned with [`FlowModel::params`].
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub grads: Vec<Tensor<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| {
                let v = v.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }
}

/// Output of [`FlowModel::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub latent: LatentState<T>,
    /// `log |det J|` per sample.
    pub logdet: Vec<T>,
}

enum FwdTape<T> {
    None,
    Input(Tensor<T>),
    Conv(Tensor<T>, Factored<T>),
    Coupling(CouplingTape<T>),
}

enum InvTape<T> {
    None,
    Conv(Factored<T>),
    Coupling(CouplingTape<T>),
}

/// Intermediate state of an inverse pass, enough to run [`FlowModel::latent_vjp`].
pub struct InverseTape<T> {
    tapes: Vec<InvTape<T>>,
    batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    topology: FlowTopology,
    layers: Vec<Layer<T>>,
}

impl<T: Real> FlowModel<T> {
    /// Builds a freshly initialized flow: identity actnorm (awaiting
    /// data-dependent init), orthogonal 1x1 weights, zero final coupling conv.
    pub fn build(topology: FlowTopology, seed: u64) -> Result<Self> {
        let topology = topology.normalized();
        topology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = topology.hidden_channels;
        let mut normal = |shape: &[usize], std: f64| {
            Tensor::from_fn(shape, |_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
        };
        let mut layers = Vec::new();
        let mut c = 1;
        let mut ortho_seeds = Vec::new();
        for &split in &topology.split_after_level {
            layers.push(Layer::Squeeze);
            c *= 4;
            let half = c / 2;
            for _ in 0..topology.steps_per_level {
                layers.push(Layer::ActNorm(ActNorm::identity(c)));
                ortho_seeds.push(layers.len());
                layers.push(Layer::InvConv(InvConv1x1 {
                    weight: Tensor::zeros(&[c, c]),
                }));
                layers.push(Layer::Coupling(AffineCoupling {
                    conv1_w: normal(&[hidden, half, 3, 3], HIDDEN_INIT_STD),
                    conv1_b: Tensor::zeros(&[hidden]),
                    conv2_w: normal(&[hidden, hidden, 1, 1], HIDDEN_INIT_STD),
                    conv2_b: Tensor::zeros(&[hidden]),
                    conv3_w: Tensor::zeros(&[c, hidden, 3, 3]),
                    conv3_b: Tensor::zeros(&[c]),
                }));
            }
            if split {
                layers.push(Layer::Split);
                c = half;
            }
        }
        let mut orng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for i in ortho_seeds {
            if let Layer::InvConv(conv) = &mut layers[i] {
                let c = conv.channels();
                let q = linalg::random_orthogonal(c, &mut orng);
                conv.weight = Tensor::new(vec![c, c], q.into_iter().map(T::lit).collect())?;
            }
        }
        Ok(FlowModel { topology, layers })
    }

    pub fn topology(&self) -> &FlowTopology {
        &self.topology
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Number of invertible layers excluding splits.
    pub fn num_layers(&self) -> usize {
        self.layers.iter().filter(|l| !matches!(l, Layer::Split)).count()
    }

    pub fn num_splits(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Split)).count()
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::ActNorm(a) => a.initialized,
            _ => true,
        })
    }

    /// Data-dependent actnorm initialization: each actnorm layer, in
    /// sequence, is fitted to the activations produced by the layers before
    /// it on `x`. Returns `(layer index, channel)` pairs whose scale was
    /// clamped because of zero variance.
    pub fn initialize_actnorm(&mut self, x: &Tensor<T>) -> Result<Vec<(usize, usize)>> {
        self.check_input(x)?;
        if self.layers.iter().any(|l| matches!(l, Layer::ActNorm(a) if a.initialized)) {
            return Err(Error::State("actnorm layers are already initialized".into()));
        }
        let mut h = x.clone();
        let mut clamped = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = match layer {
                Layer::Squeeze => squeeze(&h)?,
                Layer::Split => split_channels(&h, h.dim(1) / 2).0,
                Layer::ActNorm(a) => {
                    clamped.extend(a.initialize(&h)?.into_iter().map(|c| (i, c)));
                    a.forward(&h)
                }
                Layer::InvConv(c) => {
                    c.factor()?;
                    c.forward(&h)
                }
                Layer::Coupling(c) => c.forward(&h)?.0,
            };
        }
        if !clamped.is_empty() {
            log::warn!(
                "{} actnorm channel(s) had zero variance; scale clamped at {MAX_INIT_SCALE}",
                clamped.len()
            );
        }
        Ok(clamped)
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut level = 0;
        let mut step = 0;
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Squeeze => {
                    level += 1;
                    step = 0;
                }
                Layer::ActNorm(_) => step += 1,
                _ => {}
            }
            for (name, t) in layer.params() {
                out.push((format!("level{}.step{}.{}.{}", level - 1, step - 1, layer.kind(), name), t));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Real>(&self) -> FlowModel<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Squeeze => Layer::Squeeze,
                Layer::Split => Layer::Split,
                Layer::ActNorm(a) => Layer::ActNorm(ActNorm {
                    log_scale: a.log_scale.cast(),
                    bias: a.bias.cast(),
                    initialized: a.initialized,
                }),
                Layer::InvConv(c) => Layer::InvConv(InvConv1x1 { weight: c.weight.cast() }),
                Layer::Coupling(c) => Layer::Coupling(AffineCoupling {
                    conv1_w: c.conv1_w.cast(),
                    conv1_b: c.conv1_b.cast(),
                    conv2_w: c.conv2_w.cast(),
                    conv2_b: c.conv2_b.cast(),
                    conv3_w: c.conv3_w.cast(),
                    conv3_b: c.conv3_b.cast(),
                }),
            })
            .collect();
        FlowModel {
            topology: self.topology.clone(),
            layers,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let p = self.topology.patch_size;
        match x.shape() {
            &[n, 1, h, w] if h == p && w == p => Ok(n),
            s => Err(Error::Shape(format!("flow input {s:?}, expected [N, 1, {p}, {p}]"))),
        }
    }

    fn forward_impl(&self, x: &Tensor<T>, keep_tape: bool) -> Result<(ForwardOutput<T>, Vec<FwdTape<T>>)> {
        let n = self.check_input(x)?;
        let mut h = x.clone();
        let mut logdet = vec![T::zero(); n];
        let mut parts = Vec::new();
        let mut tapes = Vec::with_capacity(if keep_tape { self.layers.len() } else { 0 });
        for layer in &self.layers {
            let tape = match layer {
                Layer::Squeeze => {
                    h = squeeze(&h)?;
                    FwdTape::None
                }
                Layer::Split => {
                    let c = h.dim(1);
                    let (keep, out) = split_channels(&h, c / 2);
                    parts.push(out);
                    h = keep;
                    FwdTape::None
                }
                Layer::ActNorm(a) => {
                    let ld = a.logdet(h.dim(2) * h.dim(3));
                    logdet.iter_mut().for_each(|v| *v += ld);
                    let y = a.forward(&h);
                    FwdTape::Input(std::mem::replace(&mut h, y))
                }
                Layer::InvConv(c) => {
                    let f = c.factor()?;
                    let ld = f.log_abs_det * T::lit((h.dim(2) * h.dim(3)) as f64);
                    logdet.iter_mut().for_each(|v| *v += ld);
                    let y = c.forward(&h);
                    FwdTape::Conv(std::mem::replace(&mut h, y), f)
                }
                Layer::Coupling(c) => {
                    let (y, ld, tape) = c.forward(&h)?;
                    logdet.iter_mut().zip(ld).for_each(|(v, l)| *v += l);
                    h = y;
                    FwdTape::Coupling(tape)
                }
            };
            if keep_tape {
                tapes.push(tape);
            }
        }
        parts.push(h);
        Ok((
            ForwardOutput {
                latent: LatentState { parts },
                logdet,
            },
            tapes,
        ))
    }

    /// Normalizing direction `z = f(x)` with per-sample `log |det J|`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        Ok(self.forward_impl(x, false)?.0)
    }

    fn check_latent(&self, z: &LatentState<T>) -> Result<usize> {
        let shapes = self.topology.latent_shapes();
        let n = z.batch();
        let ok = z.parts.len() == shapes.len()
            && z.parts.iter().zip(&shapes).all(|(p, &[c, h, w])| p.shape() == [n, c, h, w]);
        if !ok {
            let got: Vec<_> = z.parts.iter().map(|p| p.shape().to_vec()).collect();
            return Err(Error::Shape(format!(
                "latent parts {got:?} do not match topology shapes {shapes:?}"
            )));
        }
        Ok(n)
    }

    fn inverse_impl(&self, z: &LatentState<T>, keep_tape: bool) -> Result<(Tensor<T>, Vec<T>, InverseTape<T>)> {
        let n = self.check_latent(z)?;
        let mut parts = z.parts.iter().rev();
        let mut h = parts.next().unwrap().clone();
        let mut logdet = vec![T::zero(); n];
        let mut tapes = Vec::with_capacity(if keep_tape { self.layers.len() } else { 0 });
        for layer in self.layers.iter().rev() {
            let tape = match layer {
                Layer::Squeeze => {
                    h = unsqueeze(&h)?;
                    InvTape::None
                }
                Layer::Split => {
                    h = concat_channels(&h, parts.next().unwrap());
                    InvTape::None
                }
                Layer::ActNorm(a) => {
                    let ld = a.logdet(h.dim(2) * h.dim(3));
                    logdet.iter_mut().for_each(|v| *v -= ld);
                    h = a.inverse(&h);
                    InvTape::None
                }
                Layer::InvConv(c) => {
                    let f = c.factor()?;
                    let ld = f.log_abs_det * T::lit((h.dim(2) * h.dim(3)) as f64);
                    logdet.iter_mut().for_each(|v| *v -= ld);
                    h = InvConv1x1::inverse_with(&f, &h);
                    InvTape::Conv(f)
                }
                Layer::Coupling(c) => {
                    let (x, ld, tape) = c.inverse(&h)?;
                    logdet.iter_mut().zip(ld).for_each(|(v, l)| *v += l);
                    h = x;
                    InvTape::Coupling(tape)
                }
            };
            if keep_tape {
                tapes.push(tape);
            }
        }
        Ok((h, logdet, InverseTape { tapes, batch: n }))
    }

    /// Generative direction `x = f^{-1}(z)`.
    pub fn inverse(&self, z: &LatentState<T>) -> Result<Tensor<T>> {
        Ok(self.inverse_impl(z, false)?.0)
    }

    /// Inverse pass that also returns `log |det J_{f^{-1}}|` per sample.
    pub fn inverse_with_logdet(&self, z: &LatentState<T>) -> Result<(Tensor<T>, Vec<T>)> {
        let (x, ld, _) = self.inverse_impl(z, false)?;
        Ok((x, ld))
    }

    /// Inverse pass keeping the intermediates for [`latent_vjp`](Self::latent_vjp).
    pub fn inverse_taped(&self, z: &LatentState<T>) -> Result<(Tensor<T>, InverseTape<T>)> {
        let (x, _, tape) = self.inverse_impl(z, true)?;
        Ok((x, tape))
    }

    /// Vector-Jacobian product of the inverse pass recorded in `tape`.
    pub fn latent_vjp(&self, tape: &InverseTape<T>, upstream_on_x: &Tensor<T>) -> Result<LatentState<T>> {
        let p = self.topology.patch_size;
        if upstream_on_x.shape() != [tape.batch, 1, p, p] {
            return Err(Error::Shape(format!(
                "upstream {:?} does not match [{}, 1, {p}, {p}]",
                upstream_on_x.shape(),
                tape.batch
            )));
        }
        let mut g = upstream_on_x.clone();
        let mut parts = Vec::new();
        // tapes are in inverse-pass order (last layer first); walk them backwards
        for (layer, t) in self.layers.iter().zip(tape.tapes.iter().rev()) {
            g = match (layer, t) {
                (Layer::Squeeze, _) => squeeze(&g)?,
                (Layer::Split, _) => {
                    let c = g.dim(1);
                    let (keep, out) = split_channels(&g, c / 2);
                    parts.push(out);
                    keep
                }
                (Layer::ActNorm(a), _) => a.inverse_backward(&g),
                (Layer::InvConv(_), InvTape::Conv(f)) => InvConv1x1::inverse_backward(f, &g),
                (Layer::Coupling(c), InvTape::Coupling(ct)) => c.inverse_backward(ct, &g)?,
                _ => unreachable!("tape does not match layer"),
            };
        }
        parts.push(g);
        Ok(LatentState { parts })
    }

    /// Gradient of `<upstream_on_x, f^{-1}(z)>` w.r.t. `z`.
    pub fn grad_latent(&self, z: &LatentState<T>, upstream_on_x: &Tensor<T>) -> Result<LatentState<T>> {
        let (_, tape) = self.inverse_taped(z)?;
        self.latent_vjp(&tape, upstream_on_x)
    }

    /// Negative log-likelihood in nats per sample under a standard-normal base.
    pub fn nll(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let out = self.forward(x)?;
        Ok(nll_from(&out, self.topology.dim()))
    }

    /// Draws `n` samples with latents `~ N(0, temperature^2 I)`.
    pub fn sample(&self, n: usize, temperature: f64, seed: u64) -> Result<Tensor<T>> {
        if !(temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {temperature}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = LatentState::zeros(&self.topology, n);
        for p in &mut z.parts {
            for v in p.data_mut() {
                *v = T::lit(temperature * rng.sample::<f64, _>(StandardNormal));
            }
        }
        self.inverse(&z)
    }

    /// Mean NLL over the batch and its exact gradient w.r.t. every parameter.
    pub fn grad_params(&self, x: &Tensor<T>) -> Result<(T, ParamGrads<T>)> {
        let (out, tapes) = self.forward_impl(x, true)?;
        let n = out.logdet.len();
        let nll = nll_from(&out, self.topology.dim());
        let mean = nll.iter().copied().sum::<T>() / T::lit(n as f64);
        let inv_n = T::one() / T::lit(n as f64);
        // d mean / d z = z / N, d mean / d logdet = -1 / N
        let gld = vec![-inv_n; n];
        let gld_total = -T::one();
        let mut zgrads = out.latent.parts.iter().rev().map(|p| p.map(|v| v * inv_n));
        let mut g = zgrads.next().unwrap();
        let mut layer_grads: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.layers.len());
        for (layer, tape) in self.layers.iter().zip(tapes.iter()).rev() {
            let (gx, pg) = match (layer, tape) {
                (Layer::Squeeze, _) => (unsqueeze(&g)?, vec![]),
                (Layer::Split, _) => (concat_channels(&g, &zgrads.next().unwrap()), vec![]),
                (Layer::ActNorm(a), FwdTape::Input(x)) => {
                    let (gx, [gl, gb]) = a.backward(x, &g, gld_total);
                    (gx, vec![gl, gb])
                }
                (Layer::InvConv(c), FwdTape::Conv(x, f)) => {
                    let (gx, gw) = c.backward(f, x, &g, gld_total);
                    (gx, vec![gw])
                }
                (Layer::Coupling(c), FwdTape::Coupling(t)) => {
                    let (gx, grads) = c.backward(t, &g, &gld)?;
                    (gx, grads.into())
                }
                _ => unreachable!("tape does not match layer"),
            };
            g = gx;
            layer_grads.push(pg);
        }
        layer_grads.reverse();
        Ok((
            mean,
            ParamGrads {
                grads: layer_grads.into_iter().flatten().collect(),
            },
        ))
    }
}

fn nll_from<T: Real>(out: &ForwardOutput<T>, dim: usize) -> Vec<T> {
    let half_log_2pi = T::lit(0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln());
    let half = T::lit(0.5);
    out.latent
        .sq_norms()
        .into_iter()
        .zip(&out.logdet)
        .map(|(sq, &ld)| half * sq + half_log_2pi - ld)
        .collect()
}

/// Converts nats per patch to bits per dimension.
pub fn bits_per_dim(nll_nats: f64, dim: usize) -> f64 {
    nll_nats / (dim as f64 * std::f64::consts::LN_2)
}
