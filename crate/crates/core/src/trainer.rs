//! Maximum-likelihood training: Adam, gradient clipping, data-dependent
//! actnorm initialization, loss history and periodic checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{bits_per_dim, save_checkpoint, FlowModel};
use crate::patches::PatchBatch;
use crate::tensor::{Real, Tensor};

/// Width of the uniform dequantization noise (one 8-bit level).
pub const DEQUANT_WIDTH: f64 = 1.0 / 256.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub num_batches: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-component clamp; `None` disables it.
    pub clip_value: Option<f64>,
    /// Global L2 norm limit; `None` disables it.
    pub clip_global_norm: Option<f64>,
    pub seed: u64,
    /// Checkpoint period in batches; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub dequantize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            num_batches: 2000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_value: Some(5.0),
            clip_global_norm: Some(100.0),
            seed: 0,
            checkpoint_every: 0,
            dequantize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("Adam eps must be positive, got {}", self.eps));
        }
        for (name, clip) in [("clip_value", self.clip_value), ("clip_global_norm", self.clip_global_norm)] {
            if let Some(c) = clip {
                if !(c > 0.0) {
                    return bad(format!("{name} must be positive when enabled, got {c}"));
                }
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

impl Adam {
    /// One bias-corrected Adam update of `theta` at step `t >= 1`, on flat
    /// slices of equal length.
    pub fn update<T: Real>(&self, theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64) {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let c1 = T::lit(1.0 - self.beta1.powf(t as f64));
        let c2 = T::lit(1.0 - self.beta2.powf(t as f64));
        let lr = T::lit(self.lr);
        for (((th, &g), mi), vi) in theta.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            *th -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
}

/// First and second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self
    where
        T: 'a,
    {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { v: m.clone(), m, t: 0 }
    }
}

/// Applies one Adam step to every parameter.
pub fn adam_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, adam: &Adam) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        adam.update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), t);
    }
    Ok(())
}

/// Clamps every component to `[-clip_value, clip_value]`, then rescales
/// all gradients so their global L2 norm is at most `clip_global_norm`.
pub fn clip_gradients<T: Real>(grads: &mut [Tensor<T>], clip_value: Option<f64>, clip_global_norm: Option<f64>) -> Result<()> {
    if let Some(c) = clip_value {
        if !(c > 0.0) {
            return Err(Error::Config(format!("clip value must be positive, got {c}")));
        }
        let (lo, hi) = (T::lit(-c), T::lit(c));
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = v.max(lo).min(hi));
        }
    }
    if let Some(limit) = clip_global_norm {
        if !(limit > 0.0) {
            return Err(Error::Config(format!("clip norm must be positive, got {limit}")));
        }
        let norm = global_norm(grads);
        if norm > limit {
            let f = T::lit(limit / norm);
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= f);
            }
        }
    }
    Ok(())
}

fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Initializes every actnorm layer of `model` from `batch`.
pub fn init_actnorm<T: Real>(model: &mut FlowModel<T>, batch: &Tensor<T>) -> Result<()> {
    model.initialize_actnorm(batch).map(|_| ())
}

/// One row of the loss history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub batch_index: usize,
    pub nll_nats: f64,
    pub bits_per_dim: f64,
    pub grad_norm_preclip: f64,
}

/// Loss history as CSV (`batch_index,nll_nats,bits_per_dim,grad_norm_preclip`).
pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("batch_index,nll_nats,bits_per_dim,grad_norm_preclip\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.batch_index, r.nll_nats, r.bits_per_dim, r.grad_norm_preclip);
    }
    out
}

pub fn write_loss_csv(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, loss_csv(history)).map_err(|e| Error::io(path, e))
}

/// Draws training batches: a seeded permutation of the corpus, reshuffled
/// at every epoch boundary, with optional dequantization noise.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..n).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next<T: Real>(&mut self, corpus: &PatchBatch, batch: usize, dequantize: bool) -> Tensor<T> {
        let p = corpus.patch_size();
        let mut data = Vec::with_capacity(batch * p * p);
        for _ in 0..batch {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let idx = self.order[self.cursor];
            self.cursor += 1;
            for &v in corpus.patch(idx) {
                let noise = if dequantize {
                    self.rng.random::<f64>() * DEQUANT_WIDTH
                } else {
                    0.0
                };
                data.push(T::lit(v as f64 + noise));
            }
        }
        Tensor::new(vec![batch, 1, p, p], data).expect("batch shape")
    }
}

/// Trains `model` on `corpus`. The first batch initializes actnorm when the
/// model is fresh. With a checkpoint path, the model is saved every
/// `checkpoint_every` batches and at the end; a non-finite loss aborts
/// without overwriting the last checkpoint.
pub fn train<T: Real>(
    model: &mut FlowModel<T>,
    corpus: &PatchBatch,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<LossRecord>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if corpus.patch_size() != model.topology().patch_size {
        return Err(Error::Shape(format!(
            "corpus patches are {}px, model expects {}px",
            corpus.patch_size(),
            model.topology().patch_size
        )));
    }
    let dim = model.topology().dim();
    let adam = config.adam();
    let mut sampler = BatchSampler::new(corpus.len(), config.seed);
    let mut state = AdamState::new(model.params().into_iter().map(|(_, t)| t));
    let mut history = Vec::with_capacity(config.num_batches);
    for b in 0..config.num_batches {
        let x = sampler.next::<T>(corpus, config.batch_size, config.dequantize);
        if b == 0 && !model.actnorm_initialized() {
            init_actnorm(model, &x)?;
        }
        let (nll, mut grads) = model.grad_params(&x)?;
        let nll = nll.as_f64();
        if !nll.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss { batch: b });
        }
        let grad_norm = grads.global_norm();
        clip_gradients(&mut grads.grads, config.clip_value, config.clip_global_norm)?;
        adam_step(&mut model.params_mut(), &grads.grads, &mut state, &adam)?;
        history.push(LossRecord {
            batch_index: b,
            nll_nats: nll,
            bits_per_dim: bits_per_dim(nll, dim),
            grad_norm_preclip: grad_norm,
        });
        if b % 100 == 0 {
            log::info!("batch {b}: {nll:.4} nats, {:.4} bits/dim", bits_per_dim(nll, dim));
        }
        if let Some(path) = checkpoint {
            let last = b + 1 == config.num_batches;
            if last || (config.checkpoint_every > 0 && (b + 1) % config.checkpoint_every == 0) {
                save_checkpoint(model, path)?;
            }
        }
    }
    Ok(history)
}

/// Mean NLL in nats of `batch` under `model`, evaluated in chunks.
pub fn mean_nll<T: Real>(model: &FlowModel<T>, batch: &PatchBatch, chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < batch.len() {
        let end = (start + chunk).min(batch.len());
        let x: Tensor<T> = batch.slice(start, end).into_data().cast();
        total += model.nll(&x)?.iter().map(|v| v.as_f64()).sum::<f64>();
        start = end;
    }
    Ok(total / batch.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowTopology;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn clipping_examples() {
        let mut g = vec![Tensor::new(vec![2], vec![0.5f64, -0.25]).unwrap()];
        let orig = g.clone();
        clip_gradients(&mut g, Some(1.0), Some(10.0)).unwrap();
        assert_eq!(g, orig);

        let mut g = vec![Tensor::new(vec![1], vec![10.0f64]).unwrap()];
        clip_gradients(&mut g, Some(1.0), None).unwrap();
        assert_eq!(g[0].data(), &[1.0]);

        let mut g = vec![
            Tensor::new(vec![1], vec![3.0f64]).unwrap(),
            Tensor::new(vec![1], vec![4.0f64]).unwrap(),
        ];
        clip_gradients(&mut g, Some(10.0), Some(2.5)).unwrap();
        assert!((g[0].data()[0] - 1.5).abs() < 1e-12 && (g[1].data()[0] - 2.0).abs() < 1e-12);

        assert!(clip_gradients(&mut g, Some(0.0), None).is_err());
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        let adam = Adam {
            lr: 0.1,
            ..Adam::default()
        };
        let mut theta = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let g = vec![Tensor::new(vec![1], vec![1.0f64]).unwrap()];
        let mut state = AdamState::new([&theta]);
        adam_step(&mut [&mut theta], &g, &mut state, &adam).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        assert!((theta.data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut theta = Tensor::new(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap();
        let before = theta.clone();
        let mut state = AdamState::new([&theta]);
        adam_step(&mut [&mut theta], &[Tensor::zeros(&[3])], &mut state, &Adam::default()).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut theta = Tensor::<f64>::zeros(&[2]);
        let mut state = AdamState::new([&theta]);
        let r = adam_step(&mut [&mut theta], &[Tensor::zeros(&[3])], &mut state, &Adam::default());
        assert!(r.is_err());
    }

    proptest! {
        #[test]
        fn adam_is_sign_equivariant(g in prop::collection::vec(-10.0f64..10.0, 1..8), steps in 1usize..4) {
            let n = g.len();
            let gt = Tensor::new(vec![n], g.clone()).unwrap();
            let neg = gt.map(|v| -v);
            let mut a = Tensor::<f64>::zeros(&[n]);
            let mut b = Tensor::<f64>::zeros(&[n]);
            let mut sa = AdamState::new([&a]);
            let mut sb = AdamState::new([&b]);
            for _ in 0..steps {
                adam_step(&mut [&mut a], std::slice::from_ref(&gt), &mut sa, &Adam::default()).unwrap();
                adam_step(&mut [&mut b], std::slice::from_ref(&neg), &mut sb, &Adam::default()).unwrap();
            }
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert_eq!(*x, -*y);
            }
        }

        #[test]
        fn clipped_gradients_respect_both_limits(g in prop::collection::vec(-50.0f64..50.0, 1..20), cv in 0.1f64..10.0, cn in 0.1f64..10.0) {
            let mut grads = vec![Tensor::new(vec![g.len()], g).unwrap()];
            clip_gradients(&mut grads, Some(cv), Some(cn)).unwrap();
            prop_assert!(grads[0].data().iter().all(|v| v.abs() <= cv + 1e-12));
            prop_assert!(global_norm(&grads) <= cn * (1.0 + 1e-12));
        }
    }

    fn blob_corpus(n: usize, p: usize, seed: u64) -> PatchBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * p * p);
        for _ in 0..n {
            let (cy, cx) = (rng.random_range(0.0..p as f64), rng.random_range(0.0..p as f64));
            let amp = rng.random_range(0.3..0.7);
            for r in 0..p {
                for c in 0..p {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    data.push((0.2 + amp * (-d2 / 8.0).exp()) as f32);
                }
            }
        }
        PatchBatch::new(p, Tensor::new(vec![n, 1, p, p], data).unwrap(), None).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let corpus = blob_corpus(512, 8, 1);
        let config = TrainConfig {
            batch_size: 32,
            num_batches: 150,
            learning_rate: 2e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = FlowModel::<f32>::build(FlowTopology::new(8, 1, 2, 8), 2).unwrap();
            let h = train(&mut m, &corpus, &config, None).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(loss_csv(&h1), loss_csv(&h2));
        assert_eq!(m1, m2);
        assert!(h1.iter().all(|r| r.nll_nats.is_finite()));
        let head: f64 = h1[..10].iter().map(|r| r.nll_nats).sum::<f64>() / 10.0;
        let tail: f64 = h1[140..].iter().map(|r| r.nll_nats).sum::<f64>() / 10.0;
        assert!(tail < head, "{tail} >= {head}");
    }

    #[test]
    fn constant_corpus_collapses_samples() {
        let p = 4;
        let corpus = PatchBatch::new(p, Tensor::full(&[64, 1, p, p], 0.3f32), None).unwrap();
        let config = TrainConfig {
            batch_size: 32,
            num_batches: 300,
            learning_rate: 5e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut m = FlowModel::<f64>::build(FlowTopology::new(p, 1, 2, 4), 0).unwrap();
        let h = train(&mut m, &corpus, &config, None).unwrap();
        // the dequantized data is uniform on a box of width 1/256 per pixel,
        // whose entropy per pixel is ln(1/256)
        let floor = p as f64 * p as f64 * DEQUANT_WIDTH.ln();
        let last = h.last().unwrap().nll_nats;
        assert!(last > floor - 1.0, "{last} below the entropy floor {floor}");
        let samples = m.sample(8, 1.0, 5).unwrap();
        for s in samples.data().chunks(p * p) {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64;
            assert!((mean - 0.3).abs() < 0.02, "sample mean {mean}");
            assert!(var < 1e-3, "sample variance {var}");
        }
    }

    #[test]
    fn checkpoints_and_errors() {
        let corpus = blob_corpus(16, 4, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nfus");
        let config = TrainConfig {
            batch_size: 4,
            num_batches: 1,
            ..TrainConfig::default()
        };
        let mut m = FlowModel::<f32>::build(FlowTopology::new(4, 1, 1, 2), 0).unwrap();
        let h = train(&mut m, &corpus, &config, Some(&path)).unwrap();
        assert_eq!(h.len(), 1);
        let back: FlowModel<f32> = crate::flow::load_checkpoint(&path).unwrap();
        assert_eq!(back, m);

        let empty = PatchBatch::empty(4);
        assert!(train(&mut m, &empty, &config, None).is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..config.clone()
        };
        assert!(train(&mut m, &corpus, &bad, None).is_err());
        let mut wrong = FlowModel::<f32>::build(FlowTopology::new(8, 1, 1, 2), 0).unwrap();
        assert!(train(&mut wrong, &corpus, &config, None).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_index() {
        let mut data = vec![0.5f32; 8 * 16];
        data[3] = f32::NAN;
        let corpus = PatchBatch::new(4, Tensor::new(vec![8, 1, 4, 4], data).unwrap(), None).unwrap();
        let mut m = FlowModel::<f32>::build(FlowTopology::new(4, 1, 1, 2), 0).unwrap();
        for layer in m.layers_mut() {
            if let crate::flow::Layer::ActNorm(a) = layer {
                a.initialized = true;
            }
        }
        let config = TrainConfig {
            batch_size: 2,
            num_batches: 10,
            ..TrainConfig::default()
        };
        match train(&mut m, &corpus, &config, None) {
            Err(Error::NonFiniteLoss { batch }) => assert!(batch < 4),
            other => panic!("unexpected {other:?}"),
        }
    }
}
