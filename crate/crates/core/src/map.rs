//! MAP inference in latent space: minimize `‖f⁻¹(z) − y‖² + λ‖z‖²` per
//! patch with Adam, plateau learning-rate decay and best-so-far tracking,
//! then tile, stitch and optionally mix back part of the input.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowModel, LatentState};
use crate::image_io::Image;
use crate::patches::{extract_grid, stitch, Blend, PatchBatch};
use crate::tensor::{Real, Tensor};
use crate::trainer::Adam;

/// Minimum relative improvement of the best objective that resets the
/// plateau counter.
pub const PLATEAU_REL_IMPROVEMENT: f64 = 1e-6;

/// Fixed regularization weight for log-compressed ultrasound images.
pub const ULTRASOUND_LAMBDA: f64 = 10.0;

/// Starting point of the latent optimization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentInit {
    /// `z0 = 0`, the decode of the base distribution's mode.
    #[default]
    Zero,
    /// `z0 = f(y)`; patches whose encoding does not decode to a finite
    /// objective restart from `z = 0`. Far from the training data the
    /// inverse of an affine flow can be numerically unusable, so this is
    /// only reliable for mild noise.
    Encode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub min_lr: f64,
    /// Grid stride; `None` means half the patch size.
    pub tile_stride: Option<usize>,
    pub parallel_batch: usize,
    pub mixback_alpha: f64,
    pub init: LatentInit,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            lambda: ULTRASOUND_LAMBDA,
            max_iters: 400,
            lr0: 0.05,
            plateau_patience: 20,
            plateau_factor: 0.5,
            min_lr: 1e-4,
            tile_stride: None,
            parallel_batch: 250,
            mixback_alpha: 0.0,
            init: LatentInit::Zero,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr0 > 0.0) || !(self.min_lr >= 0.0) {
            return bad(format!("learning rates must be positive, got lr0={} min_lr={}", self.lr0, self.min_lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.parallel_batch == 0 {
            return bad("plateau patience and parallel batch must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.mixback_alpha) {
            return bad(format!("mix-back must lie in [0, 1], got {}", self.mixback_alpha));
        }
        let stride = self.stride(patch_size);
        if stride == 0 || stride > patch_size {
            return bad(format!("tile stride {stride} must lie in 1..={patch_size}"));
        }
        Ok(())
    }

    pub fn stride(&self, patch_size: usize) -> usize {
        self.tile_stride.unwrap_or((patch_size / 2).max(1))
    }
}

/// `λ = 0.75 σ²` for additive Gaussian noise of standard deviation `σ`.
pub fn lambda_for_gaussian(sigma: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    Ok(0.75 * sigma * sigma)
}

/// One optimizer iteration of one patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct PatchOutcome {
    pub history: Vec<IterRecord>,
    pub initial_objective: f64,
    pub best_objective: f64,
    /// `‖ẑ‖²` of the reported latent.
    pub latent_sq_norm: f64,
    /// The encoded starting point was unusable and the patch restarted
    /// from `z = 0`.
    pub restarted: bool,
    /// The objective became non-finite; the input patch was returned.
    pub failed: bool,
}

#[derive(Clone, Debug)]
pub struct DenoiseOutput {
    pub patches: PatchBatch,
    pub outcomes: Vec<PatchOutcome>,
}

impl DenoiseOutput {
    pub fn failed_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.failed).count()
    }
}

/// Objective histories as CSV (`patch_index,iter,objective,lr`).
pub fn history_csv(outcomes: &[PatchOutcome]) -> String {
    let mut out = String::from("patch_index,iter,objective,lr\n");
    for (i, o) in outcomes.iter().enumerate() {
        for r in &o.history {
            let _ = writeln!(out, "{i},{},{},{}", r.iter, r.objective, r.lr);
        }
    }
    out
}

struct PatchState<T> {
    z: Vec<T>,
    m: Vec<T>,
    v: Vec<T>,
    best_z: Vec<T>,
    best: f64,
    /// Best objective at the last plateau reset.
    anchor: f64,
    stall: usize,
    lr: f64,
    active: bool,
    outcome: PatchOutcome,
}

/// Runs MAP inference on every patch of `y`, processing at most
/// `config.parallel_batch` patches at a time.
pub fn denoise_patches<T: Real>(model: &FlowModel<T>, y: &PatchBatch, config: &DenoiseConfig) -> Result<DenoiseOutput> {
    let p = model.topology().patch_size;
    if y.patch_size() != p {
        return Err(Error::Shape(format!("patches are {}px, model expects {p}px", y.patch_size())));
    }
    if !model.actnorm_initialized() {
        return Err(Error::State("model actnorm layers are not initialized".into()));
    }
    config.validate(p)?;
    let mut data = Vec::with_capacity(y.data().len());
    let mut outcomes = Vec::with_capacity(y.len());
    let mut start = 0;
    while start < y.len() {
        let end = (start + config.parallel_batch).min(y.len());
        let (x, o) = denoise_chunk(model, &y.slice(start, end), config)?;
        data.extend(x);
        outcomes.extend(o);
        start = end;
    }
    let patches = PatchBatch::new(p, Tensor::new(y.data().shape().to_vec(), data)?, y.coords().map(|c| c.to_vec()))?;
    Ok(DenoiseOutput { patches, outcomes })
}

fn denoise_chunk<T: Real>(model: &FlowModel<T>, y: &PatchBatch, config: &DenoiseConfig) -> Result<(Vec<f32>, Vec<PatchOutcome>)> {
    let topo = model.topology();
    let p = topo.patch_size;
    let (d, n) = (topo.dim(), y.len());
    let y_t: Tensor<T> = y.data().cast();
    let z0 = match config.init {
        LatentInit::Encode => model.forward(&y_t)?.latent.to_flat(),
        LatentInit::Zero => vec![T::zero(); n * d],
    };
    let lambda = T::lit(config.lambda);
    let two = T::lit(2.0);
    let mut states: Vec<PatchState<T>> = z0
        .chunks(d)
        .map(|z| PatchState {
            z: z.to_vec(),
            m: vec![T::zero(); d],
            v: vec![T::zero(); d],
            best_z: z.to_vec(),
            best: f64::INFINITY,
            anchor: f64::INFINITY,
            stall: 0,
            lr: config.lr0,
            active: true,
            outcome: PatchOutcome {
                history: Vec::new(),
                initial_objective: f64::NAN,
                best_objective: f64::INFINITY,
                latent_sq_norm: 0.0,
                restarted: false,
                failed: false,
            },
        })
        .collect();

    for it in 0..=config.max_iters {
        let idx: Vec<usize> = (0..n).filter(|&i| states[i].active).collect();
        if idx.is_empty() {
            break;
        }
        let flat: Vec<T> = idx.iter().flat_map(|&i| states[i].z.iter().copied()).collect();
        let z = LatentState::from_flat(topo, idx.len(), &flat)?;
        let (x, tape) = model.inverse_taped(&z)?;
        let mut resid = Vec::with_capacity(idx.len() * p * p);
        for (k, &i) in idx.iter().enumerate() {
            let xs = &x.data()[k * p * p..(k + 1) * p * p];
            let ys = &y_t.data()[i * p * p..(i + 1) * p * p];
            resid.extend(xs.iter().zip(ys).map(|(&a, &b)| a - b));
        }
        let last = it == config.max_iters;
        let mut needs_grad = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let s = &mut states[i];
            let r = &resid[k * p * p..(k + 1) * p * p];
            let data_term: f64 = r.iter().map(|v| v.as_f64() * v.as_f64()).sum();
            let prior: f64 = s.z.iter().map(|v| v.as_f64() * v.as_f64()).sum();
            let obj = data_term + config.lambda * prior;
            s.outcome.history.push(IterRecord { iter: it, objective: obj, lr: s.lr });
            if !obj.is_finite() && it == 0 && config.init == LatentInit::Encode {
                s.z.iter_mut().for_each(|v| *v = T::zero());
                s.best_z.copy_from_slice(&s.z);
                s.outcome.restarted = true;
                continue;
            }
            if s.outcome.initial_objective.is_nan() {
                s.outcome.initial_objective = obj;
            }
            if !obj.is_finite() {
                log::warn!("non-finite MAP objective at iteration {it}; returning the input patch");
                s.outcome.failed = true;
                s.active = false;
                continue;
            }
            if obj < s.best {
                s.best = obj;
                s.best_z.copy_from_slice(&s.z);
            }
            if s.best < s.anchor * (1.0 - PLATEAU_REL_IMPROVEMENT) || s.anchor.is_infinite() {
                s.anchor = s.best;
                s.stall = 0;
            } else {
                s.stall += 1;
                if s.stall >= config.plateau_patience {
                    s.lr *= config.plateau_factor;
                    s.stall = 0;
                    s.anchor = s.best;
                    if s.lr < config.min_lr {
                        s.active = false;
                        continue;
                    }
                }
            }
            if !last {
                needs_grad.push(k);
            }
        }
        if needs_grad.is_empty() {
            continue;
        }
        let upstream = Tensor::new(x.shape().to_vec(), resid.iter().map(|&v| two * v).collect())?;
        let g = model.latent_vjp(&tape, &upstream)?.to_flat();
        let t = (it + 1) as u64;
        for k in needs_grad {
            let s = &mut states[idx[k]];
            let gk: Vec<T> = g[k * d..(k + 1) * d]
                .iter()
                .zip(&s.z)
                .map(|(&gd, &zv)| gd + two * lambda * zv)
                .collect();
            let adam = Adam {
                lr: s.lr,
                ..Adam::default()
            };
            adam.update(&mut s.z, &gk, &mut s.m, &mut s.v, t);
        }
    }

    let flat: Vec<T> = states.iter().flat_map(|s| s.best_z.iter().copied()).collect();
    let x = model.inverse(&LatentState::from_flat(topo, n, &flat)?)?;
    let mut out = Vec::with_capacity(n * p * p);
    let mut outcomes = Vec::with_capacity(n);
    for (i, s) in states.into_iter().enumerate() {
        let mut o = s.outcome;
        if o.failed {
            out.extend_from_slice(y.patch(i));
        } else {
            out.extend(x.data()[i * p * p..(i + 1) * p * p].iter().map(|v| v.as_f64() as f32));
            o.best_objective = s.best;
            o.latent_sq_norm = s.best_z.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        }
        outcomes.push(o);
    }
    Ok((out, outcomes))
}

/// Result of [`denoise_image`].
#[derive(Clone, Debug)]
pub struct DenoisedImage {
    pub image: Image,
    pub outcomes: Vec<PatchOutcome>,
}

/// Denoises a whole image: overlapping grid, per-patch MAP, Hann-weighted
/// stitching, then `alpha * y + (1 - alpha) * x̂`.
pub fn denoise_image<T: Real>(model: &FlowModel<T>, y: &Image, config: &DenoiseConfig) -> Result<DenoisedImage> {
    let p = model.topology().patch_size;
    config.validate(p)?;
    if y.height() < p || y.width() < p {
        return Err(Error::Shape(format!(
            "image {}x{} is smaller than the {p}x{p} patch",
            y.height(),
            y.width()
        )));
    }
    let alpha = config.mixback_alpha;
    if alpha == 1.0 {
        return Ok(DenoisedImage {
            image: y.clone(),
            outcomes: Vec::new(),
        });
    }
    let grid = extract_grid(y, p, config.stride(p))?;
    let out = denoise_patches(model, &grid, config)?;
    let failed = out.failed_count();
    if failed == out.outcomes.len() {
        return Err(Error::Domain("MAP inference failed on every patch".into()));
    }
    if failed > 0 {
        log::warn!("{failed} of {} patches kept their noisy values", out.outcomes.len());
    }
    let xhat = stitch(&out.patches, y.height(), y.width(), Blend::Hann)?;
    let image = if alpha == 0.0 {
        xhat
    } else {
        let px = xhat
            .pixels()
            .iter()
            .zip(y.pixels())
            .map(|(&x, &v)| (alpha * v as f64 + (1.0 - alpha) * x as f64) as f32)
            .collect();
        y.with_pixels(px)?
    };
    Ok(DenoisedImage {
        image,
        outcomes: out.outcomes,
    })
}
