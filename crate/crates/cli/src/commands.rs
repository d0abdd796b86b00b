use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowprior::baselines::{metrics_csv, nlm, MetricRow, NlmParams};
use flowprior::flow::load_checkpoint;
use flowprior::image_io::{load_image, save_image, ImageFormat};
use flowprior::map::{denoise_image, history_csv, DenoiseConfig, LatentInit};
use flowprior::patches::{make_uniform_patches, read_corpus, sample_focused_patches, write_corpus, SourceImage};
use flowprior::speckle::{add_empirical_speckle, add_gaussian, simulate_speckle, SpeckleConfig};
use flowprior::synthetic::textured_blobs;
use flowprior::trainer::{train, write_loss_csv, TrainConfig};
use flowprior::{FlowModel, Image, PatchBatch, Real};
use log::{info, warn};

use crate::cli::{
    DenoiseArgs, EvaluateArgs, NlmArgs, NoiseMode, SamplePatchesArgs, SimulateArgs, SynthesizeArgs, TrainArgs,
};
use crate::config::{require_dir, require_file, usage, Precision, TopologySpec};

pub fn read_image(path: &Path) -> Result<Image> {
    require_file(path)?;
    load_image(path, ImageFormat::Auto).with_context(|| format!("reading {}", path.display()))
}

pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    save_image(image, path, ImageFormat::Auto).with_context(|| format!("writing {}", path.display()))
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "f32r")
    )
}

/// Loads every `.pgm` and `.f32r` file in `dir`, sorted by file name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<SourceImage>> {
    require_dir(dir)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(usage(format!("no .pgm or .f32r images in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            Ok(SourceImage {
                name: p.file_name().unwrap().to_string_lossy().into_owned(),
                image: read_image(p)?,
            })
        })
        .collect()
}

/// Focused natural patches followed by constant patches. `with_uniform` is
/// the fraction of the total made of constant patches.
pub fn build_corpus(
    images: &[SourceImage],
    count: usize,
    patch: usize,
    keep_fraction: f64,
    with_uniform: f64,
    seed: u64,
) -> Result<(PatchBatch, flowprior::patches::CorpusManifest)> {
    if !(0.0..=1.0).contains(&with_uniform) {
        return Err(usage(format!("--with-uniform must lie in [0, 1], got {with_uniform}")));
    }
    let uniform = (count as f64 * with_uniform).round() as usize;
    let natural = count - uniform;
    let (mut corpus, mut manifest) = if natural > 0 {
        if images.is_empty() {
            return Err(usage("natural patches requested but no source images given"));
        }
        sample_focused_patches(images, natural, patch, keep_fraction, seed)?
    } else {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(usage(format!("keep fraction must lie in (0, 1], got {keep_fraction}")));
        }
        let manifest = flowprior::patches::CorpusManifest {
            records: Vec::new(),
            natural_count: 0,
            uniform_count: 0,
            seed,
            threshold: None,
        };
        (PatchBatch::empty(patch), manifest)
    };
    if uniform > 0 {
        let flat = make_uniform_patches(uniform, patch, 0.0, 1.0, seed.wrapping_add(1))?;
        corpus = corpus.concat(&flat)?;
        manifest.uniform_count = uniform;
    }
    Ok((corpus, manifest))
}

pub fn sample_patches(args: SamplePatchesArgs) -> Result<()> {
    let images = load_image_dir(&args.images)?;
    let (corpus, manifest) =
        build_corpus(&images, args.count, args.patch, args.keep_fraction, args.with_uniform, args.seed)?;
    create_parent(&args.out)?;
    write_corpus(&corpus, &args.out)?;
    let manifest_path = args.manifest.unwrap_or_else(|| args.out.with_extension("manifest.tsv"));
    manifest.write(&manifest_path)?;
    info!(
        "wrote {} patches ({} natural, {} uniform) to {}",
        corpus.len(),
        manifest.natural_count,
        manifest.uniform_count,
        args.out.display()
    );
    Ok(())
}

fn train_typed<T: Real>(
    topology: flowprior::FlowTopology,
    corpus: &PatchBatch,
    config: &TrainConfig,
    out: &Path,
) -> Result<Vec<flowprior::trainer::LossRecord>> {
    let mut model = FlowModel::<T>::build(topology, config.seed)?;
    Ok(train(&mut model, corpus, config, Some(out))?)
}

/// Builds a model from `topology`, trains it and writes the checkpoint to
/// `out`. Returns the loss history.
pub fn train_model(
    topology: flowprior::FlowTopology,
    corpus: &PatchBatch,
    config: &TrainConfig,
    precision: Precision,
    out: &Path,
) -> Result<Vec<flowprior::trainer::LossRecord>> {
    create_parent(out)?;
    match precision {
        Precision::F32 => train_typed::<f32>(topology, corpus, config, out),
        Precision::F64 => train_typed::<f64>(topology, corpus, config, out),
    }
}

pub fn train_cmd(args: TrainArgs) -> Result<()> {
    require_file(&args.corpus)?;
    let topology_spec = TopologySpec::parse(&args.topology)?;
    let config = TrainConfig {
        batch_size: args.batch_size,
        num_batches: args.batches,
        learning_rate: args.lr,
        clip_value: (args.clip_value > 0.0).then_some(args.clip_value),
        clip_global_norm: (args.clip_norm > 0.0).then_some(args.clip_norm),
        seed: args.seed,
        checkpoint_every: args.checkpoint_every,
        dequantize: !args.no_dequantize,
        ..TrainConfig::default()
    };
    config.validate()?;
    let corpus = read_corpus(&args.corpus).with_context(|| format!("reading {}", args.corpus.display()))?;
    let topology = topology_spec.resolve(corpus.patch_size())?;
    info!("training {topology:?} on {} patches", corpus.len());
    let history = train_model(topology, &corpus, &config, args.precision, &args.out)?;
    let loss_path = args.loss_csv.unwrap_or_else(|| args.out.with_extension("loss.csv"));
    create_parent(&loss_path)?;
    write_loss_csv(&history, &loss_path)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        info!("bits/dim {:.4} -> {:.4}", first.bits_per_dim, last.bits_per_dim);
    }
    Ok(())
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    let clean = read_image(&args.input)?;
    let noisy = match args.mode {
        NoiseMode::Gaussian => {
            let sigma = args.sigma.ok_or_else(|| usage("gaussian mode needs --sigma"))?;
            if !(sigma >= 0.0) {
                return Err(usage(format!("--sigma must be >= 0, got {sigma}")));
            }
            add_gaussian(&clean, sigma, args.seed)?
        }
        NoiseMode::Empirical => {
            let eta = args
                .eta_sigma
                .or(args.sigma)
                .ok_or_else(|| usage("empirical mode needs --eta-sigma"))?;
            if !(eta >= 0.0) {
                return Err(usage(format!("--eta-sigma must be >= 0, got {eta}")));
            }
            add_empirical_speckle(&clean, eta, args.seed)?
        }
        NoiseMode::Speckle => {
            let config = SpeckleConfig {
                f0_hz: args.f0_hz,
                c_mps: args.c_mps,
                sigma_rx_mm: args.sigma_rx_mm,
                sigma_ry_mm: args.sigma_ry_mm,
                pixel_spacing_mm: args.pixel_spacing_mm,
                oversample: args.oversample,
                dynamic_range_db: args.dynamic_range_db,
                seed: args.seed,
            };
            config.psf().validate()?;
            simulate_speckle(&clean, &config)?
        }
    };
    create_parent(&args.out)?;
    write_image(&noisy, &args.out)
}

/// Resolved denoising run: the model plus the MAP settings.
pub fn denoise_with(model_path: &Path, precision: Precision, y: &Image, config: &DenoiseConfig) -> Result<DenoiseReport> {
    match precision {
        Precision::F32 => {
            let model: FlowModel<f32> = load_model(model_path)?;
            denoise_report(&model, y, config)
        }
        Precision::F64 => {
            let model: FlowModel<f64> = load_model(model_path)?;
            denoise_report(&model, y, config)
        }
    }
}

pub fn load_model<T: Real>(path: &Path) -> Result<FlowModel<T>> {
    require_file(path)?;
    let model: FlowModel<T> = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    if !model.actnorm_initialized() {
        warn!("{} was saved before actnorm initialization", path.display());
    }
    Ok(model)
}

pub struct DenoiseReport {
    pub image: Image,
    pub history_csv: String,
    pub failed: usize,
    pub restarted: usize,
}

pub fn denoise_report<T: Real>(model: &FlowModel<T>, y: &Image, config: &DenoiseConfig) -> Result<DenoiseReport> {
    let p = model.topology().patch_size;
    config.validate(p).map_err(|e| usage(e.to_string()))?;
    if y.height() < p || y.width() < p {
        bail!("image {}x{} is smaller than the model's {p}x{p} patch", y.height(), y.width());
    }
    let out = denoise_image(model, y, config)?;
    Ok(DenoiseReport {
        history_csv: history_csv(&out.outcomes),
        failed: out.outcomes.iter().filter(|o| o.failed).count(),
        restarted: out.outcomes.iter().filter(|o| o.restarted).count(),
        image: out.image,
    })
}

pub fn denoise(args: DenoiseArgs) -> Result<()> {
    require_file(&args.model)?;
    let y = read_image(&args.input)?;
    let config = DenoiseConfig {
        lambda: args.lambda.value().map_err(|e| usage(e.to_string()))?,
        max_iters: args.max_iters,
        lr0: args.lr,
        tile_stride: args.stride,
        parallel_batch: args.batch,
        mixback_alpha: args.mixback,
        init: if args.encode_init { LatentInit::Encode } else { LatentInit::Zero },
        ..DenoiseConfig::default()
    };
    info!("lambda = {}", config.lambda);
    let report = denoise_with(&args.model, args.precision, &y, &config)?;
    if report.failed > 0 || report.restarted > 0 {
        warn!("{} patches failed, {} restarted from z = 0", report.failed, report.restarted);
    }
    create_parent(&args.out)?;
    write_image(&report.image, &args.out)?;
    if let Some(path) = &args.history_csv {
        create_parent(path)?;
        fs::write(path, &report.history_csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn nlm_cmd(args: NlmArgs) -> Result<()> {
    let params = NlmParams {
        h: args.h,
        patch_size: args.patch,
        patch_distance: args.distance,
    };
    params.validate().map_err(|e| usage(e.to_string()))?;
    let y = read_image(&args.input)?;
    let out = nlm(&y, &params)?;
    create_parent(&args.out)?;
    write_image(&out, &args.out)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let clean = read_image(&args.clean)?;
    let image_id = args.image_id.unwrap_or_else(|| file_stem(&args.clean));
    let mut rows = Vec::with_capacity(args.candidates.len());
    for path in &args.candidates {
        let candidate = read_image(path)?;
        if !candidate.same_size(&clean) {
            bail!(
                "{} is {}x{} but the clean image is {}x{}",
                path.display(),
                candidate.height(),
                candidate.width(),
                clean.height(),
                clean.width()
            );
        }
        rows.push(MetricRow::measure(&image_id, &file_stem(path), args.sigma, &candidate, &clean)?);
    }
    create_parent(&args.out)?;
    fs::write(&args.out, metrics_csv(&rows)).with_context(|| format!("writing {}", args.out.display()))
}

pub fn synthesize(args: SynthesizeArgs) -> Result<()> {
    if args.height == 0 || args.width == 0 {
        return Err(usage("image size must be positive"));
    }
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    for k in 0..args.count {
        let seed = args.seed + k as u64;
        let image = textured_blobs(args.height, args.width, seed);
        let path = args.out_dir.join(format!("blobs_{seed:05}.{}", args.format));
        write_image(&image, &path)?;
    }
    Ok(())
}
