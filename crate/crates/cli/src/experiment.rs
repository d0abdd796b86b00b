//! JSON-described experiments: build or load a prior, then sweep a noise
//! grid over an image set comparing the noisy input, NLM and flow MAP.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use flowprior::baselines::{metrics_csv, nlm, psnr, ssim, MetricRow, NlmParams};
use flowprior::map::{lambda_for_gaussian, DenoiseConfig};
use flowprior::patches::read_corpus;
use flowprior::speckle::{add_empirical_speckle, add_gaussian};
use flowprior::synthetic::textured_blobs;
use flowprior::trainer::{write_loss_csv, TrainConfig};
use flowprior::{FlowModel, Image, Real};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::cli::RunExperimentArgs;
use crate::commands::{build_corpus, denoise_report, load_image_dir, load_model, train_model, write_image};
use crate::config::{require_dir, require_file, resolve_path, usage, Precision, TopologySpec};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: Option<String>,
    /// Base seed; every derived stream is a fixed function of it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Existing checkpoint. Without one, a model is trained from `corpus`.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub corpus: Option<CorpusSpec>,
    #[serde(default)]
    pub topology: TopologySpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub precision: Precision,
    pub eval_images: ImageSetSpec,
    pub noise: NoiseSpec,
    pub lambda: LambdaSpec,
    /// MAP settings except λ, which comes from `lambda`.
    #[serde(default)]
    pub denoise: serde_json::Value,
    #[serde(default)]
    pub nlm: NlmSpec,
    pub metrics: Vec<Metric>,
    #[serde(default = "yes")]
    pub save_images: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    /// Prebuilt `.pbch` corpus.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Source images to sample from.
    #[serde(default)]
    pub images: Option<ImageSetSpec>,
    #[serde(default)]
    pub count: usize,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    #[serde(default)]
    pub with_uniform: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_patch() -> usize {
    32
}

fn default_keep() -> f64 {
    0.25
}

/// Either a directory of images or a synthetic set; exactly one.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSetSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSet>,
}

/// `count` textured-blob images with seeds `seed, seed + 1, ...`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSet {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Additive Gaussian; levels are standard deviations.
    Gaussian,
    /// `u = v + sqrt(v) η`; levels are the η standard deviations.
    Empirical,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub model: NoiseModel,
    pub levels: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaSpec {
    /// `0.75 σ²` from each Gaussian noise level.
    Gaussian,
    Fixed { value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlmSpec {
    /// `h = h_per_sigma * level`.
    pub h_per_sigma: f64,
    pub patch_size: usize,
    pub patch_distance: usize,
}

impl Default for NlmSpec {
    fn default() -> Self {
        NlmSpec {
            h_per_sigma: 0.8,
            patch_size: 10,
            patch_distance: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
}

/// A spec with paths resolved and every section checked.
#[derive(Debug)]
pub struct Plan {
    pub spec: ExperimentSpec,
    pub output_dir: PathBuf,
    pub model: Option<PathBuf>,
    pub corpus_path: Option<PathBuf>,
    pub corpus_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub denoise: DenoiseConfig,
}

fn check_set(set: &ImageSetSpec, what: &str) -> Result<()> {
    match (&set.dir, &set.synthetic) {
        (Some(_), None) => Ok(()),
        (None, Some(s)) if s.count > 0 && s.height > 0 && s.width > 0 => Ok(()),
        (None, Some(_)) => Err(usage(format!("{what}: synthetic count and size must be positive"))),
        _ => Err(usage(format!("{what}: give exactly one of \"dir\" or \"synthetic\""))),
    }
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| usage(format!("invalid experiment spec: {e}")))
    }

    /// Validates the spec. Relative input paths resolve against `base`; the
    /// output directory stays relative to the working directory. `model`
    /// and `out_dir` override the spec and are used as given.
    pub fn plan(self, base: &Path, model: Option<PathBuf>, out_dir: Option<PathBuf>) -> Result<Plan> {
        let spec_err = |m: String| usage(format!("invalid experiment spec: {m}"));
        if self.noise.levels.is_empty() {
            return Err(spec_err("noise.levels is empty".into()));
        }
        if let Some(l) = self.noise.levels.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(spec_err(format!("noise levels must be positive, got {l}")));
        }
        match self.lambda {
            LambdaSpec::Gaussian if self.noise.model != NoiseModel::Gaussian => {
                return Err(spec_err("the gaussian lambda rule needs gaussian noise".into()));
            }
            LambdaSpec::Fixed { value } if !(value >= 0.0 && value.is_finite()) => {
                return Err(spec_err(format!("lambda must be >= 0, got {value}")));
            }
            _ => {}
        }
        if self.metrics.is_empty() {
            return Err(spec_err("metrics is empty".into()));
        }
        NlmParams {
            h: self.nlm.h_per_sigma,
            patch_size: self.nlm.patch_size,
            patch_distance: self.nlm.patch_distance,
        }
        .validate()
        .map_err(|e| spec_err(e.to_string()))?;
        check_set(&self.eval_images, "eval_images")?;

        let denoise = match &self.denoise {
            serde_json::Value::Null => DenoiseConfig::default(),
            serde_json::Value::Object(map) if map.contains_key("lambda") => {
                return Err(spec_err("set lambda through the top-level \"lambda\" rule".into()));
            }
            v => serde_json::from_value(v.clone()).map_err(|e| spec_err(format!("denoise: {e}")))?,
        };

        let model = model.or_else(|| self.model.as_ref().map(|m| resolve_path(base, m)));
        let (mut corpus_path, mut corpus_dir) = (None, None);
        if let Some(m) = &model {
            require_file(m)?;
        } else {
            let corpus = self
                .corpus
                .as_ref()
                .ok_or_else(|| spec_err("needs a model (spec or --model) or a corpus to train on".into()))?;
            match (&corpus.path, &corpus.images) {
                (Some(p), None) => {
                    let p = resolve_path(base, p);
                    require_file(&p)?;
                    corpus_path = Some(p);
                }
                (None, Some(set)) => {
                    check_set(set, "corpus.images")?;
                    if corpus.count == 0 {
                        return Err(spec_err("corpus.count must be positive".into()));
                    }
                    if let Some(d) = &set.dir {
                        let d = resolve_path(base, d);
                        require_dir(&d)?;
                        corpus_dir = Some(d);
                    }
                }
                _ => return Err(spec_err("corpus: give exactly one of \"path\" or \"images\"".into())),
            }
            self.train.validate().map_err(|e| spec_err(e.to_string()))?;
            if corpus_path.is_none() {
                self.topology
                    .resolve(self.topology.patch.unwrap_or(corpus.patch_size))
                    .map_err(|e| spec_err(e.to_string()))?;
            }
        }
        if let Some(p) = self.topology.patch.or(self.corpus.as_ref().map(|c| c.patch_size)) {
            denoise.validate(p).map_err(|e| spec_err(e.to_string()))?;
        }
        let eval_dir = match &self.eval_images.dir {
            Some(d) => {
                let d = resolve_path(base, d);
                require_dir(&d)?;
                Some(d)
            }
            None => None,
        };
        let output_dir = out_dir.unwrap_or_else(|| self.output_dir.clone());
        Ok(Plan {
            spec: self,
            output_dir,
            model,
            corpus_path,
            corpus_dir,
            eval_dir,
            denoise,
        })
    }
}

fn synthetic_images(set: &SyntheticSet) -> Vec<(String, Image)> {
    (0..set.count as u64)
        .map(|k| {
            let seed = set.seed + k;
            (format!("blobs_{seed:05}"), textured_blobs(set.height, set.width, seed))
        })
        .collect()
}

fn load_set(set: &ImageSetSpec, dir: Option<&Path>) -> Result<Vec<(String, Image)>> {
    match (dir, &set.synthetic) {
        (Some(d), _) => Ok(load_image_dir(d)?
            .into_iter()
            .map(|s| {
                let id = Path::new(&s.name).file_stem().unwrap().to_string_lossy().into_owned();
                (id, s.image)
            })
            .collect()),
        (None, Some(s)) => Ok(synthetic_images(s)),
        (None, None) => unreachable!("image set checked during planning"),
    }
}

/// Noise stream for level `j` of image `i`.
fn noise_seed(base: u64, level: usize, image: usize) -> u64 {
    base.wrapping_add(((level as u64 + 1) << 32) + image as u64)
}

fn prepare_model(plan: &Plan) -> Result<PathBuf> {
    if let Some(m) = &plan.model {
        return Ok(m.clone());
    }
    let spec = &plan.spec;
    let corpus_spec = spec.corpus.as_ref().expect("corpus checked during planning");
    let corpus = match &plan.corpus_path {
        Some(p) => read_corpus(p).with_context(|| format!("reading {}", p.display()))?,
        None => {
            let set = corpus_spec.images.as_ref().expect("corpus checked during planning");
            let sources = match (&plan.corpus_dir, &set.synthetic) {
                (Some(d), _) => load_image_dir(d)?,
                (None, Some(s)) => synthetic_images(s)
                    .into_iter()
                    .map(|(name, image)| flowprior::patches::SourceImage { name, image })
                    .collect(),
                (None, None) => unreachable!("image set checked during planning"),
            };
            let (corpus, manifest) = build_corpus(
                &sources,
                corpus_spec.count,
                corpus_spec.patch_size,
                corpus_spec.keep_fraction,
                corpus_spec.with_uniform,
                corpus_spec.seed,
            )?;
            manifest.write(plan.output_dir.join("corpus.manifest.tsv"))?;
            corpus
        }
    };
    let topology = spec.topology.resolve(corpus.patch_size())?;
    let path = plan.output_dir.join("model.nfus");
    info!("training {topology:?} on {} patches", corpus.len());
    let history = train_model(topology, &corpus, &spec.train, spec.precision, &path)?;
    write_loss_csv(&history, plan.output_dir.join("loss.csv"))?;
    Ok(path)
}

struct Summary {
    method: &'static str,
    level: f64,
    psnr: Vec<f64>,
    ssim: Vec<f64>,
    failed_patches: usize,
}

fn summary_csv(rows: &[Summary]) -> String {
    let mut out = String::from("method,sigma,mean_psnr_db,mean_ssim,images,failed_patches\n");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for s in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.method,
            s.level,
            mean(&s.psnr),
            mean(&s.ssim),
            s.psnr.len(),
            s.failed_patches
        );
    }
    out
}

fn sweep<T: Real>(plan: &Plan, model: &FlowModel<T>, images: &[(String, Image)]) -> Result<()> {
    let spec = &plan.spec;
    let p = model.topology().patch_size;
    for (id, img) in images {
        if img.height() < p || img.width() < p {
            return Err(usage(format!(
                "evaluation image {id} ({}x{}) is smaller than the model's {p}px patch",
                img.height(),
                img.width()
            )));
        }
    }
    plan.denoise.validate(p).map_err(|e| usage(e.to_string()))?;
    let want_psnr = spec.metrics.contains(&Metric::Psnr);
    let want_ssim = spec.metrics.contains(&Metric::Ssim);
    let image_dir = plan.output_dir.join("images");
    if spec.save_images {
        fs::create_dir_all(&image_dir).with_context(|| format!("creating {}", image_dir.display()))?;
        for (id, clean) in images {
            write_image(clean, &image_dir.join(format!("{id}_clean.f32r")))?;
        }
    }

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (j, &level) in spec.noise.levels.iter().enumerate() {
        let lambda = match spec.lambda {
            LambdaSpec::Gaussian => lambda_for_gaussian(level)?,
            LambdaSpec::Fixed { value } => value,
        };
        let config = DenoiseConfig {
            lambda,
            ..plan.denoise.clone()
        };
        let nlm_params = NlmParams {
            h: spec.nlm.h_per_sigma * level,
            patch_size: spec.nlm.patch_size,
            patch_distance: spec.nlm.patch_distance,
        };
        let mut stats: Vec<Summary> = ["noisy", "nlm", "flow_map"]
            .into_iter()
            .map(|method| Summary {
                method,
                level,
                psnr: Vec::new(),
                ssim: Vec::new(),
                failed_patches: 0,
            })
            .collect();
        for (i, (id, clean)) in images.iter().enumerate() {
            let seed = noise_seed(spec.seed, j, i);
            let noisy = match spec.noise.model {
                NoiseModel::Gaussian => add_gaussian(clean, level, seed)?,
                NoiseModel::Empirical => add_empirical_speckle(clean, level, seed)?,
            };
            let filtered = nlm(&noisy, &nlm_params)?;
            let report = denoise_report(model, &noisy, &config)?;
            if report.failed > 0 {
                warn!("{id} at {level}: {} patches kept their noisy values", report.failed);
            }
            stats[2].failed_patches += report.failed;
            for (k, candidate) in [&noisy, &filtered, &report.image].into_iter().enumerate() {
                let method = stats[k].method;
                let row = MetricRow {
                    image_id: id.clone(),
                    method: method.to_string(),
                    sigma: level,
                    psnr_db: if want_psnr { psnr(candidate, clean, 1.0)? } else { f64::NAN },
                    ssim: if want_ssim { ssim(candidate, clean)? } else { f64::NAN },
                };
                stats[k].psnr.push(row.psnr_db);
                stats[k].ssim.push(row.ssim);
                rows.push(row);
                if spec.save_images {
                    write_image(candidate, &image_dir.join(format!("{id}_{level}_{method}.f32r")))?;
                }
            }
        }
        for s in &stats {
            info!(
                "level {level}: {} psnr {:.2} ssim {:.3}",
                s.method,
                s.psnr.iter().sum::<f64>() / s.psnr.len() as f64,
                s.ssim.iter().sum::<f64>() / s.ssim.len() as f64
            );
        }
        summary.extend(stats);
    }
    let csv = plan.output_dir.join("comparison.csv");
    fs::write(&csv, metrics_csv(&rows)).with_context(|| format!("writing {}", csv.display()))?;
    let sum = plan.output_dir.join("summary.csv");
    fs::write(&sum, summary_csv(&summary)).with_context(|| format!("writing {}", sum.display()))?;
    info!("wrote {}", csv.display());
    Ok(())
}

pub fn run(args: RunExperimentArgs) -> Result<()> {
    require_file(&args.spec)?;
    let text = fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let base = args.spec.parent().unwrap_or(Path::new("")).to_path_buf();
    let plan = ExperimentSpec::parse(&text)?.plan(&base, args.model, args.out_dir)?;
    fs::create_dir_all(&plan.output_dir).with_context(|| format!("creating {}", plan.output_dir.display()))?;

    let model_path = prepare_model(&plan)?;
    let images = load_set(&plan.spec.eval_images, plan.eval_dir.as_deref())?;
    match plan.spec.precision {
        Precision::F32 => sweep(&plan, &load_model::<f32>(&model_path)?, &images),
        Precision::F64 => sweep(&plan, &load_model::<f64>(&model_path)?, &images),
    }
}
