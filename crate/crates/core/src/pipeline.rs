//! Dataset synthesis, run configuration, manifests and the end-to-end run.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::model_file::ModelFile;
use crate::denoiser::{
    train, ConditionEcho, DenoiserModel, IntensityTransform, TinyNetConfig, TinyUNet, TracePoint, TrainConfig,
};
use crate::error::{Error, Result};
use crate::fbp::{fbp_reconstruct, FilterSpec};
use crate::image::ImageGrid;
use crate::io::{write_image, write_json, write_sinogram, ImageFormat};
use crate::metrics::{MetricReport, PeakRule};
use crate::pfgm::PfgmConfig;
use crate::phantom::{generate_ellipse_phantom, PhantomSpec};
use crate::projector::{sample_views, siddon_forward, uniform_mask, FanBeamGeometry, GridSpec, Sinogram};
use crate::sampler::{reconstruct, Integrator, ReconstructOptions, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sparsity {
    pub full_views: usize,
    pub kept_views: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerBlock {
    pub steps: usize,
    pub integrator: Integrator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetBlock {
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundTruth {
    /// The rasterized phantom.
    #[default]
    Phantom,
    FullViewFbp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSource {
    /// Train a fresh network as part of the run.
    Train,
    Load { path: PathBuf },
    /// Returns its condition; sampling then reproduces the sparse FBP.
    ConditionEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub geometry: FanBeamGeometry,
    pub grid: GridSpec,
    pub sparsity: Sparsity,
    pub pfgm: PfgmConfig,
    pub sampler: SamplerBlock,
    pub train: TrainConfig,
    pub net: TinyNetConfig,
    pub filter: FilterSpec,
    pub dataset: DatasetBlock,
    pub ground_truth: GroundTruth,
    pub model: ModelSource,
    pub peak: PeakRule,
    pub consistency_iterations: usize,
    pub seed: u64,
}

impl RunConfig {
    /// 64×64 phantoms, 60 full and 15 kept views, `D = 128`, 16 Heun steps.
    pub fn desk() -> Self {
        Self {
            geometry: FanBeamGeometry::desk(),
            grid: GridSpec {
                width: 64,
                height: 64,
                pixel_size: 8.0,
            },
            sparsity: Sparsity {
                full_views: 60,
                kept_views: 15,
            },
            pfgm: PfgmConfig::default(),
            sampler: SamplerBlock {
                steps: 16,
                integrator: Integrator::Heun,
            },
            train: TrainConfig {
                iterations: 3000,
                batch: 8,
                learning_rate: 2e-3,
                warmup_iterations: 100,
                ema_decay: 0.995,
                patch: Some(32),
                ..Default::default()
            },
            net: TinyNetConfig::default(),
            filter: FilterSpec::SHEPP_LOGAN,
            dataset: DatasetBlock {
                train_count: 200,
                test_count: 20,
            },
            ground_truth: GroundTruth::Phantom,
            model: ModelSource::Train,
            peak: PeakRule::GroundTruthRange,
            consistency_iterations: 0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |r: String| Err(Error::invalid("run config", r));
        self.geometry.validate()?;
        self.geometry.check_grid(&self.grid)?;
        self.pfgm.validate()?;
        self.train.validate()?;
        self.net.validate()?;
        self.filter.validate()?;
        let s = self.sparsity;
        if s.kept_views == 0 || s.kept_views > s.full_views {
            return fail(format!("kept_views {} must lie in [1, {}]", s.kept_views, s.full_views));
        }
        if s.full_views != self.geometry.num_views {
            return fail(format!(
                "full_views {} disagrees with the geometry's {} views",
                s.full_views, self.geometry.num_views
            ));
        }
        if self.sampler.steps == 0 {
            return fail("sampler steps must be at least 1".into());
        }
        let m = self.net.multiple();
        if self.grid.width % m != 0 || self.grid.height % m != 0 {
            return fail(format!("grid must be a multiple of {m}"));
        }
        if let Some(p) = self.train.patch {
            if p > self.grid.width || p > self.grid.height || p % m != 0 {
                return fail(format!("patch {p} must fit the grid and be a multiple of {m}"));
            }
        }
        Ok(())
    }

    pub fn sampler_config(&self, data_dim: usize) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            integrator: self.sampler.integrator,
            pfgm: self.pfgm.with_data_dim(data_dim),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = crate::io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid("run config", e.to_string()))
    }
}

/// A 64-bit seed drawn from a hash of `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone)]
pub struct PairedSample {
    pub id: String,
    pub phantom: PhantomSpec,
    pub truth: ImageGrid<f64>,
    pub full_sino: Sinogram<f64>,
    pub sparse_sino: Sinogram<f64>,
    /// Sparse-view FBP image.
    pub condition: ImageGrid<f64>,
}

pub fn make_sample(cfg: &RunConfig, id: String, phantom_seed: u64) -> Result<PairedSample> {
    let g = &cfg.grid;
    let phantom = PhantomSpec::random(phantom_seed, g.inscribed_radius());
    let image = generate_ellipse_phantom(&phantom, g.width, g.height, g.pixel_size)?;
    let full_sino = siddon_forward(&image, &cfg.geometry)?;
    let mask = uniform_mask(cfg.sparsity.full_views, cfg.sparsity.kept_views)?;
    let sparse_sino = sample_views(&full_sino, &mask)?;
    let condition = fbp_reconstruct(&sparse_sino, g, &cfg.filter)?;
    let truth = match cfg.ground_truth {
        GroundTruth::Phantom => image,
        GroundTruth::FullViewFbp => fbp_reconstruct(&full_sino, g, &cfg.filter)?,
    };
    Ok(PairedSample {
        id,
        phantom,
        truth,
        full_sino,
        sparse_sino,
        condition,
    })
}

/// `count` samples of one split (`"train"` or `"test"`), seeded per item.
pub fn make_split(cfg: &RunConfig, split: &str, count: usize) -> Result<Vec<PairedSample>> {
    (0..count)
        .map(|i| make_sample(cfg, format!("{split}-{i:04}"), derive_seed(cfg.seed, split, i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    /// Records `path` (and its sidecar, if present) relative to `root`.
    pub fn record(&mut self, root: &Path, path: &Path, command: &str) -> Result<()> {
        let mut paths = vec![path.to_path_buf()];
        let side = crate::io::sidecar_path(path);
        if side.exists() {
            paths.push(side);
        }
        for p in paths {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned();
            self.entries.push(ManifestEntry {
                path: rel,
                sha256: sha256_file(&p)?,
                command: command.to_string(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes every sample of a split under `dir/<id>/` and records the files.
pub fn write_split(samples: &[PairedSample], root: &Path, dir: &Path, command: &str, manifest: &mut Manifest) -> Result<()> {
    for s in samples {
        let d = dir.join(&s.id);
        create_dir(&d)?;
        let files = [
            ("phantom.json", None),
            ("truth.raw", Some(&s.truth)),
            ("condition.raw", Some(&s.condition)),
        ];
        for (name, img) in files {
            let p = d.join(name);
            match img {
                Some(img) => write_image(img, &p, ImageFormat::RawFloat, None)?,
                None => write_json(&p, &s.phantom)?,
            }
            manifest.record(root, &p, command)?;
        }
        for (name, sino) in [("full.sino", &s.full_sino), ("sparse.sino", &s.sparse_sino)] {
            let p = d.join(name);
            write_sinogram(sino, &p)?;
            manifest.record(root, &p, command)?;
        }
    }
    Ok(())
}

/// Synthesizes the training split into `out_dir` with `manifest.json`.
pub fn make_dataset(cfg: &RunConfig, count: usize, out_dir: &Path, command: &str) -> Result<(Vec<PairedSample>, Manifest)> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let samples = make_split(cfg, "train", count)?;
    let mut manifest = Manifest::default();
    write_split(&samples, out_dir, out_dir, command, &mut manifest)?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok((samples, manifest))
}

/// Global `[min, max]` of the ground-truth images mapped onto `[0, 1]`.
pub fn dataset_transform(pairs: &[(ImageGrid<f64>, ImageGrid<f64>)]) -> Result<IntensityTransform> {
    if pairs.is_empty() {
        return Err(Error::invalid("training data", "dataset is empty"));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (truth, _) in pairs {
        let (a, b) = truth.min_max();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    IntensityTransform::from_range(lo, hi)
}

/// `(truth, condition)` pairs in intensity units.
pub fn image_pairs(samples: &[PairedSample]) -> Vec<(ImageGrid<f64>, ImageGrid<f64>)> {
    samples.iter().map(|s| (s.truth.clone(), s.condition.clone())).collect()
}

/// Normalized pairs in network precision.
pub fn training_pairs(pairs: &[(ImageGrid<f64>, ImageGrid<f64>)], t: &IntensityTransform) -> Vec<(ImageGrid<f32>, ImageGrid<f32>)> {
    pairs
        .iter()
        .map(|(x, c)| (t.forward(x).cast(), t.forward(c).cast()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub file: ModelFile,
    pub trace: Vec<TracePoint>,
}

pub fn train_model(cfg: &RunConfig, pairs: &[(ImageGrid<f64>, ImageGrid<f64>)]) -> Result<TrainedModel> {
    let transform = dataset_transform(pairs)?;
    let pairs = training_pairs(pairs, &transform);
    let net = TinyUNet::<f32>::new(cfg.net, cfg.pfgm.sigma_data, derive_seed(cfg.seed, "init", 0))?;
    let train_cfg = TrainConfig {
        seed: derive_seed(cfg.seed, "train-loop", 0),
        ..cfg.train
    };
    let outcome = train(net, &pairs, &train_cfg, &cfg.pfgm)?;
    Ok(TrainedModel {
        file: ModelFile::from_model(&outcome.model, transform, cfg.pfgm),
        trace: outcome.trace,
    })
}

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut s = String::from("iteration,loss\n");
    for p in trace {
        s.push_str(&format!("{},{:.9e}\n", p.iteration, p.loss));
    }
    s
}

/// Samples one reconstruction per test item, in intensity units.
pub fn reconstruct_split<M: DenoiserModel<f32>>(
    cfg: &RunConfig,
    model: &M,
    transform: IntensityTransform,
    samples: &[PairedSample],
) -> Result<Vec<ImageGrid<f64>>> {
    let opts = ReconstructOptions {
        grid: cfg.grid,
        filter: cfg.filter,
        transform,
        consistency_iterations: cfg.consistency_iterations,
    };
    let sc = cfg.sampler_config(cfg.grid.width * cfg.grid.height);
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "sample", i as u64));
            let sino = s.sparse_sino.cast::<f32>();
            reconstruct(&sino, model, &sc, &opts, &mut rng).map(|r| r.image.cast())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EndToEndReport {
    pub fbp: MetricReport,
    pub pocgm: MetricReport,
    pub trace: Vec<TracePoint>,
    pub reconstructions: Vec<ImageGrid<f64>>,
    pub model: Option<ModelFile>,
}

impl EndToEndReport {
    pub fn psnr_gain(&self) -> f64 {
        self.pocgm.mean_psnr() - self.fbp.mean_psnr()
    }

    /// Mean PSNR gain of at least 2 dB and a strictly higher mean SSIM.
    pub fn meets_improvement_criterion(&self) -> bool {
        self.psnr_gain() >= 2.0 && self.pocgm.mean_ssim() > self.fbp.mean_ssim()
    }

    pub fn summary(&self) -> String {
        format!(
            "sparse FBP: PSNR {:.3} dB SSIM {:.4} | generated: PSNR {:.3} dB SSIM {:.4} | gain {:+.3} dB",
            self.fbp.mean_psnr(),
            self.fbp.mean_ssim(),
            self.pocgm.mean_psnr(),
            self.pocgm.mean_ssim(),
            self.psnr_gain()
        )
    }
}

/// Trains (or loads) a model, reconstructs the test split and scores both
/// the sparse-view FBP conditions and the generated images.
pub fn end_to_end(cfg: &RunConfig) -> Result<EndToEndReport> {
    cfg.validate()?;
    let test = make_split(cfg, "test", cfg.dataset.test_count)?;
    let (recons, trace, model) = match &cfg.model {
        ModelSource::ConditionEcho => {
            let train = make_split(cfg, "train", cfg.dataset.train_count.max(1))?;
            let t = dataset_transform(&image_pairs(&train))?;
            (reconstruct_split(cfg, &ConditionEcho, t, &test)?, Vec::new(), None)
        }
        ModelSource::Load { path } => {
            let file = ModelFile::load(path)?;
            let net = file.model::<f32>()?;
            (reconstruct_split(cfg, &net, file.transform, &test)?, Vec::new(), Some(file))
        }
        ModelSource::Train => {
            let train = make_split(cfg, "train", cfg.dataset.train_count)?;
            let trained = train_model(cfg, &image_pairs(&train))?;
            let net = trained.file.model::<f32>()?;
            let r = reconstruct_split(cfg, &net, trained.file.transform, &test)?;
            (r, trained.trace, Some(trained.file))
        }
    };
    let mut fbp = MetricReport::default();
    let mut pocgm = MetricReport::default();
    for (s, r) in test.iter().zip(&recons) {
        fbp.push(s.id.clone(), &s.condition, &s.truth, cfg.peak)?;
        pocgm.push(s.id.clone(), r, &s.truth, cfg.peak)?;
    }
    Ok(EndToEndReport {
        fbp,
        pocgm,
        trace,
        reconstructions: recons,
        model,
    })
}
