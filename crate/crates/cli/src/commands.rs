use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use pocgm_core::denoiser::model_file::ModelFile;
use pocgm_core::denoiser::TracePoint;
use pocgm_core::fbp::{fbp_reconstruct, FilterKind, FilterSpec};
use pocgm_core::image::{hu_window, DisplayWindow, ImageGrid};
use pocgm_core::io::{read_image, read_json, read_sinogram, write_image, write_json, write_sinogram, ImageFormat};
use pocgm_core::metrics::{MetricReport, PeakRule};
use pocgm_core::phantom::{generate_ellipse_phantom, PhantomSpec};
use pocgm_core::pipeline::{self, Manifest, ModelSource, RunConfig};
use pocgm_core::projector::{sample_views, siddon_forward, uniform_mask, FanBeamGeometry};
use pocgm_core::sampler::{reconstruct, ReconstructOptions, SamplerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::Global;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Raw,
    Pgm16,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Filter {
    RamLak,
    SheppLogan,
}

#[derive(Args, Debug)]
pub struct ImageOut {
    #[arg(long, value_enum, default_value = "raw")]
    pub format: Format,
    /// Display window `low,high` (required for pgm16).
    #[arg(long)]
    pub window: Option<String>,
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Ellipse list (JSON); a seeded random phantom when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value = "phantom.raw")]
    pub out: PathBuf,
    #[command(flatten)]
    pub image: ImageOut,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Geometry (JSON); the config's geometry when omitted.
    #[arg(long)]
    pub geom: Option<PathBuf>,
    #[arg(long, default_value = "full.sino")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub sino: PathBuf,
    /// Number of uniformly spaced views to keep.
    #[arg(long)]
    pub kept: Option<usize>,
    #[arg(long, default_value = "sparse.sino")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FbpArgs {
    #[arg(long)]
    pub sino: PathBuf,
    #[arg(long, value_enum)]
    pub filter: Option<Filter>,
    /// Cutoff as a fraction of the detector Nyquist band.
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long, default_value = "fbp.raw")]
    pub out: PathBuf,
    #[command(flatten)]
    pub image: ImageOut,
}

#[derive(Args, Debug)]
pub struct MakeDatasetArgs {
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `make-dataset`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub sparse_sino: PathBuf,
    /// Expected geometry; must match the sinogram's own.
    #[arg(long)]
    pub geom: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Augmentation dimension; the model's training value when omitted.
    #[arg(long = "D")]
    pub aug_dim: Option<u64>,
    /// Post-hoc measurement-consistency corrections.
    #[arg(long, default_value_t = 0)]
    pub consistency: usize,
    #[arg(long, default_value = "sample.raw")]
    pub out: PathBuf,
    #[command(flatten)]
    pub image: ImageOut,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of `*.raw` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth: `<gt>/<name>.raw` or `<gt>/<stem>/truth.raw`.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    pub out: PathBuf,
    /// Score `low,high`-windowed images instead of the full range.
    #[arg(long)]
    pub window: Option<String>,
    /// Fixed PSNR peak; the ground-truth range when omitted.
    #[arg(long)]
    pub peak: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EndToEndArgs {
    #[arg(long)]
    pub iters: Option<usize>,
    /// Use a saved model instead of training.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use the condition-echo model (smoke run).
    #[arg(long)]
    pub echo: bool,
}

#[derive(Args, Debug)]
pub struct LossTraceArgs {
    /// Model written by `train`; its trace is stored beside it.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "trace.csv")]
    pub out: PathBuf,
}

fn config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config: loading {}", p.display()))?,
        None => RunConfig::desk(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn output(g: &Global, p: &Path) -> Result<PathBuf> {
    fs::create_dir_all(&g.out_dir).with_context(|| format!("creating {}", g.out_dir.display()))?;
    let out = if p.is_absolute() { p.to_path_buf() } else { g.out_dir.join(p) };
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(out)
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

/// Adds `paths` to `<out-dir>/manifest.json`, replacing stale entries.
fn record(g: &Global, paths: &[&Path]) -> Result<()> {
    let mpath = g.out_dir.join("manifest.json");
    let mut manifest: Manifest = if mpath.exists() {
        read_json(&mpath).context("manifest")?
    } else {
        Manifest::default()
    };
    let cmd = command_line();
    let mut fresh = Manifest::default();
    for p in paths {
        fresh.record(&g.out_dir, p, &cmd)?;
    }
    manifest.entries.retain(|e| !fresh.entries.iter().any(|f| f.path == e.path));
    manifest.entries.extend(fresh.entries);
    manifest.save(&mpath)?;
    Ok(())
}

fn parse_window(w: &Option<String>) -> Result<Option<DisplayWindow>> {
    let Some(w) = w else { return Ok(None) };
    let parts: Vec<&str> = w.split(',').collect();
    if parts.len() != 2 {
        bail!("window must be `low,high`, got {w:?}");
    }
    let lo: f64 = parts[0].trim().parse().context("window low")?;
    let hi: f64 = parts[1].trim().parse().context("window high")?;
    Ok(Some(DisplayWindow::new(lo, hi)?))
}

fn save_image(img: &ImageGrid<f64>, path: &Path, opts: &ImageOut) -> Result<()> {
    let window = parse_window(&opts.window)?;
    let format = match opts.format {
        Format::Raw => ImageFormat::RawFloat,
        Format::Pgm16 => ImageFormat::Pgm16,
    };
    write_image(img, path, format, window).with_context(|| format!("io: writing {}", path.display()))
}

fn load_image(path: &Path) -> Result<ImageGrid<f64>> {
    read_image(path).with_context(|| format!("io: reading {}", path.display()))
}

pub fn phantom(g: &Global, a: &PhantomArgs) -> Result<bool> {
    let cfg = config(g)?;
    let spec = match &a.spec {
        Some(p) => read_json(p).with_context(|| format!("phantom: reading {}", p.display()))?,
        None => PhantomSpec::random(cfg.seed, cfg.grid.inscribed_radius()),
    };
    let img = generate_ellipse_phantom(&spec, cfg.grid.width, cfg.grid.height, cfg.grid.pixel_size).context("phantom")?;
    let out = output(g, &a.out)?;
    save_image(&img, &out, &a.image)?;
    let spec_path = out.with_extension("phantom.json");
    write_json(&spec_path, &spec)?;
    record(g, &[&out, &spec_path])?;
    Ok(true)
}

pub fn project(g: &Global, a: &ProjectArgs) -> Result<bool> {
    let cfg = config(g)?;
    let geom: FanBeamGeometry = match &a.geom {
        Some(p) => read_json(p).with_context(|| format!("projector: reading {}", p.display()))?,
        None => cfg.geometry,
    };
    let img = load_image(&a.image)?;
    let sino = siddon_forward(&img, &geom).context("projector")?;
    let out = output(g, &a.out)?;
    write_sinogram(&sino, &out)?;
    record(g, &[&out])?;
    Ok(true)
}

pub fn subsample(g: &Global, a: &SubsampleArgs) -> Result<bool> {
    let cfg = config(g)?;
    let sino = read_sinogram::<f64>(&a.sino).with_context(|| format!("io: reading {}", a.sino.display()))?;
    let kept = a.kept.unwrap_or(cfg.sparsity.kept_views);
    let mask = uniform_mask(sino.num_views(), kept).context("projector")?;
    let sparse = sample_views(&sino, &mask).context("projector")?;
    let out = output(g, &a.out)?;
    write_sinogram(&sparse, &out)?;
    record(g, &[&out])?;
    Ok(true)
}

fn filter_spec(cfg: &RunConfig, kind: Option<Filter>, cutoff: Option<f64>) -> FilterSpec {
    let mut spec = cfg.filter;
    if let Some(k) = kind {
        spec.kind = match k {
            Filter::RamLak => FilterKind::RamLak,
            Filter::SheppLogan => FilterKind::SheppLoganApodized,
        };
    }
    if let Some(c) = cutoff {
        spec.cutoff_fraction = c;
    }
    spec
}

pub fn fbp(g: &Global, a: &FbpArgs) -> Result<bool> {
    let cfg = config(g)?;
    let sino = read_sinogram::<f64>(&a.sino).with_context(|| format!("io: reading {}", a.sino.display()))?;
    let spec = filter_spec(&cfg, a.filter, a.cutoff);
    let img = fbp_reconstruct(&sino, &cfg.grid, &spec).context("fbp")?;
    let out = output(g, &a.out)?;
    save_image(&img, &out, &a.image)?;
    record(g, &[&out])?;
    Ok(true)
}

pub fn make_dataset(g: &Global, a: &MakeDatasetArgs) -> Result<bool> {
    let cfg = config(g)?;
    let count = a.count.unwrap_or(cfg.dataset.train_count);
    fs::create_dir_all(&g.out_dir)?;
    let (_, manifest) = pipeline::make_dataset(&cfg, count, &g.out_dir, &command_line()).context("dataset")?;
    write_json(&g.out_dir.join("config.json"), &cfg)?;
    eprintln!("wrote {count} pairs ({} files) to {}", manifest.entries.len(), g.out_dir.display());
    Ok(true)
}

/// Reads every `<dir>/<id>/{truth,condition}.raw` pair, sorted by id.
fn load_pairs(dir: &Path) -> Result<Vec<(ImageGrid<f64>, ImageGrid<f64>)>> {
    let mut ids: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("io: listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("truth.raw").exists() && p.join("condition.raw").exists())
        .collect();
    ids.sort();
    if ids.is_empty() {
        bail!("train: no training pairs under {}", dir.display());
    }
    ids.iter()
        .map(|d| Ok((load_image(&d.join("truth.raw"))?, load_image(&d.join("condition.raw"))?)))
        .collect()
}

fn trace_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".trace.json");
    PathBuf::from(s)
}

pub fn train(g: &Global, a: &TrainArgs) -> Result<bool> {
    let mut cfg = config(g)?;
    if let Some(n) = a.iters {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    let pairs = load_pairs(&a.data)?;
    let trained = pipeline::train_model(&cfg, &pairs).context("train")?;
    let out = output(g, &a.out)?;
    trained.file.save(&out)?;
    let tp = trace_path(&out);
    write_json(&tp, &trained.trace)?;
    record(g, &[&out, &tp])?;
    if let Some(last) = trained.trace.last() {
        eprintln!("trained {} iterations, last loss {:.5}", trained.trace.len(), last.loss);
    }
    Ok(true)
}

pub fn loss_trace(g: &Global, a: &LossTraceArgs) -> Result<bool> {
    let tp = trace_path(&a.model);
    if !tp.exists() {
        bail!("loss-trace: no trace found at {}", tp.display());
    }
    let trace: Vec<TracePoint> = read_json(&tp)?;
    let out = output(g, &a.out)?;
    fs::write(&out, pipeline::trace_csv(&trace)).with_context(|| format!("io: writing {}", out.display()))?;
    record(g, &[&out])?;
    Ok(true)
}

pub fn sample(g: &Global, a: &SampleArgs) -> Result<bool> {
    let cfg = config(g)?;
    let file = ModelFile::load(&a.model).context("sampler")?;
    let net = file.model::<f32>()?;
    let sino = read_sinogram::<f32>(&a.sparse_sino).with_context(|| format!("io: reading {}", a.sparse_sino.display()))?;
    if let Some(p) = &a.geom {
        let geom: FanBeamGeometry = read_json(p)?;
        if &geom != sino.geometry() {
            bail!("sampler: {} does not match the sinogram's geometry", p.display());
        }
    }
    let sc = SamplerConfig {
        steps: a.steps.unwrap_or(cfg.sampler.steps),
        integrator: cfg.sampler.integrator,
        pfgm: file.pfgm.with_aug_dim(a.aug_dim.unwrap_or(file.pfgm.aug_dim)),
    };
    let opts = ReconstructOptions {
        grid: cfg.grid,
        filter: cfg.filter,
        transform: file.transform,
        consistency_iterations: a.consistency,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rec = reconstruct(&sino, &net, &sc, &opts, &mut rng).context("sampler")?;
    let out = output(g, &a.out)?;
    save_image(&rec.image.cast(), &out, &a.image)?;
    record(g, &[&out])?;
    Ok(true)
}

pub fn eval(g: &Global, a: &EvalArgs) -> Result<bool> {
    let window = parse_window(&a.window)?;
    let rule = match a.peak {
        Some(value) => PeakRule::Fixed { value },
        None => PeakRule::GroundTruthRange,
    };
    let mut preds: Vec<PathBuf> = fs::read_dir(&a.pred)
        .with_context(|| format!("io: listing {}", a.pred.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "raw"))
        .collect();
    preds.sort();
    let mut report = MetricReport::default();
    for p in &preds {
        let name = p.file_name().unwrap();
        let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
        let direct = a.gt.join(name);
        let nested = a.gt.join(&stem).join("truth.raw");
        let gt_path = if direct.exists() { direct } else { nested };
        if !gt_path.exists() {
            bail!("eval: no ground truth for {}", p.display());
        }
        let (mut pred, mut truth) = (load_image(p)?, load_image(&gt_path)?);
        if let Some(w) = window {
            pred = hu_window(&pred, w);
            truth = hu_window(&truth, w);
        }
        let row = report.push(stem, &pred, &truth, rule).context("metrics")?;
        eprintln!("{}: PSNR {:.3} dB SSIM {:.4}", row.image_id, row.psnr_db, row.ssim);
    }
    let out = output(g, &a.out)?;
    fs::write(&out, report.to_csv()).with_context(|| format!("io: writing {}", out.display()))?;
    record(g, &[&out])?;
    Ok(true)
}

pub fn end_to_end(g: &Global, a: &EndToEndArgs) -> Result<bool> {
    let mut cfg = config(g)?;
    if let Some(n) = a.iters {
        cfg.train.iterations = n;
    }
    if a.echo {
        cfg.model = ModelSource::ConditionEcho;
    } else if let Some(m) = &a.model {
        cfg.model = ModelSource::Load { path: m.clone() };
    }
    let report = pipeline::end_to_end(&cfg)?;
    let mut written: Vec<PathBuf> = Vec::new();
    let cfg_path = output(g, Path::new("config.json"))?;
    write_json(&cfg_path, &cfg)?;
    written.push(cfg_path);
    if let (ModelSource::Train, Some(file)) = (&cfg.model, &report.model) {
        let mp = output(g, Path::new("model.json"))?;
        file.save(&mp)?;
        let tp = trace_path(&mp);
        write_json(&tp, &report.trace)?;
        let csv = output(g, Path::new("trace.csv"))?;
        fs::write(&csv, pipeline::trace_csv(&report.trace))?;
        written.extend([mp, tp, csv]);
    }
    for (name, rep) in [("metrics_fbp.csv", &report.fbp), ("metrics_pocgm.csv", &report.pocgm)] {
        let p = output(g, Path::new(name))?;
        fs::write(&p, rep.to_csv())?;
        written.push(p);
    }
    for (row, img) in report.pocgm.rows.iter().zip(&report.reconstructions) {
        let p = output(g, &Path::new("recon").join(format!("{}.raw", row.image_id)))?;
        write_image(img, &p, ImageFormat::RawFloat, None)?;
        written.push(p);
    }
    let refs: Vec<&Path> = written.iter().map(|p| p.as_path()).collect();
    record(g, &refs)?;
    println!("{}", report.summary());
    if g.check {
        let ok = report.meets_improvement_criterion();
        println!("improvement check: {}", if ok { "PASS" } else { "FAIL" });
        return Ok(ok);
    }
    Ok(true)
}

pub fn show_config(g: &Global) -> Result<bool> {
    println!("{}", config(g)?.to_json());
    Ok(true)
}
