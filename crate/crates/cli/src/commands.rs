use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use ndarray::Array2;
use stride_core::denoiser::{train_epsilon, train_score, TinyNet, TrainConfig};
use stride_core::evalkit::{kl_divergence, mse, psnr, shepp_logan, ssim};
use stride_core::geometry::{apply_mask, make_sparse_mask, FanBeamGeometry, ImageGrid, ImageShape, Sinogram};
use stride_core::pipeline::{
    ablate, component_ablations, lambda_sweep, method_registry, phantom_corpus, write_ablation_csv, CorpusSpec,
    MethodArgs, Models, Networks, PriorBundle, Problem, Reference,
};
use stride_core::projector::{forward_project, simulate_measurement, NoiseSpec};
use stride_core::wavelet::{swt_decompose, WaveletFilter};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::formats::*;

pub const MIN_SIZE: usize = 16;
pub const EPS_NET: &str = "eps.net";
pub const LOW_NET: &str = "low.net";
pub const HIGH_NET: &str = "high.net";

fn write_text(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::io(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

fn square_image(values: Array2<f64>, g: &FanBeamGeometry, path: &Path) -> CliResult<ImageGrid> {
    let (ny, nx) = values.dim();
    if nx != ny {
        return Err(CliError::Data(format!("{}: expected a square image, got {nx}×{ny}", path.display())));
    }
    Ok(ImageGrid::new(ImageShape::covering(g, nx), values)?)
}

fn check_size(size: usize) -> CliResult<()> {
    if size < MIN_SIZE {
        return Err(CliError::Usage(format!("--size must be at least {MIN_SIZE}, got {size}")));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an 8-bit preview.
    #[arg(long)]
    pub pgm: Option<PathBuf>,
}

pub fn phantom(a: &PhantomArgs) -> CliResult<()> {
    check_size(a.size)?;
    let p = shepp_logan(a.size, a.size)?;
    write_image(&a.out, &p.values)?;
    if let Some(pgm) = &a.pgm {
        write_pgm(pgm, &p.values)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    #[arg(long, default_value_t = 180)]
    pub views: usize,
    #[arg(long, default_value_t = 128)]
    pub dets: usize,
    /// Read the geometry from a `.geom` file instead.
    #[arg(long, conflicts_with_all = ["views", "dets"])]
    pub geom: Option<PathBuf>,
}

impl GeometryArgs {
    fn geometry(&self) -> CliResult<FanBeamGeometry> {
        match &self.geom {
            Some(path) => Ok(read_geometry(path)?.0),
            None => {
                let g = FanBeamGeometry::scaled(self.views, self.dets);
                g.validate()?;
                Ok(g)
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// Keep every r-th view.
    #[arg(long, default_value_t = 1)]
    pub r: usize,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Measured sinogram; its geometry goes next to it as `.geom`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the complete noise-free sinogram.
    #[arg(long)]
    pub full: Option<PathBuf>,
}

pub fn simulate(a: &SimulateArgs) -> CliResult<()> {
    let g = a.geometry.geometry()?;
    let image = square_image(read_image(&a.image)?, &g, &a.image)?;
    let mask = make_sparse_mask(g.n_views, a.r)?;
    let full = forward_project(&image, &g)?;
    let measured = if a.noise > 0.0 {
        simulate_measurement(&image, &g, &NoiseSpec::gaussian(a.noise, a.seed), &mask)?
    } else {
        apply_mask(&full, &mask)?
    };
    write_sinogram(&a.out, &measured.values)?;
    write_geometry(&geometry_path(&a.out), &g, Some(a.r))?;
    if let Some(path) = &a.full {
        write_sinogram(path, &full.values)?;
        write_geometry(&geometry_path(path), &g, None)?;
    }
    log::info!("{} of {} views kept", mask.count_active(), g.n_views);
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub geometry: GeometryArgs,
    /// Image side of the corpus phantoms.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 200)]
    pub corpus: usize,
    #[arg(long, default_value_t = 0xC0FFEE)]
    pub corpus_seed: u64,
    #[arg(long, default_value_t = 200)]
    pub rank: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub floor: f64,
    #[arg(long, default_value = "haar")]
    pub wavelet: String,
    /// Prior bundle output.
    #[arg(long)]
    pub out: PathBuf,
    /// Also train networks into this directory.
    #[arg(long)]
    pub nets_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    check_size(a.size)?;
    let g = a.geometry.geometry()?;
    let filter = WaveletFilter::from_name(&a.wavelet)?;
    let spec = CorpusSpec {
        size: a.corpus,
        seed: a.corpus_seed,
        rank: a.rank,
        floor: a.floor,
    };
    let corpus = phantom_corpus(&g, ImageShape::covering(&g, a.size), &spec)?;
    let bundle = PriorBundle::fit(&corpus, filter, &spec)?;
    bundle.save(&a.out)?;
    log::info!("prior rank {} written to {}", bundle.sinogram.rank(), a.out.display());
    let Some(dir) = &a.nets_dir else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let normalized: Vec<Array2<f64>> = corpus.iter().map(|c| c / bundle.scale).collect();
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let sched = RunConfig::default().finish()?.schedule;
    let (eps, trace) = train_epsilon(TinyNet::new(2, a.seed), &normalized, &sched, &cfg)?;
    log::info!("noise model losses {trace:?}");
    eps.save(&dir.join(EPS_NET))?;
    let mut low = Vec::with_capacity(normalized.len());
    let mut high = Vec::with_capacity(3 * normalized.len());
    for s in &normalized {
        let bands = swt_decompose(s.view(), filter, 1)?;
        let [ll, lh, hl, hh] = bands.bands();
        low.push(ll.clone());
        high.extend([lh.clone(), hl.clone(), hh.clone()]);
    }
    let ve = RunConfig::default().pipeline.corrector.ve;
    let (net, trace) = train_score(TinyNet::new(1, a.seed + 1), &low, &ve, &cfg)?;
    log::info!("low-band score losses {trace:?}");
    net.save(&dir.join(LOW_NET))?;
    let (net, trace) = train_score(TinyNet::new(1, a.seed + 2), &high, &ve, &cfg)?;
    log::info!("high-band score losses {trace:?}");
    net.save(&dir.join(HIGH_NET))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// `key=value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Prior bundle; overrides the `prior` key.
    #[arg(long)]
    pub prior: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(p) = &self.prior {
            cfg.prior = Some(p.clone());
        }
        Ok(cfg)
    }
}

fn load_networks(dir: &Path) -> CliResult<Networks> {
    let load = |name: &str| -> CliResult<Option<TinyNet>> {
        let path = dir.join(name);
        if path.exists() {
            Ok(Some(TinyNet::load(&path)?))
        } else {
            Ok(None)
        }
    };
    Ok(Networks {
        eps: load(EPS_NET)?,
        low: load(LOW_NET)?,
        high: load(HIGH_NET)?,
    })
}

fn load_models(run: &RunConfig, cfg: &stride_core::pipeline::PipelineConfig) -> CliResult<Models> {
    let path = run
        .prior
        .as_ref()
        .ok_or_else(|| CliError::Usage("this method needs a prior bundle (--prior or the prior key)".into()))?;
    let bundle = PriorBundle::load(path)?;
    let nets = match &run.nets_dir {
        Some(dir) => load_networks(dir)?,
        None => Networks::default(),
    };
    Ok(Models::from_bundle(&bundle, cfg, &nets)?)
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long, default_value = "fbp")]
    pub method: String,
    #[arg(long)]
    pub sino: PathBuf,
    /// Defaults to the `.geom` file next to the sinogram.
    #[arg(long)]
    pub geom: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Complete sinogram used for the stage report.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Ground-truth image used for the stage report.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Per-stage CSV report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Completed sinogram output.
    #[arg(long)]
    pub sino_out: Option<PathBuf>,
    #[arg(long)]
    pub pgm: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

pub fn reconstruct(a: &ReconstructArgs) -> CliResult<()> {
    check_size(a.size)?;
    let run = a.run.load()?;
    let cfg = run.finish()?;
    let geom_path = a.geom.clone().unwrap_or_else(|| geometry_path(&a.sino));
    let (g, mask) = read_geometry(&geom_path)?;
    let observed = Sinogram::new(g, read_sinogram(&a.sino)?)?;
    let shape = ImageShape::covering(&g, a.size);
    let registry = method_registry();
    if !registry.contains(&a.method) {
        return Err(CliError::Usage(format!(
            "unknown method {:?} (available: {})",
            a.method,
            registry.names().join(", ")
        )));
    }
    let models = if a.method == "fbp" {
        None
    } else {
        Some(load_models(&run, &cfg)?)
    };
    let method = registry.create(&a.method, &MethodArgs { cfg, models })?;
    let full = match &a.reference {
        Some(path) => Some(read_sinogram(path)?),
        None => None,
    };
    let truth = match &a.truth {
        Some(path) => Some(square_image(read_image(path)?, &g, path)?),
        None => None,
    };
    if let Some(t) = &truth {
        if t.shape.nx != a.size {
            return Err(CliError::Data(format!("truth is {}×{} but --size is {}", t.shape.nx, t.shape.ny, a.size)));
        }
    }
    let reference = full.as_ref().map(|s| Reference {
        sinogram: s.view(),
        image: truth.as_ref(),
    });
    let rec = method.reconstruct(&observed, &mask, &shape, reference.as_ref())?;
    write_image(&a.out, &rec.image.values)?;
    if let Some(path) = &a.sino_out {
        write_sinogram(path, &rec.sinogram.values)?;
        write_geometry(&geometry_path(path), &g, None)?;
    }
    if let Some(path) = &a.pgm {
        write_pgm(path, &rec.image.values)?;
    }
    if let Some(path) = &a.report {
        write_text(Some(path), &rec.report.to_csv())?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub bins: usize,
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let r = read_image(&a.reference)?;
    let t = read_image(&a.test)?;
    if r.dim() != t.dim() {
        return Err(CliError::Data(format!("image sizes differ: {:?} vs {:?}", r.dim(), t.dim())));
    }
    let (lo, hi) = r.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let row = format!(
        "psnr,ssim,mse,kl\n{:?},{:?},{:?},{:?}\n",
        psnr(r.view(), t.view(), range)?,
        ssim(r.view(), t.view(), range)?,
        mse(r.view(), t.view())?,
        kl_divergence(r.view(), t.view(), a.bins)?
    );
    write_text(None, &row)
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub phantom: PathBuf,
    #[command(flatten)]
    pub geometry: GeometryArgs,
    #[arg(long, default_value_t = 3)]
    pub r: usize,
    /// Fixed weights 0, 0.1, ..., 1 and the temporal schedule instead of
    /// the component toggles.
    #[arg(long)]
    pub lambda_sweep: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

pub fn ablate_cmd(a: &AblateArgs) -> CliResult<()> {
    let run = a.run.load()?;
    let cfg = run.finish()?;
    let g = a.geometry.geometry()?;
    let phantom = square_image(read_image(&a.phantom)?, &g, &a.phantom)?;
    let problem = Problem::new(phantom, g, a.r, &NoiseSpec::none())?;
    let models = load_models(&run, &cfg)?;
    let settings = if a.lambda_sweep {
        lambda_sweep(&cfg)
    } else {
        component_ablations(&cfg)
    };
    let rows = ablate(&problem, &models, &settings)?;
    let mut buf = Vec::new();
    write_ablation_csv(&mut buf, &rows).expect("writing to memory");
    write_text(a.out.as_deref(), &String::from_utf8(buf).expect("ascii csv"))
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

/// Prints the effective configuration.
pub fn show_config(a: &ConfigArgs) -> CliResult<()> {
    let run = a.run.load()?;
    run.finish()?;
    write_text(None, &run.to_text())
}
