//! End-to-end sparse-view reconstruction: guided coarse generation,
//! intensity alignment, wavelet-band refinement, fusion and FBP.

mod ablation;
mod problem;

use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};

pub use ablation::{ablate, component_ablations, lambda_sweep, write_ablation_csv, Ablation, AblationRow};
pub use problem::{phantom_corpus, CorpusSpec, PriorBundle, Problem, PRIOR_MAGIC};

use crate::corrector::{
    apply_linear_alignment, data_consistency, fit_linear_alignment, refine_bands, BandModels, CorrectorConfig,
    Observation,
};
use crate::denoiser::{
    denoiser_registry, score_registry, Denoiser, GaussianPrior, ModelArgs, ScoreModel, SubspacePrior, TinyNet,
};
use crate::diffusion::{
    apply_sparse_guidance, ddim_sigma, ddim_step, predict_x0, GuidanceConfig, GuidanceContext, NoiseSchedule,
};
use crate::error::{check_shape, Error, Result};
use crate::evalkit::{mse, psnr, ssim};
use crate::fbp::{fbp_reconstruct_with, FbpOptions};
use crate::geometry::{mask_rows, FanBeamGeometry, ImageGrid, ImageShape, Sinogram, SparseMask};
use crate::registry::Registry;
use crate::rng::{derive_seed, gaussian_array, stream};
use crate::wavelet::{iswt_reconstruct, swt_decompose, WaveletFilter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignmentMode {
    Off,
    /// Once, after coarse generation.
    #[default]
    Once,
    /// On every clean estimate inside the sampler, and once after it.
    PerStep,
}

impl AlignmentMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(AlignmentMode::Off),
            "once" => Ok(AlignmentMode::Once),
            "per-step" => Ok(AlignmentMode::PerStep),
            other => Err(Error::invalid(format!("alignment mode must be off, once or per-step, got {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlignmentMode::Off => "off",
            AlignmentMode::Once => "once",
            AlignmentMode::PerStep => "per-step",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub schedule: NoiseSchedule,
    pub guidance: GuidanceConfig,
    pub ddim_steps: usize,
    /// Ancestral noise fraction of the reverse sampler (0 is deterministic).
    pub eta: f64,
    pub alignment: AlignmentMode,
    pub corrector: CorrectorConfig,
    pub fbp: FbpOptions,
    pub wavelet: WaveletFilter,
    pub seed: u64,
    pub denoiser: String,
    pub score: String,
    /// Guidance weight between conditional and unconditional predictions.
    pub omega: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let schedule = NoiseSchedule::default();
        Self {
            guidance: GuidanceConfig {
                total_steps: schedule.steps(),
                ..GuidanceConfig::default()
            },
            schedule,
            ddim_steps: 100,
            eta: 0.0,
            alignment: AlignmentMode::Once,
            corrector: CorrectorConfig::default(),
            fbp: FbpOptions::default(),
            wavelet: WaveletFilter::Haar,
            seed: 0,
            denoiser: "gaussian".into(),
            score: "gaussian".into(),
            omega: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.corrector.validate()?;
        self.fbp.filter.validate()?;
        self.schedule.sampling_steps(self.ddim_steps)?;
        if self.guidance.total_steps != self.schedule.steps() {
            return Err(Error::invalid("guidance horizon differs from the schedule length"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        if !denoiser_registry().contains(&self.denoiser) {
            return Err(Error::UnknownStrategy {
                kind: "denoiser",
                name: self.denoiser.clone(),
                available: denoiser_registry().names().join(", "),
            });
        }
        if !score_registry().contains(&self.score) {
            return Err(Error::UnknownStrategy {
                kind: "score model",
                name: self.score.clone(),
                available: score_registry().names().join(", "),
            });
        }
        Ok(())
    }
}

/// Trained networks, needed only when a `tinynet` model is selected.
#[derive(Debug, Clone, Default)]
pub struct Networks {
    pub eps: Option<TinyNet>,
    pub low: Option<TinyNet>,
    pub high: Option<TinyNet>,
}

/// Models in normalized units plus the normalization scale.
#[derive(Clone)]
pub struct Models {
    pub denoiser: Arc<dyn Denoiser>,
    pub bands: BandModels,
    pub scale: f64,
    pub dim: (usize, usize),
}

impl Models {
    pub fn from_bundle(bundle: &PriorBundle, cfg: &PipelineConfig, nets: &Networks) -> Result<Self> {
        if bundle.filter != cfg.wavelet {
            return Err(Error::invalid(format!(
                "prior bands use {} but the pipeline uses {}",
                bundle.filter.name(),
                cfg.wavelet.name()
            )));
        }
        let dim = bundle.dim();
        let args = |prior: &SubspacePrior, net: &Option<TinyNet>| ModelArgs {
            shape: dim,
            prior: Some(Arc::new(prior.clone()) as Arc<dyn GaussianPrior>),
            variance: 1.0,
            net: net.clone(),
            omega: cfg.omega,
            ve: cfg.corrector.ve,
        };
        let denoiser: Arc<dyn Denoiser> = denoiser_registry()
            .create(&cfg.denoiser, &args(&bundle.sinogram, &nets.eps))?
            .into();
        let scores = score_registry();
        let mut bands: Vec<Arc<dyn ScoreModel>> = Vec::with_capacity(4);
        for (b, prior) in bundle.bands.iter().enumerate() {
            let net = if b == 0 { &nets.low } else { &nets.high };
            bands.push(scores.create(&cfg.score, &args(prior, net))?.into());
        }
        let bands: BandModels = match bands.try_into() {
            Ok(b) => b,
            Err(_) => unreachable!("four band models"),
        };
        Ok(Self {
            denoiser,
            bands,
            scale: bundle.scale,
            dim,
        })
    }
}

/// Ground truth for reporting and oracle guidance.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub sinogram: ArrayView2<'a, f64>,
    pub image: Option<&'a ImageGrid>,
}

impl<'a> Reference<'a> {
    pub fn of(problem: &'a Problem) -> Self {
        Self {
            sinogram: problem.full.values.view(),
            image: Some(&problem.phantom),
        }
    }
}

/// Guided deterministic (or ancestral) reverse diffusion from pure noise.
/// `observed` is the zero-filled normalized measurement.
pub fn coarse_generate(
    observed: &Array2<f64>,
    m: &SparseMask,
    denoiser: &dyn Denoiser,
    cfg: &PipelineConfig,
    reference: Option<&Array2<f64>>,
) -> Result<Array2<f64>> {
    check_shape((m.n_views(), observed.ncols()), observed.dim())?;
    let sched = &cfg.schedule;
    let guidance = cfg.guidance.schedule()?;
    let ts = sched.sampling_steps(cfg.ddim_steps)?;
    let condition = denoiser.conditional().then_some(observed);
    let mut y = gaussian_array(&mut stream(cfg.seed, 0), observed.dim());
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = denoiser.predict_eps(&y, t, sched, condition)?;
        let mut x0 = predict_x0(&y, &eps, t, sched)?;
        if cfg.alignment == AlignmentMode::PerStep {
            let fit = fit_linear_alignment(&x0, observed, m)?;
            x0 = apply_linear_alignment(&x0, &fit.params);
        }
        let ctx = GuidanceContext {
            t,
            y0_hat: x0.view(),
            observed: observed.view(),
            mask: m,
            reference: reference.map(|r| r.view()),
        };
        let lambda = guidance.weight(&ctx)?;
        let guided = apply_sparse_guidance(&x0, observed, m, lambda)?;
        let sigma = ddim_sigma(t, t_prev, cfg.eta, sched);
        y = ddim_step(&y, &guided.values, &eps, t, t_prev, sigma, sched, derive_seed(cfg.seed, 1 + i as u64))?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("coarse generation", t));
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageMetrics {
    pub stage: String,
    /// Mean squared error against the measurements on the active rows.
    pub mse_masked: f64,
    /// Against the complete reference; NaN without one.
    pub mse_full: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub stages: Vec<StageMetrics>,
    /// Fitted intensity alignment, if applied.
    pub alignment: Option<(f64, f64)>,
}

impl Report {
    pub const HEADER: &'static str = "stage,mse_masked,mse_full,psnr,ssim";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for s in &self.stages {
            let _ = writeln!(out, "{},{},{},{},{}", s.stage, fmt(s.mse_masked), fmt(s.mse_full), fmt(s.psnr), fmt(s.ssim));
        }
        out
    }

    pub fn stage(&self, name: &str) -> Option<&StageMetrics> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

pub(crate) fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.6e}")
    }
}

fn masked_mse(y: &Array2<f64>, observed: &Array2<f64>, m: &SparseMask) -> f64 {
    let rows = m.active_indices();
    let n = (rows.len() * y.ncols()).max(1) as f64;
    crate::corrector::masked_residual(y, observed, m) / n
}

fn sinogram_stage(name: &str, y: &Array2<f64>, observed: &Array2<f64>, m: &SparseMask, reference: Option<&Reference>) -> Result<StageMetrics> {
    let (mse_full, p, s) = match reference {
        Some(r) => {
            let range = r.sinogram.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
            (mse(r.sinogram, y.view())?, psnr(r.sinogram, y.view(), range)?, ssim(r.sinogram, y.view(), range)?)
        }
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(StageMetrics {
        stage: name.into(),
        mse_masked: masked_mse(y, observed, m),
        mse_full,
        psnr: p,
        ssim: s,
    })
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub image: ImageGrid,
    pub sinogram: Sinogram,
    pub report: Report,
}

/// Coarse generation, alignment, band refinement, fusion, final row
/// replacement and FBP. `observed` is zero on inactive rows.
pub fn stride_reconstruct(
    observed: &Sinogram,
    m: &SparseMask,
    shape: &ImageShape,
    models: &Models,
    cfg: &PipelineConfig,
    reference: Option<&Reference>,
) -> Result<Reconstruction> {
    cfg.validate()?;
    check_shape(models.dim, observed.dim())?;
    check_shape((m.n_views(), observed.geometry.n_detectors), observed.dim())?;
    if let Some(r) = reference {
        check_shape(observed.dim(), r.sinogram.dim())?;
    }
    let scale = models.scale;
    let y_s = mask_rows(&observed.values, m)? / scale;
    let reference_n = reference.map(|r| &r.sinogram / scale);
    let mut report = Report::default();
    let mut record = |name: &str, y: &Array2<f64>| -> Result<()> {
        let raw = y * scale;
        report
            .stages
            .push(sinogram_stage(name, &raw, &observed.values, m, reference)?);
        Ok(())
    };

    let coarse = coarse_generate(&y_s, m, models.denoiser.as_ref(), cfg, reference_n.as_ref())?;
    record("coarse", &coarse)?;

    let mut alignment = None;
    let aligned = if cfg.alignment == AlignmentMode::Off {
        coarse
    } else {
        let fit = fit_linear_alignment(&coarse, &y_s, m)?;
        alignment = Some((fit.params.a, fit.params.b));
        apply_linear_alignment(&coarse, &fit.params)
    };
    record("aligned", &aligned)?;

    let bands = swt_decompose(aligned.view(), cfg.wavelet, 1)?;
    let observed_bands = swt_decompose(y_s.view(), cfg.wavelet, 1)?;
    let obs = Observation::new(&y_s, &observed_bands, m)?;
    let corrector = CorrectorConfig {
        seed: derive_seed(cfg.seed, 0xC0),
        ..cfg.corrector.clone()
    };
    let refined = refine_bands(&bands, &obs, &models.bands, &corrector)?;
    let fused = iswt_reconstruct(&refined)?;
    record("refined", &fused)?;

    // Replace rows after undoing the normalization so kept views are bit-exact.
    let consistent = data_consistency(&(fused * scale), &observed.values, m)?;
    if consistent.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("fusion", 0));
    }
    report
        .stages
        .push(sinogram_stage("consistent", &consistent, &observed.values, m, reference)?);
    report.alignment = alignment;

    let sinogram = Sinogram::new(observed.geometry, consistent)?;
    let image = fbp_reconstruct_with(&sinogram, &observed.geometry, shape, &cfg.fbp)?;
    report.stages.push(image_stage(&image, reference)?);
    Ok(Reconstruction { image, sinogram, report })
}

fn image_stage(image: &ImageGrid, reference: Option<&Reference>) -> Result<StageMetrics> {
    let (mse_full, p, s) = match reference.and_then(|r| r.image) {
        Some(truth) => (
            mse(truth.values.view(), image.values.view())?,
            psnr(truth.values.view(), image.values.view(), 1.0)?,
            ssim(truth.values.view(), image.values.view(), 1.0)?,
        ),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(StageMetrics {
        stage: "image".into(),
        mse_masked: f64::NAN,
        mse_full,
        psnr: p,
        ssim: s,
    })
}

/// FBP from the active views only. Regular masks whose interval divides the
/// view count reconstruct on the reduced angular grid; other masks fall
/// back to the zero-filled sinogram scaled by the inverse keep ratio.
pub fn sparse_fbp(observed: &Sinogram, m: &SparseMask, shape: &ImageShape, opts: &FbpOptions) -> Result<ImageGrid> {
    let g = observed.geometry;
    check_shape((m.n_views(), g.n_detectors), observed.dim())?;
    let kept = m.active_indices();
    if kept.is_empty() {
        return Err(Error::invalid("no active views to reconstruct from"));
    }
    let regular = match m.interval {
        Some(r) => g.n_views % r == 0,
        None => kept.len() == g.n_views,
    };
    if regular {
        let step = g.n_views / kept.len();
        let sub = FanBeamGeometry {
            n_views: kept.len(),
            angle_start: g.angle(kept[0]),
            angle_end: g.angle(kept[0]) + g.angular_span(),
            ..g
        };
        debug_assert!(kept.iter().enumerate().all(|(i, &k)| k == kept[0] + i * step));
        let values = Array2::from_shape_fn((kept.len(), g.n_detectors), |(i, d)| observed.values[[kept[i], d]]);
        return fbp_reconstruct_with(&Sinogram::new(sub, values)?, &sub, shape, opts);
    }
    let filled = mask_rows(&observed.values, m)? * (g.n_views as f64 / kept.len() as f64);
    fbp_reconstruct_with(&Sinogram::new(g, filled)?, &g, shape, opts)
}

/// A complete reconstruction method selected by name.
pub trait Reconstructor: Send + Sync {
    fn name(&self) -> &str;
    fn reconstruct(&self, observed: &Sinogram, m: &SparseMask, shape: &ImageShape, reference: Option<&Reference>) -> Result<Reconstruction>;
}

struct FbpMethod(FbpOptions);

impl Reconstructor for FbpMethod {
    fn name(&self) -> &str {
        "fbp"
    }

    fn reconstruct(&self, observed: &Sinogram, m: &SparseMask, shape: &ImageShape, reference: Option<&Reference>) -> Result<Reconstruction> {
        let image = sparse_fbp(observed, m, shape, &self.0)?;
        let report = Report {
            stages: vec![image_stage(&image, reference)?],
            alignment: None,
        };
        Ok(Reconstruction {
            image,
            sinogram: observed.clone(),
            report,
        })
    }
}

struct StrideMethod {
    models: Models,
    cfg: PipelineConfig,
}

impl Reconstructor for StrideMethod {
    fn name(&self) -> &str {
        "stride"
    }

    fn reconstruct(&self, observed: &Sinogram, m: &SparseMask, shape: &ImageShape, reference: Option<&Reference>) -> Result<Reconstruction> {
        stride_reconstruct(observed, m, shape, &self.models, &self.cfg, reference)
    }
}

pub struct MethodArgs {
    pub cfg: PipelineConfig,
    pub models: Option<Models>,
}

pub fn method_registry() -> Registry<dyn Reconstructor, MethodArgs> {
    let mut reg: Registry<dyn Reconstructor, MethodArgs> = Registry::new("reconstruction method");
    reg.register("fbp", |a| Ok(Box::new(FbpMethod(a.cfg.fbp))))
        .register("stride", |a| {
            let models = a
                .models
                .clone()
                .ok_or_else(|| Error::invalid("the stride method needs fitted models"))?;
            Ok(Box::new(StrideMethod {
                models,
                cfg: a.cfg.clone(),
            }))
        });
    reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::IsotropicPrior;
    use crate::diffusion::GuidanceMode;
    use crate::geometry::make_sparse_mask;

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            ddim_steps: 20,
            corrector: CorrectorConfig {
                n_steps: 10,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn full_mask_with_unit_guidance_returns_measurement() {
        let y = gaussian_array(&mut stream(1, 1), (12, 6));
        let m = SparseMask::full(12);
        let prior = Arc::new(IsotropicPrior::new(Array2::zeros((12, 6)), 1.0).unwrap());
        let den = crate::denoiser::GaussianDenoiser::new(prior, "iso");
        let cfg = PipelineConfig {
            guidance: GuidanceConfig {
                mode: GuidanceMode::Fixed(1.0),
                ..small_cfg().guidance
            },
            ..small_cfg()
        };
        let out = coarse_generate(&y, &m, &den, &cfg, None).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn coarse_generation_is_seed_deterministic() {
        let y = gaussian_array(&mut stream(1, 1), (12, 6));
        let m = make_sparse_mask(12, 3).unwrap();
        let prior = Arc::new(IsotropicPrior::new(Array2::zeros((12, 6)), 1.0).unwrap());
        let den = crate::denoiser::GaussianDenoiser::new(prior, "iso");
        let cfg = PipelineConfig { eta: 1.0, ..small_cfg() };
        let a = coarse_generate(&y, &m, &den, &cfg, None).unwrap();
        let b = coarse_generate(&y, &m, &den, &cfg, None).unwrap();
        assert_eq!(a, b);
        let c = coarse_generate(&y, &m, &den, &PipelineConfig { seed: 9, ..cfg }, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        assert!(PipelineConfig {
            denoiser: "unet".into(),
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(PipelineConfig {
            ddim_steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(AlignmentMode::parse("per-step").unwrap(), AlignmentMode::PerStep);
        assert!(AlignmentMode::parse("twice").is_err());
    }

    #[test]
    fn report_csv_layout() {
        let r = Report {
            stages: vec![StageMetrics {
                stage: "image".into(),
                mse_masked: f64::NAN,
                mse_full: 0.5,
                psnr: f64::INFINITY,
                ssim: 1.0,
            }],
            alignment: None,
        };
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), Report::HEADER);
        assert_eq!(lines.next().unwrap(), "image,nan,5.000000e-1,inf,1.000000e0");
    }

    #[test]
    fn sparse_fbp_matches_reduced_geometry() {
        let p = Problem::shepp_logan(32, 60, 64, 3).unwrap();
        let opts = FbpOptions::default();
        let img = sparse_fbp(&p.observed, &p.mask, &p.shape, &opts).unwrap();
        let direct = Problem::shepp_logan(32, 20, 64, 1).unwrap();
        let full = fbp_reconstruct_with(&direct.full, &direct.geometry, &direct.shape, &opts).unwrap();
        let diff = img.values.iter().zip(&full.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-9, "{diff}");
    }
}
