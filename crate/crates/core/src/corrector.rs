//! Intensity alignment, Langevin refinement of wavelet bands and data
//! consistency.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use rayon::prelude::*;

use crate::denoiser::ScoreModel;
use crate::diffusion::VeSchedule;
use crate::error::{check_shape, Error, Result};
use crate::geometry::{mask_rows, SparseMask};
use crate::registry::Registry;
use crate::rng::{derive_seed, gaussian_array, rng_from};
use crate::wavelet::{iswt_reconstruct, shrink_active_rows, swt_decompose, WaveletBands};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentParams {
    pub a: f64,
    pub b: f64,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        Self { a: 1.0, b: 0.0 }
    }
}

impl AlignmentParams {
    pub fn inverse(&self) -> Result<Self> {
        if self.a == 0.0 {
            return Err(Error::invalid("alignment with zero scale has no inverse"));
        }
        Ok(Self {
            a: 1.0 / self.a,
            b: -self.b / self.a,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentFit {
    pub params: AlignmentParams,
    /// The masked generated values were constant; only the shift was fitted.
    pub degenerate: bool,
}

/// Least-squares `(a, b)` minimizing `Σ (a·y_gen + b − y_s)²` over the active rows.
pub fn fit_linear_alignment(y_gen: &Array2<f64>, y_s: &Array2<f64>, m: &SparseMask) -> Result<AlignmentFit> {
    check_shape(y_gen.dim(), y_s.dim())?;
    check_shape((m.n_views(), y_gen.ncols()), y_gen.dim())?;
    if m.count_active() < 2 {
        return Err(Error::invalid("alignment needs at least two active views"));
    }
    let rows = m.active_indices();
    let pairs = || {
        rows.iter()
            .flat_map(|&i| y_gen.row(i).into_iter().zip(y_s.row(i)).map(|(&x, &y)| (x, y)))
    };
    let n = (rows.len() * y_gen.ncols()) as f64;
    let (sx, sy) = pairs().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (sxx, sxy, sq) = pairs().fold((0.0, 0.0, 0.0), |(a, b, c), (x, y)| {
        let dx = x - mx;
        (a + dx * dx, b + dx * (y - my), c + x * x)
    });
    if !(sxx.is_finite() && sxy.is_finite()) {
        return Err(Error::invalid("non-finite values in alignment inputs"));
    }
    if sxx <= 1e-12 * sq.max(f64::MIN_POSITIVE) {
        log::warn!("generated values are constant on the active rows; fitting the shift only");
        return Ok(AlignmentFit {
            params: AlignmentParams { a: 1.0, b: my - mx },
            degenerate: true,
        });
    }
    let a = sxy / sxx;
    Ok(AlignmentFit {
        params: AlignmentParams { a, b: my - a * mx },
        degenerate: false,
    })
}

pub fn apply_linear_alignment(y: &Array2<f64>, p: &AlignmentParams) -> Array2<f64> {
    y.mapv(|v| p.a * v + p.b)
}

/// Sum of squared residuals on the active rows.
pub fn masked_residual(y: &Array2<f64>, y_s: &Array2<f64>, m: &SparseMask) -> f64 {
    m.active_indices()
        .into_iter()
        .map(|i| y.row(i).iter().zip(y_s.row(i)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum()
}

/// `band + ε·score + √(2ε)·z` with an explicit noise draw.
pub fn langevin_update(band: &Array2<f64>, score: &Array2<f64>, eps: f64, z: &Array2<f64>) -> Result<Array2<f64>> {
    check_shape(band.dim(), score.dim())?;
    check_shape(band.dim(), z.dim())?;
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("Langevin step size must be positive, got {eps}")));
    }
    let k = (2.0 * eps).sqrt();
    Ok(Zip::from(band).and(score).and(z).map_collect(|&b, &s, &z| b + eps * s + k * z))
}

/// One Langevin step with `z` drawn from `seed`.
pub fn langevin_step(
    band: &Array2<f64>,
    score: &dyn ScoreModel,
    t: f64,
    eps: f64,
    temperature: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    let s = score.score(band, t)?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite(format!("score of {}", score.name()), 0));
    }
    let mut z = gaussian_array(&mut rng_from(seed), band.dim());
    if temperature != 1.0 {
        z *= temperature.sqrt();
    }
    langevin_update(band, &s, eps, &z)
}

/// Replaces the active rows of `band` with those of `observed`.
pub fn data_consistency(band: &Array2<f64>, observed: &Array2<f64>, m: &SparseMask) -> Result<Array2<f64>> {
    check_shape(band.dim(), observed.dim())?;
    check_shape((m.n_views(), band.ncols()), band.dim())?;
    let mut out = band.clone();
    for (i, (mut row, obs)) in out.axis_iter_mut(Axis(0)).zip(observed.axis_iter(Axis(0))).enumerate() {
        if m.is_active(i) {
            row.assign(&obs);
        }
    }
    Ok(out)
}

/// Measurements available to a band-consistency operator.
pub struct Observation<'a> {
    /// Zero-filled sparse sinogram.
    pub sinogram: &'a Array2<f64>,
    /// Its wavelet bands.
    pub bands: &'a WaveletBands,
    pub mask: &'a SparseMask,
}

impl<'a> Observation<'a> {
    pub fn new(sinogram: &'a Array2<f64>, bands: &'a WaveletBands, mask: &'a SparseMask) -> Result<Self> {
        check_shape(sinogram.dim(), bands.dim())?;
        check_shape((mask.n_views(), sinogram.ncols()), sinogram.dim())?;
        Ok(Self { sinogram, bands, mask })
    }
}

/// Projection of a set of bands onto the measurements.
pub trait BandConsistency: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, bands: &WaveletBands, obs: &Observation) -> Result<WaveletBands>;
}

/// Row replacement in every band, restricted to the active rows whose band
/// values are unaffected by the zero-filled rows.
pub struct ShrunkRows;

impl BandConsistency for ShrunkRows {
    fn name(&self) -> &str {
        "shrunk-rows"
    }

    fn apply(&self, bands: &WaveletBands, obs: &Observation) -> Result<WaveletBands> {
        let shrunk = SparseMask::from_active(shrink_active_rows(&obs.mask.active, bands.filter));
        let mut out = bands.clone();
        for (b, o) in out.bands_mut().into_iter().zip(obs.bands.bands()) {
            *b = data_consistency(b, o, &shrunk)?;
        }
        Ok(out)
    }
}

/// `b − W(M∘W⁻¹b) + W(M∘y_s)`: the synthesized sinogram takes the measured
/// rows exactly while the part of `b` invisible to the mask is kept.
pub struct SynthesisProjection;

impl BandConsistency for SynthesisProjection {
    fn name(&self) -> &str {
        "synthesis"
    }

    fn apply(&self, bands: &WaveletBands, obs: &Observation) -> Result<WaveletBands> {
        let y = iswt_reconstruct(bands)?;
        let masked = mask_rows(&y, obs.mask)?;
        let seen = swt_decompose(masked.view(), bands.filter, bands.level)?;
        let mut out = bands.clone();
        for ((b, s), o) in out.bands_mut().into_iter().zip(seen.bands()).zip(obs.bands.bands()) {
            Zip::from(b).and(s).and(o).for_each(|b, &s, &o| *b += o - s);
        }
        Ok(out)
    }
}

pub struct NoConsistency;

impl BandConsistency for NoConsistency {
    fn name(&self) -> &str {
        "none"
    }

    fn apply(&self, bands: &WaveletBands, _: &Observation) -> Result<WaveletBands> {
        Ok(bands.clone())
    }
}

pub fn consistency_registry() -> Registry<dyn BandConsistency> {
    let mut reg: Registry<dyn BandConsistency> = Registry::new("band consistency");
    reg.register("synthesis", |_| Ok(Box::new(SynthesisProjection)))
        .register("shrunk-rows", |_| Ok(Box::new(ShrunkRows)))
        .register("none", |_| Ok(Box::new(NoConsistency)));
    reg
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorConfig {
    pub n_steps: usize,
    /// First and last step size, decayed geometrically.
    pub eps_start: f64,
    pub eps_end: f64,
    /// Step-size multipliers of the low and high branches.
    pub lambda_low: f64,
    pub lambda_high: f64,
    /// Noise level at which annealing starts, in `[0, 1]`.
    pub t_start: f64,
    /// Scales the variance of the injected noise; 0 gives gradient ascent.
    pub temperature: f64,
    pub ve: VeSchedule,
    pub seed: u64,
    /// Which of LL, LH, HL, HH are refined.
    pub refine: [bool; 4],
    pub consistency: String,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        let ve = VeSchedule::default();
        Self {
            n_steps: 600,
            eps_start: 1e-2 * ve.sigma_max * ve.sigma_max,
            eps_end: 1e-5,
            lambda_low: 1.0,
            lambda_high: 1.0,
            t_start: 1.0,
            temperature: 1.0,
            ve,
            seed: 0,
            refine: [true; 4],
            consistency: "synthesis".into(),
        }
    }
}

impl CorrectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.ve.validate()?;
        if !(self.eps_start > 0.0 && self.eps_end > 0.0 && self.lambda_low > 0.0 && self.lambda_high > 0.0) {
            return Err(Error::invalid("Langevin step sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.t_start) {
            return Err(Error::invalid(format!("t_start must lie in [0, 1], got {}", self.t_start)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be non-negative, got {}", self.temperature)));
        }
        if !consistency_registry().contains(&self.consistency) {
            return Err(Error::UnknownStrategy {
                kind: "band consistency",
                name: self.consistency.clone(),
                available: consistency_registry().names().join(", "),
            });
        }
        Ok(())
    }

    /// `(t_i, ε_i)` for every step: time falls linearly from `t_start` to 0
    /// and the step size decays geometrically.
    pub fn steps(&self) -> Vec<(f64, f64)> {
        let n = self.n_steps;
        (0..n)
            .map(|i| {
                let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 1.0 };
                let t = self.t_start * (1.0 - frac);
                let eps = self.eps_start * (self.eps_end / self.eps_start).powf(frac);
                (t, eps)
            })
            .collect()
    }
}

/// Score models for the four bands in LL, LH, HL, HH order.
pub type BandModels = [Arc<dyn ScoreModel>; 4];

/// Annealed Langevin refinement of each band, each step followed by the
/// configured consistency projection.
pub fn refine_bands(bands: &WaveletBands, obs: &Observation, models: &BandModels, cfg: &CorrectorConfig) -> Result<WaveletBands> {
    cfg.validate()?;
    check_shape(bands.dim(), obs.bands.dim())?;
    let consistency = consistency_registry().create(&cfg.consistency, &())?;
    let mut cur = bands.clone();
    for (step, (t, eps)) in cfg.steps().into_iter().enumerate() {
        let current = cur.bands();
        let next: Vec<Result<Option<Array2<f64>>>> = (0..4)
            .into_par_iter()
            .map(|b| {
                if !cfg.refine[b] {
                    return Ok(None);
                }
                let scale = if b == 0 { cfg.lambda_low } else { cfg.lambda_high };
                let seed = derive_seed(derive_seed(cfg.seed, b as u64), step as u64);
                let out = langevin_step(current[b], models[b].as_ref(), t, eps * scale, cfg.temperature, seed)
                    .map_err(|e| match e {
                        Error::NonFinite { stage, .. } => Error::NonFinite { stage, step },
                        e => e,
                    })?;
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(Error::non_finite("langevin refinement", step));
                }
                Ok(Some(out))
            })
            .collect();
        let mut updated = cur.clone();
        for (slot, r) in updated.bands_mut().into_iter().zip(next) {
            if let Some(v) = r? {
                *slot = v;
            }
        }
        cur = consistency.apply(&updated, obs)?;
    }
    Ok(cur)
}
