//! Gaussian priors with closed-form posterior means and scores.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Denoiser, ScoreModel};
use crate::diffusion::{NoiseSchedule, VeSchedule};
use crate::error::{check_shape, Error, Result};

const MIN_VARIANCE: f64 = 1e-12;

/// `E[y0 | y_t]` for `y0 ~ N(μ, v I)`, returned as the implied `ε̂`.
pub fn analytic_gaussian_eps(
    yt: &Array2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    prior_mean: &Array2<f64>,
    prior_var: f64,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    check_shape(prior_mean.dim(), yt.dim())?;
    if !(prior_var > 0.0) {
        return Err(Error::invalid(format!("prior variance must be positive, got {prior_var}")));
    }
    let ab = sched.alpha_bar(t);
    if ab >= 1.0 {
        return Ok(Array2::zeros(yt.dim()));
    }
    let v = prior_var.max(MIN_VARIANCE);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let den = ab * v + 1.0 - ab;
    Ok(Zip::from(yt).and(prior_mean).map_collect(|&y, &m| {
        let post = (s * v * y + (1.0 - ab) * m) / den;
        (y - s * post) / n
    }))
}

/// `-(y - mean) / var`.
pub fn analytic_gaussian_score(y: &Array2<f64>, mean: &Array2<f64>, var: f64) -> Result<Array2<f64>> {
    check_shape(mean.dim(), y.dim())?;
    if !(var > 0.0) {
        return Err(Error::invalid(format!("variance must be positive, got {var}")));
    }
    Ok(Zip::from(y).and(mean).map_collect(|&y, &m| -(y - m) / var))
}

/// A Gaussian `N(μ, C)` whose covariance can be applied through a spectral
/// function, `f(C) x`.
pub trait GaussianPrior: Send + Sync {
    fn mean(&self) -> &Array2<f64>;
    fn apply_fn(&self, x: &Array2<f64>, f: &dyn Fn(f64) -> f64) -> Array2<f64>;

    /// `E[y0 | y_t]` where `y_t = √ᾱ y0 + √(1-ᾱ) ε`.
    fn posterior_mean(&self, yt: &Array2<f64>, alpha_bar: f64) -> Array2<f64> {
        let s = alpha_bar.sqrt();
        let r = yt - &(self.mean() * s);
        let gain = self.apply_fn(&r, &|lam| s * lam / (alpha_bar * lam + 1.0 - alpha_bar));
        self.mean() + &gain
    }

    /// Score of the prior convolved with `N(0, σ² I)`.
    fn noisy_score(&self, y: &Array2<f64>, sigma: f64) -> Array2<f64> {
        let r = y - self.mean();
        let s2 = sigma * sigma;
        -self.apply_fn(&r, &|lam| 1.0 / (lam + s2))
    }
}

/// `C = v I`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicPrior {
    pub mean: Array2<f64>,
    pub var: f64,
}

impl IsotropicPrior {
    pub fn new(mean: Array2<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::invalid(format!("prior variance must be positive, got {var}")));
        }
        Ok(Self {
            mean,
            var: var.max(MIN_VARIANCE),
        })
    }
}

impl GaussianPrior for IsotropicPrior {
    fn mean(&self) -> &Array2<f64> {
        &self.mean
    }
    fn apply_fn(&self, x: &Array2<f64>, f: &dyn Fn(f64) -> f64) -> Array2<f64> {
        x * f(self.var)
    }
}

/// Covariance that is circulant along both axes: diagonal in the unitary
/// 2-D DFT, with `power[[k, l]]` the variance of frequency `(k, l)`.
#[derive(Clone)]
pub struct SpectralPrior {
    pub mean: Array2<f64>,
    pub power: Array2<f64>,
    plans: Arc<Plans>,
}

struct Plans {
    rows_fwd: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_fwd: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new((n, m): (usize, usize)) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows_fwd: planner.plan_fft_forward(n),
            rows_inv: planner.plan_fft_inverse(n),
            cols_fwd: planner.plan_fft_forward(m),
            cols_inv: planner.plan_fft_inverse(m),
        }
    }

    /// Unscaled 2-D transform of a complex array, in place.
    fn transform(&self, a: &mut Array2<Complex<f64>>, inverse: bool) {
        let (along0, along1) = if inverse {
            (&self.rows_inv, &self.cols_inv)
        } else {
            (&self.rows_fwd, &self.cols_fwd)
        };
        for mut row in a.axis_iter_mut(Axis(0)) {
            let slice = row.as_slice_mut().expect("standard layout");
            along1.process(slice);
        }
        let mut buf = vec![Complex::new(0.0, 0.0); a.nrows()];
        for mut col in a.axis_iter_mut(Axis(1)) {
            for (b, v) in buf.iter_mut().zip(col.iter()) {
                *b = *v;
            }
            along0.process(&mut buf);
            for (v, b) in col.iter_mut().zip(&buf) {
                *v = *b;
            }
        }
    }

    fn forward_real(&self, x: &Array2<f64>) -> Array2<Complex<f64>> {
        let mut a = x.mapv(|v| Complex::new(v, 0.0));
        self.transform(&mut a, false);
        a
    }
}

impl std::fmt::Debug for SpectralPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralPrior")
            .field("dim", &self.mean.dim())
            .finish_non_exhaustive()
    }
}

impl PartialEq for SpectralPrior {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.power == other.power
    }
}

impl SpectralPrior {
    pub fn new(mean: Array2<f64>, power: Array2<f64>) -> Result<Self> {
        check_shape(mean.dim(), power.dim())?;
        if mean.is_empty() {
            return Err(Error::invalid("empty prior"));
        }
        if power.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::invalid("prior power must be positive and finite"));
        }
        let mean = mean.as_standard_layout().into_owned();
        let power = power.as_standard_layout().into_owned();
        Ok(Self {
            plans: Arc::new(Plans::new(mean.dim())),
            mean,
            power,
        })
    }

    /// Fits mean and per-frequency power from samples; power is floored at
    /// `floor` times its largest entry.
    pub fn fit(samples: &[Array2<f64>], floor: f64) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("cannot fit a prior to no samples"))?;
        let dim = first.dim();
        let mut mean = Array2::zeros(dim);
        for s in samples {
            check_shape(dim, s.dim())?;
            mean += s;
        }
        mean /= samples.len() as f64;
        let plans = Plans::new(dim);
        let norm = (dim.0 * dim.1) as f64;
        let mut power = Array2::<f64>::zeros(dim);
        for s in samples {
            let spec = plans.forward_real(&(s - &mean));
            Zip::from(&mut power).and(&spec).for_each(|p, c| *p += c.norm_sqr() / norm);
        }
        let count = samples.len().max(2) as f64 - 1.0;
        power /= count;
        let peak = power.iter().fold(0.0f64, |m, &p| m.max(p));
        let min = (floor * peak).max(MIN_VARIANCE);
        power.mapv_inplace(|p| p.max(min));
        Self::new(mean, power)
    }
}

impl GaussianPrior for SpectralPrior {
    fn mean(&self) -> &Array2<f64> {
        &self.mean
    }

    fn apply_fn(&self, x: &Array2<f64>, f: &dyn Fn(f64) -> f64) -> Array2<f64> {
        let mut spec = self.plans.forward_real(x);
        let scale = 1.0 / x.len() as f64;
        Zip::from(&mut spec).and(&self.power).for_each(|c, &p| *c *= f(p) * scale);
        self.plans.transform(&mut spec, true);
        spec.mapv(|c| c.re)
    }
}

/// Exact posterior-mean noise predictor for a Gaussian prior.
pub struct GaussianDenoiser {
    prior: Arc<dyn GaussianPrior>,
    label: &'static str,
}

impl GaussianDenoiser {
    pub fn new(prior: Arc<dyn GaussianPrior>, label: &'static str) -> Self {
        Self { prior, label }
    }
}

impl Denoiser for GaussianDenoiser {
    fn name(&self) -> &str {
        self.label
    }

    fn conditional(&self) -> bool {
        false
    }

    fn predict_eps(&self, yt: &Array2<f64>, t: usize, sched: &NoiseSchedule, _condition: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        sched.check_step(t)?;
        check_shape(self.prior.mean().dim(), yt.dim())?;
        let ab = sched.alpha_bar(t);
        if ab >= 1.0 {
            return Ok(Array2::zeros(yt.dim()));
        }
        let post = self.prior.posterior_mean(yt, ab);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Zip::from(yt).and(&post).map_collect(|&y, &p| (y - s * p) / n))
    }
}

/// Score of a Gaussian prior at variance-exploding noise level `σ(t)`.
pub struct GaussianScore {
    prior: Arc<dyn GaussianPrior>,
    ve: VeSchedule,
    label: &'static str,
}

impl GaussianScore {
    pub fn new(prior: Arc<dyn GaussianPrior>, ve: VeSchedule, label: &'static str) -> Self {
        Self { prior, ve, label }
    }
}

impl ScoreModel for GaussianScore {
    fn name(&self) -> &str {
        self.label
    }

    fn score(&self, y: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        check_shape(self.prior.mean().dim(), y.dim())?;
        Ok(self.prior.noisy_score(y, self.ve.sigma(t)))
    }
}
