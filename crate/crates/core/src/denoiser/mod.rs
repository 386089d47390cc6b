//! Noise predictors and score models.

mod gaussian;
pub mod io;
mod subspace;
mod tinynet;

use std::sync::Arc;

use ndarray::Array2;

pub use gaussian::{
    analytic_gaussian_eps, analytic_gaussian_score, GaussianDenoiser, GaussianPrior, GaussianScore, IsotropicPrior,
    SpectralPrior,
};
pub use subspace::SubspacePrior;
pub use tinynet::{
    draw_epsilon_sample, draw_score_sample, grad_check, train_epsilon, train_score, Adam, NetDenoiser, NetScore,
    TinyNet, TrainConfig, TrainingSample, HIDDEN, MAGIC as NET_MAGIC,
};

use crate::diffusion::{NoiseSchedule, VeSchedule};
use crate::error::{Error, Result};
use crate::registry::Registry;

/// Predicts the noise in `y_t`, optionally given the masked sinogram.
pub trait Denoiser: Send + Sync {
    fn name(&self) -> &str;
    fn conditional(&self) -> bool;
    fn predict_eps(&self, yt: &Array2<f64>, t: usize, sched: &NoiseSchedule, condition: Option<&Array2<f64>>) -> Result<Array2<f64>>;
}

/// Approximates `∇_y log p_t(y)` at continuous time `t ∈ [0, 1]`.
pub trait ScoreModel: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, y: &Array2<f64>, t: f64) -> Result<Array2<f64>>;
}

/// Arguments shared by the model factories.
#[derive(Clone)]
pub struct ModelArgs {
    pub shape: (usize, usize),
    /// Prior for the `gaussian` variants.
    pub prior: Option<Arc<dyn GaussianPrior>>,
    /// Variance of the `analytic` (isotropic) prior.
    pub variance: f64,
    pub net: Option<TinyNet>,
    /// Classifier-free guidance weight of conditional networks.
    pub omega: f64,
    pub ve: VeSchedule,
}

impl ModelArgs {
    pub fn new(shape: (usize, usize)) -> Self {
        Self {
            shape,
            prior: None,
            variance: 1.0,
            net: None,
            omega: 0.0,
            ve: VeSchedule::default(),
        }
    }

    fn isotropic(&self) -> Result<Arc<dyn GaussianPrior>> {
        let mean = match &self.prior {
            Some(p) => p.mean().clone(),
            None => Array2::zeros(self.shape),
        };
        Ok(Arc::new(IsotropicPrior::new(mean, self.variance)?))
    }

    fn prior(&self) -> Result<Arc<dyn GaussianPrior>> {
        self.prior
            .clone()
            .ok_or_else(|| Error::invalid("the gaussian model needs a fitted prior"))
    }

    fn net(&self) -> Result<TinyNet> {
        self.net
            .clone()
            .ok_or_else(|| Error::invalid("the tinynet model needs trained parameters"))
    }
}

pub fn denoiser_registry() -> Registry<dyn Denoiser, ModelArgs> {
    let mut reg: Registry<dyn Denoiser, ModelArgs> = Registry::new("denoiser");
    reg.register("analytic", |a| Ok(Box::new(GaussianDenoiser::new(a.isotropic()?, "analytic"))))
        .register("gaussian", |a| Ok(Box::new(GaussianDenoiser::new(a.prior()?, "gaussian"))))
        .register("tinynet", |a| {
            Ok(Box::new(NetDenoiser {
                net: a.net()?,
                omega: a.omega,
            }))
        });
    reg
}

pub fn score_registry() -> Registry<dyn ScoreModel, ModelArgs> {
    let mut reg: Registry<dyn ScoreModel, ModelArgs> = Registry::new("score model");
    reg.register("analytic", |a| Ok(Box::new(GaussianScore::new(a.isotropic()?, a.ve, "analytic"))))
        .register("gaussian", |a| Ok(Box::new(GaussianScore::new(a.prior()?, a.ve, "gaussian"))))
        .register("tinynet", |a| {
            let net = a.net()?;
            if net.conditional() {
                return Err(Error::invalid("score networks take one input channel"));
            }
            Ok(Box::new(NetScore { net, ve: a.ve }))
        });
    reg
}
