//! Test phantoms and image/sinogram quality metrics.

mod metrics;
mod phantom;

pub use metrics::{kl_divergence, mse, psnr, ssim, SSIM_WINDOW};
pub use phantom::{
    perturbed_shepp_logan, rasterize, shepp_logan, shepp_logan_ellipses, shepp_logan_on, Ellipse,
};
