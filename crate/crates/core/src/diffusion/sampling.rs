use ndarray::{Array2, Zip};

use super::schedule::NoiseSchedule;
use crate::error::{check_shape, Error, Result};
use crate::rng::{gaussian_array, rng_from};

/// `y_t = √ᾱ_t y0 + √(1-ᾱ_t) ε` with `ε` drawn from `seed`; returns `(y_t, ε)`.
pub fn forward_noising(y0: &Array2<f64>, t: usize, sched: &NoiseSchedule, seed: u64) -> Result<(Array2<f64>, Array2<f64>)> {
    sched.check_step(t)?;
    let eps = gaussian_array(&mut rng_from(seed), y0.dim());
    let yt = noise_with(y0, &eps, t, sched)?;
    Ok((yt, eps))
}

/// Forward noising with a supplied `ε`.
pub fn noise_with(y0: &Array2<f64>, eps: &Array2<f64>, t: usize, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    check_shape(y0.dim(), eps.dim())?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(y0).and(eps).map_collect(|&y, &e| s * y + n * e))
}

/// `ŷ0 = (y_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(yt: &Array2<f64>, eps_hat: &Array2<f64>, t: usize, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    check_shape(yt.dim(), eps_hat.dim())?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(yt).and(eps_hat).map_collect(|&y, &e| (y - n * e) / s))
}

/// Noise level of the ancestral sampler between `t` and `t_prev`, scaled by `eta`.
pub fn ddim_sigma(t: usize, t_prev: usize, eta: f64, sched: &NoiseSchedule) -> f64 {
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt()
}

/// One reverse step `y_{t_prev} = √ᾱ_prev ỹ0 + √(1-ᾱ_prev-σ²) ε̂ + σ z`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    yt: &Array2<f64>,
    y0_tilde: &Array2<f64>,
    eps_hat: &Array2<f64>,
    t: usize,
    t_prev: usize,
    sigma: f64,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("reverse step needs t_prev < t, got {t_prev} >= {t}")));
    }
    check_shape(yt.dim(), y0_tilde.dim())?;
    check_shape(yt.dim(), eps_hat.dim())?;
    let ab_prev = sched.alpha_bar(t_prev);
    let dir = 1.0 - ab_prev - sigma * sigma;
    if !(sigma >= 0.0) || dir < -1e-12 {
        return Err(Error::invalid(format!("noise level {sigma} too large for step {t} -> {t_prev}")));
    }
    let (a, d) = (ab_prev.sqrt(), dir.max(0.0).sqrt());
    let mut out = Zip::from(y0_tilde).and(eps_hat).map_collect(|&x, &e| a * x + d * e);
    if sigma > 0.0 {
        let z = gaussian_array(&mut rng_from(seed), yt.dim());
        out.scaled_add(sigma, &z);
    }
    Ok(out)
}

/// `μ = (y_t - (1-α_t)/√(1-ᾱ_t) ε̂) / √α_t`.
pub fn ddpm_posterior_mean(yt: &Array2<f64>, eps_hat: &Array2<f64>, t: usize, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    if t == 0 {
        return Err(Error::invalid("posterior mean needs t >= 1"));
    }
    sched.check_step(t)?;
    check_shape(yt.dim(), eps_hat.dim())?;
    let (a, ab) = (sched.alpha(t), sched.alpha_bar(t));
    let k = (1.0 - a) / (1.0 - ab).sqrt();
    let s = a.sqrt();
    Ok(Zip::from(yt).and(eps_hat).map_collect(|&y, &e| (y - k * e) / s))
}

/// Classifier-free combination `(1+ω) ε_c - ω ε_u`.
pub fn cfg_combine(eps_cond: &Array2<f64>, eps_uncond: &Array2<f64>, omega: f64) -> Result<Array2<f64>> {
    check_shape(eps_cond.dim(), eps_uncond.dim())?;
    Ok(Zip::from(eps_cond)
        .and(eps_uncond)
        .map_collect(|&c, &u| (1.0 + omega) * c - omega * u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_array, rng_from};

    fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn noising_at_zero_is_identity() {
        let s = NoiseSchedule::default();
        let y0 = gaussian_array(&mut rng_from(1), (6, 7));
        let (yt, _) = forward_noising(&y0, 0, &s, 3).unwrap();
        assert_eq!(yt, y0);
        assert!(forward_noising(&y0, 1001, &s, 3).is_err());
    }

    #[test]
    fn noising_is_seed_deterministic() {
        let s = NoiseSchedule::default();
        let y0 = gaussian_array(&mut rng_from(1), (6, 7));
        let a = forward_noising(&y0, 400, &s, 11).unwrap();
        let b = forward_noising(&y0, 400, &s, 11).unwrap();
        assert_eq!(a, b);
        let c = forward_noising(&y0, 400, &s, 12).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn noising_moments() {
        // ᾱ = 0.25 in one step
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let y0 = Array2::from_elem((1, 100_000), 3.0);
        let (yt, _) = forward_noising(&y0, 1, &s, 2024).unwrap();
        let n = yt.len() as f64;
        let mean = yt.sum() / n;
        let sd = (yt.mapv(|v| (v - mean).powi(2)).sum() / n).sqrt();
        assert!((mean / 1.5 - 1.0).abs() < 0.02, "{mean}");
        assert!((sd / 0.75f64.sqrt() - 1.0).abs() < 0.02, "{sd}");
    }

    #[test]
    fn predict_x0_inverts_noising() {
        let s = NoiseSchedule::default();
        let y0 = gaussian_array(&mut rng_from(8), (5, 9));
        for t in [1, 10, 250, 500, 999, 1000] {
            let (yt, eps) = forward_noising(&y0, t, &s, t as u64).unwrap();
            let back = predict_x0(&yt, &eps, t, &s).unwrap();
            assert!(max_abs(&back, &y0) <= 1e-5, "{t}");
        }
        let zero = Array2::zeros((5, 9));
        assert_eq!(predict_x0(&y0, &zero, 0, &s).unwrap(), y0);
    }

    #[test]
    fn final_ddim_step_returns_estimate() {
        let s = NoiseSchedule::default();
        let mut rng = rng_from(4);
        let yt = gaussian_array(&mut rng, (4, 4));
        let x0 = gaussian_array(&mut rng, (4, 4));
        let e = gaussian_array(&mut rng, (4, 4));
        let out = ddim_step(&yt, &x0, &e, 10, 0, 0.0, &s, 0).unwrap();
        assert_eq!(out, x0);
        assert!(ddim_step(&yt, &x0, &e, 10, 10, 0.0, &s, 0).is_err());
        assert!(ddim_step(&yt, &x0, &e, 10, 5, 2.0, &s, 0).is_err());
    }

    #[test]
    fn stochastic_ddim_is_seed_deterministic() {
        let s = NoiseSchedule::default();
        let mut rng = rng_from(4);
        let yt = gaussian_array(&mut rng, (4, 4));
        let x0 = gaussian_array(&mut rng, (4, 4));
        let e = gaussian_array(&mut rng, (4, 4));
        let sigma = ddim_sigma(500, 490, 1.0, &s);
        assert!(sigma > 0.0);
        let a = ddim_step(&yt, &x0, &e, 500, 490, sigma, &s, 77).unwrap();
        let b = ddim_step(&yt, &x0, &e, 500, 490, sigma, &s, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_trajectory_with_exact_noise() {
        let s = NoiseSchedule::default();
        let y0 = gaussian_array(&mut rng_from(21), (8, 8));
        let ts = s.sampling_steps(100).unwrap();
        let mut y = gaussian_array(&mut rng_from(22), (8, 8));
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            let ab = s.alpha_bar(t);
            let eps = (&y - &(&y0 * ab.sqrt())) / (1.0 - ab).sqrt();
            let x0 = predict_x0(&y, &eps, t, &s).unwrap();
            y = ddim_step(&y, &x0, &eps, t, t_prev, 0.0, &s, 0).unwrap();
        }
        assert!(max_abs(&y, &y0) <= 1e-4);
    }

    #[test]
    fn posterior_mean_cases() {
        let s = NoiseSchedule::default();
        let mut rng = rng_from(30);
        let yt = gaussian_array(&mut rng, (3, 5));
        let zero = Array2::zeros((3, 5));
        let m = ddpm_posterior_mean(&yt, &zero, 300, &s).unwrap();
        assert!(max_abs(&m, &(&yt / s.alpha(300).sqrt())) < 1e-14);

        let y0 = gaussian_array(&mut rng, (3, 5));
        let (y1, eps) = forward_noising(&y0, 1, &s, 5).unwrap();
        assert!(max_abs(&ddpm_posterior_mean(&y1, &eps, 1, &s).unwrap(), &y0) <= 1e-6);
    }

    #[test]
    fn posterior_mean_equals_ancestral_ddim_mean() {
        let s = NoiseSchedule::default();
        let mut rng = rng_from(31);
        for t in [2, 17, 400, 1000] {
            let yt = gaussian_array(&mut rng, (4, 6));
            let eps = gaussian_array(&mut rng, (4, 6));
            let x0 = predict_x0(&yt, &eps, t, &s).unwrap();
            let sigma = ddim_sigma(t, t - 1, 1.0, &s);
            let ab_prev = s.alpha_bar(t - 1);
            let mean = &x0 * ab_prev.sqrt() + &eps * (1.0 - ab_prev - sigma * sigma).sqrt();
            let mu = ddpm_posterior_mean(&yt, &eps, t, &s).unwrap();
            let scale = mu.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            assert!(max_abs(&mean, &mu) <= 1e-6 * scale, "{t}");
        }
    }

    #[test]
    fn cfg_cases() {
        let one = Array2::from_elem((2, 2), 1.0);
        let zero = Array2::zeros((2, 2));
        assert_eq!(cfg_combine(&one, &zero, 0.0).unwrap(), one);
        assert_eq!(cfg_combine(&one, &one, 5.0).unwrap(), one);
        assert!(cfg_combine(&one, &zero, 2.0).unwrap().iter().all(|&v| v == 3.0));
        assert!(cfg_combine(&one, &Array2::zeros((2, 3)), 1.0).is_err());
    }
}
