//! Component toggles and guidance-weight sweeps over one problem.

use std::io::Write;

use crate::diffusion::GuidanceMode;
use crate::error::Result;
use crate::evalkit::{kl_divergence, mse, psnr, ssim};

use super::{fmt, stride_reconstruct, Models, PipelineConfig, Problem, Reference};

pub const KL_BINS: usize = 64;

#[derive(Debug, Clone)]
pub struct Ablation {
    pub name: String,
    pub cfg: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub sinogram_mse: f64,
    pub kl: f64,
}

/// The full configuration followed by one configuration per disabled component.
pub fn component_ablations(base: &PipelineConfig) -> Vec<Ablation> {
    let with = |name: &str, f: &dyn Fn(&mut PipelineConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Ablation { name: name.into(), cfg }
    };
    vec![
        with("full", &|_| {}),
        with("no-guidance", &|c| c.guidance.mode = GuidanceMode::Fixed(0.0)),
        with("no-alignment", &|c| c.alignment = super::AlignmentMode::Off),
        with("no-low-band", &|c| c.corrector.refine[0] = false),
        with("no-high-band", &|c| {
            for r in &mut c.corrector.refine[1..] {
                *r = false;
            }
        }),
    ]
}

/// Fixed weights 0, 0.1, ..., 1 and the temporal schedule.
pub fn lambda_sweep(base: &PipelineConfig) -> Vec<Ablation> {
    let mut out: Vec<Ablation> = (0..=10)
        .map(|i| {
            let lambda = i as f64 / 10.0;
            let mut cfg = base.clone();
            cfg.guidance.mode = GuidanceMode::Fixed(lambda);
            Ablation {
                name: format!("fixed:{lambda:.1}"),
                cfg,
            }
        })
        .collect();
    let mut cfg = base.clone();
    cfg.guidance.mode = GuidanceMode::Temporal;
    out.push(Ablation {
        name: "temporal".into(),
        cfg,
    });
    out
}

pub fn ablate(problem: &Problem, models: &Models, settings: &[Ablation]) -> Result<Vec<AblationRow>> {
    let reference = Reference::of(problem);
    settings
        .iter()
        .map(|a| {
            log::info!("ablation {}", a.name);
            let rec = stride_reconstruct(&problem.observed, &problem.mask, &problem.shape, models, &a.cfg, Some(&reference))?;
            let truth = problem.phantom.values.view();
            let img = rec.image.values.view();
            Ok(AblationRow {
                setting: a.name.clone(),
                psnr: psnr(truth, img, 1.0)?,
                ssim: ssim(truth, img, 1.0)?,
                mse: mse(truth, img)?,
                sinogram_mse: mse(problem.full.values.view(), rec.sinogram.values.view())?,
                kl: kl_divergence(problem.full.values.view(), rec.sinogram.values.view(), KL_BINS)?,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(w, "setting,psnr,ssim,mse,sinogram_mse,kl")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.setting, fmt(r.psnr), fmt(r.ssim), fmt(r.mse), fmt(r.sinogram_mse), fmt(r.kl))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_has_twelve_rows() {
        let s = lambda_sweep(&PipelineConfig::default());
        assert_eq!(s.len(), 12);
        assert_eq!(s[0].cfg.guidance.mode, GuidanceMode::Fixed(0.0));
        assert_eq!(s[10].cfg.guidance.mode, GuidanceMode::Fixed(1.0));
        assert_eq!(s[11].name, "temporal");
    }

    #[test]
    fn component_toggles() {
        let base = PipelineConfig::default();
        let a = component_ablations(&base);
        assert_eq!(a[0].cfg, base);
        assert_eq!(a.len(), 5);
        assert!(a.iter().skip(1).all(|x| x.cfg != base));
        assert_eq!(a[4].cfg.corrector.refine, [true, false, false, false]);
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        write_ablation_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "setting,psnr,ssim,mse,sinogram_mse,kl\n");
    }
}
