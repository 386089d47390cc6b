//! Flat `key=value` run configuration.

use std::path::{Path, PathBuf};

use stride_core::corrector::consistency_registry;
use stride_core::diffusion::{GuidanceMode, NoiseSchedule};
use stride_core::fbp::{FanWeighting, FilterKind};
use stride_core::pipeline::{AlignmentMode, PipelineConfig};
use stride_core::wavelet::WaveletFilter;

use crate::error::{CliError, CliResult};

pub const KEYS: &[&str] = &[
    "seed",
    "diffusion_steps",
    "beta_start",
    "beta_end",
    "ddim_steps",
    "eta",
    "guidance",
    "nu",
    "alignment",
    "denoiser",
    "score",
    "omega",
    "wavelet",
    "corrector_steps",
    "eps_start",
    "eps_end",
    "lambda_low",
    "lambda_high",
    "t_start",
    "temperature",
    "sigma_min",
    "sigma_max",
    "refine",
    "consistency",
    "filter",
    "cutoff",
    "cosine_preweight",
    "weighting",
    "prior",
    "nets_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub prior: Option<PathBuf>,
    pub nets_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            prior: None,
            nets_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(CliError::Usage(format!("config key {key}: expected a boolean, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let p = &mut self.pipeline;
        match key {
            "seed" => p.seed = parse(key, value)?,
            "diffusion_steps" => self.diffusion_steps = parse(key, value)?,
            "beta_start" => self.beta_start = parse(key, value)?,
            "beta_end" => self.beta_end = parse(key, value)?,
            "ddim_steps" => p.ddim_steps = parse(key, value)?,
            "eta" => p.eta = parse(key, value)?,
            "guidance" => p.guidance.mode = GuidanceMode::parse(value)?,
            "nu" => p.guidance.nu = parse(key, value)?,
            "alignment" => p.alignment = AlignmentMode::parse(value)?,
            "denoiser" => p.denoiser = value.to_string(),
            "score" => p.score = value.to_string(),
            "omega" => p.omega = parse(key, value)?,
            "wavelet" => p.wavelet = WaveletFilter::from_name(value)?,
            "corrector_steps" => p.corrector.n_steps = parse(key, value)?,
            "eps_start" => p.corrector.eps_start = parse(key, value)?,
            "eps_end" => p.corrector.eps_end = parse(key, value)?,
            "lambda_low" => p.corrector.lambda_low = parse(key, value)?,
            "lambda_high" => p.corrector.lambda_high = parse(key, value)?,
            "t_start" => p.corrector.t_start = parse(key, value)?,
            "temperature" => p.corrector.temperature = parse(key, value)?,
            "sigma_min" => p.corrector.ve.sigma_min = parse(key, value)?,
            "sigma_max" => p.corrector.ve.sigma_max = parse(key, value)?,
            "refine" => {
                let flags: Vec<bool> = value.chars().map(|c| c == '1').collect();
                if flags.len() != 4 || !value.chars().all(|c| c == '0' || c == '1') {
                    return Err(CliError::Usage(format!(
                        "refine takes four 0/1 flags for LL, LH, HL, HH, got {value:?}"
                    )));
                }
                p.corrector.refine = [flags[0], flags[1], flags[2], flags[3]];
            }
            "consistency" => {
                if !consistency_registry().contains(value) {
                    return Err(CliError::Usage(format!(
                        "unknown consistency {value:?} (available: {})",
                        consistency_registry().names().join(", ")
                    )));
                }
                p.corrector.consistency = value.to_string();
            }
            "filter" => p.fbp.filter.kind = FilterKind::parse(value)?,
            "cutoff" => p.fbp.filter.cutoff = parse(key, value)?,
            "cosine_preweight" => p.fbp.cosine_preweight = parse_bool(key, value)?,
            "weighting" => p.fbp.weighting = FanWeighting::parse(value)?,
            "prior" => self.prior = Some(PathBuf::from(value)),
            "nets_dir" => self.nets_dir = Some(PathBuf::from(value)),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown config key {other:?} (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> CliResult<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// The pipeline configuration with the noise schedule rebuilt and checked.
    pub fn finish(&self) -> CliResult<PipelineConfig> {
        let mut p = self.pipeline.clone();
        p.schedule = NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)?;
        p.guidance.total_steps = self.diffusion_steps;
        p.validate()?;
        Ok(p)
    }

    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let c = &p.corrector;
        let refine: String = c.refine.iter().map(|&r| if r { '1' } else { '0' }).collect();
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        put("seed", p.seed.to_string());
        put("diffusion_steps", self.diffusion_steps.to_string());
        put("beta_start", format!("{:?}", self.beta_start));
        put("beta_end", format!("{:?}", self.beta_end));
        put("ddim_steps", p.ddim_steps.to_string());
        put("eta", format!("{:?}", p.eta));
        put("guidance", p.guidance.mode.label());
        put("nu", format!("{:?}", p.guidance.nu));
        put("alignment", p.alignment.name().into());
        put("denoiser", p.denoiser.clone());
        put("score", p.score.clone());
        put("omega", format!("{:?}", p.omega));
        put("wavelet", p.wavelet.name().into());
        put("corrector_steps", c.n_steps.to_string());
        put("eps_start", format!("{:?}", c.eps_start));
        put("eps_end", format!("{:?}", c.eps_end));
        put("lambda_low", format!("{:?}", c.lambda_low));
        put("lambda_high", format!("{:?}", c.lambda_high));
        put("t_start", format!("{:?}", c.t_start));
        put("temperature", format!("{:?}", c.temperature));
        put("sigma_min", format!("{:?}", c.ve.sigma_min));
        put("sigma_max", format!("{:?}", c.ve.sigma_max));
        put("refine", refine);
        put("consistency", c.consistency.clone());
        put("filter", p.fbp.filter.kind.name().into());
        put("cutoff", format!("{:?}", p.fbp.filter.cutoff));
        put("cosine_preweight", p.fbp.cosine_preweight.to_string());
        put("weighting", p.fbp.weighting.name().into());
        if let Some(path) = &self.prior {
            put("prior", path.display().to_string());
        }
        if let Some(path) = &self.nets_dir {
            put("nets_dir", path.display().to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# comment\nguidance = fixed:0.3\nrefine=1010\nweighting=detector-radius\nprior=/tmp/p.bin\nt_start=0.5\n",
            "test",
        )
        .unwrap();
        assert_eq!(cfg.pipeline.guidance.mode, GuidanceMode::Fixed(0.3));
        assert_eq!(cfg.pipeline.corrector.refine, [true, false, true, false]);
        let mut again = RunConfig::default();
        again.apply_text(&cfg.to_text(), "dump").unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn every_key_is_dumped_and_accepted() {
        let mut cfg = RunConfig::default();
        cfg.prior = Some("p".into());
        cfg.nets_dir = Some("n".into());
        let text = cfg.to_text();
        for k in KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{k}="))), "{k}");
        }
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("ddim_stepz", "5"), Err(CliError::Usage(_))));
        assert!(cfg.set("ddim_steps", "five").is_err());
        assert!(cfg.set("refine", "11").is_err());
        assert!(cfg.set("consistency", "bogus").is_err());
        assert!(cfg.apply_text("no equals sign", "x").is_err());
        assert!(cfg.apply_override("eta").is_err());
    }

    #[test]
    fn finish_validates() {
        let mut cfg = RunConfig::default();
        assert!(cfg.finish().is_ok());
        cfg.set("diffusion_steps", "50").unwrap();
        cfg.set("ddim_steps", "10").unwrap();
        let p = cfg.finish().unwrap();
        assert_eq!(p.schedule.steps(), 50);
        assert_eq!(p.guidance.total_steps, 50);
        cfg.set("nu", "2").unwrap();
        assert!(cfg.finish().is_err());
    }
}
