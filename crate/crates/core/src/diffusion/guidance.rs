use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{check_shape, Error, Result};
use crate::geometry::SparseMask;
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceMode {
    /// `λ_t = min(1, t/T)·ν`.
    Temporal,
    Fixed(f64),
    /// Per-step closed-form minimizer; needs a reference sinogram.
    Optimal,
    /// Grid-search minimizer; needs a reference sinogram.
    OptimalOracle { grid_step: f64 },
}

impl GuidanceMode {
    /// Parses `temporal`, `off`, `fixed:<λ>`, `optimal`, `optimal-oracle[:<step>]`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>, default: Option<f64>| -> Result<f64> {
            match (a, default) {
                (Some(a), _) => a
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad guidance parameter {a:?}"))),
                (None, Some(d)) => Ok(d),
                (None, None) => Err(Error::invalid(format!("guidance mode {name:?} needs a value, e.g. {name}:0.5"))),
            }
        };
        match name {
            "temporal" => Ok(GuidanceMode::Temporal),
            "off" => Ok(GuidanceMode::Fixed(0.0)),
            "fixed" => Ok(GuidanceMode::Fixed(num(arg, None)?)),
            "optimal" => Ok(GuidanceMode::Optimal),
            "optimal-oracle" => Ok(GuidanceMode::OptimalOracle {
                grid_step: num(arg, Some(1e-3))?,
            }),
            other => Err(Error::UnknownStrategy {
                kind: "guidance schedule",
                name: other.to_string(),
                available: guidance_registry().names().join(", "),
            }),
        }
    }

    pub fn registry_name(&self) -> &'static str {
        match self {
            GuidanceMode::Temporal => "temporal",
            GuidanceMode::Fixed(_) => "fixed",
            GuidanceMode::Optimal => "optimal",
            GuidanceMode::OptimalOracle { .. } => "optimal-oracle",
        }
    }

    pub fn label(&self) -> String {
        match self {
            GuidanceMode::Fixed(l) => format!("fixed:{l}"),
            GuidanceMode::OptimalOracle { grid_step } => format!("optimal-oracle:{grid_step}"),
            m => m.registry_name().to_string(),
        }
    }

    pub fn needs_reference(&self) -> bool {
        matches!(self, GuidanceMode::Optimal | GuidanceMode::OptimalOracle { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub nu: f64,
    pub total_steps: usize,
    pub mode: GuidanceMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            nu: 1.0,
            total_steps: 1000,
            mode: GuidanceMode::Temporal,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nu) {
            return Err(Error::invalid(format!("nu must lie in [0, 1], got {}", self.nu)));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("guidance needs T >= 1"));
        }
        match self.mode {
            GuidanceMode::Fixed(l) if !l.is_finite() => Err(Error::invalid("fixed guidance weight must be finite")),
            GuidanceMode::OptimalOracle { grid_step } if !(grid_step > 0.0 && grid_step <= 0.1) => {
                Err(Error::invalid(format!("grid step must lie in (0, 0.1], got {grid_step}")))
            }
            _ => Ok(()),
        }
    }

    pub fn schedule(&self) -> Result<Box<dyn GuidanceSchedule>> {
        self.validate()?;
        guidance_registry().create(self.mode.registry_name(), self)
    }
}

/// State visible to a guidance schedule at one sampling step.
pub struct GuidanceContext<'a> {
    pub t: usize,
    pub y0_hat: ArrayView2<'a, f64>,
    pub observed: ArrayView2<'a, f64>,
    pub mask: &'a SparseMask,
    /// Ground-truth sinogram, available only in oracle experiments.
    pub reference: Option<ArrayView2<'a, f64>>,
}

pub trait GuidanceSchedule: Send + Sync {
    fn name(&self) -> &str;
    fn weight(&self, ctx: &GuidanceContext) -> Result<f64>;
}

struct Temporal {
    nu: f64,
    total: usize,
}

impl GuidanceSchedule for Temporal {
    fn name(&self) -> &str {
        "temporal"
    }
    fn weight(&self, ctx: &GuidanceContext) -> Result<f64> {
        Ok(temporal_weight(ctx.t, self.total, self.nu))
    }
}

struct Fixed(f64);

impl GuidanceSchedule for Fixed {
    fn name(&self) -> &str {
        "fixed"
    }
    fn weight(&self, _: &GuidanceContext) -> Result<f64> {
        Ok(self.0)
    }
}

struct Optimal {
    grid_step: Option<f64>,
}

impl GuidanceSchedule for Optimal {
    fn name(&self) -> &str {
        if self.grid_step.is_some() {
            "optimal-oracle"
        } else {
            "optimal"
        }
    }
    fn weight(&self, ctx: &GuidanceContext) -> Result<f64> {
        let reference = ctx
            .reference
            .ok_or_else(|| Error::invalid(format!("{} guidance needs a reference sinogram", self.name())))?;
        let inputs = LambdaInputs::from_arrays(ctx.y0_hat, ctx.observed, reference, ctx.mask)?;
        match self.grid_step {
            Some(step) => optimal_lambda_oracle(&inputs, step),
            None => optimal_lambda(&inputs),
        }
    }
}

pub fn guidance_registry() -> Registry<dyn GuidanceSchedule, GuidanceConfig> {
    let mut reg: Registry<dyn GuidanceSchedule, GuidanceConfig> = Registry::new("guidance schedule");
    reg.register("temporal", |c| {
        Ok(Box::new(Temporal {
            nu: c.nu,
            total: c.total_steps,
        }))
    })
    .register("fixed", |c| match c.mode {
        GuidanceMode::Fixed(l) => Ok(Box::new(Fixed(l))),
        _ => Ok(Box::new(Fixed(c.nu))),
    })
    .register("optimal", |_| Ok(Box::new(Optimal { grid_step: None })))
    .register("optimal-oracle", |c| {
        let grid_step = match c.mode {
            GuidanceMode::OptimalOracle { grid_step } => grid_step,
            _ => 1e-3,
        };
        Ok(Box::new(Optimal {
            grid_step: Some(grid_step),
        }))
    });
    reg
}

pub fn temporal_weight(t: usize, total: usize, nu: f64) -> f64 {
    (t as f64 / total as f64).min(1.0) * nu
}

/// Weight of the configured schedule for modes that need no state.
pub fn guidance_weight(t: usize, cfg: &GuidanceConfig) -> Result<f64> {
    match cfg.mode {
        GuidanceMode::Temporal => Ok(temporal_weight(t, cfg.total_steps, cfg.nu)),
        GuidanceMode::Fixed(l) => Ok(l),
        _ => Err(Error::invalid("optimal guidance weights depend on the sampler state")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedEstimate {
    pub values: Array2<f64>,
    pub lambda: f64,
    /// Set when the requested weight fell outside `[0, 1]` and was clamped.
    pub clamped: bool,
}

/// `ỹ0 = ŷ0 + λ M∘(y_s − ŷ0)`: active rows move toward the observation.
pub fn apply_sparse_guidance(y0_hat: &Array2<f64>, observed: &Array2<f64>, m: &SparseMask, lambda: f64) -> Result<GuidedEstimate> {
    check_shape(y0_hat.dim(), observed.dim())?;
    if m.n_views() != y0_hat.nrows() {
        return Err(Error::ShapeMismatch {
            expected: (m.n_views(), y0_hat.ncols()),
            got: y0_hat.dim(),
        });
    }
    if lambda.is_nan() {
        return Err(Error::invalid("guidance weight is NaN"));
    }
    let l = lambda.clamp(0.0, 1.0);
    let clamped = l != lambda;
    if clamped {
        log::warn!("guidance weight {lambda} clamped to {l}");
    }
    let mut values = y0_hat.clone();
    for (i, (mut row, obs)) in values.axis_iter_mut(Axis(0)).zip(observed.axis_iter(Axis(0))).enumerate() {
        if m.is_active(i) {
            row.zip_mut_with(&obs, |v, &o| *v = (1.0 - l) * *v + l * o);
        }
    }
    Ok(GuidedEstimate {
        values,
        lambda: l,
        clamped,
    })
}

/// Error geometry of one guidance step: `ζ = ŷ0 − y_g`, `ξ = y_s − y_g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaInputs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LambdaInputs {
    pub fn new(a: f64, b: f64, c: f64) -> Result<Self> {
        let s = Self { a, b, c };
        s.validate()?;
        Ok(s)
    }

    pub fn from_vectors(zeta: &[f64], xi: &[f64]) -> Result<Self> {
        if zeta.len() != xi.len() {
            return Err(Error::invalid("error vectors differ in length"));
        }
        let a = zeta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let b = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        let c = zeta.iter().zip(xi).map(|(z, x)| z * x).sum();
        Self::new(a, b, c)
    }

    /// Restricts the error vectors to the active rows of `m`.
    pub fn from_arrays(
        y0_hat: ArrayView2<f64>,
        observed: ArrayView2<f64>,
        reference: ArrayView2<f64>,
        m: &SparseMask,
    ) -> Result<Self> {
        check_shape(reference.dim(), y0_hat.dim())?;
        check_shape(reference.dim(), observed.dim())?;
        let (mut zeta, mut xi) = (Vec::new(), Vec::new());
        for i in m.active_indices() {
            for j in 0..reference.ncols() {
                zeta.push(y0_hat[[i, j]] - reference[[i, j]]);
                xi.push(observed[[i, j]] - reference[[i, j]]);
            }
        }
        Self::from_vectors(&zeta, &xi)
    }

    pub fn validate(&self) -> Result<()> {
        let LambdaInputs { a, b, c } = *self;
        if !(a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(Error::invalid("non-finite guidance error terms"));
        }
        if a < 0.0 || b < 0.0 {
            return Err(Error::invalid("error norms must be non-negative"));
        }
        if c.abs() > a * b + 1e-12 * (1.0 + a * b) {
            return Err(Error::invalid(format!("|c| = {} exceeds a·b = {}", c.abs(), a * b)));
        }
        Ok(())
    }

    /// `f(λ) = ‖(1−λ)ζ + λξ‖²` from the summary statistics.
    pub fn objective(&self, lambda: f64) -> f64 {
        let LambdaInputs { a, b, c } = *self;
        let k = 1.0 - lambda;
        k * k * a * a + 2.0 * lambda * k * c + lambda * lambda * b * b
    }
}

/// `clamp((a² − c)/(a² + b² − 2c), 0, 1)`; 0 when the objective is flat.
pub fn optimal_lambda(inputs: &LambdaInputs) -> Result<f64> {
    inputs.validate()?;
    let LambdaInputs { a, b, c } = *inputs;
    let den = a * a + b * b - 2.0 * c;
    if den.abs() <= 1e-12 {
        return Ok(0.0);
    }
    Ok(((a * a - c) / den).clamp(0.0, 1.0))
}

/// Exhaustive minimizer of the guidance objective on a uniform grid over
/// `[0, 1]` (endpoint included); ties go to the lowest grid index.
pub fn optimal_lambda_oracle(inputs: &LambdaInputs, grid_step: f64) -> Result<f64> {
    inputs.validate()?;
    if !(grid_step > 0.0 && grid_step <= 0.1) {
        return Err(Error::invalid(format!("grid step must lie in (0, 0.1], got {grid_step}")));
    }
    let n = (1.0 / grid_step).round() as usize;
    let tol = 1e-12 * (1.0 + inputs.a * inputs.a + inputs.b * inputs.b);
    let (mut best, mut best_f) = (0.0, inputs.objective(0.0));
    for i in 1..=n {
        let l = (i as f64 * grid_step).min(1.0);
        let f = inputs.objective(l);
        if f < best_f - tol {
            best = l;
            best_f = f;
        }
    }
    Ok(best)
}

/// Clamped minimizer `a/(a−b)` of the Cauchy–Schwarz bound `((1−λ)a + λb)²`.
pub fn lambda_worst_case_bound(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a / (a - b)).clamp(0.0, 1.0)
}
