//! Filtered backprojection for flat-detector fan-beam and parallel-beam scans.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{check_shape, Error, Result};
use crate::geometry::{Beam, FanBeamGeometry, ImageGrid, ImageShape, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterKind {
    #[default]
    RamLak,
    HannRamLak,
}

impl FilterKind {
    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::RamLak => "ram-lak",
            FilterKind::HannRamLak => "hann",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ram-lak" | "ramlak" => Ok(FilterKind::RamLak),
            "hann" | "hann-windowed-ram-lak" => Ok(FilterKind::HannRamLak),
            other => Err(Error::UnknownStrategy {
                kind: "reconstruction filter",
                name: other.to_string(),
                available: "ram-lak, hann".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Fraction of the detector Nyquist frequency, in `(0, 1]`.
    pub cutoff: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            kind: FilterKind::RamLak,
            cutoff: 1.0,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::invalid(format!("filter cutoff must lie in (0, 1], got {}", self.cutoff)));
        }
        Ok(())
    }
}

/// How each view's contribution is weighted during fan-beam backprojection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FanWeighting {
    /// `D² / L²`, `L` the distance from the source to the pixel along the
    /// central ray; the exact weight for a flat detector.
    #[default]
    SourceDistance,
    /// `D² / (D² + r²)` with `r` the virtual detector coordinate.
    DetectorRadius,
}

impl FanWeighting {
    pub fn name(&self) -> &'static str {
        match self {
            FanWeighting::SourceDistance => "source-distance",
            FanWeighting::DetectorRadius => "detector-radius",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "source-distance" => Ok(FanWeighting::SourceDistance),
            "detector-radius" => Ok(FanWeighting::DetectorRadius),
            other => Err(Error::UnknownStrategy {
                kind: "fan weighting",
                name: other.to_string(),
                available: "source-distance, detector-radius".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FbpOptions {
    pub filter: FilterSpec,
    /// Cosine pre-weighting `D / sqrt(D² + r²)` of fan-beam projections.
    pub cosine_preweight: bool,
    pub weighting: FanWeighting,
}

impl Default for FbpOptions {
    fn default() -> Self {
        Self {
            filter: FilterSpec::default(),
            cosine_preweight: true,
            weighting: FanWeighting::SourceDistance,
        }
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited ramp sample at lag `n` for detector spacing `tau`,
/// multiplied by `tau` so that convolution is a plain discrete sum.
///
/// At full cutoff this is `1/(4τ)` at 0, `0` at even lags and `-1/(n²π²τ)`
/// at odd lags.
pub fn ramp_tap(n: i64, tau: f64, cutoff: f64) -> f64 {
    if cutoff == 1.0 {
        return if n == 0 {
            1.0 / (4.0 * tau)
        } else if n % 2 == 0 {
            0.0
        } else {
            -1.0 / ((n * n) as f64 * PI * PI * tau)
        };
    }
    let w = cutoff / (2.0 * tau);
    let x = n as f64 * tau;
    tau * w * w * (2.0 * sinc(2.0 * w * x) - sinc(w * x).powi(2))
}

/// Discrete ramp kernel for lags `-(len-1)..=len-1` (centered at index `len-1`).
pub fn ramp_kernel(len: usize, tau: f64, cutoff: f64) -> Vec<f64> {
    let l = len as i64;
    (-(l - 1)..l).map(|n| ramp_tap(n, tau, cutoff)).collect()
}

/// Row filter: circular convolution on a padded length with edge-replicated
/// padding. The kernel is completed with one far tap so that it sums to
/// exactly zero, so constant rows filter to zero.
struct RowFilter {
    n: usize,
    padded: usize,
    response: Vec<Complex<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl RowFilter {
    fn new(n: usize, tau: f64, spec: &FilterSpec) -> Self {
        let padded = (2 * n).next_power_of_two().max(2);
        let half = padded / 2;
        let mut kernel = vec![Complex::new(0.0, 0.0); padded];
        let mut sum = 0.0;
        for lag in -(half as i64 - 1)..(half as i64) {
            let v = ramp_tap(lag, tau, spec.cutoff);
            kernel[lag.rem_euclid(padded as i64) as usize].re = v;
            sum += v;
        }
        kernel[half].re = -sum;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(padded);
        let inverse = planner.plan_fft_inverse(padded);
        forward.process(&mut kernel);
        if spec.kind == FilterKind::HannRamLak {
            for (k, h) in kernel.iter_mut().enumerate() {
                let freq = k.min(padded - k) as f64 / half as f64; // fraction of Nyquist
                let window = if freq <= spec.cutoff {
                    0.5 * (1.0 + (PI * freq / spec.cutoff).cos())
                } else {
                    0.0
                };
                *h *= window;
            }
        }
        kernel[0] = Complex::new(0.0, 0.0);
        Self {
            n,
            padded,
            response: kernel,
            forward,
            inverse,
        }
    }

    fn apply(&self, row: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded];
        for (i, b) in buf.iter_mut().enumerate() {
            // positions n.. are padding: the first half replicates the last
            // sample, the second half (wrapping to negative lags) the first
            let v = if i < n {
                row[i]
            } else if i < n + (self.padded - n) / 2 {
                row[n - 1]
            } else {
                row[0]
            };
            *b = Complex::new(v, 0.0);
        }
        self.forward.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.padded as f64;
        for (o, b) in out.iter_mut().zip(&buf[..n]) {
            *o = b.re * scale;
        }
    }
}

/// Convolves every view row with the ramp kernel of `f` on the detector grid.
pub fn filter_projections(s: &Sinogram, f: &FilterSpec) -> Result<Sinogram> {
    f.validate()?;
    let tau = s.geometry.virtual_spacing();
    Ok(Sinogram {
        geometry: s.geometry,
        values: filter_rows(&s.values, tau, f),
    })
}

fn filter_rows(values: &Array2<f64>, tau: f64, f: &FilterSpec) -> Array2<f64> {
    let n = values.ncols();
    let filter = RowFilter::new(n, tau, f);
    let mut out = Array2::zeros(values.dim());
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(values.axis_iter(Axis(0)))
        .for_each(|(mut o, row)| {
            let row = row.to_vec();
            let mut buf = vec![0.0; n];
            filter.apply(&row, &mut buf);
            o.iter_mut().zip(buf).for_each(|(o, v)| *o = v);
        });
    out
}

/// Multiplies each detector column by `D / sqrt(D² + r²)`.
pub fn cosine_preweight(s: &Sinogram) -> Sinogram {
    let g = &s.geometry;
    let mut values = s.values.clone();
    if g.beam == Beam::Fan {
        let d = g.source_to_center;
        for (det, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
            let r = g.virtual_offset(det);
            let w = d / (d * d + r * r).sqrt();
            col.mapv_inplace(|v| v * w);
        }
    }
    Sinogram {
        geometry: s.geometry,
        values,
    }
}

/// Weighted backprojection of filtered projections.
pub fn fan_backproject(
    q: &Sinogram,
    g: &FanBeamGeometry,
    shape: &ImageShape,
    weighting: FanWeighting,
) -> Result<ImageGrid> {
    g.validate()?;
    check_shape((g.n_views, g.n_detectors), q.values.dim())?;
    let trig: Vec<(f64, f64)> = g.angles().iter().map(|a| a.sin_cos()).collect();
    let tau = g.virtual_spacing();
    let center = (g.n_detectors as f64 - 1.0) / 2.0;
    let last = g.n_detectors - 1;
    let d = g.source_to_center;
    let scale = g.angle_step() * PI / g.angular_span();
    let mut values = Array2::zeros(shape.dim());
    values
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(iy, mut row)| {
            let y = shape.y(iy);
            for (ix, out) in row.iter_mut().enumerate() {
                let x = shape.x(ix);
                let mut acc = 0.0;
                for (view, &(s, c)) in trig.iter().enumerate() {
                    let along = x * c + y * s;
                    let (r, w) = match g.beam {
                        Beam::Parallel => (along, 1.0),
                        Beam::Fan => {
                            let depth = d - (x * s - y * c);
                            let r = d * along / depth;
                            let w = match weighting {
                                FanWeighting::SourceDistance => d * d / (depth * depth),
                                FanWeighting::DetectorRadius => d * d / (d * d + r * r),
                            };
                            (r, w)
                        }
                    };
                    let pos = r / tau + center;
                    if pos < 0.0 || pos > last as f64 {
                        continue;
                    }
                    let i0 = (pos.floor() as usize).min(last);
                    let frac = pos - i0 as f64;
                    let v0 = q.values[[view, i0]];
                    let v1 = if i0 < last { q.values[[view, i0 + 1]] } else { v0 };
                    acc += w * (v0 + frac * (v1 - v0));
                }
                *out = acc * scale;
            }
        });
    Ok(ImageGrid { shape: *shape, values })
}

pub fn fbp_reconstruct(s: &Sinogram, g: &FanBeamGeometry, f: &FilterSpec, shape: &ImageShape) -> Result<ImageGrid> {
    fbp_reconstruct_with(
        s,
        g,
        shape,
        &FbpOptions {
            filter: *f,
            ..FbpOptions::default()
        },
    )
}

pub fn fbp_reconstruct_with(s: &Sinogram, g: &FanBeamGeometry, shape: &ImageShape, opts: &FbpOptions) -> Result<ImageGrid> {
    if s.geometry.n_views != g.n_views || s.geometry.n_detectors != g.n_detectors {
        return Err(Error::ShapeMismatch {
            expected: (g.n_views, g.n_detectors),
            got: s.dim(),
        });
    }
    let s = Sinogram {
        geometry: *g,
        values: s.values.clone(),
    };
    let weighted = if opts.cosine_preweight { cosine_preweight(&s) } else { s };
    let filtered = filter_projections(&weighted, &opts.filter)?;
    fan_backproject(&filtered, g, shape, opts.weighting)
}
