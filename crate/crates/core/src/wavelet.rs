//! Single-level undecimated 2-D wavelet transform with periodic boundaries.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WaveletFilter {
    #[default]
    Haar,
    Db2,
}

impl WaveletFilter {
    pub const NAMES: [&'static str; 2] = ["haar", "db2"];

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "haar" | "db1" => Ok(WaveletFilter::Haar),
            "db2" => Ok(WaveletFilter::Db2),
            other => Err(Error::invalid(format!(
                "unsupported wavelet filter {other:?} (available: {})",
                Self::NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WaveletFilter::Haar => "haar",
            WaveletFilter::Db2 => "db2",
        }
    }

    /// Orthonormal low-pass taps.
    pub fn low_pass(&self) -> Vec<f64> {
        match self {
            WaveletFilter::Haar => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
            WaveletFilter::Db2 => {
                let s3 = 3f64.sqrt();
                let k = 4.0 * 2f64.sqrt();
                vec![(1.0 + s3) / k, (3.0 + s3) / k, (3.0 - s3) / k, (1.0 - s3) / k]
            }
        }
    }

    /// Quadrature mirror high-pass `g[k] = (-1)^k h[L-1-k]`.
    pub fn high_pass(&self) -> Vec<f64> {
        let h = self.low_pass();
        let n = h.len();
        (0..n)
            .map(|k| if k % 2 == 0 { h[n - 1 - k] } else { -h[n - 1 - k] })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.low_pass().len()
    }

    /// Ratio `Σ‖band‖² / ‖x‖²` of the 2-D analysis: `(Σh² + Σg²)²`.
    pub fn energy_gain(&self) -> f64 {
        let per_axis: f64 = self.low_pass().iter().chain(&self.high_pass()).map(|v| v * v).sum();
        per_axis * per_axis
    }
}

/// Four undecimated subbands. `high` holds (LH, HL, HH): low/high along
/// views then detectors, i.e. LH is low-pass along views, high-pass along
/// detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletBands {
    pub low: Array2<f64>,
    pub high: [Array2<f64>; 3],
    pub level: usize,
    pub filter: WaveletFilter,
}

impl WaveletBands {
    pub fn dim(&self) -> (usize, usize) {
        self.low.dim()
    }

    /// Bands in fixed order LL, LH, HL, HH.
    pub fn bands(&self) -> [&Array2<f64>; 4] {
        [&self.low, &self.high[0], &self.high[1], &self.high[2]]
    }

    pub fn bands_mut(&mut self) -> [&mut Array2<f64>; 4] {
        let [lh, hl, hh] = &mut self.high;
        [&mut self.low, lh, hl, hh]
    }

    pub fn zeros(dim: (usize, usize), filter: WaveletFilter) -> Self {
        Self {
            low: Array2::zeros(dim),
            high: [Array2::zeros(dim), Array2::zeros(dim), Array2::zeros(dim)],
            level: 1,
            filter,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.level != 1 {
            return Err(Error::invalid(format!("only level 1 is supported, got {}", self.level)));
        }
        let dim = self.low.dim();
        if self.high.iter().any(|h| h.dim() != dim) {
            return Err(Error::invalid("wavelet bands do not share one shape"));
        }
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::invalid("empty wavelet bands"));
        }
        Ok(())
    }
}

/// `out[n] = Σ_k taps[k] · x[n - k]` along `axis`, periodic.
fn analyze(x: ArrayView2<f64>, axis: Axis, taps: &[f64]) -> Array2<f64> {
    let len = x.len_of(axis);
    let mut out = Array2::zeros(x.dim());
    Zip::from(out.lanes_mut(axis)).and(x.lanes(axis)).for_each(|mut o, lane| {
        for n in 0..len {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * lane[(n + len * taps.len() - k) % len];
            }
            o[n] = acc;
        }
    });
    out
}

/// `out[n] = ½ Σ_k (h[k] a[n + k] + g[k] d[n + k])` along `axis`, periodic.
fn synthesize(a: &Array2<f64>, d: &Array2<f64>, axis: Axis, h: &[f64], g: &[f64]) -> Array2<f64> {
    let len = a.len_of(axis);
    let mut out = Array2::zeros(a.dim());
    Zip::from(out.lanes_mut(axis))
        .and(a.lanes(axis))
        .and(d.lanes(axis))
        .for_each(|mut o, la, ld| {
            for n in 0..len {
                let mut acc = 0.0;
                for k in 0..h.len() {
                    let i = (n + k) % len;
                    acc += h[k] * la[i] + g[k] * ld[i];
                }
                o[n] = 0.5 * acc;
            }
        });
    out
}

pub fn swt_decompose(x: ArrayView2<f64>, filter: WaveletFilter, level: usize) -> Result<WaveletBands> {
    if level != 1 {
        return Err(Error::invalid(format!("only level 1 is supported, got {level}")));
    }
    if x.is_empty() {
        return Err(Error::invalid("empty input to wavelet analysis"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite input to wavelet analysis"));
    }
    let (h, g) = (filter.low_pass(), filter.high_pass());
    let lo = analyze(x, Axis(0), &h);
    let hi = analyze(x, Axis(0), &g);
    Ok(WaveletBands {
        low: analyze(lo.view(), Axis(1), &h),
        high: [
            analyze(lo.view(), Axis(1), &g),
            analyze(hi.view(), Axis(1), &h),
            analyze(hi.view(), Axis(1), &g),
        ],
        level,
        filter,
    })
}

pub fn iswt_reconstruct(b: &WaveletBands) -> Result<Array2<f64>> {
    b.validate()?;
    let (h, g) = (b.filter.low_pass(), b.filter.high_pass());
    let lo = synthesize(&b.low, &b.high[0], Axis(1), &h, &g);
    let hi = synthesize(&b.high[1], &b.high[2], Axis(1), &h, &g);
    Ok(synthesize(&lo, &hi, Axis(0), &h, &g))
}

/// Rows `i` such that every row touched by analysis or synthesis of row `i`
/// is active; these are the rows where band values of a zero-filled input
/// agree with those of the complete input.
pub fn shrink_active_rows(active: &[bool], filter: WaveletFilter) -> Vec<bool> {
    let n = active.len();
    let reach = filter.len() - 1;
    (0..n)
        .map(|i| (0..=reach).all(|k| active[(i + n * (reach + 1) - k) % n]))
        .collect()
}
