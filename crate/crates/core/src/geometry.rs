//! Scan geometry, image/sinogram containers and the view-sampling operator.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array2, Zip};

use crate::error::{check_shape, Error, Result};

/// Ray model of the scanner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Beam {
    /// Point source and flat detector.
    #[default]
    Fan,
    /// Parallel rays; the source/detector distances are ignored.
    Parallel,
}

/// Circular-orbit scanner with a flat, equispaced detector.
///
/// View `i` places the source at `sod * (sin θ, -cos θ)` with the central ray
/// pointing along `(-sin θ, cos θ)`; the detector axis is `(cos θ, sin θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FanBeamGeometry {
    pub source_to_center: f64,
    pub center_to_detector: f64,
    pub n_views: usize,
    pub n_detectors: usize,
    pub detector_width: f64,
    pub angle_start: f64,
    pub angle_end: f64,
    pub beam: Beam,
}

pub const DEFAULT_SOD_MM: f64 = 400.0;
pub const DEFAULT_CDD_MM: f64 = 400.0;
pub const DEFAULT_DETECTOR_WIDTH_MM: f64 = 413.0;
pub const DEFAULT_VIEWS: usize = 720;
pub const DEFAULT_DETECTORS: usize = 720;

impl Default for FanBeamGeometry {
    fn default() -> Self {
        Self::scaled(DEFAULT_VIEWS, DEFAULT_DETECTORS)
    }
}

impl FanBeamGeometry {
    /// Full-orbit fan geometry with the clinical distances and detector
    /// width, sampled with the requested number of views and detector cells.
    pub fn scaled(n_views: usize, n_detectors: usize) -> Self {
        Self {
            source_to_center: DEFAULT_SOD_MM,
            center_to_detector: DEFAULT_CDD_MM,
            n_views,
            n_detectors,
            detector_width: DEFAULT_DETECTOR_WIDTH_MM,
            angle_start: 0.0,
            angle_end: 2.0 * PI,
            beam: Beam::Fan,
        }
    }

    /// Parallel-beam variant covering `[0, π)`.
    pub fn parallel(n_views: usize, n_detectors: usize, detector_width: f64) -> Self {
        Self {
            source_to_center: DEFAULT_SOD_MM,
            center_to_detector: DEFAULT_CDD_MM,
            n_views,
            n_detectors,
            detector_width,
            angle_start: 0.0,
            angle_end: PI,
            beam: Beam::Parallel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lengths = [
            ("sod_mm", self.source_to_center),
            ("cdd_mm", self.center_to_detector),
            ("det_width_mm", self.detector_width),
        ];
        for (name, v) in lengths {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_views == 0 || self.n_detectors == 0 {
            return Err(Error::invalid("n_views and n_detectors must be >= 1"));
        }
        if !(self.angle_start.is_finite() && self.angle_end.is_finite())
            || self.angle_end <= self.angle_start
        {
            return Err(Error::invalid("angular range must be finite and increasing"));
        }
        Ok(())
    }

    pub fn angle_step(&self) -> f64 {
        (self.angle_end - self.angle_start) / self.n_views as f64
    }

    pub fn angle(&self, view: usize) -> f64 {
        self.angle_start + view as f64 * self.angle_step()
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.n_views).map(|v| self.angle(v)).collect()
    }

    pub fn angular_span(&self) -> f64 {
        self.angle_end - self.angle_start
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_width / self.n_detectors as f64
    }

    /// Offset of detector cell `d` from the detector center, on the physical detector.
    pub fn detector_offset(&self, d: usize) -> f64 {
        (d as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing()
    }

    /// Source-to-detector distance.
    pub fn source_to_detector(&self) -> f64 {
        self.source_to_center + self.center_to_detector
    }

    /// Ratio mapping physical detector coordinates onto the virtual detector
    /// through the rotation center.
    pub fn magnification(&self) -> f64 {
        match self.beam {
            Beam::Fan => self.source_to_detector() / self.source_to_center,
            Beam::Parallel => 1.0,
        }
    }

    /// Detector spacing on the virtual detector through the rotation center.
    pub fn virtual_spacing(&self) -> f64 {
        self.detector_spacing() / self.magnification()
    }

    pub fn virtual_offset(&self, d: usize) -> f64 {
        self.detector_offset(d) / self.magnification()
    }

    /// Radius of the circle fully covered by every view.
    pub fn fov_radius(&self) -> f64 {
        let half = self.detector_width / 2.0;
        match self.beam {
            Beam::Fan => {
                let gamma = (half / self.source_to_detector()).atan();
                self.source_to_center * gamma.sin()
            }
            Beam::Parallel => half,
        }
    }

    /// Virtual-detector coordinate hit by the ray through `(x, y)` at angle `theta`.
    pub fn detector_coordinate(&self, x: f64, y: f64, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        let along = x * c + y * s;
        match self.beam {
            Beam::Fan => {
                let d = self.source_to_center;
                d * along / (d - (x * s - y * c))
            }
            Beam::Parallel => along,
        }
    }

    /// Flat `key=value` text form, one key per line.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        // `{:?}` on f64 prints the shortest representation that round-trips.
        let _ = writeln!(out, "sod_mm={:?}", self.source_to_center);
        let _ = writeln!(out, "cdd_mm={:?}", self.center_to_detector);
        let _ = writeln!(out, "n_views={}", self.n_views);
        let _ = writeln!(out, "n_detectors={}", self.n_detectors);
        let _ = writeln!(out, "det_width_mm={:?}", self.detector_width);
        let _ = writeln!(out, "angle_start_rad={:?}", self.angle_start);
        let _ = writeln!(out, "angle_end_rad={:?}", self.angle_end);
        if self.beam == Beam::Parallel {
            let _ = writeln!(out, "beam=parallel");
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut sod = None;
        let mut cdd = None;
        let mut views = None;
        let mut dets = None;
        let mut width = None;
        let mut start = None;
        let mut end = None;
        let mut beam = Beam::Fan;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("geometry line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let real = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("geometry key {key}: bad number '{value}'")))
            };
            let count = || -> Result<usize> {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("geometry key {key}: bad count '{value}'")))
            };
            match key {
                "sod_mm" => sod = Some(real()?),
                "cdd_mm" => cdd = Some(real()?),
                "n_views" => views = Some(count()?),
                "n_detectors" => dets = Some(count()?),
                "det_width_mm" => width = Some(real()?),
                "angle_start_rad" => start = Some(real()?),
                "angle_end_rad" => end = Some(real()?),
                "beam" => {
                    beam = match value {
                        "fan" => Beam::Fan,
                        "parallel" => Beam::Parallel,
                        other => return Err(Error::invalid(format!("unknown beam '{other}'"))),
                    }
                }
                other => return Err(Error::invalid(format!("unknown geometry key '{other}'"))),
            }
        }
        let missing = |k: &str| Error::invalid(format!("geometry key {k} missing"));
        let g = Self {
            source_to_center: sod.ok_or_else(|| missing("sod_mm"))?,
            center_to_detector: cdd.ok_or_else(|| missing("cdd_mm"))?,
            n_views: views.ok_or_else(|| missing("n_views"))?,
            n_detectors: dets.ok_or_else(|| missing("n_detectors"))?,
            detector_width: width.ok_or_else(|| missing("det_width_mm"))?,
            angle_start: start.ok_or_else(|| missing("angle_start_rad"))?,
            angle_end: end.ok_or_else(|| missing("angle_end_rad"))?,
            beam,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Pixel layout of a reconstruction grid, centered on the rotation axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageShape {
    pub nx: usize,
    pub ny: usize,
    pub pixel_size: f64,
}

impl ImageShape {
    pub fn new(nx: usize, ny: usize, pixel_size: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("image dimensions must be >= 1"));
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::invalid(format!("pixel size must be positive, got {pixel_size}")));
        }
        Ok(Self { nx, ny, pixel_size })
    }

    /// Square `n × n` grid whose side spans the scanner's field of view.
    pub fn covering(geometry: &FanBeamGeometry, n: usize) -> Self {
        Self {
            nx: n,
            ny: n,
            pixel_size: 2.0 * geometry.fov_radius() / n as f64,
        }
    }

    /// World x coordinate of column `ix`'s center.
    pub fn x(&self, ix: usize) -> f64 {
        (ix as f64 - (self.nx as f64 - 1.0) / 2.0) * self.pixel_size
    }

    /// World y coordinate of row `iy`'s center; row 0 is the top (largest y).
    pub fn y(&self, iy: usize) -> f64 {
        ((self.ny as f64 - 1.0) / 2.0 - iy as f64) * self.pixel_size
    }

    /// Continuous (row, column) index of a world point.
    pub fn to_index(&self, x: f64, y: f64) -> (f64, f64) {
        let col = x / self.pixel_size + (self.nx as f64 - 1.0) / 2.0;
        let row = (self.ny as f64 - 1.0) / 2.0 - y / self.pixel_size;
        (row, col)
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    /// Half extents of the pixel-edge bounding box.
    pub fn half_extent(&self) -> (f64, f64) {
        (
            self.nx as f64 * self.pixel_size / 2.0,
            self.ny as f64 * self.pixel_size / 2.0,
        )
    }
}

/// Attenuation image, stored as `(ny, nx)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub shape: ImageShape,
    pub values: Array2<f64>,
}

impl ImageGrid {
    pub fn new(shape: ImageShape, values: Array2<f64>) -> Result<Self> {
        check_shape(shape.dim(), values.dim())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            values: Array2::zeros(shape.dim()),
        }
    }
}

/// Projection data, stored as `(n_views, n_detectors)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub geometry: FanBeamGeometry,
    pub values: Array2<f64>,
}

impl Sinogram {
    pub fn new(geometry: FanBeamGeometry, values: Array2<f64>) -> Result<Self> {
        geometry.validate()?;
        check_shape((geometry.n_views, geometry.n_detectors), values.dim())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sinogram contains non-finite values"));
        }
        Ok(Self { geometry, values })
    }

    pub fn zeros(geometry: FanBeamGeometry) -> Self {
        Self {
            geometry,
            values: Array2::zeros((geometry.n_views, geometry.n_detectors)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Same geometry, new values (shape-checked).
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        check_shape(self.dim(), values.dim())?;
        Ok(Self {
            geometry: self.geometry,
            values,
        })
    }
}

/// Per-view keep/drop pattern, broadcast across detector columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseMask {
    /// Sampling interval for regular masks; `None` for arbitrary row sets.
    pub interval: Option<usize>,
    pub active: Vec<bool>,
}

impl SparseMask {
    pub fn n_views(&self) -> usize {
        self.active.len()
    }

    pub fn count_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_active(&self, view: usize) -> bool {
        self.active[view]
    }

    pub fn full(n_views: usize) -> Self {
        Self {
            interval: Some(1),
            active: vec![true; n_views],
        }
    }

    pub fn from_active(active: Vec<bool>) -> Self {
        Self {
            interval: None,
            active,
        }
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.n_views()).filter(|&i| self.active[i]).collect()
    }
}

/// Keeps views `0, r, 2r, ...`.
pub fn make_sparse_mask(n_views: usize, r: usize) -> Result<SparseMask> {
    if n_views == 0 {
        return Err(Error::invalid("n_views must be >= 1"));
    }
    if r == 0 || r > n_views {
        return Err(Error::invalid(format!(
            "sampling interval must satisfy 1 <= r <= n_views ({n_views}), got {r}"
        )));
    }
    Ok(SparseMask {
        interval: Some(r),
        active: (0..n_views).map(|i| i % r == 0).collect(),
    })
}

/// Zeroes every inactive view row of a raw array.
pub fn mask_rows(values: &Array2<f64>, m: &SparseMask) -> Result<Array2<f64>> {
    if m.n_views() != values.nrows() {
        return Err(Error::invalid(format!(
            "mask covers {} views but data has {}",
            m.n_views(),
            values.nrows()
        )));
    }
    let mut out = values.clone();
    for (row, &keep) in out.rows_mut().into_iter().zip(&m.active) {
        if !keep {
            row.into_iter().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Row-sparse sampling `M ∘ s`.
pub fn apply_mask(s: &Sinogram, m: &SparseMask) -> Result<Sinogram> {
    if m.n_views() != s.geometry.n_views {
        return Err(Error::invalid(format!(
            "mask covers {} views but sinogram has {}",
            m.n_views(),
            s.geometry.n_views
        )));
    }
    Ok(Sinogram {
        geometry: s.geometry,
        values: mask_rows(&s.values, m)?,
    })
}

/// `a·x + b·y` elementwise; used by linearity checks and tests.
pub fn axpby(a: f64, x: &Array2<f64>, b: f64, y: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    Zip::from(&mut out)
        .and(x)
        .and(y)
        .for_each(|o, &x, &y| *o = a * x + b * y);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn mask_720_every_12th() {
        let m = make_sparse_mask(720, 12).unwrap();
        assert_eq!(m.count_active(), 60);
        let idx = m.active_indices();
        assert_eq!(idx.first(), Some(&0));
        assert_eq!(idx.last(), Some(&708));
        assert!(idx.iter().all(|i| i % 12 == 0));
    }

    #[test]
    fn mask_identity_and_enumeration() {
        assert_eq!(make_sparse_mask(720, 1).unwrap().count_active(), 720);
        let m = make_sparse_mask(8, 2).unwrap();
        assert_eq!(m.active_indices(), vec![0, 2, 4, 6]);
        assert_eq!(
            (0..8).filter(|&i| !m.is_active(i)).collect::<Vec<_>>(),
            vec![1, 3, 5, 7]
        );
    }

    #[test]
    fn mask_rejects_bad_interval() {
        assert!(make_sparse_mask(10, 0).is_err());
        assert!(make_sparse_mask(10, 11).is_err());
        assert!(make_sparse_mask(0, 1).is_err());
    }

    #[test]
    fn apply_mask_hadamard() {
        let g = FanBeamGeometry::scaled(2, 2);
        let s = Sinogram::new(g, array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let m = SparseMask::from_active(vec![true, false]);
        let out = apply_mask(&s, &m).unwrap();
        assert_eq!(out.values, array![[1.0, 2.0], [0.0, 0.0]]);
        assert_eq!(out.geometry, g);
        assert_eq!(apply_mask(&s, &SparseMask::full(2)).unwrap(), s);
        assert!(apply_mask(&s, &SparseMask::full(3)).is_err());
    }

    #[test]
    fn view_angles_evenly_spaced() {
        let g = FanBeamGeometry::default();
        let a = g.angles();
        let step = a[1] - a[0];
        for w in a.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-12);
        }
    }

    #[test]
    fn detector_coordinate_special_cases() {
        let g = FanBeamGeometry::default();
        for k in 0..16 {
            let theta = k as f64 * 0.4;
            assert_eq!(g.detector_coordinate(0.0, 0.0, theta), 0.0);
        }
        for x in [-50.0, -3.0, 0.5, 42.0] {
            assert!((g.detector_coordinate(x, 0.0, 0.0) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn geometry_validation() {
        let mut g = FanBeamGeometry::default();
        assert!(g.validate().is_ok());
        g.source_to_center = 0.0;
        assert!(g.validate().is_err());
        let mut g = FanBeamGeometry::default();
        g.n_views = 0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn geometry_kv_round_trip() {
        for g in [
            FanBeamGeometry::default(),
            FanBeamGeometry::scaled(180, 128),
            FanBeamGeometry::parallel(90, 64, 123.4),
        ] {
            let text = g.to_kv();
            assert_eq!(FanBeamGeometry::from_kv(&text).unwrap(), g);
        }
        assert!(FanBeamGeometry::from_kv("sod_mm=1\nbogus=2\n").is_err());
        assert!(FanBeamGeometry::from_kv("sod_mm=1\n").is_err());
    }

    #[test]
    fn default_fov_is_about_ten_centimetres() {
        let r = FanBeamGeometry::default().fov_radius();
        assert!((r - 100.0).abs() < 0.5, "{r}");
    }

    proptest! {
        #[test]
        fn active_count_is_ceil(n in 1usize..=1024, r_frac in 0.0f64..1.0) {
            let r = 1 + ((n - 1) as f64 * r_frac) as usize;
            let m = make_sparse_mask(n, r).unwrap();
            prop_assert_eq!(m.count_active(), n.div_ceil(r));
        }

        #[test]
        fn masking_is_linear_and_idempotent(
            data in proptest::collection::vec(-10.0f64..10.0, 2 * 6 * 5),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            r in 1usize..=6,
        ) {
            let g = FanBeamGeometry::scaled(6, 5);
            let s1 = Sinogram::new(g, Array2::from_shape_vec((6, 5), data[..30].to_vec()).unwrap()).unwrap();
            let s2 = Sinogram::new(g, Array2::from_shape_vec((6, 5), data[30..].to_vec()).unwrap()).unwrap();
            let m = make_sparse_mask(6, r).unwrap();
            let combo = s1.with_values(axpby(a, &s1.values, b, &s2.values)).unwrap();
            let lhs = apply_mask(&combo, &m).unwrap().values;
            let rhs = axpby(a, &apply_mask(&s1, &m).unwrap().values, b, &apply_mask(&s2, &m).unwrap().values);
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            let once = apply_mask(&s1, &m).unwrap();
            let twice = apply_mask(&once, &m).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
