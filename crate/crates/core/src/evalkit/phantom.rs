use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, ImageGrid, ImageShape};
use crate::rng::StrideRng;

/// Ellipse in normalized coordinates (the image spans `[-1, 1]²`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    /// Counter-clockwise rotation in radians.
    pub rotation: f64,
    pub density: f64,
}

impl Ellipse {
    pub fn new(center: (f64, f64), semi_axes: (f64, f64), rotation: f64, density: f64) -> Result<Self> {
        if !(semi_axes.0 > 0.0 && semi_axes.1 > 0.0) {
            return Err(Error::invalid("ellipse semi-axes must be positive"));
        }
        Ok(Self {
            center,
            semi_axes,
            rotation,
            density,
        })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_axes.0).powi(2) + (v / self.semi_axes.1).powi(2) <= 1.0
    }

    /// Reflection about the vertical axis.
    pub fn mirrored(&self) -> Self {
        Self {
            center: (-self.center.0, self.center.1),
            rotation: -self.rotation,
            ..*self
        }
    }
}

/// Modified (high-contrast) Shepp–Logan table.
pub fn shepp_logan_ellipses() -> Vec<Ellipse> {
    const TABLE: [[f64; 6]; 10] = [
        // density, a, b, x0, y0, phi (deg)
        [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
        [-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0],
        [-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0],
        [-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0],
        [0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0],
        [0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0],
        [0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0],
        [0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0],
        [0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0],
        [0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0],
    ];
    TABLE
        .iter()
        .map(|&[density, a, b, x0, y0, phi]| Ellipse {
            center: (x0, y0),
            semi_axes: (a, b),
            rotation: phi.to_radians(),
            density,
        })
        .collect()
}

/// Sums ellipse densities at each pixel center.
pub fn rasterize(ellipses: &[Ellipse], shape: ImageShape) -> ImageGrid {
    let (hx, hy) = (shape.nx as f64 / 2.0, shape.ny as f64 / 2.0);
    let values = Array2::from_shape_fn(shape.dim(), |(iy, ix)| {
        let x = (ix as f64 - (shape.nx as f64 - 1.0) / 2.0) / hx;
        let y = ((shape.ny as f64 - 1.0) / 2.0 - iy as f64) / hy;
        ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.density)
            .sum::<f64>()
    });
    ImageGrid { shape, values }
}

/// Shepp–Logan on an explicit grid; negative round-off is clipped to 0.
pub fn shepp_logan_on(shape: ImageShape) -> Result<ImageGrid> {
    if shape.nx < 16 || shape.ny < 16 {
        return Err(Error::invalid(format!(
            "phantom needs at least 16×16 pixels, got {}×{}",
            shape.nx, shape.ny
        )));
    }
    let mut img = rasterize(&shepp_logan_ellipses(), shape);
    img.values.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(img)
}

/// Shepp–Logan spanning the default scanner's field of view.
pub fn shepp_logan(nx: usize, ny: usize) -> Result<ImageGrid> {
    let fov = 2.0 * FanBeamGeometry::default().fov_radius();
    let shape = ImageShape::new(nx, ny, fov / nx.max(ny).max(1) as f64)?;
    shepp_logan_on(shape)
}

/// Shepp–Logan-like anatomy with jittered inner structures and contrast.
///
/// Used to build training corpora: the skull outline stays close to the
/// reference while every interior feature moves, resizes and changes density.
pub fn perturbed_shepp_logan(shape: ImageShape, rng: &mut StrideRng) -> ImageGrid {
    let mut table = shepp_logan_ellipses();
    let outer_scale = 1.0 + rng.random_range(-0.04..0.04);
    for (k, e) in table.iter_mut().enumerate() {
        if k < 2 {
            e.semi_axes.0 *= outer_scale;
            e.semi_axes.1 *= outer_scale;
            continue;
        }
        e.center.0 += rng.random_range(-0.05..0.05);
        e.center.1 += rng.random_range(-0.05..0.05);
        e.semi_axes.0 *= rng.random_range(0.8..1.2);
        e.semi_axes.1 *= rng.random_range(0.8..1.2);
        e.rotation += rng.random_range(-0.2..0.2);
        e.density *= rng.random_range(0.6..1.4);
    }
    // a random extra lesion
    table.push(Ellipse {
        center: (rng.random_range(-0.4..0.4), rng.random_range(-0.5..0.5)),
        semi_axes: (rng.random_range(0.03..0.12), rng.random_range(0.03..0.12)),
        rotation: rng.random_range(0.0..std::f64::consts::PI),
        density: rng.random_range(-0.1..0.15),
    });
    let mut img = rasterize(&table, shape);
    img.values.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}
