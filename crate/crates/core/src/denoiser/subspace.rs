//! Low-rank-plus-isotropic Gaussian prior fitted from a sample corpus.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use super::GaussianPrior;
use crate::error::{check_shape, Error, Result};

/// `C = U diag(var) Uᵀ + residual I` with orthonormal columns in `basis`
/// (each stored as one flattened row).
#[derive(Clone)]
pub struct SubspacePrior {
    pub mean: Array2<f64>,
    pub basis: Array2<f64>,
    pub var: Array1<f64>,
    pub residual: f64,
    // single-precision copy for the products in `apply_fn`, which are
    // bandwidth bound
    basis32: Array2<f32>,
}

impl std::fmt::Debug for SubspacePrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubspacePrior")
            .field("dim", &self.mean.dim())
            .field("rank", &self.rank())
            .field("residual", &self.residual)
            .finish_non_exhaustive()
    }
}

impl PartialEq for SubspacePrior {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.basis == other.basis && self.var == other.var && self.residual == other.residual
    }
}

impl SubspacePrior {
    pub fn new(mean: Array2<f64>, basis: Array2<f64>, var: Array1<f64>, residual: f64) -> Result<Self> {
        if basis.ncols() != mean.len() || basis.nrows() != var.len() {
            return Err(Error::invalid(format!(
                "basis {:?} and {} variances do not fit a {:?} mean",
                basis.dim(),
                var.len(),
                mean.dim()
            )));
        }
        if !(residual > 0.0 && residual.is_finite()) || var.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("prior variances must be finite, residual positive"));
        }
        Ok(Self {
            mean: mean.as_standard_layout().into_owned(),
            basis32: basis.mapv(|v| v as f32),
            basis,
            var,
            residual,
        })
    }

    /// Principal components of the samples through their Gram matrix. At most
    /// `rank` directions are kept and the residual variance is `floor` times
    /// the leading component's.
    pub fn fit(samples: &[Array2<f64>], rank: usize, floor: f64) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("cannot fit a prior to no samples"))?;
        if samples.len() < 2 {
            return Err(Error::invalid("a subspace prior needs at least two samples"));
        }
        let dim = first.dim();
        let n = samples.len();
        let mut mean = Array2::zeros(dim);
        for s in samples {
            check_shape(dim, s.dim())?;
            mean += s;
        }
        mean /= n as f64;
        let w = 1.0 / (n as f64 - 1.0).sqrt();
        let mut factors = Array2::zeros((n, mean.len()));
        for (mut row, s) in factors.axis_iter_mut(Axis(0)).zip(samples) {
            for (r, (v, m)) in row.iter_mut().zip(s.iter().zip(mean.iter())) {
                *r = (v - m) * w;
            }
        }
        Self::from_factors(mean, &factors, rank, floor)
    }

    /// Prior with covariance `Fᵀ F` (rows of `factors` flattened like
    /// `mean`), truncated as in [`SubspacePrior::fit`].
    pub fn from_factors(mean: Array2<f64>, factors: &Array2<f64>, rank: usize, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::invalid(format!("residual floor must be positive, got {floor}")));
        }
        if factors.ncols() != mean.len() {
            return Err(Error::invalid("factor length differs from the mean"));
        }
        let n = factors.nrows();
        let gram = factors.dot(&factors.t());
        let eig = SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| gram[[i, j]]));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = order.first().map_or(0.0, |&k| eig.eigenvalues[k]);
        if !(top > 0.0) {
            return Err(Error::invalid("samples do not vary"));
        }
        let residual = floor * top;
        let keep: Vec<usize> = order
            .into_iter()
            .filter(|&k| eig.eigenvalues[k] > residual)
            .take(rank)
            .collect();
        // u_k = Fᵀ v_k / √λ_k
        let coeffs = Array2::from_shape_fn((keep.len(), n), |(r, i)| {
            let k = keep[r];
            eig.eigenvectors[(i, k)] / eig.eigenvalues[k].sqrt()
        });
        let basis = coeffs.dot(factors);
        let var = keep.iter().map(|&k| eig.eigenvalues[k] - residual).collect();
        Self::new(mean, basis, var, residual)
    }

    /// The prior of `map(y)` for a linear `map`, refitted with its own floor.
    pub fn mapped<F>(&self, map: F, floor: f64) -> Result<Self>
    where
        F: Fn(&Array2<f64>) -> Result<Array2<f64>> + Sync,
    {
        let dim = self.mean.dim();
        let mapped: Vec<Array2<f64>> = self
            .basis
            .axis_iter(Axis(0))
            .into_par_iter()
            .zip(self.var.as_slice().expect("contiguous"))
            .map(|(u, v)| {
                let u = u.to_owned().into_shape_with_order(dim).expect("same size");
                Ok(map(&u)? * v.sqrt())
            })
            .collect::<Result<_>>()?;
        let mean = map(&self.mean)?;
        let len = mean.len();
        let mut factors = Array2::zeros((mapped.len(), len));
        for (mut row, m) in factors.axis_iter_mut(Axis(0)).zip(&mapped) {
            if m.len() != len {
                return Err(Error::invalid("linear map changed its output size"));
            }
            row.assign(&ndarray::ArrayView1::from(m.as_standard_layout().as_slice().expect("standard layout")));
        }
        Self::from_factors(mean, &factors, usize::MAX, floor)
    }

    pub fn rank(&self) -> usize {
        self.var.len()
    }
}

impl GaussianPrior for SubspacePrior {
    fn mean(&self) -> &Array2<f64> {
        &self.mean
    }

    fn apply_fn(&self, x: &Array2<f64>, f: &dyn Fn(f64) -> f64) -> Array2<f64> {
        // column vectors so that both products take the matrix-matrix path
        let len = x.len();
        let col = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((len, 1))
            .expect("same size");
        let mut coeffs = self.basis32.dot(&col.mapv(|v| v as f32));
        let base = f(self.residual);
        for (c, v) in coeffs.iter_mut().zip(&self.var) {
            *c = (*c as f64 * (f(v + self.residual) - base)) as f32;
        }
        let mut out = col * base;
        let low = self.basis32.t().dot(&coeffs);
        out.zip_mut_with(&low, |o, l| *o += *l as f64);
        out.into_shape_with_order(x.dim()).expect("same size")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_array, rng_from};

    #[test]
    fn recovers_planted_subspace() {
        let mut rng = rng_from(11);
        let dirs = gaussian_array(&mut rng, (2, 30));
        let samples: Vec<Array2<f64>> = (0..300)
            .map(|_| {
                let c = gaussian_array(&mut rng, (1, 2));
                let x = c.dot(&dirs);
                x.into_shape_with_order((5, 6)).unwrap()
            })
            .collect();
        let p = SubspacePrior::fit(&samples, 10, 1e-9).unwrap();
        assert_eq!(p.rank(), 2);
        // orthonormal rows
        let g = p.basis.dot(&p.basis.t());
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - e).abs() < 1e-9);
            }
        }
        // the planted directions lie in the span
        for d in dirs.axis_iter(Axis(0)) {
            let proj = p.basis.t().dot(&p.basis.dot(&d));
            let err = (&proj - &d).mapv(|v| v * v).sum().sqrt() / d.mapv(|v| v * v).sum().sqrt();
            assert!(err < 1e-9, "{err}");
        }
    }

    #[test]
    fn identity_map_preserves_prior() {
        let mut rng = rng_from(13);
        let samples: Vec<Array2<f64>> = (0..8).map(|_| gaussian_array(&mut rng, (3, 4))).collect();
        let p = SubspacePrior::fit(&samples, 10, 1e-6).unwrap();
        let q = p.mapped(|x| Ok(x.clone()), 1e-6).unwrap();
        let x = gaussian_array(&mut rng, (3, 4));
        let a = p.apply_fn(&x, &|l| l);
        let b = q.apply_fn(&x, &|l| l);
        // identical low-rank parts; residuals differ by at most the floors
        let tol = 4.0 * p.residual * x.mapv(f64::abs).sum();
        assert!(a.iter().zip(b.iter()).all(|(u, v)| (u - v).abs() <= tol));
        let doubled = p.mapped(|x| Ok(x * 2.0), 1e-6).unwrap();
        assert!(doubled
            .var
            .iter()
            .zip(p.var.iter())
            .all(|(d, v)| (d + doubled.residual - 4.0 * v).abs() < 1e-9 * (1.0 + v)));
    }

    #[test]
    fn apply_fn_matches_dense_covariance() {
        let mut rng = rng_from(12);
        let samples: Vec<Array2<f64>> = (0..6).map(|_| gaussian_array(&mut rng, (3, 4))).collect();
        let p = SubspacePrior::fit(&samples, 3, 1e-3).unwrap();
        let d = 12;
        let mut c = Array2::<f64>::eye(d) * p.residual;
        for (u, v) in p.basis.axis_iter(Axis(0)).zip(&p.var) {
            for i in 0..d {
                for j in 0..d {
                    c[[i, j]] += v * u[i] * u[j];
                }
            }
        }
        let x = gaussian_array(&mut rng, (3, 4));
        let got = p.apply_fn(&x, &|l| l);
        let want = c.dot(&x.clone().into_shape_with_order(d).unwrap());
        // single-precision products: relative accuracy ~1e-7 times the condition number
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-5 * scale);
        }
        let inv = p.apply_fn(&got, &|l| 1.0 / l);
        for (a, b) in inv.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
