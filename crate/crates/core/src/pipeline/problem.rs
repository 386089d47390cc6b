//! Desk-scale reconstruction problems and corpus-fitted priors.

use std::io::{Read, Write};
use std::path::Path;
use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::denoiser::io::{read_tensors, write_tensors};
use crate::denoiser::SubspacePrior;
use crate::error::{Error, Result};
use crate::evalkit::{perturbed_shepp_logan, shepp_logan_on};
use crate::geometry::{apply_mask, make_sparse_mask, FanBeamGeometry, ImageGrid, ImageShape, Sinogram, SparseMask};
use crate::projector::{forward_project, simulate_measurement, NoiseSpec};
use crate::rng::stream;
use crate::wavelet::{swt_decompose, WaveletFilter};

pub const PRIOR_MAGIC: &[u8; 8] = b"STRDGAU1";

/// A phantom, its complete sinogram and a sparse measurement of it.
#[derive(Debug, Clone)]
pub struct Problem {
    pub geometry: FanBeamGeometry,
    pub shape: ImageShape,
    pub phantom: ImageGrid,
    pub full: Sinogram,
    pub mask: SparseMask,
    /// Measured sinogram, zero on inactive rows.
    pub observed: Sinogram,
}

impl Problem {
    pub fn new(phantom: ImageGrid, geometry: FanBeamGeometry, r: usize, noise: &NoiseSpec) -> Result<Self> {
        let mask = make_sparse_mask(geometry.n_views, r)?;
        let full = forward_project(&phantom, &geometry)?;
        let observed = if noise.sigma > 0.0 {
            simulate_measurement(&phantom, &geometry, noise, &mask)?
        } else {
            apply_mask(&full, &mask)?
        };
        Ok(Self {
            geometry,
            shape: phantom.shape,
            phantom,
            full,
            mask,
            observed,
        })
    }

    /// Shepp–Logan on an `n × n` grid covering the field of view.
    pub fn shepp_logan(n: usize, n_views: usize, n_detectors: usize, r: usize) -> Result<Self> {
        let geometry = FanBeamGeometry::scaled(n_views, n_detectors);
        geometry.validate()?;
        let shape = ImageShape::covering(&geometry, n);
        Self::new(shepp_logan_on(shape)?, geometry, r, &NoiseSpec::none())
    }

    /// 64×64 grid, 180 views, 128 detectors, every `r`-th view kept.
    pub fn toy(r: usize) -> Result<Self> {
        Self::shepp_logan(64, 180, 128, r)
    }

    /// Same phantom and detector, a different number of acquired views.
    pub fn with_views(&self, n_views: usize, r: usize) -> Result<Self> {
        let geometry = FanBeamGeometry {
            n_views,
            ..self.geometry
        };
        Self::new(self.phantom.clone(), geometry, r, &NoiseSpec::none())
    }
}

/// Gaussian priors for normalized sinograms and their four wavelet bands.
/// The band priors are images of the sinogram prior under the wavelet
/// analysis, so only the latter is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorBundle {
    /// Sinograms are divided by this before entering the models.
    pub scale: f64,
    pub filter: WaveletFilter,
    pub band_floor: f64,
    pub sinogram: SubspacePrior,
    pub bands: [SubspacePrior; 4],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub size: usize,
    pub seed: u64,
    /// Most principal directions kept.
    pub rank: usize,
    /// Residual variance relative to the leading direction's.
    pub floor: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            size: 200,
            seed: 0xC0FFEE,
            rank: 200,
            floor: 1e-5,
        }
    }
}

/// Complete sinograms of perturbed phantoms, phantom `i` drawn from its own stream.
pub fn phantom_corpus(geometry: &FanBeamGeometry, shape: ImageShape, spec: &CorpusSpec) -> Result<Vec<Array2<f64>>> {
    if spec.size < 2 {
        return Err(Error::invalid("a prior corpus needs at least two samples"));
    }
    (0..spec.size)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(spec.seed, i as u64);
            let p = perturbed_shepp_logan(shape, &mut rng);
            Ok(forward_project(&p, geometry)?.values)
        })
        .collect()
}

impl PriorBundle {
    pub fn fit(corpus: &[Array2<f64>], filter: WaveletFilter, spec: &CorpusSpec) -> Result<Self> {
        let scale = corpus
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("prior corpus is empty or all zero"));
        }
        let normalized: Vec<Array2<f64>> = corpus.iter().map(|c| c / scale).collect();
        let sinogram = SubspacePrior::fit(&normalized, spec.rank, spec.floor)?;
        Self::from_sinogram_prior(scale, filter, sinogram, spec.floor)
    }

    pub fn from_sinogram_prior(scale: f64, filter: WaveletFilter, sinogram: SubspacePrior, band_floor: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("bad normalization scale {scale}")));
        }
        let band = |b: usize| {
            sinogram.mapped(
                |x| Ok(swt_decompose(x.view(), filter, 1)?.bands()[b].clone()),
                band_floor,
            )
        };
        let bands = [band(0)?, band(1)?, band(2)?, band(3)?];
        Ok(Self {
            scale,
            filter,
            band_floor,
            sinogram,
            bands,
        })
    }

    pub fn for_problem(problem: &Problem, filter: WaveletFilter, spec: &CorpusSpec) -> Result<Self> {
        let corpus = phantom_corpus(&problem.geometry, problem.shape, spec)?;
        Self::fit(&corpus, filter, spec)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.sinogram.mean.dim()
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let (v, d) = self.dim();
        let p = &self.sinogram;
        let meta = [self.scale, filter_code(self.filter), self.band_floor, p.residual];
        let tensors: Vec<(Vec<usize>, &[f64])> = vec![
            (vec![4], &meta),
            (vec![v, d], p.mean.as_slice().expect("standard layout")),
            (vec![p.rank(), v * d], p.basis.as_slice().expect("standard layout")),
            (vec![p.rank()], p.var.as_slice().expect("contiguous")),
        ];
        write_tensors(w, PRIOR_MAGIC, &tensors)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let tensors = read_tensors(r, PRIOR_MAGIC)?;
        let bad = || Error::Format("prior file must hold a header, a mean, a basis and variances".into());
        if tensors.len() != 4 || tensors[0].0 != [4] || tensors[1].0.len() != 2 || tensors[2].0.len() != 2 {
            return Err(bad());
        }
        let meta = &tensors[0].1;
        let filter = match meta[1] {
            0.0 => WaveletFilter::Haar,
            1.0 => WaveletFilter::Db2,
            other => return Err(Error::Format(format!("unknown wavelet code {other}"))),
        };
        let (dm, mean) = &tensors[1];
        let (db, basis) = &tensors[2];
        let (dv, var) = &tensors[3];
        if db[1] != dm[0] * dm[1] || dv.as_slice() != [db[0]] {
            return Err(bad());
        }
        let format = |e: Error| Error::Format(e.to_string());
        let mean = Array2::from_shape_vec((dm[0], dm[1]), mean.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let basis = Array2::from_shape_vec((db[0], db[1]), basis.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let sinogram = SubspacePrior::new(mean, basis, Array1::from(var.clone()), meta[3]).map_err(format)?;
        Self::from_sinogram_prior(meta[0], filter, sinogram, meta[2]).map_err(format)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn filter_code(f: WaveletFilter) -> f64 {
    match f {
        WaveletFilter::Haar => 0.0,
        WaveletFilter::Db2 => 1.0,
    }
}
