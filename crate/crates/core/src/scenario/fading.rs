//! Spatially correlated log-normal shadowing maps.
//!
//! Each map is a zero-mean Gaussian random field sampled on a square grid,
//! with autocorrelation `σ² · 2^(-d / d_decorr)`. Samples are drawn exactly
//! (up to clipping of tiny negative eigenvalues) by circulant embedding: the
//! covariance is laid out on a periodic grid twice the size of the map, its
//! 2-D DFT gives the eigenvalues, and complex white noise shaped by their
//! square roots is transformed back.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry and statistics shared by all maps of one scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FadingParams {
    pub sigma_sh_db: f64,
    pub decorrelation_distance_m: f64,
    pub side_length_km: f64,
    pub grid_resolution_m: f64,
}

impl FadingParams {
    /// Grid points per axis. The grid covers `[0, cells · resolution]`,
    /// which always contains the deployment square.
    pub fn grid_points(&self) -> Result<usize> {
        if !(self.side_length_km > 0.0 && self.side_length_km.is_finite()) {
            return Err(Error::invalid("side length must be positive"));
        }
        if !(self.grid_resolution_m > 0.0 && self.grid_resolution_m.is_finite()) {
            return Err(Error::invalid("grid resolution must be positive"));
        }
        let span = self.side_length_km * 1000.0 / self.grid_resolution_m;
        let cells = (span - 1e-9).ceil();
        if span < 2.0 - 1e-9 {
            return Err(Error::invalid(format!(
                "resolution {} m leaves fewer than 2 cells across {} km",
                self.grid_resolution_m, self.side_length_km
            )));
        }
        if cells > 20_000.0 {
            return Err(Error::invalid("fading grid too large"));
        }
        Ok(cells as usize + 1)
    }

    fn validate_statistics(&self) -> Result<()> {
        if !(self.sigma_sh_db > 0.0 && self.sigma_sh_db.is_finite()) {
            return Err(Error::invalid("shadowing sigma must be positive"));
        }
        if !(self.decorrelation_distance_m > 0.0 && self.decorrelation_distance_m.is_finite()) {
            return Err(Error::invalid("decorrelation distance must be positive"));
        }
        Ok(())
    }
}

/// One shadowing map in dB, stored row-major with rows along y.
#[derive(Clone, Debug, PartialEq)]
pub struct FadingField {
    grid: Vec<f64>,
    points: usize,
    resolution_m: f64,
    sigma_sh_db: f64,
    decorrelation_distance_m: f64,
}

impl FadingField {
    /// A field that is identically zero (no shadowing).
    pub fn flat(params: &FadingParams) -> Result<Self> {
        let points = params.grid_points()?;
        Ok(Self {
            grid: vec![0.0; points * points],
            points,
            resolution_m: params.grid_resolution_m,
            sigma_sh_db: 0.0,
            decorrelation_distance_m: params.decorrelation_distance_m,
        })
    }

    pub fn from_grid(params: &FadingParams, grid: Vec<f64>) -> Result<Self> {
        let points = params.grid_points()?;
        if grid.len() != points * points {
            return Err(Error::invalid(format!(
                "fading grid has {} values, expected {}",
                grid.len(),
                points * points
            )));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("fading grid contains non-finite values"));
        }
        Ok(Self {
            grid,
            points,
            resolution_m: params.grid_resolution_m,
            sigma_sh_db: params.sigma_sh_db,
            decorrelation_distance_m: params.decorrelation_distance_m,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn resolution_m(&self) -> f64 {
        self.resolution_m
    }

    pub fn sigma_sh_db(&self) -> f64 {
        self.sigma_sh_db
    }

    pub fn decorrelation_distance_m(&self) -> f64 {
        self.decorrelation_distance_m
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.grid[iy * self.points + ix]
    }

    /// Bilinear interpolation at a point given in km.
    pub fn sample(&self, x_km: f64, y_km: f64) -> f64 {
        let last = (self.points - 1) as f64;
        let fx = (x_km * 1000.0 / self.resolution_m).clamp(0.0, last);
        let fy = (y_km * 1000.0 / self.resolution_m).clamp(0.0, last);
        let ix = (fx.floor() as usize).min(self.points - 2);
        let iy = (fy.floor() as usize).min(self.points - 2);
        let tx = fx - ix as f64;
        let ty = fy - iy as f64;
        let v00 = self.at(ix, iy);
        let v10 = self.at(ix + 1, iy);
        let v01 = self.at(ix, iy + 1);
        let v11 = self.at(ix + 1, iy + 1);
        v00 * (1.0 - tx) * (1.0 - ty) + v10 * tx * (1.0 - ty) + v01 * (1.0 - tx) * ty + v11 * tx * ty
    }
}

/// Precomputed circulant-embedding spectrum; draws any number of fields.
pub struct FadingGenerator {
    params: FadingParams,
    points: usize,
    embed: usize,
    sqrt_eigen: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FadingGenerator {
    pub fn new(params: FadingParams) -> Result<Self> {
        params.validate_statistics()?;
        let points = params.grid_points()?;
        let embed = 2 * points;
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(embed);

        let variance = params.sigma_sh_db * params.sigma_sh_db;
        let mut cov = vec![Complex::new(0.0, 0.0); embed * embed];
        for iy in 0..embed {
            let dy = iy.min(embed - iy) as f64 * params.grid_resolution_m;
            for ix in 0..embed {
                let dx = ix.min(embed - ix) as f64 * params.grid_resolution_m;
                let d = dx.hypot(dy);
                cov[iy * embed + ix].re = variance * (-d / params.decorrelation_distance_m).exp2();
            }
        }
        fft2(&mut cov, embed, fft.as_ref());
        let norm = (embed * embed) as f64;
        let sqrt_eigen = cov.iter().map(|c| (c.re.max(0.0) / norm).sqrt()).collect();
        Ok(Self {
            params,
            points,
            embed,
            sqrt_eigen,
            fft,
        })
    }

    pub fn params(&self) -> &FadingParams {
        &self.params
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FadingField {
        let mut buf: Vec<Complex<f64>> = self
            .sqrt_eigen
            .iter()
            .map(|&s| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex::new(s * re, s * im)
            })
            .collect();
        fft2(&mut buf, self.embed, self.fft.as_ref());
        let n = self.points;
        let mut grid = Vec::with_capacity(n * n);
        for iy in 0..n {
            grid.extend(buf[iy * self.embed..iy * self.embed + n].iter().map(|c| c.re));
        }
        FadingField {
            grid,
            points: n,
            resolution_m: self.params.grid_resolution_m,
            sigma_sh_db: self.params.sigma_sh_db,
            decorrelation_distance_m: self.params.decorrelation_distance_m,
        }
    }
}

/// In-place unnormalized 2-D DFT of a square `n×n` row-major buffer.
fn fft2(buf: &mut [Complex<f64>], n: usize, fft: &dyn Fft<f64>) {
    fft.process(buf);
    transpose(buf, n);
    fft.process(buf);
    transpose(buf, n);
}

fn transpose(buf: &mut [Complex<f64>], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

/// Draws a single shadowing map.
pub fn generate_fading_field(
    sigma_sh_db: f64,
    decorrelation_distance_m: f64,
    side_length_km: f64,
    grid_resolution_m: f64,
    seed: u64,
) -> Result<FadingField> {
    let generator = FadingGenerator::new(FadingParams {
        sigma_sh_db,
        decorrelation_distance_m,
        side_length_km,
        grid_resolution_m,
    })?;
    let mut rng = crate::rng::stream(seed, &[crate::rng::TAG_FADING]);
    Ok(generator.sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(side_km: f64, res: f64) -> FadingParams {
        FadingParams {
            sigma_sh_db: 8.0,
            decorrelation_distance_m: 100.0,
            side_length_km: side_km,
            grid_resolution_m: res,
        }
    }

    #[test]
    fn grid_points_cover_the_square() {
        assert_eq!(params(1.0, 10.0).grid_points().unwrap(), 101);
        assert_eq!(params(1.0, 300.0).grid_points().unwrap(), 5);
        assert_eq!(params(1.0, 500.0).grid_points().unwrap(), 3);
        assert!(params(1.0, 600.0).grid_points().is_err());
        assert!(params(0.0, 10.0).grid_points().is_err());
    }

    #[test]
    fn rejects_non_positive_statistics() {
        assert!(generate_fading_field(0.0, 100.0, 1.0, 10.0, 1).is_err());
        assert!(generate_fading_field(8.0, -1.0, 1.0, 10.0, 1).is_err());
        assert!(generate_fading_field(8.0, 100.0, 1.0, 0.0, 1).is_err());
    }

    #[test]
    fn same_seed_same_grid() {
        let a = generate_fading_field(8.0, 100.0, 0.5, 10.0, 42).unwrap();
        let b = generate_fading_field(8.0, 100.0, 0.5, 10.0, 42).unwrap();
        let c = generate_fading_field(8.0, 100.0, 0.5, 10.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn bilinear_sampling_hits_grid_nodes_and_midpoints() {
        let p = params(0.02, 10.0); // 3×3 grid
        let grid = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let f = FadingField::from_grid(&p, grid).unwrap();
        assert_eq!(f.sample(0.0, 0.0), 0.0);
        assert_eq!(f.sample(0.01, 0.01), 4.0);
        assert_eq!(f.sample(0.02, 0.02), 8.0);
        assert!((f.sample(0.005, 0.0) - 0.5).abs() < 1e-12);
        assert!((f.sample(0.015, 0.015) - 6.0).abs() < 1e-12);
    }
}
