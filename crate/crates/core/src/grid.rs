//! Uniform real-space lattice, sampled fields and the spectral transform.
//!
//! Fields are stored row-major with `x` varying fastest: sample `(i, j)`
//! lives at index `j * nx + i` and sits at `(x_min + i dx, y_min + j dy)`.
//! The domain is periodic for the spectral transform, so `x_max` itself is
//! not a sample point.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::par;

/// Smallest accepted sample count along either axis.
pub const MIN_SAMPLES: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid needs at least {MIN_SAMPLES} samples per axis, got {nx}x{ny}")]
    TooSmall { nx: usize, ny: usize },
    #[error("half extent must be positive and finite, got {0}")]
    BadExtent(f64),
    #[error("fields live on different grids")]
    Mismatch,
    #[error("expected {expected} samples, got {got}")]
    Length { expected: usize, got: usize },
    #[error("cannot normalize a field with zero norm")]
    ZeroNorm,
}

/// Centered rectangular lattice.
#[derive(Clone, Copy, PartialEq)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
    x_max: f64,
    y_max: f64,
}

impl fmt::Debug for Grid2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Grid2D({}x{}, [{}, {}) x [{}, {}))",
            self.nx,
            self.ny,
            self.x_min(),
            self.x_max,
            self.y_min(),
            self.y_max
        )
    }
}

/// Builds a square centered grid with `x_max = y_max = half_extent`.
pub fn make_grid(nx: usize, ny: usize, half_extent: f64) -> Result<Grid2D, GridError> {
    Grid2D::new(nx, ny, half_extent, half_extent)
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, x_max: f64, y_max: f64) -> Result<Self, GridError> {
        if nx < MIN_SAMPLES || ny < MIN_SAMPLES {
            return Err(GridError::TooSmall { nx, ny });
        }
        for h in [x_max, y_max] {
            if !(h.is_finite() && h > 0.0) {
                return Err(GridError::BadExtent(h));
            }
        }
        Ok(Self { nx, ny, x_max, y_max })
    }

    /// Rebuilds a grid from stored bounds, requiring the domain to be centered.
    pub fn from_bounds(
        nx: usize,
        ny: usize,
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
    ) -> Result<Self, GridError> {
        if x_min != -x_max {
            return Err(GridError::BadExtent(x_min));
        }
        if y_min != -y_max {
            return Err(GridError::BadExtent(y_min));
        }
        Self::new(nx, ny, x_max, y_max)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn x_min(&self) -> f64 {
        -self.x_max
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_min(&self) -> f64 {
        -self.y_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    pub fn dx(&self) -> f64 {
        2.0 * self.x_max / self.nx as f64
    }
    pub fn dy(&self) -> f64 {
        2.0 * self.y_max / self.ny as f64
    }
    /// Quadrature weight of one sample.
    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }
    pub fn area(&self) -> f64 {
        4.0 * self.x_max * self.y_max
    }
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn x(&self, i: usize) -> f64 {
        self.x_min() + i as f64 * self.dx()
    }
    pub fn y(&self, j: usize) -> f64 {
        self.y_min() + j as f64 * self.dy()
    }
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }
    /// Coordinates of flat sample `k`.
    pub fn point(&self, k: usize) -> (f64, f64) {
        (self.x(k % self.nx), self.y(k / self.nx))
    }
    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }
    pub fn ys(&self) -> Vec<f64> {
        (0..self.ny).map(|j| self.y(j)).collect()
    }
    /// Angular wavenumbers along x in FFT order.
    pub fn kx(&self) -> Vec<f64> {
        wavenumbers(self.nx, self.dx())
    }
    /// Angular wavenumbers along y in FFT order.
    pub fn ky(&self) -> Vec<f64> {
        wavenumbers(self.ny, self.dy())
    }
}

fn wavenumbers(n: usize, d: f64) -> Vec<f64> {
    let dk = 2.0 * std::f64::consts::PI / (n as f64 * d);
    (0..n)
        .map(|i| {
            let s = if i < n / 2 { i as isize } else { i as isize - n as isize };
            s as f64 * dk
        })
        .collect()
}

/// Complex function sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveField {
    grid: Grid2D,
    values: Vec<Complex64>,
}

impl WaveField {
    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_values(grid: Grid2D, values: Vec<Complex64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::Length {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    /// Samples `f(x, y)` at every grid point.
    pub fn from_fn(grid: Grid2D, mut f: impl FnMut(f64, f64) -> Complex64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.point(k);
                f(x, y)
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn norm_sqr(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_area()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Scales the field to unit norm.
    pub fn normalize(&mut self) -> Result<(), GridError> {
        let n = self.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(GridError::ZeroNorm);
        }
        let s = 1.0 / n;
        self.values.iter_mut().for_each(|v| *v *= s);
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self, GridError> {
        self.normalize()?;
        Ok(self)
    }

    /// Probability density `|ψ|²` as a real field.
    pub fn density(&self) -> RealField {
        RealField {
            grid: self.grid,
            values: self.values.iter().map(|v| v.norm_sqr()).collect(),
        }
    }

    pub fn scale(&mut self, s: Complex64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: Complex64, other: &WaveField) -> Result<(), GridError> {
        if self.grid != other.grid {
            return Err(GridError::Mismatch);
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
        Ok(())
    }
}

/// Real function sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RealField {
    grid: Grid2D,
    values: Vec<f64>,
}

impl RealField {
    pub fn zeros(grid: Grid2D) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: Grid2D, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::Length {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid2D, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.point(k);
                f(x, y)
            })
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Pointwise sum of two fields on the same grid.
    pub fn add(&self, other: &RealField) -> Result<RealField, GridError> {
        if self.grid != other.grid {
            return Err(GridError::Mismatch);
        }
        Ok(RealField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// `∫ f dA` with the midpoint rule.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_area()
    }
}

/// Discrete L² inner product `Σ conj(f) g dx dy`.
pub fn inner_product(f: &WaveField, g: &WaveField) -> Result<Complex64, GridError> {
    if f.grid != g.grid {
        return Err(GridError::Mismatch);
    }
    Ok(dot(&f.values, &g.values) * f.grid.cell_area())
}

/// Expectation `⟨ψ|V|ψ⟩` of a multiplicative potential.
pub fn expectation(psi: &WaveField, v: &RealField) -> Result<f64, GridError> {
    if psi.grid != v.grid {
        return Err(GridError::Mismatch);
    }
    let s: f64 = psi
        .values
        .iter()
        .zip(&v.values)
        .map(|(p, v)| p.norm_sqr() * v)
        .sum();
    Ok(s * psi.grid.cell_area())
}

/// Unweighted `Σ conj(a) b`.
pub(crate) fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter()
        .zip(b)
        .fold(Complex64::new(0.0, 0.0), |acc, (x, y)| acc + x.conj() * y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Cached FFT plans for one grid shape.
///
/// Forward transforms are unnormalized; inverse transforms carry the `1/n`
/// factor, so `inverse(forward(f)) = f`.
#[derive(Clone)]
pub struct Fft2 {
    nx: usize,
    ny: usize,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fft2({}x{})", self.nx, self.ny)
    }
}

/// Per-thread work buffers for [`Fft2`].
pub struct FftScratch {
    fft: Vec<Complex64>,
    transposed: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(grid: &Grid2D) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            nx: grid.nx(),
            ny: grid.ny(),
            fwd_x: planner.plan_fft_forward(grid.nx()),
            inv_x: planner.plan_fft_inverse(grid.nx()),
            fwd_y: planner.plan_fft_forward(grid.ny()),
            inv_y: planner.plan_fft_inverse(grid.ny()),
        }
    }

    pub fn scratch(&self) -> FftScratch {
        let len = [&self.fwd_x, &self.inv_x, &self.fwd_y, &self.inv_y]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        FftScratch {
            fft: vec![Complex64::new(0.0, 0.0); len],
            transposed: vec![Complex64::new(0.0, 0.0); self.nx * self.ny],
        }
    }

    /// Unnormalized 1D transforms of every row (along x).
    pub fn rows(&self, data: &mut [Complex64], dir: Direction, s: &mut FftScratch) {
        let plan = match dir {
            Direction::Forward => &self.fwd_x,
            Direction::Inverse => &self.inv_x,
        };
        plan.process_with_scratch(data, &mut s.fft);
    }

    /// Unnormalized 1D transforms of every column (along y).
    pub fn columns(&self, data: &mut [Complex64], dir: Direction, s: &mut FftScratch) {
        let plan = match dir {
            Direction::Forward => &self.fwd_y,
            Direction::Inverse => &self.inv_y,
        };
        transpose::transpose(data, &mut s.transposed, self.nx, self.ny);
        plan.process_with_scratch(&mut s.transposed, &mut s.fft);
        transpose::transpose(&s.transposed, data, self.ny, self.nx);
    }

    /// Columns transform with a per-frequency multiplier applied in between
    /// forward and inverse passes, without an extra transpose pair.
    pub fn columns_filter(&self, data: &mut [Complex64], mult: &[f64], s: &mut FftScratch) {
        transpose::transpose(data, &mut s.transposed, self.nx, self.ny);
        self.fwd_y.process_with_scratch(&mut s.transposed, &mut s.fft);
        for row in s.transposed.chunks_mut(self.ny) {
            for (v, m) in row.iter_mut().zip(mult) {
                *v *= *m;
            }
        }
        self.inv_y.process_with_scratch(&mut s.transposed, &mut s.fft);
        transpose::transpose(&s.transposed, data, self.ny, self.nx);
    }

    /// Rows transform with a per-frequency multiplier in between.
    pub fn rows_filter(&self, data: &mut [Complex64], mult: &[f64], s: &mut FftScratch) {
        self.fwd_x.process_with_scratch(data, &mut s.fft);
        for row in data.chunks_mut(self.nx) {
            for (v, m) in row.iter_mut().zip(mult) {
                *v *= *m;
            }
        }
        self.inv_x.process_with_scratch(data, &mut s.fft);
    }

    /// Full 2D transform in place; the inverse includes `1/(nx ny)`.
    pub fn transform(&self, data: &mut [Complex64], dir: Direction, s: &mut FftScratch) {
        self.rows(data, dir, s);
        self.columns(data, dir, s);
        if dir == Direction::Inverse {
            let k = 1.0 / (self.nx * self.ny) as f64;
            data.iter_mut().for_each(|v| *v *= k);
        }
    }
}

/// 2D discrete Fourier transform of a field.
///
/// Forward is the plain unnormalized DFT with the zero frequency at index 0;
/// inverse divides by `nx ny`. Parseval reads
/// `Σ|f|² dx dy = Σ|F|² dx dy / (nx ny)`.
pub fn spectral_transform(f: &WaveField, direction: Direction) -> WaveField {
    let fft = Fft2::new(&f.grid);
    let mut s = fft.scratch();
    let mut out = f.clone();
    fft.transform(&mut out.values, direction, &mut s);
    out
}

/// Gaussian smoothing `ρ * G_w` of a real field, with `G_w` the
/// unit-integral Gaussian of standard deviation `width`, evaluated
/// spectrally on the periodic grid.
pub fn gaussian_smooth(field: &RealField, width: f64) -> RealField {
    let grid = field.grid;
    let fft = Fft2::new(&grid);
    let mut s = fft.scratch();
    let mut data: Vec<Complex64> = field
        .values
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    fft.transform(&mut data, Direction::Forward, &mut s);
    let kx = grid.kx();
    let ky = grid.ky();
    let w2 = 0.5 * width * width;
    let gx: Vec<f64> = kx.iter().map(|k| (-w2 * k * k).exp()).collect();
    let gy: Vec<f64> = ky.iter().map(|k| (-w2 * k * k).exp()).collect();
    par::for_each_chunk_mut(&mut data, grid.nx(), |j, row| {
        for (v, g) in row.iter_mut().zip(&gx) {
            *v *= g * gy[j];
        }
    });
    fft.transform(&mut data, Direction::Inverse, &mut s);
    RealField {
        grid,
        values: data.iter().map(|v| v.re).collect(),
    }
}

/// Catmull–Rom bicubic interpolation of a periodic real field at an
/// arbitrary point.
pub fn interpolate_bicubic(field: &RealField, x: f64, y: f64) -> f64 {
    let g = field.grid;
    let (nx, ny) = (g.nx() as isize, g.ny() as isize);
    let fx = (x - g.x_min()) / g.dx();
    let fy = (y - g.y_min()) / g.dy();
    let ix = fx.floor();
    let iy = fy.floor();
    let tx = fx - ix;
    let ty = fy - iy;
    let (ix, iy) = (ix as isize, iy as isize);
    let wx = catmull_rom(tx);
    let wy = catmull_rom(ty);
    let mut acc = 0.0;
    for (b, wyb) in wy.iter().enumerate() {
        let j = (iy - 1 + b as isize).rem_euclid(ny) as usize;
        let row = &field.values[j * nx as usize..(j + 1) * nx as usize];
        let mut r = 0.0;
        for (a, wxa) in wx.iter().enumerate() {
            let i = (ix - 1 + a as isize).rem_euclid(nx) as usize;
            r += wxa * row[i];
        }
        acc += wyb * r;
    }
    acc
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn random_field(grid: Grid2D, seed: u64) -> WaveField {
        let mut rng = Pcg64::seed_from_u64(seed);
        WaveField::from_fn(grid, |_, _| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn make_grid_spacing() {
        let g = make_grid(16, 16, 1.0).unwrap();
        assert_eq!(g.dx(), 0.125);
        assert_eq!(g.dy(), 0.125);
        assert_eq!(g.x_min(), -1.0);
        let g = make_grid(256, 256, 16.0).unwrap();
        assert_eq!(g.dx(), 0.125);
        assert_eq!(g.dy(), 0.125);
    }

    #[test]
    fn make_grid_rejects_bad_input() {
        assert_eq!(
            make_grid(15, 32, 1.0),
            Err(GridError::TooSmall { nx: 15, ny: 32 })
        );
        assert!(make_grid(32, 32, 0.0).is_err());
        assert!(make_grid(32, 32, -2.0).is_err());
        assert!(make_grid(32, 32, f64::NAN).is_err());
        assert!(Grid2D::from_bounds(32, 32, -1.0, 2.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn origin_is_a_sample() {
        let g = make_grid(64, 32, 4.0).unwrap();
        assert_eq!(g.x(32), 0.0);
        assert_eq!(g.y(16), 0.0);
    }

    #[test]
    fn constant_field_normalizes_to_one() {
        let g = make_grid(32, 32, 2.0).unwrap();
        let c = 1.0 / g.area().sqrt();
        let f = WaveField::from_fn(g, |_, _| Complex64::new(c, 0.0));
        let ip = inner_product(&f, &f).unwrap();
        assert!((ip.re - 1.0).abs() < 1e-14);
        assert!(ip.im.abs() < 1e-14);
    }

    #[test]
    fn disjoint_supports_are_orthogonal() {
        let g = make_grid(32, 32, 2.0).unwrap();
        let f = WaveField::from_fn(g, |x, _| Complex64::new(if x < 0.0 { 1.0 } else { 0.0 }, 0.0));
        let h = WaveField::from_fn(g, |x, _| Complex64::new(0.0, if x >= 0.0 { 2.0 } else { 0.0 }));
        assert_eq!(inner_product(&f, &h).unwrap(), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn inner_product_grid_mismatch() {
        let a = WaveField::zeros(make_grid(32, 32, 2.0).unwrap());
        let b = WaveField::zeros(make_grid(32, 32, 3.0).unwrap());
        assert_eq!(inner_product(&a, &b), Err(GridError::Mismatch));
    }

    #[test]
    fn normalize_zero_field_fails() {
        let mut a = WaveField::zeros(make_grid(32, 32, 2.0).unwrap());
        assert_eq!(a.normalize(), Err(GridError::ZeroNorm));
    }

    #[test]
    fn forward_of_constant_is_a_single_coefficient() {
        let g = make_grid(32, 16, 2.0).unwrap();
        let f = WaveField::from_fn(g, |_, _| Complex64::new(0.7, -0.2));
        let t = spectral_transform(&f, Direction::Forward);
        let n = g.len() as f64;
        assert!((t.values()[0] - Complex64::new(0.7 * n, -0.2 * n)).norm() < 1e-12);
        let rest = t.values()[1..].iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(rest < 1e-12, "{rest}");
    }

    #[test]
    fn round_trip_is_identity() {
        let g = make_grid(64, 32, 3.0).unwrap();
        let f = random_field(g, 11);
        let back = spectral_transform(&spectral_transform(&f, Direction::Forward), Direction::Inverse);
        let err = f
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn bicubic_reproduces_samples_and_smooth_functions() {
        let g = make_grid(64, 64, 4.0).unwrap();
        let f = RealField::from_fn(g, |x, y| (-(x * x + y * y) / 2.0).exp());
        assert!((interpolate_bicubic(&f, g.x(20), g.y(40)) - f.values()[g.index(20, 40)]).abs() < 1e-15);
        let v = interpolate_bicubic(&f, 0.31, -0.77);
        let exact = (-(0.31f64.powi(2) + 0.77f64.powi(2)) / 2.0).exp();
        assert!((v - exact).abs() < 1e-3, "{v} vs {exact}");
    }

    #[test]
    fn gaussian_smooth_preserves_integral() {
        let g = make_grid(64, 64, 4.0).unwrap();
        let f = RealField::from_fn(g, |x, y| (-(x * x + 2.0 * y * y)).exp());
        let s = gaussian_smooth(&f, 0.3);
        assert!((s.integral() - f.integral()).abs() < 1e-12);
    }
}
