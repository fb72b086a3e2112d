//! Confinement and impurity potentials.
//!
//! The impurity landscape is a sum of identical Gaussian bumps
//! `M exp(-(r - r_i)² / 2σ²)`. Random configurations are drawn from a
//! seeded PCG-64 generator (`rand_pcg::Pcg64`, seeded with
//! `seed_from_u64`), so the same seed always yields the same positions.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use thiserror::Error;

use crate::grid::{Grid2D, RealField, WaveField};

/// Paper-model defaults.
pub const DEFAULT_OMEGA0: f64 = 1.0;
pub const DEFAULT_BUMP_AMPLITUDE: f64 = 4.0;
pub const DEFAULT_BUMP_FWHM: f64 = 0.235;
pub const DEFAULT_BUMP_DENSITY: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("omega0 must be positive and finite, got {0}")]
    BadOmega(f64),
    #[error("magnetic field must be finite, got {0}")]
    BadField(f64),
    #[error("full width at half maximum must be positive, got {0}")]
    BadFwhm(f64),
    #[error("bump width must be positive, got {0}")]
    BadSigma(f64),
    #[error("bump amplitude must be finite, got {0}")]
    BadAmplitude(f64),
    #[error("bump density must be positive, got {0}")]
    BadDensity(f64),
    #[error("placement region must be positive, got {0}")]
    BadRegion(f64),
    #[error("bump at ({0}, {1}) lies outside its placement region")]
    OutsideRegion(f64, f64),
}

/// Harmonic confinement strength and perpendicular field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfinementParams {
    omega0: f64,
    b_field: f64,
}

impl ConfinementParams {
    pub fn new(omega0: f64, b_field: f64) -> Result<Self, PotentialError> {
        if !(omega0.is_finite() && omega0 > 0.0) {
            return Err(PotentialError::BadOmega(omega0));
        }
        if !b_field.is_finite() {
            return Err(PotentialError::BadField(b_field));
        }
        Ok(Self { omega0, b_field })
    }

    /// `ω₀ = 1` with the given field.
    pub fn with_field(b_field: f64) -> Result<Self, PotentialError> {
        Self::new(DEFAULT_OMEGA0, b_field)
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }
    pub fn b_field(&self) -> f64 {
        self.b_field
    }
}

/// Region the bump centers were drawn from or are known to lie in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    /// Centered square `[-h, h]²`.
    Square(f64),
    /// Centered disk of the given radius.
    Disk(f64),
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Region::Square(h) => x.abs() <= h && y.abs() <= h,
            Region::Disk(r) => x.hypot(y) <= r,
        }
    }
}

/// An impurity configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpSet {
    positions: Vec<[f64; 2]>,
    amplitude: f64,
    sigma: f64,
    region: Region,
    seed: Option<u64>,
}

impl BumpSet {
    /// Bumps at explicit positions; the recorded region is the smallest
    /// centered disk holding them.
    pub fn explicit(positions: Vec<[f64; 2]>, amplitude: f64, sigma: f64) -> Result<Self, PotentialError> {
        let radius = positions
            .iter()
            .map(|p| p[0].hypot(p[1]))
            .fold(0.0, f64::max);
        Self::with_region(positions, amplitude, sigma, Region::Disk(radius), None)
    }

    pub fn with_region(
        positions: Vec<[f64; 2]>,
        amplitude: f64,
        sigma: f64,
        region: Region,
        seed: Option<u64>,
    ) -> Result<Self, PotentialError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(PotentialError::BadSigma(sigma));
        }
        if !amplitude.is_finite() {
            return Err(PotentialError::BadAmplitude(amplitude));
        }
        if let Some(p) = positions.iter().find(|p| !region.contains(p[0], p[1])) {
            return Err(PotentialError::OutsideRegion(p[0], p[1]));
        }
        Ok(Self {
            positions,
            amplitude,
            sigma,
            region,
            seed,
        })
    }

    /// No impurities at all.
    pub fn empty() -> Self {
        Self {
            positions: Vec::new(),
            amplitude: 0.0,
            sigma: 1.0,
            region: Region::Disk(0.0),
            seed: None,
        }
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }
    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn region(&self) -> Region {
        self.region
    }
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
    pub fn len(&self) -> usize {
        self.positions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty() || self.amplitude == 0.0
    }

    /// Potential at an arbitrary point, summed over every bump.
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let k = 0.5 / (self.sigma * self.sigma);
        self.amplitude
            * self
                .positions
                .iter()
                .map(|p| (-k * ((x - p[0]).powi(2) + (y - p[1]).powi(2))).exp())
                .sum::<f64>()
    }
}

/// `½ ω₀² r²` at every sample.
pub fn harmonic_field(grid: &Grid2D, params: &ConfinementParams) -> RealField {
    let w2 = 0.5 * params.omega0 * params.omega0;
    RealField::from_fn(*grid, |x, y| w2 * (x * x + y * y))
}

/// Gaussian width from its full width at half maximum.
pub fn fwhm_to_sigma(fwhm: f64) -> Result<f64, PotentialError> {
    if !(fwhm.is_finite() && fwhm > 0.0) {
        return Err(PotentialError::BadFwhm(fwhm));
    }
    Ok(fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt()))
}

/// Places `round(density · (2 region)²)` bumps uniformly in the square
/// `[-region, region]²`.
pub fn sample_bumps(
    seed: u64,
    density: f64,
    region: f64,
    amplitude: f64,
    sigma: f64,
) -> Result<BumpSet, PotentialError> {
    if !(density.is_finite() && density > 0.0) {
        return Err(PotentialError::BadDensity(density));
    }
    if !(region.is_finite() && region > 0.0) {
        return Err(PotentialError::BadRegion(region));
    }
    let count = (density * (2.0 * region).powi(2)).round() as usize;
    let mut rng = Pcg64::seed_from_u64(seed);
    let positions = (0..count)
        .map(|_| {
            let x = region * (2.0 * rng.random::<f64>() - 1.0);
            let y = region * (2.0 * rng.random::<f64>() - 1.0);
            [x, y]
        })
        .collect();
    BumpSet::with_region(positions, amplitude, sigma, Region::Square(region), Some(seed))
}

/// Samples the impurity potential on the grid.
///
/// Every bump contributes at every sample; the Gaussian factorizes into
/// `gx(x) gy(y)`, so each bump costs one outer product. Factors below
/// `exp(-700)` underflow to zero in the product anyway and are skipped.
pub fn bump_field(grid: &Grid2D, bumps: &BumpSet) -> RealField {
    let mut out = RealField::zeros(*grid);
    if bumps.is_empty() {
        return out;
    }
    let nx = grid.nx();
    let k = 0.5 / (bumps.sigma * bumps.sigma);
    let xs = grid.xs();
    let ys = grid.ys();
    let values = out.values_mut();
    let mut gx = vec![0.0; nx];
    for p in &bumps.positions {
        for (g, &x) in gx.iter_mut().zip(&xs) {
            let a = k * (x - p[0]).powi(2);
            *g = if a < 700.0 { (-a).exp() } else { 0.0 };
        }
        let (i0, i1) = support(&gx);
        if i0 >= i1 {
            continue;
        }
        for (j, &y) in ys.iter().enumerate() {
            let a = k * (y - p[1]).powi(2);
            if a >= 700.0 {
                continue;
            }
            let gy = bumps.amplitude * (-a).exp();
            let row = &mut values[j * nx + i0..j * nx + i1];
            for (v, g) in row.iter_mut().zip(&gx[i0..i1]) {
                *v += gy * g;
            }
        }
    }
    out
}

fn support(g: &[f64]) -> (usize, usize) {
    let first = g.iter().position(|&v| v != 0.0).unwrap_or(g.len());
    let last = g.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1);
    (first, last)
}

/// `⟨ψ|V_imp|ψ⟩` for a bump set, by the same factorized quadrature as
/// [`bump_field`] but without materializing the field.
pub fn bump_expectation(psi: &WaveField, bumps: &BumpSet) -> f64 {
    if bumps.is_empty() {
        return 0.0;
    }
    let grid = *psi.grid();
    let density: Vec<f64> = psi.values().iter().map(Complex64::norm_sqr).collect();
    bump_overlap(&grid, &density, bumps) * grid.cell_area()
}

/// `Σ_samples ρ V_imp` without the cell-area weight.
pub(crate) fn bump_overlap(grid: &Grid2D, density: &[f64], bumps: &BumpSet) -> f64 {
    let nx = grid.nx();
    let k = 0.5 / (bumps.sigma * bumps.sigma);
    let xs = grid.xs();
    let ys = grid.ys();
    let mut gx = vec![0.0; nx];
    let mut total = 0.0;
    for p in &bumps.positions {
        for (g, &x) in gx.iter_mut().zip(&xs) {
            let a = k * (x - p[0]).powi(2);
            *g = if a < 700.0 { (-a).exp() } else { 0.0 };
        }
        let (i0, i1) = support(&gx);
        if i0 >= i1 {
            continue;
        }
        let mut acc = 0.0;
        for (j, &y) in ys.iter().enumerate() {
            let a = k * (y - p[1]).powi(2);
            if a >= 700.0 {
                continue;
            }
            let row = &density[j * nx + i0..j * nx + i1];
            let r: f64 = row.iter().zip(&gx[i0..i1]).map(|(d, g)| d * g).sum();
            acc += (-a).exp() * r;
        }
        total += acc;
    }
    bumps.amplitude * total
}

/// Rigid rotation of every bump about the origin by `theta`.
///
/// The recorded region is kept when all rotated centers still lie in it;
/// otherwise it widens to the circumscribing disk.
pub fn rotate_bumps(bumps: &BumpSet, theta: f64) -> BumpSet {
    let (s, c) = theta.sin_cos();
    let positions: Vec<[f64; 2]> = bumps
        .positions
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
        .collect();
    let region = if positions.iter().all(|p| bumps.region.contains(p[0], p[1])) {
        bumps.region
    } else {
        match bumps.region {
            Region::Square(h) => Region::Disk(h * std::f64::consts::SQRT_2),
            Region::Disk(r) => Region::Disk(r),
        }
    };
    BumpSet {
        positions,
        amplitude: bumps.amplitude,
        sigma: bumps.sigma,
        region,
        seed: bumps.seed,
    }
}
