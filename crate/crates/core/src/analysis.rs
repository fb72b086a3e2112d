//! Reference spectra and diagnostics of computed eigenstates.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::classical::{periodic_orbit, resonance_field, ClassicalError, OrbitDirection, PeriodicOrbit, Resonance};
use crate::eigensolver::Spectrum;
use crate::grid::{gaussian_smooth, interpolate_bicubic, Grid2D, GridError, RealField, WaveField};
use crate::par;
use crate::potential::{bump_overlap, rotate_bumps, BumpSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("window must be positive, got {0}")]
    BadWindow(f64),
    #[error("field list is empty")]
    NoFields,
    #[error("no spectrum supplied for B = {0}")]
    MissingSpectrum(f64),
    #[error("orbit energy {orbit} differs from state energy {state} by more than 10%")]
    EnergyMismatch { orbit: f64, state: f64 },
    #[error("tube width must be positive, got {0}")]
    BadTubeWidth(f64),
    #[error("reference area must be positive, got {0}")]
    BadArea(f64),
    #[error("spectrum field {spectrum} is not the resonance field {resonance}")]
    FieldMismatch { spectrum: f64, resonance: f64 },
    #[error("need at least 8 samples, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Classical(#[from] ClassicalError),
}

/// `(2k + |l| + 1)√(1 + B²/4) − lB/2` for `ω₀ = 1`.
///
/// The label `l` is the eigenvalue of `−L_z`: the state carries the
/// angular factor `e^{−ilφ}`.
pub fn fock_darwin_energy(k: u32, l: i32, b_field: f64) -> f64 {
    let w = (1.0 + 0.25 * b_field * b_field).sqrt();
    (2.0 * k as f64 + l.unsigned_abs() as f64 + 1.0) * w - 0.5 * l as f64 * b_field
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdLevel {
    pub energy: f64,
    pub k: u32,
    pub l: i32,
}

/// All levels with `E ≤ e_max`, ascending (ties ordered by `k`, then `l`).
///
/// At fixed `k` and sign of `l` the energy grows monotonically with `|l|`
/// (slope `ω̃ ∓ B/2 > 0`), which bounds the enumeration.
pub fn fock_darwin_levels(e_max: f64, b_field: f64) -> Vec<FdLevel> {
    let mut out = Vec::new();
    let mut k = 0u32;
    while fock_darwin_energy(k, 0, b_field) <= e_max {
        for sign in [1i32, -1] {
            let mut a = if sign == 1 { 0 } else { 1 };
            loop {
                let l = sign * a;
                let e = fock_darwin_energy(k, l, b_field);
                if e > e_max {
                    break;
                }
                out.push(FdLevel { energy: e, k, l });
                a += 1;
            }
        }
        k += 1;
    }
    out.sort_by(|a, b| a.energy.partial_cmp(&b.energy).unwrap().then(a.k.cmp(&b.k)).then(a.l.cmp(&b.l)));
    out
}

/// Lowest `count` levels.
pub fn lowest_fock_darwin_levels(count: usize, b_field: f64) -> Vec<FdLevel> {
    let mut e_max = 2.0;
    loop {
        let levels = fock_darwin_levels(e_max, b_field);
        if levels.len() >= count {
            // Levels just above the cut may tie with the last kept one;
            // enumeration is complete up to e_max, so truncation is exact.
            return levels.into_iter().take(count).collect();
        }
        e_max *= 1.3;
    }
}

/// Sum of unit-integral Gaussians sampled on an energy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DosCurve {
    pub energy_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub window: f64,
    pub b_field: Option<f64>,
}

impl DosCurve {
    /// Trapezoid rule over the energy grid.
    pub fn integral(&self) -> f64 {
        self.energy_grid
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(e, v)| 0.5 * (e[1] - e[0]) * (v[0] + v[1]))
            .sum()
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// Evenly spaced grid from `lo` to `hi` inclusive.
pub fn linear_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// `Σ_i N(E; E_i, window)`.
///
/// Contributions beyond 40 windows are below `1e-300` of the peak and
/// skipped.
pub fn dos(energies: &[f64], window: f64, energy_grid: &[f64]) -> Result<DosCurve, AnalysisError> {
    if !(window > 0.0 && window.is_finite()) {
        return Err(AnalysisError::BadWindow(window));
    }
    let mut sorted = energies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let norm = 1.0 / (window * (2.0 * PI).sqrt());
    let reach = 40.0 * window;
    let values = energy_grid
        .iter()
        .map(|&e| {
            let lo = sorted.partition_point(|&x| x < e - reach);
            let hi = sorted.partition_point(|&x| x <= e + reach);
            sorted[lo..hi]
                .iter()
                .map(|&x| {
                    let z = (e - x) / window;
                    norm * (-0.5 * z * z).exp()
                })
                .sum()
        })
        .collect();
    Ok(DosCurve {
        energy_grid: energy_grid.to_vec(),
        values,
        window,
        b_field: None,
    })
}

/// Where level energies come from in a [`dos_sweep`].
#[derive(Debug, Clone, Copy)]
pub enum DosSource<'a> {
    /// Unperturbed levels from the closed-form spectrum.
    Analytic,
    /// Computed spectra as `(B, energies)` pairs.
    Spectra(&'a [(f64, Vec<f64>)]),
}

/// One curve per field; levels above `e_max` are ignored.
pub fn dos_sweep(
    b_list: &[f64],
    e_max: f64,
    source: DosSource<'_>,
    window: f64,
    energy_grid: &[f64],
) -> Result<Vec<DosCurve>, AnalysisError> {
    if b_list.is_empty() {
        return Err(AnalysisError::NoFields);
    }
    let levels = b_list
        .iter()
        .map(|&b| match source {
            DosSource::Analytic => Ok(fock_darwin_levels(e_max, b).iter().map(|l| l.energy).collect::<Vec<_>>()),
            DosSource::Spectra(spectra) => spectra
                .iter()
                .find(|(sb, _)| (sb - b).abs() <= 1e-9 * b.abs().max(1.0))
                .map(|(_, e)| e.iter().cloned().filter(|&x| x <= e_max).collect())
                .ok_or(AnalysisError::MissingSpectrum(b)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let curves = par::map_range(b_list.len(), |i| dos(&levels[i], window, energy_grid));
    curves
        .into_iter()
        .zip(b_list)
        .map(|(c, &b)| {
            c.map(|mut c| {
                c.b_field = Some(b);
                c
            })
        })
        .collect()
}

/// Highest DOS value over `[0, e_max]` for every field, from the
/// closed-form levels, sampled at a quarter window.
pub fn ridge_profile(b_list: &[f64], e_max: f64, window: f64) -> Result<Vec<f64>, AnalysisError> {
    if !(window > 0.0) {
        return Err(AnalysisError::BadWindow(window));
    }
    let step = 0.25 * window;
    let count = (e_max / step).ceil() as usize + 1;
    let grid = linear_grid(0.0, step * (count - 1) as f64, count);
    let out = par::map_slice(b_list, |&b| {
        let e: Vec<f64> = fock_darwin_levels(e_max, b).iter().map(|l| l.energy).collect();
        dos(&e, window, &grid).map(|c| c.max_value())
    });
    out.into_iter().collect()
}

/// Within-cluster spread of computed levels against the unperturbed
/// degeneracy pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStat {
    /// Unperturbed cluster energy.
    pub fd_energy: f64,
    /// Indices (into the ascending computed list) of the members.
    pub first: usize,
    pub size: usize,
    pub mean: f64,
    /// Root-mean-square deviation from the cluster mean.
    pub spread: f64,
    /// Distance to the nearest neighboring unperturbed cluster.
    pub spacing: f64,
}

/// Groups ascending `energies` by the unperturbed clusters at `b_field`.
///
/// The `i`-th computed level is assigned to the cluster of the `i`-th
/// unperturbed level; unperturbed levels closer than `merge_tol` form one
/// cluster. Only clusters lying wholly inside the computed range are
/// returned.
pub fn fd_clusters(energies: &[f64], b_field: f64, merge_tol: f64) -> Vec<ClusterStat> {
    let mut sorted = energies.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    // One extra level shows whether the last cluster is complete.
    let fd = lowest_fock_darwin_levels(n + 1, b_field);
    let mut bounds = vec![0usize];
    for i in 1..fd.len() {
        if fd[i].energy - fd[i - 1].energy > merge_tol {
            bounds.push(i);
        }
    }
    let centers: Vec<f64> = bounds.iter().map(|&s| fd[s].energy).collect();
    let mut out = Vec::new();
    for c in 0..bounds.len() {
        let start = bounds[c];
        let end = if c + 1 < bounds.len() { bounds[c + 1] } else { fd.len() };
        if end > n || c + 1 >= bounds.len() {
            break;
        }
        let members = &sorted[start..end];
        let mean = members.iter().sum::<f64>() / members.len() as f64;
        let spread = (members.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / members.len() as f64).sqrt();
        let mut spacing = f64::INFINITY;
        if c > 0 {
            spacing = spacing.min(centers[c] - centers[c - 1]);
        }
        if c + 1 < centers.len() {
            spacing = spacing.min(centers[c + 1] - centers[c]);
        }
        out.push(ClusterStat {
            fd_energy: centers[c],
            first: start,
            size: end - start,
            mean,
            spread,
            spacing,
        });
    }
    out
}

/// Best match of one state against one resonance family.
#[derive(Debug, Clone, PartialEq)]
pub struct ScarScore {
    pub state_index: usize,
    pub resonance: Resonance,
    pub orientation: f64,
    pub score: f64,
    pub direction: OrbitDirection,
}

/// Tube-overlap scorer for one state.
///
/// The tube kernel is the Gaussian line source
/// `K(r) = ∫ ds exp(−|r − c(s)|²/2w²) / (√(2π) w)` along the orbit `c`,
/// which is a Gaussian profile of width `w` across the orbit and sums where
/// the orbit crosses itself. Then
///
/// ```text
/// score = ∫|ψ|² K dA / (∫K dA / A) = A · ∫ ds ρ̃(c(s)) / ∫ ds,
/// ```
///
/// with `ρ̃` the density smoothed by a unit-integral Gaussian of width `w`
/// and `A` the reference area. A density spread uniformly over `A` scores 1.
/// Spectrum scoring uses the classically allowed disk at the state's
/// energy ([`allowed_area`]), over which the microcanonical density of a 2D
/// system is uniform, so the score does not depend on the grid extent.
#[derive(Debug, Clone)]
pub struct ScarScorer {
    smoothed: RealField,
    area: f64,
    norm: f64,
    tube_width: f64,
}

/// Angular grid points per symmetry sector in the orientation search.
pub const ORIENTATION_SAMPLES: usize = 90;

impl ScarScorer {
    pub fn new(psi: &WaveField, reference_area: f64, tube_width: f64) -> Result<Self, AnalysisError> {
        if !(tube_width > 0.0 && tube_width.is_finite()) {
            return Err(AnalysisError::BadTubeWidth(tube_width));
        }
        if !(reference_area > 0.0 && reference_area.is_finite()) {
            return Err(AnalysisError::BadArea(reference_area));
        }
        let norm = psi.norm_sqr();
        if norm == 0.0 {
            return Err(GridError::ZeroNorm.into());
        }
        Ok(Self {
            smoothed: gaussian_smooth(&psi.density(), tube_width),
            area: reference_area,
            norm,
            tube_width,
        })
    }

    pub fn tube_width(&self) -> f64 {
        self.tube_width
    }

    /// Score of a fixed polyline (no orientation search).
    pub fn score_polyline(&self, points: &[[f64; 2]]) -> f64 {
        self.score_rotated(points, 0.0)
    }

    fn score_rotated(&self, points: &[[f64; 2]], angle: f64) -> f64 {
        let (s, c) = angle.sin_cos();
        let rot = |p: &[f64; 2]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        let sample = |p: [f64; 2]| interpolate_bicubic(&self.smoothed, p[0], p[1]);
        // Trapezoid rule in arc length.
        let mut weighted = 0.0;
        let mut length = 0.0;
        let mut prev = rot(&points[0]);
        let mut f_prev = sample(prev);
        for p in &points[1..] {
            let q = rot(p);
            let f = sample(q);
            let ds = (q[0] - prev[0]).hypot(q[1] - prev[1]);
            weighted += 0.5 * ds * (f + f_prev);
            length += ds;
            prev = q;
            f_prev = f;
        }
        if length == 0.0 {
            return 0.0;
        }
        (self.area * weighted / length / self.norm).max(0.0)
    }

    /// Best orientation of `orbit` (rotated about the origin) on a grid of
    /// [`ORIENTATION_SAMPLES`] angles over the orbit's symmetry sector
    /// `[0, 2π/v_r)`, refined by golden-section search around the best
    /// grid point. Returns `(orientation, score)`.
    pub fn best_orientation(&self, orbit: &PeriodicOrbit) -> (f64, f64) {
        let sector = 2.0 * PI / orbit.resonance.v_r() as f64;
        let step = sector / ORIENTATION_SAMPLES as f64;
        let mut best = (0.0, f64::NEG_INFINITY);
        for i in 0..ORIENTATION_SAMPLES {
            let a = i as f64 * step;
            let s = self.score_rotated(&orbit.points, a);
            if s > best.1 {
                best = (a, s);
            }
        }
        let f = |a: f64| self.score_rotated(&orbit.points, a);
        let (a, s) = golden_max(f, best.0 - step, best.0 + step, 1e-4 * step);
        let (a, s) = if s > best.1 { (a, s) } else { best };
        ((orbit.orientation + a).rem_euclid(sector), s)
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
    }
    let a = 0.5 * (lo + hi);
    (a, f(a))
}

/// Area of the disk `½ω₀²r² ≤ E`.
pub fn allowed_area(energy: f64, omega0: f64) -> f64 {
    2.0 * PI * energy.max(0.0) / (omega0 * omega0)
}

/// Samples for scoring an orbit: at least `64 v_r`, and dense enough that
/// consecutive points are a quarter tube width apart.
pub fn scoring_samples(res: &Resonance, energy: f64, tube_width: f64, omega0: f64) -> usize {
    let min = 64 * res.v_r() as usize;
    let b = resonance_field(res, omega0);
    let w = crate::classical::effective_frequency(omega0, b);
    // Speed is bounded by √(2E); the period is v_r π/ω̃.
    let length = (2.0 * energy.max(0.0)).sqrt() * res.v_r() as f64 * PI / w;
    min.max((length / (0.25 * tube_width)).ceil() as usize + 1)
}

/// Scar score of `psi` (eigenvalue `energy`) against `orbit`.
pub fn scar_score(psi: &WaveField, energy: f64, orbit: &PeriodicOrbit, tube_width: f64) -> Result<ScarScore, AnalysisError> {
    check_energy(orbit.energy, energy)?;
    let scorer = ScarScorer::new(psi, allowed_area(energy, orbit.params.omega0), tube_width)?;
    let (orientation, score) = scorer.best_orientation(orbit);
    Ok(ScarScore {
        state_index: 0,
        resonance: orbit.resonance,
        orientation,
        score,
        direction: orbit.direction,
    })
}

fn check_energy(orbit: f64, state: f64) -> Result<(), AnalysisError> {
    if (orbit - state).abs() > 0.1 * state.abs() {
        return Err(AnalysisError::EnergyMismatch { orbit, state });
    }
    Ok(())
}

/// Best score over both directions for every state of `spectrum` whose
/// index lies in `range`, using orbits at each state's own energy.
pub fn score_states(
    spectrum: &Spectrum,
    res: &Resonance,
    tube_width: f64,
    range: std::ops::Range<usize>,
) -> Result<Vec<ScarScore>, AnalysisError> {
    let b = spectrum.b_field();
    let omega0 = spectrum.config.confinement.omega0();
    let resonant = resonance_field(res, omega0);
    if (b - resonant).abs() > 1e-6 {
        return Err(AnalysisError::FieldMismatch {
            spectrum: b,
            resonance: resonant,
        });
    }
    if !(tube_width > 0.0) {
        return Err(AnalysisError::BadTubeWidth(tube_width));
    }
    let indices: Vec<usize> = range.filter(|&i| i < spectrum.len()).collect();
    let scores = par::map_slice(&indices, |&i| -> Result<ScarScore, AnalysisError> {
        let e = spectrum.energies[i];
        let scorer = ScarScorer::new(&spectrum.states[i], allowed_area(e, omega0), tube_width)?;
        let n = scoring_samples(res, e, tube_width, omega0);
        let mut best: Option<ScarScore> = None;
        for dir in OrbitDirection::both() {
            let orbit = periodic_orbit(res, e, dir, 0.0, n, omega0)?;
            let (orientation, score) = scorer.best_orientation(&orbit);
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(ScarScore {
                    state_index: i,
                    resonance: *res,
                    orientation,
                    score,
                    direction: dir,
                });
            }
        }
        Ok(best.expect("two directions scored"))
    });
    scores.into_iter().collect()
}

/// Fraction of states in `range` whose best score reaches `threshold`.
pub fn scar_census(
    spectrum: &Spectrum,
    res: &Resonance,
    threshold: f64,
    tube_width: f64,
    range: std::ops::Range<usize>,
) -> Result<f64, AnalysisError> {
    let scores = score_states(spectrum, res, tube_width, range)?;
    Ok(census_fraction(&scores, threshold))
}

/// Fraction of `scores` at or above `threshold` (0 for an empty list).
pub fn census_fraction(scores: &[ScarScore], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|s| s.score >= threshold).count() as f64 / scores.len() as f64
}

/// `⟨ψ|V_imp(θ)|ψ⟩` on an angular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PinningCurve {
    pub theta_grid: Vec<f64>,
    pub overlaps: Vec<f64>,
}

/// `n` equally spaced angles in `[0, 2π)`.
pub fn theta_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
}

/// Expectation of the rotated impurity potential for every angle.
pub fn pinning_curve(psi: &WaveField, bumps: &BumpSet, theta: &[f64]) -> PinningCurve {
    let grid: Grid2D = *psi.grid();
    let density: Vec<f64> = psi.values().iter().map(Complex64::norm_sqr).collect();
    let w = grid.cell_area();
    let overlaps = par::map_slice(theta, |&t| {
        if bumps.is_empty() {
            0.0
        } else {
            bump_overlap(&grid, &density, &rotate_bumps(bumps, t)) * w
        }
    });
    PinningCurve {
        theta_grid: theta.to_vec(),
        overlaps,
    }
}

/// Indices of the maxima of a periodic sequence whose topographic
/// prominence exceeds `prominence · (max − min)`.
///
/// The sequence is rotated to start at its global minimum, so every peak
/// has a base on both sides; prominence then follows the usual rule: the
/// peak height minus the higher of the two lowest points passed before
/// reaching a higher value (or the ends) on either side.
pub fn find_maxima(values: &[f64], prominence: f64) -> Result<Vec<usize>, AnalysisError> {
    let n = values.len();
    if n < 8 {
        return Err(AnalysisError::TooFewSamples(n));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if !(range > 1e-14 * max.abs().max(min.abs()).max(f64::MIN_POSITIVE)) {
        return Ok(Vec::new());
    }
    let start = values.iter().position(|&v| v == min).unwrap();
    let seq: Vec<f64> = (0..=n).map(|k| values[(start + k) % n]).collect();
    let mut peaks = Vec::new();
    let mut i = 1;
    while i < n {
        if seq[i] > seq[i - 1] {
            // Walk across a plateau.
            let mut j = i;
            while j + 1 < n && seq[j + 1] == seq[i] {
                j += 1;
            }
            if seq[j + 1] < seq[i] {
                peaks.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    let threshold = prominence * range;
    let mut out = Vec::new();
    for &p in &peaks {
        let h = seq[p];
        let mut left_min = h;
        let mut k = p;
        while k > 0 {
            k -= 1;
            if seq[k] > h {
                break;
            }
            left_min = left_min.min(seq[k]);
        }
        let mut right_min = h;
        let mut k = p;
        while k < n {
            k += 1;
            if seq[k] > h {
                break;
            }
            right_min = right_min.min(seq[k]);
        }
        if h - left_min.max(right_min) > threshold {
            out.push((p + start) % n);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Number of prominent maxima of a pinning curve (see [`find_maxima`]).
pub fn count_maxima(curve: &PinningCurve, prominence: f64) -> Result<usize, AnalysisError> {
    Ok(find_maxima(&curve.overlaps, prominence)?.len())
}
