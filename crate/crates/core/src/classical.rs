//! Classical mechanics of the oscillator in a perpendicular field.
//!
//! Conventions follow the polar Lagrangian
//! `L = ½(ṙ² + r²φ̇²) − ½ω₀²r² + ½Br²φ̇`, i.e. a unit positive charge in
//! the symmetric gauge `A = ½B(−y, x)`. The equations of motion are
//! `ẍ = −ω₀²x + Bẏ`, `ÿ = −ω₀²y − Bẋ`, so free cyclotron motion turns
//! clockwise for `B > 0` and the Larmor drift is `φ̇ = −B/2`.
//!
//! In the frame rotating with the Larmor drift the motion is an isotropic
//! oscillator of frequency `ω̃ = √(ω₀² + B²/4)`: an ellipse with semi-axes
//! `a ≥ b`, so the radial period `π/ω̃` does not depend on the orbit.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{Matrix4, Vector4};
use thiserror::Error;

use crate::par;
use crate::potential::{BumpSet, Region};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassicalError {
    #[error("resonance ({v_theta}, {v_r}) is invalid: {reason}")]
    BadResonance { v_theta: u32, v_r: u32, reason: &'static str },
    #[error("no real orbit with E = {energy} and p_phi = {p_phi} (needs E + p_phi B/2 >= omega_tilde |p_phi|)")]
    Infeasible { energy: f64, p_phi: f64 },
    #[error("orbit parameter computation produced a non-finite value")]
    NonFinite,
    #[error("omega0 must be positive, got {0}")]
    BadOmega(f64),
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("time step {dt} exceeds the stability bound {max}")]
    StepTooLarge { dt: f64, max: f64 },
    #[error("time step and duration must be positive")]
    BadTime,
    #[error("relative energy drift {drift:e} exceeds tolerance {tolerance:e}")]
    EnergyDrift { drift: f64, tolerance: f64 },
}

/// A `(v_θ, v_r)` commensurability: `v_θ` turns about the origin during
/// `v_r` radial oscillations.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Resonance {
    v_theta: u32,
    v_r: u32,
}

impl fmt::Debug for Resonance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.v_theta, self.v_r)
    }
}

impl fmt::Display for Resonance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.v_theta, self.v_r)
    }
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Resonance {
    pub fn new(v_theta: u32, v_r: u32) -> Result<Self, ClassicalError> {
        let bad = |reason| ClassicalError::BadResonance { v_theta, v_r, reason };
        if v_theta == 0 || v_r == 0 {
            return Err(bad("both indices must be positive"));
        }
        if gcd(v_theta, v_r) != 1 {
            return Err(bad("indices must be coprime"));
        }
        if v_r <= v_theta {
            return Err(bad("v_r / v_theta must exceed 1"));
        }
        Ok(Self { v_theta, v_r })
    }

    pub fn v_theta(&self) -> u32 {
        self.v_theta
    }
    pub fn v_r(&self) -> u32 {
        self.v_r
    }
    pub fn ratio(&self) -> f64 {
        self.v_r as f64 / self.v_theta as f64
    }

    /// All valid resonances with `1 < v_r/v_θ ≤ max_ratio`, sorted by ratio
    /// and then by `v_θ`.
    pub fn enumerate(max_ratio: f64, max_v_theta: u32) -> Vec<Resonance> {
        let mut out = Vec::new();
        for vt in 1..=max_v_theta {
            let top = (max_ratio * vt as f64 + 1e-9).floor() as u32;
            for vr in (vt + 1)..=top {
                if let Ok(r) = Resonance::new(vt, vr) {
                    out.push(r);
                }
            }
        }
        out.sort_by(|a, b| {
            a.ratio()
                .partial_cmp(&b.ratio())
                .unwrap()
                .then(a.v_theta.cmp(&b.v_theta))
        });
        out
    }
}

/// `ω̃ = √(ω₀² + B²/4)`.
pub fn effective_frequency(omega0: f64, b_field: f64) -> f64 {
    (omega0 * omega0 + 0.25 * b_field * b_field).sqrt()
}

/// Sense of rotation, i.e. the sign of the canonical angular momentum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OrbitDirection {
    /// `p_φ > 0`.
    Positive,
    /// `p_φ < 0`.
    Negative,
}

impl OrbitDirection {
    pub fn sign(self) -> f64 {
        match self {
            OrbitDirection::Positive => 1.0,
            OrbitDirection::Negative => -1.0,
        }
    }
    pub fn both() -> [OrbitDirection; 2] {
        [OrbitDirection::Positive, OrbitDirection::Negative]
    }
}

/// Closed-form description of one unperturbed orbit.
///
/// `p_phi` is signed; its magnitude equals `ω̃ a b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitParams {
    pub a: f64,
    pub b: f64,
    pub b_field: f64,
    pub omega0: f64,
    pub omega_tilde: f64,
    pub p_phi: f64,
    pub energy: f64,
}

/// Recovers the turning radii from the two constants of motion.
///
/// `a² + b² = 2(E + ½p_φB)/ω̃²` and `ab = |p_φ|/ω̃`, so `a²` and `b²` are
/// the roots of a quadratic.
pub fn orbit_params(energy: f64, p_phi: f64, omega0: f64, b_field: f64) -> Result<OrbitParams, ClassicalError> {
    if !(omega0 > 0.0 && omega0.is_finite()) {
        return Err(ClassicalError::BadOmega(omega0));
    }
    if !(energy.is_finite() && p_phi.is_finite() && b_field.is_finite()) {
        return Err(ClassicalError::NonFinite);
    }
    let w = effective_frequency(omega0, b_field);
    let sum = 2.0 * (energy + 0.5 * p_phi * b_field) / (w * w);
    let prod = p_phi.abs() / w;
    let disc = sum * sum - 4.0 * prod * prod;
    // Circular orbits sit exactly on the boundary; accept rounding noise.
    let tol = 1e-12 * sum.abs().max(1.0).powi(2);
    if sum < 0.0 || disc < -tol {
        return Err(ClassicalError::Infeasible { energy, p_phi });
    }
    let a2 = 0.5 * (sum + disc.max(0.0).sqrt());
    let a = a2.sqrt();
    let b = if a > 0.0 { (prod / a).min(a) } else { 0.0 };
    if !(a.is_finite() && b.is_finite()) {
        return Err(ClassicalError::NonFinite);
    }
    Ok(OrbitParams {
        a,
        b,
        b_field,
        omega0,
        omega_tilde: w,
        p_phi,
        energy,
    })
}

impl OrbitParams {
    /// Builds parameters directly from the turning radii.
    pub fn from_radii(a: f64, b: f64, direction: OrbitDirection, omega0: f64, b_field: f64) -> Self {
        let w = effective_frequency(omega0, b_field);
        let p_phi = direction.sign() * w * a * b;
        let energy = 0.5 * w * w * (a * a + b * b) - 0.5 * p_phi * b_field;
        Self {
            a,
            b,
            b_field,
            omega0,
            omega_tilde: w,
            p_phi,
            energy,
        }
    }

    pub fn radial_period(&self) -> f64 {
        PI / self.omega_tilde
    }

    fn sense(&self) -> f64 {
        if self.p_phi < 0.0 {
            -1.0
        } else {
            1.0
        }
    }

    /// Continuous angle swept in the rotating frame.
    ///
    /// The ellipse angle `atan2(b sin ω̃t, a cos ω̃t)` never differs from
    /// `ω̃t` by more than π/2, which fixes the branch without unwrapping.
    fn rotating_angle(&self, t: f64) -> f64 {
        let s = self.omega_tilde * t;
        if self.b == 0.0 {
            // Radial line through the origin: angle flips by π each pass.
            let c = s.cos();
            return if c >= 0.0 { 0.0 } else { PI };
        }
        let (sn, cs) = s.sin_cos();
        let raw = (self.b * sn).atan2(self.a * cs);
        let k = ((s - raw) / TAU).round();
        self.sense() * (raw + k * TAU)
    }

    /// Position and velocity at time `t`, starting at `(a, 0)` at `t = 0`.
    pub fn state(&self, t: f64) -> ClassicalState {
        let s = self.omega_tilde * t;
        let (sn, cs) = s.sin_cos();
        let sense = self.sense();
        // Rotating frame ellipse.
        let xr = self.a * cs;
        let yr = sense * self.b * sn;
        let vxr = -self.a * self.omega_tilde * sn;
        let vyr = sense * self.b * self.omega_tilde * cs;
        let alpha = -0.5 * self.b_field * t;
        let alpha_dot = -0.5 * self.b_field;
        let (sa, ca) = alpha.sin_cos();
        let x = ca * xr - sa * yr;
        let y = sa * xr + ca * yr;
        let vx = ca * vxr - sa * vyr - alpha_dot * y;
        let vy = sa * vxr + ca * vyr + alpha_dot * x;
        ClassicalState { x, y, vx, vy }
    }
}

/// `(r, φ)` at time `t` with `r(0) = a`, `φ(0) = 0`.
///
/// `r² = a²cos²(ω̃t) + b²sin²(ω̃t)` and `φ = −½Bt + θ(t)` with `θ` the
/// continuous polar angle of the rotating-frame ellipse,
/// `tan θ = (b/a) tan(ω̃t)`. For `b = 0` the orbit is a radial line and `φ`
/// jumps by π whenever the particle passes through the origin.
pub fn analytic_orbit(params: &OrbitParams, t: f64) -> (f64, f64) {
    let s = params.omega_tilde * t;
    let (sn, cs) = s.sin_cos();
    let r = (params.a * params.a * cs * cs + params.b * params.b * sn * sn).sqrt();
    let phi = -0.5 * params.b_field * t + params.rotating_angle(t);
    (r, phi)
}

/// Angle turned by the radius vector during one radial period,
/// `π[ξ(p_φ) − B/(2ω̃)]`, with `ξ` the sign of the angular momentum.
pub fn delta_phi(p_phi_sign: i32, omega0: f64, b_field: f64) -> f64 {
    let xi = p_phi_sign.signum() as f64;
    PI * (xi - b_field / (2.0 * effective_frequency(omega0, b_field)))
}

/// Field at which positive-`p_φ` orbits are in `v_θ : v_r` resonance,
/// `B = ω₀ (ρ − 2)/√(ρ − 1)` with `ρ = v_r/v_θ`.
pub fn resonance_field(res: &Resonance, omega0: f64) -> f64 {
    let rho = res.ratio();
    omega0 * (rho - 2.0) / (rho - 1.0).sqrt()
}

/// Canonical angular momentum for scar matching: the resonant orbit at
/// energy `E` with aspect ratio `b/a = ½`.
///
/// Any `p_φ` of the right sign is resonant at the resonance field; fixing
/// the aspect ratio picks one representative.
pub fn choose_p_phi_for_resonance(
    res: &Resonance,
    energy: f64,
    direction: OrbitDirection,
    omega0: f64,
) -> Result<f64, ClassicalError> {
    let b_field = resonance_field(res, omega0);
    canonical_p_phi(energy, direction, omega0, b_field)
}

pub(crate) fn canonical_p_phi(energy: f64, direction: OrbitDirection, omega0: f64, b_field: f64) -> Result<f64, ClassicalError> {
    let w = effective_frequency(omega0, b_field);
    // E = a²(5ω̃²/8 − s ω̃ B/4) for b = a/2.
    let denom = 0.625 * w * w - 0.25 * direction.sign() * w * b_field;
    if !(energy > 0.0) || !(denom > 0.0) {
        return Err(ClassicalError::Infeasible { energy, p_phi: f64::NAN });
    }
    let a2 = energy / denom;
    Ok(direction.sign() * 0.5 * w * a2)
}

/// A closed classical orbit sampled over its full period.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicOrbit {
    pub resonance: Resonance,
    pub energy: f64,
    pub direction: OrbitDirection,
    pub orientation: f64,
    pub params: OrbitParams,
    pub points: Vec<[f64; 2]>,
}

impl PeriodicOrbit {
    /// Time to close: `v_r` radial periods.
    pub fn duration(&self) -> f64 {
        self.resonance.v_r as f64 * self.params.radial_period()
    }

    pub fn closure_error(&self) -> f64 {
        let (f, l) = (self.points[0], self.points[self.points.len() - 1]);
        (f[0] - l[0]).hypot(f[1] - l[1])
    }

    /// Net number of turns of the polyline about the origin.
    pub fn winding_number(&self) -> i64 {
        winding_number(&self.points)
    }

    /// Expected winding at the resonance field: `v_θ` for positive
    /// angular momentum; the negative branch turns `−π(1 + B/2ω̃)` per
    /// radial period and closes with winding `−(v_r − v_θ)`.
    pub fn expected_winding(&self) -> i64 {
        match self.direction {
            OrbitDirection::Positive => self.resonance.v_theta as i64,
            OrbitDirection::Negative => -((self.resonance.v_r - self.resonance.v_theta) as i64),
        }
    }

    pub fn length(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }

    /// Copy rotated rigidly by `angle` about the origin.
    pub fn rotated(&self, angle: f64) -> PeriodicOrbit {
        let (s, c) = angle.sin_cos();
        PeriodicOrbit {
            points: self
                .points
                .iter()
                .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
                .collect(),
            orientation: self.orientation + angle,
            ..self.clone()
        }
    }
}

/// Net turns of a polyline about the origin.
pub fn winding_number(points: &[[f64; 2]]) -> i64 {
    let total: f64 = points
        .windows(2)
        .map(|w| {
            let a = w[0][1].atan2(w[0][0]);
            let b = w[1][1].atan2(w[1][0]);
            let mut d = b - a;
            while d > PI {
                d -= TAU;
            }
            while d < -PI {
                d += TAU;
            }
            d
        })
        .sum();
    (total / TAU).round() as i64
}

/// Closed resonant orbit at `E` with the canonical aspect ratio, rotated so
/// the first apocenter sits at angle `orientation`.
pub fn periodic_orbit(
    res: &Resonance,
    energy: f64,
    direction: OrbitDirection,
    orientation: f64,
    n_samples: usize,
    omega0: f64,
) -> Result<PeriodicOrbit, ClassicalError> {
    let min = 64 * res.v_r as usize;
    if n_samples < min {
        return Err(ClassicalError::TooFewSamples { min, got: n_samples });
    }
    let b_field = resonance_field(res, omega0);
    let p_phi = canonical_p_phi(energy, direction, omega0, b_field)?;
    let params = orbit_params(energy, p_phi, omega0, b_field)?;
    let duration = res.v_r as f64 * params.radial_period();
    let (so, co) = orientation.sin_cos();
    let points = (0..n_samples)
        .map(|k| {
            let t = duration * k as f64 / (n_samples - 1) as f64;
            let s = params.state(t);
            [co * s.x - so * s.y, so * s.x + co * s.y]
        })
        .collect();
    Ok(PeriodicOrbit {
        resonance: *res,
        energy,
        direction,
        orientation,
        params,
        points,
    })
}

/// Phase-space point of the classical particle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassicalState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl ClassicalState {
    fn to_vec(self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.vx, self.vy)
    }
    fn from_vec(v: &Vector4<f64>) -> Self {
        Self {
            x: v[0],
            y: v[1],
            vx: v[2],
            vy: v[3],
        }
    }
    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.vx.is_finite() && self.vy.is_finite()
    }
}

/// Bump lookup for the classical force: a uniform cell list whose cell
/// size equals the interaction cutoff of ten widths, beyond which a bump
/// contributes less than `2e-22 M`.
#[derive(Debug, Clone)]
struct BumpCells {
    amplitude: f64,
    inv_two_sigma2: f64,
    inv_sigma2: f64,
    cutoff2: f64,
    cell: f64,
    origin: f64,
    n: usize,
    starts: Vec<usize>,
    members: Vec<[f64; 2]>,
}

impl BumpCells {
    fn new(bumps: &BumpSet) -> Option<Self> {
        if bumps.is_empty() {
            return None;
        }
        let sigma = bumps.sigma();
        let cutoff = 10.0 * sigma;
        let extent = match bumps.region() {
            Region::Square(h) => h,
            Region::Disk(r) => r,
        }
        .max(bumps.positions().iter().map(|p| p[0].abs().max(p[1].abs())).fold(0.0, f64::max));
        let n = ((2.0 * extent / cutoff).ceil() as usize).max(1);
        let cell = 2.0 * extent.max(cutoff) / n as f64;
        let origin = -extent.max(cutoff);
        let idx = |p: &[f64; 2]| {
            let i = (((p[0] - origin) / cell) as usize).min(n - 1);
            let j = (((p[1] - origin) / cell) as usize).min(n - 1);
            j * n + i
        };
        let mut counts = vec![0usize; n * n + 1];
        for p in bumps.positions() {
            counts[idx(p) + 1] += 1;
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let mut fill = counts.clone();
        let mut members = vec![[0.0; 2]; bumps.len()];
        for p in bumps.positions() {
            let c = idx(p);
            members[fill[c]] = *p;
            fill[c] += 1;
        }
        Some(Self {
            amplitude: bumps.amplitude(),
            inv_two_sigma2: 0.5 / (sigma * sigma),
            inv_sigma2: 1.0 / (sigma * sigma),
            cutoff2: cutoff * cutoff,
            cell,
            origin,
            n,
            starts: counts,
            members,
        })
    }

    fn visit(&self, x: f64, y: f64, mut f: impl FnMut(f64, f64, f64)) {
        let reach = self.cutoff2.sqrt();
        let lo = |v: f64| (((v - reach - self.origin) / self.cell).floor().max(0.0)) as usize;
        let hi = |v: f64| ((((v + reach - self.origin) / self.cell).floor()) as isize).min(self.n as isize - 1);
        let (i1, j1) = (hi(x), hi(y));
        if i1 < 0 || j1 < 0 {
            return;
        }
        let (i0, j0) = (lo(x), lo(y));
        for j in j0..=(j1 as usize) {
            for i in i0..=(i1 as usize) {
                let c = j * self.n + i;
                for p in &self.members[self.starts[c]..self.starts[c + 1]] {
                    let dx = x - p[0];
                    let dy = y - p[1];
                    let d2 = dx * dx + dy * dy;
                    if d2 < self.cutoff2 {
                        f(dx, dy, self.amplitude * (-self.inv_two_sigma2 * d2).exp());
                    }
                }
            }
        }
    }

    fn potential(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.0;
        self.visit(x, y, |_, _, g| v += g);
        v
    }

    fn force(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut fx, mut fy) = (0.0, 0.0);
        self.visit(x, y, |dx, dy, g| {
            fx += g * dx * self.inv_sigma2;
            fy += g * dy * self.inv_sigma2;
        });
        (fx, fy)
    }
}

/// Confinement, field and (possibly empty) impurities for the classical
/// particle.
#[derive(Debug, Clone)]
pub struct ClassicalSystem {
    omega0: f64,
    b_field: f64,
    cells: Option<BumpCells>,
}

impl ClassicalSystem {
    /// `omega0 = 0` is allowed here for free cyclotron motion.
    pub fn new(omega0: f64, b_field: f64, bumps: &BumpSet) -> Self {
        Self {
            omega0,
            b_field,
            cells: BumpCells::new(bumps),
        }
    }

    pub fn unperturbed(omega0: f64, b_field: f64) -> Self {
        Self::new(omega0, b_field, &BumpSet::empty())
    }

    pub fn omega0(&self) -> f64 {
        self.omega0
    }
    pub fn b_field(&self) -> f64 {
        self.b_field
    }
    pub fn has_bumps(&self) -> bool {
        self.cells.is_some()
    }

    pub fn potential(&self, x: f64, y: f64) -> f64 {
        0.5 * self.omega0 * self.omega0 * (x * x + y * y) + self.cells.as_ref().map_or(0.0, |c| c.potential(x, y))
    }

    /// Kinetic plus potential energy; the magnetic force does no work.
    pub fn energy(&self, s: &ClassicalState) -> f64 {
        0.5 * (s.vx * s.vx + s.vy * s.vy) + self.potential(s.x, s.y)
    }

    /// Canonical angular momentum `x v_y − y v_x + ½Br²`, conserved only
    /// without impurities.
    pub fn angular_momentum(&self, s: &ClassicalState) -> f64 {
        s.x * s.vy - s.y * s.vx + 0.5 * self.b_field * (s.x * s.x + s.y * s.y)
    }

    /// Largest step the integrator accepts.
    pub fn max_step(&self) -> f64 {
        let w = effective_frequency(self.omega0, self.b_field);
        let mut bound = if w > 0.0 { 1.0 / w } else { f64::INFINITY };
        if self.b_field != 0.0 {
            bound = bound.min(TAU / self.b_field.abs());
        }
        0.01 * bound
    }

    /// Step small enough to resolve bump crossings at energy `E`, capped by
    /// [`Self::max_step`].
    pub fn suggested_step(&self, energy: f64) -> f64 {
        let mut dt = self.max_step();
        if let Some(c) = &self.cells {
            let sigma = c.inv_sigma2.sqrt().recip();
            let v = (2.0 * energy.max(0.0)).sqrt().max(1e-12);
            dt = dt.min(0.04 * sigma / v);
        }
        dt
    }

    /// Generator of the linear part (oscillator plus Lorentz force).
    fn linear_generator(&self) -> Matrix4<f64> {
        let w2 = self.omega0 * self.omega0;
        let b = self.b_field;
        Matrix4::new(
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0, //
            -w2, 0.0, 0.0, b, //
            0.0, -w2, -b, 0.0,
        )
    }
}

// Fourth-order triple jump built from the second-order splitting.
const YOSHIDA_OUTER: f64 = 1.351_207_191_959_657_8;
const YOSHIDA_INNER: f64 = -1.702_414_383_919_315_3;

/// Symmetric splitting integrator.
///
/// The linear motion (confinement plus Lorentz force, including the exact
/// rotation of the velocity by the cyclotron angle) is propagated exactly
/// with a precomputed matrix exponential; impurity forces enter as kicks.
/// Three second-order kick–flow–kick stages are composed into a
/// fourth-order time-symmetric step. Without impurities every step is the
/// exact linear flow.
#[derive(Debug, Clone)]
pub struct Integrator {
    system: ClassicalSystem,
    dt: f64,
    outer: Matrix4<f64>,
    inner: Matrix4<f64>,
}

impl Integrator {
    pub fn new(system: ClassicalSystem, dt: f64) -> Result<Self, ClassicalError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ClassicalError::BadTime);
        }
        let max = system.max_step();
        if dt > max * (1.0 + 1e-12) {
            return Err(ClassicalError::StepTooLarge { dt, max });
        }
        let g = system.linear_generator();
        Ok(Self {
            outer: (g * (YOSHIDA_OUTER * dt)).exp(),
            inner: (g * (YOSHIDA_INNER * dt)).exp(),
            system,
            dt,
        })
    }

    pub fn system(&self) -> &ClassicalSystem {
        &self.system
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn kick(&self, v: &mut Vector4<f64>, tau: f64) {
        if let Some(c) = &self.system.cells {
            let (fx, fy) = c.force(v[0], v[1]);
            v[2] += tau * fx;
            v[3] += tau * fy;
        }
    }

    fn stage_sequence(&self, v: &mut Vector4<f64>, h: f64, outer: &Matrix4<f64>, inner: &Matrix4<f64>) {
        let (w1, w0) = (YOSHIDA_OUTER * h, YOSHIDA_INNER * h);
        self.kick(v, 0.5 * w1);
        *v = outer * *v;
        self.kick(v, 0.5 * (w1 + w0));
        *v = inner * *v;
        self.kick(v, 0.5 * (w0 + w1));
        *v = outer * *v;
        self.kick(v, 0.5 * w1);
    }

    /// One full step of size `dt`.
    pub fn step(&self, s: &ClassicalState) -> ClassicalState {
        let mut v = s.to_vec();
        self.stage_sequence(&mut v, self.dt, &self.outer, &self.inner);
        ClassicalState::from_vec(&v)
    }

    /// One step of arbitrary size `h` (used to land on section crossings).
    pub fn advance(&self, s: &ClassicalState, h: f64) -> ClassicalState {
        if h == 0.0 {
            return *s;
        }
        let g = self.system.linear_generator();
        let outer = (g * (YOSHIDA_OUTER * h)).exp();
        let inner = (g * (YOSHIDA_INNER * h)).exp();
        let mut v = s.to_vec();
        self.stage_sequence(&mut v, h, &outer, &inner);
        ClassicalState::from_vec(&v)
    }

    /// Integrates to `total_time` (rounded up to whole steps), keeping every
    /// `record_every`-th state. Fails if the relative energy drift ever
    /// exceeds `energy_tolerance`.
    pub fn run(
        &self,
        start: ClassicalState,
        total_time: f64,
        record_every: usize,
        energy_tolerance: f64,
    ) -> Result<Trajectory, ClassicalError> {
        if !(total_time > 0.0 && total_time.is_finite()) || record_every == 0 {
            return Err(ClassicalError::BadTime);
        }
        let steps = (total_time / self.dt).ceil() as usize;
        let e0 = self.system.energy(&start);
        let scale = e0.abs().max(f64::MIN_POSITIVE);
        let mut times = Vec::with_capacity(steps / record_every + 2);
        let mut states = Vec::with_capacity(steps / record_every + 2);
        times.push(0.0);
        states.push(start);
        let mut s = start;
        let mut drift: f64 = 0.0;
        for k in 1..=steps {
            s = self.step(&s);
            let d = ((self.system.energy(&s) - e0) / scale).abs();
            drift = drift.max(d);
            if !(d <= energy_tolerance) {
                return Err(ClassicalError::EnergyDrift {
                    drift: d,
                    tolerance: energy_tolerance,
                });
            }
            if k % record_every == 0 || k == steps {
                times.push(k as f64 * self.dt);
                states.push(s);
            }
        }
        Ok(Trajectory {
            dt: self.dt,
            times,
            states,
            max_energy_drift: drift,
        })
    }

    /// Integrates many initial conditions independently.
    pub fn run_ensemble(
        &self,
        starts: &[ClassicalState],
        total_time: f64,
        record_every: usize,
        energy_tolerance: f64,
    ) -> Vec<Result<Trajectory, ClassicalError>> {
        par::map_slice(starts, |s| self.run(*s, total_time, record_every, energy_tolerance))
    }

    /// Finds `h ∈ [0, span]` where `g(advance(s, h))` changes sign, by
    /// bisection on whole integrator steps.
    fn refine_root(&self, s: &ClassicalState, span: f64, g: impl Fn(&ClassicalState) -> f64) -> (f64, ClassicalState) {
        let (mut lo, mut hi) = (0.0, span);
        let g_lo = g(s);
        let mut best = *s;
        let mut best_h = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let st = self.advance(s, mid);
            let gm = g(&st);
            best = st;
            best_h = mid;
            if gm == 0.0 || hi - lo <= 1e-15 * span.max(1e-300) {
                break;
            }
            if (gm < 0.0) == (g_lo < 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (best_h, best)
    }

    /// Walks the whole steps between two recorded samples, returning the
    /// step that brackets a sign change of `g` (from negative to
    /// non-negative when `rising`, positive to non-positive otherwise).
    fn scan_interval(
        &self,
        start: &ClassicalState,
        t0: f64,
        t1: f64,
        rising: bool,
        g: &impl Fn(&ClassicalState) -> f64,
        mut on_root: impl FnMut(f64, ClassicalState),
    ) {
        let n = ((t1 - t0) / self.dt).round().max(1.0) as usize;
        let h = (t1 - t0) / n as f64;
        let mut s = *start;
        for k in 0..n {
            let next = if (h - self.dt).abs() <= 1e-12 * self.dt {
                self.step(&s)
            } else {
                self.advance(&s, h)
            };
            let (a, b) = (g(&s), g(&next));
            let crosses = if rising { a < 0.0 && b >= 0.0 } else { a > 0.0 && b <= 0.0 };
            if crosses {
                let (dh, root) = self.refine_root(&s, h, g);
                on_root(t0 + k as f64 * h + dh, root);
            }
            s = next;
        }
    }
}

/// Recorded samples of one integration.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<ClassicalState>,
    /// Largest `|E(t) − E(0)| / |E(0)|` over every step.
    pub max_energy_drift: f64,
}

impl Trajectory {
    /// Times at which `r` reaches a local maximum, refined to integrator
    /// precision.
    pub fn apocenter_times(&self, integrator: &Integrator) -> Vec<f64> {
        // d(r²)/dt changes from positive to negative at an apocenter.
        let g = |s: &ClassicalState| s.x * s.vx + s.y * s.vy;
        let mut out = Vec::new();
        for w in 0..self.states.len().saturating_sub(1) {
            integrator.scan_interval(&self.states[w], self.times[w], self.times[w + 1], false, &g, |t, _| out.push(t));
        }
        out
    }
}

/// Integrates one initial condition for `total_time`.
///
/// The default tolerance on the relative energy drift is `1e-8` without
/// impurities and `1e-6` with them.
pub fn integrate_trajectory(
    start: ClassicalState,
    system: &ClassicalSystem,
    dt: f64,
    total_time: f64,
) -> Result<Trajectory, ClassicalError> {
    let tol = if system.has_bumps() { 1e-6 } else { 1e-8 };
    Integrator::new(system.clone(), dt)?.run(start, total_time, 1, tol)
}

/// One crossing of the section `y = 0` with `v_y > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionPoint {
    pub time: f64,
    pub x: f64,
    pub vx: f64,
    /// Residual `y` at the located crossing.
    pub y: f64,
    pub vy: f64,
}

/// Surface of section `y = 0`, `v_y > 0`, one list per trajectory.
///
/// Crossings are bracketed on whole integrator steps and then located by
/// bisection on a partial step, so each point is an actual integrator
/// state with `|y|` at rounding level.
pub fn poincare_section(integrator: &Integrator, trajectories: &[Trajectory]) -> Vec<Vec<SectionPoint>> {
    par::map_slice(trajectories, |traj| {
        let g = |s: &ClassicalState| s.y;
        let mut out = Vec::new();
        for w in 0..traj.states.len().saturating_sub(1) {
            integrator.scan_interval(&traj.states[w], traj.times[w], traj.times[w + 1], true, &g, |t, s| {
                if s.vy > 0.0 {
                    out.push(SectionPoint {
                        time: t,
                        x: s.x,
                        vx: s.vx,
                        y: s.y,
                        vy: s.vy,
                    })
                }
            });
        }
        out
    })
}
