//! Experiment configuration files.
//!
//! A config is a TOML document. Every key has a default except `seed`;
//! unknown keys are rejected and errors carry the path of the offending key.

use std::path::PathBuf;

use scarlab::classical::{resonance_field, Resonance};
use scarlab::eigensolver::{default_epsilon_schedule, suggested_half_extent, SolverConfig};
use scarlab::grid::make_grid;
use scarlab::potential::{
    fwhm_to_sigma, sample_bumps, BumpSet, ConfinementParams, DEFAULT_BUMP_AMPLITUDE, DEFAULT_BUMP_DENSITY,
    DEFAULT_BUMP_FWHM, DEFAULT_OMEGA0,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("seed: required (set `seed` in the config or pass --seed)")]
    MissingSeed,
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub omega0: f64,
    /// Magnetic field; ignored when `resonance` is set.
    pub b: Option<f64>,
    /// `[v_theta, v_r]`: put the field exactly on this resonance.
    pub resonance: Option<[u32; 2]>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            omega0: DEFAULT_OMEGA0,
            b: None,
            resonance: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub points: usize,
    /// Half-width of the square domain; derived from the level count when absent.
    pub half_extent: Option<f64>,
    /// Domain size in units of the classical radius of the highest level.
    pub margin: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            points: 256,
            half_extent: None,
            margin: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BumpSection {
    pub enabled: bool,
    pub amplitude: f64,
    pub fwhm: f64,
    /// Bumps per unit area.
    pub density: f64,
    /// Half-width of the square holding the bumps; defaults to the domain
    /// half-width less ten bump widths.
    pub region: Option<f64>,
    /// Placement seed; defaults to the experiment seed.
    pub seed: Option<u64>,
    /// Explicit centers, used instead of random placement.
    pub positions: Option<Vec<[f64; 2]>>,
}

impl Default for BumpSection {
    fn default() -> Self {
        Self {
            enabled: true,
            amplitude: DEFAULT_BUMP_AMPLITUDE,
            fwhm: DEFAULT_BUMP_FWHM,
            density: DEFAULT_BUMP_DENSITY,
            region: None,
            seed: None,
            positions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub n_states: usize,
    pub n_extra: Option<usize>,
    pub epsilon_schedule: Option<Vec<f64>>,
    pub convergence_tol: f64,
    pub residual_tol: f64,
    pub max_sweeps: usize,
    pub refine: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            n_states: 20,
            n_extra: None,
            epsilon_schedule: None,
            convergence_tol: 1e-6,
            residual_tol: 1e-4,
            max_sweeps: 2000,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DosMode {
    /// Closed-form unperturbed levels.
    Analytic,
    /// Energies of the solved spectrum in the output directory.
    Spectrum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DosSection {
    pub mode: DosMode,
    /// Explicit field list; otherwise `b_min..=b_max` in steps of `b_step`.
    pub b_list: Option<Vec<f64>>,
    pub b_min: f64,
    pub b_max: f64,
    pub b_step: f64,
    pub e_max: f64,
    pub window: f64,
    /// Energy sampling step; defaults to the window.
    pub e_step: Option<f64>,
    /// Field step of the ridge profile.
    pub ridge_step: f64,
}

impl Default for DosSection {
    fn default() -> Self {
        Self {
            mode: DosMode::Analytic,
            b_list: None,
            b_min: 0.0,
            b_max: 2.0,
            b_step: 0.02,
            e_max: 4.0,
            window: 0.001,
            e_step: None,
            ridge_step: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScarSection {
    pub resonances: Vec<[u32; 2]>,
    pub tube_width: f64,
    pub threshold: f64,
    /// Score only the highest this many states; all states when absent.
    pub top: Option<usize>,
}

impl Default for ScarSection {
    fn default() -> Self {
        Self {
            resonances: vec![[1, 3]],
            tube_width: DEFAULT_BUMP_FWHM,
            threshold: 2.0,
            top: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PinningSection {
    pub theta_points: usize,
    pub prominence: f64,
    /// State to analyze; defaults to the best-scarred state for `resonance`.
    pub state: Option<usize>,
    pub resonance: [u32; 2],
}

impl Default for PinningSection {
    fn default() -> Self {
        Self {
            theta_points: 360,
            prominence: 0.2,
            state: None,
            resonance: [1, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassicalSection {
    pub trajectories: usize,
    pub t_max: f64,
    pub energy: f64,
    /// Integrator step; defaults to the system's suggested step.
    pub dt: Option<f64>,
    /// Keep every n-th step in the trajectory output.
    pub record_every: usize,
    pub energy_tolerance: f64,
}

impl Default for ClassicalSection {
    fn default() -> Self {
        Self {
            trajectories: 20,
            t_max: 1000.0,
            energy: 10.0,
            dt: None,
            record_every: 100,
            energy_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResonanceSection {
    pub max_ratio: f64,
    pub max_v_theta: u32,
}

impl Default for ResonanceSection {
    fn default() -> Self {
        Self {
            max_ratio: 10.0,
            max_v_theta: 10,
        }
    }
}

/// The config file as written, with defaults filled in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub grid: GridSection,
    pub bumps: BumpSection,
    pub solver: SolverSection,
    pub dos: DosSection,
    pub scars: ScarSection,
    pub pinning: PinningSection,
    pub classical: ClassicalSection,
    pub resonances: ResonanceSection,
}

/// Parses and validates a config; the seed may still be missing.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::new(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        invalid(if path == "." { "config" } else { &path }, e.into_inner().message().trim().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn resonance(path: &str, pair: [u32; 2]) -> Result<Resonance, ConfigError> {
    Resonance::new(pair[0], pair[1]).map_err(|e| invalid(path, e.to_string()))
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(path, format!("must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.model.omega0.is_finite() && self.model.omega0 >= 0.0) {
            return Err(invalid("model.omega0", "must be non-negative"));
        }
        if let Some(b) = self.model.b {
            if !b.is_finite() {
                return Err(invalid("model.b", "must be finite"));
            }
        }
        if let Some(r) = self.model.resonance {
            resonance("model.resonance", r)?;
            if self.model.b.is_some() {
                return Err(invalid("model.resonance", "set either model.b or model.resonance"));
            }
            positive("model.omega0", self.model.omega0)?;
        }
        if self.grid.points < scarlab::grid::MIN_SAMPLES {
            return Err(invalid("grid.points", format!("must be at least {}", scarlab::grid::MIN_SAMPLES)));
        }
        if let Some(h) = self.grid.half_extent {
            positive("grid.half_extent", h)?;
        }
        positive("grid.margin", self.grid.margin)?;
        if self.bumps.enabled {
            if !self.bumps.amplitude.is_finite() {
                return Err(invalid("bumps.amplitude", "must be finite"));
            }
            positive("bumps.fwhm", self.bumps.fwhm)?;
            positive("bumps.density", self.bumps.density)?;
            if let Some(r) = self.bumps.region {
                positive("bumps.region", r)?;
            }
            if let Some(p) = &self.bumps.positions {
                if p.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(invalid("bumps.positions", "coordinates must be finite"));
                }
            }
        }
        let s = &self.solver;
        if s.n_states == 0 {
            return Err(invalid("solver.n_states", "must be at least 1"));
        }
        if let Some(eps) = &s.epsilon_schedule {
            if eps.is_empty() || eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
                return Err(invalid("solver.epsilon_schedule", "must be a non-empty list of positive steps"));
            }
            if eps.windows(2).any(|w| w[1] > w[0]) {
                return Err(invalid("solver.epsilon_schedule", "must be non-increasing"));
            }
        }
        positive("solver.convergence_tol", s.convergence_tol)?;
        positive("solver.residual_tol", s.residual_tol)?;
        if s.max_sweeps == 0 {
            return Err(invalid("solver.max_sweeps", "must be at least 1"));
        }
        let d = &self.dos;
        positive("dos.window", d.window)?;
        positive("dos.e_max", d.e_max)?;
        positive("dos.ridge_step", d.ridge_step)?;
        if let Some(e) = d.e_step {
            positive("dos.e_step", e)?;
        }
        match &d.b_list {
            Some(list) if list.is_empty() => return Err(invalid("dos.b_list", "must not be empty")),
            Some(list) if list.iter().any(|b| !b.is_finite()) => return Err(invalid("dos.b_list", "must be finite")),
            Some(_) => {}
            None => {
                positive("dos.b_step", d.b_step)?;
                if !(d.b_min.is_finite() && d.b_max.is_finite() && d.b_max >= d.b_min) {
                    return Err(invalid("dos.b_max", "must be finite and not below dos.b_min"));
                }
            }
        }
        for (i, r) in self.scars.resonances.iter().enumerate() {
            resonance(&format!("scars.resonances[{i}]"), *r)?;
        }
        positive("scars.tube_width", self.scars.tube_width)?;
        if !(self.scars.threshold >= 0.0) {
            return Err(invalid("scars.threshold", "must be non-negative"));
        }
        if self.pinning.theta_points < 3 {
            return Err(invalid("pinning.theta_points", "must be at least 3"));
        }
        if !(self.pinning.prominence >= 0.0) {
            return Err(invalid("pinning.prominence", "must be non-negative"));
        }
        resonance("pinning.resonance", self.pinning.resonance)?;
        let c = &self.classical;
        positive("classical.t_max", c.t_max)?;
        positive("classical.energy", c.energy)?;
        positive("classical.energy_tolerance", c.energy_tolerance)?;
        if let Some(dt) = c.dt {
            positive("classical.dt", dt)?;
        }
        if c.record_every == 0 {
            return Err(invalid("classical.record_every", "must be at least 1"));
        }
        if !(self.resonances.max_ratio > 1.0) {
            return Err(invalid("resonances.max_ratio", "must exceed 1"));
        }
        if self.resonances.max_v_theta == 0 {
            return Err(invalid("resonances.max_v_theta", "must be at least 1"));
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or(ConfigError::MissingSeed)
    }

    /// SHA-256 of the canonical serialization, in hex.
    ///
    /// The output directory is left out.
    pub fn hash(&self) -> String {
        let canonical = Self { out: None, ..self.clone() };
        let text = toml::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn b_field(&self) -> f64 {
        match self.model.resonance {
            Some([vt, vr]) => resonance_field(&Resonance::new(vt, vr).expect("validated"), self.model.omega0),
            None => self.model.b.unwrap_or(0.0),
        }
    }

    pub fn confinement(&self) -> Result<ConfinementParams, ConfigError> {
        ConfinementParams::new(self.model.omega0, self.b_field()).map_err(|e| invalid("model", e.to_string()))
    }

    pub fn bump_sigma(&self) -> f64 {
        fwhm_to_sigma(self.bumps.fwhm).expect("validated")
    }

    /// Mean potential shift of the random bumps (zero when disabled or explicit).
    fn mean_bump_shift(&self) -> f64 {
        if !self.bumps.enabled || self.bumps.positions.is_some() {
            return 0.0;
        }
        let s = self.bump_sigma();
        self.bumps.amplitude * 2.0 * std::f64::consts::PI * s * s * self.bumps.density
    }

    pub fn half_extent(&self) -> Result<f64, ConfigError> {
        if let Some(h) = self.grid.half_extent {
            return Ok(h);
        }
        let params = self.confinement()?;
        if params.omega0() == 0.0 {
            return Err(invalid("grid.half_extent", "required when model.omega0 is 0"));
        }
        let block = self.solver_stub()?.block_size();
        Ok(suggested_half_extent(block, &params, self.mean_bump_shift(), self.grid.margin))
    }

    fn solver_stub(&self) -> Result<SolverConfig, ConfigError> {
        let mut cfg = SolverConfig::new(
            self.solver.n_states,
            make_grid(scarlab::grid::MIN_SAMPLES, scarlab::grid::MIN_SAMPLES, 1.0).expect("valid grid"),
            self.confinement()?,
            self.seed()?,
        );
        cfg.n_extra = self.solver.n_extra;
        Ok(cfg)
    }

    pub fn bumps(&self) -> Result<BumpSet, ConfigError> {
        if !self.bumps.enabled {
            return Ok(BumpSet::empty());
        }
        let sigma = self.bump_sigma();
        let b = &self.bumps;
        if let Some(p) = &b.positions {
            return BumpSet::explicit(p.clone(), b.amplitude, sigma).map_err(|e| invalid("bumps.positions", e.to_string()));
        }
        let region = match b.region {
            Some(r) => r,
            None => {
                let r = self.half_extent()? - 10.0 * sigma;
                if !(r > 0.0) {
                    return Err(invalid("bumps.region", "domain too small for the default bump region"));
                }
                r
            }
        };
        let seed = match b.seed {
            Some(s) => s,
            None => self.seed()?,
        };
        sample_bumps(seed, b.density, region, b.amplitude, sigma).map_err(|e| invalid("bumps", e.to_string()))
    }

    pub fn solver_config(&self) -> Result<SolverConfig, ConfigError> {
        let mut cfg = self.solver_stub()?;
        let h = self.half_extent()?;
        cfg.grid = make_grid(self.grid.points, self.grid.points, h).map_err(|e| invalid("grid", e.to_string()))?;
        cfg.bumps = self.bumps()?;
        cfg.epsilon_schedule = self.solver.epsilon_schedule.clone().unwrap_or_else(default_epsilon_schedule);
        cfg.convergence_tol = self.solver.convergence_tol;
        cfg.residual_tol = self.solver.residual_tol;
        cfg.max_sweeps = self.solver.max_sweeps;
        cfg.refine = self.solver.refine;
        cfg.validate().map_err(|e| invalid("solver", e.to_string()))?;
        Ok(cfg)
    }

    pub fn dos_fields(&self) -> Vec<f64> {
        let d = &self.dos;
        match &d.b_list {
            Some(list) => list.clone(),
            None => field_range(d.b_min, d.b_max, d.b_step),
        }
    }
}

/// `lo, lo + step, …` up to `hi` inclusive (within rounding).
pub fn field_range(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    (0..count).map(|i| lo + i as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults_but_needs_seed() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.model.omega0, 1.0);
        assert_eq!(cfg.bumps.amplitude, 4.0);
        assert_eq!(cfg.bumps.density, 2.0);
        assert_eq!(cfg.dos.window, 0.001);
        assert!(matches!(cfg.seed(), Err(ConfigError::MissingSeed)));
    }

    #[test]
    fn fwhm_default_gives_sigma() {
        let cfg = parse_config("seed = 1\n[bumps]\nfwhm = 0.235\n").unwrap();
        assert!((cfg.bump_sigma() - 0.09979).abs() < 1e-5);
    }

    #[test]
    fn errors_name_the_key() {
        let e = parse_config("seed = 1\n[bumps]\ndensity = -1.0\n").unwrap_err().to_string();
        assert!(e.contains("bumps.density"), "{e}");
        let e = parse_config("seed = 1\n[grid]\npoints = \"many\"\n").unwrap_err().to_string();
        assert!(e.contains("grid.points"), "{e}");
        let e = parse_config("seed = 1\n[solver]\nn_state = 3\n").unwrap_err().to_string();
        assert!(e.contains("solver") && e.contains("n_state"), "{e}");
        let e = parse_config("[scars]\nresonances = [[2, 4]]\n").unwrap_err().to_string();
        assert!(e.contains("scars.resonances[0]"), "{e}");
    }

    #[test]
    fn resonance_sets_field() {
        let cfg = parse_config("seed = 1\n[model]\nresonance = [1, 3]\n").unwrap();
        assert!((cfg.b_field() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(parse_config("[model]\nresonance = [1, 3]\nb = 0.5\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = parse_config("seed = 1\n").unwrap();
        let b = parse_config("seed = 2\n").unwrap();
        assert_eq!(a.hash(), parse_config("seed = 1\n").unwrap().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn field_range_is_inclusive() {
        let r = field_range(0.0, 2.0, 0.001);
        assert_eq!(r.len(), 2001);
        assert!((r[2000] - 2.0).abs() < 1e-12);
    }
}
