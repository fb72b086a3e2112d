//! One function per subcommand. Each reads the validated config, writes its
//! artifacts into the output directory and reports an exit status.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use scarlab::analysis::{
    census_fraction, dos, dos_sweep, find_maxima, linear_grid, pinning_curve, ridge_profile, score_states, theta_grid,
    DosSource, ScarScore,
};
use scarlab::classical::{
    periodic_orbit, poincare_section, resonance_field, ClassicalState, ClassicalSystem, Integrator, OrbitDirection,
    Resonance, Trajectory,
};
use scarlab::eigensolver::{solve_with, SolverConfig, Spectrum};
use scarlab::potential::ConfinementParams;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{field_range, ConfigError, DosMode, ExperimentConfig};
use crate::csv::{format_f64, CsvError, Table};
use crate::wf2d::{meta_path, write_with_meta, Wf2d, Wf2dError};

pub const SPECTRUM_FILE: &str = "spectrum.wf2d";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Wf2d(#[from] Wf2dError),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("output directory {0} does not exist")]
    MissingOutDir(PathBuf),
    #[error("missing input {path}: {hint}")]
    MissingInput { path: PathBuf, hint: String },
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Compute(String),
}

fn compute<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Compute(e.to_string())
}

/// Exit status of a finished command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Artifacts written but the solver did not converge.
    NotConverged,
}

/// Resolved inputs shared by every command.
pub struct Context<'a> {
    pub config: &'a ExperimentConfig,
    pub out: PathBuf,
    pub hash: String,
    /// Prints progress to stderr when set.
    pub verbose: bool,
}

impl<'a> Context<'a> {
    pub fn new(config: &'a ExperimentConfig, out: PathBuf) -> Result<Self, CliError> {
        config.seed()?;
        if !out.is_dir() {
            return Err(CliError::MissingOutDir(out));
        }
        Ok(Self {
            config,
            out,
            hash: config.hash(),
            verbose: false,
        })
    }

    fn header(&self, command: &str) -> Vec<(&'static str, String)> {
        vec![
            ("command", command.to_string()),
            ("config_hash", self.hash.clone()),
            ("seed", self.config.seed.expect("checked").to_string()),
        ]
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Hash of the sections that determine a spectrum.
pub fn physics_hash(config: &ExperimentConfig) -> String {
    #[derive(serde::Serialize)]
    struct Physics<'a> {
        seed: Option<u64>,
        model: &'a crate::config::ModelSection,
        grid: &'a crate::config::GridSection,
        bumps: &'a crate::config::BumpSection,
        solver: &'a crate::config::SolverSection,
    }
    let text = toml::to_string(&Physics {
        seed: config.seed,
        model: &config.model,
        grid: &config.grid,
        bumps: &config.bumps,
        solver: &config.solver,
    })
    .expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn cmd_solve(ctx: &Context) -> Result<Status, CliError> {
    let cfg = ctx.config.solver_config()?;
    ctx.log(format!(
        "solving {} states on {}x{} (half extent {:.4}), B = {}, {} bumps",
        cfg.n_states,
        cfg.grid.nx(),
        cfg.grid.ny(),
        cfg.grid.x_max(),
        cfg.confinement.b_field(),
        cfg.bumps.len()
    ));
    let spectrum = solve_with(&cfg, |info| {
        if info.sweep % 10 == 0 {
            ctx.log(format!(
                "sweep {} dE {:.2e} residual {:.2e}",
                info.sweep,
                info.max_energy_change,
                info.max_relative_residual.unwrap_or(f64::NAN)
            ));
        }
    })
    .map_err(compute)?;
    let converged = spectrum.is_converged();

    let mut header = ctx.header("solve");
    header.push(("status", if converged { "converged" } else { "NOT CONVERGED" }.to_string()));
    header.push(("sweeps", spectrum.sweeps.to_string()));
    header.push(("units", "energy in units of hbar*omega0".to_string()));

    let data = Wf2d::new(
        cfg.confinement.omega0(),
        cfg.confinement.b_field(),
        spectrum.energies.clone(),
        spectrum.states.clone(),
    )?;
    let mut meta = header.clone();
    meta.push(("physics_hash", physics_hash(ctx.config)));
    write_with_meta(&data, &ctx.path(SPECTRUM_FILE), &meta)?;

    let mut table = Table::new(&header, &["index", "energy", "converged", "residual"]);
    for i in 0..spectrum.len() {
        table.row(&[
            i.into(),
            spectrum.energies[i].into(),
            spectrum.converged[i].into(),
            spectrum.residuals[i].into(),
        ]);
    }
    table.write(&ctx.path("energies.csv"))?;

    let mut bumps = Table::new(
        &[
            ("command", "solve".to_string()),
            ("config_hash", ctx.hash.clone()),
            ("seed", ctx.config.seed.expect("checked").to_string()),
            ("amplitude", format_f64(cfg.bumps.amplitude())),
            ("sigma", format_f64(cfg.bumps.sigma())),
        ],
        &["x", "y"],
    );
    for p in cfg.bumps.positions() {
        bumps.row(&[p[0].into(), p[1].into()]);
    }
    bumps.write(&ctx.path("bumps.csv"))?;

    if converged {
        Ok(Status::Ok)
    } else {
        ctx.log(format!("not converged after {} sweeps", spectrum.sweeps));
        Ok(Status::NotConverged)
    }
}

/// Reads the solved spectrum of this experiment from the output directory.
pub fn load_spectrum(ctx: &Context) -> Result<Spectrum, CliError> {
    let path = ctx.path(SPECTRUM_FILE);
    if !path.is_file() {
        return Err(CliError::MissingInput {
            path,
            hint: "run `solve` first".into(),
        });
    }
    let data = Wf2d::read(&path)?;
    let meta = std::fs::read_to_string(meta_path(&path)).unwrap_or_default();
    let expected = physics_hash(ctx.config);
    let recorded = meta
        .lines()
        .find_map(|l| l.strip_prefix("physics_hash = "))
        .map(str::to_string);
    if recorded.as_deref() != Some(expected.as_str()) {
        return Err(CliError::Mismatch(format!(
            "{} was not produced by this config's model, grid, bumps and solver settings",
            path.display()
        )));
    }
    let params = ConfinementParams::new(data.omega0, data.b_field).map_err(compute)?;
    let n = data.energies.len();
    let mut config = SolverConfig::new(n, data.grid, params, ctx.config.seed()?);
    config.bumps = ctx.config.bumps()?;
    Ok(Spectrum {
        energies: data.energies,
        states: data.states,
        residuals: vec![f64::NAN; n],
        converged: vec![true; n],
        sweeps: 0,
        config,
    })
}

pub fn cmd_dos(ctx: &Context) -> Result<Status, CliError> {
    let d = &ctx.config.dos;
    let step = d.e_step.unwrap_or(d.window);
    let count = (d.e_max / step).ceil() as usize + 1;
    let grid = linear_grid(0.0, step * (count - 1) as f64, count);
    let mut header = ctx.header("dos");
    header.push(("window", format_f64(d.window)));
    header.push(("units", "energy in units of hbar*omega0; dos in states per unit energy".to_string()));

    let curves = match d.mode {
        DosMode::Analytic => {
            header.push(("source", "analytic".to_string()));
            dos_sweep(&ctx.config.dos_fields(), d.e_max, DosSource::Analytic, d.window, &grid).map_err(compute)?
        }
        DosMode::Spectrum => {
            let spectrum = load_spectrum(ctx)?;
            header.push(("source", SPECTRUM_FILE.to_string()));
            let e: Vec<f64> = spectrum.energies.iter().cloned().filter(|&x| x <= d.e_max).collect();
            let mut c = dos(&e, d.window, &grid).map_err(compute)?;
            c.b_field = Some(spectrum.b_field());
            vec![c]
        }
    };
    let mut table = Table::new(&header, &["b", "energy", "dos"]);
    for c in &curves {
        let b = c.b_field.unwrap_or(f64::NAN);
        for (e, v) in c.energy_grid.iter().zip(&c.values) {
            table.row(&[b.into(), (*e).into(), (*v).into()]);
        }
    }
    table.write(&ctx.path("dos.csv"))?;

    if d.mode == DosMode::Analytic {
        let fields = field_range(d.b_min, d.b_max, d.ridge_step);
        let ridge = ridge_profile(&fields, d.e_max, d.window).map_err(compute)?;
        let mut header = ctx.header("dos");
        header.push(("window", format_f64(d.window)));
        header.push(("quantity", "largest dos over [0, e_max] at each field".to_string()));
        let mut table = Table::new(&header, &["b", "max_dos"]);
        for (b, v) in fields.iter().zip(&ridge) {
            table.row(&[(*b).into(), (*v).into()]);
        }
        table.write(&ctx.path("ridge.csv"))?;
    }
    Ok(Status::Ok)
}

fn resonance(pair: [u32; 2]) -> Resonance {
    Resonance::new(pair[0], pair[1]).expect("validated")
}

fn direction_sign(d: OrbitDirection) -> i64 {
    if d.sign() > 0.0 {
        1
    } else {
        -1
    }
}

fn top_range(len: usize, top: Option<usize>) -> std::ops::Range<usize> {
    match top {
        Some(t) => len.saturating_sub(t)..len,
        None => 0..len,
    }
}

pub fn cmd_scars(ctx: &Context) -> Result<Status, CliError> {
    let spectrum = load_spectrum(ctx)?;
    let s = &ctx.config.scars;
    let range = top_range(spectrum.len(), s.top);
    let mut header = ctx.header("scars");
    header.push(("tube_width", format_f64(s.tube_width)));
    header.push(("threshold", format_f64(s.threshold)));
    header.push(("states", format!("{}..{}", range.start, range.end)));
    let mut scores_table = Table::new(
        &header,
        &["v_theta", "v_r", "state", "energy", "direction", "orientation", "score", "scarred"],
    );
    let mut census = Table::new(&header, &["v_theta", "v_r", "scored", "fraction"]);
    for pair in &s.resonances {
        let res = resonance(*pair);
        let scores = score_states(&spectrum, &res, s.tube_width, range.clone()).map_err(compute)?;
        for sc in &scores {
            scores_table.row(&[
                (pair[0] as usize).into(),
                (pair[1] as usize).into(),
                sc.state_index.into(),
                spectrum.energies[sc.state_index].into(),
                direction_sign(sc.direction).into(),
                sc.orientation.into(),
                sc.score.into(),
                (sc.score >= s.threshold).into(),
            ]);
        }
        let fraction = census_fraction(&scores, s.threshold);
        ctx.log(format!("({}, {}): {:.1}% of {} states scarred", pair[0], pair[1], 100.0 * fraction, scores.len()));
        census.row(&[
            (pair[0] as usize).into(),
            (pair[1] as usize).into(),
            scores.len().into(),
            fraction.into(),
        ]);
    }
    scores_table.write(&ctx.path("scars.csv"))?;
    census.write(&ctx.path("census.csv"))?;
    Ok(Status::Ok)
}

/// State with the highest score against `res` over the whole spectrum.
pub fn best_scarred(spectrum: &Spectrum, res: &Resonance, tube_width: f64) -> Result<ScarScore, CliError> {
    let scores = score_states(spectrum, res, tube_width, 0..spectrum.len()).map_err(compute)?;
    scores
        .into_iter()
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .ok_or_else(|| CliError::Compute("empty spectrum".into()))
}

pub fn cmd_pinning(ctx: &Context) -> Result<Status, CliError> {
    let spectrum = load_spectrum(ctx)?;
    let p = &ctx.config.pinning;
    let bumps = &spectrum.config.bumps;
    if bumps.is_empty() {
        return Err(CliError::Mismatch("pinning needs impurities; the config has none".into()));
    }
    let (state, score) = match p.state {
        Some(i) if i < spectrum.len() => (i, None),
        Some(i) => return Err(CliError::Mismatch(format!("pinning.state {i} beyond the {} solved states", spectrum.len()))),
        None => {
            let best = best_scarred(&spectrum, &resonance(p.resonance), ctx.config.scars.tube_width)?;
            (best.state_index, Some(best))
        }
    };
    let theta = theta_grid(p.theta_points);
    let curve = pinning_curve(&spectrum.states[state], bumps, &theta);
    let maxima = find_maxima(&curve.overlaps, p.prominence).map_err(compute)?;

    let mut header = ctx.header("pinning");
    header.push(("state", state.to_string()));
    header.push(("energy", format_f64(spectrum.energies[state])));
    if let Some(s) = &score {
        header.push(("scar_score", format_f64(s.score)));
        header.push(("orientation", format_f64(s.orientation)));
    }
    header.push(("prominence", format_f64(p.prominence)));
    header.push(("maxima", maxima.len().to_string()));
    let mut table = Table::new(&header, &["theta", "overlap", "maximum"]);
    for (i, (t, v)) in curve.theta_grid.iter().zip(&curve.overlaps).enumerate() {
        table.row(&[(*t).into(), (*v).into(), maxima.contains(&i).into()]);
    }
    table.write(&ctx.path("pinning.csv"))?;
    ctx.log(format!("state {state}: {} maxima at prominence {}", maxima.len(), p.prominence));
    Ok(Status::Ok)
}

/// Random starts at the configured energy: positions uniform over the
/// allowed region, velocity direction uniform.
pub fn initial_conditions(system: &ClassicalSystem, energy: f64, count: usize, seed: u64) -> Vec<ClassicalState> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let w = system.omega0().max(1e-3);
    let r_max = (2.0 * energy).sqrt() / w;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = r_max * (2.0 * rng.random::<f64>() - 1.0);
        let y = r_max * (2.0 * rng.random::<f64>() - 1.0);
        let kinetic = energy - system.potential(x, y);
        if kinetic <= 0.0 {
            continue;
        }
        let a = 2.0 * PI * rng.random::<f64>();
        let v = (2.0 * kinetic).sqrt();
        out.push(ClassicalState {
            x,
            y,
            vx: v * a.cos(),
            vy: v * a.sin(),
        });
    }
    out
}

fn ensemble(ctx: &Context) -> Result<(Integrator, Vec<Trajectory>), CliError> {
    let c = &ctx.config.classical;
    let bumps = ctx.config.bumps()?;
    let system = ClassicalSystem::new(ctx.config.model.omega0, ctx.config.b_field(), &bumps);
    let dt = c.dt.unwrap_or_else(|| system.suggested_step(c.energy));
    let integrator = Integrator::new(system.clone(), dt).map_err(compute)?;
    let starts = initial_conditions(&system, c.energy, c.trajectories, ctx.config.seed()?);
    ctx.log(format!("{} trajectories, dt {dt:.3e}, t_max {}", starts.len(), c.t_max));
    let runs = integrator.run_ensemble(&starts, c.t_max, c.record_every, c.energy_tolerance);
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>().map_err(compute)?;
    Ok((integrator, runs))
}

pub fn cmd_classical(ctx: &Context) -> Result<Status, CliError> {
    let c = &ctx.config.classical;
    let (integrator, runs) = ensemble(ctx)?;
    let drift = runs.iter().map(|t| t.max_energy_drift).fold(0.0, f64::max);
    let mut header = ctx.header("classical");
    header.push(("energy", format_f64(c.energy)));
    header.push(("dt", format_f64(integrator.dt())));
    header.push(("max_energy_drift", format_f64(drift)));
    let mut table = Table::new(&header, &["trajectory", "time", "x", "y", "vx", "vy"]);
    for (k, t) in runs.iter().enumerate() {
        for (time, s) in t.times.iter().zip(&t.states) {
            table.row(&[k.into(), (*time).into(), s.x.into(), s.y.into(), s.vx.into(), s.vy.into()]);
        }
    }
    table.write(&ctx.path("classical.csv"))?;

    // Periodic orbits of the scored resonances at the configured energy,
    // when the field sits on them.
    let omega0 = ctx.config.model.omega0;
    let mut header = ctx.header("classical");
    header.push(("energy", format_f64(c.energy)));
    let mut orbits = Table::new(&header, &["v_theta", "v_r", "direction", "index", "x", "y"]);
    for pair in &ctx.config.scars.resonances {
        let res = resonance(*pair);
        if omega0 == 0.0 || (resonance_field(&res, omega0) - ctx.config.b_field()).abs() > 1e-6 {
            continue;
        }
        for dir in OrbitDirection::both() {
            let orbit = periodic_orbit(&res, c.energy, dir, 0.0, 64 * res.v_r() as usize * 8, omega0).map_err(compute)?;
            for (i, p) in orbit.points.iter().enumerate() {
                orbits.row(&[
                    (pair[0] as usize).into(),
                    (pair[1] as usize).into(),
                    direction_sign(dir).into(),
                    i.into(),
                    p[0].into(),
                    p[1].into(),
                ]);
            }
        }
    }
    orbits.write(&ctx.path("orbits.csv"))?;
    ctx.log(format!("largest relative energy drift {drift:.2e}"));
    Ok(Status::Ok)
}

pub fn cmd_poincare(ctx: &Context) -> Result<Status, CliError> {
    let c = &ctx.config.classical;
    let (integrator, runs) = ensemble(ctx)?;
    let sections = poincare_section(&integrator, &runs);
    let mut header = ctx.header("poincare");
    header.push(("energy", format_f64(c.energy)));
    header.push(("section", "y = 0, vy > 0".to_string()));
    let mut table = Table::new(&header, &["trajectory", "time", "x", "vx"]);
    for (k, pts) in sections.iter().enumerate() {
        for p in pts {
            table.row(&[k.into(), p.time.into(), p.x.into(), p.vx.into()]);
        }
    }
    table.write(&ctx.path("poincare.csv"))?;
    Ok(Status::Ok)
}

pub fn cmd_resonances(ctx: &Context) -> Result<Status, CliError> {
    let r = &ctx.config.resonances;
    let omega0 = ctx.config.model.omega0;
    let mut header = ctx.header("resonances");
    header.push(("omega0", format_f64(omega0)));
    let mut table = Table::new(&header, &["v_theta", "v_r", "ratio", "b_field"]);
    for res in Resonance::enumerate(r.max_ratio, r.max_v_theta) {
        table.row(&[
            (res.v_theta() as usize).into(),
            (res.v_r() as usize).into(),
            res.ratio().into(),
            resonance_field(&res, omega0).into(),
        ]);
    }
    table.write(&ctx.path("resonances.csv"))?;
    Ok(Status::Ok)
}

/// Dispatch by subcommand name.
pub fn run(name: &str, ctx: &Context) -> Result<Status, CliError> {
    match name {
        "solve" => cmd_solve(ctx),
        "dos" => cmd_dos(ctx),
        "scars" => cmd_scars(ctx),
        "pinning" => cmd_pinning(ctx),
        "classical" => cmd_classical(ctx),
        "poincare" => cmd_poincare(ctx),
        "resonances" => cmd_resonances(ctx),
        other => Err(CliError::Compute(format!("unknown command {other}"))),
    }
}
