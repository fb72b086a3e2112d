//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Heavy solves are included;
//! expect the whole suite to take the better part of an hour on one core.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use scarlab::analysis::{
    fd_clusters, find_maxima, lowest_fock_darwin_levels, pinning_curve, ridge_profile, score_states, theta_grid,
};
use scarlab::classical::{
    analytic_orbit, delta_phi, orbit_params, periodic_orbit, poincare_section, resonance_field, ClassicalState,
    ClassicalSystem, Integrator, OrbitDirection, OrbitParams, Resonance,
};
use scarlab::eigensolver::solve_eigenstates;
use scarlab_cli::commands::initial_conditions;
use scarlab_cli::config::{field_range, parse_config};
use scarlab_cli::csv::read_rows;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    outcome(false, detail)
}

fn fock_darwin_oracle() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (label, b) in [("0", 0.0), ("1/sqrt2", FRAC_1_SQRT_2), ("2/sqrt3", 2.0 / 3f64.sqrt())] {
        let text = format!("seed = 1\n[model]\nb = {b:?}\n[grid]\npoints = 256\n[bumps]\nenabled = false\n[solver]\nn_states = 120\n");
        let cfg = parse_config(&text).expect("config").solver_config().expect("solver config");
        let t = Instant::now();
        let s = match solve_eigenstates(&cfg) {
            Ok(s) => s,
            Err(e) => return fail(format!("B = {label}: {e}")),
        };
        let minutes = t.elapsed().as_secs_f64() / 60.0;
        let fd = lowest_fock_darwin_levels(120, b);
        let err = s.energies.iter().zip(&fd).map(|(e, l)| (e - l.energy).abs()).fold(0.0, f64::max);
        let ok = s.is_converged() && s.len() == 120 && err <= 5e-3 && minutes <= 15.0;
        pass &= ok;
        details.push(format!("B={label}: max |dE| {err:.1e}, {minutes:.1} min, converged {}", s.is_converged()));
    }
    outcome(pass, details.join("; "))
}

fn resonance_table() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for res in Resonance::enumerate(10.0, 10) {
        let b = resonance_field(&res, 1.0);
        let lhs = delta_phi(1, 1.0, b) * res.v_r() as f64;
        worst = worst.max((lhs - TAU * res.v_theta() as f64).abs());
        count += 1;
    }
    let b13 = resonance_field(&Resonance::new(1, 3).unwrap(), 1.0);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && (b13 - 0.70711).abs() < 5e-6 && count > 0 && secs < 1.0,
        format!("{count} resonances, worst closure {worst:.1e}, (1,3) -> {b13:.5}, {secs:.3} s"),
    )
}

fn unwrap_angle(prev: f64, raw: f64) -> f64 {
    prev + (raw - prev + PI).rem_euclid(TAU) - PI
}

fn appendix_dynamics() -> Outcome {
    let t = Instant::now();
    let mut rng = Pcg64::seed_from_u64(2024);
    let (mut worst_r, mut worst_phi, mut worst_period): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..50 {
        let b = rng.random_range(-2.0..2.0);
        let a = rng.random_range(0.5..6.0);
        let aspect = rng.random_range(0.1..1.0);
        let dir = if rng.random::<bool>() { OrbitDirection::Positive } else { OrbitDirection::Negative };
        let seed_params = OrbitParams::from_radii(a, a * aspect, dir, 1.0, b);
        let p = match orbit_params(seed_params.energy, seed_params.p_phi, 1.0, b) {
            Ok(p) => p,
            Err(e) => return fail(format!("orbit_params: {e}")),
        };
        let system = ClassicalSystem::unperturbed(1.0, b);
        let integ = Integrator::new(system.clone(), system.max_step()).expect("integrator");
        let span = 10.0 * p.radial_period();
        let traj = match integ.run(p.state(0.0), span, 10, 1e-8) {
            Ok(t) => t,
            Err(e) => return fail(format!("integration: {e}")),
        };
        let mut phi = 0.0;
        for (time, s) in traj.times.iter().zip(&traj.states) {
            let (r, phi_exact) = analytic_orbit(&p, *time);
            phi = unwrap_angle(phi, s.y.atan2(s.x));
            worst_r = worst_r.max((s.x.hypot(s.y) - r).abs());
            worst_phi = worst_phi.max((phi - phi_exact).abs());
        }
        let apo = traj.apocenter_times(&integ);
        if apo.len() < 9 {
            return fail(format!("only {} apocenters found", apo.len()));
        }
        for w in apo.windows(2) {
            worst_period = worst_period.max((w[1] - w[0] - PI / p.omega_tilde).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_r <= 1e-6 && worst_phi <= 1e-6 && worst_period <= 1e-8 && secs < 60.0,
        format!("50 orbits: max |dr| {worst_r:.1e}, max |dphi| {worst_phi:.1e}, max period error {worst_period:.1e}, {secs:.1} s"),
    )
}

fn energy_conservation() -> Outcome {
    let t = Instant::now();
    let cfg = parse_config(
        "seed = 7\n[model]\nresonance = [1, 3]\n[classical]\ntrajectories = 20\nt_max = 1000.0\nenergy = 10.0\nrecord_every = 100\n",
    )
    .expect("config");
    let bumps = cfg.bumps().expect("bumps");
    let c = &cfg.classical;
    let system = ClassicalSystem::new(1.0, cfg.b_field(), &bumps);
    let integ = Integrator::new(system.clone(), system.suggested_step(c.energy)).expect("integrator");
    let starts: Vec<ClassicalState> = initial_conditions(&system, c.energy, c.trajectories, 7);
    let runs: Result<Vec<_>, _> = integ.run_ensemble(&starts, c.t_max, c.record_every, 1e-6).into_iter().collect();
    let runs = match runs {
        Ok(r) => r,
        Err(e) => return fail(format!("integration: {e}")),
    };
    let drift = runs.iter().map(|r| r.max_energy_drift).fold(0.0, f64::max);
    let sections = poincare_section(&integ, &runs);
    let fewest = sections.iter().map(Vec::len).min().unwrap_or(0);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        drift < 1e-6 && sections.len() == 20 && fewest > 0 && secs < 300.0,
        format!(
            "{} bumps, 20 trajectories to T = 1000: max |dE/E| {drift:.1e}, section points per trajectory >= {fewest}, {secs:.0} s",
            bumps.len()
        ),
    )
}

fn scarlab(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_scarlab"))
        .args(args)
        .arg("--quiet")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
    }
}

fn census(dir: &Path) -> Result<(usize, f64), String> {
    let (cols, rows) = read_rows(&dir.join("census.csv")).map_err(|e| e.to_string())?;
    let scored = cols.iter().position(|c| c == "scored").ok_or("census.csv: no scored column")?;
    let fraction = cols.iter().position(|c| c == "fraction").ok_or("census.csv: no fraction column")?;
    let row = rows.first().ok_or("census.csv: empty")?;
    Ok((row[scored].parse().map_err(|_| "bad count")?, row[fraction].parse().map_err(|_| "bad fraction")?))
}

fn energies(dir: &Path) -> Result<Vec<f64>, String> {
    let (cols, rows) = read_rows(&dir.join("energies.csv")).map_err(|e| e.to_string())?;
    let k = cols.iter().position(|c| c == "energy").ok_or("energies.csv: no energy column")?;
    rows.iter().map(|r| r[k].parse::<f64>().map_err(|e| e.to_string())).collect()
}

/// Perturbed and unperturbed runs through the command-line tool on the
/// same grid; returns the perturbed output directory.
fn scarring_census(work: &Path) -> (Outcome, Option<PathBuf>) {
    let t = Instant::now();
    let head = "seed = 7\n[model]\nresonance = [1, 3]\n[solver]\nn_states = 300\n[scars]\ntop = 100\nthreshold = 2.0\n";
    let half = parse_config(head).and_then(|c| c.half_extent()).expect("config");
    let pert = format!("{head}[grid]\npoints = 256\nhalf_extent = {half:?}\n");
    let unpert = format!("{pert}[bumps]\nenabled = false\n");
    let mut fractions = Vec::new();
    for (name, text) in [("perturbed", &pert), ("unperturbed", &unpert)] {
        let dir = work.join(name);
        fs::create_dir_all(&dir).expect("output dir");
        let cfg = dir.join("run.toml");
        fs::write(&cfg, text).expect("config file");
        let args = |cmd: &'static str| [cmd, "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
        if let Err(e) = scarlab(&args("solve")) {
            return (fail(format!("{name} solve: {e}")), None);
        }
        if let Err(e) = scarlab(&args("scars")) {
            return (fail(format!("{name} scars: {e}")), None);
        }
        match census(&dir) {
            Ok(c) => fractions.push(c),
            Err(e) => return (fail(e), None),
        }
    }
    let hours = t.elapsed().as_secs_f64() / 3600.0;
    let (p, u) = (fractions[0], fractions[1]);
    (
        outcome(
            p.1 >= 0.10 && u.1 < p.1 && hours <= 2.0,
            format!(
                "score >= 2 among the top {} states: perturbed {:.0}%, unperturbed {:.0}% (need >= 10% and unperturbed smaller), {:.2} h",
                p.0,
                100.0 * p.1,
                100.0 * u.1,
                hours
            ),
        ),
        Some(work.join("perturbed")),
    )
}

fn single_bump_pinning() -> Outcome {
    let t = Instant::now();
    let res = Resonance::new(1, 3).unwrap();
    let tube = 0.235;
    let n_states = 112;
    // Highest cluster wholly inside the solved range; the bump sits at the
    // apocenter of the positive resonant orbit at that energy.
    let fd = lowest_fock_darwin_levels(n_states + 1, resonance_field(&res, 1.0));
    let top = (0..n_states).rev().find(|&i| fd[i + 1].energy - fd[i].energy > 1e-9).expect("complete cluster");
    let cluster = fd[top].energy;
    let orbit = periodic_orbit(&res, cluster, OrbitDirection::Positive, 0.0, 2048, 1.0).expect("orbit");
    let bump = orbit.points[0];
    let text = format!(
        "seed = 7\n[model]\nresonance = [1, 3]\n[bumps]\npositions = [[{:?}, {:?}]]\n[solver]\nn_states = {n_states}\nresidual_tol = 1e-5\n",
        bump[0], bump[1]
    );
    let cfg = parse_config(&text).expect("config").solver_config().expect("solver config");
    let s = match solve_eigenstates(&cfg) {
        Ok(s) if s.is_converged() => s,
        Ok(_) => return fail("single-bump solve did not converge"),
        Err(e) => return fail(e.to_string()),
    };
    let scores = match score_states(&s, &res, tube, 0..s.len()) {
        Ok(v) => v,
        Err(e) => return fail(e.to_string()),
    };
    let theta = theta_grid(360);
    let step = theta[1];
    let mut found = Vec::new();
    let mut pass = false;
    for sc in scores.iter().filter(|sc| sc.score >= 2.0) {
        let e = s.energies[sc.state_index];
        let o = periodic_orbit(&res, e, sc.direction, sc.orientation, 4096, 1.0).expect("orbit");
        let dist = o.points.iter().map(|q| (q[0] - bump[0]).hypot(q[1] - bump[1])).fold(f64::INFINITY, f64::min);
        if dist > tube {
            continue;
        }
        let curve = pinning_curve(&s.states[sc.state_index], &cfg.bumps, &theta);
        let maxima = find_maxima(&curve.overlaps, 0.2).expect("maxima");
        let angle = |i: usize| theta[i].min(TAU - theta[i]);
        let nearest = maxima.iter().copied().min_by(|&i, &j| angle(i).total_cmp(&angle(j)));
        let near_zero = nearest.map_or(f64::INFINITY, angle);
        let peak = nearest.map_or(f64::NAN, |i| curve.overlaps[i]);
        found.push(format!(
            "state {} (E {:.4}) score {:.2}, orbit {:.3} from bump, {} maxima, nearest {:.0} steps from 0, overlap at 0 is {:.1}% below that maximum",
            sc.state_index,
            e,
            sc.score,
            dist,
            maxima.len(),
            near_zero / step,
            100.0 * (1.0 - curve.overlaps[0] / peak)
        ));
        pass |= maxima.len() == 3 && near_zero <= step * (1.0 + 1e-9);
    }
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let detail = if found.is_empty() {
        "no state scores >= 2 with its orbit through the bump".to_string()
    } else {
        found.join("; ")
    };
    outcome(pass && minutes <= 60.0, format!("{detail}; {minutes:.0} min"))
}

fn local_peak(fields: &[f64], values: &[f64], target: f64, half_width: f64) -> Option<f64> {
    (1..values.len() - 1)
        .filter(|&i| (fields[i] - target).abs() <= half_width)
        .filter(|&i| values[i] >= values[i - 1] && values[i] >= values[i + 1])
        .max_by(|&i, &j| values[i].total_cmp(&values[j]))
        .map(|i| fields[i])
}

fn dos_ridges() -> Outcome {
    let t = Instant::now();
    let step = 0.001;
    let fields = field_range(0.0, 2.0, step);
    let ridge = match ridge_profile(&fields, 60.0, 0.001) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let mut pass = true;
    let mut details = Vec::new();
    for (vt, vr) in [(1, 3), (1, 4)] {
        let b = resonance_field(&Resonance::new(vt, vr).unwrap(), 1.0);
        match local_peak(&fields, &ridge, b, 0.02) {
            Some(peak) => {
                let ok = (peak - b).abs() <= step;
                pass &= ok;
                details.push(format!("({vt},{vr}) ridge at B = {peak:.3} vs {b:.5}"));
            }
            None => {
                pass = false;
                details.push(format!("({vt},{vr}) no ridge near {b:.5}"));
            }
        }
    }
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    outcome(pass && minutes < 10.0, format!("{}; {minutes:.1} min", details.join(", ")))
}

fn cluster_survival(perturbed: Option<&Path>) -> Outcome {
    let Some(dir) = perturbed else {
        return fail("perturbed spectrum unavailable (criterion 5 did not produce one)");
    };
    let e = match energies(dir) {
        Ok(e) => e,
        Err(err) => return fail(err),
    };
    let clusters = fd_clusters(&e, FRAC_1_SQRT_2, 1e-9);
    let multi: Vec<_> = clusters.iter().filter(|c| c.size > 1).collect();
    if multi.is_empty() {
        return fail("no complete multi-level clusters");
    }
    let worst = multi
        .iter()
        .map(|c| c.spread * c.spread / (c.spacing / 10.0))
        .fold(0.0, f64::max);
    let rms_ratio = multi.iter().map(|c| c.spread / c.spacing).fold(0.0, f64::max);
    outcome(
        worst < 1.0,
        format!(
            "{} clusters: largest variance / (spacing/10) = {worst:.2}; largest rms spread / spacing = {rms_ratio:.3}",
            multi.len()
        ),
    )
}

/// Runs the property-test binaries built alongside this one.
fn property_suites() -> Outcome {
    let t = Instant::now();
    let exe = std::env::current_exe().expect("current exe");
    let deps = exe.parent().expect("deps dir");
    let names = [
        "grid_properties",
        "potential_properties",
        "classical_properties",
        "eigensolver_properties",
        "analysis_properties",
        "cli",
    ];
    let mut failed = Vec::new();
    for name in names {
        let newest = fs::read_dir(deps)
            .expect("deps dir")
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| {
                p.extension().is_none()
                    && p.file_name()
                        .and_then(|f| f.to_str())
                        .is_some_and(|f| f.starts_with(&format!("{name}-")))
            })
            .max_by_key(|p| fs::metadata(p).and_then(|m| m.modified()).ok());
        let Some(path) = newest else {
            failed.push(format!("{name} not built"));
            continue;
        };
        match Command::new(&path).arg("--quiet").output() {
            Ok(o) if o.status.success() => {}
            Ok(_) => failed.push(format!("{name} failed")),
            Err(e) => failed.push(format!("{name}: {e}")),
        }
    }
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    if failed.is_empty() {
        outcome(minutes < 10.0, format!("{} suites passed, {minutes:.1} min", names.len()))
    } else {
        fail(failed.join(", "))
    }
}

/// Criterion numbers given on the command line restrict the run to those.
fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u32| only.is_empty() || only.contains(&id);
    let work = tempfile::tempdir().expect("work dir");
    let mut all = true;
    let mut report = |id: u32, name: &str, o: Outcome| {
        all &= o.pass;
        println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    if wanted(1) {
        report(1, "Fock-Darwin oracle", fock_darwin_oracle());
    }
    if wanted(2) {
        report(2, "resonance table", resonance_table());
    }
    if wanted(3) {
        report(3, "unperturbed dynamics", appendix_dynamics());
    }
    if wanted(4) {
        report(4, "energy conservation with bumps", energy_conservation());
    }
    let mut perturbed = None;
    if wanted(5) || wanted(7) {
        let (census, dir) = scarring_census(work.path());
        if wanted(5) {
            report(5, "scarring census", census);
        }
        perturbed = dir;
    }
    if wanted(6) {
        report(6, "single-bump pinning", single_bump_pinning());
    }
    if wanted(7) {
        report(7, "DOS ridges at resonance fields", dos_ridges());
        report(7, "perturbed clusters survive", cluster_survival(perturbed.as_deref()));
    }
    if wanted(8) {
        report(8, "property suites", property_suites());
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
