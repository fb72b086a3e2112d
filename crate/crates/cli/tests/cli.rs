use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scarlab::analysis::{fock_darwin_levels, lowest_fock_darwin_levels};
use scarlab_cli::csv::read_rows;
use scarlab_cli::wf2d::Wf2d;

fn scarlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scarlab"))
        .args(args)
        .arg("--quiet")
        .output()
        .expect("run scarlab")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run_in(dir: &Path, config: &Path, cmd: &str, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    scarlab(&args)
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let (cols, rows) = read_rows(path).unwrap();
    let k = cols.iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name}"));
    rows.into_iter().map(|r| r[k].clone()).collect()
}

fn floats(path: &Path, name: &str) -> Vec<f64> {
    column(path, name).iter().map(|s| s.parse().unwrap()).collect()
}

const SMALL: &str = r#"
seed = 1
[model]
b = 0.0
[grid]
points = 64
[bumps]
enabled = false
[solver]
n_states = 20
"#;

#[test]
fn missing_output_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = scarlab(&["resonances", "--config", cfg.to_str().unwrap(), "--out", "/nonexistent/scarlab-out"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/scarlab-out"));
}

#[test]
fn missing_seed_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nb = 0.5\n");
    let out = run_in(dir.path(), &cfg, "resonances", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    let out = run_in(dir.path(), &cfg, "resonances", &["--seed", "3"]);
    assert!(out.status.success());
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (text, key) in [
        ("seed = 1\n[grid]\npoint = 64\n", "point"),
        ("seed = 1\n[solver]\nn_states = -3\n", "solver.n_states"),
        ("seed = 1\n[scars]\nresonances = [[2, 4]]\n", "scars.resonances"),
    ] {
        let cfg = write_config(dir.path(), text);
        let out = run_in(dir.path(), &cfg, "resonances", &[]);
        assert_eq!(out.status.code(), Some(1), "{text}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "{err}");
    }
}

#[test]
fn solve_matches_closed_form_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run_in(dir.path(), &cfg, "solve", &["--threads", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let csv = dir.path().join("energies.csv");
    let energies = floats(&csv, "energy");
    assert_eq!(energies.len(), 20);
    for (e, l) in energies.iter().zip(lowest_fock_darwin_levels(20, 0.0)) {
        assert!((e - l.energy).abs() < 5e-3, "{e} vs {}", l.energy);
    }
    assert!(column(&csv, "converged").iter().all(|c| c == "1"));
    assert!(fs::read_to_string(&csv).unwrap().contains("# status: converged"));

    let wf = Wf2d::read(&dir.path().join("spectrum.wf2d")).unwrap();
    assert_eq!(wf.energies.len(), 20);
    for (a, b) in wf.energies.iter().zip(&energies) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let meta = fs::read_to_string(dir.path().join("spectrum.wf2d.meta")).unwrap();
    assert!(meta.contains("physics_hash"));

    let first = fs::read(dir.path().join("spectrum.wf2d")).unwrap();
    let first_csv = fs::read(&csv).unwrap();
    let again = tempfile::tempdir().unwrap();
    let out = run_in(again.path(), &cfg, "solve", &["--threads", "1"]);
    assert!(out.status.success());
    assert_eq!(fs::read(again.path().join("spectrum.wf2d")).unwrap(), first);
    assert_eq!(fs::read(again.path().join("energies.csv")).unwrap(), first_csv);
}

#[test]
fn downstream_commands_refuse_a_foreign_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert!(run_in(dir.path(), &cfg, "solve", &[]).status.success());
    let other = write_config(dir.path(), &SMALL.replace("n_states = 20", "n_states = 21"));
    let out = run_in(dir.path(), &other, "dos", &[]);
    // Analytic mode needs no spectrum.
    assert!(out.status.success());
    let spectrum_mode = dir.path().join("spec.toml");
    fs::write(&spectrum_mode, format!("{}\n[dos]\nmode = \"spectrum\"\n", SMALL.replace("n_states = 20", "n_states = 21"))).unwrap();
    let out = run_in(dir.path(), &spectrum_mode, "dos", &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_spectrum_names_the_solve_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = run_in(dir.path(), &cfg, "scars", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("solve"));
}

#[test]
fn resonance_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n");
    assert!(run_in(dir.path(), &cfg, "resonances", &[]).status.success());
    let path = dir.path().join("resonances.csv");
    let vt = floats(&path, "v_theta");
    let vr = floats(&path, "v_r");
    let b = floats(&path, "b_field");
    let find = |t: f64, r: f64| {
        let i = vt.iter().zip(&vr).position(|(a, c)| *a == t && *c == r).unwrap();
        b[i]
    };
    assert_eq!(find(1.0, 2.0), 0.0);
    assert!((find(1.0, 3.0) - 0.70711).abs() < 5e-6);
    assert!((find(1.0, 4.0) - 1.15470).abs() < 5e-6);
    assert!(vt.iter().zip(&vr).all(|(t, r)| r / t > 1.0 && r / t <= 10.0));
}

#[test]
fn analytic_dos_counts_levels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seed = 1\n[dos]\nmode = \"analytic\"\nb_list = [0.0, 0.5, 1.2]\ne_max = 4.5\nwindow = 0.01\ne_step = 0.0025\nb_min = 0.0\nb_max = 1.0\nridge_step = 0.01\n",
    );
    let out = run_in(dir.path(), &cfg, "dos", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = dir.path().join("dos.csv");
    let b = floats(&path, "b");
    let e = floats(&path, "energy");
    let v = floats(&path, "dos");
    for field in [0.0, 0.5, 1.2] {
        let idx: Vec<usize> = (0..b.len()).filter(|&i| b[i] == field).collect();
        let integral: f64 = idx.windows(2).map(|w| 0.5 * (e[w[1]] - e[w[0]]) * (v[w[0]] + v[w[1]])).sum();
        let count = fock_darwin_levels(4.5, field).len() as f64;
        assert!((integral - count).abs() < 0.01 * count, "B = {field}: {integral} vs {count}");
    }
    assert_eq!(floats(&dir.path().join("ridge.csv"), "b").len(), 101);
}

#[test]
fn classical_and_section_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seed = 2\n[model]\nresonance = [1, 3]\n[grid]\nhalf_extent = 8.0\n[classical]\ntrajectories = 3\nt_max = 20.0\nenergy = 5.0\n",
    );
    assert!(run_in(dir.path(), &cfg, "classical", &[]).status.success());
    let traj = floats(&dir.path().join("classical.csv"), "trajectory");
    assert!(traj.contains(&2.0));
    let orbits = floats(&dir.path().join("orbits.csv"), "v_r");
    assert!(!orbits.is_empty() && orbits.iter().all(|&r| r == 3.0));
    assert!(run_in(dir.path(), &cfg, "poincare", &[]).status.success());
    assert!(dir.path().join("poincare.csv").exists());
}

#[test]
fn scars_and_pinning_run_on_a_small_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "seed = 4\n[model]\nresonance = [1, 3]\n[grid]\npoints = 64\n[bumps]\ndensity = 0.5\n[solver]\nn_states = 12\n[pinning]\ntheta_points = 90\n",
    );
    let out = run_in(dir.path(), &cfg, "solve", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_in(dir.path(), &cfg, "scars", &[]).status.success());
    let scores = floats(&dir.path().join("scars.csv"), "score");
    assert_eq!(scores.len(), 12);
    assert!(scores.iter().all(|s| s.is_finite() && *s >= 0.0));
    let fraction = floats(&dir.path().join("census.csv"), "fraction");
    assert!(fraction.iter().all(|f| (0.0..=1.0).contains(f)));
    assert!(run_in(dir.path(), &cfg, "pinning", &[]).status.success());
    assert_eq!(floats(&dir.path().join("pinning.csv"), "theta").len(), 90);
}
