use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use caloric_lab::measures::{Atom, DiscreteMeasure};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_caloric-lab"))
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin().args(args).arg("--config").arg(config).arg("--out").arg(out).output().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

/// Manifest with the trailing timestamp line removed.
fn manifest_body(dir: &Path) -> String {
    let m = read(&dir.join("manifest.txt"));
    let lines: Vec<&str> = m.lines().collect();
    assert!(lines.last().unwrap().starts_with("timestamp_unix = "));
    lines[..lines.len() - 1].join("\n")
}

fn result_value(dir: &Path) -> f64 {
    read(&dir.join("results.csv"))
        .lines()
        .find_map(|l| l.strip_prefix("value,"))
        .unwrap()
        .parse()
        .unwrap()
}

/// Minimum boundary transport cost for the bundled instance, by brute force
/// over the two free flows `a -> b` and `c -> b`; the rest goes to the boundary.
fn kr_brute_force() -> f64 {
    let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let bd = |p: [f64; 2]| p[0].min(p[1]).min(1.0 - p[0]).min(1.0 - p[1]);
    let (a, b, c) = ([0.2, 0.5], [0.5, 0.5], [0.5, 0.85]);
    let steps = 400;
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        let x = i as f64 / steps as f64;
        for j in 0..=steps {
            let y = 0.5 * j as f64 / steps as f64;
            if x + y > 1.0 {
                continue;
            }
            let cost = x * d(a, b) + (1.0 - x) * bd(a) + y * d(c, b) + (0.5 - y) * bd(c) + (1.0 - x - y) * bd(b);
            best = best.min(cost);
        }
    }
    best
}

#[test]
fn kr_matches_brute_force_and_bundled_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["kr"], &data("kr_three_atoms.toml"), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = result_value(dir.path());
    let expected: serde_json::Value = serde_json::from_str(&read(&data("kr_three_atoms.expected.json"))).unwrap();
    assert!((v - expected["value"].as_f64().unwrap()).abs() < 1e-9, "{v}");
    assert!((v - kr_brute_force()).abs() < 1e-9, "{v} vs {}", kr_brute_force());
    let man = read(&dir.path().join("manifest.txt"));
    assert!(man.contains("subcommand = \"kr\""));
    assert!(man.contains("kr_three_atoms.json"));
}

#[test]
fn wb1_plan_cost_matches_kr() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["wb1"], &data("kr_three_atoms.toml"), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&dir.path().join("results.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "i,j,flow,cost");
    let total: f64 = lines
        .map(|l| {
            let f: Vec<f64> = l.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
            f[0] * f[1]
        })
        .sum();
    assert!((total - 0.375).abs() < 1e-9, "{total}");
}

#[test]
fn missing_config_exits_one_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = run(&["fr"], &missing, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn unknown_key_and_missing_section_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[kr]\ninstance = \"x.json\"\nbogus = 1\n").unwrap();
    assert_eq!(run(&["kr"], &cfg, &dir.path().join("o")).status.code(), Some(1));
    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let out = run(&["fr"], &cfg, &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[fr]"));
}

#[test]
fn bad_arguments_exit_one_and_help_exits_zero() {
    assert_eq!(bin().arg("no-such-command").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn zero_mass_blowup_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mu = DiscreteMeasure::new(vec![Atom::new(&[0.5], 0.0, 1.0)]).unwrap();
    std::fs::write(dir.path().join("mu.json"), mu.to_json().unwrap()).unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[blowup]\nmeasure = \"mu.json\"\nr = 0.1\ncenter = { x = [0.0], t = 0.0 }\n").unwrap();
    let out = run(&["blowup"], &cfg, &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn fr_reads_relative_measure() {
    let dir = tempfile::tempdir().unwrap();
    let mu = DiscreteMeasure::new(vec![Atom::new(&[0.25], 0.0, 2.0), Atom::new(&[0.0], -0.81, 1.0)]).unwrap();
    std::fs::write(dir.path().join("mu.json"), mu.to_json().unwrap()).unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[fr]\nmeasure = \"mu.json\"\nradii = [1.0, 0.5]\n").unwrap();
    let out = run(&["fr"], &cfg, &dir.path().join("o"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&dir.path().join("o/results.csv"));
    // ‖(0.25, 0)‖ = 0.25, ‖(0, -0.81)‖ = 0.9.
    let want = format!("r,f_r\n1,{}\n0.5,{}\n", 2.0 * 0.75 + 1.0 * (1.0 - 0.9f64), 2.0 * 0.25);
    assert_eq!(csv, want);
}

const MC_CONFIG: &str = r#"
seed = 11

[caloric-mc]
domain = { type = "half_space", normal = [1.0], offset = 0.0 }
pole = { x = [0.5], t = 1.0 }

[caloric-mc.walk]
n_walks = 2000
dt = 1e-3
max_time_depth = 4.0
boundary_tol = 1e-6
"#;

#[test]
fn runs_are_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.toml");
    std::fs::write(&cfg, MC_CONFIG).unwrap();
    let outs: Vec<PathBuf> = ["1", "4"].iter().map(|w| dir.path().join(format!("w{w}"))).collect();
    for (w, o) in ["1", "4"].iter().zip(&outs) {
        let out = run(&["caloric-mc", "--workers", w], &cfg, o);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let again = dir.path().join("again");
    assert_eq!(run(&["caloric-mc", "--workers", "1"], &cfg, &again).status.code(), Some(0));
    for name in ["measure.json", "results.csv"] {
        assert_eq!(read(&outs[0].join(name)), read(&outs[1].join(name)), "{name}");
        assert_eq!(read(&outs[0].join(name)), read(&again.join(name)), "{name}");
    }
    assert_eq!(manifest_body(&outs[0]), manifest_body(&again));
    assert!(manifest_body(&outs[0]).contains("seed = 11"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.toml");
    std::fs::write(&cfg, MC_CONFIG).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["caloric-mc", "--seed", "12"], &cfg, &a).status.code(), Some(0));
    assert_eq!(run(&["caloric-mc"], &cfg, &b).status.code(), Some(0));
    assert_ne!(read(&a.join("measure.json")), read(&b.join("measure.json")));
    assert!(manifest_body(&a).contains("seed = 12"));
}

#[test]
fn poly_measure_writes_measure_with_expected_mass() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("p.toml");
    // h = x_1 on C_1 in one space dimension: a unit atom per time step on {x_1 = 0}.
    std::fs::write(
        &cfg,
        "[poly-measure]\nr = 1.0\nslices = 50\ngrid = 20\n[poly-measure.polynomial]\nn = 1\nterms = [{ alpha = [1], c = 1.0 }]\n",
    )
    .unwrap();
    let o = dir.path().join("o");
    let out = run(&["poly-measure"], &cfg, &o);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mu = DiscreteMeasure::from_json(&read(&o.join("measure.json"))).unwrap();
    assert!((mu.total_mass() - 2.0).abs() < 1e-9, "{}", mu.total_mass());
    assert!(read(&o.join("results.csv")).starts_with("x1,t,w\n"));
}

#[test]
fn capacity_grid_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[capacity.grid]\nshape = \"cylinder\"\ncenter = { x = [0.0], t = 0.0 }\nr = 1.0\ncells = 3\n").unwrap();
    let o = dir.path().join("o");
    let out = run(&["capacity"], &cfg, &o);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let line = read(&o.join("results.csv")).lines().nth(1).unwrap().to_string();
    let v: f64 = line.split(',').next().unwrap().parse().unwrap();
    assert!(v > 0.0 && v.is_finite());
    assert!(o.join("measure.json").exists());
}
