//! End-to-end runs of the `nssmri` binary on a small scan.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nssmri::analysis::{find_peaks, match_peaks};
use nssmri::config::RunConfig;
use nssmri::inversion::invert_records;
use nssmri::io::{load_image, manifest_path};
use nssmri::molecule::{parse_structure, select_species, PhysicalConstants};
use nssmri::scan::{build_scan, run_forward, NoiseSpec};
use tempfile::TempDir;

const CONFIG: &str = r#"
seed = 3
species = "1H"

[scan]
r_max_nm = 0.6
dr_angstrom = 0.5
theta_max_deg = 20.0
d_theta_deg = 10.0
d_phi_deg = 90.0

[grid]
lo_angstrom = [-2.0, -2.0, 2.0]
hi_angstrom = [2.0, 2.0, 6.0]
pitch_angstrom = 1.0

[schedule]
n_m = 200

[solver]
require_convergence = false
max_iter = 300
"#;

const STRUCTURE: &str = "2\ntwo protons\nH 0.0 0.0 3.0\nH 1.0 0.5 5.0\n";

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let w = Work { dir: tempfile::tempdir().unwrap() };
        std::fs::write(w.path("run.toml"), CONFIG).unwrap();
        std::fs::write(w.path("mol.xyz"), STRUCTURE).unwrap();
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("run.toml");
        Command::new(env!("CARGO_BIN_EXE_nssmri"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg(&cfg)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn file_pipeline_matches_in_process() {
    let w = Work::new();
    w.ok(&["scan", "-s", "mol.xyz", "-o", "rec.csv"]);
    w.ok(&["invert", "-r", "rec.csv", "-o", "img.bin"]);
    w.ok(&["analyze", "-i", "img.bin", "-t", "mol.xyz", "-o", "report.json"]);

    let cfg = RunConfig::from_toml(CONFIG).unwrap();
    let c = PhysicalConstants::default();
    let sp = cfg.species().unwrap();
    let probe = cfg.probe.build().unwrap();
    let spins = select_species(&parse_structure(STRUCTURE).unwrap(), &sp);
    let plan = build_scan(&cfg.scan.params(), &probe, sp.gamma, &c).unwrap();
    let noise = Some(NoiseSpec { n_m: cfg.schedule.n_m, seed: cfg.seed });
    let recs = run_forward(&plan, &spins, &probe, &cfg.schedule.params(), &cfg.coherence.params(), sp.gamma, &c, noise).unwrap();
    let (img, _) = invert_records(
        &plan,
        &recs,
        &probe,
        &cfg.grid.grid().unwrap(),
        &cfg.schedule.params(),
        &cfg.coherence.params(),
        sp.gamma,
        &c,
        cfg.solver.floor,
        cfg.solver.weighted,
        &cfg.solver.options(),
    )
    .unwrap();

    let (from_file, header) = load_image(&w.path("img.bin")).unwrap();
    assert_eq!(from_file.grid, img.grid);
    assert!(from_file.rho.iter().zip(&img.rho).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(!header.normalized);

    let peaks = find_peaks(&img, cfg.analysis.peak_threshold);
    let rep = match_peaks(&peaks, &spins, cfg.analysis.r_cut_angstrom / 1e10, cfg.analysis.method).unwrap();
    let j = read_json(&w.path("report.json"));
    assert_eq!(j["n_peaks"].as_u64().unwrap() as usize, peaks.peaks.len());
    assert_eq!(j["n_sites"], 2);
    assert_eq!(j["epsilon_angstrom"].as_f64(), rep.epsilon.map(|e| e * 1e10));
}

#[test]
fn artifacts_carry_manifests() {
    let w = Work::new();
    w.ok(&["scan", "-s", "mol.xyz", "-o", "rec.csv"]);
    let m = read_json(&manifest_path(&w.path("rec.csv")));
    assert_eq!(m["command"], "scan");
    assert_eq!(m["config"]["species"], "1H");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    w.ok(&["invert", "-r", "rec.csv", "-o", "img.bin", "--csv", "img.csv"]);
    assert!(manifest_path(&w.path("img.csv")).exists());
    let (_, header) = load_image(&w.path("img.bin")).unwrap();
    assert!(header.manifest.is_some());

    w.ok(&["analyze", "-i", "img.bin", "-o", "report.json"]);
    assert_eq!(read_json(&w.path("report.json"))["manifest"]["command"], "analyze");
}

#[test]
fn empty_truth_gives_null_epsilon() {
    let w = Work::new();
    w.ok(&["scan", "-s", "mol.xyz", "-o", "rec.csv"]);
    w.ok(&["invert", "-r", "rec.csv", "-o", "img.bin"]);
    w.ok(&["analyze", "-i", "img.bin", "-o", "report.json"]);
    let j = read_json(&w.path("report.json"));
    assert!(j["epsilon_angstrom"].is_null());
    assert_eq!(j["n_sites"], 0);
}

#[test]
fn exit_codes() {
    let w = Work::new();
    let code = |args: &[&str]| w.run(args).status.code().unwrap();
    // validation
    assert_eq!(code(&["--set", "schedule.rho_det=2.0", "time"]), 2);
    assert_eq!(code(&["--set", "field.theta_deg=[]", "field", "-o", "f.csv"]), 2);
    assert_eq!(code(&["--set", "species=\"12C\"", "time"]), 2);
    // numerical
    w.ok(&["scan", "-s", "mol.xyz", "-o", "rec.csv"]);
    let strict = ["--set", "solver.require_convergence=true", "--set", "solver.max_iter=1"];
    assert_eq!(code(&[&strict[..], &["invert", "-r", "rec.csv", "-o", "img.bin"]].concat()), 3);
    // i/o
    assert_eq!(code(&["scan", "-s", "missing.xyz", "-o", "rec.csv"]), 4);
    assert_eq!(code(&["analyze", "-i", "missing.bin", "-o", "r.json"]), 4);
}

#[test]
fn config_round_trips_through_overrides() {
    let w = Work::new();
    let out = w.ok(&["--set", "schedule.n_m=500", "config"]);
    let cfg = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.schedule.n_m, 500);
    assert_eq!(cfg.species, "1H");
}

#[test]
fn time_reports_orientations() {
    let w = Work::new();
    let out = w.ok(&["time"]);
    let j: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // theta 0, 10, 20 deg with 4 azimuths each off-axis
    assert_eq!(j["estimate"]["n_orientations"], 9);
    assert_eq!(j["estimate"]["n_slices"], 9 * 13);
}

#[test]
fn field_profiles_written() {
    let w = Work::new();
    w.ok(&["--set", "field.theta_deg=[0.0, 54.7356]", "field", "-o", "f.csv"]);
    let text = std::fs::read_to_string(w.path("f.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 57);
    assert!(manifest_path(&w.path("f.csv")).exists());
}
