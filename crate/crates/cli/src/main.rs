use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde_json::json;

use nssmri::analysis::{find_peaks, match_peaks};
use nssmri::config::{OracleTask, RunConfig};
use nssmri::error::ErrorKind;
use nssmri::inversion::invert_records;
use nssmri::io::{
    image_to_csv, load_image, oracle_sweep_to_csv, peaks_to_csv, records_from_csv, records_to_csv, save_image,
    write_with_manifest, Manifest,
};
use nssmri::molecule::{parse_structure, select_species, MolecularStructure, PhysicalConstants};
use nssmri::oracle::{
    estimate_t_rho, nss_program, oracle_sweep, ClusterFamily, DecouplingCycle, SpinSystem, TRhoParams,
    MAX_SWEEP_SPINS,
};
use nssmri::probe::{coupling_profile, slice_for, FieldOrientation, SliceSpec};
use nssmri::scan::{build_scan, estimate_time, plan_schedules, run_forward, NoiseSpec};
use nssmri::signal::{linear_response, schedule_for_slice, single_spin_response, CoherenceParams};

#[derive(Parser)]
#[command(name = "nssmri", version, about = "Single-molecule MRI simulation and reconstruction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted sections take the sectional defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set schedule.n_m=500` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Coupling profiles along B0 for the configured depths and tilts.
    Field {
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Forward NSS signals for every slice of the configured scan.
    Scan {
        #[arg(long, short)]
        structure: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Reconstruct a density image from scan records.
    Invert {
        #[arg(long, short)]
        records: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Also write per-voxel values as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Find peaks in an image and match them to the true sites of a structure.
    Analyze {
        #[arg(long, short)]
        image: PathBuf,
        /// Structure with the true sites; omitted means an empty truth set.
        #[arg(long, short)]
        truth: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        peaks: Option<PathBuf>,
    },
    /// Exact small-cluster simulation: slice sweep or coherence envelope.
    Oracle {
        #[arg(long, short)]
        structure: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Sweep only: write the pulse program of the first slice as JSON.
        #[arg(long)]
        program: Option<PathBuf>,
    },
    /// Experiment-time estimate for the configured scan.
    Time {
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| nssmri::Error::Format(e.to_string()))?;
    for o in &common.overrides {
        let (key, value) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut cur = &mut table;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            cur = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .with_context(|| format!("override `{key}`: `{p}` is not a section"))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), value);
    }
    let text = toml::to_string(&table).map_err(|e| nssmri::Error::Format(e.to_string()))?;
    Ok(RunConfig::from_toml(&text).context("invalid configuration")?)
}

fn load_structure(path: &Path, cfg: &RunConfig) -> Result<MolecularStructure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading structure {}", path.display()))?;
    let s = parse_structure(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(s.place(cfg.structure_offset())?)
}

fn manifest(cmd: &str, cfg: &RunConfig, inputs: &[&Path]) -> Result<Manifest> {
    let mut m = Manifest::new(cmd, cfg);
    if let Some(p) = &cfg.probe.grid_file {
        m.add_input(p)?;
    }
    for p in inputs {
        m.add_input(p).with_context(|| format!("hashing {}", p.display()))?;
    }
    Ok(m)
}

fn cmd_field(cfg: &RunConfig, out: &Path) -> Result<()> {
    let consts = PhysicalConstants::default();
    let gamma_n = cfg.species()?.gamma;
    let f = &cfg.field;
    let orientations = f.orientations(cfg.scan.params().b0_magnitude)?;
    let mut csv = String::from("depth_nm,theta_deg,phi_deg,r_angstrom,gamma,gradient,non_monotone\n");
    for depth in &f.depths_nm {
        let mut pc = cfg.probe.clone();
        pc.depth_nm = *depth;
        let probe = pc.build().with_context(|| format!("probe at depth {depth} nm"))?;
        for (o, theta) in orientations.iter().zip(&f.theta_deg) {
            let prof = coupling_profile(&probe, o, 0.0, f.r_max_nm / 1e9, f.n_samples, gamma_n, &consts)
                .with_context(|| format!("profile at depth {depth} nm, theta {theta} deg"))?;
            for s in &prof.samples {
                let _ = writeln!(
                    csv,
                    "{depth},{theta},{},{},{},{},{}",
                    f.phi_deg,
                    s.r * 1e10,
                    s.gamma,
                    s.gradient,
                    prof.non_monotone
                );
            }
        }
    }
    write_with_manifest(out, csv.as_bytes(), &manifest("field", cfg, &[])?)?;
    Ok(())
}

fn cmd_scan(cfg: &RunConfig, structure: &Path, out: &Path) -> Result<()> {
    let consts = PhysicalConstants::default();
    let species = cfg.species()?;
    let mol = load_structure(structure, cfg)?;
    let spins = select_species(&mol, &species);
    let probe = cfg.probe.build()?;
    let plan = build_scan(&cfg.scan.params(), &probe, species.gamma, &consts)?;
    let noise = cfg.noise.enabled.then_some(NoiseSpec { n_m: cfg.schedule.n_m, seed: cfg.seed });
    let recs = run_forward(
        &plan,
        &spins,
        &probe,
        &cfg.schedule.params(),
        &cfg.coherence.params(),
        species.gamma,
        &consts,
        noise,
    )?;
    write_with_manifest(out, records_to_csv(&recs).as_bytes(), &manifest("scan", cfg, &[structure])?)?;
    eprintln!("{} slices, {} {} spins", recs.len(), spins.len(), cfg.species);
    Ok(())
}

fn cmd_invert(cfg: &RunConfig, records: &Path, out: &Path, csv: Option<&Path>) -> Result<()> {
    let consts = PhysicalConstants::default();
    let gamma_n = cfg.species()?.gamma;
    let text = std::fs::read_to_string(records).with_context(|| format!("reading {}", records.display()))?;
    let recs = records_from_csv(&text).with_context(|| format!("parsing {}", records.display()))?;
    let probe = cfg.probe.build()?;
    let plan = build_scan(&cfg.scan.params(), &probe, gamma_n, &consts)?;
    let grid = cfg.grid.grid()?;
    let (img, rep) = invert_records(
        &plan,
        &recs,
        &probe,
        &grid,
        &cfg.schedule.params(),
        &cfg.coherence.params(),
        gamma_n,
        &consts,
        cfg.solver.floor,
        cfg.solver.weighted,
        &cfg.solver.options(),
    )?;
    let m = manifest("invert", cfg, &[records])?;
    save_image(out, &img, false, Some(&m))?;
    if let Some(p) = csv {
        write_with_manifest(p, image_to_csv(&img).as_bytes(), &m)?;
    }
    eprintln!("{} iterations, residual {:.3e}, lambda {:.3e}", rep.iterations, rep.residual, rep.lambda);
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, image: &Path, truth: Option<&Path>, out: &Path, peaks_out: Option<&Path>) -> Result<()> {
    let (img, _) = load_image(image).with_context(|| format!("reading image {}", image.display()))?;
    let sites = match truth {
        Some(p) => select_species(&load_structure(p, cfg)?, &cfg.species()?),
        None => Vec::new(),
    };
    let a = &cfg.analysis;
    let peaks = find_peaks(&img, a.peak_threshold);
    let report = match_peaks(&peaks, &sites, a.r_cut_angstrom / 1e10, a.method)?;
    let mut inputs = vec![image];
    inputs.extend(truth);
    let m = manifest("analyze", cfg, &inputs)?;
    let body = serde_json::to_string_pretty(&json!({
        "manifest": m,
        "epsilon_angstrom": report.epsilon.map(|e| e * 1e10),
        "n_peaks": peaks.peaks.len(),
        "n_sites": sites.len(),
        "report": report,
    }))?;
    std::fs::write(out, body)?;
    if let Some(p) = peaks_out {
        write_with_manifest(p, peaks_to_csv(&peaks).as_bytes(), &m)?;
    }
    match report.epsilon {
        Some(e) => eprintln!("{} pairs, epsilon {:.3} Å", report.pairs.len(), e * 1e10),
        None => eprintln!("no pairs, epsilon undefined"),
    }
    Ok(())
}

fn cmd_oracle(cfg: &RunConfig, structure: &Path, out: &Path, program: Option<&Path>) -> Result<()> {
    let consts = PhysicalConstants::default();
    let species = cfg.species()?;
    let sites = select_species(&load_structure(structure, cfg)?, &species);
    let probe = cfg.probe.build()?;
    let o = &cfg.oracle;
    let cycle = DecouplingCycle::cycle24();
    let decpl = o.decoupling_params(species.gamma);
    let orientation = FieldOrientation::new(0.0, 0.0, cfg.scan.params().b0_magnitude)?;
    let m = manifest("oracle", cfg, &[structure])?;
    match o.task {
        OracleTask::Sweep => {
            if sites.len() > MAX_SWEEP_SPINS {
                bail!(nssmri::Error::OversizeSystem(sites.len(), MAX_SWEEP_SPINS));
            }
            let pairs: Vec<_> = sites.iter().map(|p| (*p, species.gamma)).collect();
            let sys = SpinSystem::from_sites(&pairs, &probe, &orientation, &consts)?;
            let mut params = cfg.schedule.params();
            if o.use_fitted_a {
                params.a = cycle.a_fitted;
            }
            let n = ((o.r_max_angstrom - o.r_min_angstrom) / o.dr_angstrom + 1e-9).floor() as usize + 1;
            let slices: Vec<SliceSpec> = (0..n)
                .map(|i| {
                    let r = (o.r_min_angstrom + i as f64 * o.dr_angstrom) / 1e10;
                    slice_for(&probe, r, &orientation, o.dr_angstrom / 1e10, species.gamma, &consts)
                })
                .collect::<nssmri::Result<_>>()?;
            let g0 = slice_for(&probe, 0.0, &orientation, o.dr_angstrom / 1e10, species.gamma, &consts)?.gradient_norm;
            let sig = oracle_sweep(&sys, &slices, g0, &params, &decpl, &cycle, &consts)?;
            let coh = CoherenceParams::ideal();
            let analytic: Vec<f64> = slices
                .iter()
                .map(|sl| -> nssmri::Result<f64> {
                    let sched = schedule_for_slice(sl, g0, &params, species.gamma)?;
                    Ok(sys
                        .spins
                        .iter()
                        .map(|s| linear_response(single_spin_response(sl.gamma, s.k, &sched, &coh, species.gamma)))
                        .sum())
                })
                .collect::<nssmri::Result<_>>()?;
            write_with_manifest(out, oracle_sweep_to_csv(&slices, &sig, &analytic).as_bytes(), &m)?;
            if let (Some(p), Some(sl)) = (program, slices.first()) {
                let sched = schedule_for_slice(sl, g0, &params, species.gamma)?;
                let prog = nss_program(sl.gamma, &sched, &decpl, &cycle)?.program();
                std::fs::write(p, prog.to_json()?)?;
            }
        }
        OracleTask::TRho => {
            if sites.is_empty() {
                bail!(nssmri::Error::Invalid("structure has no spins of the target species".into()));
            }
            let centre = sites.iter().sum::<Vector3<f64>>() / sites.len() as f64;
            let fam = ClusterFamily {
                offsets: sites.iter().map(|p| p - centre).collect(),
                gammas: vec![species.gamma; sites.len()],
                centre,
            };
            let params = TRhoParams {
                decoupling: o.decoupling.then_some(decpl),
                free_step: o.free_step_us / 1e6,
                n_orientations: o.n_orientations,
                seed: cfg.seed,
                max_steps: o.max_steps,
                n_samples: o.n_samples,
            };
            let est = estimate_t_rho(&fam, &probe, &orientation, &params, &cycle, &consts)?;
            write_with_manifest(out, est.to_csv().as_bytes(), &m)?;
            let flag = if est.lower_bound { " (lower bound: no 1/e crossing)" } else { "" };
            eprintln!("T_rho = {:.4e} s{flag}", est.t_rho);
            println!("{}", serde_json::to_string(&json!({ "t_rho_s": est.t_rho, "lower_bound": est.lower_bound }))?);
        }
    }
    Ok(())
}

fn cmd_time(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let consts = PhysicalConstants::default();
    let gamma_n = cfg.species()?.gamma;
    let probe = cfg.probe.build()?;
    let plan = build_scan(&cfg.scan.params(), &probe, gamma_n, &consts)?;
    let sp = cfg.schedule.params();
    let sched = plan_schedules(&plan, &sp, gamma_n)?;
    let t = estimate_time(&plan, &sched, sp.n_m, sp.t_m)?;
    let body = serde_json::to_string_pretty(&json!({
        "manifest": manifest("time", cfg, &[])?,
        "estimate": t,
        "total_hours": t.t_total / 3600.0,
    }))?;
    match out {
        Some(p) => std::fs::write(p, body)?,
        None => println!("{body}"),
    }
    eprintln!("{:.3} s per orientation, {} orientations, {:.3} h total", t.per_orientation, t.n_orientations, t.t_total / 3600.0);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    let cfg = load_config(&cli.common)?;
    match &cli.cmd {
        Cmd::Field { out } => cmd_field(&cfg, out),
        Cmd::Scan { structure, out } => cmd_scan(&cfg, structure, out),
        Cmd::Invert { records, out, csv } => cmd_invert(&cfg, records, out, csv.as_deref()),
        Cmd::Analyze { image, truth, out, peaks } => cmd_analyze(&cfg, image, truth.as_deref(), out, peaks.as_deref()),
        Cmd::Oracle { structure, out, program } => cmd_oracle(&cfg, structure, out, program.as_deref()),
        Cmd::Time { out } => cmd_time(&cfg, out.as_deref()),
        Cmd::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

/// 2: invalid input or config, 3: numerical failure, 4: I/O failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<nssmri::Error>() {
            return match err.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
