//! Run configuration: one TOML file, human units, every field defaulted to the sectional scan.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::analysis::MatchMethod;
use crate::error::{Error, Result};
use crate::inversion::{InvertOptions, VoxelGrid};
use crate::molecule::{gyromagnetic, NuclearSpecies};
use crate::oracle::DecouplingParams;
use crate::probe::{
    density_from_model, load_density_grid, threshold_density, AnalyticModel, FieldOrientation, ModelTag,
    ProbeDensity,
};
use crate::scan::ScanParams;
use crate::signal::{CoherenceParams, ScheduleParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub model: ModelTag,
    pub depth_nm: f64,
    /// Lattice pitch of sampled analytic densities.
    pub pitch_nm: f64,
    /// Relative weight cut applied to sampled densities.
    pub threshold: f64,
    /// Required for `imported-grid`.
    pub grid_file: Option<PathBuf>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { model: ModelTag::PointDipole, depth_nm: 2.5, pitch_nm: 0.2, threshold: 1e-3, grid_file: None }
    }
}

impl ProbeConfig {
    pub fn build(&self) -> Result<ProbeDensity> {
        let depth = self.depth_nm / 1e9;
        match self.model {
            ModelTag::PointDipole => ProbeDensity::point(depth),
            ModelTag::ImportedGrid => {
                let p = self.grid_file.as_ref().ok_or_else(|| Error::invalid("imported-grid needs probe.grid_file"))?;
                load_density_grid(p)
            }
            tag => {
                let m = AnalyticModel::calibrated(tag, depth, self.pitch_nm / 1e9)?;
                Ok(threshold_density(&density_from_model(&m)?, self.threshold))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    Sectional,
    Extended,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub mode: ScanMode,
    pub r_max_nm: Option<f64>,
    pub dr_angstrom: Option<f64>,
    pub theta_max_deg: Option<f64>,
    pub d_theta_deg: Option<f64>,
    pub d_phi_deg: Option<f64>,
    pub b0_tesla: Option<f64>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            mode: ScanMode::Sectional,
            r_max_nm: None,
            dr_angstrom: None,
            theta_max_deg: None,
            d_theta_deg: None,
            d_phi_deg: None,
            b0_tesla: None,
        }
    }
}

impl ScanConfig {
    pub fn params(&self) -> ScanParams {
        let mut p = match self.mode {
            ScanMode::Sectional => ScanParams::sectional(),
            ScanMode::Extended => ScanParams::extended(),
        };
        if let Some(v) = self.r_max_nm {
            p.r_max = v / 1e9;
        }
        if let Some(v) = self.dr_angstrom {
            p.dr = v / 1e10;
        }
        if let Some(v) = self.theta_max_deg {
            p.theta_max = v.to_radians();
        }
        if let Some(v) = self.d_theta_deg {
            p.d_theta = v.to_radians();
        }
        if let Some(v) = self.d_phi_deg {
            p.d_phi = v.to_radians();
        }
        if let Some(v) = self.b0_tesla {
            p.b0_magnitude = v;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub b_ac0_ut: f64,
    pub rho_det: f64,
    pub rho_ctrl: f64,
    pub a: f64,
    pub n_m: u32,
    pub t_m_us: f64,
    pub gradient_scaled_drive: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let p = ScheduleParams::default();
        ScheduleConfig {
            b_ac0_ut: p.b_ac0 * 1e6,
            rho_det: p.rho_det,
            rho_ctrl: p.rho_ctrl,
            a: p.a,
            n_m: p.n_m,
            t_m_us: p.t_m * 1e6,
            gradient_scaled_drive: p.gradient_scaled_drive,
        }
    }
}

impl ScheduleConfig {
    pub fn params(&self) -> ScheduleParams {
        ScheduleParams {
            b_ac0: self.b_ac0_ut / 1e6,
            rho_det: self.rho_det,
            rho_ctrl: self.rho_ctrl,
            a: self.a,
            n_m: self.n_m,
            t_m: self.t_m_us / 1e6,
            gradient_scaled_drive: self.gradient_scaled_drive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoherenceConfig {
    pub t2_probe_s: f64,
    pub t1_probe_s: f64,
    /// `inf` is accepted and disables the term.
    pub t_rho_target_s: f64,
    pub t_nuclear_probe_s: f64,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        let c = CoherenceParams::default();
        CoherenceConfig {
            t2_probe_s: c.t2_probe,
            t1_probe_s: c.t1_probe,
            t_rho_target_s: c.t_rho_target,
            t_nuclear_probe_s: c.t_nuclear_probe,
        }
    }
}

impl CoherenceConfig {
    pub fn params(&self) -> CoherenceParams {
        CoherenceParams {
            t2_probe: self.t2_probe_s,
            t1_probe: self.t1_probe_s,
            t_rho_target: self.t_rho_target_s,
            t_nuclear_probe: self.t_nuclear_probe_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lo_angstrom: [f64; 3],
    pub hi_angstrom: [f64; 3],
    pub pitch_angstrom: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { lo_angstrom: [-5.0, -5.0, 1.0], hi_angstrom: [5.0, 5.0, 11.0], pitch_angstrom: 0.5 }
    }
}

impl GridConfig {
    pub fn grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::covering(
            Vector3::from(self.lo_angstrom) / 1e10,
            Vector3::from(self.hi_angstrom) / 1e10,
            self.pitch_angstrom / 1e10,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Omitted: 1e-3 times the largest row norm.
    pub lambda: Option<f64>,
    pub clamp_nonnegative: bool,
    pub max_iter: usize,
    pub tol: f64,
    pub require_convergence: bool,
    /// Operator entries below this are dropped.
    pub floor: f64,
    /// Weight rows by their shot-noise standard deviation when records carry n_m.
    pub weighted: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let o = InvertOptions::default();
        SolverConfig {
            lambda: o.lambda,
            clamp_nonnegative: o.clamp_nonnegative,
            max_iter: o.max_iter,
            tol: o.tol,
            require_convergence: o.require_convergence,
            floor: crate::inversion::DEFAULT_FLOOR,
            weighted: true,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> InvertOptions {
        InvertOptions {
            lambda: self.lambda,
            clamp_nonnegative: self.clamp_nonnegative,
            max_iter: self.max_iter,
            tol: self.tol,
            require_convergence: self.require_convergence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { enabled: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub peak_threshold: f64,
    pub r_cut_angstrom: f64,
    pub method: MatchMethod,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { peak_threshold: crate::analysis::DEFAULT_PEAK_THRESHOLD, r_cut_angstrom: 1.0, method: MatchMethod::Greedy }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub depths_nm: Vec<f64>,
    pub theta_deg: Vec<f64>,
    pub phi_deg: f64,
    pub r_max_nm: f64,
    pub n_samples: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            depths_nm: vec![2.5],
            theta_deg: vec![0.0, 15.0, 30.0, 45.0, 60.0],
            phi_deg: 0.0,
            r_max_nm: 1.4,
            n_samples: 57,
        }
    }
}

impl FieldConfig {
    pub fn orientations(&self, b0: f64) -> Result<Vec<FieldOrientation>> {
        if self.theta_deg.is_empty() {
            return Err(Error::invalid("field.theta_deg is empty"));
        }
        self.theta_deg.iter().map(|t| FieldOrientation::new(t.to_radians(), self.phi_deg.to_radians(), b0)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleTask {
    /// l_net along the theta = 0 ray for the structure's spins.
    Sweep,
    /// Coherence envelope of the structure's spins as a rigid cluster.
    TRho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub task: OracleTask,
    pub b_decpl_t: f64,
    /// Omitted: the cycle's nominal tau (10 pulse lengths).
    pub tau_us: Option<f64>,
    /// Use the fitted scale factor of the cycle for the schedules instead of schedule.a.
    pub use_fitted_a: bool,
    pub r_min_angstrom: f64,
    pub r_max_angstrom: f64,
    pub dr_angstrom: f64,
    /// T_rho: `false` runs free evolution.
    pub decoupling: bool,
    pub free_step_us: f64,
    pub n_orientations: usize,
    pub max_steps: u64,
    pub n_samples: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            task: OracleTask::Sweep,
            b_decpl_t: 0.3,
            tau_us: None,
            use_fitted_a: true,
            r_min_angstrom: 1.0,
            r_max_angstrom: 8.0,
            dr_angstrom: 0.1,
            decoupling: true,
            free_step_us: 0.1,
            n_orientations: 32,
            max_steps: 10_000_000,
            n_samples: 80,
        }
    }
}

impl OracleConfig {
    pub fn decoupling_params(&self, gamma: f64) -> DecouplingParams {
        DecouplingParams { b_decpl: self.b_decpl_t, tau: self.tau_us.map(|t| t / 1e6), gamma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Target isotope label, e.g. `1H`, `13C`, `14N`.
    pub species: String,
    /// Added to every structure coordinate.
    pub structure_offset_angstrom: [f64; 3],
    pub probe: ProbeConfig,
    pub scan: ScanConfig,
    pub schedule: ScheduleConfig,
    pub coherence: CoherenceConfig,
    pub grid: GridConfig,
    pub solver: SolverConfig,
    pub noise: NoiseConfig,
    pub analysis: AnalysisConfig,
    pub field: FieldConfig,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            species: "13C".into(),
            structure_offset_angstrom: [0.0; 3],
            probe: ProbeConfig::default(),
            scan: ScanConfig::default(),
            schedule: ScheduleConfig::default(),
            coherence: CoherenceConfig::default(),
            grid: GridConfig::default(),
            solver: SolverConfig::default(),
            noise: NoiseConfig::default(),
            analysis: AnalysisConfig::default(),
            field: FieldConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn species(&self) -> Result<NuclearSpecies> {
        gyromagnetic(&self.species)
    }

    pub fn structure_offset(&self) -> Vector3<f64> {
        Vector3::from(self.structure_offset_angstrom) / 1e10
    }

    /// Check every section against the preconditions of the module that consumes it.
    pub fn validate(&self) -> Result<()> {
        let sp = self.species()?;
        if sp.gamma == 0.0 {
            return Err(Error::invalid(format!("species {} has no nuclear moment", self.species)));
        }
        if !self.structure_offset_angstrom.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("structure offset must be finite"));
        }
        let p = &self.probe;
        if !(p.depth_nm > 0.0 && p.pitch_nm > 0.0 && (0.0..1.0).contains(&p.threshold)) {
            return Err(Error::invalid("probe depth and pitch must be positive, threshold in [0, 1)"));
        }
        if p.model == ModelTag::ImportedGrid && p.grid_file.is_none() {
            return Err(Error::invalid("imported-grid needs probe.grid_file"));
        }
        self.scan.params().validate()?;
        self.schedule.params().validate()?;
        self.coherence.params().validate()?;
        self.grid.grid()?;
        let s = &self.solver;
        if s.max_iter == 0 || !(s.tol > 0.0) || !(s.floor >= 0.0) || s.lambda.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::invalid("solver max_iter, tol, floor and lambda out of range"));
        }
        let a = &self.analysis;
        if !(0.0..=1.0).contains(&a.peak_threshold) || !(a.r_cut_angstrom > 0.0) {
            return Err(Error::invalid("analysis peak_threshold must lie in [0, 1] and r_cut be positive"));
        }
        let f = &self.field;
        if f.depths_nm.is_empty() || f.depths_nm.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::invalid("field.depths_nm must be non-empty and positive"));
        }
        if f.n_samples == 0 || !(f.r_max_nm >= 0.0) {
            return Err(Error::invalid("field.n_samples must be >= 1 and r_max non-negative"));
        }
        f.orientations(1.0)?;
        let o = &self.oracle;
        o.decoupling_params(sp.gamma).validate()?;
        if !(o.dr_angstrom > 0.0 && o.r_min_angstrom >= 0.0 && o.r_max_angstrom >= o.r_min_angstrom) {
            return Err(Error::invalid("oracle r range must satisfy 0 <= r_min <= r_max with dr > 0"));
        }
        if o.n_orientations == 0 || o.max_steps == 0 || o.n_samples == 0 || !(o.free_step_us > 0.0) {
            return Err(Error::invalid("oracle n_orientations, max_steps, n_samples and free_step must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_sectional_default() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.scan.params(), ScanParams::sectional());
        assert_eq!(c.schedule.params(), ScheduleParams::default());
    }

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.scan.mode = ScanMode::Extended;
        c.species = "14N".into();
        c.solver.lambda = Some(0.01);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_sections() {
        assert!(RunConfig::from_toml("species = \"12C\"").is_err());
        assert!(RunConfig::from_toml("[field]\ntheta_deg = []").is_err());
        assert!(RunConfig::from_toml("[schedule]\nrho_det = 1.5").is_err());
        assert!(RunConfig::from_toml("[unknown]\nx = 1").is_err());
        assert!(RunConfig::from_toml("[probe]\nmodel = \"imported-grid\"").is_err());
    }
}
