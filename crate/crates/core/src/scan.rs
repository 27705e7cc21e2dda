//! (r, theta, phi) sampling plans, forward signal model over a structure, and
//! experiment-time arithmetic.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molecule::{PhysicalConstants, ANGSTROM, NM};
use crate::probe::{coupling_gradient, coupling_tensor, slice_for, FieldOrientation, ProbeDensity, SliceSpec};
use crate::signal::{
    net_slice_signal, schedule_for_slice, shot_noise, slice_rng, CoherenceParams, ControlSchedule,
    ScheduleParams, SignalRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    /// m
    pub r_max: f64,
    /// m
    pub dr: f64,
    /// rad
    pub theta_max: f64,
    /// rad
    pub d_theta: f64,
    /// rad
    pub d_phi: f64,
    /// T
    pub b0_magnitude: f64,
}

impl ScanParams {
    /// Surface-section mode: r up to 1.4 nm in 0.25 Å steps, theta to 63 deg.
    pub fn sectional() -> Self {
        ScanParams {
            r_max: 1.4 * NM,
            dr: 0.25 * ANGSTROM,
            theta_max: 63f64.to_radians(),
            d_theta: 1.5f64.to_radians(),
            d_phi: 6f64.to_radians(),
            b0_magnitude: 1.0,
        }
    }

    /// Whole-membrane mode: r up to 4 nm in 0.5 Å steps, theta to 45 deg.
    pub fn extended() -> Self {
        ScanParams {
            r_max: 4.0 * NM,
            dr: 0.5 * ANGSTROM,
            theta_max: 45f64.to_radians(),
            d_theta: 1.5f64.to_radians(),
            d_phi: 5f64.to_radians(),
            b0_magnitude: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dr > 0.0 && self.d_theta > 0.0 && self.d_phi > 0.0) {
            return Err(Error::invalid("dr, d_theta and d_phi must be positive"));
        }
        if !(self.r_max >= 0.0) {
            return Err(Error::invalid("r_max must be non-negative"));
        }
        if !(self.theta_max >= 0.0 && self.theta_max < std::f64::consts::FRAC_PI_2) {
            return Err(Error::invalid("theta_max must lie in [0, pi/2)"));
        }
        Ok(())
    }

    fn steps(span: f64, step: f64) -> usize {
        (span / step + 1e-9).floor() as usize
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..=Self::steps(self.r_max, self.dr)).map(|i| i as f64 * self.dr).collect()
    }

    /// Orientations in canonical order: theta ascending, phi ascending; theta = 0 once.
    pub fn orientations(&self) -> Result<Vec<FieldOrientation>> {
        let n_phi = (std::f64::consts::TAU / self.d_phi - 1e-9).ceil().max(1.0) as usize;
        let mut out = Vec::new();
        for i in 0..=Self::steps(self.theta_max, self.d_theta) {
            let theta = i as f64 * self.d_theta;
            if i == 0 {
                out.push(FieldOrientation::new(0.0, 0.0, self.b0_magnitude)?);
                continue;
            }
            for j in 0..n_phi {
                out.push(FieldOrientation::new(theta, j as f64 * self.d_phi, self.b0_magnitude)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub params: ScanParams,
    pub orientations: Vec<FieldOrientation>,
    /// Orientation-major, r ascending.
    pub slices: Vec<SliceSpec>,
    /// |grad Gamma| at r = 0 per orientation.
    pub surface_gradients: Vec<f64>,
    pub n_r: usize,
}

impl ScanPlan {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn orientation_of(&self, slice_index: usize) -> usize {
        slice_index / self.n_r
    }

    pub fn surface_gradient(&self, slice_index: usize) -> f64 {
        self.surface_gradients[self.orientation_of(slice_index)]
    }
}

pub fn build_scan(
    params: &ScanParams,
    probe: &ProbeDensity,
    gamma_n: f64,
    consts: &PhysicalConstants,
) -> Result<ScanPlan> {
    params.validate()?;
    let orientations = params.orientations()?;
    let radii = params.radii();
    if orientations.is_empty() || radii.is_empty() {
        return Err(Error::invalid("degenerate scan plan (0 slices)"));
    }
    let per: Vec<Result<(Vec<SliceSpec>, f64)>> = orientations
        .par_iter()
        .map(|o| {
            let slices = radii
                .iter()
                .map(|r| slice_for(probe, *r, o, params.dr, gamma_n, consts))
                .collect::<Result<Vec<_>>>()?;
            let g0 = coupling_gradient(probe, &Vector3::zeros(), &o.unit(), gamma_n, consts).norm();
            Ok((slices, g0))
        })
        .collect();
    let mut slices = Vec::with_capacity(orientations.len() * radii.len());
    let mut surface_gradients = Vec::with_capacity(orientations.len());
    for p in per {
        let (s, g) = p?;
        slices.extend(s);
        surface_gradients.push(g);
    }
    Ok(ScanPlan { params: *params, orientations, slices, surface_gradients, n_r: radii.len() })
}

/// Control schedule for every slice of the plan, in plan order.
pub fn plan_schedules(plan: &ScanPlan, params: &ScheduleParams, gamma_n: f64) -> Result<Vec<ControlSchedule>> {
    params.validate()?;
    plan.slices
        .par_iter()
        .enumerate()
        .map(|(i, s)| schedule_for_slice(s, plan.surface_gradient(i), params, gamma_n))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub n_m: u32,
    pub seed: u64,
}

/// Signal records for every slice, in plan order.
#[allow(clippy::too_many_arguments)]
pub fn run_forward(
    plan: &ScanPlan,
    spins: &[Vector3<f64>],
    probe: &ProbeDensity,
    sched_params: &ScheduleParams,
    coh: &CoherenceParams,
    gamma_n: f64,
    consts: &PhysicalConstants,
    noise: Option<NoiseSpec>,
) -> Result<Vec<SignalRecord>> {
    coh.validate()?;
    if let Some(p) = spins.iter().find(|p| p.z < 0.0) {
        return Err(Error::BelowSurface { z: p.z });
    }
    let tensors: Vec<Matrix3<f64>> =
        spins.par_iter().map(|p| coupling_tensor(probe, p, gamma_n, consts)).collect();
    let schedules = plan_schedules(plan, sched_params, gamma_n)?;
    plan.slices
        .par_iter()
        .enumerate()
        .map(|(i, slice)| {
            let b = slice.orientation.unit();
            let ks: Vec<f64> = tensors.iter().map(|t| (b.transpose() * t * b)[(0, 0)]).collect();
            let mut rec = net_slice_signal(slice, &ks, &schedules[i], coh, gamma_n).map_err(|e| match e {
                Error::SaturatedSlice { .. } => Error::SaturatedSlice { index: i },
                e => e,
            })?;
            rec.slice_index = i;
            if let Some(n) = noise {
                rec = shot_noise(&rec, n.n_m, &mut slice_rng(n.seed, i))?;
            }
            Ok(rec)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEstimate {
    /// Summed over all slices, s.
    pub t_control: f64,
    pub t_detect: f64,
    pub t_measure: f64,
    pub t_total: f64,
    /// Mean time per orientation, s.
    pub per_orientation: f64,
    pub n_orientations: usize,
    pub n_slices: usize,
}

/// Sum of t_det + t_ctrl + n_m t_m over the plan.
pub fn estimate_time(plan: &ScanPlan, schedules: &[ControlSchedule], n_m: u32, t_m: f64) -> Result<TimeEstimate> {
    if schedules.len() != plan.len() {
        return Err(Error::invalid("schedule count does not match the plan"));
    }
    let t_control: f64 = schedules.iter().map(|s| s.t_ctrl).sum();
    let t_detect: f64 = schedules.iter().map(|s| s.t_det).sum();
    let t_measure = plan.len() as f64 * n_m as f64 * t_m;
    let t_total = t_control + t_detect + t_measure;
    let n_orientations = plan.orientations.len();
    Ok(TimeEstimate {
        t_control,
        t_detect,
        t_measure,
        t_total,
        per_orientation: t_total / n_orientations as f64,
        n_orientations,
        n_slices: plan.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molecule::gyromagnetic;

    fn small_params() -> ScanParams {
        ScanParams {
            r_max: 5.0 * ANGSTROM,
            dr: 0.5 * ANGSTROM,
            theta_max: 30f64.to_radians(),
            d_theta: 10f64.to_radians(),
            d_phi: 60f64.to_radians(),
            b0_magnitude: 1.0,
        }
    }

    #[test]
    fn plan_counts_and_order() {
        let p = small_params();
        let probe = ProbeDensity::point(2.5e-9).unwrap();
        let g = gyromagnetic("13C").unwrap().gamma;
        let plan = build_scan(&p, &probe, g, &PhysicalConstants::default()).unwrap();
        assert_eq!(plan.orientations.len(), 1 + 3 * 6);
        assert_eq!(plan.n_r, 11);
        assert_eq!(plan.len(), plan.orientations.len() * plan.n_r);
        for (i, s) in plan.slices.iter().enumerate() {
            assert_eq!(s.orientation, plan.orientations[i / plan.n_r]);
            assert!((s.r - (i % plan.n_r) as f64 * p.dr).abs() < 1e-20);
        }
    }

    #[test]
    fn sectional_and_extended_counts() {
        let s = ScanParams::sectional();
        assert_eq!(s.orientations().unwrap().len(), 1 + 42 * 60);
        assert_eq!(s.radii().len(), 57);
        let e = ScanParams::extended();
        assert_eq!(e.orientations().unwrap().len(), 1 + 30 * 72);
        assert_eq!(e.radii().len(), 81);
        let mut z = s;
        z.theta_max = 0.0;
        assert_eq!(z.orientations().unwrap().len(), 1);
    }

    #[test]
    fn empty_scene_is_baseline() {
        let p = small_params();
        let probe = ProbeDensity::point(2.5e-9).unwrap();
        let g = gyromagnetic("13C").unwrap().gamma;
        let c = PhysicalConstants::default();
        let plan = build_scan(&p, &probe, g, &c).unwrap();
        let coh = CoherenceParams::default();
        let recs = run_forward(&plan, &[], &probe, &ScheduleParams::default(), &coh, g, &c, None).unwrap();
        for r in recs {
            assert!((r.l_net - r.schedule.t_det / coh.t2_probe).abs() < 1e-15);
        }
    }

    #[test]
    fn time_with_zero_readouts() {
        let p = small_params();
        let probe = ProbeDensity::point(2.5e-9).unwrap();
        let g = gyromagnetic("13C").unwrap().gamma;
        let plan = build_scan(&p, &probe, g, &PhysicalConstants::default()).unwrap();
        let sch = plan_schedules(&plan, &ScheduleParams::default(), g).unwrap();
        let t = estimate_time(&plan, &sch, 0, 5e-6).unwrap();
        assert_eq!(t.t_measure, 0.0);
        assert!((t.t_total - t.t_control - t.t_detect).abs() < 1e-12 * t.t_total);
    }

    #[test]
    fn below_surface_spin_rejected() {
        let p = small_params();
        let probe = ProbeDensity::point(2.5e-9).unwrap();
        let g = gyromagnetic("13C").unwrap().gamma;
        let c = PhysicalConstants::default();
        let plan = build_scan(&p, &probe, g, &c).unwrap();
        let spins = [Vector3::new(0.0, 0.0, -1e-10)];
        let r = run_forward(&plan, &spins, &probe, &ScheduleParams::default(), &CoherenceParams::default(), g, &c, None);
        assert!(r.is_err());
    }

    #[test]
    fn sectional_time_budget() {
        let p = ScanParams::sectional();
        let probe = ProbeDensity::point(2.5e-9).unwrap();
        let g = gyromagnetic("13C").unwrap().gamma;
        let plan = build_scan(&p, &probe, g, &PhysicalConstants::default()).unwrap();
        let sp = ScheduleParams::default();
        let sch = plan_schedules(&plan, &sp, g).unwrap();
        let t = estimate_time(&plan, &sch, sp.n_m, sp.t_m).unwrap();
        assert!((t.per_orientation / 2.82 - 1.0).abs() < 0.05, "{}", t.per_orientation);
        assert!((t.t_total / 7200.0 - 1.0).abs() < 0.05, "{}", t.t_total);
    }
}
