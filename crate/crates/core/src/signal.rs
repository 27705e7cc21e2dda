//! Closed-form NSS signal model and per-slice control schedules.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::SliceSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceParams {
    /// s
    pub t2_probe: f64,
    /// s
    pub t1_probe: f64,
    /// s; `f64::INFINITY` disables the driven-coherence term.
    pub t_rho_target: f64,
    /// s
    pub t_nuclear_probe: f64,
}

impl Default for CoherenceParams {
    fn default() -> Self {
        CoherenceParams { t2_probe: 0.1, t1_probe: 1.0, t_rho_target: 0.1, t_nuclear_probe: 60.0 }
    }
}

impl CoherenceParams {
    /// No decoherence anywhere.
    pub fn ideal() -> Self {
        CoherenceParams {
            t2_probe: f64::INFINITY,
            t1_probe: f64::INFINITY,
            t_rho_target: f64::INFINITY,
            t_nuclear_probe: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.t2_probe, self.t1_probe, self.t_rho_target, self.t_nuclear_probe];
        if all.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::invalid("coherence times must be positive"));
        }
        if self.t1_probe < self.t2_probe {
            return Err(Error::invalid("T1 of the probe must not be shorter than T2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    /// Total detection time, s.
    pub t_det: f64,
    /// s
    pub t_ctrl: f64,
    /// T
    pub b_ac: f64,
    pub n_m: u32,
    /// s per readout
    pub t_m: f64,
    pub rho_det: f64,
    pub rho_ctrl: f64,
    /// Decoupling scale factor.
    pub a: f64,
}

impl ControlSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_det > 0.0 && self.rho_det <= 1.0 && self.rho_ctrl > 0.0 && self.rho_ctrl <= 1.0) {
            return Err(Error::invalid("rho_det and rho_ctrl must lie in (0, 1]"));
        }
        if !(self.t_det > 0.0 && self.t_ctrl > 0.0) {
            return Err(Error::invalid("t_det and t_ctrl must be positive"));
        }
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(Error::invalid("scale factor a must lie in (0, 1]"));
        }
        if !(self.b_ac > 0.0) || !(self.t_m >= 0.0) {
            return Err(Error::invalid("B_AC must be positive and t_m non-negative"));
        }
        Ok(())
    }

    /// Protocol length excluding readout, s.
    pub fn protocol_time(&self) -> f64 {
        self.t_det + self.t_ctrl
    }
}

/// Constants that turn a slice into a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Fine-driving amplitude at the surface slice, T.
    pub b_ac0: f64,
    pub rho_det: f64,
    pub rho_ctrl: f64,
    pub a: f64,
    pub n_m: u32,
    pub t_m: f64,
    /// Scale B_AC with the local gradient; when false B_AC stays at b_ac0.
    pub gradient_scaled_drive: bool,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            b_ac0: 0.5e-6,
            rho_det: 0.2,
            rho_ctrl: 0.2,
            a: 0.3,
            n_m: 1000,
            t_m: 5e-6,
            gradient_scaled_drive: true,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_ac0 > 0.0) {
            return Err(Error::invalid("b_ac0 must be positive"));
        }
        if !(self.rho_det > 0.0 && self.rho_det <= 1.0 && self.rho_ctrl > 0.0 && self.rho_ctrl <= 1.0) {
            return Err(Error::invalid("rho_det and rho_ctrl must lie in (0, 1]"));
        }
        if !(self.a > 0.0 && self.a <= 1.0) {
            return Err(Error::invalid("scale factor a must lie in (0, 1]"));
        }
        if !(self.t_m >= 0.0) {
            return Err(Error::invalid("t_m must be non-negative"));
        }
        Ok(())
    }
}

/// Schedule for one slice. `surface_gradient` is |grad Gamma| at r = 0 for the same
/// orientation.
pub fn schedule_for_slice(
    slice: &SliceSpec,
    surface_gradient: f64,
    params: &ScheduleParams,
    gamma_n: f64,
) -> Result<ControlSchedule> {
    if slice.gamma == 0.0 || !slice.gamma.is_finite() {
        return Err(Error::invalid(format!("slice r = {:e} m has zero coupling", slice.r)));
    }
    let b_ac = if params.gradient_scaled_drive {
        if !(slice.gradient_norm > 0.0) || !(surface_gradient > 0.0) {
            return Err(Error::ZeroGradient { r: slice.r });
        }
        params.b_ac0 * slice.gradient_norm / surface_gradient
    } else {
        params.b_ac0
    };
    Ok(ControlSchedule {
        t_det: PI * params.rho_det / (params.a * slice.gamma.abs()),
        t_ctrl: PI * params.rho_ctrl / (gamma_n.abs() * b_ac),
        b_ac,
        n_m: params.n_m,
        t_m: params.t_m,
        rho_det: params.rho_det,
        rho_ctrl: params.rho_ctrl,
        a: params.a,
    })
}

/// Per-spin response S of a spin with coupling `k` to a slice at `gamma_slice`.
pub fn single_spin_response(
    gamma_slice: f64,
    k: f64,
    sched: &ControlSchedule,
    coh: &CoherenceParams,
    gamma_n: f64,
) -> f64 {
    let a = sched.a;
    let rabi = gamma_n.abs() * sched.b_ac;
    let detuning = a * (gamma_slice - k);
    let omega2 = detuning * detuning + rabi * rabi;
    let omega = omega2.sqrt();
    let decay = if coh.t_rho_target.is_finite() { 2.0 * PI / coh.t_rho_target } else { 0.0 };
    // 1 - cos x written as 2 sin^2(x/2) to keep small phases accurate
    let det = 2.0 * (a * k * sched.t_det / 4.0).sin().powi(2);
    let lor = rabi * rabi / (omega2 + decay * decay);
    det * lor * (omega * sched.t_ctrl / 2.0).sin().powi(2)
}

/// -ln(1 - S): the additive contribution of one spin to l_net.
pub fn linear_response(s: f64) -> f64 {
    -(-s).ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub slice_index: usize,
    pub slice: SliceSpec,
    pub schedule: ControlSchedule,
    pub s_net: f64,
    pub l_net: f64,
    /// 0 for noise-free records.
    pub n_m_used: u32,
}

/// Net slice signal: s_net = 1/2 exp(-t_det/T2) prod(1 - S_i), l_net = -ln(2 s_net).
pub fn net_slice_signal(
    slice: &SliceSpec,
    couplings: &[f64],
    sched: &ControlSchedule,
    coh: &CoherenceParams,
    gamma_n: f64,
) -> Result<SignalRecord> {
    let mut l = if coh.t2_probe.is_finite() { sched.t_det / coh.t2_probe } else { 0.0 };
    for k in couplings {
        let s = single_spin_response(slice.gamma, *k, sched, coh, gamma_n);
        if s >= 1.0 {
            return Err(Error::SaturatedSlice { index: 0 });
        }
        l += linear_response(s);
    }
    let s_net = 0.5 * (-l).exp();
    if !(s_net > 0.0) {
        return Err(Error::SaturatedSlice { index: 0 });
    }
    Ok(SignalRecord { slice_index: 0, slice: *slice, schedule: *sched, s_net, l_net: l, n_m_used: 0 })
}

/// RNG stream for one slice, derived from the root seed so parallel runs are reproducible.
pub fn slice_rng(seed: u64, slice_index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(slice_index as u64);
    rng
}

/// Replace s_net by a binomial estimate from `n_m` projective readouts.
pub fn shot_noise(record: &SignalRecord, n_m: u32, rng: &mut ChaCha20Rng) -> Result<SignalRecord> {
    if n_m == 0 {
        return Err(Error::invalid("shot noise needs n_m >= 1"));
    }
    let p = (0.5 + record.s_net).clamp(0.0, 1.0);
    let dist = Binomial::new(n_m as u64, p).map_err(|e| Error::invalid(e.to_string()))?;
    let count = dist.sample(rng);
    let floor = 1.0 / (4.0 * n_m as f64);
    let s_hat = (count as f64 / n_m as f64 - 0.5).clamp(floor, 0.5);
    Ok(SignalRecord { s_net: s_hat, l_net: -(2.0 * s_hat).ln(), n_m_used: n_m, ..*record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::FieldOrientation;

    const GH: f64 = 2.6752218744e8;

    fn slice(gamma: f64, gnorm: f64) -> SliceSpec {
        SliceSpec {
            r: 0.0,
            orientation: FieldOrientation::new(0.0, 0.0, 1.0).unwrap(),
            gamma,
            gradient: gnorm,
            gradient_norm: gnorm,
        }
    }

    fn on_resonance_s0() -> f64 {
        // (1 - cos(0.1 pi)) sin^2(0.1 pi), evaluated directly
        (1.0 - (0.1 * PI).cos()) * (0.1 * PI).sin().powi(2)
    }

    #[test]
    fn on_resonance_value() {
        let sl = slice(-5e4, 1e14);
        let sched = schedule_for_slice(&sl, 1e14, &ScheduleParams::default(), GH).unwrap();
        let s = single_spin_response(sl.gamma, sl.gamma, &sched, &CoherenceParams::ideal(), GH);
        assert!((s - on_resonance_s0()).abs() < 1e-15);
        assert!((s - 4.674e-3).abs() < 1e-6);
    }

    #[test]
    fn limits() {
        let sl = slice(3e4, 1e14);
        let sched = schedule_for_slice(&sl, 1e14, &ScheduleParams::default(), GH).unwrap();
        let coh = CoherenceParams::ideal();
        assert_eq!(single_spin_response(sl.gamma, 0.0, &sched, &coh, GH), 0.0);
        let far = single_spin_response(sl.gamma, 3e9, &sched, &coh, GH);
        assert!(far < 1e-12);
    }

    #[test]
    fn schedule_scaling() {
        let p = ScheduleParams::default();
        let a = schedule_for_slice(&slice(4e4, 2e14), 2e14, &p, GH).unwrap();
        let b = schedule_for_slice(&slice(2e4, 1e14), 2e14, &p, GH).unwrap();
        assert!((b.t_det / a.t_det - 2.0).abs() < 1e-12);
        assert!((b.b_ac / a.b_ac - 0.5).abs() < 1e-12);
        assert!((b.t_ctrl / a.t_ctrl - 2.0).abs() < 1e-12);
        assert_eq!(a.b_ac, 0.5e-6);
        assert!(matches!(schedule_for_slice(&slice(2e4, 0.0), 2e14, &p, GH), Err(Error::ZeroGradient { .. })));
    }

    #[test]
    fn empty_slice_is_baseline() {
        let sl = slice(5e4, 1e14);
        let sched = schedule_for_slice(&sl, 1e14, &ScheduleParams::default(), GH).unwrap();
        let r = net_slice_signal(&sl, &[], &sched, &CoherenceParams::ideal(), GH).unwrap();
        assert_eq!(r.s_net, 0.5);
        assert_eq!(r.l_net, 0.0);
        let coh = CoherenceParams::default();
        let r = net_slice_signal(&sl, &[], &sched, &coh, GH).unwrap();
        assert!((r.l_net - sched.t_det / coh.t2_probe).abs() < 1e-15);
    }

    #[test]
    fn identical_spins_scale_linearly() {
        let sl = slice(5e4, 1e14);
        let sched = schedule_for_slice(&sl, 1e14, &ScheduleParams::default(), GH).unwrap();
        let coh = CoherenceParams::default();
        let base = sched.t_det / coh.t2_probe;
        let s0 = single_spin_response(sl.gamma, sl.gamma, &sched, &coh, GH);
        let one = net_slice_signal(&sl, &[sl.gamma], &sched, &coh, GH).unwrap().l_net - base;
        for n in 1..6 {
            let ks = vec![sl.gamma; n];
            let r = net_slice_signal(&sl, &ks, &sched, &coh, GH).unwrap();
            let direct = -(2.0 * 0.5 * (-base).exp() * (1.0 - s0).powi(n as i32)).ln();
            assert!((r.l_net - direct).abs() < 1e-12);
            assert!(((r.l_net - base) / (n as f64 * one) - 1.0).abs() < 0.01);
        }
    }

    #[test]
    fn saturation_reported() {
        let sl = slice(5e4, 1e14);
        let mut p = ScheduleParams::default();
        p.rho_det = 1.0;
        p.rho_ctrl = 1.0;
        let sched = schedule_for_slice(&sl, 1e14, &p, GH).unwrap();
        let ks = vec![sl.gamma; 400];
        let r = net_slice_signal(&sl, &ks, &sched, &CoherenceParams::ideal(), GH);
        assert!(matches!(r, Err(Error::SaturatedSlice { .. })));
    }

    #[test]
    fn shot_noise_determinism_and_convergence() {
        let sl = slice(5e4, 1e14);
        let sched = schedule_for_slice(&sl, 1e14, &ScheduleParams::default(), GH).unwrap();
        let r = net_slice_signal(&sl, &[sl.gamma, sl.gamma], &sched, &CoherenceParams::default(), GH).unwrap();
        let a = shot_noise(&r, 1000, &mut slice_rng(7, 3)).unwrap();
        let b = shot_noise(&r, 1000, &mut slice_rng(7, 3)).unwrap();
        assert_eq!(a.s_net.to_bits(), b.s_net.to_bits());
        let n = 1_000_000u32;
        let big = shot_noise(&r, n, &mut slice_rng(11, 0)).unwrap();
        let p = 0.5 + r.s_net;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((big.s_net - r.s_net).abs() < 3.0 * sigma);
        assert!(shot_noise(&r, 0, &mut slice_rng(1, 1)).is_err());
    }

    #[test]
    fn noise_floor_keeps_l_finite() {
        let sl = slice(5e4, 1e14);
        let sched = schedule_for_slice(&sl, 1e14, &ScheduleParams::default(), GH).unwrap();
        let mut r = net_slice_signal(&sl, &[], &sched, &CoherenceParams::ideal(), GH).unwrap();
        r.s_net = 1e-9;
        let n = shot_noise(&r, 10, &mut slice_rng(1, 2)).unwrap();
        assert!(n.l_net.is_finite());
        assert!(n.s_net >= 1.0 / 40.0);
    }

    #[test]
    fn coherence_validation() {
        assert!(CoherenceParams::default().validate().is_ok());
        let mut c = CoherenceParams::default();
        c.t1_probe = 0.01;
        assert!(c.validate().is_err());
        c = CoherenceParams::default();
        c.t2_probe = 0.0;
        assert!(c.validate().is_err());
    }
}
