//! Exact state-vector simulation of small nuclear clusters under the NSS pulse program.
//!
//! Targets live in their own rotating frames. The probe electron is not simulated: its
//! state enters as a sign on the conditioned ZZ shifts, flipped by the events of the
//! program timeline. Maximally mixed targets are handled by normalised traces, which
//! equal the average over computational-basis initial states.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector, Quaternion, UnitQuaternion, Vector3};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molecule::PhysicalConstants;
use crate::probe::{coupling_at, FieldOrientation, ProbeDensity, SliceSpec};
use crate::signal::{schedule_for_slice, ControlSchedule, ScheduleParams};

pub const MAX_SPINS: usize = 10;
/// Largest cluster accepted by the signal oracle.
pub const MAX_SWEEP_SPINS: usize = 8;
/// Per-segment unitarity deficit allowed for a propagator.
pub const UNITARITY_TOL: f64 = 1e-10;
/// Deficit allowed for the product over a whole program.
pub const PROGRAM_UNITARITY_TOL: f64 = 1e-8;
/// Conditioned ZZ shift during detection, in units of k (sigma_z convention).
pub const DETECTION_SCALE: f64 = 0.25;
/// Conditioned ZZ shift during control, in units of k.
pub const CONTROL_SCALE: f64 = 0.5;

type CMat = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpin {
    /// m, surface frame.
    pub position: Vector3<f64>,
    /// rad s^-1 T^-1
    pub gamma: f64,
    /// Probe coupling, rad s^-1.
    pub k: f64,
    /// Contact hyperfine, rad s^-1.
    #[serde(default)]
    pub hyperfine: f64,
    /// Rotating-frame offset, rad s^-1.
    #[serde(default)]
    pub detuning: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinSystem {
    pub spins: Vec<OracleSpin>,
    /// Unit vector along B0.
    pub b0_direction: Vector3<f64>,
    /// T
    pub b0_magnitude: f64,
}

impl SpinSystem {
    pub fn new(spins: Vec<OracleSpin>, b0_direction: Vector3<f64>, b0_magnitude: f64) -> Result<Self> {
        let sys = SpinSystem { spins, b0_direction, b0_magnitude };
        sys.validate()?;
        Ok(sys)
    }

    /// Spins at `sites` (position, gamma) with probe couplings taken from `probe`.
    pub fn from_sites(
        sites: &[(Vector3<f64>, f64)],
        probe: &ProbeDensity,
        orientation: &FieldOrientation,
        consts: &PhysicalConstants,
    ) -> Result<Self> {
        let mut spins = Vec::with_capacity(sites.len());
        for (p, g) in sites {
            let k = coupling_at(probe, p, orientation, *g, consts)?;
            spins.push(OracleSpin { position: *p, gamma: *g, k, hyperfine: 0.0, detuning: 0.0 });
        }
        SpinSystem::new(spins, orientation.unit(), orientation.b0_magnitude)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spins.len() > MAX_SPINS {
            return Err(Error::OversizeSystem(self.spins.len(), MAX_SPINS));
        }
        if (self.b0_direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("B0 direction must be a unit vector"));
        }
        for s in &self.spins {
            let finite = s.position.iter().all(|v| v.is_finite())
                && s.gamma.is_finite()
                && s.k.is_finite()
                && s.hyperfine.is_finite()
                && s.detuning.is_finite();
            if !finite || s.gamma == 0.0 {
                return Err(Error::invalid("spin parameters must be finite with non-zero gamma"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.spins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    pub fn dim(&self) -> usize {
        1 << self.spins.len()
    }

    /// Secular couplings J_ij for i < j.
    pub fn couplings(&self, consts: &PhysicalConstants) -> Result<Vec<(usize, usize, f64)>> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let (a, b) = (&self.spins[i], &self.spins[j]);
                let jij = dipolar_coupling(&a.position, &b.position, a.gamma, b.gamma, &self.b0_direction, consts)?;
                out.push((i, j, jij));
            }
        }
        Ok(out)
    }
}

/// Secular dipolar coupling J = g_i g_j hbar (mu0/4pi) (1 - 3 cos^2 theta) / r^3, rad s^-1.
pub fn dipolar_coupling(
    ri: &Vector3<f64>,
    rj: &Vector3<f64>,
    gi: f64,
    gj: f64,
    b: &Vector3<f64>,
    consts: &PhysicalConstants,
) -> Result<f64> {
    let r = rj - ri;
    let d2 = r.norm_squared();
    if d2 == 0.0 {
        return Err(Error::ZeroLength);
    }
    let c2 = b.dot(&r).powi(2) / d2;
    Ok(gi * gj * consts.hbar * consts.mu0_over_4pi * (1.0 - 3.0 * c2) / (d2 * d2.sqrt()))
}

fn sigma_z(b: usize, j: usize) -> f64 {
    if (b >> j) & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Static and control pieces of the target Hamiltonian (rad s^-1, sigma convention).
#[derive(Debug, Clone)]
pub struct Hamiltonians {
    pub n: usize,
    pub gammas: Vec<f64>,
    pub k: Vec<f64>,
    pub hyperfine: Vec<f64>,
    pub detuning: Vec<f64>,
    pub couplings: Vec<(usize, usize, f64)>,
    dipolar: CMat,
}

pub fn build_hamiltonians(sys: &SpinSystem, consts: &PhysicalConstants) -> Result<Hamiltonians> {
    sys.validate()?;
    let n = sys.len();
    let dim = sys.dim();
    let couplings = sys.couplings(consts)?;
    let mut dd = CMat::zeros(dim, dim);
    for &(i, j, jij) in &couplings {
        let flip_flop = sys.spins[i].gamma == sys.spins[j].gamma;
        for b in 0..dim {
            dd[(b, b)] += Complex64::new(jij / 4.0 * sigma_z(b, i) * sigma_z(b, j), 0.0);
            if flip_flop && ((b >> i) & 1) != ((b >> j) & 1) {
                let c = b ^ (1 << i) ^ (1 << j);
                dd[(c, b)] += Complex64::new(-jij / 4.0, 0.0);
            }
        }
    }
    Ok(Hamiltonians {
        n,
        gammas: sys.spins.iter().map(|s| s.gamma).collect(),
        k: sys.spins.iter().map(|s| s.k).collect(),
        hyperfine: sys.spins.iter().map(|s| s.hyperfine).collect(),
        detuning: sys.spins.iter().map(|s| s.detuning).collect(),
        couplings,
        dipolar: dd,
    })
}

impl Hamiltonians {
    pub fn dim(&self) -> usize {
        1 << self.n
    }

    /// Offsets, conditioned shifts sign*scale*k and sign*A/2, plus the dipolar term.
    pub fn static_part(&self, sign: f64, scale: f64) -> CMat {
        let mut h = self.dipolar.clone();
        for b in 0..self.dim() {
            let mut e = 0.0;
            for j in 0..self.n {
                e += (self.detuning[j] / 2.0 + sign * scale * self.k[j] + sign * self.hyperfine[j] / 2.0)
                    * sigma_z(b, j);
            }
            h[(b, b)] += Complex64::new(e, 0.0);
        }
        h
    }

    /// sum_j gamma_j B/2 (cos phase X_j + sin phase Y_j).
    pub fn control_part(&self, amplitude: f64, phase: f64) -> CMat {
        let dim = self.dim();
        let mut h = CMat::zeros(dim, dim);
        let (s, c) = phase.sin_cos();
        for j in 0..self.n {
            let w = self.gammas[j] * amplitude / 2.0;
            for b in 0..dim {
                let f = b ^ (1 << j);
                // <f| (c X + s Y) |b>: Y|0> = i|1>, Y|1> = -i|0>
                let y = if (b >> j) & 1 == 0 { Complex64::new(0.0, s) } else { Complex64::new(0.0, -s) };
                h[(f, b)] += (Complex64::new(c, 0.0) + y) * w;
            }
        }
        h
    }
}

/// exp(-i H t) for Hermitian H.
pub fn expm_hermitian(h: &CMat, t: f64) -> Result<CMat> {
    let dim = h.nrows();
    if dim == 1 {
        return Ok(CMat::from_element(1, 1, Complex64::from_polar(1.0, -h[(0, 0)].re * t)));
    }
    let eig = h.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let mut vd = v.clone();
    for (col, lam) in eig.eigenvalues.iter().enumerate() {
        let ph = Complex64::from_polar(1.0, -lam * t);
        for r in 0..dim {
            vd[(r, col)] *= ph;
        }
    }
    let u = vd * v.adjoint();
    let deficit = unitarity_deficit(&u);
    if deficit > UNITARITY_TOL {
        return Err(Error::Unitarity { deficit });
    }
    Ok(u)
}

/// max |(U^dag U - I)_ij|
pub fn unitarity_deficit(u: &CMat) -> f64 {
    let p = u.adjoint() * u;
    let mut worst: f64 = 0.0;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            let want = if i == j { ONE } else { ZERO };
            worst = worst.max((p[(i, j)] - want).norm());
        }
    }
    worst
}

fn mat_pow(u: &CMat, mut n: u64) -> CMat {
    let mut acc = CMat::identity(u.nrows(), u.ncols());
    let mut base = u.clone();
    while n > 0 {
        if n & 1 == 1 {
            acc = &base * &acc;
        }
        n >>= 1;
        if n > 0 {
            base = &base * &base;
        }
    }
    acc
}

/// Nearest unitary (polar factor).
fn reunitarize(m: &CMat) -> CMat {
    let svd = m.clone().svd(true, true);
    svd.u.expect("requested") * svd.v_t.expect("requested")
}

/// u^n for long runs, re-projected after every product so rounding does not compound.
fn unitary_pow(u: &CMat, mut n: u64) -> CMat {
    let mut acc = CMat::identity(u.nrows(), u.ncols());
    let mut base = reunitarize(u);
    while n > 0 {
        if n & 1 == 1 {
            acc = reunitarize(&(&base * &acc));
        }
        n >>= 1;
        if n > 0 {
            base = reunitarize(&(&base * &base));
        }
    }
    acc
}

/// Re Tr(a^dag b)
fn re_trace_adj(a: &CMat, b: &CMat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    AllTargets,
    Probe,
    Storage,
}

/// Piecewise-constant stretch of the timeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// s
    pub duration: f64,
    /// Control field, T.
    #[serde(default)]
    pub amplitude: f64,
    /// rad
    #[serde(default)]
    pub phase: f64,
    /// Carrier detuning, rad s^-1. The applied phase is `phase + detuning * t` with t the
    /// program clock at the start of the segment.
    #[serde(default)]
    pub detuning: f64,
    #[serde(default)]
    pub target: Target,
}

impl Segment {
    pub fn free(duration: f64) -> Self {
        Segment { duration, amplitude: 0.0, phase: 0.0, detuning: 0.0, target: Target::AllTargets }
    }

    fn ramped(&self) -> bool {
        self.amplitude != 0.0 && self.detuning != 0.0 && self.target == Target::AllTargets
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    Segment(Segment),
    /// pi/2 on the probe electron.
    ProbeHalfPi,
    /// Probe state moved into (or back out of) the donor nuclear storage.
    StorageSwap,
    /// pi pulse on the storage nucleus; inverts the detection echo sign.
    StoragePi,
    /// pi flip of the probe electron during control.
    ProbeFlip,
    Readout,
    Repeat { count: u64, body: Vec<Step> },
}

fn contains_events(steps: &[Step]) -> bool {
    steps.iter().any(|s| match s {
        Step::Segment(seg) => seg.ramped(),
        Step::Repeat { body, .. } => contains_events(body),
        Step::ProbeHalfPi | Step::Readout => false,
        _ => true,
    })
}

fn duration_of(steps: &[Step]) -> f64 {
    steps
        .iter()
        .map(|s| match s {
            Step::Segment(seg) => seg.duration,
            Step::Repeat { count, body } => *count as f64 * duration_of(body),
            _ => 0.0,
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PulseProgram {
    pub steps: Vec<Step>,
}

impl PulseProgram {
    pub fn duration(&self) -> f64 {
        duration_of(&self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        fn walk(steps: &[Step]) -> Result<()> {
            for s in steps {
                match s {
                    Step::Segment(seg) => {
                        let ok = seg.duration > 0.0
                            && seg.duration.is_finite()
                            && seg.amplitude.is_finite()
                            && seg.phase.is_finite()
                            && seg.detuning.is_finite();
                        if !ok {
                            return Err(Error::invalid("segment durations must be positive and finite"));
                        }
                    }
                    Step::Repeat { body, .. } => walk(body)?,
                    _ => {}
                }
            }
            Ok(())
        }
        walk(&self.steps)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: PulseProgram = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    /// Number of pi/2 pulses on the targets in one pass (repeats expanded).
    pub fn count_pulses(&self, pulse_length: f64, amplitude: f64) -> u64 {
        fn walk(steps: &[Step], t: f64, b: f64) -> u64 {
            steps
                .iter()
                .map(|s| match s {
                    Step::Segment(seg) => {
                        let hit = seg.target == Target::AllTargets
                            && (seg.amplitude - b).abs() <= 1e-12 * b.abs()
                            && (seg.duration - t).abs() <= 1e-9 * t;
                        u64::from(hit)
                    }
                    Step::Repeat { count, body } => count * walk(body, t, b),
                    _ => 0,
                })
                .sum()
        }
        walk(&self.steps, pulse_length, amplitude)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Detection,
    Control,
}

/// Program counter state carried between steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgramState {
    /// s
    pub clock: f64,
    pub mode: Mode,
    /// Probe sign seen by targets during detection.
    pub detect_sign: f64,
    /// Probe sign seen by targets during control.
    pub control_sign: f64,
}

impl ProgramState {
    pub fn start(branch: f64) -> Self {
        ProgramState { clock: 0.0, mode: Mode::Detection, detect_sign: branch, control_sign: 1.0 }
    }

    fn sign_scale(&self) -> (f64, f64) {
        match self.mode {
            Mode::Detection => (self.detect_sign, DETECTION_SCALE),
            Mode::Control => (self.control_sign, CONTROL_SCALE),
        }
    }
}

enum Chunk {
    Fixed(CMat, f64),
    Ramped(Segment),
}

/// Propagator engine with a cache of segment exponentials.
pub struct Evolver<'a> {
    ham: &'a Hamiltonians,
    cache: HashMap<(u64, u64, i8, u64), CMat>,
}

impl<'a> Evolver<'a> {
    pub fn new(ham: &'a Hamiltonians) -> Self {
        Evolver { ham, cache: HashMap::new() }
    }

    fn segment(&mut self, seg: &Segment, state: &ProgramState) -> Result<CMat> {
        let (sign, scale) = state.sign_scale();
        let amp = if seg.target == Target::AllTargets { seg.amplitude } else { 0.0 };
        let key = (seg.duration.to_bits(), amp.to_bits(), sign as i8, scale.to_bits());
        if !self.cache.contains_key(&key) {
            let mut h = self.ham.static_part(sign, scale);
            if amp != 0.0 {
                h += self.ham.control_part(amp, 0.0);
            }
            let u = expm_hermitian(&h, seg.duration)?;
            self.cache.insert(key, u);
        }
        let u0 = &self.cache[&key];
        let phase = seg.phase + seg.detuning * state.clock;
        if amp == 0.0 || phase == 0.0 {
            return Ok(u0.clone());
        }
        // collective z rotation commutes with the static part: U(phase) = D U(0) D^dag
        let dim = self.ham.dim();
        let d: Vec<Complex64> = (0..dim)
            .map(|b| {
                let m: f64 = (0..self.ham.n).map(|j| sigma_z(b, j)).sum();
                Complex64::from_polar(1.0, -phase * m / 2.0)
            })
            .collect();
        let mut u = u0.clone();
        for c in 0..dim {
            for r in 0..dim {
                u[(r, c)] *= d[r] * d[c].conj();
            }
        }
        Ok(u)
    }

    /// Products of the static runs between ramped segments of a segment-only body.
    fn chunk(&mut self, body: &[Step], state: &ProgramState) -> Result<Vec<Chunk>> {
        let dim = self.ham.dim();
        let mut out = Vec::new();
        let mut acc: Option<(CMat, f64)> = None;
        for s in body {
            let Step::Segment(seg) = s else { unreachable!() };
            if seg.ramped() {
                if let Some((v, d)) = acc.take() {
                    out.push(Chunk::Fixed(v, d));
                }
                out.push(Chunk::Ramped(*seg));
            } else {
                let v = self.segment(seg, state)?;
                let (m, d) = acc.get_or_insert_with(|| (CMat::identity(dim, dim), 0.0));
                *m = v * &*m;
                *d += seg.duration;
            }
        }
        if let Some((v, d)) = acc {
            out.push(Chunk::Fixed(v, d));
        }
        Ok(out)
    }

    /// Propagator of `steps` starting from `state`; `state` is advanced in place.
    pub fn run(&mut self, steps: &[Step], state: &mut ProgramState) -> Result<CMat> {
        let dim = self.ham.dim();
        let mut u = CMat::identity(dim, dim);
        for s in steps {
            match s {
                Step::Segment(seg) => {
                    let v = self.segment(seg, state)?;
                    u = v * u;
                    state.clock += seg.duration;
                }
                Step::ProbeHalfPi | Step::Readout => {}
                Step::StorageSwap => {
                    state.mode = match state.mode {
                        Mode::Detection => Mode::Control,
                        Mode::Control => Mode::Detection,
                    }
                }
                Step::StoragePi => state.detect_sign = -state.detect_sign,
                Step::ProbeFlip => state.control_sign = -state.control_sign,
                Step::Repeat { count, body } => {
                    if *count == 0 {
                        continue;
                    }
                    if body.iter().all(|b| matches!(b, Step::Segment(_))) && contains_events(body) {
                        let chunks = self.chunk(body, state)?;
                        for _ in 0..*count {
                            for ch in &chunks {
                                match ch {
                                    Chunk::Fixed(v, d) => {
                                        u = v * u;
                                        state.clock += d;
                                    }
                                    Chunk::Ramped(seg) => {
                                        u = self.segment(seg, state)? * u;
                                        state.clock += seg.duration;
                                    }
                                }
                            }
                        }
                    } else if contains_events(body) {
                        for _ in 0..*count {
                            let v = self.run(body, state)?;
                            u = v * u;
                        }
                    } else {
                        let start = *state;
                        let v = self.run(body, state)?;
                        u = mat_pow(&v, *count) * u;
                        state.clock = start.clock + *count as f64 * duration_of(body);
                    }
                }
            }
        }
        Ok(u)
    }
}

/// Full-program propagator for the probe branch `branch` (+1 or -1).
pub fn program_propagator(ham: &Hamiltonians, program: &PulseProgram, branch: f64) -> Result<CMat> {
    program.validate()?;
    let mut ev = Evolver::new(ham);
    let mut st = ProgramState::start(branch);
    let u = ev.run(&program.steps, &mut st)?;
    let deficit = unitarity_deficit(&u);
    if deficit > PROGRAM_UNITARITY_TOL {
        return Err(Error::Unitarity { deficit });
    }
    Ok(u)
}

/// Apply the program to a target state vector.
pub fn evolve(
    ham: &Hamiltonians,
    program: &PulseProgram,
    branch: f64,
    initial: &DVector<Complex64>,
) -> Result<DVector<Complex64>> {
    if initial.len() != ham.dim() {
        return Err(Error::invalid(format!("state has {} amplitudes, system needs {}", initial.len(), ham.dim())));
    }
    let u = program_propagator(ham, program, branch)?;
    let out = u * initial;
    let drift = (out.norm() - initial.norm()).abs();
    if drift > PROGRAM_UNITARITY_TOL {
        return Err(Error::Unitarity { deficit: drift });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecouplingCycle {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub pulse_phases_deg: Vec<f64>,
    /// Free windows as (tau multiple, t_d multiple); one more than there are pulses.
    pub windows: Vec<[f64; 2]>,
    pub tau_over_td: f64,
    /// Scale factor a fitted at `tau_over_td`.
    pub a_fitted: f64,
}

const CYCLE24_JSON: &str = include_str!("../data/decoupling_cycle24.json");

impl DecouplingCycle {
    pub fn cycle24() -> Self {
        let c: DecouplingCycle = serde_json::from_str(CYCLE24_JSON).expect("bundled cycle table is valid");
        c
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: DecouplingCycle = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn n_pulses(&self) -> usize {
        self.pulse_phases_deg.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.windows.len() != self.n_pulses() + 1 || self.n_pulses() == 0 {
            return Err(Error::invalid("decoupling cycle needs one more window than pulses"));
        }
        if !(self.tau_over_td > 0.0) || !(self.a_fitted > 0.0 && self.a_fitted <= 1.0) {
            return Err(Error::invalid("decoupling cycle tau_over_td and a_fitted out of range"));
        }
        if self.windows.iter().any(|w| !(w[0] * self.tau_over_td + w[1] > 0.0)) {
            return Err(Error::invalid("decoupling cycle has a non-positive window at the nominal tau"));
        }
        Ok(())
    }

    /// (sum of tau multiples, sum of t_d multiples including the pulses)
    fn length_coefficients(&self) -> (f64, f64) {
        let a: f64 = self.windows.iter().map(|w| w[0]).sum();
        let b: f64 = self.windows.iter().map(|w| w[1]).sum::<f64>() + self.n_pulses() as f64;
        (a, b)
    }

    pub fn length(&self, tau: f64, td: f64) -> f64 {
        let (a, b) = self.length_coefficients();
        a * tau + b * td
    }

    /// tau that makes one cycle last `length`.
    pub fn tau_for_length(&self, length: f64, td: f64) -> f64 {
        let (a, b) = self.length_coefficients();
        (length - b * td) / a
    }

    /// Cycle as steps. `reversed` plays the steps backwards with every phase advanced by pi.
    pub fn steps(&self, tau: f64, td: f64, b_decpl: f64, reversed: bool) -> Result<Vec<Step>> {
        let mut out = Vec::with_capacity(2 * self.n_pulses() + 1);
        for (i, w) in self.windows.iter().enumerate() {
            let d = w[0] * tau + w[1] * td;
            if !(d > 0.0) {
                return Err(Error::invalid(format!("decoupling window {i} is not positive (tau = {tau:e} s)")));
            }
            out.push(Step::Segment(Segment::free(d)));
            if let Some(p) = self.pulse_phases_deg.get(i) {
                out.push(Step::Segment(Segment {
                    duration: td,
                    amplitude: b_decpl,
                    phase: p.to_radians(),
                    detuning: 0.0,
                    target: Target::AllTargets,
                }));
            }
        }
        if reversed {
            out.reverse();
            for s in &mut out {
                if let Step::Segment(seg) = s {
                    if seg.amplitude != 0.0 {
                        seg.phase = (seg.phase + PI).rem_euclid(2.0 * PI);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecouplingParams {
    /// T
    pub b_decpl: f64,
    /// Spacing between pulses, s; defaults to `tau_over_td` pulse lengths.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Species the pulses and fine drive are calibrated for, rad s^-1 T^-1.
    pub gamma: f64,
}

impl DecouplingParams {
    pub fn new(b_decpl: f64, gamma: f64) -> Self {
        DecouplingParams { b_decpl, tau: None, gamma }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b_decpl > 0.0 && self.b_decpl.is_finite()) || !(self.gamma != 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("decoupling field and gamma must be positive and finite"));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::invalid("decoupling tau must be positive"));
            }
        }
        Ok(())
    }

    /// pi/2 pulse length t_d, s.
    pub fn pulse_length(&self) -> f64 {
        FRAC_PI_2 / (self.gamma.abs() * self.b_decpl)
    }

    pub fn tau_nominal(&self, cycle: &DecouplingCycle) -> f64 {
        self.tau.unwrap_or(cycle.tau_over_td * self.pulse_length())
    }
}

/// cos(t/2) and sin(t/2) n of a 2x2 unitary written as a phase times
/// cos(t/2) I - i sin(t/2) n.sigma.
fn su2_parts(u: &CMat) -> (f64, Vector3<f64>) {
    let det = u[(0, 0)] * u[(1, 1)] - u[(0, 1)] * u[(1, 0)];
    let s = det.sqrt();
    let v = u.map(|x| x / s);
    let c = ((v[(0, 0)] + v[(1, 1)]) / 2.0).re;
    let nx = -((v[(0, 1)] + v[(1, 0)]) / 2.0).im;
    let ny = ((v[(0, 1)] - v[(1, 0)]) / 2.0).re;
    let nz = -((v[(0, 0)] - v[(1, 1)]) / 2.0).im;
    (c, Vector3::new(nx, ny, nz))
}

/// Rotation angle times the z component of the axis of a 2x2 unitary.
fn z_rotation_angle(u: &CMat) -> f64 {
    let (c, n) = su2_parts(u);
    let sn = n.norm();
    if sn == 0.0 {
        return 0.0;
    }
    2.0 * sn.atan2(c) * n.z / sn
}

/// Precession rate (rad s^-1) of a lone spin with coupling `k` under the cycle `steps`.
pub fn cycle_precession_rate(steps: &[Step], k: f64, gamma: f64, mode: Mode, sign: f64) -> Result<f64> {
    let sys = SpinSystem::new(
        vec![OracleSpin { position: Vector3::zeros(), gamma, k, hyperfine: 0.0, detuning: 0.0 }],
        Vector3::z(),
        0.0,
    )?;
    let ham = build_hamiltonians(&sys, &PhysicalConstants::default())?;
    let mut ev = Evolver::new(&ham);
    let mut st = ProgramState { clock: 0.0, mode, detect_sign: sign, control_sign: sign };
    let u = ev.run(steps, &mut st)?;
    Ok(z_rotation_angle(&u) / duration_of(steps))
}

/// Effective scale a: cycle precession rate over k for a weakly coupled spin.
pub fn fit_scale_factor(cycle: &DecouplingCycle, decpl: &DecouplingParams) -> Result<f64> {
    let td = decpl.pulse_length();
    let tau = decpl.tau_nominal(cycle);
    let steps = cycle.steps(tau, td, decpl.b_decpl, false)?;
    let k = 1e-3 / cycle.length(tau, td);
    Ok(cycle_precession_rate(&steps, k, decpl.gamma, Mode::Control, 1.0)? / (CONTROL_SCALE * 2.0 * k))
}

/// Whole cycles covering `total`, with tau stretched so they fit exactly.
fn fit_cycles(cycle: &DecouplingCycle, total: f64, tau0: f64, td: f64, min_first: f64) -> Result<(u64, f64)> {
    let n = (total / cycle.length(tau0, td)).round().max(1.0);
    let tau = cycle.tau_for_length(total / n, td);
    let first = cycle.windows[0][0] * tau + cycle.windows[0][1] * td;
    let shortest = cycle.windows.iter().map(|w| w[0] * tau + w[1] * td).fold(f64::INFINITY, f64::min);
    if !(shortest > 0.0) || first < min_first {
        return Err(Error::invalid(format!("segment of {total:e} s is shorter than one decoupling cycle")));
    }
    Ok((n as u64, tau))
}

/// NSS timeline for one slice, kept in sections so the signal can share the control part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NssProgram {
    pub detection_first: Vec<Step>,
    pub control: Vec<Step>,
    pub detection_second: Vec<Step>,
    /// Realised detection and control times, s.
    pub t_det: f64,
    pub t_ctrl: f64,
    pub n_det_cycles: u64,
    pub n_ctrl_cycles: u64,
    /// Fine-drive carrier rates before and after the probe flip, rad s^-1.
    pub drive_rates: [f64; 2],
    /// Fine-drive window length and amplitude.
    pub drive_window: f64,
    pub drive_amplitude: f64,
}

impl NssProgram {
    /// Same timeline with the fine-drive windows left free.
    pub fn without_drive(&self) -> NssProgram {
        fn strip(steps: &[Step]) -> Vec<Step> {
            steps
                .iter()
                .map(|s| match s {
                    Step::Segment(seg) if seg.ramped() => Step::Segment(Segment::free(seg.duration)),
                    Step::Repeat { count, body } => Step::Repeat { count: *count, body: strip(body) },
                    other => other.clone(),
                })
                .collect()
        }
        NssProgram { control: strip(&self.control), drive_amplitude: 0.0, ..self.clone() }
    }

    pub fn program(&self) -> PulseProgram {
        let mut steps = self.detection_first.clone();
        steps.extend(self.control.iter().cloned());
        steps.extend(self.detection_second.iter().cloned());
        PulseProgram { steps }
    }
}

/// Build the NSS program addressing slice `gamma_slice` with schedule `sched`.
///
/// The fine drive is a short window at the start of each control cycle, inside the first
/// free window so the decoupling timing is untouched. Its carrier follows the precession
/// rate of a lone spin with k = gamma_slice under the same cycle, and stays
/// phase-continuous across the probe flip.
pub fn nss_program(
    gamma_slice: f64,
    sched: &ControlSchedule,
    decpl: &DecouplingParams,
    cycle: &DecouplingCycle,
) -> Result<NssProgram> {
    sched.validate()?;
    decpl.validate()?;
    cycle.validate()?;
    let td = decpl.pulse_length();
    let tau0 = decpl.tau_nominal(cycle);
    let window = td;
    let (nd, tau_d) = fit_cycles(cycle, sched.t_det / 2.0, tau0, td, 0.0)?;
    let (nc, tau_c) = fit_cycles(cycle, sched.t_ctrl / 2.0, tau0, td, 2.0 * window)?;
    let det_cycle = cycle.steps(tau_d, td, decpl.b_decpl, false)?;
    let t_half_det = nd as f64 * cycle.length(tau_d, td);
    let t_cycle_c = cycle.length(tau_c, td);
    let t_half_ctrl = nc as f64 * t_cycle_c;
    let amplitude = sched.b_ac * t_cycle_c / window;

    let mut halves = Vec::new();
    let mut rates = [0.0; 2];
    let t0 = t_half_det;
    let t_flip = t0 + t_half_ctrl;
    let mut phase0 = 0.0;
    for (h, (sign, reversed)) in [(1.0, false), (-1.0, true)].into_iter().enumerate() {
        let steps = cycle.steps(tau_c, td, decpl.b_decpl, reversed)?;
        let w = cycle_precession_rate(&steps, gamma_slice, decpl.gamma, Mode::Control, sign)?;
        rates[h] = w;
        let mut body = Vec::with_capacity(steps.len() + 1);
        let start = if h == 0 { t0 } else { t_flip };
        let phase = phase0 + w * (t_cycle_c - start);
        body.push(Step::Segment(Segment { duration: window, amplitude, phase, detuning: w, target: Target::AllTargets }));
        let mut rest = steps.into_iter();
        if let Some(Step::Segment(first)) = rest.next() {
            body.push(Step::Segment(Segment::free(first.duration - window)));
        }
        body.extend(rest);
        halves.push(body);
        phase0 = w * t_half_ctrl + phase0;
    }
    let [first_half, second_half]: [Vec<Step>; 2] = halves.try_into().expect("two halves");
    let control = vec![
        Step::StorageSwap,
        Step::StoragePi,
        Step::Repeat { count: nc, body: first_half },
        Step::ProbeFlip,
        Step::StoragePi,
        Step::Repeat { count: nc, body: second_half },
        Step::StoragePi,
        Step::StorageSwap,
    ];
    Ok(NssProgram {
        detection_first: vec![Step::ProbeHalfPi, Step::Repeat { count: nd, body: det_cycle.clone() }],
        control,
        detection_second: vec![Step::Repeat { count: nd, body: det_cycle }, Step::ProbeHalfPi, Step::Readout],
        t_det: 2.0 * t_half_det,
        t_ctrl: 2.0 * t_half_ctrl,
        n_det_cycles: nd,
        n_ctrl_cycles: nc,
        drive_rates: rates,
        drive_window: window,
        drive_amplitude: amplitude,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSignal {
    pub gamma_slice: f64,
    pub s_net: f64,
    pub l_net: f64,
    /// Realised times, s.
    pub t_det: f64,
    pub t_ctrl: f64,
}

/// s_net of the exact dynamics: half the overlap of the two probe branches.
pub fn nss_signal_oracle(
    sys: &SpinSystem,
    gamma_slice: f64,
    sched: &ControlSchedule,
    decpl: &DecouplingParams,
    cycle: &DecouplingCycle,
    consts: &PhysicalConstants,
) -> Result<OracleSignal> {
    if sys.len() > MAX_SWEEP_SPINS {
        return Err(Error::OversizeSystem(sys.len(), MAX_SWEEP_SPINS));
    }
    let ham = build_hamiltonians(sys, consts)?;
    let prog = nss_program(gamma_slice, sched, decpl, cycle)?;
    let s_net = branch_overlap(&ham, &prog)? / 2.0;
    let l_net = if s_net > 0.0 { -(2.0 * s_net).ln() } else { f64::INFINITY };
    Ok(OracleSignal { gamma_slice, s_net, l_net, t_det: prog.t_det, t_ctrl: prog.t_ctrl })
}

/// Oracle signal on each slice, with schedules from `params`. Slices run in parallel.
pub fn oracle_sweep(
    sys: &SpinSystem,
    slices: &[SliceSpec],
    surface_gradient: f64,
    params: &ScheduleParams,
    decpl: &DecouplingParams,
    cycle: &DecouplingCycle,
    consts: &PhysicalConstants,
) -> Result<Vec<OracleSignal>> {
    let gamma_n = decpl.gamma;
    slices
        .par_iter()
        .map(|sl| {
            let sched = schedule_for_slice(sl, surface_gradient, params, gamma_n)?;
            nss_signal_oracle(sys, sl.gamma, &sched, decpl, cycle, consts)
        })
        .collect()
}

/// Re Tr(U_-^dag U_+) / 2^n for the two probe branches.
pub fn branch_overlap(ham: &Hamiltonians, prog: &NssProgram) -> Result<f64> {
    let mut ev = Evolver::new(ham);
    let mut plus = ProgramState::start(1.0);
    let mut minus = ProgramState::start(-1.0);
    let d1p = ev.run(&prog.detection_first, &mut plus)?;
    let d1m = ev.run(&prog.detection_first, &mut minus)?;
    let c = ev.run(&prog.control, &mut plus)?;
    ev.run(&[Step::StorageSwap, Step::StoragePi, Step::StoragePi, Step::StoragePi, Step::StorageSwap], &mut minus)?;
    minus.clock = plus.clock;
    let d2p = ev.run(&prog.detection_second, &mut plus)?;
    let d2m = ev.run(&prog.detection_second, &mut minus)?;
    let ua = d2p * &c * d1p;
    let ub = d2m * c * d1m;
    for u in [&ua, &ub] {
        let deficit = unitarity_deficit(u);
        if deficit > PROGRAM_UNITARITY_TOL {
            return Err(Error::Unitarity { deficit });
        }
    }
    Ok(re_trace_adj(&ub, &ua) / ham.dim() as f64)
}

/// Rotation angle left on a lone spin with coupling `k` by the undriven control section.
pub fn control_refocusing_error(
    k: f64,
    gamma_n: f64,
    gamma_slice: f64,
    sched: &ControlSchedule,
    decpl: &DecouplingParams,
    cycle: &DecouplingCycle,
) -> Result<f64> {
    let sys = SpinSystem::new(
        vec![OracleSpin { position: Vector3::zeros(), gamma: gamma_n, k, hyperfine: 0.0, detuning: 0.0 }],
        Vector3::z(),
        0.0,
    )?;
    let ham = build_hamiltonians(&sys, &PhysicalConstants::default())?;
    let prog = nss_program(gamma_slice, sched, decpl, cycle)?.without_drive();
    let mut st = ProgramState::start(1.0);
    let u = Evolver::new(&ham).run(&prog.control, &mut st)?;
    // atan2 rather than acos of the trace: acos cannot resolve angles below ~1e-8
    let (c, n) = su2_parts(&u);
    Ok(2.0 * n.norm().atan2(c.abs()))
}

/// Cluster geometry whose random orientations form the T_rho ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFamily {
    /// Offsets from `centre`, m.
    pub offsets: Vec<Vector3<f64>>,
    pub gammas: Vec<f64>,
    /// m, above the surface.
    pub centre: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TRhoParams {
    /// None runs the free evolution (decoupling off).
    pub decoupling: Option<DecouplingParams>,
    /// Sampling step with decoupling off, s.
    pub free_step: f64,
    pub n_orientations: usize,
    pub seed: u64,
    /// Longest run, in steps.
    pub max_steps: u64,
    /// Log-spaced samples after t = 0.
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TRhoEstimate {
    /// s; the end of the window when `lower_bound` is set.
    pub t_rho: f64,
    pub lower_bound: bool,
    pub times: Vec<f64>,
    pub envelope: Vec<f64>,
}

impl TRhoEstimate {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time_s,envelope\n");
        for (t, e) in self.times.iter().zip(&self.envelope) {
            s.push_str(&format!("{t:e},{e}\n"));
        }
        s
    }
}

fn random_rotation(rng: &mut ChaCha20Rng) -> UnitQuaternion<f64> {
    let mut q = [0.0; 4];
    for v in &mut q {
        *v = StandardNormal.sample(rng);
    }
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

/// sqrt(<X_j>^2 + <Y_j>^2) after `v` for spin j prepared along x, others mixed.
fn transverse_polarization(v: &CMat, j: usize) -> f64 {
    let dim = v.nrows();
    let bit = 1usize << j;
    // m(r, d) = sum_f V[r, f^bit] conj(V[d, f])  (M = V X_j V^dag)
    let m = |r: usize, d: usize| -> Complex64 {
        let mut acc = ZERO;
        for f in 0..dim {
            acc += v[(r, f ^ bit)] * v[(d, f)].conj();
        }
        acc
    };
    let mut x = ZERO;
    let mut y = ZERO;
    for c in 0..dim {
        let mc = m(c, c ^ bit);
        x += mc;
        let yc = if c & bit == 0 { Complex64::new(0.0, 1.0) } else { Complex64::new(0.0, -1.0) };
        y += yc * mc;
    }
    let n = dim as f64;
    (x.re / n).hypot(y.re / n)
}

fn sample_steps(max_steps: u64, n_samples: usize) -> Vec<u64> {
    let mut out = vec![0u64];
    let top = (max_steps.max(1) as f64).log10();
    for i in 0..n_samples.max(1) {
        let f = if n_samples > 1 { i as f64 / (n_samples - 1) as f64 } else { 1.0 };
        let m = 10f64.powf(top * f).round() as u64;
        if m > *out.last().unwrap() {
            out.push(m);
        }
    }
    out
}

/// Coherence time of targets under the running protocol (probe polarised, no drive).
///
/// One spin at a time starts polarised along x with the others mixed; the transverse
/// polarisation is read at whole decoupling cycles, averaged over spins and random
/// orientations, and T_rho is its 1/e crossing.
pub fn estimate_t_rho(
    family: &ClusterFamily,
    probe: &ProbeDensity,
    orientation: &FieldOrientation,
    params: &TRhoParams,
    cycle: &DecouplingCycle,
    consts: &PhysicalConstants,
) -> Result<TRhoEstimate> {
    if params.n_orientations == 0 {
        return Err(Error::invalid("n_orientations must be at least 1"));
    }
    if family.offsets.len() != family.gammas.len() || family.offsets.is_empty() {
        return Err(Error::invalid("cluster family needs one gamma per offset"));
    }
    let (steps, step_len) = match &params.decoupling {
        Some(d) => {
            d.validate()?;
            let td = d.pulse_length();
            let tau = d.tau_nominal(cycle);
            (Some(cycle.steps(tau, td, d.b_decpl, false)?), cycle.length(tau, td))
        }
        None => {
            if !(params.free_step > 0.0) {
                return Err(Error::invalid("free_step must be positive"));
            }
            (None, params.free_step)
        }
    };
    let ms = sample_steps(params.max_steps, params.n_samples);
    let runs: Vec<(Vec<f64>, usize)> = (0..params.n_orientations)
        .into_par_iter()
        .map(|o| -> Result<(Vec<f64>, usize)> {
            let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
            rng.set_stream(o as u64);
            let rot = random_rotation(&mut rng);
            let sites: Vec<(Vector3<f64>, f64)> =
                family.offsets.iter().zip(&family.gammas).map(|(p, g)| (family.centre + rot * p, *g)).collect();
            let sys = SpinSystem::from_sites(&sites, probe, orientation, consts)?;
            let ham = build_hamiltonians(&sys, consts)?;
            let mut ev = Evolver::new(&ham);
            let mut st = ProgramState { clock: 0.0, mode: Mode::Control, detect_sign: 1.0, control_sign: 1.0 };
            let u = match &steps {
                Some(s) => ev.run(s, &mut st)?,
                None => ev.run(&[Step::Segment(Segment::free(step_len))], &mut st)?,
            };
            let dim = ham.dim();
            let mut v = CMat::identity(dim, dim);
            let mut last = 0u64;
            let mut acc = vec![0.0; ms.len()];
            for (i, &m) in ms.iter().enumerate() {
                v = reunitarize(&(unitary_pow(&u, m - last) * v));
                last = m;
                for j in 0..sys.len() {
                    acc[i] += transverse_polarization(&v, j);
                }
            }
            Ok((acc, sys.len()))
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; ms.len()];
    let mut count = 0usize;
    for (a, n) in runs {
        for (x, y) in acc.iter_mut().zip(a) {
            *x += y;
        }
        count += n;
    }
    let envelope: Vec<f64> = acc.iter().map(|a| a / count as f64).collect();
    let times: Vec<f64> = ms.iter().map(|&m| m as f64 * step_len).collect();
    let target = (-1.0f64).exp();
    for i in 1..envelope.len() {
        if envelope[i] < target {
            let (t0, t1, e0, e1) = (times[i - 1], times[i], envelope[i - 1], envelope[i]);
            let t_rho = t0 + (e0 - target) * (t1 - t0) / (e0 - e1);
            return Ok(TRhoEstimate { t_rho, lower_bound: false, times, envelope });
        }
    }
    Ok(TRhoEstimate { t_rho: *times.last().unwrap(), lower_bound: true, times, envelope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molecule::ANGSTROM;

    const GH: f64 = 2.6752218744e8;

    fn lone(k: f64) -> SpinSystem {
        SpinSystem::new(
            vec![OracleSpin { position: Vector3::zeros(), gamma: GH, k, hyperfine: 0.0, detuning: 0.0 }],
            Vector3::z(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn pair_coupling_closed_form() {
        let c = PhysicalConstants::default();
        let r = 2.0 * ANGSTROM;
        let j = dipolar_coupling(&Vector3::zeros(), &Vector3::new(r, 0.0, 0.0), GH, GH, &Vector3::z(), &c).unwrap();
        let want = GH * GH * 1.054571817e-34 * 1e-7 / (r * r * r);
        assert!((j - want).abs() < 1e-12 * want);
        let jz = dipolar_coupling(&Vector3::zeros(), &Vector3::new(0.0, 0.0, r), GH, GH, &Vector3::z(), &c).unwrap();
        assert!((jz + 2.0 * want).abs() < 1e-12 * want);
    }

    #[test]
    fn hamiltonian_is_hermitian() {
        let c = PhysicalConstants::default();
        let spins = (0..3)
            .map(|i| OracleSpin {
                position: Vector3::new(i as f64 * 1.5 * ANGSTROM, 0.3 * i as f64 * ANGSTROM, 0.0),
                gamma: GH,
                k: 1e4 * (i as f64 + 1.0),
                hyperfine: 300.0 * i as f64,
                detuning: 10.0,
            })
            .collect();
        let sys = SpinSystem::new(spins, Vector3::z(), 1.0).unwrap();
        let ham = build_hamiltonians(&sys, &c).unwrap();
        let h = ham.static_part(-1.0, 0.5) + ham.control_part(1e-3, 0.7);
        assert!((&h - h.adjoint()).camax() < 1e-9);
    }

    #[test]
    fn hyperfine_levels() {
        let c = PhysicalConstants::default();
        let mut sys = lone(0.0);
        sys.spins[0].hyperfine = 2.0e5;
        let ham = build_hamiltonians(&sys, &c).unwrap();
        for sign in [1.0, -1.0] {
            let h = ham.static_part(sign, 0.5);
            assert_eq!(h[(0, 0)].re, sign * 1.0e5);
            assert_eq!(h[(1, 1)].re, -sign * 1.0e5);
        }
    }

    #[test]
    fn half_pi_pulse_closed_form() {
        let c = PhysicalConstants::default();
        let ham = build_hamiltonians(&lone(0.0), &c).unwrap();
        let b = 0.01;
        let td = FRAC_PI_2 / (GH * b);
        let prog = PulseProgram {
            steps: vec![Step::Segment(Segment { duration: td, amplitude: b, phase: 0.3, detuning: 0.0, target: Target::AllTargets })],
        };
        let u = program_propagator(&ham, &prog, 1.0).unwrap();
        let (s, co) = (FRAC_PI_2 / 2.0).sin_cos();
        let i = Complex64::new(0.0, 1.0);
        let e = Complex64::from_polar(1.0, -0.3);
        let want = [[Complex64::new(co, 0.0), -i * s * e], [-i * s * e.conj(), Complex64::new(co, 0.0)]];
        for r in 0..2 {
            for cc in 0..2 {
                assert!((u[(r, cc)] - want[r][cc]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn empty_program_is_identity() {
        let c = PhysicalConstants::default();
        let ham = build_hamiltonians(&lone(1e4), &c).unwrap();
        let u = program_propagator(&ham, &PulseProgram::default(), 1.0).unwrap();
        assert!((u - CMat::identity(2, 2)).camax() < 1e-15);
    }

    #[test]
    fn oversize_rejected() {
        let spins = (0..11)
            .map(|i| OracleSpin { position: Vector3::new(i as f64, 0.0, 0.0), gamma: GH, k: 0.0, hyperfine: 0.0, detuning: 0.0 })
            .collect();
        assert!(matches!(SpinSystem::new(spins, Vector3::z(), 1.0), Err(Error::OversizeSystem(11, 10))));
    }

    #[test]
    fn cycle_table_shape() {
        let c = DecouplingCycle::cycle24();
        c.validate().unwrap();
        assert_eq!(c.n_pulses(), 24);
        let d = DecouplingParams::new(0.3, GH);
        let td = d.pulse_length();
        let steps = c.steps(d.tau_nominal(&c), td, d.b_decpl, false).unwrap();
        let p = PulseProgram { steps };
        assert_eq!(p.count_pulses(td, d.b_decpl), 24);
        assert!((p.duration() - c.length(10.0 * td, td)).abs() < 1e-18);
    }

    #[test]
    fn stretched_cycles_fill_segment() {
        let c = DecouplingCycle::cycle24();
        let td = 2e-8;
        let (n, tau) = fit_cycles(&c, 1.234e-3, 10.0 * td, td, 0.0).unwrap();
        assert!((n as f64 * c.length(tau, td) - 1.234e-3).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip() {
        let c = DecouplingCycle::cycle24();
        let d = DecouplingParams::new(0.3, GH);
        let steps = c.steps(d.tau_nominal(&c), d.pulse_length(), d.b_decpl, true).unwrap();
        let p = PulseProgram { steps: vec![Step::ProbeHalfPi, Step::Repeat { count: 3, body: steps }, Step::Readout] };
        let back = PulseProgram::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn empty_cluster_gives_half() {
        let c = PhysicalConstants::default();
        let sys = SpinSystem::new(vec![], Vector3::z(), 1.0).unwrap();
        let sched = ControlSchedule {
            t_det: 1e-4,
            t_ctrl: 1e-3,
            b_ac: 0.5e-6,
            n_m: 1,
            t_m: 0.0,
            rho_det: 0.2,
            rho_ctrl: 0.2,
            a: 0.3,
        };
        let d = DecouplingParams::new(0.3, GH);
        let s = nss_signal_oracle(&sys, -4e4, &sched, &d, &DecouplingCycle::cycle24(), &c).unwrap();
        assert!((s.s_net - 0.5).abs() < 1e-14);
    }

    fn sched(gamma_slice: f64, a: f64) -> ControlSchedule {
        let b_ac = 0.5e-6;
        ControlSchedule {
            t_det: PI * 0.2 / (a * gamma_slice.abs()),
            t_ctrl: PI * 0.2 / (GH * b_ac),
            b_ac,
            n_m: 1,
            t_m: 0.0,
            rho_det: 0.2,
            rho_ctrl: 0.2,
            a,
        }
    }

    #[test]
    fn fitted_scale_matches_frozen_value() {
        let c = DecouplingCycle::cycle24();
        for b in [0.05, 0.3] {
            let a = fit_scale_factor(&c, &DecouplingParams::new(b, GH)).unwrap();
            assert!((0.2..=0.4).contains(&a));
            assert!((a - c.a_fitted).abs() < 5e-4, "a = {a}");
        }
    }

    #[test]
    fn probe_flip_refocuses_lone_spin() {
        let c = DecouplingCycle::cycle24();
        let d = DecouplingParams::new(0.3, GH);
        for k in [-5.0e4, -3.2e4, 1.0e4] {
            let err = control_refocusing_error(k, GH, -4.0e4, &sched(-4.0e4, c.a_fitted), &d, &c).unwrap();
            assert!(err < 1e-8, "k = {k}: {err}");
        }
    }

    #[test]
    fn drive_off_leaves_no_signal_off_resonance() {
        let c = PhysicalConstants::default();
        let cyc = DecouplingCycle::cycle24();
        let d = DecouplingParams::new(0.3, GH);
        let sys = lone(-4.0e4);
        let ham = build_hamiltonians(&sys, &c).unwrap();
        let prog = nss_program(-4.0e4, &sched(-4.0e4, cyc.a_fitted), &d, &cyc).unwrap().without_drive();
        let ov = branch_overlap(&ham, &prog).unwrap();
        assert!((ov - 1.0).abs() < 1e-6, "{ov}");
    }

    #[test]
    fn isolated_spin_envelope_is_flat() {
        let c = PhysicalConstants::default();
        let fam = ClusterFamily { offsets: vec![Vector3::zeros()], gammas: vec![GH], centre: Vector3::new(0.0, 0.0, 1e-6) };
        let probe = ProbeDensity::point(2.5e-9).unwrap();
        let o = FieldOrientation::new(0.0, 0.0, 1.0).unwrap();
        let p = TRhoParams {
            decoupling: Some(DecouplingParams::new(0.01, GH)),
            free_step: 1e-6,
            n_orientations: 2,
            seed: 7,
            max_steps: 1000,
            n_samples: 10,
        };
        let est = estimate_t_rho(&fam, &probe, &o, &p, &DecouplingCycle::cycle24(), &c).unwrap();
        assert!(est.lower_bound);
        assert!(est.envelope.iter().all(|e| (e - 1.0).abs() < 1e-9), "{:?}", est.envelope);
        assert!(est.to_csv().starts_with("time_s,envelope\n"));
    }

    #[test]
    fn rotation_angle_extraction() {
        let ham = build_hamiltonians(&lone(1234.0), &PhysicalConstants::default()).unwrap();
        let u = expm_hermitian(&ham.static_part(1.0, 0.5), 1e-4).unwrap();
        assert!((z_rotation_angle(&u) - 1234.0 * 1e-4).abs() < 1e-12);
    }
}
