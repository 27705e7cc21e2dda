//! Slice-response operator over a voxel grid and its damped, nonnegative
//! least-squares inversion.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molecule::PhysicalConstants;
use crate::probe::{coupling_tensor, ProbeDensity};
use crate::scan::{plan_schedules, ScanPlan};
use crate::signal::{
    linear_response, single_spin_response, CoherenceParams, ControlSchedule, ScheduleParams, SignalRecord,
};

/// Default structural-zero threshold for operator entries.
pub const DEFAULT_FLOOR: f64 = 1e-4;

/// Regular voxel grid. Voxel (i, j, l) has its centre at origin + pitch (i, j, l) and
/// flat index i + nx (j + ny l), so x runs fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    /// m
    pub pitch: f64,
    /// Centre of voxel (0, 0, 0), m.
    pub origin: Vector3<f64>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], pitch: f64, origin: Vector3<f64>) -> Result<Self> {
        let g = VoxelGrid { dims, pitch, origin };
        g.validate()?;
        Ok(g)
    }

    /// Grid of cubes of edge `pitch` tiling the box [lo, hi] (centres at lo + pitch/2 + ...).
    pub fn covering(lo: Vector3<f64>, hi: Vector3<f64>, pitch: f64) -> Result<Self> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let n = ((hi[a] - lo[a]) / pitch - 1e-9).ceil();
            if !(n >= 1.0) {
                return Err(Error::invalid("grid box must have positive extent"));
            }
            dims[a] = n as usize;
        }
        VoxelGrid::new(dims, pitch, lo + Vector3::repeat(pitch / 2.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid("grid dims must be >= 1"));
        }
        if !(self.pitch > 0.0) || !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("grid pitch must be positive and origin finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, l: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * l)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        [i, j, idx / (self.dims[0] * self.dims[1])]
    }

    pub fn center(&self, idx: usize) -> Vector3<f64> {
        let [i, j, l] = self.coords(idx);
        self.origin + Vector3::new(i as f64, j as f64, l as f64) * self.pitch
    }

    /// Index of the voxel containing `p`, if any.
    pub fn locate(&self, p: &Vector3<f64>) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.pitch + 0.5).floor();
            if f < 0.0 || f >= self.dims[a] as f64 {
                return None;
            }
            c[a] = f as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }
}

/// Consecutive operator rows in compressed sparse form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowBlock {
    pub first_row: usize,
    /// Local offsets into `col_idx`/`values`, length rows + 1.
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<u32>,
    pub values: Vec<f32>,
}

impl RowBlock {
    pub fn from_rows(first_row: usize, rows: Vec<Vec<(u32, f64)>>) -> Self {
        let nnz: usize = rows.iter().map(|r| r.len()).sum();
        let mut b = RowBlock {
            first_row,
            row_ptr: Vec::with_capacity(rows.len() + 1),
            col_idx: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
        };
        b.row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable_by_key(|e| e.0);
            for (c, v) in r {
                b.col_idx.push(c);
                b.values.push(v as f32);
            }
            b.row_ptr.push(b.col_idx.len());
        }
        b
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, local: usize) -> (&[u32], &[f32]) {
        let (a, b) = (self.row_ptr[local], self.row_ptr[local + 1]);
        (&self.col_idx[a..b], &self.values[a..b])
    }
}

/// Sparse slice-response operator: rows in plan order, stored as one block per
/// orientation. Values are single precision; products accumulate in f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub blocks: Vec<RowBlock>,
    pub floor: f64,
}

impl SliceMatrix {
    pub fn from_blocks(n_cols: usize, blocks: Vec<RowBlock>, floor: f64) -> Result<Self> {
        let mut n_rows = 0;
        for b in &blocks {
            if b.first_row != n_rows || b.col_idx.iter().any(|c| *c as usize >= n_cols) {
                return Err(Error::invalid("row blocks are not contiguous or exceed the column count"));
            }
            n_rows += b.n_rows();
        }
        Ok(SliceMatrix { n_rows, n_cols, blocks, floor })
    }

    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(u32, f64)>>, floor: f64) -> Result<Self> {
        SliceMatrix::from_blocks(n_cols, vec![RowBlock::from_rows(0, rows)], floor)
    }

    pub fn nnz(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let bi = self.blocks.partition_point(|b| b.first_row <= r) - 1;
        let b = &self.blocks[bi];
        b.row(r - b.first_row)
    }

    pub fn row_lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().flat_map(|b| b.row_ptr.windows(2).map(|w| w[1] - w[0]))
    }

    pub fn row_norms(&self) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = self
            .blocks
            .par_iter()
            .map(|b| {
                (0..b.n_rows()).map(|r| b.row(r).1.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()).collect()
            })
            .collect();
        parts.concat()
    }

    pub fn max_row_norm(&self) -> f64 {
        self.row_norms().into_iter().fold(0.0, f64::max)
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        let parts: Vec<Vec<f64>> = self
            .blocks
            .par_iter()
            .map(|b| {
                (0..b.n_rows())
                    .map(|r| {
                        let (c, v) = b.row(r);
                        c.iter().zip(v).map(|(c, v)| *v as f64 * x[*c as usize]).sum()
                    })
                    .collect()
            })
            .collect();
        parts.concat()
    }

    /// M^T y. Blocks are grouped into fixed chunks and the partial sums added in chunk
    /// order, so the result does not depend on the thread count.
    pub fn mul_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n_rows);
        const CHUNKS: usize = 16;
        let per = self.blocks.len().div_ceil(CHUNKS).max(1);
        let partials: Vec<Vec<f64>> = self
            .blocks
            .par_chunks(per)
            .map(|chunk| {
                let mut acc = vec![0.0; self.n_cols];
                for b in chunk {
                    for r in 0..b.n_rows() {
                        let yr = y[b.first_row + r];
                        if yr == 0.0 {
                            continue;
                        }
                        let (c, v) = b.row(r);
                        for (c, v) in c.iter().zip(v) {
                            acc[*c as usize] += *v as f64 * yr;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; self.n_cols];
        for p in partials {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }
}

/// Upper bound on -ln(1 - S) for a spin at `k` against a slice at `gamma`, using
/// sin^2 <= 1 in the control factor and sin^2 x <= x^2 in the detection factor.
fn entry_bound(gamma: f64, k: f64, sched: &ControlSchedule, rabi: f64) -> f64 {
    let det = (sched.a * k * sched.t_det).powi(2) / 8.0;
    let dz = sched.a * (gamma - k);
    let u = det.min(2.0) * rabi * rabi / (dz * dz + rabi * rabi);
    if u >= 1.0 {
        f64::INFINITY
    } else {
        linear_response(u)
    }
}

#[allow(clippy::too_many_arguments)]
fn orientation_rows(
    b: &Vector3<f64>,
    tensors: &[Matrix3<f64>],
    gammas: &[f64],
    schedules: &[ControlSchedule],
    first_row: usize,
    coh: &CoherenceParams,
    gamma_n: f64,
    floor: f64,
) -> Result<Vec<Vec<(u32, f64)>>> {
    let ks: Vec<f64> = tensors.iter().map(|t| (b.transpose() * t * b)[(0, 0)]).collect();
    let mut order: Vec<u32> = (0..ks.len() as u32).collect();
    order.sort_by(|x, y| ks[*x as usize].total_cmp(&ks[*y as usize]));
    let sorted: Vec<f64> = order.iter().map(|v| ks[*v as usize]).collect();
    let mut rows = Vec::with_capacity(gammas.len());
    for (i, (g, sched)) in gammas.iter().zip(schedules).enumerate() {
        let rabi = gamma_n.abs() * sched.b_ac;
        let mut row = Vec::new();
        let push = |pos: usize, row: &mut Vec<(u32, f64)>| -> Result<()> {
            let s = single_spin_response(*g, sorted[pos], sched, coh, gamma_n);
            if s >= 1.0 {
                return Err(Error::SaturatedSlice { index: first_row + i });
            }
            let e = linear_response(s);
            if e >= floor {
                row.push((order[pos], e));
            }
            Ok(())
        };
        // On the resonance side of k = 0 the bound decreases monotonically away from gamma.
        let start = sorted.partition_point(|k| *k < *g);
        let same_sign = |k: f64| k * g.signum() > 0.0;
        let mut up = start;
        while up < sorted.len() {
            let k = sorted[up];
            if !same_sign(k) || entry_bound(*g, k, sched, rabi) < floor {
                break;
            }
            push(up, &mut row)?;
            up += 1;
        }
        let mut down = start;
        while down > 0 {
            let k = sorted[down - 1];
            if !same_sign(k) || entry_bound(*g, k, sched, rabi) < floor {
                break;
            }
            push(down - 1, &mut row)?;
            down -= 1;
        }
        // Opposite-sign voxels skipped by the early stop are bounded by (t_det rabi)^2/8.
        let tail = (sched.t_det * rabi).powi(2) / 8.0;
        if tail.min(1.0) >= 1.0 || linear_response(tail) >= floor {
            let (lo, hi) = if *g > 0.0 { (0, down) } else { (up, sorted.len()) };
            for pos in lo..hi {
                if !same_sign(sorted[pos]) {
                    push(pos, &mut row)?;
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Operator rows in plan order, columns in grid order. Entries below `floor` are dropped.
#[allow(clippy::too_many_arguments)]
pub fn build_slice_matrix(
    plan: &ScanPlan,
    probe: &ProbeDensity,
    grid: &VoxelGrid,
    sched_params: &ScheduleParams,
    coh: &CoherenceParams,
    gamma_n: f64,
    consts: &PhysicalConstants,
    floor: f64,
) -> Result<SliceMatrix> {
    grid.validate()?;
    coh.validate()?;
    if plan.is_empty() {
        return Err(Error::invalid("scan plan has no slices"));
    }
    if !(floor >= 0.0) {
        return Err(Error::invalid("matrix floor must be non-negative"));
    }
    if grid.len() > u32::MAX as usize {
        return Err(Error::invalid("grid too large"));
    }
    let z_min = grid.origin.z;
    if z_min < 0.0 {
        return Err(Error::BelowSurface { z: z_min });
    }
    let tensors: Vec<Matrix3<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|v| coupling_tensor(probe, &grid.center(v), gamma_n, consts))
        .collect();
    let schedules = plan_schedules(plan, sched_params, gamma_n)?;
    let n_r = plan.n_r;
    let blocks: Vec<RowBlock> = plan
        .orientations
        .par_iter()
        .enumerate()
        .map(|(o, fo)| {
            let rows = o * n_r..(o + 1) * n_r;
            let gammas: Vec<f64> = plan.slices[rows.clone()].iter().map(|s| s.gamma).collect();
            let r = orientation_rows(&fo.unit(), &tensors, &gammas, &schedules[rows.clone()], rows.start, coh, gamma_n, floor)?;
            Ok(RowBlock::from_rows(rows.start, r))
        })
        .collect::<Result<_>>()?;
    SliceMatrix::from_blocks(grid.len(), blocks, floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvertOptions {
    /// Tikhonov damping; `None` means 1e-3 times the largest row norm.
    pub lambda: Option<f64>,
    pub clamp_nonnegative: bool,
    pub max_iter: usize,
    /// Relative normal-equation residual at which iteration stops.
    pub tol: f64,
    /// Report hitting `max_iter` as an error instead of returning the last iterate.
    pub require_convergence: bool,
}

impl Default for InvertOptions {
    fn default() -> Self {
        InvertOptions { lambda: None, clamp_nonnegative: true, max_iter: 5000, tol: 1e-6, require_convergence: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub lambda: f64,
    /// Final relative (projected) normal-equation residual.
    pub residual: f64,
    pub converged: bool,
    /// sqrt(|b - Mx|^2 + lambda^2 |x|^2) after each iteration.
    pub residual_history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Damped CGLS on min |W (M x - b)|^2 + lambda^2 |x|^2, with W = diag(weights) or the
/// identity. With clamping, iterates are projected onto x >= 0 and the search direction
/// restarts whenever the projection is active.
pub fn solve(
    m: &SliceMatrix,
    signals: &[f64],
    weights: Option<&[f64]>,
    options: &InvertOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    if signals.len() != m.n_rows {
        return Err(Error::invalid(format!("{} signals for {} operator rows", signals.len(), m.n_rows)));
    }
    if signals.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("signals must be finite"));
    }
    if let Some(w) = weights {
        if w.len() != m.n_rows || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("row weights must be finite, non-negative, one per row"));
        }
    }
    if !(options.tol > 0.0) {
        return Err(Error::invalid("solver tolerance must be positive"));
    }
    let weigh = |mut v: Vec<f64>| {
        if let Some(w) = weights {
            v.iter_mut().zip(w).for_each(|(a, b)| *a *= b);
        }
        v
    };
    let lambda = match options.lambda {
        Some(l) => l,
        None => 1e-3 * weigh(m.row_norms()).into_iter().fold(0.0, f64::max),
    };
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be non-negative"));
    }
    let l2 = lambda * lambda;
    let n = m.n_cols;
    let wb = weigh(signals.to_vec());
    let mut x = vec![0.0; n];
    let mut r = wb.clone();
    let mut s = m.mul_transpose(&weigh(r.clone()));
    let s0 = dot(&s, &s).sqrt();
    let mut report =
        SolveReport { iterations: 0, lambda, residual: 0.0, converged: true, residual_history: Vec::new() };
    if s0 == 0.0 {
        return Ok((x, report));
    }
    let clamp = options.clamp_nonnegative;
    // Components held at the bound do not move.
    let free = |x: &[f64], s: &[f64], i: usize| !clamp || x[i] > 0.0 || s[i] > 0.0;
    let project = |x: &[f64], s: &[f64]| -> Vec<f64> { (0..n).map(|i| if free(x, s, i) { s[i] } else { 0.0 }).collect() };
    let mut p = project(&x, &s);
    let mut gamma = dot(&p, &p);
    let mut residual = gamma.sqrt() / s0;
    let mut it = 0;
    while residual > options.tol && it < options.max_iter {
        it += 1;
        let q = weigh(m.mul(&p));
        let delta = dot(&q, &q) + l2 * dot(&p, &p);
        if delta <= 0.0 {
            break;
        }
        let alpha = gamma / delta;
        let mut projected = false;
        for i in 0..n {
            x[i] += alpha * p[i];
            if clamp && x[i] < 0.0 {
                x[i] = 0.0;
                projected = true;
            }
        }
        if projected {
            let mx = weigh(m.mul(&x));
            r = wb.iter().zip(&mx).map(|(b, v)| b - v).collect();
        } else {
            for (ri, qi) in r.iter_mut().zip(&q) {
                *ri -= alpha * qi;
            }
        }
        s = m.mul_transpose(&weigh(r.clone()));
        for i in 0..n {
            s[i] -= l2 * x[i];
        }
        let g = project(&x, &s);
        let gamma_new = dot(&g, &g);
        if projected {
            p = g;
        } else {
            let beta = gamma_new / gamma;
            for i in 0..n {
                p[i] = if free(&x, &s, i) { g[i] + beta * p[i] } else { 0.0 };
            }
        }
        gamma = gamma_new;
        residual = gamma.sqrt() / s0;
        report.residual_history.push((dot(&r, &r) + l2 * dot(&x, &x)).sqrt());
    }
    report.iterations = it;
    report.residual = residual;
    report.converged = residual <= options.tol;
    if !report.converged && options.require_convergence {
        return Err(Error::NonConvergence { residual, iterations: it });
    }
    Ok((x, report))
}

/// Inverse shot-noise standard deviation of l_net per row, from the empty-scene
/// signal s0: sd(l) ~ sqrt((1/2 + s0)(1/2 - s0) / n_m) / s0.
pub fn shot_noise_weights(baseline_s_net: &[f64], n_m: u32) -> Result<Vec<f64>> {
    if n_m == 0 {
        return Err(Error::invalid("noise weights need n_m >= 1"));
    }
    let floor = 1.0 / (4.0 * n_m as f64);
    Ok(baseline_s_net
        .iter()
        .map(|s| {
            let s = s.clamp(floor, 0.5 - floor);
            s / ((0.5 + s) * (0.5 - s) / n_m as f64).sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityImage {
    pub grid: VoxelGrid,
    /// Spins per voxel, grid order.
    pub rho: Vec<f32>,
}

impl DensityImage {
    pub fn new(grid: VoxelGrid, rho: Vec<f32>) -> Result<Self> {
        if rho.len() != grid.len() {
            return Err(Error::invalid("image size does not match grid"));
        }
        if rho.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image values must be finite"));
        }
        Ok(DensityImage { grid, rho })
    }

    pub fn max(&self) -> f32 {
        self.rho.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Solve and package the result as an image on `grid`.
pub fn invert(
    m: &SliceMatrix,
    grid: &VoxelGrid,
    signals: &[f64],
    weights: Option<&[f64]>,
    options: &InvertOptions,
) -> Result<(DensityImage, SolveReport)> {
    if grid.len() != m.n_cols {
        return Err(Error::invalid("grid does not match operator columns"));
    }
    let (x, rep) = solve(m, signals, weights, options)?;
    Ok((DensityImage::new(*grid, x.iter().map(|v| *v as f32).collect())?, rep))
}

/// l_net with the empty-scene profile removed.
pub fn baseline_subtract(l_net: &[f64], baseline: &[f64]) -> Result<Vec<f64>> {
    if l_net.len() != baseline.len() {
        return Err(Error::invalid("baseline length does not match signals"));
    }
    Ok(l_net.iter().zip(baseline).map(|(a, b)| a - b).collect())
}

/// Records of one scan, checked against the plan they claim to follow.
pub fn check_records(plan: &ScanPlan, records: &[SignalRecord]) -> Result<()> {
    if records.len() != plan.len() {
        return Err(Error::invalid(format!("{} records for a plan of {} slices", records.len(), plan.len())));
    }
    for (i, (r, s)) in records.iter().zip(&plan.slices).enumerate() {
        if r.slice_index != i || r.slice != *s {
            return Err(Error::invalid(format!("record {i} does not match slice {i} of the configured plan")));
        }
    }
    Ok(())
}

/// Image from scan records: probe dephasing removed from l_net, rows weighted by the
/// empty-scene shot noise when the records carry a readout count and `weighted` is set.
#[allow(clippy::too_many_arguments)]
pub fn invert_records(
    plan: &ScanPlan,
    records: &[SignalRecord],
    probe: &ProbeDensity,
    grid: &VoxelGrid,
    sched_params: &ScheduleParams,
    coh: &CoherenceParams,
    gamma_n: f64,
    consts: &PhysicalConstants,
    floor: f64,
    weighted: bool,
    options: &InvertOptions,
) -> Result<(DensityImage, SolveReport)> {
    check_records(plan, records)?;
    let m = build_slice_matrix(plan, probe, grid, sched_params, coh, gamma_n, consts, floor)?;
    let l: Vec<f64> = records.iter().map(|r| r.l_net).collect();
    let base: Vec<f64> = records
        .iter()
        .map(|r| if coh.t2_probe.is_finite() { r.schedule.t_det / coh.t2_probe } else { 0.0 })
        .collect();
    let signals = baseline_subtract(&l, &base)?;
    let n_m = records.iter().map(|r| r.n_m_used).max().unwrap_or(0);
    let weights = if weighted && n_m > 0 {
        // Weights from the measured s_net would correlate with the noise itself: near
        // s = 1/2 a slice with zero dark counts gets a far larger weight than its neighbour.
        let s0: Vec<f64> = base.iter().map(|b| 0.5 * (-b).exp()).collect();
        Some(shot_noise_weights(&s0, n_m)?)
    } else {
        None
    };
    invert(&m, grid, &signals, weights.as_deref(), options)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> SliceMatrix {
        let rows = vec![
            vec![(0, 2.0), (2, 1.0)],
            vec![(1, 1.0)],
            vec![(0, 1.0), (1, 1.0), (2, 3.0)],
            vec![(2, 0.5), (1, 0.25)],
        ];
        SliceMatrix::from_rows(3, rows, 0.0).unwrap()
    }

    #[test]
    fn grid_indexing() {
        let g = VoxelGrid::new([3, 4, 5], 0.5e-10, Vector3::new(0.0, 0.0, 1e-10)).unwrap();
        assert_eq!(g.len(), 60);
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
        for v in 0..g.len() {
            let [i, j, l] = g.coords(v);
            assert_eq!(g.index(i, j, l), v);
            assert_eq!(g.locate(&g.center(v)), Some(v));
        }
        assert!(VoxelGrid::new([0, 1, 1], 1.0, Vector3::zeros()).is_err());
    }

    #[test]
    fn covering_box() {
        let g = VoxelGrid::covering(Vector3::new(-5e-10, -5e-10, 1e-10), Vector3::new(5e-10, 5e-10, 11e-10), 0.5e-10)
            .unwrap();
        assert_eq!(g.dims, [20, 20, 20]);
        assert!((g.origin.z - 1.25e-10).abs() < 1e-22);
    }

    #[test]
    fn csr_products() {
        let m = toy();
        let y = m.mul(&[1.0, 2.0, 3.0]);
        assert_eq!(y, vec![5.0, 2.0, 12.0, 2.0]);
        let x = m.mul_transpose(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(x, vec![3.0, 2.25, 4.5]);
    }

    #[test]
    fn exact_small_system() {
        let m = toy();
        let truth = [0.3, 1.2, 0.7];
        let b = m.mul(&truth);
        let opts = InvertOptions { lambda: Some(0.0), ..Default::default() };
        let (x, rep) = solve(&m, &b, None, &opts).unwrap();
        assert!(rep.converged);
        for (a, t) in x.iter().zip(truth) {
            assert!((a - t).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_signal_zero_image() {
        let m = toy();
        let (x, rep) = solve(&m, &[0.0; 4], None, &InvertOptions::default()).unwrap();
        assert!(x.iter().all(|v| *v == 0.0));
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn clamping_keeps_nonnegative() {
        let m = toy();
        let b = m.mul(&[1.0, -0.5, 0.2]);
        let (x, _) = solve(&m, &b, None, &InvertOptions { require_convergence: false, ..Default::default() }).unwrap();
        assert!(x.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(solve(&toy(), &[1.0], None, &InvertOptions::default()).is_err());
    }
}
