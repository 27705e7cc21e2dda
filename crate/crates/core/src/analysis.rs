//! Peak detection, peak-to-site matching and iso-density masks.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::DensityImage;

pub const DEFAULT_PEAK_THRESHOLD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Voxel centre, m.
    pub position: Vector3<f64>,
    pub amplitude: f64,
    pub voxel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakSet {
    pub peaks: Vec<Peak>,
    pub detection_threshold: f64,
}

/// Strict maxima over the 26-neighbourhood with amplitude >= threshold_frac * global max.
/// Voxels on the grid boundary are never reported. Peaks come out in voxel order.
pub fn find_peaks(img: &DensityImage, threshold_frac: f64) -> PeakSet {
    let g = &img.grid;
    let [nx, ny, nz] = g.dims;
    let gmax = img.max() as f64;
    let mut peaks = Vec::new();
    if gmax > 0.0 && nx >= 3 && ny >= 3 && nz >= 3 {
        let cut = threshold_frac * gmax;
        for l in 1..nz - 1 {
            for j in 1..ny - 1 {
                for i in 1..nx - 1 {
                    let v = g.index(i, j, l);
                    let val = img.rho[v];
                    if (val as f64) < cut || val <= 0.0 {
                        continue;
                    }
                    let mut strict = true;
                    'nb: for dl in 0..3 {
                        for dj in 0..3 {
                            for di in 0..3 {
                                if (di, dj, dl) == (1, 1, 1) {
                                    continue;
                                }
                                if img.rho[g.index(i + di - 1, j + dj - 1, l + dl - 1)] >= val {
                                    strict = false;
                                    break 'nb;
                                }
                            }
                        }
                    }
                    if strict {
                        peaks.push(Peak { position: g.center(v), amplitude: val as f64, voxel: v });
                    }
                }
            }
        }
    }
    PeakSet { peaks, detection_threshold: threshold_frac }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    /// Nearest pairs first, one-to-one.
    #[default]
    Greedy,
    /// Minimum total distance assignment.
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub site: usize,
    pub peak: usize,
    /// m
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub pairs: Vec<MatchPair>,
    pub unmatched_sites: Vec<usize>,
    pub unmatched_peaks: Vec<usize>,
    /// Mean paired distance, m; `None` without pairs.
    pub epsilon: Option<f64>,
    pub unmatched_site_fraction: f64,
    pub unmatched_peak_fraction: f64,
    pub r_cut: f64,
    pub method: MatchMethod,
}

pub fn match_peaks(peaks: &PeakSet, truth: &[Vector3<f64>], r_cut: f64, method: MatchMethod) -> Result<MatchReport> {
    if !(r_cut > 0.0) {
        return Err(Error::invalid("r_cut must be positive"));
    }
    let pos: Vec<Vector3<f64>> = peaks.peaks.iter().map(|p| p.position).collect();
    let mut pairs = match method {
        MatchMethod::Greedy => greedy(truth, &pos, r_cut),
        MatchMethod::Optimal => optimal(truth, &pos, r_cut),
    };
    pairs.sort_by_key(|p| p.site);
    let mut site_used = vec![false; truth.len()];
    let mut peak_used = vec![false; pos.len()];
    for p in &pairs {
        site_used[p.site] = true;
        peak_used[p.peak] = true;
    }
    let unmatched_sites: Vec<usize> = (0..truth.len()).filter(|i| !site_used[*i]).collect();
    let unmatched_peaks: Vec<usize> = (0..pos.len()).filter(|i| !peak_used[*i]).collect();
    let epsilon = if pairs.is_empty() {
        None
    } else {
        Some(pairs.iter().map(|p| p.distance).sum::<f64>() / pairs.len() as f64)
    };
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(MatchReport {
        unmatched_site_fraction: frac(unmatched_sites.len(), truth.len()),
        unmatched_peak_fraction: frac(unmatched_peaks.len(), pos.len()),
        pairs,
        unmatched_sites,
        unmatched_peaks,
        epsilon,
        r_cut,
        method,
    })
}

fn greedy(truth: &[Vector3<f64>], peaks: &[Vector3<f64>], r_cut: f64) -> Vec<MatchPair> {
    let mut cand = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        for (j, p) in peaks.iter().enumerate() {
            let d = (t - p).norm();
            if d <= r_cut {
                cand.push(MatchPair { site: i, peak: j, distance: d });
            }
        }
    }
    cand.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.site.cmp(&b.site)).then(a.peak.cmp(&b.peak)));
    let mut su = vec![false; truth.len()];
    let mut pu = vec![false; peaks.len()];
    let mut out = Vec::new();
    for c in cand {
        if !su[c.site] && !pu[c.peak] {
            su[c.site] = true;
            pu[c.peak] = true;
            out.push(c);
        }
    }
    out
}

/// Assignment over sites x peaks padded with dummies: leaving a site or a peak
/// unmatched costs r_cut, so any pair within r_cut is preferred to two singletons.
fn optimal(truth: &[Vector3<f64>], peaks: &[Vector3<f64>], r_cut: f64) -> Vec<MatchPair> {
    let (n, m) = (truth.len(), peaks.len());
    let size = n + m;
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let big = 1e6 * r_cut;
    let cost = |i: usize, j: usize| -> f64 {
        match (i < n, j < m) {
            (true, true) => {
                let d = (truth[i] - peaks[j]).norm();
                if d <= r_cut {
                    d
                } else {
                    big
                }
            }
            (false, false) => 0.0,
            _ => r_cut,
        }
    };
    let assign = hungarian(size, cost);
    assign
        .iter()
        .enumerate()
        .filter(|(i, j)| *i < n && **j < m)
        .filter_map(|(i, j)| {
            let d = (truth[i] - peaks[*j]).norm();
            (d <= r_cut).then_some(MatchPair { site: i, peak: *j, distance: d })
        })
        .collect()
}

/// Square min-cost assignment (potentials / shortest augmenting path). Returns the
/// column assigned to each row.
fn hungarian(size: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; size + 1];
    let mut v = vec![0.0; size + 1];
    let mut way = vec![0usize; size + 1];
    // p[j]: row (1-based) matched to column j; column 0 is the virtual root
    let mut p = vec![0usize; size + 1];
    for i in 1..=size {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; size + 1];
        let mut used = vec![false; size + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=size {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=size {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; size];
    for j in 1..=size {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// Voxels at or above level_frac * global max.
pub fn iso_contour_mask(img: &DensityImage, level_frac: f64) -> Result<Vec<bool>> {
    if !(level_frac > 0.0 && level_frac < 1.0) {
        return Err(Error::invalid("contour level must lie in (0, 1)"));
    }
    let cut = level_frac * img.max() as f64;
    Ok(img.rho.iter().map(|v| *v as f64 >= cut).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::VoxelGrid;

    fn grid() -> VoxelGrid {
        VoxelGrid::new([12, 12, 12], 0.5e-10, Vector3::new(-3e-10, -3e-10, 1e-10)).unwrap()
    }

    fn blobs(centres: &[[usize; 3]], sigma: f64) -> DensityImage {
        let g = grid();
        let rho = (0..g.len())
            .map(|v| {
                let c = g.coords(v);
                centres
                    .iter()
                    .map(|b| {
                        let d2: f64 = (0..3).map(|a| (c[a] as f64 - b[a] as f64).powi(2)).sum();
                        (-d2 / (2.0 * sigma * sigma)).exp()
                    })
                    .sum::<f64>() as f32
            })
            .collect();
        DensityImage::new(g, rho).unwrap()
    }

    #[test]
    fn single_blob_single_peak() {
        let img = blobs(&[[5, 6, 4]], 1.2);
        let ps = find_peaks(&img, DEFAULT_PEAK_THRESHOLD);
        assert_eq!(ps.peaks.len(), 1);
        assert_eq!(img.grid.coords(ps.peaks[0].voxel), [5, 6, 4]);
    }

    #[test]
    fn two_separated_blobs() {
        let img = blobs(&[[3, 3, 3], [8, 8, 8]], 0.8);
        assert_eq!(find_peaks(&img, 0.25).peaks.len(), 2);
    }

    #[test]
    fn plateau_and_boundary_not_peaks() {
        let g = grid();
        let mut rho = vec![0.0f32; g.len()];
        rho[g.index(4, 4, 4)] = 1.0;
        rho[g.index(5, 4, 4)] = 1.0;
        rho[g.index(0, 6, 6)] = 2.0;
        let img = DensityImage::new(g, rho).unwrap();
        assert!(find_peaks(&img, 0.1).peaks.is_empty());
    }

    #[test]
    fn zero_image_has_no_peaks() {
        let g = grid();
        let img = DensityImage::new(g, vec![0.0; g.len()]).unwrap();
        assert!(find_peaks(&img, 0.25).peaks.is_empty());
    }

    fn set(pos: &[Vector3<f64>]) -> PeakSet {
        PeakSet {
            peaks: pos.iter().enumerate().map(|(i, p)| Peak { position: *p, amplitude: 1.0, voxel: i }).collect(),
            detection_threshold: 0.25,
        }
    }

    #[test]
    fn exact_and_shifted_matches() {
        let truth = vec![Vector3::new(0.0, 0.0, 1e-10), Vector3::new(3e-10, 0.0, 2e-10), Vector3::new(0.0, 4e-10, 5e-10)];
        for m in [MatchMethod::Greedy, MatchMethod::Optimal] {
            let r = match_peaks(&set(&truth), &truth, 1e-10, m).unwrap();
            assert_eq!(r.epsilon, Some(0.0));
            assert!(r.unmatched_sites.is_empty() && r.unmatched_peaks.is_empty());
            let shift = Vector3::new(0.3e-10, 0.0, 0.0);
            let moved: Vec<_> = truth.iter().map(|t| t + shift).collect();
            let r = match_peaks(&set(&truth), &moved, 1e-10, m).unwrap();
            assert!((r.epsilon.unwrap() - 0.3e-10).abs() < 1e-22);
        }
    }

    #[test]
    fn empty_truth() {
        let r = match_peaks(&set(&[Vector3::zeros()]), &[], 1e-10, MatchMethod::Greedy).unwrap();
        assert!(r.pairs.is_empty() && r.epsilon.is_none());
        assert_eq!(r.unmatched_peaks, vec![0]);
    }

    #[test]
    fn optimal_beats_greedy_on_chain() {
        // greedy takes the closest pair and strands the outer site
        let a = 1e-10;
        let truth = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0 * a, 0.0, 0.0)];
        let peaks = vec![Vector3::new(0.45 * a, 0.0, 0.0), Vector3::new(-0.5 * a, 0.0, 0.0)];
        let g = match_peaks(&set(&peaks), &truth, 0.58 * a, MatchMethod::Greedy).unwrap();
        let o = match_peaks(&set(&peaks), &truth, 0.58 * a, MatchMethod::Optimal).unwrap();
        assert_eq!(g.pairs.len(), 1);
        assert_eq!(o.pairs.len(), 2);
    }

    #[test]
    fn bad_r_cut_rejected() {
        assert!(match_peaks(&set(&[]), &[], 0.0, MatchMethod::Greedy).is_err());
    }

    #[test]
    fn masks_nest() {
        let img = blobs(&[[5, 5, 5]], 1.5);
        let half = iso_contour_mask(&img, 0.5).unwrap();
        let quarter = iso_contour_mask(&img, 0.25).unwrap();
        assert!(half.iter().zip(&quarter).all(|(h, q)| !h || *q));
        assert!(half[img.grid.index(5, 5, 5)]);
        assert!(iso_contour_mask(&img, 1.0).is_err());
    }
}
