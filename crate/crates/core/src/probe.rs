//! Donor probability densities and the above-surface ZZ coupling field.
//!
//! Frame: the surface is the z = 0 plane, the donor sits at (0, 0, -depth) and
//! slices are addressed from the surface anchor at the origin.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molecule::{PhysicalConstants, NM};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldOrientation {
    /// Co-latitude of B0, rad.
    pub theta: f64,
    /// Longitude of B0, rad.
    pub phi: f64,
    /// T
    pub b0_magnitude: f64,
}

impl FieldOrientation {
    pub fn new(theta: f64, phi: f64, b0_magnitude: f64) -> Result<Self> {
        let o = FieldOrientation { theta, phi, b0_magnitude };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.theta) {
            return Err(Error::invalid(format!("theta {} outside [0, pi/2)", self.theta)));
        }
        if !(0.0..std::f64::consts::TAU).contains(&self.phi) {
            return Err(Error::invalid(format!("phi {} outside [0, 2pi)", self.phi)));
        }
        Ok(())
    }

    pub fn unit(&self) -> Vector3<f64> {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        Vector3::new(st * cp, st * sp, ct)
    }
}

/// ZZ coupling of a point electron dipole at separation `r_vec` (nucleus minus electron).
pub fn point_dipole_zz(
    r_vec: &Vector3<f64>,
    b_hat: &Vector3<f64>,
    gamma_n: f64,
    consts: &PhysicalConstants,
) -> Result<f64> {
    let r2 = r_vec.norm_squared();
    if r2 == 0.0 || !r2.is_finite() {
        return Err(Error::ZeroLength);
    }
    Ok(point_term(r_vec, r2, b_hat) * consts.dipole_prefactor(gamma_n))
}

#[inline]
fn point_term(r: &Vector3<f64>, r2: f64, b: &Vector3<f64>) -> f64 {
    let rn = r2.sqrt();
    let c = b.dot(r) / rn;
    (1.0 - 3.0 * c * c) / (r2 * rn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelTag {
    #[serde(rename = "point-dipole")]
    PointDipole,
    #[serde(rename = "analytic-1P")]
    Analytic1P,
    #[serde(rename = "analytic-2P+")]
    Analytic2PPlus,
    #[serde(rename = "analytic-Bi")]
    AnalyticBi,
    #[serde(rename = "imported-grid")]
    ImportedGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDensity {
    /// Site positions, m.
    pub sites: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
    /// Donor depth below the surface, m.
    pub depth: f64,
    pub model_tag: ModelTag,
    /// Probability fraction kept by the last thresholding step.
    pub retained_fraction: f64,
    /// Lattice pitch for sampled densities, m.
    pub pitch: Option<f64>,
}

impl ProbeDensity {
    /// Unit weight at the donor position.
    pub fn point(depth: f64) -> Result<Self> {
        if !(depth > 0.0) {
            return Err(Error::invalid("donor depth must be positive"));
        }
        Ok(ProbeDensity {
            sites: vec![Vector3::new(0.0, 0.0, -depth)],
            weights: vec![1.0],
            depth,
            model_tag: ModelTag::PointDipole,
            retained_fraction: 1.0,
            pitch: None,
        })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.len() != self.weights.len() || self.sites.is_empty() {
            return Err(Error::invalid("density sites and weights mismatch or empty"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("density weights must be finite and non-negative"));
        }
        if self.sites.iter().any(|s| s.z > 0.0) {
            return Err(Error::invalid("density sites must lie at z <= 0"));
        }
        Ok(())
    }

    /// Weighted centroid, m.
    pub fn centroid(&self) -> Vector3<f64> {
        let w = self.total_weight();
        self.sites.iter().zip(&self.weights).map(|(s, w)| s * *w).sum::<Vector3<f64>>() / w
    }

    /// (vertical variance, lateral variance per axis) about the centroid, m^2.
    pub fn second_moments(&self) -> (f64, f64) {
        let c = self.centroid();
        let w = self.total_weight();
        let (mut vz, mut vxy) = (0.0, 0.0);
        for (s, wi) in self.sites.iter().zip(&self.weights) {
            let d = s - c;
            vz += wi * d.z * d.z;
            vxy += wi * 0.5 * (d.x * d.x + d.y * d.y);
        }
        (vz / w, vxy / w)
    }

    /// Sites on the vertical axis above the donor as (z, probability per m^3).
    pub fn column(&self) -> Vec<(f64, f64)> {
        let Some(p) = self.pitch else { return Vec::new() };
        let vol = p * p * p;
        let mut col: Vec<(f64, f64)> = self
            .sites
            .iter()
            .zip(&self.weights)
            .filter(|(s, w)| {
                s.x.abs() < 0.25 * p && s.y.abs() < 0.25 * p && s.z > -self.depth + 0.25 * p && **w > 0.0
            })
            .map(|(s, w)| (s.z, w / vol))
            .collect();
        col.sort_by(|a, b| a.0.total_cmp(&b.0));
        col
    }
}

/// Anisotropic exponential density |Psi|^2 ~ exp(-2 sqrt((x^2+y^2)/a_l^2 + (z+d)^2/a_v^2)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticModel {
    pub tag: ModelTag,
    /// m
    pub lateral_radius: f64,
    /// m
    pub vertical_radius: f64,
    /// m
    pub depth: f64,
    /// Lattice pitch, m.
    pub pitch: f64,
}

/// Bohr radius of the uncompressed 1P analytic model, m.
pub const BOHR_RADIUS_1P: f64 = 1.0 * NM;

impl AnalyticModel {
    /// Calibrated depth family: volume-preserving vertical compression that is 0.6 at
    /// 1 nm and vanishes from 4 nm down. 2P+ and Bi use half the 1P radius.
    pub fn calibrated(tag: ModelTag, depth: f64, pitch: f64) -> Result<Self> {
        let a = match tag {
            ModelTag::Analytic1P => BOHR_RADIUS_1P,
            ModelTag::Analytic2PPlus | ModelTag::AnalyticBi => 0.5 * BOHR_RADIUS_1P,
            _ => return Err(Error::invalid("calibrated models exist only for analytic tags")),
        };
        let c = compression_ratio(depth);
        Ok(AnalyticModel {
            tag,
            lateral_radius: a * c.powf(-1.0 / 3.0),
            vertical_radius: a * c.powf(2.0 / 3.0),
            depth,
            pitch,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lateral_radius > 0.0 && self.vertical_radius > 0.0) {
            return Err(Error::invalid("Bohr radii must be positive"));
        }
        if !(self.pitch > 0.0) {
            return Err(Error::invalid("lattice pitch must be positive"));
        }
        if !(self.depth > 0.0) {
            return Err(Error::invalid("donor depth must be positive"));
        }
        Ok(())
    }

    /// Unnormalized density at a point.
    pub fn shape(&self, p: &Vector3<f64>) -> f64 {
        let u = (p.x * p.x + p.y * p.y) / (self.lateral_radius * self.lateral_radius)
            + (p.z + self.depth).powi(2) / (self.vertical_radius * self.vertical_radius);
        (-2.0 * u.sqrt()).exp()
    }

    /// Ratio of the density at (x, y, z) to the density at (0, 0, z).
    pub fn lateral_falloff(&self, xy: &Vector2<f64>, z: f64) -> f64 {
        self.shape(&Vector3::new(xy.x, xy.y, z)) / self.shape(&Vector3::new(0.0, 0.0, z))
    }
}

/// Vertical/lateral radius ratio of the calibrated family at a given depth.
pub fn compression_ratio(depth: f64) -> f64 {
    let t = ((4.0 * NM - depth) / (3.0 * NM)).clamp(0.0, 1.0);
    1.0 - 0.4 * t
}

/// Sample an analytic model on a cubic lattice centred on the donor column, truncated at
/// the surface and renormalized to unit weight (no thresholding).
pub fn density_from_model(m: &AnalyticModel) -> Result<ProbeDensity> {
    m.validate()?;
    let extent = 5.0;
    let nl = (extent * m.lateral_radius / m.pitch).ceil() as i64;
    let nv = (extent * m.vertical_radius / m.pitch).ceil() as i64;
    let mut sites = Vec::new();
    let mut weights = Vec::new();
    for k in -nv..=nv {
        let z = -m.depth + k as f64 * m.pitch;
        if z > -0.5 * m.pitch {
            continue;
        }
        for j in -nl..=nl {
            for i in -nl..=nl {
                let p = Vector3::new(i as f64 * m.pitch, j as f64 * m.pitch, z);
                let w = m.shape(&p);
                if w > 0.0 {
                    sites.push(p);
                    weights.push(w);
                }
            }
        }
    }
    if sites.is_empty() {
        return Err(Error::invalid("model produced no sites below the surface"));
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(ProbeDensity {
        sites,
        weights,
        depth: m.depth,
        model_tag: m.tag,
        retained_fraction: 1.0,
        pitch: Some(m.pitch),
    })
}

/// Keep sites with weight >= rel_cut * max weight. Weights are not renormalized.
pub fn threshold_density(d: &ProbeDensity, rel_cut: f64) -> ProbeDensity {
    let wmax = d.weights.iter().cloned().fold(0.0, f64::max);
    let cut = rel_cut * wmax;
    let total = d.total_weight();
    let mut out = ProbeDensity { sites: Vec::new(), weights: Vec::new(), ..d.clone() };
    for (s, w) in d.sites.iter().zip(&d.weights) {
        if *w >= cut {
            out.sites.push(*s);
            out.weights.push(*w);
        }
    }
    out.retained_fraction = d.retained_fraction * out.total_weight() / total;
    out
}

/// Weighted-sum coupling at a point on or above the surface.
pub fn coupling_at(
    d: &ProbeDensity,
    point: &Vector3<f64>,
    orientation: &FieldOrientation,
    gamma_n: f64,
    consts: &PhysicalConstants,
) -> Result<f64> {
    if point.z < 0.0 {
        return Err(Error::BelowSurface { z: point.z });
    }
    Ok(coupling_unchecked(d, point, &orientation.unit(), gamma_n, consts))
}

pub(crate) fn coupling_unchecked(
    d: &ProbeDensity,
    point: &Vector3<f64>,
    b: &Vector3<f64>,
    gamma_n: f64,
    consts: &PhysicalConstants,
) -> f64 {
    let mut acc = 0.0;
    for (s, w) in d.sites.iter().zip(&d.weights) {
        let r = point - s;
        acc += w * point_term(&r, r.norm_squared(), b);
    }
    acc * consts.dipole_prefactor(gamma_n)
}

/// Gradient of the coupling with respect to the evaluation point, rad s^-1 m^-1.
pub fn coupling_gradient(
    d: &ProbeDensity,
    point: &Vector3<f64>,
    b: &Vector3<f64>,
    gamma_n: f64,
    consts: &PhysicalConstants,
) -> Vector3<f64> {
    let mut g = Vector3::zeros();
    for (s, w) in d.sites.iter().zip(&d.weights) {
        let r = point - s;
        let r2 = r.norm_squared();
        let r5 = r2 * r2 * r2.sqrt();
        let br = b.dot(&r);
        let f = r2 - 3.0 * br * br;
        g += (r * 2.0 - b * (6.0 * br) - r * (5.0 * f / r2)) * (*w / r5);
    }
    g * consts.dipole_prefactor(gamma_n)
}

/// Symmetric coupling tensor T with Gamma = b^T T b for any unit b.
pub fn coupling_tensor(
    d: &ProbeDensity,
    point: &Vector3<f64>,
    gamma_n: f64,
    consts: &PhysicalConstants,
) -> Matrix3<f64> {
    let mut t = Matrix3::zeros();
    for (s, w) in d.sites.iter().zip(&d.weights) {
        let r = point - s;
        let r2 = r.norm_squared();
        let r5 = r2 * r2 * r2.sqrt();
        t += (Matrix3::identity() * r2 - r * r.transpose() * 3.0) * (*w / r5);
    }
    t * consts.dipole_prefactor(gamma_n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub r: f64,
    pub gamma: f64,
    /// dGamma/dr along the ray.
    pub gradient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingProfile {
    pub orientation: FieldOrientation,
    pub samples: Vec<ProfileSample>,
    /// Set when |Gamma| is not strictly decreasing over the range.
    pub non_monotone: bool,
}

/// Gamma along the ray r * B0_hat from the surface anchor, with a central-difference
/// ray derivative at step spacing/10.
pub fn coupling_profile(
    d: &ProbeDensity,
    orientation: &FieldOrientation,
    r_min: f64,
    r_max: f64,
    n_samples: usize,
    gamma_n: f64,
    consts: &PhysicalConstants,
) -> Result<CouplingProfile> {
    if n_samples == 0 || !(r_max >= r_min) || r_min < 0.0 {
        return Err(Error::invalid("profile range must satisfy 0 <= r_min <= r_max, n >= 1"));
    }
    let spacing = if n_samples > 1 { (r_max - r_min) / (n_samples - 1) as f64 } else { 0.0 };
    let b = orientation.unit();
    let samples: Vec<ProfileSample> = (0..n_samples)
        .map(|i| {
            let r = r_min + i as f64 * spacing;
            let gamma = coupling_unchecked(d, &(b * r), &b, gamma_n, consts);
            let gradient = ray_derivative(d, r, &b, spacing, gamma_n, consts);
            ProfileSample { r, gamma, gradient }
        })
        .collect();
    let non_monotone = samples.windows(2).any(|w| w[1].gamma.abs() >= w[0].gamma.abs());
    Ok(CouplingProfile { orientation: *orientation, samples, non_monotone })
}

fn fd_step(spacing: f64, d: &ProbeDensity) -> f64 {
    if spacing > 0.0 {
        spacing / 10.0
    } else {
        1e-4 * d.depth
    }
}

fn ray_derivative(
    d: &ProbeDensity,
    r: f64,
    b: &Vector3<f64>,
    spacing: f64,
    gamma_n: f64,
    consts: &PhysicalConstants,
) -> f64 {
    let h = fd_step(spacing, d);
    let gp = coupling_unchecked(d, &(b * (r + h)), b, gamma_n, consts);
    let gm = coupling_unchecked(d, &(b * (r - h)), b, gamma_n, consts);
    (gp - gm) / (2.0 * h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    /// m, along B0 from the surface anchor.
    pub r: f64,
    pub orientation: FieldOrientation,
    /// rad s^-1
    pub gamma: f64,
    /// dGamma/dr along the ray, rad s^-1 m^-1.
    pub gradient: f64,
    /// |grad Gamma| at the slice point, rad s^-1 m^-1.
    pub gradient_norm: f64,
}

impl SliceSpec {
    pub fn point(&self) -> Vector3<f64> {
        self.orientation.unit() * self.r
    }
}

/// Address one slice. `r_spacing` is the sweep step used for the ray derivative.
pub fn slice_for(
    d: &ProbeDensity,
    r: f64,
    orientation: &FieldOrientation,
    r_spacing: f64,
    gamma_n: f64,
    consts: &PhysicalConstants,
) -> Result<SliceSpec> {
    if !(r >= 0.0) {
        return Err(Error::invalid("slice radius must be non-negative"));
    }
    let b = orientation.unit();
    let p = b * r;
    let gamma = coupling_at(d, &p, orientation, gamma_n, consts)?;
    let gradient = ray_derivative(d, r, &b, r_spacing, gamma_n, consts);
    let gradient_norm = coupling_gradient(d, &p, &b, gamma_n, consts).norm();
    Ok(SliceSpec { r, orientation: *orientation, gamma, gradient, gradient_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperfineMap {
    /// Surface H positions, m.
    pub positions: Vec<Vector2<f64>>,
    /// rad s^-1
    pub a: Vec<f64>,
    pub a_max: f64,
    /// Extrapolated surface density on the donor axis, m^-3.
    pub surface_density: f64,
    /// Fitted decay rate of ln|Psi|^2 toward the surface, m^-1 (negative).
    pub decay_slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperfineParams {
    pub gamma_t: f64,
    /// Multiplier on the extrapolated envelope density at a nucleus.
    pub contact_enhancement: f64,
}

/// Calibrated contact enhancement for the analytic family.
pub const CONTACT_ENHANCEMENT: f64 = 40.0;

/// Fit ln|Psi|^2 along the column, extrapolate to the z = 0 plane and apply the contact
/// hyperfine relation at each surface site, with `falloff(xy)` giving the lateral ratio.
pub fn surface_hyperfine_map(
    column: &[(f64, f64)],
    depth: f64,
    lattice: &[Vector2<f64>],
    falloff: &dyn Fn(&Vector2<f64>) -> f64,
    params: &HyperfineParams,
    consts: &PhysicalConstants,
) -> Result<HyperfineMap> {
    if column.len() < 3 {
        return Err(Error::invalid("exponential fit needs at least 3 column samples"));
    }
    if column.iter().any(|(_, w)| !(*w > 0.0)) {
        return Err(Error::invalid("column densities must be positive"));
    }
    // least squares on ln(rho) = c0 + c1 * s, s = height above the donor
    let n = column.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (z, w) in column {
        let s = z + depth;
        let y = w.ln();
        sx += s;
        sy += y;
        sxx += s * s;
        sxy += s * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    if !(slope < 0.0) {
        return Err(Error::NonDecaying { slope });
    }
    let surface_density = (intercept + slope * depth).exp();
    let pref = params.contact_enhancement * 8.0 * std::f64::consts::PI / 3.0
        * consts.mu0_over_4pi
        * consts.hbar
        * consts.gamma_e
        * params.gamma_t.abs();
    let a: Vec<f64> = lattice.iter().map(|xy| pref * surface_density * falloff(xy)).collect();
    let a_max = a.iter().cloned().fold(0.0, f64::max);
    Ok(HyperfineMap { positions: lattice.to_vec(), a, a_max, surface_density, decay_slope: slope })
}

/// Square surface-H lattice of the given spacing covering |x|, |y| <= half_width.
pub fn square_lattice(spacing: f64, half_width: f64) -> Vec<Vector2<f64>> {
    let n = (half_width / spacing).floor() as i64;
    let mut out = Vec::new();
    for j in -n..=n {
        for i in -n..=n {
            out.push(Vector2::new(i as f64 * spacing, j as f64 * spacing));
        }
    }
    out
}

/// a_max for the calibrated analytic family at one depth.
pub fn calibrated_a_max(
    tag: ModelTag,
    depth: f64,
    pitch: f64,
    gamma_t: f64,
    consts: &PhysicalConstants,
) -> Result<f64> {
    let model = AnalyticModel::calibrated(tag, depth, pitch)?;
    let dens = density_from_model(&model)?;
    let lattice = square_lattice(3.84e-10, 3.0 * NM);
    let falloff = |xy: &Vector2<f64>| model.lateral_falloff(xy, 0.0);
    let params = HyperfineParams { gamma_t, contact_enhancement: CONTACT_ENHANCEMENT };
    Ok(surface_hyperfine_map(&dens.column(), depth, &lattice, &falloff, &params, consts)?.a_max)
}

// ---------------------------------------------------------------------------
// Density grid files
//
// Text variant:
//   # nssmri density grid v1
//   pitch <m>
//   origin <x> <y> <z>        (m, position of cell (0,0,0))
//   dims <nx> <ny> <nz>
//   normalized <true|false>
//   depth <m>                 (optional; defaults to minus the weighted centroid z)
//   data
//   <nx*ny*nz weights, whitespace separated, x fastest then y then z>
//
// Binary variant (little endian): magic `NSSGRID1`, u32 nx, ny, nz, f64 pitch,
// f64 origin x, y, z, f64 depth (NaN when absent), u8 normalized, then nx*ny*nz f64.

#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub pitch: f64,
    pub origin: Vector3<f64>,
    pub dims: [usize; 3],
    pub normalized: bool,
    pub depth: Option<f64>,
    pub weights: Vec<f64>,
}

const GRID_MAGIC: &[u8; 8] = b"NSSGRID1";

impl DensityGrid {
    /// Embed a lattice-sampled density in its bounding grid.
    pub fn from_density(d: &ProbeDensity) -> Result<Self> {
        let pitch = d.pitch.ok_or_else(|| Error::invalid("density has no lattice pitch"))?;
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for s in &d.sites {
            lo = lo.inf(s);
            hi = hi.sup(s);
        }
        let dims = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / pitch).round() as usize + 1);
        let mut weights = vec![0.0; dims[0] * dims[1] * dims[2]];
        for (s, w) in d.sites.iter().zip(&d.weights) {
            let idx = [0, 1, 2].map(|a| ((s[a] - lo[a]) / pitch).round() as usize);
            weights[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])] = *w;
        }
        Ok(DensityGrid { pitch, origin: lo, dims, normalized: true, depth: Some(d.depth), weights })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# nssmri density grid v1\n");
        let _ = writeln!(s, "pitch {:e}", self.pitch);
        let _ = writeln!(s, "origin {:e} {:e} {:e}", self.origin.x, self.origin.y, self.origin.z);
        let _ = writeln!(s, "dims {} {} {}", self.dims[0], self.dims[1], self.dims[2]);
        let _ = writeln!(s, "normalized {}", self.normalized);
        if let Some(d) = self.depth {
            let _ = writeln!(s, "depth {d:e}");
        }
        s.push_str("data\n");
        for row in self.weights.chunks(self.dims[0].max(1)) {
            let line: Vec<String> = row.iter().map(|w| format!("{w:e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(8 + 12 + 40 + 1 + 8 * self.weights.len());
        b.extend_from_slice(GRID_MAGIC);
        for d in self.dims {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in [self.pitch, self.origin.x, self.origin.y, self.origin.z, self.depth.unwrap_or(f64::NAN)] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.push(self.normalized as u8);
        for w in &self.weights {
            b.extend_from_slice(&w.to_le_bytes());
        }
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(GRID_MAGIC) {
            Self::parse_binary(bytes)
        } else {
            let text = std::str::from_utf8(bytes)
                .map_err(|_| Error::Format("density grid is neither binary nor UTF-8 text".into()))?;
            Self::parse_text(text)
        }
    }

    fn parse_binary(b: &[u8]) -> Result<Self> {
        let head = 8 + 12 + 40 + 1;
        if b.len() < head {
            return Err(Error::Format("truncated binary grid header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let dims = [u32_at(8), u32_at(12), u32_at(16)];
        let pitch = f64_at(20);
        let origin = Vector3::new(f64_at(28), f64_at(36), f64_at(44));
        let depth = f64_at(52);
        let normalized = b[60] != 0;
        let n = dims[0] * dims[1] * dims[2];
        if b.len() != head + 8 * n {
            return Err(Error::Format(format!(
                "binary grid payload has {} bytes, header implies {}",
                b.len() - head,
                8 * n
            )));
        }
        let weights = (0..n).map(|i| f64_at(head + 8 * i)).collect();
        Ok(DensityGrid {
            pitch,
            origin,
            dims,
            normalized,
            depth: if depth.is_nan() { None } else { Some(depth) },
            weights,
        })
    }

    fn parse_text(text: &str) -> Result<Self> {
        let mut pitch = None;
        let mut origin = None;
        let mut dims = None;
        let mut normalized = false;
        let mut depth = None;
        let mut lines = text.lines().enumerate();
        let num = |t: &str, line: usize| -> Result<f64> {
            t.parse().map_err(|_| Error::Parse { line, msg: format!("bad number `{t}`") })
        };
        for (i, l) in lines.by_ref() {
            let line = i + 1;
            let toks: Vec<&str> = l.split_whitespace().collect();
            match toks.first().copied() {
                None => continue,
                Some(t) if t.starts_with('#') => continue,
                Some("pitch") if toks.len() == 2 => pitch = Some(num(toks[1], line)?),
                Some("origin") if toks.len() == 4 => {
                    origin = Some(Vector3::new(num(toks[1], line)?, num(toks[2], line)?, num(toks[3], line)?))
                }
                Some("dims") if toks.len() == 4 => {
                    let p = |t: &str| {
                        t.parse::<usize>().map_err(|_| Error::Parse { line, msg: format!("bad dimension `{t}`") })
                    };
                    dims = Some([p(toks[1])?, p(toks[2])?, p(toks[3])?]);
                }
                Some("normalized") if toks.len() == 2 => normalized = toks[1] == "true",
                Some("depth") if toks.len() == 2 => depth = Some(num(toks[1], line)?),
                Some("data") => break,
                _ => return Err(Error::Parse { line, msg: format!("unrecognized header line `{l}`") }),
            }
        }
        let (Some(pitch), Some(origin), Some(dims)) = (pitch, origin, dims) else {
            return Err(Error::Format("grid header needs pitch, origin and dims".into()));
        };
        let mut weights = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for (i, l) in lines {
            for t in l.split_whitespace() {
                weights.push(num(t, i + 1)?);
            }
        }
        if weights.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Format(format!(
                "grid payload has {} values, header implies {}",
                weights.len(),
                dims[0] * dims[1] * dims[2]
            )));
        }
        Ok(DensityGrid { pitch, origin, dims, normalized, depth, weights })
    }

    /// Convert to a density; zero cells are dropped and weights normalized to unit sum.
    pub fn into_density(self) -> Result<ProbeDensity> {
        if !(self.pitch > 0.0) {
            return Err(Error::invalid("grid pitch must be positive"));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(Error::invalid(format!("negative or invalid grid weight {w}")));
        }
        let [nx, ny, _] = self.dims;
        let mut sites = Vec::new();
        let mut weights = Vec::new();
        for (idx, w) in self.weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            sites.push(self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.pitch);
            weights.push(*w);
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("grid carries no probability"));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        let mut d = ProbeDensity {
            sites,
            weights,
            depth: 0.0,
            model_tag: ModelTag::ImportedGrid,
            retained_fraction: 1.0,
            pitch: Some(self.pitch),
        };
        d.depth = self.depth.unwrap_or_else(|| -d.centroid().z);
        d.validate()?;
        Ok(d)
    }
}

pub fn load_density_grid(path: &Path) -> Result<ProbeDensity> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    DensityGrid::parse(&bytes)?.into_density()
}

pub fn save_density_grid(d: &ProbeDensity, path: &Path, binary: bool) -> Result<()> {
    let g = DensityGrid::from_density(d)?;
    let mut f = std::fs::File::create(path)?;
    if binary {
        f.write_all(&g.to_binary())?;
    } else {
        f.write_all(g.to_text().as_bytes())?;
    }
    Ok(())
}
