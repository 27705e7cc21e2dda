//! File formats: signal records CSV, run manifests, density images, peaks and sweeps.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file read back
//! reproduces the in-memory values bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::PeakSet;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inversion::{DensityImage, VoxelGrid};
use crate::oracle::OracleSignal;
use crate::probe::{FieldOrientation, SliceSpec};
use crate::signal::{ControlSchedule, SignalRecord};

pub const RECORD_HEADER: &str = "slice_index,r,theta,phi,b0,gamma,gradient,gradient_norm,t_det,t_ctrl,b_ac,n_m_schedule,t_m,rho_det,rho_ctrl,a,s_net,l_net,n_m";

pub fn records_to_csv(records: &[SignalRecord]) -> String {
    let mut s = String::with_capacity(256 * (records.len() + 1));
    s.push_str(RECORD_HEADER);
    s.push('\n');
    for r in records {
        let (sl, sc) = (&r.slice, &r.schedule);
        let o = &sl.orientation;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.slice_index,
            sl.r,
            o.theta,
            o.phi,
            o.b0_magnitude,
            sl.gamma,
            sl.gradient,
            sl.gradient_norm,
            sc.t_det,
            sc.t_ctrl,
            sc.b_ac,
            sc.n_m,
            sc.t_m,
            sc.rho_det,
            sc.rho_ctrl,
            sc.a,
            r.s_net,
            r.l_net,
            r.n_m_used
        );
    }
    s
}

pub fn records_from_csv(text: &str) -> Result<Vec<SignalRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == RECORD_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: "missing or unexpected records header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 19 {
            return Err(Error::Parse { line: line_no, msg: format!("expected 19 fields, found {}", f.len()) });
        }
        let num = |k: usize| -> Result<f64> {
            f[k].trim().parse().map_err(|_| Error::Parse { line: line_no, msg: format!("bad number `{}`", f[k]) })
        };
        let int = |k: usize| -> Result<u64> {
            f[k].trim().parse().map_err(|_| Error::Parse { line: line_no, msg: format!("bad integer `{}`", f[k]) })
        };
        let orientation = FieldOrientation { theta: num(2)?, phi: num(3)?, b0_magnitude: num(4)? };
        out.push(SignalRecord {
            slice_index: int(0)? as usize,
            slice: SliceSpec { r: num(1)?, orientation, gamma: num(5)?, gradient: num(6)?, gradient_norm: num(7)? },
            schedule: ControlSchedule {
                t_det: num(8)?,
                t_ctrl: num(9)?,
                b_ac: num(10)?,
                n_m: int(11)? as u32,
                t_m: num(12)?,
                rho_det: num(13)?,
                rho_ctrl: num(14)?,
                a: num(15)?,
            },
            s_net: num(16)?,
            l_net: num(17)?,
            n_m_used: int(18)? as u32,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Provenance carried by every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: Vec<InputHash>,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
            inputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.push(InputHash { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Sidecar manifest path for a CSV or JSON artifact.
pub fn manifest_path(artifact: &Path) -> std::path::PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

pub fn write_with_manifest(path: &Path, contents: &[u8], manifest: &Manifest) -> Result<()> {
    std::fs::write(path, contents)?;
    std::fs::write(manifest_path(path), manifest.to_json()?)?;
    Ok(())
}

pub const IMAGE_MAGIC: &[u8; 8] = b"NSSIMG01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageHeader {
    pub dims: [usize; 3],
    pub pitch_angstrom: f64,
    pub origin_angstrom: [f64; 3],
    /// Exact metre values; the Ångström fields are for readers.
    pub pitch_m: f64,
    pub origin_m: [f64; 3],
    /// Flat index i + nx (j + ny l): x fastest.
    pub order: String,
    pub dtype: String,
    pub normalized: bool,
    pub manifest: Option<Manifest>,
}

/// Layout: 8-byte magic `NSSIMG01`, u64 little-endian header length, UTF-8 JSON header,
/// then one little-endian f32 per voxel in x-fastest order.
pub fn image_to_bytes(img: &DensityImage, normalized: bool, manifest: Option<&Manifest>) -> Result<Vec<u8>> {
    let g = &img.grid;
    let header = ImageHeader {
        dims: g.dims,
        pitch_angstrom: g.pitch * 1e10,
        origin_angstrom: (g.origin * 1e10).into(),
        pitch_m: g.pitch,
        origin_m: g.origin.into(),
        order: "x-fastest".into(),
        dtype: "f32le".into(),
        normalized,
        manifest: manifest.cloned(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + h.len() + 4 * img.rho.len());
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for v in &img.rho {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn image_from_bytes(bytes: &[u8]) -> Result<(DensityImage, ImageHeader)> {
    if bytes.len() < 16 || &bytes[..8] != IMAGE_MAGIC {
        return Err(Error::Format("not a density image (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated image header".into()))?;
    let header: ImageHeader = serde_json::from_slice(body)?;
    if header.dtype != "f32le" || header.order != "x-fastest" {
        return Err(Error::Format(format!("unsupported image layout {} / {}", header.dtype, header.order)));
    }
    let grid = VoxelGrid::new(header.dims, header.pitch_m, Vector3::from(header.origin_m))?;
    let payload = &bytes[16 + hlen..];
    if payload.len() != 4 * grid.len() {
        return Err(Error::Format(format!("payload has {} bytes, grid needs {}", payload.len(), 4 * grid.len())));
    }
    let rho = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((DensityImage::new(grid, rho)?, header))
}

pub fn save_image(path: &Path, img: &DensityImage, normalized: bool, manifest: Option<&Manifest>) -> Result<()> {
    Ok(std::fs::write(path, image_to_bytes(img, normalized, manifest)?)?)
}

pub fn load_image(path: &Path) -> Result<(DensityImage, ImageHeader)> {
    image_from_bytes(&std::fs::read(path)?)
}

/// Per-voxel CSV export (Å).
pub fn image_to_csv(img: &DensityImage) -> String {
    let mut s = String::from("x_angstrom,y_angstrom,z_angstrom,value\n");
    for (i, v) in img.rho.iter().enumerate() {
        let c = img.grid.center(i) * 1e10;
        let _ = writeln!(s, "{},{},{},{}", c.x, c.y, c.z, v);
    }
    s
}

pub fn peaks_to_csv(peaks: &PeakSet) -> String {
    let mut s = String::from("x_angstrom,y_angstrom,z_angstrom,amplitude\n");
    for p in &peaks.peaks {
        let c = p.position * 1e10;
        let _ = writeln!(s, "{},{},{},{}", c.x, c.y, c.z, p.amplitude);
    }
    s
}

pub fn oracle_sweep_to_csv(slices: &[SliceSpec], signals: &[OracleSignal], analytic_l_net: &[f64]) -> String {
    let mut s = String::from("r_angstrom,gamma,t_det,t_ctrl,s_net,l_net,l_net_analytic\n");
    for ((sl, o), a) in slices.iter().zip(signals).zip(analytic_l_net) {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", sl.r * 1e10, o.gamma_slice, o.t_det, o.t_ctrl, o.s_net, o.l_net, a);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::Peak;

    fn record(i: usize) -> SignalRecord {
        SignalRecord {
            slice_index: i,
            slice: SliceSpec {
                r: 1.0e-10 / 3.0 * i as f64,
                orientation: FieldOrientation { theta: 0.1 * i as f64, phi: 2.0f64.sqrt(), b0_magnitude: 1.0 },
                gamma: -12345.678901234,
                gradient: 1.1e14,
                gradient_norm: 1.3e14,
            },
            schedule: ControlSchedule {
                t_det: 1.0 / 3.0,
                t_ctrl: 7e-3,
                b_ac: 5e-7,
                n_m: 1000,
                t_m: 5e-6,
                rho_det: 0.2,
                rho_ctrl: 0.2,
                a: 0.3,
            },
            s_net: 0.49999999999,
            l_net: std::f64::consts::PI * 1e-3,
            n_m_used: 100,
        }
    }

    #[test]
    fn records_round_trip_exactly() {
        let recs: Vec<_> = (0..5).map(record).collect();
        assert_eq!(records_from_csv(&records_to_csv(&recs)).unwrap(), recs);
    }

    #[test]
    fn records_reject_garbage() {
        assert!(records_from_csv("nope\n").is_err());
        let bad = format!("{RECORD_HEADER}\n1,2,3\n");
        assert!(matches!(records_from_csv(&bad), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn image_round_trip_exactly() {
        let g = VoxelGrid::new([3, 2, 2], 0.5e-10 / 3.0, Vector3::new(-1e-10 / 7.0, 0.0, 1e-10)).unwrap();
        let rho: Vec<f32> = (0..12).map(|v| v as f32 / 7.0).collect();
        let img = DensityImage::new(g, rho).unwrap();
        let m = Manifest::new("invert", &RunConfig::default());
        let (back, h) = image_from_bytes(&image_to_bytes(&img, false, Some(&m)).unwrap()).unwrap();
        assert_eq!(back, img);
        assert_eq!(h.manifest.unwrap(), m);
        let mut bytes = image_to_bytes(&img, true, None).unwrap();
        bytes.pop();
        assert!(image_from_bytes(&bytes).is_err());
    }

    #[test]
    fn known_sha256() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn peaks_csv_in_angstrom() {
        let ps = PeakSet {
            peaks: vec![Peak { position: Vector3::new(1e-10, 2e-10, 3.5e-10), amplitude: 0.5, voxel: 0 }],
            detection_threshold: 0.1,
        };
        assert_eq!(peaks_to_csv(&ps), "x_angstrom,y_angstrom,z_angstrom,amplitude\n1,2,3.5,0.5\n");
    }
}
