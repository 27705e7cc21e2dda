//! Structure files, nuclear species and physical constants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ANGSTROM: f64 = 1e-10;
pub const NM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Electron gyromagnetic ratio magnitude, rad s^-1 T^-1.
    pub gamma_e: f64,
    /// J s.
    pub hbar: f64,
    /// T m A^-1.
    pub mu0_over_4pi: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        // CODATA 2018
        PhysicalConstants {
            gamma_e: 1.76085963023e11,
            hbar: 1.054571817e-34,
            mu0_over_4pi: 1e-7,
        }
    }
}

impl PhysicalConstants {
    /// Prefactor of the electron-nucleus point dipole term, rad s^-1 m^3.
    pub fn dipole_prefactor(&self, gamma_n: f64) -> f64 {
        self.gamma_e * gamma_n * self.hbar * self.mu0_over_4pi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuclearSpecies {
    pub symbol: String,
    pub element: String,
    pub mass: u32,
    /// rad s^-1 T^-1
    pub gamma: f64,
    pub spin: f64,
}

#[derive(Debug, Deserialize)]
struct IsotopeRow {
    label: String,
    element: String,
    mass: u32,
    spin: f64,
    gamma: f64,
}

#[derive(Debug, Deserialize)]
struct IsotopeFile {
    version: u32,
    isotope: Vec<IsotopeRow>,
    default_mass: BTreeMap<String, u32>,
}

/// Parsed isotope data file.
#[derive(Debug)]
pub struct IsotopeTable {
    pub version: u32,
    rows: Vec<IsotopeRow>,
    default_mass: BTreeMap<String, u32>,
}

const ISOTOPE_DATA: &str = include_str!("../data/isotopes.toml");

pub fn isotope_table() -> &'static IsotopeTable {
    static TABLE: OnceLock<IsotopeTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let f: IsotopeFile = toml::from_str(ISOTOPE_DATA).expect("bundled isotope table is valid");
        IsotopeTable { version: f.version, rows: f.isotope, default_mass: f.default_mass }
    })
}

impl IsotopeTable {
    pub fn supports_element(&self, element: &str) -> bool {
        self.default_mass.contains_key(element)
    }

    pub fn default_mass(&self, element: &str) -> Option<u32> {
        self.default_mass.get(element).copied()
    }

    fn row(&self, element: &str, mass: u32) -> Option<&IsotopeRow> {
        self.rows.iter().find(|r| r.element == element && r.mass == mass)
    }

    fn by_label(&self, label: &str) -> Option<&IsotopeRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Split an isotope label such as `13C` or `C13` into (mass, element).
fn split_label(label: &str) -> Option<(Option<u32>, String)> {
    let label = label.trim();
    let digits: String = label.chars().take_while(|c| c.is_ascii_digit()).collect();
    let rest = &label[digits.len()..];
    if !digits.is_empty() {
        if rest.is_empty() || !rest.chars().all(|c| c.is_ascii_alphabetic()) {
            return None;
        }
        return Some((digits.parse().ok(), normalize_element(rest)));
    }
    let letters: String = label.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
    let tail = &label[letters.len()..];
    if letters.is_empty() {
        return None;
    }
    if tail.is_empty() {
        return Some((None, normalize_element(&letters)));
    }
    if tail.chars().all(|c| c.is_ascii_digit()) {
        return Some((tail.parse().ok(), normalize_element(&letters)));
    }
    None
}

fn normalize_element(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + &c.as_str().to_ascii_lowercase(),
        None => String::new(),
    }
}

/// Look up a spin-carrying isotope by label (`1H`, `13C`, `14N`, ...).
pub fn gyromagnetic(symbol: &str) -> Result<NuclearSpecies> {
    let table = isotope_table();
    let row = table.by_label(symbol).or_else(|| {
        let (mass, el) = split_label(symbol)?;
        let mass = mass.or_else(|| table.default_mass(&el))?;
        table.row(&el, mass)
    });
    match row {
        Some(r) if r.gamma != 0.0 && r.spin > 0.0 => Ok(NuclearSpecies {
            symbol: r.label.clone(),
            element: r.element.clone(),
            mass: r.mass,
            gamma: r.gamma,
            spin: r.spin,
        }),
        _ => Err(Error::UnsupportedIsotope(symbol.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSite {
    pub element: String,
    pub isotope: u32,
    /// Metres.
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularStructure {
    pub sites: Vec<AtomSite>,
    /// Metres; added to every site position on placement.
    pub frame_offset: Vector3<f64>,
}

impl MolecularStructure {
    pub fn new(sites: Vec<AtomSite>) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::invalid("structure has no sites"));
        }
        Ok(MolecularStructure { sites, frame_offset: Vector3::zeros() })
    }

    /// Site positions with the frame offset applied, metres.
    pub fn placed_positions(&self) -> Vec<Vector3<f64>> {
        self.sites.iter().map(|s| s.position + self.frame_offset).collect()
    }

    /// Set the offset and check that every placed site lies on or above the surface.
    pub fn place(mut self, offset: Vector3<f64>) -> Result<Self> {
        self.frame_offset = offset;
        if let Some((i, p)) =
            self.placed_positions().iter().enumerate().find(|(_, p)| p.z < 0.0)
        {
            return Err(Error::invalid(format!(
                "site {} lies below the surface after placement (z = {:.3} Å)",
                i,
                p.z / ANGSTROM
            )));
        }
        Ok(self)
    }

    /// Relabel every site of `element` with isotope `mass` (e.g. a 13C-saturated sample).
    pub fn saturate(&mut self, element: &str, mass: u32) -> Result<()> {
        if isotope_table().row(element, mass).is_none() {
            return Err(Error::UnsupportedIsotope(format!("{mass}{element}")));
        }
        for s in self.sites.iter_mut().filter(|s| s.element == element) {
            s.isotope = mass;
        }
        Ok(())
    }
}

fn parse_coord(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("non-numeric coordinate `{tok}`") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("non-finite coordinate `{tok}`") });
    }
    Ok(v)
}

fn site_from_label(label: &str, pos: Vector3<f64>, line: usize) -> Result<AtomSite> {
    let table = isotope_table();
    let (mass, element) = split_label(label)
        .ok_or_else(|| Error::Parse { line, msg: format!("unknown element symbol `{label}`") })?;
    if !table.supports_element(&element) {
        return Err(Error::Parse { line, msg: format!("unknown element symbol `{label}`") });
    }
    let mass = match mass {
        Some(m) => {
            if table.row(&element, m).is_none() {
                return Err(Error::Parse { line, msg: format!("unknown isotope `{label}`") });
            }
            m
        }
        None => table.default_mass(&element).unwrap(),
    };
    Ok(AtomSite { element, isotope: mass, position: pos * ANGSTROM })
}

/// Parse a structure file. PDB text (ATOM/HETATM records) is detected automatically;
/// anything else is read as XYZ.
pub fn parse_structure(text: &str) -> Result<MolecularStructure> {
    let is_pdb = text.lines().any(|l| l.starts_with("ATOM") || l.starts_with("HETATM"));
    if is_pdb {
        parse_pdb(text)
    } else {
        parse_xyz(text)
    }
}

/// XYZ: atom count, comment line, then `El x y z` rows in Ångström.
/// The element token may carry a mass number (`13C`).
pub fn parse_xyz(text: &str) -> Result<MolecularStructure> {
    let mut lines = text.lines();
    let count_line = lines.next().ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    let count: usize = count_line
        .trim()
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: format!("malformed atom count `{}`", count_line.trim()) })?;
    if count == 0 {
        return Err(Error::Parse { line: 1, msg: "atom count is zero".into() });
    }
    lines.next().ok_or(Error::Parse { line: 2, msg: "missing comment line".into() })?;
    let mut sites = Vec::with_capacity(count);
    for (i, l) in lines.enumerate() {
        let line = i + 3;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if sites.len() == count {
            return Err(Error::Parse { line, msg: format!("more atom rows than the declared count {count}") });
        }
        if toks.len() < 4 {
            return Err(Error::Parse { line, msg: "expected `element x y z`".into() });
        }
        let pos = Vector3::new(
            parse_coord(toks[1], line)?,
            parse_coord(toks[2], line)?,
            parse_coord(toks[3], line)?,
        );
        sites.push(site_from_label(toks[0], pos, line)?);
    }
    if sites.len() != count {
        return Err(Error::Parse {
            line: 1,
            msg: format!("declared {count} atoms, found {}", sites.len()),
        });
    }
    MolecularStructure::new(sites)
}

/// Minimal PDB subset: ATOM/HETATM coordinates (columns 31-54) and element (77-78).
/// Alternate locations and multi-model files are rejected.
pub fn parse_pdb(text: &str) -> Result<MolecularStructure> {
    let mut sites = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        if l.starts_with("MODEL") {
            return Err(Error::Parse { line, msg: "multi-model PDB files are not supported".into() });
        }
        if !(l.starts_with("ATOM") || l.starts_with("HETATM")) {
            continue;
        }
        let col = |a: usize, b: usize| l.get(a..b.min(l.len())).unwrap_or("").trim();
        if l.len() < 54 {
            return Err(Error::Parse { line, msg: "record shorter than the coordinate columns".into() });
        }
        if !col(16, 17).is_empty() {
            return Err(Error::Parse { line, msg: "alternate locations are not supported".into() });
        }
        let pos = Vector3::new(
            parse_coord(col(30, 38), line)?,
            parse_coord(col(38, 46), line)?,
            parse_coord(col(46, 54), line)?,
        );
        let mut element = col(76, 78).to_string();
        if element.is_empty() {
            // fall back to the atom name with digits stripped
            element = col(12, 16).chars().filter(|c| c.is_ascii_alphabetic()).take(1).collect();
        }
        sites.push(site_from_label(&element, pos, line)?);
    }
    if sites.is_empty() {
        return Err(Error::Parse { line: 1, msg: "no ATOM/HETATM records".into() });
    }
    MolecularStructure::new(sites)
}

/// Write XYZ. Isotopes other than the element default are written with a mass prefix.
pub fn write_xyz(s: &MolecularStructure, comment: &str) -> String {
    let table = isotope_table();
    let mut out = String::new();
    let _ = writeln!(out, "{}", s.sites.len());
    let _ = writeln!(out, "{}", comment.replace('\n', " "));
    for site in &s.sites {
        let label = if table.default_mass(&site.element) == Some(site.isotope) {
            site.element.clone()
        } else {
            format!("{}{}", site.isotope, site.element)
        };
        let p = site.position / ANGSTROM;
        let _ = writeln!(out, "{label} {:.6} {:.6} {:.6}", p.x, p.y, p.z);
    }
    out
}

/// Placed positions of all sites of the given isotope, in input order.
pub fn select_species(s: &MolecularStructure, species: &NuclearSpecies) -> Vec<Vector3<f64>> {
    if species.gamma == 0.0 {
        return Vec::new();
    }
    s.sites
        .iter()
        .filter(|a| a.element == species.element && a.isotope == species.mass)
        .map(|a| a.position + s.frame_offset)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record() {
        let s = parse_xyz("1\n\nH 0.0 0.0 2.0").unwrap();
        assert_eq!(s.sites.len(), 1);
        assert_eq!(s.sites[0].element, "H");
        assert_eq!(s.sites[0].isotope, 1);
        assert!((s.sites[0].position.z - 2.0e-10).abs() < 1e-22);
    }

    #[test]
    fn unknown_element_names_line() {
        let err = parse_xyz("2\ncomment\nXx 0 0 0\nH 0 0 1").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn malformed_count_and_coordinate() {
        assert!(matches!(parse_xyz("two\n\nH 0 0 0"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_xyz("1\n\nH 0 zero 0"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_xyz("2\n\nH 0 0 0"), Err(Error::Parse { .. })));
    }

    #[test]
    fn gyromagnetic_table() {
        let h = gyromagnetic("1H").unwrap();
        assert!((h.gamma - 2.675e8).abs() / 2.675e8 < 1e-3);
        assert_eq!(h.spin, 0.5);
        let c = gyromagnetic("13C").unwrap();
        assert!((c.gamma - 6.728e7).abs() / 6.728e7 < 1e-3);
        assert_eq!(gyromagnetic("14N").unwrap().spin, 1.0);
        assert!(gyromagnetic("12C").is_err());
        assert!(gyromagnetic("16O").is_err());
        assert!(gyromagnetic("99Q").is_err());
        // element-only label resolves to the default isotope
        assert_eq!(gyromagnetic("H").unwrap().symbol, "1H");
    }

    #[test]
    fn pdb_subset() {
        let pdb = "\
ATOM      1  N   ALA A   1      11.104   6.134  -6.504  1.00  0.00           N
ATOM      2  CA  ALA A   1      11.639   6.071  -5.147  1.00  0.00           C
HETATM    3  O   HOH A   2       1.000   2.000   3.000  1.00  0.00           O
END
";
        let s = parse_structure(pdb).unwrap();
        assert_eq!(s.sites.len(), 3);
        assert_eq!(s.sites[0].element, "N");
        assert_eq!(s.sites[2].isotope, 16);
        assert!((s.sites[1].position.x / ANGSTROM - 11.639).abs() < 1e-9);

        let altloc = pdb.replacen("  CA  ALA", "  CA AALA", 1);
        assert!(matches!(parse_pdb(&altloc), Err(Error::Parse { line: 2, .. })));
        assert!(parse_pdb(&format!("MODEL 1\n{pdb}")).is_err());
    }

    #[test]
    fn isotope_prefix_and_saturation() {
        let mut s = parse_xyz("3\n\n13C 0 0 1\nC 0 0 2\nH 0 0 3").unwrap();
        assert_eq!(s.sites[0].isotope, 13);
        assert_eq!(s.sites[1].isotope, 12);
        let c13 = gyromagnetic("13C").unwrap();
        assert_eq!(select_species(&s, &c13).len(), 1);
        s.saturate("C", 13).unwrap();
        assert_eq!(select_species(&s, &c13).len(), 2);
    }

    #[test]
    fn placement_rejects_below_surface() {
        let s = parse_xyz("1\n\nH 0 0 1").unwrap();
        assert!(s.clone().place(Vector3::new(0.0, 0.0, -2.0 * ANGSTROM)).is_err());
        let p = s.place(Vector3::new(0.0, 0.0, 1.0 * ANGSTROM)).unwrap();
        assert!((p.placed_positions()[0].z - 2.0 * ANGSTROM).abs() < 1e-22);
    }
}
