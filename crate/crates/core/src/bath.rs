// SPDX-License-Identifier: Apache-2.0

//! Nuclear spin baths: random ¹³C placement on the diamond lattice,
//! (001) surface-termination monolayers, and the tensors coupling them.
//!
//! Lattice geometry is generated in crystal coordinates and rotated into the
//! central-spin frame, whose z axis is the NV symmetry axis [111] and whose
//! origin is the vacancy site. The nitrogen occupies the nearest-neighbour
//! site along +z.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::constants::{self, DIPOLAR_PREFACTOR};
use crate::error::{Error, Result};
use crate::linalg::{cmp_position, matvec3, norm3, sub3, Mat3, Vec3};
use crate::spin::{HyperfineTensor, SpinSpecies};

/// Identifier of the random number generator, recorded in output metadata.
pub const RNG_ALGORITHM: &str = "chacha20";

/// Bath spins closer than this to the origin are never generated.
pub const EXCLUSION_RADIUS: f64 = 0.5;

/// Creates the generator used for every stochastic choice in the crate.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rows are the central-frame axes expressed in crystal coordinates:
/// x ∥ [11-2], y ∥ [-110], z ∥ [111].
pub fn nv_frame_rows() -> Mat3 {
    let s3 = 3f64.sqrt();
    let s6 = 6f64.sqrt();
    let s2 = 2f64.sqrt();
    [[1.0 / s6, 1.0 / s6, -2.0 / s6], [-1.0 / s2, 1.0 / s2, 0.0], [1.0 / s3, 1.0 / s3, 1.0 / s3]]
}

/// Crystal → central-frame rotation.
pub fn to_nv_frame(v: &Vec3) -> Vec3 {
    matvec3(&nv_frame_rows(), v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PointDipole,
    Tabulated,
    Explicit,
}

/// One nuclear spin of the bath.
#[derive(Debug, Clone, PartialEq)]
pub struct BathSpin {
    pub species: SpinSpecies,
    /// Å, central frame.
    pub position: Vec3,
    pub hyperfine: HyperfineTensor,
    pub provenance: Provenance,
}

impl BathSpin {
    pub fn azz(&self) -> f64 {
        self.hyperfine.azz()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    /// Å.
    #[serde(default = "default_lattice_constant")]
    pub lattice_constant: f64,
    #[serde(default = "default_abundance")]
    pub abundance: f64,
    /// Å.
    pub r_bath: f64,
    #[serde(default)]
    pub seed: u64,
    /// Leave the nitrogen site empty.
    #[serde(default = "default_true")]
    pub exclude_nitrogen_site: bool,
}

fn default_lattice_constant() -> f64 {
    constants::DIAMOND_LATTICE_CONSTANT
}

fn default_abundance() -> f64 {
    constants::C13_NATURAL_ABUNDANCE
}

fn default_true() -> bool {
    true
}

impl LatticeConfig {
    pub fn new(abundance: f64, r_bath: f64, seed: u64) -> Self {
        LatticeConfig {
            lattice_constant: constants::DIAMOND_LATTICE_CONSTANT,
            abundance,
            r_bath,
            seed,
            exclude_nitrogen_site: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.abundance) {
            return Err(Error::config(format!("abundance {} outside [0, 1]", self.abundance)));
        }
        if !(self.r_bath > 0.0) {
            return Err(Error::config(format!("r_bath must be positive, got {}", self.r_bath)));
        }
        if !(self.lattice_constant > 0.0) {
            return Err(Error::config("lattice_constant must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Fluorine,
    Hydrogen,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceConfig {
    pub termination: Termination,
    /// Fluorine fraction for mixed terminations.
    #[serde(default = "default_mix_ratio")]
    pub mix_ratio: f64,
    /// Distance from the NV to the termination plane, Å.
    pub depth: f64,
    /// In-plane radius of the generated patch, Å.
    #[serde(default = "default_lateral_extent")]
    pub lateral_extent: f64,
}

fn default_mix_ratio() -> f64 {
    0.7
}

fn default_lateral_extent() -> f64 {
    100.0
}

impl SurfaceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::config(format!("mix_ratio {} outside [0, 1]", self.mix_ratio)));
        }
        if !(self.depth > 0.0) {
            return Err(Error::config(format!("surface depth must be positive, got {}", self.depth)));
        }
        if !(self.lateral_extent > 0.0) {
            return Err(Error::config("lateral_extent must be positive"));
        }
        Ok(())
    }
}

/// All diamond lattice sites within `r_max` of the vacancy origin, crystal
/// coordinates, in a fixed enumeration order. The origin itself is omitted.
pub(crate) fn diamond_sites(a: f64, r_max: f64) -> Vec<Vec3> {
    let basis: [Vec3; 8] = [
        [0.0, 0.0, 0.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
        [0.5, 0.5, 0.0],
        [0.25, 0.25, 0.25],
        [0.25, 0.75, 0.75],
        [0.75, 0.25, 0.75],
        [0.75, 0.75, 0.25],
    ];
    let n = (r_max / a).ceil() as i64 + 1;
    let mut out = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            for k in -n..=n {
                for b in &basis {
                    let p = [(i as f64 + b[0]) * a, (j as f64 + b[1]) * a, (k as f64 + b[2]) * a];
                    let r = norm3(&p);
                    if r > EXCLUSION_RADIUS && r <= r_max {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

/// Number of candidate carbon sites for a lattice configuration.
pub fn candidate_site_count(cfg: &LatticeConfig) -> usize {
    let n_site = [cfg.lattice_constant / 4.0; 3];
    diamond_sites(cfg.lattice_constant, cfg.r_bath)
        .into_iter()
        .filter(|p| !(cfg.exclude_nitrogen_site && norm3(&sub3(p, &n_site)) < 1e-9))
        .count()
}

/// Position of the nitrogen nucleus in the central frame.
pub fn nitrogen_position(lattice_constant: f64) -> Vec3 {
    to_nv_frame(&[lattice_constant / 4.0; 3])
}

/// Randomly occupies every carbon site within `r_bath` with probability `abundance`.
pub fn generate_bulk_bath(cfg: &LatticeConfig) -> Result<Vec<BathSpin>> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, 0);
    let n_site = [cfg.lattice_constant / 4.0; 3];
    let carbon = SpinSpecies::carbon13();
    let mut bath = Vec::new();
    for p in diamond_sites(cfg.lattice_constant, cfg.r_bath) {
        if cfg.exclude_nitrogen_site && norm3(&sub3(&p, &n_site)) < 1e-9 {
            continue;
        }
        let draw: f64 = rng.gen();
        if draw < cfg.abundance {
            let position = to_nv_frame(&p);
            let hyperfine = point_dipole_hyperfine(&position, constants::GAMMA_E, carbon.gyro)?;
            bath.push(BathSpin { species: carbon.clone(), position, hyperfine, provenance: Provenance::PointDipole });
        }
    }
    sort_bath(&mut bath);
    Ok(bath)
}

/// A termination monolayer on the (001) surface above an NV at `cfg.depth`.
///
/// Sites form the bulk-terminated square net of spacing a/√2 (density 2/a²)
/// in the plane z_crystal = depth, anchored above the NV.
pub fn generate_surface_bath(cfg: &SurfaceConfig, lattice: &LatticeConfig) -> Result<Vec<BathSpin>> {
    cfg.validate()?;
    lattice.validate()?;
    let a = lattice.lattice_constant;
    let mut rng = rng_for(lattice.seed, 1);
    let fluorine = SpinSpecies::fluorine19();
    let hydrogen = SpinSpecies::hydrogen1();
    let reach = cfg.lateral_extent.min(lattice.r_bath);
    let n = (reach / (a / 2.0)).ceil() as i64 + 1;
    let mut bath = Vec::new();
    for u in -n..=n {
        for v in -n..=n {
            let x = (u + v) as f64 * a / 2.0;
            let y = (u - v) as f64 * a / 2.0;
            let rho = (x * x + y * y).sqrt();
            let p = [x, y, cfg.depth];
            if rho > cfg.lateral_extent || norm3(&p) > lattice.r_bath {
                continue;
            }
            let species = match cfg.termination {
                Termination::Fluorine => fluorine.clone(),
                Termination::Hydrogen => hydrogen.clone(),
                Termination::Mixed => {
                    let draw: f64 = rng.gen();
                    if draw < cfg.mix_ratio {
                        fluorine.clone()
                    } else {
                        hydrogen.clone()
                    }
                }
            };
            let position = to_nv_frame(&p);
            let hyperfine = point_dipole_hyperfine(&position, constants::GAMMA_E, species.gyro)?;
            bath.push(BathSpin { species, position, hyperfine, provenance: Provenance::PointDipole });
        }
    }
    sort_bath(&mut bath);
    Ok(bath)
}

fn dipolar_form(position: &Vec3, sign: f64) -> Result<(Mat3, f64)> {
    let r = norm3(position);
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::domain(format!("dipolar coupling needs a nonzero separation, got {position:?}")));
    }
    let u = [position[0] / r, position[1] / r, position[2] / r];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let delta = if i == j { 1.0 } else { 0.0 };
            m[i][j] = sign * (3.0 * u[i] * u[j] - delta);
        }
    }
    Ok((m, r))
}

/// Point-dipole hyperfine tensor `K γ_e γ_n / r³ · (3 r̂r̂ᵀ − 1)` in MHz, with
/// `K = (μ0/4π)·h` in MHz·Å³/(MHz/G)².
pub fn point_dipole_hyperfine(position: &Vec3, central_gyro: f64, nuclear_gyro: f64) -> Result<HyperfineTensor> {
    let (form, r) = dipolar_form(position, 1.0)?;
    let scale = DIPOLAR_PREFACTOR * central_gyro * nuclear_gyro / (r * r * r);
    let mut a = form;
    a.iter_mut().flatten().for_each(|v| *v *= scale);
    HyperfineTensor::new(a)
}

/// Nuclear-nuclear dipolar tensor `K γ_i γ_j / r³ · (1 − 3 r̂r̂ᵀ)` in MHz.
pub fn dipolar_coupling(pos_i: &Vec3, pos_j: &Vec3, gyro_i: f64, gyro_j: f64) -> Result<Mat3> {
    let (form, r) = dipolar_form(&sub3(pos_j, pos_i), -1.0)?;
    let scale = DIPOLAR_PREFACTOR * gyro_i * gyro_j / (r * r * r);
    let mut j = form;
    j.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok(j)
}

/// Descending |A_zz|, ties broken by lexicographic position.
pub fn sort_bath(bath: &mut [BathSpin]) {
    bath.sort_by(|a, b| b.azz().abs().total_cmp(&a.azz().abs()).then_with(|| cmp_position(&a.position, &b.position)));
}

/// Keeps spins with |A_zz| strictly below `threshold` (MHz).
pub fn filter_max_azz(bath: Vec<BathSpin>, threshold: f64) -> Vec<BathSpin> {
    bath.into_iter().filter(|s| s.azz().abs() < threshold).collect()
}

/// First-principles hyperfine tensors keyed by position.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperfineTable {
    pub entries: Vec<(Vec3, HyperfineTensor)>,
    /// Å.
    pub match_tolerance: f64,
}

impl HyperfineTable {
    pub fn new(entries: Vec<(Vec3, HyperfineTensor)>, match_tolerance: f64) -> Result<Self> {
        if !(match_tolerance > 0.0) {
            return Err(Error::config("hyperfine table match_tolerance must be positive"));
        }
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                if norm3(&sub3(&entries[i].0, &entries[j].0)) <= match_tolerance {
                    return Err(Error::config(format!(
                        "hyperfine table positions {:?} and {:?} coincide within {match_tolerance} Å",
                        entries[i].0, entries[j].0
                    )));
                }
            }
        }
        Ok(HyperfineTable { entries, match_tolerance })
    }

    /// Parses `x y z A_xx A_xy A_xz A_yx A_yy A_yz A_zx A_zy A_zz` records.
    pub fn parse(text: &str, match_tolerance: f64) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let nums: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::config(format!("hyperfine table line {}: {e}", lineno + 1)))?;
            if nums.len() != 12 {
                return Err(Error::config(format!(
                    "hyperfine table line {}: expected 12 numbers, found {}",
                    lineno + 1,
                    nums.len()
                )));
            }
            let pos = [nums[0], nums[1], nums[2]];
            let a = [[nums[3], nums[4], nums[5]], [nums[6], nums[7], nums[8]], [nums[9], nums[10], nums[11]]];
            let tensor = HyperfineTensor::new(a)
                .map_err(|e| Error::config(format!("hyperfine table line {}: {e}", lineno + 1)))?;
            entries.push((pos, tensor));
        }
        Self::new(entries, match_tolerance)
    }

    pub fn from_file(path: &Path, match_tolerance: f64) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, match_tolerance)
    }
}

/// Gives each spin its tabulated tensor when one matches its position,
/// otherwise a point-dipole tensor. Output is re-sorted.
pub fn assign_hyperfine(
    bath: Vec<BathSpin>,
    table: Option<&HyperfineTable>,
    central_gyro: f64,
) -> Result<Vec<BathSpin>> {
    let mut out = Vec::with_capacity(bath.len());
    for mut spin in bath {
        let matches: Vec<&(Vec3, HyperfineTensor)> = table
            .map(|t| t.entries.iter().filter(|(p, _)| norm3(&sub3(p, &spin.position)) <= t.match_tolerance).collect())
            .unwrap_or_default();
        match matches.len() {
            0 => {
                spin.hyperfine = point_dipole_hyperfine(&spin.position, central_gyro, spin.species.gyro)?;
                spin.provenance = Provenance::PointDipole;
            }
            1 => {
                spin.hyperfine = matches[0].1;
                spin.provenance = Provenance::Tabulated;
            }
            _ => {
                let listed: Vec<String> = matches.iter().map(|(p, _)| format!("{p:?}")).collect();
                return Err(Error::config(format!(
                    "bath spin at {:?} matches several table entries: {}",
                    spin.position,
                    listed.join(", ")
                )));
            }
        }
        out.push(spin);
    }
    sort_bath(&mut out);
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SnapshotRecord<'a> {
    species: &'a str,
    position: Vec3,
    tensor: Mat3,
    provenance: Provenance,
}

/// JSON array of `{species, position, tensor, provenance}`.
pub fn bath_snapshot_json(bath: &[BathSpin]) -> Result<String> {
    let records: Vec<SnapshotRecord> = bath
        .iter()
        .map(|s| SnapshotRecord {
            species: &s.species.label,
            position: s.position,
            tensor: s.hyperfine.a,
            provenance: s.provenance,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::transpose3;

    /// Independent enumeration: in units of a/4, diamond sites are integer
    /// triples that are all even with sum ≡ 0 (mod 4), or all odd with
    /// sum ≡ 3 (mod 4).
    fn brute_force_sites(a: f64, r_max: f64) -> usize {
        let q = a / 4.0;
        let m = (r_max / q).ceil() as i64 + 2;
        let mut count = 0;
        for x in -m..=m {
            for y in -m..=m {
                for z in -m..=m {
                    let all_even = x % 2 == 0 && y % 2 == 0 && z % 2 == 0;
                    let all_odd = x.rem_euclid(2) == 1 && y.rem_euclid(2) == 1 && z.rem_euclid(2) == 1;
                    let s = (x + y + z).rem_euclid(4);
                    let on = (all_even && s == 0) || (all_odd && s == 3);
                    let r = ((x * x + y * y + z * z) as f64).sqrt() * q;
                    if on && r > EXCLUSION_RADIUS && r <= r_max {
                        count += 1;
                    }
                }
            }
        }
        count
    }

    #[test]
    fn empty_bath_at_zero_abundance() {
        let bath = generate_bulk_bath(&LatticeConfig::new(0.0, 20.0, 3)).unwrap();
        assert!(bath.is_empty());
    }

    #[test]
    fn full_occupation_within_three_angstrom() {
        let mut cfg = LatticeConfig::new(1.0, 3.0, 1);
        cfg.exclude_nitrogen_site = false;
        let bath = generate_bulk_bath(&cfg).unwrap();
        let expect = brute_force_sites(cfg.lattice_constant, 3.0);
        // 4 nearest neighbours, 12 second and 12 third shell sites.
        assert_eq!(expect, 28);
        assert_eq!(bath.len(), expect);
        let nn = bath.iter().filter(|s| (norm3(&s.position) - 3f64.sqrt() * cfg.lattice_constant / 4.0).abs() < 1e-9);
        assert_eq!(nn.count(), 4);

        cfg.exclude_nitrogen_site = true;
        assert_eq!(generate_bulk_bath(&cfg).unwrap().len(), 27);
    }

    #[test]
    fn brute_force_site_count_matches_larger_radius() {
        let cfg = LatticeConfig { exclude_nitrogen_site: false, ..LatticeConfig::new(1.0, 9.0, 0) };
        assert_eq!(candidate_site_count(&cfg), brute_force_sites(cfg.lattice_constant, 9.0));
    }

    #[test]
    fn mean_count_matches_expectation() {
        let base = LatticeConfig::new(0.0107, 30.0, 0);
        let n_sites = brute_force_sites(base.lattice_constant, 30.0) - 1;
        let p = base.abundance;
        let expected = p * n_sites as f64;
        let sigma_mean = (n_sites as f64 * p * (1.0 - p)).sqrt() / (1000f64).sqrt();
        let total: usize =
            (0..1000u64).map(|seed| generate_bulk_bath(&LatticeConfig { seed, ..base.clone() }).unwrap().len()).sum();
        let mean = total as f64 / 1000.0;
        assert!((mean - expected).abs() < 3.0 * sigma_mean, "mean {mean} expected {expected} ± {sigma_mean}");
    }

    #[test]
    fn generation_is_deterministic_and_sorted() {
        let cfg = LatticeConfig::new(0.05, 15.0, 99);
        let a = generate_bulk_bath(&cfg).unwrap();
        let b = generate_bulk_bath(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        for w in a.windows(2) {
            assert!(w[0].azz().abs() >= w[1].azz().abs());
        }
        assert!(a.iter().all(|s| norm3(&s.position) > EXCLUSION_RADIUS));
        assert_eq!(bath_snapshot_json(&a).unwrap(), bath_snapshot_json(&b).unwrap());
    }

    #[test]
    fn invalid_lattice_rejected() {
        assert!(generate_bulk_bath(&LatticeConfig::new(1.5, 10.0, 0)).is_err());
        assert!(generate_bulk_bath(&LatticeConfig::new(0.5, 0.0, 0)).is_err());
    }

    fn surface(termination: Termination, depth: f64, extent: f64) -> SurfaceConfig {
        SurfaceConfig { termination, mix_ratio: 0.7, depth, lateral_extent: extent }
    }

    #[test]
    fn fluorine_termination_is_all_fluorine() {
        let bath =
            generate_surface_bath(&surface(Termination::Fluorine, 10.0, 25.0), &LatticeConfig::new(0.0, 30.0, 5))
                .unwrap();
        assert!(!bath.is_empty());
        assert!(bath.iter().all(|s| s.species.label == "19F"));
    }

    #[test]
    fn mixed_termination_ratio() {
        let lattice = LatticeConfig::new(0.0, 1.0e4, 11);
        let cfg = surface(Termination::Mixed, 5.0, 200.0);
        let bath = generate_surface_bath(&cfg, &lattice).unwrap();
        let n = bath.len() as f64;
        assert!(n > 1.0e4);
        let frac = bath.iter().filter(|s| s.species.label == "19F").count() as f64 / n;
        let sigma = (0.7 * 0.3 / n).sqrt();
        assert!((frac - 0.7).abs() < 3.0 * sigma, "fraction {frac}");
    }

    #[test]
    fn surface_spins_respect_depth_and_density() {
        let lattice = LatticeConfig::new(0.0, 30.0, 0);
        let bath = generate_surface_bath(&surface(Termination::Hydrogen, 12.0, 100.0), &lattice).unwrap();
        let nearest = bath.iter().map(|s| norm3(&s.position)).fold(f64::INFINITY, f64::min);
        assert!(nearest >= 12.0 - 1e-9);
        assert!(bath.iter().all(|s| norm3(&s.position) <= 30.0 + 1e-9));
        // Site density 2/a² over a disc of radius sqrt(30² − 12²).
        let area = std::f64::consts::PI * (30.0f64.powi(2) - 144.0);
        let expected = area * 2.0 / lattice.lattice_constant.powi(2);
        assert!((bath.len() as f64 - expected).abs() < 0.05 * expected, "{} vs {expected}", bath.len());
    }

    #[test]
    fn axial_dipole_symmetry() {
        let a = point_dipole_hyperfine(&[0.0, 0.0, 5.0], constants::GAMMA_E, constants::GAMMA_C13).unwrap().a;
        assert!((a[2][2] + 2.0 * a[0][0]).abs() < 1e-15);
        assert!((a[0][0] - a[1][1]).abs() < 1e-15);
        assert!(a[0][1] == 0.0 && a[0][2] == 0.0 && a[1][2] == 0.0);
    }

    #[test]
    fn prefactor_matches_si_hand_calculation() {
        // (μ0/4π) h γ_e γ_C / r³ in SI, γ in Hz/T, r = 10 Å, converted to MHz.
        let mu0_4pi = 1.0e-7;
        let h = 6.626_070_15e-34;
        let ge = 2.002_319_304_36 * 9.274_010_078_3e-24 / h;
        let gc = 1.404_823_6 * 5.050_783_746_1e-27 / h;
        let r: f64 = 10.0e-10;
        let azz_si = 2.0 * mu0_4pi * h * ge * gc / r.powi(3) / 1e6;
        let azz = point_dipole_hyperfine(&[0.0, 0.0, 10.0], constants::GAMMA_E, constants::GAMMA_C13).unwrap().azz();
        assert!((azz - azz_si).abs() < 1e-5 * azz_si, "{azz} vs {azz_si}");
        assert!(point_dipole_hyperfine(&[0.0; 3], constants::GAMMA_E, constants::GAMMA_C13).is_err());
    }

    #[test]
    fn inverse_cube_law_and_rotation_covariance() {
        let g = (constants::GAMMA_E, constants::GAMMA_C13);
        let a1 = point_dipole_hyperfine(&[1.0, 2.0, 3.0], g.0, g.1).unwrap().a;
        let a2 = point_dipole_hyperfine(&[2.0, 4.0, 6.0], g.0, g.1).unwrap().a;
        for i in 0..3 {
            for j in 0..3 {
                assert!((a1[i][j] / 8.0 - a2[i][j]).abs() < 1e-15);
            }
        }
        let ax = point_dipole_hyperfine(&[4.0, 0.0, 0.0], g.0, g.1).unwrap().a;
        let ay = point_dipole_hyperfine(&[0.0, 4.0, 0.0], g.0, g.1).unwrap().a;
        // 90° about z: R ax Rᵀ with R = [[0,-1,0],[1,0,0],[0,0,1]].
        let r = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let rt = transpose3(&r);
        let mut rot = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    for l in 0..3 {
                        rot[i][j] += r[i][k] * ax[k][l] * rt[l][j];
                    }
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!((rot[i][j] - ay[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nuclear_dipolar_forms() {
        let gh = constants::GAMMA_H1;
        let gf = constants::GAMMA_F19;
        let j = dipolar_coupling(&[0.0; 3], &[0.0, 0.0, 2.0], gh, gh).unwrap();
        assert!(j[2][2] < 0.0);
        assert!((j[2][2].abs() - 2.0 * j[0][0].abs()).abs() < 1e-15);
        let jf = dipolar_coupling(&[0.0; 3], &[0.0, 0.0, 2.0], gf, gf).unwrap();
        assert!((j[2][2] / jf[2][2] - (gh / gf).powi(2)).abs() < 1e-12);
        let p = [1.0, -2.0, 0.5];
        let q = [0.3, 0.7, -1.1];
        assert_eq!(dipolar_coupling(&p, &q, gh, gf).unwrap(), dipolar_coupling(&q, &p, gh, gf).unwrap());
        assert!(dipolar_coupling(&p, &p, gh, gh).is_err());
        let tr = j[0][0] + j[1][1] + j[2][2];
        assert!(tr.abs() < 1e-15);
    }

    #[test]
    fn table_parsing_and_assignment() {
        let bath = generate_bulk_bath(&LatticeConfig::new(1.0, 4.0, 0)).unwrap();
        let target = bath[5].position;
        let text = format!(
            "# x y z then tensor\n\n{} {} {}  0.2 0 0  0 0.2 0  0 0 0.6  # close carbon\n",
            target[0], target[1], target[2]
        );
        let table = HyperfineTable::parse(&text, 0.05).unwrap();
        let out = assign_hyperfine(bath.clone(), Some(&table), constants::GAMMA_E).unwrap();
        let tab: Vec<&BathSpin> = out.iter().filter(|s| s.provenance == Provenance::Tabulated).collect();
        assert_eq!(tab.len(), 1);
        assert_eq!(tab[0].azz(), 0.6);
        assert_eq!(tab[0].position, target);

        let plain = assign_hyperfine(bath.clone(), None, constants::GAMMA_E).unwrap();
        assert!(plain.iter().all(|s| s.provenance == Provenance::PointDipole));

        let empty = HyperfineTable::new(vec![], 0.1).unwrap();
        let out = assign_hyperfine(bath, Some(&empty), constants::GAMMA_E).unwrap();
        assert!(out.iter().all(|s| s.provenance == Provenance::PointDipole));
    }

    #[test]
    fn ambiguous_table_match_is_error() {
        let t = HyperfineTensor::diagonal(0.1, 0.1, 0.1).unwrap();
        let table = HyperfineTable::new(vec![([0.0, 0.0, 2.0], t), ([0.0, 0.0, 2.3], t)], 0.2).unwrap();
        let spin = BathSpin {
            species: SpinSpecies::carbon13(),
            position: [0.0, 0.0, 2.15],
            hyperfine: t,
            provenance: Provenance::PointDipole,
        };
        let err = assign_hyperfine(vec![spin], Some(&table), constants::GAMMA_E).unwrap_err();
        assert!(err.to_string().contains("several table entries"));
        assert!(HyperfineTable::new(vec![([0.0; 3], t), ([0.0, 0.0, 0.01], t)], 0.1).is_err());
        assert!(HyperfineTable::parse("1 2 3 4", 0.1).is_err());
    }

    #[test]
    fn nitrogen_on_axis() {
        let p = nitrogen_position(constants::DIAMOND_LATTICE_CONSTANT);
        assert!(p[0].abs() < 1e-12 && p[1].abs() < 1e-12);
        assert!((p[2] - 3f64.sqrt() * constants::DIAMOND_LATTICE_CONSTANT / 4.0).abs() < 1e-12);
    }
}
