// SPDX-License-Identifier: Apache-2.0

//! JSON run configurations for the `simulate` driver.
//!
//! Units are fixed: G, MHz, µs, Å, degrees. Unknown keys are rejected.
//! Parsing reports the JSON path of the first offending field;
//! [`RunConfig::diagnostics`] then lists every semantic violation by path.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bath::{
    assign_hyperfine, filter_max_azz, generate_bulk_bath, generate_surface_bath, nitrogen_position,
    point_dipole_hyperfine, BathSpin, HyperfineTable, LatticeConfig, Provenance, SurfaceConfig, Termination,
};
use crate::cce::{default_core, BathStatePolicy, CceConfig, CoreLines, HamiltonianTerms, SpinEnvironment};
use crate::constants;
use crate::field::{linspace, symmetric_grid, FieldGeometry, LabeledField, Polarization};
use crate::linalg::{Mat3, Vec3};
use crate::pulse::{AdaptiveWindow, DecayMethod, PulseProtocol, QubitSelector, SequenceKind};
use crate::spin::{CentralSpinModel, HyperfineTensor, SpinSpecies, DEFAULT_DIMENSION_CAP};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    FidSweep,
    EchoDepthScan,
    LevelDiagram,
    ClockFind,
    Odmr,
    OracleCheck,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::FidSweep => "fid_sweep",
            Scenario::EchoDepthScan => "echo_depth_scan",
            Scenario::LevelDiagram => "level_diagram",
            Scenario::ClockFind => "clock_find",
            Scenario::Odmr => "odmr",
            Scenario::OracleCheck => "oracle_check",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    /// Master seed; bath and bath-state sampling seeds default to it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub central: CentralSection,
    /// Explicitly placed nuclei; they come first in the id order.
    #[serde(default)]
    pub nuclei: Vec<NucleusSection>,
    #[serde(default)]
    pub bath: Option<BathSection>,
    #[serde(default)]
    pub terms: HamiltonianTerms,
    #[serde(default)]
    pub cce: CceSection,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub time: TimeSection,
    #[serde(default)]
    pub depth_scan: Option<DepthScanSection>,
    #[serde(default)]
    pub odmr: Option<OdmrSection>,
    #[serde(default = "default_cap")]
    pub dimension_cap: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_cap() -> usize {
    DEFAULT_DIMENSION_CAP
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CentralSection {
    pub d_mhz: f64,
    pub e_mhz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NucleusSection {
    /// "13C", "15N", "1H" or "19F".
    pub species: String,
    /// Å, central frame. Nitrogen defaults to the substitutional site.
    #[serde(default)]
    pub position: Option<Vec3>,
    /// Full hyperfine tensor, MHz. Point dipole when both forms are absent.
    #[serde(default)]
    pub tensor: Option<Mat3>,
    /// Diagonal `[A_xx, A_yy, A_zz]`, MHz.
    #[serde(default)]
    pub diagonal: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BathKind {
    Bulk,
    Surface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathSection {
    pub kind: BathKind,
    #[serde(default = "default_abundance")]
    pub abundance: f64,
    /// Å.
    pub r_bath: f64,
    #[serde(default = "default_lattice_constant")]
    pub lattice_constant: f64,
    /// Defaults to the master seed.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Drop spins with |A_zz| at or above this value, MHz.
    #[serde(default)]
    pub max_azz_mhz: Option<f64>,
    /// Keep only the strongest-coupled spins.
    #[serde(default)]
    pub max_spins: Option<usize>,
    /// Required for `kind = surface`.
    #[serde(default)]
    pub surface: Option<SurfaceConfig>,
    /// Hyperfine table, relative to the config file.
    #[serde(default)]
    pub hyperfine_table: Option<PathBuf>,
    /// Å.
    #[serde(default = "default_match_tolerance")]
    pub table_match_tolerance: f64,
}

fn default_abundance() -> f64 {
    constants::C13_NATURAL_ABUNDANCE
}

fn default_lattice_constant() -> f64 {
    constants::DIAMOND_LATTICE_CONSTANT
}

fn default_match_tolerance() -> f64 {
    0.05
}

/// Core selection: `"auto"`, `"electron_only"` or a list of nuclear ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoreSpec {
    Named(CoreName),
    Ids(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreName {
    /// ¹⁵N plus the strongest-coupled ¹³C.
    Auto,
    ElectronOnly,
}

impl Default for CoreSpec {
    fn default() -> Self {
        CoreSpec::Named(CoreName::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CceSection {
    #[serde(default = "default_order")]
    pub order: u8,
    #[serde(default)]
    pub core: CoreSpec,
    /// Å; required for order 2.
    #[serde(default)]
    pub r_dip: Option<f64>,
    #[serde(default = "default_bath_state")]
    pub bath_state: BathStatePolicy,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub core_lines: CoreLines,
}

fn default_order() -> u8 {
    1
}

fn default_bath_state() -> BathStatePolicy {
    BathStatePolicy::ExactMixed
}

fn default_samples() -> usize {
    25
}

impl Default for CceSection {
    fn default() -> Self {
        CceSection {
            order: default_order(),
            core: CoreSpec::default(),
            r_dip: None,
            bath_state: default_bath_state(),
            n_samples: default_samples(),
            core_lines: CoreLines::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    #[serde(default = "default_sequence")]
    pub sequence: SequenceKind,
    #[serde(default)]
    pub qubit: QubitSelector,
}

fn default_sequence() -> SequenceKind {
    SequenceKind::Ramsey
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection { sequence: default_sequence(), qubit: QubitSelector::default() }
    }
}

impl ProtocolSection {
    pub fn protocol(&self) -> PulseProtocol {
        PulseProtocol { kind: self.sequence, qubit_selector: self.qubit }
    }
}

/// Field direction and residual field; angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    #[serde(default)]
    pub b0: f64,
    #[serde(default)]
    pub theta0: f64,
    #[serde(default)]
    pub br: f64,
    #[serde(default)]
    pub theta_r: f64,
    #[serde(default)]
    pub phi: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection { b0: 0.0, theta0: 0.0, br: 0.0, theta_r: 0.0, phi: 0.0 }
    }
}

impl GeometrySection {
    pub fn geometry(&self) -> FieldGeometry {
        FieldGeometry { b0: self.b0, theta0: self.theta0, br: self.br, theta_r: self.theta_r, phi: self.phi }
    }
}

/// Grid of signed B₀ values, G. Either `start`/`stop` or `half_width`
/// around `center`; a missing center means the residual-field shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub start: Option<f64>,
    #[serde(default)]
    pub stop: Option<f64>,
    #[serde(default)]
    pub center: Option<f64>,
    #[serde(default)]
    pub half_width: Option<f64>,
    pub points: usize,
}

impl GridSection {
    pub fn values(&self, geometry: &FieldGeometry) -> Result<Vec<f64>> {
        match (self.start, self.stop, self.half_width) {
            (Some(a), Some(b), None) if self.center.is_none() => linspace(a, b, self.points),
            (None, None, Some(w)) => symmetric_grid(self.center.unwrap_or(geometry.residual_shift()), w, self.points),
            _ => Err(Error::config("grid needs either start/stop or half_width (with optional center)")),
        }
    }

    fn check(&self, path: &str, out: &mut Vec<Diagnostic>) {
        let ranged = self.start.is_some() || self.stop.is_some();
        let centered = self.center.is_some() || self.half_width.is_some();
        if ranged == centered {
            out.push(Diagnostic::new(path, "give either start/stop or center/half_width"));
        } else if ranged {
            match (self.start, self.stop) {
                (Some(a), Some(b)) if a < b => {}
                (Some(_), Some(_)) => out.push(Diagnostic::new(format!("{path}.stop"), "stop must exceed start")),
                _ => out.push(Diagnostic::new(path, "start and stop must both be given")),
            }
        } else if !self.half_width.is_some_and(|w| w > 0.0) {
            out.push(Diagnostic::new(format!("{path}.half_width"), "half_width must be positive"));
        }
        if self.points < 2 {
            out.push(Diagnostic::new(format!("{path}.points"), "at least 2 points are required"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub b0: GridSection,
    /// One sweep per azimuth; defaults to the geometry's φ.
    #[serde(default)]
    pub phi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    /// Initial window, µs.
    #[serde(default = "default_window")]
    pub window_us: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    /// Largest window tried before a decay is reported unresolved, µs.
    #[serde(default = "default_max_window")]
    pub max_window_us: f64,
    #[serde(default)]
    pub method: DecayMethod,
}

fn default_window() -> f64 {
    2.0
}

fn default_points() -> usize {
    512
}

fn default_max_window() -> f64 {
    20_000.0
}

impl Default for TimeSection {
    fn default() -> Self {
        TimeSection {
            window_us: default_window(),
            points: default_points(),
            max_window_us: default_max_window(),
            method: DecayMethod::default(),
        }
    }
}

impl TimeSection {
    pub fn adaptive(&self) -> AdaptiveWindow {
        AdaptiveWindow { window: self.window_us, points: self.points, max_window: self.max_window_us }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthScanSection {
    /// Å.
    pub depths: Vec<f64>,
    pub terminations: Vec<Termination>,
    #[serde(default = "default_mix_ratio")]
    pub mix_ratio: f64,
    /// Å.
    #[serde(default = "default_lateral_extent")]
    pub lateral_extent: f64,
    pub fields: Vec<LabeledField>,
}

fn default_mix_ratio() -> f64 {
    0.7
}

fn default_lateral_extent() -> f64 {
    100.0
}

impl DepthScanSection {
    pub fn surfaces(&self) -> Vec<SurfaceConfig> {
        let mut out = Vec::new();
        for &depth in &self.depths {
            for &termination in &self.terminations {
                out.push(SurfaceConfig {
                    termination,
                    mix_ratio: self.mix_ratio,
                    depth,
                    lateral_extent: self.lateral_extent,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdmrSection {
    /// MHz.
    pub freq_start: f64,
    pub freq_stop: f64,
    pub points: usize,
    /// Lorentzian FWHM, MHz.
    pub linewidth: f64,
    #[serde(default = "default_polarization")]
    pub polarization: Polarization,
    /// Peaks are reported down to this fraction of the maximum prominence.
    #[serde(default = "default_peak_fraction")]
    pub peak_fraction: f64,
}

fn default_polarization() -> Polarization {
    Polarization::X
}

fn default_peak_fraction() -> f64 {
    0.1
}

/// One semantic problem, located by a dotted JSON path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl RunConfig {
    /// Parses JSON text; errors carry the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        Ok(cfg)
    }

    /// Reads a config file and makes a relative hyperfine-table path absolute.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(bath) = cfg.bath.as_mut() {
            if let Some(table) = bath.hyperfine_table.as_mut() {
                if table.is_relative() {
                    let base = path.parent().unwrap_or(Path::new("."));
                    *table = std::path::absolute(base.join(&*table))?;
                }
            }
        }
        Ok(cfg)
    }

    /// Canonical JSON with every default materialized.
    pub fn resolved_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Every semantic violation found, in a fixed order.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(Diagnostic::new(
                "schema_version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if !positive(self.central.d_mhz) {
            out.push(Diagnostic::new("central.d_mhz", "D must be positive"));
        }
        if !self.central.e_mhz.is_finite() || self.central.e_mhz < 0.0 {
            out.push(Diagnostic::new("central.e_mhz", "E must be finite and non-negative"));
        }
        for (k, n) in self.nuclei.iter().enumerate() {
            let path = format!("nuclei[{k}]");
            if SpinSpecies::from_label(&n.species).is_err() {
                out.push(Diagnostic::new(format!("{path}.species"), format!("unknown species '{}'", n.species)));
            }
            if n.position.is_none() && n.species != "15N" {
                out.push(Diagnostic::new(format!("{path}.position"), "position is required except for 15N"));
            }
            if n.tensor.is_some() && n.diagonal.is_some() {
                out.push(Diagnostic::new(path.clone(), "give at most one of tensor and diagonal"));
            }
            if let Some(t) = n.tensor {
                if let Err(e) = HyperfineTensor::new(t) {
                    out.push(Diagnostic::new(format!("{path}.tensor"), e.to_string()));
                }
            }
        }
        if let Some(b) = &self.bath {
            if !(0.0..=1.0).contains(&b.abundance) {
                out.push(Diagnostic::new("bath.abundance", format!("abundance {} outside [0, 1]", b.abundance)));
            }
            if !positive(b.r_bath) {
                out.push(Diagnostic::new("bath.r_bath", "r_bath must be positive"));
            }
            if !positive(b.lattice_constant) {
                out.push(Diagnostic::new("bath.lattice_constant", "lattice_constant must be positive"));
            }
            if b.max_azz_mhz.is_some_and(|v| !positive(v)) {
                out.push(Diagnostic::new("bath.max_azz_mhz", "max_azz_mhz must be positive"));
            }
            if !positive(b.table_match_tolerance) {
                out.push(Diagnostic::new("bath.table_match_tolerance", "must be positive"));
            }
            match (b.kind, &b.surface) {
                (BathKind::Surface, None) => out.push(Diagnostic::new("bath.surface", "required for a surface bath")),
                (BathKind::Surface, Some(s)) => {
                    if let Err(e) = s.validate() {
                        out.push(Diagnostic::new("bath.surface", e.to_string()));
                    }
                }
                (BathKind::Bulk, Some(_)) => {
                    out.push(Diagnostic::new("bath.surface", "only allowed for a surface bath"))
                }
                (BathKind::Bulk, None) => {}
            }
        }
        let c = &self.cce;
        if c.order != 1 && c.order != 2 {
            out.push(Diagnostic::new("cce.order", format!("order must be 1 or 2, got {}", c.order)));
        }
        if c.order == 2 && c.r_dip.is_none() {
            out.push(Diagnostic::new("cce.r_dip", "r_dip is required when order = 2"));
        }
        if c.r_dip.is_some_and(|r| !positive(r)) {
            out.push(Diagnostic::new("cce.r_dip", "r_dip must be positive"));
        }
        if c.n_samples == 0 {
            out.push(Diagnostic::new("cce.n_samples", "at least one sample is required"));
        }
        if let CoreSpec::Ids(ids) = &c.core {
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != ids.len() {
                out.push(Diagnostic::new("cce.core", "duplicate core ids"));
            }
        }
        if let Err(e) = self.geometry.geometry().validate() {
            out.push(Diagnostic::new("geometry", e.to_string()));
        }
        let t = &self.time;
        if !positive(t.window_us) {
            out.push(Diagnostic::new("time.window_us", "window must be positive"));
        }
        if t.points < 2 {
            out.push(Diagnostic::new("time.points", "at least 2 points are required"));
        }
        if !(t.max_window_us >= t.window_us) {
            out.push(Diagnostic::new("time.max_window_us", "max_window_us must be at least window_us"));
        }
        if self.dimension_cap < 3 {
            out.push(Diagnostic::new("dimension_cap", "cap must admit the bare electron"));
        }
        if let Some(s) = &self.sweep {
            s.b0.check("sweep.b0", &mut out);
            if s.phi.as_ref().is_some_and(|p| p.is_empty()) {
                out.push(Diagnostic::new("sweep.phi", "phi list is empty"));
            }
        }
        if let Some(d) = &self.depth_scan {
            if d.depths.is_empty() || d.depths.iter().any(|&x| !positive(x)) {
                out.push(Diagnostic::new("depth_scan.depths", "depths must be a non-empty list of positive values"));
            }
            if d.terminations.is_empty() {
                out.push(Diagnostic::new("depth_scan.terminations", "at least one termination is required"));
            }
            if !(0.0..=1.0).contains(&d.mix_ratio) {
                out.push(Diagnostic::new("depth_scan.mix_ratio", "mix_ratio outside [0, 1]"));
            }
            if d.fields.is_empty() {
                out.push(Diagnostic::new("depth_scan.fields", "at least one field is required"));
            }
            for (k, f) in d.fields.iter().enumerate() {
                if let Err(e) = f.geometry.validate() {
                    out.push(Diagnostic::new(format!("depth_scan.fields[{k}].geometry"), e.to_string()));
                }
            }
        }
        if let Some(o) = &self.odmr {
            if !(o.freq_stop > o.freq_start) {
                out.push(Diagnostic::new("odmr.freq_stop", "freq_stop must exceed freq_start"));
            }
            if o.points < 2 {
                out.push(Diagnostic::new("odmr.points", "at least 2 points are required"));
            }
            if !positive(o.linewidth) {
                out.push(Diagnostic::new("odmr.linewidth", "linewidth must be positive"));
            }
        }
        let need = |present: bool, path: &str, out: &mut Vec<Diagnostic>| {
            if !present {
                out.push(Diagnostic::new(path, format!("required by scenario {}", self.scenario.name())));
            }
        };
        match self.scenario {
            Scenario::FidSweep | Scenario::LevelDiagram | Scenario::ClockFind => {
                need(self.sweep.is_some(), "sweep", &mut out)
            }
            Scenario::EchoDepthScan => {
                need(self.depth_scan.is_some(), "depth_scan", &mut out);
                need(self.bath.is_some(), "bath", &mut out);
            }
            Scenario::Odmr => need(self.odmr.is_some(), "odmr", &mut out),
            Scenario::OracleCheck => {}
        }
        out
    }

    /// Fails with every diagnostic joined into one message.
    pub fn validate(&self) -> Result<()> {
        let diags = self.diagnostics();
        if diags.is_empty() {
            return Ok(());
        }
        let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        Err(Error::Config(lines.join("; ")))
    }

    pub fn central_model(&self) -> Result<CentralSpinModel> {
        CentralSpinModel::new(self.central.d_mhz, self.central.e_mhz)
    }

    pub fn lattice(&self) -> Option<LatticeConfig> {
        self.bath.as_ref().map(|b| LatticeConfig {
            lattice_constant: b.lattice_constant,
            abundance: b.abundance,
            r_bath: b.r_bath,
            seed: b.seed.unwrap_or(self.seed),
            exclude_nitrogen_site: true,
        })
    }

    fn explicit_nuclei(&self) -> Result<Vec<BathSpin>> {
        let mut out = Vec::with_capacity(self.nuclei.len());
        for n in &self.nuclei {
            let species = SpinSpecies::from_label(&n.species)?;
            let position = match n.position {
                Some(p) => p,
                None => nitrogen_position(
                    self.bath.as_ref().map_or(constants::DIAMOND_LATTICE_CONSTANT, |b| b.lattice_constant),
                ),
            };
            let (hyperfine, provenance) = match (n.tensor, n.diagonal) {
                (Some(t), _) => (HyperfineTensor::new(t)?, Provenance::Explicit),
                (None, Some([x, y, z])) => (HyperfineTensor::diagonal(x, y, z)?, Provenance::Explicit),
                (None, None) => {
                    (point_dipole_hyperfine(&position, constants::GAMMA_E, species.gyro)?, Provenance::PointDipole)
                }
            };
            out.push(BathSpin { species, position, hyperfine, provenance });
        }
        Ok(out)
    }

    /// Generated bath spins after the hyperfine table, A_zz filter and truncation.
    pub fn generated_bath(&self) -> Result<Vec<BathSpin>> {
        let (Some(b), Some(lattice)) = (&self.bath, self.lattice()) else {
            return Ok(Vec::new());
        };
        let mut spins = match (b.kind, &b.surface) {
            (BathKind::Bulk, _) => generate_bulk_bath(&lattice)?,
            (BathKind::Surface, Some(s)) => generate_surface_bath(s, &lattice)?,
            (BathKind::Surface, None) => return Err(Error::config("bath.surface: required for a surface bath")),
        };
        if let Some(path) = &b.hyperfine_table {
            let table = HyperfineTable::from_file(path, b.table_match_tolerance)?;
            spins = assign_hyperfine(spins, Some(&table), constants::GAMMA_E)?;
            crate::bath::sort_bath(&mut spins);
        }
        if let Some(max) = b.max_azz_mhz {
            spins = filter_max_azz(spins, max);
        }
        if let Some(n) = b.max_spins {
            spins.truncate(n);
        }
        Ok(spins)
    }

    /// Explicit nuclei followed by the generated bath, with the field at `b0 = geometry.b0`.
    pub fn environment(&self) -> Result<SpinEnvironment> {
        let mut nuclei = self.explicit_nuclei()?;
        nuclei.extend(self.generated_bath()?);
        let mut env = SpinEnvironment::new(self.central_model()?, nuclei, self.geometry.geometry().field_vector())
            .with_terms(self.terms);
        env.dimension_cap = self.dimension_cap;
        Ok(env)
    }

    pub fn core_ids(&self, env: &SpinEnvironment) -> Result<Vec<usize>> {
        let ids = match &self.cce.core {
            CoreSpec::Named(CoreName::Auto) => default_core(&env.nuclei),
            CoreSpec::Named(CoreName::ElectronOnly) => Vec::new(),
            CoreSpec::Ids(ids) => ids.clone(),
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= env.nuclei.len()) {
            return Err(Error::Config(format!("cce.core: id {bad} out of range ({} nuclei)", env.nuclei.len())));
        }
        Ok(ids)
    }

    pub fn cce_config(&self, env: &SpinEnvironment) -> Result<CceConfig> {
        let cfg = CceConfig {
            order: self.cce.order,
            core_spins: self.core_ids(env)?,
            r_dip: self.cce.r_dip,
            bath_state_policy: self.cce.bath_state,
            n_samples: self.cce.n_samples,
            seed: self.seed,
            core_lines: self.cce.core_lines,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
