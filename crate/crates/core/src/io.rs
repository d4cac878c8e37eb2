// SPDX-License-Identifier: Apache-2.0

//! Artifact output: atomic file writes and the CSV layouts of every result kind.
//!
//! Numbers are printed in Rust's shortest round-trip form, so equal values
//! always produce equal bytes. Missing values are empty fields.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cce::CoherenceCurve;
use crate::field::{ClockTransition, DepthRow, LevelDiagram, OdmrSpectrum, SweepResult};
use crate::pulse::DecayEstimate;
use crate::{Error, Result};

/// Writes `bytes` to a hidden temporary file next to `path`, syncs it and
/// renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name =
        path.file_name().ok_or_else(|| Error::Config(format!("output path {} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Numerical(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Numerical(format!("csv encoding failed: {e}")))
}

pub const CURVE_COLUMNS: [&str; 4] = ["time_us", "re_L", "im_L", "abs_L"];
pub const SWEEP_COLUMNS: [&str; 5] = ["b0_gauss", "t2_us", "method", "resolved_flag", "gap_mhz_nearest_ct"];
pub const LEVEL_COLUMNS: [&str; 3] = ["b_gauss", "track_id", "energy_mhz"];
pub const CLOCK_COLUMNS: [&str; 8] = [
    "b0_gauss",
    "b_axial_gauss",
    "gap_minimum_b0_gauss",
    "gap_mhz",
    "slope_mhz_per_gauss",
    "level_a",
    "level_b",
    "config",
];
pub const DEPTH_COLUMNS: [&str; 9] = [
    "depth_angstrom",
    "termination",
    "field",
    "n_spins",
    "t2_us",
    "t2_sample_mean_us",
    "t2_sample_std_us",
    "resolved_samples",
    "window_us",
];
pub const ODMR_COLUMNS: [&str; 2] = ["frequency_mhz", "intensity"];

pub fn curve_csv(curve: &CoherenceCurve) -> Result<Vec<u8>> {
    let rows = curve.times.iter().zip(&curve.values).map(|(t, v)| vec![num(*t), num(v.re), num(v.im), num(v.norm())]);
    to_csv(&CURVE_COLUMNS, rows)
}

/// Unresolved and failed points keep their row with an empty `t2_us`.
pub fn sweep_csv(sweep: &SweepResult) -> Result<Vec<u8>> {
    let method = serde_json::to_value(sweep.method)?.as_str().unwrap_or_default().to_string();
    let rows = sweep.points.iter().map(|p| {
        let resolved = matches!(p.estimate, Some(DecayEstimate::Resolved(_)));
        vec![num(p.b0), opt(p.t_char()), method.clone(), u8::from(resolved).to_string(), num(p.gap_nearest_ct)]
    });
    to_csv(&SWEEP_COLUMNS, rows)
}

pub fn level_csv(diagram: &LevelDiagram) -> Result<Vec<u8>> {
    let rows = diagram.fields.iter().zip(&diagram.energies).flat_map(|(b, levels)| {
        levels.iter().enumerate().map(move |(track, e)| vec![num(*b), track.to_string(), num(*e)])
    });
    to_csv(&LEVEL_COLUMNS, rows)
}

pub fn clock_csv(transitions: &[ClockTransition]) -> Result<Vec<u8>> {
    let rows = transitions.iter().map(|c| {
        vec![
            num(c.b0),
            num(c.b_axial),
            num(c.gap_minimum_b0),
            num(c.gap),
            num(c.slope),
            c.levels.0.to_string(),
            c.levels.1.to_string(),
            c.config.to_string(),
        ]
    });
    to_csv(&CLOCK_COLUMNS, rows)
}

pub fn depth_csv(rows: &[DepthRow]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let termination = serde_json::to_value(r.termination)?.as_str().unwrap_or_default().to_string();
        out.push(vec![
            num(r.depth),
            termination,
            r.field_label.clone(),
            r.n_spins.to_string(),
            opt(r.t2),
            opt(r.t2_sample_mean),
            opt(r.t2_sample_std),
            r.resolved_samples.to_string(),
            num(r.window_used),
        ]);
    }
    to_csv(&DEPTH_COLUMNS, out)
}

pub fn odmr_csv(spectrum: &OdmrSpectrum) -> Result<Vec<u8>> {
    let rows = spectrum.frequencies.iter().zip(&spectrum.intensity).map(|(f, i)| vec![num(*f), num(*i)]);
    to_csv(&ODMR_COLUMNS, rows)
}

/// Collects the artifacts of one run. Every file goes through
/// [`write_atomic`]; the log is written last by [`OutputDir::finish`].
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    log: Vec<String>,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(OutputDir { root: root.to_path_buf(), log: Vec::new(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log(&mut self, line: impl Into<String>) {
        self.log.push(line.into());
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(name), bytes)?;
        self.written.push(name.to_string());
        self.log(format!("wrote {name} ({} bytes)", bytes.len()));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Writes `<stem>.csv` and its `<stem>.json` sidecar.
    pub fn write_result<T: Serialize>(&mut self, stem: &str, csv: &[u8], sidecar: &T) -> Result<()> {
        self.write_bytes(&format!("{stem}.csv"), csv)?;
        self.write_json(&format!("{stem}.json"), sidecar)
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    /// Writes `run.log`.
    pub fn finish(mut self) -> Result<Vec<String>> {
        let mut text = self.log.join("\n");
        text.push('\n');
        write_atomic(&self.root.join("run.log"), text.as_bytes())?;
        self.written.push("run.log".into());
        Ok(self.written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cce::CurveMetadata;
    use num_complex::Complex64;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn curve_layout() {
        let curve = CoherenceCurve {
            times: vec![0.0, 0.5],
            values: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, -0.5)],
            metadata: CurveMetadata {
                config_hash: String::new(),
                seed: 0,
                protocol: "ramsey/exact".into(),
                rng: "chacha20".into(),
                cluster_counts: [0; 3],
                saturated_points: 0,
                qubit_frequency_mhz: 0.0,
                branch_gap_mhz: 0.0,
            },
        };
        let text = String::from_utf8(curve_csv(&curve).unwrap()).unwrap();
        assert_eq!(text, "time_us,re_L,im_L,abs_L\n0,1,0,1\n0.5,0,-0.5,0.5\n");
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn output_dir_lists_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(&dir.path().join("run")).unwrap();
        out.write_result("x", b"a\n", &serde_json::json!({"k": 1})).unwrap();
        let files = out.finish().unwrap();
        assert_eq!(files, vec!["x.csv", "x.json", "run.log"]);
    }
}
