// SPDX-License-Identifier: Apache-2.0

//! Scenario driver behind the `simulate` binary.
//!
//! A run validates the configuration, executes the scenario inside a rayon
//! pool of the requested size and writes the artifacts of one output
//! directory: `resolved_config.json`, result CSVs with JSON sidecars and
//! `run.log`. Results do not depend on the thread count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::cce::{exact_coherence, gcce_coherence, max_abs_deviation, max_magnitude_deviation, SpinEnvironment};
use crate::config::{CoreSpec, RunConfig, Scenario};
use crate::field::{
    asymmetry_metric, depth_scan, find_clock_transitions, level_diagram, linspace, odmr_spectrum, sweep_peaks,
    sweep_t2star, system_at, FieldGeometry, SweepResult,
};
use crate::io::{self, OutputDir};
use crate::pulse::{time_grid, PulseProtocol, SequenceKind};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
    /// Report failed field points instead of failing the run.
    pub keep_going: bool,
    /// Overrides the configured output directory.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    /// Field points that raised an error.
    pub failed_points: usize,
    /// One human-readable line per result.
    pub summary: Vec<String>,
}

/// Fields shared by every sidecar.
#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    generator: &'static str,
    version: &'static str,
    schema_version: u32,
    scenario: &'static str,
    config_hash: &'a str,
    seed: u64,
    rng: &'static str,
    columns: &'a [&'a str],
    #[serde(flatten)]
    details: Value,
}

struct Context<'a> {
    cfg: &'a RunConfig,
    hash: String,
    out: OutputDir,
    summary: Vec<String>,
    failed_points: usize,
    first_failure: Option<String>,
}

impl Context<'_> {
    fn emit(&mut self, stem: &str, csv: &[u8], columns: &[&str], details: Value) -> Result<()> {
        let sidecar = Sidecar {
            generator: "nv-coherence",
            version: env!("CARGO_PKG_VERSION"),
            schema_version: self.cfg.schema_version,
            scenario: self.cfg.scenario.name(),
            config_hash: &self.hash,
            seed: self.cfg.seed,
            rng: "chacha20",
            columns,
            details,
        };
        self.out.write_result(stem, csv, &sidecar)
    }
}

/// Loads, validates and runs a configuration file.
pub fn run_file(path: &Path, opts: &RunOptions) -> Result<RunReport> {
    let cfg = RunConfig::from_file(path)?;
    run(&cfg, opts)
}

/// Runs a parsed configuration.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let pool = build_pool(opts.threads)?;
    let out_dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let resolved = cfg.resolved_json()?;
    let hash = io::sha256_hex(resolved.as_bytes());
    let mut out = OutputDir::create(&out_dir)?;
    out.log(format!("scenario {} config_hash {hash}", cfg.scenario.name()));
    out.write_bytes("resolved_config.json", format!("{resolved}\n").as_bytes())?;
    let mut ctx = Context { cfg, hash, out, summary: Vec::new(), failed_points: 0, first_failure: None };
    let started = Instant::now();
    let outcome = pool.install(|| execute(&mut ctx));
    if let Err(e) = &outcome {
        ctx.out.log(format!("error: {e}"));
    }
    ctx.out.log(format!("threads {} elapsed {:.3} s", pool.current_num_threads(), started.elapsed().as_secs_f64()));
    if ctx.failed_points > 0 {
        ctx.out.log(format!("{} field point(s) failed", ctx.failed_points));
    }
    let Context { out, summary, failed_points, first_failure, .. } = ctx;
    let files = out.finish()?;
    outcome?;
    if failed_points > 0 && !opts.keep_going {
        return Err(Error::Numerical(format!(
            "{failed_points} field point(s) failed (first at {}); rerun with --keep-going to accept partial results",
            first_failure.unwrap_or_default()
        )));
    }
    Ok(RunReport { output_dir: out_dir, files, failed_points, summary })
}

fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    if threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start thread pool: {e}")))
}

fn execute(ctx: &mut Context<'_>) -> Result<()> {
    match ctx.cfg.scenario {
        Scenario::FidSweep => fid_sweep(ctx),
        Scenario::EchoDepthScan => echo_depth_scan(ctx),
        Scenario::LevelDiagram => levels(ctx, false),
        Scenario::ClockFind => levels(ctx, true),
        Scenario::Odmr => odmr(ctx),
        Scenario::OracleCheck => oracle(ctx).map(|_| ()),
    }
}

/// Analytic clock-transition scan positions from the first ¹⁵N in the core.
fn predicted_crossings(env: &SpinEnvironment, core: &[usize], geometry: &FieldGeometry) -> Option<[f64; 2]> {
    core.iter()
        .map(|&i| &env.nuclei[i])
        .find(|n| n.species.label == "15N")
        .map(|n| geometry.predicted_crossings(n.azz()))
}

fn sweep_stem(cfg: &RunConfig, phi: f64) -> String {
    match cfg.sweep.as_ref().and_then(|s| s.phi.as_ref()) {
        Some(_) => format!("sweep_phi{:03}", phi.round() as i64),
        None => "sweep".into(),
    }
}

fn fid_sweep(ctx: &mut Context<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let sweep_cfg = cfg.sweep.as_ref().ok_or_else(|| Error::Config("sweep: missing".into()))?;
    let env = cfg.environment()?;
    let cce = cfg.cce_config(&env)?;
    let protocol = cfg.protocol.protocol();
    let base = cfg.geometry.geometry();
    let phis = sweep_cfg.phi.clone().unwrap_or_else(|| vec![base.phi]);
    ctx.out.log(format!("{} nuclei, core {:?}, {} azimuth(s)", env.nuclei.len(), cce.core_spins, phis.len()));
    for phi in phis {
        let geometry = FieldGeometry { phi, ..base };
        let grid = sweep_cfg.b0.values(&geometry)?;
        let sweep = sweep_t2star(&env, &geometry, &grid, &protocol, &cce, &cfg.time.adaptive(), cfg.time.method)?;
        let stem = sweep_stem(cfg, phi);
        let details = sweep_details(&env, &cce.core_spins, &sweep);
        ctx.failed_points += sweep.points.iter().filter(|p| p.error.is_some()).count();
        if ctx.first_failure.is_none() {
            ctx.first_failure =
                sweep.points.iter().find_map(|p| p.error.as_ref().map(|e| format!("b0 = {} G: {e}", p.b0)));
        }
        let best = sweep.points.iter().filter_map(|p| p.t_char().map(|t| (p.b0, t))).max_by(|a, b| a.1.total_cmp(&b.1));
        ctx.summary.push(match best {
            Some((b, t)) => format!("{stem}: longest decay time {t:.4} us at b0 = {b:.4} G"),
            None => format!("{stem}: no resolved decay time"),
        });
        ctx.emit(&stem, &io::sweep_csv(&sweep)?, &io::SWEEP_COLUMNS, details)?;
    }
    Ok(())
}

fn sweep_details(env: &SpinEnvironment, core: &[usize], sweep: &SweepResult) -> Value {
    let predicted = predicted_crossings(env, core, &sweep.geometry);
    let errors: Vec<Value> =
        sweep.points.iter().filter_map(|p| p.error.as_ref().map(|e| json!({"b0_gauss": p.b0, "error": e}))).collect();
    let windows: Vec<f64> = sweep.points.iter().map(|p| p.window_used).collect();
    json!({
        "geometry": sweep.geometry,
        "method": sweep.method,
        "core_spins": core,
        "n_nuclei": env.nuclei.len(),
        "residual_shift_gauss": sweep.geometry.residual_shift(),
        "predicted_crossings_gauss": predicted,
        "peaks": sweep_peaks(sweep),
        "asymmetry": predicted.map(|p| asymmetry_metric(sweep, p)),
        "window_used_us": windows,
        "unresolved_points": sweep.points.iter().filter(|p| p.error.is_none() && p.t_char().is_none()).count(),
        "failed_points": errors,
    })
}

fn echo_depth_scan(ctx: &mut Context<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let scan = cfg.depth_scan.as_ref().ok_or_else(|| Error::Config("depth_scan: missing".into()))?;
    let lattice = cfg.lattice().ok_or_else(|| Error::Config("bath: missing".into()))?;
    if let CoreSpec::Ids(ids) = &cfg.cce.core {
        if !ids.is_empty() {
            return Err(Error::Config("cce.core: depth scans use an electron-only core".into()));
        }
    }
    let base = SpinEnvironment::new(cfg.central_model()?, Vec::new(), [0.0; 3]).with_terms(cfg.terms);
    let base = SpinEnvironment { dimension_cap: cfg.dimension_cap, ..base };
    let mut cce = cfg.cce_config(&base)?;
    cce.core_spins.clear();
    let protocol = PulseProtocol { kind: SequenceKind::HahnEcho, qubit_selector: cfg.protocol.qubit };
    let rows = depth_scan(&base, &scan.surfaces(), &lattice, &scan.fields, &protocol, &cce, &cfg.time.adaptive())?;
    for r in &rows {
        ctx.summary.push(format!(
            "depth {} A {:?} {}: T2 {}",
            r.depth,
            r.termination,
            r.field_label,
            r.t2.map_or("unresolved".to_string(), |t| format!("{t:.4} us"))
        ));
    }
    let details = json!({
        "protocol": protocol,
        "n_samples": cce.n_samples,
        "bath_state": cce.bath_state_policy,
        "r_dip": cce.r_dip,
        "fields": scan.fields,
        "lattice": lattice,
    });
    ctx.emit("depth_scan", &io::depth_csv(&rows)?, &io::DEPTH_COLUMNS, details)
}

fn levels(ctx: &mut Context<'_>, find: bool) -> Result<()> {
    let cfg = ctx.cfg;
    let sweep_cfg = cfg.sweep.as_ref().ok_or_else(|| Error::Config("sweep: missing".into()))?;
    let env = cfg.environment()?;
    let ids = cfg.core_ids(&env)?;
    let geometry = cfg.geometry.geometry();
    let grid = sweep_cfg.b0.values(&geometry)?;
    let diagram = level_diagram(&env, &ids, &geometry, &grid)?;
    let details = json!({
        "geometry": geometry,
        "nuclei": ids,
        "tracks": diagram.n_tracks(),
        "splits": diagram.splits,
    });
    ctx.emit("level_diagram", &io::level_csv(&diagram)?, &io::LEVEL_COLUMNS, details)?;
    if !find {
        ctx.summary.push(format!("level diagram: {} tracks over {} fields", diagram.n_tracks(), grid.len()));
        return Ok(());
    }
    let found = find_clock_transitions(&env, &ids, &geometry, &diagram)?;
    for c in &found {
        ctx.summary
            .push(format!("clock transition at b0 = {:.6} G (axial {:.6} G), gap {:.6} MHz", c.b0, c.b_axial, c.gap));
    }
    if found.is_empty() {
        ctx.summary.push("no clock transition in the scanned range".into());
    }
    let details = json!({
        "geometry": geometry,
        "nuclei": ids,
        "predicted_crossings_gauss": predicted_crossings(&env, &ids, &geometry),
        "transitions": found.len(),
    });
    ctx.emit("clock_transitions", &io::clock_csv(&found)?, &io::CLOCK_COLUMNS, details)
}

fn odmr(ctx: &mut Context<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    let o = cfg.odmr.as_ref().ok_or_else(|| Error::Config("odmr: missing".into()))?;
    let env = cfg.environment()?;
    let ids = cfg.core_ids(&env)?;
    let geometry = cfg.geometry.geometry();
    let sys = system_at(&env, &ids, &geometry, geometry.b0)?;
    let freqs = linspace(o.freq_start, o.freq_stop, o.points)?;
    let spectrum = odmr_spectrum(&sys, o.linewidth, &freqs, o.polarization)?;
    let peaks = spectrum.peaks(o.peak_fraction);
    ctx.summary.push(format!("odmr: {} peak(s) at {:?} MHz", peaks.len(), peaks));
    let details = json!({
        "geometry": geometry,
        "nuclei": ids,
        "linewidth_mhz": o.linewidth,
        "polarization": o.polarization,
        "lines": spectrum.lines,
        "peaks_mhz": peaks,
        "integrated_amplitude": spectrum.integrated_amplitude(),
    });
    ctx.emit("odmr", &io::odmr_csv(&spectrum)?, &io::ODMR_COLUMNS, details)
}

/// Expansion versus exact propagation on the configured time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleDeviation {
    pub max_abs_deviation: f64,
    pub max_magnitude_deviation: f64,
}

fn oracle(ctx: &mut Context<'_>) -> Result<OracleDeviation> {
    let cfg = ctx.cfg;
    let env = cfg.environment()?;
    let cce = cfg.cce_config(&env)?;
    let protocol = cfg.protocol.protocol();
    let times = time_grid(cfg.time.window_us, cfg.time.points)?;
    let approx = gcce_coherence(&env, &cce, &protocol, &times)?;
    let exact = exact_coherence(&env, &cce, &protocol, &times)?;
    let dev = OracleDeviation {
        max_abs_deviation: max_abs_deviation(&approx, &exact),
        max_magnitude_deviation: max_magnitude_deviation(&approx, &exact),
    };
    ctx.summary.push(format!(
        "oracle: max |L_cce - L_exact| = {:e}, max ||L_cce| - |L_exact|| = {:e}",
        dev.max_abs_deviation, dev.max_magnitude_deviation
    ));
    for (stem, curve) in [("curve_cce", &approx), ("curve_exact", &exact)] {
        let details = json!({
            "curve": curve.metadata,
            "core_spins": cce.core_spins,
            "n_nuclei": env.nuclei.len(),
            "deviation": dev,
        });
        ctx.emit(stem, &io::curve_csv(curve)?, &io::CURVE_COLUMNS, details)?;
    }
    Ok(dev)
}

/// Runs the expansion-versus-exact comparison for any configuration,
/// regardless of its scenario.
pub fn oracle_check(cfg: &RunConfig, opts: &RunOptions) -> Result<(RunReport, OracleDeviation)> {
    let mut cfg = cfg.clone();
    cfg.scenario = Scenario::OracleCheck;
    cfg.validate()?;
    let pool = build_pool(opts.threads)?;
    let out_dir = opts.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let resolved = cfg.resolved_json()?;
    let hash = io::sha256_hex(resolved.as_bytes());
    let mut out = OutputDir::create(&out_dir)?;
    out.write_bytes("resolved_config.json", format!("{resolved}\n").as_bytes())?;
    let mut ctx = Context { cfg: &cfg, hash, out, summary: Vec::new(), failed_points: 0, first_failure: None };
    let dev = pool.install(|| oracle(&mut ctx));
    if let Err(e) = &dev {
        ctx.out.log(format!("error: {e}"));
    }
    let Context { out, summary, .. } = ctx;
    let files = out.finish()?;
    let dev = dev?;
    Ok((RunReport { output_dir: out_dir, files, failed_points: 0, summary }, dev))
}
