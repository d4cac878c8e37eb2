// SPDX-License-Identifier: Apache-2.0

//! Field-dependent analyses: level diagrams, clock-transition search, ODMR
//! spectra, decay-time sweeps over the applied field, sweep asymmetry and
//! depth scans over surface baths.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{generate_surface_bath, LatticeConfig, SurfaceConfig, Termination};
use crate::cce::{
    core_levels, gcce_coherence, gcce_coherence_with_samples, CceConfig, CoherenceCurve, SpinEnvironment,
};
use crate::constants::GAMMA_E;
use crate::error::{Error, Result};
use crate::linalg::{CMat, Vec3, ZERO};
use crate::pulse::{
    decay_from_samples, extract_decay_time, resolve_decay, AdaptiveWindow, DecayEstimate, DecayMethod, PulseProtocol,
};
use crate::spin::{build_hamiltonian, eigendecompose, eigendecompose_tracked, spin_operators, Eigen, SpinSystem};

/// Applied field `B₀` along a fixed direction plus a residual field `B_r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldGeometry {
    /// Signed magnitude of the applied field, G.
    #[serde(default)]
    pub b0: f64,
    /// Polar angle of `B₀` from the central axis, degrees.
    #[serde(default)]
    pub theta0: f64,
    /// Residual field magnitude, G.
    #[serde(default)]
    pub br: f64,
    #[serde(default)]
    pub theta_r: f64,
    /// Azimuth of `B_r` relative to `B₀`, degrees.
    #[serde(default)]
    pub phi: f64,
}

impl FieldGeometry {
    pub fn axial(b0: f64) -> Self {
        FieldGeometry { b0, theta0: 0.0, br: 0.0, theta_r: 0.0, phi: 0.0 }
    }

    pub fn with_b0(&self, b0: f64) -> Self {
        FieldGeometry { b0, ..*self }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [self.b0, self.theta0, self.br, self.theta_r, self.phi];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("field geometry values must be finite"));
        }
        if self.br < 0.0 {
            return Err(Error::config("residual field magnitude must be non-negative"));
        }
        Ok(())
    }

    /// Unit vector of `B₀` for positive `b0`.
    pub fn direction(&self) -> Vec3 {
        let t = self.theta0.to_radians();
        [t.sin(), 0.0, t.cos()]
    }

    /// Total field in the central frame, G.
    pub fn field_vector(&self) -> Vec3 {
        let d = self.direction();
        let (tr, ph) = (self.theta_r.to_radians(), self.phi.to_radians());
        let r = [tr.sin() * ph.cos(), tr.sin() * ph.sin(), tr.cos()];
        [self.b0 * d[0] + self.br * r[0], self.b0 * d[1] + self.br * r[1], self.b0 * d[2] + self.br * r[2]]
    }

    /// Scan offset that cancels the axial residual field: `−b_r cosθ_r / cosθ₀`.
    pub fn residual_shift(&self) -> f64 {
        -self.br * self.theta_r.to_radians().cos() / self.theta0.to_radians().cos()
    }

    /// Scan positions where the axial field equals ±`a_zz`/(2γ_e): the
    /// leading-order avoided crossings of a spin-1/2 nucleus with that coupling.
    pub fn predicted_crossings(&self, a_zz: f64) -> [f64; 2] {
        let half = a_zz.abs() / (2.0 * GAMMA_E * self.theta0.to_radians().cos());
        let c = self.residual_shift();
        [c - half, c + half]
    }
}

/// Evenly spaced values from `start` to `stop` inclusive.
pub fn linspace(start: f64, stop: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 || !(start.is_finite() && stop.is_finite()) || stop <= start {
        return Err(Error::config(format!("invalid field grid {start}..{stop} with {points} points")));
    }
    let step = (stop - start) / (points - 1) as f64;
    Ok((0..points).map(|k| start + k as f64 * step).collect())
}

/// `points` values spanning `center ± half_width`, mirror-symmetric about `center`.
pub fn symmetric_grid(center: f64, half_width: f64, points: usize) -> Result<Vec<f64>> {
    linspace(center - half_width, center + half_width, points)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("field grid must be finite and strictly increasing with at least two points"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSplit {
    pub field_index: usize,
    pub track: usize,
    pub overlap: f64,
}

/// Energies along a field scan, continued by eigenvector overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagram {
    /// Scan coordinate `b0`, G.
    pub fields: Vec<f64>,
    /// `energies[k][track]`, MHz.
    pub energies: Vec<Vec<f64>>,
    /// Points where a track's best overlap with its predecessor fell below 0.6.
    pub splits: Vec<TrackSplit>,
}

impl LevelDiagram {
    pub fn n_tracks(&self) -> usize {
        self.energies.first().map_or(0, Vec::len)
    }

    /// `|E_i − E_j|` for every track pair at field index `k`.
    pub fn gap_matrix(&self, k: usize) -> Vec<Vec<f64>> {
        let e = &self.energies[k];
        e.iter().map(|a| e.iter().map(|b| (a - b).abs()).collect()).collect()
    }

    pub fn track(&self, t: usize) -> Vec<f64> {
        self.energies.iter().map(|e| e[t]).collect()
    }
}

/// Minimum eigenvector overlap for a track to be considered continuous.
pub const TRACK_OVERLAP: f64 = 0.6;

/// Spin system of the central spin plus `ids` at scan position `b0`.
pub fn system_at(env: &SpinEnvironment, ids: &[usize], geometry: &FieldGeometry, b0: f64) -> Result<SpinSystem> {
    env.with_field(geometry.with_b0(b0).field_vector()).subsystem(ids)
}

fn spectrum_at(env: &SpinEnvironment, ids: &[usize], geometry: &FieldGeometry, b0: f64) -> Result<Eigen> {
    eigendecompose(&build_hamiltonian(&system_at(env, ids, geometry, b0)?)?)
}

/// Eigenvalues of the central spin plus nuclei `ids` over the scan `grid`,
/// with tracks continued by maximal eigenvector overlap.
pub fn level_diagram(
    env: &SpinEnvironment,
    ids: &[usize],
    geometry: &FieldGeometry,
    grid: &[f64],
) -> Result<LevelDiagram> {
    geometry.validate()?;
    check_grid(grid)?;
    let first = spectrum_at(env, ids, geometry, grid[0])?;
    let dim = first.dim();
    // perm[track] = eigen index at the current point.
    let mut perm: Vec<usize> = (0..dim).collect();
    let mut energies = vec![first.values.clone()];
    let mut splits = Vec::new();
    let mut prev = first;
    for (k, &b) in grid.iter().enumerate().skip(1) {
        let h = build_hamiltonian(&system_at(env, ids, geometry, b)?)?;
        let cur = eigendecompose_tracked(&h, &prev)?;
        let overlap = prev.vectors.adjoint() * &cur.vectors;
        let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                cand.push((overlap[(i, j)].norm_sqr(), i, j));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut map = vec![usize::MAX; dim];
        let mut used = vec![false; dim];
        let mut best = vec![0.0; dim];
        for (w, i, j) in cand {
            if map[i] == usize::MAX && !used[j] {
                map[i] = j;
                used[j] = true;
                best[i] = w;
            }
        }
        let mut row = vec![0.0; dim];
        for t in 0..dim {
            let old = perm[t];
            let new = map[old];
            if best[old] < TRACK_OVERLAP {
                splits.push(TrackSplit { field_index: k, track: t, overlap: best[old] });
            }
            perm[t] = new;
            row[t] = cur.values[new];
        }
        energies.push(row);
        prev = cur;
    }
    Ok(LevelDiagram { fields: grid.to_vec(), energies, splits })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockTransition {
    /// Scan coordinate `b0` of the gap minimum, G.
    pub b0: f64,
    /// Axial component of the total field there, G.
    pub b_axial: f64,
    /// Scan position of the minimal pair gap, G. Differs from `b0` at
    /// second order when the field has a transverse component.
    pub gap_minimum_b0: f64,
    /// Positions of the two levels in the ascending spectrum.
    pub levels: (usize, usize),
    /// Dominant nuclear configuration of the pair.
    pub config: usize,
    /// MHz.
    pub gap: f64,
    /// d f/dB_z of the `m_s = 0` to lower-branch transition at fixed transverse field, MHz/G.
    pub slope: f64,
    /// The gap changed by more than 20 % per step around the grid minimum.
    pub coarse_grid: bool,
}

/// Thresholds applied to refined gap minima.
pub const MAX_CLOCK_SLOPE: f64 = 1e-3;
pub const MIN_CLOCK_GAP: f64 = 1e-6;
const SLOPE_STEP: f64 = 1e-4;

/// Gaps between energy-adjacent levels of the ±1 manifold, with the
/// configuration index when both levels belong to the same nuclear configuration.
fn branch_gaps(sys: &SpinSystem) -> Result<(Vec<f64>, Vec<(usize, usize, Option<usize>)>, crate::cce::CoreLevels)> {
    let levels = core_levels(sys)?;
    let mut pm: Vec<(usize, usize)> = Vec::new();
    for (m, &(_, pair)) in levels.by_config.iter().enumerate() {
        pm.push((pair[0], m));
        pm.push((pair[1], m));
    }
    pm.sort_by(|a, b| levels.values[a.0].total_cmp(&levels.values[b.0]).then(a.0.cmp(&b.0)));
    let mut gaps = Vec::new();
    let mut pairs = Vec::new();
    for w in pm.windows(2) {
        gaps.push(levels.values[w[1].0] - levels.values[w[0].0]);
        let same = (w[0].1 == w[1].1).then_some(w[0].1);
        pairs.push((w[0].0, w[1].0, same));
    }
    Ok((gaps, pairs, levels))
}

/// Lower-branch transition frequency of configuration `m` with the axial
/// field offset by `dz`.
fn branch_frequency(env: &SpinEnvironment, ids: &[usize], field: Vec3, m: usize, dz: f64) -> Result<f64> {
    let sys = env.with_field([field[0], field[1], field[2] + dz]).subsystem(ids)?;
    let levels = core_levels(&sys)?;
    let (zero, [lo, _]) = levels.by_config[m];
    Ok(levels.values[lo] - levels.values[zero])
}

/// Brent minimization of `f` on `[a, b]`.
fn brent_min(mut f: impl FnMut(f64) -> Result<f64>, a: f64, b: f64, tol: f64) -> Result<(f64, f64)> {
    const GOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a, b);
    let mut x = a + GOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x)?;
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e): (f64, f64) = (0.0, 0.0);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let tol1 = tol + 1e-12 * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            // Parabola through (v, fv), (w, fw), (x, fx).
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if m >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= m { a - x } else { b - x };
            d = GOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u)?;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            (v, fv, w, fw, x, fx) = (w, fw, x, fx, u, fu);
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                (v, fv, w, fw) = (w, fw, u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    Ok((x, fx))
}

/// Zero of `slope` near `start`, searched outward inside `[lo, hi]`.
fn slope_root(mut slope: impl FnMut(f64) -> Result<f64>, start: f64, lo: f64, hi: f64) -> Result<Option<f64>> {
    let s0 = slope(start)?;
    if s0 == 0.0 {
        return Ok(Some(start));
    }
    let mut step = 1e-4 * (hi - lo).max(1e-6);
    let (mut a, mut b);
    let mut fa = s0;
    loop {
        let (l, r) = ((start - step).max(lo), (start + step).min(hi));
        let (fl, fr) = (slope(l)?, slope(r)?);
        if fl.signum() != s0.signum() {
            (a, b) = (l, start);
            fa = fl;
            break;
        }
        if fr.signum() != s0.signum() {
            (a, b) = (start, r);
            break;
        }
        if l <= lo && r >= hi {
            return Ok(None);
        }
        step *= 4.0;
    }
    for _ in 0..80 {
        let mid = 0.5 * (a + b);
        let fm = slope(mid)?;
        if fm == 0.0 || b - a < 1e-13 {
            return Ok(Some(mid));
        }
        if fm.signum() == fa.signum() {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

/// Avoided crossings of E-coupled ±1 pairs along the scan of `diagram`.
///
/// Every strict interior minimum of an energy-adjacent ±1 gap on the grid is
/// refined by successive parabolic interpolation between its neighbours.
/// For pairs from the same nuclear configuration the reported position is
/// the nearby zero of the transition slope with respect to the axial field,
/// which coincides with the gap minimum for a purely axial scan. Points with
/// a gap above [`MIN_CLOCK_GAP`] and |slope| below [`MAX_CLOCK_SLOPE`] are
/// reported, ordered by field.
pub fn find_clock_transitions(
    env: &SpinEnvironment,
    ids: &[usize],
    geometry: &FieldGeometry,
    diagram: &LevelDiagram,
) -> Result<Vec<ClockTransition>> {
    let grid = &diagram.fields;
    check_grid(grid)?;
    let per_point: Vec<Vec<f64>> =
        grid.iter().map(|&b| Ok(branch_gaps(&system_at(env, ids, geometry, b)?)?.0)).collect::<Result<_>>()?;
    let n_gaps = per_point[0].len();
    let mut out: Vec<ClockTransition> = Vec::new();
    for g in 0..n_gaps {
        for k in 1..grid.len() - 1 {
            let (l, c, r) = (per_point[k - 1][g], per_point[k][g], per_point[k + 1][g]);
            if !(c < l && c < r) {
                continue;
            }
            let coarse = (l - c).abs() > 0.2 * c.abs() || (r - c).abs() > 0.2 * c.abs();
            let gap_at = |b: f64| -> Result<f64> { Ok(branch_gaps(&system_at(env, ids, geometry, b)?)?.0[g]) };
            let (b_gap, _) = brent_min(gap_at, grid[k - 1], grid[k + 1], 1e-10)?;
            let (_, pairs, _) = branch_gaps(&system_at(env, ids, geometry, b_gap)?)?;
            let (lo, hi, same) = pairs[g];
            let Some(m) = same else { continue };
            let slope_at = |b: f64| -> Result<f64> {
                let field = geometry.with_b0(b).field_vector();
                Ok((branch_frequency(env, ids, field, m, SLOPE_STEP)?
                    - branch_frequency(env, ids, field, m, -SLOPE_STEP)?)
                    / (2.0 * SLOPE_STEP))
            };
            let Some(b_min) = slope_root(slope_at, b_gap, grid[k - 1], grid[k + 1])? else { continue };
            let gap = branch_gaps(&system_at(env, ids, geometry, b_min)?)?.0[g];
            let slope = slope_at(b_min)?;
            if gap <= MIN_CLOCK_GAP || slope.abs() >= MAX_CLOCK_SLOPE {
                continue;
            }
            let field = geometry.with_b0(b_min).field_vector();
            out.push(ClockTransition {
                b0: b_min,
                b_axial: field[2],
                gap_minimum_b0: b_gap,
                levels: (lo.min(hi), lo.max(hi)),
                config: m,
                gap,
                slope,
                coarse_grid: coarse,
            });
        }
    }
    out.sort_by(|a, b| a.b0.total_cmp(&b.b0).then(a.levels.cmp(&b.levels)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    #[default]
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdmrLine {
    /// MHz.
    pub frequency: f64,
    pub amplitude: f64,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdmrSpectrum {
    pub lines: Vec<OdmrLine>,
    /// Full width at half maximum, MHz.
    pub linewidth: f64,
    pub frequencies: Vec<f64>,
    pub intensity: Vec<f64>,
}

impl OdmrSpectrum {
    /// Sum of line amplitudes: the area under the full Lorentzian spectrum.
    pub fn integrated_amplitude(&self) -> f64 {
        self.lines.iter().map(|l| l.amplitude).sum()
    }

    /// Exact area of the broadened spectrum inside `[lo, hi]`.
    pub fn window_area(&self, lo: f64, hi: f64) -> f64 {
        let g = 0.5 * self.linewidth;
        self.lines
            .iter()
            .map(|l| {
                l.amplitude * (((hi - l.frequency) / g).atan() - ((lo - l.frequency) / g).atan()) / std::f64::consts::PI
            })
            .sum()
    }

    /// Resolved peaks: local maxima whose topographic prominence is at
    /// least `fraction` of the global maximum.
    pub fn peaks(&self, fraction: f64) -> Vec<f64> {
        let y = &self.intensity;
        let max = y.iter().copied().fold(0.0, f64::max);
        let base = |k: usize, dir: isize| -> f64 {
            let mut low = y[k];
            let mut i = k as isize + dir;
            while i >= 0 && (i as usize) < y.len() {
                let v = y[i as usize];
                if v > y[k] {
                    break;
                }
                low = low.min(v);
                i += dir;
            }
            low
        };
        (1..y.len().saturating_sub(1))
            .filter(|&k| y[k] > y[k - 1] && y[k] >= y[k + 1])
            .filter(|&k| y[k] - base(k, -1).max(base(k, 1)) >= fraction * max)
            .map(|k| self.frequencies[k])
            .collect()
    }
}

/// Unit-area Lorentzian with full width `fwhm`.
pub fn lorentzian(f: f64, center: f64, fwhm: f64) -> f64 {
    let g = 0.5 * fwhm;
    g / std::f64::consts::PI / ((f - center).powi(2) + g * g)
}

/// Transitions from `m_s = 0`-dominant states to the ±1 manifold with
/// amplitudes `|⟨a|S_x|b⟩|²`, broadened and sampled at `frequencies`.
pub fn odmr_spectrum(
    sys: &SpinSystem,
    linewidth: f64,
    frequencies: &[f64],
    polarization: Polarization,
) -> Result<OdmrSpectrum> {
    if !(linewidth > 0.0 && linewidth.is_finite()) {
        return Err(Error::config("ODMR linewidth must be positive"));
    }
    let levels = core_levels(sys)?;
    let (sx, sy, _) = spin_operators(&sys.central().species);
    let op = match polarization {
        Polarization::X => sx,
        Polarization::Y => sy,
    };
    let rest: usize = sys.dims()[1..].iter().product();
    let full = op.kronecker(&CMat::identity(rest, rest));
    let v = &levels.vectors;
    let mut lines = Vec::new();
    for &(zero, _) in &levels.by_config {
        let a = v.column(zero);
        let sa = &full * a;
        for &(_, pair) in &levels.by_config {
            for b_idx in pair {
                let b = v.column(b_idx);
                let elem: Complex64 = b.iter().zip(sa.iter()).fold(ZERO, |acc, (x, y)| acc + x.conj() * y);
                let amplitude = elem.norm_sqr();
                if amplitude > 1e-12 {
                    lines.push(OdmrLine {
                        frequency: levels.values[b_idx] - levels.values[zero],
                        amplitude,
                        from: zero,
                        to: b_idx,
                    });
                }
            }
        }
    }
    lines.sort_by(|a, b| a.frequency.total_cmp(&b.frequency).then(a.from.cmp(&b.from)));
    let intensity = frequencies
        .iter()
        .map(|&f| lines.iter().map(|l| l.amplitude * lorentzian(f, l.frequency, linewidth)).sum())
        .collect();
    Ok(OdmrSpectrum { lines, linewidth, frequencies: frequencies.to_vec(), intensity })
}

/// Well-mixed 64-bit hash of a seed and an index.
pub fn point_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub b0: f64,
    pub field: Vec3,
    pub estimate: Option<DecayEstimate>,
    /// Splitting of the ±1 pair the qubit line belongs to, MHz.
    pub gap_nearest_ct: f64,
    pub window_used: f64,
    pub error: Option<String>,
}

impl SweepPoint {
    pub fn t_char(&self) -> Option<f64> {
        self.estimate.and_then(|e| e.t_char())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub geometry: FieldGeometry,
    pub method: DecayMethod,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn fields(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.b0).collect()
    }
}

/// Decay time at every `b0` of the grid. Failed or unresolved points are
/// recorded and the sweep continues. Sampled bath states use a per-point
/// seed derived from `cfg.seed` and the point index.
pub fn sweep_t2star(
    env: &SpinEnvironment,
    geometry: &FieldGeometry,
    grid: &[f64],
    protocol: &PulseProtocol,
    cfg: &CceConfig,
    window: &AdaptiveWindow,
    method: DecayMethod,
) -> Result<SweepResult> {
    geometry.validate()?;
    check_grid(grid)?;
    cfg.validate()?;
    window.validate()?;
    let points = grid
        .par_iter()
        .enumerate()
        .map(|(k, &b0)| {
            let field = geometry.with_b0(b0).field_vector();
            let local_env = env.with_field(field);
            let local_cfg = CceConfig { seed: point_seed(cfg.seed, k as u64), ..cfg.clone() };
            match resolve_decay(window, method, |times| gcce_coherence(&local_env, &local_cfg, protocol, times)) {
                Ok((curve, est)) => SweepPoint {
                    b0,
                    field,
                    estimate: Some(est),
                    gap_nearest_ct: curve.metadata.branch_gap_mhz,
                    window_used: curve.times.last().copied().unwrap_or(0.0),
                    error: None,
                },
                Err(e) => SweepPoint {
                    b0,
                    field,
                    estimate: None,
                    gap_nearest_ct: f64::NAN,
                    window_used: 0.0,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(SweepResult { geometry: *geometry, method, points })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub b0: f64,
    pub t_char: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Asymmetry {
    /// `(T_left − T_right)/(T_left + T_right)`; `None` if a peak is missing.
    pub metric: Option<f64>,
    pub left: Option<Peak>,
    pub right: Option<Peak>,
}

/// Resolved local maxima of the decay time along the sweep. A sweep edge
/// counts as a maximum when it exceeds its only neighbour.
pub fn sweep_peaks(sweep: &SweepResult) -> Vec<Peak> {
    let t: Vec<Option<f64>> = sweep.points.iter().map(SweepPoint::t_char).collect();
    let n = t.len();
    let mut out = Vec::new();
    for k in 0..n {
        let Some(tk) = t[k] else { continue };
        let left_ok = k == 0 || t[k - 1].is_none_or(|v| tk > v);
        let right_ok = k + 1 == n || t[k + 1].is_none_or(|v| tk >= v);
        if left_ok && right_ok && n > 1 {
            out.push(Peak { b0: sweep.points[k].b0, t_char: tk });
        }
    }
    out
}

/// Asymmetry between the decay-time peaks nearest the two expected clock
/// transition positions.
pub fn asymmetry_metric(sweep: &SweepResult, expected: [f64; 2]) -> Asymmetry {
    let peaks = sweep_peaks(sweep);
    let nearest = |target: f64| -> Option<Peak> {
        peaks.iter().copied().min_by(|a, b| (a.b0 - target).abs().total_cmp(&(b.b0 - target).abs()))
    };
    let (left, right) = (nearest(expected[0].min(expected[1])), nearest(expected[0].max(expected[1])));
    let metric = match (left, right) {
        (Some(l), Some(r)) if l.b0 != r.b0 => Some((l.t_char - r.t_char) / (l.t_char + r.t_char)),
        _ => None,
    };
    Asymmetry { metric, left, right }
}

/// One field of a depth scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledField {
    pub label: String,
    pub geometry: FieldGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: f64,
    pub termination: Termination,
    pub field_label: String,
    pub n_spins: usize,
    /// From the sample-averaged curve; `None` if unresolved.
    pub t2: Option<f64>,
    /// Mean and standard deviation over per-sample decay times.
    pub t2_sample_mean: Option<f64>,
    pub t2_sample_std: Option<f64>,
    pub resolved_samples: usize,
    pub window_used: f64,
}

/// Hahn-echo T₂ for every (surface, field) combination with sampled bath states.
///
/// Each sample is expanded separately so the spread of per-sample decay
/// times can be reported next to the decay time of the averaged curve.
pub fn depth_scan(
    base: &SpinEnvironment,
    surfaces: &[SurfaceConfig],
    lattice: &LatticeConfig,
    fields: &[LabeledField],
    protocol: &PulseProtocol,
    cfg: &CceConfig,
    window: &AdaptiveWindow,
) -> Result<Vec<DepthRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for surface in surfaces {
        let bath = generate_surface_bath(surface, lattice)?;
        let n_spins = bath.len();
        let env = SpinEnvironment { nuclei: bath, ..base.clone() };
        for lf in fields {
            lf.geometry.validate()?;
            let local = env.with_field(lf.geometry.field_vector());
            let (curve, est) =
                resolve_decay(window, DecayMethod::OneOverE, |t| gcce_coherence(&local, cfg, protocol, t))?;
            let per_sample = sample_decay_times(&local, cfg, protocol, &curve)?;
            let ok: Vec<f64> = per_sample.iter().flatten().copied().collect();
            let (mean, std) = if ok.is_empty() {
                (None, None)
            } else {
                let m = ok.iter().sum::<f64>() / ok.len() as f64;
                let v = ok.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ok.len() as f64;
                (Some(m), Some(v.sqrt()))
            };
            rows.push(DepthRow {
                depth: surface.depth,
                termination: surface.termination,
                field_label: lf.label.clone(),
                n_spins,
                t2: est.t_char(),
                t2_sample_mean: mean,
                t2_sample_std: std,
                resolved_samples: ok.len(),
                window_used: curve.times.last().copied().unwrap_or(0.0),
            });
        }
    }
    Ok(rows)
}

/// Decay time of each single-sample curve on the grid of `averaged`.
fn sample_decay_times(
    env: &SpinEnvironment,
    cfg: &CceConfig,
    protocol: &PulseProtocol,
    averaged: &CoherenceCurve,
) -> Result<Vec<Option<f64>>> {
    let (_, samples) = gcce_coherence_with_samples(env, cfg, protocol, &averaged.times)?;
    if samples.is_empty() {
        return Ok(vec![extract_decay_time(averaged, DecayMethod::OneOverE)?.t_char()]);
    }
    samples
        .iter()
        .map(|v| {
            let mags: Vec<f64> = v.iter().map(|x| x.norm()).collect();
            Ok(decay_from_samples(&averaged.times, &mags, DecayMethod::OneOverE)?.t_char())
        })
        .collect()
}
