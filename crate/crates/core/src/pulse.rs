// SPDX-License-Identifier: Apache-2.0

//! Ramsey and Hahn-echo protocols over the gCCE engine, and decay-time
//! extraction from the resulting curves.

use serde::{Deserialize, Serialize};

use crate::cce::{gcce_coherence, CceConfig, CoherenceCurve, SpinEnvironment};
use crate::error::{Error, Result};

/// Which pair of core eigenstates forms the qubit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QubitSelector {
    #[default]
    Ms0ToLowerBranch,
    Ms0ToUpperBranch,
    /// Indices into the ascending core eigenvalues.
    Explicit {
        a: usize,
        b: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    Ramsey,
    /// τ is the total free evolution, split evenly around an ideal π pulse.
    HahnEcho,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PulseProtocol {
    pub kind: SequenceKind,
    #[serde(default)]
    pub qubit_selector: QubitSelector,
}

impl PulseProtocol {
    pub fn ramsey(qubit_selector: QubitSelector) -> Self {
        PulseProtocol { kind: SequenceKind::Ramsey, qubit_selector }
    }

    pub fn hahn_echo(qubit_selector: QubitSelector) -> Self {
        PulseProtocol { kind: SequenceKind::HahnEcho, qubit_selector }
    }
}

pub fn run_ramsey(
    env: &SpinEnvironment,
    cfg: &CceConfig,
    qubit: QubitSelector,
    times: &[f64],
) -> Result<CoherenceCurve> {
    gcce_coherence(env, cfg, &PulseProtocol::ramsey(qubit), times)
}

pub fn run_hahn_echo(
    env: &SpinEnvironment,
    cfg: &CceConfig,
    qubit: QubitSelector,
    taus: &[f64],
) -> Result<CoherenceCurve> {
    gcce_coherence(env, cfg, &PulseProtocol::hahn_echo(qubit), taus)
}

/// `points` evenly spaced times from 0 to `window` inclusive.
pub fn time_grid(window: f64, points: usize) -> Result<Vec<f64>> {
    if !(window.is_finite() && window > 0.0) || points < 2 {
        return Err(Error::config(format!("invalid time grid: window {window} µs, {points} points")));
    }
    let step = window / (points - 1) as f64;
    Ok((0..points).map(|k| k as f64 * step).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecayMethod {
    #[default]
    OneOverE,
    StretchedFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// µs.
    pub t_char: f64,
    /// Stretch exponent; only set by the stretched fit.
    pub exponent: Option<f64>,
    pub method: DecayMethod,
    /// RMS residual of the fit in ln(−ln|L|) space; 0 for the 1/e crossing.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DecayEstimate {
    Resolved(DecayFit),
    /// No 1/e crossing (or no usable fit) inside the sampled window.
    Unresolved {
        method: DecayMethod,
        window: f64,
        envelope_min: f64,
    },
}

impl DecayEstimate {
    pub fn t_char(&self) -> Option<f64> {
        match self {
            DecayEstimate::Resolved(fit) => Some(fit.t_char),
            DecayEstimate::Unresolved { .. } => None,
        }
    }

    pub fn is_resolved(&self) -> bool {
        matches!(self, DecayEstimate::Resolved(_))
    }
}

/// Vertices `(t, |L|)` of the decreasing upper envelope.
///
/// Vertices are the first sample, the initial monotone descent and every
/// interior local maximum; a curve without interior maxima uses all of its
/// samples. Vertex heights are replaced by their suffix maximum so the
/// envelope never increases. Plateaus count once, at their leftmost sample.
pub fn envelope(times: &[f64], mags: &[f64]) -> Vec<(f64, f64)> {
    let n = mags.len().min(times.len());
    if n == 0 {
        return Vec::new();
    }
    let mut idx = vec![0];
    let mut k = 0;
    while k + 1 < n && mags[k + 1] <= mags[k] {
        k += 1;
        idx.push(k);
    }
    let mut maxima = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if mags[i] > mags[i - 1] {
            // Walk across a plateau, keep its left end if it is a maximum.
            let mut j = i;
            while j + 1 < n && mags[j + 1] == mags[i] {
                j += 1;
            }
            if j + 1 < n && mags[j + 1] < mags[i] {
                maxima.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    if maxima.is_empty() {
        idx = (0..n).collect();
    } else {
        idx.extend(maxima.into_iter().filter(|&m| m > k));
    }
    let mut out: Vec<(f64, f64)> = idx.iter().map(|&i| (times[i], mags[i])).collect();
    let mut running = f64::NEG_INFINITY;
    for v in out.iter_mut().rev() {
        running = running.max(v.1);
        v.1 = running;
    }
    out
}

/// Characteristic decay time of `curve` by the chosen method.
pub fn extract_decay_time(curve: &CoherenceCurve, method: DecayMethod) -> Result<DecayEstimate> {
    let mags = curve.magnitudes();
    decay_from_samples(&curve.times, &mags, method)
}

pub fn decay_from_samples(times: &[f64], mags: &[f64], method: DecayMethod) -> Result<DecayEstimate> {
    if times.len() != mags.len() || times.len() < 2 {
        return Err(Error::domain("decay extraction needs at least two samples on a matching grid"));
    }
    if mags.iter().chain(times).any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite coherence samples"));
    }
    let env = envelope(times, mags);
    let window = times[times.len() - 1];
    let envelope_min = env.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let unresolved = DecayEstimate::Unresolved { method, window, envelope_min };
    let threshold = (-1.0f64).exp();
    match method {
        DecayMethod::OneOverE => {
            if env[0].1 <= threshold {
                return Ok(unresolved);
            }
            for w in env.windows(2) {
                let ((t0, y0), (t1, y1)) = (w[0], w[1]);
                if y1 <= threshold {
                    let t = if y0 == y1 { t0 } else { t0 + (y0 - threshold) / (y0 - y1) * (t1 - t0) };
                    return Ok(DecayEstimate::Resolved(DecayFit { t_char: t, exponent: None, method, residual: 0.0 }));
                }
            }
            Ok(unresolved)
        }
        DecayMethod::StretchedFit => {
            let pts: Vec<(f64, f64)> = env
                .iter()
                .filter(|(t, y)| *t > 0.0 && (0.05..=0.95).contains(y))
                .map(|(t, y)| (t.ln(), (-y.ln()).ln()))
                .collect();
            if pts.len() < 3 {
                return Ok(unresolved);
            }
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            if sxx <= 0.0 {
                return Ok(unresolved);
            }
            let slope = sxy / sxx;
            let intercept = my - slope * mx;
            if !(0.5..=4.0).contains(&slope) {
                return Ok(unresolved);
            }
            let t_char = (-intercept / slope).exp();
            let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
            if !t_char.is_finite() || t_char <= 0.0 {
                return Ok(unresolved);
            }
            Ok(DecayEstimate::Resolved(DecayFit { t_char, exponent: Some(slope), method, residual }))
        }
    }
}

/// Settings for growing the time window until the decay is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveWindow {
    /// Initial window, µs.
    pub window: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    /// Largest window tried, µs.
    pub max_window: f64,
}

fn default_points() -> usize {
    512
}

impl AdaptiveWindow {
    pub fn validate(&self) -> Result<()> {
        time_grid(self.window, self.points)?;
        if !(self.max_window >= self.window) {
            return Err(Error::config("max_window must be at least window"));
        }
        Ok(())
    }
}

/// Runs `simulate` on growing windows until the decay time is resolved,
/// then once more on a window where it sits in the sampled range.
pub fn resolve_decay<F>(
    adaptive: &AdaptiveWindow,
    method: DecayMethod,
    mut simulate: F,
) -> Result<(CoherenceCurve, DecayEstimate)>
where
    F: FnMut(&[f64]) -> Result<CoherenceCurve>,
{
    adaptive.validate()?;
    let mut window = adaptive.window;
    loop {
        let curve = simulate(&time_grid(window, adaptive.points)?)?;
        let est = extract_decay_time(&curve, method)?;
        match est {
            DecayEstimate::Resolved(fit) => {
                // Shrink so the decay spans a good fraction of the window.
                if fit.t_char < window / 20.0 {
                    let tighter = (fit.t_char * 5.0).max(window / 64.0);
                    let curve = simulate(&time_grid(tighter, adaptive.points)?)?;
                    let refined = extract_decay_time(&curve, method)?;
                    if refined.is_resolved() {
                        return Ok((curve, refined));
                    }
                }
                return Ok((curve, est));
            }
            DecayEstimate::Unresolved { .. } => {
                if window >= adaptive.max_window {
                    return Ok((curve, est));
                }
                window = (window * 2.0).min(adaptive.max_window);
            }
        }
    }
}
