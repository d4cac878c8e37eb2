// SPDX-License-Identifier: Apache-2.0

//! Physical constants in the simulator's unit system (MHz, G, Å).
//!
//! Gyromagnetic ratios are γ/2π from CODATA 2018 g-factors:
//! γ = g μ / h, with μ_B/h = 1.399624493 MHz/G and μ_N/h = 7.6225932e-4 MHz/G.

/// Free-electron γ_e/2π (g = 2.00231930436), MHz/G.
pub const GAMMA_E: f64 = 2.802_495_14;
/// ¹³C, g = 1.4048236.
pub const GAMMA_C13: f64 = 1.070_84e-3;
/// ¹⁵N, g = −0.56637768.
pub const GAMMA_N15: f64 = -4.317_27e-4;
/// ¹H, g = 5.5856946893.
pub const GAMMA_H1: f64 = 4.257_748e-3;
/// ¹⁹F, g = 5.257736.
pub const GAMMA_F19: f64 = 4.007_77e-3;

/// (μ0/4π)·h expressed so that `DIPOLAR_PREFACTOR · γ1 γ2 / r³` is in MHz
/// for γ in MHz/G and r in Å.
pub const DIPOLAR_PREFACTOR: f64 = 6_626.070_15;

/// Conventional diamond lattice constant, Å.
pub const DIAMOND_LATTICE_CONSTANT: f64 = 3.567;
/// Natural ¹³C abundance.
pub const C13_NATURAL_ABUNDANCE: f64 = 0.0107;
