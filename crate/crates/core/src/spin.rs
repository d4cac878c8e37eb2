// SPDX-License-Identifier: Apache-2.0

//! Spin operators, Hamiltonian assembly and unitary propagation.
//!
//! All Hamiltonian entries are linear frequencies in MHz, fields are in
//! Gauss, gyromagnetic ratios in MHz/G and times in microseconds. The factor
//! 2π appears exactly once, inside [`Propagator`].
//!
//! Basis ordering: the central spin is the most significant tensor factor,
//! followed by the nuclear spins in list order. Within every factor the
//! basis runs from the largest magnetic quantum number down, so index 0 of
//! the electron is `m_s = +1`, index 1 is `m_s = 0`, index 2 is `m_s = -1`.

use std::collections::BTreeMap;

use nalgebra::SymmetricEigen;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants;
use crate::error::{Error, Result};
use crate::linalg::{c, hermiticity_defect, max_abs, max_abs3, CMat, CVec, Mat3, Vec3, I, ZERO};

/// Default cap on the Hilbert-space dimension of any assembled system.
pub const DEFAULT_DIMENSION_CAP: usize = 4096;

/// Spin quantum number. Only the values needed for NV physics are modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Spin {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "1")]
    One,
}

impl Spin {
    pub fn multiplicity(self) -> usize {
        match self {
            Spin::Half => 2,
            Spin::One => 3,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Spin::Half => 0.5,
            Spin::One => 1.0,
        }
    }

    pub fn from_value(s: f64) -> Result<Self> {
        if s == 0.5 {
            Ok(Spin::Half)
        } else if s == 1.0 {
            Ok(Spin::One)
        } else {
            Err(Error::config(format!("unsupported spin quantum number {s}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinSpecies {
    pub label: String,
    pub spin: Spin,
    /// Gyromagnetic ratio in MHz/G, sign preserved.
    pub gyro: f64,
}

impl SpinSpecies {
    pub fn new(label: impl Into<String>, spin: Spin, gyro: f64) -> Result<Self> {
        if !gyro.is_finite() || gyro == 0.0 {
            return Err(Error::config(format!("gyromagnetic ratio must be finite and nonzero, got {gyro}")));
        }
        Ok(SpinSpecies { label: label.into(), spin, gyro })
    }

    pub fn electron() -> Self {
        SpinSpecies { label: "e".into(), spin: Spin::One, gyro: constants::GAMMA_E }
    }

    pub fn carbon13() -> Self {
        SpinSpecies { label: "13C".into(), spin: Spin::Half, gyro: constants::GAMMA_C13 }
    }

    pub fn nitrogen15() -> Self {
        SpinSpecies { label: "15N".into(), spin: Spin::Half, gyro: constants::GAMMA_N15 }
    }

    pub fn hydrogen1() -> Self {
        SpinSpecies { label: "1H".into(), spin: Spin::Half, gyro: constants::GAMMA_H1 }
    }

    pub fn fluorine19() -> Self {
        SpinSpecies { label: "19F".into(), spin: Spin::Half, gyro: constants::GAMMA_F19 }
    }

    /// Looks up one of the built-in species by label.
    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "13C" => Ok(Self::carbon13()),
            "15N" => Ok(Self::nitrogen15()),
            "1H" => Ok(Self::hydrogen1()),
            "19F" => Ok(Self::fluorine19()),
            other => Err(Error::config(format!("unknown nuclear species '{other}'"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.spin.multiplicity()
    }
}

/// The S = 1 central electron spin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralSpinModel {
    pub species: SpinSpecies,
    /// Axial zero-field splitting D, MHz. The conventional NV⁻ ground-state
    /// value is about 2870 MHz; there is deliberately no default.
    pub d: f64,
    /// Transverse zero-field splitting E, MHz.
    pub e: f64,
    /// Columns are the x, y, z axes of the central frame in crystal coordinates.
    pub frame: Mat3,
}

impl CentralSpinModel {
    pub fn new(d: f64, e: f64) -> Result<Self> {
        Self::with_frame(d, e, IDENTITY3)
    }

    pub fn with_frame(d: f64, e: f64, frame: Mat3) -> Result<Self> {
        let m = CentralSpinModel { species: SpinSpecies::electron(), d, e, frame };
        m.validate()?;
        Ok(m)
    }

    pub fn with_gyro(mut self, gyro: f64) -> Result<Self> {
        self.species = SpinSpecies::new("e", Spin::One, gyro)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.species.spin != Spin::One {
            return Err(Error::config("central spin must be S = 1"));
        }
        if !self.d.is_finite() || !self.e.is_finite() {
            return Err(Error::config("D and E must be finite"));
        }
        if self.e.abs() > self.d.abs() {
            return Err(Error::config(format!("|E| = {} exceeds |D| = {}", self.e.abs(), self.d.abs())));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| self.frame[k][i] * self.frame[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-12 {
                    return Err(Error::config("central frame columns are not orthonormal"));
                }
            }
        }
        Ok(())
    }
}

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Electron-nuclear hyperfine tensor in MHz, central frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperfineTensor {
    pub a: Mat3,
}

impl HyperfineTensor {
    pub fn new(a: Mat3) -> Result<Self> {
        if a.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("hyperfine tensor has non-finite entries"));
        }
        let scale = max_abs3(&a);
        let mut asym = 0.0_f64;
        for i in 0..3 {
            for j in 0..3 {
                asym = asym.max((a[i][j] - a[j][i]).abs());
            }
        }
        if asym > 1e-6 * scale {
            return Err(Error::config(format!("hyperfine tensor is not symmetric (defect {asym:e} MHz)")));
        }
        Ok(HyperfineTensor { a })
    }

    pub fn diagonal(axx: f64, ayy: f64, azz: f64) -> Result<Self> {
        Self::new([[axx, 0.0, 0.0], [0.0, ayy, 0.0], [0.0, 0.0, azz]])
    }

    pub fn azz(&self) -> f64 {
        self.a[2][2]
    }

    /// Keeps only the `A_zz S_z I_z` element.
    pub fn secular_only(&self) -> Self {
        let mut a = [[0.0; 3]; 3];
        a[2][2] = self.a[2][2];
        HyperfineTensor { a }
    }
}

/// One nuclear spin inside a [`SpinSystem`].
#[derive(Debug, Clone, PartialEq)]
pub struct NuclearSpin {
    pub species: SpinSpecies,
    pub hyperfine: HyperfineTensor,
    /// Position in Å, central frame.
    pub position: Vec3,
}

/// A fully specified central spin + nuclei Hamiltonian description.
#[derive(Debug, Clone)]
pub struct SpinSystem {
    central: CentralSpinModel,
    spins: Vec<NuclearSpin>,
    pair_couplings: BTreeMap<(usize, usize), Mat3>,
    field: Vec3,
    nuclear_zeeman: bool,
    dims: Vec<usize>,
}

impl SpinSystem {
    pub fn new(
        central: CentralSpinModel,
        spins: Vec<NuclearSpin>,
        pair_couplings: BTreeMap<(usize, usize), Mat3>,
        field: Vec3,
    ) -> Result<Self> {
        Self::with_cap(central, spins, pair_couplings, field, DEFAULT_DIMENSION_CAP)
    }

    pub fn with_cap(
        central: CentralSpinModel,
        spins: Vec<NuclearSpin>,
        pair_couplings: BTreeMap<(usize, usize), Mat3>,
        field: Vec3,
        cap: usize,
    ) -> Result<Self> {
        central.validate()?;
        if field.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("magnetic field has non-finite components"));
        }
        let mut dims = vec![central.species.dim()];
        let mut dim = dims[0];
        for s in &spins {
            if s.hyperfine.a.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::config("hyperfine tensor has non-finite entries"));
            }
            dims.push(s.species.dim());
            dim = dim.saturating_mul(s.species.dim());
        }
        if dim > cap {
            return Err(Error::DimensionCap { dim, cap, context: format!("{} nuclear spins", spins.len()) });
        }
        for (&(i, j), t) in &pair_couplings {
            if i >= j || j >= spins.len() {
                return Err(Error::config(format!("invalid pair coupling key ({i}, {j})")));
            }
            if t.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("pair coupling ({i}, {j}) has non-finite entries")));
            }
            let scale = max_abs3(t).max(f64::MIN_POSITIVE);
            let trace = t[0][0] + t[1][1] + t[2][2];
            let mut asym = 0.0_f64;
            for a in 0..3 {
                for b in 0..3 {
                    asym = asym.max((t[a][b] - t[b][a]).abs());
                }
            }
            if asym > 1e-9 * scale || trace.abs() > 1e-9 * scale {
                return Err(Error::config(format!("pair coupling ({i}, {j}) is not symmetric traceless")));
            }
        }
        Ok(SpinSystem { central, spins, pair_couplings, field, nuclear_zeeman: true, dims })
    }

    /// Drops (or restores) the nuclear Zeeman term.
    pub fn with_nuclear_zeeman(mut self, on: bool) -> Self {
        self.nuclear_zeeman = on;
        self
    }

    pub fn central(&self) -> &CentralSpinModel {
        &self.central
    }

    pub fn spins(&self) -> &[NuclearSpin] {
        &self.spins
    }

    pub fn pair_couplings(&self) -> &BTreeMap<(usize, usize), Mat3> {
        &self.pair_couplings
    }

    pub fn field(&self) -> Vec3 {
        self.field
    }

    pub fn nuclear_zeeman(&self) -> bool {
        self.nuclear_zeeman
    }

    /// Per-factor dimensions, central spin first.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Returns `(Sx, Sy, Sz)` for the species' spin quantum number.
pub fn spin_operators(species: &SpinSpecies) -> (CMat, CMat, CMat) {
    spin_matrices(species.spin)
}

pub fn spin_matrices(spin: Spin) -> (CMat, CMat, CMat) {
    match spin {
        Spin::Half => {
            let sx = CMat::from_row_slice(2, 2, &[ZERO, c(0.5), c(0.5), ZERO]);
            let sy = CMat::from_row_slice(2, 2, &[ZERO, -0.5 * I, 0.5 * I, ZERO]);
            let sz = CMat::from_row_slice(2, 2, &[c(0.5), ZERO, ZERO, c(-0.5)]);
            (sx, sy, sz)
        }
        Spin::One => {
            let r = std::f64::consts::FRAC_1_SQRT_2;
            let sx = CMat::from_row_slice(3, 3, &[ZERO, c(r), ZERO, c(r), ZERO, c(r), ZERO, c(r), ZERO]);
            let ir = I * r;
            let sy = CMat::from_row_slice(3, 3, &[ZERO, -ir, ZERO, ir, ZERO, -ir, ZERO, ir, ZERO]);
            let sz = CMat::from_row_slice(3, 3, &[c(1.0), ZERO, ZERO, ZERO, ZERO, ZERO, ZERO, ZERO, c(-1.0)]);
            (sx, sy, sz)
        }
    }
}

/// Sparse view of a small site operator: `(row, col, value)` triples.
type SiteOp = Vec<(usize, usize, Complex64)>;

fn sparse(m: &CMat) -> SiteOp {
    let mut out = Vec::new();
    for r in 0..m.nrows() {
        for col in 0..m.ncols() {
            let v = m[(r, col)];
            if v != ZERO {
                out.push((r, col, v));
            }
        }
    }
    out
}

/// Accumulates site-local operator products directly into a dense matrix
/// by walking the product basis, avoiding explicit Kronecker products.
struct Assembler {
    dims: Vec<usize>,
    strides: Vec<usize>,
    dim: usize,
    h: CMat,
}

impl Assembler {
    fn new(dims: &[usize]) -> Self {
        let mut strides = vec![1; dims.len()];
        for k in (0..dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        let dim = dims.iter().product();
        Assembler { dims: dims.to_vec(), strides, dim, h: CMat::zeros(dim, dim) }
    }

    fn digit(&self, index: usize, site: usize) -> usize {
        (index / self.strides[site]) % self.dims[site]
    }

    fn add_local(&mut self, site: usize, op: &SiteOp, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        for col in 0..self.dim {
            let d = self.digit(col, site);
            for &(r, cc, v) in op {
                if cc == d {
                    let row = col - d * self.strides[site] + r * self.strides[site];
                    self.h[(row, col)] += v * coeff;
                }
            }
        }
    }

    fn add_bilinear(&mut self, s1: usize, op1: &SiteOp, s2: usize, op2: &SiteOp, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        debug_assert_ne!(s1, s2);
        for col in 0..self.dim {
            let d1 = self.digit(col, s1);
            let d2 = self.digit(col, s2);
            for &(r1, c1, v1) in op1 {
                if c1 != d1 {
                    continue;
                }
                let base = col - d1 * self.strides[s1] + r1 * self.strides[s1];
                for &(r2, c2, v2) in op2 {
                    if c2 != d2 {
                        continue;
                    }
                    let row = base - d2 * self.strides[s2] + r2 * self.strides[s2];
                    self.h[(row, col)] += v1 * v2 * coeff;
                }
            }
        }
    }
}

/// Assembles the full Hamiltonian (MHz):
///
/// `H = Σ_i Sᵀ A⁽ⁱ⁾ I⁽ⁱ⁾ + D(S_z² − 2/3) + E(S_x² − S_y²) + γ_e B·S
///      − Σ_i γ_i B·I⁽ⁱ⁾ + Σ_{i<j} I⁽ⁱ⁾ᵀ J⁽ⁱʲ⁾ I⁽ʲ⁾`
pub fn build_hamiltonian(system: &SpinSystem) -> Result<CMat> {
    let dims = system.dims();
    let mut asm = Assembler::new(dims);
    let central = system.central();
    let b = system.field();

    let (sx, sy, sz) = spin_matrices(central.species.spin);
    let s_ops = [sparse(&sx), sparse(&sy), sparse(&sz)];
    let s = central.species.spin.value();

    let n = sz.nrows();
    let zfs = (&sz * &sz - CMat::identity(n, n) * c(s * (s + 1.0) / 3.0)) * c(central.d)
        + (&sx * &sx - &sy * &sy) * c(central.e);
    asm.add_local(0, &sparse(&zfs), 1.0);
    for (k, op) in s_ops.iter().enumerate() {
        asm.add_local(0, op, central.species.gyro * b[k]);
    }

    let nuclear_ops: Vec<[SiteOp; 3]> = system
        .spins()
        .iter()
        .map(|n| {
            let (ix, iy, iz) = spin_matrices(n.species.spin);
            [sparse(&ix), sparse(&iy), sparse(&iz)]
        })
        .collect();

    for (idx, nuc) in system.spins().iter().enumerate() {
        let site = idx + 1;
        for a in 0..3 {
            for bb in 0..3 {
                asm.add_bilinear(0, &s_ops[a], site, &nuclear_ops[idx][bb], nuc.hyperfine.a[a][bb]);
            }
        }
        if system.nuclear_zeeman() {
            for k in 0..3 {
                asm.add_local(site, &nuclear_ops[idx][k], -nuc.species.gyro * b[k]);
            }
        }
    }

    for (&(i, j), t) in system.pair_couplings() {
        for a in 0..3 {
            for bb in 0..3 {
                asm.add_bilinear(i + 1, &nuclear_ops[i][a], j + 1, &nuclear_ops[j][bb], t[a][bb]);
            }
        }
    }

    let h = asm.h;
    let scale = max_abs(&h).max(f64::MIN_POSITIVE);
    if hermiticity_defect(&h) > 1e-12 * scale {
        return Err(Error::numerical("assembled Hamiltonian is not Hermitian"));
    }
    Ok(h)
}

/// Eigenvalues in ascending order with matching orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: CMat,
}

impl Eigen {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, k: usize) -> CVec {
        self.vectors.column(k).into_owned()
    }
}

fn degeneracy_tol(h: &CMat) -> f64 {
    1e-9 * max_abs(h).max(1.0)
}

fn raw_eigen(h: &CMat) -> Result<Eigen> {
    let n = h.nrows();
    if n != h.ncols() {
        return Err(Error::domain("eigendecompose requires a square matrix"));
    }
    let scale = max_abs(h).max(f64::MIN_POSITIVE);
    if hermiticity_defect(h) > 1e-10 * scale {
        return Err(Error::domain("eigendecompose requires a Hermitian matrix"));
    }
    let herm = (h + h.adjoint()) * c(0.5);
    let eig = SymmetricEigen::try_new(herm, f64::EPSILON, 100_000).ok_or_else(|| {
        Error::numerical(format!("Hermitian eigensolver did not converge (dim {n}, max |H| = {scale:e})"))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(Eigen { values, vectors })
}

fn degenerate_blocks(values: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut blocks = Vec::new();
    let mut start = 0;
    for k in 1..=values.len() {
        if k == values.len() || values[k] - values[k - 1] > tol {
            blocks.push((start, k));
            start = k;
        }
    }
    blocks
}

/// Makes the largest-magnitude component real and positive (first index wins ties).
fn fix_phase(v: &mut CVec) {
    let mut best = 0;
    let mut best_mag = -1.0;
    for (k, z) in v.iter().enumerate() {
        if z.norm() > best_mag * (1.0 + 1e-9) {
            best = k;
            best_mag = z.norm();
        }
    }
    if best_mag > 0.0 {
        let phase = v[best] / best_mag;
        *v /= phase;
    }
}

fn orthonormalize_into(candidates: impl Iterator<Item = CVec>, basis: &mut Vec<CVec>, want: usize) {
    for mut v in candidates {
        if basis.len() == want {
            break;
        }
        for u in basis.iter() {
            let proj = u.dotc(&v);
            v -= u * proj;
        }
        let norm = v.norm();
        if norm > 1e-6 {
            v /= c(norm);
            basis.push(v);
        }
    }
}

/// Rotating inside a near-degenerate block perturbs `HV − VΛ` by at most
/// the block's spread times its size; that slack is added to the bound.
fn check_residual(h: &CMat, eig: &Eigen) -> Result<()> {
    let n = eig.dim();
    let slack = degenerate_blocks(&eig.values, degeneracy_tol(h))
        .into_iter()
        .filter(|(s, e)| e - s > 1)
        .map(|(s, e)| (eig.values[e - 1] - eig.values[s]) * (e - s) as f64)
        .fold(0.0, f64::max);
    let mut lam = CMat::zeros(n, n);
    for k in 0..n {
        lam[(k, k)] = c(eig.values[k]);
    }
    let resid = crate::linalg::inf_norm(&(h * &eig.vectors - &eig.vectors * lam));
    let hn = crate::linalg::inf_norm(h);
    let bound = 1e-9 * hn.max(f64::MIN_POSITIVE) + slack;
    if resid > bound {
        return Err(Error::numerical(format!(
            "eigendecomposition residual {resid:e} exceeds bound {bound:e} (dim {n})"
        )));
    }
    Ok(())
}

/// Hermitian eigendecomposition with deterministic output.
///
/// Eigenvalues are ascending. Inside a degenerate block the basis is
/// replaced by the Gram-Schmidt completion of the projected unit vectors
/// `e_0, e_1, ...`, and every vector has its largest component real positive.
pub fn eigendecompose(h: &CMat) -> Result<Eigen> {
    let mut eig = raw_eigen(h)?;
    let n = eig.dim();
    for (start, end) in degenerate_blocks(&eig.values, degeneracy_tol(h)) {
        if end - start > 1 {
            let block = eig.vectors.columns(start, end - start).into_owned();
            let candidates = (0..n).map(|k| {
                let coeffs = block.row(k).adjoint();
                &block * coeffs
            });
            let mut basis = Vec::with_capacity(end - start);
            orthonormalize_into(candidates, &mut basis, end - start);
            for (off, v) in basis.into_iter().enumerate() {
                eig.vectors.set_column(start + off, &v);
            }
        }
    }
    for k in 0..n {
        let mut v = eig.vector(k);
        fix_phase(&mut v);
        eig.vectors.set_column(k, &v);
    }
    check_residual(h, &eig)?;
    Ok(eig)
}

/// Like [`eigendecompose`], but degenerate blocks are aligned with the
/// eigenvectors of a neighbouring sweep step: previous vectors are ranked by
/// their weight inside the block and projected in that order.
pub fn eigendecompose_tracked(h: &CMat, previous: &Eigen) -> Result<Eigen> {
    if previous.dim() != h.nrows() {
        return eigendecompose(h);
    }
    let mut eig = raw_eigen(h)?;
    for (start, end) in degenerate_blocks(&eig.values, degeneracy_tol(h)) {
        let m = end - start;
        if m < 2 {
            continue;
        }
        let block = eig.vectors.columns(start, m).into_owned();
        let mut ranked: Vec<(f64, usize)> =
            (0..previous.dim()).map(|k| ((block.adjoint() * previous.vectors.column(k)).norm(), k)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let candidates = ranked.into_iter().map(|(_, k)| {
            let p = previous.vectors.column(k);
            &block * (block.adjoint() * p)
        });
        let mut basis = Vec::with_capacity(m);
        orthonormalize_into(candidates, &mut basis, m);
        for (off, v) in basis.into_iter().enumerate() {
            eig.vectors.set_column(start + off, &v);
        }
    }
    for k in 0..eig.dim() {
        let mut v = eig.vector(k);
        let overlap = previous.vectors.column(k).dotc(&v);
        if overlap.norm() > 1e-12 {
            v *= overlap.conj() / overlap.norm();
        } else {
            fix_phase(&mut v);
        }
        eig.vectors.set_column(k, &v);
    }
    check_residual(h, &eig)?;
    Ok(eig)
}

/// A pure state vector or a density matrix.
#[derive(Debug, Clone)]
pub enum State {
    Pure(CVec),
    Density(CMat),
}

/// `U(t) = exp(−2πi H t)` from a precomputed eigendecomposition; `t` in µs, H in MHz.
#[derive(Debug, Clone)]
pub struct Propagator {
    eigen: Eigen,
}

impl Propagator {
    pub fn new(h: &CMat) -> Result<Self> {
        Ok(Propagator { eigen: eigendecompose(h)? })
    }

    pub fn from_eigen(eigen: Eigen) -> Self {
        Propagator { eigen }
    }

    pub fn eigen(&self) -> &Eigen {
        &self.eigen
    }

    fn phases(&self, t: f64) -> Vec<Complex64> {
        self.eigen.values.iter().map(|&l| Complex64::from_polar(1.0, -std::f64::consts::TAU * l * t)).collect()
    }

    pub fn unitary(&self, t: f64) -> CMat {
        let ph = self.phases(t);
        let mut scaled = self.eigen.vectors.clone();
        for (k, p) in ph.iter().enumerate() {
            for r in 0..scaled.nrows() {
                scaled[(r, k)] *= p;
            }
        }
        scaled * self.eigen.vectors.adjoint()
    }

    pub fn evolve_pure(&self, psi: &CVec, t: f64) -> CVec {
        let ph = self.phases(t);
        let mut coeffs = self.eigen.vectors.adjoint() * psi;
        for (k, p) in ph.iter().enumerate() {
            coeffs[k] *= p;
        }
        &self.eigen.vectors * coeffs
    }

    pub fn evolve(&self, state: &State, t: f64) -> Result<State> {
        if !(t >= 0.0) {
            return Err(Error::domain(format!("propagation time must be >= 0, got {t}")));
        }
        let n = self.eigen.dim();
        match state {
            State::Pure(psi) => {
                if psi.len() != n {
                    return Err(Error::domain("state dimension does not match Hamiltonian"));
                }
                Ok(State::Pure(self.evolve_pure(psi, t)))
            }
            State::Density(rho) => {
                if rho.nrows() != n || rho.ncols() != n {
                    return Err(Error::domain("density matrix dimension does not match Hamiltonian"));
                }
                let u = self.unitary(t);
                Ok(State::Density(&u * rho * u.adjoint()))
            }
        }
    }
}

/// Evolves `state` under `h` for time `t` (µs).
pub fn propagate(h: &CMat, t: f64, state: &State) -> Result<State> {
    Propagator::new(h)?.evolve(state, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::inf_norm;

    fn bare(d: f64, e: f64, field: Vec3) -> SpinSystem {
        SpinSystem::new(CentralSpinModel::new(d, e).unwrap(), vec![], BTreeMap::new(), field).unwrap()
    }

    #[test]
    fn spin_half_and_one_sz() {
        let (_, _, sz) = spin_operators(&SpinSpecies::carbon13());
        assert_eq!(sz[(0, 0)], c(0.5));
        assert_eq!(sz[(1, 1)], c(-0.5));
        let (_, _, sz) = spin_operators(&SpinSpecies::electron());
        assert_eq!(sz[(0, 0)], c(1.0));
        assert_eq!(sz[(1, 1)], c(0.0));
        assert_eq!(sz[(2, 2)], c(-1.0));
    }

    #[test]
    fn commutators_and_casimir() {
        for spin in [Spin::Half, Spin::One] {
            let (sx, sy, sz) = spin_matrices(spin);
            let comm = &sx * &sy - &sy * &sx;
            assert!(max_abs(&(comm - &sz * I)) < 1e-15);
            let comm = &sy * &sz - &sz * &sy;
            assert!(max_abs(&(comm - &sx * I)) < 1e-15);
            let comm = &sz * &sx - &sx * &sz;
            assert!(max_abs(&(comm - &sy * I)) < 1e-15);
            let s = spin.value();
            let n = spin.multiplicity();
            let cas = &sx * &sx + &sy * &sy + &sz * &sz;
            assert!(max_abs(&(cas - CMat::identity(n, n) * c(s * (s + 1.0)))) < 1e-15);
            for m in [&sx, &sy, &sz] {
                assert!(hermiticity_defect(m) == 0.0);
            }
        }
    }

    #[test]
    fn unsupported_spin_rejected() {
        assert!(Spin::from_value(1.5).is_err());
        assert!(SpinSpecies::new("x", Spin::Half, 0.0).is_err());
    }

    #[test]
    fn zfs_only_eigenvalues() {
        let d = 2870.0;
        let h = build_hamiltonian(&bare(d, 0.0, [0.0; 3])).unwrap();
        let eig = eigendecompose(&h).unwrap();
        assert!((eig.values[0] + 2.0 * d / 3.0).abs() < 1e-9);
        assert!((eig.values[1] - d / 3.0).abs() < 1e-9);
        assert!((eig.values[2] - d / 3.0).abs() < 1e-9);
    }

    #[test]
    fn transverse_zfs_opens_two_e_gap() {
        let h = build_hamiltonian(&bare(2870.0, 1.25, [0.0; 3])).unwrap();
        let eig = eigendecompose(&h).unwrap();
        assert!((eig.values[2] - eig.values[1] - 2.5).abs() < 1e-9);
    }

    #[test]
    fn axial_zeeman_closed_form() {
        let d = 2870.0;
        let bz = 12.5;
        let h = build_hamiltonian(&bare(d, 0.0, [0.0, 0.0, bz])).unwrap();
        let eig = eigendecompose(&h).unwrap();
        let g = constants::GAMMA_E;
        let want = [-2.0 * d / 3.0, d / 3.0 - g * bz, d / 3.0 + g * bz];
        for (v, w) in eig.values.iter().zip(want) {
            assert!((v - w).abs() < 1e-9 * d, "{v} vs {w}");
        }
    }

    #[test]
    fn eigendecompose_trivial_examples() {
        let m = CMat::from_diagonal(&CVec::from_vec(vec![c(1.0), c(2.0), c(3.0)]));
        let eig = eigendecompose(&m).unwrap();
        assert_eq!(eig.values, vec![1.0, 2.0, 3.0]);
        assert!(max_abs(&(eig.vectors.clone() - CMat::identity(3, 3))) < 1e-14);

        let e = 0.7;
        let m = CMat::from_row_slice(2, 2, &[ZERO, c(e), c(e), ZERO]);
        let eig = eigendecompose(&m).unwrap();
        assert!((eig.values[0] + e).abs() < 1e-14 && (eig.values[1] - e).abs() < 1e-14);
    }

    #[test]
    fn degenerate_block_is_canonical() {
        // Identity in a rotated basis must come back as the unit basis.
        let m = CMat::identity(3, 3) * c(4.0);
        let eig = eigendecompose(&m).unwrap();
        assert!(max_abs(&(eig.vectors - CMat::identity(3, 3))) < 1e-12);
    }

    #[test]
    fn rejects_non_hermitian() {
        let m = CMat::from_row_slice(2, 2, &[ZERO, c(1.0), c(2.0), ZERO]);
        assert!(eigendecompose(&m).is_err());
    }

    #[test]
    fn two_level_precession() {
        let f = 0.8;
        let h = CMat::from_row_slice(2, 2, &[c(f), ZERO, ZERO, c(-f)]);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let psi = CVec::from_vec(vec![c(r), c(r)]);
        let prop = Propagator::new(&h).unwrap();
        for &t in &[0.0, 0.1, 0.37, 1.3] {
            let out = prop.evolve_pure(&psi, t);
            let coh = out[0] * out[1].conj();
            let want = Complex64::from_polar(0.5, -std::f64::consts::TAU * 2.0 * f * t);
            assert!((coh - want).norm() < 1e-13);
        }
    }

    #[test]
    fn negative_time_rejected() {
        let h = CMat::identity(2, 2);
        let st = State::Pure(CVec::from_vec(vec![c(1.0), ZERO]));
        assert!(propagate(&h, -1.0, &st).is_err());
    }

    #[test]
    fn zero_time_identity_and_unitarity() {
        let h = build_hamiltonian(&bare(2870.0, 3.0, [1.0, 2.0, 3.0])).unwrap();
        let prop = Propagator::new(&h).unwrap();
        let u0 = prop.unitary(0.0);
        assert!(max_abs(&(u0 - CMat::identity(3, 3))) < 1e-12);
        let u = prop.unitary(0.731);
        assert!(inf_norm(&(u.adjoint() * &u - CMat::identity(3, 3))) < 1e-10);
        let rho = CMat::from_row_slice(3, 3, &[c(0.5), c(0.1), ZERO, c(0.1), c(0.3), ZERO, ZERO, ZERO, c(0.2)]);
        if let State::Density(out) = prop.evolve(&State::Density(rho), 2.0).unwrap() {
            assert!((out.trace() - c(1.0)).norm() < 1e-10);
        } else {
            unreachable!()
        }
    }

    #[test]
    fn pair_coupling_validation() {
        let central = CentralSpinModel::new(2870.0, 0.0).unwrap();
        let spin = NuclearSpin {
            species: SpinSpecies::carbon13(),
            hyperfine: HyperfineTensor::diagonal(0.0, 0.0, 0.1).unwrap(),
            position: [1.0, 0.0, 0.0],
        };
        let mut pc = BTreeMap::new();
        pc.insert((1, 0), [[0.0; 3]; 3]);
        assert!(SpinSystem::new(central.clone(), vec![spin.clone(), spin.clone()], pc, [0.0; 3]).is_err());
        let mut pc = BTreeMap::new();
        pc.insert((0, 1), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(SpinSystem::new(central, vec![spin.clone(), spin], pc, [0.0; 3]).is_err());
    }

    #[test]
    fn dimension_cap_enforced() {
        let central = CentralSpinModel::new(2870.0, 0.0).unwrap();
        let spin = NuclearSpin {
            species: SpinSpecies::carbon13(),
            hyperfine: HyperfineTensor::diagonal(0.0, 0.0, 0.1).unwrap(),
            position: [1.0, 0.0, 0.0],
        };
        let r = SpinSystem::with_cap(central, vec![spin; 4], BTreeMap::new(), [0.0; 3], 32);
        assert!(matches!(r, Err(Error::DimensionCap { dim: 48, cap: 32, .. })));
    }

    #[test]
    fn e_bounded_by_d() {
        assert!(CentralSpinModel::new(1.0, 2.0).is_err());
    }

    #[test]
    fn asymmetric_hyperfine_rejected() {
        assert!(HyperfineTensor::new([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(HyperfineTensor::new([[f64::NAN, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }
}
