// SPDX-License-Identifier: Apache-2.0

//! Generalized cluster correlation expansion (gCCE) of the central-spin
//! coherence, at orders 1 and 2 with a fused multi-spin core, plus an exact
//! full-Hilbert-space evaluation used as an oracle.
//!
//! Every cluster contains the core (electron plus the core nuclei) and up to
//! two further bath spins. The qubit is a pair of eigenstates of the core
//! Hamiltonian; each cluster evolves `(|a⟩ + |b⟩)/√2 ⊗ ρ_bath` and reports
//! the normalized `⟨a|ρ_core(t)|b⟩`. Cluster contributions are combined as
//! `L = L̃_core · Π_C L̃_C`, each `L̃_C` being the cluster curve divided by
//! the contributions of all of its sub-clusters.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bath::{dipolar_coupling, rng_for, BathSpin, RNG_ALGORITHM};
use crate::error::{Error, Result};
use crate::linalg::{c, norm3, sub3, CMat, CVec, Vec3, ZERO};
use crate::pulse::{PulseProtocol, QubitSelector, SequenceKind};
use crate::spin::{
    build_hamiltonian, eigendecompose, CentralSpinModel, NuclearSpin, SpinSystem, DEFAULT_DIMENSION_CAP,
};

/// Sub-cluster contributions below this magnitude saturate the time point.
pub const SATURATION_THRESHOLD: f64 = 1e-12;

/// Canonical reduction chunk for streamed cluster evaluation.
const CHUNK: usize = 256;

/// Switches for individual Hamiltonian terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianTerms {
    #[serde(default = "yes")]
    pub nuclear_zeeman: bool,
    #[serde(default = "yes")]
    pub nuclear_dipolar: bool,
    /// Keep only `A_zz S_z I_z` of every hyperfine tensor.
    #[serde(default)]
    pub secular_hyperfine_only: bool,
}

fn yes() -> bool {
    true
}

impl Default for HamiltonianTerms {
    fn default() -> Self {
        HamiltonianTerms { nuclear_zeeman: true, nuclear_dipolar: true, secular_hyperfine_only: false }
    }
}

/// Central spin, all nuclei and the field: everything needed to assemble
/// the Hamiltonian of any subset of nuclei.
#[derive(Debug, Clone)]
pub struct SpinEnvironment {
    pub central: CentralSpinModel,
    /// Nuclear spins; a spin's id is its index here.
    pub nuclei: Vec<BathSpin>,
    /// Gauss, central frame.
    pub field: Vec3,
    pub terms: HamiltonianTerms,
    pub dimension_cap: usize,
}

impl SpinEnvironment {
    pub fn new(central: CentralSpinModel, nuclei: Vec<BathSpin>, field: Vec3) -> Self {
        SpinEnvironment {
            central,
            nuclei,
            field,
            terms: HamiltonianTerms::default(),
            dimension_cap: DEFAULT_DIMENSION_CAP,
        }
    }

    pub fn with_terms(mut self, terms: HamiltonianTerms) -> Self {
        self.terms = terms;
        self
    }

    pub fn with_field(&self, field: Vec3) -> Self {
        SpinEnvironment { field, ..self.clone() }
    }

    /// Spin system of the central spin plus the nuclei `ids`, in that order.
    pub fn subsystem(&self, ids: &[usize]) -> Result<SpinSystem> {
        let mut spins = Vec::with_capacity(ids.len());
        for &id in ids {
            let n = self.nuclei.get(id).ok_or_else(|| {
                Error::config(format!("nuclear spin id {id} out of range ({} spins)", self.nuclei.len()))
            })?;
            let hyperfine = if self.terms.secular_hyperfine_only { n.hyperfine.secular_only() } else { n.hyperfine };
            spins.push(NuclearSpin { species: n.species.clone(), hyperfine, position: n.position });
        }
        let mut pairs = BTreeMap::new();
        if self.terms.nuclear_dipolar {
            for i in 0..spins.len() {
                for j in i + 1..spins.len() {
                    let t = dipolar_coupling(
                        &spins[i].position,
                        &spins[j].position,
                        spins[i].species.gyro,
                        spins[j].species.gyro,
                    )?;
                    pairs.insert((i, j), t);
                }
            }
        }
        let sys = SpinSystem::with_cap(self.central.clone(), spins, pairs, self.field, self.dimension_cap)?;
        Ok(sys.with_nuclear_zeeman(self.terms.nuclear_zeeman))
    }

    pub fn full_system(&self) -> Result<SpinSystem> {
        let ids: Vec<usize> = (0..self.nuclei.len()).collect();
        self.subsystem(&ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BathStatePolicy {
    ExactMixed,
    SampledProduct,
}

/// State of the core nuclei in the initial state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoreLines {
    /// Core nuclei prepared in the configuration of the selected line.
    #[default]
    Selected,
    /// Core nuclei maximally mixed; every hyperfine line contributes.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CceConfig {
    /// 1 or 2.
    pub order: u8,
    /// Nuclear spin ids fused with the electron into the zero-order subsystem.
    pub core_spins: Vec<usize>,
    /// Å; required for order 2.
    pub r_dip: Option<f64>,
    pub bath_state_policy: BathStatePolicy,
    pub n_samples: usize,
    /// Seed for sampled bath states.
    pub seed: u64,
    pub core_lines: CoreLines,
}

impl CceConfig {
    pub fn order1(core_spins: Vec<usize>) -> Self {
        CceConfig {
            order: 1,
            core_spins,
            r_dip: None,
            bath_state_policy: BathStatePolicy::ExactMixed,
            n_samples: 25,
            seed: 0,
            core_lines: CoreLines::Selected,
        }
    }

    pub fn order2(core_spins: Vec<usize>, r_dip: f64) -> Self {
        CceConfig { order: 2, r_dip: Some(r_dip), ..Self::order1(core_spins) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.order != 1 && self.order != 2 {
            return Err(Error::config(format!("CCE order must be 1 or 2, got {}", self.order)));
        }
        if self.order == 2 && !self.r_dip.is_some_and(|r| r > 0.0) {
            return Err(Error::config("order-2 CCE requires r_dip > 0"));
        }
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be at least 1"));
        }
        let mut seen = self.core_spins.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.core_spins.len() {
            return Err(Error::config("core_spins contains duplicates"));
        }
        Ok(())
    }
}

/// Core composition: ¹⁵N (if present) plus the strongest-|A_zz| ¹³C.
pub fn default_core(nuclei: &[BathSpin]) -> Vec<usize> {
    let mut core = Vec::new();
    if let Some(n) = nuclei.iter().position(|s| s.species.label == "15N") {
        core.push(n);
    }
    let strongest = nuclei
        .iter()
        .enumerate()
        .filter(|(_, s)| s.species.label == "13C")
        .max_by(|(ia, a), (ib, b)| a.azz().abs().total_cmp(&b.azz().abs()).then(ib.cmp(ia)));
    if let Some((id, _)) = strongest {
        core.push(id);
    }
    core
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpinCluster {
    /// 0 for the bare core, otherwise the number of non-core members.
    pub order_tag: u8,
    /// Sorted nuclear ids, core ids included.
    pub member_ids: Vec<usize>,
}

impl SpinCluster {
    /// Members that are not part of the core, in ascending order.
    pub fn bath_members(&self, core: &[usize]) -> Vec<usize> {
        self.member_ids.iter().copied().filter(|id| !core.contains(id)).collect()
    }
}

fn cluster_of(core: &[usize], extra: &[usize], order_tag: u8) -> SpinCluster {
    let mut member_ids: Vec<usize> = core.iter().chain(extra).copied().collect();
    member_ids.sort_unstable();
    SpinCluster { order_tag, member_ids }
}

/// Core cluster, one order-1 cluster per non-core spin and, at order 2, one
/// cluster per pair closer than `r_dip`, in canonical order.
pub fn enumerate_clusters(env: &SpinEnvironment, cfg: &CceConfig) -> Result<Vec<SpinCluster>> {
    cfg.validate()?;
    let core = &cfg.core_spins;
    if let Some(bad) = core.iter().find(|&&id| id >= env.nuclei.len()) {
        return Err(Error::config(format!("core spin id {bad} out of range")));
    }
    let dim_of = |ids: &[usize]| -> usize { 3 * ids.iter().map(|&i| env.nuclei[i].species.dim()).product::<usize>() };
    let check = |cl: &SpinCluster| -> Result<()> {
        let dim = dim_of(&cl.member_ids);
        if dim > env.dimension_cap {
            return Err(Error::DimensionCap {
                dim,
                cap: env.dimension_cap,
                context: format!("cluster {:?}", cl.member_ids),
            });
        }
        Ok(())
    };
    let bath: Vec<usize> = (0..env.nuclei.len()).filter(|i| !core.contains(i)).collect();
    let mut out = vec![cluster_of(core, &[], 0)];
    for &i in &bath {
        out.push(cluster_of(core, &[i], 1));
    }
    if cfg.order == 2 {
        let r_dip = cfg.r_dip.unwrap_or(0.0);
        for (k, &i) in bath.iter().enumerate() {
            for &j in &bath[k + 1..] {
                if norm3(&sub3(&env.nuclei[i].position, &env.nuclei[j].position)) < r_dip {
                    out.push(cluster_of(core, &[i, j], 2));
                }
            }
        }
    }
    for cl in &out {
        check(cl)?;
    }
    Ok(out)
}

/// The two core eigenstates forming the qubit.
#[derive(Debug, Clone)]
pub struct Qubit {
    pub a: CVec,
    pub b: CVec,
    pub index_a: usize,
    pub index_b: usize,
    pub energy_a: f64,
    pub energy_b: f64,
    /// Splitting of the E-coupled ±1 pair the qubit was taken from, MHz.
    pub branch_gap: f64,
}

impl Qubit {
    pub fn frequency(&self) -> f64 {
        self.energy_b - self.energy_a
    }
}

/// Labels of core eigenstates: electron manifold and dominant nuclear configuration.
#[derive(Debug, Clone)]
pub struct CoreLevels {
    pub values: Vec<f64>,
    pub vectors: CMat,
    /// For each nuclear configuration: the `m_s = 0` state and the two ±1 states (ascending energy).
    pub by_config: Vec<(usize, [usize; 2])>,
}

/// Diagonalizes the core Hamiltonian and groups its eigenstates by nuclear configuration.
pub fn core_levels(core: &SpinSystem) -> Result<CoreLevels> {
    let h = build_hamiltonian(core)?;
    let eig = eigendecompose(&h)?;
    let dim = eig.dim();
    let n_cfg = dim / 3;
    let ms0_weight = |k: usize| -> f64 { (0..n_cfg).map(|m| eig.vectors[(n_cfg + m, k)].norm_sqr()).sum() };
    let cfg_weight = |k: usize, m: usize| -> f64 { (0..3).map(|s| eig.vectors[(s * n_cfg + m, k)].norm_sqr()).sum() };

    let mut by_w0: Vec<(f64, usize)> = (0..dim).map(|k| (ms0_weight(k), k)).collect();
    by_w0.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let ms0: Vec<usize> = by_w0[..n_cfg].iter().map(|p| p.1).collect();
    let pm: Vec<usize> = by_w0[n_cfg..].iter().map(|p| p.1).collect();

    let assign = |states: &[usize], capacity: usize| -> Result<Vec<Vec<usize>>> {
        let mut cand: Vec<(f64, usize, usize)> = states
            .iter()
            .flat_map(|&k| (0..n_cfg).map(move |m| (k, m)))
            .map(|(k, m)| (cfg_weight(k, m), k, m))
            .collect();
        cand.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        let mut slots: Vec<Vec<usize>> = vec![Vec::new(); n_cfg];
        let mut taken = vec![false; dim];
        for (_, k, m) in cand {
            if !taken[k] && slots[m].len() < capacity {
                taken[k] = true;
                slots[m].push(k);
            }
        }
        if slots.iter().any(|s| s.len() != capacity) {
            return Err(Error::numerical("core eigenstates cannot be assigned to nuclear configurations"));
        }
        Ok(slots)
    };
    let zero_slots = assign(&ms0, 1)?;
    let pm_slots = assign(&pm, 2)?;
    let by_config = (0..n_cfg)
        .map(|m| {
            let mut pair = [pm_slots[m][0], pm_slots[m][1]];
            pair.sort_by(|&x, &y| eig.values[x].total_cmp(&eig.values[y]).then(x.cmp(&y)));
            (zero_slots[m][0], pair)
        })
        .collect();
    Ok(CoreLevels { values: eig.values.clone(), vectors: eig.vectors.clone(), by_config })
}

impl CoreLevels {
    /// Nuclear configuration whose ±1 pair is closest to its avoided crossing.
    pub fn nearest_crossing_config(&self) -> usize {
        let gap = |m: usize| {
            let (_, [lo, hi]) = self.by_config[m];
            self.values[hi] - self.values[lo]
        };
        let mut best = 0;
        for m in 1..self.by_config.len() {
            if gap(m) < gap(best) - 1e-12 * gap(best).abs().max(1.0) {
                best = m;
            }
        }
        best
    }

    pub fn pair_gap(&self, m: usize) -> f64 {
        let (_, [lo, hi]) = self.by_config[m];
        self.values[hi] - self.values[lo]
    }
}

fn make_line(levels: &CoreLevels, ia: usize, ib: usize, gap: f64) -> Result<Qubit> {
    let (ea, eb) = (levels.values[ia], levels.values[ib]);
    if ia == ib || (ea - eb).abs() < 1e-9 {
        return Err(Error::domain(format!(
            "qubit levels {ia} and {ib} are identical or degenerate ({ea} vs {eb} MHz)"
        )));
    }
    Ok(Qubit {
        a: levels.vectors.column(ia).into_owned(),
        b: levels.vectors.column(ib).into_owned(),
        index_a: ia,
        index_b: ib,
        energy_a: ea,
        energy_b: eb,
        branch_gap: gap,
    })
}

/// Picks the qubit levels among the core eigenstates.
///
/// Branch selectors drive the hyperfine line whose ±1 pair is nearest to
/// its avoided crossing, from that line's `m_s = 0` state to the lower or
/// upper member of the pair.
pub fn select_qubit(core: &SpinSystem, selector: QubitSelector) -> Result<Qubit> {
    Ok(select_lines(core, selector, CoreLines::Selected)?.swap_remove(0))
}

/// Qubit lines for the given policy, the line nearest its avoided crossing first.
///
/// With [`CoreLines::Mixed`] every nuclear configuration of the core
/// contributes its own `m_s = 0` to branch line with equal weight.
pub fn select_lines(core: &SpinSystem, selector: QubitSelector, policy: CoreLines) -> Result<Vec<Qubit>> {
    let levels = core_levels(core)?;
    let dim = levels.values.len();
    match selector {
        QubitSelector::Ms0ToLowerBranch | QubitSelector::Ms0ToUpperBranch => {
            let best = levels.nearest_crossing_config();
            let mut order = vec![best];
            if policy == CoreLines::Mixed {
                order.extend((0..levels.by_config.len()).filter(|&m| m != best));
            }
            order
                .into_iter()
                .map(|m| {
                    let (zero, [lo, hi]) = levels.by_config[m];
                    let b = if selector == QubitSelector::Ms0ToLowerBranch { lo } else { hi };
                    make_line(&levels, zero, b, levels.pair_gap(m))
                })
                .collect()
        }
        QubitSelector::Explicit { a, b } => {
            if a >= dim || b >= dim {
                return Err(Error::config(format!(
                    "explicit qubit levels ({a}, {b}) out of range for dimension {dim}"
                )));
            }
            Ok(vec![make_line(&levels, a, b, f64::NAN)?])
        }
    }
}

/// One product state of the bath: the basis index (0 = largest m) of every nuclear spin.
pub type ProductState = Vec<usize>;

/// `n` product states with every nucleus in a uniformly random z eigenstate.
pub fn sample_bath_states(bath: &[BathSpin], n: usize, seed: u64) -> Result<Vec<ProductState>> {
    if n == 0 {
        return Err(Error::config("need at least one bath state sample"));
    }
    let mut rng = rng_for(seed, 2);
    Ok((0..n).map(|_| bath.iter().map(|s| rng.gen_range(0..s.species.dim())).collect()).collect())
}

/// Every product basis state of the bath, in lexicographic order.
pub fn enumerate_bath_states(bath: &[BathSpin]) -> Vec<ProductState> {
    let dims: Vec<usize> = bath.iter().map(|s| s.species.dim()).collect();
    let total: usize = dims.iter().product();
    (0..total)
        .map(|mut idx| {
            let mut st = vec![0; dims.len()];
            for k in (0..dims.len()).rev() {
                st[k] = idx % dims[k];
                idx /= dims[k];
            }
            st
        })
        .collect()
}

/// Raw (unnormalized) `⟨a|ρ_core(t)|b⟩` of one cluster for every bath basis
/// state, plus the values at t = 0 obtained through the same route.
struct ClusterRun {
    per_basis: Vec<Vec<Complex64>>,
    norms: Vec<Complex64>,
}

impl ClusterRun {
    fn normalized(&self, beta: usize) -> Vec<Complex64> {
        let n = self.norms[beta];
        self.per_basis[beta].iter().map(|v| v / n).collect()
    }

    fn mixed(&self) -> Vec<Complex64> {
        let norm: Complex64 = self.norms.iter().sum();
        let len = self.per_basis[0].len();
        (0..len).map(|t| self.per_basis.iter().map(|p| p[t]).sum::<Complex64>() / norm).collect()
    }
}

fn run_cluster(sys: &SpinSystem, lines: &[Qubit], kind: SequenceKind, times: &[f64]) -> Result<ClusterRun> {
    let core_dim = lines[0].a.len();
    let dim = sys.dim();
    let db = dim / core_dim;
    let h = build_hamiltonian(sys)?;
    let eig = eigendecompose(&h)?;
    let v = &eig.vectors;
    let lam = &eig.values;

    // Rows of (⟨q|⊗⟨γ|)V for every bath basis state γ.
    let project = |q: &CVec| -> Vec<Complex64> {
        let mut p = vec![ZERO; db * dim];
        for g in 0..db {
            for k in 0..dim {
                let mut acc = ZERO;
                for i in 0..core_dim {
                    acc += q[i].conj() * v[(i * db + g, k)];
                }
                p[g * dim + k] = acc;
            }
        }
        p
    };

    let echo = if kind == SequenceKind::HahnEcho {
        // W = V† Π V with Π swapping |a⟩ and |b⟩ of every line on the core, identity on the bath.
        let mut x = CMat::identity(core_dim, core_dim);
        for q in lines {
            x -= &q.a * q.a.adjoint() + &q.b * q.b.adjoint();
            x += &q.a * q.b.adjoint() + &q.b * q.a.adjoint();
        }
        let pi = x.kronecker(&CMat::identity(db, db));
        Some(v.adjoint() * pi * v)
    } else {
        None
    };

    let element =
        |pa: &[Complex64], pb: &[Complex64], c0: &[Complex64], t: f64, out: &mut [Complex64], tmp: &mut [Complex64]| {
            match &echo {
                None => {
                    for k in 0..dim {
                        out[k] = Complex64::from_polar(1.0, -TAU * lam[k] * t) * c0[k];
                    }
                }
                Some(w) => {
                    for k in 0..dim {
                        tmp[k] = Complex64::from_polar(1.0, -TAU * lam[k] * t * 0.5) * c0[k];
                    }
                    for r in 0..dim {
                        let mut acc = ZERO;
                        for k in 0..dim {
                            acc += w[(r, k)] * tmp[k];
                        }
                        out[r] = Complex64::from_polar(1.0, -TAU * lam[r] * t * 0.5) * acc;
                    }
                }
            }
            let mut total = ZERO;
            for g in 0..db {
                let row_a = &pa[g * dim..(g + 1) * dim];
                let row_b = &pb[g * dim..(g + 1) * dim];
                let mut xa = ZERO;
                let mut xb = ZERO;
                for k in 0..dim {
                    xa += row_a[k] * out[k];
                    xb += row_b[k] * out[k];
                }
                total += xa * xb.conj();
            }
            total
        };

    let mut per_basis = vec![vec![ZERO; times.len()]; db];
    let mut norms = vec![ZERO; db];
    let mut out = vec![ZERO; dim];
    let mut tmp = vec![ZERO; dim];
    for q in lines {
        let pa = project(&q.a);
        let pb = project(&q.b);
        let psi: Vec<Complex64> = (0..core_dim).map(|i| (q.a[i] + q.b[i]) * FRAC_1_SQRT_2).collect();
        for beta in 0..db {
            let c0: Vec<Complex64> = (0..dim)
                .map(|k| (0..core_dim).fold(ZERO, |acc, i| acc + v[(i * db + beta, k)].conj() * psi[i]))
                .collect();
            norms[beta] += element(&pa, &pb, &c0, 0.0, &mut out, &mut tmp);
            for (slot, &t) in per_basis[beta].iter_mut().zip(times) {
                *slot += element(&pa, &pb, &c0, t, &mut out, &mut tmp);
            }
        }
    }
    Ok(ClusterRun { per_basis, norms })
}

/// Normalized coherence of one cluster under `protocol`.
///
/// `bath_state` selects a product basis state of the cluster's non-core
/// members (in ascending id order); `None` means the maximally mixed state.
pub fn cluster_coherence(
    env: &SpinEnvironment,
    core: &[usize],
    cluster: &SpinCluster,
    lines: &[Qubit],
    protocol: &PulseProtocol,
    times: &[f64],
    bath_state: Option<&[usize]>,
) -> Result<Vec<Complex64>> {
    check_times(times)?;
    let members = cluster.bath_members(core);
    let ids: Vec<usize> = core.iter().chain(&members).copied().collect();
    let sys = env.subsystem(&ids)?;
    let run = run_cluster(&sys, lines, protocol.kind, times)?;
    match bath_state {
        None => Ok(run.mixed()),
        Some(st) => {
            let beta = encode_state(&members.iter().map(|&i| env.nuclei[i].species.dim()).collect::<Vec<_>>(), st)?;
            Ok(run.normalized(beta))
        }
    }
}

fn encode_state(dims: &[usize], state: &[usize]) -> Result<usize> {
    if dims.len() != state.len() {
        return Err(Error::domain("bath state length does not match cluster"));
    }
    let mut idx = 0;
    for (d, s) in dims.iter().zip(state) {
        if s >= d {
            return Err(Error::domain("bath state index out of range"));
        }
        idx = idx * d + s;
    }
    Ok(idx)
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::domain("times must be finite and non-negative"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("times must be strictly ascending"));
    }
    Ok(())
}

/// Sequential gCCE reduction over clusters supplied in canonical order.
#[derive(Debug, Clone)]
pub struct GcceCombiner {
    core: Vec<Complex64>,
    singles: BTreeMap<usize, Vec<Complex64>>,
    total: Vec<Complex64>,
    saturated: Vec<bool>,
}

impl GcceCombiner {
    pub fn new(core_curve: &[Complex64]) -> Self {
        GcceCombiner {
            core: core_curve.to_vec(),
            singles: BTreeMap::new(),
            total: core_curve.to_vec(),
            saturated: vec![false; core_curve.len()],
        }
    }

    /// Adds one order-1 or order-2 cluster given by its non-core members.
    pub fn add(&mut self, members: &[usize], curve: &[Complex64]) -> Result<()> {
        if curve.len() != self.core.len() {
            return Err(Error::domain("cluster curves must share the time grid"));
        }
        match members {
            [i] => {
                let mut tilde = Vec::with_capacity(curve.len());
                for t in 0..curve.len() {
                    let den = self.core[t];
                    if den.norm() < SATURATION_THRESHOLD {
                        self.saturated[t] = true;
                        tilde.push(ZERO);
                    } else {
                        tilde.push(curve[t] / den);
                    }
                    self.total[t] *= tilde[t];
                }
                self.singles.insert(*i, tilde);
            }
            [i, j] => {
                let (si, sj) = match (self.singles.get(i), self.singles.get(j)) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::domain(format!("pair ({i}, {j}) added before its single-spin clusters"))),
                };
                for t in 0..curve.len() {
                    let parts = [self.core[t], si[t], sj[t]];
                    let den = parts[0] * parts[1] * parts[2];
                    if parts.iter().any(|p| p.norm() < SATURATION_THRESHOLD) || den.norm() < SATURATION_THRESHOLD {
                        self.saturated[t] = true;
                    } else {
                        self.total[t] *= curve[t] / den;
                    }
                }
            }
            _ => return Err(Error::domain("only order-1 and order-2 clusters can be combined")),
        }
        Ok(())
    }

    pub fn finish(self) -> (Vec<Complex64>, usize) {
        let n_sat = self.saturated.iter().filter(|s| **s).count();
        let values = self.total.iter().zip(&self.saturated).map(|(v, s)| if *s { ZERO } else { *v }).collect();
        (values, n_sat)
    }
}

/// Combines per-cluster curves. Input order does not matter; clusters are
/// reduced in canonical (order, members) order. Returns the values and the
/// number of saturated time points.
pub fn combine_gcce(
    core_curve: &[Complex64],
    clusters: &[(Vec<usize>, Vec<Complex64>)],
) -> Result<(Vec<Complex64>, usize)> {
    let mut sorted: Vec<&(Vec<usize>, Vec<Complex64>)> = clusters.iter().collect();
    sorted.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(&b.0)));
    let mut comb = GcceCombiner::new(core_curve);
    for (members, curve) in sorted {
        comb.add(members, curve)?;
    }
    Ok(comb.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub protocol: String,
    pub rng: String,
    /// Number of order-0, order-1 and order-2 clusters (all zero for exact runs).
    pub cluster_counts: [usize; 3],
    pub saturated_points: usize,
    pub qubit_frequency_mhz: f64,
    pub branch_gap_mhz: f64,
}

/// Sampled complex coherence L(t).
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceCurve {
    /// µs, ascending.
    pub times: Vec<f64>,
    pub values: Vec<Complex64>,
    pub metadata: CurveMetadata,
}

impl CoherenceCurve {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }
}

fn config_hash(env: &SpinEnvironment, cfg: &CceConfig, protocol: &PulseProtocol) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(cfg).unwrap_or_default());
    hasher.update(serde_json::to_vec(protocol).unwrap_or_default());
    hasher.update(serde_json::to_vec(&env.central).unwrap_or_default());
    hasher.update(serde_json::to_vec(&env.terms).unwrap_or_default());
    for v in env.field {
        hasher.update(v.to_le_bytes());
    }
    for n in &env.nuclei {
        hasher.update(n.species.label.as_bytes());
        for v in n.position.iter().chain(n.hyperfine.a.iter().flatten()) {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn protocol_tag(protocol: &PulseProtocol, method: &str) -> String {
    let kind = match protocol.kind {
        SequenceKind::Ramsey => "ramsey",
        SequenceKind::HahnEcho => "hahn_echo",
    };
    format!("{kind}/{method}")
}

/// Coherence of the whole environment via gCCE at `cfg.order`.
pub fn gcce_coherence(
    env: &SpinEnvironment,
    cfg: &CceConfig,
    protocol: &PulseProtocol,
    times: &[f64],
) -> Result<CoherenceCurve> {
    Ok(gcce_coherence_with_samples(env, cfg, protocol, times)?.0)
}

/// Like [`gcce_coherence`], also returning the curve of every sampled bath
/// state (empty for the mixed policy).
pub fn gcce_coherence_with_samples(
    env: &SpinEnvironment,
    cfg: &CceConfig,
    protocol: &PulseProtocol,
    times: &[f64],
) -> Result<(CoherenceCurve, Vec<Vec<Complex64>>)> {
    check_times(times)?;
    let clusters = enumerate_clusters(env, cfg)?;
    let core = &cfg.core_spins;
    let lines = select_lines(&env.subsystem(core)?, protocol.qubit_selector, cfg.core_lines)?;
    let qubit = &lines[0];
    let mut counts = [0usize; 3];
    for cl in &clusters {
        counts[cl.order_tag as usize] += 1;
    }

    let eval = |cl: &SpinCluster| -> Result<ClusterRun> {
        let members = cl.bath_members(core);
        let ids: Vec<usize> = core.iter().chain(&members).copied().collect();
        run_cluster(&env.subsystem(&ids)?, &lines, protocol.kind, times)
    };
    let core_run = eval(&clusters[0])?;
    let rest = &clusters[1..];

    let samples = match cfg.bath_state_policy {
        BathStatePolicy::ExactMixed => None,
        BathStatePolicy::SampledProduct => Some(sample_bath_states(&env.nuclei, cfg.n_samples, cfg.seed)?),
    };
    let mut combiners: Vec<GcceCombiner> = match &samples {
        None => vec![GcceCombiner::new(&core_run.mixed())],
        Some(s) => s.iter().map(|_| GcceCombiner::new(&core_run.normalized(0))).collect(),
    };

    for chunk in rest.chunks(CHUNK) {
        let runs: Vec<Result<ClusterRun>> = chunk.par_iter().map(eval).collect();
        for (cl, run) in chunk.iter().zip(runs) {
            let run = run?;
            let members = cl.bath_members(core);
            match &samples {
                None => combiners[0].add(&members, &run.mixed())?,
                Some(states) => {
                    let dims: Vec<usize> = members.iter().map(|&i| env.nuclei[i].species.dim()).collect();
                    for (comb, st) in combiners.iter_mut().zip(states) {
                        let local: Vec<usize> = members.iter().map(|&i| st[i]).collect();
                        comb.add(&members, &run.normalized(encode_state(&dims, &local)?))?;
                    }
                }
            }
        }
    }

    let n = combiners.len() as f64;
    let mut values = vec![ZERO; times.len()];
    let mut saturated = 0;
    let mut per_sample = Vec::new();
    for comb in combiners {
        let (v, s) = comb.finish();
        saturated += s;
        for (acc, x) in values.iter_mut().zip(&v) {
            *acc += x;
        }
        if samples.is_some() {
            per_sample.push(v);
        }
    }
    if n > 1.0 {
        values.iter_mut().for_each(|v| *v /= c(n));
    }
    let method = format!("gcce{}", cfg.order);
    let curve = CoherenceCurve {
        times: times.to_vec(),
        values,
        metadata: CurveMetadata {
            config_hash: config_hash(env, cfg, protocol),
            seed: cfg.seed,
            protocol: protocol_tag(protocol, &method),
            rng: RNG_ALGORITHM.to_string(),
            cluster_counts: counts,
            saturated_points: saturated,
            qubit_frequency_mhz: qubit.frequency(),
            branch_gap_mhz: qubit.branch_gap,
        },
    };
    Ok((curve, per_sample))
}

/// Exact coherence of the full system with a maximally mixed bath (or the
/// average over the given product states). The qubit lines are defined on
/// `cfg.core_spins` exactly as in [`gcce_coherence`]; the order is ignored.
pub fn exact_coherence_with_states(
    env: &SpinEnvironment,
    cfg: &CceConfig,
    protocol: &PulseProtocol,
    times: &[f64],
    states: Option<&[ProductState]>,
) -> Result<CoherenceCurve> {
    check_times(times)?;
    let core = &cfg.core_spins;
    let members: Vec<usize> = (0..env.nuclei.len()).filter(|i| !core.contains(i)).collect();
    let ids: Vec<usize> = core.iter().chain(&members).copied().collect();
    let sys = env.subsystem(&ids)?;
    let lines = select_lines(&env.subsystem(core)?, protocol.qubit_selector, cfg.core_lines)?;
    let qubit = &lines[0];
    let run = run_cluster(&sys, &lines, protocol.kind, times)?;
    let values = match states {
        None => run.mixed(),
        Some(states) => {
            if states.is_empty() {
                return Err(Error::config("need at least one bath state"));
            }
            let dims: Vec<usize> = members.iter().map(|&i| env.nuclei[i].species.dim()).collect();
            let mut acc = vec![ZERO; times.len()];
            for st in states {
                let local: Vec<usize> = members.iter().map(|&i| st[i]).collect();
                for (a, v) in acc.iter_mut().zip(run.normalized(encode_state(&dims, &local)?)) {
                    *a += v;
                }
            }
            acc.iter().map(|v| v / c(states.len() as f64)).collect()
        }
    };
    Ok(CoherenceCurve {
        times: times.to_vec(),
        values,
        metadata: CurveMetadata {
            config_hash: config_hash(env, cfg, protocol),
            seed: 0,
            protocol: protocol_tag(protocol, "exact"),
            rng: RNG_ALGORITHM.to_string(),
            cluster_counts: [0; 3],
            saturated_points: 0,
            qubit_frequency_mhz: qubit.frequency(),
            branch_gap_mhz: qubit.branch_gap,
        },
    })
}

pub fn exact_coherence(
    env: &SpinEnvironment,
    cfg: &CceConfig,
    protocol: &PulseProtocol,
    times: &[f64],
) -> Result<CoherenceCurve> {
    exact_coherence_with_states(env, cfg, protocol, times, None)
}

/// Largest pointwise |ΔL| between two curves on the same grid.
pub fn max_abs_deviation(a: &CoherenceCurve, b: &CoherenceCurve) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// Largest pointwise difference of |L|.
pub fn max_magnitude_deviation(a: &CoherenceCurve, b: &CoherenceCurve) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x.norm() - y.norm()).abs()).fold(0.0, f64::max)
}

/// One pinned instance of the small-bath validation suite.
#[derive(Debug, Clone)]
pub struct ValidationInstance {
    pub seed: u64,
    pub env: SpinEnvironment,
    pub r_dip: f64,
    pub times: Vec<f64>,
}

pub const VALIDATION_SEEDS: [u64; 3] = [11, 23, 47];

/// Three seeds times {2, 3} ¹³C spins on lattice sites 4–7 Å from the
/// vacancy, E = 1.25 MHz, 20 G at 61.3° from the axis. Every pair lies
/// inside `r_dip`.
pub fn validation_suite() -> Result<Vec<ValidationInstance>> {
    use rand::seq::SliceRandom;
    let carbon = crate::spin::SpinSpecies::carbon13();
    let sites: Vec<Vec3> = crate::bath::diamond_sites(crate::constants::DIAMOND_LATTICE_CONSTANT, 7.0)
        .iter()
        .map(crate::bath::to_nv_frame)
        .filter(|p| norm3(p) >= 4.0)
        .collect();
    let theta = 61.3f64.to_radians();
    let field = [20.0 * theta.sin(), 0.0, 20.0 * theta.cos()];
    let times: Vec<f64> = (0..201).map(|k| k as f64 * 0.1).collect();
    let mut out = Vec::new();
    for &seed in &VALIDATION_SEEDS {
        for n in [2usize, 3] {
            let mut rng = rng_for(seed, 3);
            let mut pool = sites.clone();
            pool.shuffle(&mut rng);
            let nuclei = pool[..n]
                .iter()
                .map(|p| {
                    Ok(BathSpin {
                        species: carbon.clone(),
                        position: *p,
                        hyperfine: crate::bath::point_dipole_hyperfine(p, crate::constants::GAMMA_E, carbon.gyro)?,
                        provenance: crate::bath::Provenance::PointDipole,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let central = CentralSpinModel::new(2870.0, 1.25)?;
            out.push(ValidationInstance {
                seed,
                env: SpinEnvironment::new(central, nuclei, field),
                r_dip: 15.0,
                times: times.clone(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{point_dipole_hyperfine, Provenance};
    use crate::constants::GAMMA_E;
    use crate::linalg::ONE;
    use crate::spin::{HyperfineTensor, SpinSpecies};
    use proptest::prelude::*;

    fn carbon_at(p: Vec3) -> BathSpin {
        let species = SpinSpecies::carbon13();
        let hyperfine = point_dipole_hyperfine(&p, GAMMA_E, species.gyro).unwrap();
        BathSpin { species, position: p, hyperfine, provenance: Provenance::PointDipole }
    }

    fn secular_carbon(azz: f64, p: Vec3) -> BathSpin {
        BathSpin {
            species: SpinSpecies::carbon13(),
            position: p,
            hyperfine: HyperfineTensor::diagonal(0.0, 0.0, azz).unwrap(),
            provenance: Provenance::Explicit,
        }
    }

    fn grid(window: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| window * k as f64 / (n - 1) as f64).collect()
    }

    fn frozen_terms() -> HamiltonianTerms {
        HamiltonianTerms { nuclear_zeeman: false, nuclear_dipolar: false, secular_hyperfine_only: true }
    }

    // Brute force: explicit Kronecker products, Taylor-series propagator and
    // an explicit partial trace.
    mod brute {
        use super::*;

        fn kron_all(ops: &[CMat]) -> CMat {
            ops.iter().skip(1).fold(ops[0].clone(), |acc, m| acc.kronecker(m))
        }

        fn spin_ops(dim: usize) -> [CMat; 3] {
            if dim == 2 {
                [
                    CMat::from_row_slice(2, 2, &[ZERO, c(0.5), c(0.5), ZERO]),
                    CMat::from_row_slice(2, 2, &[ZERO, Complex64::new(0.0, -0.5), Complex64::new(0.0, 0.5), ZERO]),
                    CMat::from_row_slice(2, 2, &[c(0.5), ZERO, ZERO, c(-0.5)]),
                ]
            } else {
                let r = FRAC_1_SQRT_2;
                let i = Complex64::new(0.0, r);
                [
                    CMat::from_row_slice(3, 3, &[ZERO, c(r), ZERO, c(r), ZERO, c(r), ZERO, c(r), ZERO]),
                    CMat::from_row_slice(3, 3, &[ZERO, -i, ZERO, i, ZERO, -i, ZERO, i, ZERO]),
                    CMat::from_diagonal(&CVec::from_vec(vec![c(1.0), ZERO, c(-1.0)])),
                ]
            }
        }

        fn embed(dims: &[usize], site: usize, op: &CMat) -> CMat {
            let ops: Vec<CMat> = dims
                .iter()
                .enumerate()
                .map(|(k, &d)| if k == site { op.clone() } else { CMat::identity(d, d) })
                .collect();
            kron_all(&ops)
        }

        pub fn hamiltonian(env: &SpinEnvironment, ids: &[usize]) -> CMat {
            let mut dims = vec![3];
            dims.extend(ids.iter().map(|&i| env.nuclei[i].species.dim()));
            let n: usize = dims.iter().product();
            let s = spin_ops(3);
            let mut h = CMat::zeros(n, n);
            let sz2 = &s[2] * &s[2];
            let zfs = (sz2 - CMat::identity(3, 3) * c(2.0 / 3.0)) * c(env.central.d)
                + (&s[0] * &s[0] - &s[1] * &s[1]) * c(env.central.e);
            h += embed(&dims, 0, &zfs);
            for a in 0..3 {
                h += embed(&dims, 0, &s[a]) * c(GAMMA_E * env.field[a]);
            }
            let nuc: Vec<[CMat; 3]> = ids.iter().map(|&i| spin_ops(env.nuclei[i].species.dim())).collect();
            for (k, &id) in ids.iter().enumerate() {
                let spin = &env.nuclei[id];
                let tensor =
                    if env.terms.secular_hyperfine_only { spin.hyperfine.secular_only() } else { spin.hyperfine };
                for a in 0..3 {
                    for b in 0..3 {
                        h += embed(&dims, 0, &s[a]) * embed(&dims, k + 1, &nuc[k][b]) * c(tensor.a[a][b]);
                    }
                    if env.terms.nuclear_zeeman {
                        h -= embed(&dims, k + 1, &nuc[k][a]) * c(spin.species.gyro * env.field[a]);
                    }
                }
            }
            if env.terms.nuclear_dipolar {
                for k in 0..ids.len() {
                    for l in k + 1..ids.len() {
                        let (p, q) = (&env.nuclei[ids[k]], &env.nuclei[ids[l]]);
                        let j = dipolar_coupling(&p.position, &q.position, p.species.gyro, q.species.gyro).unwrap();
                        for a in 0..3 {
                            for b in 0..3 {
                                h += embed(&dims, k + 1, &nuc[k][a]) * embed(&dims, l + 1, &nuc[l][b]) * c(j[a][b]);
                            }
                        }
                    }
                }
            }
            h
        }

        pub fn expm_step(h: &CMat, t: f64) -> CMat {
            let n = h.nrows();
            let a = h * Complex64::new(0.0, -TAU * t);
            let norm = a.iter().map(|v| v.norm()).fold(0.0, f64::max) * n as f64;
            let squarings = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
            let a = a / c(2f64.powi(squarings));
            let mut term = CMat::identity(n, n);
            let mut sum = term.clone();
            for k in 1..30 {
                term = &term * &a / c(k as f64);
                sum += &term;
            }
            for _ in 0..squarings {
                sum = &sum * &sum;
            }
            sum
        }

        /// Mixed-bath coherence of the core qubit line under Ramsey or echo.
        pub fn coherence(env: &SpinEnvironment, q: &Qubit, kind: SequenceKind, times: &[f64]) -> Vec<Complex64> {
            let ids: Vec<usize> = (0..env.nuclei.len()).collect();
            let h = hamiltonian(env, &ids);
            let n = h.nrows();
            let db = n / 3;
            let psi = (&q.a + &q.b) * c(FRAC_1_SQRT_2);
            let rho0 = (&psi * psi.adjoint()).kronecker(&(CMat::identity(db, db) / c(db as f64)));
            let mut swap = CMat::identity(3, 3) - &q.a * q.a.adjoint() - &q.b * q.b.adjoint();
            swap += &q.a * q.b.adjoint() + &q.b * q.a.adjoint();
            let swap = swap.kronecker(&CMat::identity(db, db));
            let element = |t: f64| {
                let u = match kind {
                    SequenceKind::Ramsey => expm_step(&h, t),
                    SequenceKind::HahnEcho => {
                        let half = expm_step(&h, t / 2.0);
                        &half * &swap * &half
                    }
                };
                let rho = &u * &rho0 * u.adjoint();
                let mut core = CMat::zeros(3, 3);
                for i in 0..3 {
                    for j in 0..3 {
                        for g in 0..db {
                            core[(i, j)] += rho[(i * db + g, j * db + g)];
                        }
                    }
                }
                (q.a.adjoint() * core * &q.b)[(0, 0)]
            };
            let norm = element(0.0);
            times.iter().map(|&t| element(t) / norm).collect()
        }
    }

    #[test]
    fn no_bath_rotates_at_qubit_frequency() {
        let central = CentralSpinModel::new(2870.0, 0.0).unwrap();
        let env = SpinEnvironment::new(central, vec![], [0.0, 0.0, 10.0]);
        let times = grid(1.0, 51);
        let curve = gcce_coherence(
            &env,
            &CceConfig::order1(vec![]),
            &PulseProtocol::ramsey(QubitSelector::Ms0ToLowerBranch),
            &times,
        )
        .unwrap();
        // ms = 0 → ms = −1 at D − γB.
        let f = 2870.0 - GAMMA_E * 10.0;
        for (t, v) in times.iter().zip(&curve.values) {
            assert!((v.norm() - 1.0).abs() < 1e-12);
            assert!((v - Complex64::from_polar(1.0, TAU * f * t)).norm() < 1e-7, "{t} {v}");
        }
        assert_eq!(curve.values[0], ONE);
        assert_eq!(curve.metadata.cluster_counts, [1, 0, 0]);
    }

    #[test]
    fn secular_core_nucleus_beats_at_azz() {
        let azz = 0.8;
        let central = CentralSpinModel::new(2870.0, 0.0).unwrap();
        let env = SpinEnvironment::new(central, vec![secular_carbon(azz, [0.0, 0.0, 4.0])], [0.0, 0.0, 5.0])
            .with_terms(frozen_terms());
        let times = grid(5.0, 101);
        let protocol = PulseProtocol::ramsey(QubitSelector::Ms0ToLowerBranch);
        let mixed_core = CceConfig { core_lines: CoreLines::Mixed, ..CceConfig::order1(vec![0]) };
        let as_bath = CceConfig::order1(vec![]);
        for cfg in [mixed_core, as_bath] {
            let curve = gcce_coherence(&env, &cfg, &protocol, &times).unwrap();
            for (t, v) in times.iter().zip(&curve.values) {
                let expect = (std::f64::consts::PI * azz * t).cos().abs();
                assert!((v.norm() - expect).abs() < 1e-9, "{t}: {} vs {expect}", v.norm());
            }
        }
        // The selected line alone does not dephase.
        let polarized = gcce_coherence(&env, &CceConfig::order1(vec![0]), &protocol, &times).unwrap();
        assert!(polarized.values.iter().all(|v| (v.norm() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn brute_force_oracle_agrees_on_two_spins() {
        let central = CentralSpinModel::new(2870.0, 1.25).unwrap();
        let nuclei = vec![carbon_at([1.2, -0.4, 3.1]), carbon_at([-2.0, 1.5, 2.2])];
        let theta = 61.3f64.to_radians();
        let env = SpinEnvironment::new(central, nuclei, [3.0 * theta.sin(), 0.0, 3.0 * theta.cos()]);
        let times = grid(4.0, 41);
        let cfg = CceConfig::order2(vec![], 10.0);
        for kind in [SequenceKind::Ramsey, SequenceKind::HahnEcho] {
            let protocol = PulseProtocol { kind, qubit_selector: QubitSelector::Ms0ToLowerBranch };
            let q = select_qubit(&env.subsystem(&[]).unwrap(), protocol.qubit_selector).unwrap();
            let oracle = brute::coherence(&env, &q, kind, &times);
            let exact = exact_coherence(&env, &cfg, &protocol, &times).unwrap();
            let g2 = gcce_coherence(&env, &cfg, &protocol, &times).unwrap();
            for k in 0..times.len() {
                assert!(
                    (exact.values[k] - oracle[k]).norm() < 1e-8,
                    "{kind:?} t={} {} vs {}",
                    times[k],
                    exact.values[k],
                    oracle[k]
                );
                // Two bath spins: the order-2 expansion telescopes to the exact result.
                assert!((g2.values[k] - exact.values[k]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn frozen_bath_is_refocused_by_echo() {
        let central = CentralSpinModel::new(2870.0, 0.0).unwrap();
        let nuclei = vec![
            secular_carbon(0.31, [1.0, 0.0, 3.0]),
            secular_carbon(-0.22, [0.0, 2.0, 3.0]),
            secular_carbon(0.13, [2.0, 2.0, -1.0]),
        ];
        let env = SpinEnvironment::new(central, nuclei, [0.0, 0.0, 20.0]).with_terms(frozen_terms());
        let cfg = CceConfig::order2(vec![], 10.0);
        let times = grid(10.0, 201);
        let echo =
            gcce_coherence(&env, &cfg, &PulseProtocol::hahn_echo(QubitSelector::Ms0ToLowerBranch), &times).unwrap();
        assert!(echo.values.iter().all(|v| (v.norm() - 1.0).abs() < 1e-9));
        let ramsey =
            gcce_coherence(&env, &cfg, &PulseProtocol::ramsey(QubitSelector::Ms0ToLowerBranch), &times).unwrap();
        assert!(ramsey.values.iter().any(|v| v.norm() < 0.5));
    }

    #[test]
    fn cluster_enumeration_counts() {
        let central = CentralSpinModel::new(2870.0, 0.0).unwrap();
        let nuclei: Vec<BathSpin> = (0..5).map(|k| carbon_at([3.0 + k as f64, 1.0, 2.0])).collect();
        let env = SpinEnvironment::new(central, nuclei, [0.0; 3]);
        let c1 = enumerate_clusters(&env, &CceConfig::order1(vec![])).unwrap();
        assert_eq!(c1.len(), 6);
        assert_eq!(c1[0].order_tag, 0);
        let tiny = enumerate_clusters(&env, &CceConfig::order2(vec![], 1e-9)).unwrap();
        assert_eq!(tiny.iter().filter(|c| c.order_tag == 2).count(), 0);
        // Spacing 1 Å: only neighbours lie inside 1.5 Å.
        let near = enumerate_clusters(&env, &CceConfig::order2(vec![], 1.5)).unwrap();
        assert_eq!(near.iter().filter(|c| c.order_tag == 2).count(), 4);
        let with_core = enumerate_clusters(&env, &CceConfig::order2(vec![2], 100.0)).unwrap();
        assert_eq!(with_core.len(), 1 + 4 + 6);
        assert!(with_core.iter().all(|c| c.member_ids.contains(&2)));
        let mut dedup = with_core.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), with_core.len());
    }

    #[test]
    fn dimension_cap_names_cluster() {
        let central = CentralSpinModel::new(2870.0, 0.0).unwrap();
        let nuclei: Vec<BathSpin> = (0..4).map(|k| carbon_at([3.0 + k as f64, 1.0, 2.0])).collect();
        let mut env = SpinEnvironment::new(central, nuclei, [0.0; 3]);
        env.dimension_cap = 20;
        let err = enumerate_clusters(&env, &CceConfig::order2(vec![0], 100.0)).unwrap_err();
        assert!(matches!(err, Error::DimensionCap { dim: 24, .. }), "{err}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = CceConfig::order1(vec![]);
        cfg.order = 3;
        assert!(cfg.validate().is_err());
        let cfg = CceConfig { r_dip: None, ..CceConfig::order2(vec![], 1.0) };
        assert!(cfg.validate().is_err());
        let cfg = CceConfig { n_samples: 0, ..CceConfig::order1(vec![]) };
        assert!(cfg.validate().is_err());
        assert!(CceConfig::order1(vec![1, 1]).validate().is_err());
    }

    #[test]
    fn degenerate_or_identical_levels_rejected() {
        let central = CentralSpinModel::new(2870.0, 0.0).unwrap();
        let core = SpinEnvironment::new(central, vec![], [0.0; 3]).subsystem(&[]).unwrap();
        assert!(select_qubit(&core, QubitSelector::Explicit { a: 1, b: 1 }).is_err());
        // Zero field, E = 0: the ±1 pair is degenerate.
        assert!(select_qubit(&core, QubitSelector::Explicit { a: 1, b: 2 }).is_err());
        assert!(select_qubit(&core, QubitSelector::Explicit { a: 0, b: 5 }).is_err());
        assert!(select_qubit(&core, QubitSelector::Explicit { a: 0, b: 1 }).is_ok());
    }

    #[test]
    fn branch_selection_on_transverse_zfs() {
        let central = CentralSpinModel::new(2870.0, 2.0).unwrap();
        let core = SpinEnvironment::new(central, vec![], [0.0; 3]).subsystem(&[]).unwrap();
        let lo = select_qubit(&core, QubitSelector::Ms0ToLowerBranch).unwrap();
        let hi = select_qubit(&core, QubitSelector::Ms0ToUpperBranch).unwrap();
        assert!((lo.frequency() - (2870.0 - 2.0)).abs() < 1e-9);
        assert!((hi.frequency() - (2870.0 + 2.0)).abs() < 1e-9);
        assert!((lo.branch_gap - 4.0).abs() < 1e-9);
    }

    #[test]
    fn combination_base_cases() {
        let core = vec![ONE; 4];
        let a: Vec<Complex64> = (0..4).map(|k| Complex64::from_polar(1.0 - 0.1 * k as f64, 0.3 * k as f64)).collect();
        let b: Vec<Complex64> = (0..4).map(|k| Complex64::from_polar(1.0 - 0.05 * k as f64, -0.2 * k as f64)).collect();
        let (single, _) = combine_gcce(&core, &[(vec![3], a.clone())]).unwrap();
        assert_eq!(single, a);
        let (pair, _) = combine_gcce(&core, &[(vec![3], a.clone()), (vec![5], b.clone())]).unwrap();
        for k in 0..4 {
            assert!((pair[k] - a[k] * b[k]).norm() < 1e-15);
        }
        // A pair curve equal to the product of its singles contributes nothing.
        let prod: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        let (with_pair, _) =
            combine_gcce(&core, &[(vec![3, 5], prod), (vec![5], b.clone()), (vec![3], a.clone())]).unwrap();
        for k in 0..4 {
            assert!((with_pair[k] - pair[k]).norm() < 1e-15);
        }
        assert!(combine_gcce(&core, &[(vec![3, 5], a.clone())]).is_err());
    }

    #[test]
    fn saturated_points_are_zeroed() {
        let core = vec![ONE, c(1e-13), ONE];
        let curve = vec![ONE, c(0.5), c(0.5)];
        let (v, n) = combine_gcce(&core, &[(vec![0], curve)]).unwrap();
        assert_eq!(n, 1);
        assert_eq!(v[1], ZERO);
        assert!((v[2] - c(0.5)).norm() < 1e-15);
    }

    #[test]
    fn decoupled_pair_correction_is_unity() {
        let central = CentralSpinModel::new(2870.0, 0.0).unwrap();
        let nuclei = vec![secular_carbon(0.4, [1.0, 0.0, 3.0]), secular_carbon(0.25, [1.5, 0.0, 3.0])];
        let mut terms = frozen_terms();
        terms.nuclear_zeeman = true;
        let env = SpinEnvironment::new(central, nuclei, [0.0, 0.0, 30.0]).with_terms(terms);
        let protocol = PulseProtocol::ramsey(QubitSelector::Ms0ToLowerBranch);
        let times = grid(3.0, 31);
        let core: Vec<usize> = vec![];
        let q = select_lines(&env.subsystem(&[]).unwrap(), protocol.qubit_selector, CoreLines::Selected).unwrap();
        let curve = |ids: &[usize]| {
            let cl = cluster_of(&core, ids, ids.len() as u8);
            cluster_coherence(&env, &core, &cl, &q, &protocol, &times, None).unwrap()
        };
        let (l0, l1, l2, l12) = (curve(&[]), curve(&[0]), curve(&[1]), curve(&[0, 1]));
        for k in 0..times.len() {
            if (l1[k] * l2[k]).norm() < 1e-6 {
                continue;
            }
            let corr = l12[k] * l0[k] / (l1[k] * l2[k]);
            assert!((corr - ONE).norm() < 1e-9, "{k} {corr} {} {} {} {}", l0[k], l1[k], l2[k], l12[k]);
        }
    }

    #[test]
    fn validation_suite_orders_improve_on_oracle() {
        for inst in validation_suite().unwrap() {
            let protocol = PulseProtocol::ramsey(QubitSelector::Ms0ToLowerBranch);
            let exact = exact_coherence(&inst.env, &CceConfig::order1(vec![]), &protocol, &inst.times).unwrap();
            let g1 = gcce_coherence(&inst.env, &CceConfig::order1(vec![]), &protocol, &inst.times).unwrap();
            let g2 = gcce_coherence(&inst.env, &CceConfig::order2(vec![], inst.r_dip), &protocol, &inst.times).unwrap();
            let (d1, d2) = (max_abs_deviation(&g1, &exact), max_abs_deviation(&g2, &exact));
            assert!(d2 <= d1 + 1e-9, "seed {} n {}: {d2} > {d1}", inst.seed, inst.env.nuclei.len());
            assert!(d2 < 5e-3, "seed {} n {}: {d2}", inst.seed, inst.env.nuclei.len());
        }
    }

    #[test]
    fn stratified_states_reproduce_mixed() {
        let inst = validation_suite().unwrap().swap_remove(1);
        let protocol = PulseProtocol::ramsey(QubitSelector::Ms0ToLowerBranch);
        let cfg = CceConfig::order1(vec![]);
        let mixed = exact_coherence(&inst.env, &cfg, &protocol, &inst.times).unwrap();
        let all = enumerate_bath_states(&inst.env.nuclei);
        assert_eq!(all.len(), 8);
        let strat = exact_coherence_with_states(&inst.env, &cfg, &protocol, &inst.times, Some(&all)).unwrap();
        assert!(max_abs_deviation(&mixed, &strat) < 1e-10);
    }

    #[test]
    fn bath_state_sampling() {
        let bath: Vec<BathSpin> = vec![carbon_at([3.0, 0.0, 0.0])];
        let a = sample_bath_states(&bath, 25, 9).unwrap();
        assert_eq!(a.len(), 25);
        assert_eq!(a, sample_bath_states(&bath, 25, 9).unwrap());
        assert!(sample_bath_states(&bath, 0, 9).is_err());
        let n = 20_000;
        let ups = sample_bath_states(&bath, n, 4).unwrap().iter().filter(|s| s[0] == 0).count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ups - n as f64 / 2.0).abs() < 3.0 * sigma);
    }

    #[test]
    fn sampled_policy_is_deterministic_and_normalized() {
        let inst = validation_suite().unwrap().swap_remove(3);
        let cfg = CceConfig {
            bath_state_policy: BathStatePolicy::SampledProduct,
            n_samples: 5,
            seed: 3,
            ..CceConfig::order2(vec![], inst.r_dip)
        };
        let protocol = PulseProtocol::hahn_echo(QubitSelector::Ms0ToLowerBranch);
        let a = gcce_coherence(&inst.env, &cfg, &protocol, &inst.times).unwrap();
        let b = gcce_coherence(&inst.env, &cfg, &protocol, &inst.times).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values[0], ONE);
    }

    #[test]
    fn default_core_takes_nitrogen_and_strongest_carbon() {
        let n15 = SpinSpecies::nitrogen15();
        let nitrogen = BathSpin {
            species: n15.clone(),
            position: [0.0, 0.0, 1.5],
            hyperfine: HyperfineTensor::diagonal(3.65, 3.65, 3.03).unwrap(),
            provenance: Provenance::Explicit,
        };
        let nuclei = vec![carbon_at([5.0, 0.0, 0.0]), nitrogen, carbon_at([2.0, 0.0, 1.0]), carbon_at([0.0, 6.0, 0.0])];
        assert_eq!(default_core(&nuclei), vec![1, 2]);
        assert!(default_core(&[]).is_empty());
    }

    fn small_env(positions: &[Vec3], e: f64, b: f64, theta: f64) -> SpinEnvironment {
        let central = CentralSpinModel::new(2870.0, e).unwrap();
        let nuclei = positions.iter().map(|p| carbon_at(*p)).collect();
        SpinEnvironment::new(central, nuclei, [b * theta.sin(), 0.0, b * theta.cos()])
    }

    fn position() -> impl Strategy<Value = Vec3> {
        (2.5f64..8.0, 0.0f64..std::f64::consts::PI, 0.0f64..TAU)
            .prop_map(|(r, th, ph)| [r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn single_spin_gcce1_matches_exact(p in position(), e in 0.0f64..5.0, b in 0.0f64..30.0, theta in 0.0f64..1.5, echo in any::<bool>()) {
            let env = small_env(&[p], e, b, theta);
            let kind = if echo { SequenceKind::HahnEcho } else { SequenceKind::Ramsey };
            let protocol = PulseProtocol { kind, qubit_selector: QubitSelector::Ms0ToLowerBranch };
            let times = grid(6.0, 61);
            let cfg = CceConfig::order1(vec![]);
            let g1 = gcce_coherence(&env, &cfg, &protocol, &times).unwrap();
            let exact = exact_coherence(&env, &cfg, &protocol, &times).unwrap();
            prop_assert!(max_abs_deviation(&g1, &exact) < 1e-10);
            prop_assert!((g1.values[0] - ONE).norm() < 1e-9);
            prop_assert!(g1.values.iter().all(|v| v.norm() <= 1.0 + 1e-6));
        }

        #[test]
        fn bath_relabeling_only_changes_roundoff(
            p in prop::collection::vec(position(), 3).prop_filter("separated", |p| {
                (0..3).all(|i| (i + 1..3).all(|j| norm3(&sub3(&p[i], &p[j])) > 1.5))
            }),
            seed in 0u64..1000,
        ) {
            let env = small_env(&p, 1.0, 5.0, 0.7);
            let mut order: Vec<usize> = vec![0, 1, 2];
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng_for(seed, 9));
            let shuffled = SpinEnvironment { nuclei: order.iter().map(|&i| env.nuclei[i].clone()).collect(), ..env.clone() };
            let protocol = PulseProtocol::ramsey(QubitSelector::Ms0ToLowerBranch);
            let times = grid(4.0, 41);
            let cfg = CceConfig::order2(vec![], 20.0);
            let a = gcce_coherence(&env, &cfg, &protocol, &times).unwrap();
            let b = gcce_coherence(&shuffled, &cfg, &protocol, &times).unwrap();
            let dev = max_abs_deviation(&a, &b);
            prop_assert!(dev < 1e-9, "{}", dev);
        }

        #[test]
        fn combination_ignores_input_order(seed in 0u64..1000) {
            let mut rng = rng_for(seed, 5);
            let curve = |rng: &mut rand_chacha::ChaCha20Rng| -> Vec<Complex64> {
                (0..8).map(|_| Complex64::from_polar(rand::Rng::gen_range(rng, 0.5..1.0), rand::Rng::gen_range(rng, -3.0..3.0))).collect()
            };
            let core = curve(&mut rng);
            let mut items = vec![];
            for i in 0..4 {
                items.push((vec![i], curve(&mut rng)));
            }
            for (i, j) in [(0, 1), (1, 3), (0, 2)] {
                items.push((vec![i, j], curve(&mut rng)));
            }
            let (a, _) = combine_gcce(&core, &items).unwrap();
            use rand::seq::SliceRandom;
            items.shuffle(&mut rng);
            let (b, _) = combine_gcce(&core, &items).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
