//! Determinants, spin-group structure, and Slater-Condon matrix elements.
//!
//! Fermionic ordering convention, used consistently here and by every module
//! downstream: all alpha creation operators precede all beta operators, and
//! each block is ordered by ascending orbital index. Occupation bitstrings
//! hold orbital `p` in bit `p` and support up to 128 spatial orbitals.
//!
//! Determinant sets are kept in canonical (alpha, beta) lexicographic order,
//! which makes every alpha-group a contiguous row range; beta-groups are
//! indexed row lists.

use crate::hamio::IntegralSet;
use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetError {
    #[error("duplicate determinant in input: {0}")]
    Duplicate(Determinant),
    #[error("inconsistent electron counts: expected ({0},{1}), found ({2},{3})")]
    ElectronCount(u32, u32, u32, u32),
    #[error("empty determinant list")]
    Empty,
    #[error("screening threshold must be positive, got {0}")]
    BadThreshold(f64),
    #[error("coefficient vector has zero norm")]
    ZeroNorm,
    #[error("coefficient length {0} does not match determinant count {1}")]
    LengthMismatch(usize, usize),
    #[error("malformed wavefunction file: {0}")]
    BadFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One Slater determinant: paired alpha/beta occupation bitstrings.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Determinant {
    pub alpha: u128,
    pub beta: u128,
}

impl fmt::Display for Determinant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:x}|{:x}", self.alpha, self.beta)
    }
}

impl Determinant {
    pub fn new(alpha: u128, beta: u128) -> Self {
        Determinant { alpha, beta }
    }

    /// Aufbau reference: the lowest `n_alpha`/`n_beta` orbitals occupied.
    pub fn reference(n_alpha: usize, n_beta: usize) -> Self {
        Determinant {
            alpha: low_bits(n_alpha),
            beta: low_bits(n_beta),
        }
    }

    pub fn n_alpha(&self) -> u32 {
        self.alpha.count_ones()
    }

    pub fn n_beta(&self) -> u32 {
        self.beta.count_ones()
    }
}

#[inline]
pub fn low_bits(n: usize) -> u128 {
    if n == 0 {
        0
    } else if n >= 128 {
        u128::MAX
    } else {
        (1u128 << n) - 1
    }
}

#[inline]
fn occ_list(bits: u128) -> Vec<usize> {
    let mut v = Vec::with_capacity(bits.count_ones() as usize);
    let mut b = bits;
    while b != 0 {
        let p = b.trailing_zeros() as usize;
        v.push(p);
        b &= b - 1;
    }
    v
}

/// Sign from the count of occupied orbitals strictly between positions `a` and `b`.
#[inline]
fn sign_between(bits: u128, a: usize, b: usize) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if hi - lo <= 1 {
        return 1.0;
    }
    let mask = ((1u128 << hi) - 1) & !((1u128 << (lo + 1)) - 1);
    if (bits & mask).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// `(d_alpha, d_beta)` excitation degree between two determinants.
#[inline]
pub fn excitation_degree(a: &Determinant, b: &Determinant) -> (u32, u32) {
    (
        (a.alpha ^ b.alpha).count_ones() / 2,
        (a.beta ^ b.beta).count_ones() / 2,
    )
}

/// Diagonal element `⟨D|Ĥ|D⟩`, including the core energy.
pub fn diagonal_element(d: &Determinant, ints: &IntegralSet) -> f64 {
    let occ_a = occ_list(d.alpha);
    let occ_b = occ_list(d.beta);
    let mut e = ints.e_core;
    for &i in occ_a.iter().chain(occ_b.iter()) {
        e += ints.h[[i, i]];
    }
    for (k, &i) in occ_a.iter().enumerate() {
        for &j in occ_a.iter().skip(k + 1) {
            e += ints.v.get(i, i, j, j) - ints.v.get(i, j, j, i);
        }
    }
    for (k, &i) in occ_b.iter().enumerate() {
        for &j in occ_b.iter().skip(k + 1) {
            e += ints.v.get(i, i, j, j) - ints.v.get(i, j, j, i);
        }
    }
    for &i in &occ_a {
        for &j in &occ_b {
            e += ints.v.get(i, i, j, j);
        }
    }
    e
}

/// Off-diagonal single-excitation element within one spin channel.
/// `u` is occupied only in the bra, `w` only in the ket; `same` is the shared
/// occupation of that spin, `other` the (identical) occupation of the other spin.
fn single_element(u: usize, w: usize, same: u128, other: u128, ints: &IntegralSet) -> f64 {
    let mut val = ints.h[[u, w]];
    let mut b = same;
    while b != 0 {
        let n = b.trailing_zeros() as usize;
        b &= b - 1;
        val += ints.v.get(u, w, n, n) - ints.v.get(u, n, n, w);
    }
    let mut b = other;
    while b != 0 {
        let n = b.trailing_zeros() as usize;
        b &= b - 1;
        val += ints.v.get(u, w, n, n);
    }
    sign_between(same, u, w) * val
}

/// Same-spin double excitation: `w1 < w2` occupied only in the ket bits `src`,
/// `u1 < u2` occupied only in the bra.
fn double_same_spin(src: u128, w1: usize, u1: usize, w2: usize, u2: usize, ints: &IntegralSet) -> f64 {
    double_phase(src, w1, u1, w2, u2) * (ints.v.get(u1, w1, u2, w2) - ints.v.get(u1, w2, u2, w1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spin {
    Alpha,
    Beta,
}

/// Excitation relating a bra determinant to a ket, with the fermionic phase.
/// Particles are occupied in the bra only, holes in the ket only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Excitation {
    Diagonal,
    Single {
        spin: Spin,
        particle: usize,
        hole: usize,
        phase: f64,
    },
    DoubleSame {
        spin: Spin,
        particles: (usize, usize),
        holes: (usize, usize),
        phase: f64,
    },
    /// One hop per spin channel; fields are `(particle, hole)`.
    DoubleMixed {
        alpha: (usize, usize),
        beta: (usize, usize),
        phase: f64,
    },
    Beyond,
}

/// Classify the excitation from ket `b` to bra `a` and compute its phase.
pub fn classify(a: &Determinant, b: &Determinant) -> Excitation {
    let xa = a.alpha ^ b.alpha;
    let xb = a.beta ^ b.beta;
    let da = xa.count_ones() / 2;
    let db = xb.count_ones() / 2;
    match (da, db) {
        (0, 0) => Excitation::Diagonal,
        (1, 0) => {
            let u = (xa & a.alpha).trailing_zeros() as usize;
            let w = (xa & b.alpha).trailing_zeros() as usize;
            Excitation::Single {
                spin: Spin::Alpha,
                particle: u,
                hole: w,
                phase: sign_between(a.alpha & b.alpha, u, w),
            }
        }
        (0, 1) => {
            let u = (xb & a.beta).trailing_zeros() as usize;
            let w = (xb & b.beta).trailing_zeros() as usize;
            Excitation::Single {
                spin: Spin::Beta,
                particle: u,
                hole: w,
                phase: sign_between(a.beta & b.beta, u, w),
            }
        }
        (2, 0) => {
            let us = occ_list(xa & a.alpha);
            let ws = occ_list(xa & b.alpha);
            Excitation::DoubleSame {
                spin: Spin::Alpha,
                particles: (us[0], us[1]),
                holes: (ws[0], ws[1]),
                phase: double_phase(b.alpha, ws[0], us[0], ws[1], us[1]),
            }
        }
        (0, 2) => {
            let us = occ_list(xb & a.beta);
            let ws = occ_list(xb & b.beta);
            Excitation::DoubleSame {
                spin: Spin::Beta,
                particles: (us[0], us[1]),
                holes: (ws[0], ws[1]),
                phase: double_phase(b.beta, ws[0], us[0], ws[1], us[1]),
            }
        }
        (1, 1) => {
            let ua = (xa & a.alpha).trailing_zeros() as usize;
            let wa = (xa & b.alpha).trailing_zeros() as usize;
            let ub = (xb & a.beta).trailing_zeros() as usize;
            let wb = (xb & b.beta).trailing_zeros() as usize;
            Excitation::DoubleMixed {
                alpha: (ua, wa),
                beta: (ub, wb),
                phase: sign_between(a.alpha & b.alpha, ua, wa)
                    * sign_between(a.beta & b.beta, ub, wb),
            }
        }
        _ => Excitation::Beyond,
    }
}

/// Sequential two-hop phase in one spin channel, hops applied to `src`.
fn double_phase(src: u128, w1: usize, u1: usize, w2: usize, u2: usize) -> f64 {
    let s1 = sign_between(src, w1, u1);
    let mid = (src & !(1u128 << w1)) | (1u128 << u1);
    s1 * sign_between(mid, w2, u2)
}

/// `⟨a|Ĥ|b⟩` by the Slater-Condon rules; zero beyond double excitations.
pub fn matrix_element(a: &Determinant, b: &Determinant, ints: &IntegralSet) -> f64 {
    match classify(a, b) {
        Excitation::Diagonal => diagonal_element(a, ints),
        Excitation::Single {
            spin,
            particle,
            hole,
            ..
        } => match spin {
            Spin::Alpha => single_element(particle, hole, a.alpha & b.alpha, a.beta, ints),
            Spin::Beta => single_element(particle, hole, a.beta & b.beta, a.alpha, ints),
        },
        Excitation::DoubleSame {
            particles: (u1, u2),
            holes: (w1, w2),
            phase,
            ..
        } => phase * (ints.v.get(u1, w1, u2, w2) - ints.v.get(u1, w2, u2, w1)),
        Excitation::DoubleMixed {
            alpha: (ua, wa),
            beta: (ub, wb),
            phase,
        } => phase * ints.v.get(ua, wa, ub, wb),
        Excitation::Beyond => 0.0,
    }
}

/// Enumerate every single and double excitation of `src` together with the
/// matrix element `⟨excited|Ĥ|src⟩`, calling `f(excited, element)` for each.
pub fn connected_excitations<F: FnMut(Determinant, f64)>(
    src: &Determinant,
    n_orb: usize,
    ints: &IntegralSet,
    mut f: F,
) {
    let full = low_bits(n_orb);
    let occ_a = occ_list(src.alpha);
    let occ_b = occ_list(src.beta);
    let virt_a = occ_list(full & !src.alpha);
    let virt_b = occ_list(full & !src.beta);

    // alpha singles
    for &w in &occ_a {
        for &u in &virt_a {
            let alpha = (src.alpha & !(1u128 << w)) | (1u128 << u);
            let elem = single_element(u, w, src.alpha & alpha, src.beta, ints);
            f(Determinant::new(alpha, src.beta), elem);
        }
    }
    // beta singles
    for &w in &occ_b {
        for &u in &virt_b {
            let beta = (src.beta & !(1u128 << w)) | (1u128 << u);
            let elem = single_element(u, w, src.beta & beta, src.alpha, ints);
            f(Determinant::new(src.alpha, beta), elem);
        }
    }
    // same-spin doubles (alpha)
    for (i, &w1) in occ_a.iter().enumerate() {
        for &w2 in occ_a.iter().skip(i + 1) {
            for (k, &u1) in virt_a.iter().enumerate() {
                for &u2 in virt_a.iter().skip(k + 1) {
                    let alpha =
                        (src.alpha & !(1u128 << w1) & !(1u128 << w2)) | (1u128 << u1) | (1u128 << u2);
                    let elem = double_same_spin(src.alpha, w1, u1, w2, u2, ints);
                    f(Determinant::new(alpha, src.beta), elem);
                }
            }
        }
    }
    // same-spin doubles (beta)
    for (i, &w1) in occ_b.iter().enumerate() {
        for &w2 in occ_b.iter().skip(i + 1) {
            for (k, &u1) in virt_b.iter().enumerate() {
                for &u2 in virt_b.iter().skip(k + 1) {
                    let beta =
                        (src.beta & !(1u128 << w1) & !(1u128 << w2)) | (1u128 << u1) | (1u128 << u2);
                    let elem = double_same_spin(src.beta, w1, u1, w2, u2, ints);
                    f(Determinant::new(src.alpha, beta), elem);
                }
            }
        }
    }
    // mixed doubles: one alpha hop and one beta hop
    for &wa in &occ_a {
        for &ua in &virt_a {
            let alpha = (src.alpha & !(1u128 << wa)) | (1u128 << ua);
            let sa = sign_between(src.alpha, ua, wa);
            for &wb in &occ_b {
                for &ub in &virt_b {
                    let beta = (src.beta & !(1u128 << wb)) | (1u128 << ub);
                    let sb = sign_between(src.beta, ub, wb);
                    let elem = sa * sb * ints.v.get(ua, wa, ub, wb);
                    f(Determinant::new(alpha, beta), elem);
                }
            }
        }
    }
}

/// Ordered, duplicate-free determinant set with alpha/beta group structure.
#[derive(Debug, Clone)]
pub struct DetSet {
    n_orb: usize,
    dets: Vec<Determinant>,
    alpha_ranges: Vec<(usize, usize)>,
    alpha_group_of: Vec<u32>,
    beta_rows: Vec<Vec<usize>>,
    beta_group_of: Vec<u32>,
    alpha_adjacency: Vec<Vec<u32>>,
    index: HashMap<Determinant, usize>,
}

impl DetSet {
    /// Build the group structure from a duplicate-free determinant list.
    /// The list is sorted into canonical order; duplicates are rejected.
    pub fn build_groups(mut dets: Vec<Determinant>, n_orb: usize) -> Result<Self, DetError> {
        if dets.is_empty() {
            return Err(DetError::Empty);
        }
        dets.sort_unstable();
        for w in dets.windows(2) {
            if w[0] == w[1] {
                return Err(DetError::Duplicate(w[0]));
            }
        }
        let (na, nb) = (dets[0].n_alpha(), dets[0].n_beta());
        for d in &dets {
            if d.n_alpha() != na || d.n_beta() != nb {
                return Err(DetError::ElectronCount(na, nb, d.n_alpha(), d.n_beta()));
            }
        }

        let n = dets.len();
        let mut alpha_ranges = Vec::new();
        let mut alpha_group_of = vec![0u32; n];
        let mut alpha_string_to_group: HashMap<u128, u32> = HashMap::new();
        let mut start = 0;
        for i in 1..=n {
            if i == n || dets[i].alpha != dets[start].alpha {
                let g = alpha_ranges.len() as u32;
                alpha_ranges.push((start, i));
                alpha_string_to_group.insert(dets[start].alpha, g);
                for row in start..i {
                    alpha_group_of[row] = g;
                }
                start = i;
            }
        }

        let mut beta_map: HashMap<u128, Vec<usize>> = HashMap::new();
        for (row, d) in dets.iter().enumerate() {
            beta_map.entry(d.beta).or_default().push(row);
        }
        let mut beta_strings: Vec<u128> = beta_map.keys().copied().collect();
        beta_strings.sort_unstable();
        let mut beta_rows = Vec::with_capacity(beta_strings.len());
        let mut beta_group_of = vec![0u32; n];
        for (g, s) in beta_strings.iter().enumerate() {
            let rows = beta_map.remove(s).unwrap();
            for &row in &rows {
                beta_group_of[row] = g as u32;
            }
            beta_rows.push(rows);
        }

        // Alpha adjacency: groups reachable by one alpha excitation, found by
        // generating single hops of each group string and looking them up.
        let full = low_bits(n_orb);
        let mut alpha_adjacency = vec![Vec::new(); alpha_ranges.len()];
        for (g, &(s, _)) in alpha_ranges.iter().enumerate() {
            let a = dets[s].alpha;
            let occ = occ_list(a);
            let virt = occ_list(full & !a);
            let mut nbrs = Vec::new();
            for &w in &occ {
                for &u in &virt {
                    let a2 = (a & !(1u128 << w)) | (1u128 << u);
                    if let Some(&g2) = alpha_string_to_group.get(&a2) {
                        nbrs.push(g2);
                    }
                }
            }
            nbrs.sort_unstable();
            nbrs.dedup();
            alpha_adjacency[g] = nbrs;
        }

        let index = dets.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        Ok(DetSet {
            n_orb,
            dets,
            alpha_ranges,
            alpha_group_of,
            beta_rows,
            beta_group_of,
            alpha_adjacency,
            index,
        })
    }

    /// Full FCI space at the given electron counts, in canonical order.
    pub fn full_space(n_orb: usize, n_alpha: usize, n_beta: usize) -> Result<Self, DetError> {
        let alphas = enumerate_strings(n_orb, n_alpha);
        let betas = enumerate_strings(n_orb, n_beta);
        let mut dets = Vec::with_capacity(alphas.len() * betas.len());
        for &a in &alphas {
            for &b in &betas {
                dets.push(Determinant::new(a, b));
            }
        }
        Self::build_groups(dets, n_orb)
    }

    pub fn len(&self) -> usize {
        self.dets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dets.is_empty()
    }

    pub fn n_orb(&self) -> usize {
        self.n_orb
    }

    pub fn n_alpha(&self) -> usize {
        self.dets[0].n_alpha() as usize
    }

    pub fn n_beta(&self) -> usize {
        self.dets[0].n_beta() as usize
    }

    pub fn dets(&self) -> &[Determinant] {
        &self.dets
    }

    pub fn det(&self, row: usize) -> &Determinant {
        &self.dets[row]
    }

    pub fn contains(&self, d: &Determinant) -> bool {
        self.index.contains_key(d)
    }

    pub fn row_of(&self, d: &Determinant) -> Option<usize> {
        self.index.get(d).copied()
    }

    pub fn n_alpha_groups(&self) -> usize {
        self.alpha_ranges.len()
    }

    pub fn n_beta_groups(&self) -> usize {
        self.beta_rows.len()
    }

    /// Contiguous row range of an alpha-group.
    pub fn alpha_range(&self, g: usize) -> (usize, usize) {
        self.alpha_ranges[g]
    }

    pub fn alpha_group_of(&self, row: usize) -> usize {
        self.alpha_group_of[row] as usize
    }

    pub fn beta_rows(&self, g: usize) -> &[usize] {
        &self.beta_rows[g]
    }

    pub fn beta_group_of(&self, row: usize) -> usize {
        self.beta_group_of[row] as usize
    }

    pub fn alpha_neighbors(&self, g: usize) -> &[u32] {
        &self.alpha_adjacency[g]
    }

    /// Visit every row `j ≠ i` within single/double excitation reach of row
    /// `i`, through the group structure: same-alpha rows with beta degree 1-2,
    /// same-beta rows with alpha degree 1-2, then alpha-adjacent groups with
    /// beta degree 1 (mixed doubles), in that fixed order.
    pub fn visit_connected<F: FnMut(usize)>(&self, i: usize, mut f: F) {
        let di = &self.dets[i];
        let ga = self.alpha_group_of[i] as usize;
        let (s, e) = self.alpha_ranges[ga];
        for j in s..e {
            if j == i {
                continue;
            }
            let pc = (di.beta ^ self.dets[j].beta).count_ones();
            if pc == 2 || pc == 4 {
                f(j);
            }
        }
        let gb = self.beta_group_of[i] as usize;
        for &j in &self.beta_rows[gb] {
            if j == i {
                continue;
            }
            let pc = (di.alpha ^ self.dets[j].alpha).count_ones();
            if pc == 2 || pc == 4 {
                f(j);
            }
        }
        for &gp in &self.alpha_adjacency[ga] {
            let (s, e) = self.alpha_ranges[gp as usize];
            for j in s..e {
                if (di.beta ^ self.dets[j].beta).count_ones() == 2 {
                    f(j);
                }
            }
        }
    }

    /// Mean alpha-adjacency degree per determinant.
    pub fn mean_alpha_adjacency(&self) -> f64 {
        let total: usize = self
            .alpha_ranges
            .iter()
            .enumerate()
            .map(|(g, &(s, e))| (e - s) * self.alpha_adjacency[g].len())
            .sum();
        total as f64 / self.dets.len() as f64
    }
}

/// All `n_orb`-bit strings with exactly `k` bits set, ascending.
pub fn enumerate_strings(n_orb: usize, k: usize) -> Vec<u128> {
    assert!(k <= n_orb && n_orb <= 128);
    if k == 0 {
        return vec![0];
    }
    let limit = low_bits(n_orb);
    let mut out = Vec::new();
    let mut s = low_bits(k);
    loop {
        out.push(s);
        if n_orb == 128 && s.leading_zeros() == 0 {
            // Gosper's hack would overflow past the top bit; enumerate stops
            // once the highest combination is emitted.
            if s == low_bits(k) << (n_orb - k) {
                break;
            }
        }
        // Gosper's hack: next combination with the same popcount.
        let c = s & s.wrapping_neg();
        let r = s + c;
        s = (((r ^ s) >> 2) / c) | r;
        if s > limit {
            break;
        }
    }
    out
}

/// Variational state: determinant set plus unit-norm coefficients.
#[derive(Debug, Clone)]
pub struct Wavefunction {
    pub space: DetSet,
    pub coeffs: Vec<f64>,
}

impl Wavefunction {
    /// Normalizes the coefficient vector; rejects zero norm or length mismatch.
    pub fn new(space: DetSet, mut coeffs: Vec<f64>) -> Result<Self, DetError> {
        if coeffs.len() != space.len() {
            return Err(DetError::LengthMismatch(coeffs.len(), space.len()));
        }
        let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(DetError::ZeroNorm);
        }
        for c in coeffs.iter_mut() {
            *c /= norm;
        }
        Ok(Wavefunction { space, coeffs })
    }

    pub fn single(det: Determinant, n_orb: usize) -> Result<Self, DetError> {
        let space = DetSet::build_groups(vec![det], n_orb)?;
        Ok(Wavefunction {
            space,
            coeffs: vec![1.0],
        })
    }

    /// Row and weight `p0 = |c_max|²` of the dominant determinant
    /// (ties broken by canonical determinant order, i.e. lowest row).
    pub fn dominant(&self) -> (usize, f64) {
        let mut best = 0;
        for (i, c) in self.coeffs.iter().enumerate() {
            if c.abs() > self.coeffs[best].abs() {
                best = i;
            }
        }
        (best, self.coeffs[best] * self.coeffs[best])
    }

    /// Rayleigh quotient `⟨Ψ|Ĥ|Ψ⟩` evaluated by direct double loop over
    /// excitation-connected pairs.
    pub fn rayleigh_quotient(&self, ints: &IntegralSet) -> f64 {
        let n = self.space.len();
        let mut e = 0.0;
        for i in 0..n {
            e += self.coeffs[i] * self.coeffs[i] * diagonal_element(self.space.det(i), ints);
            for j in i + 1..n {
                let (da, db) = excitation_degree(self.space.det(i), self.space.det(j));
                if da + db <= 2 {
                    e += 2.0
                        * self.coeffs[i]
                        * self.coeffs[j]
                        * matrix_element(self.space.det(i), self.space.det(j), ints);
                }
            }
        }
        e
    }
}

/// Candidates outside `w.space` reached by a single or double excitation with
/// `|H_ji · c_i| > theta`, with the largest admitting product per candidate.
pub fn heat_bath_candidates(
    w: &Wavefunction,
    theta: f64,
    ints: &IntegralSet,
) -> Result<Vec<(Determinant, f64)>, DetError> {
    if !(theta > 0.0) {
        return Err(DetError::BadThreshold(theta));
    }
    let mut found: HashMap<Determinant, f64> = HashMap::new();
    for (i, det) in w.space.dets().iter().enumerate() {
        let ci = w.coeffs[i];
        if ci == 0.0 {
            continue;
        }
        connected_excitations(det, w.space.n_orb(), ints, |cand, elem| {
            let weight = (elem * ci).abs();
            if weight > theta && !w.space.contains(&cand) {
                let e = found.entry(cand).or_insert(0.0);
                if weight > *e {
                    *e = weight;
                }
            }
        });
    }
    let mut out: Vec<(Determinant, f64)> = found.into_iter().collect();
    out.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Deduplicated exterior determinants passing the heat-bath screen, as a set.
/// Returns `None` when no candidate survives.
pub fn heat_bath_neighbors(
    w: &Wavefunction,
    theta: f64,
    ints: &IntegralSet,
) -> Result<Option<DetSet>, DetError> {
    let cands = heat_bath_candidates(w, theta, ints)?;
    if cands.is_empty() {
        return Ok(None);
    }
    let dets = cands.into_iter().map(|(d, _)| d).collect();
    Ok(Some(DetSet::build_groups(dets, w.space.n_orb())?))
}

/// Write the text wavefunction format: a header line
/// `n_orb n_alpha n_beta n_det` followed by `alpha_hex beta_hex coefficient` rows.
pub fn write_wavefunction<W: Write>(mut out: W, w: &Wavefunction) -> Result<(), DetError> {
    writeln!(
        out,
        "{} {} {} {}",
        w.space.n_orb(),
        w.space.n_alpha(),
        w.space.n_beta(),
        w.space.len()
    )?;
    for (d, c) in w.space.dets().iter().zip(&w.coeffs) {
        writeln!(out, "{:x} {:x} {:.17e}", d.alpha, d.beta, c)?;
    }
    Ok(())
}

pub fn read_wavefunction<R: BufRead>(input: R) -> Result<Wavefunction, DetError> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| DetError::BadFile("missing header".into()))??;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| DetError::BadFile(format!("bad header field `{t}`"))))
        .collect::<Result<_, _>>()?;
    if fields.len() != 4 {
        return Err(DetError::BadFile("header needs 4 fields".into()));
    }
    let (n_orb, n_alpha, n_beta, n_det) = (fields[0], fields[1], fields[2], fields[3]);
    let mut dets = Vec::with_capacity(n_det);
    let mut coeffs = Vec::with_capacity(n_det);
    let mut order = HashMap::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (a, b, c) = (
            it.next().ok_or_else(|| DetError::BadFile("short row".into()))?,
            it.next().ok_or_else(|| DetError::BadFile("short row".into()))?,
            it.next().ok_or_else(|| DetError::BadFile("short row".into()))?,
        );
        let alpha = u128::from_str_radix(a, 16).map_err(|_| DetError::BadFile(format!("bad hex `{a}`")))?;
        let beta = u128::from_str_radix(b, 16).map_err(|_| DetError::BadFile(format!("bad hex `{b}`")))?;
        let coeff: f64 = c.parse().map_err(|_| DetError::BadFile(format!("bad coeff `{c}`")))?;
        let det = Determinant::new(alpha, beta);
        order.insert(det, coeffs.len());
        dets.push(det);
        coeffs.push(coeff);
    }
    if dets.len() != n_det {
        return Err(DetError::BadFile(format!(
            "header says {n_det} rows, found {}",
            dets.len()
        )));
    }
    if dets.iter().any(|d| d.n_alpha() as usize != n_alpha || d.n_beta() as usize != n_beta) {
        return Err(DetError::BadFile("row electron counts disagree with header".into()));
    }
    let space = DetSet::build_groups(dets, n_orb)?;
    // build_groups sorts rows; realign coefficients with the canonical order.
    let mut aligned = vec![0.0; coeffs.len()];
    for (row, d) in space.dets().iter().enumerate() {
        aligned[row] = coeffs[order[d]];
    }
    Wavefunction::new(space, aligned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamio::{build_hubbard_graph, GraphModelSpec};

    fn dimer() -> IntegralSet {
        build_hubbard_graph(&GraphModelSpec {
            sites: 2,
            t: 1.0,
            u: 4.0,
            alpha: 0.0,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn degree_counts_moved_bits() {
        let a = Determinant::new(0b0011, 0b0011);
        assert_eq!(excitation_degree(&a, &a), (0, 0));
        let b = Determinant::new(0b0101, 0b0011);
        assert_eq!(excitation_degree(&a, &b), (1, 0));
        let c = Determinant::new(0b1100, 0b0011);
        assert_eq!(excitation_degree(&a, &c), (2, 0));
    }

    #[test]
    fn dimer_diagonal_and_hop() {
        let ints = dimer();
        let both_on_site0 = Determinant::new(0b01, 0b01);
        assert!((diagonal_element(&both_on_site0, &ints) - 4.0).abs() < 1e-14);
        let hop = Determinant::new(0b10, 0b01);
        assert!((matrix_element(&both_on_site0, &hop, &ints) - (-1.0)).abs() < 1e-14);
    }

    #[test]
    fn beyond_double_is_zero() {
        let ints = build_hubbard_graph(&GraphModelSpec {
            sites: 6,
            t: 1.0,
            u: 4.0,
            alpha: 1.0,
            seed: 1,
        })
        .unwrap();
        // degree (2,1)
        let a = Determinant::new(0b000111, 0b000111);
        let b = Determinant::new(0b111000, 0b001011);
        assert_eq!(excitation_degree(&a, &b), (3, 1));
        assert_eq!(matrix_element(&a, &b, &ints), 0.0);
        let c = Determinant::new(0b011010, 0b001101);
        assert_eq!(excitation_degree(&a, &c), (2, 1));
        assert_eq!(matrix_element(&a, &c, &ints), 0.0);
    }

    #[test]
    fn symmetry_of_matrix_element() {
        let ints = build_hubbard_graph(&GraphModelSpec {
            sites: 5,
            t: 1.0,
            u: 4.0,
            alpha: 1.0,
            seed: 11,
        })
        .unwrap();
        let space = DetSet::full_space(5, 2, 2).unwrap();
        for i in (0..space.len()).step_by(7) {
            for j in (0..space.len()).step_by(5) {
                let hij = matrix_element(space.det(i), space.det(j), &ints);
                let hji = matrix_element(space.det(j), space.det(i), &ints);
                assert!((hij - hji).abs() < 1e-12, "asymmetric at ({i},{j})");
            }
        }
    }

    #[test]
    fn group_structure_hubbard_l8() {
        let space = DetSet::full_space(8, 4, 4).unwrap();
        assert_eq!(space.len(), 4900);
        assert_eq!(space.n_alpha_groups(), 70);
        assert_eq!(space.n_beta_groups(), 70);
        // each alpha-group holds one full beta enumeration
        for g in 0..space.n_alpha_groups() {
            let (s, e) = space.alpha_range(g);
            assert_eq!(e - s, 70);
        }
    }

    #[test]
    fn shared_alpha_forms_one_group() {
        let dets = vec![
            Determinant::new(0b0011, 0b0011),
            Determinant::new(0b0011, 0b0101),
            Determinant::new(0b0011, 0b0110),
            Determinant::new(0b0011, 0b1010),
        ];
        let set = DetSet::build_groups(dets, 4).unwrap();
        assert_eq!(set.n_alpha_groups(), 1);
        assert_eq!(set.alpha_range(0), (0, 4));
    }

    #[test]
    fn adjacency_is_single_excitation_only() {
        // alpha strings 0b0011 and 0b1100 differ by a double hop
        let dets = vec![
            Determinant::new(0b0011, 0b0011),
            Determinant::new(0b1100, 0b0011),
            Determinant::new(0b0101, 0b0011),
        ];
        let set = DetSet::build_groups(dets.clone(), 4).unwrap();
        let g0 = set.alpha_group_of(set.row_of(&dets[0]).unwrap());
        let g1 = set.alpha_group_of(set.row_of(&dets[1]).unwrap());
        let g2 = set.alpha_group_of(set.row_of(&dets[2]).unwrap());
        assert!(!set.alpha_neighbors(g0).contains(&(g1 as u32)));
        assert!(set.alpha_neighbors(g0).contains(&(g2 as u32)));
        // adjacency is symmetric
        assert!(set.alpha_neighbors(g2).contains(&(g0 as u32)));
    }

    #[test]
    fn duplicates_rejected() {
        let dets = vec![
            Determinant::new(0b0011, 0b0011),
            Determinant::new(0b0011, 0b0011),
        ];
        assert!(matches!(
            DetSet::build_groups(dets, 4),
            Err(DetError::Duplicate(_))
        ));
    }

    #[test]
    fn heat_bath_on_dimer_single_det() {
        let ints = dimer();
        let w = Wavefunction::single(Determinant::new(0b01, 0b01), 2).unwrap();
        let nbrs = heat_bath_neighbors(&w, 0.5, &ints).unwrap().unwrap();
        assert_eq!(nbrs.len(), 2);
        assert!(nbrs.contains(&Determinant::new(0b10, 0b01)));
        assert!(nbrs.contains(&Determinant::new(0b01, 0b10)));
    }

    #[test]
    fn heat_bath_empty_cases() {
        let ints = dimer();
        let space = DetSet::full_space(2, 1, 1).unwrap();
        let w = Wavefunction::new(space, vec![0.8, 0.1, 0.1, 0.05]).unwrap();
        // full FCI space has no exterior
        assert!(heat_bath_neighbors(&w, 1e-9, &ints).unwrap().is_none());
        let single = Wavefunction::single(Determinant::new(0b01, 0b01), 2).unwrap();
        // infinite threshold screens everything out
        assert!(heat_bath_neighbors(&single, f64::INFINITY, &ints)
            .unwrap()
            .is_none());
        assert!(heat_bath_neighbors(&single, 0.0, &ints).is_err());
    }

    #[test]
    fn wavefunction_round_trip() {
        let space = DetSet::full_space(4, 2, 2).unwrap();
        let coeffs: Vec<f64> = (0..space.len()).map(|i| ((i * 37 + 11) % 83) as f64 - 41.0).collect();
        let w = Wavefunction::new(space, coeffs).unwrap();
        let mut buf = Vec::new();
        write_wavefunction(&mut buf, &w).unwrap();
        let w2 = read_wavefunction(buf.as_slice()).unwrap();
        assert_eq!(w.space.dets(), w2.space.dets());
        for (a, b) in w.coeffs.iter().zip(&w2.coeffs) {
            assert_eq!(a, b, "coefficients must round-trip bit-exactly");
        }
    }

    #[test]
    fn enumerate_strings_counts() {
        assert_eq!(enumerate_strings(8, 4).len(), 70);
        assert_eq!(enumerate_strings(4, 0), vec![0]);
        assert_eq!(enumerate_strings(3, 3), vec![0b111]);
    }
}
