//! Reduced density matrices, orbital entanglement, and wavefunction structure
//! diagnostics: spin patterns, center labeling, multi-center excitation
//! statistics.
//!
//! The two-body density `Γ_pqrs` follows the chemist pairing of the integral
//! store, fixed by the contraction
//! `E = Σ h_pq γ_pq + ½ Σ (pq|rs) Γ_pqrs + e_core`,
//! which is enforced by the energy-reconstruction tests.

use crate::detspace::{classify, Determinant, Excitation, Spin, Wavefunction};
use crate::hamio::IntegralSet;
use crate::linalg;
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("one- and two-orbital densities need distinct orbitals, got p = q = {0}")]
    SameOrbital(usize),
    #[error("orbital index {0} out of range ({1} orbitals)")]
    OrbitalRange(usize, usize),
    #[error("center map error: {0}")]
    Centers(String),
    #[error("linear algebra failure: {0}")]
    Linalg(#[from] linalg::LinalgError),
    #[error("pattern length mismatch: {0} vs {1}")]
    PatternLength(usize, usize),
}

/// Spin-summed one-body density `γ_pq`.
#[derive(Debug, Clone)]
pub struct Rdm1(pub Array2<f64>);

/// Two-body density `Γ_pqrs`, dense, chemist pairing.
#[derive(Debug, Clone)]
pub struct Rdm2 {
    n_orb: usize,
    data: Vec<f64>,
}

impl Rdm2 {
    fn zeros(n_orb: usize) -> Self {
        Rdm2 {
            n_orb,
            data: vec![0.0; n_orb.pow(4)],
        }
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize, r: usize, s: usize) -> f64 {
        let n = self.n_orb;
        self.data[((p * n + q) * n + r) * n + s]
    }

    #[inline]
    fn add(&mut self, p: usize, q: usize, r: usize, s: usize, x: f64) {
        let n = self.n_orb;
        self.data[((p * n + q) * n + r) * n + s] += x;
    }

    pub fn n_orb(&self) -> usize {
        self.n_orb
    }

    /// Partial trace `Σ_s Γ_pqss`, which equals `(N-1) γ_pq`.
    pub fn partial_trace(&self) -> Array2<f64> {
        let n = self.n_orb;
        let mut out = Array2::zeros((n, n));
        for p in 0..n {
            for q in 0..n {
                let mut acc = 0.0;
                for s in 0..n {
                    acc += self.get(p, q, s, s);
                }
                out[[p, q]] = acc;
            }
        }
        out
    }
}

fn occ_vec(bits: u128) -> Vec<usize> {
    let mut v = Vec::with_capacity(bits.count_ones() as usize);
    let mut b = bits;
    while b != 0 {
        v.push(b.trailing_zeros() as usize);
        b &= b - 1;
    }
    v
}

/// Accumulate the one- and two-body densities of a normalized wavefunction.
pub fn compute_rdms(w: &Wavefunction) -> (Rdm1, Rdm2) {
    let n = w.space.n_orb();
    let mut g1 = Array2::zeros((n, n));
    let mut g2 = Rdm2::zeros(n);

    for i in 0..w.space.len() {
        let ci = w.coeffs[i];
        if ci == 0.0 {
            continue;
        }
        let di = w.space.det(i);
        let w2 = ci * ci;
        let occ_a = occ_vec(di.alpha);
        let occ_b = occ_vec(di.beta);
        for &p in occ_a.iter().chain(occ_b.iter()) {
            g1[[p, p]] += w2;
        }
        // ordered pairs of distinct occupied spin orbitals
        let spin_orbs: Vec<(usize, u8)> = occ_a
            .iter()
            .map(|&p| (p, 0u8))
            .chain(occ_b.iter().map(|&p| (p, 1u8)))
            .collect();
        for &(p, sp) in &spin_orbs {
            for &(q, sq) in &spin_orbs {
                if (p, sp) == (q, sq) {
                    continue;
                }
                g2.add(p, p, q, q, w2);
                if sp == sq {
                    g2.add(p, q, q, p, -w2);
                }
            }
        }
        // off-diagonal pairs, each ordered direction visited once
        w.space.visit_connected(i, |j| {
            let cj = w.coeffs[j];
            if cj == 0.0 {
                return;
            }
            let dj = w.space.det(j);
            match classify(di, dj) {
                Excitation::Single {
                    spin,
                    particle: u,
                    hole: h,
                    phase,
                } => {
                    let x = ci * cj * phase;
                    g1[[u, h]] += x;
                    let (same, other) = match spin {
                        Spin::Alpha => (di.alpha & dj.alpha, di.beta),
                        Spin::Beta => (di.beta & dj.beta, di.alpha),
                    };
                    for nb in occ_vec(same) {
                        g2.add(u, h, nb, nb, x);
                        g2.add(nb, nb, u, h, x);
                        g2.add(u, nb, nb, h, -x);
                        g2.add(nb, h, u, nb, -x);
                    }
                    for nb in occ_vec(other) {
                        g2.add(u, h, nb, nb, x);
                        g2.add(nb, nb, u, h, x);
                    }
                }
                Excitation::DoubleSame {
                    particles: (u1, u2),
                    holes: (h1, h2),
                    phase,
                    ..
                } => {
                    let x = ci * cj * phase;
                    g2.add(u1, h1, u2, h2, x);
                    g2.add(u2, h2, u1, h1, x);
                    g2.add(u1, h2, u2, h1, -x);
                    g2.add(u2, h1, u1, h2, -x);
                }
                Excitation::DoubleMixed {
                    alpha: (ua, ha),
                    beta: (ub, hb),
                    phase,
                } => {
                    let x = ci * cj * phase;
                    g2.add(ua, ha, ub, hb, x);
                    g2.add(ub, hb, ua, ha, x);
                }
                Excitation::Diagonal | Excitation::Beyond => {}
            }
        });
    }
    (Rdm1(g1), g2)
}

pub fn compute_rdm1(w: &Wavefunction) -> Rdm1 {
    compute_rdms(w).0
}

pub fn compute_rdm2(w: &Wavefunction) -> Rdm2 {
    compute_rdms(w).1
}

/// `E = Σ h γ + ½ Σ (pq|rs) Γ + e_core`.
pub fn reconstruct_energy(rdm1: &Rdm1, rdm2: &Rdm2, ints: &IntegralSet) -> f64 {
    let n = ints.n_orb;
    let mut e = ints.e_core;
    for p in 0..n {
        for q in 0..n {
            e += ints.h[[p, q]] * rdm1.0[[p, q]];
        }
    }
    for p in 0..n {
        for q in 0..n {
            for r in 0..n {
                for s in 0..n {
                    let v = ints.v.get(p, q, r, s);
                    if v != 0.0 {
                        e += 0.5 * v * rdm2.get(p, q, r, s);
                    }
                }
            }
        }
    }
    e
}

/// Diagonal one-orbital density in the basis (|0⟩, |↑⟩, |↓⟩, |↑↓⟩).
pub fn one_orbital_rdm(w: &Wavefunction, p: usize) -> Result<[f64; 4], ObsError> {
    if p >= w.space.n_orb() {
        return Err(ObsError::OrbitalRange(p, w.space.n_orb()));
    }
    let bit = 1u128 << p;
    let mut rho = [0.0f64; 4];
    for (d, c) in w.space.dets().iter().zip(&w.coeffs) {
        let s = (if d.alpha & bit != 0 { 1 } else { 0 }) + (if d.beta & bit != 0 { 2 } else { 0 });
        rho[local_index(s)] += c * c;
    }
    Ok(rho)
}

/// Map (alpha occupied, beta occupied) flags to the (|0⟩,|↑⟩,|↓⟩,|↑↓⟩) index.
#[inline]
fn local_index(packed: usize) -> usize {
    // packed bit0 = alpha, bit1 = beta; target order 0, ↑, ↓, ↑↓
    match packed {
        0 => 0,
        1 => 1,
        2 => 2,
        _ => 3,
    }
}

/// Sign from anticommuting the `p`/`q` creation operators of `det` to the
/// front, counting crossings with the remaining occupied spin orbitals.
fn eta_sign(det: &Determinant, p: usize, q: usize) -> f64 {
    let mask = (1u128 << p) | (1u128 << q);
    let rest_a = det.alpha & !mask;
    let rest_b = det.beta & !mask;
    let below = |bits: u128, k: usize| (bits & ((1u128 << k) - 1)).count_ones();
    let mut crossings = 0u32;
    if det.alpha & (1 << p) != 0 {
        crossings += below(rest_a, p);
    }
    if det.beta & (1 << p) != 0 {
        crossings += rest_a.count_ones() + below(rest_b, p);
    }
    if det.alpha & (1 << q) != 0 {
        crossings += below(rest_a, q);
    }
    if det.beta & (1 << q) != 0 {
        crossings += rest_a.count_ones() + below(rest_b, q);
    }
    if crossings % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Two-orbital reduced density matrix (16×16) in the product basis
/// (|0⟩,|↑⟩,|↓⟩,|↑↓⟩)_p ⊗ (|0⟩,|↑⟩,|↓⟩,|↑↓⟩)_q, assembled as a sum of one
/// rank-1 contribution per group of determinants sharing the occupation
/// outside (p,q).
pub fn two_orbital_rdm(w: &Wavefunction, p: usize, q: usize) -> Result<Array2<f64>, ObsError> {
    if p == q {
        return Err(ObsError::SameOrbital(p));
    }
    let n = w.space.n_orb();
    if p >= n || q >= n {
        return Err(ObsError::OrbitalRange(p.max(q), n));
    }
    let mask = (1u128 << p) | (1u128 << q);
    let mut groups: std::collections::HashMap<(u128, u128), [f64; 16]> =
        std::collections::HashMap::new();
    let bp = 1u128 << p;
    let bq = 1u128 << q;
    for (d, c) in w.space.dets().iter().zip(&w.coeffs) {
        let key = (d.alpha & !mask, d.beta & !mask);
        let sp = (if d.alpha & bp != 0 { 1 } else { 0 }) + (if d.beta & bp != 0 { 2 } else { 0 });
        let sq = (if d.alpha & bq != 0 { 1 } else { 0 }) + (if d.beta & bq != 0 { 2 } else { 0 });
        let s16 = 4 * local_index(sp) + local_index(sq);
        groups.entry(key).or_insert([0.0; 16])[s16] += eta_sign(d, p, q) * c;
    }
    let mut rho = Array2::zeros((16, 16));
    for v in groups.values() {
        for a in 0..16 {
            if v[a] == 0.0 {
                continue;
            }
            for b in 0..16 {
                rho[[a, b]] += v[a] * v[b];
            }
        }
    }
    Ok(rho)
}

/// Von Neumann entropy in bits; eigenvalues below 1e-14 count as zero.
pub fn entropy_bits(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&l| l > 1e-14)
        .map(|&l| -l * l.log2())
        .sum()
}

pub fn orbital_entropy(w: &Wavefunction, p: usize) -> Result<f64, ObsError> {
    Ok(entropy_bits(&one_orbital_rdm(w, p)?))
}

pub fn pair_entropy(w: &Wavefunction, p: usize, q: usize) -> Result<f64, ObsError> {
    let rho = two_orbital_rdm(w, p, q)?;
    let (vals, _) = linalg::eigh(&rho)?;
    Ok(entropy_bits(vals.as_slice().unwrap()))
}

/// Symmetric orbital-pair mutual information in bits, zero diagonal.
#[derive(Debug, Clone)]
pub struct MiMatrix(pub Array2<f64>);

impl MiMatrix {
    pub fn n_orb(&self) -> usize {
        self.0.nrows()
    }

    /// Off-diagonal mass `Σ_{i≠j} I_ij`.
    pub fn total_mass(&self) -> f64 {
        let mut m = 0.0;
        for i in 0..self.n_orb() {
            for j in 0..self.n_orb() {
                if i != j {
                    m += self.0[[i, j]];
                }
            }
        }
        m
    }

    pub fn to_csv(&self) -> String {
        let n = self.n_orb();
        let mut out = String::new();
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{:.12e}", self.0[[i, j]])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// `I_ij = S(ρ_i) + S(ρ_j) − S(ρ_ij)` over all orbital pairs.
pub fn mutual_information(w: &Wavefunction) -> Result<MiMatrix, ObsError> {
    let n = w.space.n_orb();
    let s1: Vec<f64> = (0..n)
        .map(|p| orbital_entropy(w, p))
        .collect::<Result<_, _>>()?;
    let mut mi = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = s1[i] + s1[j] - pair_entropy(w, i, j)?;
            mi[[i, j]] = v;
            mi[[j, i]] = v;
        }
    }
    Ok(MiMatrix(mi))
}

/// Orbital ordering by the Fiedler vector of the MI graph Laplacian.
/// Disconnected components are ordered separately and concatenated by
/// descending size (ties by smallest original index).
pub fn fiedler_order(mi: &MiMatrix) -> Result<Vec<usize>, ObsError> {
    let n = mi.n_orb();
    // connected components over edges with positive weight
    let mut comp = vec![usize::MAX; n];
    let mut n_comp = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = n_comp;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if comp[j] == usize::MAX && mi.0[[i, j]] > 1e-14 {
                    comp[j] = n_comp;
                    stack.push(j);
                }
            }
        }
        n_comp += 1;
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_comp];
    for (i, &c) in comp.iter().enumerate() {
        members[c].push(i);
    }
    members.sort_by_key(|m| (usize::MAX - m.len(), m[0]));

    let mut order = Vec::with_capacity(n);
    for m in &members {
        if m.len() <= 2 {
            order.extend_from_slice(m);
            continue;
        }
        let k = m.len();
        let mut lap = Array2::zeros((k, k));
        for (a, &i) in m.iter().enumerate() {
            let mut deg = 0.0;
            for (b, &j) in m.iter().enumerate() {
                if a != b {
                    let wij = mi.0[[i, j]].max(0.0);
                    lap[[a, b]] = -wij;
                    deg += wij;
                }
            }
            lap[[a, a]] = deg;
        }
        let (_, vecs) = linalg::eigh(&lap)?;
        let mut fiedler: Vec<f64> = vecs.column(1).to_vec();
        crate::eigen::canonical_sign(&mut fiedler);
        let mut idx: Vec<usize> = (0..k).collect();
        idx.sort_by(|&a, &b| {
            fiedler[a]
                .partial_cmp(&fiedler[b])
                .unwrap()
                .then(m[a].cmp(&m[b]))
        });
        order.extend(idx.into_iter().map(|a| m[a]));
    }
    Ok(order)
}

/// Smallest half-bandwidth `k` whose band `|i-j| ≤ k` holds at least
/// `mass_fraction` of the off-diagonal MI mass under the given ordering.
pub fn k95_bandwidth(mi: &MiMatrix, order: &[usize], mass_fraction: f64) -> usize {
    let n = mi.n_orb();
    assert_eq!(order.len(), n);
    let mut pos = vec![0usize; n];
    for (rank, &orb) in order.iter().enumerate() {
        pos[orb] = rank;
    }
    let total = mi.total_mass();
    if total <= 0.0 {
        return 0;
    }
    let mut by_dist = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d = pos[i].abs_diff(pos[j]);
                by_dist[d] += mi.0[[i, j]];
            }
        }
    }
    let mut acc = 0.0;
    for k in 1..n {
        acc += by_dist[k];
        if acc >= mass_fraction * total {
            return k;
        }
    }
    n - 1
}

/// Orbital-to-center assignment with per-orbital projected weights.
/// `names` lists the pattern centers first, then the fallback center last.
#[derive(Debug, Clone)]
pub struct CenterMap {
    pub names: Vec<String>,
    pub label_of: Vec<usize>,
    pub weights: Array2<f64>,
    pub fallback: usize,
    masks: Vec<u128>,
}

impl CenterMap {
    pub fn n_centers(&self) -> usize {
        self.names.len()
    }

    /// Centers eligible for spin-pattern characters (everything but fallback).
    pub fn pattern_centers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.names.len()).filter(move |&c| c != self.fallback)
    }

    pub fn center_mask(&self, c: usize) -> u128 {
        self.masks[c]
    }
}

/// Assign each orbital (column of the cumulative rotation) to the center set
/// with the largest projected weight, provided it exceeds 40% and the
/// fallback weight; otherwise to the fallback center.
pub fn label_centers(
    rotation: &Array2<f64>,
    center_sets: &[(String, Vec<usize>)],
    fallback_name: &str,
) -> Result<CenterMap, ObsError> {
    let n = rotation.nrows();
    if rotation.ncols() != n {
        return Err(ObsError::Centers("rotation matrix must be square".into()));
    }
    let mut claimed = vec![false; n];
    for (name, set) in center_sets {
        for &i in set {
            if i >= n {
                return Err(ObsError::Centers(format!(
                    "center {name} references orbital {i} beyond {n}"
                )));
            }
            if claimed[i] {
                return Err(ObsError::Centers(format!(
                    "orbital {i} appears in more than one center set"
                )));
            }
            claimed[i] = true;
        }
    }
    let n_named = center_sets.len();
    let fallback = n_named;
    let mut names: Vec<String> = center_sets.iter().map(|(n, _)| n.clone()).collect();
    names.push(fallback_name.to_string());

    let mut weights = Array2::zeros((n, n_named + 1));
    for p in 0..n {
        for (c, (_, set)) in center_sets.iter().enumerate() {
            weights[[p, c]] = set.iter().map(|&i| rotation[[i, p]] * rotation[[i, p]]).sum();
        }
        let fallback_w: f64 = (0..n)
            .filter(|&i| !claimed[i])
            .map(|i| rotation[[i, p]] * rotation[[i, p]])
            .sum();
        weights[[p, fallback]] = fallback_w;
    }

    let mut label_of = vec![fallback; n];
    for p in 0..n {
        if n_named == 0 {
            continue;
        }
        let mut best = 0;
        for c in 1..n_named {
            if weights[[p, c]] > weights[[p, best]] {
                best = c;
            }
        }
        if weights[[p, best]] > 0.4 && weights[[p, best]] > weights[[p, fallback]] {
            label_of[p] = best;
        }
    }

    let mut masks = vec![0u128; n_named + 1];
    for (p, &c) in label_of.iter().enumerate() {
        masks[c] |= 1u128 << p;
    }
    Ok(CenterMap {
        names,
        label_of,
        weights,
        fallback,
        masks,
    })
}

/// Parse a center config: lines `Name: i j k ...`, optional `fallback: Name`.
pub fn parse_center_config(text: &str) -> Result<(Vec<(String, Vec<usize>)>, String), ObsError> {
    let mut sets = Vec::new();
    let mut fallback = "S".to_string();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| ObsError::Centers(format!("expected `name: indices` in `{line}`")))?;
        let name = name.trim();
        if name.eq_ignore_ascii_case("fallback") {
            fallback = rest.trim().to_string();
            continue;
        }
        let idx: Vec<usize> = rest
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| ObsError::Centers(format!("bad orbital index `{t}`")))
            })
            .collect::<Result<_, _>>()?;
        sets.push((name.to_string(), idx));
    }
    Ok((sets, fallback))
}

/// Per-center `S_z` of the dominant determinant, rendered as a pattern string:
/// U for `S_z ≥ 0.5`, D for `S_z ≤ −0.5`, 0 otherwise. One character per
/// pattern center, in declaration order.
pub fn spin_pattern(w: &Wavefunction, centers: &CenterMap) -> String {
    let (dom_row, _) = w.dominant();
    let dom = w.space.det(dom_row);
    let mut pattern = String::new();
    for c in centers.pattern_centers() {
        let mask = centers.center_mask(c);
        let sz =
            0.5 * ((dom.alpha & mask).count_ones() as f64 - (dom.beta & mask).count_ones() as f64);
        pattern.push(if sz >= 0.5 {
            'U'
        } else if sz <= -0.5 {
            'D'
        } else {
            '0'
        });
    }
    pattern
}

/// Minimum count of differing centers between two patterns, over the global
/// spin flip (U ↔ D, 0 fixed).
pub fn reduced_hamming(p1: &str, p2: &str) -> Result<usize, ObsError> {
    if p1.len() != p2.len() {
        return Err(ObsError::PatternLength(p1.len(), p2.len()));
    }
    let ham = |a: &str, b: &str| a.chars().zip(b.chars()).filter(|(x, y)| x != y).count();
    let flipped: String = p1
        .chars()
        .map(|c| match c {
            'U' => 'D',
            'D' => 'U',
            other => other,
        })
        .collect();
    Ok(ham(p1, p2).min(ham(&flipped, p2)))
}

/// One histogram row: determinants touching exactly `touched` centers.
#[derive(Debug, Clone)]
pub struct MulticenterRow {
    pub touched: usize,
    pub n_dets: usize,
    pub weight: f64,
    pub pct_dets: f64,
    pub pct_weight: f64,
    /// None on the dominant (touched = 0) row.
    pub pct_excitation_weight: Option<f64>,
}

/// Classify the top `top_k` determinants by how many centers their occupation
/// touches relative to the dominant determinant, reporting the three
/// normalizations (share of determinants, of weight, of excitation weight).
pub fn multicenter_histogram(
    w: &Wavefunction,
    centers: &CenterMap,
    top_k: usize,
) -> Vec<MulticenterRow> {
    let (dom_row, _) = w.dominant();
    let dom = *w.space.det(dom_row);
    let mut order: Vec<usize> = (0..w.space.len()).collect();
    order.sort_by(|&a, &b| {
        w.coeffs[b]
            .abs()
            .partial_cmp(&w.coeffs[a].abs())
            .unwrap()
            .then(w.space.det(a).cmp(w.space.det(b)))
    });
    order.truncate(top_k);

    let k_max = centers.n_centers();
    let mut counts = vec![0usize; k_max + 1];
    let mut weights = vec![0.0f64; k_max + 1];
    for &row in &order {
        let d = w.space.det(row);
        let diff_a = d.alpha ^ dom.alpha;
        let diff_b = d.beta ^ dom.beta;
        let mut touched = 0;
        for c in 0..k_max {
            let mask = centers.center_mask(c);
            if (diff_a | diff_b) & mask != 0 {
                touched += 1;
            }
        }
        counts[touched] += 1;
        weights[touched] += w.coeffs[row] * w.coeffs[row];
    }
    let total_n: usize = counts.iter().sum();
    let total_w: f64 = weights.iter().sum();
    let exc_w: f64 = total_w - weights[0];
    (0..=k_max)
        .map(|t| MulticenterRow {
            touched: t,
            n_dets: counts[t],
            weight: weights[t],
            pct_dets: 100.0 * counts[t] as f64 / total_n as f64,
            pct_weight: 100.0 * weights[t] / total_w,
            pct_excitation_weight: if t == 0 {
                None
            } else if exc_w > 0.0 {
                Some(100.0 * weights[t] / exc_w)
            } else {
                Some(0.0)
            },
        })
        .collect()
}

pub fn histogram_to_csv(rows: &[MulticenterRow]) -> String {
    let mut out = String::from("touched,n_dets,pct_dets,pct_weight,pct_excitation_weight\n");
    for r in rows {
        let exc = r
            .pct_excitation_weight
            .map(|x| format!("{x:.4}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{}\n",
            r.touched, r.n_dets, r.pct_dets, r.pct_weight, exc
        ));
    }
    out
}
