//! Electronic-structure integrals: FCIDUMP input, model Hamiltonians, and
//! orbital rotations.
//!
//! Two-body integrals are kept in chemist convention `(pq|rs)` with the full
//! 8-fold permutation symmetry folded into a triangular store, matching the
//! FCIDUMP file layout. All Slater-Condon machinery in [`crate::detspace`]
//! is written against this convention.

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HamError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed FCIDUMP header: {0}")]
    BadHeader(String),
    #[error("malformed FCIDUMP record at line {line}: {msg}")]
    BadRecord { line: usize, msg: String },
    #[error("orbital index {index} out of range for NORB={n_orb}")]
    IndexOutOfRange { index: usize, n_orb: usize },
    #[error("rotation matrix is not orthogonal (max |UᵀU - I| = {deviation:.3e})")]
    NotOrthogonal { deviation: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid model spec: {0}")]
    BadModelSpec(String),
}

/// Two-body integrals `(pq|rs)` under 8-fold permutation symmetry.
///
/// Storage is triangular over compound pair indices: `(pq|rs)` with
/// `pq = tri(max(p,q), min(p,q))` and the pair of pairs itself stored
/// triangularly.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoBody {
    n_orb: usize,
    data: Vec<f64>,
}

#[inline]
fn tri(a: usize, b: usize) -> usize {
    debug_assert!(a >= b);
    a * (a + 1) / 2 + b
}

impl TwoBody {
    pub fn zeros(n_orb: usize) -> Self {
        let n_pair = n_orb * (n_orb + 1) / 2;
        TwoBody {
            n_orb,
            data: vec![0.0; n_pair * (n_pair + 1) / 2],
        }
    }

    #[inline]
    fn index(&self, p: usize, q: usize, r: usize, s: usize) -> usize {
        let pq = tri(p.max(q), p.min(q));
        let rs = tri(r.max(s), r.min(s));
        tri(pq.max(rs), pq.min(rs))
    }

    /// Value of `(pq|rs)`; any of the 8 equivalent index orders returns the same entry.
    #[inline]
    pub fn get(&self, p: usize, q: usize, r: usize, s: usize) -> f64 {
        self.data[self.index(p, q, r, s)]
    }

    #[inline]
    pub fn set(&mut self, p: usize, q: usize, r: usize, s: usize, value: f64) {
        let idx = self.index(p, q, r, s);
        self.data[idx] = value;
    }

    pub fn n_orb(&self) -> usize {
        self.n_orb
    }

    /// Raw triangular storage, for serialization.
    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Rebuild from raw triangular storage produced by [`TwoBody::raw`].
    pub fn from_raw(n_orb: usize, data: Vec<f64>) -> Option<Self> {
        let n_pair = n_orb * (n_orb + 1) / 2;
        if data.len() != n_pair * (n_pair + 1) / 2 {
            return None;
        }
        Some(TwoBody { n_orb, data })
    }

    /// Expand into a dense `n⁴` array, index order `(p,q,r,s)` row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n_orb;
        let mut out = vec![0.0; n * n * n * n];
        for p in 0..n {
            for q in 0..n {
                for r in 0..n {
                    for s in 0..n {
                        out[((p * n + q) * n + r) * n + s] = self.get(p, q, r, s);
                    }
                }
            }
        }
        out
    }

    /// Fold a dense `n⁴` array back into triangular storage, symmetrizing over
    /// the 8 equivalent index orders to wash out rounding asymmetry.
    pub fn from_dense(n_orb: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), n_orb.pow(4));
        let n = n_orb;
        let at = |p: usize, q: usize, r: usize, s: usize| dense[((p * n + q) * n + r) * n + s];
        let mut tb = TwoBody::zeros(n_orb);
        for p in 0..n {
            for q in 0..=p {
                for r in 0..n {
                    for s in 0..=r {
                        if tri(p, q) < tri(r, s) {
                            continue;
                        }
                        let avg = (at(p, q, r, s)
                            + at(q, p, r, s)
                            + at(p, q, s, r)
                            + at(q, p, s, r)
                            + at(r, s, p, q)
                            + at(s, r, p, q)
                            + at(r, s, q, p)
                            + at(s, r, q, p))
                            / 8.0;
                        tb.set(p, q, r, s, avg);
                    }
                }
            }
        }
        tb
    }
}

/// One- and two-body integrals plus the constant shift: everything needed to
/// evaluate Hamiltonian matrix elements.
///
/// Immutable after construction; shareable across threads.
#[derive(Debug, Clone)]
pub struct IntegralSet {
    pub n_orb: usize,
    pub h: Array2<f64>,
    pub v: TwoBody,
    pub e_core: f64,
    pub n_alpha: usize,
    pub n_beta: usize,
}

impl IntegralSet {
    pub fn empty(n_orb: usize, n_alpha: usize, n_beta: usize) -> Self {
        assert!(n_alpha <= n_orb && n_beta <= n_orb);
        IntegralSet {
            n_orb,
            h: Array2::zeros((n_orb, n_orb)),
            v: TwoBody::zeros(n_orb),
            e_core: 0.0,
            n_alpha,
            n_beta,
        }
    }
}

/// Hubbard chain with α-scaled random long-range hoppings.
///
/// `t` sets the energy unit, `u` is dimensionless (units of `t`), and
/// `alpha ∈ [0,1]` sweeps from the open chain to the complete graph. The
/// long-range amplitudes `r_ij ~ U[0.5, 1.5]` are drawn from a stream seeded
/// by `seed`, in row-major order over pairs `i < j`, so a fixed seed gives a
/// bit-identical Hamiltonian at every `alpha`.
#[derive(Debug, Clone)]
pub struct GraphModelSpec {
    pub sites: usize,
    pub t: f64,
    pub u: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl GraphModelSpec {
    fn validate(&self) -> Result<(), HamError> {
        if self.sites < 2 {
            return Err(HamError::BadModelSpec(format!(
                "need at least 2 sites, got {}",
                self.sites
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(HamError::BadModelSpec(format!(
                "alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Build the graph-model integrals at half filling (`n_alpha = n_beta = L/2`,
/// rounded down; callers may override the electron counts afterwards).
pub fn build_hubbard_graph(spec: &GraphModelSpec) -> Result<IntegralSet, HamError> {
    spec.validate()?;
    let l = spec.sites;
    let mut ints = IntegralSet::empty(l, l / 2, l / 2);
    for i in 0..l - 1 {
        ints.h[[i, i + 1]] = -spec.t;
        ints.h[[i + 1, i]] = -spec.t;
    }
    // r_ij stream is consumed for every non-nn pair even at alpha = 0, so the
    // draws are pinned to pair positions and shared across an alpha sweep.
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let dist = Uniform::new(0.5, 1.5);
    for i in 0..l {
        for j in i + 1..l {
            if j == i + 1 {
                continue;
            }
            let r_ij = dist.sample(&mut rng);
            let val = -spec.alpha * spec.t * r_ij;
            ints.h[[i, j]] = val;
            ints.h[[j, i]] = val;
        }
    }
    for i in 0..l {
        ints.v.set(i, i, i, i, spec.u * spec.t);
    }
    Ok(ints)
}

/// Parse an FCIDUMP file: namelist header, then `value i j k l` records
/// (1-based; `0 0 0 0` is the core energy, `i j 0 0` one-body).
///
/// Duplicate records with conflicting values are reported on stderr and the
/// last one wins. Point-group symmetry labels are read and ignored.
pub fn read_fcidump(path: &str) -> Result<IntegralSet, HamError> {
    let text = std::fs::read_to_string(path).map_err(|source| HamError::Io {
        path: path.to_string(),
        source,
    })?;
    parse_fcidump(&text)
}

pub fn parse_fcidump(text: &str) -> Result<IntegralSet, HamError> {
    // Header: everything from &FCI up to the closing "/" or "&END".
    let upper = text.to_uppercase();
    let start = upper
        .find("&FCI")
        .ok_or_else(|| HamError::BadHeader("missing &FCI namelist".into()))?;
    let rest = &upper[start + 4..];
    let end_rel = rest
        .find("&END")
        .or_else(|| rest.find('/'))
        .ok_or_else(|| HamError::BadHeader("unterminated namelist".into()))?;
    let header = &rest[..end_rel];
    let body_offset = start + 4 + end_rel + if rest[end_rel..].starts_with("&END") { 4 } else { 1 };

    let get_field = |name: &str| -> Option<String> {
        let pos = header.find(name)?;
        let after = &header[pos + name.len()..];
        let after = after.trim_start().strip_prefix('=')?.trim_start();
        let stop = after
            .find(|c: char| c == ',' || c.is_whitespace())
            .unwrap_or(after.len());
        Some(after[..stop].to_string())
    };
    let norb: usize = get_field("NORB")
        .ok_or_else(|| HamError::BadHeader("missing NORB".into()))?
        .parse()
        .map_err(|_| HamError::BadHeader("unparseable NORB".into()))?;
    let nelec: i64 = get_field("NELEC")
        .ok_or_else(|| HamError::BadHeader("missing NELEC".into()))?
        .parse()
        .map_err(|_| HamError::BadHeader("unparseable NELEC".into()))?;
    let ms2: i64 = get_field("MS2")
        .ok_or_else(|| HamError::BadHeader("missing MS2".into()))?
        .parse()
        .map_err(|_| HamError::BadHeader("unparseable MS2".into()))?;
    if nelec < 0 || (nelec + ms2) % 2 != 0 || nelec + ms2 < 0 || nelec - ms2 < 0 {
        return Err(HamError::BadHeader(format!(
            "inconsistent NELEC={nelec}, MS2={ms2}"
        )));
    }
    let n_alpha = ((nelec + ms2) / 2) as usize;
    let n_beta = ((nelec - ms2) / 2) as usize;
    if n_alpha > norb || n_beta > norb {
        return Err(HamError::BadHeader(format!(
            "electron counts ({n_alpha}a,{n_beta}b) exceed NORB={norb}"
        )));
    }

    let mut ints = IntegralSet::empty(norb, n_alpha, n_beta);
    let mut seen: std::collections::HashMap<(usize, usize, usize, usize), f64> =
        std::collections::HashMap::new();
    for (lineno, line) in text[body_offset..].lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        // Fortran-style D exponents appear in the wild
        let value: f64 = it
            .next()
            .unwrap()
            .replace(['D', 'd'], "E")
            .parse()
            .map_err(|_| HamError::BadRecord {
                line: lineno + 1,
                msg: format!("bad value in `{line}`"),
            })?;
        let mut idx = [0usize; 4];
        for slot in idx.iter_mut() {
            let tok = it.next().ok_or(HamError::BadRecord {
                line: lineno + 1,
                msg: format!("expected 4 indices in `{line}`"),
            })?;
            *slot = tok.parse().map_err(|_| HamError::BadRecord {
                line: lineno + 1,
                msg: format!("bad index `{tok}`"),
            })?;
        }
        for &i in &idx {
            if i > norb {
                return Err(HamError::IndexOutOfRange {
                    index: i,
                    n_orb: norb,
                });
            }
        }
        let [i, j, k, l] = idx;
        let key = (i, j, k, l);
        if let Some(&prev) = seen.get(&key) {
            if prev != value {
                eprintln!(
                    "fcidump: duplicate record ({i} {j} {k} {l}) {prev} -> {value}, keeping last"
                );
            }
        }
        seen.insert(key, value);
        match (i, j, k, l) {
            (0, 0, 0, 0) => ints.e_core = value,
            (i, j, 0, 0) if i > 0 && j > 0 => {
                ints.h[[i - 1, j - 1]] = value;
                ints.h[[j - 1, i - 1]] = value;
            }
            (i, j, k, l) if i > 0 && j > 0 && k > 0 && l > 0 => {
                ints.v.set(i - 1, j - 1, k - 1, l - 1, value);
            }
            _ => {
                return Err(HamError::BadRecord {
                    line: lineno + 1,
                    msg: format!("unrecognized index pattern ({i} {j} {k} {l})"),
                })
            }
        }
    }
    Ok(ints)
}

/// Maximum deviation of `UᵀU` from the identity.
pub fn orthogonality_deviation(u: &Array2<f64>) -> f64 {
    let n = u.nrows();
    let utu = u.t().dot(u);
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((utu[[i, j]] - target).abs());
        }
    }
    dev
}

/// Change of orbital basis: `h' = Uᵀ h U` and the four-index transform of the
/// two-body integrals, done as four successive one-index contractions.
pub fn rotate_integrals(ints: &IntegralSet, u: &Array2<f64>) -> Result<IntegralSet, HamError> {
    let n = ints.n_orb;
    if u.nrows() != n || u.ncols() != n {
        return Err(HamError::DimensionMismatch {
            expected: n,
            got: u.nrows(),
        });
    }
    let dev = orthogonality_deviation(u);
    if dev > 1e-10 {
        return Err(HamError::NotOrthogonal { deviation: dev });
    }

    let h_new = u.t().dot(&ints.h).dot(u);

    // One index at a time: w[..., p] = Σ_d w[..., d] U[d, p]. Each pass
    // rotates the last axis and cyclically transposes, so after four passes
    // every index is transformed and the order is restored.
    let mut cur = ints.v.to_dense();
    let mut next = vec![0.0; cur.len()];
    for _pass in 0..4 {
        let n3 = n * n * n;
        for block in 0..n3 {
            let row = &cur[block * n..(block + 1) * n];
            for p in 0..n {
                let mut acc = 0.0;
                for (d, &w) in row.iter().enumerate() {
                    acc += w * u[[d, p]];
                }
                // transpose (a,b,c,p) -> (p,a,b,c)
                next[p * n3 + block] = acc;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }

    Ok(IntegralSet {
        n_orb: n,
        h: h_new,
        v: TwoBody::from_dense(n, &cur),
        e_core: ints.e_core,
        n_alpha: ints.n_alpha,
        n_beta: ints.n_beta,
    })
}
