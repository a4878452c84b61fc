//! Davidson eigensolver for the projected CI Hamiltonian, a coupling cache
//! for fast matvecs, and a dense diagonalization fallback for small spaces.

use crate::detspace::{excitation_degree, matrix_element, DetSet};
use crate::hamio::IntegralSet;
use crate::linalg;
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EigenError {
    #[error("determinant space is empty")]
    EmptySpace,
    #[error("connection cache would need {needed} entries, budget is {budget}")]
    CacheBudget { needed: usize, budget: usize },
    #[error("space of {n} determinants exceeds the dense limit {limit}")]
    DenseLimit { n: usize, limit: usize },
    #[error("invalid solver config: {0}")]
    BadConfig(String),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
}

/// Davidson controls. `energy_tol` is the stop threshold on `|ΔE_iter|`.
#[derive(Debug, Clone)]
pub struct DavidsonConfig {
    pub energy_tol: f64,
    pub max_subspace: usize,
    pub max_iters: usize,
    pub warm_start: Option<Vec<f64>>,
    pub use_connection_cache: bool,
    pub cache_budget: usize,
}

impl Default for DavidsonConfig {
    fn default() -> Self {
        DavidsonConfig {
            energy_tol: 1e-7,
            max_subspace: 8,
            max_iters: 400,
            warm_start: None,
            use_connection_cache: true,
            cache_budget: 50_000_000,
        }
    }
}

impl DavidsonConfig {
    pub fn with_tol(energy_tol: f64) -> Self {
        DavidsonConfig {
            energy_tol,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<(), EigenError> {
        if !(self.energy_tol > 0.0) {
            return Err(EigenError::BadConfig(format!(
                "energy_tol must be positive, got {}",
                self.energy_tol
            )));
        }
        if self.max_subspace < 2 {
            return Err(EigenError::BadConfig(format!(
                "max_subspace must be at least 2, got {}",
                self.max_subspace
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DavidsonResult {
    pub energy: f64,
    pub coeffs: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub matvecs: usize,
    pub residual_norm: f64,
    /// Lowest Ritz value per iteration, with `NaN` marking subspace restarts.
    pub ritz_history: Vec<f64>,
}

/// Per-row nonzero couplings `(column, H_ij)`, diagonal included.
#[derive(Debug, Clone)]
pub struct ConnectionCache {
    rows: Vec<Vec<(u32, f64)>>,
}

impl ConnectionCache {
    pub fn n_entries(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    /// `σ = H v` summed row-major over the cached entries.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        self.rows
            .par_iter()
            .map(|row| {
                let mut acc = 0.0;
                for &(j, hij) in row {
                    acc += hij * v[j as usize];
                }
                acc
            })
            .collect()
    }
}

/// Visit the nonzero off-diagonal couplings of row `i` in the fixed order of
/// [`DetSet::visit_connected`].
fn visit_row_couplings<F: FnMut(usize, f64)>(space: &DetSet, ints: &IntegralSet, i: usize, mut f: F) {
    let di = space.det(i);
    space.visit_connected(i, |j| {
        let hij = matrix_element(di, space.det(j), ints);
        if hij != 0.0 {
            f(j, hij);
        }
    });
}

/// Basis-independent coupling topology of a determinant set: every connected
/// ordered pair, kept so the matrix elements can be re-evaluated cheaply when
/// only the integral values change (orbital-rotation line searches).
#[derive(Debug, Clone)]
pub struct ConnectionStructure {
    rows: Vec<Vec<u32>>,
}

pub fn build_connection_structure(space: &DetSet) -> ConnectionStructure {
    let rows = (0..space.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            space.visit_connected(i, |j| row.push(j as u32));
            row
        })
        .collect();
    ConnectionStructure { rows }
}

impl ConnectionStructure {
    /// Evaluate the matrix elements against an integral set, dropping zeros.
    pub fn evaluate(&self, space: &DetSet, ints: &IntegralSet) -> ConnectionCache {
        let rows = (0..space.len())
            .into_par_iter()
            .map(|i| {
                let di = space.det(i);
                let mut row = vec![(
                    i as u32,
                    crate::detspace::diagonal_element(di, ints),
                )];
                for &j in &self.rows[i] {
                    let hij = matrix_element(di, space.det(j as usize), ints);
                    if hij != 0.0 {
                        row.push((j, hij));
                    }
                }
                row
            })
            .collect();
        ConnectionCache { rows }
    }
}

pub fn build_connection_cache(
    space: &DetSet,
    ints: &IntegralSet,
    budget: usize,
) -> Result<ConnectionCache, EigenError> {
    let rows: Vec<Vec<(u32, f64)>> = (0..space.len())
        .into_par_iter()
        .map(|i| {
            let mut row = vec![(i as u32, crate::detspace::diagonal_element(space.det(i), ints))];
            visit_row_couplings(space, ints, i, |j, hij| row.push((j as u32, hij)));
            row
        })
        .collect();
    let needed: usize = rows.iter().map(|r| r.len()).sum();
    if needed > budget {
        return Err(EigenError::CacheBudget { needed, budget });
    }
    Ok(ConnectionCache { rows })
}

/// On-the-fly `σ = H v` using the same per-row visit order as the cache.
pub fn matvec_direct(space: &DetSet, ints: &IntegralSet, v: &[f64]) -> Vec<f64> {
    (0..space.len())
        .into_par_iter()
        .map(|i| {
            let mut acc = crate::detspace::diagonal_element(space.det(i), ints) * v[i];
            visit_row_couplings(space, ints, i, |j, hij| acc += hij * v[j]);
            acc
        })
        .collect()
}

/// Symmetric eigendecomposition, eigenvalues ascending, vectors in columns.
pub fn eigh_dense(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>), EigenError> {
    linalg::eigh(m).map_err(|e| EigenError::Linalg(e.to_string()))
}

/// Assemble the dense Hamiltonian of a determinant space.
pub fn dense_hamiltonian(space: &DetSet, ints: &IntegralSet) -> Array2<f64> {
    let n = space.len();
    let mut h = Array2::zeros((n, n));
    for i in 0..n {
        h[[i, i]] = crate::detspace::diagonal_element(space.det(i), ints);
        for j in i + 1..n {
            let (da, db) = excitation_degree(space.det(i), space.det(j));
            if da + db <= 2 {
                let hij = matrix_element(space.det(i), space.det(j), ints);
                h[[i, j]] = hij;
                h[[j, i]] = hij;
            }
        }
    }
    h
}

pub const DENSE_LIMIT_DEFAULT: usize = 10_000;

/// Exact lowest eigenpair by dense symmetric diagonalization. Intended as the
/// oracle for small spaces; refuses anything above `limit`.
pub fn dense_ground_state(
    space: &DetSet,
    ints: &IntegralSet,
    limit: usize,
) -> Result<(f64, Vec<f64>), EigenError> {
    let n = space.len();
    if n == 0 {
        return Err(EigenError::EmptySpace);
    }
    if n > limit {
        return Err(EigenError::DenseLimit { n, limit });
    }
    let h = dense_hamiltonian(space, ints);
    let (e0, mut v) = linalg::eigh_lowest(&h).map_err(|e| EigenError::Linalg(e.to_string()))?;
    canonical_sign(&mut v);
    Ok((e0, v))
}

/// Fix the overall sign so the largest-magnitude entry is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, c) in v.iter().enumerate() {
        if c.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for c in v.iter_mut() {
            *c = -*c;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Lowest eigenpair of the projected Hamiltonian by Davidson iteration with a
/// diagonal preconditioner. Restarts with the surviving Ritz vector when the
/// subspace reaches `max_subspace`. Non-convergence is reported through the
/// `converged` flag, not as an error.
pub fn davidson_lowest(
    space: &DetSet,
    ints: &IntegralSet,
    cfg: &DavidsonConfig,
) -> Result<DavidsonResult, EigenError> {
    let n = space.len();
    if n == 0 {
        return Err(EigenError::EmptySpace);
    }
    let cache = if cfg.use_connection_cache {
        build_connection_cache(space, ints, cfg.cache_budget).ok()
    } else {
        None
    };
    let diag: Vec<f64> = (0..n)
        .map(|i| crate::detspace::diagonal_element(space.det(i), ints))
        .collect();
    let apply = |v: &[f64]| -> Vec<f64> {
        match &cache {
            Some(c) => c.matvec(v),
            None => matvec_direct(space, ints, v),
        }
    };
    davidson_driver(n, &diag, apply, cfg)
}

/// Davidson against a prebuilt coupling cache; the diagonal is read from it.
pub fn davidson_with_cache(
    cache: &ConnectionCache,
    cfg: &DavidsonConfig,
) -> Result<DavidsonResult, EigenError> {
    let n = cache.rows.len();
    if n == 0 {
        return Err(EigenError::EmptySpace);
    }
    let diag: Vec<f64> = (0..n)
        .map(|i| {
            cache.rows[i]
                .iter()
                .find(|&&(j, _)| j as usize == i)
                .map(|&(_, v)| v)
                .unwrap_or(0.0)
        })
        .collect();
    davidson_driver(n, &diag, |v| cache.matvec(v), cfg)
}

fn davidson_driver<F: Fn(&[f64]) -> Vec<f64>>(
    n: usize,
    diag: &[f64],
    apply: F,
    cfg: &DavidsonConfig,
) -> Result<DavidsonResult, EigenError> {
    cfg.validate()?;
    let mut v0 = match &cfg.warm_start {
        Some(w) => {
            if w.len() != n {
                return Err(EigenError::BadConfig(format!(
                    "warm start length {} does not match space size {n}",
                    w.len()
                )));
            }
            w.clone()
        }
        None => {
            let mut lowest = 0;
            for (i, &d) in diag.iter().enumerate() {
                if d < diag[lowest] {
                    lowest = i;
                }
            }
            let mut e = vec![0.0; n];
            e[lowest] = 1.0;
            e
        }
    };
    let nv = norm(&v0);
    if nv == 0.0 {
        return Err(EigenError::BadConfig("warm start has zero norm".into()));
    }
    for x in v0.iter_mut() {
        *x /= nv;
    }

    let mut basis: Vec<Vec<f64>> = vec![v0.clone()];
    let mut images: Vec<Vec<f64>> = vec![apply(&v0)];
    let mut matvecs = 1;
    if cfg.warm_start.is_some() && n > 1 && cfg.max_subspace > 2 {
        // Anchor a warm-started solve with the lowest-diagonal direction so a
        // stale vector cannot park the iteration on an excited plateau.
        let mut lowest = 0;
        for (i, &d) in diag.iter().enumerate() {
            if d < diag[lowest] {
                lowest = i;
            }
        }
        let mut e = vec![0.0; n];
        e[lowest] = 1.0;
        let o = dot(&basis[0], &e);
        for (x, b) in e.iter_mut().zip(&basis[0]) {
            *x -= o * b;
        }
        let ne = norm(&e);
        if ne > 1e-8 {
            for x in e.iter_mut() {
                *x /= ne;
            }
            images.push(apply(&e));
            basis.push(e);
            matvecs += 1;
        }
    }
    let mut theta_prev: Option<f64> = None;
    let mut best = DavidsonResult {
        energy: f64::INFINITY,
        coeffs: v0,
        converged: false,
        iterations: 0,
        matvecs: 0,
        residual_norm: f64::INFINITY,
        ritz_history: Vec::new(),
    };

    for iter in 0..cfg.max_iters {
        let k = basis.len();
        let mut t = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                t[[i, j]] = dot(&basis[i], &images[j]);
            }
        }
        let t = (&t + &t.t()) / 2.0;
        let (vals, vecs) = eigh_dense(&t)?;
        let theta = vals[0];
        let s = vecs.column(0);
        best.ritz_history.push(theta);

        let mut ritz = vec![0.0; n];
        let mut ritz_image = vec![0.0; n];
        for (i, &si) in s.iter().enumerate() {
            for x in 0..n {
                ritz[x] += si * basis[i][x];
                ritz_image[x] += si * images[i][x];
            }
        }
        let mut residual: Vec<f64> = ritz_image
            .iter()
            .zip(&ritz)
            .map(|(hv, v)| hv - theta * v)
            .collect();
        let res_norm = norm(&residual);

        best.energy = theta;
        best.coeffs = ritz.clone();
        best.iterations = iter + 1;
        best.matvecs = matvecs;
        best.residual_norm = res_norm;

        // Stop on |ΔE_iter|, with a residual guard so a plateau far from any
        // eigenpair does not read as convergence.
        let residual_guard = cfg.energy_tol.sqrt() * theta.abs().max(1.0);
        let de_converged = theta_prev.map_or(false, |p| (theta - p).abs() < cfg.energy_tol)
            && res_norm <= residual_guard;
        let res_converged = res_norm < 1e-13 * theta.abs().max(1.0);
        if de_converged || res_converged {
            best.converged = true;
            break;
        }
        theta_prev = Some(theta);

        if k == cfg.max_subspace {
            // Restart with the surviving Ritz pair; its image is already
            // known, and the expansion below continues against the collapsed
            // basis within the same iteration.
            basis = vec![ritz];
            images = vec![ritz_image];
            best.ritz_history.push(f64::NAN);
        }

        for (x, r) in residual.iter_mut().enumerate() {
            let mut d = theta - diag[x];
            if d.abs() < 1e-8 {
                d = if d < 0.0 { -1e-8 } else { 1e-8 };
            }
            *r /= d;
        }
        // Classical Gram-Schmidt with one re-orthogonalization pass if the
        // overlap residual check fails.
        for pass in 0..2 {
            for b in &basis {
                let o = dot(b, &residual);
                for (x, bx) in residual.iter_mut().zip(b) {
                    *x -= o * bx;
                }
            }
            if pass == 0 {
                let worst = basis
                    .iter()
                    .map(|b| dot(b, &residual).abs())
                    .fold(0.0f64, f64::max);
                if worst <= 1e-10 * norm(&residual).max(1e-300) {
                    break;
                }
            }
        }
        let tn = norm(&residual);
        if tn < 1e-12 {
            // Subspace is H-invariant to rounding; the Ritz pair is exact on it.
            best.converged = true;
            break;
        }
        for x in residual.iter_mut() {
            *x /= tn;
        }
        images.push(apply(&residual));
        basis.push(residual);
        matvecs += 1;
    }

    canonical_sign(&mut best.coeffs);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detspace::{DetSet, Determinant};
    use crate::hamio::{build_hubbard_graph, GraphModelSpec, IntegralSet};

    fn dimer_space() -> (DetSet, IntegralSet) {
        let ints = build_hubbard_graph(&GraphModelSpec {
            sites: 2,
            t: 1.0,
            u: 4.0,
            alpha: 0.0,
            seed: 0,
        })
        .unwrap();
        (DetSet::full_space(2, 1, 1).unwrap(), ints)
    }

    #[test]
    fn two_by_two_synthetic() {
        // one electron on two orbitals with h = [[0,1],[1,0]]
        let mut ints = IntegralSet::empty(2, 1, 0);
        ints.h[[0, 1]] = 1.0;
        ints.h[[1, 0]] = 1.0;
        let space = DetSet::build_groups(
            vec![Determinant::new(0b01, 0), Determinant::new(0b10, 0)],
            2,
        )
        .unwrap();
        let r = davidson_lowest(&space, &ints, &DavidsonConfig::with_tol(1e-10)).unwrap();
        assert!(r.converged);
        assert!((r.energy - (-1.0)).abs() < 1e-10);
    }

    #[test]
    fn dimer_closed_form() {
        let (space, ints) = dimer_space();
        let exact = (4.0 - (16.0f64 + 16.0).sqrt()) / 2.0;
        let r = davidson_lowest(&space, &ints, &DavidsonConfig::with_tol(1e-10)).unwrap();
        assert!((r.energy - exact).abs() < 1e-9, "{} vs {exact}", r.energy);
        let (ed, _) = dense_ground_state(&space, &ints, 100).unwrap();
        assert!((ed - exact).abs() < 1e-12);
    }

    #[test]
    fn dimer_cache_census() {
        let (space, ints) = dimer_space();
        let cache = build_connection_cache(&space, &ints, 1 << 20).unwrap();
        // 4 diagonal entries + 8 off-diagonal single hops (4 symmetric pairs)
        assert_eq!(cache.n_entries(), 12);
        let single = DetSet::build_groups(vec![Determinant::new(0b01, 0b01)], 2).unwrap();
        let c1 = build_connection_cache(&single, &ints, 10).unwrap();
        assert_eq!(c1.n_entries(), 1);
    }

    #[test]
    fn cached_equals_direct_matvec() {
        let ints = build_hubbard_graph(&GraphModelSpec {
            sites: 6,
            t: 1.0,
            u: 4.0,
            alpha: 1.0,
            seed: 3,
        })
        .unwrap();
        let space = DetSet::full_space(6, 3, 3).unwrap();
        let cache = build_connection_cache(&space, &ints, 1 << 24).unwrap();
        let v: Vec<f64> = (0..space.len())
            .map(|i| ((i * 29 + 17) % 101) as f64 / 50.5 - 1.0)
            .collect();
        let a = cache.matvec(&v);
        let b = matvec_direct(&space, &ints, &v);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn cache_budget_exceeded() {
        let (space, ints) = dimer_space();
        assert!(matches!(
            build_connection_cache(&space, &ints, 3),
            Err(EigenError::CacheBudget { .. })
        ));
    }

    #[test]
    fn warm_start_converges_immediately() {
        let (space, ints) = dimer_space();
        let (_, exact_vec) = dense_ground_state(&space, &ints, 100).unwrap();
        let cfg = DavidsonConfig {
            warm_start: Some(exact_vec),
            ..DavidsonConfig::with_tol(1e-10)
        };
        let r = davidson_lowest(&space, &ints, &cfg).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn davidson_matches_dense_l6() {
        let ints = build_hubbard_graph(&GraphModelSpec {
            sites: 6,
            t: 1.0,
            u: 4.0,
            alpha: 0.6,
            seed: 5,
        })
        .unwrap();
        let space = DetSet::full_space(6, 3, 3).unwrap();
        let (ed, _) = dense_ground_state(&space, &ints, 1000).unwrap();
        let r = davidson_lowest(&space, &ints, &DavidsonConfig::with_tol(1e-9)).unwrap();
        assert!(r.converged);
        assert!((r.energy - ed).abs() < 1e-8, "{} vs {ed}", r.energy);
        assert!(r.energy >= ed - 1e-9, "variational bound violated");
    }

    #[test]
    fn ritz_sequence_monotone_within_restart_windows() {
        let ints = build_hubbard_graph(&GraphModelSpec {
            sites: 6,
            t: 1.0,
            u: 4.0,
            alpha: 1.0,
            seed: 9,
        })
        .unwrap();
        let space = DetSet::full_space(6, 3, 3).unwrap();
        let r = davidson_lowest(&space, &ints, &DavidsonConfig::with_tol(1e-11)).unwrap();
        let mut restarts = 0;
        let mut prev: Option<f64> = None;
        for &theta in &r.ritz_history {
            if theta.is_nan() {
                restarts += 1;
                prev = None;
                continue;
            }
            if let Some(p) = prev {
                assert!(theta <= p + 1e-12, "Ritz value rose within a window: {p} -> {theta}");
            }
            prev = Some(theta);
        }
        assert!(restarts >= 1, "solver never restarted; window test vacuous");
    }

    #[test]
    fn zero_dimensional_rejected() {
        let (_, ints) = dimer_space();
        let space = DetSet::full_space(2, 1, 1).unwrap();
        let cfg = DavidsonConfig {
            energy_tol: -1.0,
            ..Default::default()
        };
        assert!(davidson_lowest(&space, &ints, &cfg).is_err());
    }
}
