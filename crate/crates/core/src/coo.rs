//! Core-optimized orbitals: antisymmetric rotation generator, matrix
//! exponential, closed-form orbital gradient from the core's densities, and
//! BFGS with projected-CI re-diagonalization inside every line-search trial.
//!
//! After each accepted step the integrals are rotated and the generator is
//! re-anchored at zero; the cumulative rotation matrix is tracked for
//! snapshot export and center labeling.

use crate::detspace::DetSet;
use crate::eigen::{build_connection_structure, davidson_with_cache, DavidsonConfig, EigenError};
use crate::hamio::{rotate_integrals, HamError, IntegralSet};
use crate::linalg;
use crate::obsrv::{compute_rdms, Rdm1, Rdm2};
use ndarray::Array2;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CooError {
    #[error("kappa parameter vector has length {0}, expected {1}")]
    ParamLength(usize, usize),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Ham(#[from] HamError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error("dimension mismatch between densities ({0}) and integrals ({1})")]
    Dimension(usize, usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed snapshot file: {0}")]
    BadSnapshot(String),
}

/// Antisymmetric rotation generator, parametrized by the `n(n-1)/2` entries
/// `κ_ai` with `a > i`, row-major over `(a, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kappa {
    pub n_orb: usize,
    pub params: Vec<f64>,
}

pub fn n_kappa_params(n_orb: usize) -> usize {
    n_orb * (n_orb - 1) / 2
}

impl Kappa {
    pub fn zeros(n_orb: usize) -> Self {
        Kappa {
            n_orb,
            params: vec![0.0; n_kappa_params(n_orb)],
        }
    }

    pub fn from_params(n_orb: usize, params: Vec<f64>) -> Result<Self, CooError> {
        if params.len() != n_kappa_params(n_orb) {
            return Err(CooError::ParamLength(params.len(), n_kappa_params(n_orb)));
        }
        Ok(Kappa { n_orb, params })
    }

    /// Expand into the full antisymmetric matrix.
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.n_orb;
        let mut m = Array2::zeros((n, n));
        let mut k = 0;
        for a in 1..n {
            for i in 0..a {
                m[[a, i]] = self.params[k];
                m[[i, a]] = -self.params[k];
                k += 1;
            }
        }
        m
    }

    pub fn norm(&self) -> f64 {
        self.params.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `U = e^κ` by Padé approximation with scaling and squaring. The result is
/// orthogonal to machine precision for any finite antisymmetric input.
pub fn expm_antisymmetric(kappa: &Kappa) -> Result<Array2<f64>, CooError> {
    expm(&kappa.to_matrix())
}

fn expm(a: &Array2<f64>) -> Result<Array2<f64>, CooError> {
    let n = a.nrows();
    let norm1 = (0..n)
        .map(|j| (0..n).map(|i| a[[i, j]].abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let theta13 = 5.371_920_351_148_152;
    let s = if norm1 > theta13 {
        (norm1 / theta13).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(s);

    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let eye: Array2<f64> = Array2::eye(n);
    let a2 = scaled.dot(&scaled);
    let a4 = a2.dot(&a2);
    let a6 = a4.dot(&a2);
    let u_inner = &a6 * B[13] + &a4 * B[11] + &a2 * B[9];
    let u = scaled.dot(&(a6.dot(&u_inner) + &a6 * B[7] + &a4 * B[5] + &a2 * B[3] + &eye * B[1]));
    let v_inner = &a6 * B[12] + &a4 * B[10] + &a2 * B[8];
    let v = a6.dot(&v_inner) + &a6 * B[6] + &a4 * B[4] + &a2 * B[2] + &eye * B[0];

    let mut r = linalg::solve_general(&(&v - &u), &(&v + &u))?;
    for _ in 0..s {
        r = r.dot(&r);
    }
    Ok(r)
}

/// Closed-form orbital gradient `∂E/∂κ_ai` at `κ = 0` for fixed CI
/// coefficients: generalized Fock `F_pq = Σ_r h_pr γ_qr + Σ_rst (pr|st) Γ_qrst`,
/// gradient `g_ai = 2 (F_ai − F_ia)`.
pub fn orbital_gradient(
    rdm1: &Rdm1,
    rdm2: &Rdm2,
    ints: &IntegralSet,
) -> Result<Vec<f64>, CooError> {
    let n = ints.n_orb;
    if rdm1.0.nrows() != n || rdm2.n_orb() != n {
        return Err(CooError::Dimension(rdm1.0.nrows(), n));
    }
    let mut fock = Array2::zeros((n, n));
    for p in 0..n {
        for q in 0..n {
            let mut f = 0.0;
            for r in 0..n {
                f += ints.h[[p, r]] * rdm1.0[[q, r]];
            }
            fock[[p, q]] = f;
        }
    }
    for p in 0..n {
        for q in 0..n {
            let mut f = 0.0;
            for r in 0..n {
                for s in 0..n {
                    for t in 0..n {
                        let v = ints.v.get(p, r, s, t);
                        if v != 0.0 {
                            f += v * rdm2.get(q, r, s, t);
                        }
                    }
                }
            }
            fock[[p, q]] += f;
        }
    }
    let mut g = Vec::with_capacity(n_kappa_params(n));
    for a in 1..n {
        for i in 0..a {
            g.push(2.0 * (fock[[a, i]] - fock[[i, a]]));
        }
    }
    Ok(g)
}

/// BFGS controls; defaults follow the orbital-optimizer settings used per
/// outer cycle (`maxiter` 100, `ftol` 1e-8, `davidson_tol` 1e-7).
#[derive(Debug, Clone)]
pub struct CooConfig {
    pub maxiter: usize,
    pub ftol: f64,
    pub davidson_tol: f64,
    pub delta_tol: f64,
    pub max_line_search: usize,
    pub b0_probe_step: f64,
    pub curvature_floor: f64,
    pub ridge: f64,
}

impl Default for CooConfig {
    fn default() -> Self {
        CooConfig {
            maxiter: 100,
            ftol: 1e-8,
            davidson_tol: 1e-7,
            delta_tol: 0.0,
            max_line_search: 10,
            b0_probe_step: 1e-4,
            curvature_floor: 1e-6,
            ridge: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CooResult {
    /// Cumulative orthogonal rotation applied to the input integrals.
    pub rotation: Array2<f64>,
    pub rotated_ints: IntegralSet,
    pub energy: f64,
    /// CI coefficients of the final re-diagonalization, aligned with the core.
    pub coeffs: Vec<f64>,
    /// Energy after each accepted step, starting with the initial energy.
    pub accepted_energies: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize the projected-CI energy of a fixed core over the orbital
/// rotation. Every line-search trial rotates the integrals by `e^{ακ}` and
/// re-diagonalizes on the unchanged core, warm-started; a trial is accepted
/// when `E_try ≤ E_prev + δ` with `δ = max(δ_tol, 1e-12 |E_prev|)`. After
/// acceptance the generator is re-anchored at zero.
pub fn bfgs_orbital_opt(
    core: &DetSet,
    ints: &IntegralSet,
    cfg: &CooConfig,
) -> Result<CooResult, CooError> {
    let n = ints.n_orb;
    let n_par = n_kappa_params(n);
    let structure = build_connection_structure(core);

    let solve =
        |ints_cur: &IntegralSet, warm: Option<&[f64]>| -> Result<(f64, Vec<f64>), CooError> {
            let cache = structure.evaluate(core, ints_cur);
            let dcfg = DavidsonConfig {
                energy_tol: cfg.davidson_tol,
                warm_start: warm.map(|w| w.to_vec()),
                ..Default::default()
            };
            let r = davidson_with_cache(&cache, &dcfg)?;
            Ok((r.energy, r.coeffs))
        };

    let mut ints_cur = ints.clone();
    let mut rotation: Array2<f64> = Array2::eye(n);
    let (mut e_cur, mut coeffs) = solve(&ints_cur, None)?;
    let mut accepted_energies = vec![e_cur];

    let gradient_at = |ints_at: &IntegralSet,
                       coeffs_at: &[f64]|
     -> Result<(Vec<f64>, Rdm1, Rdm2), CooError> {
        let w = crate::detspace::Wavefunction::new(core.clone(), coeffs_at.to_vec())
            .expect("core coefficients are normalized");
        let (g1, g2) = compute_rdms(&w);
        let g = orbital_gradient(&g1, &g2, ints_at)?;
        Ok((g, g1, g2))
    };

    let (mut grad, rdm1, rdm2) = gradient_at(&ints_cur, &coeffs)?;

    // B0 from finite-difference probes of the gradient along each coordinate,
    // with the densities held fixed.
    let mut b = Array2::eye(n_par);
    {
        let eps = cfg.b0_probe_step;
        for k in 0..n_par {
            let mut kappa = Kappa::zeros(n);
            kappa.params[k] = eps;
            let u = expm_antisymmetric(&kappa)?;
            let probe_ints = rotate_integrals(&ints_cur, &u)?;
            let g_probe = orbital_gradient(&rdm1, &rdm2, &probe_ints)?;
            let curv = (g_probe[k] - grad[k]) / eps;
            b[[k, k]] = curv.max(1e-6);
        }
    }

    let mut iterations = 0;
    let mut converged = false;
    for _t in 0..cfg.maxiter {
        iterations += 1;
        let mut shifted = b.clone();
        for k in 0..n_par {
            shifted[[k, k]] += cfg.ridge;
        }
        let direction = match linalg::solve_spd(&shifted, &grad) {
            Ok(mut d) => {
                for x in d.iter_mut() {
                    *x = -*x;
                }
                d
            }
            Err(_) => grad.iter().map(|g| -g).collect(),
        };

        let e_prev = e_cur;
        let delta = cfg.delta_tol.max(1e-12 * e_prev.abs());
        let mut alpha = 1.0;
        let mut accepted = None;
        for _trial in 0..cfg.max_line_search {
            let step: Vec<f64> = direction.iter().map(|d| alpha * d).collect();
            let kappa = Kappa::from_params(n, step.clone())?;
            let u_try = expm_antisymmetric(&kappa)?;
            let ints_try = rotate_integrals(&ints_cur, &u_try)?;
            let (e_try, c_try) = solve(&ints_try, Some(&coeffs))?;
            if e_try <= e_prev + delta {
                accepted = Some((step, u_try, ints_try, e_try, c_try));
                break;
            }
            alpha /= 2.0;
        }
        let Some((step, u_acc, ints_acc, e_acc, c_acc)) = accepted else {
            // line search exhausted: stop with the current state
            break;
        };

        rotation = rotation.dot(&u_acc);
        ints_cur = ints_acc;
        e_cur = e_acc;
        coeffs = c_acc;
        accepted_energies.push(e_cur);

        let (grad_new, _, _) = gradient_at(&ints_cur, &coeffs)?;

        // BFGS update in the re-anchored frame: s is the accepted step from 0.
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let ys: f64 = y.iter().zip(&step).map(|(a, b)| a * b).sum();
        if ys > cfg.curvature_floor {
            let bs: Vec<f64> = (0..n_par)
                .map(|i| (0..n_par).map(|j| b[[i, j]] * step[j]).sum())
                .collect();
            let sbs: f64 = step.iter().zip(&bs).map(|(a, b)| a * b).sum();
            if sbs > 0.0 {
                for i in 0..n_par {
                    for j in 0..n_par {
                        b[[i, j]] += y[i] * y[j] / ys - bs[i] * bs[j] / sbs;
                    }
                }
            }
        }
        grad = grad_new;

        if (e_prev - e_cur).abs() < cfg.ftol {
            converged = true;
            break;
        }
    }

    Ok(CooResult {
        rotation,
        rotated_ints: ints_cur,
        energy: e_cur,
        coeffs,
        accepted_energies,
        iterations,
        converged,
    })
}

/// Serialize a flat real vector with an `n_orb` header (little-endian): the
/// format used both for kappa parameter vectors (length `n(n-1)/2`) and for
/// cumulative rotation matrices (length `n²`) in gain-transfer replays.
pub fn write_flat_vector<W: Write>(mut out: W, n_orb: usize, data: &[f64]) -> Result<(), CooError> {
    out.write_all(&(n_orb as u64).to_le_bytes())?;
    out.write_all(&(data.len() as u64).to_le_bytes())?;
    for &x in data {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_flat_vector<R: Read>(mut input: R) -> Result<(usize, Vec<f64>), CooError> {
    let mut buf8 = [0u8; 8];
    input.read_exact(&mut buf8)?;
    let n_orb = u64::from_le_bytes(buf8) as usize;
    input.read_exact(&mut buf8)?;
    let len = u64::from_le_bytes(buf8) as usize;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        input.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    Ok((n_orb, data))
}

pub fn write_rotation<W: Write>(out: W, rotation: &Array2<f64>) -> Result<(), CooError> {
    let n = rotation.nrows();
    let flat: Vec<f64> = rotation.iter().copied().collect();
    write_flat_vector(out, n, &flat)
}

pub fn read_rotation<R: Read>(input: R) -> Result<Array2<f64>, CooError> {
    let (n_orb, data) = read_flat_vector(input)?;
    if data.len() != n_orb * n_orb {
        return Err(CooError::BadSnapshot(format!(
            "rotation payload has {} entries, expected {}",
            data.len(),
            n_orb * n_orb
        )));
    }
    Ok(Array2::from_shape_vec((n_orb, n_orb), data).expect("shape checked"))
}

/// Energy-vs-size curve of one frozen-orbital expansion.
#[derive(Debug, Clone)]
pub struct GainTransferCurve {
    pub snapshot: usize,
    pub points: Vec<(usize, f64)>,
}

/// For each recorded rotation snapshot, freeze the orbitals there, search a
/// fresh core with the paired seed, and run an independent frozen-orbital
/// expansion. Returns one `(N_det, E)` curve per snapshot.
pub fn gain_transfer_experiment(
    snapshots: &[Array2<f64>],
    core_seeds: &[u64],
    ints: &IntegralSet,
    core_cfg: &crate::trimci::Phase0Config,
    expand_cfg: &crate::trimci::PhaseGrowthConfig,
) -> Result<Vec<GainTransferCurve>, crate::trimci::TrimError> {
    let mut curves = Vec::with_capacity(snapshots.len());
    for (k, u) in snapshots.iter().enumerate() {
        let seed = core_seeds.get(k).copied().unwrap_or(core_cfg.seed);
        let frozen_ints = rotate_integrals(ints, u)?;
        let start = crate::trimci::trimci_run(&frozen_ints, core_cfg, seed, None)?;
        let frozen = crate::trimci::PhaseGrowthConfig {
            orbital_optimization: false,
            ..expand_cfg.clone()
        };
        let ex = crate::trimci::phase_expand(&start, &frozen_ints, &frozen, None)?;
        let mut points = vec![(start.wavefunction.space.len(), start.energy)];
        points.extend(
            ex.trajectory
                .iter()
                .map(|r| (r.wavefunction.space.len(), r.energy)),
        );
        curves.push(GainTransferCurve {
            snapshot: k,
            points,
        });
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detspace::{DetSet, Wavefunction};
    use crate::eigen::{davidson_lowest, dense_ground_state};
    use crate::hamio::{build_hubbard_graph, orthogonality_deviation, GraphModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn hubbard(l: usize, alpha: f64, seed: u64) -> IntegralSet {
        build_hubbard_graph(&GraphModelSpec {
            sites: l,
            t: 1.0,
            u: 4.0,
            alpha,
            seed,
        })
        .unwrap()
    }

    fn random_kappa(n: usize, scale: f64, seed: u64) -> Kappa {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let params = (0..n_kappa_params(n))
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Kappa::from_params(n, params).unwrap()
    }

    #[test]
    fn expm_identity_and_rotation() {
        let k = Kappa::zeros(3);
        let u = expm_antisymmetric(&k).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((u[[i, j]] - target).abs() < 1e-15);
            }
        }
        // kappa_10 = pi/2 gives the quarter turn [[0,-1],[1,0]]
        let k = Kappa::from_params(2, vec![std::f64::consts::FRAC_PI_2]).unwrap();
        let u = expm_antisymmetric(&k).unwrap();
        assert!(u[[0, 0]].abs() < 1e-14);
        assert!((u[[1, 0]] - 1.0).abs() < 1e-14);
        assert!((u[[0, 1]] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn expm_orthogonality_and_inverse() {
        for seed in 0..4 {
            let k = random_kappa(6, 2.0, seed);
            let u = expm_antisymmetric(&k).unwrap();
            assert!(orthogonality_deviation(&u) < 1e-12);
            assert!((linalg::det(&u).unwrap() - 1.0).abs() < 1e-10);
            let neg = Kappa::from_params(6, k.params.iter().map(|x| -x).collect()).unwrap();
            let uinv = expm_antisymmetric(&neg).unwrap();
            let prod = u.dot(&uinv);
            for i in 0..6 {
                for j in 0..6 {
                    let target = if i == j { 1.0 } else { 0.0 };
                    assert!((prod[[i, j]] - target).abs() < 1e-12);
                }
            }
        }
    }

    /// Energy of fixed densities under a rotated integral set.
    fn fixed_coeff_energy(r1: &Rdm1, r2: &Rdm2, ints: &IntegralSet, kappa: &Kappa) -> f64 {
        let u = expm_antisymmetric(kappa).unwrap();
        let rot = rotate_integrals(ints, &u).unwrap();
        crate::obsrv::reconstruct_energy(r1, r2, &rot)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // single-determinant core of the dimer in a random non-stationary basis
        let ints0 = hubbard(2, 0.0, 0);
        let basis = expm_antisymmetric(&random_kappa(2, 0.3, 5)).unwrap();
        let ints = rotate_integrals(&ints0, &basis).unwrap();
        let w = Wavefunction::single(crate::detspace::Determinant::new(0b01, 0b01), 2).unwrap();
        let (r1, r2) = compute_rdms(&w);
        let g = orbital_gradient(&r1, &r2, &ints).unwrap();
        let h = 1e-5;
        for k in 0..g.len() {
            let mut kp = Kappa::zeros(2);
            kp.params[k] = h;
            let mut km = Kappa::zeros(2);
            km.params[k] = -h;
            let fd = (fixed_coeff_energy(&r1, &r2, &ints, &kp)
                - fixed_coeff_energy(&r1, &r2, &ints, &km))
                / (2.0 * h);
            let denom = fd.abs().max(g[k].abs()).max(1e-8);
            assert!(
                ((g[k] - fd) / denom).abs() < 1e-6,
                "param {k}: analytic {} vs fd {fd}",
                g[k]
            );
        }
    }

    #[test]
    fn gradient_vanishes_on_fci_wavefunction() {
        let ints = hubbard(4, 1.0, 11);
        let space = DetSet::full_space(4, 2, 2).unwrap();
        let (_, coeffs) = dense_ground_state(&space, &ints, 100).unwrap();
        let w = Wavefunction::new(space, coeffs).unwrap();
        let (r1, r2) = compute_rdms(&w);
        let g = orbital_gradient(&r1, &r2, &ints).unwrap();
        for (k, gk) in g.iter().enumerate() {
            assert!(gk.abs() < 1e-8, "param {k}: {gk}");
        }
    }

    #[test]
    fn gradient_of_zero_hamiltonian_vanishes() {
        let ints = IntegralSet::empty(4, 2, 2);
        let w =
            Wavefunction::single(crate::detspace::Determinant::new(0b0011, 0b0011), 4).unwrap();
        let (r1, r2) = compute_rdms(&w);
        let g = orbital_gradient(&r1, &r2, &ints).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_response_with_quadratic_error_decay() {
        let ints = hubbard(4, 1.0, 3);
        let space = DetSet::full_space(4, 2, 2).unwrap();
        let coeffs: Vec<f64> = (0..space.len()).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let w = Wavefunction::new(space, coeffs).unwrap();
        let (r1, r2) = compute_rdms(&w);
        let g = orbital_gradient(&r1, &r2, &ints).unwrap();
        let dir = random_kappa(4, 1.0, 8);
        let e0 = crate::obsrv::reconstruct_energy(&r1, &r2, &ints);
        let mut errs = Vec::new();
        for &h in &[1e-3, 5e-4] {
            let kappa = Kappa::from_params(4, dir.params.iter().map(|x| x * h).collect()).unwrap();
            let e = fixed_coeff_energy(&r1, &r2, &ints, &kappa);
            let lin: f64 = g.iter().zip(&kappa.params).map(|(a, b)| a * b).sum();
            errs.push((e - e0 - lin).abs());
        }
        // halving the step must cut the linearization error by about 4x
        assert!(
            errs[1] < errs[0] / 2.5,
            "expected quadratic decay, got {errs:?}"
        );
    }

    #[test]
    fn full_space_core_energy_is_rotation_invariant() {
        let ints = hubbard(4, 1.0, 17);
        let core = DetSet::full_space(4, 2, 2).unwrap();
        let (e_fci, _) = dense_ground_state(&core, &ints, 100).unwrap();
        let cfg = CooConfig {
            maxiter: 8,
            davidson_tol: 1e-12,
            ..Default::default()
        };
        let res = bfgs_orbital_opt(&core, &ints, &cfg).unwrap();
        for e in &res.accepted_energies {
            assert!((e - e_fci).abs() < 1e-10, "{e} vs {e_fci}");
        }
    }

    #[test]
    fn accepted_energies_non_increasing() {
        let ints = hubbard(6, 1.0, 23);
        let space = DetSet::full_space(6, 3, 3).unwrap();
        let (_, coeffs) = dense_ground_state(&space, &ints, 1000).unwrap();
        // 40-determinant core of the largest coefficients
        let mut idx: Vec<usize> = (0..space.len()).collect();
        idx.sort_by(|&a, &b| coeffs[b].abs().partial_cmp(&coeffs[a].abs()).unwrap());
        let dets: Vec<_> = idx[..40].iter().map(|&i| *space.det(i)).collect();
        let core = DetSet::build_groups(dets, 6).unwrap();
        let cfg = CooConfig {
            maxiter: 25,
            davidson_tol: 1e-11,
            ..Default::default()
        };
        let res = bfgs_orbital_opt(&core, &ints, &cfg).unwrap();
        for w in res.accepted_energies.windows(2) {
            let delta = 1e-12 * w[0].abs();
            assert!(w[1] <= w[0] + delta, "energy rose: {} -> {}", w[0], w[1]);
        }
        assert!(res.accepted_energies.last().unwrap() < &(res.accepted_energies[0] - 1e-4));
        // the reported energy matches a fresh Rayleigh quotient in the rotated basis
        let wfinal = Wavefunction::new(core, res.coeffs.clone()).unwrap();
        let rq = wfinal.rayleigh_quotient(&res.rotated_ints);
        assert!((rq - res.energy).abs() < 1e-10);
        // and the cumulative rotation reproduces the rotated integrals
        let rot2 = rotate_integrals(&ints, &res.rotation).unwrap();
        let r = davidson_lowest(&wfinal.space, &rot2, &DavidsonConfig::with_tol(1e-10)).unwrap();
        assert!(
            (r.energy - res.energy).abs() < 1e-8,
            "fresh solve {} vs reported {}",
            r.energy,
            res.energy
        );
    }

    #[test]
    fn snapshot_round_trip() {
        let k = random_kappa(5, 0.7, 31);
        let mut buf = Vec::new();
        write_flat_vector(&mut buf, 5, &k.params).unwrap();
        let (n, params) = read_flat_vector(buf.as_slice()).unwrap();
        assert_eq!(n, 5);
        assert_eq!(params, k.params);

        let u = expm_antisymmetric(&k).unwrap();
        let mut buf = Vec::new();
        write_rotation(&mut buf, &u).unwrap();
        let u2 = read_rotation(buf.as_slice()).unwrap();
        assert_eq!(u, u2);
    }
}
