//! Trim-based core search and the three-phase workflow: global core+orbital
//! discovery from random determinants, slow growth with per-round orbital
//! refinement, and frozen-orbital fast expansion.

use crate::analysis::{pt2_correction, AnalysisError, Pt2Config};
use crate::coo::{bfgs_orbital_opt, CooConfig, CooError};
use crate::detspace::{
    heat_bath_candidates, DetError, DetSet, Determinant, Wavefunction,
};
use crate::eigen::{
    davidson_lowest, dense_ground_state, DavidsonConfig, EigenError,
};
use crate::hamio::{build_hubbard_graph, GraphModelSpec, HamError, IntegralSet};
use crate::obsrv::{spin_pattern, CenterMap};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrimError {
    #[error(transparent)]
    Det(#[from] DetError),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Coo(#[from] CooError),
    #[error(transparent)]
    Ham(#[from] HamError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("invalid config: {0}")]
    BadConfig(String),
}

/// Phase-0 controls. Defaults follow the global-optimization table:
/// 64 runs, 10 cycles, 100-determinant target core, 1 reference + 10000
/// random initial determinants of weight 1, keep 10 after the first trim,
/// threshold 1e-2, pool ratio 40, core growth in [1.0, 1.1], 20 trim blocks,
/// local keep ratio 4, 4 expansion hops per pool build.
#[derive(Debug, Clone)]
pub struct Phase0Config {
    pub num_runs: usize,
    pub cycles: usize,
    pub max_final_dets: usize,
    pub init_hf: usize,
    pub init_random: usize,
    pub init_weight: f64,
    pub first_cycle_keep_size: usize,
    pub threshold: f64,
    pub pool_core_ratio: f64,
    pub core_set_ratio: (f64, f64),
    pub num_groups: usize,
    pub local_trim_keep_ratio: f64,
    pub max_rounds: usize,
    pub seed: u64,
    pub orbital_optimization: bool,
    pub tracking_dets: bool,
    pub loaded_dets_randomness: f64,
    /// Keep the lowest-energy run whose spin pattern matches this label.
    pub target_basin: Option<String>,
    /// Solver tolerance for the trim diagonalizations.
    pub trim_davidson_tol: f64,
    /// Safety cap on expand-trim rounds inside one run.
    pub max_inner_rounds: usize,
}

impl Default for Phase0Config {
    fn default() -> Self {
        Phase0Config {
            num_runs: 64,
            cycles: 10,
            max_final_dets: 100,
            init_hf: 1,
            init_random: 10_000,
            init_weight: 1.0,
            first_cycle_keep_size: 10,
            threshold: 1e-2,
            pool_core_ratio: 40.0,
            core_set_ratio: (1.0, 1.1),
            num_groups: 20,
            local_trim_keep_ratio: 4.0,
            max_rounds: 4,
            seed: 0,
            orbital_optimization: true,
            tracking_dets: false,
            loaded_dets_randomness: 0.0,
            target_basin: None,
            trim_davidson_tol: 1e-8,
            max_inner_rounds: 500,
        }
    }
}

/// Growth-phase controls. Phase 1 defaults: budget 1e6, growth 1.1, orbital
/// optimization on (50 iterations per round), connection cache on, solver
/// tolerance 1e-4, no perturbative correction. Phase 2 defaults: growth 2.0,
/// orbitals frozen, cache off, tolerance 1e-5, correction on.
#[derive(Debug, Clone)]
pub struct PhaseGrowthConfig {
    pub max_n_dets: usize,
    pub growth_factor: f64,
    pub orbital_optimization: bool,
    pub orbital_opt_max_iter: usize,
    pub use_connection_cache: bool,
    pub davidson_energy_tol: f64,
    pub pt2_correction: bool,
    pub pt2_eps_hc: f64,
    /// Candidate pool overshoot relative to the new-determinant budget.
    pub expansion_slack: f64,
    pub seed: u64,
}

impl PhaseGrowthConfig {
    pub fn phase1_defaults() -> Self {
        PhaseGrowthConfig {
            max_n_dets: 1_000_000,
            growth_factor: 1.1,
            orbital_optimization: true,
            orbital_opt_max_iter: 50,
            use_connection_cache: true,
            davidson_energy_tol: 1e-4,
            pt2_correction: false,
            pt2_eps_hc: 1e-8,
            expansion_slack: 1.5,
            seed: 0,
        }
    }

    pub fn phase2_defaults() -> Self {
        PhaseGrowthConfig {
            max_n_dets: 100_000_000,
            growth_factor: 2.0,
            orbital_optimization: false,
            orbital_opt_max_iter: 0,
            use_connection_cache: false,
            davidson_energy_tol: 1e-5,
            pt2_correction: true,
            pt2_eps_hc: 1e-8,
            expansion_slack: 1.5,
            seed: 0,
        }
    }
}

/// A converged core with its energy and provenance index.
#[derive(Debug, Clone)]
pub struct CoreResult {
    pub wavefunction: Wavefunction,
    pub energy: f64,
    pub index: usize,
    pub basin: Option<String>,
    pub e_pt2: Option<f64>,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Uniform random determinants at fixed electron counts, without replacement,
/// excluding anything already in `taken`. Stops early if the space saturates.
fn draw_random_dets(
    n_orb: usize,
    n_alpha: usize,
    n_beta: usize,
    count: usize,
    taken: &mut std::collections::HashSet<Determinant>,
    rng: &mut ChaCha12Rng,
) -> Vec<Determinant> {
    let total = binomial(n_orb, n_alpha).saturating_mul(binomial(n_orb, n_beta));
    let want = count.min(total.saturating_sub(taken.len()));
    let mut out = Vec::with_capacity(want);
    let mut orbitals: Vec<usize> = (0..n_orb).collect();
    let mut attempts = 0usize;
    while out.len() < want && attempts < want * 200 + 1000 {
        attempts += 1;
        orbitals.shuffle(rng);
        let alpha = orbitals[..n_alpha].iter().fold(0u128, |b, &p| b | (1 << p));
        orbitals.shuffle(rng);
        let beta = orbitals[..n_beta].iter().fold(0u128, |b, &p| b | (1 << p));
        let d = Determinant::new(alpha, beta);
        if taken.insert(d) {
            out.push(d);
        }
    }
    out
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// Rank rows of a solved space by |c| (ties by canonical determinant order)
/// and return the kept determinants with their coefficients.
fn top_by_weight(
    space: &DetSet,
    coeffs: &[f64],
    keep: usize,
) -> (Vec<Determinant>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..space.len()).collect();
    idx.sort_by(|&a, &b| {
        coeffs[b]
            .abs()
            .partial_cmp(&coeffs[a].abs())
            .unwrap()
            .then(space.det(a).cmp(space.det(b)))
    });
    idx.truncate(keep);
    let dets = idx.iter().map(|&i| *space.det(i)).collect();
    let kept = idx.iter().map(|&i| coeffs[i]).collect();
    (dets, kept)
}

fn solve_space(
    dets: Vec<Determinant>,
    n_orb: usize,
    ints: &IntegralSet,
    tol: f64,
    warm: Option<Vec<f64>>,
) -> Result<(DetSet, Vec<f64>, f64), TrimError> {
    let space = DetSet::build_groups(dets, n_orb)?;
    let warm = warm.filter(|w| w.len() == space.len());
    let cfg = DavidsonConfig {
        energy_tol: tol,
        warm_start: warm,
        ..Default::default()
    };
    let r = davidson_lowest(&space, ints, &cfg)?;
    Ok((space, r.coeffs, r.energy))
}

/// One trim-based core search: expand a candidate pool by screened
/// excitations, trim it in randomized local blocks against the current core,
/// then trim globally, growing the core budget geometrically until the target
/// size is reached.
pub fn trimci_run(
    ints: &IntegralSet,
    cfg: &Phase0Config,
    seed: u64,
    loaded_dets: Option<&[Determinant]>,
) -> Result<CoreResult, TrimError> {
    if cfg.max_final_dets == 0 || cfg.num_groups == 0 {
        return Err(TrimError::BadConfig(
            "max_final_dets and num_groups must be positive".into(),
        ));
    }
    let n_orb = ints.n_orb;
    let (na, nb) = (ints.n_alpha, ints.n_beta);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // initial pool: reference + random determinants, all with equal weight,
    // or a loaded seed set with a configured fraction refreshed randomly
    let mut taken = std::collections::HashSet::new();
    let mut pool_dets: Vec<Determinant> = Vec::new();
    match loaded_dets {
        Some(loaded) if !loaded.is_empty() => {
            let n_replace =
                ((loaded.len() as f64) * cfg.loaded_dets_randomness).round() as usize;
            let keep = loaded.len() - n_replace.min(loaded.len());
            for d in &loaded[..keep] {
                if taken.insert(*d) {
                    pool_dets.push(*d);
                }
            }
            pool_dets.extend(draw_random_dets(
                n_orb,
                na,
                nb,
                loaded.len() - keep + n_replace.saturating_sub(loaded.len() - keep),
                &mut taken,
                &mut rng,
            ));
        }
        _ => {
            if cfg.init_hf > 0 {
                let hf = Determinant::reference(na, nb);
                if taken.insert(hf) {
                    pool_dets.push(hf);
                }
            }
            pool_dets.extend(draw_random_dets(
                n_orb,
                na,
                nb,
                cfg.init_random,
                &mut taken,
                &mut rng,
            ));
        }
    }
    if pool_dets.is_empty() {
        return Err(TrimError::BadConfig("empty initial determinant set".into()));
    }

    // first trim pass runs on the raw pool with uniform weights
    let weights: Vec<f64> = vec![cfg.init_weight; pool_dets.len()];
    let ref_size = cfg.max_final_dets;
    let survivors = local_trim(
        &[],
        &pool_dets
            .iter()
            .zip(&weights)
            .map(|(d, w)| (*d, *w))
            .collect::<Vec<_>>(),
        cfg,
        ref_size,
        ints,
        &mut rng,
    )?;
    let (space, coeffs, _) = solve_space(survivors, n_orb, ints, cfg.trim_davidson_tol, None)?;
    let keep0 = cfg
        .max_final_dets
        .min(cfg.first_cycle_keep_size)
        .min(space.len())
        .max(1);
    let (mut core_dets, mut core_coeffs) = top_by_weight(&space, &coeffs, keep0);

    let mut budget = core_dets.len();
    for _round in 0..cfg.max_inner_rounds {
        let reached_target = budget >= cfg.max_final_dets && core_dets.len() >= cfg.max_final_dets;
        if reached_target {
            break;
        }
        // per-round core budget
        let draw = rng.gen_range(cfg.core_set_ratio.0..=cfg.core_set_ratio.1);
        budget = ((core_dets.len() as f64 * draw).ceil() as usize)
            .max(core_dets.len() + 1)
            .min(cfg.max_final_dets);

        // (i) expansion: pool grows to pool_core_ratio x core through up to
        // max_rounds excitation hops, relaxing the screen geometrically when
        // the pool underfills
        let core_space = DetSet::build_groups(core_dets.clone(), n_orb)?;
        let aligned = align_coeffs(&core_space, &core_dets, &core_coeffs);
        let core_w = Wavefunction::new(core_space, aligned)?;
        let target_pool = (cfg.pool_core_ratio * core_dets.len() as f64).ceil() as usize;
        let want = target_pool.saturating_sub(core_dets.len());
        let candidates = build_pool(&core_w, cfg.threshold, cfg.max_rounds, want, ints)?;
        if candidates.is_empty() {
            break; // screen floor reached with nothing to add
        }

        // (ii) local trim on randomized sub-blocks augmented with the core
        let keep_local = ((cfg.local_trim_keep_ratio * core_dets.len() as f64).ceil() as usize)
            .max(budget);
        let survivors = local_trim(&core_dets, &candidates, cfg, keep_local, ints, &mut rng)?;

        // (iii) global trim on the survivors
        let (space, coeffs, _) =
            solve_space(survivors, n_orb, ints, cfg.trim_davidson_tol, None)?;
        let keep = budget.min(space.len());
        let (dets, kept) = top_by_weight(&space, &coeffs, keep);
        core_dets = dets;
        core_coeffs = kept;
    }

    // final diagonalization fixes the reported energy as a true Rayleigh
    // quotient of the returned coefficients
    let (space, coeffs, energy) = solve_space(
        core_dets.clone(),
        n_orb,
        ints,
        cfg.trim_davidson_tol,
        None,
    )?;
    let w = Wavefunction::new(space, coeffs)?;
    Ok(CoreResult {
        wavefunction: w,
        energy,
        index: 0,
        basin: None,
        e_pt2: None,
    })
}

/// Coefficients of `dets` re-aligned with the canonical row order of `space`.
fn align_coeffs(space: &DetSet, dets: &[Determinant], coeffs: &[f64]) -> Vec<f64> {
    let mut aligned = vec![0.0; space.len()];
    for (d, c) in dets.iter().zip(coeffs) {
        if let Some(row) = space.row_of(d) {
            aligned[row] = *c;
        }
    }
    aligned
}

/// Iterated heat-bath expansion: up to `max_hops` excitation hops per pass,
/// each hop weighted by its admitting screening products, with the threshold
/// relaxed geometrically whenever the pool underfills.
fn build_pool(
    core_w: &Wavefunction,
    theta0: f64,
    max_hops: usize,
    want: usize,
    ints: &IntegralSet,
) -> Result<Vec<(Determinant, f64)>, TrimError> {
    let n_orb = core_w.space.n_orb();
    let mut theta = theta0;
    loop {
        let mut found: std::collections::HashMap<Determinant, f64> =
            std::collections::HashMap::new();
        let mut frontier = core_w.clone();
        for _hop in 0..max_hops.max(1) {
            let new_items = heat_bath_candidates(&frontier, theta, ints)?;
            let fresh: Vec<(Determinant, f64)> = new_items
                .into_iter()
                .filter(|(d, _)| !core_w.space.contains(d) && !found.contains_key(d))
                .collect();
            if fresh.is_empty() {
                break;
            }
            for (d, w) in &fresh {
                found.insert(*d, *w);
            }
            if found.len() >= want {
                break;
            }
            // next hop expands from the freshly admitted determinants,
            // weighted by their screening products
            let dets: Vec<Determinant> = fresh.iter().map(|(d, _)| *d).collect();
            let weights: Vec<f64> = fresh.iter().map(|(_, w)| *w).collect();
            let space = DetSet::build_groups(dets.clone(), n_orb)?;
            let aligned = align_coeffs(&space, &dets, &weights);
            frontier = Wavefunction::new(space, aligned)?;
        }
        if found.len() >= want || theta < 1e-12 {
            let mut out: Vec<(Determinant, f64)> = found.into_iter().collect();
            out.sort_unstable_by(|a, b| a.0.cmp(&b.0));
            return Ok(out);
        }
        theta /= 2.0;
    }
}

/// Randomized-block trim: candidates are shuffled into `num_groups` blocks,
/// each block is diagonalized together with the current core, and every
/// determinant is scored by its largest |c| over the blocks it appeared in.
/// The top `keep` determinants overall survive.
fn local_trim(
    core: &[Determinant],
    candidates: &[(Determinant, f64)],
    cfg: &Phase0Config,
    keep: usize,
    ints: &IntegralSet,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<Determinant>, TrimError> {
    let n_orb = ints.n_orb;
    let mut cand: Vec<Determinant> = candidates.iter().map(|(d, _)| *d).collect();
    cand.shuffle(rng);
    let n_groups = cfg.num_groups.min(cand.len()).max(1);
    let block = cand.len().div_ceil(n_groups);
    let mut scores: std::collections::HashMap<Determinant, f64> =
        std::collections::HashMap::new();
    for chunk in cand.chunks(block.max(1)) {
        let mut dets: Vec<Determinant> = core.to_vec();
        dets.extend_from_slice(chunk);
        let (space, coeffs, _) =
            solve_space(dets, n_orb, ints, cfg.trim_davidson_tol, None)?;
        for (row, d) in space.dets().iter().enumerate() {
            let s = coeffs[row].abs();
            let e = scores.entry(*d).or_insert(0.0);
            if s > *e {
                *e = s;
            }
        }
    }
    let mut ranked: Vec<(Determinant, f64)> = scores.into_iter().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(keep.max(1));
    Ok(ranked.into_iter().map(|(d, _)| d).collect())
}

/// Per-cycle bookkeeping of the alternating search.
#[derive(Debug, Clone)]
pub struct CycleRecord {
    pub cycle: usize,
    /// Best-of-runs core energy in the cycle's starting basis.
    pub e_ci: f64,
    /// Energy after the cycle's orbital optimization, when enabled.
    pub e_bfgs: Option<f64>,
    pub run_energies: Vec<f64>,
}

#[derive(Debug)]
pub struct Phase0Result {
    pub best: CoreResult,
    /// Cumulative rotation at the best cycle.
    pub rotation: Array2<f64>,
    /// Integrals in the best cycle's basis.
    pub rotated_ints: IntegralSet,
    pub records: Vec<CycleRecord>,
    /// Cumulative rotation after each cycle (entry 0 is the identity).
    pub snapshots: Vec<Array2<f64>>,
}

/// Alternate best-of-N core searches with orbital optimization, keeping the
/// lowest-energy cycle as the endpoint.
pub fn phase0(
    ints: &IntegralSet,
    cfg: &Phase0Config,
    coo_cfg: &CooConfig,
    centers: Option<&CenterMap>,
) -> Result<Phase0Result, TrimError> {
    if cfg.cycles == 0 || cfg.num_runs == 0 {
        return Err(TrimError::BadConfig(
            "cycles and num_runs must be positive".into(),
        ));
    }
    let n = ints.n_orb;
    let mut ints_cur = ints.clone();
    let mut rotation: Array2<f64> = Array2::eye(n);
    let mut snapshots = vec![rotation.clone()];
    let mut records = Vec::new();
    let mut best: Option<(f64, CoreResult, Array2<f64>, IntegralSet)> = None;
    let mut prev_core: Option<Vec<Determinant>> = None;

    for cycle in 0..cfg.cycles {
        let loaded = if cfg.tracking_dets { prev_core.clone() } else { None };
        let runs: Vec<Result<CoreResult, TrimError>> = (0..cfg.num_runs)
            .into_par_iter()
            .map(|run| {
                trimci_run(
                    &ints_cur,
                    cfg,
                    mix_seed(cfg.seed, cycle as u64, run as u64),
                    loaded.as_deref(),
                )
            })
            .collect();
        let mut results = Vec::with_capacity(runs.len());
        for r in runs {
            results.push(r?);
        }
        let run_energies: Vec<f64> = results.iter().map(|r| r.energy).collect();

        // basin-filtered selection when a label is requested; lowest energy
        // otherwise (and as fallback when no run matches)
        let pick = |rs: &[CoreResult]| -> usize {
            let mut candidates: Vec<usize> = (0..rs.len()).collect();
            if let (Some(label), Some(cm)) = (&cfg.target_basin, centers) {
                let matching: Vec<usize> = candidates
                    .iter()
                    .copied()
                    .filter(|&i| spin_pattern(&rs[i].wavefunction, cm) == *label)
                    .collect();
                if !matching.is_empty() {
                    candidates = matching;
                }
            }
            candidates
                .into_iter()
                .min_by(|&a, &b| rs[a].energy.partial_cmp(&rs[b].energy).unwrap())
                .unwrap()
        };
        let chosen = pick(&results);
        let mut chosen_core = results.into_iter().nth(chosen).unwrap();
        chosen_core.index = cycle;
        if let Some(cm) = centers {
            chosen_core.basin = Some(spin_pattern(&chosen_core.wavefunction, cm));
        }
        let e_ci = chosen_core.energy;
        prev_core = Some(chosen_core.wavefunction.space.dets().to_vec());

        let (e_cycle, cycle_state) = if cfg.orbital_optimization {
            let coo = bfgs_orbital_opt(&chosen_core.wavefunction.space, &ints_cur, coo_cfg)?;
            rotation = rotation.dot(&coo.rotation);
            ints_cur = coo.rotated_ints.clone();
            let w = Wavefunction::new(
                chosen_core.wavefunction.space.clone(),
                coo.coeffs.clone(),
            )?;
            let state = CoreResult {
                wavefunction: w,
                energy: coo.energy,
                index: cycle,
                basin: chosen_core.basin.clone(),
                e_pt2: None,
            };
            records.push(CycleRecord {
                cycle,
                e_ci,
                e_bfgs: Some(coo.energy),
                run_energies,
            });
            (coo.energy, state)
        } else {
            records.push(CycleRecord {
                cycle,
                e_ci,
                e_bfgs: None,
                run_energies,
            });
            (e_ci, chosen_core)
        };
        snapshots.push(rotation.clone());

        if best.as_ref().map_or(true, |(e, ..)| e_cycle < *e) {
            best = Some((e_cycle, cycle_state, rotation.clone(), ints_cur.clone()));
        }
    }

    let (_, best_core, best_rot, best_ints) = best.expect("at least one cycle ran");
    Ok(Phase0Result {
        best: best_core,
        rotation: best_rot,
        rotated_ints: best_ints,
        records,
        snapshots,
    })
}

#[derive(Debug)]
pub struct ExpandResult {
    pub trajectory: Vec<CoreResult>,
    /// Integrals in the final basis (identical to the input when the
    /// orbitals are frozen).
    pub final_ints: IntegralSet,
    /// Cumulative rotation applied across the expansion.
    pub rotation: Array2<f64>,
}

/// Grow the determinant budget by the configured factor per round: screened
/// expansion, projected solve, trim back to budget, optional per-round
/// orbital refinement and perturbative correction. One trajectory entry per
/// round until the budget target.
pub fn phase_expand(
    start: &CoreResult,
    ints: &IntegralSet,
    cfg: &PhaseGrowthConfig,
    coo_cfg: Option<&CooConfig>,
) -> Result<ExpandResult, TrimError> {
    if start.wavefunction.space.is_empty() {
        return Err(TrimError::BadConfig("empty starting core".into()));
    }
    let n_orb = ints.n_orb;
    let mut ints_cur = ints.clone();
    let mut rotation: Array2<f64> = Array2::eye(n_orb);
    let mut core_dets: Vec<Determinant> = start.wavefunction.space.dets().to_vec();
    let mut core_coeffs: Vec<f64> = start.wavefunction.coeffs.clone();
    let mut energy = start.energy;
    let mut budget = core_dets.len();
    let mut trajectory = Vec::new();

    for round in 0.. {
        let budget_next = ((budget as f64 * cfg.growth_factor).ceil() as usize)
            .min(cfg.max_n_dets)
            .max(budget);
        let n_new = budget_next.saturating_sub(core_dets.len());
        let mut saturated = false;

        if n_new > 0 {
            let core_space = DetSet::build_groups(core_dets.clone(), n_orb)?;
            let aligned = align_coeffs(&core_space, &core_dets, &core_coeffs);
            let core_w = Wavefunction::new(core_space, aligned)?;
            let pool_target = ((n_new as f64) * cfg.expansion_slack).ceil() as usize;
            let mut cands = build_pool(&core_w, 1e-2, 4, pool_target, &ints_cur)?;
            if cands.is_empty() {
                saturated = true;
            } else {
                cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
                cands.truncate(pool_target);
                let mut pool: Vec<Determinant> = core_dets.clone();
                pool.extend(cands.iter().map(|(d, _)| *d));
                let pool_space = DetSet::build_groups(pool, n_orb)?;
                let warm = align_coeffs(&pool_space, &core_dets, &core_coeffs);
                let dcfg = DavidsonConfig {
                    energy_tol: cfg.davidson_energy_tol,
                    warm_start: Some(warm),
                    use_connection_cache: cfg.use_connection_cache,
                    ..Default::default()
                };
                let r = davidson_lowest(&pool_space, &ints_cur, &dcfg)?;
                let keep = budget_next.min(pool_space.len());
                let (dets, kept) = top_by_weight(&pool_space, &r.coeffs, keep);
                core_dets = dets;
                core_coeffs = kept;
            }
        }

        // refine orbitals on the trimmed core, or re-diagonalize it
        if cfg.orbital_optimization && n_new > 0 {
            let space = DetSet::build_groups(core_dets.clone(), n_orb)?;
            let mut oc = coo_cfg.cloned().unwrap_or_default();
            oc.maxiter = cfg.orbital_opt_max_iter;
            let coo = bfgs_orbital_opt(&space, &ints_cur, &oc)?;
            rotation = rotation.dot(&coo.rotation);
            ints_cur = coo.rotated_ints.clone();
            core_dets = space.dets().to_vec();
            core_coeffs = coo.coeffs.clone();
            energy = coo.energy;
        } else if n_new > 0 && !saturated {
            let (space, coeffs, e) = solve_space(
                core_dets.clone(),
                n_orb,
                &ints_cur,
                cfg.davidson_energy_tol,
                Some(core_coeffs.clone()),
            )?;
            core_dets = space.dets().to_vec();
            core_coeffs = coeffs;
            energy = e;
        }

        let space = DetSet::build_groups(core_dets.clone(), n_orb)?;
        let aligned = align_coeffs(&space, &core_dets, &core_coeffs);
        let w = Wavefunction::new(space, aligned)?;
        let e_pt2 = if cfg.pt2_correction {
            let p = pt2_correction(
                &w,
                &ints_cur,
                &Pt2Config {
                    eps_hc: cfg.pt2_eps_hc,
                    ..Default::default()
                },
            )?;
            Some(p.delta_e)
        } else {
            None
        };
        trajectory.push(CoreResult {
            wavefunction: w,
            energy,
            index: round,
            basin: None,
            e_pt2,
        });

        if saturated || core_dets.len() >= cfg.max_n_dets || budget_next <= budget {
            break;
        }
        budget = budget_next;
    }

    Ok(ExpandResult {
        trajectory,
        final_ints: ints_cur,
        rotation,
    })
}

/// One row of the topology scan: determinant counts to reach the accuracy
/// target with and without orbital optimization. `None` marks a censored
/// trajectory that never reached the target.
#[derive(Debug, Clone)]
pub struct ScanRow {
    pub alpha: f64,
    pub e_fci: f64,
    pub n_coo: Option<f64>,
    pub n_nocoo: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ScanConfig {
    pub sites: usize,
    pub u_over_t: f64,
    pub model_seed: u64,
    pub phase0: Phase0Config,
    pub coo: CooConfig,
    pub expand: PhaseGrowthConfig,
}

/// For each topology knob value, run paired expansions with and without
/// orbital optimization and locate the first crossing of the accuracy target
/// by log-log interpolation against the exact ground energy.
pub fn topology_scan(
    cfg: &ScanConfig,
    alphas: &[f64],
    accuracy_target: f64,
) -> Result<Vec<ScanRow>, TrimError> {
    if !(accuracy_target > 0.0) {
        return Err(TrimError::BadConfig(
            "accuracy target must be positive".into(),
        ));
    }
    let mut rows = Vec::new();
    for &alpha in alphas {
        let ints = build_hubbard_graph(&GraphModelSpec {
            sites: cfg.sites,
            t: 1.0,
            u: cfg.u_over_t,
            alpha,
            seed: cfg.model_seed,
        })?;
        let full = DetSet::full_space(cfg.sites, ints.n_alpha, ints.n_beta)?;
        let (e_fci, _) = dense_ground_state(&full, &ints, crate::eigen::DENSE_LIMIT_DEFAULT)?;

        let run_variant = |orbital_opt: bool| -> Result<Option<f64>, TrimError> {
            let p0_cfg = Phase0Config {
                orbital_optimization: orbital_opt,
                ..cfg.phase0.clone()
            };
            let p0 = phase0(&ints, &p0_cfg, &cfg.coo, None)?;
            let expand_cfg = PhaseGrowthConfig {
                orbital_optimization: orbital_opt,
                ..cfg.expand.clone()
            };
            let ex = phase_expand(&p0.best, &p0.rotated_ints, &expand_cfg, Some(&cfg.coo))?;
            let mut traj: Vec<(f64, f64)> = vec![(
                p0.best.wavefunction.space.len() as f64,
                (p0.best.energy - e_fci).max(1e-300),
            )];
            traj.extend(ex.trajectory.iter().map(|r| {
                (
                    r.wavefunction.space.len() as f64,
                    (r.energy - e_fci).max(1e-300),
                )
            }));
            Ok(crate::analysis::crossing_loglog(&traj, accuracy_target))
        };

        let n_coo = run_variant(true)?;
        let n_nocoo = run_variant(false)?;
        let ratio = match (n_coo, n_nocoo) {
            (Some(a), Some(b)) if a > 0.0 => Some(b / a),
            _ => None,
        };
        rows.push(ScanRow {
            alpha,
            e_fci,
            n_coo,
            n_nocoo,
            ratio,
        });
    }
    Ok(rows)
}

/// Trajectory CSV with one line per round.
pub fn trajectory_csv(trajectory: &[CoreResult]) -> String {
    let mut out = String::from("round,n_det,e_var,e_pt2\n");
    for r in trajectory {
        let pt2 = r.e_pt2.map(|x| format!("{x:.12e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.12e},{}\n",
            r.index,
            r.wavefunction.space.len(),
            r.energy,
            pt2
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detspace::diagonal_element;

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

    fn small_cfg(max_final: usize, seed: u64) -> Phase0Config {
        Phase0Config {
            num_runs: 2,
            cycles: 2,
            max_final_dets: max_final,
            init_random: 200,
            first_cycle_keep_size: 10,
            num_groups: 5,
            seed,
            orbital_optimization: false,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_match_published_table() {
        let cfg = Phase0Config::default();
        assert_eq!(
            (
                cfg.num_runs,
                cfg.cycles,
                cfg.max_final_dets,
                cfg.init_hf,
                cfg.init_random,
                cfg.first_cycle_keep_size
            ),
            (64, 10, 100, 1, 10_000, 10)
        );
        assert_eq!(cfg.threshold, 1e-2);
        assert_eq!(cfg.pool_core_ratio, 40.0);
        assert_eq!(cfg.core_set_ratio, (1.0, 1.1));
        assert_eq!((cfg.num_groups, cfg.max_rounds), (20, 4));
        assert_eq!(cfg.local_trim_keep_ratio, 4.0);
        let p1 = PhaseGrowthConfig::phase1_defaults();
        assert_eq!(p1.max_n_dets, 1_000_000);
        assert_eq!(p1.growth_factor, 1.1);
        assert!(p1.orbital_optimization && p1.use_connection_cache && !p1.pt2_correction);
        assert_eq!(p1.orbital_opt_max_iter, 50);
        assert_eq!(p1.davidson_energy_tol, 1e-4);
        let p2 = PhaseGrowthConfig::phase2_defaults();
        assert_eq!(p2.growth_factor, 2.0);
        assert!(!p2.orbital_optimization && !p2.use_connection_cache && p2.pt2_correction);
        assert_eq!(p2.davidson_energy_tol, 1e-5);
    }

    #[test]
    fn dimer_run_saturates_to_fci() {
        let ints = hubbard(2, 0.0, 0);
        let cfg = Phase0Config {
            max_final_dets: 4,
            init_random: 10,
            num_runs: 1,
            num_groups: 2,
            ..small_cfg(4, 3)
        };
        let r = trimci_run(&ints, &cfg, 11, None).unwrap();
        assert_eq!(r.wavefunction.space.len(), 4);
        let exact = (4.0 - 32f64.sqrt()) / 2.0;
        assert!((r.energy - exact).abs() < 1e-6, "{} vs {exact}", r.energy);
    }

    #[test]
    fn core_respects_budget_and_beats_reference() {
        let ints = hubbard(8, 1.0, 7);
        let cfg = small_cfg(60, 5);
        let r = trimci_run(&ints, &cfg, 21, None).unwrap();
        assert!(r.wavefunction.space.len() <= 60);
        let hf = Determinant::reference(4, 4);
        let e_ref = diagonal_element(&hf, &ints);
        assert!(r.energy < e_ref, "{} !< {e_ref}", r.energy);
        // variational bound against the exact ground state
        let full = DetSet::full_space(8, 4, 4).unwrap();
        let (e_fci, _) = dense_ground_state(&full, &ints, 10_000).unwrap();
        assert!(r.energy >= e_fci - 1e-9);
        // reported energy is the Rayleigh quotient of the returned vector
        let rq = r.wavefunction.rayleigh_quotient(&ints);
        assert!((rq - r.energy).abs() < 1e-9);
    }

    #[test]
    fn fixed_seed_reproduces_run() {
        let ints = hubbard(6, 0.8, 2);
        let cfg = small_cfg(30, 9);
        let a = trimci_run(&ints, &cfg, 5, None).unwrap();
        let b = trimci_run(&ints, &cfg, 5, None).unwrap();
        assert_eq!(a.wavefunction.space.dets(), b.wavefunction.space.dets());
        assert_eq!(a.energy, b.energy);
        let c = trimci_run(&ints, &cfg, 6, None).unwrap();
        // different seed explores a different pool (energies may still agree)
        assert!(c.wavefunction.space.len() <= 30);
    }

    #[test]
    fn phase0_without_orbital_opt_is_best_of_runs() {
        let ints = hubbard(6, 1.0, 3);
        let cfg = Phase0Config {
            num_runs: 3,
            cycles: 2,
            ..small_cfg(20, 13)
        };
        let res = phase0(&ints, &cfg, &CooConfig::default(), None).unwrap();
        for rec in &res.records {
            assert!(rec.e_bfgs.is_none());
            let min_run = rec
                .run_energies
                .iter()
                .fold(f64::INFINITY, |a, &b| a.min(b));
            assert!((rec.e_ci - min_run).abs() < 1e-12);
        }
        let best_cycle = res
            .records
            .iter()
            .map(|r| r.e_ci)
            .fold(f64::INFINITY, f64::min);
        assert!((res.best.energy - best_cycle).abs() < 1e-12);
        assert_eq!(res.snapshots.len(), cfg.cycles + 1);
    }

    #[test]
    fn phase0_with_orbital_opt_descends() {
        let ints = hubbard(6, 1.0, 4);
        let cfg = Phase0Config {
            num_runs: 2,
            cycles: 3,
            max_final_dets: 24,
            init_random: 150,
            num_groups: 4,
            seed: 17,
            orbital_optimization: true,
            ..Default::default()
        };
        let coo = CooConfig {
            maxiter: 15,
            ..Default::default()
        };
        let res = phase0(&ints, &cfg, &coo, None).unwrap();
        let e0 = res.records[0].e_ci;
        assert!(
            res.best.energy < e0 - 1e-4,
            "no descent: best {} vs cycle0 {e0}",
            res.best.energy
        );
        // endpoint energy equals the minimum recorded cycle energy
        let min_rec = res
            .records
            .iter()
            .map(|r| r.e_bfgs.unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!((res.best.energy - min_rec).abs() < 1e-12);
    }

    #[test]
    fn phase0_labels_basins_from_centers() {
        use crate::obsrv::{label_centers, reduced_hamming};
        use ndarray::Array2;
        // every site is its own center; strong U polarizes the dominant det
        let ints = hubbard(4, 0.0, 8);
        let sets: Vec<(String, Vec<usize>)> =
            (0..4).map(|i| (format!("S{i}"), vec![i])).collect();
        let cm = label_centers(&Array2::eye(4), &sets, "rest").unwrap();
        let cfg = Phase0Config {
            num_runs: 3,
            cycles: 2,
            max_final_dets: 12,
            init_random: 40,
            num_groups: 3,
            seed: 4,
            orbital_optimization: false,
            ..Default::default()
        };
        // the exact ground state's dominant determinant carries the
        // alternating polarization
        let space = DetSet::full_space(4, 2, 2).unwrap();
        let (_, coeffs) = dense_ground_state(&space, &ints, 1000).unwrap();
        let exact = Wavefunction::new(space, coeffs).unwrap();
        let exact_pattern = crate::obsrv::spin_pattern(&exact, &cm);
        assert_eq!(reduced_hamming(&exact_pattern, "UDUD").unwrap(), 0);

        let res = phase0(&ints, &cfg, &crate::coo::CooConfig::default(), Some(&cm)).unwrap();
        let basin = res.best.basin.clone().expect("basin labeled");
        assert_eq!(basin.len(), 4);

        // requesting a basin returns a matching run when one exists
        let cfg_filtered = Phase0Config {
            target_basin: Some(basin.clone()),
            ..cfg
        };
        let res2 = phase0(&ints, &cfg_filtered, &crate::coo::CooConfig::default(), Some(&cm))
            .unwrap();
        assert_eq!(res2.best.basin.as_deref(), Some(basin.as_str()));
    }

    #[test]
    fn expansion_reaches_full_space_energy() {
        let ints = hubbard(8, 0.0, 1);
        let cfg = small_cfg(50, 23);
        let start = trimci_run(&ints, &cfg, 4, None).unwrap();
        let expand = PhaseGrowthConfig {
            max_n_dets: 4900,
            growth_factor: 2.0,
            davidson_energy_tol: 1e-8,
            ..PhaseGrowthConfig::phase2_defaults()
        };
        let ex = phase_expand(&start, &ints, &expand, None).unwrap();
        let last = ex.trajectory.last().unwrap();
        // screened selection admits every determinant that carries weight;
        // the handful left out couple to the state only with zero amplitude
        assert!(last.wavefunction.space.len() >= 4700);
        assert!((last.energy - (-4.23581)).abs() < 1e-4, "{}", last.energy);
        let full = DetSet::full_space(8, 4, 4).unwrap();
        let (e_fci, _) = dense_ground_state(&full, &ints, 10_000).unwrap();
        assert!((last.energy - e_fci).abs() < 1e-6);
        // monotone to within solver noise
        let mut prev = f64::INFINITY;
        for r in &ex.trajectory {
            assert!(r.energy <= prev + 1e-8, "{} after {prev}", r.energy);
            prev = r.energy;
        }
        // pt2 collapses to zero on the saturated space
        assert_eq!(last.e_pt2, Some(0.0));
    }

    #[test]
    fn unit_growth_without_opt_is_stationary() {
        let ints = hubbard(6, 1.0, 6);
        let cfg = small_cfg(25, 31);
        let start = trimci_run(&ints, &cfg, 2, None).unwrap();
        let expand = PhaseGrowthConfig {
            max_n_dets: 1000,
            growth_factor: 1.0,
            orbital_optimization: false,
            pt2_correction: false,
            ..PhaseGrowthConfig::phase1_defaults()
        };
        let ex = phase_expand(&start, &ints, &expand, None).unwrap();
        assert_eq!(ex.trajectory.len(), 1);
        assert_eq!(ex.trajectory[0].energy, start.energy);
        assert_eq!(
            ex.trajectory[0].wavefunction.space.dets(),
            start.wavefunction.space.dets()
        );
    }

    #[test]
    fn trajectory_csv_shape() {
        let ints = hubbard(4, 0.0, 1);
        let cfg = Phase0Config {
            max_final_dets: 8,
            init_random: 20,
            num_runs: 1,
            num_groups: 2,
            ..small_cfg(8, 1)
        };
        let start = trimci_run(&ints, &cfg, 1, None).unwrap();
        let expand = PhaseGrowthConfig {
            max_n_dets: 36,
            growth_factor: 2.0,
            ..PhaseGrowthConfig::phase2_defaults()
        };
        let ex = phase_expand(&start, &ints, &expand, None).unwrap();
        let csv = trajectory_csv(&ex.trajectory);
        assert!(csv.starts_with("round,n_det,e_var,e_pt2\n"));
        assert_eq!(csv.lines().count(), ex.trajectory.len() + 1);
    }
}
