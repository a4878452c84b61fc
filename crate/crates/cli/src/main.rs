//! Command-line drivers tying the pipeline together: exact diagonalization,
//! the three-phase core search, expansion, topology scans, observables,
//! fits, the perturbative correction, and the distributed eigensolver roles.

mod config;
mod manifest;

use clap::{Parser, Subcommand};
use config::Config;
use cooci_core::analysis;
use cooci_core::coo;
use cooci_core::detspace::{read_wavefunction, write_wavefunction, DetSet, Wavefunction};
use cooci_core::eigen::{davidson_lowest, dense_ground_state, DavidsonConfig, DENSE_LIMIT_DEFAULT};
use cooci_core::hamio::rotate_integrals;
use cooci_core::obsrv;
use cooci_core::trimci;
use manifest::{sha256_hex, RunManifest};
use ndarray::Array2;
use std::error::Error;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "cooci", version, about = "Sparse CI with core-optimized orbitals")]
struct Cli {
    /// Override the run seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Size of the thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for results and the run manifest.
    #[arg(long, global = true, default_value = "cooci_out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact ground state of the configured model (dense oracle or Davidson).
    Fci {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the configured phases: core search, refinement, fast expansion.
    Trimci {
        #[arg(long)]
        config: PathBuf,
    },
    /// Orbital optimization on a fixed core read from a wavefunction file.
    Coo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        wavefunction: PathBuf,
    },
    /// Growth-phase expansion from a starting wavefunction.
    Expand {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        wavefunction: PathBuf,
        /// Optional rotation snapshot applied to the model integrals first.
        #[arg(long)]
        rotation: Option<PathBuf>,
    },
    /// Topology scan: determinant budgets to reach the accuracy target.
    Scan {
        #[arg(long)]
        config: PathBuf,
    },
    /// Orbital-pair mutual information, orderings, spin patterns, and
    /// multi-center statistics of a wavefunction.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        wavefunction: PathBuf,
        /// Center definition file (`Name: i j k`, optional `fallback: S`).
        #[arg(long)]
        centers: Option<PathBuf>,
        #[arg(long)]
        rotation: Option<PathBuf>,
    },
    /// Power-law extrapolation of an (N, E) table.
    Fit {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 5000)]
        n_candidates: usize,
        #[arg(long, default_value_t = 500)]
        n_bootstrap: usize,
    },
    /// Second-order perturbative correction of a wavefunction.
    Pt2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        wavefunction: PathBuf,
        /// Tighten the screening cutoff until the correction settles.
        #[arg(long)]
        adaptive: bool,
    },
    /// Row-owning dispatcher-aggregator of the distributed eigensolver.
    Factory {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// Coordinator address (required for index > 0).
        #[arg(long)]
        coordinator: Option<String>,
        #[arg(long, default_value = "cooci_scratch")]
        scratch: PathBuf,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        /// File to publish the bound listen address into.
        #[arg(long)]
        addr_file: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        linger_ms: u64,
        #[arg(long, default_value_t = 120_000)]
        lease_timeout_ms: u64,
        /// Run this many in-process workers alongside the factory.
        #[arg(long, default_value_t = 0)]
        local_workers: usize,
    },
    /// Stateless bundle executor; pulls work from the factories.
    Worker {
        #[arg(long)]
        coordinator: String,
        #[arg(long, default_value = "cooci_worker_scratch")]
        scratch: PathBuf,
        #[arg(long, default_value_t = 50)]
        poll_ms: u64,
        #[arg(long, default_value_t = 60)]
        max_failures: u32,
        #[arg(long)]
        max_bundles: Option<u64>,
    },
    /// Print checkpoint metadata and verify its internal consistency.
    CheckpointInspect {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Re-run a recorded command from its manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), Box<dyn Error>> {
    let out_dir = cli.out_dir.clone();
    match cli.cmd {
        Cmd::Fci { config } => cmd_fci(&Config::load(&config.display().to_string())?, &out_dir, cli.seed),
        Cmd::Trimci { config } => {
            cmd_trimci(&Config::load(&config.display().to_string())?, &out_dir, cli.seed)
        }
        Cmd::Coo {
            config,
            wavefunction,
        } => cmd_coo(
            &Config::load(&config.display().to_string())?,
            &wavefunction,
            &out_dir,
        ),
        Cmd::Expand {
            config,
            wavefunction,
            rotation,
        } => cmd_expand(
            &Config::load(&config.display().to_string())?,
            &wavefunction,
            rotation.as_deref(),
            &out_dir,
            cli.seed,
        ),
        Cmd::Scan { config } => {
            cmd_scan(&Config::load(&config.display().to_string())?, &out_dir, cli.seed)
        }
        Cmd::Analyze {
            config,
            wavefunction,
            centers,
            rotation,
        } => cmd_analyze(
            &Config::load(&config.display().to_string())?,
            &wavefunction,
            centers.as_deref(),
            rotation.as_deref(),
            &out_dir,
        ),
        Cmd::Fit {
            csv,
            n_candidates,
            n_bootstrap,
        } => cmd_fit(&csv, n_candidates, n_bootstrap, cli.seed.unwrap_or(0), &out_dir),
        Cmd::Pt2 {
            config,
            wavefunction,
            adaptive,
        } => cmd_pt2(
            &Config::load(&config.display().to_string())?,
            &wavefunction,
            adaptive,
            &out_dir,
        ),
        Cmd::Factory {
            config,
            index,
            port,
            coordinator,
            scratch,
            checkpoint_dir,
            resume,
            addr_file,
            linger_ms,
            lease_timeout_ms,
            local_workers,
        } => cmd_factory(
            &Config::load(&config.display().to_string())?,
            FactoryArgs {
                index,
                port,
                coordinator,
                scratch,
                checkpoint_dir,
                resume,
                addr_file,
                linger_ms,
                lease_timeout_ms,
                local_workers,
            },
            &out_dir,
        ),
        Cmd::Worker {
            coordinator,
            scratch,
            poll_ms,
            max_failures,
            max_bundles,
        } => cmd_worker(&coordinator, &scratch, poll_ms, max_failures, max_bundles),
        Cmd::CheckpointInspect { dir, index } => cmd_checkpoint_inspect(&dir, index),
        Cmd::Replay { manifest } => cmd_replay(&manifest, &out_dir),
    }
}

fn write_text(dir: &Path, name: &str, body: &str) -> Result<PathBuf, Box<dyn Error>> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body)?;
    Ok(path)
}

fn load_wavefunction(path: &Path) -> Result<Wavefunction, Box<dyn Error>> {
    let file = std::fs::File::open(path)?;
    Ok(read_wavefunction(BufReader::new(file))?)
}

fn cmd_fci(cfg: &Config, out_dir: &Path, seed: Option<u64>) -> Result<(), Box<dyn Error>> {
    let t0 = Instant::now();
    let (ints, model) = cfg.build_model()?;
    let space = DetSet::full_space(ints.n_orb, ints.n_alpha, ints.n_beta)?;
    let method = cfg.str_or("fci.method", "davidson");
    let tol = cfg.f64_or("fci.davidson_tol", 1e-9)?;
    let (energy, coeffs) = match method.as_str() {
        "dense" => dense_ground_state(&space, &ints, DENSE_LIMIT_DEFAULT)?,
        _ => {
            let r = davidson_lowest(&space, &ints, &DavidsonConfig::with_tol(tol))?;
            if !r.converged {
                eprintln!("fci: solver stopped before |dE| < {tol}");
            }
            (r.energy, r.coeffs)
        }
    };
    println!("E = {energy}");
    let w = Wavefunction::new(space, coeffs)?;
    std::fs::create_dir_all(out_dir)?;
    let wf_path = out_dir.join("wavefunction.wf");
    write_wavefunction(std::fs::File::create(&wf_path)?, &w)?;
    let result = serde_json::json!({
        "model": model,
        "method": method,
        "n_det": w.space.len(),
        "energy": energy,
    });
    let result_path = write_text(out_dir, "result.json", &serde_json::to_string_pretty(&result)?)?;

    let mut m = RunManifest::new("fci", &cfg.text);
    m.seed = seed;
    m.record_output(&wf_path);
    m.record_output(&result_path);
    m.wall_time_secs = t0.elapsed().as_secs_f64();
    m.write(out_dir)?;
    Ok(())
}

fn phase0_cycles_csv(records: &[trimci::CycleRecord]) -> String {
    let mut csv = String::from("cycle,e_ci,e_bfgs\n");
    for r in records {
        let b = r.e_bfgs.map(|x| format!("{x:.12e}")).unwrap_or_default();
        csv.push_str(&format!("{},{:.12e},{}\n", r.cycle, r.e_ci, b));
    }
    csv
}

fn cmd_trimci(cfg: &Config, out_dir: &Path, seed: Option<u64>) -> Result<(), Box<dyn Error>> {
    let t0 = Instant::now();
    let (ints0, _) = cfg.build_model()?;
    let p0_cfg = cfg.phase0(seed)?;
    let coo_cfg = cfg.bfgs()?;
    std::fs::create_dir_all(out_dir)?;
    let mut m = RunManifest::new("trimci", &cfg.text);
    m.seed = seed;

    let centers = match cfg.get("centers") {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let (sets, fallback) = obsrv::parse_center_config(&text)?;
            Some(obsrv::label_centers(
                &Array2::eye(ints0.n_orb),
                &sets,
                &fallback,
            )?)
        }
        None => None,
    };

    let (mut state, mut ints, mut rotation, e_phase0) = if cfg.bool_or("phase0.enabled", true)? {
        let p0 = trimci::phase0(&ints0, &p0_cfg, &coo_cfg, centers.as_ref())?;
        let path = write_text(out_dir, "phase0_cycles.csv", &phase0_cycles_csv(&p0.records))?;
        m.record_output(&path);
        let snap_dir = out_dir.join("snapshots");
        std::fs::create_dir_all(&snap_dir)?;
        for (k, u) in p0.snapshots.iter().enumerate() {
            let path = snap_dir.join(format!("cycle{k}.rot"));
            coo::write_rotation(std::fs::File::create(&path)?, u)?;
            m.record_output(&path);
        }
        let e = p0.best.energy;
        (p0.best, p0.rotated_ints, p0.rotation, Some(e))
    } else {
        let path = cfg
            .get("initial_wavefunction")
            .ok_or("phase0 disabled: need `initial_wavefunction = path`")?;
        let w = load_wavefunction(Path::new(path))?;
        let energy = w.rayleigh_quotient(&ints0);
        (
            trimci::CoreResult {
                wavefunction: w,
                energy,
                index: 0,
                basin: None,
                e_pt2: None,
            },
            ints0.clone(),
            Array2::eye(ints0.n_orb),
            None,
        )
    };

    let mut traj_csv = String::from("phase,round,n_det,e_var,e_pt2\n");
    let base_seed = seed.unwrap_or(p0_cfg.seed);
    for section in ["phase1", "phase2"] {
        if !cfg.bool_or(&format!("{section}.enabled"), false)? {
            continue;
        }
        let gcfg = cfg.growth(section, base_seed)?;
        let ex = trimci::phase_expand(&state, &ints, &gcfg, Some(&coo_cfg))?;
        for r in &ex.trajectory {
            let pt2 = r.e_pt2.map(|x| format!("{x:.12e}")).unwrap_or_default();
            traj_csv.push_str(&format!(
                "{},{},{},{:.12e},{}\n",
                section,
                r.index,
                r.wavefunction.space.len(),
                r.energy,
                pt2
            ));
        }
        rotation = rotation.dot(&ex.rotation);
        ints = ex.final_ints;
        if let Some(last) = ex.trajectory.into_iter().next_back() {
            state = last;
        }
    }
    let traj_path = write_text(out_dir, "trajectory.csv", &traj_csv)?;
    m.record_output(&traj_path);

    let wf_path = out_dir.join("wavefunction.wf");
    write_wavefunction(std::fs::File::create(&wf_path)?, &state.wavefunction)?;
    m.record_output(&wf_path);
    let rot_path = out_dir.join("rotation.bin");
    coo::write_rotation(std::fs::File::create(&rot_path)?, &rotation)?;
    m.record_output(&rot_path);

    let result = serde_json::json!({
        "e_phase0": e_phase0,
        "e_final": state.energy,
        "n_det_final": state.wavefunction.space.len(),
        "basin": state.basin,
    });
    let result_path = write_text(out_dir, "result.json", &serde_json::to_string_pretty(&result)?)?;
    m.record_output(&result_path);
    println!("E = {}", state.energy);
    m.wall_time_secs = t0.elapsed().as_secs_f64();
    m.write(out_dir)?;
    let _ = ints;
    Ok(())
}

fn cmd_coo(cfg: &Config, wf_path: &Path, out_dir: &Path) -> Result<(), Box<dyn Error>> {
    let t0 = Instant::now();
    let (ints, _) = cfg.build_model()?;
    let w = load_wavefunction(wf_path)?;
    let coo_cfg = cfg.bfgs()?;
    let res = coo::bfgs_orbital_opt(&w.space, &ints, &coo_cfg)?;

    std::fs::create_dir_all(out_dir)?;
    let mut m = RunManifest::new("coo", &cfg.text);
    m.arg("wavefunction", wf_path.display());
    m.hash_input("wavefunction", wf_path);
    let rot_path = out_dir.join("rotation.bin");
    coo::write_rotation(std::fs::File::create(&rot_path)?, &res.rotation)?;
    m.record_output(&rot_path);
    let mut csv = String::from("step,e\n");
    for (k, e) in res.accepted_energies.iter().enumerate() {
        csv.push_str(&format!("{k},{e:.12e}\n"));
    }
    let csv_path = write_text(out_dir, "energies.csv", &csv)?;
    m.record_output(&csv_path);
    let result = serde_json::json!({
        "energy": res.energy,
        "iterations": res.iterations,
        "converged": res.converged,
        "accepted_steps": res.accepted_energies.len() - 1,
    });
    let result_path = write_text(out_dir, "result.json", &serde_json::to_string_pretty(&result)?)?;
    m.record_output(&result_path);
    println!("E = {}", res.energy);
    m.wall_time_secs = t0.elapsed().as_secs_f64();
    m.write(out_dir)?;
    Ok(())
}

fn cmd_expand(
    cfg: &Config,
    wf_path: &Path,
    rotation: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<(), Box<dyn Error>> {
    let t0 = Instant::now();
    let (mut ints, _) = cfg.build_model()?;
    if let Some(rot_path) = rotation {
        let u = coo::read_rotation(std::fs::File::open(rot_path)?)?;
        ints = rotate_integrals(&ints, &u)?;
    }
    let w = load_wavefunction(wf_path)?;
    let energy = w.rayleigh_quotient(&ints);
    let start = trimci::CoreResult {
        wavefunction: w,
        energy,
        index: 0,
        basin: None,
        e_pt2: None,
    };
    let gcfg = cfg.growth("expand", seed.unwrap_or(0))?;
    let coo_cfg = cfg.bfgs()?;
    let ex = trimci::phase_expand(&start, &ints, &gcfg, Some(&coo_cfg))?;

    std::fs::create_dir_all(out_dir)?;
    let mut m = RunManifest::new("expand", &cfg.text);
    m.seed = seed;
    m.arg("wavefunction", wf_path.display());
    m.hash_input("wavefunction", wf_path);
    if let Some(r) = rotation {
        m.arg("rotation", r.display());
        m.hash_input("rotation", r);
    }
    let csv_path = write_text(out_dir, "trajectory.csv", &trimci::trajectory_csv(&ex.trajectory))?;
    m.record_output(&csv_path);
    let last = ex.trajectory.last().ok_or("empty trajectory")?;
    let wf_out = out_dir.join("wavefunction.wf");
    write_wavefunction(std::fs::File::create(&wf_out)?, &last.wavefunction)?;
    m.record_output(&wf_out);
    println!("E = {}", last.energy);
    m.wall_time_secs = t0.elapsed().as_secs_f64();
    m.write(out_dir)?;
    Ok(())
}

fn cmd_scan(cfg: &Config, out_dir: &Path, seed: Option<u64>) -> Result<(), Box<dyn Error>> {
    let t0 = Instant::now();
    let alphas = cfg
        .f64_list("scan.alphas")?
        .unwrap_or_else(|| vec![0.0, 0.4, 0.7, 1.0]);
    let target = cfg.f64_or("scan.accuracy_target", 0.1)?;
    let scan_cfg = trimci::ScanConfig {
        sites: cfg.usize_or("L", 8)?,
        u_over_t: cfg.f64_or("U", 4.0)?,
        model_seed: cfg.u64_or("model_seed", 1)?,
        phase0: cfg.phase0(seed)?,
        coo: cfg.bfgs()?,
        expand: cfg.growth("phase1", seed.unwrap_or(0))?,
    };
    let rows = trimci::topology_scan(&scan_cfg, &alphas, target)?;

    let mut csv = String::from("alpha,e_fci,n_coo,n_nocoo,ratio\n");
    for r in &rows {
        let fmt = |x: Option<f64>| x.map(|v| format!("{v:.3}")).unwrap_or("censored".into());
        csv.push_str(&format!(
            "{},{:.8},{},{},{}\n",
            r.alpha,
            r.e_fci,
            fmt(r.n_coo),
            fmt(r.n_nocoo),
            fmt(r.ratio)
        ));
        println!(
            "alpha={} N_coo={} N_nocoo={} ratio={}",
            r.alpha,
            fmt(r.n_coo),
            fmt(r.n_nocoo),
            fmt(r.ratio)
        );
    }
    std::fs::create_dir_all(out_dir)?;
    let mut m = RunManifest::new("scan", &cfg.text);
    m.seed = seed;
    let csv_path = write_text(out_dir, "scan.csv", &csv)?;
    m.record_output(&csv_path);
    m.wall_time_secs = t0.elapsed().as_secs_f64();
    m.write(out_dir)?;
    Ok(())
}

fn cmd_analyze(
    cfg: &Config,
    wf_path: &Path,
    centers_path: Option<&Path>,
    rotation: Option<&Path>,
    out_dir: &Path,
) -> Result<(), Box<dyn Error>> {
    let t0 = Instant::now();
    let w = load_wavefunction(wf_path)?;
    let n = w.space.n_orb();
    let rotation_mat = match rotation {
        Some(p) => coo::read_rotation(std::fs::File::open(p)?)?,
        None => Array2::eye(n),
    };
    let centers = match centers_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let (sets, fallback) = obsrv::parse_center_config(&text)?;
            obsrv::label_centers(&rotation_mat, &sets, &fallback)?
        }
        None => {
            // generic mode: every orbital is its own center
            let sets: Vec<(String, Vec<usize>)> =
                (0..n).map(|i| (format!("C{i}"), vec![i])).collect();
            obsrv::label_centers(&rotation_mat, &sets, "S")?
        }
    };

    let mi = obsrv::mutual_information(&w)?;
    let order = obsrv::fiedler_order(&mi)?;
    let k95 = obsrv::k95_bandwidth(&mi, &order, 0.95);
    let pattern = obsrv::spin_pattern(&w, &centers);
    let top_k = cfg.usize_or("analyze.top_k", 10_000)?;
    let hist = obsrv::multicenter_histogram(&w, &centers, top_k);
    let (_, p0) = w.dominant();

    std::fs::create_dir_all(out_dir)?;
    let mut m = RunManifest::new("analyze", &cfg.text);
    m.arg("wavefunction", wf_path.display());
    m.hash_input("wavefunction", wf_path);
    if let Some(p) = centers_path {
        m.arg("centers", p.display());
        m.hash_input("centers", p);
    }
    if let Some(p) = rotation {
        m.arg("rotation", p.display());
        m.hash_input("rotation", p);
    }
    let mi_path = write_text(out_dir, "mi.csv", &mi.to_csv())?;
    m.record_output(&mi_path);
    let hist_path = write_text(out_dir, "multicenter.csv", &obsrv::histogram_to_csv(&hist))?;
    m.record_output(&hist_path);
    let result = serde_json::json!({
        "n_det": w.space.len(),
        "p0": p0,
        "mi_total_mass": mi.total_mass(),
        "fiedler_order": order,
        "k95": k95,
        "spin_pattern": pattern,
    });
    let result_path = write_text(out_dir, "result.json", &serde_json::to_string_pretty(&result)?)?;
    m.record_output(&result_path);
    println!("pattern = {pattern}  k95 = {k95}  M_tot = {:.6}", mi.total_mass());
    m.wall_time_secs = t0.elapsed().as_secs_f64();
    m.write(out_dir)?;
    Ok(())
}

fn cmd_fit(
    csv: &Path,
    n_candidates: usize,
    n_bootstrap: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<(), Box<dyn Error>> {
    let t0 = Instant::now();
    let text = std::fs::read_to_string(csv)?;
    let mut points = Vec::new();
    for line in text.lines() {
        let mut it = line.split(',');
        let (Some(a), Some(b)) = (it.next(), it.next()) else {
            continue;
        };
        if let (Ok(n), Ok(e)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            points.push((n, e));
        }
    }
    let fit = analysis::powerlaw_fit(&points, n_candidates, n_bootstrap, seed)?;
    let result = serde_json::json!({
        "e_extrap": fit.e_extrap,
        "a": fit.amplitude,
        "alpha": fit.alpha_exp,
        "r2": fit.r2,
        "sigma": fit.bootstrap_sigma,
        "ci90": [fit.ci90.0, fit.ci90.1],
        "degenerate": fit.degenerate,
        "n_points": points.len(),
    });
    println!(
        "e_extrap = {}  alpha = {}  r2 = {}",
        fit.e_extrap, fit.alpha_exp, fit.r2
    );
    std::fs::create_dir_all(out_dir)?;
    let mut m = RunManifest::new("fit", "");
    m.arg("csv", csv.display());
    m.arg("n_candidates", n_candidates);
    m.arg("n_bootstrap", n_bootstrap);
    m.seed = Some(seed);
    m.hash_input("csv", csv);
    let result_path = write_text(out_dir, "fit.json", &serde_json::to_string_pretty(&result)?)?;
    m.record_output(&result_path);
    m.wall_time_secs = t0.elapsed().as_secs_f64();
    m.write(out_dir)?;
    Ok(())
}

fn cmd_pt2(
    cfg: &Config,
    wf_path: &Path,
    adaptive: bool,
    out_dir: &Path,
) -> Result<(), Box<dyn Error>> {
    let t0 = Instant::now();
    let (ints, _) = cfg.build_model()?;
    let w = load_wavefunction(wf_path)?;
    let pcfg = analysis::Pt2Config {
        eps_hc: cfg.f64_or("pt2.eps_hc", 1e-8)?,
        deterministic_mass: cfg.f64_or("pt2.deterministic_mass", 0.99)?,
        adaptive_tighten: cfg.f64_or("pt2.adaptive_tighten", 0.03)?,
        n_chunks: cfg.usize_or("pt2.n_chunks", 1)?,
    };
    let rounds = if adaptive {
        analysis::pt2_adaptive(&w, &ints, &pcfg, cfg.usize_or("pt2.max_rounds", 20)?)?
    } else {
        vec![analysis::pt2_correction(&w, &ints, &pcfg)?]
    };
    let last = rounds.last().unwrap();
    println!("dE_pt2 = {}  (eps_hc = {})", last.delta_e, last.eps_hc);
    let result = serde_json::json!({
        "delta_e": last.delta_e,
        "e_var": last.e_var,
        "eps_hc": last.eps_hc,
        "n_external": last.n_external,
        "n_skipped_denominators": last.n_skipped_denominators,
        "rounds": rounds.iter().map(|r| serde_json::json!({
            "eps_hc": r.eps_hc, "delta_e": r.delta_e,
        })).collect::<Vec<_>>(),
    });
    std::fs::create_dir_all(out_dir)?;
    let mut m = RunManifest::new("pt2", &cfg.text);
    m.arg("wavefunction", wf_path.display());
    m.arg("adaptive", adaptive);
    m.hash_input("wavefunction", wf_path);
    let result_path = write_text(out_dir, "pt2.json", &serde_json::to_string_pretty(&result)?)?;
    m.record_output(&result_path);
    m.wall_time_secs = t0.elapsed().as_secs_f64();
    m.write(out_dir)?;
    Ok(())
}

struct FactoryArgs {
    index: usize,
    port: u16,
    coordinator: Option<String>,
    scratch: PathBuf,
    checkpoint_dir: Option<PathBuf>,
    resume: bool,
    addr_file: Option<PathBuf>,
    linger_ms: u64,
    lease_timeout_ms: u64,
    local_workers: usize,
}

/// The distributed-run identity: every factory of one run must agree on this,
/// and a resume against a different configuration must be refused.
fn dist_config_hash(cfg: &Config, n_det: usize) -> Result<String, Box<dyn Error>> {
    let canonical = format!(
        "model={};L={};U={};t={};alpha={};model_seed={};n_det={n_det};k={};tol={};m={};c={};b={}",
        cfg.str_or("model", "hubbard"),
        cfg.usize_or("L", 8)?,
        cfg.f64_or("U", 4.0)?,
        cfg.f64_or("t", 1.0)?,
        cfg.f64_or("alpha", 0.0)?,
        cfg.u64_or("model_seed", 1)?,
        cfg.usize_or("dist.k", 1)?,
        cfg.f64_or("dist.energy_tol", 1e-7)?,
        cfg.usize_or("dist.max_subspace", 8)?,
        cfg.usize_or("dist.c", 100)?,
        cfg.usize_or("dist.b", 7)?,
    );
    Ok(sha256_hex(canonical.as_bytes()))
}

fn cmd_factory(cfg: &Config, args: FactoryArgs, out_dir: &Path) -> Result<(), Box<dyn Error>> {
    use cooci_distmv::factory::{factory_serve, DistConfig};
    let (ints, _) = cfg.build_model()?;
    let space = match cfg.get("space_wavefunction") {
        Some(path) => load_wavefunction(Path::new(path))?.space,
        None => DetSet::full_space(ints.n_orb, ints.n_alpha, ints.n_beta)?,
    };
    let hash = dist_config_hash(cfg, space.len())?;
    let dist = DistConfig {
        n_factories: cfg.usize_or("dist.k", 1)?,
        index: args.index,
        port: args.port,
        coordinator: match &args.coordinator {
            Some(a) => Some(a.parse()?),
            None => None,
        },
        scratch_dir: args.scratch.clone(),
        checkpoint_dir: args.checkpoint_dir.clone(),
        resume: args.resume,
        energy_tol: cfg.f64_or("dist.energy_tol", 1e-7)?,
        max_subspace: cfg.usize_or("dist.max_subspace", 8)?,
        max_iters: cfg.usize_or("dist.max_iters", 400)?,
        c_max: cfg.usize_or("dist.c", 100)?,
        b_max: cfg.usize_or("dist.b", 7)?,
        lease_timeout: std::time::Duration::from_millis(args.lease_timeout_ms),
        linger: std::time::Duration::from_millis(args.linger_ms),
        reduce_timeout: std::time::Duration::from_secs(cfg.u64_or("dist.reduce_timeout_s", 600)?),
        config_hash: hash,
        addr_file: args.addr_file.clone(),
    };

    // optional in-process workers so a single command can run standalone
    let mut local = Vec::new();
    if args.local_workers > 0 {
        let addr_file = args
            .addr_file
            .clone()
            .ok_or("local workers need --addr-file to find the factory")?;
        for k in 0..args.local_workers {
            let addr_file = addr_file.clone();
            let scratch = args.scratch.join(format!("localworker{k}"));
            local.push(std::thread::spawn(move || {
                let mut addr = None;
                for _ in 0..600 {
                    if let Ok(text) = std::fs::read_to_string(&addr_file) {
                        if let Ok(a) = text.trim().parse() {
                            addr = Some(a);
                            break;
                        }
                    }
                    std::thread::sleep(std::time::Duration::from_millis(50));
                }
                let Some(addr) = addr else { return };
                let wcfg = cooci_distmv::worker::WorkerConfig::new(addr, scratch);
                let _ = cooci_distmv::worker::run_worker(&wcfg);
            }));
        }
    }

    let outcome = factory_serve(&space, &ints, &dist)?;
    for h in local {
        let _ = h.join();
    }
    println!(
        "E = {}  residual = {}  matvecs = {}  converged = {}",
        outcome.energy, outcome.residual, outcome.matvec_iter, outcome.converged
    );
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("factory{}.json", args.index));
    std::fs::write(&path, serde_json::to_vec_pretty(&outcome)?)?;
    if !outcome.converged {
        return Err("factory stopped before convergence".into());
    }
    Ok(())
}

fn cmd_worker(
    coordinator: &str,
    scratch: &Path,
    poll_ms: u64,
    max_failures: u32,
    max_bundles: Option<u64>,
) -> Result<(), Box<dyn Error>> {
    use cooci_distmv::worker::{run_worker, WorkerConfig};
    let cfg = WorkerConfig {
        coordinator: coordinator.parse()?,
        scratch_dir: scratch.to_path_buf(),
        poll_interval: std::time::Duration::from_millis(poll_ms),
        request_timeout: std::time::Duration::from_secs(30),
        max_failures,
        max_bundles,
    };
    let outcome = run_worker(&cfg)?;
    println!(
        "bundles = {}  fetches = {}  cache_hits = {}",
        outcome.bundles_done, outcome.fetches, outcome.cache_hits
    );
    Ok(())
}

fn cmd_checkpoint_inspect(dir: &Path, index: usize) -> Result<(), Box<dyn Error>> {
    use cooci_distmv::checkpoint;
    let meta = checkpoint::read_meta(dir, index)?;
    let ck = checkpoint::checkpoint_resume(dir, index, &meta.config_hash, meta.n_det)?;
    let num: f64 = ck.vhat.iter().zip(&ck.hvhat).map(|(a, b)| a * b).sum();
    let den: f64 = ck.vhat.iter().map(|a| a * a).sum();
    let rq = num / den;
    println!("{}", serde_json::to_string_pretty(&meta)?);
    println!("rayleigh_quotient = {rq}");
    println!("consistency |rq - energy| = {:.3e}", (rq - meta.energy).abs());
    Ok(())
}

fn cmd_replay(manifest_path: &Path, out_dir: &Path) -> Result<(), Box<dyn Error>> {
    let m = RunManifest::load(manifest_path)?;
    let cfg = Config::parse(&m.config_text)?;
    let get_path = |key: &str| m.args.get(key).map(PathBuf::from);
    match m.command.as_str() {
        "fci" => cmd_fci(&cfg, out_dir, m.seed),
        "trimci" => cmd_trimci(&cfg, out_dir, m.seed),
        "scan" => cmd_scan(&cfg, out_dir, m.seed),
        "coo" => cmd_coo(
            &cfg,
            &get_path("wavefunction").ok_or("manifest lacks wavefunction")?,
            out_dir,
        ),
        "expand" => cmd_expand(
            &cfg,
            &get_path("wavefunction").ok_or("manifest lacks wavefunction")?,
            get_path("rotation").as_deref(),
            out_dir,
            m.seed,
        ),
        "analyze" => cmd_analyze(
            &cfg,
            &get_path("wavefunction").ok_or("manifest lacks wavefunction")?,
            get_path("centers").as_deref(),
            get_path("rotation").as_deref(),
            out_dir,
        ),
        "pt2" => cmd_pt2(
            &cfg,
            &get_path("wavefunction").ok_or("manifest lacks wavefunction")?,
            m.args.get("adaptive").map(|v| v == "true").unwrap_or(false),
            out_dir,
        ),
        "fit" => cmd_fit(
            &get_path("csv").ok_or("manifest lacks csv")?,
            m.args
                .get("n_candidates")
                .and_then(|v| v.parse().ok())
                .unwrap_or(5000),
            m.args
                .get("n_bootstrap")
                .and_then(|v| v.parse().ok())
                .unwrap_or(500),
            m.seed.unwrap_or(0),
            out_dir,
        ),
        other => Err(format!("replay does not support `{other}`").into()),
    }
}
