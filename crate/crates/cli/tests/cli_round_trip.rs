//! Command-level checks: manifests reproduce outputs bitwise, the FCIDUMP
//! model path works end to end, and failure modes exit nonzero.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cooci")
}

struct TempDir(PathBuf);

impl TempDir {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("cooci-cli-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        TempDir(dir)
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn run_ok(args: &[&str]) -> String {
    let out = Command::new(bin()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_identical(a: &Path, b: &Path) {
    let da = std::fs::read(a).unwrap();
    let db = std::fs::read(b).unwrap();
    assert_eq!(da, db, "{a:?} and {b:?} differ");
}

#[test]
fn trimci_manifest_replay_is_bitwise() {
    let tmp = TempDir::new("replay");
    let dir = &tmp.0;
    let config = dir.join("run.conf");
    std::fs::write(
        &config,
        "model = hubbard\nL = 6\nalpha = 1.0\nU = 4.0\nmodel_seed = 3\nseed = 11\n\
         phase0.num_runs = 2\nphase0.cycles = 2\nphase0.max_final_dets = 16\n\
         phase0.init_random = 80\nphase0.num_groups = 4\n\
         phase0.orbital_optimization = true\nbfgs.maxiter = 6\n\
         phase1.enabled = true\nphase1.max_n_dets = 80\nphase1.growth_factor = 1.6\n\
         phase1.orbital_opt_max_iter = 4\n",
    )
    .unwrap();
    let out1 = dir.join("first");
    let out2 = dir.join("second");
    run_ok(&[
        "trimci",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out1.to_str().unwrap(),
    ]);
    run_ok(&[
        "replay",
        "--manifest",
        out1.join("manifest.json").to_str().unwrap(),
        "--out-dir",
        out2.to_str().unwrap(),
    ]);
    for name in [
        "trajectory.csv",
        "phase0_cycles.csv",
        "wavefunction.wf",
        "rotation.bin",
        "result.json",
    ] {
        assert_identical(&out1.join(name), &out2.join(name));
    }
}

#[test]
fn fcidump_model_reaches_closed_form() {
    let tmp = TempDir::new("fcidump");
    let dir = &tmp.0;
    let dump = dir.join("dimer.fcidump");
    std::fs::write(
        &dump,
        "&FCI NORB=2,NELEC=2,MS2=0,\n ORBSYM=1,1,\n ISYM=1,\n&END\n\
         4.0 1 1 1 1\n4.0 2 2 2 2\n-1.0 1 2 0 0\n0.5 0 0 0 0\n",
    )
    .unwrap();
    let config = dir.join("run.conf");
    std::fs::write(
        &config,
        format!("model = fcidump\nfcidump = {}\n", dump.display()),
    )
    .unwrap();
    let out = run_ok(&[
        "fci",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        dir.join("out").to_str().unwrap(),
    ]);
    let e: f64 = out.trim().strip_prefix("E = ").unwrap().parse().unwrap();
    // dimer closed form plus the core-energy record
    let expected = (4.0 - 32f64.sqrt()) / 2.0 + 0.5;
    assert!((e - expected).abs() < 1e-8, "{e} vs {expected}");
}

#[test]
fn fci_pt2_analyze_fit_chain() {
    let tmp = TempDir::new("chain");
    let dir = &tmp.0;
    let config = dir.join("run.conf");
    std::fs::write(
        &config,
        "model = hubbard\nL = 4\nalpha = 1.0\nU = 4.0\nmodel_seed = 2\n\
         pt2.deterministic_mass = 1.0\npt2.eps_hc = 1e-12\n",
    )
    .unwrap();
    let out = dir.join("out");
    run_ok(&[
        "fci",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    let wf = out.join("wavefunction.wf");

    // full-space correction is identically zero
    let pt2_out = dir.join("pt2");
    run_ok(&[
        "pt2",
        "--config",
        config.to_str().unwrap(),
        "--wavefunction",
        wf.to_str().unwrap(),
        "--out-dir",
        pt2_out.to_str().unwrap(),
    ]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(pt2_out.join("pt2.json")).unwrap()).unwrap();
    assert_eq!(v["delta_e"].as_f64().unwrap(), 0.0);

    // observables on the same wavefunction
    let an_out = dir.join("an");
    run_ok(&[
        "analyze",
        "--config",
        config.to_str().unwrap(),
        "--wavefunction",
        wf.to_str().unwrap(),
        "--out-dir",
        an_out.to_str().unwrap(),
    ]);
    let mi = std::fs::read_to_string(an_out.join("mi.csv")).unwrap();
    assert_eq!(mi.lines().count(), 4);

    // synthetic power-law table through the fit command
    let csv = dir.join("traj.csv");
    let mut body = String::from("n,e\n");
    for k in 0..10 {
        let n = 1000.0 * 2f64.powi(k);
        body.push_str(&format!("{n},{}\n", -5.0 + 2.0 * n.powf(-0.5)));
    }
    std::fs::write(&csv, body).unwrap();
    let fit_out = dir.join("fit");
    run_ok(&[
        "fit",
        "--csv",
        csv.to_str().unwrap(),
        "--n-bootstrap",
        "20",
        "--out-dir",
        fit_out.to_str().unwrap(),
    ]);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fit_out.join("fit.json")).unwrap()).unwrap();
    assert!((v["e_extrap"].as_f64().unwrap() - (-5.0)).abs() < 1e-5);
    assert!((v["alpha"].as_f64().unwrap() - 0.5).abs() < 1e-5);
}

#[test]
fn coo_then_expand_with_rotation() {
    let tmp = TempDir::new("cooexp");
    let dir = &tmp.0;
    let config = dir.join("run.conf");
    std::fs::write(
        &config,
        "model = hubbard\nL = 6\nalpha = 1.0\nU = 4.0\nmodel_seed = 5\n\
         bfgs.maxiter = 8\n\
         expand.max_n_dets = 200\nexpand.growth_factor = 2.0\n\
         expand.orbital_optimization = false\nexpand.pt2_correction = false\n",
    )
    .unwrap();
    // a small core from the exact wavefunction's top determinants
    let fci_out = dir.join("fci");
    run_ok(&[
        "fci",
        "--config",
        config.to_str().unwrap(),
        "--out-dir",
        fci_out.to_str().unwrap(),
    ]);
    let full = std::fs::read_to_string(fci_out.join("wavefunction.wf")).unwrap();
    let mut rows: Vec<&str> = full.lines().skip(1).collect();
    rows.sort_by(|a, b| {
        let ca: f64 = a.split_whitespace().nth(2).unwrap().parse().unwrap();
        let cb: f64 = b.split_whitespace().nth(2).unwrap().parse().unwrap();
        cb.abs().partial_cmp(&ca.abs()).unwrap()
    });
    let core = dir.join("core.wf");
    let mut body = format!("6 3 3 {}\n", 24);
    for r in &rows[..24] {
        body.push_str(r);
        body.push('\n');
    }
    std::fs::write(&core, body).unwrap();

    let coo_out = dir.join("coo");
    let stdout = run_ok(&[
        "coo",
        "--config",
        config.to_str().unwrap(),
        "--wavefunction",
        core.to_str().unwrap(),
        "--out-dir",
        coo_out.to_str().unwrap(),
    ]);
    let e_opt: f64 = stdout.trim().strip_prefix("E = ").unwrap().parse().unwrap();

    // frozen-orbital expansion from the optimized basis
    let ex_out = dir.join("expand");
    let stdout = run_ok(&[
        "expand",
        "--config",
        config.to_str().unwrap(),
        "--wavefunction",
        core.to_str().unwrap(),
        "--rotation",
        coo_out.join("rotation.bin").to_str().unwrap(),
        "--out-dir",
        ex_out.to_str().unwrap(),
    ]);
    let e_exp: f64 = stdout.trim().strip_prefix("E = ").unwrap().parse().unwrap();
    assert!(e_exp <= e_opt + 1e-9, "expansion rose: {e_exp} vs {e_opt}");
    let traj = std::fs::read_to_string(ex_out.join("trajectory.csv")).unwrap();
    assert!(traj.lines().count() >= 3);
}

#[test]
fn checkpoint_inspect_reports_consistency() {
    use cooci_distmv::checkpoint::{checkpoint_write, CheckpointMeta, RitzCheckpoint};
    let tmp = TempDir::new("inspect");
    let dir = tmp.0.join("ckpt");
    let ck = RitzCheckpoint {
        vhat: vec![0.6, 0.8],
        hvhat: vec![1.2, 1.6],
        meta: CheckpointMeta {
            energy: 2.0,
            residual: 1e-9,
            matvec_iter: 5,
            n_det: 2,
            config_hash: "h".into(),
        },
    };
    checkpoint_write(&dir, 0, &ck).unwrap();
    let out = run_ok(&[
        "checkpoint-inspect",
        "--dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.contains("rayleigh_quotient = 2"));
    assert!(out.contains("\"matvec_iter\": 5"));
}

#[test]
fn worker_without_factory_exits_nonzero() {
    let tmp = TempDir::new("lonely");
    let out = Command::new(bin())
        .args([
            "worker",
            "--coordinator",
            "127.0.0.1:9", // discard port; nothing listens
            "--scratch",
            tmp.0.join("scratch").to_str().unwrap(),
            "--max-failures",
            "3",
            "--poll-ms",
            "10",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success(), "worker should give up and fail");
}

#[test]
fn bad_config_paths_exit_nonzero() {
    let out = Command::new(bin())
        .args(["fci", "--config", "/nonexistent/path.conf"])
        .output()
        .unwrap();
    assert!(!out.status.success());

    // inconsistent electron counts are rejected
    let tmp = TempDir::new("badcfg");
    let config = tmp.0.join("bad.conf");
    std::fs::write(&config, "model = hubbard\nL = 4\nn_alpha = 9\n").unwrap();
    let out = Command::new(bin())
        .args(["fci", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
