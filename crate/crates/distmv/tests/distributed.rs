//! Localhost factory-worker runs against the in-process solver.

use cooci_core::detspace::DetSet;
use cooci_core::eigen::{davidson_lowest, DavidsonConfig};
use cooci_core::hamio::{build_hubbard_graph, GraphModelSpec, IntegralSet};
use cooci_distmv::factory::{factory_serve, DistConfig, FactoryOutcome};
use cooci_distmv::httpx;
use cooci_distmv::payload;
use cooci_distmv::worker::{run_worker, WorkerConfig, WorkerOutcome};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

fn model(l: usize) -> (DetSet, IntegralSet) {
    let ints = build_hubbard_graph(&GraphModelSpec {
        sites: l,
        t: 1.0,
        u: 4.0,
        alpha: 0.0,
        seed: 1,
    })
    .unwrap();
    (DetSet::full_space(l, l / 2, l / 2).unwrap(), ints)
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("distmv-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn wait_addr(path: &PathBuf) -> SocketAddr {
    for _ in 0..400 {
        if let Ok(text) = std::fs::read_to_string(path) {
            if let Ok(addr) = text.trim().parse() {
                return addr;
            }
        }
        std::thread::sleep(Duration::from_millis(25));
    }
    panic!("factory never published its address at {path:?}");
}

fn reference_energy(space: &DetSet, ints: &IntegralSet, tol: f64) -> f64 {
    let r = davidson_lowest(space, ints, &DavidsonConfig::with_tol(tol)).unwrap();
    assert!(r.converged);
    r.energy
}

fn run_cluster(
    l: usize,
    k: usize,
    z: usize,
    tag: &str,
) -> (FactoryOutcome, Vec<FactoryOutcome>, Vec<WorkerOutcome>) {
    let (space, ints) = model(l);
    let dir = tmp(tag);
    let tol = 1e-12;
    let hash = format!("test-{tag}");

    let addr0_file = dir.join("f0.addr");
    let mk_cfg = |index: usize, coordinator: Option<SocketAddr>| DistConfig {
        n_factories: k,
        index,
        port: 0,
        coordinator,
        scratch_dir: dir.join("scratch"),
        checkpoint_dir: None,
        resume: false,
        energy_tol: tol,
        max_subspace: 8,
        max_iters: 400,
        c_max: 100,
        b_max: 7,
        lease_timeout: Duration::from_secs(30),
        linger: Duration::from_millis(1500),
        reduce_timeout: Duration::from_secs(120),
        config_hash: hash.clone(),
        addr_file: Some(if index == 0 {
            addr0_file.clone()
        } else {
            dir.join(format!("f{index}.addr"))
        }),
    };

    let s0 = space.clone();
    let i0 = ints.clone();
    let cfg0 = mk_cfg(0, None);
    let f0 = std::thread::spawn(move || factory_serve(&s0, &i0, &cfg0).unwrap());
    let coord = wait_addr(&addr0_file);

    let mut others = Vec::new();
    for index in 1..k {
        let s = space.clone();
        let i = ints.clone();
        let cfg = mk_cfg(index, Some(coord));
        others.push(std::thread::spawn(move || factory_serve(&s, &i, &cfg).unwrap()));
    }

    let mut workers = Vec::new();
    for wi in 0..z {
        let wcfg = WorkerConfig::new(coord, dir.join(format!("wcache{wi}")));
        workers.push(std::thread::spawn(move || run_worker(&wcfg).unwrap()));
    }

    let out0 = f0.join().unwrap();
    let outs: Vec<FactoryOutcome> = others.into_iter().map(|h| h.join().unwrap()).collect();
    let wouts: Vec<WorkerOutcome> = workers.into_iter().map(|h| h.join().unwrap()).collect();
    let _ = std::fs::remove_dir_all(&dir);
    (out0, outs, wouts)
}

#[test]
fn k1_z1_matches_single_process() {
    let (space, ints) = model(6);
    let reference = reference_energy(&space, &ints, 1e-12);
    let (out, _, wouts) = run_cluster(6, 1, 1, "k1z1");
    assert!(out.converged);
    assert!(
        (out.energy - reference).abs() < 1e-10,
        "distributed {} vs single-process {reference}",
        out.energy
    );
    // the worker fetched each static payload exactly once for the whole run
    assert!(wouts[0].bundles_done > 10);
    assert_eq!(wouts[0].fetches, 4, "statics were re-fetched");
}

#[test]
fn k2_z2_matches_single_process() {
    let (space, ints) = model(6);
    let reference = reference_energy(&space, &ints, 1e-12);
    let (out0, outs, _) = run_cluster(6, 2, 2, "k2z2");
    assert!(out0.converged);
    assert!(
        (out0.energy - reference).abs() < 1e-10,
        "distributed {} vs single-process {reference}",
        out0.energy
    );
    // both factories agree on the converged energy
    assert!((outs[0].energy - out0.energy).abs() < 1e-12);
}

#[test]
fn duplicate_result_posts_are_ignored() {
    let (space, ints) = model(4);
    let reference = reference_energy(&space, &ints, 1e-12);
    let dir = tmp("dup");
    let hash = "dup-test".to_string();
    let addr_file = dir.join("f.addr");
    let cfg = DistConfig {
        addr_file: Some(addr_file.clone()),
        linger: Duration::from_millis(1500),
        energy_tol: 1e-12,
        ..DistConfig::single(dir.join("scratch"), hash)
    };
    let s = space.clone();
    let i = ints.clone();
    let f = std::thread::spawn(move || factory_serve(&s, &i, &cfg).unwrap());
    let addr = wait_addr(&addr_file);

    // a meddling client re-posts every result it sees; the run must still
    // converge to the right answer because aggregation is keyed by bundle id
    let meddler = std::thread::spawn(move || {
        let timeout = Duration::from_secs(10);
        let mut posted = 0;
        while posted < 5 {
            let Ok((status, body)) = httpx::request(&addr, "GET", "/bundle/next", &[], timeout)
            else {
                break;
            };
            if status == 410 {
                break;
            }
            if status != 200 {
                std::thread::sleep(Duration::from_millis(20));
                continue;
            }
            let lease: cooci_distmv::factory::BundleLease =
                serde_json::from_slice(&body).unwrap();
            // fabricate an honest result by fetching everything like a worker
            // would, then post it twice
            let statics_dir = std::env::temp_dir().join("dup-meddler");
            let mut outcome = WorkerOutcome::default();
            let _ = &mut outcome;
            let dets = payload::decode_dets(
                &httpx::request_ok(&addr, "GET", "/files/dets", &[], timeout).unwrap(),
            )
            .unwrap();
            let agroups = payload::decode_alpha_ranges(
                &httpx::request_ok(&addr, "GET", "/files/agroups", &[], timeout).unwrap(),
            )
            .unwrap();
            let bgroups = payload::decode_beta_rows(
                &httpx::request_ok(&addr, "GET", "/files/bgroups", &[], timeout).unwrap(),
            )
            .unwrap();
            let ints = payload::decode_ints(
                &httpx::request_ok(&addr, "GET", "/files/ints", &[], timeout).unwrap(),
            )
            .unwrap();
            let mut ranges = Vec::new();
            for &(rs, re) in &lease.bundle.v_ranges {
                let body = httpx::request_ok(
                    &addr,
                    "GET",
                    &format!("/files/v?ver={}&offset={}&len={}", lease.ver, rs * 8, (re - rs) * 8),
                    &[],
                    timeout,
                )
                .unwrap();
                ranges.push((rs, payload::decode_f64s(&body).unwrap()));
            }
            let inputs = cooci_distmv::exec::BundleInputs {
                dets: &dets,
                alpha_ranges: &agroups,
                beta_rows: &bgroups,
                ints: &ints,
            };
            let contribs = cooci_distmv::exec::execute_bundle(
                &lease.bundle,
                &inputs,
                &cooci_distmv::exec::VSource::Ranges(&ranges),
            );
            let body = payload::encode_result(lease.bundle.bundle_id, lease.ver, &contribs);
            httpx::request_ok(&addr, "POST", "/bundle/result", &body, timeout).unwrap();
            let again =
                httpx::request(&addr, "POST", "/bundle/result", &body, timeout).unwrap();
            assert_eq!(again.0, 200); // duplicate accepted and ignored
            posted += 1;
            let _ = std::fs::remove_dir_all(&statics_dir);
        }
    });

    let wcfg = WorkerConfig::new(addr, dir.join("wcache"));
    let w = std::thread::spawn(move || run_worker(&wcfg).unwrap());
    let out = f.join().unwrap();
    meddler.join().unwrap();
    w.join().unwrap();
    assert!(out.converged);
    assert!(
        (out.energy - reference).abs() < 1e-10,
        "dup-post run drifted: {} vs {reference}",
        out.energy
    );
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn late_worker_joins_mid_run() {
    let (space, ints) = model(6);
    let reference = reference_energy(&space, &ints, 1e-12);
    let dir = tmp("late");
    let addr_file = dir.join("f.addr");
    let cfg = DistConfig {
        addr_file: Some(addr_file.clone()),
        linger: Duration::from_millis(1500),
        energy_tol: 1e-12,
        ..DistConfig::single(dir.join("scratch"), "late-test".into())
    };
    let s = space.clone();
    let i = ints.clone();
    let f = std::thread::spawn(move || factory_serve(&s, &i, &cfg).unwrap());
    let addr = wait_addr(&addr_file);

    let w1cfg = WorkerConfig::new(addr, dir.join("w1"));
    let w1 = std::thread::spawn(move || run_worker(&w1cfg).unwrap());
    // the second worker shows up well after the run started
    std::thread::sleep(Duration::from_millis(800));
    let w2cfg = WorkerConfig::new(addr, dir.join("w2"));
    let w2 = std::thread::spawn(move || run_worker(&w2cfg).unwrap());

    let out = f.join().unwrap();
    let o1 = w1.join().unwrap();
    let o2 = w2.join().unwrap();
    assert!((out.energy - reference).abs() < 1e-10);
    // both workers contributed
    assert!(o1.bundles_done > 0);
    assert!(o2.bundles_done > 0, "late worker never got work");
    let _ = std::fs::remove_dir_all(&dir);
}
