//! Row-owning factory: dispatches bundles to workers with leases, aggregates
//! returned contributions exactly once, drives the Davidson outer loop over
//! out-of-core Krylov storage, joins global reductions, and checkpoints the
//! best Ritz pair in the background.

use crate::channel::{build_channels, channel_global_row, pack, Bundle};
use crate::checkpoint::{
    checkpoint_exists, checkpoint_resume, checkpoint_write, CheckpointError, CheckpointMeta,
    RitzCheckpoint,
};
use crate::httpx::{self, Request, Response};
use crate::ooc::{OocError, OocStore};
use crate::payload;
use crate::reduce::{ReduceError, ReduceHub, ReduceOp, ReduceRequest, ReduceResponse, Reducer};
use cooci_core::detspace::{diagonal_element, DetSet};
use cooci_core::hamio::IntegralSet;
use cooci_core::linalg;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FactoryError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Ooc(#[from] OocError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
    #[error(transparent)]
    Transport(#[from] httpx::HttpError),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("peer rendezvous timed out")]
    PeerTimeout,
}

#[derive(Debug, Clone)]
pub struct DistConfig {
    pub n_factories: usize,
    pub index: usize,
    pub port: u16,
    pub coordinator: Option<SocketAddr>,
    pub scratch_dir: PathBuf,
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    pub energy_tol: f64,
    pub max_subspace: usize,
    pub max_iters: usize,
    pub c_max: usize,
    pub b_max: usize,
    pub lease_timeout: Duration,
    pub linger: Duration,
    pub reduce_timeout: Duration,
    pub config_hash: String,
    pub addr_file: Option<PathBuf>,
}

impl DistConfig {
    pub fn single(scratch_dir: PathBuf, config_hash: String) -> Self {
        DistConfig {
            n_factories: 1,
            index: 0,
            port: 0,
            coordinator: None,
            scratch_dir,
            checkpoint_dir: None,
            resume: false,
            energy_tol: 1e-7,
            max_subspace: 8,
            max_iters: 400,
            c_max: 100,
            b_max: 7,
            lease_timeout: Duration::from_secs(120),
            linger: Duration::from_secs(5),
            reduce_timeout: Duration::from_secs(600),
            config_hash,
            addr_file: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactoryOutcome {
    pub energy: f64,
    pub residual: f64,
    pub matvec_iter: u64,
    pub converged: bool,
    pub n_det: u64,
    pub index: usize,
    pub n_factories: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusInfo {
    pub state: String,
    pub index: usize,
    pub n_factories: usize,
    pub n_det: u64,
    pub matvec_iter: u64,
    pub subspace: usize,
    pub energy: f64,
    pub residual: f64,
    pub ver: u64,
    pub bundles_total: usize,
    pub bundles_done: usize,
    pub file_requests: HashMap<String, u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeersInfo {
    pub addrs: Vec<String>,
    pub shards: Vec<u64>,
    pub n_det: u64,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BundleLease {
    pub ver: u64,
    pub bundle: Bundle,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegisterRequest {
    index: usize,
    addr: String,
}

enum LeaseState {
    Pending,
    Leased { deadline: Instant, count: u32 },
    Done,
}

struct MatvecQueue {
    ver: u64,
    active: bool,
    v_slice: Arc<Vec<f64>>,
    states: Vec<LeaseState>,
    results: HashMap<u64, Vec<(u64, f64)>>,
    n_done: usize,
}

struct Shared {
    index: usize,
    n_factories: usize,
    n_det: u64,
    shard: (u64, u64),
    lease_timeout: Duration,
    statics: HashMap<&'static str, Arc<Vec<u8>>>,
    bundles: Vec<Bundle>,
    id_to_idx: HashMap<u64, usize>,
    queue: Mutex<MatvecQueue>,
    queue_cv: Condvar,
    peers: Mutex<Option<PeersInfo>>,
    registrations: Mutex<HashMap<usize, String>>,
    status: Mutex<StatusInfo>,
    hub: Option<Arc<ReduceHub>>,
    file_requests: Mutex<HashMap<String, u64>>,
    done: AtomicBool,
}

fn shard_bounds(n: u64, k: usize) -> Vec<u64> {
    (0..=k).map(|i| (i as u64 * n) / k as u64).collect()
}

fn handle(shared: &Shared, req: Request) -> Response {
    match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/status") => {
            let mut st = shared.status.lock().unwrap().clone();
            st.file_requests = shared.file_requests.lock().unwrap().clone();
            {
                let q = shared.queue.lock().unwrap();
                st.ver = q.ver;
                st.bundles_total = shared.bundles.len();
                st.bundles_done = q.n_done;
            }
            Response::ok_json(&st)
        }
        ("POST", "/register") => {
            let Ok(r) = serde_json::from_slice::<RegisterRequest>(&req.body) else {
                return Response::status(400, "bad register body");
            };
            if shared.index != 0 {
                return Response::status(409, "not the coordinator");
            }
            let count = {
                let mut regs = shared.registrations.lock().unwrap();
                regs.insert(r.index, r.addr);
                regs.len()
            };
            if count == shared.n_factories - 1 {
                // registration complete; peers are published by the driver
            }
            Response::ok_json(&serde_json::json!({"registered": count}))
        }
        ("GET", "/peers") => match shared.peers.lock().unwrap().as_ref() {
            Some(p) => Response::ok_json(p),
            None => Response::status(503, "peers not ready"),
        },
        ("GET", "/bundle/next") => {
            if shared.done.load(Ordering::SeqCst) {
                return Response::status(410, "run complete");
            }
            let mut q = shared.queue.lock().unwrap();
            if !q.active {
                return Response::status(204, "");
            }
            let now = Instant::now();
            let ver = q.ver;
            for i in 0..shared.bundles.len() {
                let lease = match &q.states[i] {
                    LeaseState::Pending => Some(0),
                    LeaseState::Leased { deadline, count } if now > *deadline => Some(*count),
                    _ => None,
                };
                if let Some(count) = lease {
                    // exponential re-lease on expiry
                    let timeout = shared.lease_timeout * 2u32.saturating_pow(count.min(8));
                    q.states[i] = LeaseState::Leased {
                        deadline: now + timeout,
                        count: count + 1,
                    };
                    let lease = BundleLease {
                        ver,
                        bundle: shared.bundles[i].clone(),
                    };
                    return Response::ok_json(&lease);
                }
            }
            Response::status(204, "")
        }
        ("POST", "/bundle/result") => {
            let Ok((id, ver, contribs)) = payload::decode_result(&req.body) else {
                return Response::status(400, "bad result body");
            };
            let mut q = shared.queue.lock().unwrap();
            if ver != q.ver || !q.active {
                return Response::status(200, "stale");
            }
            let Some(&idx) = shared.id_to_idx.get(&id) else {
                return Response::status(404, "unknown bundle");
            };
            if matches!(q.states[idx], LeaseState::Done) {
                return Response::status(200, "duplicate");
            }
            q.states[idx] = LeaseState::Done;
            q.results.insert(id, contribs);
            q.n_done += 1;
            drop(q);
            shared.queue_cv.notify_all();
            Response::status(200, "ok")
        }
        ("POST", "/reduce") => {
            let Some(hub) = &shared.hub else {
                return Response::status(409, "not the coordinator");
            };
            let Ok(r) = serde_json::from_slice::<ReduceRequest>(&req.body) else {
                return Response::status(400, "bad reduce body");
            };
            match hub.contribute(&r.tag, r.op, r.from, r.values) {
                Ok(values) => Response::ok_json(&ReduceResponse { values }),
                Err(e) => Response::status(503, &e.to_string()),
            }
        }
        ("GET", path) if path.starts_with("/files/") => {
            let name = &path["/files/".len()..];
            {
                let mut fr = shared.file_requests.lock().unwrap();
                *fr.entry(name.to_string()).or_insert(0) += 1;
            }
            let full: Option<Arc<Vec<u8>>> = if name == "v" {
                let ver: u64 = match req.query.get("ver").and_then(|v| v.parse().ok()) {
                    Some(v) => v,
                    None => return Response::status(400, "v requires ver"),
                };
                let q = shared.queue.lock().unwrap();
                if ver > q.ver {
                    return Response::status(503, "vector version not published yet");
                }
                if ver < q.ver {
                    return Response::status(410, "vector version superseded");
                }
                Some(Arc::new(payload::encode_f64s(&q.v_slice)))
            } else {
                shared.statics.get(name).cloned()
            };
            let Some(data) = full else {
                return Response::status(404, "no such file");
            };
            let offset: usize = req
                .query
                .get("offset")
                .and_then(|v| v.parse().ok())
                .unwrap_or(0);
            let len: usize = req
                .query
                .get("len")
                .and_then(|v| v.parse().ok())
                .unwrap_or(data.len().saturating_sub(offset));
            if offset > data.len() || offset + len > data.len() {
                return Response::status(400, "range out of bounds");
            }
            Response::ok_bytes(data[offset..offset + len].to_vec())
        }
        _ => Response::status(404, "unknown endpoint"),
    }
}

fn local_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Run one factory to convergence: serve bundles and files, aggregate sigma
/// contributions, and drive the sharded Davidson loop. Blocks until the run
/// finishes, then lingers briefly so workers can observe completion.
pub fn factory_serve(
    space: &DetSet,
    ints: &IntegralSet,
    cfg: &DistConfig,
) -> Result<FactoryOutcome, FactoryError> {
    if cfg.index >= cfg.n_factories {
        return Err(FactoryError::Config(format!(
            "factory index {} out of range for K={}",
            cfg.index, cfg.n_factories
        )));
    }
    if cfg.index > 0 && cfg.coordinator.is_none() {
        return Err(FactoryError::Config(
            "non-coordinator factories need the coordinator address".into(),
        ));
    }
    let n = space.len() as u64;
    let shards = shard_bounds(n, cfg.n_factories);
    let (ra, rb) = (shards[cfg.index], shards[cfg.index + 1]);

    // own bundles: channels whose destination row falls in this shard
    let (channels, _) = build_channels(space);
    let own: Vec<_> = channels
        .into_iter()
        .filter(|c| {
            let row = channel_global_row(space, c) as u64;
            (ra..rb).contains(&row)
        })
        .collect();
    let bundles = pack(space, &own, cfg.c_max, cfg.b_max, (cfg.index as u64) << 48);
    let id_to_idx: HashMap<u64, usize> =
        bundles.iter().enumerate().map(|(i, b)| (b.bundle_id, i)).collect();

    let mut statics: HashMap<&'static str, Arc<Vec<u8>>> = HashMap::new();
    statics.insert("dets", Arc::new(payload::encode_dets(space.dets())));
    statics.insert("agroups", Arc::new(payload::encode_alpha_ranges(space)));
    statics.insert("bgroups", Arc::new(payload::encode_beta_rows(space)));
    statics.insert("ints", Arc::new(payload::encode_ints(ints)));

    let listener = TcpListener::bind(("127.0.0.1", cfg.port))?;
    let local_addr = listener.local_addr()?;
    if let Some(path) = &cfg.addr_file {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, local_addr.to_string())?;
        std::fs::rename(&tmp, path)?;
    }

    let hub = if cfg.index == 0 && cfg.n_factories > 1 {
        Some(ReduceHub::new(cfg.n_factories, cfg.reduce_timeout))
    } else {
        None
    };
    let n_bundles = bundles.len();
    let shared = Arc::new(Shared {
        index: cfg.index,
        n_factories: cfg.n_factories,
        n_det: n,
        shard: (ra, rb),
        lease_timeout: cfg.lease_timeout,
        statics,
        bundles,
        id_to_idx,
        queue: Mutex::new(MatvecQueue {
            ver: 0,
            active: false,
            v_slice: Arc::new(Vec::new()),
            states: Vec::new(),
            results: HashMap::new(),
            n_done: 0,
        }),
        queue_cv: Condvar::new(),
        peers: Mutex::new(None),
        registrations: Mutex::new(HashMap::new()),
        status: Mutex::new(StatusInfo {
            state: "preparing".into(),
            index: cfg.index,
            n_factories: cfg.n_factories,
            n_det: n,
            matvec_iter: 0,
            subspace: 0,
            energy: f64::NAN,
            residual: f64::NAN,
            ver: 0,
            bundles_total: n_bundles,
            bundles_done: 0,
            file_requests: HashMap::new(),
        }),
        hub: hub.clone(),
        file_requests: Mutex::new(HashMap::new()),
        done: AtomicBool::new(false),
    });

    let handler_shared = Arc::clone(&shared);
    let _server = httpx::serve(listener, Arc::new(move |req| handle(&handler_shared, req)));

    // peer rendezvous
    let reducer = if cfg.n_factories == 1 {
        let peers = PeersInfo {
            addrs: vec![local_addr.to_string()],
            shards: shards.clone(),
            n_det: n,
            config_hash: cfg.config_hash.clone(),
        };
        *shared.peers.lock().unwrap() = Some(peers);
        Reducer::Local
    } else if cfg.index == 0 {
        let deadline = Instant::now() + cfg.reduce_timeout;
        loop {
            {
                let regs = shared.registrations.lock().unwrap();
                if regs.len() == cfg.n_factories - 1 {
                    let mut addrs = vec![local_addr.to_string()];
                    for i in 1..cfg.n_factories {
                        addrs.push(regs[&i].clone());
                    }
                    *shared.peers.lock().unwrap() = Some(PeersInfo {
                        addrs,
                        shards: shards.clone(),
                        n_det: n,
                        config_hash: cfg.config_hash.clone(),
                    });
                    break;
                }
            }
            if Instant::now() > deadline {
                return Err(FactoryError::PeerTimeout);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        Reducer::Coordinator {
            hub: hub.expect("coordinator owns the hub"),
            index: 0,
        }
    } else {
        let coordinator = cfg.coordinator.unwrap();
        let body = serde_json::to_vec(&RegisterRequest {
            index: cfg.index,
            addr: local_addr.to_string(),
        })
        .unwrap();
        let deadline = Instant::now() + cfg.reduce_timeout;
        loop {
            match httpx::request_ok(&coordinator, "POST", "/register", &body, Duration::from_secs(10))
            {
                Ok(_) => break,
                Err(_) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(100))
                }
                Err(e) => return Err(e.into()),
            }
        }
        // mirror the peer table locally for workers polling this factory
        loop {
            match httpx::request_ok(&coordinator, "GET", "/peers", &[], Duration::from_secs(10)) {
                Ok(body) => {
                    if let Ok(p) = serde_json::from_slice::<PeersInfo>(&body) {
                        *shared.peers.lock().unwrap() = Some(p);
                        break;
                    }
                }
                Err(_) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(100))
                }
                Err(e) => return Err(e.into()),
            }
        }
        Reducer::Remote {
            coordinator,
            index: cfg.index,
            timeout: cfg.reduce_timeout,
        }
    };

    let outcome = davidson_sharded(space, ints, cfg, &shared, &reducer);
    shared.done.store(true, Ordering::SeqCst);
    {
        let mut st = shared.status.lock().unwrap();
        st.state = if outcome.is_ok() { "done".into() } else { "failed".into() };
    }
    std::thread::sleep(cfg.linger);
    outcome
}

/// Publish the trial vector, serve the bundle queue until every bundle has
/// reported, and fold contributions in ascending bundle-id order on top of
/// the diagonal term.
fn distributed_matvec(
    shared: &Shared,
    diag: &[f64],
    v_loc: &[f64],
    ver: u64,
) -> Vec<f64> {
    {
        let mut q = shared.queue.lock().unwrap();
        q.ver = ver;
        q.v_slice = Arc::new(v_loc.to_vec());
        q.states = (0..shared.bundles.len())
            .map(|_| LeaseState::Pending)
            .collect();
        q.results.clear();
        q.n_done = 0;
        q.active = true;
    }
    let mut sigma: Vec<f64> = diag.iter().zip(v_loc).map(|(d, v)| d * v).collect();
    let mut q = shared.queue.lock().unwrap();
    while q.n_done < shared.bundles.len() {
        let (guard, _) = shared
            .queue_cv
            .wait_timeout(q, Duration::from_millis(200))
            .unwrap();
        q = guard;
    }
    q.active = false;
    let mut ids: Vec<u64> = q.results.keys().copied().collect();
    ids.sort_unstable();
    let ra = shared.shard.0;
    for id in ids {
        for &(row, val) in &q.results[&id] {
            sigma[(row - ra) as usize] += val;
        }
    }
    sigma
}

fn davidson_sharded(
    space: &DetSet,
    ints: &IntegralSet,
    cfg: &DistConfig,
    shared: &Shared,
    reducer: &Reducer,
) -> Result<FactoryOutcome, FactoryError> {
    let (ra, rb) = shared.shard;
    let nloc = (rb - ra) as usize;
    let diag: Vec<f64> = (ra..rb)
        .map(|i| diagonal_element(space.det(i as usize), ints))
        .collect();

    let fdir = cfg.scratch_dir.join(format!("factory{}", cfg.index));
    std::fs::create_dir_all(&fdir)?;
    let v_path = fdir.join("v.ooc");
    let hv_path = fdir.join("hv.ooc");

    let mut seq: u64 = 0;
    let mut next_tag = move || {
        seq += 1;
        format!("r{seq}")
    };
    let reduce_sum = |tag: &str, values: Vec<f64>| -> Result<Vec<f64>, FactoryError> {
        Ok(reducer.reduce(tag, ReduceOp::Sum, values)?)
    };

    let mut matvec_iter: u64 = 0;
    let mut vs;
    let mut hvs;

    let resumed = cfg.resume
        && cfg
            .checkpoint_dir
            .as_ref()
            .map(|d| checkpoint_exists(d, cfg.index))
            .unwrap_or(false);
    if resumed {
        let dir = cfg.checkpoint_dir.as_ref().unwrap();
        let ck = checkpoint_resume(dir, cfg.index, &cfg.config_hash, nloc as u64)?;
        matvec_iter = ck.meta.matvec_iter;
        // fresh out-of-core stores seeded with the surviving Ritz pair
        let _ = std::fs::remove_file(&v_path);
        let _ = std::fs::remove_file(&hv_path);
        vs = OocStore::open(&v_path, nloc as u64)?;
        hvs = OocStore::open(&hv_path, nloc as u64)?;
        let n2 = reduce_sum(&next_tag(), vec![local_dot(&ck.vhat, &ck.vhat)])?[0];
        let scale = n2.sqrt();
        let v1: Vec<f64> = ck.vhat.iter().map(|x| x / scale).collect();
        let hv1: Vec<f64> = ck.hvhat.iter().map(|x| x / scale).collect();
        vs.append(&v1)?;
        hvs.append(&hv1)?;
    } else {
        let _ = std::fs::remove_file(&v_path);
        let _ = std::fs::remove_file(&hv_path);
        vs = OocStore::open(&v_path, nloc as u64)?;
        hvs = OocStore::open(&hv_path, nloc as u64)?;
        // start from the unit vector on the globally lowest diagonal
        let (mut dmin, mut rmin) = (f64::INFINITY, u64::MAX);
        for (k, &d) in diag.iter().enumerate() {
            if d < dmin {
                dmin = d;
                rmin = ra + k as u64;
            }
        }
        let global = reducer.reduce(&next_tag(), ReduceOp::MinPair, vec![dmin, rmin as f64])?;
        let row = global[1] as u64;
        let mut v1 = vec![0.0; nloc];
        if (ra..rb).contains(&row) {
            v1[(row - ra) as usize] = 1.0;
        }
        vs.append(&v1)?;
        matvec_iter += 1;
        let hv1 = distributed_matvec(shared, &diag, &v1, matvec_iter);
        hvs.append(&hv1)?;
    }

    {
        let mut st = shared.status.lock().unwrap();
        st.state = "running".into();
    }

    // background checkpoint writer; at most one write in flight, newer
    // snapshots replace a waiting one
    let ckpt_dir = cfg.checkpoint_dir.clone();
    let ckpt_index = cfg.index;
    let (ckpt_tx, ckpt_rx) = std::sync::mpsc::sync_channel::<RitzCheckpoint>(1);
    let ckpt_handle = std::thread::spawn(move || {
        if let Some(dir) = ckpt_dir {
            while let Ok(ck) = ckpt_rx.recv() {
                let _ = checkpoint_write(&dir, ckpt_index, &ck);
            }
        }
    });

    let mut theta_prev: Option<f64> = None;
    let mut best_energy = f64::INFINITY;
    let mut best_residual = f64::INFINITY;
    let mut converged = false;

    for _iter in 0..cfg.max_iters {
        let k = vs.layers();
        {
            let mut st = shared.status.lock().unwrap();
            st.subspace = k;
            st.matvec_iter = matvec_iter;
        }
        // projected matrix from sequential scans of the stored layers
        let mut partials = Vec::with_capacity(k * k);
        for i in 0..k {
            let vi = vs.read(i)?;
            for j in 0..k {
                partials.push(hvs.scan_dot(j, &vi)?);
            }
        }
        let tmat = reduce_sum(&next_tag(), partials)?;
        let mut t = Array2::zeros((k, k));
        for i in 0..k {
            for j in 0..k {
                t[[i, j]] = tmat[i * k + j];
            }
        }
        let t = (&t + &t.t()) / 2.0;
        let (vals, vecs) =
            linalg::eigh(&t).map_err(|e| FactoryError::Linalg(e.to_string()))?;
        let theta = vals[0];
        let s = vecs.column(0);

        let mut ritz = vec![0.0; nloc];
        let mut ritz_image = vec![0.0; nloc];
        for (i, &si) in s.iter().enumerate() {
            let vi = vs.read(i)?;
            let hvi = hvs.read(i)?;
            for x in 0..nloc {
                ritz[x] += si * vi[x];
                ritz_image[x] += si * hvi[x];
            }
        }
        let mut residual: Vec<f64> = ritz_image
            .iter()
            .zip(&ritz)
            .map(|(hv, v)| hv - theta * v)
            .collect();
        let res2 = reduce_sum(&next_tag(), vec![local_dot(&residual, &residual)])?[0];
        let res_norm = res2.sqrt();

        best_energy = theta;
        best_residual = res_norm;
        {
            let mut st = shared.status.lock().unwrap();
            st.energy = theta;
            st.residual = res_norm;
        }
        let _ = ckpt_tx.try_send(RitzCheckpoint {
            vhat: ritz.clone(),
            hvhat: ritz_image.clone(),
            meta: CheckpointMeta {
                energy: theta,
                residual: res_norm,
                matvec_iter,
                n_det: shared.n_det,
                config_hash: cfg.config_hash.clone(),
            },
        });

        let residual_guard = cfg.energy_tol.sqrt() * theta.abs().max(1.0);
        let de_converged = theta_prev.map_or(false, |p| (theta - p).abs() < cfg.energy_tol)
            && res_norm <= residual_guard;
        let res_converged = res_norm < 1e-13 * theta.abs().max(1.0);
        if de_converged || res_converged {
            converged = true;
            break;
        }
        theta_prev = Some(theta);

        if k == cfg.max_subspace {
            // subspace restart with the surviving Ritz pair
            vs.truncate_to(0)?;
            hvs.truncate_to(0)?;
            vs.append(&ritz)?;
            hvs.append(&ritz_image)?;
        }

        for (x, r) in residual.iter_mut().enumerate() {
            let mut d = theta - diag[x];
            if d.abs() < 1e-8 {
                d = if d < 0.0 { -1e-8 } else { 1e-8 };
            }
            *r /= d;
        }
        // classical Gram-Schmidt against the stored basis, one
        // re-orthogonalization pass if the overlap residual check fails
        for pass in 0..2 {
            let layers = vs.layers();
            let mut overlaps = Vec::with_capacity(layers);
            for i in 0..layers {
                overlaps.push(vs.scan_dot(i, &residual)?);
            }
            let overlaps = reduce_sum(&next_tag(), overlaps)?;
            for (i, o) in overlaps.iter().enumerate() {
                let vi = vs.read(i)?;
                for (x, b) in residual.iter_mut().zip(&vi) {
                    *x -= o * b;
                }
            }
            if pass == 0 {
                let mut check = Vec::with_capacity(layers + 1);
                for i in 0..layers {
                    check.push(vs.scan_dot(i, &residual)?);
                }
                check.push(local_dot(&residual, &residual));
                let check = reduce_sum(&next_tag(), check)?;
                let worst = check[..layers].iter().fold(0.0f64, |a, &b| a.max(b.abs()));
                let norm = check[layers].sqrt().max(1e-300);
                if worst <= 1e-10 * norm {
                    break;
                }
            }
        }
        let tn2 = reduce_sum(&next_tag(), vec![local_dot(&residual, &residual)])?[0];
        let tn = tn2.sqrt();
        if tn < 1e-12 {
            converged = true;
            break;
        }
        for x in residual.iter_mut() {
            *x /= tn;
        }
        vs.append(&residual)?;
        matvec_iter += 1;
        let sigma = distributed_matvec(shared, &diag, &residual, matvec_iter);
        hvs.append(&sigma)?;
    }

    drop(ckpt_tx);
    let _ = ckpt_handle.join();

    Ok(FactoryOutcome {
        energy: best_energy,
        residual: best_residual,
        matvec_iter,
        converged,
        n_det: shared.n_det,
        index: cfg.index,
        n_factories: cfg.n_factories,
    })
}
