//! Stateless worker: pull a bundle, fetch whatever manifest inputs are not
//! already cached, execute, post the contributions back, repeat. A worker
//! carries no run state of its own, so it can join or leave at any point.

use crate::channel::ChannelType;
use crate::exec::{execute_bundle, BundleInputs, VSource};
use crate::factory::{BundleLease, PeersInfo};
use crate::httpx::{self, HttpError};
use crate::payload;
use cooci_core::detspace::Determinant;
use cooci_core::hamio::IntegralSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("transport: {0}")]
    Transport(#[from] HttpError),
    #[error("payload: {0}")]
    Payload(#[from] payload::PayloadError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("gave up after {0} consecutive failures")]
    GaveUp(u32),
    #[error("bad peer address `{0}`")]
    BadAddr(String),
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub coordinator: SocketAddr,
    pub scratch_dir: PathBuf,
    pub poll_interval: Duration,
    pub request_timeout: Duration,
    pub max_failures: u32,
    /// Stop after this many bundles (test hook); `None` runs to completion.
    pub max_bundles: Option<u64>,
}

impl WorkerConfig {
    pub fn new(coordinator: SocketAddr, scratch_dir: PathBuf) -> Self {
        WorkerConfig {
            coordinator,
            scratch_dir,
            poll_interval: Duration::from_millis(50),
            request_timeout: Duration::from_secs(30),
            max_failures: 60,
            max_bundles: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct WorkerOutcome {
    pub bundles_done: u64,
    pub cache_hits: u64,
    pub fetches: u64,
}

struct StaticData {
    dets: Vec<Determinant>,
    alpha_ranges: Vec<(u64, u64)>,
    beta_rows: Vec<Vec<u64>>,
    ints: IntegralSet,
}

/// Fetch a static file through the on-disk cache keyed by config hash.
fn fetch_static(
    addr: &SocketAddr,
    cache_dir: &std::path::Path,
    name: &str,
    timeout: Duration,
    outcome: &mut WorkerOutcome,
) -> Result<Vec<u8>, WorkerError> {
    let path = cache_dir.join(name);
    if path.is_file() {
        outcome.cache_hits += 1;
        eprintln!("worker: cache hit {name}");
        return Ok(std::fs::read(&path)?);
    }
    let body = httpx::request_ok(addr, "GET", &format!("/files/{name}"), &[], timeout)?;
    outcome.fetches += 1;
    std::fs::create_dir_all(cache_dir)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &body)?;
    std::fs::rename(&tmp, &path)?;
    Ok(body)
}

fn load_statics(
    addr: &SocketAddr,
    cache_dir: &std::path::Path,
    timeout: Duration,
    outcome: &mut WorkerOutcome,
) -> Result<StaticData, WorkerError> {
    let dets = payload::decode_dets(&fetch_static(addr, cache_dir, "dets", timeout, outcome)?)?;
    let alpha_ranges =
        payload::decode_alpha_ranges(&fetch_static(addr, cache_dir, "agroups", timeout, outcome)?)?;
    let beta_rows =
        payload::decode_beta_rows(&fetch_static(addr, cache_dir, "bgroups", timeout, outcome)?)?;
    let ints = payload::decode_ints(&fetch_static(addr, cache_dir, "ints", timeout, outcome)?)?;
    Ok(StaticData {
        dets,
        alpha_ranges,
        beta_rows,
        ints,
    })
}

/// Fetch the trial-vector rows `[start, end)` from their owning factories.
fn fetch_v_ranges(
    peers: &PeersInfo,
    addrs: &[SocketAddr],
    ranges: &[(u64, u64)],
    ver: u64,
    timeout: Duration,
) -> Result<Vec<(u64, Vec<f64>)>, WorkerError> {
    let mut out = Vec::new();
    for &(start, end) in ranges {
        let mut row = start;
        while row < end {
            // owner of `row`
            let owner = peers.shards.partition_point(|&b| b <= row) - 1;
            let shard_start = peers.shards[owner];
            let shard_end = peers.shards[owner + 1];
            let stop = end.min(shard_end);
            let offset = (row - shard_start) * 8;
            let len = (stop - row) * 8;
            let path = format!("/files/v?ver={ver}&offset={offset}&len={len}");
            let body = httpx::request_ok(&addrs[owner], "GET", &path, &[], timeout)?;
            out.push((row, payload::decode_f64s(&body)?));
            row = stop;
        }
    }
    out.sort_by_key(|&(s, _)| s);
    Ok(out)
}

/// Run until every factory reports completion (or the bundle budget is hit).
/// Transient transport errors retry with backoff; persistent failure is an
/// error so the process can exit nonzero and let its leases expire.
pub fn run_worker(cfg: &WorkerConfig) -> Result<WorkerOutcome, WorkerError> {
    let mut outcome = WorkerOutcome::default();
    let mut failures: u32 = 0;
    let mut backoff = cfg.poll_interval;

    // peers list from the coordinator
    let peers: PeersInfo = loop {
        match httpx::request_ok(&cfg.coordinator, "GET", "/peers", &[], cfg.request_timeout) {
            Ok(body) => match serde_json::from_slice(&body) {
                Ok(p) => break p,
                Err(e) => return Err(payload::PayloadError::Malformed {
                    what: "peers",
                    detail: e.to_string(),
                }
                .into()),
            },
            Err(_) => {
                failures += 1;
                if failures > cfg.max_failures {
                    return Err(WorkerError::GaveUp(failures));
                }
                std::thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_secs(2));
            }
        }
    };
    failures = 0;
    backoff = cfg.poll_interval;
    let addrs: Vec<SocketAddr> = peers
        .addrs
        .iter()
        .map(|a| a.parse().map_err(|_| WorkerError::BadAddr(a.clone())))
        .collect::<Result<_, _>>()?;
    let cache_dir = cfg.scratch_dir.join(&peers.config_hash);
    let mut statics: Option<StaticData> = None;
    let mut factory_done = vec![false; addrs.len()];

    loop {
        if factory_done.iter().all(|&d| d) {
            return Ok(outcome);
        }
        if let Some(max) = cfg.max_bundles {
            if outcome.bundles_done >= max {
                return Ok(outcome);
            }
        }
        let mut any_work = false;
        let mut any_error = false;
        for (f, addr) in addrs.iter().enumerate() {
            if factory_done[f] {
                continue;
            }
            let lease = match httpx::request(addr, "GET", "/bundle/next", &[], cfg.request_timeout)
            {
                Ok((200, body)) => match serde_json::from_slice::<BundleLease>(&body) {
                    Ok(l) => l,
                    Err(_) => {
                        any_error = true;
                        continue;
                    }
                },
                Ok((410, _)) => {
                    factory_done[f] = true;
                    continue;
                }
                Ok((_, _)) => continue, // 204: no work right now
                Err(_) => {
                    any_error = true;
                    continue;
                }
            };

            let mut run_one = || -> Result<Vec<(u64, f64)>, WorkerError> {
                if statics.is_none() {
                    statics = Some(load_statics(
                        addr,
                        &cache_dir,
                        cfg.request_timeout,
                        &mut outcome,
                    )?);
                }
                let s = statics.as_ref().unwrap();
                // mixed and same-alpha channels read contiguous group slices;
                // the ranges in the lease already cover same-beta rows
                let _ = ChannelType::Mixed;
                let ranges = fetch_v_ranges(
                    &peers,
                    &addrs,
                    &lease.bundle.v_ranges,
                    lease.ver,
                    cfg.request_timeout,
                )?;
                let inputs = BundleInputs {
                    dets: &s.dets,
                    alpha_ranges: &s.alpha_ranges,
                    beta_rows: &s.beta_rows,
                    ints: &s.ints,
                };
                Ok(execute_bundle(
                    &lease.bundle,
                    &inputs,
                    &VSource::Ranges(&ranges),
                ))
            };

            match run_one() {
                Ok(contribs) => {
                    let body =
                        payload::encode_result(lease.bundle.bundle_id, lease.ver, &contribs);
                    match httpx::request_ok(
                        addr,
                        "POST",
                        "/bundle/result",
                        &body,
                        cfg.request_timeout,
                    ) {
                        Ok(_) => {
                            outcome.bundles_done += 1;
                            any_work = true;
                            failures = 0;
                            backoff = cfg.poll_interval;
                        }
                        Err(_) => any_error = true,
                    }
                }
                Err(_) => any_error = true,
            }
        }
        if any_error {
            failures += 1;
            if failures > cfg.max_failures {
                return Err(WorkerError::GaveUp(failures));
            }
            std::thread::sleep(backoff);
            backoff = (backoff * 2).min(Duration::from_secs(2));
        } else if !any_work {
            std::thread::sleep(cfg.poll_interval);
        }
    }
}
