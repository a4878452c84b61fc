//! Global reductions across factories: blocking rendezvous on the
//! coordinator, with idempotent contributions so a retried post never double
//! counts.

use crate::httpx;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("rendezvous timed out on tag {0}")]
    Timeout(String),
    #[error("transport: {0}")]
    Transport(#[from] httpx::HttpError),
    #[error("malformed reduce payload: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReduceOp {
    /// Elementwise sum of the contributed vectors.
    Sum,
    /// Values are (key, payload) pairs; the lexicographically smallest pair
    /// wins. Used to pick the global lowest-diagonal row.
    MinPair,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReduceRequest {
    pub tag: String,
    pub op: ReduceOp,
    pub from: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReduceResponse {
    pub values: Vec<f64>,
}

struct Slot {
    acc: Vec<f64>,
    contributed: Vec<bool>,
    n_contrib: usize,
}

/// Coordinator-side rendezvous state. Completed reductions are kept in a
/// bounded history so a retried contribution can still fetch its result.
pub struct ReduceHub {
    k: usize,
    open: Mutex<HashMap<String, Slot>>,
    done: Mutex<(HashMap<String, Vec<f64>>, VecDeque<String>)>,
    cv: Condvar,
    timeout: Duration,
}

impl ReduceHub {
    pub fn new(k: usize, timeout: Duration) -> Arc<Self> {
        Arc::new(ReduceHub {
            k,
            open: Mutex::new(HashMap::new()),
            done: Mutex::new((HashMap::new(), VecDeque::new())),
            cv: Condvar::new(),
            timeout,
        })
    }

    fn apply(op: ReduceOp, acc: &mut [f64], values: &[f64]) {
        match op {
            ReduceOp::Sum => {
                for (a, v) in acc.iter_mut().zip(values) {
                    *a += v;
                }
            }
            ReduceOp::MinPair => {
                for (pa, pv) in acc.chunks_exact_mut(2).zip(values.chunks_exact(2)) {
                    if (pv[0], pv[1]) < (pa[0], pa[1]) {
                        pa[0] = pv[0];
                        pa[1] = pv[1];
                    }
                }
            }
        }
    }

    /// Contribute factory `from`'s partial and block until all `k` arrive.
    pub fn contribute(
        &self,
        tag: &str,
        op: ReduceOp,
        from: usize,
        values: Vec<f64>,
    ) -> Result<Vec<f64>, ReduceError> {
        {
            let (done, _) = &*self.done.lock().unwrap();
            if let Some(v) = done.get(tag) {
                return Ok(v.clone());
            }
        }
        let mut open = self.open.lock().unwrap();
        let slot = open.entry(tag.to_string()).or_insert_with(|| Slot {
            acc: values.clone(),
            contributed: {
                let mut c = vec![false; self.k];
                c[from] = true;
                c
            },
            n_contrib: 1,
        });
        if !slot.contributed[from] {
            slot.contributed[from] = true;
            slot.n_contrib += 1;
            Self::apply(op, &mut slot.acc, &values);
        }
        if slot.n_contrib == self.k {
            let slot = open.remove(tag).unwrap();
            let mut done = self.done.lock().unwrap();
            done.0.insert(tag.to_string(), slot.acc.clone());
            done.1.push_back(tag.to_string());
            while done.1.len() > 256 {
                if let Some(old) = done.1.pop_front() {
                    done.0.remove(&old);
                }
            }
            drop(done);
            self.cv.notify_all();
            return Ok(slot.acc);
        }
        // wait for the rest
        let deadline = std::time::Instant::now() + self.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(std::time::Instant::now());
            if remaining.is_zero() {
                return Err(ReduceError::Timeout(tag.to_string()));
            }
            let (guard, timed_out) = self.cv.wait_timeout(open, remaining).unwrap();
            open = guard;
            {
                let (done, _) = &*self.done.lock().unwrap();
                if let Some(v) = done.get(tag) {
                    return Ok(v.clone());
                }
            }
            if timed_out.timed_out() {
                return Err(ReduceError::Timeout(tag.to_string()));
            }
        }
    }
}

/// Factory-side view of the reduction service.
pub enum Reducer {
    /// Single factory: reductions are the identity.
    Local,
    /// Factory 0 owns the hub.
    Coordinator { hub: Arc<ReduceHub>, index: usize },
    /// Other factories post to the coordinator and retry on transient errors.
    Remote {
        coordinator: SocketAddr,
        index: usize,
        timeout: Duration,
    },
}

impl Reducer {
    pub fn reduce(
        &self,
        tag: &str,
        op: ReduceOp,
        values: Vec<f64>,
    ) -> Result<Vec<f64>, ReduceError> {
        match self {
            Reducer::Local => Ok(values),
            Reducer::Coordinator { hub, index } => hub.contribute(tag, op, *index, values),
            Reducer::Remote {
                coordinator,
                index,
                timeout,
            } => {
                let req = ReduceRequest {
                    tag: tag.to_string(),
                    op,
                    from: *index,
                    values,
                };
                let body = serde_json::to_vec(&req).expect("serializable");
                let deadline = std::time::Instant::now() + *timeout;
                let mut backoff = Duration::from_millis(50);
                loop {
                    match httpx::request_ok(
                        coordinator,
                        "POST",
                        "/reduce",
                        &body,
                        Duration::from_secs(600),
                    ) {
                        Ok(resp) => {
                            let r: ReduceResponse = serde_json::from_slice(&resp)
                                .map_err(|e| ReduceError::Malformed(e.to_string()))?;
                            return Ok(r.values);
                        }
                        Err(e) => {
                            if std::time::Instant::now() >= deadline {
                                return Err(e.into());
                            }
                            std::thread::sleep(backoff);
                            backoff = (backoff * 2).min(Duration::from_secs(5));
                        }
                    }
                }
            }
        }
    }
}
