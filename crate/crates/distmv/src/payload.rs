//! Binary payloads served to workers: the determinant table, group tables,
//! and the integral set, all little-endian with 8-byte count headers.

use cooci_core::detspace::{DetSet, Determinant};
use cooci_core::hamio::{IntegralSet, TwoBody};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PayloadError {
    #[error("malformed {what} payload: {detail}")]
    Malformed {
        what: &'static str,
        detail: String,
    },
}

fn push_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, x: f64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, PayloadError> {
        if self.pos + 8 > self.data.len() {
            return Err(PayloadError::Malformed {
                what,
                detail: "short read".into(),
            });
        }
        let v = u64::from_le_bytes(self.data[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        Ok(v)
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, PayloadError> {
        Ok(f64::from_bits(self.u64(what)?))
    }
}

/// Determinant table: count, then four u64 words per determinant.
pub fn encode_dets(dets: &[Determinant]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + dets.len() * 32);
    push_u64(&mut buf, dets.len() as u64);
    for d in dets {
        push_u64(&mut buf, d.alpha as u64);
        push_u64(&mut buf, (d.alpha >> 64) as u64);
        push_u64(&mut buf, d.beta as u64);
        push_u64(&mut buf, (d.beta >> 64) as u64);
    }
    buf
}

pub fn decode_dets(data: &[u8]) -> Result<Vec<Determinant>, PayloadError> {
    let mut c = Cursor::new(data);
    let n = c.u64("dets")? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let alo = c.u64("dets")? as u128;
        let ahi = c.u64("dets")? as u128;
        let blo = c.u64("dets")? as u128;
        let bhi = c.u64("dets")? as u128;
        out.push(Determinant::new(alo | (ahi << 64), blo | (bhi << 64)));
    }
    Ok(out)
}

/// Alpha-group ranges: count, then (start, end) pairs.
pub fn encode_alpha_ranges(space: &DetSet) -> Vec<u8> {
    let mut buf = Vec::new();
    push_u64(&mut buf, space.n_alpha_groups() as u64);
    for g in 0..space.n_alpha_groups() {
        let (s, e) = space.alpha_range(g);
        push_u64(&mut buf, s as u64);
        push_u64(&mut buf, e as u64);
    }
    buf
}

pub fn decode_alpha_ranges(data: &[u8]) -> Result<Vec<(u64, u64)>, PayloadError> {
    let mut c = Cursor::new(data);
    let n = c.u64("agroups")? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let s = c.u64("agroups")?;
        let e = c.u64("agroups")?;
        out.push((s, e));
    }
    Ok(out)
}

/// Beta-group row lists: group count, then per group a length and its rows.
pub fn encode_beta_rows(space: &DetSet) -> Vec<u8> {
    let mut buf = Vec::new();
    push_u64(&mut buf, space.n_beta_groups() as u64);
    for g in 0..space.n_beta_groups() {
        let rows = space.beta_rows(g);
        push_u64(&mut buf, rows.len() as u64);
        for &r in rows {
            push_u64(&mut buf, r as u64);
        }
    }
    buf
}

pub fn decode_beta_rows(data: &[u8]) -> Result<Vec<Vec<u64>>, PayloadError> {
    let mut c = Cursor::new(data);
    let n = c.u64("bgroups")? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u64("bgroups")? as usize;
        let mut rows = Vec::with_capacity(len);
        for _ in 0..len {
            rows.push(c.u64("bgroups")?);
        }
        out.push(rows);
    }
    Ok(out)
}

/// Integral payload: dimensions and electron counts, the constant shift, the
/// dense one-body block, and the triangular two-body store.
pub fn encode_ints(ints: &IntegralSet) -> Vec<u8> {
    let n = ints.n_orb;
    let mut buf = Vec::new();
    push_u64(&mut buf, n as u64);
    push_u64(&mut buf, ints.n_alpha as u64);
    push_u64(&mut buf, ints.n_beta as u64);
    push_f64(&mut buf, ints.e_core);
    for p in 0..n {
        for q in 0..n {
            push_f64(&mut buf, ints.h[[p, q]]);
        }
    }
    let raw = ints.v.raw();
    push_u64(&mut buf, raw.len() as u64);
    for &x in raw {
        push_f64(&mut buf, x);
    }
    buf
}

pub fn decode_ints(data: &[u8]) -> Result<IntegralSet, PayloadError> {
    let mut c = Cursor::new(data);
    let n = c.u64("ints")? as usize;
    let n_alpha = c.u64("ints")? as usize;
    let n_beta = c.u64("ints")? as usize;
    let e_core = c.f64("ints")?;
    let mut h = Array2::zeros((n, n));
    for p in 0..n {
        for q in 0..n {
            h[[p, q]] = c.f64("ints")?;
        }
    }
    let raw_len = c.u64("ints")? as usize;
    let mut raw = Vec::with_capacity(raw_len);
    for _ in 0..raw_len {
        raw.push(c.f64("ints")?);
    }
    let v = TwoBody::from_raw(n, raw).ok_or(PayloadError::Malformed {
        what: "ints",
        detail: "two-body store length inconsistent with n_orb".into(),
    })?;
    Ok(IntegralSet {
        n_orb: n,
        h,
        v,
        e_core,
        n_alpha,
        n_beta,
    })
}

/// Pack a vector slice as raw little-endian f64 bytes.
pub fn encode_f64s(v: &[f64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(v.len() * 8);
    for &x in v {
        push_f64(&mut buf, x);
    }
    buf
}

pub fn decode_f64s(data: &[u8]) -> Result<Vec<f64>, PayloadError> {
    if data.len() % 8 != 0 {
        return Err(PayloadError::Malformed {
            what: "vector",
            detail: format!("length {} not a multiple of 8", data.len()),
        });
    }
    Ok(data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Bundle-result body: bundle id, vector version, then (row, value) pairs.
pub fn encode_result(bundle_id: u64, ver: u64, contributions: &[(u64, f64)]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + contributions.len() * 16);
    push_u64(&mut buf, bundle_id);
    push_u64(&mut buf, ver);
    push_u64(&mut buf, contributions.len() as u64);
    for &(row, val) in contributions {
        push_u64(&mut buf, row);
        push_f64(&mut buf, val);
    }
    buf
}

pub fn decode_result(data: &[u8]) -> Result<(u64, u64, Vec<(u64, f64)>), PayloadError> {
    let mut c = Cursor::new(data);
    let bundle_id = c.u64("result")?;
    let ver = c.u64("result")?;
    let count = c.u64("result")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let row = c.u64("result")?;
        let val = c.f64("result")?;
        out.push((row, val));
    }
    Ok((bundle_id, ver, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cooci_core::hamio::{build_hubbard_graph, GraphModelSpec};

    #[test]
    fn payload_round_trips() {
        let ints = build_hubbard_graph(&GraphModelSpec {
            sites: 4,
            t: 1.0,
            u: 4.0,
            alpha: 0.8,
            seed: 9,
        })
        .unwrap();
        let space = DetSet::full_space(4, 2, 2).unwrap();

        let dets2 = decode_dets(&encode_dets(space.dets())).unwrap();
        assert_eq!(dets2, space.dets());

        let ar = decode_alpha_ranges(&encode_alpha_ranges(&space)).unwrap();
        assert_eq!(ar.len(), space.n_alpha_groups());
        assert_eq!(ar[0], {
            let (s, e) = space.alpha_range(0);
            (s as u64, e as u64)
        });

        let br = decode_beta_rows(&encode_beta_rows(&space)).unwrap();
        assert_eq!(br.len(), space.n_beta_groups());

        let ints2 = decode_ints(&encode_ints(&ints)).unwrap();
        assert_eq!(ints2.n_orb, 4);
        assert_eq!(ints2.e_core, ints.e_core);
        for p in 0..4 {
            for q in 0..4 {
                assert_eq!(ints2.h[[p, q]], ints.h[[p, q]]);
                for r in 0..4 {
                    for s in 0..4 {
                        assert_eq!(ints2.v.get(p, q, r, s), ints.v.get(p, q, r, s));
                    }
                }
            }
        }

        let contribs = vec![(3u64, 1.5), (7, -0.25)];
        let (id, ver, back) = decode_result(&encode_result(42, 3, &contribs)).unwrap();
        assert_eq!((id, ver), (42, 3));
        assert_eq!(back, contribs);
    }
}
