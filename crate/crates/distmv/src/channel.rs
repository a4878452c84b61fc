//! Channel decomposition of the Davidson matvec and its packing into
//! mini-tasks and bundles.
//!
//! A channel is one row's worth of work against one source group: every row
//! gets a same-alpha channel (beta singles and doubles), a same-beta channel
//! (alpha singles and doubles), and one mixed channel per alpha-adjacent
//! group. The diagonal term is handled separately by the aggregator.

use cooci_core::detspace::DetSet;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelType {
    SameAlpha,
    SameBeta,
    Mixed,
}

/// One unit of work: destination `row` (local within its group `g`) against
/// the source group implied by the type (`g` itself, or `g_prime` for mixed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Channel {
    pub ctype: ChannelType,
    /// Alpha-group id for same-alpha and mixed channels, beta-group id for
    /// same-beta channels.
    pub g: u32,
    /// Source alpha-group of a mixed channel.
    pub g_prime: Option<u32>,
    /// Local destination row within `g`.
    pub row: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelCensus {
    pub same_alpha: u64,
    pub same_beta: u64,
    pub mixed: u64,
}

impl ChannelCensus {
    pub fn total(&self) -> u64 {
        self.same_alpha + self.same_beta + self.mixed
    }
}

/// Global destination row of a channel.
pub fn channel_global_row(space: &DetSet, c: &Channel) -> usize {
    match c.ctype {
        ChannelType::SameAlpha | ChannelType::Mixed => {
            space.alpha_range(c.g as usize).0 + c.row as usize
        }
        ChannelType::SameBeta => space.beta_rows(c.g as usize)[c.row as usize],
    }
}

/// Emit every channel of the space in a fixed order (all same-alpha, then all
/// same-beta, then all mixed), returning the census alongside.
pub fn build_channels(space: &DetSet) -> (Vec<Channel>, ChannelCensus) {
    let mut channels = Vec::new();
    let mut census = ChannelCensus {
        same_alpha: 0,
        same_beta: 0,
        mixed: 0,
    };
    for g in 0..space.n_alpha_groups() {
        let (s, e) = space.alpha_range(g);
        for local in 0..(e - s) as u32 {
            channels.push(Channel {
                ctype: ChannelType::SameAlpha,
                g: g as u32,
                g_prime: None,
                row: local,
            });
            census.same_alpha += 1;
        }
    }
    for g in 0..space.n_beta_groups() {
        for local in 0..space.beta_rows(g).len() as u32 {
            channels.push(Channel {
                ctype: ChannelType::SameBeta,
                g: g as u32,
                g_prime: None,
                row: local,
            });
            census.same_beta += 1;
        }
    }
    for g in 0..space.n_alpha_groups() {
        let (s, e) = space.alpha_range(g);
        for local in 0..(e - s) as u32 {
            for &gp in space.alpha_neighbors(g) {
                channels.push(Channel {
                    ctype: ChannelType::Mixed,
                    g: g as u32,
                    g_prime: Some(gp),
                    row: local,
                });
                census.mixed += 1;
            }
        }
    }
    (channels, census)
}

/// Same-type channels grouped for dispatch; at most `C` per mini-task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiniTask {
    pub ctype: ChannelType,
    pub channels: Vec<Channel>,
}

/// Dispatchable parcel: at most `B` mini-tasks plus the input manifest. The
/// manifest lists the trial-vector rows the bundle reads, as sorted disjoint
/// global ranges; static group and integral payloads are implied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bundle {
    pub bundle_id: u64,
    pub minitasks: Vec<MiniTask>,
    pub v_ranges: Vec<(u64, u64)>,
}

/// Walk the channel stream type by type, closing a mini-task at `c_max`
/// channels or at a type boundary, then group every `b_max` mini-tasks into a
/// bundle. Bundle ids are offset by `id_base` so multiple producers stay
/// disjoint.
pub fn pack(
    space: &DetSet,
    channels: &[Channel],
    c_max: usize,
    b_max: usize,
    id_base: u64,
) -> Vec<Bundle> {
    assert!(c_max >= 1 && b_max >= 1);
    let mut minitasks: Vec<MiniTask> = Vec::new();
    let mut current: Option<MiniTask> = None;
    for ch in channels {
        let close = match &current {
            Some(mt) => mt.ctype != ch.ctype || mt.channels.len() >= c_max,
            None => false,
        };
        if close {
            minitasks.push(current.take().unwrap());
        }
        current
            .get_or_insert_with(|| MiniTask {
                ctype: ch.ctype,
                channels: Vec::new(),
            })
            .channels
            .push(*ch);
    }
    if let Some(mt) = current {
        minitasks.push(mt);
    }

    let mut bundles = Vec::new();
    for (k, chunk) in minitasks.chunks(b_max).enumerate() {
        let mut rows: Vec<(u64, u64)> = Vec::new();
        for mt in chunk {
            for ch in &mt.channels {
                let (s, e) = match ch.ctype {
                    ChannelType::SameAlpha => space.alpha_range(ch.g as usize),
                    ChannelType::Mixed => space.alpha_range(ch.g_prime.unwrap() as usize),
                    ChannelType::SameBeta => {
                        // beta rows are scattered; cover each row singly
                        for &r in space.beta_rows(ch.g as usize) {
                            rows.push((r as u64, r as u64 + 1));
                        }
                        continue;
                    }
                };
                rows.push((s as u64, e as u64));
            }
        }
        rows.sort_unstable();
        let mut merged: Vec<(u64, u64)> = Vec::new();
        for (s, e) in rows {
            match merged.last_mut() {
                Some((_, le)) if s <= *le => *le = (*le).max(e),
                _ => merged.push((s, e)),
            }
        }
        bundles.push(Bundle {
            bundle_id: id_base + k as u64,
            minitasks: chunk.to_vec(),
            v_ranges: merged,
        });
    }
    bundles
}

#[cfg(test)]
mod tests {
    use super::*;
    use cooci_core::detspace::Determinant;

    #[test]
    fn census_single_group_space() {
        // one alpha-group and one beta-group: two channels per row, no mixed
        let dets = vec![
            Determinant::new(0b0011, 0b0011),
            Determinant::new(0b0011, 0b0101),
        ];
        // same alpha, two beta groups actually; use a truly single-pair case
        let set = DetSet::build_groups(dets, 4).unwrap();
        let (_, census) = build_channels(&set);
        assert_eq!(census.same_alpha, 2);
        assert_eq!(census.same_beta, 2);
        // two beta strings in one alpha-group: no alpha adjacency
        assert_eq!(census.mixed, 0);
        assert_eq!(census.total(), 2 * set.len() as u64);
    }

    #[test]
    fn census_matches_adjacency_formula() {
        let space = DetSet::full_space(4, 2, 2).unwrap();
        let (channels, census) = build_channels(&space);
        assert_eq!(channels.len() as u64, census.total());
        let n = space.len() as u64;
        let mixed_expected: u64 = (0..space.len())
            .map(|i| space.alpha_neighbors(space.alpha_group_of(i)).len() as u64)
            .sum();
        assert_eq!(census.same_alpha, n);
        assert_eq!(census.same_beta, n);
        assert_eq!(census.mixed, mixed_expected);
        let c_bar = space.mean_alpha_adjacency();
        let total_formula = (n as f64) * (2.0 + c_bar);
        assert!((census.total() as f64 - total_formula).abs() < 1e-9);
    }

    #[test]
    fn greedy_packing_sizes() {
        let space = DetSet::full_space(3, 1, 1).unwrap();
        // 10 channels of one type with C=3 split as 3,3,3,1
        let channels: Vec<Channel> = (0..10)
            .map(|k| Channel {
                ctype: ChannelType::SameAlpha,
                g: (k % space.n_alpha_groups()) as u32,
                g_prime: None,
                row: 0,
            })
            .collect();
        let bundles = pack(&space, &channels, 3, 100, 0);
        let sizes: Vec<usize> = bundles[0].minitasks.iter().map(|m| m.channels.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
    }

    #[test]
    fn bundle_count_is_ceiling() {
        let space = DetSet::full_space(4, 2, 2).unwrap();
        let (channels, _) = build_channels(&space);
        let bundles = pack(&space, &channels, 7, 3, 0);
        let n_minitasks: usize = bundles.iter().map(|b| b.minitasks.len()).sum();
        assert_eq!(bundles.len(), n_minitasks.div_ceil(3));
        // ids are consecutive from the base
        for (k, b) in bundles.iter().enumerate() {
            assert_eq!(b.bundle_id, k as u64);
        }
    }

    #[test]
    fn packing_partitions_channels_exactly() {
        let space = DetSet::full_space(4, 2, 2).unwrap();
        let (channels, _) = build_channels(&space);
        let bundles = pack(&space, &channels, 5, 4, 100);
        let mut seen: Vec<Channel> = bundles
            .iter()
            .flat_map(|b| b.minitasks.iter().flat_map(|m| m.channels.iter().copied()))
            .collect();
        let mut expected = channels.clone();
        let key = |c: &Channel| (c.ctype as u8, c.g, c.g_prime, c.row);
        seen.sort_by_key(key);
        expected.sort_by_key(key);
        assert_eq!(seen, expected);
        for b in &bundles {
            for mt in &b.minitasks {
                assert!(mt.channels.iter().all(|c| c.ctype == mt.ctype));
            }
        }
    }
}
