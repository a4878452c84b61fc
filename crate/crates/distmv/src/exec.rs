//! Bundle execution: the off-diagonal matvec kernels, pure over their inputs.
//!
//! Each channel scans only the determinants of its source group and keeps the
//! survivors of a popcount test before touching matrix elements: same-alpha
//! keeps beta transitions of degree 1-2, same-beta the alpha analog, and
//! mixed keeps exactly one hop in each spin channel.

use crate::channel::{Bundle, ChannelType};
use cooci_core::detspace::{matrix_element, Determinant};
use cooci_core::hamio::IntegralSet;
use std::collections::HashMap;

/// Trial-vector access for a bundle: either the whole vector (in-process) or
/// the fetched ranges of a worker.
pub enum VSource<'a> {
    Full(&'a [f64]),
    Ranges(&'a [(u64, Vec<f64>)]),
}

impl VSource<'_> {
    fn get(&self, row: u64) -> f64 {
        match self {
            VSource::Full(v) => v[row as usize],
            VSource::Ranges(ranges) => {
                let k = ranges.partition_point(|(s, _)| *s <= row);
                if k == 0 {
                    panic!("row {row} not covered by fetched ranges");
                }
                let (start, vals) = &ranges[k - 1];
                vals[(row - start) as usize]
            }
        }
    }
}

/// The structural inputs a bundle needs besides the trial vector.
pub struct BundleInputs<'a> {
    pub dets: &'a [Determinant],
    /// Contiguous row range per alpha-group.
    pub alpha_ranges: &'a [(u64, u64)],
    /// Row list per beta-group.
    pub beta_rows: &'a [Vec<u64>],
    pub ints: &'a IntegralSet,
}

/// Run every channel of the bundle and return the sparse off-diagonal
/// contributions `(destination row, Δσ)`, deduplicated per row and sorted.
/// Pure in its inputs, so a retry or duplicate execution is harmless.
pub fn execute_bundle(bundle: &Bundle, inputs: &BundleInputs, v: &VSource) -> Vec<(u64, f64)> {
    let mut acc: HashMap<u64, f64> = HashMap::new();
    for mt in &bundle.minitasks {
        for ch in &mt.channels {
            match mt.ctype {
                ChannelType::SameAlpha => {
                    let (s, e) = inputs.alpha_ranges[ch.g as usize];
                    let i = s + ch.row as u64;
                    let di = &inputs.dets[i as usize];
                    let mut sum = 0.0;
                    for j in s..e {
                        if j == i {
                            continue;
                        }
                        let dj = &inputs.dets[j as usize];
                        let pc = (di.beta ^ dj.beta).count_ones();
                        if pc == 2 || pc == 4 {
                            let hij = matrix_element(di, dj, inputs.ints);
                            if hij != 0.0 {
                                sum += hij * v.get(j);
                            }
                        }
                    }
                    *acc.entry(i).or_insert(0.0) += sum;
                }
                ChannelType::SameBeta => {
                    let rows = &inputs.beta_rows[ch.g as usize];
                    let i = rows[ch.row as usize];
                    let di = &inputs.dets[i as usize];
                    let mut sum = 0.0;
                    for &j in rows {
                        if j == i {
                            continue;
                        }
                        let dj = &inputs.dets[j as usize];
                        let pc = (di.alpha ^ dj.alpha).count_ones();
                        if pc == 2 || pc == 4 {
                            let hij = matrix_element(di, dj, inputs.ints);
                            if hij != 0.0 {
                                sum += hij * v.get(j);
                            }
                        }
                    }
                    *acc.entry(i).or_insert(0.0) += sum;
                }
                ChannelType::Mixed => {
                    let (s, _) = inputs.alpha_ranges[ch.g as usize];
                    let i = s + ch.row as u64;
                    let di = &inputs.dets[i as usize];
                    let (gs, ge) = inputs.alpha_ranges[ch.g_prime.unwrap() as usize];
                    let mut sum = 0.0;
                    for j in gs..ge {
                        let dj = &inputs.dets[j as usize];
                        if (di.beta ^ dj.beta).count_ones() == 2 {
                            let hij = matrix_element(di, dj, inputs.ints);
                            if hij != 0.0 {
                                sum += hij * v.get(j);
                            }
                        }
                    }
                    *acc.entry(i).or_insert(0.0) += sum;
                }
            }
        }
    }
    let mut out: Vec<(u64, f64)> = acc.into_iter().collect();
    out.sort_unstable_by_key(|&(row, _)| row);
    out
}

/// In-process reference pipeline: build inputs from a determinant set, run
/// every bundle against the full vector, and aggregate with the diagonal
/// pass, folding bundles in ascending id order.
pub fn pipeline_matvec(
    space: &cooci_core::detspace::DetSet,
    ints: &IntegralSet,
    bundles: &[Bundle],
    v: &[f64],
) -> Vec<f64> {
    let alpha_ranges: Vec<(u64, u64)> = (0..space.n_alpha_groups())
        .map(|g| {
            let (s, e) = space.alpha_range(g);
            (s as u64, e as u64)
        })
        .collect();
    let beta_rows: Vec<Vec<u64>> = (0..space.n_beta_groups())
        .map(|g| space.beta_rows(g).iter().map(|&r| r as u64).collect())
        .collect();
    let inputs = BundleInputs {
        dets: space.dets(),
        alpha_ranges: &alpha_ranges,
        beta_rows: &beta_rows,
        ints,
    };
    let mut sigma: Vec<f64> = (0..space.len())
        .map(|i| cooci_core::detspace::diagonal_element(space.det(i), ints) * v[i])
        .collect();
    let mut ordered: Vec<&Bundle> = bundles.iter().collect();
    ordered.sort_by_key(|b| b.bundle_id);
    for b in ordered {
        for (row, dv) in execute_bundle(b, &inputs, &VSource::Full(v)) {
            sigma[row as usize] += dv;
        }
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_channels, pack};
    use cooci_core::detspace::DetSet;
    use cooci_core::eigen::dense_hamiltonian;
    use cooci_core::hamio::{build_hubbard_graph, GraphModelSpec};

    fn setup(l: usize, alpha: f64) -> (DetSet, IntegralSet) {
        let ints = build_hubbard_graph(&GraphModelSpec {
            sites: l,
            t: 1.0,
            u: 4.0,
            alpha,
            seed: 5,
        })
        .unwrap();
        (DetSet::full_space(l, l / 2, l / 2).unwrap(), ints)
    }

    fn test_vector(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (((i * 83 + 19) % 211) as f64) / 105.5 - 1.0)
            .collect()
    }

    #[test]
    fn pipeline_equals_dense_matvec() {
        for (l, alpha) in [(4usize, 1.0), (6, 0.7)] {
            let (space, ints) = setup(l, alpha);
            let (channels, _) = build_channels(&space);
            let bundles = pack(&space, &channels, 100, 7, 0);
            let v = test_vector(space.len());
            let sigma = pipeline_matvec(&space, &ints, &bundles, &v);
            let h = dense_hamiltonian(&space, &ints);
            for i in 0..space.len() {
                let direct: f64 = (0..space.len()).map(|j| h[[i, j]] * v[j]).sum();
                assert!(
                    (sigma[i] - direct).abs() < 1e-12,
                    "row {i}: {} vs {direct}",
                    sigma[i]
                );
            }
        }
    }

    #[test]
    fn execution_is_pure() {
        let (space, ints) = setup(4, 1.0);
        let (channels, _) = build_channels(&space);
        let bundles = pack(&space, &channels, 17, 3, 0);
        let alpha_ranges: Vec<(u64, u64)> = (0..space.n_alpha_groups())
            .map(|g| {
                let (s, e) = space.alpha_range(g);
                (s as u64, e as u64)
            })
            .collect();
        let beta_rows: Vec<Vec<u64>> = (0..space.n_beta_groups())
            .map(|g| space.beta_rows(g).iter().map(|&r| r as u64).collect())
            .collect();
        let inputs = BundleInputs {
            dets: space.dets(),
            alpha_ranges: &alpha_ranges,
            beta_rows: &beta_rows,
            ints: &ints,
        };
        let v = test_vector(space.len());
        let a = execute_bundle(&bundles[1], &inputs, &VSource::Full(&v));
        let b = execute_bundle(&bundles[1], &inputs, &VSource::Full(&v));
        assert_eq!(a, b);
        // zero vector produces zero contributions
        let zeros = vec![0.0; space.len()];
        let z = execute_bundle(&bundles[1], &inputs, &VSource::Full(&zeros));
        assert!(z.iter().all(|&(_, dv)| dv == 0.0));
    }

    #[test]
    fn ranged_vsource_matches_full() {
        let (space, ints) = setup(4, 0.5);
        let (channels, _) = build_channels(&space);
        let bundles = pack(&space, &channels, 11, 2, 0);
        let alpha_ranges: Vec<(u64, u64)> = (0..space.n_alpha_groups())
            .map(|g| {
                let (s, e) = space.alpha_range(g);
                (s as u64, e as u64)
            })
            .collect();
        let beta_rows: Vec<Vec<u64>> = (0..space.n_beta_groups())
            .map(|g| space.beta_rows(g).iter().map(|&r| r as u64).collect())
            .collect();
        let inputs = BundleInputs {
            dets: space.dets(),
            alpha_ranges: &alpha_ranges,
            beta_rows: &beta_rows,
            ints: &ints,
        };
        let v = test_vector(space.len());
        for b in &bundles {
            let ranges: Vec<(u64, Vec<f64>)> = b
                .v_ranges
                .iter()
                .map(|&(s, e)| (s, v[s as usize..e as usize].to_vec()))
                .collect();
            let full = execute_bundle(b, &inputs, &VSource::Full(&v));
            let ranged = execute_bundle(b, &inputs, &VSource::Ranges(&ranges));
            assert_eq!(full, ranged, "bundle {}", b.bundle_id);
        }
    }
}
