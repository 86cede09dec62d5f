//! Structural properties of the memory, decomposer, characterizer and
//! clustering modules.

use crc_core::characterizer::{consistency_loss, correlation_matrices, symmetry_deviation, CausalBatch, ConsistencyTerms};
use crc_core::clustering::kmeans_fit;
use crc_core::decomposer::decompose;
use crc_core::init::{rng_from_seed, uniform};
use crc_core::memory::MemoryPool;
use crc_core::numerics::Tensor;
use proptest::prelude::*;

fn batch(b: usize, n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = rng_from_seed(seed);
    (uniform(&[b, n], -1.0, 1.0, &mut rng), uniform(&[b, n], -1.0, 1.0, &mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn memory_read_is_convex_and_write_keeps_unit_columns(seed in 0u64..1000, c in 1usize..6, n in 1usize..6) {
        let mut rng = rng_from_seed(seed);
        let pool = MemoryPool::random(c, n, &mut rng).unwrap();
        let f = uniform(&[2, 3, c], -2.0, 2.0, &mut rng);
        let att = pool.read_attention(&f).unwrap();
        for row in 0..att.shape()[0] {
            let r = att.row_slice(row);
            prop_assert!(r.iter().all(|&a| (0.0..=1.0).contains(&a)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let written = pool.write(&[f.clone(), f.map(|v| v * 0.5)]).unwrap();
        prop_assert_eq!(written.matrix().shape(), pool.matrix().shape());
        prop_assert!(written.max_norm_deviation() <= 1e-12);
    }

    #[test]
    fn correlations_ignore_positive_column_scaling(seed in 0u64..1000, col in 0usize..4, t in 0.01f64..100.0) {
        let (r, rt) = batch(5, 4, seed);
        let base = correlation_matrices(&CausalBatch::new(r.clone(), rt.clone()).unwrap()).unwrap();
        let mut scaled = r.clone();
        for i in 0..5 {
            scaled.data_mut()[i * 4 + col] *= t;
        }
        let after = correlation_matrices(&CausalBatch::new(scaled, rt).unwrap()).unwrap();
        for (a, b) in [(&base.c1, &after.c1), (&base.c2, &after.c2), (&base.c3, &after.c3)] {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }
        prop_assert!(symmetry_deviation(&base) <= 1e-9);
    }

    #[test]
    fn decomposition_recombines_when_prototype_equals_feature(seed in 0u64..1000) {
        let mut rng = rng_from_seed(seed);
        let f = uniform(&[2, 2, 3], -1.0, 1.0, &mut rng);
        let alpha = uniform(&[3], 0.01, 0.99, &mut rng).into_data();
        let beta = uniform(&[3], 0.01, 0.99, &mut rng).into_data();
        let (fp, fs) = decompose(&f, &f, &alpha, &beta).unwrap();
        for ((p, s), x) in fp.data().iter().zip(fs.data()).zip(f.data()) {
            prop_assert!((p + s - x).abs() <= 1e-12);
        }
    }
}

#[test]
fn repeated_memory_write_converges() {
    for seed in 0..10 {
        let mut rng = rng_from_seed(seed);
        let mut pool = MemoryPool::random(4, 5, &mut rng).unwrap();
        let f = uniform(&[3, 3, 4], -1.0, 1.0, &mut rng);
        let mut last = f64::INFINITY;
        for it in 0..100 {
            let next = pool.write(std::slice::from_ref(&f)).unwrap();
            let step = next
                .matrix()
                .data()
                .iter()
                .zip(pool.matrix().data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(step <= last + 1e-12, "seed {seed} iteration {it}: step {step} after {last}");
            last = step;
            pool = next;
        }
    }
}

#[test]
fn consistency_loss_vanishes_exactly_at_identity() {
    let terms = ConsistencyTerms::all(10.0);
    let eye = Tensor::eye(3);
    // Orthonormal factor columns in both branches give C1 = C2 = C3 = I.
    let ortho = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap();
    let corr = correlation_matrices(&CausalBatch::new(ortho.clone(), ortho).unwrap()).unwrap();
    assert_eq!(corr.c1, eye);
    assert_eq!(consistency_loss(&corr, &terms).unwrap(), 0.0);
    // A non-identity matrix anywhere makes the loss positive.
    for seed in 0..20 {
        let (r, rt) = batch(4, 3, seed);
        let corr = correlation_matrices(&CausalBatch::new(r, rt).unwrap()).unwrap();
        assert!(consistency_loss(&corr, &terms).unwrap() > 0.0);
    }
}

/// Minimum within-cluster sum of squares over all partitions into exactly
/// `k` non-empty groups.
fn exhaustive_inertia(points: &[Vec<f64>], k: usize) -> f64 {
    fn rec(points: &[Vec<f64>], k: usize, assign: &mut Vec<usize>, used: usize, best: &mut f64) {
        if assign.len() == points.len() {
            if used == k {
                *best = best.min(partition_cost(points, assign, k));
            }
            return;
        }
        let left = points.len() - assign.len();
        if used + left < k {
            return;
        }
        // Canonical labelling: a point may open at most one new group.
        for g in 0..(used + 1).min(k) {
            assign.push(g);
            rec(points, k, assign, used.max(g + 1), best);
            assign.pop();
        }
    }
    let mut best = f64::INFINITY;
    rec(points, k, &mut Vec::new(), 0, &mut best);
    best
}

fn partition_cost(points: &[Vec<f64>], assign: &[usize], k: usize) -> f64 {
    let d = points[0].len();
    let mut cost = 0.0;
    for g in 0..k {
        let members: Vec<&Vec<f64>> = points.iter().zip(assign).filter(|(_, &a)| a == g).map(|(p, _)| p).collect();
        let mut mean = vec![0.0; d];
        for p in &members {
            mean.iter_mut().zip(p.iter()).for_each(|(m, v)| *m += v / members.len() as f64);
        }
        cost += members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>();
    }
    cost
}

#[test]
fn kmeans_matches_exhaustive_partition_optimum() {
    for seed in 0..200u64 {
        let mut rng = rng_from_seed(1000 + seed);
        let m = 3 + (seed as usize % 6);
        let k = 1 + (seed as usize % 3).min(m - 1);
        let pts = uniform(&[m, 2], -1.0, 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = (0..m).map(|i| pts.row_slice(i).to_vec()).collect();
        let oracle = exhaustive_inertia(&rows, k);
        let (model, report) = kmeans_fit(&pts, k, seed, 100).unwrap();
        let got = model.inertia(&pts).unwrap();
        assert!((got - oracle).abs() <= 1e-9 * oracle.max(1.0), "seed {seed}: m={m} k={k} got {got} oracle {oracle}");
        assert!(report.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }
}

#[test]
fn nearest_distance_is_minimal() {
    let mut rng = rng_from_seed(3);
    let centers = uniform(&[5, 3], -1.0, 1.0, &mut rng);
    let model = crc_core::clustering::ClusterModel::new(centers.clone()).unwrap();
    for _ in 0..50 {
        let r = uniform(&[3], -2.0, 2.0, &mut rng).into_data();
        let (d, idx) = model.nearest_distance(&r).unwrap();
        for j in 0..5 {
            let dj = centers.row_slice(j).iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d <= dj + 1e-12);
        }
        assert!(idx < 5);
    }
}
