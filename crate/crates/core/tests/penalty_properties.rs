use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gor::autodiff::Tape;
use gor::gradcheck::fused_grad;
use gor::grouping::{effective_groups, GroupPartition, PartitionMode};
use gor::kernels::matmul;
use gor::penalty::{layer_penalty, layer_penalty_fused, so_penalty};
use gor::{Exec, Tensor};

fn random(seed: u64, rows: usize, cols: usize) -> Tensor {
    Tensor::uniform(&[rows, cols], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn penalty(w: &Tensor, partition: &GroupPartition) -> f64 {
    layer_penalty_fused(w, partition, Exec::Sequential, false).unwrap().total
}

/// Composite route value and gradient.
fn composite(w: &Tensor, partition: &GroupPartition) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let v = tape.leaf(w.clone().with_grad(true));
    let (p, _) = layer_penalty(&mut tape, v, partition).unwrap();
    tape.backward(p).unwrap();
    (tape.value(p).item(), tape.grad(v).unwrap().to_vec())
}

fn permute_cols(w: &Tensor, perm: &[usize]) -> Tensor {
    let (r, c_in) = w.dims2("perm").unwrap();
    let c = perm.len();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for (j, &p) in perm.iter().enumerate() {
            out[i * c + j] = w.data()[i * c_in + p];
        }
    }
    Tensor::new(&[r, c], out).unwrap()
}

fn mode() -> impl Strategy<Value = PartitionMode> {
    prop_oneof![Just(PartitionMode::Inter), Just(PartitionMode::Intra)]
}

/// (rows, n_groups, group_size)
fn layout() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..10, 1usize..6, 1usize..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalty_is_non_negative(seed in any::<u64>(), (r, n, g) in layout(), m in mode()) {
        let w = random(seed, r, n * g);
        let part = GroupPartition::new(m, n, n * g).unwrap();
        let eval = layer_penalty_fused(&w, &part, Exec::Sequential, false).unwrap();
        prop_assert!(eval.total >= 0.0);
        prop_assert!(eval.per_group.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn partitions_tile_the_filters(n in 1usize..9, g in 1usize..9, m in mode()) {
        let part = GroupPartition::new(m, n, n * g).unwrap();
        let mut seen: Vec<usize> = part.groups.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n * g).collect::<Vec<_>>());
        let expected_size = match m {
            PartitionMode::Inter => g,
            PartitionMode::Intra => n,
        };
        prop_assert!(part.groups.iter().all(|grp| grp.len() == expected_size));
    }

    #[test]
    fn one_group_is_whole_layer(seed in any::<u64>(), r in 1usize..9, c in 1usize..13) {
        let w = random(seed, r, c);
        let mut tape = Tape::new();
        let v = tape.leaf(w.clone());
        let so = so_penalty(&mut tape, v).unwrap();
        let so = tape.value(so).item();
        // a single group is N = 1 for inter but N = C_out for intra
        for (m, n) in [(PartitionMode::Inter, 1), (PartitionMode::Intra, c)] {
            let p = penalty(&w, &GroupPartition::new(m, n, c).unwrap());
            prop_assert!((p - so).abs() <= 1e-12 * so.max(1.0), "{} {}: {} vs {}", m, n, p, so);
        }
    }

    #[test]
    fn extreme_group_counts_swap_between_modes(c in 1usize..17) {
        let as_sets = |p: GroupPartition| {
            let mut groups: Vec<Vec<usize>> = p.groups;
            groups.iter_mut().for_each(|grp| grp.sort_unstable());
            groups.sort();
            groups
        };
        // inter with N = 1 and intra with N = C_out both give the whole
        // layer; the reverse pairing gives singletons
        for (n_inter, n_intra) in [(1, c), (c, 1)] {
            let inter = GroupPartition::new(PartitionMode::Inter, n_inter, c).unwrap();
            let intra = GroupPartition::new(PartitionMode::Intra, n_intra, c).unwrap();
            prop_assert_eq!(as_sets(inter), as_sets(intra));
        }
    }

    #[test]
    fn invariant_under_within_group_permutation(seed in any::<u64>(), (r, n, g) in layout(), m in mode()) {
        let c = n * g;
        let w = random(seed, r, c);
        let part = GroupPartition::new(m, n, c).unwrap();
        // rotate members inside every group
        let mut perm: Vec<usize> = (0..c).collect();
        for grp in &part.groups {
            for (k, &col) in grp.iter().enumerate() {
                perm[col] = grp[(k + 1) % grp.len()];
            }
        }
        let a = penalty(&w, &part);
        let b = penalty(&permute_cols(&w, &perm), &part);
        prop_assert!((a - b).abs() <= 1e-10 * a.max(1.0));
    }

    #[test]
    fn invariant_under_left_orthogonal_map(seed in any::<u64>(), (r, n, g) in layout(), m in mode()) {
        let c = n * g;
        let w = random(seed, r, c);
        let q = DMatrix::from_row_slice(r, r, random(seed ^ 0x5eed, r, r).data()).qr().q();
        let q = Tensor::new(&[r, r], q.transpose().as_slice().to_vec()).unwrap();
        let qw = Tensor::new(&[r, c], matmul(q.data(), w.data(), r, r, c, Exec::Sequential)).unwrap();
        let part = GroupPartition::new(m, n, c).unwrap();
        let (a, b) = (penalty(&w, &part), penalty(&qw, &part));
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn rank_deficit_bounds_each_group(seed in any::<u64>(), r in 1usize..5, extra in 1usize..5) {
        // a group wider than its row count keeps g - r zero eigenvalues
        let g = r + extra;
        let w = random(seed, r, g);
        let part = GroupPartition::whole(g).unwrap();
        prop_assert!(penalty(&w, &part) >= (g - r) as f64 - 1e-9);
    }

    #[test]
    fn fused_matches_composite(seed in any::<u64>(), (r, n, g) in layout(), m in mode()) {
        let w = random(seed, r, n * g);
        let part = GroupPartition::new(m, n, n * g).unwrap();
        let (value, grad) = composite(&w, &part);
        let fused = layer_penalty_fused(&w, &part, Exec::Sequential, true).unwrap();
        assert_relative_eq!(fused.total, value, epsilon = 1e-12, max_relative = 1e-12);
        for (a, b) in fused.grad.unwrap().iter().zip(&grad) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn parallel_matches_sequential(seed in any::<u64>(), (r, n, g) in layout(), m in mode()) {
        let w = random(seed, r, n * g);
        let part = GroupPartition::new(m, n, n * g).unwrap();
        let s = layer_penalty_fused(&w, &part, Exec::Sequential, true).unwrap();
        let p = layer_penalty_fused(&w, &part, Exec::Parallel, true).unwrap();
        prop_assert_eq!(s.total.to_bits(), p.total.to_bits());
        prop_assert_eq!(s.grad, p.grad);
    }

    #[test]
    fn effective_groups_divides_and_keeps_four(req in 1usize..64, c_out in 1usize..512) {
        let n = effective_groups(req, c_out);
        prop_assert!(n >= 1 && n <= req.max(1));
        prop_assert_eq!(c_out % n, 0);
        if n > 1 {
            prop_assert!(c_out / n >= 4);
        }
    }
}

#[test]
fn matmul_by_identity_is_exact() {
    let a = random(11, 7, 5);
    let i = Tensor::eye(5);
    for exec in [Exec::Sequential, Exec::Parallel] {
        assert_eq!(matmul(a.data(), i.data(), 7, 5, 5, exec), a.data());
    }
}

#[test]
fn orthonormal_columns_have_zero_penalty() {
    let q = DMatrix::from_row_slice(8, 8, random(12, 8, 8).data()).qr().q();
    let w = Tensor::new(&[8, 8], q.transpose().as_slice().to_vec()).unwrap();
    for n in [1, 2, 4, 8] {
        for m in [PartitionMode::Inter, PartitionMode::Intra] {
            let p = penalty(&w, &GroupPartition::new(m, n, 8).unwrap());
            assert!(p < 1e-24, "N={n} {m}: {p}");
        }
    }
}

#[test]
fn tape_is_deterministic() {
    let w = random(13, 36, 32);
    let part = GroupPartition::new(PartitionMode::Intra, 4, 32).unwrap();
    let (v1, g1) = composite(&w, &part);
    let (v2, g2) = composite(&w, &part);
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);
    let f1 = fused_grad(&w, &part, Exec::Parallel).unwrap();
    let f2 = fused_grad(&w, &part, Exec::Parallel).unwrap();
    assert_eq!(f1, f2);
}

#[test]
fn grouped_penalty_is_sum_of_independent_groups() {
    let w = random(14, 6, 12);
    let part = GroupPartition::new(PartitionMode::Inter, 3, 12).unwrap();
    let eval = layer_penalty_fused(&w, &part, Exec::Sequential, false).unwrap();
    for (grp, &value) in part.groups.iter().zip(&eval.per_group) {
        let sub = permute_cols(&w, grp);
        let alone = penalty(&sub, &GroupPartition::whole(grp.len()).unwrap());
        assert_relative_eq!(alone, value, max_relative = 1e-14);
    }
}
