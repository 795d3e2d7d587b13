//! Series evolution against dense closed forms.

mod common;

use common::*;
use nalgebra::DMatrix;
use rand::Rng;

use cpmr::graph::{normalize_adjacency, BiAdjacency, ALPHA0};
use cpmr::series::{evolve, GainAxis, Propagator};
use cpmr::tape::sigmoid;

const K: usize = 6;

struct Draw {
    adj: cpmr::SparseMatrix,
    gain: Vec<f64>,
    axis: GainAxis,
    x: cpmr::Tensor,
    e: cpmr::Tensor,
}

fn draw(seed: u64) -> Draw {
    let mut r = rng(seed);
    let adj = random_normalized(&mut r, 50);
    let n = adj.rows();
    let d = r.random_range(1..=6);
    let gain = (0..n).map(|_| sigmoid(r.random_range(-3.0..3.0))).collect();
    let axis = if r.random_bool(0.5) { GainAxis::Columns } else { GainAxis::Rows };
    Draw {
        x: random_tensor(&mut r, n, d),
        e: random_tensor(&mut r, n, d),
        adj,
        gain,
        axis,
    }
}

fn compare(d: &Draw, dt: f64) -> f64 {
    let op = Propagator {
        adj: &d.adj,
        gain: &d.gain,
        axis: d.axis,
    };
    let out = evolve(&d.x, &d.e, &op, dt, K, ALPHA0).unwrap();
    let oracle = evolve_oracle(&sparse_dense(&d.adj), &d.gain, d.axis, &to_dense(&d.x), &to_dense(&d.e), dt);
    rel_err(&to_dense(&out), &oracle)
}

#[test]
fn matches_eigendecomposition_for_unit_intervals() {
    for seed in 0..100 {
        let dt = rng(seed + 1000).random_range(0.0..=1.0);
        let err = compare(&draw(seed), dt);
        assert!(err < 1e-6, "seed {seed} dt {dt}: {err:e}");
    }
}

#[test]
fn matches_eigendecomposition_for_long_intervals() {
    for seed in 0..100 {
        let dt = rng(seed + 2000).random_range(1.0..=50.0);
        let err = compare(&draw(seed), dt);
        assert!(err < 1e-3, "seed {seed} dt {dt}: {err:e}");
    }
}

#[test]
fn long_interval_approaches_the_fixed_point() {
    // Gains at the initialization value σ(0) = ½ keep ρ(A) ≤ 0.49, so the
    // transient has decayed far below tolerance by dt = 50.
    for seed in 0..20 {
        let mut d = draw(seed);
        d.gain.iter_mut().for_each(|g| *g = 0.5);
        let op = Propagator {
            adj: &d.adj,
            gain: &d.gain,
            axis: d.axis,
        };
        let out = evolve(&d.x, &d.e, &op, 50.0, K, ALPHA0).unwrap();
        let a = dense_operator(&sparse_dense(&d.adj), &d.gain, d.axis);
        let n = a.nrows();
        let lhs = DMatrix::identity(n, n) - a;
        let fixed = lhs.lu().solve(&to_dense(&d.e)).unwrap();
        let err = rel_err(&to_dense(&out), &fixed);
        assert!(err < 1e-3, "seed {seed}: {err:e}");
    }
}

#[test]
fn single_edge_at_order_eight() {
    let b = BiAdjacency::from_pairs(1, 1, [(0, 0)]);
    let adj = normalize_adjacency(&b).matrix;
    let gain = [1.0, 1.0];
    let x = cpmr::Tensor::from_rows(&[&[1.0, -0.5], &[0.25, 2.0]]);
    let e = cpmr::Tensor::from_rows(&[&[0.3, 0.1], &[-0.7, 0.4]]);
    let op = Propagator {
        adj: &adj,
        gain: &gain,
        axis: GainAxis::Columns,
    };
    let out = evolve(&x, &e, &op, 0.1, 8, ALPHA0).unwrap();
    let oracle = evolve_oracle(&sparse_dense(&adj), &gain, GainAxis::Columns, &to_dense(&x), &to_dense(&e), 0.1);
    assert!((to_dense(&out) - oracle).amax() < 1e-8);
}

#[test]
fn zero_interval_is_the_identity() {
    let d = draw(5);
    let op = Propagator {
        adj: &d.adj,
        gain: &d.gain,
        axis: d.axis,
    };
    assert_eq!(evolve(&d.x, &d.e, &op, 0.0, K, ALPHA0).unwrap(), d.x);
}

#[test]
fn semigroup_property() {
    for seed in 0..20 {
        let d = draw(seed);
        let mut r = rng(seed + 3000);
        let (t1, t2) = (r.random_range(0.0..2.0), r.random_range(0.0..2.0));
        let op = Propagator {
            adj: &d.adj,
            gain: &d.gain,
            axis: d.axis,
        };
        let whole = evolve(&d.x, &d.e, &op, t1 + t2, K, ALPHA0).unwrap();
        let half = evolve(&d.x, &d.e, &op, t1, K, ALPHA0).unwrap();
        let split = evolve(&half, &d.e, &op, t2, K, ALPHA0).unwrap();
        let err = rel_err(&to_dense(&whole), &to_dense(&split));
        assert!(err < 1e-8, "seed {seed}: {err:e}");
    }
}
