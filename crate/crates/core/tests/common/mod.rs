//! Dense reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cpmr::data::Interaction;
use cpmr::graph::{normalize_adjacency, BiAdjacency};
use cpmr::series::GainAxis;
use cpmr::{SparseMatrix, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_dense(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn sparse_dense(m: &SparseMatrix) -> DMatrix<f64> {
    to_dense(&m.to_dense())
}

pub fn from_dense(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Random bipartite graph with `n_users + n_items` nodes and roughly
/// `density · n_users · n_items` edges (at least one).
pub fn random_biadjacency(rng: &mut ChaCha8Rng, n_users: usize, n_items: usize, density: f64) -> BiAdjacency {
    let mut pairs = Vec::new();
    for u in 0..n_users as u32 {
        for i in 0..n_items as u32 {
            if rng.random_bool(density) {
                pairs.push((u, i));
            }
        }
    }
    if pairs.is_empty() {
        pairs.push((0, 0));
    }
    BiAdjacency::from_pairs(n_users, n_items, pairs)
}

/// A normalized adjacency on a random graph of at most `max_nodes` nodes.
pub fn random_normalized(rng: &mut ChaCha8Rng, max_nodes: usize) -> SparseMatrix {
    let nu = rng.random_range(1..=max_nodes / 2);
    let ni = rng.random_range(1..=max_nodes - nu);
    let density = rng.random_range(0.05..0.6);
    normalize_adjacency(&random_biadjacency(rng, nu, ni, density)).matrix
}

/// Closed-form evolution by eigendecomposition. With `S` symmetric and
/// `G = diag(gain) > 0`, `A = S·G` (columns) or `G·S` (rows) is similar to
/// the symmetric `M = G^½·S·G^½`, so `A − I = T·V·(Λ − I)·Vᵀ·T⁻¹` and both
/// `Q = e^{(A−I)dt}` and `P = (A−I)⁻¹(Q − I)` are diagonal in that basis.
pub fn evolve_oracle(
    adj: &DMatrix<f64>,
    gain: &[f64],
    axis: GainAxis,
    x: &DMatrix<f64>,
    e: &DMatrix<f64>,
    dt: f64,
) -> DMatrix<f64> {
    let n = adj.nrows();
    let sq: Vec<f64> = gain.iter().map(|g| g.sqrt()).collect();
    let m = DMatrix::from_fn(n, n, |i, j| sq[i] * adj[(i, j)] * sq[j]);
    let eig = SymmetricEigen::new(m);
    let v = &eig.eigenvectors;
    // Columns: A = G^-½ M G^½ ; Rows: A = G^½ M G^-½.
    let (left, right): (Vec<f64>, Vec<f64>) = match axis {
        GainAxis::Columns => (sq.iter().map(|s| 1.0 / s).collect(), sq.clone()),
        GainAxis::Rows => (sq.clone(), sq.iter().map(|s| 1.0 / s).collect()),
    };
    let t = DMatrix::from_fn(n, n, |i, j| left[i] * v[(i, j)]);
    let t_inv = DMatrix::from_fn(n, n, |i, j| v[(j, i)] * right[j]);
    let q_diag: Vec<f64> = eig.eigenvalues.iter().map(|l| ((l - 1.0) * dt).exp()).collect();
    let p_diag: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|l| {
            let mu = l - 1.0;
            if (mu * dt).abs() < 1e-8 {
                dt * (1.0 + mu * dt / 2.0)
            } else {
                ((mu * dt).exp() - 1.0) / mu
            }
        })
        .collect();
    let q = &t * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(q_diag)) * &t_inv;
    let p = &t * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(p_diag)) * &t_inv;
    p * e + q * x
}

/// Dense `A = S·G` or `G·S`.
pub fn dense_operator(adj: &DMatrix<f64>, gain: &[f64], axis: GainAxis) -> DMatrix<f64> {
    let n = adj.nrows();
    DMatrix::from_fn(n, n, |i, j| match axis {
        GainAxis::Columns => adj[(i, j)] * gain[j],
        GainAxis::Rows => gain[i] * adj[(i, j)],
    })
}

/// Interactions spread over `n_days` days with `n_edges` total events.
pub fn random_log(rng: &mut ChaCha8Rng, n_users: usize, n_items: usize, n_days: u32, n_edges: usize) -> Vec<Interaction> {
    let mut days: Vec<u32> = (0..n_edges).map(|_| rng.random_range(0..n_days)).collect();
    days.sort_unstable();
    let span = (n_days - 1).max(1) as f64;
    days.into_iter()
        .map(|day| Interaction {
            user: rng.random_range(0..n_users as u32),
            item: rng.random_range(0..n_items as u32),
            day,
            t_norm: day as f64 / span,
        })
        .collect()
}

/// Distinct `(user, item)` pairs of `edges` whose day satisfies `keep`.
pub fn rescan(edges: &[Interaction], n_users: usize, n_items: usize, keep: impl Fn(u32) -> bool) -> BiAdjacency {
    BiAdjacency::from_pairs(
        n_users,
        n_items,
        edges.iter().filter(|x| keep(x.day)).map(|x| (x.user, x.item)),
    )
}
