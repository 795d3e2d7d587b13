//! Time-indexed bipartite interaction graph: instant, history and context
//! views, degree-normalized adjacency and the learnable (gain-scaled)
//! adjacency.
//!
//! Node numbering for square matrices: users `0..n_users`, then items
//! `n_users..n_users + n_items`.

use std::collections::HashMap;

use crate::data::Interaction;
use crate::error::{Error, Result};
use crate::series::GainAxis;
use crate::sparse::SparseMatrix;
use crate::tape::sigmoid;

/// Eigenvalue ceiling of the normalized adjacency.
pub const ALPHA0: f64 = 0.98;

/// Deduplicated 0/1 user×item bi-adjacency, stored as sorted unique pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiAdjacency {
    n_users: usize,
    n_items: usize,
    edges: Vec<(u32, u32)>,
}

impl BiAdjacency {
    pub fn empty(n_users: usize, n_items: usize) -> Self {
        BiAdjacency {
            n_users,
            n_items,
            edges: Vec::new(),
        }
    }

    pub fn from_pairs(n_users: usize, n_items: usize, pairs: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut edges: Vec<(u32, u32)> = pairs.into_iter().collect();
        edges.sort_unstable();
        edges.dedup();
        debug_assert!(edges
            .iter()
            .all(|&(u, i)| (u as usize) < n_users && (i as usize) < n_items));
        BiAdjacency { n_users, n_items, edges }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    /// Sorted `(user, item)` pairs.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn nnz(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.edges.binary_search(&(user, item)).is_ok()
    }

    pub fn is_subset_of(&self, other: &BiAdjacency) -> bool {
        self.edges.iter().all(|&(u, i)| other.contains(u, i))
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_users];
        for &(u, _) in &self.edges {
            d[u as usize] += 1;
        }
        d
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_items];
        for &(_, i) in &self.edges {
            d[i as usize] += 1;
        }
        d
    }

    /// The user×item 0/1 matrix `B`.
    pub fn to_sparse(&self) -> SparseMatrix {
        SparseMatrix::from_triplets(
            self.n_users,
            self.n_items,
            self.edges.iter().map(|&(u, i)| (u, i, 1.0)).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DaySpan {
    day: u32,
    start: usize,
    end: usize,
}

/// Chronological edge log with a per-day index.
#[derive(Debug, Clone)]
pub struct EdgeStore {
    edges: Vec<Interaction>,
    days: Vec<DaySpan>,
    n_users: usize,
    n_items: usize,
}

impl EdgeStore {
    pub fn new(edges: &[Interaction], n_users: usize, n_items: usize) -> Result<Self> {
        if edges.windows(2).any(|w| w[0].day > w[1].day) {
            return Err(Error::Sequencing("edge store input is not sorted by day".into()));
        }
        if let Some(x) = edges
            .iter()
            .find(|x| x.user as usize >= n_users || x.item as usize >= n_items)
        {
            return Err(Error::Dimension(format!(
                "edge ({}, {}) outside {n_users}×{n_items}",
                x.user, x.item
            )));
        }
        let mut days: Vec<DaySpan> = Vec::new();
        for (k, x) in edges.iter().enumerate() {
            match days.last_mut() {
                Some(s) if s.day == x.day => s.end = k + 1,
                _ => days.push(DaySpan {
                    day: x.day,
                    start: k,
                    end: k + 1,
                }),
            }
        }
        Ok(EdgeStore {
            edges: edges.to_vec(),
            days,
            n_users,
            n_items,
        })
    }

    pub fn from_dataset(ds: &crate::data::Dataset) -> Result<Self> {
        Self::new(&ds.interactions, ds.n_users, ds.n_items)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn edges(&self) -> &[Interaction] {
        &self.edges
    }

    /// Distinct interaction days, ascending.
    pub fn days(&self) -> impl Iterator<Item = u32> + '_ {
        self.days.iter().map(|s| s.day)
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    /// Index of the first edge with `day(e) >= day`.
    fn lower(&self, day: u32) -> usize {
        let k = self.days.partition_point(|s| s.day < day);
        self.days.get(k).map_or(self.edges.len(), |s| s.start)
    }

    /// Edges whose day is exactly `day` (empty if none).
    pub fn instant_edges(&self, day: u32) -> &[Interaction] {
        match self.days.binary_search_by_key(&day, |s| s.day) {
            Ok(k) => &self.edges[self.days[k].start..self.days[k].end],
            Err(_) => &[],
        }
    }

    pub fn instant_biadjacency(&self, day: u32) -> BiAdjacency {
        self.pairs(self.instant_edges(day))
    }

    /// All interactions strictly before `day`.
    pub fn history_biadjacency(&self, day: u32) -> BiAdjacency {
        self.pairs(&self.edges[..self.lower(day)])
    }

    /// Interactions with `day − s_days <= day(e) < day`.
    pub fn context_biadjacency(&self, day: u32, s_days: u32) -> BiAdjacency {
        assert!(s_days >= 1, "context window must span at least one day");
        let from = self.lower(day.saturating_sub(s_days));
        self.pairs(&self.edges[from..self.lower(day)])
    }

    fn pairs(&self, edges: &[Interaction]) -> BiAdjacency {
        BiAdjacency::from_pairs(self.n_users, self.n_items, edges.iter().map(|x| (x.user, x.item)))
    }

    /// Forward-only incremental view maintainer.
    pub fn cursor(&self, s_days: u32) -> ViewCursor<'_> {
        assert!(s_days >= 1, "context window must span at least one day");
        ViewCursor {
            store: self,
            s_days,
            day: None,
            head: 0,
            tail: 0,
            history: HashMap::new(),
            window: HashMap::new(),
        }
    }
}

/// Maintains the history and context edge multisets as the query day moves
/// forward: edges enter when their day falls behind the cursor and leave the
/// window once older than `s_days`.
#[derive(Debug, Clone)]
pub struct ViewCursor<'a> {
    store: &'a EdgeStore,
    s_days: u32,
    day: Option<u32>,
    /// Edges `..head` are before the cursor day.
    head: usize,
    /// Edges `tail..head` are inside the context window.
    tail: usize,
    history: HashMap<(u32, u32), u32>,
    window: HashMap<(u32, u32), u32>,
}

impl<'a> ViewCursor<'a> {
    pub fn day(&self) -> Option<u32> {
        self.day
    }

    pub fn advance_to(&mut self, day: u32) -> Result<()> {
        if let Some(cur) = self.day {
            if day < cur {
                return Err(Error::Sequencing(format!("view cursor cannot move back from day {cur} to {day}")));
            }
        }
        let edges = &self.store.edges;
        while self.head < edges.len() && edges[self.head].day < day {
            let key = (edges[self.head].user, edges[self.head].item);
            *self.history.entry(key).or_default() += 1;
            *self.window.entry(key).or_default() += 1;
            self.head += 1;
        }
        let start = day.saturating_sub(self.s_days);
        while self.tail < self.head && edges[self.tail].day < start {
            let key = (edges[self.tail].user, edges[self.tail].item);
            let c = self.window.get_mut(&key).expect("window holds every edge in range");
            *c -= 1;
            if *c == 0 {
                self.window.remove(&key);
            }
            self.tail += 1;
        }
        self.day = Some(day);
        Ok(())
    }

    pub fn history(&self) -> BiAdjacency {
        BiAdjacency::from_pairs(self.store.n_users, self.store.n_items, self.history.keys().copied())
    }

    pub fn context(&self) -> BiAdjacency {
        BiAdjacency::from_pairs(self.store.n_users, self.store.n_items, self.window.keys().copied())
    }

    pub fn instant(&self) -> &'a [Interaction] {
        self.day.map_or(&[], |d| self.store.instant_edges(d))
    }
}

/// `(α0/2)(I + D^-½ adj D^-½)` over the symmetric bipartite adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: SparseMatrix,
    pub alpha0: f64,
}

pub fn normalize_adjacency(b: &BiAdjacency) -> NormalizedAdjacency {
    normalize_with(b, ALPHA0)
}

pub fn normalize_with(b: &BiAdjacency, alpha0: f64) -> NormalizedAdjacency {
    let nu = b.n_users();
    let n = b.n_nodes();
    let inv_sqrt = |d: usize| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() };
    let du: Vec<f64> = b.user_degrees().into_iter().map(inv_sqrt).collect();
    let di: Vec<f64> = b.item_degrees().into_iter().map(inv_sqrt).collect();
    let half = alpha0 / 2.0;
    let mut t = Vec::with_capacity(n + 2 * b.nnz());
    for k in 0..n {
        t.push((k as u32, k as u32, half));
    }
    for &(u, i) in b.edges() {
        // Same product for both triangles keeps the matrix exactly symmetric.
        let w = half * (du[u as usize] * di[i as usize]);
        let j = (nu + i as usize) as u32;
        t.push((u, j, w));
        t.push((j, u, w));
    }
    NormalizedAdjacency {
        matrix: SparseMatrix::from_triplets(n, n, t),
        alpha0,
    }
}

/// `sigmoid(α)`-scaled adjacency, materialized. Column scaling weights each
/// entry by the importance of the source node `j`.
pub fn learnable_adjacency(nadj: &NormalizedAdjacency, alpha: &[f64], axis: GainAxis) -> Result<SparseMatrix> {
    if alpha.len() != nadj.matrix.rows() {
        return Err(Error::Dimension(format!(
            "spectral radii length {} does not match {} nodes",
            alpha.len(),
            nadj.matrix.rows()
        )));
    }
    let gain: Vec<f64> = alpha.iter().map(|&a| sigmoid(a)).collect();
    match axis {
        GainAxis::Columns => nadj.matrix.scale_columns(&gain),
        GainAxis::Rows => nadj.matrix.scale_rows(&gain),
    }
}

/// Row-normalized instant propagation over all nodes: user rows average the
/// states of their instant items and vice versa. Rows without instant edges
/// are empty.
pub fn instant_mean_operator(b: &BiAdjacency) -> SparseMatrix {
    let nu = b.n_users();
    let du = b.user_degrees();
    let di = b.item_degrees();
    let mut t = Vec::with_capacity(2 * b.nnz());
    for &(u, i) in b.edges() {
        let j = (nu + i as usize) as u32;
        t.push((u, j, 1.0 / du[u as usize] as f64));
        t.push((j, u, 1.0 / di[i as usize] as f64));
    }
    SparseMatrix::from_triplets(b.n_nodes(), b.n_nodes(), t)
}

/// Dense 0/1 per-user item bitsets of everything seen so far; answers the
/// negative-sampling exclusion queries in both directions.
#[derive(Debug, Clone)]
pub struct HistoryIndex {
    n_users: usize,
    n_items: usize,
    words_per_user: usize,
    bits: Vec<u64>,
    user_degree: Vec<usize>,
    item_degree: Vec<usize>,
}

impl HistoryIndex {
    pub fn new(n_users: usize, n_items: usize) -> Self {
        let words_per_user = n_items.div_ceil(64);
        HistoryIndex {
            n_users,
            n_items,
            words_per_user,
            bits: vec![0; n_users * words_per_user],
            user_degree: vec![0; n_users],
            item_degree: vec![0; n_items],
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn contains(&self, user: u32, item: u32) -> bool {
        let w = self.bits[user as usize * self.words_per_user + item as usize / 64];
        w >> (item % 64) & 1 == 1
    }

    pub fn insert(&mut self, user: u32, item: u32) {
        if !self.contains(user, item) {
            self.bits[user as usize * self.words_per_user + item as usize / 64] |= 1 << (item % 64);
            self.user_degree[user as usize] += 1;
            self.item_degree[item as usize] += 1;
        }
    }

    pub fn extend(&mut self, edges: &[Interaction]) {
        for x in edges {
            self.insert(x.user, x.item);
        }
    }

    pub fn user_degree(&self, user: u32) -> usize {
        self.user_degree[user as usize]
    }

    pub fn item_degree(&self, item: u32) -> usize {
        self.item_degree[item as usize]
    }

    /// Items `user` has not interacted with, excluding `except`, ascending.
    pub fn unseen_items(&self, user: u32, except: u32) -> Vec<u32> {
        (0..self.n_items as u32)
            .filter(|&i| i != except && !self.contains(user, i))
            .collect()
    }

    /// Users who have not interacted with `item`, excluding `except`, ascending.
    pub fn unseen_users(&self, item: u32, except: u32) -> Vec<u32> {
        (0..self.n_users as u32)
            .filter(|&u| u != except && !self.contains(u, item))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x(user: u32, item: u32, day: u32) -> Interaction {
        Interaction {
            user,
            item,
            day,
            t_norm: 0.0,
        }
    }

    fn random_store(rng: &mut ChaCha8Rng, n_edges: usize, nu: u32, ni: u32, days: u32) -> EdgeStore {
        let mut e: Vec<Interaction> = (0..n_edges)
            .map(|_| x(rng.random_range(0..nu), rng.random_range(0..ni), rng.random_range(0..days)))
            .collect();
        e.sort_by_key(|x| (x.day, x.user, x.item));
        EdgeStore::new(&e, nu as usize, ni as usize).unwrap()
    }

    fn scan(store: &EdgeStore, keep: impl Fn(u32) -> bool) -> BiAdjacency {
        BiAdjacency::from_pairs(
            store.n_users(),
            store.n_items(),
            store.edges().iter().filter(|x| keep(x.day)).map(|x| (x.user, x.item)),
        )
    }

    #[test]
    fn instant_views() {
        let s = EdgeStore::new(&[x(0, 0, 1), x(1, 0, 1), x(0, 1, 2)], 2, 2).unwrap();
        assert_eq!(s.instant_edges(1).len(), 2);
        assert!(s.instant_edges(3).is_empty());
        assert!(s.history_biadjacency(0).is_empty());
    }

    #[test]
    fn duplicates_collapse() {
        let s = EdgeStore::new(&[x(0, 1, 1), x(0, 1, 2)], 1, 2).unwrap();
        let h = s.history_biadjacency(5);
        assert_eq!(h.edges(), &[(0, 1)]);
        assert_eq!(h.to_sparse().get(0, 1), 1.0);
    }

    #[test]
    fn unit_and_unbounded_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_store(&mut rng, 80, 6, 5, 20);
        for day in 0..22 {
            assert_eq!(s.context_biadjacency(day, 1000), s.history_biadjacency(day));
            let prev = scan(&s, |d| day > 0 && d == day - 1);
            assert_eq!(s.context_biadjacency(day, 1), prev);
        }
    }

    #[test]
    fn random_queries_match_full_rescan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_store(&mut rng, 50, 7, 6, 15);
        for _ in 0..200 {
            let day = rng.random_range(0..17);
            let win = rng.random_range(1..8);
            let inst: Vec<Interaction> = s.edges().iter().copied().filter(|e| e.day == day).collect();
            assert_eq!(s.instant_edges(day), &inst[..]);
            assert_eq!(s.history_biadjacency(day), scan(&s, |d| d < day));
            assert_eq!(s.context_biadjacency(day, win), scan(&s, |d| d + win >= day && d < day));
        }
    }

    #[test]
    fn cursor_tracks_rescan_and_refuses_to_rewind() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_store(&mut rng, 120, 8, 9, 30);
        let mut c = s.cursor(4);
        let mut prev_hist = BiAdjacency::empty(8, 9);
        for day in 0..33 {
            c.advance_to(day).unwrap();
            let h = c.history();
            assert_eq!(h, s.history_biadjacency(day));
            assert_eq!(c.context(), s.context_biadjacency(day, 4));
            assert!(c.context().is_subset_of(&h));
            assert!(prev_hist.is_subset_of(&h));
            prev_hist = h;
        }
        assert!(matches!(c.advance_to(5), Err(Error::Sequencing(_))));
    }

    #[test]
    fn single_edge_normalization() {
        let b = BiAdjacency::from_pairs(1, 1, [(0, 0)]);
        let a = normalize_adjacency(&b).matrix.to_dense();
        for v in a.data() {
            assert!((v - 0.49).abs() < 1e-15);
        }
        let e = normalize_adjacency(&BiAdjacency::empty(2, 3)).matrix.to_dense();
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(e.get(r, c), if r == c { 0.49 } else { 0.0 });
            }
        }
    }

    #[test]
    fn learnable_scaling() {
        let nadj = normalize_adjacency(&BiAdjacency::from_pairs(1, 1, [(0, 0)]));
        let half = learnable_adjacency(&nadj, &[0.0, 0.0], GainAxis::Columns).unwrap();
        assert_eq!(half.to_dense().data(), &[0.245; 4]);
        let off = learnable_adjacency(&nadj, &[0.0, -800.0], GainAxis::Columns).unwrap().to_dense();
        assert_eq!(off.get(0, 1), 0.0);
        assert_eq!(off.get(1, 1), 0.0);
        let (a, b) = (0.7, -1.3);
        let m = learnable_adjacency(&nadj, &[a, b], GainAxis::Columns).unwrap().to_dense();
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        for (r, c, alpha) in [(0, 0, a), (1, 0, a), (0, 1, b), (1, 1, b)] {
            assert!((m.get(r, c) - 0.49 * s(alpha)).abs() < 1e-15);
        }
        let rows = learnable_adjacency(&nadj, &[a, b], GainAxis::Rows).unwrap().to_dense();
        assert!((rows.get(1, 0) - 0.49 * s(b)).abs() < 1e-15);
        assert!(learnable_adjacency(&nadj, &[0.0], GainAxis::Columns).is_err());
    }

    #[test]
    fn instant_mean_rows() {
        let b = BiAdjacency::from_pairs(2, 3, [(0, 0), (0, 2), (1, 2)]);
        let m = instant_mean_operator(&b).to_dense();
        assert_eq!(m.row(0), &[0.0, 0.0, 0.5, 0.0, 0.5]);
        assert_eq!(m.row(1), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(m.row(4), &[0.5, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(m.row(3), &[0.0; 5]);
    }

    #[test]
    fn history_index_pools() {
        let mut h = HistoryIndex::new(3, 70);
        h.insert(1, 65);
        h.insert(1, 65);
        h.insert(0, 3);
        assert!(h.contains(1, 65) && !h.contains(0, 65));
        assert_eq!(h.user_degree(1), 1);
        assert_eq!(h.unseen_users(65, 2), vec![0]);
        assert_eq!(h.unseen_items(0, 0).len(), 68);
    }

    /// Power iteration on a shifted matrix: λ_max of a symmetric PSD-ish
    /// matrix whose spectrum lies in [0, α0].
    fn power_iteration(a: &SparseMatrix) -> f64 {
        let n = a.rows();
        let mut v = crate::tensor::Tensor::from_fn(n, 1, |r, _| 1.0 + (r as f64 * 0.37).sin());
        let mut lambda = 0.0;
        for _ in 0..2000 {
            let w = a.spmm(&v).unwrap();
            let norm = w.norm();
            if norm == 0.0 {
                return 0.0;
            }
            let rq: f64 = v.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() / v.norm().powi(2);
            v = w.scaled(1.0 / norm);
            if (rq - lambda).abs() < 1e-13 {
                return rq;
            }
            lambda = rq;
        }
        lambda
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn normalized_adjacency_is_symmetric_and_bounded(
            pairs in proptest::collection::vec((0u32..10, 0u32..8), 0..40)
        ) {
            let b = BiAdjacency::from_pairs(10, 8, pairs);
            let a = normalize_adjacency(&b).matrix;
            let d = a.to_dense();
            for r in 0..18 {
                prop_assert_eq!(d.get(r, r), 0.49);
                for c in 0..18 {
                    prop_assert_eq!(d.get(r, c).to_bits(), d.get(c, r).to_bits());
                }
            }
            prop_assert!(power_iteration(&a) <= ALPHA0 + 1e-9);
        }

        #[test]
        fn window_fifo(seed in any::<u64>(), win in 1u32..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_store(&mut rng, 60, 5, 5, 20);
            for day in 0..21 {
                let a = s.context_biadjacency(day, win);
                let b = s.context_biadjacency(day + 1, win);
                // Edge-day multisets: leaving = day + 1 − win − 1, entering = day.
                let entering = scan(&s, |d| d == day);
                let staying = scan(&s, |d| d + win >= day + 1 && d < day);
                let leaving = scan(&s, |d| d + win == day);
                prop_assert!(a.edges().iter().all(|&(u, i)| staying.contains(u, i) || leaving.contains(u, i)));
                prop_assert!(b.edges().iter().all(|&(u, i)| staying.contains(u, i) || entering.contains(u, i)));
                prop_assert!(entering.is_subset_of(&b));
                prop_assert!(staying.is_subset_of(&a) && staying.is_subset_of(&b));
            }
        }
    }
}
