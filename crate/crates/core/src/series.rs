//! Truncated-series action of the closed-form linear graph ODE
//!
//! ```text
//! dX/dt = (A − I)·X + E,      A = gain-scaled normalized adjacency
//! X(t0 + Δt) = Q(Δt)·X(t0) + P(Δt)·E
//! Q(Δt) = exp((A − I)Δt),     P(Δt) = (A − I)⁻¹(Q(Δt) − I)
//! ```
//!
//! Neither the exponential nor the inverse is formed. With `M = A − I` and a
//! sub-interval `h`, one sub-step is
//!
//! ```text
//! X' = X + Σ_{k=1..K} (hM)^(k−1) · h(M·X + E) / k!
//! ```
//!
//! which is exactly `Q·X + P·E` with both series truncated at order K. The sum
//! is evaluated in Horner form, so one sub-step costs K sparse products. `Δt`
//! is split into `m` equal sub-intervals so that `‖hM‖` stays inside the
//! accurate range of the truncated series.

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;
use crate::tensor::Tensor;

/// Per-sub-step truncation bound that drives interval splitting.
const SUBSTEP_TOL: f64 = 1e-10;

/// How the per-node gain vector scales the normalized adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainAxis {
    /// `A[i,j] = gain[j]·adj[i,j]`: node `j`'s gain weighs how much its state
    /// feeds its neighbors.
    #[default]
    Columns,
    /// `A[i,j] = gain[i]·adj[i,j]`.
    Rows,
}

impl GainAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            GainAxis::Columns => "column",
            GainAxis::Rows => "row",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "column" | "columns" => Ok(GainAxis::Columns),
            "row" | "rows" => Ok(GainAxis::Rows),
            other => Err(Error::Config(format!("unknown gain axis `{other}`"))),
        }
    }
}

/// The linear operator `A = gain ⊙ adj` along one axis.
#[derive(Debug, Clone, Copy)]
pub struct Propagator<'a> {
    pub adj: &'a SparseMatrix,
    pub gain: &'a [f64],
    pub axis: GainAxis,
}

impl Propagator<'_> {
    fn check(&self, x: &Tensor) -> Result<()> {
        let n = self.adj.rows();
        if self.adj.cols() != n {
            return Err(Error::shape("evolve", format!("adjacency {:?} is not square", self.adj.shape())));
        }
        if self.gain.len() != n {
            return Err(Error::Dimension(format!(
                "gain vector of length {} for {n} nodes",
                self.gain.len()
            )));
        }
        if x.rows() != n {
            return Err(Error::shape("evolve", format!("state {:?} for {n} nodes", x.shape())));
        }
        Ok(())
    }

    /// `A·s`
    pub fn apply(&self, s: &Tensor) -> Tensor {
        match self.axis {
            GainAxis::Columns => self.adj.spmm(&scale_rows(s, self.gain)).expect("shape checked"),
            GainAxis::Rows => scale_rows(&self.adj.spmm(s).expect("shape checked"), self.gain),
        }
    }

    /// `Aᵀ·g`
    pub fn apply_t(&self, g: &Tensor) -> Tensor {
        match self.axis {
            GainAxis::Columns => scale_rows(&self.adj.spmm_t(g).expect("shape checked"), self.gain),
            GainAxis::Rows => self.adj.spmm_t(&scale_rows(g, self.gain)).expect("shape checked"),
        }
    }

    /// Accumulates `∂⟨g, A·s⟩/∂gain` into `acc`. `adj_t_g` must be `adjᵀ·g`
    /// for the column axis; it is ignored for rows.
    fn gain_grad(&self, s: &Tensor, g: &Tensor, adj_t_g: Option<&Tensor>, acc: &mut [f64]) {
        match self.axis {
            GainAxis::Columns => {
                let atg = adj_t_g.expect("column axis needs adjᵀ·g");
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += dot(atg.row(j), s.row(j));
                }
            }
            GainAxis::Rows => {
                let adj_s = self.adj.spmm(s).expect("shape checked");
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += dot(g.row(i), adj_s.row(i));
                }
            }
        }
    }

    /// `Aᵀ·g` together with the gain gradient of `⟨g, A·s⟩`.
    fn adjoint_with_gain(&self, s: &Tensor, g: &Tensor, gain_acc: &mut [f64]) -> Tensor {
        match self.axis {
            GainAxis::Columns => {
                let atg = self.adj.spmm_t(g).expect("shape checked");
                self.gain_grad(s, g, Some(&atg), gain_acc);
                scale_rows(&atg, self.gain)
            }
            GainAxis::Rows => {
                self.gain_grad(s, g, None, gain_acc);
                self.apply_t(g)
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn scale_rows(x: &Tensor, s: &[f64]) -> Tensor {
    let mut out = x.clone();
    for (r, &k) in s.iter().enumerate() {
        for v in out.row_mut(r) {
            *v *= k;
        }
    }
    out
}

/// Largest `‖hM‖` for which one order-`k` sub-step meets `SUBSTEP_TOL`.
fn substep_radius(k: usize) -> f64 {
    let fact: f64 = (1..=k + 1).map(|i| i as f64).product();
    (SUBSTEP_TOL * fact).powf(1.0 / (k + 1) as f64)
}

/// Number of equal sub-intervals used for a step of length `dt`.
/// `norm_bound` bounds the spectral norm of the adjacency (before gains).
pub fn substeps(dt: f64, k: usize, norm_bound: f64, gain: &[f64]) -> usize {
    let max_gain = gain.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let rho = 1.0 + norm_bound * max_gain;
    ((rho * dt / substep_radius(k)).ceil() as usize).max(1)
}

fn validate(dt: f64, k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Config("series order K must be at least 1".into()));
    }
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("evolution interval must be finite and >= 0, got {dt}")));
    }
    Ok(())
}

/// One sub-step. When `trace` is given, the Horner iterates S^(K+1)=Y, …,
/// S^(3) are pushed for the adjoint.
fn substep(
    op: &Propagator<'_>,
    x: &Tensor,
    e: &Tensor,
    h: f64,
    k: usize,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Tensor {
    // Y = h(A·X − X + E)
    let mut y = op.apply(x);
    y.sub_assign(x);
    y.add_assign(e);
    y.scale_assign(h);
    let mut s = y.clone();
    for j in (2..=k).rev() {
        // S ← Y + h(A·S − S)/j
        let mut next = op.apply(&s);
        next.sub_assign(&s);
        next.scale_assign(h / j as f64);
        next.add_assign(&y);
        if let Some(t) = trace.as_deref_mut() {
            t.push(s);
        }
        s = next;
    }
    let mut out = x.clone();
    out.add_assign(&s);
    out
}

/// State after evolving `x` for `dt` under source term `e`.
pub fn evolve(
    x: &Tensor,
    e: &Tensor,
    op: &Propagator<'_>,
    dt: f64,
    k: usize,
    norm_bound: f64,
) -> Result<Tensor> {
    validate(dt, k)?;
    op.check(x)?;
    if e.shape() != x.shape() {
        return Err(Error::shape("evolve", format!("source {:?} vs state {:?}", e.shape(), x.shape())));
    }
    if dt == 0.0 {
        return Ok(x.clone());
    }
    let m = substeps(dt, k, norm_bound, op.gain);
    let h = dt / m as f64;
    let mut cur = x.clone();
    for _ in 0..m {
        cur = substep(op, &cur, e, h, k, None);
    }
    Ok(cur)
}

/// Gradients of `⟨g_out, evolve(x, e, …)⟩` with respect to `x`, `e` and the
/// gain vector. Sub-step inputs and Horner iterates are recomputed.
pub struct EvolveGrads {
    pub x: Tensor,
    pub e: Tensor,
    pub gain: Vec<f64>,
}

pub fn evolve_backward(
    x: &Tensor,
    e: &Tensor,
    op: &Propagator<'_>,
    dt: f64,
    k: usize,
    norm_bound: f64,
    g_out: &Tensor,
) -> Result<EvolveGrads> {
    validate(dt, k)?;
    op.check(x)?;
    let n = x.rows();
    let mut g_gain = vec![0.0; n];
    if dt == 0.0 {
        return Ok(EvolveGrads {
            x: g_out.clone(),
            e: Tensor::zeros(e.rows(), e.cols()),
            gain: g_gain,
        });
    }
    let m = substeps(dt, k, norm_bound, op.gain);
    let h = dt / m as f64;

    let mut inputs = Vec::with_capacity(m);
    let mut cur = x.clone();
    for _ in 0..m {
        let next = substep(op, &cur, e, h, k, None);
        inputs.push(std::mem::replace(&mut cur, next));
    }
    drop(cur);

    let mut g_x = g_out.clone();
    let mut g_e = Tensor::zeros(e.rows(), e.cols());
    let mut trace = Vec::with_capacity(k.saturating_sub(1));
    for x_in in inputs.iter().rev() {
        trace.clear();
        substep(op, x_in, e, h, k, Some(&mut trace));
        // trace[0] = S^(K+1) = Y, …, trace[K-2] = S^(3): the operand of the
        // update that produced S^(j) for j = K..2.
        let mut g_s = g_x.clone(); // ∂/∂S^(2); X' = X + S^(2)
        let mut g_y = Tensor::zeros(x_in.rows(), x_in.cols());
        for (idx, j) in (2..=k).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
            // S^(j) = Y + (h/j)(A·S^(j+1) − S^(j+1))
            let s_prev = &trace[idx];
            g_y.add_assign(&g_s);
            let t = g_s.scaled(h / j as f64);
            let mut g_prev = op.adjoint_with_gain(s_prev, &t, &mut g_gain);
            g_prev.sub_assign(&t);
            g_s = g_prev;
        }
        g_y.add_assign(&g_s);
        // Y = h(A·X − X + E)
        g_e.axpy(h, &g_y);
        let u = g_y.scaled(h);
        let mut g_xin = op.adjoint_with_gain(x_in, &u, &mut g_gain);
        g_xin.sub_assign(&u);
        g_xin.add_assign(&g_x);
        g_x = g_xin;
    }
    Ok(EvolveGrads {
        x: g_x,
        e: g_e,
        gain: g_gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (SparseMatrix, Vec<f64>) {
        // Path graph 0-1-2 with self loops.
        let adj = SparseMatrix::from_triplets(
            3,
            3,
            vec![
                (0, 0, 0.49),
                (1, 1, 0.49),
                (2, 2, 0.49),
                (0, 1, 0.3),
                (1, 0, 0.3),
                (1, 2, 0.3),
                (2, 1, 0.3),
            ],
        );
        (adj, vec![0.3, 0.6, 0.9])
    }

    #[test]
    fn zero_interval_is_identity() {
        let (adj, gain) = toy();
        let op = Propagator { adj: &adj, gain: &gain, axis: GainAxis::Columns };
        let x = Tensor::from_fn(3, 2, |r, c| r as f64 - c as f64 * 0.5 - 0.0);
        let e = Tensor::filled(3, 2, 1.0);
        for k in 1..8 {
            assert_eq!(evolve(&x, &e, &op, 0.0, k, 0.98).unwrap(), x);
        }
    }

    #[test]
    fn rejects_zero_order_and_negative_dt() {
        let (adj, gain) = toy();
        let op = Propagator { adj: &adj, gain: &gain, axis: GainAxis::Rows };
        let x = Tensor::zeros(3, 1);
        assert!(matches!(evolve(&x, &x, &op, 0.1, 0, 0.98), Err(Error::Config(_))));
        assert!(evolve(&x, &x, &op, -0.1, 3, 0.98).is_err());
    }

    #[test]
    fn substeps_grow_with_interval() {
        let g = [0.5; 4];
        assert_eq!(substeps(1e-3, 6, 0.98, &g), 1);
        assert!(substeps(50.0, 6, 0.98, &g) > substeps(1.0, 6, 0.98, &g));
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let (adj, gain) = toy();
        for axis in [GainAxis::Columns, GainAxis::Rows] {
            let x = Tensor::from_fn(3, 2, |r, c| 0.2 * r as f64 - 0.3 * c as f64 + 0.1);
            let e = Tensor::from_fn(3, 2, |r, c| 0.5 - 0.1 * (r * c) as f64);
            let w = Tensor::from_fn(3, 2, |r, c| 1.0 + 0.25 * r as f64 - 0.5 * c as f64);
            let f = |x: &Tensor, e: &Tensor, g: &[f64]| {
                let op = Propagator { adj: &adj, gain: g, axis };
                let out = evolve(x, e, &op, 0.7, 4, 0.98).unwrap();
                out.zip_map(&w, |a, b| a * b).sum()
            };
            let op = Propagator { adj: &adj, gain: &gain, axis };
            let grads = evolve_backward(&x, &e, &op, 0.7, 4, 0.98, &w).unwrap();
            let h = 1e-6;
            for i in 0..6 {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (f(&xp, &e, &gain) - f(&xm, &e, &gain)) / (2.0 * h);
                assert!((fd - grads.x.data()[i]).abs() < 1e-7, "x[{i}] {axis:?}");
                let mut ep = e.clone();
                ep.data_mut()[i] += h;
                let mut em = e.clone();
                em.data_mut()[i] -= h;
                let fd = (f(&x, &ep, &gain) - f(&x, &em, &gain)) / (2.0 * h);
                assert!((fd - grads.e.data()[i]).abs() < 1e-7, "e[{i}] {axis:?}");
            }
            for j in 0..3 {
                let mut gp = gain.clone();
                gp[j] += h;
                let mut gm = gain.clone();
                gm[j] -= h;
                let fd = (f(&x, &e, &gp) - f(&x, &e, &gm)) / (2.0 * h);
                assert!((fd - grads.gain[j]).abs() < 1e-7, "gain[{j}] {axis:?}");
            }
        }
    }
}
