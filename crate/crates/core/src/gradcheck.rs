//! Central finite-difference checks of tape gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParameterSet};
use crate::series::GainAxis;
use crate::sparse::SparseMatrix;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Pass threshold for every check in [`run_suite`].
pub const MAX_REL_ERR: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;
/// Coordinates probed per parameter before sampling kicks in.
const MAX_COORDS: usize = 64;

/// Max over probed coordinates of `|analytic − numeric| / max(1, |analytic|)`.
///
/// `f` must build a scalar loss from `params` on the supplied tape and be
/// deterministic. Parameters with more than 64 entries are subsampled
/// with a fixed seed.
pub fn grad_check<F>(f: F, params: &ParameterSet, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    Ok(grad_check_by_param(f, params, h)?
        .into_iter()
        .fold(0.0, |m, c| m.max(c.max_rel_err)))
}

/// [`grad_check`] broken down per parameter, in parameter order.
pub fn grad_check_by_param<F>(f: F, params: &ParameterSet, h: f64) -> Result<Vec<CheckResult>>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    assert!((1e-7..=1e-3).contains(&h), "step {h} outside [1e-7, 1e-3]");
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss, params)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6a09e667);
    let mut report = Vec::new();
    let mut probe = params.clone();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let coords: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            (0..MAX_COORDS).map(|_| rng.random_range(0..n)).collect()
        };
        let mut worst = 0.0f64;
        for c in coords {
            let orig = params.get(id).data()[c];
            probe.get_mut(id).data_mut()[c] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[c] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).data()[c];
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            worst = worst.max(err);
        }
        report.push(CheckResult {
            name: params.name(id).to_string(),
            max_rel_err: worst,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

/// Values bounded away from zero so ReLU kinks sit outside the FD stencil.
fn off_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(out ⊙ weights)` so every output entry carries a distinct adjoint.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let h = tape.hadamard(out, w)?;
    Ok(tape.sum(h))
}

type Builder = Box<dyn Fn(&mut Tape, &ParameterSet) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: ParameterSet,
    build: Builder,
}

fn case(
    name: &'static str,
    tensors: Vec<Tensor>,
    out_shape: (usize, usize),
    rng: &mut ChaCha8Rng,
    op: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let mut params = ParameterSet::new();
    for (i, t) in tensors.into_iter().enumerate() {
        params.insert(&format!("p{i}"), t).unwrap();
    }
    let weights = rand_tensor(rng, out_shape.0, out_shape.1, 1.0);
    let build: Builder = Box::new(move |tape, p| {
        let vars: Vec<Var> = p.ids().map(|id| tape.param(p, id)).collect();
        let out = op(tape, &vars)?;
        weighted_sum(tape, out, &weights)
    });
    Case { name, params, build }
}

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let a34 = rand_tensor(rng, 3, 4, 1.0);
    let b45 = rand_tensor(rng, 4, 5, 1.0);
    cases.push(case("matmul", vec![a34.clone(), b45], (3, 5), rng, |t, v| t.matmul(v[0], v[1])));
    let w24 = rand_tensor(rng, 2, 4, 1.0);
    let b12 = rand_tensor(rng, 1, 2, 1.0);
    cases.push(case("linear", vec![a34.clone(), w24, b12], (3, 2), rng, |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    }));
    cases.push(case("transpose", vec![a34.clone()], (4, 3), rng, |t, v| Ok(t.transpose(v[0]))));
    let s = Rc::new(SparseMatrix::from_triplets(
        3,
        3,
        vec![(0, 0, 0.5), (0, 2, -1.0), (1, 1, 2.0), (2, 0, 0.3), (2, 1, 0.7)],
    ));
    cases.push(case("spmm", vec![a34.clone()], (3, 4), rng, move |t, v| t.spmm(Rc::clone(&s), v[0])));
    let c34 = rand_tensor(rng, 3, 4, 1.0);
    cases.push(case("add", vec![a34.clone(), c34.clone()], (3, 4), rng, |t, v| t.add(v[0], v[1])));
    cases.push(case("sub", vec![a34.clone(), c34.clone()], (3, 4), rng, |t, v| t.sub(v[0], v[1])));
    cases.push(case("scale", vec![a34.clone()], (3, 4), rng, |t, v| Ok(t.scale(v[0], -1.7))));
    cases.push(case("hadamard", vec![a34.clone(), c34.clone()], (3, 4), rng, |t, v| {
        t.hadamard(v[0], v[1])
    }));
    let s31 = rand_tensor(rng, 3, 1, 1.0);
    cases.push(case("scale_rows", vec![a34.clone(), s31], (3, 4), rng, |t, v| t.scale_rows(v[0], v[1])));
    let d32 = rand_tensor(rng, 3, 2, 1.0);
    cases.push(case("concat_cols", vec![a34.clone(), d32], (3, 6), rng, |t, v| t.concat_cols(v[0], v[1])));
    let e24 = rand_tensor(rng, 2, 4, 1.0);
    cases.push(case("concat_rows", vec![a34.clone(), e24], (5, 4), rng, |t, v| t.concat_rows(v[0], v[1])));
    cases.push(case("slice_rows", vec![a34.clone()], (2, 4), rng, |t, v| t.slice_rows(v[0], 1, 3)));
    cases.push(case("column", vec![a34.clone()], (3, 1), rng, |t, v| t.column(v[0], 2)));
    cases.push(case("relu", vec![off_zero(rng, 3, 4)], (3, 4), rng, |t, v| Ok(t.relu(v[0]))));
    cases.push(case("sigmoid", vec![rand_tensor(rng, 3, 4, 3.0)], (3, 4), rng, |t, v| Ok(t.sigmoid(v[0]))));
    cases.push(case("softmax_rows", vec![rand_tensor(rng, 3, 4, 2.0)], (3, 4), rng, |t, v| {
        Ok(t.softmax_rows(v[0]))
    }));
    cases.push(case("logsumexp_rows", vec![rand_tensor(rng, 3, 4, 2.0)], (3, 1), rng, |t, v| {
        Ok(t.logsumexp_rows(v[0]))
    }));
    cases.push(case("row_select", vec![a34.clone()], (4, 4), rng, |t, v| {
        t.row_select(v[0], Rc::new(vec![2, 0, 2, 1]))
    }));
    let r24 = rand_tensor(rng, 2, 4, 1.0);
    cases.push(case("scatter_rows", vec![a34.clone(), r24], (3, 4), rng, |t, v| {
        t.scatter_rows(v[0], Rc::new(vec![2, 0]), v[1])
    }));
    cases.push(case("masked_add", vec![a34.clone(), c34.clone()], (3, 4), rng, |t, v| {
        t.masked_add(v[0], Rc::new(vec![true, false, true]), v[1])
    }));
    cases.push(case("row_dot", vec![a34.clone(), c34], (3, 1), rng, |t, v| t.row_dot(v[0], v[1])));
    cases.push(case("reshape", vec![a34.clone()], (2, 6), rng, |t, v| t.reshape(v[0], 2, 6)));
    cases.push(case("sum", vec![a34.clone()], (1, 1), rng, |t, v| Ok(t.sum(v[0]))));
    cases.push(case("mean", vec![a34], (1, 1), rng, |t, v| Ok(t.mean(v[0]))));

    let adj = Rc::new(SparseMatrix::from_triplets(
        4,
        4,
        vec![
            (0, 0, 0.49),
            (1, 1, 0.49),
            (2, 2, 0.49),
            (3, 3, 0.49),
            (0, 2, 0.34),
            (2, 0, 0.34),
            (1, 2, 0.28),
            (2, 1, 0.28),
            (1, 3, 0.49),
            (3, 1, 0.49),
        ],
    ));
    for (name, axis) in [("evolve_columns", GainAxis::Columns), ("evolve_rows", GainAxis::Rows)] {
        let adj = Rc::clone(&adj);
        let x = rand_tensor(rng, 4, 3, 1.0);
        let e = rand_tensor(rng, 4, 3, 1.0);
        let alpha = rand_tensor(rng, 4, 1, 2.0);
        cases.push(case(name, vec![x, e, alpha], (4, 3), rng, move |t, v| {
            let g = t.sigmoid(v[2]);
            t.evolve(v[0], v[1], g, Rc::clone(&adj), axis, 0.8, 5, 0.98)
        }));
    }

    // Three stacked layers with mixed nonlinearities.
    let x = rand_tensor(rng, 5, 4, 1.0);
    let w1 = rand_tensor(rng, 6, 4, 0.8);
    let w2 = rand_tensor(rng, 3, 6, 0.8);
    let w3 = rand_tensor(rng, 2, 3, 0.8);
    let b1 = rand_tensor(rng, 1, 6, 0.5);
    cases.push(case("three_layer_composition", vec![x, w1, b1, w2, w3], (5, 1), rng, |t, v| {
        let h1 = t.linear(v[0], v[1], Some(v[2]))?;
        let h1 = t.sigmoid(h1);
        let h2 = t.linear(h1, v[3], None)?;
        let h2 = t.softmax_rows(h2);
        let h3 = t.linear(h2, v[4], None)?;
        Ok(t.logsumexp_rows(h3))
    }));
    cases
}

/// Finite-difference checks over every primitive op, a three-layer
/// composition, and one end-to-end recurrence step loss on a 4-user/4-item
/// toy model.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for c in primitive_cases(&mut rng) {
        let err = grad_check(&c.build, &c.params, DEFAULT_STEP)?;
        checks.push(CheckResult {
            name: c.name.to_string(),
            max_rel_err: err,
        });
    }
    for (name, d) in [("cpmr_step_loss", 4), ("cpmr_step_loss_d2", 2)] {
        let err = crate::model::check::step_loss_grad_error(seed, d, DEFAULT_STEP)?;
        checks.push(CheckResult {
            name: name.to_string(),
            max_rel_err: err,
        });
    }
    Ok(SuiteReport { seed, checks })
}
