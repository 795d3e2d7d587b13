//! Adam with L2 weight decay folded into the gradient.

use crate::params::ParameterSet;
use crate::tape::Gradients;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. The decay term `weight_decay·θ` is added to the gradient
/// before the moment updates (classic Adam + L2).
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &Gradients,
    lr: f64,
    weight_decay: f64,
    state: &mut AdamState,
) {
    assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        debug_assert_eq!(m.shape(), g.shape());
        if lr == 0.0 {
            // Moments still advance; parameters stay bit-identical.
            let p = params.get(id);
            for (((mv, vv), &gv), &pv) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()).zip(p.data()) {
                let gt = gv + weight_decay * pv;
                *mv = BETA1 * *mv + (1.0 - BETA1) * gt;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gt * gt;
            }
            continue;
        }
        let p = params.get_mut(id);
        for (((pv, mv), vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let gt = gv + weight_decay * *pv;
            *mv = BETA1 * *mv + (1.0 - BETA1) * gt;
            *vv = BETA2 * *vv + (1.0 - BETA2) * gt * gt;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}
