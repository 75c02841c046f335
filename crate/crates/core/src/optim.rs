//! Adaptive-moment stochastic gradient optimizer.

use alloc::format;
use alloc::vec::Vec;

use crate::error::CtpError;
use crate::math;
use crate::params::{GradStore, ParamStore};
use crate::tape::Buf;
use crate::Result;

/// First/second moment accumulators plus a step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Buf>,
    v: Vec<Buf>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |s: &ParamStore| -> Vec<Buf> {
            (0..s.len())
                .map(|i| {
                    let b = s.buf(i);
                    Buf::zeros(b.rows, b.cols)
                })
                .collect()
        };
        OptimizerState {
            m: zeros(store),
            v: zeros(store),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. `direction` +1 descends the loss, -1 ascends it.
    pub fn step_signed(
        &mut self,
        params: &mut ParamStore,
        grads: &GradStore,
        direction: f64,
    ) -> Result<()> {
        if !grads.all_finite() {
            return Err(CtpError::NumericFailure(format!(
                "non-finite gradient at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for i in 0..params.len() {
            if !params.trainable(i) {
                continue;
            }
            let g = grads.buf(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            debug_assert_eq!(m.len(), g.len());
            let p = params.buf_mut(i);
            for ((pv, gv), (mv, vv)) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut().zip(v.data.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= direction * self.lr * mhat / (math::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }

    /// Standard descent step.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) -> Result<()> {
        self.step_signed(params, grads, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn quadratic_loss(store: &ParamStore, idx: usize) -> (f64, GradStore) {
        let mut tape = Tape::new();
        let x = tape.param(store, idx);
        let sq = tape.mul(x, x);
        let loss = tape.sum(sq);
        let l = tape.scalar_value(loss);
        (l, tape.grad(loss, store).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let x = store.add("x", Buf::col_vec(alloc::vec![1.0, -2.0]), true);
        let mut opt = OptimizerState::new(&store, 0.1);
        let g = GradStore::zeros_like(&store);
        opt.step(&mut store, &g).unwrap();
        assert_eq!(store.buf(x).data, alloc::vec![1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn one_step_descends_convex_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Buf::scalar(1.0), true);
        let mut opt = OptimizerState::new(&store, 0.1);
        let (l0, g) = quadratic_loss(&store, x);
        opt.step(&mut store, &g).unwrap();
        let (l1, _) = quadratic_loss(&store, x);
        assert!(l1 < l0, "loss did not decrease: {l0} -> {l1}");
    }

    #[test]
    fn two_hundred_steps_reach_minimum() {
        // 2-d quadratic with minimum 0 at the origin.
        let mut store = ParamStore::new();
        let x = store.add("x", Buf::col_vec(alloc::vec![1.0, -0.5]), true);
        let mut opt = OptimizerState::new(&store, 0.05);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let (l, g) = quadratic_loss(&store, x);
            last = l;
            opt.step(&mut store, &g).unwrap();
        }
        assert!(last < 1e-4, "final loss {last}");
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Buf::scalar(1.0), true);
        let mut opt = OptimizerState::new(&store, 0.1);
        let mut g = GradStore::zeros_like(&store);
        g.accumulate(x, &Buf::scalar(f64::NAN));
        assert!(matches!(
            opt.step(&mut store, &g),
            Err(CtpError::NumericFailure(_))
        ));
    }
}
