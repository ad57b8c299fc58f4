//! Adaptive moment estimation with a fixed learning rate.

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update in place. CPU-side slot state lives in `state` and follows
    /// the parameter set it was created for.
    pub fn step<F: Scalar>(
        &self,
        params: &mut ParameterSet<F>,
        grads: &ParameterSet<F>,
        state: &mut AdamState<F>,
    ) -> Result<()> {
        if !params.same_schema(grads) || !params.same_schema(&state.m) {
            return Err(Error::Contract("optimizer schemas out of sync".into()));
        }
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        let lr = F::from_f64c(self.lr);
        let b1 = F::from_f64c(self.beta1);
        let b2 = F::from_f64c(self.beta2);
        let one_m_b1 = F::from_f64c(1.0 - self.beta1);
        let one_m_b2 = F::from_f64c(1.0 - self.beta2);
        let bc1 = F::from_f64c(bc1);
        let bc2 = F::from_f64c(bc2);
        let eps = F::from_f64c(self.eps);

        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("schema checked");
            let m = state.m.get_mut(name).expect("schema checked");
            let v = state.v.get_mut(name).expect("schema checked");
            let (ps, gs, ms, vs) = (
                p.as_slice_mut().expect("standard layout"),
                g.as_slice().expect("standard layout"),
                m.as_slice_mut().expect("standard layout"),
                v.as_slice_mut().expect("standard layout"),
            );
            for i in 0..ps.len() {
                let gi = gs[i];
                ms[i] = b1 * ms[i] + one_m_b1 * gi;
                vs[i] = b2 * vs[i] + one_m_b2 * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] = ps[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Slot state (first/second moments) matching one parameter set's schema.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    m: ParameterSet<F>,
    v: ParameterSet<F>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new_like(params: &ParameterSet<F>) -> Self {
        let zeros = |src: &ParameterSet<F>| {
            let mut out = ParameterSet::new();
            for (name, value) in src.iter() {
                out.insert(name.clone(), ndarray::ArrayD::zeros(value.raw_dim()));
            }
            out
        };
        Self { m: zeros(params), v: zeros(params), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction, |update| == lr for any nonzero gradient on step 1
        // (up to eps).
        let mut params = ParameterSet::<f64>::new();
        params.insert("w", ArrayD::from_elem(ndarray::IxDyn(&[2]), 1.0));
        let mut grads = ParameterSet::<f64>::new();
        grads.insert("w", ArrayD::from_elem(ndarray::IxDyn(&[2]), 0.5));
        let mut state = AdamState::new_like(&params);
        let adam = Adam::new(1e-2);
        adam.step(&mut params, &grads, &mut state).unwrap();
        let w = params.get("w").unwrap();
        for &v in w.iter() {
            assert!((v - (1.0 - 1e-2)).abs() < 1e-6, "got {v}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = ParameterSet::<f64>::new();
        params.insert("w", ArrayD::from_elem(ndarray::IxDyn(&[3]), 0.7));
        let mut grads = ParameterSet::<f64>::new();
        grads.insert("w", ArrayD::zeros(ndarray::IxDyn(&[3])));
        let mut state = AdamState::new_like(&params);
        let before = params.clone();
        Adam::new(1e-3).step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn schema_mismatch_is_contract_error() {
        let mut params = ParameterSet::<f64>::new();
        params.insert("w", ArrayD::zeros(ndarray::IxDyn(&[3])));
        let grads = ParameterSet::<f64>::new();
        let mut state = AdamState::new_like(&params);
        assert!(Adam::new(1e-3).step(&mut params, &grads, &mut state).is_err());
    }
}
