use serde::{Deserialize, Serialize};

use super::params::{FreezePlan, ParamStore};
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the shared step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One adaptive-moment update. Frozen tensors and frozen rows are skipped
/// entirely: neither the parameter nor its moments are written.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    plan: &FreezePlan,
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> Result<()> {
    plan.validate(params)?;
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(hyper.beta1);
    let b2 = T::lit(hyper.beta2);
    let one = T::one();
    let corr1 = T::lit(1.0 - hyper.beta1.powi(t));
    let corr2 = T::lit(1.0 - hyper.beta2.powi(t));
    let lr = T::lit(hyper.lr);
    let eps = T::lit(hyper.eps);

    for p in params.iter_mut() {
        if plan.is_tensor_frozen(&p.name) {
            continue;
        }
        let g = grads.get(&p.name)?;
        if g.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m.get_mut(&p.name)?;
        let m = m.data_mut();
        let v = state.v.get_mut(&p.name)?.data_mut();
        let cols = p.value.cols().max(1);
        let frozen_rows = plan.frozen_rows_of(&p.name);
        let w = p.value.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            if frozen_rows.is_some_and(|rows| rows.contains(&(i / cols))) {
                continue;
            }
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|p| p.value.sq_norm().as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for p in grads.iter_mut() {
            p.value.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::params::ParamGroup;
    use crate::gradcore::tensor::Tensor;

    fn setup() -> (ParamStore<f32>, ParamStore<f32>) {
        let mut p = ParamStore::new();
        p.insert(
            "W_p",
            ParamGroup::PhonemeTable,
            Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap(),
        );
        p.insert(
            "W_s",
            ParamGroup::SpeakerTable,
            Tensor::new(vec![2, 2], vec![0.5, 0.6, -0.7, 0.8]).unwrap(),
        );
        let mut g = p.zeros_like();
        g.get_mut("W_p").unwrap().data_mut().fill(0.3);
        g.get_mut("W_s").unwrap().data_mut().fill(-0.2);
        (p, g)
    }

    #[test]
    fn frozen_tensor_is_bit_identical_after_many_steps() {
        let (mut p, g) = setup();
        let before = p.clone();
        let mut plan = FreezePlan::default();
        plan.frozen_tensors.insert("W_p".into());
        let mut st = AdamState::new(&p);
        for _ in 0..100 {
            adam_step(&mut p, &g, &plan, &mut st, &AdamHyper::default()).unwrap();
        }
        assert!(p.get("W_p").unwrap().bit_eq(before.get("W_p").unwrap()));
        assert_eq!(st.m.get("W_p").unwrap().sum(), 0.0);
        assert_ne!(p.get("W_s").unwrap(), before.get("W_s").unwrap());
    }

    #[test]
    fn frozen_row_stays_while_other_row_moves() {
        let (mut p, g) = setup();
        let before = p.clone();
        let mut plan = FreezePlan::default();
        plan.frozen_rows.insert("W_s".into(), [0].into());
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &plan, &mut st, &AdamHyper::default()).unwrap();
        let (a, b) = (p.get("W_s").unwrap(), before.get("W_s").unwrap());
        assert_eq!(a.row_slice(0), b.row_slice(0));
        assert_ne!(a.row_slice(1), b.row_slice(1));
        assert_eq!(st.v.get("W_s").unwrap().row_slice(0), &[0.0, 0.0]);
    }

    #[test]
    fn zero_gradients_with_empty_plan_are_a_fixed_point() {
        let (mut p, g) = setup();
        let before = p.clone();
        let zeros = g.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &zeros, &FreezePlan::default(), &mut st, &AdamHyper::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn unknown_name_in_plan_is_an_error() {
        let (mut p, g) = setup();
        let mut plan = FreezePlan::default();
        plan.frozen_tensors.insert("W_x".into());
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &plan, &mut st, &AdamHyper::default()).is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let (_, mut g) = setup();
        let before = clip_grad_norm(&mut g, 0.1);
        assert!(before > 0.1);
        let after = clip_grad_norm(&mut g, f64::INFINITY);
        assert!((after - 0.1).abs() < 1e-6);
    }
}
