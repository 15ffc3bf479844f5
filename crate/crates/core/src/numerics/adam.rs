use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParameterStore};
use super::tensor::Tensor2D;
use crate::error::{CalecError, Result};

/// Adam moments, step counter and learning-rate schedule.
///
/// The effective rate for a parameter is the rate of the first group whose
/// prefix matches its name (else `lr`), scaled by the linear decay factor
/// `1 - (t - 1) / total_steps` when `total_steps` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub total_steps: Option<u64>,
    pub group_lr: Vec<(String, f64)>,
    #[serde(skip)]
    first: BTreeMap<String, Tensor2D>,
    #[serde(skip)]
    second: BTreeMap<String, Tensor2D>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            total_steps: None,
            group_lr: Vec::new(),
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn with_linear_decay(mut self, total_steps: u64) -> Self {
        self.total_steps = Some(total_steps.max(1));
        self
    }

    pub fn with_group(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.group_lr.push((prefix.into(), lr));
        self
    }

    pub fn base_lr_for(&self, name: &str) -> f64 {
        self.group_lr
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(self.lr, |(_, lr)| *lr)
    }

    /// Decay multiplier applied at the 1-based step `t`.
    pub fn decay_factor(&self, t: u64) -> f64 {
        match self.total_steps {
            Some(total) => (1.0 - (t.saturating_sub(1)) as f64 / total as f64).max(0.0),
            None => 1.0,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor2D> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor2D> {
        self.second.get(name)
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Tensor2D, &Tensor2D)> {
        self.first
            .iter()
            .filter_map(|(k, m)| self.second.get(k).map(|v| (k.as_str(), m, v)))
    }

    pub fn set_moments(&mut self, name: &str, first: Tensor2D, second: Tensor2D) {
        self.first.insert(name.to_string(), first);
        self.second.insert(name.to_string(), second);
    }
}

/// One Adam update with bias correction. Frozen parameters and parameters
/// without a gradient entry are left untouched.
pub fn adam_step(store: &mut ParameterStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads.iter() {
        let p = store.get(name)?;
        if p.shape() != g.shape() {
            return Err(CalecError::Shape(format!(
                "gradient for `{name}` is {:?}, parameter is {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step;
    let decay = state.decay_factor(t);
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for (name, g) in grads.iter() {
        if store.is_frozen(name) {
            continue;
        }
        let lr = state.base_lr_for(name) * decay;
        let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor2D::zeros(g.rows(), g.cols()));
        for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
        }
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor2D::zeros(g.rows(), g.cols()));
        for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
        }
        let (m, v) = (&state.first[name], &state.second[name]);
        let p = store.get_mut(name)?;
        for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor2D::from_rows(&[vec![1.0, -2.0]]).unwrap()).unwrap();
        s.insert("csi.w", Tensor2D::from_rows(&[vec![0.5]]).unwrap()).unwrap();
        s
    }

    fn grads(w: [f64; 2], c: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert("w", Tensor2D::row_vector(&w));
        g.insert("csi.w", Tensor2D::scalar(c));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut st = AdamState::new(1e-3);
        adam_step(&mut s, &grads([0.0, 0.0], 0.0), &mut st).unwrap();
        assert_eq!(s, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn frozen_parameter_is_unchanged() {
        let mut s = store();
        s.freeze("w").unwrap();
        let mut st = AdamState::new(1e-2);
        adam_step(&mut s, &grads([3.0, -1.0], 2.0), &mut st).unwrap();
        assert_eq!(s.get("w").unwrap().row(0), &[1.0, -2.0]);
        assert_ne!(s.get("csi.w").unwrap().item(), 0.5);
    }

    #[test]
    fn single_step_closed_form() {
        // After one step m̂ = g and v̂ = g², so Δ = -lr·g/(|g| + eps).
        let mut s = store();
        let mut st = AdamState::new(0.01);
        let g = [0.3, -4.0];
        adam_step(&mut s, &grads(g, 0.0), &mut st).unwrap();
        let w = s.get("w").unwrap();
        assert_abs_diff_eq!(w.get(0, 0), 1.0 - 0.01 * 0.3 / (0.3 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(w.get(0, 1), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), epsilon = 1e-15);
        // m = 0.1 g, v = 0.001 g²
        assert_abs_diff_eq!(st.first_moment("w").unwrap().get(0, 1), -0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(st.second_moment("w").unwrap().get(0, 1), 0.016, epsilon = 1e-15);
    }

    #[test]
    fn group_rates_and_linear_decay() {
        let mut s = store();
        let mut st = AdamState::new(1e-5).with_group("csi.", 1e-6).with_linear_decay(4);
        assert_eq!(st.base_lr_for("csi.w"), 1e-6);
        assert_eq!(st.base_lr_for("w"), 1e-5);
        adam_step(&mut s, &grads([1.0, 1.0], 1.0), &mut st).unwrap();
        assert_abs_diff_eq!(s.get("csi.w").unwrap().item(), 0.5 - 1e-6, epsilon = 1e-12);
        assert_eq!(st.decay_factor(1), 1.0);
        assert_eq!(st.decay_factor(3), 0.5);
        assert_eq!(st.decay_factor(5), 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut s = store();
        let mut g = Gradients::new();
        g.insert("w", Tensor2D::zeros(2, 1));
        let mut st = AdamState::new(1e-3);
        assert!(matches!(adam_step(&mut s, &g, &mut st), Err(CalecError::Shape(_))));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut s = store();
            let mut st = AdamState::new(1e-2);
            for i in 0..5 {
                adam_step(&mut s, &grads([i as f64, 1.0 / (1.0 + i as f64)], -0.5), &mut st).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}
