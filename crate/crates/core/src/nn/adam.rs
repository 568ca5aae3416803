use std::collections::BTreeMap;

use super::tensor::Tensor4;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor4>,
    pub v: BTreeMap<String, Tensor4>,
}

/// One bias-corrected Adam update. Gradients must cover exactly the keys of
/// `weights` and be finite; on error nothing is modified.
pub fn adam_step(
    weights: &mut BTreeMap<String, Tensor4>,
    grads: &BTreeMap<String, Tensor4>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if weights.len() != grads.len() || weights.keys().any(|k| !grads.contains_key(k)) {
        let missing = weights
            .keys()
            .find(|k| !grads.contains_key(*k))
            .or_else(|| grads.keys().find(|k| !weights.contains_key(*k)));
        return Err(Error::invalid(format!(
            "gradient keys do not match parameters (first difference: {missing:?})"
        )));
    }
    for (key, g) in grads {
        if g.shape() != weights[key].shape() {
            return Err(Error::shape(format!(
                "gradient for `{key}` has shape {:?}, parameter {:?}",
                g.shape(),
                weights[key].shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {} at `{key}`[{i}]",
                g.data()[i]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (key, w) in weights.iter_mut() {
        let g = &grads[key];
        let m = state
            .m
            .entry(key.clone())
            .or_insert_with(|| Tensor4::zeros(g.shape()));
        let v = state
            .v
            .entry(key.clone())
            .or_insert_with(|| Tensor4::zeros(g.shape()));
        for (((wi, gi), mi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *wi -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> BTreeMap<String, Tensor4> {
        BTreeMap::from([("w".to_string(), Tensor4::scalar(v))])
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut w = single(0.3);
        let mut st = AdamState::default();
        for _ in 0..5 {
            adam_step(&mut w, &single(0.0), &mut st, 1e-3, &AdamConfig::default()).unwrap();
        }
        assert_eq!(w["w"].item(), 0.3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [-3.0, 1e-4, 250.0] {
            let mut w = single(1.0);
            let mut st = AdamState::default();
            adam_step(&mut w, &single(g), &mut st, 0.01, &AdamConfig::default()).unwrap();
            let delta = w["w"].item() - 1.0;
            assert!((delta + 0.01 * f64::signum(g)).abs() < 1e-6, "{g}: {delta}");
        }
    }

    #[test]
    fn quadratic_trace_matches_scalar_recurrence() {
        // reference trace of w <- w - lr*mhat/(sqrt(vhat)+eps) on f(w) = w^2,
        // computed separately in double precision
        const TRACE: [(usize, f64); 4] = [
            (1, 0.9000000005),
            (10, 0.07624915560691221),
            (11, 0.005131501948057199),
            (12, -0.05893789063004727),
        ];
        let mut w = single(1.0);
        let mut st = AdamState::default();
        let mut prev = 1.0f64;
        for step in 1..=20 {
            let g = single(2.0 * w["w"].item());
            adam_step(&mut w, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
            let now = w["w"].item();
            if let Some((_, want)) = TRACE.iter().find(|(s, _)| *s == step) {
                assert!((now - want).abs() < 1e-12, "step {step}: {now} vs {want}");
            }
            if step <= 11 {
                assert!(now.abs() < prev, "step {step}");
            }
            prev = now.abs();
        }
        // momentum carries the iterate past the minimum
        assert!(w["w"].item() < 0.0);
    }

    #[test]
    fn rejects_nan_and_key_mismatch() {
        let mut w = single(1.0);
        let mut st = AdamState::default();
        let err = adam_step(&mut w, &single(f64::NAN), &mut st, 0.1, &AdamConfig::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(st.step, 0);
        let other = BTreeMap::from([("u".to_string(), Tensor4::scalar(1.0))]);
        assert!(adam_step(&mut w, &other, &mut st, 0.1, &AdamConfig::default()).is_err());
        assert_eq!(w["w"].item(), 1.0);
    }
}
