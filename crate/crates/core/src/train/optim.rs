use crate::error::{invalid, Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Momentum buffers and the number of steps taken.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub velocity: ParamStore,
    pub iter: usize,
}

impl OptimState {
    pub fn new(params: &ParamStore) -> OptimState {
        let mut velocity = ParamStore::new();
        for (name, t) in params.iter() {
            velocity
                .insert(name, Tensor::zeros(t.shape()))
                .expect("names are unique");
        }
        OptimState { velocity, iter: 0 }
    }
}

/// `v ← m·v + g + wd·p; p ← p − lr·v`, with weight decay on conv weights only.
/// Nothing is modified if any gradient is non-finite.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| invalid!("sgd: no gradient for {name}"))?;
        let v = state
            .velocity
            .get(name)
            .ok_or_else(|| invalid!("sgd: no velocity for {name}"))?;
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(invalid!("sgd: shape mismatch for {name}"));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
    }
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let v = state.velocity.get_mut(name).expect("checked above");
        let wd = if ParamKind::of(name).decays() { weight_decay } else { 0.0 };
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    state.iter += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn one(name: &str, v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::full(Shape::new(1, 1, 1, 1), v)).unwrap();
        s
    }

    fn val(s: &ParamStore, name: &str) -> f64 {
        s.get(name).unwrap().data()[0]
    }

    #[test]
    fn vanilla_descent() {
        let mut p = one("c.weight", 1.0);
        let mut st = OptimState::new(&p);
        sgd_step(&mut p, &one("c.weight", 0.5), &mut st, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(val(&p, "c.weight"), 1.0 - 0.1 * 0.5);
    }

    #[test]
    fn zero_grad_decays_velocity() {
        let mut p = one("c.weight", 1.0);
        let mut st = OptimState::new(&p);
        st.velocity.get_mut("c.weight").unwrap().data_mut()[0] = 2.0;
        sgd_step(&mut p, &one("c.weight", 0.0), &mut st, 0.0, 0.9, 0.0).unwrap();
        assert_eq!(val(&p, "c.weight"), 1.0);
        assert_eq!(val(&st.velocity, "c.weight"), 1.8);
    }

    #[test]
    fn two_steps_on_quadratic() {
        // f(p) = p², g = 2p; lr 0.1, m 0.9, wd 0.01, p0 = 1.
        // v1 = 2 + 0.01 = 2.01;          p1 = 1 - 0.201 = 0.799
        // v2 = 0.9·2.01 + 1.598 + 0.00799 = 3.41499;  p2 = 0.799 - 0.341499
        let mut p = one("c.weight", 1.0);
        let mut st = OptimState::new(&p);
        for _ in 0..2 {
            let g = one("c.weight", 2.0 * val(&p, "c.weight"));
            sgd_step(&mut p, &g, &mut st, 0.1, 0.9, 0.01).unwrap();
        }
        assert!((val(&p, "c.weight") - 0.457_501).abs() < 1e-12);
        assert_eq!(st.iter, 2);
    }

    #[test]
    fn norm_and_bias_not_decayed() {
        for name in ["n.gamma", "n.beta", "c.bias"] {
            let mut p = one(name, 1.0);
            let mut st = OptimState::new(&p);
            sgd_step(&mut p, &one(name, 0.0), &mut st, 0.1, 0.0, 0.5).unwrap();
            assert_eq!(val(&p, name), 1.0, "{name}");
        }
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut p = one("c.weight", 1.0);
        let mut st = OptimState::new(&p);
        let err = sgd_step(&mut p, &one("c.weight", f64::NAN), &mut st, 0.1, 0.9, 0.0);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        assert_eq!(val(&p, "c.weight"), 1.0);
        assert_eq!(st.iter, 0);
    }
}
