use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update. Nothing is modified if any gradient is non-finite.
pub fn adam_step(cfg: &AdamConfig, params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(Error::dim("adam_step", params.get(id).shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(params.name(id).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in params.ids().zip(grads) {
        let m = &mut state.m[id.0];
        let v = &mut state.v[id.0];
        let mut values = params.get(id).to_vec();
        for (i, gi) in g.data().iter().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            values[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
        let shape = params.get(id).shape().to_vec();
        params.set(id, Tensor::new(&shape, values)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn scalar_store(x: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.add("x", Tensor::vector(vec![x]));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let before = p.clone();
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&AdamConfig::default(), &mut p, &[Tensor::zeros(&[3])], &mut st).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [0.5, 3.0, -40.0] {
            let mut p = scalar_store(1.0);
            let mut st = AdamState::new(&p);
            let cfg = AdamConfig::default();
            adam_step(&cfg, &mut p, &[Tensor::vector(vec![g])], &mut st).unwrap();
            let moved = 1.0 - p.get(crate::params::ParamId(0)).item();
            assert!((moved.abs() - cfg.learning_rate).abs() < 1e-9);
            assert_eq!(moved.signum(), g.signum());
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        let err = adam_step(
            &AdamConfig::default(),
            &mut p,
            &[Tensor::vector(vec![f64::NAN])],
            &mut st,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "x"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x, y) = (x - 3)^2 + 2 (y + 1)^2
        let mut p = ParamStore::new();
        let id = p.add("xy", Tensor::vector(vec![0.0, 0.0]));
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let target = Tensor::vector(vec![3.0, -1.0]);
        let mut steps = 0;
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let xy = p.var(&mut tape, id);
            let t = tape.constant(target.clone());
            let d = tape.sub(xy, t).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let w = tape.mul_const(sq, vec![1.0, 2.0]).unwrap();
            let loss = tape.sum(w);
            let g = tape.backward(loss).unwrap();
            let grads = p.gradients(&tape, &g);
            adam_step(&cfg, &mut p, &grads, &mut st).unwrap();
            steps += 1;
            if p.get(id).max_abs_diff(&target) < 1e-3 {
                break;
            }
        }
        assert!(p.get(id).max_abs_diff(&target) < 1e-3, "{:?}", p.get(id));
        assert!(steps <= 2000);
    }
}
