use super::{Grads, NnError, ParamSet, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. State is kept per parameter index.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = |i| vec![T::ZERO; params.get(i).len()];
        Adam {
            config,
            steps: 0,
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Parameters without a gradient count as having a
    /// zero gradient. Non-finite gradients are rejected before anything moves.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for i in 0..params.len() {
            if let Some(g) = grads.get(i) {
                if g.len() != self.m[i].len() {
                    return Err(NnError::Shape(format!(
                        "gradient for `{}` has {} values, expected {}",
                        params.name(i),
                        g.len(),
                        self.m[i].len()
                    )));
                }
            }
        }
        if !grads.all_finite() {
            return Err(NnError::NonFinite("gradients".into()));
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let step = c.learning_rate / (1.0 - c.beta1.powi(t));
        let v_corr = 1.0 / (1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (step, v_corr, eps) = (T::from_f64(step), T::from_f64(v_corr), T::from_f64(c.eps));
        for i in 0..params.len() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let zeros;
            let g = match grads.get(i) {
                Some(g) => g.data(),
                None => {
                    zeros = vec![T::ZERO; m.len()];
                    &zeros
                }
            };
            let w = params.get_mut(i).data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *w -= step * *m / ((*v * v_corr).sqrt() + eps);
            }
        }
        Ok(())
    }
}
