use super::DiffError;

/// Adam optimizer state with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Zero moments with the usual defaults: beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of every coordinate.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), DiffError> {
        self.update_masked(params, grads, None)
    }

    /// One update; coordinates where `mask` is false are left untouched and
    /// keep zero moments.
    pub fn update_masked(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        mask: Option<&[bool]>,
    ) -> Result<(), DiffError> {
        let n = self.m.len();
        for (what, got) in [("params", params.len()), ("grads", grads.len())] {
            if got != n {
                return Err(DiffError::Length {
                    what,
                    got,
                    expected: n,
                });
            }
        }
        if let Some(mask) = mask {
            if mask.len() != n {
                return Err(DiffError::Length {
                    what: "mask",
                    got: mask.len(),
                    expected: n,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..n {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::update`].
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
) -> Result<(), DiffError> {
    state.update(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5, -1.0];
        let mut s = AdamState::new(2, 0.1);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_learning_rate() {
        // m_hat = 1, v_hat = 1: update = -lr / (1 + 1e-8)
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 0.001);
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((p[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn length_mismatch() {
        let mut s = AdamState::new(2, 0.1);
        assert!(adam_step(&mut [0.0], &[0.0, 0.0], &mut s).is_err());
        assert!(adam_step(&mut [0.0, 0.0], &[0.0], &mut s).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn masked_coordinates_are_bit_identical() {
        let mut p = vec![0.1, 0.2, 0.3];
        let mut s = AdamState::new(3, 0.01);
        for _ in 0..5 {
            s.update_masked(&mut p, &[1.0, 1.0, 1.0], Some(&[true, false, true]))
                .unwrap();
        }
        assert_eq!(p[1].to_bits(), 0.2f64.to_bits());
        assert!(p[0] < 0.1);
    }
}
