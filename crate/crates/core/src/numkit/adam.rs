use serde::{Deserialize, Serialize};

use super::{Matrix, Parameters};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        Self {
            config,
            first: params.zero_like(),
            second: params.zero_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Zeroes both moments of the listed `(row, col)` entries of parameter `index`.
    pub fn reset_entries(&mut self, index: usize, entries: &[(usize, usize)]) {
        for &(r, c) in entries {
            self.first[index].set(r, c, 0.0);
            self.second[index].set(r, c, 0.0);
        }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads.iter()).zip(&self.first) {
            if !p.same_shape(g) || !p.same_shape(m) {
                return Err(Error::dim(format!(
                    "adam: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::update`] over a parameter bundle.
pub fn adam_step<P: Parameters + ?Sized>(params: &mut P, grads: &P, state: &mut AdamState) -> Result<()> {
    let mut p = params.params_mut();
    state.update(&mut p, &grads.params())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Matrix::from_rows(&[vec![1.5, -2.0]]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let g = vec![Matrix::zeros(1, 2)];
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn quadratic_descends_until_overshoot() {
        // Adam with momentum overshoots w = 0 on w^2 at lr 0.1 (around step 11), so the
        // loss is strictly decreasing only until the iterate first changes sign.
        let mut p = vec![Matrix::from_vec(1, 1, vec![1.0]).unwrap()];
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &p);
        let mut prev = 1.0;
        let mut crossed = false;
        let (mut m, mut v, mut w_ref) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=50 {
            let w = p[0].get(0, 0);
            let g = vec![Matrix::from_vec(1, 1, vec![2.0 * w]).unwrap()];
            adam_step(&mut p, &g, &mut st).unwrap();
            let w_new = p[0].get(0, 0);
            // scalar textbook Adam as an independent reference
            let gr = 2.0 * w_ref;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w_ref -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((w_new - w_ref).abs() < 1e-12);
            crossed |= w_new <= 0.0;
            let f = w_new * w_new;
            if !crossed {
                assert!(f < prev, "{f} !< {prev}");
            }
            prev = f;
        }
        assert!(crossed);
        assert!(prev < 1.0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![Matrix::from_rows(&[vec![0.3, 0.7], vec![-0.1, 0.2]]).unwrap()];
            let mut st = AdamState::new(AdamConfig::default(), &p);
            let g = vec![Matrix::from_rows(&[vec![0.01, -0.5], vec![3.0, 1e-7]]).unwrap()];
            for _ in 0..10 {
                adam_step(&mut p, &g, &mut st).unwrap();
            }
            (p, st)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        let bits = |m: &Vec<Matrix>| m[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(sa, sb);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Matrix::zeros(2, 2)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let g = vec![Matrix::zeros(1, 2)];
        assert!(matches!(adam_step(&mut p, &g, &mut st), Err(Error::Dimension(_))));
    }
}
