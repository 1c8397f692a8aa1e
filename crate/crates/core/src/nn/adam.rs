//! Adam optimizer with bias correction and checkpointable state.

use super::{fl, Param, Real};
use ndarray::ArrayD;

/// Adam with the standard bias-corrected update. Moment buffers are keyed by
/// parameter name so optimizer state survives checkpoint round-trips even if
/// visitation order were to change.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    /// First/second moment per parameter, keyed by name.
    pub moments: Vec<(String, ArrayD<F>, ArrayD<F>)>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Starts one optimization step: bumps the step counter that drives bias
    /// correction. Follow with one [`Adam::apply`] per parameter, typically
    /// from inside a parameter visitor.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates a single parameter from its accumulated gradient and clears
    /// the gradient. Moment buffers are created on first sight of a name.
    pub fn apply(&mut self, name: &str, p: &mut Param<F>) {
        let t = self.step as i32;
        let b1 = fl::<F>(self.beta1);
        let b2 = fl::<F>(self.beta2);
        let one = F::one();
        let lr = fl::<F>(self.lr);
        let c1 = fl::<F>(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = fl::<F>(1.0 / (1.0 - self.beta2.powi(t)));
        let eps = fl::<F>(self.eps);
        let idx = match self.moments.iter().position(|(n, _, _)| n == name) {
            Some(i) => i,
            None => {
                self.moments.push((
                    name.to_string(),
                    ArrayD::zeros(p.v.shape()),
                    ArrayD::zeros(p.v.shape()),
                ));
                self.moments.len() - 1
            }
        };
        let (_, m, v) = &mut self.moments[idx];
        ndarray::Zip::from(m.view_mut())
            .and(v.view_mut())
            .and(p.v.view_mut())
            .and(p.g.view())
            .for_each(|m, v, w, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - lr * (*m * c1) / ((*v * c2).sqrt() + eps);
            });
        p.zero_grad();
    }

    /// One full update over a slice of `(name, param)` pairs.
    pub fn update(&mut self, params: &mut [(String, &mut Param<F>)]) {
        self.begin_step();
        for (name, p) in params.iter_mut() {
            self.apply(name, p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar oracle: run Adam by hand on a single weight minimizing
    /// `f(w) = (w - 3)^2` and compare the trajectory elementwise.
    #[test]
    fn matches_scalar_reference_trajectory() {
        let mut p = Param::<f64>::zeros(&[1]);
        let mut opt = Adam::new(0.1);
        let mut w_ref = 0.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for t in 1..=50 {
            let g = 2.0 * (p.v[[0]] - 3.0);
            p.g[[0]] = g;
            let mut params = vec![("w".to_string(), &mut p)];
            opt.update(&mut params);

            let g_ref = 2.0 * (w_ref - 3.0);
            m = 0.9 * m + 0.1 * g_ref;
            v = 0.999 * v + 0.001 * g_ref * g_ref;
            let mh = m / (1.0 - 0.9_f64.powi(t));
            let vh = v / (1.0 - 0.999_f64.powi(t));
            w_ref -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!(
                (p.v[[0]] - w_ref).abs() < 1e-12,
                "step {t}: {} vs {w_ref}",
                p.v[[0]]
            );
        }
        // After 50 steps the weight has moved most of the way to the optimum.
        assert!((p.v[[0]] - 3.0).abs() < 1.0);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut p = Param::<f64>::zeros(&[4]);
        let target = [1.0, -2.0, 0.5, 3.0];
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            for i in 0..4 {
                p.g[[i]] = 2.0 * (p.v[[i]] - target[i]);
            }
            let mut params = vec![("p".to_string(), &mut p)];
            opt.update(&mut params);
        }
        for i in 0..4 {
            assert!((p.v[[i]] - target[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn gradients_cleared_after_update() {
        let mut p = Param::<f64>::zeros(&[2]);
        p.g.fill(1.0);
        let mut opt = Adam::new(0.01);
        let mut params = vec![("p".to_string(), &mut p)];
        opt.update(&mut params);
        assert!(p.g.iter().all(|&g| g == 0.0));
    }
}
