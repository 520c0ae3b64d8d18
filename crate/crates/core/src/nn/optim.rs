//! Momentum-free adaptive optimizer (RMSProp-style) with a fixed step
//! size. State is kept per parameter tensor in visitation order, so the
//! same optimizer instance must always be applied to the same model.

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct RmsProp<F: Scalar> {
    pub lr: F,
    pub rho: F,
    pub eps: F,
    state: Vec<Vec<F>>,
}

impl<F: Scalar> RmsProp<F> {
    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr: F::from_real(lr),
            rho: F::from_real(0.99),
            eps: F::from_real(1e-8),
            state: Vec::new(),
        }
    }

    /// Apply one update to the `i`-th parameter tensor.
    pub fn update(&mut self, i: usize, value: &mut [F], grad: &[F]) {
        while self.state.len() <= i {
            self.state.push(Vec::new());
        }
        let v = &mut self.state[i];
        if v.len() != value.len() {
            v.resize(value.len(), F::zero());
        }
        let one_rho = F::one() - self.rho;
        for ((p, g), vi) in value.iter_mut().zip(grad.iter()).zip(v.iter_mut()) {
            *vi = self.rho * *vi + one_rho * *g * *g;
            *p -= self.lr * *g / (vi.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // f(x) = x^2, gradient 2x
        let mut opt = RmsProp::<f64>::new(0.05);
        let mut x = vec![3.0];
        for _ in 0..200 {
            let g = vec![2.0 * x[0]];
            opt.update(0, &mut x, &g);
        }
        assert!(x[0].abs() < 0.1, "x = {}", x[0]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut opt = RmsProp::<f64>::new(0.0);
        let mut x = vec![1.25, -2.5];
        opt.update(0, &mut x, &[0.3, 0.7]);
        assert_eq!(x, vec![1.25, -2.5]);
    }
}
