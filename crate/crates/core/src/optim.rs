//! Adam optimizer over a list of flat parameter buffers.

use num_traits::Float;

#[derive(Clone, Debug)]
pub struct Adam<F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    step: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(shapes: &[usize], lr: F, betas: (F, F)) -> Self {
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: F::from(1e-8).unwrap(),
            step: 0,
            m: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    /// Applies one bias-corrected update; `params[i]` and `grads[i]` must match
    /// the shapes given at construction.
    pub fn update<'a, P>(&mut self, params: P, grads: &[Vec<F>])
    where
        P: IntoIterator<Item = &'a mut Vec<F>>,
        F: 'a,
    {
        self.step += 1;
        let one = F::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        let step_size = self.lr / c1;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (one - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (one - self.beta2) * gi * gi;
                p[i] = p[i] - step_size * m[i] / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}
