//! First-order optimizers over a [`ParamStore`].

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball momentum.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one store. Gradients are clipped to a global L2
/// norm before the update when `clip_norm` is set.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub clip_norm: Option<f64>,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u64,
}

/// Global L2 norm over all present gradients.
pub fn grad_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, clip_norm: Option<f64>, store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0f32; t.data().len()]).collect::<Vec<_>>();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            clip_norm,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update. Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let norm = grad_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        } as f32;
        self.steps += 1;
        let lr = lr as f32;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let w = store.get_mut(id).data_mut();
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let mu = momentum as f32;
                    for ((w, m), &g) in w.iter_mut().zip(m.iter_mut()).zip(g.data()) {
                        *m = mu * *m + g * scale;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[i];
                    let (b1, b2) = (beta1 as f32, beta2 as f32);
                    let c1 = 1.0 - beta1.powi(self.steps as i32);
                    let c2 = 1.0 - beta2.powi(self.steps as i32);
                    let step = (lr as f64 * c2.sqrt() / c1) as f32;
                    for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                        let g = g * scale;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= step * *m / (v.sqrt() + eps as f32);
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn quadratic_run(kind: OptimizerKind, lr: f64) -> f32 {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full(Shape::new(1, 1, 1, 2), 3.0));
        let mut opt = Optimizer::new(kind, Some(1.0), &store);
        for _ in 0..500 {
            // d/dw of ½‖w‖²
            let g = store.get(id).clone();
            opt.step(&mut store, &[Some(g)], lr).unwrap();
        }
        store.get(id).data().iter().map(|v| v.abs()).fold(0.0, f32::max)
    }

    #[test]
    fn both_optimizers_minimise_a_quadratic() {
        assert!(quadratic_run(OptimizerKind::sgd(), 0.05) < 1e-3);
        assert!(quadratic_run(OptimizerKind::adam(), 0.05) < 1e-2);
    }

    #[test]
    fn clipping_bounds_the_first_step() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let mut opt = Optimizer::new(OptimizerKind::sgd(), Some(1.0), &store);
        let norm = opt.step(&mut store, &[Some(Tensor::full(Shape::new(1, 1, 1, 1), 100.0))], 0.1).unwrap();
        assert_eq!(norm, 100.0);
        assert!((store.get(id).item() + 0.1).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let mut opt = Optimizer::new(OptimizerKind::sgd(), None, &store);
        let bad = Tensor::full(Shape::new(1, 1, 1, 1), f32::NAN);
        assert!(opt.step(&mut store, &[Some(bad)], 0.1).is_err());
    }
}
