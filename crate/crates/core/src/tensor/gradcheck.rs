//! Central finite-difference verification of autodiff gradients.
//!
//! Straight-through rounding has no derivative to compare against, so checks
//! run with STE nodes switched to the identity in both passes.

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::Binding;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckInput {
    /// Step is `step_scale · (1 + |θ|)`.
    pub step_scale: f64,
    /// Refuse to run above this many scalar parameters.
    pub max_params: usize,
}

impl Default for GradCheckInput {
    fn default() -> Self {
        GradCheckInput {
            step_scale: 1e-3,
            max_params: 10_000,
        }
    }
}

/// Relative error between two gradient estimates.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8)
}

fn eval<F>(store: &ParamStore<f64>, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &mut Binding<f64>) -> Result<Var>,
{
    let mut g = Graph::inference();
    g.set_ste_identity(true);
    let mut p = Binding::frozen(store);
    let loss = build(&mut g, &mut p)?;
    Ok(g.value(loss).item())
}

/// Maximum relative error over every scalar parameter of `store` between the
/// autodiff gradient and a fourth-order central difference of the scalar
/// returned by `build`. The step shrinks when the `h` and `2h` spans disagree,
/// which happens when a kink lies inside them.
pub fn grad_check<F>(store: &ParamStore<f64>, opts: GradCheckInput, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &mut Binding<f64>) -> Result<Var>,
{
    if store.numel() > opts.max_params {
        return Err(Error::Config(format!(
            "grad_check limited to {} parameters, got {}",
            opts.max_params,
            store.numel()
        )));
    }
    let grads = {
        let mut g = Graph::new();
        g.set_ste_identity(true);
        let mut p = Binding::new(store, true);
        let loss = build(&mut g, &mut p)?;
        g.backward(loss)?;
        p.grads(&g)
    };
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let n = store.get(id).data().len();
        for i in 0..n {
            let theta = store.get(id).data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = theta + offset;
                eval(&work, &build)
            };
            let mut fd = 0.0;
            for shrink in [1.0, 0.1, 0.01] {
                let h = shrink * opts.step_scale * (1.0 + theta.abs());
                let d1 = (at(h)? - at(-h)?) / (2.0 * h);
                let d2 = (at(2.0 * h)? - at(-2.0 * h)?) / (4.0 * h);
                fd = (4.0 * d1 - d2) / 3.0;
                // the two spans agree unless one straddles a kink
                if (d1 - d2).abs() <= 1e-5 * d1.abs().max(d2.abs()) + 1e-10 {
                    break;
                }
            }
            work.get_mut(id).data_mut()[i] = theta;
            let ad = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(ad, fd));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Init};
    use crate::tensor::{Shape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_conv_layer() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let stride = 1 + (seed as usize % 2);
            let conv = Conv2d::new(&mut store, &mut rng, "c", 3, 4, 3, stride, 1, Init::KaimingUniform);
            for id in store.ids().collect::<Vec<_>>() {
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            }
            let x = Tensor::from_fn(Shape::new(1, 3, 6, 6), |_| rng.gen_range(-1.0..1.0));
            let err = grad_check(&store, GradCheckInput::default(), |g, p| {
                let xv = g.constant(x.clone());
                let y = conv.forward(g, p, xv)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            })
            .unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn ste_nodes_are_skipped() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.3, 1.7, -2.2]).unwrap());
        let err = grad_check(&store, GradCheckInput::default(), |g, p| {
            let x = p.var(g, id);
            let r = g.ste_round(x)?;
            let sq = g.mul(r, r)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err <= 1e-6);
    }

    #[test]
    fn refuses_oversized_stores() {
        let mut store = ParamStore::<f64>::new();
        store.add("big", Tensor::zeros(Shape::new(1, 1, 101, 100)));
        let r = grad_check(&store, GradCheckInput::default(), |g, _| Ok(g.constant(Tensor::scalar(0.0))));
        assert!(r.is_err());
    }
}
