use std::collections::BTreeMap;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::tensor::{Float, Tensor};

/// Gradients keyed by parameter name.
pub type Gradients<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Float = f32> {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> OptimState<T> {
    pub fn new(config: AdamConfig) -> Self {
        OptimState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// Read the gradient of every trainable parameter of `model` off `tape`.
/// A parameter that took no part in the recorded graph gets a zero
/// gradient.
pub fn collect_grads<T: Float>(model: &dyn Module<T>, tape: &Tape<T>) -> Gradients<T> {
    let mut grads = Gradients::new();
    model.visit("", &mut |name, t, kind| {
        if kind == ParamKind::Trainable {
            let g = tape
                .param_grad(t)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            grads.insert(name.to_string(), g);
        }
    });
    grads
}

/// One bias-corrected Adam update of every trainable parameter. Consumes
/// the gradients: `grads` is empty afterwards.
pub fn adam_step<T: Float>(
    model: &mut dyn Module<T>,
    grads: &mut Gradients<T>,
    state: &mut OptimState<T>,
    lr: f64,
) -> Result<()> {
    let mut missing = None;
    model.visit("", &mut |name, t, kind| {
        if kind == ParamKind::Trainable && missing.is_none() {
            match grads.get(name) {
                Some(g) if g.shape() == t.shape() => {}
                Some(g) => {
                    missing = Some(Error::Shape {
                        op: "adam_step",
                        lhs: t.shape(),
                        rhs: g.shape(),
                    })
                }
                None => {
                    missing = Some(Error::contract(format!("no gradient for parameter {name}")))
                }
            }
        }
    });
    if let Some(e) = missing {
        return Err(e);
    }

    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (first, second) = (&mut state.first, &mut state.second);
    model.visit_mut("", &mut |name, p, kind| {
        if kind != ParamKind::Trainable {
            return;
        }
        let g = &grads[name];
        let m = first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let (m, v) = (m.make_mut(), v.make_mut());
        for (((w, &gi), mi), vi) in p.make_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gi = gi.as_f64();
            let mn = beta1 * mi.as_f64() + (1.0 - beta1) * gi;
            let vn = beta2 * vi.as_f64() + (1.0 - beta2) * gi * gi;
            *mi = T::lit(mn);
            *vi = T::lit(vn);
            let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
            *w = T::lit(w.as_f64() - update);
        }
    });
    grads.clear();
    Ok(())
}
