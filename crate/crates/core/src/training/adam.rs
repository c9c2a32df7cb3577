use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::{GradientReport, ParameterStore, Tensor};

/// Adam moments for every parameter seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        OptimizerState {
            beta1,
            beta2,
            eps,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

fn locate(stores: &[&mut ParameterStore], name: &str) -> Result<usize> {
    stores
        .iter()
        .position(|s| s.contains(name))
        .ok_or_else(|| Error::UnknownParam(name.to_string()))
}

/// One bias-corrected Adam update of the trainable entries in `stores`.
/// The gradient set must match the trainable set exactly; nothing is written
/// unless every check passes.
pub fn adam_step(state: &mut OptimizerState, stores: &mut [&mut ParameterStore], grads: &GradientReport, lr: f64) -> Result<()> {
    let mut targets = Vec::with_capacity(grads.grads.len());
    for (name, g) in &grads.grads {
        let si = locate(stores, name)?;
        let e = stores[si].entry(name)?;
        if !e.trainable {
            return Err(Error::Frozen(format!("gradient supplied for frozen `{name}`")));
        }
        if e.value.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("`{name}` is {:?}, gradient {:?}", e.value.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        targets.push(si);
    }
    for s in stores.iter() {
        if let Some((name, _)) = s.iter().find(|(n, e)| e.trainable && !grads.grads.contains_key(*n)) {
            return Err(Error::Config(format!("no gradient for trainable `{name}`")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((name, g), si) in grads.grads.iter().zip(targets) {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let p = stores[si].get_mut(name)?;
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
