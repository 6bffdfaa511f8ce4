//! Named parameters with Adam state.

use std::collections::HashMap;

use crate::error::{shape_err, AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// First moment estimate.
    pub m: Tensor,
    /// Second moment estimate.
    pub v: Tensor,
    pub step: u64,
}

impl Param {
    fn new(name: String, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self { name, grad: zeros.clone(), m: zeros.clone(), v: zeros, value, step: 0 }
    }
}

/// Parameter tensors in registration order, keyed by unique name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Graph variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Binding from caller-made variables, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    /// Restores a parameter together with its optimizer state.
    pub fn insert_with_state(&mut self, mut param: Param) -> Result<ParamId> {
        if param.m.shape() != param.value.shape() || param.v.shape() != param.value.shape() {
            return Err(shape_err("param store", format!("moments of `{}` not shaped like value", param.name)));
        }
        param.grad = Tensor::zeros(param.value.shape());
        if self.index.contains_key(&param.name) {
            return Err(AutodiffError::DuplicateParam(param.name));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().map(ParamId).ok_or_else(|| AutodiffError::UnknownParam(name.into()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on the tape as a tracked leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| graph.leaf(p.value.clone(), true)).collect())
    }

    /// Places every parameter on the tape as an untracked constant, for
    /// inference.
    pub fn bind_constants(&self, graph: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| graph.constant(p.value.clone())).collect())
    }

    /// Adds the graph gradients of bound parameters into the stored grads.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &Bound) {
        for (p, &var) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = graph.grad(var) {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// One bias-corrected Adam update of every parameter, then zeroes grads.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) {
        for p in &mut self.params {
            p.step += 1;
            let c1 = 1.0 - cfg.beta1.powi(p.step as i32);
            let c2 = 1.0 - cfg.beta2.powi(p.step as i32);
            let (w, g, m, v) = (p.value.data_mut(), p.grad.data(), p.m.data_mut(), p.v.data_mut());
            for i in 0..w.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            p.grad.fill(0.0);
        }
    }
}
