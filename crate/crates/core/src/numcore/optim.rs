use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

/// What a parameter is, which decides weight decay and learning-rate group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Neural-network weights and biases (weight decay applies).
    Network,
    /// Variational mean.
    Mean,
    /// Variational log-variance or other scale parameter.
    Scale,
    /// Not trained.
    Frozen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Named parameters, ordered by name so every traversal is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Graph handles for a [`ParamStore`] bound to one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

pub type GradMap = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) {
        self.params.insert(name.into(), Param { tensor, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.params.get(name).map(|p| p.kind)
    }

    pub fn set_kind(&mut self, name: &str, kind: ParamKind) {
        if let Some(p) = self.params.get_mut(name) {
            p.kind = kind;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    /// Put every parameter on `g`; frozen ones enter as constants.
    pub fn bind(&self, g: &Graph) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| {
                let t = p.tensor.clone().as_matrix();
                let v = if p.kind == ParamKind::Frozen {
                    g.constant(t)
                } else {
                    g.param(t)
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("parameter {name} not bound")))
    }

    /// Gradients for every trainable parameter; zero where the graph did not
    /// reach a parameter.
    pub fn collect(&self, store: &ParamStore, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .filter(|(name, _)| store.kind(name) != Some(ParamKind::Frozen))
            .map(|(name, &v)| {
                let shape = store.get(name).map(|t| t.shape().to_vec()).unwrap_or_default();
                let g = match grads.get(v) {
                    Some(t) => t.clone().reshape(&shape).expect("grad shape matches param"),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradMap, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || max_norm.is_nan() {
        return Err(Error::Config(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    Ok(norm)
}

fn check_finite(grads: &GradMap) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for {name}")));
        }
    }
    Ok(())
}

fn moment_mismatch(name: &str) -> Error {
    Error::shape("optimizer", format!("state for {name} does not match parameter"))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay on [`ParamKind::Network`] parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        check_finite(grads)?;
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.params.get_mut(name) else {
                return Err(Error::Data(format!("gradient for unknown parameter {name}")));
            };
            if p.kind == ParamKind::Frozen {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            if m.len() != g.len() || v.len() != g.len() || p.tensor.len() != g.len() {
                return Err(moment_mismatch(name));
            }
            let decay = if p.kind == ParamKind::Network {
                1.0 - c.lr * c.weight_decay
            } else {
                1.0
            };
            let data = p.tensor.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            let (b1, b2) = (c.beta1, c.beta2);
            let (inv1, inv2) = (1.0 / bc1, 1.0 / bc2);
            for (((x, m), v), &gi) in data.iter_mut().zip(md).zip(vd).zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                *x = *x * decay - c.lr * (*m * inv1) / ((*v * inv2).sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RmsPropConfig {
    /// Learning rate for [`ParamKind::Mean`] parameters.
    pub lr_mean: f64,
    /// Learning rate for [`ParamKind::Scale`] parameters.
    pub lr_scale: f64,
    /// Learning rate for [`ParamKind::Network`] parameters.
    pub lr_network: f64,
    pub decay: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr_mean: 0.05,
            lr_scale: 0.005,
            lr_network: 1e-3,
            decay: 0.9,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    pub step: u64,
    pub sq: BTreeMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Self {
        RmsProp {
            config,
            step: 0,
            sq: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        check_finite(grads)?;
        self.step += 1;
        let c = &self.config;
        for (name, g) in grads {
            let Some(p) = params.params.get_mut(name) else {
                return Err(Error::Data(format!("gradient for unknown parameter {name}")));
            };
            let lr = match p.kind {
                ParamKind::Frozen => continue,
                ParamKind::Mean => c.lr_mean,
                ParamKind::Scale => c.lr_scale,
                ParamKind::Network => c.lr_network,
            };
            let s = self
                .sq
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            if s.len() != g.len() || p.tensor.len() != g.len() {
                return Err(moment_mismatch(name));
            }
            let decay = if p.kind == ParamKind::Network {
                1.0 - lr * c.weight_decay
            } else {
                1.0
            };
            let data = p.tensor.data_mut();
            let sd = s.data_mut();
            for ((x, s), &gi) in data.iter_mut().zip(sd).zip(g.data()) {
                *s = c.decay * *s + (1.0 - c.decay) * gi * gi;
                *x = *x * decay - lr * gi / (s.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
