use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Option<Vec<f32>>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub frozen: bool,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        Self {
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            frozen: false,
        }
    }
}

/// Named parameter tensors in a stable insertion order, plus Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    entries: IndexMap<String, ParamEntry>,
    pub step: u64,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, ParamEntry::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn entry_at(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Adds gradients from one backward pass into the grad buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (idx, g) in &grads.entries {
            let e = &mut self.entries[*idx];
            match &mut e.grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                slot => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// Sets the frozen flag on every entry whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (k, e) in self.entries.iter_mut() {
            if k.starts_with(prefix) {
                e.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for e in self.entries.values_mut() {
            e.m.iter_mut().for_each(|v| *v = 0.0);
            e.v.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid Adam configuration {self:?}")))
        }
    }
}

/// One bias-corrected Adam update of every non-frozen entry. Weight decay
/// enters as an additive `wd·w` gradient term.
pub fn adam_step(params: &mut ModelParams, config: &AdamConfig) -> Result<()> {
    config.validate()?;
    if let Some((name, _)) = params
        .entries
        .iter()
        .find(|(_, e)| !e.frozen && e.grad.is_none())
    {
        return Err(Error::State(format!("parameter {name} has no gradient")));
    }
    params.step += 1;
    let t = params.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for e in params.entries.values_mut().filter(|e| !e.frozen) {
        let grad = e.grad.as_ref().expect("checked above");
        for (((w, &g), m), v) in e
            .value
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(e.m.iter_mut())
            .zip(e.v.iter_mut())
        {
            let g = g as f64 + config.weight_decay * *w as f64;
            let mn = b1 * *m as f64 + (1.0 - b1) * g;
            let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = config.learning_rate * (mn / bc1) / ((vn / bc2).sqrt() + config.epsilon);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Zero-mean Gaussian kernel with variance `2 / (kh·kw·cin)`.
pub fn init_msra(shape: &[usize], rng: &mut CounterRng) -> Result<Tensor> {
    let fan_in: usize = match shape {
        [] => 0,
        [_] => shape[0],
        _ => shape[..shape.len() - 1].iter().product(),
    };
    if fan_in == 0 {
        return Err(Error::Shape(format!("init_msra: zero fan-in for {shape:?}")));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.gaussian() * std) as f32).collect();
    Tensor::new(shape.to_vec(), data)
}
