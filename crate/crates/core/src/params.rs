//! Named parameter tensors and the Adam update used for every training loop.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use spkguard_autograd::{Gradients, Graph, Tensor, Var};

use crate::error::{input_err, Result};
use crate::rng::Rng;

/// Parameters keyed by name; iteration order is the sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

/// Graph handles of a [`ParamSet`] bound into one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }

    /// Collects the gradient of every bound parameter from one backward pass.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
            .collect()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| input_err(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| input_err(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Adds every tensor to `g`; names starting with `frozen.` are always constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable && !name.starts_with("frozen.") {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Gaussian init with standard deviation `std`.
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }
}

/// Sums per-sample gradient maps in order, then scales by `1 / n`.
pub fn average_grads(per_sample: Vec<BTreeMap<String, Tensor>>) -> BTreeMap<String, Tensor> {
    let n = per_sample.len().max(1) as f64;
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for grads in per_sample {
        for (name, g) in grads {
            shapes.entry(name.clone()).or_insert_with(|| g.shape().to_vec());
            let slot = acc.entry(name).or_insert_with(|| vec![0.0; g.numel()]);
            for (a, b) in slot.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    acc.into_iter()
        .map(|(name, v)| {
            let shape = shapes.remove(&name).expect("shape recorded");
            let t = Tensor::new(shape, v.into_iter().map(|x| x / n).collect()).expect("shape matches");
            (name, t)
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != g.numel() {
                return Err(input_err(format!("gradient shape mismatch for `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `end + (start - end) * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_lr(start: f64, end: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return start;
    }
    let frac = (t.min(total)) as f64 / total as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let mut g = Graph::new();
            let b = p.bind(&mut g, true);
            let sq = g.square(b.var("w")).unwrap();
            let l = g.sum(sq).unwrap();
            let mut grads = g.backward(l).unwrap();
            let grads = b.collect(&mut grads);
            opt.update(&mut p, &grads, 0.01).unwrap();
        }
        assert!(p.get("w").unwrap().max_abs() < 1e-2);
    }

    #[test]
    fn frozen_params_are_constants() {
        let mut p = ParamSet::new();
        p.insert("frozen.mean", Tensor::vector(vec![1.0]));
        p.insert("w", Tensor::vector(vec![1.0]));
        let mut g = Graph::new();
        let b = p.bind(&mut g, true);
        assert!(!g.requires_grad(b.var("frozen.mean")));
        assert!(g.requires_grad(b.var("w")));
    }

    #[test]
    fn average_is_ordered_mean() {
        let mk = |v: f64| {
            let mut m = BTreeMap::new();
            m.insert("a".to_string(), Tensor::vector(vec![v, 2.0 * v]));
            m
        };
        let avg = average_grads(vec![mk(1.0), mk(3.0)]);
        assert_eq!(avg["a"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn cosine_lr_endpoints() {
        assert_eq!(cosine_lr(1e-3, 1e-5, 0, 10), 1e-3);
        assert!((cosine_lr(1e-3, 1e-5, 10, 10) - 1e-5).abs() < 1e-18);
    }
}
