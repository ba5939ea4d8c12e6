//! Minimal reverse-mode building blocks for the auto-encoder.
//!
//! Parameters live in a [`ParamSet`] keyed by hierarchical names
//! (`encoder/ru/relu1_1/fc1/W`); gradients and optimizer moments are
//! `ParamSet`s with the same keys. Layers are stateless descriptors that read
//! their weights by name, return a cache from `forward`, and accumulate into a
//! gradient set in `backward`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::container::{Container, Precision};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Normal { std: f64 },
    Uniform { bound: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn count_params(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    arrays: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every parameter in `specs` order from `rng`.
    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut out = Self::new();
        for spec in specs {
            let array = match spec.init {
                Init::Zeros => ArrayD::zeros(spec.shape.clone()),
                Init::Normal { std } => {
                    let d = Normal::new(0.0, std).expect("finite std");
                    ArrayD::from_shape_simple_fn(spec.shape.clone(), || d.sample(rng))
                }
                Init::Uniform { bound } => {
                    let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                    ArrayD::from_shape_simple_fn(spec.shape.clone(), || d.sample(rng))
                }
            };
            out.arrays.insert(spec.name.clone(), array);
        }
        out
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        let arrays = specs
            .iter()
            .map(|s| (s.name.clone(), ArrayD::zeros(s.shape.clone())))
            .collect();
        Self { arrays }
    }

    pub fn zeros_like(&self) -> Self {
        let arrays = self
            .arrays
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect();
        Self { arrays }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not registered"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("parameter '{name}' is not registered"))
    }

    pub fn mat(&self, name: &str) -> ArrayView2<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("parameter '{name}' is not a matrix"))
    }

    pub fn vec(&self, name: &str) -> ArrayView1<'_, f64> {
        self.get(name)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("parameter '{name}' is not a vector"))
    }

    /// Adds `delta` into the named array.
    pub fn accumulate<D: ndarray::Dimension>(&mut self, name: &str, delta: &ndarray::Array<f64, D>) {
        let target = self.get_mut(name);
        let delta = delta.view().into_dyn();
        *target += &delta;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn write_into(&self, container: &mut Container, prefix: &str) {
        for (k, v) in &self.arrays {
            container.insert(format!("{prefix}{k}"), Precision::F64, v.clone());
        }
    }

    /// Reads every array named in `specs` from `container` under `prefix`,
    /// checking shapes.
    pub fn read_from(container: &Container, prefix: &str, specs: &[ParamSpec]) -> Result<Self> {
        let mut out = Self::new();
        for spec in specs {
            let name = format!("{prefix}{}", spec.name);
            let a = container.get(&name)?;
            if a.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "'{name}' has shape {:?}, expected {:?}",
                    a.shape(),
                    spec.shape
                )));
            }
            out.arrays.insert(spec.name.clone(), a.clone());
        }
        Ok(out)
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y = x Wᵀ + b` for a batch of row vectors; `W` is `(out, in)`.
pub fn affine(p: &ParamSet, prefix: &str, x: ArrayView2<f64>) -> Array2<f64> {
    let w = p.mat(&format!("{prefix}/W"));
    let b = p.vec(&format!("{prefix}/b"));
    x.dot(&w.t()) + &b
}

/// Accumulates `dW`, `db` and returns `dx`.
pub fn affine_backward(
    p: &ParamSet,
    grads: &mut ParamSet,
    prefix: &str,
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) -> Array2<f64> {
    let wname = format!("{prefix}/W");
    let w = p.mat(&wname);
    grads.accumulate(&wname, &dy.t().dot(&x));
    grads.accumulate(&format!("{prefix}/b"), &dy.sum_axis(Axis(0)));
    dy.dot(&w)
}

pub fn affine_specs(prefix: &str, fan_in: usize, fan_out: usize) -> Vec<ParamSpec> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    vec![
        ParamSpec::new(format!("{prefix}/W"), &[fan_out, fan_in], Init::Uniform { bound }),
        ParamSpec::new(format!("{prefix}/b"), &[fan_out], Init::Zeros),
    ]
}

/// A chain of affine layers, each optionally preceded by a rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    /// `widths[0]` is the input width; layer `i` maps `widths[i] -> widths[i + 1]`.
    pub widths: Vec<usize>,
    pub pre_relu: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Value entering each layer before its optional rectifier.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>, pre_relu: Vec<bool>) -> Self {
        assert_eq!(widths.len(), pre_relu.len() + 1, "one flag per layer");
        Self {
            prefix: prefix.into(),
            widths,
            pre_relu,
        }
    }

    fn layer(&self, i: usize) -> String {
        format!("{}/fc{}", self.prefix, i + 1)
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        (0..self.pre_relu.len())
            .flat_map(|i| affine_specs(&self.layer(i), self.widths[i], self.widths[i + 1]))
            .collect()
    }

    pub fn forward(&self, p: &ParamSet, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut pre = Vec::with_capacity(self.pre_relu.len());
        let mut a = x.to_owned();
        for (i, &r) in self.pre_relu.iter().enumerate() {
            let input = if r { relu(&a) } else { a.clone() };
            pre.push(a);
            a = affine(p, &self.layer(i), input.view());
        }
        (a, MlpCache { pre })
    }

    pub fn backward(
        &self,
        p: &ParamSet,
        cache: &MlpCache,
        dy: ArrayView2<f64>,
        grads: &mut ParamSet,
    ) -> Array2<f64> {
        let mut d = dy.to_owned();
        for i in (0..self.pre_relu.len()).rev() {
            let a = &cache.pre[i];
            let input = if self.pre_relu[i] { relu(a) } else { a.clone() };
            let mut dx = affine_backward(p, grads, &self.layer(i), input.view(), d.view());
            if self.pre_relu[i] {
                ndarray::Zip::from(&mut dx).and(a).for_each(|g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            d = dx;
        }
        d
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            let m = self.m.get_mut(name);
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v.get_mut(name);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = self.m.get(name);
            let v = self.v.get(name);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

pub fn concat_cols(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a, b]).expect("same batch size")
}

pub fn row(v: &Array1<f64>) -> Array2<f64> {
    v.view().insert_axis(Axis(0)).to_owned()
}
