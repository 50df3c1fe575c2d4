//! Named parameter storage, initialization policy and the ADAM update.
//!
//! Parameters are declared as [`ParamSpec`]s in a fixed construction order;
//! initialization consumes the seeded stream in that exact order, so one
//! seed fully determines every weight byte.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use crate::rng::SeedRng;
use crate::scalar::Scalar;
use crate::tape::Value;

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[derive(Clone)]
pub struct ParamStore<F: Scalar> {
    specs: Vec<ParamSpec>,
    values: Vec<Value<F>>,
    adam_m: Vec<ArrayD<F>>,
    adam_v: Vec<ArrayD<F>>,
    pub adam_step: u64,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    /// Draw all parameters from a fresh stream seeded with `seed`.
    pub fn init(specs: Vec<ParamSpec>, seed: u64) -> Self {
        let mut rng = SeedRng::new(seed);
        Self::init_with_rng(specs, &mut rng)
    }

    pub fn init_with_rng(specs: Vec<ParamSpec>, rng: &mut SeedRng) -> Self {
        let mut values = Vec::with_capacity(specs.len());
        for spec in &specs {
            let n: usize = spec.shape.iter().product();
            let data: Vec<F> = match spec.init {
                Init::Xavier { fan_in, fan_out } => {
                    let a = xavier_bound(fan_in, fan_out);
                    (0..n)
                        .map(|_| F::from_f64(rng.uniform_in(-a, a)))
                        .collect()
                }
                Init::Zeros => vec![F::zero(); n],
                Init::Const(c) => vec![F::from_f64(c); n],
            };
            let arr = ArrayD::from_shape_vec(IxDyn(&spec.shape), data).unwrap();
            values.push(arr.into_shared());
        }
        Self::from_values(specs, values)
    }

    pub fn from_values(specs: Vec<ParamSpec>, values: Vec<Value<F>>) -> Self {
        assert_eq!(specs.len(), values.len());
        let adam_m = values
            .iter()
            .map(|v| ArrayD::zeros(v.raw_dim()))
            .collect::<Vec<_>>();
        let adam_v = adam_m.clone();
        let by_name = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        ParamStore {
            specs,
            values,
            adam_m,
            adam_v,
            adam_step: 0,
            by_name,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn name(&self, index: usize) -> &str {
        &self.specs[index].name
    }

    pub fn value(&self, index: usize) -> &Value<F> {
        &self.values[index]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn set_value(&mut self, index: usize, value: ArrayD<F>) {
        assert_eq!(value.shape(), self.values[index].shape());
        self.values[index] = value.into_shared();
    }

    pub fn adam_moments(&self, index: usize) -> (&ArrayD<F>, &ArrayD<F>) {
        (&self.adam_m[index], &self.adam_v[index])
    }

    pub fn set_adam_moments(&mut self, index: usize, m: ArrayD<F>, v: ArrayD<F>) {
        assert_eq!(m.shape(), self.values[index].shape());
        assert_eq!(v.shape(), self.values[index].shape());
        self.adam_m[index] = m;
        self.adam_v[index] = v;
    }

    /// One ADAM step over all parameters; `grads` is indexed by parameter
    /// and may hold `None` for parameters outside the current graph.
    pub fn adam_step(&mut self, grads: &[Option<ArrayD<F>>], lr: f64, hp: &AdamHyper) {
        assert_eq!(grads.len(), self.values.len());
        self.adam_step += 1;
        let t = self.adam_step as i32;
        let b1 = F::from_f64(hp.beta1);
        let b2 = F::from_f64(hp.beta2);
        let eps = F::from_f64(hp.eps);
        let lr = F::from_f64(lr);
        let bc1 = F::one() - b1.powi(t);
        let bc2 = F::one() - b2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let g = match grad {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.adam_m[i];
            let v = &mut self.adam_v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = b1 * *m + (F::one() - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = b2 * *v + (F::one() - b2) * g * g;
            });
            let value = ndarray::Zip::from(&*self.values[i])
                .and(&*m)
                .and(&*v)
                .map_collect(|&p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    p - lr * mhat / (vhat.sqrt() + eps)
                });
            self.values[i] = value.into_shared();
        }
    }

    /// L2 norm per parameter, for diagnostics when training diverges.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.specs
            .iter()
            .zip(&self.values)
            .map(|(s, v)| {
                let n: f64 = v.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt();
                (s.name.clone(), n)
            })
            .collect()
    }
}

/// ADAM hyperparameters (the conventional defaults; weight decay is 0).
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}
