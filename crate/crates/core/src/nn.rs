//! Named parameters, layer building blocks, initialization and Adam.

use std::collections::HashMap;
use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub type ParamId = usize;

#[derive(Clone, Debug, Default)]
pub struct ParamStore<R: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
    index: HashMap<String, ParamId>,
}

/// Serialized form of one parameter tensor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<R>> {
        self.id(name).map(|id| &self.tensors[id])
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, t: Tensor<R>) -> Result<()> {
        if t.shape() != self.tensors[id].shape() {
            return Err(Error::shape("set_param", self.tensors[id].shape(), t.shape()));
        }
        self.tensors[id] = t;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, t: Tensor<R>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        self.set(id, t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn data_mut(&mut self, id: ParamId) -> &mut [R] {
        self.tensors[id].data_mut()
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<R>, out: &mut Bound) -> Result<()> {
        out.vars.clear();
        for t in &self.tensors {
            out.vars.push(tape.param(t)?);
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn export(&self) -> Vec<NamedTensor> {
        self.iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }

    /// Overwrites every parameter from `saved`, which must name exactly this set.
    pub fn import(&mut self, saved: &[NamedTensor]) -> Result<()> {
        if saved.len() != self.len() {
            return Err(Error::Format(format!("checkpoint has {} parameters, model has {}", saved.len(), self.len())));
        }
        for nt in saved {
            let t = Tensor::new(&nt.shape, nt.data.iter().map(|&v| R::lit(v as f64)).collect())?;
            self.set_by_name(&nt.name, t)?;
        }
        Ok(())
    }
}

/// Tape handles of a [`ParamStore`] bound for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new() -> Self {
        Bound::default()
    }

    /// Handles already on a tape, in parameter-id order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id]
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on `±sqrt(6 / fan_in)`, the usual choice ahead of a relu.
    pub fn kaiming<R: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<R> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| R::lit(self.rng.random_range(-bound..bound)))
    }

    pub fn normal<R: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<R> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| R::lit(dist.sample(&mut self.rng)))
    }
}

/// Convolution with square (2D) or cubic (3D) odd kernels and same padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub rank: usize,
    pub kernel: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        init: &mut Init,
        name: &str,
        rank: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        if !matches!(rank, 2 | 3) || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: rank {rank}, kernel {kernel}")));
        }
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(kernel, rank));
        let fan_in = cin * kernel.pow(rank as u32);
        let w = store.add(format!("{name}.w"), init.kaiming(&shape, fan_in))?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Conv { w, b, rank, kernel })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        let pad = self.kernel / 2;
        let b = self.b.map(|b| p[b]);
        match self.rank {
            2 => tape.conv2d(x, p[self.w], b, 1, pad),
            _ => tape.conv3d(x, p[self.w], b, 1, pad),
        }
    }

    pub fn channels<R: Real>(&self, store: &ParamStore<R>) -> (usize, usize) {
        let s = store.get(self.w).shape();
        (s[1], s[0])
    }
}

/// `y = x·W + b` for row vectors stacked in `x: n×in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Real>(store: &mut ParamStore<R>, init: &mut Init, name: &str, din: usize, dout: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init.kaiming(&[din, dout], din))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]))?;
        Ok(Linear { w, b })
    }

    /// A linear map whose weight starts at zero, so its output starts at zero.
    pub fn zeros<R: Real>(store: &mut ParamStore<R>, name: &str, din: usize, dout: usize) -> Result<Self> {
        let w = store.add(format!("{name}.w"), Tensor::zeros(&[din, dout]))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[dout]))?;
        Ok(Linear { w, b })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add_row_bias(y, p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], R::one()))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gain], p[self.bias], R::lit(Self::EPS))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<R> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new<S: Real>(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros = || store.tensors.iter().map(|t| vec![R::zero(); t.numel()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from per-parameter gradients.
    pub fn update(&mut self, store: &mut ParamStore<R>, grads: &[Vec<R>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let (lr, eps) = (R::lit(self.lr), R::lit(self.eps));
        let (c1, c2) = (R::lit(c1), R::lit(c2));
        for (id, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let w = store.data_mut(id);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (R::one() - b1) * g[i];
                v[i] = b2 * v[i] + (R::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
