//! Minimal parameter store and layers.
//!
//! Parameters are created in a fixed order from a seeded ChaCha stream, so a
//! given (config, seed) pair always yields bit-identical weights.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PdfnetError, Result};
use crate::ops;

/// Named, ordered collection of trainable tensors.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place, keeping every layer that shares the `Var` in sync.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| PdfnetError::Config(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(PdfnetError::shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    fn insert(&mut self, name: String, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(PdfnetError::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }
}

/// Scoped view into a [`ParamStore`] that prefixes parameter names.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He-style normal with the given gain on `1/sqrt(fan_in)`.
    Normal { gain: f64 },
    Zeros,
    Const(f64),
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal { gain } => self.store.normal(n, gain / (fan_in.max(1) as f64).sqrt()),
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
        };
        let full = self.full_name(name);
        self.store.insert(full, data, shape)
    }
}

/// 2-D convolution with square kernel and optional bias.
#[derive(Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = pb.param("weight", &[out_ch, in_ch, kernel, kernel], fan_in, init)?;
        let bias = Some(pb.param("bias", &[out_ch], fan_in, Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::conv::conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => {
                let c = b.dims()[0];
                Ok(y.broadcast_add(&b.as_tensor().reshape((1, c, 1, 1))?)?)
            }
            None => Ok(y),
        }
    }
}

/// Dense projection over the last axis of a `B×L×C` sequence.
#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = pb.param("weight", &[out_dim, in_dim], in_dim, init)?;
        let bias = if bias {
            Some(pb.param("bias", &[out_dim], in_dim, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().t()?;
        let y = match x.dims() {
            [b, l, c] => x.reshape((b * l, *c))?.matmul(&w)?.reshape((*b, *l, self.out_dim()))?,
            _ => x.matmul(&w)?,
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}

/// Learnable-scale RMS normalization; `channel_axis` picks NCHW (dim 1) or token (last dim) layout.
#[derive(Clone)]
pub struct RmsNorm {
    scale: Var,
    eps: f64,
    channel_axis: bool,
}

pub const RMS_EPS: f64 = 1e-6;

impl RmsNorm {
    pub fn tokens(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        let scale = pb.param("scale", &[dim], dim, Init::Const(1.0))?;
        Ok(Self {
            scale,
            eps: RMS_EPS,
            channel_axis: false,
        })
    }

    pub fn channels(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        let scale = pb.param("scale", &[dim], dim, Init::Const(1.0))?;
        Ok(Self {
            scale,
            eps: RMS_EPS,
            channel_axis: true,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.channel_axis {
            ops::channel_rms_norm(x, self.scale.as_tensor(), self.eps)
        } else {
            ops::last_dim_rms_norm(x, self.scale.as_tensor(), self.eps)
        }
    }
}
