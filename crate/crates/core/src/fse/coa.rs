//! Cross-modal attention block.
//!
//! `q2 = query + RMSNorm(Attn(Wq·query, Wk·ctx, Wv·ctx))` followed by
//! `out = q2 + SwiGLU(RMSNorm(q2))`. The attention output projection and the
//! FFN down projection start at zero so a fresh block is an exact identity on
//! its query.

use candle_core::{Tensor, D};

use crate::error::{PdfnetError, Result};
use crate::nn::{Init, Linear, ParamBuilder, RmsNorm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoaConfig {
    pub query_dim: usize,
    pub context_dim: usize,
    pub head_count: usize,
    /// Hidden width of the gated FFN as a multiple of `query_dim`.
    pub ffn_mult: usize,
    /// Zero-initialize the output and FFN-down projections.
    pub zero_init: bool,
}

impl CoaConfig {
    pub fn new(query_dim: usize, context_dim: usize, head_count: usize) -> Self {
        Self {
            query_dim,
            context_dim,
            head_count,
            ffn_mult: 2,
            zero_init: true,
        }
    }
}

#[derive(Clone)]
pub struct CoABlock {
    cfg: CoaConfig,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    attn_norm: RmsNorm,
    ffn_norm: RmsNorm,
    gate: Linear,
    up: Linear,
    down: Linear,
}

impl CoABlock {
    pub fn new(pb: &mut ParamBuilder<'_>, cfg: CoaConfig) -> Result<Self> {
        if cfg.head_count == 0 || !cfg.query_dim.is_multiple_of(cfg.head_count) {
            return Err(PdfnetError::shape(format!(
                "query_dim {} not divisible by {} heads",
                cfg.query_dim, cfg.head_count
            )));
        }
        let (c, cc) = (cfg.query_dim, cfg.context_dim);
        let hidden = c * cfg.ffn_mult;
        let normal = Init::Normal { gain: 1.0 };
        let tail = if cfg.zero_init { Init::Zeros } else { normal };
        Ok(Self {
            cfg,
            q: Linear::new(&mut pb.pp("q"), c, c, true, normal)?,
            k: Linear::new(&mut pb.pp("k"), cc, c, true, normal)?,
            v: Linear::new(&mut pb.pp("v"), cc, c, true, normal)?,
            out: Linear::new(&mut pb.pp("out"), c, c, true, tail)?,
            attn_norm: RmsNorm::tokens(&mut pb.pp("attn_norm"), c)?,
            ffn_norm: RmsNorm::tokens(&mut pb.pp("ffn_norm"), c)?,
            gate: Linear::new(&mut pb.pp("gate"), c, hidden, false, normal)?,
            up: Linear::new(&mut pb.pp("up"), c, hidden, false, normal)?,
            down: Linear::new(&mut pb.pp("down"), hidden, c, false, tail)?,
        })
    }

    pub fn config(&self) -> &CoaConfig {
        &self.cfg
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let h = self.cfg.head_count;
        Ok(x.reshape((b, l, h, c / h))?.transpose(1, 2)?.contiguous()?)
    }

    /// Softmax attention weights `B×heads×Lq×Lk`; exposed for inspection and tests.
    pub fn attention_weights(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let head_dim = self.cfg.query_dim / self.cfg.head_count;
        let scores = (q.matmul(&k.t()?)? / (head_dim as f64).sqrt())?;
        Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
    }

    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, lq, c) = query.dims3()?;
        let (bk, _lk, cc) = context.dims3()?;
        if c != self.cfg.query_dim || cc != self.cfg.context_dim || b != bk {
            return Err(PdfnetError::shape(format!(
                "CoA expects query ·×·×{} and context ·×·×{} with equal batch, got {:?} / {:?}",
                self.cfg.query_dim,
                self.cfg.context_dim,
                query.dims(),
                context.dims()
            )));
        }
        let weights = self.attention_weights(query, context)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let attended = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, c))?;
        let attended = self.out.forward(&attended)?;
        let q2 = (query + self.attn_norm.forward(&attended)?)?;
        let h = self.ffn_norm.forward(&q2)?;
        let gated = (self.gate.forward(&h)?.silu()? * self.up.forward(&h)?)?;
        Ok((&q2 + self.down.forward(&gated)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::ops::to_f64_vec;
    use candle_core::{DType, Device};

    fn block(store: &mut ParamStore, c: usize, cc: usize, zero_init: bool) -> CoABlock {
        let mut root = store.root();
        let cfg = CoaConfig {
            zero_init,
            ..CoaConfig::new(c, cc, 4)
        };
        CoABlock::new(&mut root.pp("coa"), cfg).unwrap()
    }

    #[test]
    fn single_key_gets_full_weight() {
        let mut store = ParamStore::new(1, DType::F64, Device::Cpu);
        let b = block(&mut store, 8, 8, false);
        let q = Tensor::randn(0f64, 1.0, (2, 1, 8), &Device::Cpu).unwrap();
        let k = Tensor::randn(0f64, 1.0, (2, 1, 8), &Device::Cpu).unwrap();
        let w = to_f64_vec(&b.attention_weights(&q, &k).unwrap()).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_init_is_exact_identity() {
        let mut store = ParamStore::new(1, DType::F32, Device::Cpu);
        let b = block(&mut store, 16, 8, true);
        let q = Tensor::randn(0f32, 1.0, (2, 6, 16), &Device::Cpu).unwrap();
        let k = Tensor::randn(0f32, 1.0, (2, 10, 8), &Device::Cpu).unwrap();
        let out = b.forward(&q, &k).unwrap();
        assert_eq!(to_f64_vec(&out).unwrap(), to_f64_vec(&q).unwrap());
    }

    #[test]
    fn random_shapes_are_finite() {
        let mut store = ParamStore::new(2, DType::F32, Device::Cpu);
        let b = block(&mut store, 16, 16, false);
        let q = Tensor::randn(0f32, 1.0, (2, 6, 16), &Device::Cpu).unwrap();
        let k = Tensor::randn(0f32, 1.0, (2, 10, 16), &Device::Cpu).unwrap();
        let out = b.forward(&q, &k).unwrap();
        assert_eq!(out.dims(), &[2, 6, 16]);
        assert!(to_f64_vec(&out).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mismatched_dims_are_shape_errors() {
        let mut store = ParamStore::new(2, DType::F32, Device::Cpu);
        let b = block(&mut store, 16, 16, false);
        let q = Tensor::zeros((1, 3, 12), DType::F32, &Device::Cpu).unwrap();
        let k = Tensor::zeros((1, 3, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(b.forward(&q, &k), Err(PdfnetError::Shape(_))));
        let mut root = store.root();
        assert!(CoABlock::new(&mut root.pp("bad"), CoaConfig::new(10, 10, 4)).is_err());
    }

    #[test]
    fn gradients_are_finite_everywhere() {
        let mut store = ParamStore::new(3, DType::F64, Device::Cpu);
        let b = block(&mut store, 8, 8, false);
        let q = candle_core::Var::new(Tensor::randn(0f64, 1.0, (1, 5, 8), &Device::Cpu).unwrap().to_vec3::<f64>().unwrap(), &Device::Cpu).unwrap();
        // zero context exercises the RMS epsilon floor on the value path
        let k = candle_core::Var::from_tensor(&Tensor::zeros((1, 4, 8), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let out = b.forward(q.as_tensor(), k.as_tensor()).unwrap();
        let grads = out.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        for t in [q.as_tensor(), k.as_tensor()] {
            let g = to_f64_vec(grads.get(t).unwrap()).unwrap();
            assert!(g.iter().all(|v| v.is_finite()));
        }
        for (name, var) in store.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                assert!(to_f64_vec(g).unwrap().iter().all(|v| v.is_finite()), "{name}");
            }
        }
    }
}
