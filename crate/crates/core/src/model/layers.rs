//! Transformer building blocks shared by the target model and the drafter.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{fan_in_uniform, AttnMask, Float, Graph, ParamId, ParamStore, Tensor, Var};

use super::cache::KvCache;

/// `y = x W (+ b)` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub(crate) weight: ParamId,
    pub(crate) bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.insert(format!("{name}.weight"), fan_in_uniform(rng, fan_in, fan_out))?;
        let bias = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(store.get(self.weight)))?;
        Ok(match self.bias {
            Some(b) => g.add_bias(y, g.param(store.get(b)))?,
            None => y,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }
}

#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub(crate) gain: ParamId,
    eps: f64,
}

impl RmsNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(vec![dim], T::one()))?;
        Ok(Self { gain, eps })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(g.rms_norm(x, g.param(store.get(self.gain)), T::lit(self.eps))?)
    }
}

/// Two-layer SiLU feed-forward network.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub(crate) up: Linear,
    pub(crate) down: Linear,
}

impl FeedForward {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = g.silu(self.up.forward(g, store, x)?)?;
        self.down.forward(g, store, h)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub(crate) q: Linear,
    pub(crate) k: Linear,
    pub(crate) v: Linear,
    pub(crate) o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng)?,
            heads,
        })
    }

    /// Attends the rows of `x` over the cached prefix of `cache.0`'s layer `cache.1`
    /// (if any) plus themselves, and appends their keys/values to that layer.
    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: AttnMask,
        cache: Option<(&mut KvCache<T>, usize)>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let (keys, values) = match cache {
            Some((cache, layer)) => {
                let prefix = cache.prefix(layer);
                cache.push_layer(layer, g.value(k).data(), g.value(v).data());
                match prefix {
                    Some((pk, pv)) => (
                        g.concat_rows(g.constant(pk), k)?,
                        g.concat_rows(g.constant(pv), v)?,
                    ),
                    None => (k, v),
                }
            }
            None => (k, v),
        };
        let a = g.attention(q, keys, values, self.heads, mask)?;
        self.o.forward(g, store, a)
    }
}

/// Pre-norm residual block: `x + attn(norm(x))`, then `+ ffn(norm(.))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub(crate) attn_norm: RmsNorm,
    pub(crate) attn: Attention,
    pub(crate) ffn_norm: RmsNorm,
    pub(crate) ffn: FeedForward,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: RmsNorm::new(store, &format!("{name}.attn_norm"), dim, eps)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ffn_norm: RmsNorm::new(store, &format!("{name}.ffn_norm"), dim, eps)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, ffn_dim, rng)?,
        })
    }

    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mask: AttnMask,
        cache: Option<(&mut KvCache<T>, usize)>,
    ) -> Result<Var> {
        let h = self.attn_norm.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, mask, cache)?;
        let x = g.add(x, a)?;
        let h = self.ffn_norm.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        Ok(g.add(x, f)?)
    }

    /// Zeroes the attention output projection and the FFN down projection so
    /// the block reduces to the identity. Used to test residual wiring.
    pub fn zero_branches<T: Float>(&self, store: &mut ParamStore<T>) {
        for id in [self.attn.o.weight, self.ffn.down.weight]
            .into_iter()
            .chain(self.ffn.down.bias)
        {
            store.get_mut(id).value_mut().data_mut().fill(T::zero());
        }
    }
}
