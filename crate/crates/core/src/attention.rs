//! Scaled dot-product attention, multi-head attention and the blocks built
//! on them.

use gwnet_autodiff::{Graph, ParamStore, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GwError, Result};
use crate::layers::{instance_norm, kv_keep_indices, leaky_relu, Linear};

/// Row-stochastic attention weights `softmax(Q Kᵀ / √d_k)`.
pub fn attention_weights<'g>(q: Var<'g>, k: Var<'g>) -> Result<Var<'g>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(GwError::invalid(format!(
            "attention: query width {:?} does not match key width {:?}",
            qs, ks
        )));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    Ok(q.matmul(k.t()?)?.mul_scalar(scale).softmax(1)?)
}

pub fn scaled_dot_attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<Var<'g>> {
    if k.shape()[0] != v.shape()[0] {
        return Err(GwError::invalid(format!(
            "attention: {} keys but {} values",
            k.shape()[0],
            v.shape()[0]
        )));
    }
    Ok(attention_weights(q, k)?.matmul(v)?)
}

/// Multi-head attention. Head `i` uses columns `i·d_k .. (i+1)·d_k` of the
/// packed query/key/value projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHead {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(GwError::invalid(format!(
                "{heads} heads do not divide d_model = {d_model}"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng)?,
            heads,
            d_model,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        q_in: Var<'g>,
        k_in: Var<'g>,
        v_in: Var<'g>,
    ) -> Result<Var<'g>> {
        for x in [q_in, k_in, v_in] {
            let s = x.shape();
            if s.len() != 2 || s[1] != self.d_model {
                return Err(GwError::invalid(format!(
                    "multi_head: input shape {s:?} lacks {} columns",
                    self.d_model
                )));
            }
        }
        let q = self.q.forward(g, store, q_in)?;
        let k = self.k.forward(g, store, k_in)?;
        let v = self.v.forward(g, store, v_in)?;
        let dk = self.d_k();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dk, (h + 1) * dk);
            heads.push(scaled_dot_attention(
                q.slice(1, a, b)?,
                k.slice(1, a, b)?,
                v.slice(1, a, b)?,
            )?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat(&heads, 1)?
        };
        self.o.forward(g, store, cat)
    }
}

/// Attention followed by a two-layer MLP, each sublayer normalised over the
/// sequence axis before its residual join.
#[derive(Debug, Clone, Copy)]
pub struct MhaBlock {
    pub mha: MultiHead,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MhaBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            mha: MultiHead::new(store, &format!("{name}.mha"), d_model, heads, rng)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), d_model, d_model, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d_model, d_model, rng)?,
        })
    }

    /// `y1 = IN(MHA(q, k, v)) [+ q]`, `y2 = IN(MLP(y1)) + y1`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        q: Var<'g>,
        k: Var<'g>,
        v: Var<'g>,
        first_residual: bool,
    ) -> Result<Var<'g>> {
        let mut y1 = instance_norm(self.mha.forward(g, store, q, k, v)?)?;
        if first_residual {
            y1 = y1.add(q)?;
        }
        let h = leaky_relu(self.fc1.forward(g, store, y1)?);
        let m = leaky_relu(self.fc2.forward(g, store, h)?);
        Ok(instance_norm(m)?.add(y1)?)
    }
}

/// Key-value dropout settings for one forward pass.
pub struct KvDropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Self-attention module.
#[derive(Debug, Clone, Copy)]
pub struct Stsa(pub MhaBlock);

impl Stsa {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self(MhaBlock::new(store, name, d_model, heads, rng)?))
    }

    /// With dropout, only the key-value stream loses positions; all `n`
    /// query rows are kept.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        x: Var<'g>,
        dropout: Option<&mut KvDropout<'_>>,
    ) -> Result<Var<'g>> {
        let kv = match dropout {
            Some(d) => {
                let n = x.shape()[0];
                let kept = kv_keep_indices(n, d.rate, true, d.rng)?;
                if kept.len() == n {
                    x
                } else {
                    x.index_rows(&kept)?
                }
            }
            None => x,
        };
        self.0.forward(g, store, x, kv, kv, true)
    }
}

/// Cross-attention interpolating input-point values onto query points.
#[derive(Debug, Clone, Copy)]
pub struct Stai(pub MhaBlock);

impl Stai {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self(MhaBlock::new(store, name, d_model, heads, rng)?))
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        query_cemb: Var<'g>,
        key_cemb: Var<'g>,
        values: Var<'g>,
    ) -> Result<Var<'g>> {
        if key_cemb.shape()[0] != values.shape()[0] {
            return Err(GwError::invalid("stai: key and value counts differ"));
        }
        self.0.forward(g, store, query_cemb, key_cemb, values, false)
    }
}
