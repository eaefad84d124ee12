//! Parameterised building blocks shared by the Q-Former and the decoder.

use crate::error::Result;
use crate::numerics::{AttnMask, Graph, Group, Init, NodeId, ParamId, ParamStore, Real};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        group: Group,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.init(
            seed,
            &format!("{name}.w"),
            group,
            d_in,
            d_out,
            Init::Normal(1.0 / (d_in as f64).sqrt()),
        )?;
        let b = if bias {
            Some(store.init(seed, &format!("{name}.b"), group, 1, d_out, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, seed: u64, name: &str, group: Group, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.init(seed, &format!("{name}.g"), group, 1, d, Init::Ones)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, self.gain);
        g.rms_norm(x, gain)
    }
}

/// Multi-head attention projections (no biases).
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        group: Group,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        let mk = |store: &mut ParamStore<T>, p: &str| Linear::new(store, seed, &format!("{name}.{p}"), group, d, d, false);
        Ok(Self {
            q: mk(store, "q")?,
            k: mk(store, "k")?,
            v: mk(store, "v")?,
            o: mk(store, "o")?,
            heads,
        })
    }

    /// Returns `(output, attention node)`; the latter carries the weights.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        context: NodeId,
        mask: AttnMask,
    ) -> Result<(NodeId, NodeId)> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, context)?;
        let v = self.v.forward(g, store, context)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        Ok((self.o.forward(g, store, a)?, a))
    }
}

/// Two-layer SiLU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        name: &str,
        group: Group,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, seed, &format!("{name}.up"), group, d, hidden, true)?,
            down: Linear::new(store, seed, &format!("{name}.down"), group, hidden, d, true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(g, store, x)?;
        let h = g.silu(h)?;
        self.down.forward(g, store, h)
    }
}
