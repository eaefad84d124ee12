use crate::error::{Error, Result};
use crate::expert::{ExpertSpec, PatchFeatures};
use crate::layers::{Attention, FeedForward, Linear, Norm};
use crate::numerics::{AttnMask, Graph, Group, Init, ParamId, ParamStore, Real};

use super::{query_grid, segments_from, FusedNode, FusionConfig};

#[derive(Debug, Clone, Copy)]
struct QFormerLayer {
    sa_norm: Norm,
    sa: Attention,
    ca_norm: Norm,
    ca: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct ExpertBranch {
    name: String,
    dim: usize,
    proj: Linear,
    queries: ParamId,
    count: usize,
}

/// One joint Q-Former. Each expert owns a block of learnable queries and an
/// input projection `W_i`; every query block cross-attends to the
/// concatenation of all projected experts.
#[derive(Debug, Clone)]
pub struct QFormerFusion {
    config: FusionConfig,
    branches: Vec<ExpertBranch>,
    layers: Vec<QFormerLayer>,
    out_norm: Norm,
    out: Linear,
}

impl QFormerFusion {
    pub(crate) fn new<T: Real>(
        config: &FusionConfig,
        experts: &[ExpertSpec],
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        let w = config.qformer_width;
        let mut branches = Vec::with_capacity(experts.len());
        for spec in experts {
            let count = config.queries_per_expert.get(&spec.name).copied().unwrap_or(0);
            if count == 0 {
                return Err(Error::Fusion(format!("zero queries for expert `{}`", spec.name)));
            }
            let proj = Linear::new(
                store,
                seed,
                &format!("fusion.qformer.proj.{}", spec.name),
                Group::Fusion,
                spec.dim,
                w,
                false,
            )?;
            let queries = store.init(
                seed,
                &format!("fusion.qformer.queries.{}", spec.name),
                Group::Fusion,
                count,
                w,
                Init::Normal(1.0),
            )?;
            branches.push(ExpertBranch {
                name: spec.name.clone(),
                dim: spec.dim,
                proj,
                queries,
                count,
            });
        }
        let heads = config.qformer_heads;
        let mut layers = Vec::with_capacity(config.qformer_layers);
        for l in 0..config.qformer_layers {
            let p = format!("fusion.qformer.l{l}");
            layers.push(QFormerLayer {
                sa_norm: Norm::new(store, seed, &format!("{p}.sa_norm"), Group::Fusion, w)?,
                sa: Attention::new(store, seed, &format!("{p}.sa"), Group::Fusion, w, heads)?,
                ca_norm: Norm::new(store, seed, &format!("{p}.ca_norm"), Group::Fusion, w)?,
                ca: Attention::new(store, seed, &format!("{p}.ca"), Group::Fusion, w, heads)?,
                ff_norm: Norm::new(store, seed, &format!("{p}.ff_norm"), Group::Fusion, w)?,
                ff: FeedForward::new(store, seed, &format!("{p}.ff"), Group::Fusion, w, 2 * w)?,
            });
        }
        Ok(Self {
            config: config.clone(),
            branches,
            layers,
            out_norm: Norm::new(store, seed, "fusion.qformer.out_norm", Group::Fusion, w)?,
            out: Linear::new(store, seed, "fusion.qformer.out", Group::Fusion, w, config.d_model, true)?,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// The input projection `W_i` of one expert.
    pub fn projection(&self, expert: &str) -> Option<Linear> {
        self.branches.iter().find(|b| b.name == expert).map(|b| b.proj)
    }

    pub fn output_count(&self) -> usize {
        self.branches.iter().map(|b| b.count).sum()
    }

    pub(crate) fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: &[PatchFeatures<T>],
    ) -> Result<FusedNode> {
        if features.len() != self.branches.len() {
            return Err(Error::Fusion(format!(
                "expected {} expert inputs, got {}",
                self.branches.len(),
                features.len()
            )));
        }
        let mut projected = Vec::with_capacity(features.len());
        let mut queries = Vec::with_capacity(features.len());
        let mut grids = Vec::with_capacity(features.len());
        for (f, b) in features.iter().zip(&self.branches) {
            if f.expert != b.name {
                return Err(Error::Fusion(format!(
                    "expert `{}` has no projection at this position (expected `{}`)",
                    f.expert, b.name
                )));
            }
            if f.features.cols() != b.dim {
                return Err(Error::shape(
                    "qformer_fuse",
                    format!("{}: width {} but W_i expects {}", b.name, f.features.cols(), b.dim),
                ));
            }
            let x = g.input(f.features.clone())?;
            projected.push(b.proj.forward(g, store, x)?);
            queries.push(g.param(store, b.queries));
            grids.push((b.name.clone(), query_grid(b.count)));
        }
        let context = g.concat_rows(&projected)?;
        let mut x = g.concat_rows(&queries)?;
        for layer in &self.layers {
            let h = layer.sa_norm.forward(g, store, x)?;
            let (a, _) = layer.sa.forward(g, store, h, h, AttnMask::Full)?;
            x = g.add(x, a)?;
            let h = layer.ca_norm.forward(g, store, x)?;
            let (a, _) = layer.ca.forward(g, store, h, context, AttnMask::Full)?;
            x = g.add(x, a)?;
            let h = layer.ff_norm.forward(g, store, x)?;
            let f = layer.ff.forward(g, store, h)?;
            x = g.add(x, f)?;
        }
        let h = self.out_norm.forward(g, store, x)?;
        let node = self.out.forward(g, store, h)?;
        Ok(FusedNode {
            node,
            segments: segments_from(&grids),
        })
    }
}
