use crate::error::{Error, Result};
use crate::expert::ExpertSpec;
use crate::layers::Linear;
use crate::numerics::{Graph, Group, ParamStore, Real};

use super::{check_group_factor, segments_from, FusedNode, FusionConfig, GroupedFeatures};

/// Per-expert first layers feeding one shared second layer.
#[derive(Debug, Clone)]
pub struct MlpFusion {
    config: FusionConfig,
    first: Vec<(String, usize, Linear)>,
    second: Linear,
}

impl MlpFusion {
    /// `experts` must already follow `config.expert_order`.
    pub(crate) fn new<T: Real>(
        config: &FusionConfig,
        experts: &[ExpertSpec],
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        let mut first = Vec::with_capacity(experts.len());
        for spec in experts {
            let m = config.m_for(&spec.name);
            check_group_factor(m, spec.grid_rows, spec.grid_cols)?;
            let width = m * spec.dim;
            let layer = Linear::new(
                store,
                seed,
                &format!("fusion.mlp1.{}", spec.name),
                Group::Fusion,
                width,
                config.d_hidden,
                true,
            )?;
            first.push((spec.name.clone(), width, layer));
        }
        let second = Linear::new(store, seed, "fusion.mlp2", Group::Fusion, config.d_hidden, config.d_model, true)?;
        Ok(Self {
            config: config.clone(),
            first,
            second,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn first_layer(&self, expert: &str) -> Option<Linear> {
        self.first.iter().find(|(n, _, _)| n == expert).map(|(_, _, l)| *l)
    }

    pub fn second_layer(&self) -> Linear {
        self.second
    }

    pub(crate) fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        grouped: &[GroupedFeatures<T>],
    ) -> Result<FusedNode> {
        if grouped.len() != self.first.len() {
            return Err(Error::Fusion(format!(
                "expected {} expert inputs, got {}",
                self.first.len(),
                grouped.len()
            )));
        }
        let mut hidden = Vec::with_capacity(grouped.len());
        let mut grids = Vec::with_capacity(grouped.len());
        for (input, (name, width, layer)) in grouped.iter().zip(&self.first) {
            if &input.expert != name {
                return Err(Error::Fusion(format!(
                    "expert `{}` has no first layer at this position (expected `{name}`)",
                    input.expert
                )));
            }
            if input.tokens.cols() != *width {
                return Err(Error::shape(
                    "mlp_fuse",
                    format!("{name}: grouped width {} but layer expects {width}", input.tokens.cols()),
                ));
            }
            let x = g.input(input.tokens.clone())?;
            let h = layer.forward(g, store, x)?;
            hidden.push(g.silu(h)?);
            grids.push((name.clone(), input.grid));
        }
        let h = g.concat_rows(&hidden)?;
        let node = self.second.forward(g, store, h)?;
        Ok(FusedNode {
            node,
            segments: segments_from(&grids),
        })
    }
}
