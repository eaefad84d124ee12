//! Poly-expert fusion: turns every expert's patch grid into one token
//! sequence of width `d_model`.
//!
//! Two networks are provided. The MLP path groups `m` consecutive patches
//! into one token, projects each expert with its own first layer and then
//! runs all experts through one shared second layer. The Q-Former path
//! projects every expert to the query width and lets per-expert blocks of
//! learnable queries cross-attend to the concatenation of all experts.

mod mlp;
mod qformer;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{ExpertSpec, PatchFeatures};
use crate::numerics::{Graph, Matrix, NodeId, ParamStore, Real};

pub use mlp::MlpFusion;
pub use qformer::QFormerFusion;

/// Largest patch-grouping factor accepted.
pub const MAX_GROUP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    #[default]
    Mlp,
    Qformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub expert_order: Vec<String>,
    pub m_per_expert: BTreeMap<String, usize>,
    pub queries_per_expert: BTreeMap<String, usize>,
    pub d_model: usize,
    pub d_hidden: usize,
    pub qformer_width: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
}

impl FusionConfig {
    /// MLP fusion over `experts` in the given order with grouping factor 1.
    pub fn mlp(experts: &[ExpertSpec], d_model: usize) -> Self {
        Self {
            method: FusionMethod::Mlp,
            expert_order: experts.iter().map(|e| e.name.clone()).collect(),
            m_per_expert: experts.iter().map(|e| (e.name.clone(), 1)).collect(),
            queries_per_expert: experts.iter().map(|e| (e.name.clone(), e.patches())).collect(),
            d_model,
            d_hidden: d_model,
            qformer_width: 768,
            qformer_layers: 2,
            qformer_heads: 4,
        }
    }

    pub fn m_for(&self, expert: &str) -> usize {
        self.m_per_expert.get(expert).copied().unwrap_or(1)
    }

    /// Every violated constraint as `(field path, message)`.
    pub fn violations(&self, experts: &[ExpertSpec]) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let names: BTreeSet<&str> = experts.iter().map(|e| e.name.as_str()).collect();
        if let Err(e) = check_permutation(&self.expert_order, names.iter().copied()) {
            out.push(("fusion.expert_order".to_string(), e.to_string()));
        }
        if self.d_hidden != self.d_model {
            out.push((
                "fusion.d_hidden".into(),
                format!("must equal d_model ({}), got {}", self.d_model, self.d_hidden),
            ));
        }
        for spec in experts {
            match self.method {
                FusionMethod::Mlp => {
                    let path = format!("fusion.m_per_expert.{}", spec.name);
                    match self.m_per_expert.get(&spec.name) {
                        None => out.push((path, "missing entry".into())),
                        Some(&m) => {
                            if let Err(e) = check_group_factor(m, spec.grid_rows, spec.grid_cols) {
                                out.push((path, e.to_string()));
                            }
                        }
                    }
                }
                FusionMethod::Qformer => {
                    let path = format!("fusion.queries_per_expert.{}", spec.name);
                    match self.queries_per_expert.get(&spec.name) {
                        None => out.push((path, "missing entry".into())),
                        Some(0) => out.push((path, "zero queries".into())),
                        Some(_) => {}
                    }
                }
            }
        }
        for (field, map) in [("m_per_expert", &self.m_per_expert), ("queries_per_expert", &self.queries_per_expert)] {
            for key in map.keys().filter(|k| !names.contains(k.as_str())) {
                out.push((format!("fusion.{field}.{key}"), format!("`{key}` is not a configured expert")));
            }
        }
        if self.method == FusionMethod::Qformer {
            if self.qformer_heads == 0 || self.qformer_width % self.qformer_heads != 0 {
                out.push((
                    "fusion.qformer_heads".into(),
                    format!("must divide qformer_width ({})", self.qformer_width),
                ));
            }
            if self.qformer_layers == 0 {
                out.push(("fusion.qformer_layers".into(), "must be at least 1".into()));
            }
        }
        out
    }

    /// Post-fusion `(label, grid)` per segment, in concatenation order.
    pub fn output_grids(&self, experts: &[ExpertSpec]) -> Result<Vec<(String, (usize, usize))>> {
        self.expert_order
            .iter()
            .map(|name| {
                let spec = experts
                    .iter()
                    .find(|e| &e.name == name)
                    .ok_or_else(|| Error::UnknownExpert(name.clone()))?;
                let grid = match self.method {
                    FusionMethod::Mlp => {
                        let m = self.m_for(name);
                        check_group_factor(m, spec.grid_rows, spec.grid_cols)?;
                        (spec.grid_rows, spec.grid_cols / m)
                    }
                    FusionMethod::Qformer => {
                        let q = *self
                            .queries_per_expert
                            .get(name)
                            .ok_or_else(|| Error::Fusion(format!("no query quota for {name}")))?;
                        query_grid(q)
                    }
                };
                Ok((name.clone(), grid))
            })
            .collect()
    }

    /// Total vision tokens produced per image.
    pub fn token_count(&self, experts: &[ExpertSpec]) -> Result<usize> {
        Ok(self.output_grids(experts)?.iter().map(|(_, (r, c))| r * c).sum())
    }
}

/// Query blocks have no spatial layout; a perfect square count is laid out
/// as a square, anything else as a single row.
pub fn query_grid(queries: usize) -> (usize, usize) {
    let s = (queries as f64).sqrt().round() as usize;
    if s * s == queries {
        (s, s)
    } else {
        (1, queries)
    }
}

pub(crate) fn check_group_factor(m: usize, rows: usize, cols: usize) -> Result<()> {
    if !(1..=MAX_GROUP).contains(&m) {
        return Err(Error::Grouping(format!("m = {m} outside [1, {MAX_GROUP}]")));
    }
    if (rows * cols) % m != 0 {
        return Err(Error::Grouping(format!("m = {m} does not divide {} patches", rows * cols)));
    }
    if cols % m != 0 {
        return Err(Error::Grouping(format!("m = {m} does not divide {cols} grid columns")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionSegment {
    pub expert: String,
    pub start: usize,
    pub len: usize,
    pub grid: (usize, usize),
}

/// Fused vision tokens `V_I` with the span each expert occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVisionTokens<T> {
    pub tokens: Matrix<T>,
    pub segments: Vec<VisionSegment>,
}

/// In-trace counterpart of [`FusedVisionTokens`].
#[derive(Debug, Clone)]
pub struct FusedNode {
    pub node: NodeId,
    pub segments: Vec<VisionSegment>,
}

impl FusedNode {
    pub fn grids(&self) -> Vec<(usize, usize)> {
        self.segments.iter().map(|s| s.grid).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedFeatures<T> {
    pub expert: String,
    /// `(n/m) × (m·d)`: row `j` stacks patches `jm .. (j+1)m`.
    pub tokens: Matrix<T>,
    pub grid: (usize, usize),
    pub m: usize,
}

/// Concatenates every run of `m` row-major patches into one wide row.
pub fn group_patches<T: Real>(features: &PatchFeatures<T>, m: usize) -> Result<GroupedFeatures<T>> {
    let (rows, cols) = features.grid;
    check_group_factor(m, rows, cols)?;
    let (n, d) = features.features.shape();
    if n != rows * cols {
        return Err(Error::Grouping(format!(
            "{} feature rows for a {rows}x{cols} grid",
            n
        )));
    }
    Ok(GroupedFeatures {
        expert: features.expert.clone(),
        tokens: features.features.reshaped(n / m, m * d)?,
        grid: (rows, cols / m),
        m,
    })
}

fn check_permutation<'a>(order: &[String], labels: impl Iterator<Item = &'a str>) -> Result<()> {
    let labels: BTreeSet<&str> = labels.collect();
    let mut seen = BTreeSet::new();
    for name in order {
        if !seen.insert(name.as_str()) {
            return Err(Error::Order(format!("duplicate expert `{name}`")));
        }
        if !labels.contains(name.as_str()) {
            return Err(Error::Order(format!("unknown expert `{name}`")));
        }
    }
    if let Some(missing) = labels.iter().find(|l| !seen.contains(*l)) {
        return Err(Error::Order(format!("expert `{missing}` missing from order")));
    }
    Ok(())
}

/// Reorders labelled items to follow `order`, which must be a permutation of
/// their labels.
pub fn order_by<I>(items: Vec<I>, order: &[String], label: impl Fn(&I) -> &str) -> Result<Vec<I>> {
    check_permutation(order, items.iter().map(&label))?;
    if items.len() != order.len() {
        return Err(Error::Order("duplicate labels among inputs".into()));
    }
    let mut slots: Vec<Option<I>> = items.into_iter().map(Some).collect();
    let mut out = Vec::with_capacity(order.len());
    for name in order {
        let pos = slots
            .iter()
            .position(|s| s.as_ref().is_some_and(|i| label(i) == name))
            .ok_or_else(|| Error::Order(format!("unknown expert `{name}`")))?;
        out.push(slots[pos].take().expect("slot filled"));
    }
    Ok(out)
}

pub fn order_experts<T>(features: Vec<PatchFeatures<T>>, order: &[String]) -> Result<Vec<PatchFeatures<T>>> {
    order_by(features, order, |f| f.expert.as_str())
}

/// Fusion network weights: one of the two architectures, created from a
/// [`FusionConfig`] and registered in the `fusion` parameter group.
#[derive(Debug, Clone)]
pub enum FusionParams {
    Mlp(MlpFusion),
    Qformer(QFormerFusion),
}

impl FusionParams {
    pub fn new<T: Real>(
        config: &FusionConfig,
        experts: &[ExpertSpec],
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        if let Some((path, msg)) = config.violations(experts).into_iter().next() {
            return Err(Error::Fusion(format!("{path}: {msg}")));
        }
        let ordered = order_by(experts.to_vec(), &config.expert_order, |e| e.name.as_str())?;
        Ok(match config.method {
            FusionMethod::Mlp => FusionParams::Mlp(MlpFusion::new(config, &ordered, store, seed)?),
            FusionMethod::Qformer => FusionParams::Qformer(QFormerFusion::new(config, &ordered, store, seed)?),
        })
    }

    pub fn config(&self) -> &FusionConfig {
        match self {
            FusionParams::Mlp(m) => m.config(),
            FusionParams::Qformer(q) => q.config(),
        }
    }

    /// Fuses features that are already in `expert_order`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: &[PatchFeatures<T>],
    ) -> Result<FusedNode> {
        match self {
            FusionParams::Mlp(m) => {
                let grouped = features
                    .iter()
                    .map(|f| group_patches(f, m.config().m_for(&f.expert)))
                    .collect::<Result<Vec<_>>>()?;
                m.forward(g, store, &grouped)
            }
            FusionParams::Qformer(q) => q.forward(g, store, features),
        }
    }
}

/// Eager MLP fusion of already grouped features.
pub fn mlp_fuse<T: Real>(
    grouped: &[GroupedFeatures<T>],
    params: &FusionParams,
    store: &ParamStore<T>,
) -> Result<FusedVisionTokens<T>> {
    let FusionParams::Mlp(m) = params else {
        return Err(Error::Fusion("parameters are not an MLP fusion network".into()));
    };
    let mut g = Graph::new();
    let fused = m.forward(&mut g, store, grouped)?;
    Ok(FusedVisionTokens {
        tokens: g.value(fused.node).clone(),
        segments: fused.segments,
    })
}

/// Eager Q-Former fusion.
pub fn qformer_fuse<T: Real>(
    features: &[PatchFeatures<T>],
    params: &FusionParams,
    store: &ParamStore<T>,
) -> Result<FusedVisionTokens<T>> {
    let FusionParams::Qformer(q) = params else {
        return Err(Error::Fusion("parameters are not a Q-Former fusion network".into()));
    };
    let mut g = Graph::new();
    let fused = q.forward(&mut g, store, features)?;
    Ok(FusedVisionTokens {
        tokens: g.value(fused.node).clone(),
        segments: fused.segments,
    })
}

pub(crate) fn segments_from(sizes: &[(String, (usize, usize))]) -> Vec<VisionSegment> {
    let mut start = 0;
    sizes
        .iter()
        .map(|(name, (r, c))| {
            let seg = VisionSegment {
                expert: name.clone(),
                start,
                len: r * c,
                grid: (*r, *c),
            };
            start += r * c;
            seg
        })
        .collect()
}

#[cfg(test)]
mod tests;
