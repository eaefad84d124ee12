//! Experiment configuration: TOML in, validated [`ExperimentConfig`] out.
//!
//! Parsing collects every problem it can find (unknown keys anywhere in the
//! tree, type errors, cross-field violations) before giving up, and every
//! problem carries the dotted path of the offending field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::expert::{preset, ExpertSpec, Scale, PRESET_NAMES};
use crate::fusion::{FusionConfig, FusionMethod};
use crate::harness::task::TaskSpec;
use crate::lm::DecoderConfig;
use crate::model::ModelConfig;
use crate::positional::PeScheme;
use crate::training::{Phase, PhaseConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

/// Every problem found in one configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<Violation>);

impl ConfigErrors {
    pub fn paths(&self) -> Vec<&str> {
        self.0.iter().map(|v| v.path.as_str()).collect()
    }

    fn single(path: &str, message: impl Into<String>) -> Self {
        ConfigErrors(vec![Violation {
            path: path.to_string(),
            message: message.into(),
        }])
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} configuration error(s):", self.0.len())?;
        for v in &self.0 {
            write!(f, "\n  {}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertsSection {
    /// Preset names to include, in default concatenation order.
    pub presets: Vec<String>,
    /// Additional hand-written expert specs.
    pub custom: Vec<ExpertSpec>,
}

impl Default for ExpertsSection {
    fn default() -> Self {
        Self {
            presets: vec!["dinov2".into(), "clip".into()],
            custom: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSection {
    pub method: FusionMethod,
    /// Empty means presets then custom experts, as listed.
    pub expert_order: Vec<String>,
    /// Experts left out get 12 (clip), 16 (dinov2) or 1.
    pub m_per_expert: BTreeMap<String, usize>,
    /// Experts left out default to `n_i / m_i`.
    pub queries_per_expert: BTreeMap<String, usize>,
    pub qformer_width: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            method: FusionMethod::Mlp,
            expert_order: Vec::new(),
            m_per_expert: BTreeMap::new(),
            queries_per_expert: BTreeMap::new(),
            qformer_width: 12,
            qformer_layers: 2,
            qformer_heads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseSection {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of hiding one random expert from a training example.
    pub expert_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub pretrain: PhaseSection,
    pub finetune: PhaseSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            pretrain: PhaseSection {
                lr: 3e-3,
                steps: 150,
                batch_size: 8,
                expert_dropout: 0.25,
            },
            finetune: PhaseSection {
                lr: 1e-3,
                steps: 150,
                batch_size: 8,
                expert_dropout: 0.25,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisSection {
    /// Run the per-expert masking study.
    pub mask: bool,
    /// Examples used for the contribution report (0 = whole eval set).
    pub contribution_samples: usize,
    /// Expert orders for `sweep-order`; empty = every permutation.
    pub orders: Vec<Vec<String>>,
    /// Schemes for `sweep-pe`; empty = all four.
    pub pe_schemes: Vec<PeScheme>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            mask: true,
            contribution_samples: 64,
            orders: Vec::new(),
            pe_schemes: Vec::new(),
        }
    }
}

/// The on-disk shape of a configuration. `seed` is the only required key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RawConfig {
    seed: Option<u64>,
    output_dir: String,
    scale: Scale,
    pe_scheme: PeScheme,
    experts: ExpertsSection,
    fusion: FusionSection,
    decoder: DecoderConfig,
    train: TrainSection,
    task: TaskSpec,
    analysis: AnalysisSection,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: "out".into(),
            scale: Scale::Toy,
            pe_scheme: PeScheme::Original,
            experts: ExpertsSection::default(),
            fusion: FusionSection::default(),
            decoder: DecoderConfig::default(),
            train: TrainSection::default(),
            task: TaskSpec::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

/// A validated experiment. The normalized dump (`to_toml`) is itself a
/// valid configuration that reproduces this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scale: Scale,
    pub pe_scheme: PeScheme,
    pub experts: ExpertsSection,
    pub fusion: FusionSection,
    pub decoder: DecoderConfig,
    pub train: TrainSection,
    pub task: TaskSpec,
    pub analysis: AnalysisSection,
    /// Resolved expert specs in concatenation order (derived, not read).
    #[serde(skip)]
    resolved: Vec<ExpertSpec>,
}

/// Keys whose children are user-chosen labels rather than fixed fields.
const FREE_FORM: &[&str] = &["fusion.m_per_expert", "fusion.queries_per_expert", "task.channels"];

fn reference_tree() -> Value {
    let mut raw = RawConfig {
        seed: Some(0),
        ..RawConfig::default()
    };
    raw.experts.custom.push(preset("clip", Scale::Toy).expect("clip preset"));
    Value::try_from(&raw).expect("default config serializes")
}

fn unknown_keys(input: &Value, reference: &Value, path: &str, out: &mut Vec<Violation>) {
    if FREE_FORM.contains(&path) {
        return;
    }
    match (input, reference) {
        (Value::Table(t), Value::Table(r)) => {
            for (key, value) in t {
                let child = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                match r.get(key) {
                    Some(rv) => unknown_keys(value, rv, &child, out),
                    None => {
                        let suggestion = r
                            .keys()
                            .map(|k| (strsim::jaro_winkler(key, k), k))
                            .filter(|(s, _)| *s > 0.8)
                            .max_by(|a, b| a.0.total_cmp(&b.0))
                            .map(|(_, k)| format!(" (did you mean `{k}`?)"))
                            .unwrap_or_default();
                        out.push(Violation {
                            path: child,
                            message: format!("unknown key `{key}`{suggestion}"),
                        });
                    }
                }
            }
        }
        (Value::Array(items), Value::Array(r)) => {
            if let Some(proto) = r.first() {
                for (i, item) in items.iter().enumerate() {
                    unknown_keys(item, proto, &format!("{path}[{i}]"), out);
                }
            }
        }
        _ => {}
    }
}

/// Overlays `top` on `base`. Tables merge key by key so partially written
/// sections keep their other defaults; free-form maps are replaced whole.
fn merge(base: Value, top: Value, path: &str) -> Value {
    match (base, top) {
        (Value::Table(mut b), Value::Table(t)) if !FREE_FORM.contains(&path) => {
            for (key, value) in t {
                let child = if path.is_empty() {
                    key.clone()
                } else {
                    format!("{path}.{key}")
                };
                let merged = match b.remove(&key) {
                    Some(old) => merge(old, value, &child),
                    None => value,
                };
                b.insert(key, merged);
            }
            Value::Table(b)
        }
        (_, top) => top,
    }
}

/// Grouping factors used when a configuration names none for an expert.
fn default_m(expert: &str) -> usize {
    match expert {
        "clip" => 12,
        "dinov2" => 16,
        _ => 1,
    }
}

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ConfigErrors> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigErrors::single("", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigErrors> {
        let value: Value = text
            .parse::<toml::Table>()
            .map(Value::Table)
            .map_err(|e| ConfigErrors::single("", format!("invalid TOML: {e}")))?;
        let mut errors = Vec::new();
        unknown_keys(&value, &reference_tree(), "", &mut errors);
        let merged = merge(Value::try_from(RawConfig::default()).expect("defaults serialize"), value, "");
        let raw = match RawConfig::deserialize(merged) {
            Ok(raw) => raw,
            Err(e) => {
                errors.push(Violation {
                    path: String::new(),
                    message: e.to_string().trim().to_string(),
                });
                return Err(ConfigErrors(errors));
            }
        };
        let seed = match raw.seed {
            Some(s) => s,
            None => {
                errors.push(Violation {
                    path: "seed".into(),
                    message: "missing required key".into(),
                });
                0
            }
        };
        let config = Self {
            seed,
            output_dir: PathBuf::from(raw.output_dir),
            scale: raw.scale,
            pe_scheme: raw.pe_scheme,
            experts: raw.experts,
            fusion: raw.fusion,
            decoder: raw.decoder,
            train: raw.train,
            task: raw.task,
            analysis: raw.analysis,
            resolved: Vec::new(),
        };
        config.finish(errors)
    }

    /// The built-in default experiment with the given seed.
    pub fn default_with_seed(seed: u64) -> Self {
        Self::parse(&format!("seed = {seed}")).expect("defaults are valid")
    }

    /// Re-validates after programmatic edits.
    pub fn validated(mut self) -> Result<Self, ConfigErrors> {
        self.resolved.clear();
        self.finish(Vec::new())
    }

    fn finish(mut self, mut errors: Vec<Violation>) -> Result<Self, ConfigErrors> {
        let push = |errors: &mut Vec<Violation>, path: String, message: String| {
            errors.push(Violation { path, message });
        };
        // Resolve experts.
        let mut specs = Vec::new();
        for (i, name) in self.experts.presets.iter().enumerate() {
            match preset(name, self.scale) {
                Some(s) => specs.push(s),
                None => push(
                    &mut errors,
                    format!("experts.presets[{i}]"),
                    format!("unknown preset `{name}`; expected one of {PRESET_NAMES:?}"),
                ),
            }
        }
        for (i, spec) in self.experts.custom.iter().enumerate() {
            if let Err(e) = spec.validate() {
                push(&mut errors, format!("experts.custom[{i}]"), e.to_string());
            }
            specs.push(spec.clone());
        }
        let mut seen = BTreeSet::new();
        for s in &specs {
            if !seen.insert(s.name.clone()) {
                push(&mut errors, "experts".into(), format!("expert `{}` listed twice", s.name));
            }
        }
        if specs.is_empty() {
            push(&mut errors, "experts.presets".into(), "at least one expert is required".into());
        }
        for (name, attrs) in &self.task.channels {
            match specs.iter_mut().find(|s| &s.name == name) {
                Some(s) => s.profile = attrs.clone(),
                None => push(
                    &mut errors,
                    format!("task.channels.{name}"),
                    format!("`{name}` is not a configured expert"),
                ),
            }
        }
        if self.fusion.expert_order.is_empty() {
            self.fusion.expert_order = specs.iter().map(|s| s.name.clone()).collect();
        }
        for s in &specs {
            self.fusion
                .m_per_expert
                .entry(s.name.clone())
                .or_insert_with(|| default_m(&s.name));
        }
        if self.fusion.method == FusionMethod::Qformer {
            for s in &specs {
                let m = self.fusion.m_per_expert[&s.name].max(1);
                self.fusion
                    .queries_per_expert
                    .entry(s.name.clone())
                    .or_insert((s.patches() / m).max(1));
            }
        }

        let fusion = self.fusion_config_for(&specs);
        let mut cross = fusion.violations(&specs);
        cross.extend(self.decoder.violations());
        cross.extend(self.task.violations(self.decoder.vocab));
        cross.extend(self.phase(Phase::Pretrain).violations("train.pretrain"));
        cross.extend(self.phase(Phase::Finetune).violations("train.finetune"));
        for (i, order) in self.analysis.orders.iter().enumerate() {
            let mut a = order.clone();
            let mut b = fusion.expert_order.clone();
            a.sort();
            b.sort();
            if a != b {
                cross.push((
                    format!("analysis.orders[{i}]"),
                    "must be a permutation of the configured experts".into(),
                ));
            }
        }
        if errors.is_empty() && cross.is_empty() {
            if let Ok(n) = fusion.token_count(&specs) {
                let len = n + 1 + crate::harness::task::MAX_QUESTION_LEN + 2;
                if len > self.decoder.max_len {
                    cross.push((
                        "decoder.max_len".into(),
                        format!("{len} tokens per example exceed max_len {}", self.decoder.max_len),
                    ));
                }
            }
        }
        errors.extend(cross.into_iter().map(|(path, message)| Violation { path, message }));
        if !errors.is_empty() {
            return Err(ConfigErrors(errors));
        }
        self.resolved = crate::fusion::order_by(specs, &fusion.expert_order, |s| s.name.as_str())
            .expect("order validated above");
        Ok(self)
    }

    fn fusion_config_for(&self, specs: &[ExpertSpec]) -> FusionConfig {
        let d = self.decoder.d_model;
        let m_per_expert: BTreeMap<String, usize> = specs
            .iter()
            .map(|s| (s.name.clone(), self.fusion.m_per_expert.get(&s.name).copied().unwrap_or(1)))
            .chain(self.fusion.m_per_expert.iter().map(|(k, v)| (k.clone(), *v)))
            .collect();
        let queries_per_expert = specs
            .iter()
            .map(|s| {
                let m = m_per_expert[&s.name].max(1);
                let q = self
                    .fusion
                    .queries_per_expert
                    .get(&s.name)
                    .copied()
                    .unwrap_or((s.patches() / m).max(1));
                (s.name.clone(), q)
            })
            .chain(self.fusion.queries_per_expert.iter().map(|(k, v)| (k.clone(), *v)))
            .collect();
        FusionConfig {
            method: self.fusion.method,
            expert_order: self.fusion.expert_order.clone(),
            m_per_expert,
            queries_per_expert,
            d_model: d,
            d_hidden: d,
            qformer_width: self.fusion.qformer_width,
            qformer_layers: self.fusion.qformer_layers,
            qformer_heads: self.fusion.qformer_heads,
        }
    }

    /// Expert specs in concatenation order, with task channel overrides.
    pub fn expert_specs(&self) -> &[ExpertSpec] {
        &self.resolved
    }

    pub fn fusion_config(&self) -> FusionConfig {
        let mut f = self.fusion_config_for(&self.resolved);
        let names: BTreeSet<&str> = self.resolved.iter().map(|s| s.name.as_str()).collect();
        f.m_per_expert.retain(|k, _| names.contains(k.as_str()));
        f.queries_per_expert.retain(|k, _| names.contains(k.as_str()));
        f
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            experts: self.resolved.clone(),
            fusion: self.fusion_config(),
            pe_scheme: self.pe_scheme,
            decoder: self.decoder.clone(),
        }
    }

    pub fn phase(&self, phase: Phase) -> PhaseConfig {
        let s = match phase {
            Phase::Pretrain => &self.train.pretrain,
            Phase::Finetune => &self.train.finetune,
        };
        PhaseConfig::new(phase, s.lr, s.steps, s.batch_size).with_expert_dropout(s.expert_dropout)
    }

    /// Normalized dump with every default filled in.
    pub fn to_toml(&self) -> String {
        let raw = RawConfig {
            seed: Some(self.seed),
            output_dir: self.output_dir.to_string_lossy().into_owned(),
            scale: self.scale,
            pe_scheme: self.pe_scheme,
            experts: self.experts.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
            train: self.train.clone(),
            task: self.task.clone(),
            analysis: self.analysis.clone(),
        };
        toml::to_string_pretty(&raw).expect("config serializes")
    }

    /// Same experiment restricted to the named experts (in the given order).
    pub fn with_experts(&self, names: &[&str]) -> Result<Self, ConfigErrors> {
        let mut c = self.clone();
        c.experts.presets.retain(|p| names.contains(&p.as_str()));
        c.experts.custom.retain(|s| names.contains(&s.name.as_str()));
        c.fusion.expert_order = names.iter().map(|s| s.to_string()).collect();
        c.fusion.m_per_expert.retain(|k, _| names.contains(&k.as_str()));
        c.fusion.queries_per_expert.retain(|k, _| names.contains(&k.as_str()));
        c.task.channels.retain(|k, _| names.contains(&k.as_str()));
        c.analysis.orders.clear();
        c.validated()
    }
}
