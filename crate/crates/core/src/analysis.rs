//! Attention contribution, expert masking, order sweeps and token budgets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::ExpertSpec;
use crate::fusion::FusionConfig;
use crate::lm::{ModelInput, Source};
use crate::model::{Example, Model};
use crate::numerics::{Graph, Matrix, Real};
use crate::positional::{position_budget, PeScheme};

/// Mean attention mass that answer-producing rows place on each source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub prompt: f64,
    /// Per expert, in concatenation order.
    pub experts: Vec<(String, f64)>,
    /// Answer text attended so far.
    pub residual: f64,
    pub samples: usize,
}

impl ContributionReport {
    pub fn expert(&self, name: &str) -> Option<f64> {
        self.experts.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn total(&self) -> f64 {
        self.prompt + self.residual + self.experts.iter().map(|(_, v)| v).sum::<f64>()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("source\tmass\n");
        out.push_str(&format!("text_prompt\t{:.6}\n", self.prompt));
        for (name, v) in &self.experts {
            out.push_str(&format!("{name}\t{v:.6}\n"));
        }
        out.push_str(&format!("residual\t{:.6}\n", self.residual));
        out
    }
}

/// Rows whose next-token prediction is an answer token.
pub fn output_rows(input: &ModelInput) -> Vec<usize> {
    input.answer_targets().into_iter().map(|(t, _)| t).collect()
}

/// Contribution of one sample from raw per-layer, per-head maps, averaged
/// uniformly over `rows`, layers and heads.
pub fn sample_contribution<T: Real>(
    input: &ModelInput,
    experts: &[String],
    rows: &[usize],
    maps: &[Vec<Matrix<T>>],
) -> Result<ContributionReport> {
    if rows.is_empty() {
        return Err(Error::Analysis("sample has no answer tokens".into()));
    }
    let spans = input.spans();
    let mut prompt = 0.0;
    let mut residual = 0.0;
    let mut per_expert = vec![0.0; experts.len()];
    let mut count = 0usize;
    for layer in maps {
        for head in layer {
            for &r in rows {
                let row = head.row(r);
                for (source, start, len) in &spans {
                    let mass: f64 = row[*start..start + len].iter().map(|w| w.as_f64()).sum();
                    match source {
                        Source::Prompt => prompt += mass,
                        Source::Answer => residual += mass,
                        Source::Expert(e) => {
                            let i = experts
                                .iter()
                                .position(|x| x == e)
                                .ok_or_else(|| Error::UnknownExpert(e.clone()))?;
                            per_expert[i] += mass;
                        }
                    }
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Analysis("no attention maps".into()));
    }
    let n = count as f64;
    Ok(ContributionReport {
        prompt: prompt / n,
        experts: experts.iter().cloned().zip(per_expert.into_iter().map(|v| v / n)).collect(),
        residual: residual / n,
        samples: 1,
    })
}

/// Teacher-forced sequence of `example` with its raw attention maps.
pub fn attention_maps<T: Real>(
    model: &Model<T>,
    example: &Example,
    masked: &BTreeSet<String>,
) -> Result<(ModelInput, Vec<Vec<Matrix<T>>>)> {
    let mut g = Graph::new();
    let input = model.input(&mut g, example, masked)?;
    let (_, attention) = model.decoder.hidden(&mut g, &model.store, &input)?;
    let maps = attention
        .iter()
        .map(|&a| g.attention_weights(a).map(<[_]>::to_vec).unwrap_or_default())
        .collect();
    Ok((input, maps))
}

fn mean_reports(reports: &[ContributionReport]) -> Result<ContributionReport> {
    let first = reports.first().ok_or_else(|| Error::Analysis("empty dataset".into()))?;
    let n = reports.len() as f64;
    let mut out = ContributionReport {
        prompt: 0.0,
        experts: first.experts.iter().map(|(e, _)| (e.clone(), 0.0)).collect(),
        residual: 0.0,
        samples: reports.len(),
    };
    for r in reports {
        out.prompt += r.prompt / n;
        out.residual += r.residual / n;
        for ((_, acc), (_, v)) in out.experts.iter_mut().zip(&r.experts) {
            *acc += v / n;
        }
    }
    Ok(out)
}

/// Dataset-mean contribution with `masked` experts hidden.
pub fn attention_contribution<T: Real>(
    model: &Model<T>,
    dataset: &[Example],
    masked: &BTreeSet<String>,
) -> Result<ContributionReport> {
    if dataset.is_empty() {
        return Err(Error::Analysis("empty dataset".into()));
    }
    let experts = model.expert_names();
    let reports = dataset
        .iter()
        .map(|ex| {
            let (input, maps) = attention_maps(model, ex, masked)?;
            sample_contribution(&input, &experts, &output_rows(&input), &maps)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_reports(&reports)
}

/// Greedy output and contribution for one input with experts masked out.
pub fn mask_expert<T: Real>(
    model: &Model<T>,
    example: &Example,
    masked: &BTreeSet<String>,
) -> Result<(Vec<usize>, ContributionReport)> {
    model.check_masks(masked)?;
    let tokens = model.generate(example, masked)?;
    let report = attention_contribution(model, std::slice::from_ref(example), masked)?;
    Ok((tokens, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub expert: String,
    pub raw_patches: usize,
    pub tokens: usize,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub rows: Vec<BudgetRow>,
    pub scheme: PeScheme,
    pub distinct_pe: usize,
    pub vision_tokens: usize,
    pub text_tokens: usize,
    pub total_length: usize,
    pub max_len: usize,
    pub overflow: bool,
    pub ratio: f64,
}

impl BudgetReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("expert\traw_patches\ttokens\tgrid_rows\tgrid_cols\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.expert, r.raw_patches, r.tokens, r.grid.0, r.grid.1
            ));
        }
        out.push_str(&format!(
            "# scheme={} distinct_pe={} vision={} text={} total={} max_len={} overflow={} ratio={}\n",
            self.scheme,
            self.distinct_pe,
            self.vision_tokens,
            self.text_tokens,
            self.total_length,
            self.max_len,
            self.overflow,
            self.ratio
        ));
        out
    }
}

/// Token and PE accounting for one image plus `prompt_len` text tokens.
pub fn token_budget_report(
    experts: &[ExpertSpec],
    fusion: &FusionConfig,
    scheme: PeScheme,
    prompt_len: usize,
    max_len: usize,
) -> Result<BudgetReport> {
    let grids = fusion.output_grids(experts)?;
    let rows: Vec<BudgetRow> = grids
        .iter()
        .map(|(name, grid)| {
            let spec = experts.iter().find(|e| &e.name == name).expect("checked by output_grids");
            BudgetRow {
                expert: name.clone(),
                raw_patches: spec.patches(),
                tokens: grid.0 * grid.1,
                grid: *grid,
            }
        })
        .collect();
    let shapes: Vec<_> = grids.iter().map(|(_, g)| *g).collect();
    let distinct_pe = position_budget(scheme, &shapes)?;
    let vision_tokens: usize = rows.iter().map(|r| r.tokens).sum();
    let total_length = vision_tokens + prompt_len;
    Ok(BudgetReport {
        rows,
        scheme,
        distinct_pe,
        vision_tokens,
        text_tokens: prompt_len,
        total_length,
        max_len,
        overflow: total_length > max_len,
        ratio: if prompt_len == 0 {
            f64::INFINITY
        } else {
            vision_tokens as f64 / prompt_len as f64
        },
    })
}

/// Per-label accuracy aggregated from `(label, correct)` outcomes.
pub fn accuracy_by<K: Ord + Clone>(outcomes: &[(K, bool)]) -> BTreeMap<K, f64> {
    let mut tally: BTreeMap<K, (usize, usize)> = BTreeMap::new();
    for (k, ok) in outcomes {
        let e = tally.entry(k.clone()).or_default();
        e.0 += usize::from(*ok);
        e.1 += 1;
    }
    tally.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect()
}
