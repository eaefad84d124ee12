//! End-to-end experiments: data, two-phase training, evaluation, analyses,
//! and the files they leave behind.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use crate::analysis::{accuracy_by, attention_contribution, token_budget_report, BudgetReport, ContributionReport};
use crate::error::{Error, Result};
use crate::expert::{Attribute, ExpertSpec};
use crate::fusion::{FusionConfig, FusionMethod};
use crate::lm::DecoderConfig;
use crate::model::ModelConfig;
use crate::training::PhaseConfig;
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{tsv, MetricsLog, OutputDir};
use crate::harness::task::{generate_task, required_vocab, TaskData, TaskSpec, MAX_QUESTION_LEN};
use crate::model::{Example, Model};
use crate::positional::PeScheme;
use crate::training::{run_pipeline, Phase, PipelineResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub by_attribute: BTreeMap<Attribute, f64>,
    pub examples: usize,
}

/// Accuracy of the first answer token, overall and per question kind.
pub fn evaluate(model: &Model<f32>, examples: &[Example], masked: &BTreeSet<String>) -> Result<EvalSummary> {
    if examples.is_empty() {
        return Err(Error::Task("empty evaluation set".into()));
    }
    let outcomes = examples
        .iter()
        .map(|ex| Ok((ex.attribute, model.first_answer_token(ex, masked)? == ex.answer[0])))
        .collect::<Result<Vec<_>>>()?;
    let correct = outcomes.iter().filter(|(_, ok)| *ok).count();
    Ok(EvalSummary {
        accuracy: correct as f64 / outcomes.len() as f64,
        by_attribute: accuracy_by(&outcomes),
        examples: outcomes.len(),
    })
}

/// A model after both training phases, with its data and evaluation.
#[derive(Debug, Clone)]
pub struct Trained {
    pub config: ExperimentConfig,
    pub data: TaskData,
    pub model: Model<f32>,
    pub pipeline: PipelineResult<f32>,
    pub eval: EvalSummary,
}

pub fn train(config: &ExperimentConfig) -> Result<Trained> {
    let data = generate_task(&config.task, config.seed)?;
    let mut model = Model::new(&config.model_config(), config.seed)?;
    let pipeline = run_pipeline(
        &mut model,
        &data.train,
        &config.phase(Phase::Pretrain),
        &config.phase(Phase::Finetune),
        config.seed,
    )?;
    let eval = evaluate(&model, &data.eval, &BTreeSet::new())?;
    Ok(Trained {
        config: config.clone(),
        data,
        model,
        pipeline,
        eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskRow {
    pub masked: String,
    pub attribute: Attribute,
    pub baseline: f64,
    pub accuracy: f64,
}

impl MaskRow {
    pub fn drop(&self) -> f64 {
        self.baseline - self.accuracy
    }
}

/// Masks each expert in turn and reports per-question-kind accuracy.
pub fn mask_study(model: &Model<f32>, eval: &[Example]) -> Result<Vec<MaskRow>> {
    let baseline = evaluate(model, eval, &BTreeSet::new())?;
    let mut rows = Vec::new();
    for name in model.expert_names() {
        let masked = evaluate(model, eval, &[name.clone()].into())?;
        for (a, acc) in &masked.by_attribute {
            rows.push(MaskRow {
                masked: name.clone(),
                attribute: *a,
                baseline: baseline.by_attribute[a],
                accuracy: *acc,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub accuracy: f64,
    pub by_attribute: BTreeMap<Attribute, f64>,
    pub final_loss: f64,
}

fn sweep_row(label: String, trained: &Trained) -> SweepRow {
    SweepRow {
        label,
        accuracy: trained.eval.accuracy,
        by_attribute: trained.eval.by_attribute.clone(),
        final_loss: trained.pipeline.reports[1].final_loss,
    }
}

fn permutations(items: &[String]) -> Vec<Vec<String>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head.clone());
            out.push(tail);
        }
    }
    out
}

/// Trains one model per expert order with identical seeds.
pub fn order_sweep(config: &ExperimentConfig, orders: &[Vec<String>]) -> Result<Vec<SweepRow>> {
    let orders = if orders.is_empty() {
        permutations(&config.fusion.expert_order)
    } else {
        orders.to_vec()
    };
    orders
        .iter()
        .map(|order| {
            let mut c = config.clone();
            c.fusion.expert_order = order.clone();
            let c = c.validated().map_err(|e| Error::from(e).context(format!("order {order:?}")))?;
            let trained = train(&c)?;
            Ok(sweep_row(order.join(","), &trained))
        })
        .collect()
}

/// Trains one model per PE scheme with identical seeds.
pub fn pe_sweep(config: &ExperimentConfig, schemes: &[PeScheme]) -> Result<Vec<SweepRow>> {
    let schemes = if schemes.is_empty() { &PeScheme::ALL[..] } else { schemes };
    schemes
        .iter()
        .map(|&s| {
            let mut c = config.clone();
            c.pe_scheme = s;
            let trained = train(&c).map_err(|e| e.context(format!("scheme {s}")))?;
            Ok(sweep_row(s.label().to_string(), &trained))
        })
        .collect()
}

pub fn budget(config: &ExperimentConfig) -> Result<BudgetReport> {
    token_budget_report(
        config.expert_specs(),
        &config.fusion_config(),
        config.pe_scheme,
        1 + MAX_QUESTION_LEN,
        config.decoder.max_len,
    )
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub trained: Trained,
    pub budget: BudgetReport,
    pub contribution: ContributionReport,
    pub mask: Vec<MaskRow>,
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let attrs = r
                .by_attribute
                .iter()
                .map(|(a, v)| format!("{a}={v:.6}"))
                .collect::<Vec<_>>()
                .join(",");
            vec![r.label.clone(), format!("{:.6}", r.accuracy), attrs, format!("{:.6}", r.final_loss)]
        })
        .collect();
    tsv(&["label", "accuracy", "by_attribute", "final_loss"], &body)
}

pub fn mask_tsv(rows: &[MaskRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.masked.clone(),
                r.attribute.to_string(),
                format!("{:.6}", r.baseline),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.drop()),
            ]
        })
        .collect();
    tsv(&["masked", "question", "baseline", "accuracy", "drop"], &body)
}

/// Runs the full experiment and writes every output under `out`.
pub fn run_experiment(config: &ExperimentConfig, out: impl AsRef<Path>) -> Result<ExperimentSummary> {
    let ctx = |e: Error| e.context(format!("experiment seed {}", config.seed));
    let mut dir = OutputDir::create(out.as_ref())?;
    dir.write("config.toml", config.to_toml())?;
    let mut log = MetricsLog::new();

    let budget = budget(config).map_err(ctx)?;
    dir.write("budget.tsv", budget.to_tsv())?;
    log.record("budget", &budget)?;

    let trained = train(config).map_err(ctx)?;
    let mut loss_rows = Vec::new();
    for report in &trained.pipeline.reports {
        for (step, loss) in report.losses.iter().enumerate() {
            loss_rows.push(vec![report.phase.label().to_string(), step.to_string(), format!("{loss:.6}")]);
        }
        log.record(
            "phase",
            json!({
                "phase": report.phase,
                "steps": report.losses.len(),
                "final_loss": report.final_loss,
                "changed_groups": report.changed_groups(),
                "digests_after": report.digests_after,
            }),
        )?;
    }
    dir.write("train_loss.tsv", tsv(&["phase", "step", "loss"], &loss_rows))?;

    let p1 = Checkpoint::from_store(&trained.pipeline.phase1, config);
    let p2 = Checkpoint::from_store(&trained.pipeline.phase2, config);
    dir.write("phase1.ckpt", p1.to_bytes())?;
    dir.write("phase2.ckpt", p2.to_bytes())?;

    log.record("eval", &trained.eval)?;
    let eval_rows: Vec<Vec<String>> = std::iter::once(vec!["all".to_string(), format!("{:.6}", trained.eval.accuracy)])
        .chain(
            trained
                .eval
                .by_attribute
                .iter()
                .map(|(a, v)| vec![a.to_string(), format!("{v:.6}")]),
        )
        .collect();
    dir.write("eval.tsv", tsv(&["question", "accuracy"], &eval_rows))?;

    let n = match config.analysis.contribution_samples {
        0 => trained.data.eval.len(),
        n => n.min(trained.data.eval.len()),
    };
    let contribution = attention_contribution(&trained.model, &trained.data.eval[..n], &BTreeSet::new()).map_err(ctx)?;
    dir.write("contribution.tsv", contribution.to_tsv())?;
    log.record("contribution", &contribution)?;

    let mask = if config.analysis.mask {
        let rows = mask_study(&trained.model, &trained.data.eval).map_err(ctx)?;
        dir.write("mask.tsv", mask_tsv(&rows))?;
        for r in &rows {
            log.record("mask", r)?;
        }
        rows
    } else {
        Vec::new()
    };

    dir.write("metrics.jsonl", log.render())?;
    dir.finish()?;
    Ok(ExperimentSummary {
        trained,
        budget,
        contribution,
        mask,
    })
}

/// A model small enough for exhaustive finite-difference checks: two tiny
/// experts, a 4-wide single-layer decoder, and two examples.
pub fn micro_model(method: FusionMethod, scheme: PeScheme, seed: u64) -> Result<(Model<f64>, Vec<Example>)> {
    let experts = vec![
        ExpertSpec {
            name: "a".into(),
            grid_rows: 2,
            grid_cols: 4,
            dim: 3,
            profile: [Attribute::Color].into(),
            seed: 11,
        },
        ExpertSpec {
            name: "b".into(),
            grid_rows: 2,
            grid_cols: 2,
            dim: 2,
            profile: [Attribute::Count].into(),
            seed: 12,
        },
    ];
    let d = 4;
    let fusion = FusionConfig {
        method,
        expert_order: vec!["a".into(), "b".into()],
        m_per_expert: [("a".to_string(), 2), ("b".to_string(), 1)].into(),
        queries_per_expert: [("a".to_string(), 2), ("b".to_string(), 1)].into(),
        d_model: d,
        d_hidden: d,
        qformer_width: 4,
        qformer_layers: 1,
        qformer_heads: 2,
    };
    let decoder = DecoderConfig {
        d_model: d,
        layers: 1,
        heads: 2,
        vocab: required_vocab(),
        max_len: 64,
        max_text_len: 8,
        ffn: 8,
    };
    let config = ModelConfig {
        experts,
        fusion,
        pe_scheme: scheme,
        decoder,
    };
    let model = Model::new(&config, seed)?;
    let task = TaskSpec {
        colors: 2,
        max_count: 2,
        marks: 2,
        layouts: 2,
        train_size: 2,
        eval_size: 2,
        ..TaskSpec::default()
    };
    Ok((model, generate_task(&task, seed)?.train))
}

pub fn micro_phase(phase: Phase) -> PhaseConfig {
    PhaseConfig::new(phase, 1e-3, 1, 2)
}
