//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use polyvis::analysis::{attention_maps, output_rows, sample_contribution, token_budget_report};
use polyvis::expert::{preset, preset_specs, Attribute, ExpertSpec, PatchFeatures, Scale};
use polyvis::fusion::{group_patches, mlp_fuse, qformer_fuse, FusionConfig, FusionMethod, FusionParams};
use polyvis::harness::experiment::{micro_model, micro_phase};
use polyvis::harness::{bayes_rate, load_checkpoint, mask_study, run_experiment, train, ExperimentConfig};
use polyvis::lm::Source;
use polyvis::numerics::{Group, Matrix, ParamStore};
use polyvis::positional::{assign_positions, embed_positions, PeScheme, PeTables};
use polyvis::training::{grad_check, run_pipeline, Phase};
use polyvis::model::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn full_scale(name: &str) -> ExpertSpec {
    preset(name, Scale::PaperGeometry).expect("preset exists")
}

fn features(spec: &ExpertSpec, seed: u64) -> PatchFeatures<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.patches();
    let data = (0..n * spec.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PatchFeatures {
        expert: spec.name.clone(),
        grid: (spec.grid_rows, spec.grid_cols),
        features: Matrix::from_vec(n, spec.dim, data).unwrap(),
    }
}

fn pe_budgets() -> Outcome {
    let clip = full_scale("clip");
    let sam = full_scale("sam");
    let mut got = Vec::new();
    for (spec, scheme, want) in [
        (&clip, PeScheme::Original, 576),
        (&clip, PeScheme::ShareByRow, 24),
        (&clip, PeScheme::ShareAll, 1),
        (&sam, PeScheme::ShareByRow, 64),
    ] {
        let fusion = FusionConfig::mlp(&[spec.clone()], 8);
        let r = token_budget_report(&[spec.clone()], &fusion, scheme, 8, usize::MAX).map_err(err)?;
        ensure!(r.distinct_pe == want, "{} {scheme}: {} distinct PEs, want {want}", spec.name, r.distinct_pe);
        got.push(format!("{} {}={}", spec.name, scheme.label(), r.distinct_pe));
    }
    Ok(got.join(", "))
}

fn sam_ratio() -> Outcome {
    let sam = full_scale("sam");
    let fusion = FusionConfig::mlp(&[sam.clone()], 8);
    let r = token_budget_report(&[sam], &fusion, PeScheme::ShareByRow, 8, usize::MAX).map_err(err)?;
    ensure!(r.vision_tokens == 4096, "{} vision tokens", r.vision_tokens);
    ensure!(r.ratio == 512.0 && r.ratio > 500.0, "ratio {}", r.ratio);
    Ok(format!("{} vision / {} text = {}", r.vision_tokens, r.text_tokens, r.ratio))
}

fn compression_law() -> Outcome {
    let mut checked = 0;
    for scale in [Scale::Toy, Scale::PaperGeometry] {
        for spec in preset_specs(scale) {
            let f = features(&spec, 1);
            for m in [1, 2, 4, 8, 16] {
                let mut config = FusionConfig::mlp(&[spec.clone()], 8);
                config.m_per_expert.insert(spec.name.clone(), m);
                let mut store = ParamStore::<f64>::new();
                let valid = spec.grid_cols % m == 0;
                match FusionParams::new(&config, &[spec.clone()], &mut store, 0) {
                    Ok(params) => {
                        ensure!(valid, "{} accepted m={m}", spec.name);
                        let grouped = group_patches(&f, m).map_err(err)?;
                        let fused = mlp_fuse(&[grouped], &params, &store).map_err(err)?;
                        let n = fused.tokens.rows();
                        ensure!(n * m == spec.patches(), "{} m={m}: {n} tokens from {}", spec.name, spec.patches());
                        checked += 1;
                    }
                    Err(e) => ensure!(!valid, "{} m={m} rejected: {e}", spec.name),
                }
            }
        }
    }

    // Q-Former output count at two resolutions of the same expert.
    let mut counts = Vec::new();
    for side in [14, 64] {
        let specs = vec![
            ExpertSpec {
                grid_rows: side,
                grid_cols: side,
                dim: 4,
                ..preset("clip", Scale::Toy).unwrap()
            },
            ExpertSpec {
                dim: 4,
                ..preset("dinov2", Scale::Toy).unwrap()
            },
        ];
        let config = FusionConfig {
            method: FusionMethod::Qformer,
            queries_per_expert: [("clip".to_string(), 6), ("dinov2".to_string(), 4)].into(),
            qformer_width: 4,
            qformer_layers: 1,
            qformer_heads: 2,
            ..FusionConfig::mlp(&specs, 8)
        };
        let mut store = ParamStore::<f64>::new();
        let params = FusionParams::new(&config, &specs, &mut store, 2).map_err(err)?;
        let feats: Vec<_> = specs.iter().map(|s| features(s, 3)).collect();
        counts.push(qformer_fuse(&feats, &params, &store).map_err(err)?.tokens.rows());
    }
    ensure!(counts == [10, 10], "Q-Former counts {counts:?}");
    Ok(format!("{checked} (preset, m) forwards; Q-Former 10 tokens at 14x14 and 64x64"))
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    for method in [FusionMethod::Mlp, FusionMethod::Qformer] {
        for scheme in PeScheme::ALL {
            let (mut model, batch) = micro_model(method, scheme, 1).map_err(err)?;
            let report = grad_check(&mut model, &batch, &micro_phase(Phase::Finetune)).map_err(err)?;
            ensure!(
                report.max_rel_error.contains_key(&Group::Lm),
                "{method:?}/{scheme}: decoder not checked"
            );
            ensure!(report.max() <= 1e-5, "{method:?}/{scheme}: max rel error {:.3e}", report.max());
            worst = worst.max(report.max());
        }
    }
    Ok(format!("8 configs, worst relative error {worst:.2e}"))
}

fn short(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default_with_seed(seed);
    c.train.pretrain.steps = 12;
    c.train.finetune.steps = 12;
    c.task.train_size = 64;
    c.task.eval_size = 32;
    c.analysis.contribution_samples = 8;
    c.validated().expect("short config is valid")
}

fn freeze_discipline() -> Outcome {
    let config = short(0);
    let data = polyvis::harness::generate_task(&config.task, config.seed).map_err(err)?;
    let mut model = Model::<f32>::new(&config.model_config(), config.seed).map_err(err)?;
    let init = model.store.digests();
    let result = run_pipeline(
        &mut model,
        &data.train,
        &config.phase(Phase::Pretrain),
        &config.phase(Phase::Finetune),
        config.seed,
    )
    .map_err(err)?;
    let p1 = result.phase1.digests();
    let p2 = result.phase2.digests();
    ensure!(p1[&Group::Expert] == init[&Group::Expert], "phase 1 moved the experts");
    ensure!(p1[&Group::Lm] == init[&Group::Lm], "phase 1 moved the decoder");
    ensure!(p1[&Group::Fusion] != init[&Group::Fusion], "phase 1 did not train fusion");
    ensure!(p2[&Group::Expert] == init[&Group::Expert], "phase 2 moved the experts");
    ensure!(p2[&Group::Lm] != p1[&Group::Lm], "phase 2 did not train the decoder");
    Ok("expert and decoder hashes intact after phase 1, expert hashes intact after phase 2".into())
}

fn oracles() -> Outcome {
    // m = 1 single-expert MLP against a plain two-layer MLP per patch.
    let spec = ExpertSpec {
        dim: 5,
        grid_rows: 2,
        grid_cols: 3,
        ..preset("clip", Scale::Toy).unwrap()
    };
    let mut store = ParamStore::<f64>::new();
    let params = FusionParams::new(&FusionConfig::mlp(&[spec.clone()], 6), &[spec.clone()], &mut store, 9).map_err(err)?;
    let f = features(&spec, 4);
    let fused = mlp_fuse(&[group_patches(&f, 1).map_err(err)?], &params, &store).map_err(err)?;
    let FusionParams::Mlp(mlp) = &params else {
        return Err("MLP config built a different fusion".into());
    };
    let dense = |x: &[f64], l: polyvis::layers::Linear| -> Vec<f64> {
        let w = store.value(l.w);
        let b = store.value(l.b.unwrap());
        (0..w.cols())
            .map(|o| b.get(0, o) + (0..w.rows()).map(|i| x[i] * w.get(i, o)).sum::<f64>())
            .collect()
    };
    let silu = |v: f64| v / (1.0 + (-v).exp());
    let mut mlp_err = 0.0f64;
    for p in 0..spec.patches() {
        let h: Vec<f64> = dense(f.features.row(p), mlp.first_layer("clip").unwrap()).into_iter().map(silu).collect();
        for (a, b) in fused.tokens.row(p).iter().zip(dense(&h, mlp.second_layer())) {
            mlp_err = mlp_err.max((a - b).abs() / (1.0 + b.abs()));
        }
    }
    ensure!(mlp_err <= 1e-12, "m=1 MLP differs from the plain MLP by {mlp_err:.3e}");

    // Zero column table turns row-and-column sharing into row sharing.
    let grids = [(3, 4), (2, 2)];
    let tables = |scheme| {
        let mut store = ParamStore::<f64>::new();
        let t = PeTables::new(&mut store, 3, scheme, &grids, 8, 16).unwrap();
        (store, t)
    };
    let (store_r, t_r) = tables(PeScheme::ShareByRow);
    let (mut store_rc, t_rc) = tables(PeScheme::ShareByRowCol);
    store_rc.get_mut(t_rc.col.unwrap()).value.fill(0.0);
    let by_row = embed_positions(&assign_positions(PeScheme::ShareByRow, &grids).map_err(err)?, &t_r, &store_r).map_err(err)?;
    let by_rc =
        embed_positions(&assign_positions(PeScheme::ShareByRowCol, &grids).map_err(err)?, &t_rc, &store_rc).map_err(err)?;
    ensure!(by_row == by_rc, "zero column table is not bitwise equal to row sharing");

    // Streaming contribution against a brute-force sum over every weight.
    let mut contrib_err = 0.0f64;
    for scheme in PeScheme::ALL {
        let (model, data) = micro_model(FusionMethod::Mlp, scheme, 0).map_err(err)?;
        let experts = model.expert_names();
        for ex in &data {
            let (input, maps) = attention_maps(&model, ex, &BTreeSet::new()).map_err(err)?;
            let report = sample_contribution(&input, &experts, &output_rows(&input), &maps).map_err(err)?;
            let rows: Vec<usize> = (0..input.len() - 1).filter(|&t| input.sources[t + 1] == Source::Answer).collect();
            let (mut prompt, mut residual, mut n) = (0.0, 0.0, 0.0);
            let mut per = vec![0.0; experts.len()];
            for head in maps.iter().flatten() {
                for &r in &rows {
                    n += 1.0;
                    for key in 0..input.len() {
                        let w = head.get(r, key);
                        match &input.sources[key] {
                            Source::Prompt => prompt += w,
                            Source::Answer => residual += w,
                            Source::Expert(e) => per[experts.iter().position(|x| x == e).unwrap()] += w,
                        }
                    }
                }
            }
            contrib_err = contrib_err.max((report.prompt - prompt / n).abs());
            contrib_err = contrib_err.max((report.residual - residual / n).abs());
            for ((_, got), want) in report.experts.iter().zip(&per) {
                contrib_err = contrib_err.max((got - want / n).abs());
            }
        }
    }
    ensure!(contrib_err < 1e-10, "contribution differs from brute force by {contrib_err:.3e}");
    Ok(format!("MLP {mlp_err:.1e}, PE bitwise, contribution {contrib_err:.1e}"))
}

/// The attribute each expert sees and the one asked about that it cannot see.
fn hidden_attribute(config: &ExperimentConfig) -> (BTreeSet<Attribute>, Attribute) {
    let spec = &config.expert_specs()[0];
    let visible = config.task.channels.get(&spec.name).unwrap_or(&spec.profile).clone();
    let hidden = config
        .task
        .questions
        .iter()
        .copied()
        .find(|a| !visible.contains(a))
        .expect("some question needs the other expert");
    (visible, hidden)
}

fn synergy() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in 0..5 {
        let t = Instant::now();
        let config = ExperimentConfig::default_with_seed(seed);
        let dual = train(&config).map_err(err)?;
        if dual.eval.accuracy < 0.95 {
            failures.push(format!("seed {seed}: dual accuracy {:.4}", dual.eval.accuracy));
        }

        let mut singles = Vec::new();
        for name in config.fusion.expert_order.clone() {
            let single_config = config.with_experts(&[&name]).map_err(err)?;
            let (visible, hidden) = hidden_attribute(&single_config);
            let single = train(&single_config).map_err(err)?;
            let bayes = bayes_rate(&single.data.eval, &visible, hidden).ok_or("no hidden-attribute questions")?;
            let acc = single.eval.by_attribute[&hidden];
            if (acc - bayes).abs() > 0.05 {
                failures.push(format!("seed {seed}: {name}-only {hidden} accuracy {acc:.4} vs Bayes {bayes:.4}"));
            }
            singles.push(format!("{name}-only {hidden} {acc:.3}/{bayes:.3}"));
        }

        let mut drops = Vec::new();
        for row in mask_study(&dual.model, &dual.data.eval).map_err(err)? {
            let own = config
                .expert_specs()
                .iter()
                .find(|s| s.name == row.masked)
                .map(|s| config.task.channels.get(&s.name).unwrap_or(&s.profile).contains(&row.attribute))
                .unwrap_or(false);
            let ok = if own { row.drop() > 0.3 } else { row.drop() < 0.05 };
            if !ok {
                failures.push(format!("seed {seed}: masking {} drops {} by {:.4}", row.masked, row.attribute, row.drop()));
            }
            drops.push(format!("-{} {}:{:.3}", row.masked, row.attribute, row.drop()));
        }
        lines.push(format!(
            "seed {seed} ({:.0}s): dual {:.3}; {}; drops {}",
            t.elapsed().as_secs_f64(),
            dual.eval.accuracy,
            singles.join(", "),
            drops.join(" ")
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    let total = start.elapsed();
    if total > Duration::from_secs(300) {
        failures.push(format!("took {:.0}s, budget 300s", total.as_secs_f64()));
    }
    if failures.is_empty() {
        Ok("seeds 0-4: dual >= 0.95, singles at Bayes, masks separate channels".into())
    } else {
        Err(failures.join("; "))
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != "manifest.json")
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let config = short(4);
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let summary = run_experiment(&config, a.path()).map_err(err)?;
    run_experiment(&config, b.path()).map_err(err)?;
    let fa = files(a.path());
    ensure!(fa == files(b.path()), "reruns differ");
    for name in ["metrics.jsonl", "phase1.ckpt", "phase2.ckpt"] {
        ensure!(fa.iter().any(|(n, _)| n == name), "{name} missing");
    }

    for (name, store) in [("phase1.ckpt", &summary.trained.pipeline.phase1), ("phase2.ckpt", &summary.trained.pipeline.phase2)] {
        let bytes = std::fs::read(a.path().join(name)).map_err(err)?;
        let ck = load_checkpoint(a.path().join(name)).map_err(err)?;
        ensure!(ck.to_bytes() == bytes, "{name} does not re-serialize to the same bytes");
        let model = ck.to_model().map_err(err)?;
        ensure!(model.store.digests() == store.digests(), "{name} restores different parameters");
        for ((_, x), (_, y)) in model.store.iter().zip(store.iter()) {
            let same = x.value.data().iter().zip(y.value.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            ensure!(same, "{name} values are not bit-exact");
        }
    }
    Ok(format!("{} files byte-identical across reruns, checkpoints bit-exact", fa.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 pe-budget", pe_budgets),
        ("2 vision-text-ratio", sam_ratio),
        ("3 compression-law", compression_law),
        ("4 gradient-correctness", gradients),
        ("5 freeze-discipline", freeze_discipline),
        ("6 oracle-equivalences", oracles),
        ("7 multi-expert-synergy", synergy),
        ("8 determinism-persistence", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.2}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
