use super::*;
use crate::expert::{preset, preset_specs, Attribute, Scale, PRESET_NAMES};
use crate::layers::Linear;
use crate::numerics::ParamId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(name: &str, rows: usize, cols: usize, dim: usize) -> ExpertSpec {
    ExpertSpec {
        name: name.into(),
        grid_rows: rows,
        grid_cols: cols,
        dim,
        profile: [Attribute::Color].into(),
        seed: 1,
    }
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

fn qformer_config(specs: &[ExpertSpec], queries: usize, width: usize) -> FusionConfig {
    FusionConfig {
        method: FusionMethod::Qformer,
        queries_per_expert: specs.iter().map(|s| (s.name.clone(), queries)).collect(),
        qformer_width: width,
        qformer_layers: 1,
        qformer_heads: 2,
        ..FusionConfig::mlp(specs, 8)
    }
}

fn segment_rows(fused: &FusedVisionTokens<f64>, expert: &str) -> Matrix<f64> {
    let seg = fused.segments.iter().find(|s| s.expert == expert).unwrap();
    fused.tokens.slice_rows(seg.start, seg.len).unwrap()
}

fn bump(store: &mut ParamStore<f64>, id: ParamId) {
    store.get_mut(id).value.data_mut()[0] += 0.5;
}

#[test]
fn clip_grouping_by_four() {
    let clip = preset("clip", Scale::Toy).unwrap();
    let f = features(&clip, 0);
    let g = group_patches(&f, 4).unwrap();
    assert_eq!(g.tokens.shape(), (144, 4 * clip.dim));
    assert_eq!(g.grid, (24, 6));
    // Row j stacks patches 4j..4j+4 side by side.
    for j in [0, 7, 143] {
        for k in 0..4 {
            assert_eq!(&g.tokens.row(j)[k * clip.dim..(k + 1) * clip.dim], f.features.row(4 * j + k));
        }
    }
}

#[test]
fn grouping_by_one_is_identity() {
    let f = features(&spec("a", 3, 5, 4), 2);
    let g = group_patches(&f, 1).unwrap();
    assert_eq!(g.tokens, f.features);
    assert_eq!(g.grid, (3, 5));
}

#[test]
fn grouping_rejects_bad_factors() {
    let layout = preset("layoutlmv3", Scale::Toy).unwrap();
    let f = features(&layout, 0);
    assert!(matches!(group_patches(&f, 4), Err(Error::Grouping(_))));
    assert!(matches!(group_patches(&f, 0), Err(Error::Grouping(_))));
    let wide = features(&spec("w", 1, 32, 2), 0);
    assert!(matches!(group_patches(&wide, 32), Err(Error::Grouping(_))));
    assert!(group_patches(&wide, 16).is_ok());
}

#[test]
fn single_expert_m1_matches_plain_mlp() {
    let s = spec("solo", 2, 3, 5);
    let d = 6;
    let mut store = ParamStore::<f64>::new();
    let params = FusionParams::new(&FusionConfig::mlp(&[s.clone()], d), &[s.clone()], &mut store, 9).unwrap();
    let f = features(&s, 4);
    let fused = mlp_fuse(&[group_patches(&f, 1).unwrap()], &params, &store).unwrap();

    let FusionParams::Mlp(mlp) = &params else { unreachable!() };
    let l1 = mlp.first_layer("solo").unwrap();
    let l2 = mlp.second_layer();
    let dense = |x: &[f64], l: Linear| -> Vec<f64> {
        let w = store.value(l.w);
        let b = store.value(l.b.unwrap());
        (0..w.cols())
            .map(|o| b.get(0, o) + (0..w.rows()).map(|i| x[i] * w.get(i, o)).sum::<f64>())
            .collect()
    };
    let silu = |v: f64| v / (1.0 + (-v).exp());
    for p in 0..s.patches() {
        let h: Vec<f64> = dense(f.features.row(p), l1).into_iter().map(silu).collect();
        let out = dense(&h, l2);
        for (a, b) in fused.tokens.row(p).iter().zip(&out) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn clip_and_dinov2_at_m4_give_208_tokens() {
    let specs: Vec<_> = ["clip", "dinov2"].iter().map(|n| preset(n, Scale::Toy).unwrap()).collect();
    let mut config = FusionConfig::mlp(&specs, 8);
    config.m_per_expert = [("clip".to_string(), 4), ("dinov2".to_string(), 4)].into();
    assert_eq!(config.token_count(&specs).unwrap(), 208);
    let mut store = ParamStore::<f64>::new();
    let params = FusionParams::new(&config, &specs, &mut store, 0).unwrap();
    let feats: Vec<_> = specs.iter().map(|s| features(s, 1)).collect();
    let mut g = Graph::new();
    let fused = params.forward(&mut g, &store, &feats).unwrap();
    assert_eq!(g.value(fused.node).shape(), (208, 8));
    let spans: Vec<_> = fused.segments.iter().map(|s| (s.expert.as_str(), s.start, s.len, s.grid)).collect();
    assert_eq!(spans, vec![("clip", 0, 144, (24, 6)), ("dinov2", 144, 64, (16, 4))]);
}

#[test]
fn reordering_moves_spans_but_not_values() {
    let specs = vec![spec("a", 2, 2, 3), spec("b", 3, 2, 2)];
    let feats: Vec<_> = specs.iter().map(|s| features(s, 5)).collect();
    let run = |order: [&str; 2]| {
        let mut config = FusionConfig::mlp(&specs, 4);
        config.expert_order = order.iter().map(|s| s.to_string()).collect();
        let mut store = ParamStore::<f64>::new();
        let params = FusionParams::new(&config, &specs, &mut store, 3).unwrap();
        let ordered = order_experts(feats.clone(), &config.expert_order).unwrap();
        let grouped: Vec<_> = ordered.iter().map(|f| group_patches(f, 1).unwrap()).collect();
        mlp_fuse(&grouped, &params, &store).unwrap()
    };
    let ab = run(["a", "b"]);
    let ba = run(["b", "a"]);
    assert_eq!(ab.segments[0].expert, "a");
    assert_eq!(ba.segments[0].expert, "b");
    assert_eq!(ba.segments[1].start, 6);
    for name in ["a", "b"] {
        assert_eq!(segment_rows(&ab, name), segment_rows(&ba, name));
    }
}

#[test]
fn token_count_law_for_every_preset_and_factor() {
    for scale in [Scale::Toy, Scale::PaperGeometry] {
        for s in preset_specs(scale) {
            for m in [1, 2, 4, 8, 16] {
                let mut config = FusionConfig::mlp(&[s.clone()], 8);
                config.m_per_expert.insert(s.name.clone(), m);
                match config.token_count(&[s.clone()]) {
                    Ok(n) => {
                        assert_eq!(s.grid_cols % m, 0);
                        assert_eq!(n * m, s.patches(), "{} m={m}", s.name);
                    }
                    Err(_) => assert_ne!(s.grid_cols % m, 0, "{} m={m}", s.name),
                }
            }
        }
    }
}

#[test]
fn mlp_parameter_sharing() {
    let specs = vec![spec("a", 2, 2, 3), spec("b", 2, 4, 2)];
    let mut config = FusionConfig::mlp(&specs, 4);
    config.m_per_expert.insert("b".into(), 2);
    let mut store = ParamStore::<f64>::new();
    let params = FusionParams::new(&config, &specs, &mut store, 3).unwrap();
    let FusionParams::Mlp(mlp) = params.clone() else { unreachable!() };
    let grouped: Vec<_> = specs
        .iter()
        .map(|s| group_patches(&features(s, 8), config.m_for(&s.name)).unwrap())
        .collect();
    let base = mlp_fuse(&grouped, &params, &store).unwrap();

    let mut shared = store.clone();
    bump(&mut shared, mlp.second_layer().w);
    let out = mlp_fuse(&grouped, &params, &shared).unwrap();
    for name in ["a", "b"] {
        assert_ne!(segment_rows(&out, name), segment_rows(&base, name));
    }

    let mut own = store.clone();
    bump(&mut own, mlp.first_layer("a").unwrap().w);
    let out = mlp_fuse(&grouped, &params, &own).unwrap();
    assert_ne!(segment_rows(&out, "a"), segment_rows(&base, "a"));
    assert_eq!(segment_rows(&out, "b"), segment_rows(&base, "b"));

    let count = |prefix: &str| store.iter().filter(|(_, t)| t.name.starts_with(prefix)).count();
    assert_eq!(count("fusion.mlp2."), 2);
    assert_eq!(count("fusion.mlp1.a."), 2);
    assert_eq!(count("fusion.mlp1.b."), 2);
}

#[test]
fn qformer_projection_is_irrelevant_for_zero_features() {
    let specs = vec![spec("a", 2, 2, 3), spec("b", 3, 3, 2)];
    let config = qformer_config(&specs, 2, 4);
    let mut store = ParamStore::<f64>::new();
    let params = FusionParams::new(&config, &specs, &mut store, 1).unwrap();
    let FusionParams::Qformer(q) = params.clone() else { unreachable!() };
    let mut feats: Vec<_> = specs.iter().map(|s| features(s, 3)).collect();
    feats[0].features.fill(0.0);
    let base = qformer_fuse(&feats, &params, &store).unwrap();

    let mut changed = store.clone();
    bump(&mut changed, q.projection("a").unwrap().w);
    assert_eq!(qformer_fuse(&feats, &params, &changed).unwrap(), base);

    let mut other = store.clone();
    bump(&mut other, q.projection("b").unwrap().w);
    assert_ne!(qformer_fuse(&feats, &params, &other).unwrap().tokens, base.tokens);
}

#[test]
fn three_experts_with_64_queries_give_192_tokens() {
    let specs = vec![spec("a", 2, 2, 3), spec("b", 3, 3, 2), spec("c", 1, 4, 2)];
    let config = qformer_config(&specs, 64, 4);
    assert_eq!(config.token_count(&specs).unwrap(), 192);
    let mut store = ParamStore::<f64>::new();
    let params = FusionParams::new(&config, &specs, &mut store, 1).unwrap();
    let feats: Vec<_> = specs.iter().map(|s| features(s, 3)).collect();
    let fused = qformer_fuse(&feats, &params, &store).unwrap();
    assert_eq!(fused.tokens.shape(), (192, 8));
    assert_eq!(fused.segments.iter().map(|s| s.len).collect::<Vec<_>>(), vec![64, 64, 64]);
}

#[test]
fn qformer_count_ignores_resolution() {
    let small = vec![spec("a", 14, 14, 2), spec("b", 2, 2, 2)];
    let large = vec![spec("a", 64, 64, 2), spec("b", 2, 2, 2)];
    let mut counts = Vec::new();
    for specs in [&small, &large] {
        let config = qformer_config(specs, 4, 4);
        let mut store = ParamStore::<f64>::new();
        let params = FusionParams::new(&config, specs, &mut store, 1).unwrap();
        let feats: Vec<_> = specs.iter().map(|s| features(s, 3)).collect();
        counts.push(qformer_fuse(&feats, &params, &store).unwrap().tokens.rows());
    }
    assert_eq!(counts, vec![8, 8]);
}

#[test]
fn clip_enters_cross_attention_at_width_768() {
    let clip = preset("clip", Scale::PaperGeometry).unwrap();
    let mut config = qformer_config(&[clip.clone()], 4, 768);
    config.qformer_heads = 4;
    let mut store = ParamStore::<f32>::new();
    let params = FusionParams::new(&config, &[clip.clone()], &mut store, 1).unwrap();
    let FusionParams::Qformer(q) = &params else { unreachable!() };
    let w = q.projection("clip").unwrap();
    assert_eq!(store.value(w.w).shape(), (1024, 768));
    assert!(w.b.is_none());
    assert_eq!(q.output_count(), 4);
}

#[test]
fn qformer_weights_are_shared() {
    let one = vec![spec("a", 2, 2, 3)];
    let two = vec![spec("a", 2, 2, 3), spec("b", 3, 3, 2)];
    let names = |specs: &[ExpertSpec]| {
        let mut store = ParamStore::<f64>::new();
        FusionParams::new(&qformer_config(specs, 2, 4), specs, &mut store, 1).unwrap();
        store
            .iter()
            .map(|(_, t)| t.name.clone())
            .filter(|n| !n.contains(".proj.") && !n.contains(".queries."))
            .collect::<Vec<_>>()
    };
    assert_eq!(names(&one), names(&two));
}

#[test]
fn order_examples() {
    let f = |n: &str| features(&spec(n, 1, 1, 1), 0);
    let order = vec!["dinov2".to_string(), "clip".to_string()];
    let out = order_experts(vec![f("clip"), f("dinov2")], &order).unwrap();
    assert_eq!(out[0].expert, "dinov2");
    let short = vec!["clip".to_string()];
    assert!(matches!(order_experts(vec![f("clip"), f("dinov2")], &short), Err(Error::Order(_))));
    let dup = vec!["clip".to_string(), "clip".to_string()];
    assert!(matches!(order_experts(vec![f("clip"), f("dinov2")], &dup), Err(Error::Order(_))));
}

#[test]
fn config_violations_name_fields() {
    let specs: Vec<_> = ["clip", "layoutlmv3"].iter().map(|n| preset(n, Scale::Toy).unwrap()).collect();
    let mut config = FusionConfig::mlp(&specs, 8);
    config.m_per_expert.insert("layoutlmv3".into(), 4);
    config.d_hidden = 7;
    let paths: Vec<String> = config.violations(&specs).into_iter().map(|(p, _)| p).collect();
    assert_eq!(paths, vec!["fusion.d_hidden", "fusion.m_per_expert.layoutlmv3"]);
    let mut q = qformer_config(&specs, 4, 6);
    q.queries_per_expert.insert("clip".into(), 0);
    q.qformer_heads = 4;
    let paths: Vec<String> = q.violations(&specs).into_iter().map(|(p, _)| p).collect();
    assert_eq!(paths, vec!["fusion.queries_per_expert.clip", "fusion.qformer_heads"]);
}

#[test]
fn query_grid_layout() {
    assert_eq!(query_grid(64), (8, 8));
    assert_eq!(query_grid(6), (1, 6));
    assert_eq!(query_grid(1), (1, 1));
}

proptest! {
    #[test]
    fn permutation_then_inverse_is_identity(perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let names: Vec<String> = PRESET_NAMES[..5].iter().map(|s| s.to_string()).collect();
        let items: Vec<_> = names.iter().map(|n| features(&spec(n, 1, 1, 1), 0)).collect();
        let order: Vec<String> = perm.iter().map(|&i| names[i].clone()).collect();
        let shuffled = order_experts(items.clone(), &order).unwrap();
        let back = order_experts(shuffled, &names).unwrap();
        prop_assert_eq!(back, items);
    }

    #[test]
    fn qformer_count_depends_only_on_quotas(qa in 1usize..6, qb in 1usize..6, rows in 1usize..5, cols in 1usize..5) {
        let specs = vec![spec("a", rows, cols, 2), spec("b", 2, 2, 3)];
        let mut config = qformer_config(&specs, 1, 4);
        config.queries_per_expert = [("a".to_string(), qa), ("b".to_string(), qb)].into();
        let mut store = ParamStore::<f64>::new();
        let params = FusionParams::new(&config, &specs, &mut store, 1).unwrap();
        let feats: Vec<_> = specs.iter().map(|s| features(s, 3)).collect();
        prop_assert_eq!(qformer_fuse(&feats, &params, &store).unwrap().tokens.rows(), qa + qb);
    }
}
