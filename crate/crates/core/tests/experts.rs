//! Channel separation of the synthetic encoders, checked with an
//! independent least-squares probe.

use nalgebra::DMatrix;
use polyvis::expert::{preset_specs, Attribute, Attributes, Expert, Scale, SyntheticImage};
use polyvis::numerics::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VALUES: usize = 4;
const SAMPLES: usize = 1000;

fn sample(rng: &mut ChaCha8Rng) -> SyntheticImage {
    let attrs = Attributes {
        color: rng.gen_range(0..VALUES),
        count: rng.gen_range(1..=VALUES),
        mark: rng.gen_range(0..VALUES),
        layout: rng.gen_range(0..VALUES),
    };
    SyntheticImage::new(attrs, rng.gen()).unwrap()
}

/// Patch-mean features with a bias column.
fn design(expert: &Expert, store: &ParamStore<f64>, images: &[SyntheticImage]) -> DMatrix<f64> {
    let d = expert.spec().dim;
    let mut x = DMatrix::zeros(images.len(), d + 1);
    for (i, img) in images.iter().enumerate() {
        let f = expert.encode(store, img).features;
        let n = f.rows() as f64;
        for k in 0..d {
            x[(i, k)] = (0..f.rows()).map(|r| f.get(r, k)).sum::<f64>() / n;
        }
        x[(i, d)] = 1.0;
    }
    x
}

fn one_hot(images: &[SyntheticImage], a: Attribute) -> DMatrix<f64> {
    DMatrix::from_fn(images.len(), VALUES, |i, c| f64::from(u8::from(images[i].attributes.index(a) == c)))
}

fn accuracy(pred: &DMatrix<f64>, images: &[SyntheticImage], a: Attribute) -> f64 {
    let hits = (0..images.len())
        .filter(|&i| {
            let row = pred.row(i);
            let best = (0..VALUES).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == images[i].attributes.index(a)
        })
        .count();
    hits as f64 / images.len() as f64
}

#[test]
fn profiled_attributes_are_linearly_decodable_and_others_are_not() {
    for seed in 0..5u64 {
        for mut spec in preset_specs(Scale::Toy) {
            spec.seed = seed;
            let mut store = ParamStore::<f64>::new();
            let expert = Expert::new(spec.clone(), &mut store).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let train: Vec<_> = (0..SAMPLES).map(|_| sample(&mut rng)).collect();
            let test: Vec<_> = (0..SAMPLES).map(|_| sample(&mut rng)).collect();
            let xt = design(&expert, &store, &train);
            let xe = design(&expert, &store, &test);
            for a in Attribute::ALL {
                let w = xt.clone().svd(true, true).solve(&one_hot(&train, a), 1e-10).unwrap();
                let acc = accuracy(&(&xe * w), &test, a);
                if spec.profile.contains(&a) {
                    assert!(acc >= 0.99, "{} seed {seed}: {a} probe {acc}", spec.name);
                } else {
                    assert!((acc - 0.25).abs() <= 0.05, "{} seed {seed}: {a} probe {acc}", spec.name);
                }
            }
        }
    }
}

#[test]
fn encoders_are_pure_and_shaped_by_the_spec() {
    let img = SyntheticImage::new(
        Attributes {
            color: 1,
            count: 2,
            mark: 0,
            layout: 1,
        },
        9,
    )
    .unwrap();
    for scale in [Scale::Toy, Scale::PaperGeometry] {
        for spec in preset_specs(scale) {
            let mut store = ParamStore::<f32>::new();
            let expert = Expert::new(spec.clone(), &mut store).unwrap();
            let a = expert.encode(&store, &img);
            assert_eq!(a.features.shape(), (spec.patches(), spec.dim));
            assert!(a.features.is_finite());
            assert_eq!(a, expert.encode(&store, &img));
        }
    }
}
