//! Frozen synthetic visual experts.
//!
//! Each expert mirrors the geometry of one real encoder (patch grid, hidden
//! width) and exposes a chosen subset of image attributes. Profiled
//! attributes enter every patch vector through a per-value embedding; the
//! rest of the vector is a per-patch basis plus texture noise, so attributes
//! outside the profile cannot be read back from the features.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{stream_seed, Group, Init, Matrix, ParamId, ParamStore, Real};

/// Maximum number of distinct values any attribute may take.
pub const ATTRIBUTE_CAPACITY: usize = 32;

/// Side length of the square pixel proxy carried by every image.
pub const PIXEL_GRID: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Color,
    Count,
    TextMark,
    Layout,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Color,
        Attribute::Count,
        Attribute::TextMark,
        Attribute::Layout,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Count => "count",
            Attribute::TextMark => "text_mark",
            Attribute::Layout => "layout",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Exact patch counts and hidden widths of the real encoders.
    PaperGeometry,
    /// Same grids, widths divided by 64 and rounded up to a multiple of 4.
    #[default]
    Toy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub name: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub dim: usize,
    pub profile: BTreeSet<Attribute>,
    pub seed: u64,
}

impl ExpertSpec {
    pub fn patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches() == 0 {
            return Err(Error::ExpertSpec(format!("{}: empty patch grid", self.name)));
        }
        if self.dim == 0 {
            return Err(Error::ExpertSpec(format!("{}: zero hidden dimension", self.name)));
        }
        if self.name.is_empty() {
            return Err(Error::ExpertSpec("expert without a name".into()));
        }
        Ok(())
    }
}

const PRESETS: [(&str, usize, usize, &[Attribute]); 6] = [
    ("clip", 24, 1024, &[Attribute::Color]),
    ("dinov2", 16, 1536, &[Attribute::Count]),
    ("layoutlmv3", 14, 1024, &[Attribute::TextMark]),
    ("convnext", 32, 768, &[Attribute::Color, Attribute::Layout]),
    ("sam", 64, 1280, &[Attribute::Layout]),
    ("mae", 16, 1280, &[Attribute::Count]),
];

pub const PRESET_NAMES: [&str; 6] = ["clip", "dinov2", "layoutlmv3", "convnext", "sam", "mae"];

fn toy_dim(dim: usize) -> usize {
    dim.div_ceil(64).div_ceil(4) * 4
}

/// The six reference experts, in canonical order.
pub fn preset_specs(scale: Scale) -> Vec<ExpertSpec> {
    PRESETS
        .iter()
        .enumerate()
        .map(|(i, &(name, side, dim, profile))| ExpertSpec {
            name: name.to_string(),
            grid_rows: side,
            grid_cols: side,
            dim: match scale {
                Scale::PaperGeometry => dim,
                Scale::Toy => toy_dim(dim),
            },
            profile: profile.iter().copied().collect(),
            seed: i as u64,
        })
        .collect()
}

pub fn preset(name: &str, scale: Scale) -> Option<ExpertSpec> {
    preset_specs(scale).into_iter().find(|s| s.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub color: usize,
    /// Number of objects, starting at 1.
    pub count: usize,
    pub mark: usize,
    pub layout: usize,
}

impl Attributes {
    /// Zero-based value index of an attribute.
    pub fn index(&self, a: Attribute) -> usize {
        match a {
            Attribute::Color => self.color,
            Attribute::Count => self.count - 1,
            Attribute::TextMark => self.mark,
            Attribute::Layout => self.layout,
        }
    }
}

/// Procedural stand-in for an input image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub attributes: Attributes,
    pub seed: u64,
    pixels: Matrix<f32>,
}

impl SyntheticImage {
    pub fn new(attributes: Attributes, seed: u64) -> Result<Self> {
        for a in Attribute::ALL {
            if attributes.index(a) >= ATTRIBUTE_CAPACITY {
                return Err(Error::Task(format!("{a} value exceeds capacity {ATTRIBUTE_CAPACITY}")));
            }
        }
        let key = format!(
            "image:{}:{}:{}:{}",
            attributes.color, attributes.count, attributes.mark, attributes.layout
        );
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &key));
        let data = (0..PIXEL_GRID * PIXEL_GRID)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect();
        Ok(Self {
            attributes,
            seed,
            pixels: Matrix::from_vec(PIXEL_GRID, PIXEL_GRID, data)?,
        })
    }

    pub fn pixels(&self) -> &Matrix<f32> {
        &self.pixels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures<T> {
    pub expert: String,
    pub grid: (usize, usize),
    pub features: Matrix<T>,
}

/// A frozen encoder whose weights live in a [`ParamStore`] under group `expert`.
#[derive(Debug, Clone)]
pub struct Expert {
    spec: ExpertSpec,
    tables: Vec<(Attribute, ParamId)>,
    basis: ParamId,
    texture: ParamId,
}

const BASIS_STD: f64 = 0.5;
const TEXTURE_STD: f64 = 0.5;

impl Expert {
    /// Draws the encoder weights from `spec.seed` and registers them, frozen.
    pub fn new<T: Real>(spec: ExpertSpec, store: &mut ParamStore<T>) -> Result<Self> {
        spec.validate()?;
        let prefix = format!("expert.{}", spec.name);
        let tables = spec
            .profile
            .iter()
            .map(|&a| {
                store
                    .init(
                        spec.seed,
                        &format!("{prefix}.{a}"),
                        Group::Expert,
                        ATTRIBUTE_CAPACITY,
                        spec.dim,
                        Init::Normal(1.0),
                    )
                    .map(|id| (a, id))
            })
            .collect::<Result<Vec<_>>>()?;
        let basis = store.init(
            spec.seed,
            &format!("{prefix}.basis"),
            Group::Expert,
            spec.patches(),
            spec.dim,
            Init::Normal(BASIS_STD),
        )?;
        let texture = store.init(
            spec.seed,
            &format!("{prefix}.texture"),
            Group::Expert,
            1,
            spec.dim,
            Init::Normal(TEXTURE_STD),
        )?;
        Ok(Self {
            spec,
            tables,
            basis,
            texture,
        })
    }

    pub fn spec(&self) -> &ExpertSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.tables.iter().map(|&(_, id)| id).collect();
        ids.push(self.basis);
        ids.push(self.texture);
        ids
    }

    /// Patch features `[n_i × d_i]` in row-major patch order.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, image: &SyntheticImage) -> PatchFeatures<T> {
        let (rows, cols) = (self.spec.grid_rows, self.spec.grid_cols);
        let d = self.spec.dim;
        let mut signal = vec![T::zero(); d];
        for &(a, id) in &self.tables {
            let row = store.value(id).row(image.attributes.index(a));
            for (s, &v) in signal.iter_mut().zip(row) {
                *s += v;
            }
        }
        let basis = store.value(self.basis);
        let texture = store.value(self.texture).row(0);
        let mut features = Matrix::zeros(rows * cols, d);
        for r in 0..rows {
            let pr = r * PIXEL_GRID / rows;
            for c in 0..cols {
                let pc = c * PIXEL_GRID / cols;
                let px = T::c(image.pixels.get(pr, pc) as f64);
                let j = r * cols + c;
                let b = basis.row(j);
                for (k, out) in features.row_mut(j).iter_mut().enumerate() {
                    *out = signal[k] + b[k] + px * texture[k];
                }
            }
        }
        PatchFeatures {
            expert: self.spec.name.clone(),
            grid: (rows, cols),
            features,
        }
    }
}
