//! The complementary-channel question-answering task.
//!
//! Images carry four attributes; each question asks for one of them. Experts
//! expose disjoint attribute subsets, so which questions a model can answer
//! depends on which experts it sees.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{Attribute, Attributes, SyntheticImage, ATTRIBUTE_CAPACITY};
use crate::lm::EOS;
use crate::model::Example;
use crate::numerics::stream_seed;

pub const WHAT: usize = 4;
pub const COLOR: usize = 5;
pub const HOW: usize = 6;
pub const MANY: usize = 7;
pub const WHICH: usize = 8;
pub const MARK: usize = 9;
pub const LAYOUT: usize = 10;
pub const QUESTION_MARK: usize = 11;
pub const MAX_QUESTION_LEN: usize = 3;

/// First answer id for each attribute; each owns `ATTRIBUTE_CAPACITY` ids.
pub fn answer_base(a: Attribute) -> usize {
    match a {
        Attribute::Color => 16,
        Attribute::Count => 16 + ATTRIBUTE_CAPACITY,
        Attribute::TextMark => 16 + 2 * ATTRIBUTE_CAPACITY,
        Attribute::Layout => 16 + 3 * ATTRIBUTE_CAPACITY,
    }
}

/// Smallest vocabulary holding every question and answer token.
pub fn required_vocab() -> usize {
    answer_base(Attribute::Layout) + ATTRIBUTE_CAPACITY
}

pub fn question_tokens(a: Attribute) -> Vec<usize> {
    match a {
        Attribute::Color => vec![WHAT, COLOR, QUESTION_MARK],
        Attribute::Count => vec![HOW, MANY, QUESTION_MARK],
        Attribute::TextMark => vec![WHICH, MARK, QUESTION_MARK],
        Attribute::Layout => vec![WHAT, LAYOUT, QUESTION_MARK],
    }
}

/// The correct answer, `[value token, EOS]`.
pub fn answer_tokens(attrs: &Attributes, a: Attribute) -> Vec<usize> {
    vec![answer_base(a) + attrs.index(a), EOS]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub colors: usize,
    pub max_count: usize,
    pub marks: usize,
    pub layouts: usize,
    pub questions: Vec<Attribute>,
    pub train_size: usize,
    pub eval_size: usize,
    /// Overrides an expert's attribute profile.
    pub channels: BTreeMap<String, BTreeSet<Attribute>>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            colors: 4,
            max_count: 4,
            marks: 4,
            layouts: 2,
            questions: vec![Attribute::Color, Attribute::Count],
            train_size: 1024,
            eval_size: 256,
            channels: BTreeMap::new(),
        }
    }
}

impl TaskSpec {
    pub fn cardinality(&self, a: Attribute) -> usize {
        match a {
            Attribute::Color => self.colors,
            Attribute::Count => self.max_count,
            Attribute::TextMark => self.marks,
            Attribute::Layout => self.layouts,
        }
    }

    pub fn violations(&self, vocab: usize) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (a, field) in [
            (Attribute::Color, "colors"),
            (Attribute::Count, "max_count"),
            (Attribute::TextMark, "marks"),
            (Attribute::Layout, "layouts"),
        ] {
            let n = self.cardinality(a);
            if n == 0 || n > ATTRIBUTE_CAPACITY {
                out.push((format!("task.{field}"), format!("must be in [1, {ATTRIBUTE_CAPACITY}], got {n}")));
            }
        }
        if self.questions.is_empty() {
            out.push(("task.questions".into(), "at least one question kind is required".into()));
        }
        let unique: BTreeSet<_> = self.questions.iter().collect();
        if unique.len() != self.questions.len() {
            out.push(("task.questions".into(), "question kinds must be distinct".into()));
        }
        if self.train_size == 0 {
            out.push(("task.train_size".into(), "must be positive".into()));
        }
        if self.eval_size == 0 {
            out.push(("task.eval_size".into(), "must be positive".into()));
        }
        if vocab < required_vocab() {
            out.push((
                "decoder.vocab".into(),
                format!("task tokens need a vocabulary of at least {}", required_vocab()),
            ));
        }
        out
    }

    /// Every attribute tuple, in lexicographic order.
    pub fn universe(&self) -> Vec<Attributes> {
        let mut out = Vec::new();
        for color in 0..self.colors {
            for count in 1..=self.max_count {
                for mark in 0..self.marks {
                    for layout in 0..self.layouts {
                        out.push(Attributes {
                            color,
                            count,
                            mark,
                            layout,
                        });
                    }
                }
            }
        }
        out
    }

    /// Splits the universe by `(mark, layout)`: a quarter of those pairs
    /// (at least one) go to evaluation. Every `(color, count)` pair therefore
    /// appears equally often on both sides. With a single pair the split is
    /// impossible and both sides share the universe.
    pub fn split(&self, seed: u64) -> (Vec<Attributes>, Vec<Attributes>) {
        let mut pairs: Vec<(usize, usize)> = (0..self.marks)
            .flat_map(|m| (0..self.layouts).map(move |l| (m, l)))
            .collect();
        let all = self.universe();
        if pairs.len() < 2 {
            return (all.clone(), all);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "task-split"));
        pairs.shuffle(&mut rng);
        let held = (pairs.len() / 4).max(1);
        let eval_pairs: BTreeSet<_> = pairs[..held].iter().copied().collect();
        all.into_iter()
            .partition(|a| !eval_pairs.contains(&(a.mark, a.layout)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

fn build(tuples: &[Attributes], questions: &[Attribute], size: usize, seed: u64, tag: &str, shuffle: bool) -> Result<Vec<Example>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, tag));
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    let nq = questions.len();
    let mut out = Vec::with_capacity(size);
    for i in 0..size {
        let pass = i / nq;
        let slot = pass % tuples.len();
        if shuffle && slot == 0 && i % nq == 0 {
            order.shuffle(&mut rng);
        }
        let attrs = tuples[order[slot]];
        let attribute = questions[i % nq];
        let image_seed = stream_seed(seed, &format!("{tag}-image-{i}"));
        out.push(Example {
            image: SyntheticImage::new(attrs, image_seed)?,
            question: question_tokens(attribute),
            answer: answer_tokens(&attrs, attribute),
            attribute,
        });
    }
    Ok(out)
}

/// Deterministic train and eval sets. Question kinds alternate and tuples
/// cycle through their split, so answer classes stay balanced; evaluation
/// walks the held-out tuples in order and is exactly balanced whenever its
/// size is a multiple of `questions × held-out tuples`.
pub fn generate_task(spec: &TaskSpec, seed: u64) -> Result<TaskData> {
    if let Some((path, msg)) = spec.violations(required_vocab()).into_iter().next() {
        return Err(Error::Task(format!("{path}: {msg}")));
    }
    let (train_tuples, eval_tuples) = spec.split(seed);
    if train_tuples.is_empty() || eval_tuples.is_empty() {
        return Err(Error::Task("attribute universe too small to split".into()));
    }
    Ok(TaskData {
        train: build(&train_tuples, &spec.questions, spec.train_size, seed, "train", true)?,
        eval: build(&eval_tuples, &spec.questions, spec.eval_size, seed, "eval", false)?,
    })
}

/// Best accuracy any predictor can reach on `attribute` questions of
/// `examples` when it sees only the `visible` attributes: per visible-value
/// group, the majority answer wins.
pub fn bayes_rate(examples: &[Example], visible: &BTreeSet<Attribute>, attribute: Attribute) -> Option<f64> {
    let mut groups: BTreeMap<Vec<usize>, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut total = 0;
    for ex in examples.iter().filter(|e| e.attribute == attribute) {
        let key: Vec<usize> = visible.iter().map(|&a| ex.image.attributes.index(a)).collect();
        *groups.entry(key).or_default().entry(ex.answer[0]).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return None;
    }
    let correct: usize = groups.values().map(|g| g.values().copied().max().unwrap_or(0)).sum();
    Some(correct as f64 / total as f64)
}
