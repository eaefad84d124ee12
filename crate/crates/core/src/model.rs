//! The full poly-expert model: frozen experts, fusion network, position
//! tables and decoder over one partitioned parameter store.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{Attribute, Expert, ExpertSpec, PatchFeatures, SyntheticImage};
use crate::fusion::{order_by, FusedNode, FusedVisionTokens, FusionConfig, FusionParams};
use crate::lm::{generate_greedy, Decoder, DecoderConfig, ModelInput, Segment};
use crate::numerics::{Graph, NodeId, ParamStore, Real};
use crate::positional::{PeScheme, PeTables};

pub const BOS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub experts: Vec<ExpertSpec>,
    pub fusion: FusionConfig,
    pub pe_scheme: PeScheme,
    pub decoder: DecoderConfig,
}

/// One question about one image. The prompt is `[BOS] image question` and
/// the answer tokens (ending in EOS) follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: SyntheticImage,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub attribute: Attribute,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    experts: Vec<Expert>,
    pub fusion: FusionParams,
    pub pe: PeTables,
    pub decoder: Decoder,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.fusion.d_model != config.decoder.d_model {
            return Err(Error::Fusion(format!(
                "fusion d_model {} differs from decoder d_model {}",
                config.fusion.d_model, config.decoder.d_model
            )));
        }
        let mut store = ParamStore::new();
        let ordered = order_by(config.experts.clone(), &config.fusion.expert_order, |e| e.name.as_str())?;
        let experts = ordered
            .into_iter()
            .map(|spec| Expert::new(spec, &mut store))
            .collect::<Result<Vec<_>>>()?;
        let fusion = FusionParams::new(&config.fusion, &config.experts, &mut store, seed)?;
        let grids: Vec<_> = config
            .fusion
            .output_grids(&config.experts)?
            .into_iter()
            .map(|(_, g)| g)
            .collect();
        let pe = PeTables::new(
            &mut store,
            seed,
            config.pe_scheme,
            &grids,
            config.decoder.d_model,
            config.decoder.max_text_len,
        )?;
        let decoder = Decoder::new(&config.decoder, &mut store, seed)?;
        Ok(Self {
            config: config.clone(),
            experts,
            fusion,
            pe,
            decoder,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Experts in concatenation order.
    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn expert_names(&self) -> Vec<String> {
        self.experts.iter().map(|e| e.name().to_string()).collect()
    }

    pub fn encode(&self, image: &SyntheticImage) -> Vec<PatchFeatures<T>> {
        self.experts.iter().map(|e| e.encode(&self.store, image)).collect()
    }

    pub fn fuse(&self, g: &mut Graph<T>, image: &SyntheticImage) -> Result<FusedNode> {
        let features = self.encode(image);
        self.fusion.forward(g, &self.store, &features)
    }

    pub fn fuse_eager(&self, image: &SyntheticImage) -> Result<FusedVisionTokens<T>> {
        let mut g = Graph::new();
        let fused = self.fuse(&mut g, image)?;
        Ok(FusedVisionTokens {
            tokens: g.value(fused.node).clone(),
            segments: fused.segments,
        })
    }

    fn prompt<I>(example: &Example, image: I) -> Vec<Segment<I>> {
        vec![
            Segment::prompt(vec![BOS]),
            Segment::Image(image),
            Segment::prompt(example.question.clone()),
        ]
    }

    pub fn check_masks(&self, masked: &BTreeSet<String>) -> Result<()> {
        match masked.iter().find(|m| !self.experts.iter().any(|e| e.name() == m.as_str())) {
            Some(m) => Err(Error::UnknownExpert(m.clone())),
            None => Ok(()),
        }
    }

    /// The full teacher-forced sequence (prompt and answer) in `g`.
    pub fn input(&self, g: &mut Graph<T>, example: &Example, masked: &BTreeSet<String>) -> Result<ModelInput> {
        self.check_masks(masked)?;
        let fused = self.fuse(g, &example.image)?;
        let mut segs = Self::prompt(example, fused);
        segs.push(Segment::answer(example.answer.clone()));
        let mut input = self.decoder.assemble(g, &self.store, &self.pe, &segs)?;
        input.block_experts(masked);
        Ok(input)
    }

    /// Mean cross-entropy over the answer tokens of one example.
    pub fn loss(&self, g: &mut Graph<T>, example: &Example) -> Result<NodeId> {
        self.masked_loss(g, example, &BTreeSet::new())
    }

    /// Loss with the `masked` experts' spans hidden from attention.
    pub fn masked_loss(&self, g: &mut Graph<T>, example: &Example, masked: &BTreeSet<String>) -> Result<NodeId> {
        let input = self.input(g, example, masked)?;
        let (rows, targets): (Vec<usize>, Vec<usize>) = input.answer_targets().into_iter().unzip();
        if rows.is_empty() {
            return Err(Error::Sequence("example has no answer tokens".into()));
        }
        let (h, _) = self.decoder.hidden(g, &self.store, &input)?;
        let logits = self.decoder.logits_at(g, &self.store, h, &rows)?;
        g.cross_entropy(logits, &targets, None)
    }

    /// First answer token under teacher forcing (one decoder pass).
    pub fn first_answer_token(&self, example: &Example, masked: &BTreeSet<String>) -> Result<usize> {
        self.check_masks(masked)?;
        let mut g = Graph::new();
        let fused = self.fuse(&mut g, &example.image)?;
        let segs = Self::prompt(example, fused);
        let mut input = self.decoder.assemble(&mut g, &self.store, &self.pe, &segs)?;
        input.block_experts(masked);
        let (h, _) = self.decoder.hidden(&mut g, &self.store, &input)?;
        let logits = self.decoder.logits_at(&mut g, &self.store, h, &[input.len() - 1])?;
        Ok(crate::lm::argmax(g.value(logits).row(0)))
    }

    /// Greedy answer for `example`, up to the length of its reference answer.
    pub fn generate(&self, example: &Example, masked: &BTreeSet<String>) -> Result<Vec<usize>> {
        self.check_masks(masked)?;
        let fused = self.fuse_eager(&example.image)?;
        let prompt = Self::prompt(example, fused);
        generate_greedy(
            &self.decoder,
            &self.store,
            &self.pe,
            &prompt,
            masked,
            example.answer.len().max(1),
        )
    }
}
