//! Gradient check of the complete stage losses on a small random model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chunker::ChunkSpans;
use crate::config::ModelConfig;
use crate::csi::AlignmentLabels;
use crate::decoding::Boundaries;
use crate::encoder::RegionSet;
use crate::error::Result;
use crate::model::{self, CalecModel, ModelInput};
use crate::numerics::{grad_check, GradCheckReport};
use crate::parallel::Execution;
use crate::text::{Lexicon, Tag, TokenSequence, Vocab};

/// Sizes of the check: hidden 8, six words, four regions, vocabulary 50.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckSetup {
    pub model: CalecModel,
    pub vocab: Vocab,
    pub input: ModelInput,
    pub labels: AlignmentLabels,
    pub label: usize,
    pub prefix: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn grad_check_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 50,
        hidden: 8,
        feature_dim: 5,
        max_positions: 20,
        backbone_layers: 2,
        within_layers: 3,
        cross_layers: 6,
        modal_layers: 3,
        inferrer_layers: 3,
        decoder_layers: 2,
        seed,
        ..Default::default()
    }
}

impl GradCheckSetup {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = grad_check_config(seed);
        let model = CalecModel::init(cfg.clone())?;
        let lex = Lexicon::new((0..cfg.vocab_size - 4).map(|i| (format!("w{i}"), Tag::Other)));
        let vocab = Vocab::from_lexicon(&lex);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc4ec);
        let words: Vec<String> = (0..6).map(|_| format!("w{}", rng.gen_range(0..cfg.vocab_size - 4))).collect();
        let seq = TokenSequence::new(&words, &vocab)?;
        let spans = ChunkSpans::new(vec![(0, 3), (3, 4), (4, 6)], 6)?;
        let mut feat = || (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let regions = RegionSet::new(feat(), (0..4).map(|_| feat()).collect())?;
        let input = ModelInput::new(seq, spans, &regions)?;
        let labels = AlignmentLabels::new(vec![Some(2), None, Some(4)], 5)?;
        let mut prefix = input.seq.content().to_vec();
        prefix.push(vocab.id("w0")?);
        let target = vec![input.seq.content()[1], vocab.id("w7")?, input.seq.content()[4]];
        Ok(Self { model, vocab, input, labels, label: 1, prefix, target })
    }

    pub fn bounds(&self) -> Boundaries {
        Boundaries { bos: self.vocab.bos(), eos: self.vocab.eos() }
    }

    pub fn check_alignment(&self, epsilon: f64, exec: Execution) -> Result<GradCheckReport> {
        let cfg = &self.model.config;
        grad_check(&self.model.params, epsilon, exec, |s| model::alignment_loss(s, cfg, &self.input, &self.labels))
    }

    pub fn check_stage1(&self, epsilon: f64, exec: Execution) -> Result<GradCheckReport> {
        let cfg = &self.model.config;
        grad_check(&self.model.params, epsilon, exec, |s| model::stage1_loss(s, cfg, &self.input, self.label))
    }

    /// Generation loss with `O^w` on the tape, so every parameter is checked
    /// through the gate and lexical paths.
    pub fn check_stage2(&self, epsilon: f64, exec: Execution) -> Result<GradCheckReport> {
        let cfg = &self.model.config;
        let b = self.bounds();
        grad_check(&self.model.params, epsilon, exec, |s| {
            model::stage2_loss_end_to_end(s, cfg, &self.input, &self.prefix, &self.target, b)
        })
    }
}
