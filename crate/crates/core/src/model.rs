//! The full model: encoder, interactor, relation inferrer and generator under
//! one parameter store, with the losses of each training stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chunker::ChunkSpans;
use crate::config::{DecodeConfig, ModelConfig};
use crate::csi::{self, AlignmentLabels, CsiOutputs};
use crate::decoding::{self, Boundaries, Decoded};
use crate::encoder::{self, JointLayout, RegionSet};
use crate::error::{CalecError, Result};
use crate::inferrer::{self, RelationPrediction};
use crate::layers;
use crate::lecg::{self, ConstraintState};
use crate::numerics::{ParameterStore, Session, Tensor2D, Var};
use crate::parallel::Execution;
use crate::text::TokenSequence;

/// Parameter name prefixes of the generator. Everything else belongs to the
/// encoder side, which stays frozen while the generator trains.
pub const GENERATOR_PREFIX: &str = "lecg.";
pub const CSI_PREFIX: &str = "csi.";

/// One encoded input pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub seq: TokenSequence,
    pub spans: ChunkSpans,
    /// `N+1` rows: the global feature, then the regions.
    pub regions: Tensor2D,
}

impl ModelInput {
    pub fn new(seq: TokenSequence, spans: ChunkSpans, regions: &RegionSet) -> Result<Self> {
        if spans.content_len() != seq.content_len() {
            return Err(CalecError::Span(format!(
                "spans cover {} tokens, sentence has {}",
                spans.content_len(),
                seq.content_len()
            )));
        }
        regions.validate(None)?;
        Ok(Self { seq, spans, regions: regions.to_tensor() })
    }

    pub fn layout(&self) -> JointLayout {
        JointLayout { words: self.seq.content_len(), regions: self.regions.rows() - 1 }
    }
}

/// Tape handles of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderPass {
    pub token_level: Var,
    pub csi: CsiOutputs,
    pub o_w: Var,
    pub logits: Var,
    pub refine_weights: Vec<Var>,
}

/// Detached encoder outputs for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub prediction: RelationPrediction,
    pub saliency: Vec<f64>,
    pub constraints: ConstraintState,
    pub o_w: Tensor2D,
    /// Chunk-to-region attention summed over cross-modal layers, `K x (N+1)`.
    pub alignment: Tensor2D,
}

/// Explanation decoding options beyond the decode configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenerationMode {
    /// Mix the lexical distribution into the output.
    pub lexical: bool,
    /// Apply the constraint coefficient during the beam search.
    pub constrained: bool,
}

impl GenerationMode {
    pub const FULL: Self = Self { lexical: true, constrained: true };
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalecModel {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl CalecModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterStore::new();
        encoder::init_params(&mut params, &config, &mut rng)?;
        csi::init_params(&mut params, &config, &mut rng)?;
        inferrer::init_params(&mut params, &config, &mut rng)?;
        lecg::init_params(&mut params, &config, &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn infer(&self, input: &ModelInput) -> Result<Inference> {
        let mut sess = Session::new(&self.params);
        let pass = encode(&mut sess, &self.config, input)?;
        let logits = sess.value(pass.logits).row(0).to_vec();
        let weights: Vec<Tensor2D> = pass.refine_weights.iter().map(|&w| sess.value(w).clone()).collect();
        let saliency = inferrer::token_saliency(&weights)?;
        let constraints = lecg::build_constraint_set(&saliency, &input.seq)?;
        let summed = sess.tape.add_all(&pass.csi.modal_weights);
        Ok(Inference {
            prediction: RelationPrediction::from_logits(logits),
            saliency,
            constraints,
            o_w: sess.value(pass.o_w).clone(),
            alignment: sess.value(summed).clone(),
        })
    }

    /// Decodes an explanation for an inferred input. `prefix` is the
    /// conditioning text (sentence and answer word). Ids at or above
    /// `emit_limit` are spare embedding rows with no word and are never emitted.
    #[allow(clippy::too_many_arguments)]
    pub fn explain(
        &self,
        inference: &Inference,
        prefix: &[usize],
        bounds: Boundaries,
        emit_limit: usize,
        decode: &DecodeConfig,
        mode: GenerationMode,
        exec: Execution,
    ) -> Result<Decoded> {
        decode.validate(self.config.vocab_size)?;
        let step = |sent: &[usize]| -> Result<Vec<f64>> {
            let mut ids = prefix.to_vec();
            ids.extend_from_slice(sent);
            let out = lecg::decoder_step(&self.params, &self.config, &ids, &inference.o_w, &inference.constraints, mode.lexical)?;
            Ok(restrict(out.p, emit_limit))
        };
        if mode.constrained {
            decoding::constrained_beam_sample(step, bounds, &inference.constraints, decode, exec)
        } else {
            decoding::beam_sample(step, bounds, decode, exec)
        }
    }
}

fn restrict(mut p: Vec<f64>, limit: usize) -> Vec<f64> {
    if limit >= p.len() {
        return p;
    }
    p[limit..].iter_mut().for_each(|x| *x = 0.0);
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

/// Encoder, interactor and relation inferrer on the tape.
pub fn encode(sess: &mut Session<'_>, cfg: &ModelConfig, input: &ModelInput) -> Result<EncoderPass> {
    let layout = input.layout();
    let text = encoder::embed_text(sess, &input.seq)?;
    let image = encoder::project_regions(sess, &input.regions)?;
    let joint = encoder::joint_sequence(sess, text, image);
    let token_level = encoder::encode_token_level(sess, joint, cfg.backbone_layers, cfg.heads)?;
    let csi = csi::csi_forward(sess, cfg, token_level, &input.spans, layout)?;

    // final norms of the two pre-LN residual streams
    let o_t = layers::norm(sess, "backbone.ln_f", token_level)?;
    let o_c = layers::norm(sess, "csi.ln_f", csi.output)?;
    let m = layout.words;
    let t_cls = sess.tape.slice_rows(o_t, 0, 1);
    let c_cls = sess.tape.slice_rows(o_c, 0, 1);
    let t_rows = sess.tape.slice_rows(o_t, 1, m + 1);
    let c_rows = sess.tape.slice_rows(o_c, 1, m + 1);
    let o_w = inferrer::build_o_w(sess, t_rows, c_rows)?;
    let cls = inferrer::fuse_cls(sess, t_cls, c_cls)?;
    let (cls, refine_weights) = inferrer::refine_cls(sess, cls, o_w, cfg.inferrer_layers, cfg.share_refine)?;
    let logits = inferrer::classify(sess, cls)?;
    Ok(EncoderPass { token_level, csi, o_w, logits, refine_weights })
}

/// Alignment pre-training loss of one input.
pub fn alignment_loss(sess: &mut Session<'_>, cfg: &ModelConfig, input: &ModelInput, labels: &AlignmentLabels) -> Result<Var> {
    let layout = input.layout();
    let text = encoder::embed_text(sess, &input.seq)?;
    let image = encoder::project_regions(sess, &input.regions)?;
    let joint = encoder::joint_sequence(sess, text, image);
    let token_level = encoder::encode_token_level(sess, joint, cfg.backbone_layers, cfg.heads)?;
    let out = csi::csi_forward(sess, cfg, token_level, &input.spans, layout)?;
    csi::alignment_loss(sess, &out.modal_weights, labels)
}

/// Relation cross-entropy of one input.
pub fn stage1_loss(sess: &mut Session<'_>, cfg: &ModelConfig, input: &ModelInput, label: usize) -> Result<Var> {
    let pass = encode(sess, cfg, input)?;
    inferrer::inference_loss(sess, pass.logits, label)
}

/// Cached encoder-side context of one training explanation.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorExample {
    pub o_w: Tensor2D,
    pub constraints: ConstraintState,
    pub prefix: Vec<usize>,
    pub target: Vec<usize>,
}

/// Explanation negative log-likelihood with the encoder output held fixed.
pub fn stage2_loss(
    sess: &mut Session<'_>,
    cfg: &ModelConfig,
    ex: &GeneratorExample,
    bounds: Boundaries,
    lexical: bool,
) -> Result<Var> {
    let o_w = sess.constant(ex.o_w.clone());
    lecg::generation_loss(sess, cfg, o_w, &ex.constraints, &ex.prefix, &ex.target, (bounds.bos, bounds.eos), lexical)
}

/// Explanation negative log-likelihood with `O^w` computed on the tape, so
/// gradients reach every parameter. The constraint set is read from the
/// current saliency values.
pub fn stage2_loss_end_to_end(
    sess: &mut Session<'_>,
    cfg: &ModelConfig,
    input: &ModelInput,
    prefix: &[usize],
    target: &[usize],
    bounds: Boundaries,
) -> Result<Var> {
    let pass = encode(sess, cfg, input)?;
    let weights: Vec<Tensor2D> = pass.refine_weights.iter().map(|&w| sess.value(w).clone()).collect();
    let saliency = inferrer::token_saliency(&weights)?;
    let constraints = lecg::build_constraint_set(&saliency, &input.seq)?;
    lecg::generation_loss(sess, cfg, pass.o_w, &constraints, prefix, target, (bounds.bos, bounds.eos), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::xavier_uniform;
    use crate::text::{Lexicon, Tag, Vocab};

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            hidden: 8,
            feature_dim: 3,
            max_positions: 24,
            backbone_layers: 1,
            within_layers: 1,
            cross_layers: 1,
            modal_layers: 1,
            inferrer_layers: 2,
            decoder_layers: 1,
            ..Default::default()
        }
    }

    fn fixture() -> (Vocab, ModelInput) {
        let lex = Lexicon::new(["a", "red", "dog", "runs"].iter().map(|w| (w.to_string(), Tag::Other)));
        let vocab = Vocab::from_lexicon(&lex);
        let words: Vec<String> = ["a", "red", "dog", "runs"].iter().map(|s| s.to_string()).collect();
        let seq = TokenSequence::new(&words, &vocab).unwrap();
        let spans = ChunkSpans::new(vec![(0, 3), (3, 4)], 4).unwrap();
        let feats = xavier_uniform(4, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let regions = RegionSet::new(feats.row(0).to_vec(), (1..4).map(|r| feats.row(r).to_vec()).collect()).unwrap();
        (vocab, ModelInput::new(seq, spans, &regions).unwrap())
    }

    #[test]
    fn inference_shapes() {
        let model = CalecModel::init(small()).unwrap();
        let (_, input) = fixture();
        let inf = model.infer(&input).unwrap();
        assert_eq!(inf.prediction.classes(), 3);
        assert_eq!(inf.saliency.len(), 4);
        assert_eq!(inf.o_w.shape(), (8, 8));
        assert_eq!(inf.alignment.shape(), (2, 4));
        // two refinement layers, each a distribution over 2M rows
        let total: f64 = inf.saliency.iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn init_is_deterministic_and_complete() {
        let a = CalecModel::init(small()).unwrap();
        let b = CalecModel::init(small()).unwrap();
        assert_eq!(a, b);
        assert!(a.params.names().any(|n| n.starts_with(GENERATOR_PREFIX)));
        assert!(a.params.names().any(|n| n.starts_with(CSI_PREFIX)));
    }

    #[test]
    fn explanation_decodes_within_length() {
        let model = CalecModel::init(small()).unwrap();
        let (vocab, input) = fixture();
        let inf = model.infer(&input).unwrap();
        let bounds = Boundaries { bos: vocab.bos(), eos: vocab.eos() };
        let decode = DecodeConfig { top_k: 5, max_len: 6, ..Default::default() };
        let prefix = input.seq.content().to_vec();
        let a = model.explain(&inf, &prefix, bounds, usize::MAX, &decode, GenerationMode::FULL, Execution::Sequential).unwrap();
        let b = model.explain(&inf, &prefix, bounds, usize::MAX, &decode, GenerationMode::FULL, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.sentence().len() <= 6);
    }

    #[test]
    fn stage2_losses_agree_on_fixed_encoder() {
        let model = CalecModel::init(small()).unwrap();
        let (vocab, input) = fixture();
        let inf = model.infer(&input).unwrap();
        let bounds = Boundaries { bos: vocab.bos(), eos: vocab.eos() };
        let ex = GeneratorExample {
            o_w: inf.o_w.clone(),
            constraints: inf.constraints.clone(),
            prefix: input.seq.content().to_vec(),
            target: vec![6, 5],
        };
        let mut sess = Session::new(&model.params);
        let a = stage2_loss(&mut sess, &model.config, &ex, bounds, true).unwrap();
        let a = sess.value(a).item();
        let mut sess = Session::new(&model.params);
        let b = stage2_loss_end_to_end(&mut sess, &model.config, &input, &ex.prefix, &ex.target, bounds).unwrap();
        assert_eq!(a, sess.value(b).item());
    }
}
