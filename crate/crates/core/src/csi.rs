//! Chunk-aware semantic interactor: within-chunk, cross-chunk and
//! cross-modal layers, and the chunk-to-region alignment objective.

use std::sync::Arc;

use rand::Rng;

use crate::chunker::ChunkSpans;
use crate::config::ModelConfig;
use crate::encoder::JointLayout;
use crate::error::{CalecError, Result};
use crate::layers;
use crate::numerics::{ParameterStore, Session, Var};

/// Per-chunk target region (0 is the global feature); `None` is unlabeled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentLabels {
    targets: Vec<Option<usize>>,
}

impl AlignmentLabels {
    pub fn new(targets: Vec<Option<usize>>, regions: usize) -> Result<Self> {
        if let Some(t) = targets.iter().flatten().find(|&&t| t > regions) {
            return Err(CalecError::Data(format!("alignment target {t} outside 0..={regions}")));
        }
        Ok(Self { targets })
    }

    /// Dataset field form: region index per chunk, `-1` for unlabeled.
    pub fn from_field(field: &[i64], regions: usize) -> Result<Self> {
        let targets = field
            .iter()
            .map(|&v| match v {
                -1 => Ok(None),
                v if v >= 0 => Ok(Some(v as usize)),
                v => Err(CalecError::Data(format!("invalid alignment label {v}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(targets, regions)
    }

    pub fn to_field(&self) -> Vec<i64> {
        self.targets.iter().map(|t| t.map_or(-1, |v| v as i64)).collect()
    }

    pub fn targets(&self) -> &[Option<usize>] {
        &self.targets
    }

    pub fn labeled(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets.iter().enumerate().filter_map(|(k, t)| t.map(|t| (k, t)))
    }

    pub fn labeled_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

/// States and attention maps produced by [`csi_forward`].
#[derive(Clone, Debug)]
pub struct CsiOutputs {
    /// `O^C`, same layout as the joint input.
    pub output: Var,
    pub cross_chunk: Var,
    pub cross_modal: Var,
    pub within_weights: Vec<Var>,
    /// One `K x (N+1)` chunk-to-region matrix per cross-modal layer.
    pub modal_weights: Vec<Var>,
}

pub fn init_params(store: &mut ParameterStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    for l in 0..cfg.within_layers {
        layers::init_block(store, &format!("csi.within.{l}"), cfg, rng)?;
    }
    for l in 0..cfg.cross_layers {
        layers::init_block(store, &format!("csi.cross.{l}"), cfg, rng)?;
    }
    for l in 0..cfg.modal_layers {
        layers::init_block(store, &format!("csi.modal.{l}"), cfg, rng)?;
    }
    layers::init_linear(store, "csi.fuse", 2 * cfg.hidden, cfg.hidden, cfg.bias, rng)?;
    layers::init_norm(store, "csi.ln_f", cfg.hidden)
}

fn check_spans(spans: &ChunkSpans, layout: JointLayout) -> Result<()> {
    if spans.content_len() != layout.words {
        return Err(CalecError::Span(format!(
            "spans cover {} tokens but the sequence has {}",
            spans.content_len(),
            layout.words
        )));
    }
    Ok(())
}

/// Joint-sequence mask for the within-chunk layer: content tokens see their
/// own chunk, markers see only themselves, image rows see all image rows.
pub fn within_chunk_mask(spans: &ChunkSpans, layout: JointLayout) -> Arc<[bool]> {
    let n = layout.total();
    let mut mask = vec![false; n * n];
    mask[0] = true;
    let sep = layout.sep();
    mask[sep * n + sep] = true;
    for &(s, e) in spans.spans() {
        for i in s..e {
            for j in s..e {
                mask[(i + 1) * n + j + 1] = true;
            }
        }
    }
    let img = layout.image_start();
    for i in img..n {
        for j in img..n {
            mask[i * n + j] = true;
        }
    }
    mask.into()
}

/// Block-diagonal self-attention restricted by the chunk borders.
pub fn within_chunk_layer(
    sess: &mut Session<'_>,
    prefix: &str,
    h: Var,
    spans: &ChunkSpans,
    layout: JointLayout,
    heads: usize,
) -> Result<(Var, Var)> {
    check_spans(spans, layout)?;
    let mask = within_chunk_mask(spans, layout);
    layers::self_attention_block(sess, prefix, h, &mask, heads)
}

/// Unmasked attention of every row over the whole text-image sequence.
pub fn cross_chunk_layer(sess: &mut Session<'_>, prefix: &str, h: Var, heads: usize) -> Result<(Var, Var)> {
    let n = sess.value(h).rows();
    layers::self_attention_block(sess, prefix, h, &layers::full_mask(n, n), heads)
}

/// Mean of the content-token rows in each chunk.
pub fn pool_chunks(sess: &mut Session<'_>, content: Var, spans: &ChunkSpans) -> Var {
    sess.tape.segment_mean(content, spans.spans())
}

/// One cross-modal step: the pre-residual update (zero on markers and image
/// rows), the block output, and the `K x (N+1)` chunk-to-region weights.
#[derive(Clone, Copy, Debug)]
pub struct CrossModalStep {
    pub output: Var,
    pub update: Var,
    pub weights: Var,
}

/// Chunk-to-region attention whose region mixture is broadcast to every
/// token of the chunk.
pub fn cross_modal_layer(
    sess: &mut Session<'_>,
    prefix: &str,
    h: Var,
    spans: &ChunkSpans,
    layout: JointLayout,
    heads: usize,
) -> Result<CrossModalStep> {
    check_spans(spans, layout)?;
    let n = layers::norm(sess, &format!("{prefix}.ln1"), h)?;
    let content = sess.tape.slice_rows(n, 1, 1 + layout.words);
    let regions = sess.tape.slice_rows(n, layout.image_start(), layout.total());
    let chunks = pool_chunks(sess, content, spans);
    let mask = layers::full_mask(spans.len(), layout.image_len());
    let (mix, weights) = layers::attend(sess, &format!("{prefix}.attn"), chunks, regions, &mask, heads, true)?;
    let per_token = sess.tape.gather_rows(mix, &spans.chunk_of_tokens());
    let d = sess.value(h).cols();
    let head = sess.constant(crate::numerics::Tensor2D::zeros(1, d));
    let tail = sess.constant(crate::numerics::Tensor2D::zeros(1 + layout.image_len(), d));
    let update = sess.tape.concat_rows(&[head, per_token, tail]);
    let h1 = sess.tape.add(h, update);
    let output = layers::feed_forward_residual(sess, prefix, h1, "ln2")?;
    Ok(CrossModalStep { output, update, weights })
}

/// Within-chunk, cross-chunk and cross-modal stacks, then the feature-wise
/// concatenation of the cross-chunk and cross-modal outputs projected back
/// to the hidden size.
pub fn csi_forward(
    sess: &mut Session<'_>,
    cfg: &ModelConfig,
    joint: Var,
    spans: &ChunkSpans,
    layout: JointLayout,
) -> Result<CsiOutputs> {
    check_spans(spans, layout)?;
    let mut h = joint;
    let mut within_weights = Vec::with_capacity(cfg.within_layers);
    for l in 0..cfg.within_layers {
        let (out, w) = within_chunk_layer(sess, &format!("csi.within.{l}"), h, spans, layout, cfg.heads)?;
        h = out;
        within_weights.push(w);
    }
    for l in 0..cfg.cross_layers {
        h = cross_chunk_layer(sess, &format!("csi.cross.{l}"), h, cfg.heads)?.0;
    }
    let cross_chunk = h;
    let mut modal_weights = Vec::with_capacity(cfg.modal_layers);
    for l in 0..cfg.modal_layers {
        let step = cross_modal_layer(sess, &format!("csi.modal.{l}"), h, spans, layout, cfg.heads)?;
        h = step.output;
        modal_weights.push(step.weights);
    }
    let cross_modal = h;
    let both = sess.tape.concat_cols(&[cross_chunk, cross_modal]);
    let output = layers::linear(sess, "csi.fuse", both)?;
    Ok(CsiOutputs { output, cross_chunk, cross_modal, within_weights, modal_weights })
}

/// Sums the per-layer chunk-to-region attention weights, renormalizes each
/// chunk row with a softmax over the `N+1` candidates and averages the
/// cross-entropy against the labeled target regions.
pub fn alignment_loss(sess: &mut Session<'_>, weights: &[Var], labels: &AlignmentLabels) -> Result<Var> {
    if weights.is_empty() {
        return Err(CalecError::Config("alignment loss needs at least one cross-modal layer".into()));
    }
    let scores = sess.tape.add_all(weights);
    alignment_cross_entropy(sess, scores, labels)
}

/// Mean cross-entropy of `softmax(scores[k])` against each labeled chunk's
/// target.
pub fn alignment_cross_entropy(sess: &mut Session<'_>, scores: Var, labels: &AlignmentLabels) -> Result<Var> {
    let (k, candidates) = sess.value(scores).shape();
    if labels.targets().len() != k {
        return Err(CalecError::Shape(format!("{} labels for {k} chunks", labels.targets().len())));
    }
    let count = labels.labeled_count();
    if count == 0 {
        return Err(CalecError::EmptyLabels);
    }
    let mut terms = Vec::with_capacity(count);
    for (chunk, target) in labels.labeled() {
        if target >= candidates {
            return Err(CalecError::Index { index: target, len: candidates });
        }
        let row = sess.tape.slice_rows(scores, chunk, chunk + 1);
        terms.push(sess.tape.cross_entropy(row, target)?);
    }
    let total = sess.tape.add_all(&terms);
    Ok(sess.tape.scale(total, 1.0 / count as f64))
}
