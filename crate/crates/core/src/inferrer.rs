//! Relation inferrer: fuses the two `[CLS]` vectors, refines the result by
//! attending over token-level and chunk-level outputs, classifies, and
//! exports per-token saliency.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{CalecError, Result};
use crate::layers;
use crate::numerics::{ops, ParameterStore, Session, Tensor2D, Var};

pub fn init_params(store: &mut ParameterStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let d = cfg.hidden;
    layers::init_linear(store, "inferrer.fuse", 2 * d, d, cfg.bias, rng)?;
    if cfg.share_refine {
        layers::init_attention(store, "inferrer.refine.shared", d, rng)?;
    } else {
        for l in 0..cfg.inferrer_layers {
            layers::init_attention(store, &format!("inferrer.refine.{l}"), d, rng)?;
        }
    }
    layers::init_linear(store, "inferrer.out", d, cfg.num_classes, cfg.bias, rng)
}

/// Fused `[CLS]` vector, the stacked `O^w` rows and per-layer refinement
/// weights.
#[derive(Clone, Debug)]
pub struct FusedRepresentation {
    pub cls: Var,
    pub o_w: Var,
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationPrediction {
    pub logits: Vec<f64>,
    pub predicted: usize,
}

impl RelationPrediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let predicted = ops::argmax(&logits);
        Self { logits, predicted }
    }

    pub fn classes(&self) -> usize {
        self.logits.len()
    }
}

/// `[o_T ; o_C] · W^p`.
pub fn fuse_cls(sess: &mut Session<'_>, token_cls: Var, chunk_cls: Var) -> Result<Var> {
    let (a, b) = (sess.value(token_cls).shape(), sess.value(chunk_cls).shape());
    if a != b || a.0 != 1 {
        return Err(CalecError::Shape(format!("cannot fuse [CLS] vectors of shapes {a:?} and {b:?}")));
    }
    let both = sess.tape.concat_cols(&[token_cls, chunk_cls]);
    layers::linear(sess, "inferrer.fuse", both)
}

/// Token rows of the backbone followed by token rows of the interactor.
pub fn build_o_w(sess: &mut Session<'_>, token_rows: Var, chunk_rows: Var) -> Result<Var> {
    let (a, b) = (sess.value(token_rows).shape(), sess.value(chunk_rows).shape());
    if a != b {
        return Err(CalecError::Shape(format!("O^T rows {a:?} and O^C rows {b:?} differ")));
    }
    Ok(sess.tape.concat_rows(&[token_rows, chunk_rows]))
}

/// Iterative residual attention of the `[CLS]` vector over `O^w`.
/// Scores are unscaled dot products.
pub fn refine_cls(
    sess: &mut Session<'_>,
    cls: Var,
    o_w: Var,
    layers: usize,
    shared: bool,
) -> Result<(Var, Vec<Var>)> {
    if layers == 0 {
        return Err(CalecError::Config("refinement needs at least one layer".into()));
    }
    let mask = layers::full_mask(1, sess.value(o_w).rows());
    let mut cls = cls;
    let mut weights = Vec::with_capacity(layers);
    for l in 0..layers {
        let prefix = if shared { "inferrer.refine.shared".to_string() } else { format!("inferrer.refine.{l}") };
        let (agg, w) = layers::attend(sess, &prefix, cls, o_w, &mask, 1, false)?;
        cls = sess.tape.add(agg, cls);
        weights.push(w);
    }
    Ok((cls, weights))
}

/// Relation logits `o · W^y`.
pub fn classify(sess: &mut Session<'_>, cls: Var) -> Result<Var> {
    layers::linear(sess, "inferrer.out", cls)
}

/// Saliency of each of the `M` content tokens: the sum over layers of the
/// refinement weight on both of its copies in `O^w`.
pub fn token_saliency(weights: &[Tensor2D]) -> Result<Vec<f64>> {
    let first = weights.first().ok_or_else(|| CalecError::Config("no refinement weights".into()))?;
    let width = first.cols();
    if width % 2 != 0 {
        return Err(CalecError::Shape(format!("refinement weights over {width} positions, expected 2M")));
    }
    let m = width / 2;
    let mut scores = vec![0.0; m];
    for w in weights {
        if w.shape() != (1, width) {
            return Err(CalecError::Shape(format!("refinement weights {:?}, expected (1, {width})", w.shape())));
        }
        for (i, s) in scores.iter_mut().enumerate() {
            *s += w.get(0, i) + w.get(0, m + i);
        }
    }
    Ok(scores)
}

/// Cross-entropy of the relation logits against the gold label.
pub fn inference_loss(sess: &mut Session<'_>, logits: Var, gold: usize) -> Result<Var> {
    sess.tape.cross_entropy(logits, gold)
}
