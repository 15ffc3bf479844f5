//! Lexical constraint-aware generator: a causal transformer decoder with
//! cross-attention over `O^w`, whose output distribution mixes the
//! vocabulary softmax with a pointer distribution over constraint tokens.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::embed_ids;
use crate::error::{CalecError, Result};
use crate::layers;
use crate::numerics::{xavier_uniform, ParameterStore, Session, Tensor2D, Var};
use crate::text::TokenSequence;

/// Constraint set built from token saliency: every content token whose score
/// is strictly above the median.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintState {
    /// Vocabulary id to source positions (content-token indices).
    members: BTreeMap<usize, Vec<usize>>,
    scores: Vec<f64>,
    median: f64,
    /// Content token ids, one per `O^w` row of each copy.
    content: Vec<usize>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn build_constraint_set(scores: &[f64], seq: &TokenSequence) -> Result<ConstraintState> {
    let content = seq.content().to_vec();
    if content.is_empty() {
        return Err(CalecError::Data("constraint set needs at least one content token".into()));
    }
    if scores.len() != content.len() {
        return Err(CalecError::Shape(format!("{} scores for {} tokens", scores.len(), content.len())));
    }
    let median = median(scores);
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (&s, &id)) in scores.iter().zip(&content).enumerate() {
        if s > median {
            members.entry(id).or_default().push(i);
        }
    }
    Ok(ConstraintState { members, scores: scores.to_vec(), median, content })
}

impl ConstraintState {
    /// An empty set over the given content ids.
    pub fn empty(content: Vec<usize>) -> Self {
        Self { members: BTreeMap::new(), scores: vec![0.0; content.len()], median: 0.0, content }
    }

    /// A set whose members are exactly `ids`, each treated as one source token.
    pub fn from_ids(ids: &[usize]) -> Self {
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            members.entry(id).or_default().push(i);
        }
        Self { members, scores: vec![1.0; ids.len()], median: 0.0, content: ids.to_vec() }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.members.contains_key(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.keys().copied()
    }

    pub fn members(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.members
    }

    pub fn median(&self) -> f64 {
        self.median
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn words(&self) -> usize {
        self.content.len()
    }

    /// Vocabulary id of each of the `2M` rows of `O^w`.
    pub fn position_vocab(&self) -> Vec<usize> {
        self.content.iter().chain(&self.content).copied().collect()
    }

    /// Whether each of the `2M` rows of `O^w` holds a constraint token.
    pub fn position_mask(&self) -> Vec<bool> {
        self.position_vocab().iter().map(|id| self.contains(*id)).collect()
    }
}

pub fn init_params(store: &mut ParameterStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    let d = cfg.hidden;
    store.insert("lecg.tok", xavier_uniform(cfg.vocab_size, d, rng))?;
    store.insert("lecg.pos", xavier_uniform(cfg.max_positions, d, rng))?;
    for l in 0..cfg.decoder_layers {
        let p = format!("lecg.{l}");
        layers::init_norm(store, &format!("{p}.ln1"), d)?;
        layers::init_attention(store, &format!("{p}.self"), d, rng)?;
        layers::init_norm(store, &format!("{p}.ln2"), d)?;
        layers::init_attention(store, &format!("{p}.cross"), d, rng)?;
        layers::init_norm(store, &format!("{p}.ln3"), d)?;
        layers::init_ffn(store, &format!("{p}.ffn"), cfg, rng)?;
    }
    layers::init_norm(store, "lecg.ln_f", d)?;
    layers::init_linear(store, "lecg.vocab", d, cfg.vocab_size, cfg.bias, rng)?;
    layers::init_linear(store, "lecg.gate", 3 * d, 1, cfg.bias, rng)
}

/// Per-position decoder tensors, one row per input position.
#[derive(Clone, Copy, Debug)]
pub struct DecoderPass {
    /// Layer-0 input: token plus position embedding.
    pub x: Var,
    /// Top-layer hidden state after the final norm.
    pub h: Var,
    /// Final-layer cross-attention weights over the `2M` rows of `O^w`.
    pub cross: Var,
    pub p_vocab: Var,
}

pub fn decoder_forward(sess: &mut Session<'_>, cfg: &ModelConfig, ids: &[usize], o_w: Var) -> Result<DecoderPass> {
    if ids.is_empty() {
        return Err(CalecError::Data("decoder input is empty".into()));
    }
    let x = embed_ids(sess, "lecg", ids)?;
    let t = ids.len();
    let sources = sess.value(o_w).rows();
    let causal = layers::causal_mask(t);
    let full = layers::full_mask(t, sources);
    let mut h = x;
    let mut cross = None;
    for l in 0..cfg.decoder_layers {
        let p = format!("lecg.{l}");
        let n = layers::norm(sess, &format!("{p}.ln1"), h)?;
        let (a, _) = layers::attend(sess, &format!("{p}.self"), n, n, &causal, cfg.heads, true)?;
        h = sess.tape.add(h, a);
        let n = layers::norm(sess, &format!("{p}.ln2"), h)?;
        let (c, w) = layers::attend(sess, &format!("{p}.cross"), n, o_w, &full, cfg.heads, true)?;
        h = sess.tape.add(h, c);
        h = layers::feed_forward_residual(sess, &p, h, "ln3")?;
        cross = Some(w);
    }
    let cross = cross.ok_or_else(|| CalecError::Config("generator needs at least one decoder layer".into()))?;
    let h = layers::norm(sess, "lecg.ln_f", h)?;
    let logits = layers::linear(sess, "lecg.vocab", h)?;
    let p_vocab = sess.tape.softmax(logits);
    Ok(DecoderPass { x, h, cross, p_vocab })
}

/// Restricts cross-attention scores to constraint positions, renormalizes,
/// and scatters position mass onto vocabulary ids. Returns
/// `(P_lex, constrained weights)`, or `None` when the set is empty.
pub fn lexical_prob(
    sess: &mut Session<'_>,
    cross: Var,
    state: &ConstraintState,
    vocab_size: usize,
) -> Result<Option<(Var, Var)>> {
    if state.is_empty() {
        return Ok(None);
    }
    let (rows, cols) = sess.value(cross).shape();
    if cols != 2 * state.words() {
        return Err(CalecError::Shape(format!("{cols} attention columns for {} tokens", state.words())));
    }
    let row_mask = state.position_mask();
    let mask: Vec<bool> = (0..rows).flat_map(|_| row_mask.iter().copied()).collect();
    let alpha = sess.tape.masked_softmax(cross, mask.into())?;
    let p_lex = sess.tape.scatter_cols(alpha, &state.position_vocab(), vocab_size);
    Ok(Some((p_lex, alpha)))
}

/// `sigmoid([c ; h ; x] · W^g)` per row.
pub fn gate(sess: &mut Session<'_>, context: Var, hidden: Var, input: Var) -> Result<Var> {
    let cat = sess.tape.concat_cols(&[context, hidden, input]);
    let z = layers::linear(sess, "lecg.gate", cat)?;
    Ok(sess.tape.sigmoid(z))
}

/// `p_con · P_vocab + (1 - p_con) · P_lex`, row-wise.
pub fn mix(sess: &mut Session<'_>, p_vocab: Var, p_lex: Var, p_con: Var) -> Var {
    let a = sess.tape.mul_col(p_vocab, p_con);
    let rest = sess.tape.one_minus(p_con);
    let b = sess.tape.mul_col(p_lex, rest);
    sess.tape.add(a, b)
}

/// Final output distribution and its ingredients.
#[derive(Clone, Copy, Debug)]
pub struct OutputDistribution {
    pub p: Var,
    pub p_lex: Option<Var>,
    pub alpha: Option<Var>,
    pub p_con: Option<Var>,
}

/// Applies the lexical mixture on top of a decoder pass. With `lexical`
/// false, or an empty constraint set, the vocabulary softmax is returned.
pub fn output_distribution(
    sess: &mut Session<'_>,
    pass: &DecoderPass,
    o_w: Var,
    state: &ConstraintState,
    lexical: bool,
) -> Result<OutputDistribution> {
    let vocab = sess.value(pass.p_vocab).cols();
    let plain = OutputDistribution { p: pass.p_vocab, p_lex: None, alpha: None, p_con: None };
    if !lexical {
        return Ok(plain);
    }
    let Some((p_lex, alpha)) = lexical_prob(sess, pass.cross, state, vocab)? else {
        return Ok(plain);
    };
    let context = sess.tape.matmul(alpha, o_w);
    let p_con = gate(sess, context, pass.h, pass.x)?;
    let p = mix(sess, pass.p_vocab, p_lex, p_con);
    Ok(OutputDistribution { p, p_lex: Some(p_lex), alpha: Some(alpha), p_con: Some(p_con) })
}

/// Outputs of one decoding step (the last prefix position).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepOutput {
    pub hidden: Vec<f64>,
    pub cross: Vec<f64>,
    pub p_vocab: Vec<f64>,
    pub input: Vec<f64>,
    pub p: Vec<f64>,
    pub p_lex: Option<Vec<f64>>,
    /// 1 when the constraint set is empty or the mixture is disabled.
    pub p_con: f64,
}

pub fn decoder_step(
    store: &ParameterStore,
    cfg: &ModelConfig,
    prefix: &[usize],
    o_w: &Tensor2D,
    state: &ConstraintState,
    lexical: bool,
) -> Result<DecoderStepOutput> {
    let mut sess = Session::new(store);
    let ow = sess.constant(o_w.clone());
    let pass = decoder_forward(&mut sess, cfg, prefix, ow)?;
    let out = output_distribution(&mut sess, &pass, ow, state, lexical)?;
    let last = prefix.len() - 1;
    let row = |v: Var| sess.value(v).row(last).to_vec();
    Ok(DecoderStepOutput {
        hidden: row(pass.h),
        cross: row(pass.cross),
        p_vocab: row(pass.p_vocab),
        input: row(pass.x),
        p: row(out.p),
        p_lex: out.p_lex.map(row),
        p_con: out.p_con.map_or(1.0, |g| sess.value(g).get(last, 0)),
    })
}

/// Full decoder input `prefix ++ [BOS] ++ target ++ [EOS]`.
pub fn teacher_forcing_sequence(prefix: &[usize], target: &[usize], bos: usize, eos: usize) -> Vec<usize> {
    let mut seq = Vec::with_capacity(prefix.len() + target.len() + 2);
    seq.extend_from_slice(prefix);
    seq.push(bos);
    seq.extend_from_slice(target);
    seq.push(eos);
    seq
}

/// Teacher-forced negative log-likelihood of `target` followed by `eos`,
/// conditioned on `prefix` (unsupervised) and `bos`.
#[allow(clippy::too_many_arguments)]
pub fn generation_loss(
    sess: &mut Session<'_>,
    cfg: &ModelConfig,
    o_w: Var,
    state: &ConstraintState,
    prefix: &[usize],
    target: &[usize],
    (bos, eos): (usize, usize),
    lexical: bool,
) -> Result<Var> {
    if target.is_empty() {
        return Err(CalecError::Data("explanation target is empty".into()));
    }
    let seq = teacher_forcing_sequence(prefix, target, bos, eos);
    let inputs = &seq[..seq.len() - 1];
    let pass = decoder_forward(sess, cfg, inputs, o_w)?;
    let out = output_distribution(sess, &pass, o_w, state, lexical)?;
    let mut terms = Vec::with_capacity(target.len() + 1);
    for t in prefix.len()..inputs.len() {
        terms.push(sess.tape.pick(out.p, t, seq[t + 1]));
    }
    let cat = sess.tape.concat_cols(&terms);
    let logs = sess.tape.log(cat);
    let total = sess.tape.sum(logs);
    Ok(sess.tape.scale(total, -1.0))
}
