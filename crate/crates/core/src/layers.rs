//! Transformer building blocks shared by the backbone, the interactor stacks
//! and the generator. Every block is pre-norm: `h + sublayer(LN(h))`.

use std::sync::Arc;

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::numerics::{xavier_uniform, ParameterStore, Session, Tensor2D, Var};

pub(crate) fn init_linear(
    store: &mut ParameterStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert(format!("{name}.w"), xavier_uniform(fan_in, fan_out, rng))?;
    if bias {
        store.insert(format!("{name}.b"), Tensor2D::zeros(1, fan_out))?;
    }
    Ok(())
}

/// Query/key/value projections without bias or output projection.
pub(crate) fn init_attention(store: &mut ParameterStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Result<()> {
    for p in ["wq", "wk", "wv"] {
        store.insert(format!("{prefix}.{p}"), xavier_uniform(d, d, rng))?;
    }
    Ok(())
}

pub(crate) fn init_norm(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor2D::filled(1, d, 1.0))?;
    store.insert(format!("{prefix}.b"), Tensor2D::zeros(1, d))
}

pub(crate) fn init_ffn(store: &mut ParameterStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    init_linear(store, &format!("{prefix}.fc1"), cfg.hidden, cfg.ffn_hidden(), cfg.bias, rng)?;
    init_linear(store, &format!("{prefix}.fc2"), cfg.ffn_hidden(), cfg.hidden, cfg.bias, rng)
}

/// Self-attention block: `ln1`, `attn`, `ln2`, `ffn`.
pub(crate) fn init_block(store: &mut ParameterStore, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    init_norm(store, &format!("{prefix}.ln1"), cfg.hidden)?;
    init_attention(store, &format!("{prefix}.attn"), cfg.hidden, rng)?;
    init_norm(store, &format!("{prefix}.ln2"), cfg.hidden)?;
    init_ffn(store, &format!("{prefix}.ffn"), cfg, rng)
}

pub(crate) fn linear(sess: &mut Session<'_>, name: &str, x: Var) -> Result<Var> {
    let w = sess.param(&format!("{name}.w"))?;
    let b = sess.optional_param(&format!("{name}.b"))?;
    Ok(sess.tape.linear(x, w, b))
}

pub(crate) fn norm(sess: &mut Session<'_>, prefix: &str, x: Var) -> Result<Var> {
    let g = sess.param(&format!("{prefix}.g"))?;
    let b = sess.param(&format!("{prefix}.b"))?;
    let n = sess.tape.layer_norm(x);
    let n = sess.tape.mul_row(n, g);
    Ok(sess.tape.add_row(n, b))
}

pub(crate) fn ffn(sess: &mut Session<'_>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(sess, &format!("{prefix}.fc1"), x)?;
    let h = sess.tape.gelu(h);
    linear(sess, &format!("{prefix}.fc2"), h)
}

/// Attention of `queries` over `keys_values`, split into `heads` column
/// groups. Scores are scaled by `1/sqrt(d_head)` when `scaled`. Returns the
/// aggregated values and the head-averaged weight matrix.
pub(crate) fn attend(
    sess: &mut Session<'_>,
    prefix: &str,
    queries: Var,
    keys_values: Var,
    mask: &Arc<[bool]>,
    heads: usize,
    scaled: bool,
) -> Result<(Var, Var)> {
    let wq = sess.param(&format!("{prefix}.wq"))?;
    let wk = sess.param(&format!("{prefix}.wk"))?;
    let wv = sess.param(&format!("{prefix}.wv"))?;
    let q = sess.tape.matmul(queries, wq);
    let k = sess.tape.matmul(keys_values, wk);
    let v = sess.tape.matmul(keys_values, wv);
    let d = sess.value(q).cols();
    let dh = d / heads;
    let scale = if scaled { 1.0 / (dh as f64).sqrt() } else { 1.0 };
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                sess.tape.slice_cols(q, h * dh, (h + 1) * dh),
                sess.tape.slice_cols(k, h * dh, (h + 1) * dh),
                sess.tape.slice_cols(v, h * dh, (h + 1) * dh),
            )
        };
        let s = sess.tape.matmul_t(qh, kh);
        let s = if scale != 1.0 { sess.tape.scale(s, scale) } else { s };
        let a = sess.tape.masked_softmax(s, mask.clone())?;
        outs.push(sess.tape.matmul(a, vh));
        weights.push(a);
    }
    if heads == 1 {
        return Ok((outs[0], weights[0]));
    }
    let out = sess.tape.concat_cols(&outs);
    let sum = sess.tape.add_all(&weights);
    let avg = sess.tape.scale(sum, 1.0 / heads as f64);
    Ok((out, avg))
}

/// Pre-norm self-attention block with feed-forward. Returns the new states
/// and the attention weights.
pub(crate) fn self_attention_block(
    sess: &mut Session<'_>,
    prefix: &str,
    h: Var,
    mask: &Arc<[bool]>,
    heads: usize,
) -> Result<(Var, Var)> {
    let n = norm(sess, &format!("{prefix}.ln1"), h)?;
    let (a, w) = attend(sess, &format!("{prefix}.attn"), n, n, mask, heads, true)?;
    let h1 = sess.tape.add(h, a);
    Ok((feed_forward_residual(sess, prefix, h1, "ln2")?, w))
}

/// `h + ffn(LN(h))`.
pub(crate) fn feed_forward_residual(sess: &mut Session<'_>, prefix: &str, h: Var, ln: &str) -> Result<Var> {
    let n = norm(sess, &format!("{prefix}.{ln}"), h)?;
    let f = ffn(sess, &format!("{prefix}.ffn"), n)?;
    Ok(sess.tape.add(h, f))
}

pub fn full_mask(rows: usize, cols: usize) -> Arc<[bool]> {
    vec![true; rows * cols].into()
}

pub fn causal_mask(n: usize) -> Arc<[bool]> {
    (0..n * n).map(|i| i % n <= i / n).collect::<Vec<_>>().into()
}
