//! Input embedding, region projection and the token-level single-stream
//! encoder whose outputs are `O^T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{CalecError, Result};
use crate::layers;
use crate::numerics::{xavier_uniform, ParameterStore, Session, Tensor2D, Var};
use crate::text::TokenSequence;

/// Global image feature followed by `N` region features, all of length `f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub global: Vec<f64>,
    pub regions: Vec<Vec<f64>>,
}

impl RegionSet {
    pub fn new(global: Vec<f64>, regions: Vec<Vec<f64>>) -> Result<Self> {
        let set = Self { global, regions };
        set.validate(None)?;
        Ok(set)
    }

    pub fn validate(&self, feature_dim: Option<usize>) -> Result<()> {
        if self.regions.is_empty() {
            return Err(CalecError::Data("a region set needs at least one region".into()));
        }
        let f = feature_dim.unwrap_or(self.global.len());
        for (i, r) in std::iter::once(&self.global).chain(&self.regions).enumerate() {
            if r.len() != f {
                return Err(CalecError::Shape(format!(
                    "region row {i} has {} features, expected {f}",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(CalecError::Numeric(format!("region row {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.regions.len()
    }

    /// `(N+1) x f` matrix with the global feature first.
    pub fn to_tensor(&self) -> Tensor2D {
        let rows: Vec<Vec<f64>> = std::iter::once(self.global.clone()).chain(self.regions.iter().cloned()).collect();
        Tensor2D::from_rows(&rows).expect("validated region rows")
    }
}

/// Row layout of the joint sequence `[CLS, w_1..w_M, SEP, g, r_1..r_N]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JointLayout {
    /// Content tokens `M`.
    pub words: usize,
    /// Regions `N`, excluding the global feature.
    pub regions: usize,
}

impl JointLayout {
    pub fn text_len(&self) -> usize {
        self.words + 2
    }

    pub fn image_start(&self) -> usize {
        self.words + 2
    }

    pub fn image_len(&self) -> usize {
        self.regions + 1
    }

    pub fn total(&self) -> usize {
        self.words + self.regions + 3
    }

    pub fn sep(&self) -> usize {
        self.words + 1
    }
}

pub fn init_params(store: &mut ParameterStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<()> {
    store.insert("emb.tok", xavier_uniform(cfg.vocab_size, cfg.hidden, rng))?;
    store.insert("emb.pos", xavier_uniform(cfg.max_positions, cfg.hidden, rng))?;
    layers::init_linear(store, "region.proj", cfg.feature_dim, cfg.hidden, cfg.bias, rng)?;
    for l in 0..cfg.backbone_layers {
        layers::init_block(store, &format!("backbone.{l}"), cfg, rng)?;
    }
    layers::init_norm(store, "backbone.ln_f", cfg.hidden)
}

/// Token embedding plus learned position embedding, one row per token.
pub fn embed_text(sess: &mut Session<'_>, seq: &TokenSequence) -> Result<Var> {
    embed_ids(sess, "emb", seq.tokens())
}

pub(crate) fn embed_ids(sess: &mut Session<'_>, prefix: &str, ids: &[usize]) -> Result<Var> {
    let tok = sess.param(&format!("{prefix}.tok"))?;
    let pos = sess.param(&format!("{prefix}.pos"))?;
    let (vocab, max_pos) = (sess.value(tok).rows(), sess.value(pos).rows());
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(CalecError::Vocab { id: bad, size: vocab });
    }
    if ids.len() > max_pos {
        return Err(CalecError::Shape(format!(
            "sequence of {} tokens exceeds {max_pos} positions",
            ids.len()
        )));
    }
    let t = sess.tape.gather_rows(tok, ids);
    let p = sess.tape.slice_rows(pos, 0, ids.len());
    Ok(sess.tape.add(t, p))
}

/// Fully-connected projection of raw region features to the hidden size.
pub fn project_regions(sess: &mut Session<'_>, raw: &Tensor2D) -> Result<Var> {
    let f = sess.store().get("region.proj.w")?.rows();
    if raw.cols() != f {
        return Err(CalecError::Shape(format!("region features have {} columns, expected {f}", raw.cols())));
    }
    let x = sess.constant(raw.clone());
    layers::linear(sess, "region.proj", x)
}

/// Text rows then image rows.
pub fn joint_sequence(sess: &mut Session<'_>, text: Var, image: Var) -> Var {
    sess.tape.concat_rows(&[text, image])
}

/// `layers` full-attention blocks over the joint sequence.
pub fn encode_token_level(sess: &mut Session<'_>, joint: Var, layers: usize, heads: usize) -> Result<Var> {
    let n = sess.value(joint).rows();
    let mask = layers::full_mask(n, n);
    let mut h = joint;
    for l in 0..layers {
        h = layers::self_attention_block(sess, &format!("backbone.{l}"), h, &mask, heads)?.0;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;
    use crate::text::{Lexicon, Tag, Vocab};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { vocab_size: 8, hidden: 4, feature_dim: 3, max_positions: 8, backbone_layers: 1, ..Default::default() }
    }

    fn store(cfg: &ModelConfig) -> ParameterStore {
        let mut s = ParameterStore::new();
        init_params(&mut s, cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        s
    }

    fn vocab() -> Vocab {
        let lex = Lexicon::new(["a", "b", "c", "d"].iter().map(|w| (w.to_string(), Tag::Noun)));
        Vocab::from_lexicon(&lex)
    }

    fn seq(words: &str) -> TokenSequence {
        let w: Vec<String> = words.split(' ').map(str::to_string).collect();
        TokenSequence::new(&w, &vocab()).unwrap()
    }

    #[test]
    fn zero_tables_give_zero_rows() {
        let c = cfg();
        let mut s = store(&c);
        *s.get_mut("emb.tok").unwrap() = Tensor2D::zeros(8, 4);
        *s.get_mut("emb.pos").unwrap() = Tensor2D::zeros(8, 4);
        let mut sess = Session::new(&s);
        let h = embed_text(&mut sess, &seq("a b")).unwrap();
        assert_eq!(sess.value(h), &Tensor2D::zeros(4, 4));
    }

    #[test]
    fn embedding_is_gather_plus_position() {
        let c = cfg();
        let s = store(&c);
        let q = seq("a c a");
        let mut sess = Session::new(&s);
        let hv = embed_text(&mut sess, &q).unwrap();
        let h = sess.value(hv).clone();
        let (tok, pos) = (s.get("emb.tok").unwrap(), s.get("emb.pos").unwrap());
        for (i, &id) in q.tokens().iter().enumerate() {
            for j in 0..4 {
                assert_eq!(h.get(i, j), tok.get(id, j) + pos.get(i, j));
            }
        }
        // same token at positions 1 and 3 differ by the position delta
        for j in 0..4 {
            assert_abs_diff_eq!(h.get(3, j) - h.get(1, j), pos.get(3, j) - pos.get(1, j), epsilon = 1e-15);
        }
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let s = store(&cfg());
        let mut sess = Session::new(&s);
        assert!(matches!(embed_ids(&mut sess, "emb", &[0, 9]), Err(CalecError::Vocab { id: 9, .. })));
    }

    #[test]
    fn region_projection() {
        let c = ModelConfig { feature_dim: 4, ..cfg() };
        let mut s = store(&c);
        *s.get_mut("region.proj.w").unwrap() = Tensor2D::identity(4);
        let raw = Tensor2D::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.0, 0.5, 2.0]]).unwrap();
        let mut sess = Session::new(&s);
        let h = project_regions(&mut sess, &raw).unwrap();
        assert_eq!(sess.value(h), &raw);

        let mut s = store(&c);
        s.get_mut("region.proj.b").unwrap().row_mut(0).copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let mut sess = Session::new(&s);
        let h = project_regions(&mut sess, &Tensor2D::zeros(3, 4)).unwrap();
        for r in 0..3 {
            assert_eq!(sess.value(h).row(r), &[0.1, 0.2, 0.3, 0.4]);
        }

        let s = store(&c);
        let mut sess = Session::new(&s);
        let hv = project_regions(&mut sess, &raw).unwrap();
        let h = sess.value(hv).clone();
        let w = s.get("region.proj.w").unwrap();
        let oracle = ops::linear(&raw, w, Some(s.get("region.proj.b").unwrap().row(0))).unwrap();
        assert!(h.max_abs_diff(&oracle) < 1e-14);
        assert!(matches!(project_regions(&mut sess, &Tensor2D::zeros(1, 3)), Err(CalecError::Shape(_))));
    }

    #[test]
    fn zero_layers_is_identity_and_shape_is_kept() {
        let c = cfg();
        let s = store(&c);
        let mut sess = Session::new(&s);
        let x = sess.constant(xavier_uniform(6, 4, &mut ChaCha8Rng::seed_from_u64(5)));
        let y = encode_token_level(&mut sess, x, 0, 1).unwrap();
        assert_eq!(sess.value(x), sess.value(y));
        let z = encode_token_level(&mut sess, x, 1, 1).unwrap();
        assert_eq!(sess.value(z).shape(), (6, 4));
    }

    #[test]
    fn residual_path_with_zero_values_and_ffn() {
        let c = ModelConfig { backbone_layers: 2, ..cfg() };
        let mut s = store(&c);
        for l in 0..2 {
            for name in ["attn.wv", "ffn.fc2.w", "ffn.fc2.b"] {
                let t = s.get_mut(&format!("backbone.{l}.{name}")).unwrap();
                *t = Tensor2D::zeros(t.rows(), t.cols());
            }
        }
        let mut sess = Session::new(&s);
        let x = sess.constant(xavier_uniform(5, 4, &mut ChaCha8Rng::seed_from_u64(9)));
        let y = encode_token_level(&mut sess, x, 2, 1).unwrap();
        assert!(sess.value(x).max_abs_diff(sess.value(y)) < 1e-15);
    }

    #[test]
    fn region_permutation_equivariance() {
        let c = ModelConfig { backbone_layers: 2, ..cfg() };
        let s = store(&c);
        let base = xavier_uniform(6, 4, &mut ChaCha8Rng::seed_from_u64(3));
        let perm = [0, 1, 2, 4, 3, 5];
        let permuted = base.select_rows(&perm);
        let run = |x: &Tensor2D| {
            let mut sess = Session::new(&s);
            let v = sess.constant(x.clone());
            let y = encode_token_level(&mut sess, v, 2, 1).unwrap();
            sess.value(y).clone()
        };
        let (a, b) = (run(&base), run(&permuted));
        assert!(a.select_rows(&perm).max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn single_layer_matches_hand_composition() {
        let c = cfg();
        let s = store(&c);
        let x = xavier_uniform(3, 4, &mut ChaCha8Rng::seed_from_u64(11));
        let mut sess = Session::new(&s);
        let v = sess.constant(x.clone());
        let yv = encode_token_level(&mut sess, v, 1, 1).unwrap();
        let y = sess.value(yv).clone();

        let p = |n: &str| s.get(&format!("backbone.0.{n}")).unwrap().clone();
        let ln = |t: &Tensor2D, g: &Tensor2D, b: &Tensor2D| {
            let mut n = ops::layer_norm_rows(t);
            for r in 0..n.rows() {
                for j in 0..n.cols() {
                    let v = n.get(r, j) * g.get(0, j) + b.get(0, j);
                    n.set(r, j, v);
                }
            }
            n
        };
        let n1 = ln(&x, &p("ln1.g"), &p("ln1.b"));
        let q = n1.matmul(&p("attn.wq")).unwrap();
        let k = n1.matmul(&p("attn.wk")).unwrap();
        let vv = n1.matmul(&p("attn.wv")).unwrap();
        let (a, _) = ops::attention(&q, &k, &vv, &[true; 9]).unwrap();
        let mut h1 = x.clone();
        h1.add_assign(&a);
        let n2 = ln(&h1, &p("ln2.g"), &p("ln2.b"));
        let f = ops::linear(&n2, &p("ffn.fc1.w"), Some(p("ffn.fc1.b").row(0))).unwrap().map(ops::gelu);
        let f = ops::linear(&f, &p("ffn.fc2.w"), Some(p("ffn.fc2.b").row(0))).unwrap();
        h1.add_assign(&f);
        assert!(y.max_abs_diff(&h1) < 1e-13);
    }

    #[test]
    fn region_set_validation() {
        assert!(RegionSet::new(vec![0.0; 3], vec![]).is_err());
        assert!(RegionSet::new(vec![0.0; 3], vec![vec![0.0; 2]]).is_err());
        assert!(RegionSet::new(vec![0.0; 3], vec![vec![f64::NAN; 3]]).is_err());
        let r = RegionSet::new(vec![1.0; 2], vec![vec![2.0; 2]]).unwrap();
        assert_eq!(r.to_tensor().row(0), &[1.0, 1.0]);
    }
}
