//! Beam sampling and its lexically constrained variant.
//!
//! Every live beam draws `sample_size` continuations from a top-k truncated
//! distribution. Candidates are ranked by cumulative log-probability; in the
//! constrained variant a candidate whose newest token is a constraint has its
//! score multiplied by `lambda`, which lifts a negative score toward zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DecodeConfig;
use crate::error::{CalecError, Result};
use crate::lecg::ConstraintState;
use crate::parallel::Execution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    /// Starts with BOS.
    pub sent: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

impl Beam {
    pub fn start(bos: usize) -> Self {
        Self { sent: vec![bos], score: 0.0, finished: false }
    }

    pub fn last(&self) -> usize {
        *self.sent.last().expect("beam holds at least BOS")
    }

    /// Generated tokens, without the leading BOS.
    pub fn tokens(&self) -> &[usize] {
        &self.sent[1..]
    }
}

/// Result of a decode, with every ranked candidate pool kept for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub beams: Vec<Beam>,
    /// Candidate pool of each step, after any lambda adjustment and before ranking.
    pub pools: Vec<Vec<Beam>>,
}

impl Decoded {
    pub fn best(&self) -> &Beam {
        &self.beams[0]
    }

    /// Best sentence without BOS; ends with EOS unless the length cap was hit.
    pub fn sentence(&self) -> &[usize] {
        self.best().tokens()
    }
}

/// Draws one token from the `top_k` most probable entries of `p`,
/// renormalized. Ties in probability go to the lower id.
pub fn top_k_sample_step(p: &[f64], top_k: usize, rng: &mut impl Rng) -> Result<usize> {
    if top_k < 1 {
        return Err(CalecError::Config("top_k must be at least 1".into()));
    }
    if p.is_empty() {
        return Err(CalecError::Numeric("empty distribution".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CalecError::Numeric("distribution has negative or non-finite mass".into()));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    // stable sort keeps lower ids first among equal probabilities
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    order.truncate(top_k);
    let total: f64 = order.iter().map(|&i| p[i]).sum();
    if total <= 0.0 {
        return Err(CalecError::Numeric("no probability mass in the top-k entries".into()));
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for &i in &order {
        acc += p[i];
        if u < acc && p[i] > 0.0 {
            return Ok(i);
        }
    }
    // roundoff left u at the very top: take the last entry with mass
    Ok(*order.iter().rev().find(|&&i| p[i] > 0.0).expect("total > 0"))
}

/// Special token ids the search needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Boundaries {
    pub bos: usize,
    pub eos: usize,
}

/// Plain beam sample: `lambda` in `cfg` is ignored.
pub fn beam_sample<F>(step: F, bounds: Boundaries, cfg: &DecodeConfig, exec: Execution) -> Result<Decoded>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    search(step, bounds, cfg, None, exec)
}

pub fn constrained_beam_sample<F>(
    step: F,
    bounds: Boundaries,
    constraints: &ConstraintState,
    cfg: &DecodeConfig,
    exec: Execution,
) -> Result<Decoded>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    search(step, bounds, cfg, Some(constraints), exec)
}

/// Score of a candidate whose newest token may be a constraint.
pub fn adjust_score(score: f64, hit: bool, lambda: f64) -> f64 {
    if hit {
        lambda * score
    } else {
        score
    }
}

fn search<F>(
    step: F,
    bounds: Boundaries,
    cfg: &DecodeConfig,
    constraints: Option<&ConstraintState>,
    exec: Execution,
) -> Result<Decoded>
where
    F: Fn(&[usize]) -> Result<Vec<f64>> + Sync,
{
    if cfg.beam < 1 || cfg.sample_size < 1 {
        return Err(CalecError::Config("beam and sample size must be at least 1".into()));
    }
    if constraints.is_some() && !(cfg.lambda > 0.0 && cfg.lambda <= 1.0) {
        return Err(CalecError::Config("lambda must lie in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut beams = vec![Beam::start(bounds.bos)];
    let mut pools = Vec::new();
    for _ in 0..cfg.max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let live: Vec<&Beam> = beams.iter().filter(|b| !b.finished).collect();
        let dists = exec.map(&live, |b| step(&b.sent));
        let mut dists = dists.into_iter();

        let mut pool: Vec<Beam> = Vec::with_capacity(beams.len() * cfg.sample_size);
        for beam in &beams {
            if beam.finished {
                pool.push(beam.clone());
                continue;
            }
            let p = dists.next().expect("one distribution per live beam")?;
            for _ in 0..cfg.sample_size {
                let tok = top_k_sample_step(&p, cfg.top_k, &mut rng)?;
                let mut sent = beam.sent.clone();
                sent.push(tok);
                if pool.iter().any(|b| b.sent == sent) {
                    continue;
                }
                let mut score = beam.score + p[tok].ln();
                if let Some(s) = constraints {
                    score = adjust_score(score, s.contains(tok), cfg.lambda);
                }
                let finished = tok == bounds.eos || sent.len() > cfg.max_len;
                pool.push(Beam { sent, score, finished });
            }
        }
        let mut ranked = pool.clone();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        ranked.truncate(cfg.beam);
        pools.push(pool);
        beams = ranked;
    }
    Ok(Decoded { beams, pools })
}
