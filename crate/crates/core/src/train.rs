//! Training loops for alignment pre-training, relation training and
//! generator training.
//!
//! Each minibatch computes per-example gradients (in parallel under
//! [`Execution::Parallel`]) and sums them in example order, so a run is
//! bit-identical whichever execution mode is used.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::Config;
use crate::data::PreparedRecord;
use crate::decoding::Boundaries;
use crate::error::{CalecError, Result};
use crate::model::{self, CalecModel, GeneratorExample, CSI_PREFIX, GENERATOR_PREFIX};
use crate::numerics::{adam_step, ops, AdamState, Gradients, ParameterStore, Session, Var};
use crate::parallel::Execution;
use crate::text::Vocab;

/// One row of a loss curve. `metric` is the validation score used for early
/// stopping (higher is better).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Row 0 is the untrained model.
    pub curve: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn best_metric(&self) -> f64 {
        self.curve[self.best_epoch].metric
    }

    pub fn write_csv(&self, path: &Path, metric_name: &str, force: bool) -> Result<()> {
        if path.exists() && !force {
            return Err(CalecError::Exists(path.display().to_string()));
        }
        let mut f = fs::File::create(path)?;
        writeln!(f, "epoch,train_loss,{metric_name}")?;
        for r in &self.curve {
            writeln!(f, "{},{},{}", r.epoch, r.train_loss, r.metric)?;
        }
        Ok(())
    }
}

/// Shared optimization settings of one stage.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub lr: f64,
    pub groups: Vec<(String, f64)>,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub linear_decay: bool,
    pub seed: u64,
}

impl Schedule {
    pub fn from_config(cfg: &Config) -> Self {
        let t = &cfg.train;
        Self {
            lr: t.lr,
            groups: Vec::new(),
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            linear_decay: t.linear_decay,
            seed: t.seed,
        }
    }
}

/// Mean loss and summed gradients over a batch, reduced in index order.
pub fn batch_gradients<F>(store: &ParameterStore, batch: &[usize], exec: Execution, loss: &F) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Session<'_>, usize) -> Result<Var> + Sync,
{
    let parts = exec.map(batch, |&i| -> Result<(f64, Gradients)> {
        let mut sess = Session::new(store);
        let l = loss(&mut sess, i)?;
        let v = sess.value(l).item();
        if !v.is_finite() {
            return Err(CalecError::Numeric(format!("non-finite loss on example {i}")));
        }
        Ok((v, sess.gradients(l)))
    });
    let mut total = 0.0;
    let mut grads = Gradients::new();
    for p in parts {
        let (v, g) = p?;
        total += v;
        grads.accumulate(&g);
    }
    Ok((total, grads))
}

/// Minibatch Adam with early stopping on `metric`. The parameters with the
/// best metric seen (including the starting point) are restored at the end.
pub fn fit<F, M>(
    params: &mut ParameterStore,
    n: usize,
    schedule: &Schedule,
    exec: Execution,
    loss: F,
    metric: M,
) -> Result<(TrainReport, AdamState)>
where
    F: Fn(&mut Session<'_>, usize) -> Result<Var> + Sync,
    M: Fn(&ParameterStore) -> Result<f64>,
{
    if schedule.batch_size < 1 {
        return Err(CalecError::Config("batch_size must be at least 1".into()));
    }
    if n == 0 {
        return Err(CalecError::Data("no training examples".into()));
    }
    let batches = n.div_ceil(schedule.batch_size);
    let mut opt = AdamState::new(schedule.lr);
    for (p, lr) in &schedule.groups {
        opt = opt.with_group(p.clone(), *lr);
    }
    if schedule.linear_decay {
        opt = opt.with_linear_decay((batches * schedule.epochs) as u64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut order: Vec<usize> = (0..n).collect();

    let initial_loss = {
        let all: Vec<usize> = (0..n).collect();
        all.chunks(schedule.batch_size.max(64))
            .map(|b| batch_gradients(params, b, exec, &loss).map(|r| r.0))
            .sum::<Result<f64>>()?
            / n as f64
    };
    let mut curve = vec![EpochStats { epoch: 0, train_loss: initial_loss, metric: metric(params)? }];
    let mut best = (0usize, curve[0].metric, params.clone());
    let mut stopped_early = false;
    for epoch in 1..=schedule.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let (l, mut g) = batch_gradients(params, batch, exec, &loss)?;
            total += l;
            g.scale(1.0 / batch.len() as f64);
            adam_step(params, &g, &mut opt)?;
        }
        let m = metric(params)?;
        curve.push(EpochStats { epoch, train_loss: total / n as f64, metric: m });
        if m > best.1 {
            best = (epoch, m, params.clone());
        } else if epoch - best.0 >= schedule.patience {
            stopped_early = true;
            break;
        }
    }
    let frozen: Vec<String> = params.frozen().map(String::from).collect();
    *params = best.2;
    for f in frozen {
        params.freeze(&f)?;
    }
    Ok((TrainReport { curve, best_epoch: best.0, stopped_early }, opt))
}

/// Argmax accuracy of summed chunk-to-region attention over labeled chunks.
pub fn alignment_accuracy(model: &CalecModel, records: &[PreparedRecord], exec: Execution) -> Result<f64> {
    let parts = exec.map(records, |r| -> Result<(usize, usize)> {
        let Some(labels) = &r.align else { return Ok((0, 0)) };
        let inf = model.infer(&r.input)?;
        let mut hit = 0;
        for (k, t) in labels.labeled() {
            hit += usize::from(ops::argmax(inf.alignment.row(k)) == t);
        }
        Ok((hit, labels.labeled_count()))
    });
    let (mut hit, mut total) = (0, 0);
    for p in parts {
        let (h, t) = p?;
        hit += h;
        total += t;
    }
    if total == 0 {
        return Err(CalecError::EmptyLabels);
    }
    Ok(hit as f64 / total as f64)
}

pub fn relation_accuracy(model: &CalecModel, records: &[PreparedRecord], exec: Execution) -> Result<f64> {
    if records.is_empty() {
        return Err(CalecError::Data("no records to score".into()));
    }
    let hits = exec.map(records, |r| model.infer(&r.input).map(|i| usize::from(i.prediction.predicted == r.label)));
    Ok(hits.into_iter().sum::<Result<usize>>()? as f64 / records.len() as f64)
}

fn check_vocab(cfg: &Config, vocab: &Vocab) -> Result<()> {
    if vocab.len() > cfg.model.vocab_size {
        return Err(CalecError::Config(format!(
            "vocabulary has {} entries but model.vocab_size is {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    Ok(())
}

/// Alignment pre-training of the encoder and interactor.
pub fn pretrain_csi(
    cfg: &Config,
    init: Option<Checkpoint>,
    train: &[PreparedRecord],
    val: &[PreparedRecord],
    vocab: &Vocab,
    exec: Execution,
) -> Result<(Checkpoint, TrainReport)> {
    check_vocab(cfg, vocab)?;
    if let Some(r) = train.iter().find(|r| r.align.as_ref().is_none_or(|a| a.labeled_count() == 0)) {
        return Err(CalecError::Data(format!("record {} has no alignment labels", r.id)));
    }
    let mut m = match init {
        Some(c) => c.model(),
        None => CalecModel::init(cfg.model.clone())?,
    };
    let mc = m.config.clone();
    let loss = |s: &mut Session<'_>, i: usize| {
        let r = &train[i];
        model::alignment_loss(s, &mc, &r.input, r.align.as_ref().expect("checked above"))
    };
    let metric = |p: &ParameterStore| {
        let probe = CalecModel { config: mc.clone(), params: p.clone() };
        alignment_accuracy(&probe, val, exec)
    };
    let (report, opt) = fit(&mut m.params, train.len(), &Schedule::from_config(cfg), exec, loss, metric)?;
    let mut out_cfg = cfg.clone();
    out_cfg.model = m.config;
    Ok((Checkpoint::new(Stage::Pretrain, out_cfg, m.params, Some(opt)), report))
}

/// Relation training of encoder, interactor and inferrer. The interactor
/// group uses its own learning rate.
pub fn train_stage1(
    cfg: &Config,
    init: Option<Checkpoint>,
    train: &[PreparedRecord],
    val: &[PreparedRecord],
    vocab: &Vocab,
    exec: Execution,
) -> Result<(Checkpoint, TrainReport)> {
    check_vocab(cfg, vocab)?;
    let mut m = match init {
        Some(c) => {
            c.require(&[Stage::Pretrain, Stage::Stage1])?;
            c.model()
        }
        None => CalecModel::init(cfg.model.clone())?,
    };
    let mc = m.config.clone();
    let loss = |s: &mut Session<'_>, i: usize| model::stage1_loss(s, &mc, &train[i].input, train[i].label);
    let metric = |p: &ParameterStore| {
        let probe = CalecModel { config: mc.clone(), params: p.clone() };
        relation_accuracy(&probe, val, exec)
    };
    let mut schedule = Schedule::from_config(cfg);
    schedule.groups.push((CSI_PREFIX.to_string(), cfg.train.csi_lr));
    let (report, opt) = fit(&mut m.params, train.len(), &schedule, exec, loss, metric)?;
    let mut out_cfg = cfg.clone();
    out_cfg.model = m.config;
    Ok((Checkpoint::new(Stage::Stage1, out_cfg, m.params, Some(opt)), report))
}

/// Encoder-side context of each record with the gold answer in the prefix.
pub fn generator_examples(
    model: &CalecModel,
    records: &[PreparedRecord],
    vocab: &Vocab,
    exec: Execution,
) -> Result<Vec<GeneratorExample>> {
    exec.map(records, |r| -> Result<GeneratorExample> {
        let inf = model.infer(&r.input)?;
        Ok(GeneratorExample {
            o_w: inf.o_w,
            constraints: inf.constraints,
            prefix: r.prefix(vocab, r.label)?,
            target: r.explanation.clone(),
        })
    })
    .into_iter()
    .collect()
}

/// Mean teacher-forced negative log-likelihood per target token
/// (explanation plus EOS).
pub fn generator_nll(
    model: &CalecModel,
    examples: &[GeneratorExample],
    bounds: Boundaries,
    lexical: bool,
    exec: Execution,
) -> Result<f64> {
    let parts = exec.map(examples, |ex| -> Result<(f64, usize)> {
        let mut s = Session::new(&model.params);
        let l = model::stage2_loss(&mut s, &model.config, ex, bounds, lexical)?;
        Ok((s.value(l).item(), ex.target.len() + 1))
    });
    let (mut nll, mut count) = (0.0, 0);
    for p in parts {
        let (l, c) = p?;
        nll += l;
        count += c;
    }
    Ok(nll / count.max(1) as f64)
}

/// Generator training with every non-generator parameter frozen. With
/// `lexical` off the generator is trained on the plain vocabulary softmax.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    cfg: &Config,
    stage1: Checkpoint,
    train: &[PreparedRecord],
    val: &[PreparedRecord],
    vocab: &Vocab,
    lexical: bool,
    exec: Execution,
) -> Result<(Checkpoint, TrainReport)> {
    check_vocab(cfg, vocab)?;
    stage1.require(&[Stage::Stage1, Stage::Stage2])?;
    let mut m = stage1.model();
    m.params.unfreeze_all();
    m.params.set_frozen_where(|n| !n.starts_with(GENERATOR_PREFIX));
    let encoder_side = |n: &str| !n.starts_with(GENERATOR_PREFIX);
    let before = m.params.fingerprint(encoder_side);

    let bounds = Boundaries { bos: vocab.bos(), eos: vocab.eos() };
    let train_ex = generator_examples(&m, train, vocab, exec)?;
    let val_ex = generator_examples(&m, val, vocab, exec)?;
    let mc = m.config.clone();
    let loss = |s: &mut Session<'_>, i: usize| model::stage2_loss(s, &mc, &train_ex[i], bounds, lexical);
    let metric = |p: &ParameterStore| {
        let probe = CalecModel { config: mc.clone(), params: p.clone() };
        generator_nll(&probe, &val_ex, bounds, lexical, exec).map(|v| -v)
    };
    let (report, opt) = fit(&mut m.params, train_ex.len(), &Schedule::from_config(cfg), exec, loss, metric)?;
    if m.params.fingerprint(encoder_side) != before {
        return Err(CalecError::Staging("frozen encoder parameters changed during generator training".into()));
    }
    let mut out_cfg = stage1.config.clone();
    out_cfg.train = cfg.train.clone();
    out_cfg.decode = cfg.decode.clone();
    Ok((Checkpoint::new(Stage::Stage2, out_cfg, m.params, Some(opt)), report))
}
