//! Evaluation: relation accuracy, explanation BLEU over correctly answered
//! records, and their product.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bleu::bleu4;
use crate::config::DecodeConfig;
use crate::data::{DatasetRecord, LABELS};
use crate::decoding::Boundaries;
use crate::error::{CalecError, Result};
use crate::model::{CalecModel, GenerationMode};
use crate::numerics::Fnv64;
use crate::parallel::Execution;
use crate::text::{Lexicon, Vocab};

/// Per-record output. Failed records carry `error` and count as wrong.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
    pub explanation: Vec<String>,
    pub reference: Vec<String>,
    pub bleu: f64,
    pub constraints: Vec<String>,
    /// Distinct constraint words present in the explanation.
    pub constraint_hits: usize,
    pub saliency: Vec<f64>,
    /// Chunk-to-region attention summed over cross-modal layers.
    pub alignment: Vec<Vec<f64>>,
    pub spans: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub s_t: f64,
    pub s_e: f64,
    pub s_o: f64,
    pub failed: usize,
    pub rows: Vec<SampleRow>,
}

impl EvalReport {
    /// `S_T` is accuracy over all rows, `S_E` the mean BLEU over correct
    /// rows (0 with none correct) and `S_O = S_T * S_E`.
    pub fn from_rows(rows: Vec<SampleRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(CalecError::Data("nothing to evaluate".into()));
        }
        let correct: Vec<&SampleRow> = rows.iter().filter(|r| r.correct).collect();
        let s_t = correct.len() as f64 / rows.len() as f64;
        let s_e = if correct.is_empty() {
            0.0
        } else {
            correct.iter().map(|r| r.bleu).sum::<f64>() / correct.len() as f64
        };
        let failed = rows.iter().filter(|r| r.error.is_some()).count();
        Ok(Self { s_t, s_e, s_o: s_t * s_e, failed, rows })
    }

    pub fn mean_constraint_hits(&self) -> f64 {
        let ok: Vec<&SampleRow> = self.rows.iter().filter(|r| r.error.is_none()).collect();
        ok.iter().map(|r| r.constraint_hits as f64).sum::<f64>() / ok.len().max(1) as f64
    }

    /// Writes `<stem>.csv` (summary) and `<stem>.jsonl` (one row per record).
    pub fn write(&self, stem: &Path, force: bool) -> Result<(PathBuf, PathBuf)> {
        let csv = stem.with_extension("csv");
        let jsonl = stem.with_extension("jsonl");
        if !force {
            if let Some(p) = [&csv, &jsonl].into_iter().find(|p| p.exists()) {
                return Err(CalecError::Exists(p.display().to_string()));
            }
        }
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(&csv)?;
        writeln!(f, "metric,value")?;
        writeln!(f, "S_T,{}", self.s_t)?;
        writeln!(f, "S_E,{}", self.s_e)?;
        writeln!(f, "S_O,{}", self.s_o)?;
        writeln!(f, "records,{}", self.rows.len())?;
        writeln!(f, "failed,{}", self.failed)?;
        writeln!(f, "mean_constraint_hits,{}", self.mean_constraint_hits())?;
        crate::data::write_jsonl(&jsonl, &self.rows)?;
        Ok((csv, jsonl))
    }
}

/// Decode seed of one record, independent of evaluation order.
pub fn record_seed(seed: u64, id: &str) -> u64 {
    let mut h = Fnv64::new();
    h.write(&seed.to_le_bytes());
    h.write(id.as_bytes());
    h.finish()
}

/// Strips the end marker and anything after it.
fn until_eos(tokens: &[usize], eos: usize) -> &[usize] {
    let end = tokens.iter().position(|&t| t == eos).unwrap_or(tokens.len());
    &tokens[..end]
}

pub fn evaluate_record(
    model: &CalecModel,
    record: &DatasetRecord,
    vocab: &Vocab,
    lexicon: &Lexicon,
    decode: &DecodeConfig,
    mode: GenerationMode,
) -> SampleRow {
    let mut row = SampleRow {
        id: record.id.clone(),
        gold: record.label.clone(),
        predicted: None,
        correct: false,
        explanation: Vec::new(),
        reference: record.explanation.clone(),
        bleu: 0.0,
        constraints: Vec::new(),
        constraint_hits: 0,
        saliency: Vec::new(),
        alignment: Vec::new(),
        spans: record.spans.clone(),
        error: None,
    };
    let run = |row: &mut SampleRow| -> Result<()> {
        let prepared = record.prepare(vocab, lexicon)?;
        let inf = model.infer(&prepared.input)?;
        let predicted = inf.prediction.predicted;
        row.predicted = Some(LABELS.get(predicted).map_or_else(|| predicted.to_string(), |s| s.to_string()));
        row.correct = predicted == prepared.label;
        row.saliency = inf.saliency.clone();
        row.alignment = inf.alignment.to_rows();
        row.constraints = inf.constraints.ids().map(|id| vocab.word(id).map(String::from)).collect::<Result<_>>()?;
        let prefix = prepared.prefix(vocab, predicted)?;
        let cfg = DecodeConfig { seed: record_seed(decode.seed, &record.id), ..decode.clone() };
        let bounds = Boundaries { bos: vocab.bos(), eos: vocab.eos() };
        let out = model.explain(&inf, &prefix, bounds, vocab.len(), &cfg, mode, Execution::Sequential)?;
        let tokens = until_eos(out.sentence(), vocab.eos());
        row.constraint_hits = inf.constraints.ids().filter(|id| tokens.contains(id)).count();
        row.explanation = vocab.decode(tokens)?;
        row.bleu = bleu4(&row.explanation, std::slice::from_ref(&row.reference))?;
        Ok(())
    };
    if let Err(e) = run(&mut row) {
        row.correct = false;
        row.bleu = 0.0;
        row.error = Some(e.to_string());
    }
    row
}

/// Evaluates every record; records run concurrently under
/// [`Execution::Parallel`] with per-record decode seeds.
pub fn evaluate(
    model: &CalecModel,
    records: &[DatasetRecord],
    vocab: &Vocab,
    lexicon: &Lexicon,
    decode: &DecodeConfig,
    mode: GenerationMode,
    exec: Execution,
) -> Result<EvalReport> {
    decode.validate(model.config.vocab_size)?;
    let rows = exec.map(records, |r| evaluate_record(model, r, vocab, lexicon, decode, mode));
    EvalReport::from_rows(rows)
}
