//! Dataset records, the planted synthetic generator and split loading.
//!
//! Each image holds a few objects, one per region, with a noun and a color.
//! A sentence mentions one or two colored nouns. A noun phrase whose object
//! exists with the same color is matched, one whose object has another color
//! conflicts, and one whose noun appears nowhere is unsupported. The label is
//! neutral if any phrase is unsupported, contradiction if any conflicts, and
//! entailment otherwise.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunker::{rule_chunk, ChunkSpans};
use crate::config::DataConfig;
use crate::csi::AlignmentLabels;
use crate::encoder::RegionSet;
use crate::error::{CalecError, Result};
use crate::model::ModelInput;
use crate::text::{Lexicon, Tag, TokenSequence, Vocab};

pub const LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];

pub const DETS: [&str; 2] = ["a", "the"];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "black", "white"];
pub const NOUNS: [&str; 8] = ["dog", "cat", "ball", "car", "bird", "tree", "boat", "kite"];
const PREPS: [&str; 3] = ["near", "beside", "behind"];
const OTHER: [&str; 5] = ["there", "is", "no", "not", "only"];

pub const SPLITS: [&str; 4] = ["pretrain", "train", "val", "test"];
pub const LEXICON_FILE: &str = "lexicon.json";

pub fn label_index(label: &str) -> Result<usize> {
    LABELS
        .iter()
        .position(|l| *l == label)
        .ok_or_else(|| CalecError::Data(format!("unknown relation label {label:?}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub image_id: String,
    pub words: Vec<String>,
    /// `"s:e,s:e"`; chunked by rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<String>,
    /// Global feature first, then one row per region.
    pub regions: Vec<Vec<f64>>,
    /// Target candidate per chunk, `-1` for unlabeled chunks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<Vec<i64>>,
    pub label: String,
    pub explanation: Vec<String>,
}

/// A record converted to ids and tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedRecord {
    pub id: String,
    pub input: ModelInput,
    pub align: Option<AlignmentLabels>,
    pub label: usize,
    pub explanation: Vec<usize>,
}

impl PreparedRecord {
    /// Decoder conditioning: the sentence followed by the answer word.
    pub fn prefix(&self, vocab: &Vocab, answer: usize) -> Result<Vec<usize>> {
        let mut p = self.input.seq.content().to_vec();
        p.push(vocab.id(LABELS.get(answer).ok_or(CalecError::Index { index: answer, len: LABELS.len() })?)?);
        Ok(p)
    }
}

impl DatasetRecord {
    pub fn prepare(&self, vocab: &Vocab, lexicon: &Lexicon) -> Result<PreparedRecord> {
        let seq = TokenSequence::new(&self.words, vocab)?;
        let spans = match &self.spans {
            Some(f) => ChunkSpans::parse(f, self.words.len())?,
            None => rule_chunk(&self.words, lexicon)?,
        };
        let (global, rest) = self
            .regions
            .split_first()
            .ok_or_else(|| CalecError::Data(format!("record {} has no image features", self.id)))?;
        let regions = RegionSet::new(global.clone(), rest.to_vec())?;
        let align = match &self.align {
            Some(a) => {
                if a.len() != spans.len() {
                    return Err(CalecError::Data(format!(
                        "record {}: {} alignment labels for {} chunks",
                        self.id,
                        a.len(),
                        spans.len()
                    )));
                }
                Some(AlignmentLabels::from_field(a, regions.count() + 1)?)
            }
            None => None,
        };
        Ok(PreparedRecord {
            id: self.id.clone(),
            input: ModelInput::new(seq, spans, &regions)?,
            align,
            label: label_index(&self.label)?,
            explanation: vocab.encode_words(&self.explanation)?,
        })
    }
}

/// Lexicon covering every word the generator can emit.
pub fn synthetic_lexicon() -> Lexicon {
    let tagged = |ws: &'static [&'static str], t: Tag| ws.iter().map(move |w| (w.to_string(), t));
    Lexicon::new(
        tagged(&DETS, Tag::Det)
            .chain(tagged(&COLORS, Tag::Adj))
            .chain(tagged(&NOUNS, Tag::Noun))
            .chain(tagged(&PREPS, Tag::Prep))
            .chain([("is".to_string(), Tag::Aux)])
            .chain(tagged(&OTHER, Tag::Other))
            .chain(tagged(&LABELS, Tag::Other)),
    )
}

/// Prototype feature vectors of nouns and colors.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub nouns: Vec<Vec<f64>>,
    pub colors: Vec<Vec<f64>>,
    pub regions: usize,
    pub noise: f64,
}

impl World {
    pub fn new(cfg: &DataConfig) -> Result<Self> {
        // a neutral phrase needs a noun outside the image and a conflicting
        // phrase a color outside it
        let max = (NOUNS.len() - 1).min(COLORS.len() - 1);
        if cfg.regions < 2 || cfg.regions > max {
            return Err(CalecError::Config(format!("regions must lie in 2..={max}")));
        }
        if cfg.feature_dim < 1 {
            return Err(CalecError::Config("feature_dim must be at least 1".into()));
        }
        // prototypes come from their own stream so split sizes never move them
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f1d);
        let mut proto = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..cfg.feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let nouns = proto(NOUNS.len());
        let colors = proto(COLORS.len());
        Ok(Self { nouns, colors, regions: cfg.regions, noise: cfg.noise })
    }

    pub fn feature(&self, noun: usize, color: usize, rng: &mut impl Rng) -> Vec<f64> {
        self.nouns[noun]
            .iter()
            .zip(&self.colors[color])
            .map(|(n, c)| n + c + self.noise * rng.gen_range(-1.0..1.0))
            .collect()
    }

    /// Nearest noun and color prototypes of a region feature.
    pub fn decode(&self, feature: &[f64]) -> (usize, usize) {
        let mut best = (0, 0, f64::INFINITY);
        for n in 0..self.nouns.len() {
            for c in 0..self.colors.len() {
                let d: f64 = feature
                    .iter()
                    .zip(self.nouns[n].iter().zip(&self.colors[c]))
                    .map(|(f, (a, b))| (f - a - b).powi(2))
                    .sum();
                if d < best.2 {
                    best = (n, c, d);
                }
            }
        }
        (best.0, best.1)
    }
}

/// Status of one noun phrase against the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Evidence {
    Matched { region: usize },
    Conflict { region: usize, color: usize },
    Absent,
}

/// Relation label and deciding phrase index from per-phrase evidence.
pub fn decide(evidence: &[Evidence]) -> (usize, usize) {
    if let Some(i) = evidence.iter().position(|e| matches!(e, Evidence::Absent)) {
        return (2, i);
    }
    if let Some(i) = evidence.iter().position(|e| matches!(e, Evidence::Conflict { .. })) {
        return (1, i);
    }
    (0, 0)
}

/// Gold explanation naming the deciding phrase `(det, color, noun)`.
pub fn explanation(label: usize, phrase: (usize, usize, usize), evidence: Evidence) -> Vec<String> {
    let (det, color, noun) = phrase;
    let w = |s: &str| s.to_string();
    match (label, evidence) {
        (0, _) => vec![w("there"), w("is"), w(DETS[det]), w(COLORS[color]), w(NOUNS[noun])],
        (1, Evidence::Conflict { color: actual, .. }) => {
            vec![w("the"), w(NOUNS[noun]), w("is"), w(COLORS[actual]), w("not"), w(COLORS[color])]
        }
        _ => vec![w("there"), w("is"), w("no"), w(NOUNS[noun])],
    }
}

struct Planted {
    words: Vec<String>,
    spans: Vec<(usize, usize)>,
    align: Vec<i64>,
    label: usize,
    explanation: Vec<String>,
    objects: Vec<(usize, usize)>,
}

fn plant(world: &World, rng: &mut impl Rng, pretrain: bool) -> Planted {
    let n = world.regions;
    let mut nouns: Vec<usize> = (0..NOUNS.len()).collect();
    nouns.shuffle(rng);
    let objects: Vec<(usize, usize)> = nouns[..n].iter().map(|&o| (o, rng.gen_range(0..COLORS.len()))).collect();
    let phrases = rng.gen_range(1..=2);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);

    let label = if pretrain { 0 } else { rng.gen_range(0..3) };
    let decider = rng.gen_range(0..phrases);
    let mut chosen = Vec::with_capacity(phrases);
    let mut evidence = Vec::with_capacity(phrases);
    for p in 0..phrases {
        let region = order[p];
        let (noun, color) = objects[region];
        let det = rng.gen_range(0..DETS.len());
        if p == decider && label == 1 {
            // the stated color appears on no region, so the conflict shows
            // as co-occurrence and not only through binding color to noun
            let unused: Vec<usize> = (0..COLORS.len()).filter(|c| objects.iter().all(|o| o.1 != *c)).collect();
            let other = *unused.choose(rng).expect("fewer regions than colors");
            chosen.push((det, other, noun));
            evidence.push(Evidence::Conflict { region, color });
        } else if p == decider && label == 2 {
            // a noun with no region in this image
            let absent = nouns[n + rng.gen_range(0..NOUNS.len() - n)];
            chosen.push((det, rng.gen_range(0..COLORS.len()), absent));
            evidence.push(Evidence::Absent);
        } else {
            chosen.push((det, color, noun));
            evidence.push(Evidence::Matched { region });
        }
    }
    let (label, deciding) = decide(&evidence);

    let mut words = Vec::new();
    let mut spans = Vec::new();
    let mut align = Vec::new();
    for (p, &(det, color, noun)) in chosen.iter().enumerate() {
        if p > 0 {
            let verb = words.len();
            words.push("is".to_string());
            words.push(PREPS[rng.gen_range(0..PREPS.len())].to_string());
            spans.push((verb, verb + 1));
            spans.push((verb + 1, verb + 2));
            align.extend([-1, -1]);
        }
        let start = words.len();
        words.extend([DETS[det], COLORS[color], NOUNS[noun]].map(String::from));
        spans.push((start, start + 3));
        align.push(match evidence[p] {
            Evidence::Matched { region } | Evidence::Conflict { region, .. } => region as i64 + 1,
            Evidence::Absent => -1,
        });
    }
    let explanation = explanation(label, chosen[deciding], evidence[deciding]);
    Planted { words, spans, align, label, explanation, objects }
}

/// Generates one split. `offset` keeps record and image ids unique across splits.
pub fn generate_split(world: &World, split: &str, count: usize, offset: usize, rng: &mut impl Rng) -> Vec<DatasetRecord> {
    (0..count)
        .map(|i| {
            let p = plant(world, rng, split == "pretrain");
            let mut regions: Vec<Vec<f64>> = p.objects.iter().map(|&(n, c)| world.feature(n, c, rng)).collect();
            let f = regions[0].len();
            let global: Vec<f64> = (0..f).map(|j| regions.iter().map(|r| r[j]).sum::<f64>() / regions.len() as f64).collect();
            regions.insert(0, global);
            DatasetRecord {
                id: format!("{split}-{i:05}"),
                image_id: format!("img{:06}", offset + i),
                spans: Some(ChunkSpans::new(p.spans, p.words.len()).expect("planted spans are valid").to_field()),
                words: p.words,
                regions,
                align: Some(p.align),
                label: LABELS[p.label].to_string(),
                explanation: p.explanation,
            }
        })
        .collect()
}

/// All four splits and the lexicon.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub lexicon: Lexicon,
    pub pretrain: Vec<DatasetRecord>,
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn synthetic(cfg: &DataConfig) -> Result<Self> {
        let world = World::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut offset = 0;
        let mut next = |split: &str, n: usize| {
            let recs = generate_split(&world, split, n, offset, &mut rng);
            offset += n;
            recs
        };
        Ok(Self {
            lexicon: synthetic_lexicon(),
            pretrain: next("pretrain", cfg.pretrain),
            train: next("train", cfg.train),
            val: next("val", cfg.val),
            test: next("test", cfg.test),
        })
    }

    pub fn split(&self, name: &str) -> Result<&[DatasetRecord]> {
        match name {
            "pretrain" => Ok(&self.pretrain),
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(CalecError::Data(format!("unknown split {other:?}"))),
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::from_lexicon(&self.lexicon)
    }

    /// Fails if any image id appears in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: Vec<(&str, HashSet<&str>)> = Vec::new();
        for name in SPLITS {
            let ids: HashSet<&str> = self.split(name)?.iter().map(|r| r.image_id.as_str()).collect();
            for (other, prev) in &seen {
                if let Some(shared) = ids.intersection(prev).next() {
                    return Err(CalecError::Data(format!("image {shared} appears in both {other} and {name}")));
                }
            }
            seen.push((name, ids));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut targets: Vec<PathBuf> = SPLITS.iter().map(|s| dir.join(format!("{s}.jsonl"))).collect();
        targets.push(dir.join(LEXICON_FILE));
        if !force {
            if let Some(p) = targets.iter().find(|p| p.exists()) {
                return Err(CalecError::Exists(p.display().to_string()));
            }
        }
        for name in SPLITS {
            write_jsonl(&dir.join(format!("{name}.jsonl")), self.split(name)?)?;
        }
        fs::write(dir.join(LEXICON_FILE), serde_json::to_string_pretty(&self.lexicon)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut lexicon: Lexicon = serde_json::from_str(&fs::read_to_string(dir.join(LEXICON_FILE))?)?;
        lexicon.reindex();
        let read = |s: &str| read_jsonl(&dir.join(format!("{s}.jsonl")));
        let ds = Self { lexicon, pretrain: read("pretrain")?, train: read("train")?, val: read("val")?, test: read("test")? };
        ds.check_disjoint()?;
        Ok(ds)
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = fs::File::open(path).map_err(|e| CalecError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CalecError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Converts a split, failing on the first bad record.
pub fn prepare_all(records: &[DatasetRecord], vocab: &Vocab, lexicon: &Lexicon) -> Result<Vec<PreparedRecord>> {
    records.iter().map(|r| r.prepare(vocab, lexicon)).collect()
}
