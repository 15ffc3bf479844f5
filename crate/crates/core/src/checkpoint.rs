//! Checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as raw little-endian `f64` in manifest order.
//! Values are copied bit for bit, so a reload reproduces forward outputs
//! exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CalecError, Result};
use crate::model::CalecModel;
use crate::numerics::{AdamState, ParameterStore, Tensor2D};

const MAGIC: &[u8; 8] = b"CALECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Stage1,
    Stage2,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset in scalars from the start of the payload.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: Stage,
    config: Config,
    frozen: Vec<String>,
    params: Vec<Entry>,
    optimizer: Option<AdamState>,
    /// First and second moments, in that order per parameter.
    moments: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: Config,
    pub params: ParameterStore,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(stage: Stage, config: Config, params: ParameterStore, optimizer: Option<AdamState>) -> Self {
        Self { stage, config, params, optimizer }
    }

    pub fn model(&self) -> CalecModel {
        CalecModel { config: self.config.model.clone(), params: self.params.clone() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload: Vec<f64> = Vec::with_capacity(self.params.scalar_count());
        let mut push = |name: &str, t: &Tensor2D| {
            let e = Entry { name: name.to_string(), rows: t.rows(), cols: t.cols(), offset: payload.len() };
            payload.extend_from_slice(t.data());
            e
        };
        let params: Vec<Entry> = self.params.iter().map(|(n, t)| push(n, t)).collect();
        let mut moments = Vec::new();
        if let Some(opt) = &self.optimizer {
            for (n, m, v) in opt.moments() {
                moments.push(push(n, m));
                moments.push(push(n, v));
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            stage: self.stage,
            config: self.config.clone(),
            frozen: self.params.frozen().map(String::from).collect(),
            params,
            optimizer: self.optimizer.clone(),
            moments,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CalecError::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(CalecError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(u64b) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])?;
        let payload = &r[len..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let read = |e: &Entry| -> Result<Tensor2D> {
            let n = e.rows * e.cols;
            let (start, end) = (e.offset * 8, (e.offset + n) * 8);
            if end > payload.len() {
                return Err(CalecError::Checkpoint(format!("tensor {} runs past the payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor2D::from_vec(e.rows, e.cols, data)
        };
        let mut params = ParameterStore::new();
        for e in &header.params {
            params.insert(e.name.clone(), read(e)?)?;
        }
        for name in &header.frozen {
            params.freeze(name)?;
        }
        let optimizer = match header.optimizer {
            Some(mut opt) => {
                for pair in header.moments.chunks(2) {
                    let [m, v] = pair else { return Err(bad("unpaired optimizer moments")) };
                    opt.set_moments(&m.name, read(m)?, read(v)?);
                }
                Some(opt)
            }
            None => None,
        };
        Ok(Self { stage: header.stage, config: header.config, params, optimizer })
    }

    pub fn save(&self, path: &Path, force: bool) -> Result<()> {
        if path.exists() && !force {
            return Err(CalecError::Exists(path.display().to_string()));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CalecError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn require(&self, stages: &[Stage]) -> Result<()> {
        if stages.contains(&self.stage) {
            Ok(())
        } else {
            Err(CalecError::Staging(format!("checkpoint is tagged {}, expected one of {stages:?}", self.stage)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::numerics::{adam_step, Gradients};

    fn tiny() -> Config {
        let model = ModelConfig { hidden: 4, vocab_size: 10, feature_dim: 3, max_positions: 12, ..Default::default() };
        Config { model, ..Default::default() }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny();
        let mut model = CalecModel::init(cfg.model.clone()).unwrap();
        model.params.get_mut("emb.tok").unwrap().set(0, 0, f64::MIN_POSITIVE / 3.0);
        model.params.get_mut("emb.tok").unwrap().set(0, 1, -0.0);
        model.params.freeze("csi.fuse.w").unwrap();
        let mut opt = AdamState::new(1e-3).with_group("csi.", 1e-4).with_linear_decay(10);
        let mut g = Gradients::new();
        g.insert("emb.pos", Tensor2D::filled(12, 4, 0.25));
        let mut stepped = model.params.clone();
        adam_step(&mut stepped, &g, &mut opt).unwrap();

        let ck = Checkpoint::new(Stage::Stage1, cfg, stepped, Some(opt));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        for (n, t) in ck.params.iter() {
            let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.params.get(n).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{n}");
        }
        assert!(back.params.is_frozen("csi.fuse.w"));
        assert_eq!(back.optimizer.as_ref().unwrap().first_moment("emb.pos"), ck.optimizer.as_ref().unwrap().first_moment("emb.pos"));
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption_and_overwrites() {
        let ck = Checkpoint::new(Stage::Pretrain, tiny(), CalecModel::init(tiny().model).unwrap().params, None);
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut v2 = bytes;
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(CalecError::Checkpoint(_))));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p, false).unwrap();
        assert!(matches!(ck.save(&p, false), Err(CalecError::Exists(_))));
        ck.save(&p, true).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        assert!(matches!(ck.require(&[Stage::Stage1]), Err(CalecError::Staging(_))));
    }
}
