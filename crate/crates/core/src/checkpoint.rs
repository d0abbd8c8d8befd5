//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "MBRECKPT"
//! version    u32       currently 1
//! header     u32 len + UTF-8 text, `key=value` lines:
//!              the training config, `epoch=`, `rng_seed=` (hex),
//!              `rng_stream=`, `rng_word_pos=`, `adam_step=`, `meta.<k>=`
//! tensors    u32 count, then per tensor:
//!              u32 name len + name, u64 rows, u64 cols, rows*cols f64
//!            names: `embeddings`, `confidence.<k>.weight`,
//!            `confidence.<k>.bias`, `adam.m.<j>`, `adam.v.<j>`
//! checksum   u64       FNV-1a over every preceding byte
//! ```
//!
//! Floats are stored as raw bits, so a load reproduces the saved state
//! exactly. Files are written to a temporary name and renamed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::data::{write_atomic, DataError};
use crate::diff::Tensor;
use crate::model::{AdamState, ModelParams, ModelState};

pub const MAGIC: &[u8; 8] = b"MBRECKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Write(#[from] DataError),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated or corrupt")]
    Corrupt,
    #[error("checksum mismatch")]
    Checksum,
    #[error("bad header: {0}")]
    Header(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Stored without `checkpoint_dir`, so the location does not change the bytes.
    pub config: TrainConfig,
    pub epoch: usize,
    pub state: ModelState,
    pub rng: RngState,
    pub meta: BTreeMap<String, String>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Corrupt)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Corrupt)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, epoch: usize, state: &ModelState, rng: &ChaCha8Rng) -> Checkpoint {
        let mut config = cfg.clone();
        config.checkpoint_dir = None;
        Checkpoint {
            config,
            epoch,
            state: state.clone(),
            rng: RngState::capture(rng),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.config.to_text();
        header.push_str(&format!("epoch={}\n", self.epoch));
        let seed: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        header.push_str(&format!("rng_seed={seed}\n"));
        header.push_str(&format!("rng_stream={}\n", self.rng.stream));
        header.push_str(&format!("rng_word_pos={}\n", self.rng.word_pos));
        header.push_str(&format!("adam_step={}\n", self.state.adam.step));
        for (k, v) in &self.meta {
            header.push_str(&format!("meta.{k}={v}\n"));
        }

        let p = &self.state.params;
        let mut tensors: Vec<(String, &Tensor)> = vec![("embeddings".into(), &p.embeddings)];
        for (k, m) in p.confidence.iter().enumerate() {
            tensors.push((format!("confidence.{k}.weight"), &m.weight));
            tensors.push((format!("confidence.{k}.bias"), &m.bias));
        }
        for (j, t) in self.state.adam.m.iter().enumerate() {
            tensors.push((format!("adam.m.{j}"), t));
        }
        for (j, t) in self.state.adam.v.iter().enumerate() {
            tensors.push((format!("adam.v.{j}"), t));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &header);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_str(&mut out, &name);
            out.extend_from_slice(&(t.rows as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < 8 + 4 + 8 {
            return Err(CheckpointError::Corrupt);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(CheckpointError::Checksum);
        }
        let header = r.string()?;
        let mut config = TrainConfig::default();
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Header(line.to_string()))?;
            if let Some(m) = k.strip_prefix("meta.") {
                meta.insert(m.to_string(), v.to_string());
            } else if matches!(k, "epoch" | "rng_seed" | "rng_stream" | "rng_word_pos" | "adam_step") {
                fields.insert(k.to_string(), v.to_string());
            } else {
                config.set(k, v)?;
            }
        }
        let field = |k: &str| fields.get(k).ok_or_else(|| CheckpointError::Header(format!("missing {k}")));
        let num = |k: &str| -> Result<u128, CheckpointError> {
            field(k)?.parse().map_err(|_| CheckpointError::Header(k.to_string()))
        };
        let seed_hex = field("rng_seed")?;
        if seed_hex.len() != 64 {
            return Err(CheckpointError::Header("rng_seed".into()));
        }
        let mut seed = [0u8; 32];
        for (j, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * j..2 * j + 2], 16)
                .map_err(|_| CheckpointError::Header("rng_seed".into()))?;
        }
        let rng = RngState {
            seed,
            stream: num("rng_stream")? as u64,
            word_pos: num("rng_word_pos")?,
        };
        let epoch = num("epoch")? as usize;
        let step = num("adam_step")? as u64;

        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows.checked_mul(cols).ok_or(CheckpointError::Corrupt)?;
            let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Corrupt)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let t = Tensor::new(rows, cols, data).map_err(|_| CheckpointError::Corrupt)?;
            if name.starts_with("adam.m.") {
                m.push(t);
            } else if name.starts_with("adam.v.") {
                v.push(t);
            } else {
                params.push(t);
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt);
        }
        let params = ModelParams::from_tensors(params).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if m.len() != v.len() || m.len() != params.tensors().len() {
            return Err(CheckpointError::Corrupt);
        }
        Ok(Checkpoint {
            config,
            epoch,
            state: ModelState {
                params,
                adam: AdamState { step, m, v },
            },
            rng,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Checkpoint::from_bytes(&bytes)
    }
}
