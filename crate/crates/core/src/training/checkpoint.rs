use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{model_specs, Model, TrainError, TrainOutcome};
use crate::config::TrainConfig;
use crate::cspr::{BankEntry, MemoryBank};
use crate::numerics::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RASR";

/// Position of the run's RNG stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
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

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub bank: MemoryBank,
    pub epoch: u32,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn from_outcome(o: &TrainOutcome) -> Self {
        Self {
            config: o.model.cfg.clone(),
            params: o.model.params.clone(),
            bank: o.model.bank.clone(),
            epoch: o.history.len() as u32,
            rng: o.rng,
        }
    }

    pub fn model(&self) -> Model {
        Model {
            cfg: self.config.clone(),
            params: self.params.clone(),
            bank: self.bank.clone(),
        }
    }

    /// Magic, version, CRC32 of the body, then the body.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        put_blob(&mut body, self.config.canonical_json().as_bytes());
        put_u32(&mut body, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_blob(&mut body, name.as_bytes());
            put_u32(&mut body, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut body, d as u32);
            }
            for &v in t.data() {
                body.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let bank = serde_json::to_vec(self.bank.entries()).expect("bank serializes");
        put_blob(&mut body, &bank);
        put_u32(&mut body, self.epoch);
        body.extend_from_slice(&self.rng.seed);
        body.extend_from_slice(&self.rng.stream.to_le_bytes());
        body.extend_from_slice(&self.rng.word_pos.to_le_bytes());

        let mut out = Vec::with_capacity(body.len() + 12);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, crc32fast::hash(&body));
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let crc = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let body = &bytes[12..];
        if crc32fast::hash(body) != crc {
            return Err(bad("checksum mismatch (file truncated or corrupt)"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        let config_json = std::str::from_utf8(r.blob()?).map_err(|_| bad("config is not UTF-8"))?;
        let config = TrainConfig::from_canonical_json(config_json)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = std::str::from_utf8(r.blob()?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        let entries: Vec<BankEntry> =
            serde_json::from_slice(r.blob()?).map_err(|e| TrainError::Checkpoint(format!("bank snapshot: {e}")))?;
        let bank = MemoryBank::from_entries(entries)?;
        let epoch = r.u32()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != body.len() {
            return Err(bad("trailing bytes after checkpoint body"));
        }
        check_shapes(&config, &params)?;
        Ok(Self {
            config,
            params,
            bank,
            epoch,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }
}

/// Every expected tensor present with the shape the config implies.
fn check_shapes(cfg: &TrainConfig, params: &ParamStore) -> Result<(), TrainError> {
    let specs = model_specs(cfg)?;
    if specs.len() != params.len() {
        return Err(TrainError::Checkpoint(format!(
            "config implies {} tensors, file holds {}",
            specs.len(),
            params.len()
        )));
    }
    for s in specs {
        let t = params
            .get(&s.name)
            .map_err(|_| TrainError::Checkpoint(format!("missing tensor {}", s.name)))?;
        if t.shape() != s.shape.as_slice() {
            return Err(TrainError::Checkpoint(format!(
                "tensor {} has shape {:?} but the config implies {:?}",
                s.name,
                t.shape(),
                s.shape
            )));
        }
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn blob(&mut self) -> Result<&'a [u8], TrainError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
