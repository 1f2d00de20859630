//! Self-describing binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "LOWBITCK" | version u32 | element bytes u8 | spec sha256 [32]
//! spec json (u32 len + bytes) | quant json
//! phase index u32 | phase name | seed u64 | next stream u64
//! model tensors | optimizer tensors | twin flag u8 [twin quant json, twin tensors]
//! sha256 of everything above [32]
//! ```
//!
//! A tensor section is a u32 count followed by, per tensor, its name, a role
//! byte, rank u32, dims u64 each and the raw values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use lowbit::autodiff::{Element, Tensor};
use lowbit::nn::{Model, ModelSpec};
use lowbit::quant::QuantConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"LOWBITCK";
pub const VERSION: u32 = 1;

const ROLE_PARAM: u8 = 0;
const ROLE_DECAYED_PARAM: u8 = 1;
const ROLE_BUFFER: u8 = 2;
const ROLE_STATE: u8 = 3;

/// Where in a run a checkpoint was taken. Phase 0 is pretraining.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Position {
    pub phase_index: u32,
    pub phase_name: String,
    pub seed: u64,
    /// Batch-stream key of the next phase to run.
    pub next_stream: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub position: Position,
    /// Optimizer state (momentum buffers) by parameter name. Empty at phase
    /// boundaries, where every phase starts a fresh optimizer.
    pub optimizer: IndexMap<String, Tensor<f32>>,
    /// The full-precision twin of guided runs.
    pub twin: Option<Model<f32>>,
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| CliError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, name: &str, role: u8, t: &Tensor<f32>) {
        self.bytes(name.as_bytes());
        self.u8(role);
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut self.0);
        }
    }

    fn model(&mut self, m: &Model<f32>) {
        self.u32((m.params().len() + m.buffers().len()) as u32);
        for (name, p) in m.params() {
            self.tensor(name, if p.decay { ROLE_DECAYED_PARAM } else { ROLE_PARAM }, &p.value);
        }
        for (name, b) in m.buffers() {
            self.tensor(name, ROLE_BUFFER, b);
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> CliError {
        CliError::checkpoint(self.path, msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err(format!("truncated while reading {what} at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let b = self.bytes(what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err(format!("{what} is not UTF-8")))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<T> {
        let b = self.bytes(what)?;
        serde_json::from_slice(b).map_err(|e| self.err(format!("bad {what}: {e}")))
    }

    fn tensor(&mut self) -> Result<(String, u8, Tensor<f32>)> {
        let name = self.string("tensor name")?;
        let role = self.u8("tensor role")?;
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(self.err(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(f32::BYTES))
            .ok_or_else(|| self.err(format!("tensor `{name}` is too large")))?;
        let raw = self.take(bytes, "tensor data")?;
        let data = raw.chunks_exact(f32::BYTES).map(f32::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| self.err(e.to_string()))?;
        Ok((name, role, t))
    }

    fn tensors(&mut self) -> Result<Vec<(String, u8, Tensor<f32>)>> {
        let n = self.u32("tensor count")?;
        (0..n).map(|_| self.tensor()).collect()
    }
}

/// Rebuilds a model from its spec and saved tensors; names, order and shapes
/// must match what the spec produces.
fn restore(
    path: &Path,
    spec: &ModelSpec,
    quant: QuantConfig,
    saved: Vec<(String, u8, Tensor<f32>)>,
) -> Result<Model<f32>> {
    let mut model = Model::new(spec.clone(), quant, 0)?;
    let expected = model.params().len() + model.buffers().len();
    if saved.len() != expected {
        return Err(CliError::checkpoint(
            path,
            format!("{} tensors stored, the model has {expected}", saved.len()),
        ));
    }
    for (name, role, t) in saved {
        let slot = if role == ROLE_BUFFER {
            model.buffers_mut().get_mut(&name)
        } else {
            model.params_mut().get_mut(&name).map(|p| &mut p.value)
        };
        let slot = slot.ok_or_else(|| CliError::checkpoint(path, format!("unexpected tensor `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(CliError::checkpoint(
                path,
                format!(
                    "`{name}` has shape {:?}, the model expects {:?}",
                    t.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = t;
    }
    Ok(model)
}

impl Checkpoint {
    pub fn new(model: Model<f32>, position: Position) -> Self {
        Checkpoint {
            model,
            position,
            optimizer: IndexMap::new(),
            twin: None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let spec = self.model.spec();
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u8(f32::BYTES as u8);
        w.0.extend_from_slice(&spec.hash());
        w.bytes(&serde_json::to_vec(spec).expect("spec serializes"));
        w.bytes(&serde_json::to_vec(self.model.quant()).expect("quant serializes"));
        w.u32(self.position.phase_index);
        w.bytes(self.position.phase_name.as_bytes());
        w.u64(self.position.seed);
        w.u64(self.position.next_stream);
        w.model(&self.model);
        w.u32(self.optimizer.len() as u32);
        for (name, t) in &self.optimizer {
            w.tensor(name, ROLE_STATE, t);
        }
        match &self.twin {
            Some(twin) => {
                w.u8(1);
                w.bytes(&serde_json::to_vec(twin.quant()).expect("quant serializes"));
                w.model(twin);
            }
            None => w.u8(0),
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let err = |msg: &str| CliError::checkpoint(path, msg);
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        if bytes.len() < MAGIC.len() + 32 {
            return Err(err("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader {
            path,
            bytes: body,
            at: MAGIC.len(),
        };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(err(&format!("unsupported version {version} (expected {VERSION})")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checksum mismatch (file is corrupt or truncated)"));
        }
        let width = r.u8("element size")?;
        if width as usize != f32::BYTES {
            return Err(err(&format!("stored {width}-byte reals, expected {}", f32::BYTES)));
        }
        let hash: [u8; 32] = r.take(32, "spec hash")?.try_into().unwrap();
        let spec: ModelSpec = r.json("model spec")?;
        if spec.hash() != hash {
            return Err(err("stored spec hash does not match the stored spec"));
        }
        let quant: QuantConfig = r.json("quant config")?;
        let position = Position {
            phase_index: r.u32("phase index")?,
            phase_name: r.string("phase name")?,
            seed: r.u64("seed")?,
            next_stream: r.u64("stream")?,
        };
        let model = restore(path, &spec, quant, r.tensors()?)?;
        let optimizer = r.tensors()?.into_iter().map(|(n, _, t)| (n, t)).collect();
        let twin = match r.u8("twin flag")? {
            0 => None,
            1 => {
                let q: QuantConfig = r.json("twin quant config")?;
                Some(restore(path, &spec, q, r.tensors()?)?)
            }
            f => return Err(err(&format!("bad twin flag {f}"))),
        };
        if r.at != body.len() {
            return Err(err("trailing bytes after the last section"));
        }
        Ok(Checkpoint {
            model,
            position,
            optimizer,
            twin,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(path, &bytes)
    }

    /// Loads and checks that the checkpoint holds a model of `spec`.
    pub fn load_for(path: &Path, spec: &ModelSpec) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.model.spec().hash() != spec.hash() {
            return Err(CliError::SpecMismatch {
                path: PathBuf::from(path),
                expected: spec.name.clone(),
                found: ck.model.spec().name.clone(),
            });
        }
        Ok(ck)
    }
}
