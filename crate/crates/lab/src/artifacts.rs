//! On-disk formats: JSON checkpoints, binary pair stores and the run
//! manifest.

use std::path::Path;

use reflow_core::couplings::{Batch, PairSource, PairStore};
use reflow_core::nn::{Denoiser, DenoiserConfig};
use reflow_core::rng;
use reflow_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{IoContext, LabError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).at(path)?))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    std::fs::write(path, bytes).at(path)
}

pub const CHECKPOINT_FORMAT: &str = "reflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: DenoiserConfig,
    shapes: Vec<Vec<usize>>,
    params: Vec<Vec<f64>>,
}

/// Serializes a denoiser. Floats are written in shortest round-trip form,
/// so loading restores the parameters bit for bit.
pub fn checkpoint_to_json(model: &Denoiser) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        shapes: model.param_shapes(),
        params: model.params().iter().map(|p| p.data().to_vec()).collect(),
    };
    serde_json::to_string(&file).map_err(|e| LabError::format("checkpoint", e.to_string()))
}

/// Parses a checkpoint, rejecting any shape that disagrees with the stored
/// architecture.
pub fn checkpoint_from_json(text: &str) -> Result<Denoiser> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| LabError::format("checkpoint", e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(LabError::format(
            "checkpoint",
            format!("format tag `{}`", file.format),
        ));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(LabError::format(
            "checkpoint",
            format!("unsupported version {}", file.version),
        ));
    }
    // architecture only; the weights are replaced below
    let mut model = Denoiser::new(file.config, &mut rng::seeded(0))?;
    let expected = model.param_shapes();
    if file.shapes != expected {
        return Err(LabError::format(
            "checkpoint",
            format!(
                "shape manifest {:?} does not match the architecture {expected:?}",
                file.shapes
            ),
        ));
    }
    if file.params.len() != expected.len() {
        return Err(LabError::format(
            "checkpoint",
            format!(
                "{} parameter arrays for {} shapes",
                file.params.len(),
                expected.len()
            ),
        ));
    }
    let params = file
        .params
        .into_iter()
        .zip(&expected)
        .enumerate()
        .map(|(i, (data, shape))| {
            let want: usize = shape.iter().product();
            if data.len() != want {
                return Err(LabError::format(
                    "checkpoint",
                    format!(
                        "array {i} has {} values, shape {shape:?} needs {want}",
                        data.len()
                    ),
                ));
            }
            Ok(Tensor::new(shape.clone(), data)?)
        })
        .collect::<Result<Vec<_>>>()?;
    model.set_params(params)?;
    Ok(model)
}

/// Writes a checkpoint and returns its SHA-256.
pub fn save_checkpoint(model: &Denoiser, path: &Path) -> Result<String> {
    let text = checkpoint_to_json(model)?;
    write_file(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn load_checkpoint(path: &Path) -> Result<Denoiser> {
    checkpoint_from_json(&std::fs::read_to_string(path).at(path)?)
}

pub const PAIRS_MAGIC: &[u8; 8] = b"RFLWPAIR";
pub const PAIRS_VERSION: u32 = 1;

fn source_tag(s: PairSource) -> u8 {
    match s {
        PairSource::Independent => 0,
        PairSource::Backward => 1,
        PairSource::Forward => 2,
        PairSource::Projected => 3,
    }
}

fn source_from_tag(t: u8) -> Result<PairSource> {
    Ok(match t {
        0 => PairSource::Independent,
        1 => PairSource::Backward,
        2 => PairSource::Forward,
        3 => PairSource::Projected,
        _ => return Err(LabError::format("pair store", format!("source tag {t}"))),
    })
}

/// Pair store plus the hash of the teacher checkpoint that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredPairs {
    pub store: PairStore,
    /// SHA-256 of the teacher checkpoint; all zeros when unknown.
    pub teacher_hash: [u8; 32],
}

/// Little-endian layout:
///
/// | field | bytes |
/// |---|---|
/// | magic `RFLWPAIR` | 8 |
/// | version `u32` | 4 |
/// | dim `u32` | 4 |
/// | backward count, forward count `u64` | 16 |
/// | backward source tag, forward source tag `u8` | 2 |
/// | label flags (backward, forward) `u8` | 2 |
/// | `rho` `f64` | 8 |
/// | teacher SHA-256 | 32 |
///
/// followed by, for the backward then the forward pool, `x₀` and `x₁` as
/// row-major `f64` and, if flagged, one `i64` label per pair (`-1` for none).
pub fn encode_pairs(p: &StoredPairs) -> Vec<u8> {
    let (b, f) = (p.store.backward(), p.store.forward());
    let mut out = Vec::new();
    out.extend_from_slice(PAIRS_MAGIC);
    out.extend_from_slice(&PAIRS_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.store.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(&(f.len() as u64).to_le_bytes());
    out.push(source_tag(p.store.backward_source()));
    out.push(source_tag(PairSource::Forward));
    out.push(b.labels.is_some() as u8);
    out.push(f.labels.is_some() as u8);
    out.extend_from_slice(&p.store.rho().to_le_bytes());
    out.extend_from_slice(&p.teacher_hash);
    for pool in [b, f] {
        for v in pool.x0.data().iter().chain(pool.x1.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(labels) = &pool.labels {
            for l in labels {
                let v = l.map_or(-1i64, |c| c as i64);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(LabError::format("pair store", "truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| LabError::format("pair store", "count overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn read_pool(c: &mut Cursor<'_>, n: usize, dim: usize, labeled: bool) -> Result<Batch> {
    let len = n
        .checked_mul(dim)
        .ok_or_else(|| LabError::format("pair store", "count overflow"))?;
    let x0 = Tensor::matrix(n, dim, c.floats(len)?);
    let x1 = Tensor::matrix(n, dim, c.floats(len)?);
    let mut batch = Batch::new(x0, x1)?;
    if labeled {
        let labels = (0..n)
            .map(|_| {
                let v = c.u64()? as i64;
                Ok(if v < 0 { None } else { Some(v as usize) })
            })
            .collect::<Result<Vec<_>>>()?;
        batch = batch.with_labels(labels)?;
    }
    Ok(batch)
}

pub fn decode_pairs(bytes: &[u8]) -> Result<StoredPairs> {
    let mut c = Cursor { buf: bytes };
    if c.take(8)? != PAIRS_MAGIC {
        return Err(LabError::format("pair store", "bad magic"));
    }
    let version = c.u32()?;
    if version != PAIRS_VERSION {
        return Err(LabError::format(
            "pair store",
            format!("unsupported version {version}"),
        ));
    }
    let dim = c.u32()? as usize;
    if dim == 0 {
        return Err(LabError::format("pair store", "zero dimension"));
    }
    let (nb, nf) = (c.u64()? as usize, c.u64()? as usize);
    let source = source_from_tag(c.u8()?)?;
    if source_from_tag(c.u8()?)? != PairSource::Forward {
        return Err(LabError::format("pair store", "forward pool tag"));
    }
    let (lb, lf) = (c.u8()? != 0, c.u8()? != 0);
    let rho = c.f64()?;
    let teacher_hash: [u8; 32] = c.take(32)?.try_into().unwrap();
    let back = read_pool(&mut c, nb, dim, lb)?;
    let fwd = read_pool(&mut c, nf, dim, lf)?;
    if !c.buf.is_empty() {
        return Err(LabError::format("pair store", "trailing bytes"));
    }
    let store = PairStore::new(back, source).with_forward(fwd, rho)?;
    Ok(StoredPairs {
        store,
        teacher_hash,
    })
}

pub fn save_pairs(p: &StoredPairs, path: &Path) -> Result<()> {
    write_file(path, &encode_pairs(p))
}

pub fn load_pairs(path: &Path) -> Result<StoredPairs> {
    decode_pairs(&std::fs::read(path).at(path)?)
}

/// Parses a hex digest into bytes; anything else gives zeros.
pub fn hash_bytes(hex: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    if hex.len() == 64 {
        for (i, o) in out.iter_mut().enumerate() {
            match u8::from_str_radix(&hex[2 * i..2 * i + 2], 16) {
                Ok(v) => *o = v,
                Err(_) => return [0u8; 32],
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

/// Written last into every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub experiment_id: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(command: &str, experiment_id: &str, seed: u64) -> Self {
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            experiment_id: experiment_id.into(),
            seed,
            files: Vec::new(),
        }
    }

    /// Hashes each file under `dir` (sorted, relative paths) and writes
    /// `manifest.json`.
    pub fn write(mut self, dir: &Path, files: &[&str]) -> Result<()> {
        let mut names: Vec<&str> = files.to_vec();
        names.sort_unstable();
        names.dedup();
        self.files = names
            .into_iter()
            .map(|n| {
                Ok(ManifestEntry {
                    path: n.into(),
                    sha256: sha256_file(&dir.join(n))?,
                })
            })
            .collect::<Result<_>>()?;
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| LabError::format("manifest", e.to_string()))?;
        write_file(&dir.join("manifest.json"), text.as_bytes())
    }
}
