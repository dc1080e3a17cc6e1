//! Versioned little-endian binary containers.
//!
//! Every container starts with a 4-byte magic and a `u32` version. Floats
//! are stored as raw `f64` bits, so every round trip is bit-exact.
//!
//! | magic  | content                                                   |
//! |--------|-----------------------------------------------------------|
//! | `TVQC` | codebook: `K: u32`, `n_z: u32`, `K * n_z` row-major `f64` |
//! | `TVQF` | float image: `C, H, W: u32`, CHW `f64`                    |
//! | `TVQK` | training checkpoint, see [`encode_checkpoint`]            |

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use texvq_core::codebook::Codebook;
use texvq_core::image::ImagePatch;
use texvq_core::networks::{ModelConfig, Phase, SrModel, Stage2Modules};
use texvq_core::nn::{Adam, AdamConfig, ParamStore};
use texvq_core::training::TrainState;
use texvq_core::Tensor;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"TVQC";
pub const IMAGE_MAGIC: &[u8; 4] = b"TVQF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TVQK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0} (this build reads version {VERSION})")]
    Version(u32),
    #[error("truncated container: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after container")]
    Trailing(usize),
    #[error("checkpoint phase is {found}, expected {expected}")]
    Phase { expected: &'static str, found: &'static str },
    #[error("unknown phase tag {0}")]
    PhaseTag(u8),
    #[error("config hash mismatch: checkpoint {found}, current config {expected}")]
    ConfigHash { expected: String, found: String },
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error(transparent)]
    Core(#[from] texvq_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type FormatResult<T> = Result<T, FormatError>;

/// SHA-256 digest identifying a configuration.
pub type ConfigHash = [u8; 32];

pub fn hash_hex(h: &ConfigHash) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of a value's JSON serialisation.
pub fn json_hash<T: Serialize>(value: &T) -> ConfigHash {
    let json = serde_json::to_vec(value).expect("config types serialise");
    Sha256::digest(&json).into()
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(magic);
        w.u32(VERSION);
        w
    }
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
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4]) -> FormatResult<Self> {
        let mut r = Reader { buf, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &found != magic {
            return Err(FormatError::Magic { expected: *magic, found });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FormatError::Version(version));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> FormatResult<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated { offset: self.pos, needed: n - (self.buf.len() - self.pos) });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> FormatResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> FormatResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> FormatResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> FormatResult<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn f64s(&mut self, n: usize) -> FormatResult<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| FormatError::Malformed("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn finish(self) -> FormatResult<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::Trailing(n)),
        }
    }
}

pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut w = Writer::new(CODEBOOK_MAGIC);
    w.u32(cb.size() as u32);
    w.u32(cb.dim() as u32);
    w.f64s(cb.entries());
    w.0
}

pub fn decode_codebook(bytes: &[u8]) -> FormatResult<Codebook> {
    let mut r = Reader::new(bytes, CODEBOOK_MAGIC)?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let entries = r.f64s(k * d)?;
    r.finish()?;
    Ok(Codebook::new(k, d, entries)?)
}

pub fn encode_image(img: &ImagePatch) -> Vec<u8> {
    let mut w = Writer::new(IMAGE_MAGIC);
    let (c, h, wd) = img.dims();
    for v in [c, h, wd] {
        w.u32(v as u32);
    }
    w.f64s(img.data());
    w.0
}

pub fn decode_image(bytes: &[u8]) -> FormatResult<ImagePatch> {
    let mut r = Reader::new(bytes, IMAGE_MAGIC)?;
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let data = r.f64s(c * h * w)?;
    r.finish()?;
    Ok(ImagePatch::from_vec(c, h, w, data)?)
}

#[derive(Serialize, Deserialize)]
struct OptimiserHeader {
    config: AdamConfig,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    modules: Stage2Modules,
    step: u64,
    seed: u64,
    generator: OptimiserHeader,
    discriminator: OptimiserHeader,
}

const SECTIONS: [&str; 5] = ["params", "gen.first", "gen.second", "disc.first", "disc.second"];

fn write_tensors(w: &mut Writer, section: u8, tensors: &BTreeMap<String, Tensor>) {
    for (name, t) in tensors {
        w.u8(section);
        w.bytes(name.as_bytes());
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
    }
}

/// Layout after the magic and version:
/// `phase: u8`, `config hash: [u8; 32]`, JSON header (length-prefixed),
/// `tensor count: u32`, then per tensor `section: u8`, name (length-prefixed),
/// `ndim: u32`, `dims: u64 * ndim`, data `f64 * numel`. Tensors appear in
/// section order and by name within a section.
pub fn encode_checkpoint(state: &TrainState, hash: &ConfigHash) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u8(state.phase().tag());
    w.0.extend_from_slice(hash);
    let header = CheckpointHeader {
        model: state.model.config.clone(),
        modules: state.model.modules,
        step: state.step,
        seed: state.seed,
        generator: OptimiserHeader { config: state.generator_opt.config, steps: state.generator_opt.steps },
        discriminator: OptimiserHeader { config: state.discriminator_opt.config, steps: state.discriminator_opt.steps },
    };
    w.bytes(&serde_json::to_vec(&header).expect("header serialises"));
    let params: BTreeMap<String, Tensor> = state.model.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let groups = [
        &params,
        &state.generator_opt.first,
        &state.generator_opt.second,
        &state.discriminator_opt.first,
        &state.discriminator_opt.second,
    ];
    w.u32(groups.iter().map(|g| g.len() as u32).sum());
    for (i, g) in groups.iter().enumerate() {
        write_tensors(&mut w, i as u8, g);
    }
    w.0
}

/// Decodes a checkpoint, failing if its phase or config hash differ from
/// the expected ones.
pub fn decode_checkpoint(
    bytes: &[u8],
    expected_phase: Option<Phase>,
    expected_hash: Option<&ConfigHash>,
) -> FormatResult<(TrainState, ConfigHash)> {
    let mut r = Reader::new(bytes, CHECKPOINT_MAGIC)?;
    let tag = r.u8()?;
    let phase = Phase::from_tag(tag).ok_or(FormatError::PhaseTag(tag))?;
    if let Some(expected) = expected_phase {
        if expected != phase {
            return Err(FormatError::Phase { expected: expected.as_str(), found: phase.as_str() });
        }
    }
    let hash: ConfigHash = r.take(32)?.try_into().unwrap();
    if let Some(expected) = expected_hash {
        if expected != &hash {
            return Err(FormatError::ConfigHash { expected: hash_hex(expected), found: hash_hex(&hash) });
        }
    }
    let header: CheckpointHeader =
        serde_json::from_slice(r.bytes()?).map_err(|e| FormatError::Malformed(format!("header: {e}")))?;
    let count = r.u32()?;
    let mut groups: [BTreeMap<String, Tensor>; 5] = Default::default();
    for _ in 0..count {
        let section = r.u8()? as usize;
        if section >= SECTIONS.len() {
            return Err(FormatError::Malformed(format!("tensor section {section}")));
        }
        let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| FormatError::Malformed("tensor name".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<FormatResult<Vec<_>>>()?;
        let data = r.f64s(shape.iter().product())?;
        groups[section].insert(name, Tensor::from_vec(&shape, data)?);
    }
    r.finish()?;
    let [params, gen_first, gen_second, disc_first, disc_second] = groups;
    let mut store = ParamStore::new();
    for (k, v) in params {
        store.insert(&k, v);
    }
    let opt = |h: OptimiserHeader, first, second| Adam { config: h.config, steps: h.steps, first, second };
    let state = TrainState {
        model: SrModel::from_params(header.model, phase, header.modules, store),
        step: header.step,
        seed: header.seed,
        generator_opt: opt(header.generator, gen_first, gen_second),
        discriminator_opt: opt(header.discriminator, disc_first, disc_second),
    };
    Ok((state, hash))
}

pub fn save_checkpoint(path: &Path, state: &TrainState, hash: &ConfigHash) -> FormatResult<()> {
    write_atomic(path, &encode_checkpoint(state, hash))
}

pub fn load_checkpoint(
    path: &Path,
    expected_phase: Option<Phase>,
    expected_hash: Option<&ConfigHash>,
) -> FormatResult<(TrainState, ConfigHash)> {
    decode_checkpoint(&fs::read(path)?, expected_phase, expected_hash)
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> FormatResult<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn codebook_roundtrip_is_bit_exact() {
        let cb = Codebook::random(8, 4, &mut ChaCha8Rng::seed_from_u64(3));
        let bytes = encode_codebook(&cb);
        assert_eq!(bytes.len(), 8 + 8 + 8 * 4 * 8);
        assert_eq!(decode_codebook(&bytes).unwrap(), cb);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let cb = Codebook::random(2, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let mut bytes = encode_codebook(&cb);
        assert!(matches!(decode_codebook(&bytes[..bytes.len() - 1]), Err(FormatError::Truncated { .. })));
        bytes[4] = 9;
        assert!(matches!(decode_codebook(&bytes), Err(FormatError::Version(9))));
        assert!(matches!(decode_image(&encode_codebook(&cb)), Err(FormatError::Magic { .. })));
    }

    #[test]
    fn image_roundtrip_keeps_bits() {
        let img = ImagePatch::from_vec(1, 1, 3, vec![0.1, -0.0, f64::MIN_POSITIVE]).unwrap();
        let back = decode_image(&encode_image(&img)).unwrap();
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
