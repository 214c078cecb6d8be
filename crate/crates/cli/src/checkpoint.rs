//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ORYX" | version u32 | model digest [32] | precision u8 | step u64 | count u32
//! count x { name_len u32 | name | dtype u8 | rank u32 | dims u64.. | offset u64 | bytes u64 }
//! payload sha256 [32] | payload
//! ```
//!
//! Offsets are relative to the start of the payload.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use oryx_core::model::ModelParams;
use oryx_core::{Precision, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"ORYX";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint was written for a different model configuration")]
    DigestMismatch,
    #[error("checkpoint holds {found} parameters, expected {expected}")]
    PrecisionMismatch { found: Precision, expected: Precision },
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn fmt_err<T>(m: impl Into<String>) -> Result<T> {
    Err(CheckpointError::Format(m.into()))
}

fn dtype_code(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

fn dtype_from(code: u8) -> Result<Precision> {
    match code {
        0 => Ok(Precision::F32),
        1 => Ok(Precision::F64),
        c => fmt_err(format!("unknown dtype code {c}")),
    }
}

/// Directory entry for one tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Precision,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub digest: [u8; 32],
    pub precision: Precision,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

fn put_values<F: Real>(out: &mut Vec<u8>, data: &[F]) {
    for &x in data {
        match F::PRECISION {
            // exact: the value is an f32 widened by `as_f64`
            Precision::F32 => out.extend((x.as_f64() as f32).to_le_bytes()),
            Precision::F64 => out.extend(x.as_f64().to_le_bytes()),
        }
    }
}

/// Serializes parameters in visit order.
pub fn encode<F: Real>(params: &ModelParams<Tensor<F>>, digest: [u8; 32], step: u64) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    params.visit(&mut |name, t| {
        let offset = payload.len() as u64;
        put_values(&mut payload, t.data());
        entries.push((name, t.shape().to_vec(), offset, payload.len() as u64 - offset));
    });

    let mut out = Vec::with_capacity(payload.len() + 64 * entries.len() + 128);
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(digest);
    out.push(dtype_code(F::PRECISION));
    out.extend(step.to_le_bytes());
    out.extend((entries.len() as u32).to_le_bytes());
    for (name, shape, offset, bytes) in &entries {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(dtype_code(F::PRECISION));
        out.extend((shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend((d as u64).to_le_bytes());
        }
        out.extend(offset.to_le_bytes());
        out.extend(bytes.to_le_bytes());
    }
    out.extend(Sha256::digest(&payload));
    out.extend(payload);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return fmt_err(format!("truncated at byte {} (needed {n} more)", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and checks the header; returns it with the verified payload.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return fmt_err("bad magic bytes");
    }
    let version = r.u32()?;
    if version != VERSION {
        return fmt_err(format!("unsupported format version {version}"));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let precision = dtype_from(r.u8()?)?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .or_else(|_| fmt_err("tensor name is not UTF-8"))?;
        let dtype = dtype_from(r.u8()?)?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return fmt_err(format!("tensor {name} has rank {rank}"));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        let nbytes = r.u64()?;
        tensors.push(TensorEntry { name, dtype, shape, offset, bytes: nbytes });
    }
    let checksum: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let payload = &bytes[r.pos..];
    let mut expected_offset = 0u64;
    for t in &tensors {
        let numel: usize = t.shape.iter().product();
        let want = (numel * t.dtype.byte_width()) as u64;
        if t.bytes != want || t.offset != expected_offset {
            return fmt_err(format!("directory entry for {} is inconsistent", t.name));
        }
        expected_offset += want;
    }
    if expected_offset != payload.len() as u64 {
        return fmt_err(format!("payload holds {} bytes, directory describes {expected_offset}", payload.len()));
    }
    if Sha256::digest(payload).as_slice() != checksum {
        return fmt_err("payload checksum mismatch");
    }
    Ok((Header { version, digest, precision, step, tensors }, payload))
}

fn values<F: Real>(raw: &[u8], dtype: Precision) -> Vec<F> {
    match dtype {
        Precision::F32 => {
            raw.chunks_exact(4).map(|b| F::of(f32::from_le_bytes(b.try_into().expect("4")) as f64)).collect()
        }
        Precision::F64 => raw.chunks_exact(8).map(|b| F::of(f64::from_le_bytes(b.try_into().expect("8")))).collect(),
    }
}

/// Fills a parameter template from checkpoint bytes. The template fixes
/// names and shapes; nothing is modified unless every check passes.
pub fn decode_into<F: Real>(bytes: &[u8], template: &mut ModelParams<Tensor<F>>, digest: [u8; 32]) -> Result<u64> {
    let (header, payload) = decode_header(bytes)?;
    if header.digest != digest {
        return Err(CheckpointError::DigestMismatch);
    }
    if header.precision != F::PRECISION {
        return Err(CheckpointError::PrecisionMismatch { found: header.precision, expected: F::PRECISION });
    }
    let mut expected = Vec::new();
    template.visit(&mut |name, t| expected.push((name, t.shape().to_vec())));
    if expected.len() != header.tensors.len() {
        return fmt_err(format!("{} tensors stored, model has {}", header.tensors.len(), expected.len()));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape || entry.dtype != F::PRECISION {
            return fmt_err(format!("stored tensor {} {:?} does not match {name} {shape:?}", entry.name, entry.shape));
        }
        let raw = &payload[entry.offset as usize..(entry.offset + entry.bytes) as usize];
        loaded.push(Tensor::from_vec(shape, values(raw, entry.dtype)).expect("length checked"));
    }
    let mut it = loaded.into_iter();
    template.visit_mut(&mut |_, t| *t = it.next().expect("count checked"));
    Ok(header.step)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

/// Writes through a temporary file and renames, so readers never see a
/// partial checkpoint.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    params: &ModelParams<Tensor<F>>,
    digest: [u8; 32],
    step: u64,
) -> Result<()> {
    let bytes = encode(params, digest, step);
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint<F: Real>(path: &Path, template: &mut ModelParams<Tensor<F>>, digest: [u8; 32]) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_into(&bytes, template, digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use oryx_core::block::MixerPair;
    use oryx_core::model::{init_params, ModelConfig};
    use oryx_core::SeededRng;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::small(MixerPair::Tg);
        c.d_model = 16;
        c.d_head = 8;
        c.n_layers = 2;
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = cfg();
        let p = init_params::<f32>(&c, &mut SeededRng::new(1)).unwrap();
        let bytes = encode(&p, [7; 32], 42);
        let mut q = init_params::<f32>(&c, &mut SeededRng::new(2)).unwrap();
        assert_ne!(p, q);
        assert_eq!(decode_into(&bytes, &mut q, [7; 32]).unwrap(), 42);
        let bits = |m: &ModelParams<Tensor<f32>>| {
            let mut v = Vec::new();
            m.visit(&mut |_, t| v.extend(t.data().iter().map(|x| x.to_bits())));
            v
        };
        assert_eq!(bits(&p), bits(&q));
        assert_eq!(encode(&q, [7; 32], 42), bytes);
    }

    #[test]
    fn f64_round_trip() {
        let c = cfg();
        let p = init_params::<f64>(&c, &mut SeededRng::new(1)).unwrap();
        let mut q = p.map(&mut |_, t| t.scale(0.0));
        decode_into(&encode(&p, [0; 32], 0), &mut q, [0; 32]).unwrap();
        assert_eq!(p, q);
        let mut wrong = init_params::<f32>(&c, &mut SeededRng::new(1)).unwrap();
        assert!(matches!(
            decode_into(&encode(&p, [0; 32], 0), &mut wrong, [0; 32]),
            Err(CheckpointError::PrecisionMismatch { .. })
        ));
    }

    #[test]
    fn corruption_is_rejected_without_partial_load() {
        let c = cfg();
        let p = init_params::<f32>(&c, &mut SeededRng::new(1)).unwrap();
        let bytes = encode(&p, [1; 32], 3);
        let fresh = init_params::<f32>(&c, &mut SeededRng::new(9)).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let mut q = fresh.clone();
        assert!(matches!(decode_into(&bad_magic, &mut q, [1; 32]), Err(CheckpointError::Format(_))));

        for cut in [0, 3, 40, bytes.len() / 2, bytes.len() - 1] {
            let mut q = fresh.clone();
            assert!(decode_into(&bytes[..cut], &mut q, [1; 32]).is_err(), "cut {cut}");
            assert_eq!(q, fresh);
        }

        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(decode_into(&flipped, &mut fresh.clone(), [1; 32]).is_err());
        assert!(matches!(decode_into(&bytes, &mut fresh.clone(), [2; 32]), Err(CheckpointError::DigestMismatch)));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let c = cfg();
        let p = init_params::<f32>(&c, &mut SeededRng::new(1)).unwrap();
        save_checkpoint(&path, &p, [5; 32], 11).unwrap();
        let mut q = p.map(&mut |_, t| t.scale(0.0));
        assert_eq!(load_checkpoint(&path, &mut q, [5; 32]).unwrap(), 11);
        assert_eq!(p, q);
        let (h, _) = decode_header(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(h.tensors.len(), p.names().len());
    }
}
