//! Binary training-state container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "LLCK" (4 bytes)
//! u32     format version (currently 1)
//! u32     config length; that many UTF-8 bytes (key = value snapshot)
//! tensors generator parameters
//! tensors discriminator parameters (count 0 when no discriminator)
//! adam    generator optimizer
//! adam    discriminator optimizer (empty tensors when no discriminator)
//! u32     rng count; per entry: u32 name length, name, u64 state
//! u64     global step
//! ```
//!
//! where `tensors` is `u32 count` followed by records of
//! `u32 name_len, name, u32 rank, u32 dims[rank], f32 data[prod(dims)]`, and
//! `adam` is `u64 t, f32 lr, f32 beta1, f32 beta2, f32 eps` followed by two
//! `tensors` blocks (first and second moments).
//!
//! Encoding is a pure function of the struct, so save -> load -> save
//! produces byte-identical files. Decoding rejects bad magic, unknown
//! versions, truncation, and trailing bytes, always naming the byte offset.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"LLCK";
pub const VERSION: u32 = 1;

/// Limits guarding against absurd allocations from corrupt headers.
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub t: u64,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

impl AdamSnapshot {
    /// Placeholder for a run without that optimizer.
    pub fn empty() -> Self {
        AdamSnapshot { t: 0, lr: 0.0, beta1: 0.0, beta2: 0.0, eps: 0.0, m: Vec::new(), v: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub generator: Vec<NamedTensor>,
    pub discriminator: Vec<NamedTensor>,
    pub adam_g: AdamSnapshot,
    pub adam_d: AdamSnapshot,
    pub rng_states: Vec<(String, u64)>,
    pub global_step: u64,
}

/// Snapshots a parameter set in insertion order.
pub fn tensors_of(set: &ParamSet) -> Vec<NamedTensor> {
    set.iter()
        .map(|(name, t)| NamedTensor {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

/// Restores tensors into a parameter set built by the model constructor;
/// names, order, and shapes must match exactly.
pub fn restore_into(set: &mut ParamSet, tensors: &[NamedTensor], what: &str) -> Result<()> {
    if tensors.len() != set.len() {
        return Err(Error::config(format!(
            "{what}: checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            set.len()
        )));
    }
    for (rec, (name, t)) in tensors.iter().zip(set.iter_mut()) {
        if rec.name != name {
            return Err(Error::config(format!(
                "{what}: checkpoint tensor {:?} does not match model parameter {:?}",
                rec.name, name
            )));
        }
        if rec.dims != t.shape() {
            return Err(Error::config(format!(
                "{what}: parameter {name} has shape {:?} in the checkpoint, model expects {:?}",
                rec.dims,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&rec.data);
    }
    Ok(())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensors(&mut self, ts: &[NamedTensor]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.str(&t.name);
            self.u32(t.dims.len() as u32);
            for &d in &t.dims {
                self.u32(d as u32);
            }
            for &v in &t.data {
                self.f32(v);
            }
        }
    }

    fn adam(&mut self, a: &AdamSnapshot) {
        self.u64(a.t);
        self.f32(a.lr);
        self.f32(a.beta1);
        self.f32(a.beta2);
        self.f32(a.eps);
        self.tensors(&a.m);
        self.tensors(&a.v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated: need {n} bytes for {what}, {} remain", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn str(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let len = self.u32(what)? as usize;
        if len > MAX_NAME {
            return Err(Error::format(self.path, at as u64, format!("{what} length {len} exceeds limit {MAX_NAME}")));
        }
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format(self.path, at as u64, format!("{what} is not valid UTF-8")))
    }

    fn tensors(&mut self, what: &str) -> Result<Vec<NamedTensor>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::new();
        for i in 0..count {
            let ctx = format!("{what} tensor {i}");
            let name = self.str(&ctx)?;
            let rank_at = self.pos;
            let rank = self.u32(&ctx)? as usize;
            if rank > MAX_RANK {
                return Err(Error::format(self.path, rank_at as u64, format!("{ctx} rank {rank} exceeds limit {MAX_RANK}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = self.u32(&ctx)? as usize;
                numel = numel.saturating_mul(d);
                dims.push(d);
            }
            // Bound the allocation by what the file can actually supply.
            if self.buf.len() - self.pos < numel * 4 {
                return Err(Error::format(
                    self.path,
                    self.pos as u64,
                    format!("truncated: {ctx} ({name}) declares {numel} values, file ends early"),
                ));
            }
            let raw = self.take(numel * 4, &ctx)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            out.push(NamedTensor { name, dims, data });
        }
        Ok(out)
    }

    fn adam(&mut self, what: &str) -> Result<AdamSnapshot> {
        Ok(AdamSnapshot {
            t: self.u64(what)?,
            lr: self.f32(what)?,
            beta1: self.f32(what)?,
            beta2: self.f32(what)?,
            eps: self.f32(what)?,
            m: self.tensors(&format!("{what} first moment"))?,
            v: self.tensors(&format!("{what} second moment"))?,
        })
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.str(&self.config_text);
        w.tensors(&self.generator);
        w.tensors(&self.discriminator);
        w.adam(&self.adam_g);
        w.adam(&self.adam_d);
        w.u32(self.rng_states.len() as u32);
        for (name, state) in &self.rng_states {
            w.str(name);
            w.u64(*state);
        }
        w.u64(self.global_step);
        w.buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0, path };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(path, 0, format!("bad magic {magic:02x?}, expected \"LLCK\"")));
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                path,
                version_at as u64,
                format!("unsupported format version {version}; this build reads version {VERSION}"),
            ));
        }
        let config_text = r.str("config snapshot")?;
        let generator = r.tensors("generator")?;
        let discriminator = r.tensors("discriminator")?;
        let adam_g = r.adam("generator optimizer")?;
        let adam_d = r.adam("discriminator optimizer")?;
        let rng_count = r.u32("rng block")? as usize;
        let mut rng_states = Vec::with_capacity(rng_count.min(64));
        for i in 0..rng_count {
            let ctx = format!("rng entry {i}");
            let name = r.str(&ctx)?;
            let state = r.u64(&ctx)?;
            rng_states.push((name, state));
        }
        let global_step = r.u64("global step")?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, format!("{} trailing bytes after checkpoint end", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config_text, generator, discriminator, adam_g, adam_d, rng_states, global_step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tensor;
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(5);
        let t = |name: &str, dims: Vec<usize>, rng: &mut Rng| NamedTensor {
            name: name.into(),
            data: Tensor::rand_normal(dims.clone(), 1.0, rng).into_data(),
            dims,
        };
        Checkpoint {
            config_text: "steps = 3\nseed = 9\n".into(),
            generator: vec![t("enc0.w", vec![2, 4, 3, 3], &mut rng), t("enc0.b", vec![2], &mut rng)],
            discriminator: vec![t("layer0.w", vec![1, 6, 4, 4], &mut rng)],
            adam_g: AdamSnapshot {
                t: 7,
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                m: vec![t("enc0.w", vec![2, 4, 3, 3], &mut rng), t("enc0.b", vec![2], &mut rng)],
                v: vec![t("enc0.w", vec![2, 4, 3, 3], &mut rng), t("enc0.b", vec![2], &mut rng)],
            },
            adam_d: AdamSnapshot::empty(),
            rng_states: vec![("master".into(), 0xDEADBEEF)],
            global_step: 7,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.llck");
        let p2 = dir.path().join("b.llck");
        let ck = sample();
        ck.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn future_version_is_rejected() {
        let mut bytes = sample().encode();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::decode(&bytes, Path::new("x.llck")).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        let err = Checkpoint::decode(&bytes, Path::new("x.llck")).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn every_truncation_point_errors_with_offset() {
        let full = sample().encode();
        // Check a spread of truncation lengths, including all short prefixes.
        for cut in (0..full.len()).step_by(7).chain([full.len() - 1]) {
            let err = Checkpoint::decode(&full[..cut], Path::new("t.llck")).unwrap_err();
            let msg = err.to_string();
            assert!(
                msg.contains("at byte") || msg.contains("magic"),
                "cut at {cut}: unexpected error {msg}"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample().encode();
        bytes.push(0);
        let err = Checkpoint::decode(&bytes, Path::new("x.llck")).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn param_set_round_trip() {
        let mut rng = Rng::new(3);
        let mut set = ParamSet::new();
        set.insert_conv("a.weight", vec![3, 2, 3, 3], 18, &mut rng);
        set.insert_zeros("a.bias", vec![3]);
        let snap = tensors_of(&set);

        let mut rng2 = Rng::new(99);
        let mut other = ParamSet::new();
        other.insert_conv("a.weight", vec![3, 2, 3, 3], 18, &mut rng2);
        other.insert_zeros("a.bias", vec![3]);
        restore_into(&mut other, &snap, "test").unwrap();
        for (name, t) in set.iter() {
            assert_eq!(other.get(name).data(), t.data());
        }

        let mut wrong = ParamSet::new();
        wrong.insert_zeros("b.bias", vec![3]);
        let err = restore_into(&mut wrong, &snap, "test").unwrap_err().to_string();
        assert!(err.contains("holds 2 tensors"), "{err}");
    }
}
