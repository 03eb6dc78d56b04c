//! Little-endian binary checkpoints.
//!
//! ```text
//! magic      8 bytes  "DCRFCKPT"
//! version    u32      1
//! meta_len   u32      length of the metadata text
//! meta       UTF-8    [checkpoint], [model] and [crf] sections, key = value
//! count      u32      number of tensor sections
//! per section:
//!   name_len u32, name UTF-8 ("param:<name>" or "momentum:<name>")
//!   dtype    u8       8 = f64
//!   ndim     u32, dims ndim x u64
//!   data     prod(dims) x f64
//! ```
//!
//! Floats in the metadata use the shortest exact decimal form, so loading
//! reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use dgcrf_core::networks::ModelState;
use dgcrf_core::trainer::Variant;
use dgcrf_core::Tensor;

use crate::config::{model_text, parse_model_with};
use crate::error::{read, write_atomic, Error, Result};

pub const MAGIC: &[u8; 8] = b"DCRFCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub variant: Variant,
    /// Training resolution; inference inputs must match it.
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let meta = format!(
        "[checkpoint]\niteration = {}\nvariant = {}\nheight = {}\nwidth = {}\nseed = {}\n\n{}",
        ck.state.iteration,
        ck.variant,
        ck.height,
        ck.width,
        ck.seed,
        model_text(&ck.state.spec)
    );
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let sections: Vec<(String, &Tensor)> = ck
        .state
        .params
        .iter()
        .map(|(k, t)| (format!("param:{k}"), t))
        .chain(ck.state.momentum.iter().map(|(k, t)| (format!("momentum:{k}"), t)))
        .collect();
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, t) in sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.origin.to_string(),
            offset: self.pos,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos..self.pos.saturating_add(n)) {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => self.fail(format!("truncated while reading {what}")),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<&'a str> {
        let at = self.pos;
        let bytes = self.take(n, what)?;
        std::str::from_utf8(bytes).or_else(|_| {
            self.pos = at;
            self.fail(format!("{what} is not UTF-8"))
        })
    }
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return r.fail("not a checkpoint (bad magic)");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(format!("unsupported checkpoint version {version}"));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = r.text(meta_len, "metadata")?;
    let (spec, (iteration, variant, height, width, seed)) =
        parse_model_with(meta, &format!("{origin} metadata"), &["checkpoint"], |s| {
            Ok((
                s.required::<u64>("checkpoint", "iteration")?,
                s.required::<Variant>("checkpoint", "variant")?,
                s.required::<usize>("checkpoint", "height")?,
                s.required::<usize>("checkpoint", "width")?,
                s.required::<u64>("checkpoint", "seed")?,
            ))
        })?;
    let count = r.u32("section count")?;
    let mut params = BTreeMap::new();
    let mut momentum = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("section name length")? as usize;
        let name = r.text(name_len, "section name")?.to_string();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return r.fail(format!("section {name}: unsupported dtype {dtype}"));
        }
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(n) = n.filter(|n| n.checked_mul(8).is_some()) else {
            return r.fail(format!("section {name}: shape {shape:?} overflows"));
        };
        let raw = r.take(n * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data)?;
        let target = if let Some(k) = name.strip_prefix("param:") {
            params.insert(k.to_string(), t)
        } else if let Some(k) = name.strip_prefix("momentum:") {
            momentum.insert(k.to_string(), t)
        } else {
            return r.fail(format!("unknown section kind {name:?}"));
        };
        if target.is_some() {
            return r.fail(format!("duplicate section {name:?}"));
        }
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after last section");
    }
    let expected = spec.init_params(0);
    if expected.len() != params.len()
        || expected
            .iter()
            .any(|(k, t)| params.get(k).map(Tensor::shape) != Some(t.shape()))
    {
        return Err(Error::Mismatch(format!(
            "{origin}: stored parameters do not match the stored model description"
        )));
    }
    Ok(Checkpoint {
        state: ModelState {
            spec,
            params,
            momentum,
            iteration,
        },
        variant,
        height,
        width,
        seed,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use dgcrf_core::networks::ModelSpec;

    fn sample() -> Checkpoint {
        let spec = ModelSpec {
            encoder: vec![4, 4],
            shared_depth: 1,
            hall_encoder: vec![2],
            disc: vec![3],
            ..ModelSpec::default()
        };
        let mut state = ModelState::new(spec, 9).unwrap();
        state.iteration = 17;
        let name = state.params.keys().next().unwrap().clone();
        let m = state.params[&name].map(|v| v * 1e-3 + f64::MIN_POSITIVE);
        state.momentum.insert(name, m);
        Checkpoint {
            state,
            variant: Variant::CoupledGD,
            height: 8,
            width: 16,
            seed: 3,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = decode(&encode(&ck), "mem").unwrap();
        assert_eq!(back, ck);
        for (k, t) in &ck.state.params {
            let b = &back.state.params[k];
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn truncation_and_corruption_are_reported() {
        let bytes = encode(&sample());
        for cut in [4, 20, bytes.len() - 3] {
            assert!(matches!(decode(&bytes[..cut], "mem"), Err(Error::Format { .. })));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, "mem"), Err(Error::Format { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long, "mem").is_err());
    }
}
