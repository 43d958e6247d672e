//! Binary distilled-set checkpoints, little-endian:
//!
//! ```text
//! "FLIPDS1"  magic, 7 bytes
//! u32 C, u32 k, u32 ndim, ndim x u32 input dims
//! f64 samples [K, ..dims], f64 soft labels [K, C], f64 rates [K]
//! K x (u32 class, u32 index)  slot map
//! optional trailer: "NORM", u32 channels, f64 means, f64 stds
//! ```

use std::path::Path;

use super::{DistilledSet, Slot};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 7] = b"FLIPDS1";
const NORM_TAG: &[u8; 4] = b"NORM";

/// A distilled set plus the input normalization its samples live in.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub set: DistilledSet,
    pub normalization: Option<Normalization>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(set: &DistilledSet, norm: Option<&Normalization>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, set.classes);
    put_u32(&mut out, set.k);
    put_u32(&mut out, set.input_shape.len());
    for &d in &set.input_shape {
        put_u32(&mut out, d);
    }
    put_f64s(&mut out, set.samples.data());
    put_f64s(&mut out, set.soft_labels.data());
    put_f64s(&mut out, &set.lrs);
    for s in &set.slots {
        put_u32(&mut out, s.class);
        put_u32(&mut out, s.index);
    }
    if let Some(n) = norm {
        out.extend_from_slice(NORM_TAG);
        put_u32(&mut out, n.channels());
        put_f64s(&mut out, &n.mean);
        put_f64s(&mut out, &n.std);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.err(format!("{what} count overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected FLIPDS1"));
    }
    let classes = r.u32("class count")?;
    let k = r.u32("per-class count")?;
    let ndim = r.u32("rank")?;
    if ndim != 3 {
        return Err(r.err(format!("input rank {ndim}, expected 3")));
    }
    let dims = [r.u32("dim")?, r.u32("dim")?, r.u32("dim")?];
    let big_k = classes * k;
    let sample_len = dims.iter().product::<usize>();
    let samples = r.f64s(big_k * sample_len, "samples")?;
    let soft = r.f64s(big_k * classes, "soft labels")?;
    let lrs = r.f64s(big_k, "learning rates")?;
    let mut slots = Vec::with_capacity(big_k);
    for _ in 0..big_k {
        slots.push(Slot {
            class: r.u32("slot map")?,
            index: r.u32("slot map")?,
        });
    }
    let normalization = if r.pos == bytes.len() {
        None
    } else {
        if r.take(NORM_TAG.len(), "trailer tag")? != NORM_TAG {
            r.pos -= NORM_TAG.len();
            return Err(r.err("unexpected bytes after slot map"));
        }
        let ch = r.u32("channel count")?;
        let mean = r.f64s(ch, "means")?;
        let std = r.f64s(ch, "stds")?;
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Some(Normalization { mean, std })
    };
    let mut shape = vec![big_k];
    shape.extend_from_slice(&dims);
    let set = DistilledSet::new(
        dims,
        classes,
        k,
        Tensor::new(shape, samples)?,
        Tensor::new(vec![big_k, classes], soft)?,
        lrs,
        slots,
    )?;
    Ok(Checkpoint { set, normalization })
}

pub fn write_checkpoint(path: &Path, set: &DistilledSet, norm: Option<&Normalization>) -> Result<()> {
    std::fs::write(path, encode(set, norm)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::init_distilled;
    use crate::model::ModelSpec;

    fn sample_set() -> DistilledSet {
        init_distilled(&ModelSpec::mlp([1, 2, 3], 3, 4), 3, 2, 5).unwrap()
    }

    #[test]
    fn round_trip() {
        let set = sample_set();
        for norm in [None, Some(Normalization::mnist())] {
            let ck = decode(&encode(&set, norm.as_ref()), Path::new("ck")).unwrap();
            assert!(ck.set.bit_eq(&set));
            assert_eq!(ck.normalization, norm);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_set(), None);
        assert_eq!(&bytes[..7], b"FLIPDS1");
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 2);
        // header 7 + 6 * 4, then 6 * (6 + 3 + 1) f64, then 6 slot pairs
        assert_eq!(bytes.len(), 31 + 6 * 10 * 8 + 6 * 8);
    }

    #[test]
    fn corruption_is_located() {
        let mut bytes = encode(&sample_set(), None);
        bytes[0] = b'X';
        match decode(&bytes, Path::new("ck")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        let bytes = encode(&sample_set(), None);
        match decode(&bytes[..40], Path::new("ck")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 31),
            other => panic!("{other:?}"),
        }
        let mut bytes = encode(&sample_set(), None);
        bytes.push(0);
        assert!(decode(&bytes, Path::new("ck")).is_err());
    }
}
