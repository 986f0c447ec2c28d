//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `MSFC`, version `u32`, entry count `u32`,
//! then per entry: name length `u16`, UTF-8 name, dtype `u8` (0 = f32,
//! 1 = f64), rank `u8`, `rank` dims as `u32`, raw values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"MSFC";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, entry) in store.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::invalid(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(T::DTYPE);
        let dims = entry.tensor.shape().dims();
        out.push(dims.len() as u8);
        for d in dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::invalid(format!("dimension too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        T::to_le_bytes_vec(entry.tensor.data(), &mut out);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.origin,
                format!("truncated checkpoint reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes every entry in file order.
pub fn decode<T: Scalar>(bytes: &[u8], origin: &str) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        origin,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(origin, "bad magic, not an MSFC checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(
            origin,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse(origin, format!("non-UTF-8 name at byte {}", r.pos)))?
            .to_string();
        let dtype = r.u8("dtype")?;
        let rank = r.u8("rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::parse(
                origin,
                format!("entry `{name}` has unsupported rank {rank}"),
            ));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().take(rank) {
            *d = r.u32("dims")? as usize;
        }
        let shape = Shape::from_dims(dims);
        let n = shape.numel();
        let data: Vec<T> = match dtype {
            0 => r
                .take(n * 4, "f32 values")?
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect(),
            1 => r
                .take(n * 8, "f64 values")?
                .chunks_exact(8)
                .map(|c| {
                    let mut b = [0u8; 8];
                    b.copy_from_slice(c);
                    T::from_f64_lossy(f64::from_le_bytes(b))
                })
                .collect(),
            other => {
                return Err(Error::parse(
                    origin,
                    format!("entry `{name}` has unknown dtype {other}"),
                ))
            }
        };
        entries.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(
            origin,
            format!("{} trailing bytes after last entry", bytes.len() - r.pos),
        ));
    }
    Ok(entries)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = encode(store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

/// Overwrites the tensors of `store` with checkpoint values. Every entry of
/// the store must be present with an identical shape, and vice versa.
pub fn load_into<T: Scalar>(
    store: &mut ParamStore<T>,
    entries: Vec<(String, Tensor<T>)>,
) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (name, tensor) in entries {
        let entry = store.get_mut(&name).ok_or_else(|| Error::Checkpoint {
            field: name.clone(),
            message: "present in checkpoint but not in the model".into(),
        })?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Checkpoint {
                field: name.clone(),
                message: format!(
                    "checkpoint shape {:?} does not match model shape {:?}",
                    tensor.shape(),
                    entry.tensor.shape()
                ),
            });
        }
        entry.tensor = tensor;
        seen.insert(name);
    }
    if let Some((missing, _)) = store.iter().find(|(k, _)| !seen.contains(*k)) {
        return Err(Error::Checkpoint {
            field: missing.to_string(),
            message: "required by the model but missing from the checkpoint".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::params::ParamKind;

    fn store_f32(values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(
            "enc.conv1.weight",
            Tensor::from_vec(Shape::new(1, 1, 1, values.len()), values.to_vec()).unwrap(),
            ParamKind::Weight,
        )
        .unwrap();
        s.insert(
            "enc.bn1.scale",
            Tensor::vector(vec![1.0, 2.0]),
            ParamKind::BnScale,
        )
        .unwrap();
        s
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            let s = store_f32(&values);
            let bytes = encode(&s).unwrap();
            let entries = decode::<f32>(&bytes, "mem").unwrap();
            let mut back = store_f32(&vec![0.0; values.len()]);
            load_into(&mut back, entries).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let s = store_f32(&[1.5]);
        let b = encode(&s).unwrap();
        assert_eq!(&b[0..4], b"MSFC");
        assert_eq!(u32::from_le_bytes([b[4], b[5], b[6], b[7]]), 1);
        assert_eq!(u32::from_le_bytes([b[8], b[9], b[10], b[11]]), 2);
        // first entry in name order is the bn scale
        let len = u16::from_le_bytes([b[12], b[13]]) as usize;
        assert_eq!(&b[14..14 + len], b"enc.bn1.scale");
        assert_eq!(b[14 + len], 0);
        assert_eq!(b[15 + len], 4);
    }

    #[test]
    fn f64_values_survive() {
        let mut s = ParamStore::<f64>::new();
        s.insert(
            "x",
            Tensor::vector(vec![std::f64::consts::PI, -1e-300]),
            ParamKind::Bias,
        )
        .unwrap();
        let e = decode::<f64>(&encode(&s).unwrap(), "mem").unwrap();
        assert_eq!(e[0].1.data(), &[std::f64::consts::PI, -1e-300]);
    }

    #[test]
    fn truncation_and_mismatch_are_errors() {
        let s = store_f32(&[1.0, 2.0]);
        let b = encode(&s).unwrap();
        assert!(decode::<f32>(&b[..b.len() - 1], "mem").is_err());
        let mut other = ParamStore::<f32>::new();
        other
            .insert(
                "enc.conv1.weight",
                Tensor::zeros(Shape::new(1, 1, 1, 3)),
                ParamKind::Weight,
            )
            .unwrap();
        other
            .insert(
                "enc.bn1.scale",
                Tensor::vector(vec![0.0, 0.0]),
                ParamKind::BnScale,
            )
            .unwrap();
        let err = load_into(&mut other, decode::<f32>(&b, "mem").unwrap()).unwrap_err();
        assert!(err.to_string().contains("enc.conv1.weight"));
    }
}
