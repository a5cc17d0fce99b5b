//! Binary parameter file.
//!
//! Layout: the 8 magic bytes `SSENCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header
//! `{"meta": ..., "tensors": [{"name", "shape"}, ...]}`, then every tensor's
//! values as little-endian `f64` in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{NnError, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSENCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

pub fn write_params<W: Write>(
    mut w: W,
    meta: &Value,
    tensors: &[(String, &Tensor)],
) -> Result<(), NnError> {
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<(Value, Vec<(String, Tensor)>), NnError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic bytes".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let count: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((entry.name, Tensor::new(&entry.shape, data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(NnError::Checkpoint(format!(
            "{} trailing bytes",
            rest.len()
        )));
    }
    Ok((header.meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let a = Tensor::new(&[2, 2], vec![0.1, -3.5e-300, f64::MAX, 1.0 / 3.0]).unwrap();
        let b = Tensor::scalar(-0.0);
        let meta = serde_json::json!({"k": 1});
        let mut buf = Vec::new();
        write_params(&mut buf, &meta, &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let (m, tensors) = read_params(buf.as_slice()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(tensors[0].0, "a");
        for (x, y) in tensors[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(tensors[1].1.data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_params(&mut buf, &Value::Null, &[("t".into(), &t)]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_params(bad.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(read_params(bad.as_slice()).is_err());
        assert!(read_params(&buf[..buf.len() - 1]).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_params(long.as_slice()).is_err());
    }
}
