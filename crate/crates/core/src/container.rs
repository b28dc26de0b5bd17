//! Versioned binary container for model files: a JSON header describing the
//! model followed by named little-endian `f64` arrays.
//!
//! Layout: `b"POSEINIT"`, `u32` format version, `u64` header length, header
//! JSON, then each array's values in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"POSEINIT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

/// Decoded container contents.
#[derive(Debug)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn take_array(&mut self, name: &str) -> Result<Vec<f64>> {
        let pos = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Model(format!("missing array '{name}'")))?;
        Ok(self.arrays.remove(pos).1)
    }
}

pub fn write(
    mut w: impl Write,
    kind: &str,
    meta: &impl Serialize,
    arrays: &[(&str, &[f64])],
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta: serde_json::to_value(meta)?,
        arrays: arrays
            .iter()
            .map(|(name, data)| ArrayEntry {
                name: name.to_string(),
                len: data.len(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<model>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for (_, data) in arrays {
        for v in data.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read(mut r: impl Read, expected_kind: &str) -> Result<Container> {
    let io = |e| Error::io("<model>", e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Model("not a model container".into()));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Model(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8).map_err(io)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header).map_err(io)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.kind != expected_kind {
        return Err(Error::Model(format!(
            "expected a '{expected_kind}' model, found '{}'",
            header.kind
        )));
    }
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in header.arrays {
        let mut bytes = vec![0u8; entry.len * 8];
        r.read_exact(&mut bytes).map_err(io)?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.push((entry.name, values));
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        arrays,
    })
}

pub fn save(
    path: impl AsRef<Path>,
    kind: &str,
    meta: &impl Serialize,
    arrays: &[(&str, &[f64])],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write(BufWriter::new(file), kind, meta, arrays)
}

pub fn load(path: impl AsRef<Path>, expected_kind: &str) -> Result<Container> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read(BufReader::new(file), expected_kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = [1.0, -0.1, f64::MIN_POSITIVE, 1e300];
        let b = [std::f64::consts::PI];
        let mut buf = Vec::new();
        write(&mut buf, "demo", &serde_json::json!({"x": 3}), &[("a", &a), ("b", &b)]).unwrap();
        let mut c = read(&buf[..], "demo").unwrap();
        assert_eq!(c.meta["x"], 3);
        assert_eq!(c.take_array("b").unwrap(), b.to_vec());
        let back = c.take_array("a").unwrap();
        for (x, y) in back.iter().zip(&a) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_kind_and_version() {
        let mut buf = Vec::new();
        write(&mut buf, "demo", &(), &[]).unwrap();
        assert!(matches!(read(&buf[..], "other"), Err(Error::Model(_))));
        buf[8] = 99;
        assert!(matches!(read(&buf[..], "demo"), Err(Error::Model(_))));
        assert!(matches!(read(&b"garbage!"[..], "demo"), Err(Error::Model(_))));
    }
}
