//! Container shared by posterior and sample files.
//!
//! ```text
//! b"RLAP1\n"                       6-byte magic
//! u64 little-endian               length H of the JSON header in bytes
//! H bytes                         UTF-8 JSON object; its "arrays" field lists
//!                                 {"name": str, "len": int} in file order
//! f64 little-endian arrays        concatenated in the listed order
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"RLAP1\n";

pub fn write_container(
    path: &Path,
    mut header: Map<String, Value>,
    arrays: &[(&str, &[f64])],
) -> Result<()> {
    let listing: Vec<Value> = arrays
        .iter()
        .map(|(name, a)| json!({ "name": name, "len": a.len() }))
        .collect();
    header.insert("arrays".into(), Value::Array(listing));
    let text = serde_json::to_vec(&Value::Object(header))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(&text)?;
    for (_, a) in arrays {
        for x in a.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Container {
    pub header: Map<String, Value>,
    pub arrays: BTreeMap<String, Vec<f64>>,
}

impl Container {
    pub fn take(&mut self, name: &str) -> Result<Vec<f64>> {
        self.arrays
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing array {name:?}")))
    }

    pub fn field<'a>(&'a self, name: &str) -> Result<&'a Value> {
        self.header
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing header field {name:?}")))
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut text = vec![0u8; len];
    r.read_exact(&mut text)
        .map_err(|_| Error::Format("truncated header".into()))?;
    let header = match serde_json::from_slice::<Value>(&text)? {
        Value::Object(m) => m,
        _ => return Err(Error::Format("header is not a JSON object".into())),
    };
    let listing = header
        .get("arrays")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("header lacks an arrays list".into()))?
        .clone();
    let mut arrays = BTreeMap::new();
    for entry in listing {
        let name = entry.get("name").and_then(Value::as_str);
        let n = entry.get("len").and_then(Value::as_u64);
        let (Some(name), Some(n)) = (name, n) else {
            return Err(Error::Format("malformed array entry".into()));
        };
        let mut buf = vec![0u8; n as usize * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("truncated array {name:?}")))?;
        let values = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        arrays.insert(name.to_string(), values);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after arrays".into()));
    }
    Ok(Container { header, arrays })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let a = [1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0];
        let mut h = Map::new();
        h.insert("kind".into(), json!("test"));
        write_container(&p, h, &[("a", &a), ("b", &[])]).unwrap();
        let mut c = read_container(&p).unwrap();
        assert_eq!(c.field("kind").unwrap(), "test");
        let back = c.take("a").unwrap();
        assert!(back.iter().zip(&a).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(c.take("b").unwrap().is_empty());
        assert!(c.take("zzz").is_err());
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_container(&p, Map::new(), &[("a", &[1.0, 2.0])]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_container(&p), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(read_container(&p), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        std::fs::write(&p, &long).unwrap();
        assert!(matches!(read_container(&p), Err(Error::Format(_))));
    }
}
