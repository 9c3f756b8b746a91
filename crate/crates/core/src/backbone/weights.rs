//! Named parameter store and the `MBWT` binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "MBWT"
//! version      u32      1
//! count        u32      number of tensors
//! per tensor, in name order:
//!   name_len   u16
//!   name       name_len bytes of UTF-8
//!   ndim       u8
//!   dims       ndim × u32
//!   data       product(dims) × f32
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::backbone::{timed_load, BundleStats, ModelSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MBWT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    entries: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensors(vec![name.to_string()]))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Keeps only the entries accepted by `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.entries.retain(|k, _| keep(k));
    }
}

impl FromIterator<(String, Tensor)> for WeightStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

pub fn write_weights(store: &WeightStore, mut out: impl Write) -> Result<()> {
    if store.is_empty() {
        return Err(Error::Malformed("refusing to write an empty weight store".into()));
    }
    let io = |e| Error::io("<stream>", e);
    let count = u32::try_from(store.len())
        .map_err(|_| Error::Malformed("too many tensors".into()))?;
    out.write_all(&MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&count.to_le_bytes()).map_err(io)?;
    for (name, tensor) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Malformed(format!("tensor name too long: {name}")))?;
        let ndim = u8::try_from(tensor.ndim())
            .map_err(|_| Error::Malformed(format!("{name} has too many dimensions")))?;
        out.write_all(&len.to_le_bytes()).map_err(io)?;
        out.write_all(name.as_bytes()).map_err(io)?;
        out.write_all(&[ndim]).map_err(io)?;
        for &d in tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Malformed(format!("{name} dimension exceeds u32")))?;
            out.write_all(&d.to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Parses an `MBWT` container from memory. Returns the store and the number
/// of bytes consumed.
pub fn read_weights(bytes: &[u8]) -> Result<(WeightStore, usize)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32("tensor count")?;
    if count == 0 {
        return Err(Error::Malformed("weight container holds no tensors".into()));
    }
    let mut store = WeightStore::new();
    for i in 0..count {
        let len = cur.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "tensor name")?)
            .map_err(|_| Error::Malformed(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let ndim = cur.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32(&name)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Malformed(format!("{name} shape overflows")))?;
        let raw = cur.take(n, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data)?;
        if store.insert(name.clone(), tensor).is_some() {
            return Err(Error::Malformed(format!("duplicate tensor name {name}")));
        }
    }
    Ok((store, cur.pos))
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_weights(store, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a weight file and reports its size and load time. When `expected`
/// is given the store must match that spec's shape table exactly.
pub fn load_weights(path: impl AsRef<Path>, expected: Option<&ModelSpec>) -> Result<(WeightStore, BundleStats)> {
    let path = path.as_ref();
    timed_load(path, || {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let (store, used) = read_weights(&bytes)?;
        if used != bytes.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - used
            )));
        }
        if let Some(spec) = expected {
            crate::backbone::build_model(spec)?.validate(&store)?;
        }
        Ok(store)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("a/kernel", Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5));
        s.insert("b", Tensor::scalar(f32::MIN_POSITIVE));
        s.insert("c/zero", Tensor::zeros(&[0, 4]));
        s
    }

    #[test]
    fn round_trip_in_memory() {
        let store = sample_store();
        let mut buf = Vec::new();
        write_weights(&store, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"MBWT");
        let (back, used) = read_weights(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back, store);
    }

    #[test]
    fn byte_layout() {
        let mut s = WeightStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut buf = Vec::new();
        write_weights(&s, &mut buf).unwrap();
        let mut expected = b"MBWT".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(1);
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn distinct_load_errors() {
        let mut buf = Vec::new();
        write_weights(&sample_store(), &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights(&bad), Err(Error::BadMagic { .. })));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_weights(&bad), Err(Error::UnsupportedVersion(9))));

        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_weights(short), Err(Error::Truncated(_))));

        assert!(write_weights(&WeightStore::new(), Vec::new()).is_err());
        let mut empty = b"MBWT".to_vec();
        empty.extend(1u32.to_le_bytes());
        empty.extend(0u32.to_le_bytes());
        assert!(matches!(read_weights(&empty), Err(Error::Malformed(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_weights("/nonexistent/weights.mbwt", None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn file_round_trip_reports_stats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mbwt");
        let spec = ModelSpec::new(0.25, 32, 7);
        let store = crate::backbone::init_weights(&spec, 1).unwrap();
        save_weights(&store, &path).unwrap();
        let (back, stats) = load_weights(&path, Some(&spec)).unwrap();
        assert_eq!(back, store);
        assert_eq!(stats.weight_size_bytes, std::fs::metadata(&path).unwrap().len());
        assert!(stats.load_time_seconds > 0.0);

        let other = ModelSpec::new(0.5, 32, 7);
        assert!(matches!(load_weights(&path, Some(&other)), Err(Error::ShapeTable(_))));
    }
}
