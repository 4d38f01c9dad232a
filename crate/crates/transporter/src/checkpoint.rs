//! Binary checkpoints: magic `USTP`, format version, then one record per
//! named tensor (name length, name, rank, dims, f32 data), all little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use usbone_core::Error as CoreError;

use crate::error::Result;
use crate::net::Transporter;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"USTP";
pub const VERSION: u32 = 1;

/// Named tensors in file order.
pub type Records = Vec<(String, Vec<usize>, Vec<f32>)>;

pub fn encode(records: &Records) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, dims, data) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Records, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a USTP checkpoint".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "record name is not UTF-8".to_string())?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("record too large")?;
        let raw = r.take(count.checked_mul(4).ok_or("record too large")?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.push((name, dims, data));
    }
    Ok(records)
}

pub fn records<T: Real>(net: &mut Transporter<T>) -> Records {
    let mut out = Vec::new();
    net.visit(&mut |name, mut s| {
        let t = s.tensor();
        let data = t.data().iter().map(|v| v.to_f32().unwrap()).collect();
        out.push((name, t.shape().to_vec(), data));
    });
    out
}

pub fn save<T: Real>(net: &mut Transporter<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(&records(net))).map_err(|e| CoreError::io(path, e).into())
}

/// Overwrites the state of `net` with the file's records. Every parameter
/// and buffer must be present with a matching shape.
pub fn load<T: Real>(net: &mut Transporter<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let records = decode(&bytes).map_err(|m| CoreError::format(path, m))?;
    apply(net, records).map_err(|m| CoreError::format(path, m).into())
}

pub fn apply<T: Real>(net: &mut Transporter<T>, records: Records) -> std::result::Result<(), String> {
    let mut by_name: BTreeMap<String, (Vec<usize>, Vec<f32>)> =
        records.into_iter().map(|(n, d, v)| (n, (d, v))).collect();
    let mut problem = None;
    net.visit(&mut |name, mut s| {
        if problem.is_some() {
            return;
        }
        let t = s.tensor();
        match by_name.remove(&name) {
            None => problem = Some(format!("missing record {name}")),
            Some((dims, _)) if dims != t.shape() => {
                problem = Some(format!("record {name} has shape {dims:?}, expected {:?}", t.shape()))
            }
            Some((_, data)) => *t = Tensor::new(t.shape(), data.iter().map(|&v| T::of(v as f64)).collect()),
        }
    });
    if let Some(p) = problem {
        return Err(p);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(format!("unexpected record {extra}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkSpec;

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            widths: [4, 4, 6, 6, 8, 8],
            keypoints: 3,
            ..NetworkSpec::default()
        }
    }

    #[test]
    fn byte_layout_is_fixed() {
        let bytes = encode(&vec![("ab".into(), vec![1, 2], vec![1.0, -2.0])]);
        let mut expect = b"USTP".to_vec();
        for v in [1u32, 2] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(b"ab");
        for v in [2u32, 1, 2] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ustp");
        let mut a = Transporter::<f32>::new(&small_spec(), 4, 1).unwrap();
        let mut b = Transporter::<f32>::new(&small_spec(), 4, 2).unwrap();
        save(&mut a, &path).unwrap();
        load(&mut b, &path).unwrap();
        assert_eq!(records(&mut a), records(&mut b));
    }

    #[test]
    fn corrupt_and_mismatched_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ustp");
        let mut net = Transporter::<f32>::new(&small_spec(), 4, 1).unwrap();
        std::fs::write(&path, b"USTX").unwrap();
        assert!(load(&mut net, &path).unwrap_err().is_io());
        let mut bytes = encode(&records(&mut net));
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(load(&mut net, &path).is_err());
        let mut other = Transporter::<f32>::new(&NetworkSpec { keypoints: 5, ..small_spec() }, 4, 1).unwrap();
        save(&mut other, &path).unwrap();
        assert!(load(&mut net, &path).unwrap_err().to_string().contains("keynet.head.weight"));
        assert!(load(&mut net, dir.path().join("absent")).unwrap_err().is_io());
    }
}
