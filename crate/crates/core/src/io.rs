//! Bit-exact tensor files and small JSON helpers.
//!
//! Tensor file layout (all integers little-endian):
//! `b"PCLT"`, `u32` entry count, then per entry `u32` name length, UTF-8
//! name, `u64` rows, `u64` cols, `rows*cols` `f64` values.

use std::fs;
use std::path::Path;

use pcl_tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 4] = b"PCLT";

pub fn encode_tensors(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data("truncated tensor file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("not a tensor file".into()));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let bytes = r.take(rows * cols * 8)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(rows, cols, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Data("trailing bytes in tensor file".into()));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    fs::write(path, encode_tensors(entries)).map_err(io_err(path))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_tensors(&buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensor_files_round_trip_bitwise(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = crate::init::rng(seed);
            let t = crate::init::normal(&mut rng, rows, cols, 1e3);
            let bytes = encode_tensors(&[("a", &t), ("b.c", &t.transpose())]);
            let back = decode_tensors(&bytes).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(back[0].1.to_le_bytes(), t.to_le_bytes());
            prop_assert_eq!(&back[1].0, "b.c");
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let t = Tensor::ones(2, 2);
        let bytes = encode_tensors(&[("a", &t)]);
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
    }
}
