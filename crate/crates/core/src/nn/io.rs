//! Model serialization.
//!
//! Format: magic `RSDF`, version u32 LE, tensor count u32 LE; per tensor a
//! u16 LE name length, the UTF-8 name, a u8 rank, the dims as u32 LE, then
//! the data as f32 LE in row-major order. Loading validates every tensor
//! against the fixed architecture, so a round trip is bit-exact.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Network;

const MAGIC: &[u8; 4] = b"RSDF";
const VERSION: u32 = 1;

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let tensors = net.tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, dims, data) in tensors {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[dims.len() as u8])?;
        for d in &dims {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() < n {
            return Err(Error::Model("file truncated".into()));
        }
        let (head, tail) = self.data.split_at(n);
        self.data = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_model(path: &Path) -> Result<Network> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { data: &bytes };

    if r.take(4)? != MAGIC {
        return Err(Error::Model("bad magic, not a model file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Model(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }

    // Start from a zeroed architecture and require exactly the expected
    // tensors with the expected shapes.
    let mut net = crate::nn::init_weights(0);
    let expected: Vec<(String, Vec<usize>)> = net
        .tensors()
        .iter()
        .map(|(n, d, _)| (n.to_string(), d.clone()))
        .collect();

    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Model(format!(
            "expected {} tensors, file has {count}",
            expected.len()
        )));
    }

    let mut seen = vec![false; expected.len()];
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Model("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let slot = expected
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| Error::Model(format!("unknown tensor `{name}`")))?;
        if seen[slot] {
            return Err(Error::Model(format!("duplicate tensor `{name}`")));
        }
        seen[slot] = true;
        if dims != expected[slot].1 {
            return Err(Error::Model(format!(
                "tensor `{name}` has dims {dims:?}, architecture requires {:?}",
                expected[slot].1
            )));
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let target = &mut net.params_mut()[slot];
        debug_assert_eq!(target.len(), values.len());
        **target = values;
    }
    if !r.data.is_empty() {
        return Err(Error::Model(format!(
            "{} trailing bytes after the last tensor",
            r.data.len()
        )));
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::Model(format!(
            "missing tensor `{}`",
            expected[missing].0
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_weights;

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let net = init_weights(99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&net, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(net, loaded);
        // and the file itself is stable
        let again = dir.path().join("model2.bin");
        save_model(&loaded, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let net = init_weights(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Model(_))));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Model(_))));
    }

    #[test]
    fn dimension_mismatch_names_the_tensor() {
        let net = init_weights(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // first tensor header sits right after magic+version+count; name is
        // "conv1.weight" (12 bytes), rank byte, then dims. Corrupt dim 0.
        let dim0_at = 4 + 4 + 4 + 2 + 12 + 1;
        bytes[dim0_at] = 7;
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(Error::Model(msg)) => assert!(msg.contains("conv1.weight"), "{msg}"),
            other => panic!("expected model error, got {other:?}"),
        }
    }
}
