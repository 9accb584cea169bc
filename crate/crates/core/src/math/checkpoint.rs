//! Binary parameter snapshots.
//!
//! Layout: the four bytes `MFL1`, one line of compact JSON (the header,
//! terminated by `\n`), then every parameter's values as little-endian `f64`
//! in header order. Offsets in the header are relative to the start of the
//! data section.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MFL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: serde_json::Value,
    step: u64,
    task_index: Option<usize>,
    seed: u64,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
    pub step: u64,
    pub task_index: Option<usize>,
    pub seed: u64,
}

impl Checkpoint {
    pub fn from_store(
        store: &ParamStore,
        architecture: serde_json::Value,
        step: u64,
        task_index: Option<usize>,
        seed: u64,
    ) -> Self {
        let params = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        Self { architecture, params, step, task_index, seed }
    }

    /// Overwrites matching parameters in `store`. Every store parameter must be present.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, value) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("checkpoint parameter {name} unknown to model")))?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::Dimension(format!("checkpoint parameter {name} has shape {:?}", value.shape())));
            }
            store.get_mut(id).value = value.clone();
        }
        if self.params.len() != store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut offset = 0u64;
        let entries = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = ParamEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header {
            architecture: self.architecture.clone(),
            step: self.step,
            task_index: self.task_index,
            seed: self.seed,
            params: entries,
        };
        w.write_all(MAGIC)?;
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (_, t) in &self.params {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.pop() != Some(b'\n') {
            return Err(Error::Format("unterminated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&line)?;
        let mut params = Vec::with_capacity(header.params.len());
        let mut expected_offset = 0u64;
        for e in header.params {
            if e.offset != expected_offset {
                return Err(Error::Format(format!("parameter {} at offset {}, expected {expected_offset}", e.name, e.offset)));
            }
            let numel: usize = e.shape.iter().product();
            let mut buf = vec![0u8; numel * 8];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            expected_offset += 8 * numel as u64;
            params.push((e.name, Tensor::new(e.shape, data)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint data", rest.len())));
        }
        Ok(Self {
            architecture: header.architecture,
            params,
            step: header.step,
            task_index: header.task_index,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>(), 1..40), seed in any::<u64>()) {
            let n = vals.len();
            let ck = Checkpoint {
                architecture: serde_json::json!({"arch": "test"}),
                params: vec![
                    ("a".into(), Tensor::new(vec![n], vals.clone()).unwrap()),
                    ("b.c".into(), Tensor::new(vec![1, n], vals.iter().rev().copied().collect()).unwrap()),
                ],
                step: 3,
                task_index: Some(1),
                seed,
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::read_from(&bytes[..]).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for ((_, x), (_, y)) in ck.params.iter().zip(&back.params) {
                let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Checkpoint::read_from(&b"XXXX{}\n"[..]), Err(Error::Format(_))));
        let ck = Checkpoint {
            architecture: serde_json::Value::Null,
            params: vec![("w".into(), Tensor::ones(&[3]))],
            step: 0,
            task_index: None,
            seed: 0,
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
        assert!(bytes.starts_with(MAGIC));
    }
}
