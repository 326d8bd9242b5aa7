//! Little-endian binary checkpoint:
//! `"EUNC" | version u32 | count u32 | { name_len u32 | name | rank u32 | dims u32.. | f64.. }*`.

use std::path::Path;

use super::write_atomic;
use crate::error::{contract, Error, Result};
use crate::models::{Backbone, ModelConfig, ModelGraph};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EUNC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + tensors.iter().map(|(_, t)| t.numel() * 8 + 64).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos..self.pos.saturating_add(n)) {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => self.fail(format!("truncated while reading {what}")),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return r.fail("bad magic; not a checkpoint");
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        r.pos = 4;
        return r.fail(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let start = r.pos;
        let name = match std::str::from_utf8(r.take(len, "name")?) {
            Ok(s) => s.to_owned(),
            Err(_) => {
                r.pos = start;
                return r.fail("name is not UTF-8");
            }
        };
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(numel) = numel.filter(|&n| n > 0 && rank > 0) else {
            return r.fail(format!("tensor {name:?} has invalid dims {dims:?}"));
        };
        let raw = r.take(numel.saturating_mul(8), "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after last tensor");
    }
    Ok(out)
}

pub fn write_tensors(tensors: &[(String, Tensor)], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensors(tensors))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes)
}

pub fn save_checkpoint(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    write_tensors(&model.named_params(), path)
}

/// Rebuilds the architecture from tensor names and shapes, then loads the
/// weights. The init seed is not stored and comes back as `0`.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let tensors = read_tensors(path)?;
    let cfg = infer_config(&tensors)?;
    let mut model = ModelGraph::build(&cfg)?;
    model.load_params(&tensors)?;
    Ok(model)
}

fn node_of(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix('x')?;
    let (node, _) = rest.split_once('.')?;
    let (r, c) = node.split_once('_')?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

fn infer_config(tensors: &[(String, Tensor)]) -> Result<ModelConfig> {
    const OP: &str = "load_checkpoint";
    let find = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let Some(stem) = find("x0_0.conv_a.weight") else {
        return contract(OP, "missing x0_0.conv_a.weight");
    };
    let Some(head) = find("head.weight") else {
        return contract(OP, "missing head.weight");
    };
    let nodes: Vec<(usize, usize)> = tensors.iter().filter_map(|(n, _)| node_of(n)).collect();
    let depth = nodes.iter().filter(|n| n.1 == 0).map(|n| n.0).max().unwrap_or(0);
    let nested = nodes.iter().any(|&(r, c)| c >= 1 && r + c < depth);
    let mhex = tensors
        .iter()
        .find(|(n, _)| n.ends_with(".mhex.conv1"))
        .map(|(_, t)| t.dims()[0]);
    Ok(ModelConfig {
        backbone: if nested { Backbone::UNetPlusPlus } else { Backbone::UNet },
        with_mhex: mhex.is_some(),
        in_channels: stem.dims()[1],
        class_count: head.dims()[0],
        base_width: stem.dims()[0],
        depth,
        mhex_hidden: mhex.unwrap_or(ModelConfig::default().mhex_hidden),
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ForwardOptions;
    use crate::tensor::Tape;

    #[test]
    fn empty_checkpoint_is_header_only() {
        let bytes = encode_tensors(&[]);
        assert_eq!(bytes.len(), 4 + 4 + 4);
        assert!(decode_tensors(&bytes).unwrap().is_empty());
    }

    #[test]
    fn layout_is_little_endian() {
        let t = Tensor::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_tensors(&[("ab".into(), t)]);
        let mut expect = b"EUNC".to_vec();
        for v in [1u32, 1, 2] {
            expect.extend(v.to_le_bytes());
        }
        expect.extend(b"ab");
        for v in [1u32, 2] {
            expect.extend(v.to_le_bytes());
        }
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-2.5f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn damaged_inputs_are_refused() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let good = encode_tensors(&[("w".into(), t)]);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_tensors(&bad_magic),
            Err(Error::Parse { offset: 0, .. })
        ));
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            decode_tensors(&bad_version),
            Err(Error::Parse { offset: 4, .. })
        ));
        for cut in [3, 11, 15, good.len() - 1] {
            assert!(decode_tensors(&good[..cut]).is_err(), "cut {cut}");
        }
        let mut trailing = good;
        trailing.push(0);
        assert!(decode_tensors(&trailing).is_err());
    }

    #[test]
    fn corrupted_file_is_left_alone() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        std::fs::write(&p, b"NOPE\x01\0\0\0\0\0\0\0").unwrap();
        assert!(load_checkpoint(&p).is_err());
        assert_eq!(std::fs::read(&p).unwrap(), b"NOPE\x01\0\0\0\0\0\0\0");
    }

    #[test]
    fn round_trip_reproduces_forward_bit_exactly() {
        for backbone in [Backbone::UNet, Backbone::UNetPlusPlus] {
            for with_mhex in [true, false] {
                let cfg = ModelConfig {
                    backbone,
                    with_mhex,
                    depth: 2,
                    base_width: 4,
                    mhex_hidden: 3,
                    class_count: 3,
                    in_channels: 2,
                    seed: 5,
                };
                let model = ModelGraph::build(&cfg).unwrap();
                let dir = tempfile::tempdir().unwrap();
                let p = dir.path().join("m.ckpt");
                save_checkpoint(&model, &p).unwrap();
                let back = load_checkpoint(&p).unwrap();
                let hidden = if with_mhex {
                    3
                } else {
                    ModelConfig::default().mhex_hidden
                };
                assert_eq!(
                    back.config(),
                    &ModelConfig {
                        seed: 0,
                        mhex_hidden: hidden,
                        ..cfg.clone()
                    }
                );
                assert_eq!(back.named_params(), model.named_params());
                let image = Tensor::from_fn(&[1, 2, 8, 8], |i| (i as f64 * 0.37).sin());
                let run = |m: &ModelGraph| {
                    let tape = Tape::new();
                    let x = tape.constant(image.clone());
                    m.forward(&tape, x, ForwardOptions::default())
                        .unwrap()
                        .final_logits
                        .value()
                        .as_ref()
                        .clone()
                };
                assert_eq!(run(&back).data(), run(&model).data());
            }
        }
    }
}
