//! `PDCK` checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "PDCK" | version u32 | config hash [32] | contract_len u32 | contract utf-8
//!        | step u64 | tensor_count u32 | tensor × tensor_count | crc32 u32
//! tensor = name_len u32 | name utf-8 | ndims u32 | dim u32 × ndims | f32 × ∏dims
//! ```
//!
//! Each parameter `p` is stored as three tensors: `param/p`, `adam_m/p` and
//! `adam_v/p`. The CRC covers every byte before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::{Moments, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Contract string for segmenter checkpoints (single-channel image in,
/// one logit out).
pub const SEGMENTER_CONTRACT: &str = "image->logit";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub contract: String,
    pub params: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(out, name);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    out.extend_from_slice(&ck.config_hash);
    put_str(&mut out, &ck.contract);
    out.extend_from_slice(&ck.params.step().to_le_bytes());
    put_u32(&mut out, 3 * ck.params.len() as u32);
    for (name, p) in ck.params.iter() {
        let m = ck.params.moments(name).expect("moments exist for every entry");
        put_tensor(&mut out, &format!("param/{name}"), p);
        put_tensor(&mut out, &format!("adam_m/{name}"), &m.first);
        put_tensor(&mut out, &format!("adam_v/{name}"), &m.second);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::MalformedHeader {
            path: self.path.to_path_buf(),
            detail: format!("{what} runs past the end of the {} byte body", self.bytes.len()),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::MalformedHeader {
            path: self.path.to_path_buf(),
            detail: format!("{what} is not utf-8"),
        })
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string("tensor name")?;
        let ndims = self.u32("tensor rank")? as usize;
        if ndims == 0 || ndims > 8 {
            return Err(Error::MalformedHeader {
                path: self.path.to_path_buf(),
                detail: format!("tensor {name:?} has rank {ndims}"),
            });
        }
        let shape = (0..ndims).map(|_| self.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::MalformedHeader {
            path: self.path.to_path_buf(),
            detail: format!("tensor {name:?} shape overflows"),
        })?;
        let raw = self.take(n.saturating_mul(4), &format!("tensor {name:?} payload"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "PDCK checkpoint" });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated { path: path.to_path_buf(), expected: 12, found: bytes.len() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), version });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::Checksum { path: path.to_path_buf() });
    }
    let mut r = Reader { bytes: body, pos: 8, path };
    let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
    let contract = r.string("contract")?;
    let step = u64::from_le_bytes(r.take(8, "step")?.try_into().expect("8 bytes"));
    let count = r.u32("tensor count")? as usize;
    let mut params = BTreeMap::new();
    let mut firsts = BTreeMap::new();
    let mut seconds = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        let (slot, key) = match name.split_once('/') {
            Some(("param", k)) => (&mut params, k),
            Some(("adam_m", k)) => (&mut firsts, k),
            Some(("adam_v", k)) => (&mut seconds, k),
            _ => {
                return Err(Error::MalformedHeader {
                    path: path.to_path_buf(),
                    detail: format!("unknown tensor {name:?}"),
                })
            }
        };
        if slot.insert(key.to_string(), t).is_some() {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                detail: format!("duplicate tensor {name:?}"),
            });
        }
    }
    if r.pos != body.len() {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            detail: format!("{} unread bytes after the last tensor", body.len() - r.pos),
        });
    }
    let mut moments = BTreeMap::new();
    for name in params.keys() {
        match (firsts.remove(name), seconds.remove(name)) {
            (Some(first), Some(second)) => {
                moments.insert(name.clone(), Moments { first, second });
            }
            _ => {
                return Err(Error::MalformedHeader {
                    path: path.to_path_buf(),
                    detail: format!("optimizer state missing for {name:?}"),
                })
            }
        }
    }
    let params = ParamStore::from_parts(params, moments, step)?;
    Ok(Checkpoint { config_hash, contract, params })
}

/// Write via a temporary sibling and rename, so an interrupted write never
/// replaces a good checkpoint with a partial one.
pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, encode_checkpoint(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Load and check the channel-order contract.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_contract: &str) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode_checkpoint(&bytes, path)?;
    if ck.contract != expected_contract {
        return Err(Error::ContractMismatch { expected: expected_contract.into(), found: ck.contract });
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Gradients;
    use crate::patching::CHANNEL_CONTRACT;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-30, -7.25]).unwrap()).unwrap();
        s.insert("b", Tensor::new(vec![1], vec![0.5]).unwrap()).unwrap();
        let mut g = Gradients::default();
        g.insert("a.w", Tensor::full(&[2, 3], 0.1));
        s.adam_step(&g, &Default::default()).unwrap();
        s
    }

    fn ck() -> Checkpoint {
        Checkpoint { config_hash: [7; 32], contract: CHANNEL_CONTRACT.into(), params: store() }
    }

    #[test]
    fn round_trip_keeps_tensors_moments_and_step() {
        let c = ck();
        let back = decode_checkpoint(&encode_checkpoint(&c), Path::new("x")).unwrap();
        assert_eq!(back.config_hash, c.config_hash);
        assert_eq!(back.params.step(), 1);
        for (name, t) in c.params.iter() {
            assert_eq!(back.params.get(name), Some(t));
            assert_eq!(back.params.moments(name), c.params.moments(name));
        }
    }

    #[test]
    fn flipped_contract_byte_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pdck");
        let mut c = ck();
        c.contract = CHANNEL_CONTRACT.replace("mask", "masq");
        save_checkpoint(&c, &p).unwrap();
        assert!(matches!(load_checkpoint(&p, CHANNEL_CONTRACT), Err(Error::ContractMismatch { .. })));
        // A flipped byte without a matching CRC is caught as corruption.
        let mut bytes = encode_checkpoint(&ck());
        let at = 4 + 4 + 32 + 4;
        bytes[at] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes, Path::new("x")), Err(Error::Checksum { .. })));
    }

    #[test]
    fn truncation_and_corruption_are_errors() {
        let bytes = encode_checkpoint(&ck());
        for cut in [3, 10, 50, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut], Path::new("x")).is_err(), "cut {cut}");
        }
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode_checkpoint(&v, Path::new("x")), Err(Error::Version { .. })));
        let mut v = bytes;
        v[0] = b'Q';
        assert!(matches!(decode_checkpoint(&v, Path::new("x")), Err(Error::BadMagic { .. })));
    }
}
