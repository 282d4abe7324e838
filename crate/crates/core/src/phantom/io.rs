//! `PDV1` volume files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "PDV1" | version u32 | dims u32 | extent u32 × dims | channels u32 | f32 × (channels · ∏extents)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const VOLUME_MAGIC: &[u8; 4] = b"PDV1";
pub const VOLUME_VERSION: u32 = 1;
const MAX_DIMS: u32 = 8;

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * volume.dims() + 4 * volume.data().len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.extend_from_slice(&(volume.dims() as u32).to_le_bytes());
    for &e in volume.extents() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.extend_from_slice(&(volume.channels() as u32).to_le_bytes());
    for v in volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    let malformed = |detail: String| Error::MalformedHeader { path: path.to_path_buf(), detail };
    if bytes.len() < 4 || &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "PDV1 volume" });
    }
    let mut pos = 4;
    let mut read_u32 = |what: &str| -> Result<u32> {
        let chunk = bytes.get(pos..pos + 4).ok_or_else(|| malformed(format!("header ends before {what}")))?;
        pos += 4;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
    };
    let version = read_u32("version")?;
    if version != VOLUME_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), version });
    }
    let dims = read_u32("dims")?;
    if dims == 0 || dims > MAX_DIMS {
        return Err(malformed(format!("dims {dims} outside 1..={MAX_DIMS}")));
    }
    let extents =
        (0..dims).map(|k| read_u32(&format!("extent {k}")).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
    let channels = read_u32("channels")? as usize;
    if channels == 0 || extents.contains(&0) {
        return Err(malformed(format!("zero-sized shape {channels}x{extents:?}")));
    }
    let count = extents
        .iter()
        .try_fold(channels, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| malformed("shape overflows".into()))?;
    let expected = count * 4;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Truncated { path: path.to_path_buf(), expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(malformed(format!(
            "shape {channels}x{extents:?} declares {expected} payload bytes but file has {}",
            payload.len()
        )));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Volume::new(channels, extents, data)
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_volume(volume)).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

/// Write channel 0 of a 2D volume as an 8-bit binary PGM, mapping `[lo, hi]`
/// to `[0, 255]`.
pub fn save_pgm(volume: &Volume, lo: f32, hi: f32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [h, w] = match volume.extents() {
        &[h, w] => [h, w],
        e => return Err(Error::shape("save_pgm", format!("expected a 2D volume, got {e:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(volume.channel(0).iter().map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        Volume::new(2, vec![3, 4], (0..24).map(|i| i as f32 * 0.37 - 3.0).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/v.pdv");
        let mut v = sample();
        v.data_mut()[5] = f32::from_bits(0x7f7f_ffff);
        v.data_mut()[6] = -0.0;
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
        assert_eq!(back.extents(), v.extents());
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = encode_volume(&sample());
        bytes[0] = b'X';
        let err = decode_volume(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("format"));
    }

    #[test]
    fn shape_payload_mismatch_rejected() {
        let bytes = encode_volume(&sample());
        assert!(matches!(decode_volume(&bytes[..bytes.len() - 4], Path::new("x")), Err(Error::Truncated { .. })));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_volume(&longer, Path::new("x")), Err(Error::MalformedHeader { .. })));
        assert!(matches!(decode_volume(&bytes[..10], Path::new("x")), Err(Error::MalformedHeader { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_volume(&v2, Path::new("x")), Err(Error::Version { .. })));
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_volume(&sample());
        assert_eq!(&bytes[..4], b"PDV1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &4u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &2u32.to_le_bytes());
        assert_eq!(&bytes[24..28], &(-3.0f32).to_le_bytes());
        assert_eq!(bytes.len(), 24 + 24 * 4);
    }
}
