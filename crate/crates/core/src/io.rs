//! File formats: the `FTNS` binary tensor format and 8-bit binary PGM images.
//!
//! FTNS layout: magic `b"FTNS"`, version byte `0x01`, rank byte, `rank`
//! little-endian `u32` extents, then the payload as little-endian `f32`
//! values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FTNS_MAGIC: [u8; 4] = *b"FTNS";
pub const FTNS_VERSION: u8 = 1;

pub fn encode_ftns(t: &Tensor) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Contract(format!("rank {} too large", t.rank())));
    }
    let mut buf = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    buf.extend_from_slice(&FTNS_MAGIC);
    buf.push(FTNS_VERSION);
    buf.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Contract(format!("extent {d} does not fit in u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_ftns(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |message: &str| Error::Format {
        path: origin.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 6 || bytes[..4] != FTNS_MAGIC {
        return Err(bad("missing FTNS magic"));
    }
    if bytes[4] != FTNS_VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = shape.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(bad(&format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            4 * count
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_ftns(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ftns(t)?)?;
    Ok(())
}

pub fn read_ftns(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_ftns(&bytes, path)
}

/// Min-max normalizes `values` to 0..=255. Returns the bytes and the
/// `(min, max)` used; a constant image maps to 0.
pub fn normalize_to_u8(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let bytes = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    (bytes, lo, hi)
}

/// Writes a binary (`P5`) PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Contract(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Values in `[0, 1]` scaled to 0..=255 without renormalization.
pub fn unit_to_u8(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Reads a binary PGM written by [`write_pgm`]; returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("only 8-bit P5 PGM is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = &bytes[pos + 1..];
    if body.len() != w * h {
        return Err(bad("PGM payload size mismatch"));
    }
    Ok((w, h, body.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ftns_header_bytes() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode_ftns(&t).unwrap();
        assert_eq!(&b[..6], &[0x46, 0x54, 0x4E, 0x53, 0x01, 0x02]);
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(&b[18..22], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn ftns_rejects_garbage() {
        let p = Path::new("x");
        assert!(decode_ftns(b"NOPE\x01\x00", p).is_err());
        assert!(decode_ftns(b"FTNS\x02\x00", p).is_err());
        assert!(decode_ftns(b"FTNS\x01\x01\x02\x00\x00\x00\x00\x00", p).is_err());
    }

    proptest! {
        #[test]
        fn ftns_round_trips_f32_values(
            shape in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| ((seed.wrapping_mul(i as u64 + 1) % 2001) as f32 / 100.0 - 10.0) as f64)
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode_ftns(&encode_ftns(&t).unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 3, 2, &[0, 1, 2, 3, 4, 255]).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (3, 2, vec![0, 1, 2, 3, 4, 255]));
        let (bytes, lo, hi) = normalize_to_u8(&[-1.0, 0.0, 1.0]);
        assert_eq!((bytes, lo, hi), (vec![0, 128, 255], -1.0, 1.0));
    }
}
