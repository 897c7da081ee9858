//! Binary PGM (P5) images for exported masks.

use std::path::Path;

use zeus_core::Tensor;

use crate::error::{read_file, write_file, Result, ZeusError};

/// Encodes a `[H, W]` mask; values `> 0.5` become 255, the rest 0.
pub fn encode_mask(mask: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = mask.shape() else {
        return Err(zeus_core::Error::Input(format!("mask must be 2-D, got {:?}", mask.shape())).into());
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&v| if v > 0.5 { 255u8 } else { 0 }));
    Ok(out)
}

/// Decodes a P5 image to a `[H, W]` tensor of raw grey levels.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |d: &str| ZeusError::format(origin, d);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok(Tensor::new(&[h, w], body.iter().map(|&b| b as f64).collect())?)
}

pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    write_file(path, &encode_mask(mask)?)
}

pub fn read(path: &Path) -> Result<Tensor> {
    decode(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_roundtrip() {
        let m = Tensor::from_fn(&[3, 5], |i| (i % 3 == 0) as u8 as f64);
        let bytes = encode_mask(&m).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        let back = decode(&bytes, Path::new("m.pgm")).unwrap();
        assert_eq!(back, m.map(|v| v * 255.0));
    }

    #[test]
    fn comments_are_skipped() {
        let bytes = b"P5\n# note\n2 1\n255\n\x00\xff";
        assert_eq!(decode(bytes, Path::new("c")).unwrap().data(), &[0.0, 255.0]);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(decode(b"P2\n1 1\n255\n0", Path::new("x")).is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00", Path::new("x")).is_err());
    }
}
