//! `.zt` tensor files: one JSON header line `{"dtype", "shape", ...}`
//! followed by raw little-endian values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use zeus_core::Tensor;

use crate::error::{read_file, write_file, Result, ZeusError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
    /// Integers in `[0, 255]`; used for label masks.
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Any further keys, preserved verbatim.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

pub fn encode(t: &Tensor, dtype: Dtype, extra: Map<String, Value>) -> Result<Vec<u8>> {
    let header = Header { dtype, shape: t.shape().to_vec(), extra };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(t.numel() * dtype.width());
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
        Dtype::F32 => t.data().iter().for_each(|&v| out.extend((v as f32).to_le_bytes())),
        Dtype::U8 => {
            for &v in t.data() {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(zeus_core::Error::Input(format!("value {v} is not representable as u8")).into());
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<(Tensor, Header)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ZeusError::format(origin, "missing header line"))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| ZeusError::format(origin, format!("header: {e}")))?;
    let body = &bytes[nl + 1..];
    let n: usize = header.shape.iter().product();
    if body.len() != n * header.dtype.width() {
        return Err(ZeusError::format(
            origin,
            format!("expected {} payload bytes for {:?}, found {}", n * header.dtype.width(), header.shape, body.len()),
        ));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Dtype::F32 => body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::U8 => body.iter().map(|&b| b as f64).collect(),
    };
    let t = Tensor::new(&header.shape, data)?;
    Ok((t, header))
}

pub fn write(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    write_file(path, &encode(t, dtype, Map::new())?)
}

pub fn write_with(path: &Path, t: &Tensor, dtype: Dtype, extra: Map<String, Value>) -> Result<()> {
    write_file(path, &encode(t, dtype, extra)?)
}

pub fn read(path: &Path) -> Result<Tensor> {
    Ok(read_with_header(path)?.0)
}

pub fn read_with_header(path: &Path) -> Result<(Tensor, Header)> {
    decode(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_each_dtype() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5);
        let (back, h) = decode(&encode(&t, Dtype::F64, Map::new()).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, t);
        assert_eq!(h.shape, vec![2, 3]);
        let (back, _) = decode(&encode(&t, Dtype::F32, Map::new()).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, t);
        let m = Tensor::from_fn(&[4], |i| (i % 2) as f64);
        let (back, _) = decode(&encode(&m, Dtype::U8, Map::new()).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, m);
        assert!(encode(&t, Dtype::U8, Map::new()).is_err());
    }

    #[test]
    fn header_is_first_line_and_payload_is_le() {
        let t = Tensor::new(&[1], vec![1.0]).unwrap();
        let bytes = encode(&t, Dtype::F64, Map::new()).unwrap();
        let text = std::str::from_utf8(&bytes[..bytes.len() - 8]).unwrap();
        assert_eq!(text, "{\"dtype\":\"f64\",\"shape\":[1]}\n");
        assert_eq!(&bytes[bytes.len() - 8..], &1.0f64.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::zeros(&[3]);
        let bytes = encode(&t, Dtype::F32, Map::new()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1], Path::new("x")), Err(ZeusError::Format { .. })));
    }

    #[test]
    fn extra_keys_survive() {
        let mut extra = Map::new();
        extra.insert("epoch".into(), Value::from(7));
        let bytes = encode(&Tensor::zeros(&[2]), Dtype::F64, extra).unwrap();
        let (_, h) = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(h.extra["epoch"], 7);
    }
}
