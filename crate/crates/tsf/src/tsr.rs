//! Tensor container format "TSR1".
//!
//! Layout: 8-byte magic `TSR1\0\0\0\0`, a 4-byte little-endian unsigned
//! header length, a UTF-8 JSON header `{"dtype":"f32","shape":[...],
//! "order":"C"}`, then the raw little-endian IEEE-754 float32 payload in
//! C order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tsf_core::tensor::Tensor;

use crate::error::{io_err, Result, TsfError};

pub const TSR_MAGIC: [u8; 8] = *b"TSR1\0\0\0\0";

#[derive(Debug, Serialize, Deserialize)]
struct TsrHeader {
    dtype: String,
    shape: Vec<usize>,
    order: String,
}

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let header = serde_json::to_vec(&TsrHeader {
        dtype: "f32".into(),
        shape: t.shape().to_vec(),
        order: "C".into(),
    })
    .expect("header serialization");
    let mut out = Vec::with_capacity(12 + header.len() + t.numel() * 4);
    out.extend_from_slice(&TSR_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 12 || bytes[..8] != TSR_MAGIC {
        return Err(TsfError::Container("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(TsfError::Container("truncated header".into()));
    }
    let header: TsrHeader = serde_json::from_slice(&bytes[12..12 + hlen])?;
    if header.dtype != "f32" {
        return Err(TsfError::Container(format!(
            "unsupported dtype {}",
            header.dtype
        )));
    }
    if header.order != "C" {
        return Err(TsfError::Container(format!(
            "unsupported order {}",
            header.order
        )));
    }
    let numel: usize = header.shape.iter().product();
    let payload = &bytes[12 + hlen..];
    if payload.len() != numel * 4 {
        return Err(TsfError::Container(format!(
            "payload of {} bytes for {} elements",
            payload.len(),
            numel
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(&header.shape, data).map_err(tsf_core::Error::from)?)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let t = Tensor::from_vec(
            &[2, 3],
            vec![0.0f32, -0.0, 1.5, f32::MIN_POSITIVE, -7.25e-3, 3.4e38],
        )
        .unwrap();
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn header_is_exact_json() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![0.0f32; 4]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..8], b"TSR1\0\0\0\0");
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(header, r#"{"dtype":"f32","shape":[1,2,2],"order":"C"}"#);
    }

    #[test]
    fn rejects_corrupt_containers() {
        let t = Tensor::from_vec(&[4], vec![1.0f32; 4]).unwrap();
        let mut bytes = encode_tensor(&t);
        bytes[0] = b'X';
        assert!(decode_tensor(&bytes).is_err());

        let mut truncated = encode_tensor(&t);
        truncated.pop();
        assert!(decode_tensor(&truncated).is_err());
    }
}
