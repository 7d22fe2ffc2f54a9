//! Raw tensor files: a 20-byte little-endian header (u32 dtype tag, then
//! N, C, H, W as u32) followed by the elements in NCHW order.

use std::io::{Read, Write};

use crate::tensor::{DType, Shape, Tensor};

use super::CliError;

pub const HEADER_LEN: usize = 20;

fn tag(d: DType) -> u32 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::with_capacity(HEADER_LEN + t.len() * t.dtype().size_of());
    out.extend_from_slice(&tag(t.dtype()).to_le_bytes());
    for d in t.shape().dims() {
        let d = u32::try_from(d)
            .map_err(|_| CliError::Validation(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&t.to_le_bytes());
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, CliError> {
    if bytes.len() < HEADER_LEN {
        return Err(CliError::Validation(format!(
            "raw tensor has {} bytes, shorter than its header",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let dtype = match word(0) {
        0 => DType::F32,
        1 => DType::F64,
        t => {
            return Err(CliError::Validation(format!(
                "unknown dtype tag {t} in raw tensor"
            )))
        }
    };
    let shape = Shape::new(
        word(1) as usize,
        word(2) as usize,
        word(3) as usize,
        word(4) as usize,
    );
    Tensor::from_le_bytes(shape, dtype, &bytes[HEADER_LEN..])
        .map_err(|e| CliError::Validation(format!("raw tensor: {e}")))
}

pub fn read(r: &mut impl Read) -> Result<Tensor, CliError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn write(w: &mut impl Write, t: &Tensor) -> Result<(), CliError> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header() {
        let t = Tensor::from_f64(
            Shape::new(2, 1, 1, 3),
            DType::F64,
            &[1.0, -2.0, 0.5, 3.0, 4.0, -0.0],
        )
        .unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(b.len(), 20 + 48);
        assert_eq!(&b[..8], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert!(decode(&b).unwrap().bit_eq(&t));
        assert!(decode(&b[..10]).is_err());
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = 7;
        assert!(decode(&bad).is_err());
    }
}
