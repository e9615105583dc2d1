//! Binary keypoint sequence files.
//!
//! Layout: `b"SGSQ1"`, then little-endian `u32` frames, `u32` joints,
//! `u32` coords, `f32` frame rate, then `frames*joints*coords` `f32`
//! coordinates, frame-major and joint-minor. Coordinates are stored in
//! single precision, so values are rounded to `f32` on write.

use std::path::Path;

use crate::error::{io_err, Result, SignError};
use crate::sign::SignSequence;

pub const SEQ_MAGIC: &[u8; 5] = b"SGSQ1";
const HEADER_LEN: usize = 5 + 4 * 4;
/// Upper bound on values per file; guards against absurd headers.
const MAX_VALUES: u64 = 1 << 28;

pub fn encode_sequence(s: &SignSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * s.data().len());
    out.extend_from_slice(SEQ_MAGIC);
    for v in [s.frames(), s.joints(), s.coords()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&s.frame_rate.to_le_bytes());
    for &v in s.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> SignError {
    SignError::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_err(bytes.len(), "truncated header"))
}

pub fn decode_sequence(bytes: &[u8]) -> Result<SignSequence> {
    if bytes.len() < SEQ_MAGIC.len() || &bytes[..5] != SEQ_MAGIC {
        return Err(format_err(0, "missing SGSQ1 magic"));
    }
    let frames = read_u32(bytes, 5)?;
    let joints = read_u32(bytes, 9)?;
    let coords = read_u32(bytes, 13)?;
    let rate = f32::from_le_bytes(
        bytes
            .get(17..21)
            .ok_or_else(|| format_err(bytes.len(), "truncated header"))?
            .try_into()
            .expect("4 bytes"),
    );
    if frames == 0 {
        return Err(format_err(5, "sequence has zero frames"));
    }
    if joints == 0 || coords == 0 {
        return Err(format_err(9, "zero joints or coordinates"));
    }
    let n = (frames as u64)
        .checked_mul(joints as u64)
        .and_then(|x| x.checked_mul(coords as u64))
        .unwrap_or(u64::MAX);
    if n > MAX_VALUES {
        return Err(format_err(5, format!("{n} coordinates exceed the format limit")));
    }
    let n = n as usize;
    let need = HEADER_LEN + 4 * n;
    if bytes.len() < need {
        return Err(format_err(bytes.len(), format!("truncated payload, expected {need} bytes")));
    }
    if bytes.len() > need {
        return Err(format_err(need, "trailing bytes after payload"));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    SignSequence::new(frames as usize, joints as usize, coords as usize, rate, data)
        .map_err(|e| format_err(HEADER_LEN, e.to_string()))
}

pub fn write_sequence(s: &SignSequence, path: &Path) -> Result<()> {
    std::fs::write(path, encode_sequence(s)).map_err(io_err(path))
}

pub fn read_sequence(path: &Path) -> Result<SignSequence> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_sequence(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SignSequence {
        let data = (0..24).map(|i| (i as f32 * 0.37 - 3.0) as f64).collect();
        SignSequence::new(3, 4, 2, 25.0, data).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_sequence(&sample());
        assert_eq!(&bytes[..5], b"SGSQ1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[17..21].try_into().unwrap()), 25.0);
        assert_eq!(bytes.len(), 21 + 24 * 4);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode_sequence(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode_sequence(&bytes), Err(SignError::Format { offset: 0, .. })));

        let bytes = encode_sequence(&sample());
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_sequence(cut), Err(SignError::Format { .. })));

        let mut zero = encode_sequence(&sample());
        zero[5..9].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_sequence(&zero), Err(SignError::Format { offset: 5, .. })));

        let mut huge = encode_sequence(&sample());
        huge[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[9..13].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_sequence(&huge), Err(SignError::Format { .. })));
    }
}
