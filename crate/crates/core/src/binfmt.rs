//! Little-endian f64 vector files used for checkpoints and centroid dumps.
//!
//! Layout: 16-byte header followed by `length` little-endian `f64` values.
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 4    | magic `b"PFCK"`           |
//! | 4      | 4    | tag (`u32` LE)            |
//! | 8      | 8    | value count (`u64` LE)    |

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PFCK";
pub const HEADER_LEN: usize = 16;

pub fn write_values<W: Write>(mut w: W, tag: u32, values: &[f64]) -> Result<()> {
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(&MAGIC);
    header[4..8].copy_from_slice(&tag.to_le_bytes());
    header[8..].copy_from_slice(&(values.len() as u64).to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_values<R: Read>(mut r: R) -> Result<(u32, Vec<f64>)> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if header[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let tag = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let len = u64::from_le_bytes(header[8..].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != len * 8 {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            len * 8,
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((tag, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_values(&mut buf, 7, &[1.0, -2.5]).unwrap();
        assert_eq!(buf.len(), 16 + 16);
        assert_eq!(&buf[..4], b"PFCK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(matches!(read_values(&b"PF"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_values(&mut buf, 1, &[1.0]).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_values(&buf[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_values(&mut buf, 1, &[1.0, 2.0]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_values(&buf[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(tag in any::<u32>(), values in proptest::collection::vec(any::<f64>(), 0..64)) {
            let mut buf = Vec::new();
            write_values(&mut buf, tag, &values).unwrap();
            let (t, back) = read_values(&buf[..]).unwrap();
            prop_assert_eq!(t, tag);
            prop_assert_eq!(back.len(), values.len());
            for (a, b) in back.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
