//! LEB128 variable-length integers as used throughout the Wasm binary format.

use crate::error::{Error, Result};

/// Longest encoding accepted for a 64-bit value.
pub const MAX_LEB128_LEN: usize = 10;

/// Decodes an unsigned LEB128 value starting at `offset`.
///
/// Returns the value and the number of bytes consumed. Non-minimal
/// encodings are accepted, as the Wasm format allows padding.
pub fn decode_uleb128(bytes: &[u8], offset: usize) -> Result<(u64, usize)> {
    let mut value: u64 = 0;
    for i in 0..MAX_LEB128_LEN {
        let byte = *bytes
            .get(offset + i)
            .ok_or(Error::MalformedEncoding { offset })?;
        let low = u64::from(byte & 0x7f);
        let shift = 7 * i as u32;
        if i == MAX_LEB128_LEN - 1 && low > 1 {
            // the tenth byte only has room for bit 63
            return Err(Error::MalformedEncoding { offset });
        }
        value |= low << shift;
        if byte & 0x80 == 0 {
            return Ok((value, i + 1));
        }
    }
    Err(Error::MalformedEncoding { offset })
}

/// Decodes an unsigned LEB128 value that must fit in 32 bits.
pub fn decode_u32(bytes: &[u8], offset: usize) -> Result<(u32, usize)> {
    let (value, len) = decode_uleb128(bytes, offset)?;
    if len > 5 {
        return Err(Error::MalformedEncoding { offset });
    }
    u32::try_from(value)
        .map(|v| (v, len))
        .map_err(|_| Error::MalformedEncoding { offset })
}

/// Decodes a signed LEB128 value of at most `max_len` bytes.
pub fn decode_sleb128(bytes: &[u8], offset: usize, max_len: usize) -> Result<(i64, usize)> {
    let mut value: i64 = 0;
    let mut shift = 0u32;
    for i in 0..max_len.min(MAX_LEB128_LEN) {
        let byte = *bytes
            .get(offset + i)
            .ok_or(Error::MalformedEncoding { offset })?;
        if shift < 64 {
            value |= i64::from(byte & 0x7f) << shift;
        }
        shift += 7;
        if byte & 0x80 == 0 {
            if shift < 64 && byte & 0x40 != 0 {
                value |= -1i64 << shift;
            }
            return Ok((value, i + 1));
        }
    }
    Err(Error::MalformedEncoding { offset })
}

/// Canonical (shortest) unsigned encoding.
pub fn encode_uleb128(value: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAX_LEB128_LEN);
    write_uleb128(&mut out, value);
    out
}

pub fn write_uleb128(out: &mut Vec<u8>, mut value: u64) {
    loop {
        let byte = (value & 0x7f) as u8;
        value >>= 7;
        if value == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

/// Canonical signed encoding.
pub fn write_sleb128(out: &mut Vec<u8>, mut value: i64) {
    loop {
        let byte = (value & 0x7f) as u8;
        value >>= 7;
        let done = (value == 0 && byte & 0x40 == 0) || (value == -1 && byte & 0x40 != 0);
        if done {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

/// Length of the canonical unsigned encoding of `value`.
pub fn uleb128_len(value: u64) -> usize {
    let bits = 64 - value.leading_zeros() as usize;
    bits.div_ceil(7).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bit-packing straight from the definition: 7-bit groups, little end
    /// first, continuation bit on every group but the last.
    fn oracle_encode(value: u64) -> Vec<u8> {
        let bits: Vec<u8> = (0..64).map(|i| ((value >> i) & 1) as u8).collect();
        let used = bits.iter().rposition(|&b| b == 1).map_or(1, |p| p + 1);
        let groups = used.div_ceil(7);
        (0..groups)
            .map(|g| {
                let mut byte = 0u8;
                for b in 0..7 {
                    if let Some(&bit) = bits.get(g * 7 + b) {
                        byte |= bit << b;
                    }
                }
                if g + 1 < groups {
                    byte |= 0x80;
                }
                byte
            })
            .collect()
    }

    #[test]
    fn zero_is_single_byte() {
        assert_eq!(encode_uleb128(0), vec![0x00]);
    }

    #[test]
    fn known_vector() {
        assert_eq!(oracle_encode(624_485), vec![0xE5, 0x8E, 0x26]);
        assert_eq!(encode_uleb128(624_485), vec![0xE5, 0x8E, 0x26]);
    }

    #[test]
    fn non_minimal_decode() {
        assert_eq!(decode_uleb128(&[0x80, 0x01], 0).unwrap(), (128, 2));
        assert_eq!(decode_uleb128(&[0x80, 0x80, 0x00], 0).unwrap(), (0, 3));
    }

    #[test]
    fn unterminated_and_overlong() {
        assert!(matches!(
            decode_uleb128(&[0x80, 0x80], 0),
            Err(Error::MalformedEncoding { offset: 0 })
        ));
        assert!(decode_uleb128(&[0xff; 11], 0).is_err());
        // 11 bytes with a terminator only at the end is still too long
        let mut long = vec![0x80; 10];
        long.push(0x00);
        assert!(decode_uleb128(&long, 0).is_err());
        assert_eq!(
            decode_uleb128(&encode_uleb128(u64::MAX), 0).unwrap(),
            (u64::MAX, 10)
        );
    }

    #[test]
    fn offset_is_honoured() {
        assert_eq!(decode_uleb128(&[0xaa, 0xE5, 0x8E, 0x26], 1).unwrap(), (624_485, 3));
        assert!(decode_uleb128(&[0x01], 1).is_err());
    }

    #[test]
    fn u32_rejects_wide_values() {
        assert!(decode_u32(&encode_uleb128(1 << 32), 0).is_err());
        assert_eq!(decode_u32(&[0xff, 0xff, 0xff, 0xff, 0x0f], 0).unwrap(), (u32::MAX, 5));
    }

    #[test]
    fn signed_values() {
        let mut out = Vec::new();
        write_sleb128(&mut out, -1);
        assert_eq!(out, vec![0x7f]);
        out.clear();
        write_sleb128(&mut out, 64);
        assert_eq!(out, vec![0xc0, 0x00]);
        assert_eq!(decode_sleb128(&[0xc0, 0x00], 0, 5).unwrap(), (64, 2));
        assert_eq!(decode_sleb128(&[0x40], 0, 5).unwrap(), (-64, 1));
    }

    proptest! {
        #[test]
        fn encode_matches_oracle_and_roundtrips(v in any::<u64>()) {
            let enc = encode_uleb128(v);
            prop_assert_eq!(&enc, &oracle_encode(v));
            prop_assert_eq!(enc.len(), uleb128_len(v));
            prop_assert_eq!(decode_uleb128(&enc, 0).unwrap(), (v, enc.len()));
        }

        #[test]
        fn signed_roundtrip(v in any::<i64>()) {
            let mut enc = Vec::new();
            write_sleb128(&mut enc, v);
            prop_assert_eq!(decode_sleb128(&enc, 0, 10).unwrap(), (v, enc.len()));
        }
    }
}
