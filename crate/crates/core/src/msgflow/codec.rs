//! Canonical length-prefixed binary codec for payloads.
//!
//! Layout, all little-endian: u32 entry count, then per entry a u16 name
//! length, the UTF-8 name bytes, one tag byte (0 scalar, 1 array, 2 nested
//! entries), and the value. Scalars are 64-bit float bits; arrays carry a
//! u32 element count. Field order is declaration order, so structurally
//! equal payloads encode to identical bytes and round-trip bit-exactly.

use thiserror::Error;

use super::{Payload, Value};

const TAG_SCALAR: u8 = 0;
const TAG_ARRAY: u8 = 1;
const TAG_NESTED: u8 = 2;

/// Nesting depth cap; decoding refuses deeper input rather than recursing.
const MAX_DEPTH: usize = 64;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at byte {offset} while reading {what}")]
    UnexpectedEof { offset: usize, what: &'static str },
    #[error("invalid value tag {tag} at byte {offset}")]
    InvalidTag { offset: usize, tag: u8 },
    #[error("entry name at byte {offset} is not valid utf-8")]
    InvalidName { offset: usize },
    #[error("empty entry name at byte {offset}")]
    EmptyName { offset: usize },
    #[error("duplicate entry name `{name}` at byte {offset}")]
    DuplicateName { offset: usize, name: String },
    #[error("nesting deeper than {MAX_DEPTH} levels at byte {offset}")]
    TooDeep { offset: usize },
    #[error("{remaining} trailing byte(s) at byte {offset}")]
    TrailingBytes { offset: usize, remaining: usize },
}

/// Encode a payload to its canonical byte form.
pub fn encode_message(payload: &Payload) -> Vec<u8> {
    let mut out = Vec::new();
    encode_payload(payload, &mut out);
    out
}

fn encode_payload(payload: &Payload, out: &mut Vec<u8>) {
    out.extend_from_slice(&(payload.entries().len() as u32).to_le_bytes());
    for (name, value) in payload.entries() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        match value {
            Value::Scalar(x) => {
                out.push(TAG_SCALAR);
                out.extend_from_slice(&x.to_bits().to_le_bytes());
            }
            Value::Array(xs) => {
                out.push(TAG_ARRAY);
                out.extend_from_slice(&(xs.len() as u32).to_le_bytes());
                for x in xs {
                    out.extend_from_slice(&x.to_bits().to_le_bytes());
                }
            }
            Value::Entries(nested) => {
                out.push(TAG_NESTED);
                encode_payload(nested, out);
            }
        }
    }
}

/// Decode a canonical byte form back into a payload.
///
/// Errors carry the byte offset at which decoding failed; for truncated
/// input that is the truncation point.
pub fn decode_message(bytes: &[u8]) -> Result<Payload, DecodeError> {
    let mut reader = Reader { buf: bytes, pos: 0 };
    let payload = decode_payload(&mut reader, 0)?;
    if reader.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes {
            offset: reader.pos,
            remaining: bytes.len() - reader.pos,
        });
    }
    Ok(payload)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError::UnexpectedEof {
                offset: self.buf.len(),
                what,
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, DecodeError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, DecodeError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, DecodeError> {
        let b = self.take(8, what)?;
        let mut bits = [0u8; 8];
        bits.copy_from_slice(b);
        Ok(f64::from_bits(u64::from_le_bytes(bits)))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }
}

fn decode_payload(reader: &mut Reader<'_>, depth: usize) -> Result<Payload, DecodeError> {
    if depth > MAX_DEPTH {
        return Err(DecodeError::TooDeep { offset: reader.pos });
    }
    let count = reader.u32("entry count")?;
    let mut payload = Payload::new();
    for _ in 0..count {
        let name_offset = reader.pos;
        let name_len = reader.u16("name length")? as usize;
        let name_bytes = reader.take(name_len, "entry name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| DecodeError::InvalidName {
                offset: name_offset,
            })?
            .to_string();
        if name.is_empty() {
            return Err(DecodeError::EmptyName {
                offset: name_offset,
            });
        }
        let tag_offset = reader.pos;
        let tag = reader.u8("value tag")?;
        let value = match tag {
            TAG_SCALAR => Value::Scalar(reader.f64("scalar value")?),
            TAG_ARRAY => {
                let len = reader.u32("array length")? as usize;
                let mut xs = Vec::new();
                for _ in 0..len {
                    xs.push(reader.f64("array element")?);
                }
                Value::Array(xs)
            }
            TAG_NESTED => Value::Entries(decode_payload(reader, depth + 1)?),
            other => {
                return Err(DecodeError::InvalidTag {
                    offset: tag_offset,
                    tag: other,
                })
            }
        };
        payload.push(name, value).map_err(|e| match e {
            super::MsgFlowError::DuplicatePayloadName(name) => DecodeError::DuplicateName {
                offset: name_offset,
                name,
            },
            _ => DecodeError::EmptyName {
                offset: name_offset,
            },
        })?;
    }
    Ok(payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_payload() -> Payload {
        let mut inner = Payload::new();
        inner.push("bias", Value::Array(vec![0.25, -0.5])).unwrap();
        inner.push("count", Value::Scalar(3.0)).unwrap();
        let mut p = Payload::new();
        p.push("w", Value::Array(vec![1.0, 2.0])).unwrap();
        p.push("version", Value::Scalar(4.0)).unwrap();
        p.push("groups", Value::Entries(inner)).unwrap();
        p.push("empty", Value::Array(vec![])).unwrap();
        p
    }

    #[test]
    fn round_trip_identity() {
        let p = sample_payload();
        let bytes = encode_message(&p);
        assert_eq!(decode_message(&bytes).unwrap(), p);
    }

    #[test]
    fn round_trip_preserves_float_bits() {
        let mut p = Payload::new();
        let awkward = [
            0.1,
            -0.0_f64,
            f64::MIN_POSITIVE,
            1e-300,
            std::f64::consts::PI,
            -1.5e300,
        ];
        p.push("xs", Value::Array(awkward.to_vec())).unwrap();
        let decoded = decode_message(&encode_message(&p)).unwrap();
        let got = decoded.array("xs").unwrap();
        for (a, b) in awkward.iter().zip(got) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn encoding_is_canonical() {
        // Two independently built but structurally equal payloads.
        let a = sample_payload();
        let b = sample_payload();
        assert_eq!(encode_message(&a), encode_message(&b));
    }

    #[test]
    fn single_entry_example() {
        let mut p = Payload::new();
        p.push("w", Value::Array(vec![1.0, 2.0])).unwrap();
        let bytes = encode_message(&p);
        // count + (name_len + "w" + tag + array_len + 2 floats)
        assert_eq!(bytes.len(), 4 + 2 + 1 + 1 + 4 + 16);
        assert_eq!(decode_message(&bytes).unwrap(), p);
    }

    #[test]
    fn every_truncation_errors_at_the_cut() {
        let bytes = encode_message(&sample_payload());
        for k in 0..bytes.len() {
            match decode_message(&bytes[..k]) {
                Err(DecodeError::UnexpectedEof { offset, .. }) => {
                    assert_eq!(offset, k, "prefix of {k} bytes");
                }
                other => panic!("prefix of {k} bytes: expected eof error, got {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_message(&sample_payload());
        let len = bytes.len();
        bytes.push(0xff);
        assert_eq!(
            decode_message(&bytes),
            Err(DecodeError::TrailingBytes {
                offset: len,
                remaining: 1
            })
        );
    }

    #[test]
    fn invalid_tag_reports_its_offset() {
        let mut p = Payload::new();
        p.push("x", Value::Scalar(1.0)).unwrap();
        let mut bytes = encode_message(&p);
        // Tag byte sits after count(4) + name_len(2) + name(1).
        assert_eq!(bytes[7], TAG_SCALAR);
        bytes[7] = 9;
        assert_eq!(
            decode_message(&bytes),
            Err(DecodeError::InvalidTag { offset: 7, tag: 9 })
        );
    }

    #[test]
    fn duplicate_names_in_input_rejected() {
        let mut p = Payload::new();
        p.push("x", Value::Scalar(1.0)).unwrap();
        p.push("y", Value::Scalar(2.0)).unwrap();
        let mut bytes = encode_message(&p);
        // Rewrite the second name "y" (offset 17: 4+2+1+1+8+2 = 18.. locate dynamically.
        let pos = bytes.iter().rposition(|&b| b == b'y').unwrap();
        bytes[pos] = b'x';
        match decode_message(&bytes) {
            Err(DecodeError::DuplicateName { name, .. }) => assert_eq!(name, "x"),
            other => panic!("expected duplicate-name error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_claimed_array_does_not_allocate() {
        let mut p = Payload::new();
        p.push("x", Value::Array(vec![1.0])).unwrap();
        let mut bytes = encode_message(&p);
        // Array length field follows count(4) + name_len(2) + name(1) + tag(1).
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_message(&bytes),
            Err(DecodeError::UnexpectedEof { .. })
        ));
    }

    #[test]
    fn garbage_never_panics() {
        let seeds = crate::simnet::SeededRng::new(77);
        for case in 0..200u64 {
            let mut rng = seeds.stream("garbage", 0, case);
            let len = rand::Rng::random_range(&mut rng, 0..128);
            let bytes: Vec<u8> = (0..len).map(|_| rand::Rng::random(&mut rng)).collect();
            let _ = decode_message(&bytes);
        }
    }

    #[test]
    fn deep_nesting_rejected() {
        // Hand-assemble a payload nested beyond the depth cap.
        let mut bytes = Vec::new();
        for _ in 0..(MAX_DEPTH + 2) {
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(&1u16.to_le_bytes());
            bytes.push(b'n');
            bytes.push(TAG_NESTED);
        }
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode_message(&bytes),
            Err(DecodeError::TooDeep { .. })
        ));
    }
}
