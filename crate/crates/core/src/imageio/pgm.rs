use std::path::Path;

use super::{read_file, write_file, BinaryMask, GrayImage};
use crate::error::{Error, Result};

struct Header {
    width: usize,
    height: usize,
    payload_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Format(format!("expected PGM magic \"P5\", found {magic:?}")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and '#' comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("PGM header ends early".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(Error::Format(format!("bad PGM header field at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .expect("at most nine digits");
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("PGM header not terminated by whitespace".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval must be 255, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("PGM dimensions {width}x{height} are empty")));
    }
    Ok(Header {
        width,
        height,
        payload_start: pos,
    })
}

fn payload(bytes: &[u8], header: &Header) -> Result<Vec<u8>> {
    let expected = header
        .width
        .checked_mul(header.height)
        .ok_or_else(|| Error::Format("PGM dimensions overflow".into()))?;
    let found = bytes.len() - header.payload_start;
    if found != expected {
        return Err(Error::Length { expected, found });
    }
    Ok(bytes[header.payload_start..].to_vec())
}

fn encode_bytes(width: usize, height: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Decode a binary (P5) 8-bit PGM into `[0, 1]` luminance.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let header = parse_header(bytes)?;
    let raw = payload(bytes, &header)?;
    Ok(GrayImage {
        width: header.width,
        height: header.height,
        data: raw.into_iter().map(|b| b as f32 / 255.0).collect(),
    })
}

/// Quantize to bytes with `round(v * 255)` (half away from zero).
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    encode_bytes(
        img.width,
        img.height,
        img.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    )
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&read_file(path.as_ref())?)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_pgm(img))
}

/// Masks are PGMs holding only 0 (real) and 255 (virtual).
pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let header = parse_header(bytes)?;
    let raw = payload(bytes, &header)?;
    let data = raw
        .into_iter()
        .map(|b| match b {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(Error::Validation(format!(
                "mask byte {other} is neither 0 nor 255"
            ))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(BinaryMask {
        width: header.width,
        height: header.height,
        data,
    })
}

pub fn encode_mask(mask: &BinaryMask) -> Vec<u8> {
    encode_bytes(
        mask.width,
        mask.height,
        mask.data.iter().map(|&v| if v == 0 { 0 } else { 255 }),
    )
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    decode_mask(&read_file(path.as_ref())?)
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_scaled_values() {
        let bytes = encode_bytes(2, 2, [0u8, 255, 128, 64].into_iter());
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(encode_pgm(&img), bytes);
    }

    #[test]
    fn saturation_and_rounding() {
        let ones = GrayImage::filled(3, 2, 1.0);
        assert!(encode_pgm(&ones).ends_with(&[255; 6]));
        let zeros = GrayImage::filled(3, 2, 0.0);
        assert!(encode_pgm(&zeros).ends_with(&[0; 6]));
        let half = GrayImage::filled(1, 1, 0.5);
        assert_eq!(*encode_pgm(&half).last().unwrap(), 128);
    }

    #[test]
    fn every_byte_survives_the_round_trip() {
        let bytes = encode_bytes(256, 1, 0..=255u8);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!(encode_pgm(&img), bytes);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5 # made by hand\n1 1\n255\n".to_vec();
        bytes.push(51);
        assert_eq!(decode_pgm(&bytes).unwrap().data, vec![51.0 / 255.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x00\x01"), Err(Error::Length { .. })));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\x00"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n1"), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b""), Err(Error::Format(_))));
    }

    #[test]
    fn masks_only_accept_0_and_255() {
        let m = BinaryMask::new(3, 1, vec![0, 1, 1]).unwrap();
        let bytes = encode_mask(&m);
        assert!(bytes.ends_with(&[0, 255, 255]));
        assert_eq!(decode_mask(&bytes).unwrap(), m);
        let bad = encode_bytes(1, 1, [7u8].into_iter());
        assert!(matches!(decode_mask(&bad), Err(Error::Validation(_))));
    }
}
