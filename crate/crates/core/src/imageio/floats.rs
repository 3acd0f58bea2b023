use std::path::Path;

use super::{read_file, write_file, FloatMap};
use crate::error::{Error, Result};
use crate::flow::FlowField;

const FLO_MAGIC: &[u8; 4] = b"PIEH";
const LMEF_MAGIC: &[u8; 4] = b"LMEF";

/// Parse `magic | i32 width | i32 height | f32 payload` with
/// `channels` floats per pixel.
fn decode_grid(bytes: &[u8], magic: &[u8; 4], channels: usize) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::Format(format!(
            "expected magic {:?}, found {found:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes.len() < 12 {
        return Err(Error::Length {
            expected: 8,
            found: bytes.len() - 4,
        });
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let height = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if width <= 0 || height <= 0 {
        return Err(Error::Format(format!("invalid dimensions {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels * 4))
        .ok_or_else(|| Error::Format(format!("dimensions {width}x{height} overflow")))?;
    let found = bytes.len() - 12;
    if expected != found {
        return Err(Error::Length { expected, found });
    }
    let values: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite payload value {v}")));
    }
    Ok((width, height, values))
}

fn encode_grid(magic: &[u8; 4], width: usize, height: usize, values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + width * height * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(width as i32).to_le_bytes());
    out.extend_from_slice(&(height as i32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Middlebury `.flo`: `PIEH`, width, height, interleaved `(u, v)` float32.
pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let (width, height, values) = decode_grid(bytes, FLO_MAGIC, 2)?;
    let vectors = values.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    Ok(FlowField {
        width,
        height,
        vectors,
    })
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    encode_grid(
        FLO_MAGIC,
        flow.width,
        flow.height,
        flow.vectors.iter().flat_map(|v| v.iter().copied()),
    )
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&read_file(path.as_ref())?)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_flo(flow))
}

pub fn decode_floatmap(bytes: &[u8]) -> Result<FloatMap> {
    let (width, height, data) = decode_grid(bytes, LMEF_MAGIC, 1)?;
    Ok(FloatMap {
        width,
        height,
        data,
    })
}

/// `LMEF` float map. Fails on non-finite values.
pub fn encode_floatmap(map: &FloatMap) -> Result<Vec<u8>> {
    map.validate_finite()?;
    Ok(encode_grid(
        LMEF_MAGIC,
        map.width,
        map.height,
        map.data.iter().copied(),
    ))
}

pub fn read_floatmap(path: impl AsRef<Path>) -> Result<FloatMap> {
    decode_floatmap(&read_file(path.as_ref())?)
}

pub fn write_floatmap(map: &FloatMap, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_floatmap(map)?)
}
