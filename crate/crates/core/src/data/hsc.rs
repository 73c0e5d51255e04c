//! The `HSC1` cube container.
//!
//! Layout: the 8-byte magic `HSC1\0\0\0\0`, one line of UTF-8 JSON
//! `{"height","width","bands","dtype","order"}` terminated by `\n`, then the
//! samples as little-endian `f64` or `f32` in band-major order.

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HyperCube;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HSC1\0\0\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    F64,
    F32,
}

#[derive(Serialize, Deserialize)]
struct Header {
    height: usize,
    width: usize,
    bands: usize,
    dtype: SampleType,
    order: String,
}

const ORDER: &str = "band-major";

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "HSC1",
        detail: detail.into(),
    }
}

pub fn encode(cube: &HyperCube, dtype: SampleType, out: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        height: cube.height(),
        width: cube.width(),
        bands: cube.bands(),
        dtype,
        order: ORDER.to_string(),
    };
    out.write_all(MAGIC)?;
    out.write_all(serde_json::to_string(&header)?.as_bytes())?;
    out.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(cube.data().len() * 8);
    match dtype {
        SampleType::F64 => cube
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        SampleType::F32 => cube
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    out.write_all(&buf)
}

pub fn decode(input: &mut impl BufRead) -> Result<(HyperCube, SampleType)> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| bad("truncated magic"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut line = Vec::new();
    input
        .read_until(b'\n', &mut line)
        .map_err(|e| bad(e.to_string()))?;
    if line.last() != Some(&b'\n') {
        return Err(bad("header line is not terminated"));
    }
    line.pop();
    let header: Header = serde_json::from_slice(&line).map_err(|e| bad(e.to_string()))?;
    if header.order != ORDER {
        return Err(bad(format!("unsupported order {:?}", header.order)));
    }
    let count = header.height * header.width * header.bands;
    let width = match header.dtype {
        SampleType::F64 => 8,
        SampleType::F32 => 4,
    };
    let mut raw = Vec::new();
    input
        .read_to_end(&mut raw)
        .map_err(|e| bad(e.to_string()))?;
    if raw.len() != count * width {
        return Err(bad(format!(
            "expected {} payload bytes, found {}",
            count * width,
            raw.len()
        )));
    }
    let data = match header.dtype {
        SampleType::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        SampleType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((
        HyperCube::new(header.height, header.width, header.bands, data)?,
        header.dtype,
    ))
}

pub fn write_cube(path: impl AsRef<Path>, cube: &HyperCube, dtype: SampleType) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    encode(cube, dtype, &mut bytes).map_err(|e| Error::io(path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<(HyperCube, SampleType)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&mut bytes.as_slice())
}
