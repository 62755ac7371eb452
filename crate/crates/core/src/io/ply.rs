//! Binary little-endian PLY with one vertex per triangulated track:
//! `double x, double y, double z, int track`.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

const HEADER_END: &[u8] = b"end_header\n";

pub fn ply_bytes(points: &[Option<Vector3<f64>>]) -> Vec<u8> {
    let present: Vec<(usize, &Vector3<f64>)> = points
        .iter()
        .enumerate()
        .filter_map(|(j, p)| p.as_ref().map(|p| (j, p)))
        .collect();
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty int track\nend_header\n",
        present.len()
    );
    let mut out = header.into_bytes();
    for (j, p) in present {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(j as i32).to_le_bytes());
    }
    out
}

pub fn write_ply(path: &Path, points: &[Option<Vector3<f64>>]) -> Result<()> {
    fs::write(path, ply_bytes(points))?;
    Ok(())
}

fn parse_error(message: impl Into<String>) -> Error {
    Error::Parse {
        location: "ply".into(),
        message: message.into(),
    }
}

/// Reads a file written by [`write_ply`], returning `(track, point)` pairs.
pub fn parse_ply(bytes: &[u8]) -> Result<Vec<(usize, Vector3<f64>)>> {
    let end = bytes
        .windows(HEADER_END.len())
        .position(|w| w == HEADER_END)
        .ok_or_else(|| parse_error("missing end_header"))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|_| parse_error("header is not UTF-8"))?;
    if !header.contains("format binary_little_endian 1.0") {
        return Err(parse_error("only binary little-endian PLY is supported"));
    }
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| parse_error("missing vertex count"))?;
    let body = &bytes[end + HEADER_END.len()..];
    const RECORD: usize = 3 * 8 + 4;
    if body.len() != count * RECORD {
        return Err(parse_error(format!(
            "expected {} bytes of vertex data, found {}",
            count * RECORD,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(RECORD)
        .map(|r| {
            let f = |k: usize| f64::from_le_bytes(r[8 * k..8 * k + 8].try_into().unwrap());
            let track = i32::from_le_bytes(r[24..28].try_into().unwrap());
            (track as usize, Vector3::new(f(0), f(1), f(2)))
        })
        .collect())
}

pub fn read_ply(path: &Path) -> Result<Vec<(usize, Vector3<f64>)>> {
    parse_ply(&fs::read(path)?)
}
