//! Interchange formats: the JSON track file, camera/report JSON, binary PLY and COLMAP text.
//!
//! Conventions shared by every format: pixel coordinates have their origin at the top-left
//! corner with x to the right and y downward; poses are world-to-camera (`x_cam = R x + t`);
//! quaternions are written `w x y z`; angles are degrees.

pub mod cameras;
pub mod colmap;
pub mod ply;
pub mod tracks;

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1.0";
pub const FORMAT_MAJOR: u32 = 1;

/// Accepts any `1.x` version string; rejects other majors and garbage.
pub fn check_version(found: &str) -> Result<()> {
    let major = found.split('.').next().and_then(|m| m.parse::<u32>().ok());
    match major {
        Some(FORMAT_MAJOR) => Ok(()),
        _ => Err(Error::FormatVersion {
            found: found.to_string(),
            supported: FORMAT_MAJOR,
        }),
    }
}

pub fn default_version() -> String {
    FORMAT_VERSION.to_string()
}

/// Pretty JSON with a trailing newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub(crate) fn json_error(err: serde_json::Error) -> Error {
    Error::Parse {
        location: format!("line {} column {}", err.line(), err.column()),
        message: err.to_string(),
    }
}
