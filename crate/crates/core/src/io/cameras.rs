//! `cameras.json`: registered cameras of a reconstruction (or ground truth).
//!
//! ```json
//! { "format_version": "1.0", "convention": "world_to_camera", "frame_count": 3,
//!   "cameras": [ { "frame": 0, "q": [w, x, y, z], "t": [x, y, z],
//!                  "log_f": 7.11, "focal": 1228.8, "pp": [512.0, 384.0] } ],
//!   "unregistered": [2] }
//! ```
//!
//! `t` is in scene units, `focal` and `pp` in pixels. `log_f` is authoritative; `focal` is
//! informational.

use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{check_version, default_version, json_error, write_json};
use crate::camera::Camera;
use crate::error::{Error, Result};

pub const CONVENTION: &str = "world_to_camera";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub frame: usize,
    pub q: [f64; 4],
    pub t: [f64; 3],
    pub log_f: f64,
    pub focal: f64,
    pub pp: [f64; 2],
}

impl CameraRecord {
    pub fn from_camera(frame: usize, cam: &Camera) -> Self {
        let t = cam.translation();
        let pp = cam.principal_point();
        Self {
            frame,
            q: cam.quaternion(),
            t: [t.x, t.y, t.z],
            log_f: cam.log_focal(),
            focal: cam.focal(),
            pp: [pp.x, pp.y],
        }
    }

    pub fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            self.q,
            Vector3::from(self.t),
            self.log_f,
            Vector2::from(self.pp),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    #[serde(default = "default_version")]
    pub format_version: String,
    pub convention: String,
    pub frame_count: usize,
    pub cameras: Vec<CameraRecord>,
    #[serde(default)]
    pub unregistered: Vec<usize>,
}

impl CamerasFile {
    pub fn from_cameras(cameras: &[Option<Camera>]) -> Self {
        Self {
            format_version: default_version(),
            convention: CONVENTION.to_string(),
            frame_count: cameras.len(),
            cameras: cameras
                .iter()
                .enumerate()
                .filter_map(|(i, c)| c.as_ref().map(|c| CameraRecord::from_camera(i, c)))
                .collect(),
            unregistered: cameras
                .iter()
                .enumerate()
                .filter(|(_, c)| c.is_none())
                .map(|(i, _)| i)
                .collect(),
        }
    }

    pub fn to_cameras(&self) -> Result<Vec<Option<Camera>>> {
        check_version(&self.format_version)?;
        if self.convention != CONVENTION {
            return Err(Error::Parse {
                location: "convention".into(),
                message: format!("unsupported pose convention {:?}", self.convention),
            });
        }
        let mut out = vec![None; self.frame_count];
        for rec in &self.cameras {
            let slot = out.get_mut(rec.frame).ok_or_else(|| {
                Error::Referential(format!(
                    "camera for frame {} but frame_count is {}",
                    rec.frame, self.frame_count
                ))
            })?;
            if slot.is_some() {
                return Err(Error::Referential(format!(
                    "duplicate camera for frame {}",
                    rec.frame
                )));
            }
            *slot = Some(rec.to_camera()?);
        }
        Ok(out)
    }
}

pub fn save_cameras(path: &Path, cameras: &[Option<Camera>]) -> Result<()> {
    write_json(path, &CamerasFile::from_cameras(cameras))
}

pub fn load_cameras(path: &Path) -> Result<Vec<Option<Camera>>> {
    let text = fs::read_to_string(path)?;
    let file: CamerasFile = serde_json::from_str(&text).map_err(json_error)?;
    file.to_cameras()
}
