//! COLMAP text model export and import.
//!
//! Every frame becomes its own `SIMPLE_PINHOLE` camera (`f cx cy`) with camera and image id
//! `frame + 1`; point ids are `track + 1`. Poses are world-to-camera, the same convention
//! COLMAP uses, and pixel coordinates share COLMAP's top-left-corner origin, so no
//! conversion happens. Numbers carry at most 12 significant digits with trailing zeros
//! removed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::filtering::{reprojection_error, FilterMask};
use crate::scene::Scene;

/// At most 12 significant digits, no exponent, no trailing zeros, never `-0`.
pub fn format_number(x: f64) -> String {
    let rounded: f64 = format!("{x:.11e}").parse().unwrap_or(x);
    if rounded == 0.0 {
        return "0".into();
    }
    format!("{rounded}")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColmapExport {
    /// Frames left out because they have no camera.
    pub skipped_frames: Vec<usize>,
    pub images: usize,
    pub points: usize,
}

/// Writes `cameras.txt`, `images.txt` and `points3D.txt` for the scene's reconstruction.
/// Observations dropped by `mask` are not listed.
pub fn export_colmap(scene: &Scene, mask: Option<&FilterMask>, dir: &Path) -> Result<ColmapExport> {
    let cameras = scene
        .cameras
        .as_ref()
        .ok_or_else(|| Error::Reconstruction("scene has no cameras to export".into()))?;
    let no_points = vec![None; scene.tracks.len()];
    let points = scene.points.as_ref().unwrap_or(&no_points);
    let kept = |j: usize, k: usize| mask.is_none_or(|m| m.is_kept(j, k));

    // Per image: (xy, point id) in listing order; per point: (image id, index in that list).
    let mut image_points: Vec<Vec<(Vector2<f64>, usize)>> = vec![Vec::new(); cameras.len()];
    let mut tracks: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (j, track) in scene.tracks.iter().enumerate() {
        if points[j].is_none() || mask.is_some_and(|m| !m.track_kept(j)) {
            continue;
        }
        for (k, o) in track.observations.iter().enumerate() {
            if !kept(j, k) || cameras.get(o.frame).copied().flatten().is_none() {
                continue;
            }
            let list = &mut image_points[o.frame];
            tracks.entry(j).or_default().push((o.frame + 1, list.len()));
            list.push((o.xy, j + 1));
        }
    }

    let mut report = ColmapExport::default();
    let mut cams_txt = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let mut images_txt = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    let registered: Vec<(usize, &Camera)> = cameras
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.as_ref().map(|c| (i, c)))
        .collect();
    report.skipped_frames = (0..cameras.len())
        .filter(|i| cameras[*i].is_none())
        .collect();
    report.images = registered.len();
    let _ = writeln!(cams_txt, "# Number of cameras: {}", registered.len());
    let _ = writeln!(images_txt, "# Number of images: {}", registered.len());
    for &(i, cam) in &registered {
        let frame = scene
            .frames
            .get(i)
            .ok_or_else(|| Error::Referential(format!("camera {i} has no frame")))?;
        let pp = cam.principal_point();
        let _ = writeln!(
            cams_txt,
            "{} SIMPLE_PINHOLE {} {} {} {} {}",
            i + 1,
            frame.width,
            frame.height,
            format_number(cam.focal()),
            format_number(pp.x),
            format_number(pp.y)
        );
        let q = cam.quaternion();
        let t = cam.translation();
        let pose: Vec<String> = q
            .iter()
            .chain(t.iter())
            .map(|v| format_number(*v))
            .collect();
        let _ = writeln!(
            images_txt,
            "{} {} {} frame_{:05}",
            i + 1,
            pose.join(" "),
            i + 1,
            frame.id
        );
        let obs: Vec<String> = image_points[i]
            .iter()
            .map(|(xy, id)| format!("{} {} {}", format_number(xy.x), format_number(xy.y), id))
            .collect();
        let _ = writeln!(images_txt, "{}", obs.join(" "));
    }

    let mut points_txt = String::from(
        "# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n",
    );
    let _ = writeln!(points_txt, "# Number of points: {}", tracks.len());
    for (&j, refs) in &tracks {
        let x = points[j].expect("listed tracks have points");
        let errors: Vec<f64> = scene.tracks[j]
            .observations
            .iter()
            .enumerate()
            .filter(|(k, o)| kept(j, *k) && cameras.get(o.frame).copied().flatten().is_some())
            .map(|(_, o)| reprojection_error(cameras[o.frame].as_ref().unwrap(), &x, &o.xy))
            .collect();
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let coords: Vec<String> = x.iter().map(|v| format_number(*v)).collect();
        let refs: Vec<String> = refs
            .iter()
            .map(|(img, idx)| format!("{img} {idx}"))
            .collect();
        let _ = writeln!(
            points_txt,
            "{} {} 128 128 128 {} {}",
            j + 1,
            coords.join(" "),
            format_number(mean),
            refs.join(" ")
        );
    }
    report.points = tracks.len();

    fs::create_dir_all(dir)?;
    fs::write(dir.join("cameras.txt"), cams_txt)?;
    fs::write(dir.join("images.txt"), images_txt)?;
    fs::write(dir.join("points3D.txt"), points_txt)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapCamera {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub principal_point: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: usize,
    pub quaternion: [f64; 4],
    pub translation: Vector3<f64>,
    pub camera_id: usize,
    pub name: String,
    /// `(xy, point id)`; id `None` for COLMAP's `-1`.
    pub points2d: Vec<(Vector2<f64>, Option<usize>)>,
}

impl ColmapImage {
    pub fn camera(&self, intrinsics: &ColmapCamera) -> Result<Camera> {
        Camera::new(
            self.quaternion,
            self.translation,
            intrinsics.focal.ln(),
            intrinsics.principal_point,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapPoint {
    pub id: usize,
    pub xyz: Vector3<f64>,
    pub error: f64,
    /// `(image id, index into that image's points2d)`.
    pub track: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColmapModel {
    pub cameras: BTreeMap<usize, ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#'))
        .map(|(n, l)| (n + 1, l))
}

fn parse_fields<T: std::str::FromStr>(file: &str, line: usize, fields: &[&str]) -> Result<Vec<T>> {
    fields
        .iter()
        .map(|f| {
            f.parse().map_err(|_| Error::Parse {
                location: format!("{file}:{line}"),
                message: format!("cannot parse {f:?}"),
            })
        })
        .collect()
}

fn short(file: &str, line: usize) -> Error {
    Error::Parse {
        location: format!("{file}:{line}"),
        message: "too few fields".into(),
    }
}

/// Reads a text model written by [`export_colmap`] (`SIMPLE_PINHOLE` cameras only).
pub fn import_colmap(dir: &Path) -> Result<ColmapModel> {
    let mut model = ColmapModel::default();
    let cams = fs::read_to_string(dir.join("cameras.txt"))?;
    for (n, line) in data_lines(&cams).filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 7 {
            return Err(short("cameras.txt", n));
        }
        if f[1] != "SIMPLE_PINHOLE" {
            return Err(Error::Parse {
                location: format!("cameras.txt:{n}"),
                message: format!("unsupported camera model {}", f[1]),
            });
        }
        let id: Vec<usize> = parse_fields("cameras.txt", n, &f[..1])?;
        let size: Vec<u32> = parse_fields("cameras.txt", n, &f[2..4])?;
        let p: Vec<f64> = parse_fields("cameras.txt", n, &f[4..7])?;
        model.cameras.insert(
            id[0],
            ColmapCamera {
                width: size[0],
                height: size[1],
                focal: p[0],
                principal_point: Vector2::new(p[1], p[2]),
            },
        );
    }

    let images = fs::read_to_string(dir.join("images.txt"))?;
    let lines: Vec<(usize, &str)> = data_lines(&images).collect();
    for pair in lines.chunks(2) {
        let (n, header) = pair[0];
        if header.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() < 10 {
            return Err(short("images.txt", n));
        }
        let id: Vec<usize> = parse_fields("images.txt", n, &[f[0], f[8]])?;
        let pose: Vec<f64> = parse_fields("images.txt", n, &f[1..8])?;
        let mut points2d = Vec::new();
        if let Some(&(m, obs)) = pair.get(1) {
            let f: Vec<&str> = obs.split_whitespace().collect();
            if f.len() % 3 != 0 {
                return Err(short("images.txt", m));
            }
            for c in f.chunks(3) {
                let xy: Vec<f64> = parse_fields("images.txt", m, &c[..2])?;
                let pid: Vec<i64> = parse_fields("images.txt", m, &c[2..])?;
                points2d.push((Vector2::new(xy[0], xy[1]), usize::try_from(pid[0]).ok()));
            }
        }
        model.images.push(ColmapImage {
            id: id[0],
            quaternion: [pose[0], pose[1], pose[2], pose[3]],
            translation: Vector3::new(pose[4], pose[5], pose[6]),
            camera_id: id[1],
            name: f[9].to_string(),
            points2d,
        });
    }

    let points = fs::read_to_string(dir.join("points3D.txt"))?;
    for (n, line) in data_lines(&points).filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 8 || (f.len() - 8) % 2 != 0 {
            return Err(short("points3D.txt", n));
        }
        let id: Vec<usize> = parse_fields("points3D.txt", n, &f[..1])?;
        let xyz: Vec<f64> = parse_fields("points3D.txt", n, &f[1..4])?;
        let error: Vec<f64> = parse_fields("points3D.txt", n, &f[7..8])?;
        let refs: Vec<usize> = parse_fields("points3D.txt", n, &f[8..])?;
        model.points.push(ColmapPoint {
            id: id[0],
            xyz: Vector3::new(xyz[0], xyz[1], xyz[2]),
            error: error[0],
            track: refs.chunks(2).map(|c| (c[0], c[1])).collect(),
        });
    }
    Ok(model)
}
