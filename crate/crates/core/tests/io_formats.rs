use nalgebra::{Vector2, Vector3};
use sfm_core::filtering::FilterMask;
use sfm_core::io::colmap::{export_colmap, import_colmap};
use sfm_core::io::ply::{read_ply, write_ply};
use sfm_core::synthetic::{generate_synthetic, SyntheticConfig};
use sfm_core::Camera;

fn reconstructed_scene() -> sfm_core::Scene {
    let synth = generate_synthetic(&SyntheticConfig {
        n_frames: 5,
        n_tracks: 40,
        noise_px: 0.5,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let mut scene = synth.scene;
    scene.cameras = Some(synth.truth.cameras.iter().copied().map(Some).collect());
    scene.points = Some(synth.truth.points.iter().copied().map(Some).collect());
    scene
}

#[test]
fn colmap_round_trip_reproduces_projections() {
    let mut scene = reconstructed_scene();
    scene.cameras.as_mut().unwrap()[3] = None;
    let mut mask = FilterMask::all_kept(&scene);
    mask.observations[0][0] = Some(sfm_core::filtering::ObservationDrop::Reprojection);
    let dir = tempfile::tempdir().unwrap();
    let report = export_colmap(&scene, Some(&mask), dir.path()).unwrap();
    assert_eq!(report.skipped_frames, vec![3]);
    assert_eq!(report.images, 4);

    let model = import_colmap(dir.path()).unwrap();
    assert_eq!(model.images.len(), 4);
    let cameras = scene.cameras.as_ref().unwrap();
    let points = scene.points.as_ref().unwrap();
    let mut checked = 0;
    for p in &model.points {
        let j = p.id - 1;
        assert!((p.xyz - points[j].unwrap()).norm() < 1e-9);
        for &(image_id, idx) in &p.track {
            let image = model.images.iter().find(|i| i.id == image_id).unwrap();
            let cam = image.camera(&model.cameras[&image.camera_id]).unwrap();
            let original = cameras[image_id - 1].unwrap();
            let a = cam.project(&p.xyz).unwrap().pixel;
            let b = original.project(&points[j].unwrap()).unwrap().pixel;
            assert!((a - b).norm() < 1e-6);
            let (xy, pid) = image.points2d[idx];
            assert_eq!(pid, Some(p.id));
            let obs = scene.tracks[j]
                .observations
                .iter()
                .find(|o| o.frame + 1 == image_id)
                .unwrap();
            assert!((xy - obs.xy).norm() < 1e-9);
            checked += 1;
        }
        assert!(p.track.iter().all(|(img, _)| *img != 4));
    }
    assert!(checked > 100);
    // The masked observation is not listed.
    let first = &model
        .points
        .iter()
        .find(|p| p.id == 1)
        .map(|p| p.track.len());
    let frames_seen = scene.tracks[0]
        .observations
        .iter()
        .filter(|o| o.frame != 3)
        .count();
    assert_eq!(
        first.unwrap_or(0),
        frames_seen - usize::from(scene.tracks[0].observations[0].frame != 3)
    );
}

#[test]
fn documented_lines() {
    let mut scene = reconstructed_scene();
    let identity = Camera::new(
        [1.0, 0.0, 0.0, 0.0],
        Vector3::zeros(),
        1228.8f64.ln(),
        Vector2::new(512.0, 384.0),
    )
    .unwrap();
    scene.cameras.as_mut().unwrap()[0] = Some(identity);
    let dir = tempfile::tempdir().unwrap();
    export_colmap(&scene, None, dir.path()).unwrap();
    let cams = std::fs::read_to_string(dir.path().join("cameras.txt")).unwrap();
    assert!(
        cams.lines()
            .any(|l| l == "1 SIMPLE_PINHOLE 1024 768 1228.8 512 384"),
        "{cams}"
    );
    let images = std::fs::read_to_string(dir.path().join("images.txt")).unwrap();
    assert!(
        images.lines().any(|l| l.starts_with("1 1 0 0 0 0 0 0 1 ")),
        "{images}"
    );
    assert!(!images.contains("-0 ") && !cams.contains("-0 "));
}

#[test]
fn ply_file_round_trip() {
    let scene = reconstructed_scene();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("points.ply");
    write_ply(&path, scene.points.as_ref().unwrap()).unwrap();
    let back = read_ply(&path).unwrap();
    assert_eq!(back.len(), 40);
    for (j, x) in back {
        assert_eq!(x, scene.points.as_ref().unwrap()[j].unwrap());
    }
}
