use nalgebra::Vector3;
use proptest::prelude::*;
use sfm_core::epipolar::{initialize_cameras, InitOptions};
use sfm_core::filtering::{
    filter_observations, filter_reprojection, reprojection_error, FilterConfig, FilterMask,
};
use sfm_core::synthetic::{generate_synthetic, SyntheticConfig, SyntheticScene};
use sfm_core::triangulation::ray_angle;
use sfm_core::Camera;

fn scene(seed: u64, noise: f64, outliers: f64) -> SyntheticScene {
    generate_synthetic(&SyntheticConfig {
        seed,
        noise_px: noise,
        outlier_frac: outliers,
        occlusion_frac: 0.05,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn flagged_outliers_are_removed_with_initial_cameras() {
    let synth = scene(2, 0.0, 0.2);
    let init = initialize_cameras(&synth.scene, 0, &InitOptions::default()).unwrap();
    assert_eq!(init.registered(), synth.scene.frames.len());
    let mask = filter_observations(&synth.scene, 0, &[&init.cameras], &FilterConfig::default());
    let (mut outliers, mut outliers_removed, mut clean, mut clean_removed) = (0, 0, 0, 0);
    for (j, track) in synth.scene.tracks.iter().enumerate() {
        for (k, obs) in track.observations.iter().enumerate() {
            if obs.visibility < 0.6 {
                continue;
            }
            if synth.truth.outlier[j][k] {
                outliers += 1;
                outliers_removed += usize::from(!mask.is_kept(j, k));
            } else {
                clean += 1;
                clean_removed += usize::from(!mask.is_kept(j, k));
            }
        }
    }
    let removed = outliers_removed as f64 / outliers as f64;
    let lost = clean_removed as f64 / clean as f64;
    assert!(removed >= 0.9, "removed {removed}");
    assert!(lost <= 0.02, "clean lost {lost}");
}

fn ground_truth_cameras(synth: &SyntheticScene) -> Vec<Option<Camera>> {
    synth.truth.cameras.iter().copied().map(Some).collect()
}

fn points(synth: &SyntheticScene) -> Vec<Option<Vector3<f64>>> {
    synth.truth.points.iter().copied().map(Some).collect()
}

/// Every surviving observation satisfies every per-observation threshold, and every surviving
/// track satisfies the track-level ones.
fn assert_survivors_valid(
    synth: &SyntheticScene,
    cams: &[Option<Camera>],
    config: &FilterConfig,
    mask: &FilterMask,
) {
    for (j, track) in synth.scene.tracks.iter().enumerate() {
        let kept = mask.kept_indices(j);
        if !mask.track_kept(j) {
            continue;
        }
        assert!(kept.len() >= config.min_track_len);
        for &k in &kept {
            let o = &track.observations[k];
            assert!(o.visibility >= config.v_min);
            assert!(o.sigma.x <= config.sigma_max && o.sigma.y <= config.sigma_max);
            assert!(cams[o.frame].is_some());
        }
        if config.min_tri_angle > 0.0 {
            let mut best: f64 = 0.0;
            for (i, &a) in kept.iter().enumerate() {
                for &b in &kept[i + 1..] {
                    let (oa, ob) = (&track.observations[a], &track.observations[b]);
                    best = best.max(ray_angle(
                        cams[oa.frame].as_ref().unwrap(),
                        &oa.xy,
                        cams[ob.frame].as_ref().unwrap(),
                        &ob.xy,
                    ));
                }
            }
            assert!(best > config.min_tri_angle);
        }
    }
}

fn config_strategy() -> impl Strategy<Value = FilterConfig> {
    (
        0.0..1.0f64,
        0.2..2.0f64,
        0.2..3.0f64,
        0.0..20.0f64,
        0.5..5.0f64,
        0usize..6,
    )
        .prop_map(
            |(v_min, sigma_max, sampson_factor, min_tri_angle, max_reproj_px, min_track_len)| {
                FilterConfig {
                    v_min,
                    sigma_max,
                    sampson_factor,
                    min_tri_angle,
                    max_reproj_px,
                    min_track_len,
                }
            },
        )
}

fn kept_set(mask: &FilterMask) -> Vec<(usize, usize)> {
    (0..mask.tracks.len())
        .flat_map(|j| mask.kept_indices(j).into_iter().map(move |k| (j, k)))
        .collect()
}

fn subset(a: &[(usize, usize)], b: &[(usize, usize)]) -> bool {
    a.iter().all(|x| b.binary_search(x).is_ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn survivors_satisfy_all_thresholds(config in config_strategy(), seed in 0u64..4) {
        let synth = scene(seed, 1.0, 0.2);
        let cams = ground_truth_cameras(&synth);
        let mask = filter_observations(&synth.scene, 0, &[&cams], &config);
        assert_survivors_valid(&synth, &cams, &config, &mask);
        let pts = points(&synth);
        let after = filter_reprojection(&synth.scene, &cams, &pts, &config, &mask);
        for (j, track) in synth.scene.tracks.iter().enumerate() {
            for k in after.kept_indices(j) {
                let o = &track.observations[k];
                let err = reprojection_error(cams[o.frame].as_ref().unwrap(), &synth.truth.points[j], &o.xy);
                prop_assert!(err <= config.max_reproj_px);
            }
        }
    }

    #[test]
    fn filters_are_idempotent(config in config_strategy(), seed in 0u64..4) {
        let synth = scene(seed, 1.0, 0.2);
        let cams = ground_truth_cameras(&synth);
        let pts = points(&synth);
        let first = filter_observations(&synth.scene, 0, &[&cams], &config);
        prop_assert_eq!(&first, &filter_observations(&synth.scene, 0, &[&cams], &config));
        let once = filter_reprojection(&synth.scene, &cams, &pts, &config, &first);
        let twice = filter_reprojection(&synth.scene, &cams, &pts, &config, &once);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn tightening_never_adds_survivors(config in config_strategy(), which in 0usize..6, seed in 0u64..4) {
        let synth = scene(seed, 1.0, 0.2);
        let cams = ground_truth_cameras(&synth);
        let pts = points(&synth);
        let mut tight = config;
        match which {
            0 => tight.v_min = (config.v_min + 0.2).min(1.0),
            1 => tight.sigma_max = config.sigma_max * 0.5,
            2 => tight.sampson_factor = config.sampson_factor * 0.5,
            3 => tight.min_tri_angle = config.min_tri_angle + 2.0,
            4 => tight.max_reproj_px = config.max_reproj_px * 0.5,
            _ => tight.min_track_len = config.min_track_len + 1,
        }
        let loose_mask = filter_observations(&synth.scene, 0, &[&cams], &config);
        let tight_mask = filter_observations(&synth.scene, 0, &[&cams], &tight);
        prop_assert!(subset(&kept_set(&tight_mask), &kept_set(&loose_mask)));
        let loose_r = filter_reprojection(&synth.scene, &cams, &pts, &config, &loose_mask);
        let tight_r = filter_reprojection(&synth.scene, &cams, &pts, &tight, &tight_mask);
        prop_assert!(subset(&kept_set(&tight_r), &kept_set(&loose_r)));
    }
}
