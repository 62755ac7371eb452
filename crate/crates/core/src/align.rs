//! Least-squares similarity alignment (Umeyama).

use nalgebra::{Matrix3, Vector3};

use crate::camera::{Camera, Similarity};
use crate::error::{Error, Result};

/// Similarity `g` minimizing `sum |dst_i - g(src_i)|^2`. With `with_scale = false` the scale is
/// fixed to 1.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::Arity {
            what: "umeyama",
            needed: src.len(),
            got: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::Arity {
            what: "umeyama",
            needed: 3,
            got: src.len(),
        });
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let var_s = src.iter().map(|s| (s - mu_s).norm_squared()).sum::<f64>() / n;
    if var_s < 1e-300 {
        return Err(Error::Degenerate("source points coincide".into()));
    }
    let cov = src.iter().zip(dst).fold(Matrix3::zeros(), |acc, (s, d)| {
        acc + (d - mu_d) * (s - mu_s).transpose()
    }) / n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // Flip the direction of the smallest singular value.
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        sign[(smallest, smallest)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let scale = if with_scale {
        (0..3)
            .map(|k| svd.singular_values[k] * sign[(k, k)])
            .sum::<f64>()
            / var_s
    } else {
        1.0
    };
    Ok(Similarity {
        rotation,
        translation: mu_d - scale * rotation * mu_s,
        scale,
    })
}

/// Similarity taking the centers of `pred` onto those of `gt` over frames present in both.
pub fn align_cameras(pred: &[Option<Camera>], gt: &[Camera]) -> Result<Similarity> {
    let (src, dst): (Vec<_>, Vec<_>) = pred
        .iter()
        .zip(gt)
        .filter_map(|(p, g)| p.as_ref().map(|p| (p.center(), g.center())))
        .unzip();
    umeyama(&src, &dst, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_a_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Similarity {
            rotation: Rotation3::new(Vector3::new(0.4, -1.1, 2.0)).into_inner(),
            translation: Vector3::new(3.0, -1.0, 0.5),
            scale: 0.37,
        };
        let src: Vec<Vector3<f64>> = (0..20)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let dst: Vec<Vector3<f64>> = src.iter().map(|s| g.apply(s)).collect();
        let est = umeyama(&src, &dst, true).unwrap();
        assert!((est.rotation - g.rotation).norm() < 1e-12);
        assert!((est.translation - g.translation).norm() < 1e-12);
        assert!((est.scale - g.scale).abs() < 1e-12);
        let rigid = umeyama(&src, &dst, false).unwrap();
        assert_eq!(rigid.scale, 1.0);
    }

    #[test]
    fn reflections_are_not_returned() {
        let src = vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 0.0),
        ];
        let dst: Vec<Vector3<f64>> = src.iter().map(|s| Vector3::new(-s.x, s.y, s.z)).collect();
        let est = umeyama(&src, &dst, true).unwrap();
        assert!((est.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points() {
        let p = vec![Vector3::zeros(); 2];
        assert!(umeyama(&p, &p, true).is_err());
    }
}
