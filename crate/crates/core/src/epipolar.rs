//! Preliminary camera recovery from tracks.
//!
//! Every frame is registered against the query frame with a calibrated (essential-matrix)
//! 8-point solve on focal-normalized coordinates. Robustness comes from the batched scheme:
//! a fixed number of random subsets are solved independently and the candidate with the most
//! Sampson inliers over all correspondences wins.

use nalgebra::{DMatrix, Matrix3, Unit, Vector2, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::scene::Scene;

/// Focal guess as a multiple of the longer image side.
pub const FOCAL_MULTIPLIER: f64 = 1.2;
/// Inlier threshold of the batched scheme, divided by the image width.
pub const BATCH_SAMPSON_FACTOR: f64 = 0.6;
pub const BATCH_SETS: usize = 20;
pub const BATCH_SET_SIZE: usize = 50;
/// Largest tolerated `sigma_max / sigma_8` of the 8-point design matrix.
pub const MAX_DESIGN_CONDITION: f64 = 1e12;
const SAMPSON_DENOMINATOR_EPS: f64 = 1e-18;

/// Returns `ln(1.2 * max(width, height))`.
pub fn init_focal(width: u32, height: u32) -> f64 {
    (FOCAL_MULTIPLIER * f64::from(width.max(height))).ln()
}

/// A correspondence in focal-normalized coordinates (`K^-1 y`): `a` in the anchor (query)
/// frame and `b` in the other frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub a: Vector2<f64>,
    pub b: Vector2<f64>,
}

impl Correspondence {
    pub fn new(a: Vector2<f64>, b: Vector2<f64>) -> Self {
        Self { a, b }
    }
}

/// An essential matrix with its decomposed pose `x_b = R x_a + t`, `|t| = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EssentialCandidate {
    pub essential: Matrix3<f64>,
    /// From [`eight_point`]: pairs passing the cheirality vote. After scoring: Sampson inliers.
    pub inliers: usize,
    /// Mean Sampson error over the inliers (0 before scoring).
    pub mean_inlier_error: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Unit<Vector3<f64>>,
}

/// Converts a pixel threshold to normalized-coordinate units.
pub fn pixel_to_normalized(threshold_px: f64, focal: f64) -> f64 {
    threshold_px / focal
}

/// `factor / width`, the form of the Sampson thresholds.
pub fn sampson_threshold(factor: f64, width: u32) -> f64 {
    factor / f64::from(width)
}

/// First-order (Sampson) distance of a correspondence to the epipolar constraint
/// `b^T E a = 0`, in normalized-coordinate units. Returns `+inf` when the constraint gradient
/// vanishes.
pub fn sampson_error(essential: &Matrix3<f64>, pair: &Correspondence) -> f64 {
    let a = pair.a.push(1.0);
    let b = pair.b.push(1.0);
    let ea = essential * a;
    let etb = essential.transpose() * b;
    let denominator = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    if denominator < SAMPSON_DENOMINATOR_EPS {
        return f64::INFINITY;
    }
    b.dot(&ea).abs() / denominator.sqrt()
}

/// Essential matrix `[t]x R` of the pose mapping camera `a` coordinates to camera `b`.
pub fn essential_from_cameras(a: &Camera, b: &Camera) -> Matrix3<f64> {
    let rel = crate::camera::relative_pose(a, b);
    let raw = b.translation() - rel.rotation * a.translation();
    raw.cross_matrix() * rel.rotation
}

fn hartley_transform(points: impl Iterator<Item = Vector2<f64>> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let centroid = points.clone().fold(Vector2::zeros(), |acc, p| acc + p) / n;
    let mean_dist = points.map(|p| (p - centroid).norm()).sum::<f64>() / n;
    let scale = if mean_dist > 1e-300 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(
        scale,
        0.0,
        -scale * centroid.x,
        0.0,
        scale,
        -scale * centroid.y,
        0.0,
        0.0,
        1.0,
    )
}

fn apply(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let h = t * p.push(1.0);
    Vector2::new(h.x / h.z, h.y / h.z)
}

/// Depths `(lambda_a, lambda_b)` of the least-squares intersection of the two rays under the
/// pose `x_b = R x_a + t`.
pub fn two_view_depths(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    pair: &Correspondence,
) -> Option<(f64, f64)> {
    let ra = rotation * pair.a.push(1.0);
    let b = pair.b.push(1.0);
    // lambda_a * ra - lambda_b * b = -t
    let m11 = ra.dot(&ra);
    let m12 = -ra.dot(&b);
    let m22 = b.dot(&b);
    let r1 = -ra.dot(translation);
    let r2 = b.dot(translation);
    let det = m11 * m22 - m12 * m12;
    if det.abs() < 1e-14 * m11 * m22 {
        return None;
    }
    Some(((m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det))
}

fn cheirality_count(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    pairs: &[Correspondence],
) -> usize {
    pairs
        .iter()
        .filter(|p| matches!(two_view_depths(rotation, translation, p), Some((da, db)) if da > 0.0 && db > 0.0))
        .count()
}

/// Projects a 3x3 matrix onto the essential manifold (singular values `(1, 1, 0)`).
pub fn project_to_essential(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut s = Matrix3::zeros();
    s[(order[0], order[0])] = 1.0;
    s[(order[1], order[1])] = 1.0;
    u * s * v_t
}

/// The four `(R, t)` decompositions of an essential matrix with `det R = +1`.
pub fn decompose_essential(essential: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = essential.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    // Order columns so the (near-)zero singular value is last.
    let sv = svd.singular_values;
    let zero = (0..3).min_by(|&i, &j| sv[i].total_cmp(&sv[j])).unwrap();
    if zero != 2 {
        u.swap_columns(zero, 2);
        v_t.swap_rows(zero, 2);
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into_owned();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Normalized 8-point algorithm on at least eight correspondences.
///
/// Hartley-normalizes both views, solves the linear system by SVD, projects onto the essential
/// manifold and keeps the decomposition with the most pairs in front of both cameras.
pub fn eight_point(pairs: &[Correspondence]) -> Result<EssentialCandidate> {
    if pairs.len() < 8 {
        return Err(Error::Arity {
            what: "eight_point",
            needed: 8,
            got: pairs.len(),
        });
    }
    let ta = hartley_transform(pairs.iter().map(|p| p.a));
    let tb = hartley_transform(pairs.iter().map(|p| p.b));
    let rows = pairs.len().max(9);
    let mut design = DMatrix::<f64>::zeros(rows, 9);
    for (i, p) in pairs.iter().enumerate() {
        let a = apply(&ta, &p.a);
        let b = apply(&tb, &p.b);
        let row = [
            b.x * a.x,
            b.x * a.y,
            b.x,
            b.y * a.x,
            b.y * a.y,
            b.y,
            a.x,
            a.y,
            1.0,
        ];
        for (c, v) in row.into_iter().enumerate() {
            design[(i, c)] = v;
        }
    }
    let svd = design.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let eighth = svd.singular_values[order[7]];
    if !(largest.is_finite()) || eighth <= largest / MAX_DESIGN_CONDITION {
        return Err(Error::Degenerate(format!(
            "8-point design matrix is rank deficient (condition {:e})",
            largest / eighth
        )));
    }
    let null = v_t.row(order[8]);
    let f_hat = Matrix3::from_row_slice(&null.iter().copied().collect::<Vec<_>>());
    let raw = tb.transpose() * f_hat * ta;
    let essential = project_to_essential(&raw);

    let (rotation, translation, count) = decompose_essential(&essential)
        .into_iter()
        .map(|(r, t)| {
            let c = cheirality_count(&r, &t, pairs);
            (r, t, c)
        })
        .fold(
            None::<(Matrix3<f64>, Vector3<f64>, usize)>,
            |best, cand| match best {
                Some(b) if b.2 >= cand.2 => Some(b),
                _ => Some(cand),
            },
        )
        .expect("four decompositions");
    Ok(EssentialCandidate {
        essential,
        inliers: count,
        mean_inlier_error: 0.0,
        rotation,
        translation: Unit::new_normalize(translation),
    })
}

/// Counts pairs with Sampson error strictly below `threshold` and their mean error.
pub fn score_candidate(
    essential: &Matrix3<f64>,
    pairs: &[Correspondence],
    threshold: f64,
) -> (usize, f64) {
    let mut count = 0usize;
    let mut sum = 0.0;
    for p in pairs {
        let e = sampson_error(essential, p);
        if e < threshold {
            count += 1;
            sum += e;
        }
    }
    let mean = if count > 0 {
        sum / count as f64
    } else {
        f64::INFINITY
    };
    (count, mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOptions {
    /// Number of large random subsets.
    pub sets: usize,
    /// Pairs per large subset.
    pub set_size: usize,
    /// Additional minimal (8-pair) subsets solved in the same batch.
    pub minimal_sets: usize,
    /// Sampson inlier threshold in normalized units (`0.6 / width` by default).
    pub threshold: f64,
    /// Local-optimization rounds: re-solve on the winner's inliers while the score improves.
    pub refine_rounds: usize,
    /// How many of the best candidates are locally optimized.
    pub refine_candidates: usize,
}

/// Minimal subsets added to the batch by default.
pub const BATCH_MINIMAL_SETS: usize = 2000;
pub const BATCH_REFINE_ROUNDS: usize = 5;
/// Number of best-scoring candidates that go through local optimization.
pub const BATCH_REFINE_CANDIDATES: usize = 100;
/// Support threshold of local optimization, as a multiple of the inlier threshold.
const LO_SUPPORT_FACTOR: f64 = 3.0;
const POLISH_ITERATIONS: usize = 20;

impl BatchOptions {
    /// Large subsets plus minimal subsets and local optimization. Fifty-pair subsets are
    /// contaminated whenever more than a few percent of the pairs are outliers; the minimal
    /// subsets supply clean hypotheses in that regime and lose to the large ones on clean data.
    pub fn for_width(width: u32) -> Self {
        Self {
            sets: BATCH_SETS,
            set_size: BATCH_SET_SIZE,
            minimal_sets: BATCH_MINIMAL_SETS,
            threshold: sampson_threshold(BATCH_SAMPSON_FACTOR, width),
            refine_rounds: BATCH_REFINE_ROUNDS,
            refine_candidates: BATCH_REFINE_CANDIDATES,
        }
    }

    /// Only the twenty fifty-pair subsets, no minimal subsets and no refinement.
    pub fn large_subsets_only(width: u32) -> Self {
        Self {
            minimal_sets: 0,
            refine_rounds: 0,
            ..Self::for_width(width)
        }
    }
}

fn better(a: &EssentialCandidate, b: &EssentialCandidate) -> bool {
    a.inliers > b.inliers || (a.inliers == b.inliers && a.mean_inlier_error < b.mean_inlier_error)
}

/// Batched 8-point.
///
/// `sets` random subsets of `set_size` pairs and `minimal_sets` random 8-pair subsets (each
/// sampled without replacement) are solved in parallel and scored on all pairs. Most inliers
/// wins; ties go to the lower mean inlier error and then to the earlier subset. With fewer
/// than `set_size` pairs the large subsets collapse to one [`eight_point`] on everything.
pub fn batched_eight_point(
    pairs: &[Correspondence],
    options: &BatchOptions,
    seed: u64,
) -> Result<EssentialCandidate> {
    if pairs.len() < 8 {
        return Err(Error::Arity {
            what: "batched_eight_point",
            needed: 8,
            got: pairs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsets: Vec<Vec<usize>> = if pairs.len() < options.set_size {
        vec![(0..pairs.len()).collect()]
    } else {
        (0..options.sets)
            .map(|_| index::sample(&mut rng, pairs.len(), options.set_size).into_vec())
            .collect()
    };
    subsets.extend(
        (0..options.minimal_sets).map(|_| index::sample(&mut rng, pairs.len(), 8).into_vec()),
    );

    let candidates: Vec<Option<EssentialCandidate>> = subsets
        .par_iter()
        .map(|subset| {
            let chosen: Vec<Correspondence> = subset.iter().map(|&i| pairs[i]).collect();
            eight_point(&chosen).ok().map(|mut cand| {
                let (inliers, mean) = score_candidate(&cand.essential, pairs, options.threshold);
                cand.inliers = inliers;
                cand.mean_inlier_error = mean;
                cand
            })
        })
        .collect();
    // Stable sort keeps the earlier subset first among exact ties.
    let mut ranked: Vec<EssentialCandidate> = candidates.into_iter().flatten().collect();
    if ranked.is_empty() {
        return Err(Error::Degenerate(
            "every batched 8-point subset was degenerate".into(),
        ));
    }
    ranked.sort_by(|a, b| {
        b.inliers
            .cmp(&a.inliers)
            .then(a.mean_inlier_error.total_cmp(&b.mean_inlier_error))
    });
    if options.refine_rounds == 0 {
        return Ok(ranked.swap_remove(0));
    }
    let top = ranked.len().min(options.refine_candidates);
    let refined: Vec<EssentialCandidate> = ranked
        .into_par_iter()
        .take(top)
        .map(|cand| refine(cand, pairs, options))
        .collect();
    let mut best = refined[0].clone();
    for cand in refined.into_iter().skip(1) {
        if better(&cand, &best) {
            best = cand;
        }
    }
    Ok(best)
}

fn signed_sampson(essential: &Matrix3<f64>, pair: &Correspondence) -> f64 {
    let a = pair.a.push(1.0);
    let b = pair.b.push(1.0);
    let ea = essential * a;
    let etb = essential.transpose() * b;
    let denominator = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    b.dot(&ea) / denominator.max(SAMPSON_DENOMINATOR_EPS).sqrt()
}

fn pose_essential(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix3<f64> {
    translation.cross_matrix() * rotation
}

fn perturb(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    delta: &[f64; 5],
) -> (Matrix3<f64>, Vector3<f64>) {
    let basis = translation.normalize().cross_matrix();
    let (u, v) = {
        let seed = if translation.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        let u = (basis * seed).normalize();
        (u, translation.normalize().cross(&u))
    };
    let rot = nalgebra::Rotation3::new(Vector3::new(delta[0], delta[1], delta[2])).into_inner()
        * rotation;
    let t = (translation.normalize() + delta[3] * u + delta[4] * v).normalize();
    (rot, t)
}

/// Levenberg-Marquardt on the signed Sampson residuals of `support` over the five relative-pose
/// degrees of freedom. Returns the polished pose; the input when nothing improves.
fn polish_pose(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    support: &[Correspondence],
) -> (Matrix3<f64>, Vector3<f64>) {
    let residuals = |r: &Matrix3<f64>, t: &Vector3<f64>| -> Vec<f64> {
        let e = pose_essential(r, t);
        support.iter().map(|p| signed_sampson(&e, p)).collect()
    };
    let cost = |res: &[f64]| res.iter().map(|x| x * x).sum::<f64>();
    let (mut r, mut t) = (*rotation, translation.normalize());
    let mut res = residuals(&r, &t);
    let mut current = cost(&res);
    let mut lambda = 1e-3;
    for _ in 0..POLISH_ITERATIONS {
        let h = 1e-7;
        let mut jac = DMatrix::<f64>::zeros(support.len(), 5);
        for k in 0..5 {
            let mut d = [0.0; 5];
            d[k] = h;
            let (rp, tp) = perturb(&r, &t, &d);
            d[k] = -h;
            let (rm, tm) = perturb(&r, &t, &d);
            let plus = residuals(&rp, &tp);
            let minus = residuals(&rm, &tm);
            for i in 0..support.len() {
                jac[(i, k)] = (plus[i] - minus[i]) / (2.0 * h);
            }
        }
        let jt = jac.transpose();
        let normal = &jt * &jac;
        let gradient = &jt * nalgebra::DVector::from_column_slice(&res);
        let mut improved = false;
        while lambda < 1e8 {
            let mut damped = normal.clone();
            for k in 0..5 {
                damped[(k, k)] += lambda * (1.0 + normal[(k, k)]);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&gradient))) else {
                lambda *= 10.0;
                continue;
            };
            let d = [step[0], step[1], step[2], step[3], step[4]];
            let (rn, tn) = perturb(&r, &t, &d);
            let rn_res = residuals(&rn, &tn);
            let next = cost(&rn_res);
            if next < current {
                let gain = (current - next) / current.max(f64::MIN_POSITIVE);
                r = rn;
                t = tn;
                res = rn_res;
                current = next;
                lambda = (lambda / 10.0).max(1e-12);
                improved = gain > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, t)
}

fn polished_candidate(
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    support: &[Correspondence],
    pairs: &[Correspondence],
    threshold: f64,
) -> EssentialCandidate {
    let (r, t) = polish_pose(rotation, translation, support);
    let essential = pose_essential(&r, &t);
    let (inliers, mean) = score_candidate(&essential, pairs, threshold);
    EssentialCandidate {
        essential,
        inliers,
        mean_inlier_error: mean,
        rotation: r,
        translation: Unit::new_normalize(t),
    }
}

/// Local optimization: gathers the support within `LO_SUPPORT_FACTOR * threshold`, re-solves
/// it linearly and polishes the pose on it, keeping the result while the score improves.
fn refine(
    mut best: EssentialCandidate,
    pairs: &[Correspondence],
    options: &BatchOptions,
) -> EssentialCandidate {
    for _ in 0..options.refine_rounds {
        let support: Vec<Correspondence> = pairs
            .iter()
            .copied()
            .filter(|p| sampson_error(&best.essential, p) < LO_SUPPORT_FACTOR * options.threshold)
            .collect();
        if support.len() < 8 {
            break;
        }
        let mut next = polished_candidate(
            &best.rotation,
            &best.translation.into_inner(),
            &support,
            pairs,
            options.threshold,
        );
        if let Ok(linear) = eight_point(&support) {
            let alt = polished_candidate(
                &linear.rotation,
                &linear.translation.into_inner(),
                &support,
                pairs,
                options.threshold,
            );
            if better(&alt, &next) {
                next = alt;
            }
        }
        if !better(&next, &best) {
            break;
        }
        best = next;
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub seed: u64,
    /// Observations below this visibility do not take part in initialization.
    pub min_visibility: f64,
    /// Observations with a larger per-axis sigma do not take part in initialization.
    pub max_sigma: f64,
    pub minimal_sets: usize,
    pub refine_rounds: usize,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            min_visibility: 0.6,
            max_sigma: 1.0,
            minimal_sets: BATCH_MINIMAL_SETS,
            refine_rounds: BATCH_REFINE_ROUNDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFailure {
    pub frame: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Initialization {
    pub query: usize,
    /// One entry per frame; `None` for frames that could not be registered.
    pub cameras: Vec<Option<Camera>>,
    pub failures: Vec<FrameFailure>,
    /// Sampson inlier count of the selected candidate per frame (0 for query/failed frames).
    pub inliers: Vec<usize>,
}

impl Initialization {
    pub fn registered(&self) -> usize {
        self.cameras.iter().filter(|c| c.is_some()).count()
    }
}

/// Image-center, `init_focal` camera at the identity pose for `frame`.
pub fn default_camera(scene: &Scene, frame: usize) -> Camera {
    let f = &scene.frames[frame];
    Camera::from_image_size(f.width, f.height, init_focal(f.width, f.height))
}

/// Covisible usable correspondences between `query` and `frame`, as `(track, pair)`.
pub fn covisible_pairs(
    scene: &Scene,
    query: usize,
    frame: usize,
    options: &InitOptions,
) -> Vec<(usize, Correspondence)> {
    let cam_a = default_camera(scene, query);
    let cam_b = default_camera(scene, frame);
    let usable = |o: &crate::scene::TrackObservation| {
        o.visibility >= options.min_visibility
            && o.sigma.x <= options.max_sigma
            && o.sigma.y <= options.max_sigma
    };
    scene
        .tracks
        .iter()
        .enumerate()
        .filter_map(|(j, track)| {
            let (_, oa) = track.observation_in(query)?;
            let (_, ob) = track.observation_in(frame)?;
            if !usable(oa) || !usable(ob) {
                return None;
            }
            let a = cam_a.normalize_pixel(&oa.xy).xy();
            let b = cam_b.normalize_pixel(&ob.xy).xy();
            Some((j, Correspondence::new(a, b)))
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn frame_seed(seed: u64, frame: usize) -> u64 {
    seed ^ (frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Registered {
    frame: usize,
    candidate: EssentialCandidate,
    /// Query-frame depth per inlier track for a unit baseline.
    depths: Vec<(usize, f64)>,
}

/// Registers every frame against `query` and places all cameras in one frame.
///
/// The query camera is the identity. Each other frame gets its batched 8-point pose; the
/// translation scale is fixed by two-view query-frame depths. The frame with the most inlier
/// depths is the reference: its depths are scaled to median 1, and every other frame is scaled
/// by the median ratio of reference depth to its own depth over shared tracks (falling back to
/// its own median when it shares none).
pub fn initialize_cameras(
    scene: &Scene,
    query: usize,
    options: &InitOptions,
) -> Result<Initialization> {
    if query >= scene.frames.len() {
        return Err(Error::Referential(format!(
            "query frame {query} out of range"
        )));
    }
    let n = scene.frames.len();
    let outcomes: Vec<std::result::Result<Registered, FrameFailure>> = (0..n)
        .into_par_iter()
        .filter(|&b| b != query)
        .map(|b| {
            let pairs = covisible_pairs(scene, query, b, options);
            if pairs.len() < 8 {
                return Err(FrameFailure {
                    frame: b,
                    reason: format!("only {} covisible tracks with the query frame", pairs.len()),
                });
            }
            let correspondences: Vec<Correspondence> = pairs.iter().map(|(_, p)| *p).collect();
            let mut batch = BatchOptions::for_width(scene.frames[b].width);
            batch.minimal_sets = options.minimal_sets;
            batch.refine_rounds = options.refine_rounds;
            let candidate =
                batched_eight_point(&correspondences, &batch, frame_seed(options.seed, b))
                    .map_err(|e| FrameFailure {
                        frame: b,
                        reason: e.to_string(),
                    })?;
            let t = candidate.translation.into_inner();
            let depths: Vec<(usize, f64)> = pairs
                .iter()
                .filter(|(_, p)| sampson_error(&candidate.essential, p) < batch.threshold)
                .filter_map(|(j, p)| match two_view_depths(&candidate.rotation, &t, p) {
                    Some((da, db)) if da > 0.0 && db > 0.0 => Some((*j, da)),
                    _ => None,
                })
                .collect();
            if depths.is_empty() {
                return Err(FrameFailure {
                    frame: b,
                    reason: "no inlier track in front of both cameras".into(),
                });
            }
            Ok(Registered {
                frame: b,
                candidate,
                depths,
            })
        })
        .collect();

    let mut failures = Vec::new();
    let mut registered = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => registered.push(r),
            Err(f) => failures.push(f),
        }
    }

    let mut cameras: Vec<Option<Camera>> = vec![None; n];
    let mut inliers = vec![0; n];
    cameras[query] = Some(default_camera(scene, query));

    let reference = registered
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.depths.len().cmp(&b.depths.len()).then(ib.cmp(ia)))
        .map(|(i, _)| i);
    if let Some(reference) = reference {
        let ref_median = median(
            &mut registered[reference]
                .depths
                .iter()
                .map(|d| d.1)
                .collect::<Vec<_>>(),
        );
        let mut ref_depth = vec![None; scene.tracks.len()];
        for &(j, d) in &registered[reference].depths {
            ref_depth[j] = Some(d / ref_median);
        }
        for reg in &registered {
            let mut ratios: Vec<f64> = reg
                .depths
                .iter()
                .filter_map(|&(j, d)| ref_depth[j].map(|r| r / d))
                .collect();
            let scale = if ratios.is_empty() {
                1.0 / median(&mut reg.depths.iter().map(|d| d.1).collect::<Vec<_>>())
            } else {
                median(&mut ratios)
            };
            let base = default_camera(scene, reg.frame);
            let t = scale * reg.candidate.translation.into_inner();
            cameras[reg.frame] = Some(Camera::from_rotation(
                &reg.candidate.rotation,
                t,
                base.focal(),
                base.principal_point(),
            ));
            inliers[reg.frame] = reg.candidate.inliers;
        }
    }
    failures.sort_by_key(|f| f.frame);
    Ok(Initialization {
        query,
        cameras,
        failures,
        inliers,
    })
}
