//! Synthetic scenes: database and query cameras, world points, geometry
//! corruption, database sparsification, pose-based retrieval, match
//! synthesis, and the multi-view 3D-point filter.

mod matches;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, so3_exp, Database, DbCamera, DbImageId, Intrinsics, Mat3, Pose, Vec2, Vec3};

pub use matches::{
    extended_database, filter_points, generate_matches, generate_matches_extended, retrieve_extended, ExtendedEntry,
    FilterConfig, MatchSet,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("scene generation failed: {0}")]
    GenerationFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    /// Sideways-looking cameras along a straight path past a facade-like
    /// point band of varying depth.
    Street,
    /// Inward-looking cameras on a ring around a point cloud.
    Room,
}

/// Parameters of [`generate_scene`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_db: usize,
    pub num_points: usize,
    pub num_queries: usize,
    pub layout: Layout,
    pub seed: u64,
    pub intrinsics: Intrinsics,
    /// Street: distance between consecutive db cameras. Room: ring radius.
    pub spacing: f64,
    /// Range of point depths (Street) or point-cloud radius range (Room).
    pub depth_min: f64,
    pub depth_max: f64,
    /// Largest camera depth at which a point is still observed.
    pub max_view_depth: f64,
    /// Largest displacement of a query from the db trajectory.
    pub query_offset: f64,
    /// Largest yaw deviation of a query from the db viewing direction, degrees.
    pub query_yaw_deg: f64,
    /// Street: largest sideways displacement of a db camera from the path.
    pub lateral_jitter: f64,
    pub min_shared_points: usize,
    pub min_shared_images: usize,
}

impl SceneSpec {
    pub fn street(num_db: usize, num_points: usize, num_queries: usize, seed: u64) -> Self {
        Self {
            num_db,
            num_points,
            num_queries,
            layout: Layout::Street,
            seed,
            intrinsics: Intrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0 },
            spacing: 0.5,
            depth_min: 4.0,
            depth_max: 30.0,
            max_view_depth: 40.0,
            query_offset: 1.0,
            query_yaw_deg: 10.0,
            lateral_jitter: 0.05,
            min_shared_points: 30,
            min_shared_images: 3,
        }
    }

    pub fn room(num_db: usize, num_points: usize, num_queries: usize, seed: u64) -> Self {
        Self {
            layout: Layout::Room,
            spacing: 6.0,
            depth_min: 0.0,
            depth_max: 2.5,
            max_view_depth: 20.0,
            query_offset: 1.0,
            ..Self::street(num_db, num_points, num_queries, seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbImage {
    pub id: DbImageId,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub capture_index: usize,
    /// Multiplicative depth error applied when lifting matches of this image.
    pub depth_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryCamera {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub capture_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub image: DbImageId,
    pub pixel: Vec2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub db_images: Vec<DbImage>,
    pub points_gt: Vec<Vec3>,
    /// Observed scene geometry; `None` where no 3D point is available.
    pub points_obs: Vec<Option<Vec3>>,
    pub queries: Vec<QueryCamera>,
    /// Per point, the db images observing it with ground-truth pixels.
    pub visibility: Vec<Vec<Observation>>,
    /// Largest camera depth at which a point is observed.
    pub max_view_depth: f64,
}

/// Geometry corruption and match noise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionModel {
    pub pixel_sigma: f64,
    pub outlier_ratio: f64,
    pub point_noise: f64,
    /// Log-normal shape `s` of the per-db-image depth factor.
    pub depth_bias: f64,
    pub drop_3d_fraction: f64,
    /// Target fraction of 2D-3D matches whose 3D point is wrong, counting
    /// the ones lifted from outlier 2D-2D matches.
    pub lift_outlier_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub keep_every_n: usize,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self { keep_every_n: 1 }
    }
}

/// Whether a point is observed by a camera: in front, within the viewing
/// depth, and inside the image.
pub fn observe(pose: &Pose, k: &Intrinsics, x: &Vec3, max_depth: f64) -> Option<Vec2> {
    let depth = pose.transform(x).z;
    if !(depth > 1e-6 && depth <= max_depth) {
        return None;
    }
    let p = project(pose, k, x).ok()?;
    k.contains(&p).then_some(p)
}

/// Camera looking along world `+y` with image x along world `+x`.
fn street_base_rotation() -> Mat3 {
    Mat3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
}

/// World-to-camera rotation of a camera at `center` looking at `target`
/// with world `+z` up.
fn look_at(center: &Vec3, target: &Vec3) -> Mat3 {
    let z = (target - center).normalize();
    let up = Vec3::z();
    let x = z.cross(&up).normalize();
    let y = z.cross(&x);
    Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

fn small_rotation(rng: &mut impl Rng, yaw: f64, pitch: f64, roll: f64) -> Mat3 {
    let w = Vec3::new(rng.random_range(-pitch..=pitch), rng.random_range(-roll..=roll), rng.random_range(-yaw..=yaw));
    so3_exp(&w)
}

impl SyntheticScene {
    pub fn database(&self) -> Database {
        self.db_images.iter().map(|d| (d.id, DbCamera { pose: d.pose, intrinsics: d.intrinsics })).collect()
    }

    pub fn db_image(&self, id: DbImageId) -> Option<&DbImage> {
        self.db_images.iter().find(|d| d.id == id)
    }

    /// Points observed by a query under its ground-truth pose, with pixels.
    pub fn query_visibility(&self, query_index: usize) -> Vec<(usize, Vec2)> {
        let q = &self.queries[query_index];
        self.points_gt
            .iter()
            .enumerate()
            .filter_map(|(i, x)| observe(&q.pose, &q.intrinsics, x, self.max_view_depth).map(|p| (i, p)))
            .collect()
    }

    /// Point indices observed by each db image, keyed by id.
    pub fn image_points(&self) -> BTreeMap<DbImageId, Vec<(usize, Vec2)>> {
        let mut out: BTreeMap<DbImageId, Vec<(usize, Vec2)>> =
            self.db_images.iter().map(|d| (d.id, Vec::new())).collect();
        for (i, obs) in self.visibility.iter().enumerate() {
            for o in obs {
                if let Some(v) = out.get_mut(&o.image) {
                    v.push((i, o.pixel));
                }
            }
        }
        out
    }

    /// Number of points available as 3D structure.
    pub fn available_points(&self) -> usize {
        self.points_obs.iter().filter(|p| p.is_some()).count()
    }

    /// Query indices in localization order: queries captured before the
    /// database go most-recent-first, then the remaining ones oldest-first.
    pub fn processing_order(&self) -> Vec<usize> {
        let first_db = self.db_images.iter().map(|d| d.capture_index).min().unwrap_or(0);
        let mut before: Vec<usize> =
            (0..self.queries.len()).filter(|&q| self.queries[q].capture_index < first_db).collect();
        let mut after: Vec<usize> =
            (0..self.queries.len()).filter(|&q| self.queries[q].capture_index >= first_db).collect();
        before.sort_by_key(|&q| std::cmp::Reverse(self.queries[q].capture_index));
        after.sort_by_key(|&q| self.queries[q].capture_index);
        before.extend(after);
        before
    }
}

fn visibility_of(points: &[Vec3], db: &[DbImage], max_depth: f64) -> Vec<Vec<Observation>> {
    points
        .iter()
        .map(|x| {
            db.iter()
                .filter_map(|d| {
                    observe(&d.pose, &d.intrinsics, x, max_depth).map(|pixel| Observation { image: d.id, pixel })
                })
                .collect()
        })
        .collect()
}

const MAX_QUERY_ATTEMPTS: usize = 200;

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, SimError> {
    if spec.num_db == 0 || spec.num_points == 0 || spec.num_queries == 0 {
        return Err(SimError::GenerationFailed("counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.intrinsics;
    let mut db_images = Vec::with_capacity(spec.num_db);
    let mut points_gt = Vec::with_capacity(spec.num_points);
    let n = spec.num_db;
    let half_tan = (k.cy / k.fy) * 0.95;

    match spec.layout {
        Layout::Street => {
            let base = street_base_rotation();
            for i in 0..n {
                let c = Vec3::new(
                    i as f64 * spec.spacing + rng.random_range(-0.2..=0.2) * spec.spacing,
                    rng.random_range(-1.0..=1.0) * spec.lateral_jitter,
                    rng.random_range(-0.1..=0.1) * spec.spacing,
                );
                let r = base * small_rotation(&mut rng, 0.05, 0.02, 0.02);
                db_images.push(DbImage {
                    id: DbImageId(i as u32),
                    pose: Pose::from_center(r, c),
                    intrinsics: k,
                    capture_index: i,
                    depth_factor: 1.0,
                });
            }
            let length = (n - 1) as f64 * spec.spacing;
            let margin = spec.depth_max * k.cx / k.fx;
            let (lo, hi) = (spec.depth_min.ln(), spec.depth_max.ln());
            for _ in 0..spec.num_points {
                // Log-uniform depth keeps the visible count roughly uniform over depth.
                let d = rng.random_range(lo..hi).exp();
                let x = rng.random_range(-margin..length + margin);
                let z = rng.random_range(-half_tan..half_tan) * d;
                points_gt.push(Vec3::new(x, d, z));
            }
        }
        Layout::Room => {
            for i in 0..n {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                let c = Vec3::new(spec.spacing * a.cos(), spec.spacing * a.sin(), rng.random_range(-0.2..=0.2));
                let target = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
                let r = look_at(&c, &target);
                db_images.push(DbImage {
                    id: DbImageId(i as u32),
                    pose: Pose::from_center(r, c),
                    intrinsics: k,
                    capture_index: i,
                    depth_factor: 1.0,
                });
            }
            let normal = Normal::new(0.0, 1.0).unwrap();
            for _ in 0..spec.num_points {
                let dir =
                    Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)).normalize();
                let r = rng.random_range(spec.depth_min..spec.depth_max);
                points_gt.push(dir * r);
            }
        }
    }

    let visibility = visibility_of(&points_gt, &db_images, spec.max_view_depth);
    let points_obs = points_gt.iter().zip(&visibility).map(|(x, v)| (v.len() >= 2).then_some(*x)).collect();

    let mut image_sets: Vec<Vec<bool>> = vec![vec![false; spec.num_points]; n];
    for (i, obs) in visibility.iter().enumerate() {
        for o in obs {
            image_sets[o.image.0 as usize][i] = true;
        }
    }

    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut keys = Vec::with_capacity(spec.num_queries);
    for _ in 0..spec.num_queries {
        let mut found = None;
        for _ in 0..MAX_QUERY_ATTEMPTS {
            let (pose, key) = sample_query(spec, &mut rng);
            let mut shared = vec![0usize; n];
            for (i, x) in points_gt.iter().enumerate() {
                if observe(&pose, &k, x, spec.max_view_depth).is_some() {
                    for (img, set) in image_sets.iter().enumerate() {
                        if set[i] {
                            shared[img] += 1;
                        }
                    }
                }
            }
            if shared.iter().filter(|&&s| s >= spec.min_shared_points).count() >= spec.min_shared_images {
                found = Some((pose, key));
                break;
            }
        }
        let Some((pose, key)) = found else {
            return Err(SimError::GenerationFailed(format!(
                "no query pose sees {} points in {} db images",
                spec.min_shared_points, spec.min_shared_images
            )));
        };
        queries.push(pose);
        keys.push(key);
    }
    // Captured in trajectory order after the database.
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    let queries = order
        .into_iter()
        .enumerate()
        .map(|(rank, q)| QueryCamera { pose: queries[q], intrinsics: k, capture_index: n + rank })
        .collect();

    Ok(SyntheticScene { db_images, points_gt, points_obs, queries, visibility, max_view_depth: spec.max_view_depth })
}

/// A query pose near the db trajectory and its position along it.
fn sample_query(spec: &SceneSpec, rng: &mut impl Rng) -> (Pose, f64) {
    let yaw = spec.query_yaw_deg.to_radians();
    match spec.layout {
        Layout::Street => {
            let length = (spec.num_db - 1) as f64 * spec.spacing;
            let x = rng.random_range(0.0..=length);
            let c = Vec3::new(
                x,
                rng.random_range(-spec.query_offset..=spec.query_offset),
                rng.random_range(-0.2..=0.2) * spec.query_offset,
            );
            let r = street_base_rotation() * small_rotation(rng, yaw, 0.05, 0.03);
            (Pose::from_center(r, c), x)
        }
        Layout::Room => {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let radius = spec.spacing - rng.random_range(0.0..=spec.query_offset);
            let c = Vec3::new(radius * a.cos(), radius * a.sin(), rng.random_range(-0.3..=0.3));
            let r = small_rotation(rng, 0.03, 0.03, yaw) * look_at(&c, &Vec3::zeros());
            (Pose::from_center(r, c), a)
        }
    }
}

/// Keeps db images whose capture index is a multiple of `N`; points seen by
/// fewer than two kept images lose their 3D position.
pub fn sparsify(scene: &SyntheticScene, cfg: &SparsityConfig) -> SyntheticScene {
    let n = cfg.keep_every_n.max(1);
    let db_images: Vec<DbImage> = scene.db_images.iter().filter(|d| d.capture_index % n == 0).copied().collect();
    let kept: std::collections::BTreeSet<DbImageId> = db_images.iter().map(|d| d.id).collect();
    let visibility: Vec<Vec<Observation>> =
        scene.visibility.iter().map(|obs| obs.iter().filter(|o| kept.contains(&o.image)).copied().collect()).collect();
    let points_obs =
        scene.points_obs.iter().zip(&visibility).map(|(p, v)| if v.len() >= 2 { *p } else { None }).collect();
    SyntheticScene {
        db_images,
        points_gt: scene.points_gt.clone(),
        points_obs,
        queries: scene.queries.clone(),
        visibility,
        max_view_depth: scene.max_view_depth,
    }
}

/// Adds isotropic Gaussian noise to the available 3D points and draws a
/// log-normal depth factor for every db image.
pub fn corrupt(scene: &SyntheticScene, model: &CorruptionModel, seed: u64) -> SyntheticScene {
    let mut out = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if model.point_noise > 0.0 {
        let normal = Normal::new(0.0, model.point_noise).unwrap();
        for p in out.points_obs.iter_mut().flatten() {
            *p += Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    if model.depth_bias > 0.0 {
        let factor = LogNormal::new(0.0, model.depth_bias).unwrap();
        for d in &mut out.db_images {
            d.depth_factor = factor.sample(&mut rng);
        }
    }
    out
}

/// Db images ranked by the number of points they share with the query's
/// ground-truth view, ties broken by camera-center distance, then id.
pub fn retrieve(scene: &SyntheticScene, query_index: usize, k: usize) -> Vec<DbImageId> {
    retrieve_extended(scene, query_index, k, &[])
}

/// Sorts `(id, shared, distance)` by shared count descending, distance
/// ascending, id ascending, and keeps the first `k`.
pub(crate) fn rank_candidates(mut c: Vec<(DbImageId, usize, f64)>, k: usize) -> Vec<DbImageId> {
    c.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
    c.into_iter().take(k.max(1)).map(|(id, _, _)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_street(seed: u64) -> SyntheticScene {
        generate_scene(&SceneSpec::street(40, 600, 10, seed)).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small_street(3), small_street(3));
        assert_ne!(small_street(3), small_street(4));
    }

    #[test]
    fn street_centers_advance() {
        let s = generate_scene(&SceneSpec::street(100, 800, 5, 1)).unwrap();
        for w in s.db_images.windows(2) {
            assert!(w[1].pose.center().x > w[0].pose.center().x);
        }
    }

    #[test]
    fn visibility_reprojects() {
        for s in [small_street(5), generate_scene(&SceneSpec::room(30, 500, 5, 5)).unwrap()] {
            let db = s.database();
            for (i, obs) in s.visibility.iter().enumerate() {
                for o in obs {
                    let cam = db.get(o.image).unwrap();
                    let p = project(&cam.pose, &cam.intrinsics, &s.points_gt[i]).unwrap();
                    assert!((p - o.pixel).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn queries_meet_visibility_quota() {
        let spec = SceneSpec::street(40, 600, 10, 6);
        let s = generate_scene(&spec).unwrap();
        let pts = s.image_points();
        for q in 0..s.queries.len() {
            let vis: std::collections::BTreeSet<usize> = s.query_visibility(q).into_iter().map(|(i, _)| i).collect();
            let good = pts.values().filter(|v| v.iter().filter(|(i, _)| vis.contains(i)).count() >= 30).count();
            assert!(good >= 3);
        }
    }

    #[test]
    fn impossible_quota_fails() {
        let mut spec = SceneSpec::street(5, 10, 2, 1);
        spec.min_shared_points = 1000;
        assert!(matches!(generate_scene(&spec), Err(SimError::GenerationFailed(_))));
    }

    #[test]
    fn sparsify_keeps_every_nth() {
        let s = small_street(7);
        assert_eq!(sparsify(&s, &SparsityConfig { keep_every_n: 1 }), s);

        let mut big = s.clone();
        big.db_images =
            (0..231).map(|i| DbImage { id: DbImageId(i as u32), capture_index: i, ..s.db_images[0] }).collect();
        let kept: Vec<usize> =
            sparsify(&big, &SparsityConfig { keep_every_n: 50 }).db_images.iter().map(|d| d.capture_index).collect();
        assert_eq!(kept, vec![0, 50, 100, 150, 200]);
    }

    #[test]
    fn available_points_shrink_with_n() {
        let s = generate_scene(&SceneSpec::street(120, 1500, 5, 8)).unwrap();
        let counts: Vec<usize> = [1, 2, 5, 10, 20, 40]
            .iter()
            .map(|&n| sparsify(&s, &SparsityConfig { keep_every_n: n }).available_points())
            .collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        assert!(counts[5] < counts[0]);
    }

    #[test]
    fn zero_corruption_is_identity() {
        let s = small_street(9);
        assert_eq!(corrupt(&s, &CorruptionModel::default(), 1), s);
    }

    #[test]
    fn point_noise_matches_chi_mean() {
        let spec = SceneSpec { num_points: 10_000, ..SceneSpec::room(30, 10_000, 2, 10) };
        let mut s = generate_scene(&spec).unwrap();
        s.points_obs = s.points_gt.iter().map(|p| Some(*p)).collect();
        let model = CorruptionModel { point_noise: 0.05, ..Default::default() };
        let c = corrupt(&s, &model, 11);
        let mean = c.points_obs.iter().zip(&c.points_gt).map(|(o, g)| (o.unwrap() - g).norm()).sum::<f64>() / 10_000.0;
        let expected = 0.05 * (8.0 / std::f64::consts::PI).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn depth_bias_differs_per_image() {
        let s = small_street(12);
        let c = corrupt(&s, &CorruptionModel { depth_bias: 0.1, ..Default::default() }, 2);
        assert_ne!(c.db_images[0].depth_factor, c.db_images[1].depth_factor);
        assert_eq!(c.points_obs, s.points_obs);
    }

    #[test]
    fn colocated_query_retrieves_its_image() {
        let mut s = small_street(13);
        s.queries[0].pose = s.db_images[17].pose;
        assert_eq!(retrieve(&s, 0, 5)[0], DbImageId(17));
        assert_eq!(retrieve(&s, 0, 1000).len(), s.db_images.len());
    }

    #[test]
    fn retrieval_matches_brute_force() {
        let s = small_street(14);
        for q in 0..s.queries.len() {
            let vis: Vec<usize> = s.query_visibility(q).into_iter().map(|(i, _)| i).collect();
            let mut scored: Vec<(DbImageId, usize, f64)> = s
                .db_images
                .iter()
                .map(|d| {
                    let shared = vis
                        .iter()
                        .filter(|&&i| observe(&d.pose, &d.intrinsics, &s.points_gt[i], 40.0).is_some())
                        .count();
                    (d.id, shared, (d.pose.center() - s.queries[q].pose.center()).norm())
                })
                .collect();
            scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)));
            let expected: Vec<DbImageId> = scored.iter().take(10).map(|s| s.0).collect();
            assert_eq!(retrieve(&s, q, 10), expected);
        }
    }

    #[test]
    fn processing_order_handles_reference_in_between() {
        let mut s = small_street(15);
        for (i, d) in s.db_images.iter_mut().enumerate() {
            d.capture_index = 100 + i;
        }
        let caps = [10, 20, 30, 200, 210, 220, 230, 240, 250, 260];
        for (q, c) in s.queries.iter_mut().zip(caps) {
            q.capture_index = c;
        }
        assert_eq!(s.processing_order(), vec![2, 1, 0, 3, 4, 5, 6, 7, 8, 9]);
    }
}
