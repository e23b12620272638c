use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    project, Correspondence2D2D, Correspondence2D3D, Database, DbImageId, Intrinsics, Pose, Vec2, Vec3,
};

use super::{observe, rank_candidates, CorruptionModel, SyntheticScene};

/// A localized query added to the database: its estimated pose and the 3D
/// points its features were associated with.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedEntry {
    pub id: DbImageId,
    pub query_index: usize,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    /// Point index of a query feature to the 3D point it was matched to.
    pub associations: BTreeMap<usize, Vec3>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub m2d: Vec<Correspondence2D2D>,
    pub m3d: Vec<Correspondence2D3D>,
}

/// Settings of [`filter_points`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Reprojection threshold, px.
    pub re_thr: f64,
    /// Smallest number of consistent images.
    pub min_count: usize,
    /// Retrieval depth the count threshold refers to; reported only.
    pub denom: usize,
    /// Smallest fraction of observing images that must be consistent.
    pub rel_thr: Option<f64>,
}

/// Database with extended entries placed at their estimated poses.
pub fn extended_database(scene: &SyntheticScene, extended: &[ExtendedEntry]) -> Database {
    let mut db = scene.database();
    for e in extended {
        db.insert(e.id, crate::geometry::DbCamera { pose: e.pose, intrinsics: e.intrinsics });
    }
    db
}

/// Retrieval over original and extended entries. Extended entries are
/// scored with their estimated poses.
pub fn retrieve_extended(
    scene: &SyntheticScene,
    query_index: usize,
    k: usize,
    extended: &[ExtendedEntry],
) -> Vec<DbImageId> {
    let q = &scene.queries[query_index];
    let mut visible = vec![false; scene.points_gt.len()];
    for (i, _) in scene.query_visibility(query_index) {
        visible[i] = true;
    }
    let mut shared: BTreeMap<DbImageId, usize> = scene.db_images.iter().map(|d| (d.id, 0)).collect();
    for (i, obs) in scene.visibility.iter().enumerate() {
        if visible[i] {
            for o in obs {
                if let Some(c) = shared.get_mut(&o.image) {
                    *c += 1;
                }
            }
        }
    }
    let mut candidates: Vec<(DbImageId, usize, f64)> =
        scene.db_images.iter().map(|d| (d.id, shared[&d.id], (d.pose.center() - q.pose.center()).norm())).collect();
    for e in extended {
        let count = scene
            .points_gt
            .iter()
            .enumerate()
            .filter(|(i, x)| visible[*i] && observe(&e.pose, &e.intrinsics, x, scene.max_view_depth).is_some())
            .count();
        candidates.push((e.id, count, (e.pose.center() - q.pose.center()).norm()));
    }
    rank_candidates(candidates, k)
}

struct Candidate {
    image: DbImageId,
    point: usize,
    query_pixel: Vec2,
    db_pixel: Vec2,
    outlier: bool,
}

enum Source<'a> {
    Static { pose: Pose, intrinsics: Intrinsics, depth_factor: f64, points: Vec<(usize, Vec2)> },
    Extended { entry: &'a ExtendedEntry, points: Vec<(usize, Vec2)> },
}

/// Synthesizes 2D-2D matches to the retrieved db images and lifts them to
/// 2D-3D matches; see [`generate_matches_extended`].
pub fn generate_matches(
    scene: &SyntheticScene,
    query_index: usize,
    retrieved: &[DbImageId],
    model: &CorruptionModel,
    seed: u64,
) -> MatchSet {
    generate_matches_extended(scene, query_index, retrieved, &[], model, seed)
}

/// Every point seen by the query and a retrieved image yields a 2D-2D match
/// with Gaussian pixel noise. Exactly `round(outlier_ratio n)` matches get a
/// uniformly random db pixel and exactly `round(drop_3d_fraction n)` get no
/// 3D point. The rest are lifted through the image's geometry (scaled by its
/// depth factor) or, for extended entries, through their stored
/// associations. Each query feature keeps the lifting from the
/// highest-ranked image.
pub fn generate_matches_extended(
    scene: &SyntheticScene,
    query_index: usize,
    retrieved: &[DbImageId],
    extended: &[ExtendedEntry],
    model: &CorruptionModel,
    seed: u64,
) -> MatchSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, model.pixel_sigma.max(0.0)).unwrap();
    let jitter = |rng: &mut ChaCha8Rng| {
        if model.pixel_sigma > 0.0 {
            Vec2::new(noise.sample(rng), noise.sample(rng))
        } else {
            Vec2::zeros()
        }
    };

    let query_points = scene.query_visibility(query_index);
    let mut query_pixels: Vec<Option<Vec2>> = vec![None; scene.points_gt.len()];
    for (i, p) in &query_points {
        query_pixels[*i] = Some(p + jitter(&mut rng));
    }

    let image_points = scene.image_points();
    let sources: Vec<(DbImageId, Source)> = retrieved
        .iter()
        .filter_map(|id| {
            if let Some(d) = scene.db_image(*id) {
                let points = image_points.get(id).cloned().unwrap_or_default();
                return Some((
                    *id,
                    Source::Static { pose: d.pose, intrinsics: d.intrinsics, depth_factor: d.depth_factor, points },
                ));
            }
            let entry = extended.iter().find(|e| e.id == *id)?;
            let truth = &scene.queries[entry.query_index];
            let points = scene
                .points_gt
                .iter()
                .enumerate()
                .filter_map(|(i, x)| observe(&truth.pose, &truth.intrinsics, x, scene.max_view_depth).map(|p| (i, p)))
                .collect();
            Some((*id, Source::Extended { entry, points }))
        })
        .collect();

    let mut candidates = Vec::new();
    let mut source_of = Vec::new();
    for (s, (id, source)) in sources.iter().enumerate() {
        let points = match source {
            Source::Static { points, .. } | Source::Extended { points, .. } => points,
        };
        for (i, pixel) in points {
            let Some(q) = query_pixels[*i] else { continue };
            candidates.push(Candidate {
                image: *id,
                point: *i,
                query_pixel: q,
                db_pixel: pixel + jitter(&mut rng),
                outlier: false,
            });
            source_of.push(s);
        }
    }

    let n = candidates.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_out = ((model.outlier_ratio * n as f64).round() as usize).min(n);
    for &j in &order[..n_out] {
        let k = match &sources[source_of[j]].1 {
            Source::Static { intrinsics, .. } => intrinsics,
            Source::Extended { entry, .. } => &entry.intrinsics,
        };
        candidates[j].db_pixel = Vec2::new(rng.random_range(0.0..k.width()), rng.random_range(0.0..k.height()));
        candidates[j].outlier = true;
    }
    order.shuffle(&mut rng);
    let n_drop = ((model.drop_3d_fraction * n as f64).round() as usize).min(n);
    let mut dropped = vec![false; n];
    for &j in &order[..n_drop] {
        dropped[j] = true;
    }

    let mut m3d = Vec::new();
    let mut lifted_outlier = Vec::new();
    let mut lifted: BTreeSet<usize> = BTreeSet::new();
    for (j, c) in candidates.iter().enumerate() {
        if dropped[j] || lifted.contains(&c.point) {
            continue;
        }
        let world = match &sources[source_of[j]].1 {
            Source::Static { pose, intrinsics, depth_factor, .. } => scene.points_obs[c.point].map(|x| {
                let center = pose.center();
                let x = if c.outlier {
                    let depth = pose.transform(&x).z;
                    pose.inverse().transform(&intrinsics.backproject(&c.db_pixel, depth))
                } else {
                    x
                };
                if *depth_factor == 1.0 {
                    x
                } else {
                    center + (x - center) * *depth_factor
                }
            }),
            Source::Extended { entry, .. } => {
                if c.outlier {
                    let keys: Vec<&Vec3> = entry.associations.values().collect();
                    (!keys.is_empty()).then(|| *keys[rng.random_range(0..keys.len())])
                } else {
                    entry.associations.get(&c.point).copied()
                }
            }
        };
        if let Some(world_point) = world {
            lifted.insert(c.point);
            m3d.push(Correspondence2D3D { query_pixel: c.query_pixel, world_point, feature: c.point });
            lifted_outlier.push(c.outlier);
        }
    }

    let target = (model.lift_outlier_ratio * m3d.len() as f64).round() as usize;
    let current = lifted_outlier.iter().filter(|&&o| o).count();
    if target > current && m3d.len() >= 2 {
        let mut clean: Vec<usize> = (0..m3d.len()).filter(|&j| !lifted_outlier[j]).collect();
        clean.shuffle(&mut rng);
        for &j in clean.iter().take(target - current) {
            let mut other = rng.random_range(0..m3d.len() - 1);
            if other >= j {
                other += 1;
            }
            m3d[j].world_point = m3d[other].world_point;
        }
    }

    let m2d = candidates
        .into_iter()
        .map(|c| Correspondence2D2D {
            query_pixel: c.query_pixel,
            db_pixel: c.db_pixel,
            db_image: c.image,
            feature: c.point,
        })
        .collect();
    MatchSet { m2d, m3d }
}

/// Keeps a 2D-3D match iff its 3D point reprojects within `re_thr` of the
/// matched pixel in at least `min_count` of the retrieved images that
/// contain the query feature, and in at least `rel_thr` of them.
pub fn filter_points(
    m3d: &[Correspondence2D3D],
    m2d: &[Correspondence2D2D],
    db: &Database,
    cfg: &FilterConfig,
) -> Vec<Correspondence2D3D> {
    let mut by_feature: BTreeMap<usize, Vec<&Correspondence2D2D>> = BTreeMap::new();
    for m in m2d {
        by_feature.entry(m.feature).or_default().push(m);
    }
    m3d.iter()
        .filter(|m| {
            let observing = by_feature.get(&m.feature).map(Vec::as_slice).unwrap_or(&[]);
            let mut views = 0usize;
            let mut consistent = 0usize;
            for o in observing {
                let Some(cam) = db.get(o.db_image) else { continue };
                views += 1;
                if let Ok(p) = project(&cam.pose, &cam.intrinsics, &m.world_point) {
                    if (p - o.db_pixel).norm() < cfg.re_thr {
                        consistent += 1;
                    }
                }
            }
            consistent >= cfg.min_count && cfg.rel_thr.is_none_or(|r| consistent as f64 >= r * views as f64)
        })
        .copied()
        .collect()
}
