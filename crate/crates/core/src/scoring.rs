//! Residual evaluation over both match sets and the pose scoring functions
//! used to compare hypotheses.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{
    fundamental_between, reprojection_error, sampson_error_pixels, Correspondence2D2D, Correspondence2D3D, Database,
    DbImageId, Intrinsics, Mat3, Pose,
};

/// Inlier counts and truncated squared-residual sums of one hypothesis.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchScoreStats {
    pub i3d: usize,
    pub i2d: usize,
    pub n3d: usize,
    pub n2d: usize,
    /// `Σ min(e², t3d²)` over all 2D-3D matches, px².
    pub m3d: f64,
    /// `Σ min(s, t2d²)` over all 2D-2D matches with `s` the squared Sampson error, px².
    pub m2d: f64,
    pub inlier_mask_3d: Vec<bool>,
    pub inlier_mask_2d: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoringFunction {
    SumInliers,
    MultInliers,
    SumInlierRatios,
    SumMsac,
    MultMsac,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

impl ScoringFunction {
    pub const ALL: [ScoringFunction; 5] = [
        ScoringFunction::SumInliers,
        ScoringFunction::MultInliers,
        ScoringFunction::SumInlierRatios,
        ScoringFunction::SumMsac,
        ScoringFunction::MultMsac,
    ];

    pub fn direction(self) -> Direction {
        match self {
            Self::SumInliers | Self::MultInliers | Self::SumInlierRatios => Direction::Maximize,
            Self::SumMsac | Self::MultMsac => Direction::Minimize,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SumInliers => "sum_inl",
            Self::MultInliers => "mult_inl",
            Self::SumInlierRatios => "sum_inl_rat",
            Self::SumMsac => "sum_msac",
            Self::MultMsac => "mult_msac",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Fundamental matrices of one query pose against the database images it
/// is matched to, computed once per hypothesis.
pub struct FundamentalCache<'a> {
    pose: Pose,
    k_query: Intrinsics,
    db: &'a Database,
    cache: HashMap<DbImageId, Option<Mat3>>,
}

impl<'a> FundamentalCache<'a> {
    pub fn new(pose: &Pose, k_query: &Intrinsics, db: &'a Database) -> Self {
        Self { pose: *pose, k_query: *k_query, db, cache: HashMap::new() }
    }

    pub fn get(&mut self, id: DbImageId) -> Option<Mat3> {
        let (pose, k, db) = (self.pose, self.k_query, self.db);
        *self
            .cache
            .entry(id)
            .or_insert_with(|| db.get(id).map(|cam| fundamental_between(&pose, &k, &cam.pose, &cam.intrinsics)))
    }

    /// Squared Sampson error of a match; `+inf` for unknown images or degenerate geometry.
    pub fn sampson(&mut self, m: &Correspondence2D2D) -> f64 {
        match self.get(m.db_image) {
            Some(f) => sampson_error_pixels(&f, &m.query_pixel, &m.db_pixel),
            None => f64::INFINITY,
        }
    }
}

/// Scores a pose against both match sets. Inliers use a strict `<` test.
pub fn evaluate_hypothesis(
    pose: &Pose,
    k_query: &Intrinsics,
    m3d: &[Correspondence2D3D],
    m2d: &[Correspondence2D2D],
    db: &Database,
    t3d: f64,
    t2d: f64,
) -> MatchScoreStats {
    let t3_sq = t3d * t3d;
    let t2_sq = t2d * t2d;
    let mut stats = MatchScoreStats {
        n3d: m3d.len(),
        n2d: m2d.len(),
        inlier_mask_3d: Vec::with_capacity(m3d.len()),
        inlier_mask_2d: Vec::with_capacity(m2d.len()),
        ..Default::default()
    };
    for m in m3d {
        let e = reprojection_error(pose, k_query, m);
        let inlier = e < t3d;
        stats.inlier_mask_3d.push(inlier);
        if inlier {
            stats.i3d += 1;
            stats.m3d += e * e;
        } else {
            stats.m3d += t3_sq;
        }
    }
    let mut cache = FundamentalCache::new(pose, k_query, db);
    for m in m2d {
        let s = cache.sampson(m);
        let inlier = s < t2_sq;
        stats.inlier_mask_2d.push(inlier);
        if inlier {
            stats.i2d += 1;
            stats.m2d += s;
        } else {
            stats.m2d += t2_sq;
        }
    }
    stats
}

/// Combined score. A modality without any matches contributes nothing: 0 to
/// the sums and the multiplicative identity to the products.
pub fn score(stats: &MatchScoreStats, f: ScoringFunction, t3d: f64, t2d: f64) -> f64 {
    let has3 = stats.n3d > 0;
    let has2 = stats.n2d > 0;
    let product = |a: f64, b: f64| match (has3, has2) {
        (true, true) => a * b,
        (true, false) => a,
        (false, true) => b,
        (false, false) => 0.0,
    };
    match f {
        ScoringFunction::SumInliers => (stats.i3d + stats.i2d) as f64,
        ScoringFunction::SumInlierRatios => {
            let r3 = if has3 { stats.i3d as f64 / stats.n3d as f64 } else { 0.0 };
            let r2 = if has2 { stats.i2d as f64 / stats.n2d as f64 } else { 0.0 };
            r3 + r2
        }
        ScoringFunction::MultInliers => product(stats.i3d as f64, stats.i2d as f64),
        ScoringFunction::SumMsac => stats.m3d / (t3d * t3d) + stats.m2d / (t2d * t2d),
        ScoringFunction::MultMsac => product(stats.m3d, stats.m2d),
    }
}

/// Strict improvement of `candidate` over `incumbent`; ties keep the incumbent.
pub fn better(candidate: f64, incumbent: f64, f: ScoringFunction) -> bool {
    match f.direction() {
        Direction::Maximize => candidate > incumbent,
        Direction::Minimize => candidate < incumbent,
    }
}
