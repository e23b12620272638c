//! RANSAC pose estimators over 2D-3D matches (P3P), 2D-2D matches (E5+1),
//! and both at once, plus the post-hoc Select rule and the ground-truth
//! Oracle baseline.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{rotation_angle, Correspondence2D2D, Correspondence2D3D, Database, Intrinsics, Pose};
use crate::refine::{refine_report, Objective, Provenance, RefineConfig};
use crate::scoring::{better, evaluate_hypothesis, score, MatchScoreStats, ScoringFunction};
use crate::solvers::{solve_e5p1, solve_p3p, SolverTolerances};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub t3d: f64,
    pub t2d: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub scoring: ScoringFunction,
    pub lo: RefineConfig,
    pub select_alpha: f64,
    pub rng_seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            t3d: 4.0,
            t2d: 4.0,
            max_iterations: 5000,
            confidence: 0.999,
            scoring: ScoringFunction::MultMsac,
            lo: RefineConfig::default(),
            select_alpha: 0.8,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseResult {
    pub pose: Pose,
    pub stats: MatchScoreStats,
    pub provenance: Provenance,
    pub iterations_run: usize,
    pub success: bool,
}

impl PoseResult {
    pub fn failed(provenance: Provenance, iterations_run: usize) -> Self {
        Self { pose: Pose::identity(), stats: MatchScoreStats::default(), provenance, iterations_run, success: false }
    }
}

/// Smallest inlier support for a hypothesis of each solver to count as a success.
const MIN_P3P_INLIERS: usize = 3;
const MIN_E5P1_INLIERS: usize = 6;

const STREAM_P3P: u64 = 0x5033;
const STREAM_E5P1: u64 = 0x4535;

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for one sample kind at one iteration.
fn substream(seed: u64, iteration: usize, kind: u64) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(seed ^ splitmix64(kind)) ^ iteration as u64);
    ChaCha8Rng::seed_from_u64(s)
}

/// 2D-2D matches grouped by db image, restricted to images in the database.
struct E5p1Sampler {
    groups: Vec<Vec<usize>>,
    /// Indices into `groups` of images with at least five matches.
    anchors: Vec<usize>,
}

impl E5p1Sampler {
    fn new(m2d: &[Correspondence2D2D], db: &Database) -> Option<Self> {
        let mut by_image: std::collections::BTreeMap<_, Vec<usize>> = std::collections::BTreeMap::new();
        for (i, m) in m2d.iter().enumerate() {
            if db.get(m.db_image).is_some() {
                by_image.entry(m.db_image).or_default().push(i);
            }
        }
        let groups: Vec<Vec<usize>> = by_image.into_values().collect();
        if groups.len() < 2 {
            return None;
        }
        let anchors: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].len() >= 5).collect();
        if anchors.is_empty() {
            return None;
        }
        Some(Self { groups, anchors })
    }

    fn sample(&self, rng: &mut impl Rng) -> ([usize; 5], usize) {
        let a = self.anchors[rng.random_range(0..self.anchors.len())];
        let group = &self.groups[a];
        let picks = index::sample(rng, group.len(), 5);
        let five = [0, 1, 2, 3, 4].map(|i| group[picks.index(i)]);
        let others: usize = self.groups.iter().enumerate().filter(|(g, _)| *g != a).map(|(_, v)| v.len()).sum();
        let mut r = rng.random_range(0..others);
        for (g, v) in self.groups.iter().enumerate() {
            if g == a {
                continue;
            }
            if r < v.len() {
                return (five, v[r]);
            }
            r -= v.len();
        }
        unreachable!("sixth match index out of range")
    }
}

/// How hypotheses are ranked by one estimator.
#[derive(Clone, Copy)]
enum Ranking {
    /// MSAC over reprojection errors only.
    Only3d,
    /// MSAC over Sampson errors only.
    Only2d,
    Combined(ScoringFunction),
}

impl Ranking {
    fn function(self) -> ScoringFunction {
        match self {
            Ranking::Only3d | Ranking::Only2d => ScoringFunction::SumMsac,
            Ranking::Combined(f) => f,
        }
    }

    fn objective(self, cfg: &RefineConfig, provenance: Provenance) -> Objective {
        match self {
            Ranking::Only3d => Objective::ONLY_3D,
            Ranking::Only2d => Objective::ONLY_2D,
            Ranking::Combined(_) => Objective::select(cfg.strategy, provenance),
        }
    }
}

struct Incumbent {
    pose: Pose,
    stats: MatchScoreStats,
    score: f64,
    provenance: Provenance,
}

struct Problem<'a> {
    m3d: &'a [Correspondence2D3D],
    m2d: &'a [Correspondence2D2D],
    db: &'a Database,
    k: &'a Intrinsics,
    cfg: &'a EstimatorConfig,
    ranking: Ranking,
    /// Receives the incumbent score each time the incumbent changes.
    trace: Option<&'a std::cell::RefCell<Vec<f64>>>,
}

impl Problem<'_> {
    fn evaluate(&self, pose: &Pose) -> (MatchScoreStats, f64) {
        let (m3d, m2d): (&[Correspondence2D3D], &[Correspondence2D2D]) = match self.ranking {
            Ranking::Only3d => (self.m3d, &[]),
            Ranking::Only2d => (&[], self.m2d),
            Ranking::Combined(_) => (self.m3d, self.m2d),
        };
        let stats = evaluate_hypothesis(pose, self.k, m3d, m2d, self.db, self.cfg.t3d, self.cfg.t2d);
        let s = score(&stats, self.ranking.function(), self.cfg.t3d, self.cfg.t2d);
        (stats, s)
    }

    /// Refines the incumbent on its inliers; keeps the result only if its
    /// score is not worse.
    fn refine(&self, inc: &mut Incumbent) {
        let inl3d: Vec<Correspondence2D3D> =
            self.m3d.iter().zip(&inc.stats.inlier_mask_3d).filter(|(_, &b)| b).map(|(m, _)| *m).collect();
        let inl2d: Vec<Correspondence2D2D> =
            self.m2d.iter().zip(&inc.stats.inlier_mask_2d).filter(|(_, &b)| b).map(|(m, _)| *m).collect();
        let objective = self.ranking.objective(&self.cfg.lo, inc.provenance);
        let Ok(report) = refine_report(
            &inc.pose,
            objective,
            &inl3d,
            &inl2d,
            self.db,
            self.k,
            &self.cfg.lo,
            self.cfg.t3d,
            self.cfg.t2d,
        ) else {
            return;
        };
        if report.pose == inc.pose {
            return;
        }
        let (stats, s) = self.evaluate(&report.pose);
        if !better(inc.score, s, self.ranking.function()) {
            inc.pose = report.pose;
            inc.stats = stats;
            inc.score = s;
        }
    }

    fn consider(&self, best: &mut Option<Incumbent>, pose: Pose, provenance: Provenance) -> bool {
        let (stats, s) = self.evaluate(&pose);
        if !s.is_finite() {
            return false;
        }
        if let Some(inc) = best {
            if !better(s, inc.score, self.ranking.function()) {
                return false;
            }
        }
        let mut inc = Incumbent { pose, stats, score: s, provenance };
        self.refine(&mut inc);
        self.record(inc.score);
        *best = Some(inc);
        true
    }

    fn record(&self, score: f64) {
        if let Some(t) = self.trace {
            t.borrow_mut().push(score);
        }
    }

    fn required_iterations(&self, inc: &Incumbent) -> usize {
        let (inliers, total, s) = match inc.provenance {
            Provenance::P3P => (inc.stats.i3d, inc.stats.n3d, 3),
            _ => (inc.stats.i2d, inc.stats.n2d, 6),
        };
        adaptive_iterations(inliers, total, s, self.cfg.confidence, self.cfg.max_iterations)
    }

    fn run(&self, use_p3p: bool, use_e5p1: bool, provenance: Provenance) -> PoseResult {
        let sampler = if use_e5p1 { E5p1Sampler::new(self.m2d, self.db) } else { None };
        let use_p3p = use_p3p && self.m3d.len() >= 3;
        if !use_p3p && sampler.is_none() {
            return PoseResult::failed(provenance, 0);
        }
        let tol = SolverTolerances::default();
        let mut best: Option<Incumbent> = None;
        let mut limit = self.cfg.max_iterations;
        let mut iterations = 0;
        while iterations < limit {
            let it = iterations;
            iterations += 1;
            let mut improved = false;
            if use_p3p {
                let mut rng = substream(self.cfg.rng_seed, it, STREAM_P3P);
                let idx = index::sample(&mut rng, self.m3d.len(), 3);
                let sample = [self.m3d[idx.index(0)], self.m3d[idx.index(1)], self.m3d[idx.index(2)]];
                if let Ok(poses) = solve_p3p(&sample, self.k, &tol) {
                    for pose in poses {
                        improved |= self.consider(&mut best, pose, Provenance::P3P);
                    }
                }
            }
            if let Some(sampler) = &sampler {
                let mut rng = substream(self.cfg.rng_seed, it, STREAM_E5P1);
                let (five, one) = sampler.sample(&mut rng);
                let five = five.map(|i| self.m2d[i]);
                if let Ok(sols) = solve_e5p1(&five, &self.m2d[one], self.db, self.k, &tol) {
                    for sol in sols {
                        improved |= self.consider(&mut best, sol.pose, Provenance::E5p1);
                    }
                }
            }
            if improved {
                if let Some(inc) = &best {
                    limit = self.required_iterations(inc).max(1);
                }
            }
        }
        let Some(mut inc) = best else {
            return PoseResult::failed(provenance, iterations);
        };
        self.refine(&mut inc);
        self.record(inc.score);
        let success = match inc.provenance {
            Provenance::P3P => inc.stats.i3d >= MIN_P3P_INLIERS,
            _ => inc.stats.i2d >= MIN_E5P1_INLIERS,
        };
        if !success {
            return PoseResult::failed(provenance, iterations);
        }
        PoseResult { pose: inc.pose, stats: inc.stats, provenance: inc.provenance, iterations_run: iterations, success }
    }
}

/// Iterations needed to draw an all-inlier sample of size `s` with the given
/// confidence, capped at `max`.
pub fn adaptive_iterations(inliers: usize, total: usize, s: i32, confidence: f64, max: usize) -> usize {
    if total == 0 || inliers == 0 {
        return max;
    }
    let w = (inliers as f64 / total as f64).powi(s);
    if w >= 1.0 {
        return 1;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w).ln();
    if !n.is_finite() {
        return max;
    }
    (n.ceil().max(1.0) as usize).min(max)
}

/// LO-RANSAC over 2D-3D matches with the P3P solver.
pub fn ransac_p3p(m3d: &[Correspondence2D3D], k_query: &Intrinsics, cfg: &EstimatorConfig) -> PoseResult {
    let db = Database::new();
    let problem = Problem { m3d, m2d: &[], db: &db, k: k_query, cfg, ranking: Ranking::Only3d, trace: None };
    problem.run(true, false, Provenance::P3P)
}

/// LO-RANSAC over 2D-2D matches with the E5+1 solver.
pub fn ransac_e5p1(
    m2d: &[Correspondence2D2D],
    db: &Database,
    k_query: &Intrinsics,
    cfg: &EstimatorConfig,
) -> PoseResult {
    let problem = Problem { m3d: &[], m2d, db, k: k_query, cfg, ranking: Ranking::Only2d, trace: None };
    problem.run(false, true, Provenance::E5p1)
}

/// Runs both solvers in every iteration and ranks all hypotheses on both
/// match sets under `cfg.scoring`.
pub fn ransac_adaptive(
    m3d: &[Correspondence2D3D],
    m2d: &[Correspondence2D2D],
    db: &Database,
    k_query: &Intrinsics,
    cfg: &EstimatorConfig,
) -> PoseResult {
    let problem = Problem { m3d, m2d, db, k: k_query, cfg, ranking: Ranking::Combined(cfg.scoring), trace: None };
    problem.run(true, true, Provenance::Adaptive)
}

/// Picks the P3P pose iff its 2D-2D inlier count exceeds `α` times that of
/// the E5+1 pose, both evaluated on the same 2D-2D matches.
pub fn select(
    p3p: &PoseResult,
    e5p1: &PoseResult,
    m2d: &[Correspondence2D2D],
    db: &Database,
    k_query: &Intrinsics,
    cfg: &EstimatorConfig,
) -> PoseResult {
    let i2d = |r: &PoseResult| {
        if !r.success {
            return 0;
        }
        evaluate_hypothesis(&r.pose, k_query, &[], m2d, db, cfg.t3d, cfg.t2d).i2d
    };
    if select_p3p(i2d(p3p), i2d(e5p1), cfg.select_alpha) {
        p3p.clone()
    } else {
        e5p1.clone()
    }
}

pub fn select_p3p(i2d_p3p: usize, i2d_e5p1: usize, alpha: f64) -> bool {
    i2d_p3p as f64 > alpha * i2d_e5p1 as f64
}

/// Position error (scene units) and orientation error (degrees) of `est` against `gt`.
pub fn pose_difference(est: &Pose, gt: &Pose) -> (f64, f64) {
    let t = (est.center() - gt.center()).norm();
    let r = rotation_angle(&(est.rotation * gt.rotation.transpose())).to_degrees();
    (t, r)
}

/// Combined error used by the Oracle: max of position error in centimeters
/// and orientation error in degrees; `+inf` for failed results.
pub fn oracle_error(r: &PoseResult, gt: &Pose) -> f64 {
    if !r.success {
        return f64::INFINITY;
    }
    let (t, deg) = pose_difference(&r.pose, gt);
    (100.0 * t).max(deg)
}

/// The result with the smaller ground-truth error; ties keep `p3p`.
pub fn oracle(p3p: &PoseResult, e5p1: &PoseResult, gt: &Pose) -> PoseResult {
    if !p3p.success && e5p1.success {
        return e5p1.clone();
    }
    if oracle_error(e5p1, gt) < oracle_error(p3p, gt) {
        e5p1.clone()
    } else {
        p3p.clone()
    }
}
