//! Method sweeps over sparsity and corruption grids, and the continuous
//! database-update protocol.

use std::collections::BTreeMap;
use std::time::Instant;

use duoloc_core::estimator::{
    oracle, ransac_adaptive, ransac_e5p1, ransac_p3p, select, splitmix64, EstimatorConfig, PoseResult,
};
use duoloc_core::geometry::{Correspondence2D2D, Correspondence2D3D, Database};
use duoloc_core::sim::{
    corrupt, extended_database, filter_points, generate_matches_extended, generate_scene, retrieve_extended, sparsify,
    ExtendedEntry, MatchSet, SyntheticScene,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BenchConfig, Cell, Method};
use crate::metrics::{median, pose_error, recall, PoseError, Threshold, DEFAULT_THRESHOLDS};
use crate::BenchError;

const SALT_CORRUPT: u64 = 0xC0;
const SALT_MATCHES: u64 = 0x3A;
const SALT_RANSAC: u64 = 0x5A;

/// Seed of one purpose and index, independent of the grid cell so that
/// cells differ only in the swept setting.
pub fn derive_seed(seed: u64, salt: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(salt)) ^ index)
}

/// One localization of one query by one method. Field order is the
/// results CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub scene_id: String,
    pub cell_id: String,
    pub method: String,
    pub query_index: usize,
    pub success: bool,
    pub trans_err_m: f64,
    pub rot_err_deg: f64,
    pub i3d: usize,
    pub i2d: usize,
    pub n3d: usize,
    pub n2d: usize,
    pub iterations: usize,
    pub wall_ms: f64,
    /// SHA-256 of the match buffers the method consumed.
    #[serde(skip)]
    pub match_hash: String,
}

impl QueryRecord {
    pub fn error(&self) -> PoseError {
        if self.success {
            PoseError { translation_m: self.trans_err_m, rotation_deg: self.rot_err_deg }
        } else {
            PoseError::FAILED
        }
    }
}

/// Aggregate of one (cell, method) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scene_id: String,
    pub cell_id: String,
    pub method: String,
    pub queries: usize,
    /// Recall at each report threshold, in order.
    pub recalls: Vec<f64>,
    pub median_trans_m: f64,
    pub median_rot_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub thresholds: Vec<Threshold>,
    pub rows: Vec<ReportRow>,
    /// Settings needed to re-run the report, echoed on every row.
    pub config_echo: String,
}

/// (scene_id, cell_id, method).
type GroupKey = (String, String, String);

impl RecallReport {
    /// Groups records by (cell, method) in order of first appearance.
    pub fn from_records(records: &[QueryRecord], thresholds: &[Threshold], config_echo: String) -> Self {
        let mut groups: Vec<(GroupKey, Vec<&QueryRecord>)> = Vec::new();
        let mut index: BTreeMap<GroupKey, usize> = BTreeMap::new();
        for r in records {
            let key = (r.scene_id.clone(), r.cell_id.clone(), r.method.clone());
            let i = *index.entry(key.clone()).or_insert_with(|| {
                groups.push((key, Vec::new()));
                groups.len() - 1
            });
            groups[i].1.push(r);
        }
        let rows = groups
            .into_iter()
            .map(|((scene_id, cell_id, method), rs)| {
                let errors: Vec<PoseError> = rs.iter().map(|r| r.error()).collect();
                ReportRow {
                    scene_id,
                    cell_id,
                    method,
                    queries: errors.len(),
                    recalls: thresholds.iter().map(|t| recall(&errors, t)).collect(),
                    median_trans_m: median(errors.iter().map(|e| e.translation_m)),
                    median_rot_deg: median(errors.iter().map(|e| e.rotation_deg)),
                }
            })
            .collect();
        Self { thresholds: thresholds.to_vec(), rows, config_echo }
    }

    pub fn row(&self, cell_id: &str, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.cell_id == cell_id && r.method == method)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<QueryRecord>,
    pub report: RecallReport,
}

impl RunOutput {
    fn new(records: Vec<QueryRecord>, cfg: &BenchConfig) -> Self {
        let report = RecallReport::from_records(&records, &DEFAULT_THRESHOLDS, cfg.echo());
        Self { records, report }
    }
}

/// Canonical little-endian encoding of both match buffers, hashed.
pub fn match_hash(m3d: &[Correspondence2D3D], m2d: &[Correspondence2D2D]) -> String {
    let mut h = Sha256::new();
    h.update((m3d.len() as u64).to_le_bytes());
    for m in m3d {
        for v in m.query_pixel.iter().chain(m.world_point.iter()) {
            h.update(v.to_le_bytes());
        }
        h.update((m.feature as u64).to_le_bytes());
    }
    h.update((m2d.len() as u64).to_le_bytes());
    for m in m2d {
        for v in m.query_pixel.iter().chain(m.db_pixel.iter()) {
            h.update(v.to_le_bytes());
        }
        h.update(m.db_image.0.to_le_bytes());
        h.update((m.feature as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything one query is localized against.
pub struct QueryInput<'a> {
    pub scene: &'a SyntheticScene,
    pub db: &'a Database,
    pub query_index: usize,
    pub matches: &'a MatchSet,
}

/// Result of one method on one query, with the hash of its inputs.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub result: PoseResult,
    pub match_hash: String,
    pub wall_ms: f64,
}

/// Runs every method on the same matches. P3P and E5+1 results are
/// computed once and reused by Select and Oracle.
pub fn localize_query(input: &QueryInput, methods: &[Method], est: &EstimatorConfig, timing: bool) -> Vec<MethodRun> {
    let QueryInput { scene, db, query_index, matches } = *input;
    let query = &scene.queries[query_index];
    let k = &query.intrinsics;
    let (m3d, m2d) = (matches.m3d.as_slice(), matches.m2d.as_slice());
    let timed = |f: &mut dyn FnMut() -> PoseResult| {
        let start = Instant::now();
        let r = f();
        (r, if timing { start.elapsed().as_secs_f64() * 1e3 } else { 0.0 })
    };
    let mut p3p: Option<(PoseResult, f64)> = None;
    let mut e5p1: Option<(PoseResult, f64)> = None;
    let baseline_p3p = |cache: &mut Option<(PoseResult, f64)>| {
        cache.get_or_insert_with(|| timed(&mut || ransac_p3p(m3d, k, est))).clone()
    };
    let baseline_e5p1 = |cache: &mut Option<(PoseResult, f64)>| {
        cache.get_or_insert_with(|| timed(&mut || ransac_e5p1(m2d, db, k, est))).clone()
    };
    methods
        .iter()
        .map(|&method| {
            let hash = match_hash(m3d, m2d);
            let (result, wall_ms) = match method {
                Method::P3P => baseline_p3p(&mut p3p),
                Method::E5p1 => baseline_e5p1(&mut e5p1),
                Method::Adaptive { scoring, lo } => {
                    let mut cfg = *est;
                    cfg.scoring = scoring;
                    cfg.lo.strategy = lo;
                    timed(&mut || ransac_adaptive(m3d, m2d, db, k, &cfg))
                }
                Method::Select { alpha } => {
                    let (a, ta) = baseline_p3p(&mut p3p);
                    let (b, tb) = baseline_e5p1(&mut e5p1);
                    let mut cfg = *est;
                    cfg.select_alpha = alpha;
                    let (r, t) = timed(&mut || select(&a, &b, m2d, db, k, &cfg));
                    (r, ta + tb + t)
                }
                Method::Oracle => {
                    let (a, ta) = baseline_p3p(&mut p3p);
                    let (b, tb) = baseline_e5p1(&mut e5p1);
                    (oracle(&a, &b, &query.pose), ta + tb)
                }
            };
            log::debug!("query {query_index} method {method}: matches {hash}");
            MethodRun { method, result, match_hash: hash, wall_ms }
        })
        .collect()
}

fn record(
    scene_id: &str,
    cell_id: &str,
    query_index: usize,
    gt: &duoloc_core::geometry::Pose,
    run: &MethodRun,
) -> QueryRecord {
    let r = &run.result;
    let err = if r.success { pose_error(&r.pose, gt) } else { PoseError::FAILED };
    QueryRecord {
        scene_id: scene_id.to_string(),
        cell_id: cell_id.to_string(),
        method: run.method.to_string(),
        query_index,
        success: r.success,
        trans_err_m: err.translation_m,
        rot_err_deg: err.rotation_deg,
        i3d: r.stats.i3d,
        i2d: r.stats.i2d,
        n3d: r.stats.n3d,
        n2d: r.stats.n2d,
        iterations: r.iterations_run,
        wall_ms: run.wall_ms,
        match_hash: run.match_hash.clone(),
    }
}

/// Matches of one query against the scene, optionally filtered.
pub fn query_matches(
    scene: &SyntheticScene,
    db: &Database,
    query_index: usize,
    extended: &[ExtendedEntry],
    cfg: &BenchConfig,
    cell: &Cell,
) -> MatchSet {
    let retrieved = retrieve_extended(scene, query_index, cfg.retrieval_k, extended);
    let seed = derive_seed(cfg.seed, SALT_MATCHES, query_index as u64);
    let mut matches = generate_matches_extended(scene, query_index, &retrieved, extended, &cfg.corruption(cell), seed);
    if cell.filter {
        matches.m3d = filter_points(&matches.m3d, &matches.m2d, db, &cfg.filter_config());
    }
    matches
}

fn estimator_for(cfg: &BenchConfig, base: &EstimatorConfig, query_index: usize) -> EstimatorConfig {
    EstimatorConfig { rng_seed: derive_seed(cfg.seed, SALT_RANSAC, query_index as u64), ..*base }
}

/// Scene of one cell: the base scene sparsified, then corrupted.
pub fn cell_scene(base: &SyntheticScene, cfg: &BenchConfig, cell: &Cell) -> SyntheticScene {
    let sparse = sparsify(base, &cfg.sparsity(cell));
    corrupt(&sparse, &cfg.corruption(cell), derive_seed(cfg.seed, SALT_CORRUPT, 0))
}

/// Localizes every query of a scene with every method.
pub fn localize_scene(scene: &SyntheticScene, cfg: &BenchConfig, cell: &Cell) -> Result<Vec<QueryRecord>, BenchError> {
    let methods = cfg.methods()?;
    let est = cfg.estimator()?;
    let db = scene.database();
    let cell_id = cell.label();
    let per_query: Vec<Vec<QueryRecord>> = (0..scene.queries.len())
        .into_par_iter()
        .map(|q| {
            let matches = query_matches(scene, &db, q, &[], cfg, cell);
            let input = QueryInput { scene, db: &db, query_index: q, matches: &matches };
            localize_query(&input, &methods, &estimator_for(cfg, &est, q), cfg.record_timing)
                .iter()
                .map(|run| record(&cfg.scene_id, &cell_id, q, &scene.queries[q].pose, run))
                .collect()
        })
        .collect();
    Ok(per_query.into_iter().flatten().collect())
}

/// Generates the scene once, then for every grid cell sparsifies and
/// corrupts it and localizes all queries with all methods. Matches are
/// generated once per query and cell and shared by every method.
pub fn run_sweep(cfg: &BenchConfig) -> Result<RunOutput, BenchError> {
    cfg.validate()?;
    let base = generate_scene(&cfg.scene_spec()?)?;
    let mut records = Vec::new();
    for cell in cfg.cells() {
        let scene = cell_scene(&base, cfg, &cell);
        log::info!("cell {}: {} db images, {} queries", cell.label(), scene.db_images.len(), scene.queries.len());
        records.extend(localize_scene(&scene, cfg, &cell)?);
    }
    Ok(RunOutput::new(records, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Localize against the original database only.
    Static,
    /// Add every localized query to the database before the next one.
    Continuous,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Static => "static",
            Mode::Continuous => "continuous",
        }
    }
}

/// Result of a continuous run, with the database it grew.
#[derive(Debug, Clone)]
pub struct ContinuousOutput {
    pub output: RunOutput,
    pub extended: Vec<ExtendedEntry>,
    pub order: Vec<usize>,
}

/// Localizes queries one at a time in capture order with the configured
/// continuous method, on the base cell of the configuration. In continuous
/// mode each successful query joins the database with its estimated pose
/// and its inlier 2D-3D associations. Retrieval depth stays fixed.
pub fn run_continuous_detailed(cfg: &BenchConfig, mode: Mode) -> Result<ContinuousOutput, BenchError> {
    cfg.validate()?;
    let method = cfg.continuous_method()?;
    let est = cfg.estimator()?;
    let cell = cfg.cells()[0];
    let base = generate_scene(&cfg.scene_spec()?)?;
    let scene = cell_scene(&base, cfg, &cell);
    let cell_id = format!("{}_{}", mode.name(), cell.label());
    let order = scene.processing_order();
    let mut extended: Vec<ExtendedEntry> = Vec::new();
    let mut records = Vec::with_capacity(order.len());
    for &q in &order {
        let db = extended_database(&scene, &extended);
        let matches = query_matches(&scene, &db, q, &extended, cfg, &cell);
        let input = QueryInput { scene: &scene, db: &db, query_index: q, matches: &matches };
        let run = localize_query(&input, &[method], &estimator_for(cfg, &est, q), cfg.record_timing).remove(0);
        records.push(record(&cfg.scene_id, &cell_id, q, &scene.queries[q].pose, &run));
        if mode == Mode::Continuous && run.result.success {
            let query = &scene.queries[q];
            let associations = matches
                .m3d
                .iter()
                .zip(&run.result.stats.inlier_mask_3d)
                .filter(|(_, &inlier)| inlier)
                .map(|(m, _)| (m.feature, m.world_point))
                .collect();
            extended.push(ExtendedEntry {
                id: duoloc_core::geometry::DbImageId(query.capture_index as u32),
                query_index: q,
                pose: run.result.pose,
                intrinsics: query.intrinsics,
                associations,
            });
        }
    }
    // Rows are reported in query order regardless of processing order.
    records.sort_by_key(|r| r.query_index);
    Ok(ContinuousOutput { output: RunOutput::new(records, cfg), extended, order })
}

pub fn run_continuous(cfg: &BenchConfig, mode: Mode) -> Result<RunOutput, BenchError> {
    Ok(run_continuous_detailed(cfg, mode)?.output)
}
