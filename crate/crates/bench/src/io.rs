//! Scene files (versioned JSON), results CSV and report CSV.

use std::io::{Read, Write};

use duoloc_core::geometry::{DbImageId, Intrinsics, Pose, Vec2, Vec3};
use duoloc_core::sim::{DbImage, Observation, QueryCamera, SyntheticScene};
use serde::{Deserialize, Serialize};

use crate::experiment::{QueryRecord, RecallReport};
use crate::BenchError;

pub const SCENE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: u32,
    pub q_wxyz: [f64; 4],
    pub t_xyz: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub capture_index: usize,
    #[serde(default = "unit")]
    pub depth_factor: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub image: u32,
    pub u: f64,
    pub v: f64,
}

/// On-disk scene. Query cameras use the same record as db cameras; their
/// `id` is their index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: u32,
    pub db_images: Vec<CameraRecord>,
    pub points_gt: Vec<[f64; 3]>,
    pub points_obs: Vec<Option<[f64; 3]>>,
    pub visibility: Vec<Vec<ObservationRecord>>,
    pub queries: Vec<CameraRecord>,
    pub max_view_depth: f64,
}

fn camera_record(id: u32, pose: &Pose, k: &Intrinsics, capture_index: usize, depth_factor: f64) -> CameraRecord {
    let t = pose.translation;
    CameraRecord {
        id,
        q_wxyz: pose.quaternion_wxyz(),
        t_xyz: [t.x, t.y, t.z],
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        capture_index,
        depth_factor,
    }
}

impl From<&SyntheticScene> for SceneFile {
    fn from(s: &SyntheticScene) -> Self {
        let arr = |x: &Vec3| [x.x, x.y, x.z];
        SceneFile {
            version: SCENE_VERSION,
            db_images: s
                .db_images
                .iter()
                .map(|d| camera_record(d.id.0, &d.pose, &d.intrinsics, d.capture_index, d.depth_factor))
                .collect(),
            points_gt: s.points_gt.iter().map(arr).collect(),
            points_obs: s.points_obs.iter().map(|p| p.as_ref().map(arr)).collect(),
            visibility: s
                .visibility
                .iter()
                .map(|obs| {
                    obs.iter().map(|o| ObservationRecord { image: o.image.0, u: o.pixel.x, v: o.pixel.y }).collect()
                })
                .collect(),
            queries: s
                .queries
                .iter()
                .enumerate()
                .map(|(i, q)| camera_record(i as u32, &q.pose, &q.intrinsics, q.capture_index, 1.0))
                .collect(),
            max_view_depth: s.max_view_depth,
        }
    }
}

fn camera(r: &CameraRecord) -> Result<(Pose, Intrinsics), BenchError> {
    let norm = r.q_wxyz.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !((norm - 1.0).abs() < 1e-6) {
        return Err(BenchError::Data(format!("camera {}: quaternion is not unit length", r.id)));
    }
    if r.t_xyz.iter().any(|v| !v.is_finite()) {
        return Err(BenchError::Data(format!("camera {}: non-finite translation", r.id)));
    }
    let k = Intrinsics::new(r.fx, r.fy, r.cx, r.cy).map_err(|e| BenchError::Data(format!("camera {}: {e}", r.id)))?;
    Ok((Pose::from_quaternion_wxyz(r.q_wxyz, Vec3::from(r.t_xyz)), k))
}

impl TryFrom<&SceneFile> for SyntheticScene {
    type Error = BenchError;

    fn try_from(f: &SceneFile) -> Result<Self, BenchError> {
        if f.version != SCENE_VERSION {
            return Err(BenchError::Data(format!("unsupported scene version {}", f.version)));
        }
        let n = f.points_gt.len();
        if f.points_obs.len() != n || f.visibility.len() != n {
            return Err(BenchError::Data("points_gt, points_obs and visibility differ in length".into()));
        }
        let mut db_images = Vec::with_capacity(f.db_images.len());
        for r in &f.db_images {
            let (pose, intrinsics) = camera(r)?;
            if !(r.depth_factor > 0.0) {
                return Err(BenchError::Data(format!("camera {}: depth_factor must be positive", r.id)));
            }
            db_images.push(DbImage {
                id: DbImageId(r.id),
                pose,
                intrinsics,
                capture_index: r.capture_index,
                depth_factor: r.depth_factor,
            });
        }
        let known: std::collections::BTreeSet<u32> = f.db_images.iter().map(|r| r.id).collect();
        if known.len() != f.db_images.len() {
            return Err(BenchError::Data("duplicate db image id".into()));
        }
        let mut visibility = Vec::with_capacity(n);
        for obs in &f.visibility {
            let mut v = Vec::with_capacity(obs.len());
            for o in obs {
                if !known.contains(&o.image) {
                    return Err(BenchError::Data(format!("observation of unknown image {}", o.image)));
                }
                v.push(Observation { image: DbImageId(o.image), pixel: Vec2::new(o.u, o.v) });
            }
            visibility.push(v);
        }
        let queries = f
            .queries
            .iter()
            .map(|r| {
                camera(r).map(|(pose, intrinsics)| QueryCamera { pose, intrinsics, capture_index: r.capture_index })
            })
            .collect::<Result<_, _>>()?;
        Ok(SyntheticScene {
            db_images,
            points_gt: f.points_gt.iter().map(|p| Vec3::from(*p)).collect(),
            points_obs: f.points_obs.iter().map(|p| p.map(Vec3::from)).collect(),
            queries,
            visibility,
            max_view_depth: f.max_view_depth,
        })
    }
}

pub fn write_scene(scene: &SyntheticScene, w: impl Write) -> Result<(), BenchError> {
    serde_json::to_writer_pretty(w, &SceneFile::from(scene))?;
    Ok(())
}

pub fn read_scene(r: impl Read) -> Result<SyntheticScene, BenchError> {
    let file: SceneFile = serde_json::from_reader(r).map_err(|e| BenchError::Data(format!("scene file: {e}")))?;
    SyntheticScene::try_from(&file)
}

/// Results CSV; columns follow [`QueryRecord`]'s field order.
pub fn write_results(records: &[QueryRecord], w: impl Write) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results(r: impl Read) -> Result<Vec<QueryRecord>, BenchError> {
    let mut rdr = csv::Reader::from_reader(r);
    rdr.deserialize().map(|row| row.map_err(|e| BenchError::Data(format!("results file: {e}")))).collect()
}

/// Report CSV: scene_id, cell_id, method, queries, one `recall_<threshold>`
/// column per threshold, median_trans_m, median_rot_deg, config.
pub fn write_report(report: &RecallReport, w: impl Write) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["scene_id", "cell_id", "method", "queries"].map(String::from).to_vec();
    header.extend(report.thresholds.iter().map(|t| format!("recall_{}", t.label())));
    header.extend(["median_trans_m", "median_rot_deg", "config"].map(String::from));
    out.write_record(&header)?;
    for row in &report.rows {
        let mut rec = vec![row.scene_id.clone(), row.cell_id.clone(), row.method.clone(), row.queries.to_string()];
        rec.extend(row.recalls.iter().map(|r| r.to_string()));
        rec.push(row.median_trans_m.to_string());
        rec.push(row.median_rot_deg.to_string());
        rec.push(report.config_echo.clone());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
