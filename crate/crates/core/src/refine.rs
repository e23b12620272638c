//! Local pose refinement: Levenberg-Marquardt over truncated reprojection
//! and Sampson residuals with fixed inlier sets.

use nalgebra::{Matrix2x6, Matrix6, RowVector6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    relative_pose, skew, Correspondence2D2D, Correspondence2D3D, Database, DbCamera, Intrinsics, Mat3, Pose, Vec2, Vec3,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoStrategy {
    Hybrid,
    Split,
}

/// Which solver produced a pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    P3P,
    E5p1,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub strategy: LoStrategy,
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { strategy: LoStrategy::Hybrid, max_iterations: 25, relative_cost_tolerance: 1e-8, initial_damping: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RefineError {
    #[error("fewer than three inlier constraints for the selected objective")]
    InsufficientConstraints,
}

/// Which residual families enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    pub use_3d: bool,
    pub use_2d: bool,
}

impl Objective {
    pub const BOTH: Objective = Objective { use_3d: true, use_2d: true };
    pub const ONLY_3D: Objective = Objective { use_3d: true, use_2d: false };
    pub const ONLY_2D: Objective = Objective { use_3d: false, use_2d: true };

    /// Hybrid uses both families; Split keeps the one matching the solver.
    pub fn select(strategy: LoStrategy, provenance: Provenance) -> Objective {
        match (strategy, provenance) {
            (LoStrategy::Split, Provenance::P3P) => Self::ONLY_3D,
            (LoStrategy::Split, Provenance::E5p1) => Self::ONLY_2D,
            _ => Self::BOTH,
        }
    }
}

/// Outcome of one refinement with the accepted cost sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub pose: Pose,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Reprojection residual `π(R X + t) - u` and its Jacobian w.r.t. the pose
/// increment `[ω, δt]` of [`Pose::apply_increment`]. `None` behind the camera.
pub fn reprojection_residual_jacobian(
    pose: &Pose,
    k: &Intrinsics,
    m: &Correspondence2D3D,
) -> Option<(Vec2, Matrix2x6<f64>)> {
    let rx = pose.rotation * m.world_point;
    let xc = rx + pose.translation;
    if !(xc.z > 0.0) {
        return None;
    }
    let iz = 1.0 / xc.z;
    let u = Vec2::new(k.fx * xc.x * iz + k.cx, k.fy * xc.y * iz + k.cy);
    let dpi = nalgebra::Matrix2x3::new(k.fx * iz, 0.0, -k.fx * xc.x * iz * iz, 0.0, k.fy * iz, -k.fy * xc.y * iz * iz);
    let mut dx = nalgebra::Matrix3x6::zeros();
    dx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rx)));
    dx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    Some((u - m.query_pixel, dpi * dx))
}

/// Per db-image quantities shared by all Sampson residuals of that image.
struct EpipolarLinearization {
    f: Mat3,
    k_db_inv: Mat3,
    k_q_inv_t: Mat3,
    /// dE/dδ_k for the six increment components.
    de: [Mat3; 6],
}

impl EpipolarLinearization {
    fn new(query: &Pose, k_query: &Intrinsics, db: &DbCamera) -> Self {
        let rel = relative_pose(query, &db.pose);
        let r = rel.rotation;
        let t = rel.translation;
        let e = skew(&t) * r;
        let k_db_inv = db.intrinsics.inverse_matrix();
        let k_q_inv = k_query.inverse_matrix();
        let f = k_db_inv.transpose() * e * k_q_inv;
        let mut de = [Mat3::zeros(); 6];
        let tq = skew(&query.translation);
        for (k, de_k) in de.iter_mut().enumerate() {
            let mut unit = Vec3::zeros();
            unit[k % 3] = 1.0;
            *de_k = if k < 3 {
                let dt = -(r * tq * unit);
                -skew(&t) * r * skew(&unit) + skew(&dt) * r
            } else {
                skew(&(-(r * unit))) * r
            };
        }
        Self { f, k_db_inv, k_q_inv_t: k_q_inv.transpose(), de }
    }

    fn residual_jacobian(&self, m: &Correspondence2D2D) -> Option<(f64, RowVector6<f64>)> {
        let q = m.query_pixel.push(1.0);
        let d = m.db_pixel.push(1.0);
        let fq = self.f * q;
        let ftd = self.f.transpose() * d;
        let num = d.dot(&fq);
        let den = fq.x * fq.x + fq.y * fq.y + ftd.x * ftd.x + ftd.y * ftd.y;
        if !(den >= f64::MIN_POSITIVE) {
            return None;
        }
        let s = den.sqrt();
        let r = num / s;
        let c = num / (s * den);
        let mut g = d * q.transpose() / s;
        for i in 0..3 {
            for j in 0..3 {
                let mut dden = 0.0;
                if i < 2 {
                    dden += fq[i] * q[j];
                }
                if j < 2 {
                    dden += ftd[j] * d[i];
                }
                g[(i, j)] -= c * dden;
            }
        }
        let dr_de = self.k_db_inv * g * self.k_q_inv_t;
        let mut jac = RowVector6::zeros();
        for k in 0..6 {
            jac[k] = dr_de.component_mul(&self.de[k]).sum();
        }
        Some((r, jac))
    }
}

/// Signed Sampson residual (its square is the squared Sampson error in px²)
/// and its Jacobian w.r.t. the query pose increment.
pub fn sampson_residual_jacobian(
    pose: &Pose,
    k_query: &Intrinsics,
    db: &DbCamera,
    m: &Correspondence2D2D,
) -> Option<(f64, RowVector6<f64>)> {
    EpipolarLinearization::new(pose, k_query, db).residual_jacobian(m)
}

/// Truncated objective `Σ min(e², t3d²)/t3d² + Σ min(s, t2d²)/t2d²` over the given matches.
#[allow(clippy::too_many_arguments)]
pub fn objective_cost(
    pose: &Pose,
    objective: Objective,
    m3d: &[Correspondence2D3D],
    m2d: &[Correspondence2D2D],
    db: &Database,
    k_query: &Intrinsics,
    t3d: f64,
    t2d: f64,
) -> f64 {
    let mut cost = 0.0;
    if objective.use_3d {
        for m in m3d {
            let e = crate::geometry::reprojection_error(pose, k_query, m);
            cost += (e * e).min(t3d * t3d) / (t3d * t3d);
        }
    }
    if objective.use_2d {
        let mut cache = crate::scoring::FundamentalCache::new(pose, k_query, db);
        for m in m2d {
            cost += cache.sampson(m).min(t2d * t2d) / (t2d * t2d);
        }
    }
    cost
}

/// Refines `pose` over the given inlier sets; see [`refine_report`].
#[allow(clippy::too_many_arguments)]
pub fn refine(
    pose: &Pose,
    provenance: Provenance,
    inliers3d: &[Correspondence2D3D],
    inliers2d: &[Correspondence2D2D],
    db: &Database,
    k_query: &Intrinsics,
    cfg: &RefineConfig,
    t3d: f64,
    t2d: f64,
) -> Result<Pose, RefineError> {
    let objective = Objective::select(cfg.strategy, provenance);
    refine_report(pose, objective, inliers3d, inliers2d, db, k_query, cfg, t3d, t2d).map(|r| r.pose)
}

#[allow(clippy::too_many_arguments)]
pub fn refine_report(
    pose: &Pose,
    objective: Objective,
    inliers3d: &[Correspondence2D3D],
    inliers2d: &[Correspondence2D2D],
    db: &Database,
    k_query: &Intrinsics,
    cfg: &RefineConfig,
    t3d: f64,
    t2d: f64,
) -> Result<RefineReport, RefineError> {
    let m3d: &[Correspondence2D3D] = if objective.use_3d { inliers3d } else { &[] };
    let m2d: &[Correspondence2D2D] = if objective.use_2d { inliers2d } else { &[] };
    if m3d.len() + m2d.len() < 3 {
        return Err(RefineError::InsufficientConstraints);
    }
    let cost_of = |p: &Pose| objective_cost(p, objective, m3d, m2d, db, k_query, t3d, t2d);

    let initial_cost = cost_of(pose);
    let mut report = RefineReport {
        pose: *pose,
        initial_cost,
        final_cost: initial_cost,
        iterations: 0,
        cost_history: vec![initial_cost],
    };
    if !initial_cost.is_finite() || initial_cost == 0.0 {
        return Ok(report);
    }

    let mut current = *pose;
    let mut cost = initial_cost;
    let mut lambda = cfg.initial_damping;
    for _ in 0..cfg.max_iterations {
        report.iterations += 1;
        let (h, g) = normal_equations(&current, m3d, m2d, db, k_query, t3d, t2d);
        let diag_floor = 1e-12 * h.diagonal().max().max(f64::MIN_POSITIVE);
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(diag_floor);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let delta: [f64; 6] = step.into();
            let candidate = current.apply_increment(&delta);
            let candidate_cost = cost_of(&candidate);
            if candidate_cost.is_finite() && candidate_cost < cost {
                let decrease = cost - candidate_cost;
                current = candidate;
                cost = candidate_cost;
                report.cost_history.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if decrease <= cfg.relative_cost_tolerance * (cost + decrease) {
                    lambda = f64::INFINITY;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || !lambda.is_finite() || cost == 0.0 {
            break;
        }
    }
    report.pose = current;
    report.final_cost = cost;
    Ok(report)
}

/// `JᵀJ` and `Jᵀr` over the residuals that are inside their truncation threshold.
fn normal_equations(
    pose: &Pose,
    m3d: &[Correspondence2D3D],
    m2d: &[Correspondence2D2D],
    db: &Database,
    k_query: &Intrinsics,
    t3d: f64,
    t2d: f64,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for m in m3d {
        let Some((r, j)) = reprojection_residual_jacobian(pose, k_query, m) else { continue };
        if r.norm_squared() >= t3d * t3d {
            continue;
        }
        let (r, j) = (r / t3d, j / t3d);
        h += j.transpose() * j;
        g += j.transpose() * r;
    }
    let mut lin: Vec<(crate::geometry::DbImageId, Option<EpipolarLinearization>)> = Vec::new();
    for m in m2d {
        let idx = match lin.iter().position(|(id, _)| *id == m.db_image) {
            Some(i) => i,
            None => {
                lin.push((m.db_image, db.get(m.db_image).map(|c| EpipolarLinearization::new(pose, k_query, c))));
                lin.len() - 1
            }
        };
        let Some(l) = &lin[idx].1 else { continue };
        let Some((r, j)) = l.residual_jacobian(m) else { continue };
        if r * r >= t2d * t2d {
            continue;
        }
        let (r, j) = (r / t2d, j / t2d);
        h += j.transpose() * j;
        g += j.transpose() * r;
    }
    (h, g)
}
