//! Rigid-body and pinhole geometry: poses, intrinsics, projection, relative
//! poses, essential / fundamental matrices and the two match residuals.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("point lies behind the camera")]
    CheiralityViolation,
    #[error("sampson denominator vanished")]
    DegenerateResidual,
    #[error("relative translation is zero, essential matrix undefined")]
    PureRotation,
    #[error("focal lengths must be positive")]
    InvalidIntrinsics,
}

/// World-to-camera rigid transform: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Pose from a camera center and a world-to-camera rotation.
    pub fn from_center(rotation: Mat3, center: Vec3) -> Self {
        Self { rotation, translation: -(rotation * center) }
    }

    /// Builds a pose from a unit quaternion `[w, x, y, z]`. The quaternion is
    /// renormalized and the resulting matrix re-orthonormalized.
    pub fn from_quaternion_wxyz(q: [f64; 4], translation: Vec3) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        Self { rotation: orthonormalize(&uq.to_rotation_matrix().into_inner()), translation }
    }

    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let q = uq.into_inner();
        [q.w, q.i, q.j, q.k]
    }

    pub fn transform(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Applies a local increment `[ω, δt]`: `R' = exp(ω) R`, `t' = t + δt`.
    pub fn apply_increment(&self, delta: &[f64; 6]) -> Pose {
        let w = Vec3::new(delta[0], delta[1], delta[2]);
        Pose {
            rotation: so3_exp(&w) * self.rotation,
            translation: self.translation + Vec3::new(delta[3], delta[4], delta[5]),
        }
    }
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula.
pub fn so3_exp(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-16 {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    Mat3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / theta2) * k * k
}

/// Rotation angle of `R` in radians.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near zero; use the skew part there.
    if c > 0.99 {
        let s = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
        s.clamp(0.0, 1.0).asin()
    } else {
        c.acos()
    }
}

/// Pinhole intrinsics without distortion. The image spans `[0, 2cx] x [0, 2cy]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics);
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Mat3 {
        Mat3::new(1.0 / self.fx, 0.0, -self.cx / self.fx, 0.0, 1.0 / self.fy, -self.cy / self.fy, 0.0, 0.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        2.0 * self.cx
    }

    pub fn height(&self) -> f64 {
        2.0 * self.cy
    }

    pub fn contains(&self, pixel: &Vec2) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= self.width() && pixel.y <= self.height()
    }

    /// Normalized image coordinates `(x, y, 1)` of a pixel.
    pub fn normalized(&self, pixel: &Vec2) -> Vec3 {
        Vec3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    /// Unit-norm viewing direction in camera coordinates.
    pub fn bearing(&self, pixel: &Vec2) -> Vec3 {
        self.normalized(pixel).normalize()
    }

    /// Camera-frame point at depth `z` along the ray of `pixel`.
    pub fn backproject(&self, pixel: &Vec2, depth: f64) -> Vec3 {
        self.normalized(pixel) * depth
    }

    pub fn project_camera(&self, x: &Vec3) -> Result<Vec2, GeometryError> {
        if !(x.z > 0.0) {
            return Err(GeometryError::CheiralityViolation);
        }
        Ok(Vec2::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy))
    }
}

/// Projects a world point into the image of a camera at `pose`.
pub fn project(pose: &Pose, k: &Intrinsics, x: &Vec3) -> Result<Vec2, GeometryError> {
    k.project_camera(&pose.transform(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DbImageId(pub u32);

/// A query pixel matched to a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    pub query_pixel: Vec2,
    pub world_point: Vec3,
    /// Index of the query feature this match was lifted from.
    pub feature: usize,
}

/// A query pixel matched to a pixel of a posed database image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D2D {
    pub query_pixel: Vec2,
    pub db_pixel: Vec2,
    pub db_image: DbImageId,
    pub feature: usize,
}

/// Reprojection error in pixels; `+inf` when the point is behind the camera.
pub fn reprojection_error(pose: &Pose, k: &Intrinsics, m: &Correspondence2D3D) -> f64 {
    match project(pose, k, &m.world_point) {
        Ok(p) => (p - m.query_pixel).norm(),
        Err(_) => f64::INFINITY,
    }
}

/// Relative transform mapping query-camera coordinates into db-camera coordinates.
pub fn relative_pose(query: &Pose, db: &Pose) -> Pose {
    let r = db.rotation * query.rotation.transpose();
    Pose { rotation: r, translation: db.translation - r * query.translation }
}

/// Squared Sampson distance of the pair `(q, d)` w.r.t. `d^T F q = 0`.
pub fn sampson_error(f: &Mat3, q: &Vec3, d: &Vec3) -> Result<f64, GeometryError> {
    let fq = f * q;
    let ftd = f.transpose() * d;
    let num = d.dot(&fq);
    let den = fq.x * fq.x + fq.y * fq.y + ftd.x * ftd.x + ftd.y * ftd.y;
    if !(den >= f64::MIN_POSITIVE) {
        return Err(GeometryError::DegenerateResidual);
    }
    Ok(num * num / den)
}

/// Pixel-domain squared Sampson error, `+inf` if degenerate.
pub fn sampson_error_pixels(f: &Mat3, query_pixel: &Vec2, db_pixel: &Vec2) -> f64 {
    sampson_error(f, &query_pixel.push(1.0), &db_pixel.push(1.0)).unwrap_or(f64::INFINITY)
}

/// Essential matrix `[t]x R`, normalized to unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Mat3);

impl EssentialMatrix {
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }
}

pub fn essential_from_relative(rel: &Pose) -> Result<EssentialMatrix, GeometryError> {
    if rel.translation.norm() < 1e-12 {
        return Err(GeometryError::PureRotation);
    }
    let e = skew(&rel.translation) * rel.rotation;
    Ok(EssentialMatrix(e / e.norm()))
}

/// `F = K_db^-T E K_q^-1`, mapping query pixels to epipolar lines in the db image.
pub fn fundamental_from_essential(e: &Mat3, k_query: &Intrinsics, k_db: &Intrinsics) -> Mat3 {
    k_db.inverse_matrix().transpose() * e * k_query.inverse_matrix()
}

/// Unnormalized fundamental matrix between a query pose and a db camera.
/// Zero when the two centers coincide.
pub fn fundamental_between(query: &Pose, k_query: &Intrinsics, db: &Pose, k_db: &Intrinsics) -> Mat3 {
    let rel = relative_pose(query, db);
    let e = skew(&rel.translation) * rel.rotation;
    fundamental_from_essential(&e, k_query, k_db)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbCamera {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

/// Posed and calibrated database images addressed by id.
#[derive(Debug, Clone, Default)]
pub struct Database {
    cameras: BTreeMap<DbImageId, DbCamera>,
}

impl Database {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: DbImageId, camera: DbCamera) {
        self.cameras.insert(id, camera);
    }

    pub fn get(&self, id: DbImageId) -> Option<&DbCamera> {
        self.cameras.get(&id)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DbImageId, &DbCamera)> {
        self.cameras.iter()
    }
}

impl FromIterator<(DbImageId, DbCamera)> for Database {
    fn from_iter<T: IntoIterator<Item = (DbImageId, DbCamera)>>(iter: T) -> Self {
        Self { cameras: iter.into_iter().collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let w = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let t = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        Pose::new(so3_exp(&w), t)
    }

    #[test]
    fn projects_principal_point_and_offset() {
        let p = project(&Pose::identity(), &k100(), &Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(p, Vec2::new(50.0, 50.0));
        let p = project(&Pose::identity(), &k100(), &Vec3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(p, Vec2::new(100.0, 50.0));
        assert_eq!(
            project(&Pose::identity(), &k100(), &Vec3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::CheiralityViolation)
        );
    }

    #[test]
    fn rejects_nonpositive_focal() {
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Intrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn reprojection_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Intrinsics::new(520.0, 510.0, 320.0, 240.0).unwrap();
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let xc = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..5.0));
            let xw = pose.inverse().transform(&xc);
            let exact = project(&pose, &k, &xw).unwrap();
            let m = Correspondence2D3D { query_pixel: exact, world_point: xw, feature: 0 };
            assert_eq!(reprojection_error(&pose, &k, &m), 0.0);
            let m = Correspondence2D3D { query_pixel: exact + Vec2::new(3.0, 4.0), ..m };
            assert_relative_eq!(reprojection_error(&pose, &k, &m), 5.0, epsilon = 1e-9);

            // straight-line re-evaluation
            let obs = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let m = Correspondence2D3D { query_pixel: obs, world_point: xw, feature: 0 };
            let r = pose.rotation;
            let t = pose.translation;
            let x = r[(0, 0)] * xw[0] + r[(0, 1)] * xw[1] + r[(0, 2)] * xw[2] + t[0];
            let y = r[(1, 0)] * xw[0] + r[(1, 1)] * xw[1] + r[(1, 2)] * xw[2] + t[1];
            let z = r[(2, 0)] * xw[0] + r[(2, 1)] * xw[1] + r[(2, 2)] * xw[2] + t[2];
            let u = 520.0 * x / z + 320.0;
            let v = 510.0 * y / z + 240.0;
            let expect = ((u - obs.x).powi(2) + (v - obs.y).powi(2)).sqrt();
            assert_relative_eq!(reprojection_error(&pose, &k, &m), expect, epsilon = 1e-9, max_relative = 1e-12);
        }
        let behind = Correspondence2D3D {
            query_pixel: Vec2::new(50.0, 50.0),
            world_point: Vec3::new(0.0, 0.0, -1.0),
            feature: 0,
        };
        assert!(reprojection_error(&Pose::identity(), &k100(), &behind).is_infinite());
    }

    #[test]
    fn relative_pose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let q = random_pose(&mut rng);
            let db = random_pose(&mut rng);
            let rel = relative_pose(&q, &q);
            assert_relative_eq!(rel.rotation, Mat3::identity(), epsilon = 1e-12);
            assert_relative_eq!(rel.translation, Vec3::zeros(), epsilon = 1e-12);
            let rel = relative_pose(&Pose::identity(), &db);
            assert_relative_eq!(rel.rotation, db.rotation, epsilon = 1e-15);
            assert_relative_eq!(rel.translation, db.translation, epsilon = 1e-15);
            let rel = relative_pose(&q, &db);
            let back = rel.compose(&q);
            assert_relative_eq!(back.rotation, db.rotation, epsilon = 1e-12);
            assert_relative_eq!(back.translation, db.translation, epsilon = 1e-12);
        }
    }

    #[test]
    fn sampson_hand_example() {
        let e = skew(&Vec3::new(1.0, 0.0, 0.0));
        let s = sampson_error(&e, &Vec3::new(0.0, 0.0, 1.0), &Vec3::new(0.0, 0.1, 1.0)).unwrap();
        assert_relative_eq!(s, 0.005, epsilon = 1e-15);
        // on the epipolar line
        let s = sampson_error(&e, &Vec3::new(0.0, 0.0, 1.0), &Vec3::new(0.3, 0.0, 1.0)).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(
            sampson_error(&Mat3::zeros(), &Vec3::new(1.0, 2.0, 1.0), &Vec3::new(0.0, 0.0, 1.0)),
            Err(GeometryError::DegenerateResidual)
        );
    }

    /// Gold-standard distance: minimize over the corrected query point, the
    /// optimal db point for a fixed query point is the foot of the perpendicular
    /// on its epipolar line.
    fn geometric_distance_sq(f: &Mat3, q: &Vec2, d: &Vec2) -> f64 {
        let cost = |dq: &Vec2| {
            let qq = (q + dq).push(1.0);
            let l = f * qq;
            let r = d.push(1.0).dot(&l);
            dq.norm_squared() + r * r / (l.x * l.x + l.y * l.y)
        };
        let mut best = Vec2::zeros();
        let mut best_c = cost(&best);
        let mut step = 4.0;
        while step > 1e-9 {
            let mut improved = false;
            for dir in [Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0), Vec2::new(0.0, 1.0), Vec2::new(0.0, -1.0)] {
                let c = best + dir * step;
                let v = cost(&c);
                if v < best_c {
                    best_c = v;
                    best = c;
                    improved = true;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best_c
    }

    #[test]
    fn sampson_approximates_geometric_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let mut checked = 0;
        while checked < 100 {
            let q = random_pose(&mut rng);
            let db = Pose::from_center(q.rotation, q.center() + Vec3::new(rng.random_range(-1.0..1.0), 0.3, 0.2));
            let xc = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(3.0..6.0));
            let xw = q.inverse().transform(&xc);
            let (Ok(pq), Ok(pd)) = (project(&q, &k, &xw), project(&db, &k, &xw)) else { continue };
            let f = fundamental_between(&q, &k, &db, &k);
            let pd = pd + Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = sampson_error_pixels(&f, &pq, &pd);
            let g = geometric_distance_sq(&f, &pq, &pd);
            if g < 1e-6 {
                continue;
            }
            assert!((s - g).abs() <= 0.1 * g, "sampson {s} vs geometric {g}");
            checked += 1;
        }
    }

    #[test]
    fn essential_from_relative_cases() {
        let rel = Pose::new(Mat3::identity(), Vec3::new(1.0, 0.0, 0.0));
        let e = essential_from_relative(&rel).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let expect = Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, -s, 0.0, s, 0.0);
        assert_relative_eq!(*e.matrix(), expect, epsilon = 1e-15);
        assert_eq!(
            essential_from_relative(&Pose::new(Mat3::identity(), Vec3::zeros())),
            Err(GeometryError::PureRotation)
        );

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let kq = Intrinsics::new(480.0, 470.0, 300.0, 200.0).unwrap();
        let kd = Intrinsics::new(600.0, 610.0, 320.0, 240.0).unwrap();
        for _ in 0..50 {
            let q = random_pose(&mut rng);
            let db = random_pose(&mut rng);
            let rel = relative_pose(&q, &db);
            let e = essential_from_relative(&rel).unwrap();
            let em = e.matrix();
            assert!(em.determinant().abs() < 1e-10);
            let cubic = 2.0 * em * em.transpose() * em - (em * em.transpose()).trace() * em;
            assert!(cubic.norm() < 1e-8);
            let f = fundamental_from_essential(em, &kq, &kd);
            let mut hits = 0;
            while hits < 10 {
                let xw =
                    Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
                let (Ok(pq), Ok(pd)) = (project(&q, &kq, &xw), project(&db, &kd, &xw)) else { continue };
                let r = pd.push(1.0).dot(&(f * pq.push(1.0)));
                // pixel-scale residual: divide by the epipolar line gradient
                let l = f * pq.push(1.0);
                assert!(r.abs() / (l.x * l.x + l.y * l.y).sqrt() < 1e-9);
                hits += 1;
            }
        }
    }

    #[test]
    fn quaternion_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let p = random_pose(&mut rng);
            let q = p.quaternion_wxyz();
            let back = Pose::from_quaternion_wxyz(q, p.translation);
            assert_relative_eq!(back.rotation, p.rotation, epsilon = 1e-12);
        }
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (prop::array::uniform3(-3.0f64..3.0), prop::array::uniform3(-10.0f64..10.0))
            .prop_map(|(w, t)| Pose::new(so3_exp(&Vec3::from(w)), Vec3::from(t)))
    }

    proptest! {
        #[test]
        fn inverse_composes_to_identity(p in arb_pose()) {
            let id = p.inverse().compose(&p);
            prop_assert!((id.rotation - Mat3::identity()).norm() < 1e-12);
            prop_assert!(id.translation.norm() < 1e-12);
            prop_assert!((p.rotation.transpose() * p.rotation - Mat3::identity()).norm() < 1e-9);
            prop_assert!((p.rotation.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn backproject_then_project(u in 0.0f64..640.0, v in 0.0f64..480.0, z in 0.01f64..1e4) {
            let k = Intrinsics::new(525.0, 515.0, 320.0, 240.0).unwrap();
            let x = k.backproject(&Vec2::new(u, v), z);
            let p = k.project_camera(&x).unwrap();
            prop_assert!((p - Vec2::new(u, v)).norm() < 1e-9);
        }

        #[test]
        fn sampson_scale_invariant(
            p in arb_pose(),
            q in prop::array::uniform2(0.0f64..640.0),
            d in prop::array::uniform2(0.0f64..480.0),
            log_scale in -6.0f64..6.0,
            negative in any::<bool>(),
        ) {
            let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
            prop_assume!(p.translation.norm() > 1e-3);
            let f = fundamental_from_essential(essential_from_relative(&p).unwrap().matrix(), &k, &k);
            let s = 10f64.powf(log_scale) * if negative { -1.0 } else { 1.0 };
            let a = sampson_error_pixels(&f, &Vec2::from(q), &Vec2::from(d));
            let b = sampson_error_pixels(&(f * s), &Vec2::from(q), &Vec2::from(d));
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
