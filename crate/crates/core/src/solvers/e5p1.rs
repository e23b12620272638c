use nalgebra::{Matrix2, Vector2};

use crate::geometry::{orthonormalize, Correspondence2D2D, Database, EssentialMatrix, Intrinsics, Mat3, Pose, Vec3};

use super::{solve_five_point, SolverError, SolverTolerances};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct E5p1Solution {
    /// Absolute world-to-camera pose of the query.
    pub pose: Pose,
    /// Essential matrix between the query and the first database image.
    pub essential: EssentialMatrix,
    /// Length of the query-to-first-image baseline.
    pub scale: f64,
}

pub type E5p1SolutionSet = Vec<E5p1Solution>;

/// Depths `(α, β)` with `β d ≈ α R q + t`, or `None` for parallel rays.
fn triangulate_depths(r: &Mat3, t: &Vec3, q: &Vec3, d: &Vec3) -> Option<(f64, f64)> {
    let a = -(r * q);
    let ata = Matrix2::new(a.dot(&a), a.dot(d), a.dot(d), d.dot(d));
    let atb = Vector2::new(a.dot(t), d.dot(t));
    let sol = ata.try_inverse()? * atb;
    Some((sol[0], sol[1]))
}

/// Depths `(α, β)` of the closest points `o1 + α d1`, `o2 + β d2`.
fn ray_depths(o1: &Vec3, d1: &Vec3, o2: &Vec3, d2: &Vec3) -> Option<(f64, f64)> {
    let b = o2 - o1;
    let m = Matrix2::new(d1.dot(d1), -d1.dot(d2), -d1.dot(d2), d2.dot(d2));
    let rhs = Vector2::new(d1.dot(&b), -d2.dot(&b));
    let sol = m.try_inverse()? * rhs;
    Some((sol[0], sol[1]))
}

/// Splits `E` into the rotation and unit translation (`x_db = R x_q + t`)
/// that places the most pairs in front of both cameras. Ties go to the
/// lowest configuration index.
pub fn decompose_essential(e: &Mat3, pairs: &[(Vec3, Vec3)]) -> Result<(Mat3, Vec3), SolverError> {
    let svd = e.svd(true, true);
    let mut u = svd.u.ok_or(SolverError::DegenerateSample)?;
    let mut v_t = svd.v_t.ok_or(SolverError::DegenerateSample)?;
    // The null direction is the column of U with the smallest singular value.
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    u = Mat3::from_columns(&[u.column(idx[0]), u.column(idx[1]), u.column(idx[2])]);
    v_t = Mat3::from_rows(&[v_t.row(idx[0]), v_t.row(idx[1]), v_t.row(idx[2])]);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let ra = u * w * v_t;
    let rb = u * w.transpose() * v_t;
    let t: Vec3 = u.column(2).into();
    let configs = [(ra, t), (ra, -t), (rb, t), (rb, -t)];

    let mut best: Option<(usize, usize)> = None;
    for (i, (r, t)) in configs.iter().enumerate() {
        let count = pairs
            .iter()
            .filter(|(q, d)| matches!(triangulate_depths(r, t, q, d), Some((a, b)) if a > 0.0 && b > 0.0))
            .count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((i, count));
        }
    }
    let (i, count) = best.unwrap();
    if count < 3 {
        return Err(SolverError::CheiralityAmbiguous);
    }
    let (r, t) = configs[i];
    Ok((orthonormalize(&r), t.normalize()))
}

/// Semi-generalized relative pose with scale: five matches to image A fix
/// the relative rotation and translation direction, one match to image B
/// fixes the translation length through ray coplanarity.
pub fn solve_e5p1(
    five: &[Correspondence2D2D; 5],
    one: &Correspondence2D2D,
    db: &Database,
    k_query: &Intrinsics,
    tol: &SolverTolerances,
) -> Result<E5p1SolutionSet, SolverError> {
    let id_a = five[0].db_image;
    if five.iter().any(|m| m.db_image != id_a) || one.db_image == id_a {
        return Err(SolverError::DegenerateSample);
    }
    let cam_a = db.get(id_a).ok_or(SolverError::DegenerateSample)?;
    let cam_b = db.get(one.db_image).ok_or(SolverError::DegenerateSample)?;

    let pairs: [(Vec3, Vec3); 5] =
        std::array::from_fn(|i| (k_query.bearing(&five[i].query_pixel), cam_a.intrinsics.bearing(&five[i].db_pixel)));

    // A rotation alone explains every pair: λ would multiply a zero direction.
    let h: Mat3 = pairs.iter().map(|(q, d)| d * q.transpose()).sum();
    let r_fit = orthonormalize(&h);
    if pairs.iter().all(|(q, d)| (d - r_fit * q).norm() < 1e-10) {
        return Err(SolverError::ScaleUnobservable);
    }

    let essentials = solve_five_point(&pairs)?;

    let r_a = cam_a.pose.rotation;
    let c_a = cam_a.pose.center();
    let c_b = cam_b.pose.center();
    let ray_b = cam_b.pose.rotation.transpose() * cam_b.intrinsics.bearing(&one.db_pixel);
    let bearing_q6 = k_query.bearing(&one.query_pixel);

    let mut out = Vec::new();
    let mut unobservable = false;
    for e in essentials {
        let Ok((r_rel, t_dir)) = decompose_essential(e.matrix(), &pairs) else { continue };
        let r_q = r_rel.transpose() * r_a;
        // Query center moves along `w` from A's center: c_q = c_A + λ w.
        let w = r_a.transpose() * t_dir;
        let ray_q = r_q.transpose() * bearing_q6;
        let n = ray_q.cross(&ray_b);
        if n.norm() < tol.min_parallax {
            unobservable = true;
            continue;
        }
        let coeff = w.dot(&n);
        if coeff.abs() < tol.scale_coefficient {
            unobservable = true;
            continue;
        }
        let lambda = (c_b - c_a).dot(&n) / coeff;
        if !(lambda > 0.0) || !lambda.is_finite() {
            continue;
        }
        let c_q = c_a + lambda * w;
        let Some((alpha, beta)) = ray_depths(&c_q, &ray_q, &c_b, &ray_b) else { continue };
        if !(alpha > 0.0 && beta > 0.0) {
            continue;
        }
        out.push(E5p1Solution { pose: Pose::from_center(r_q, c_q), essential: e, scale: lambda });
    }
    // An unobservable scale for any decomposition marks the whole sample as
    // degenerate for the sixth match.
    if unobservable {
        return Err(SolverError::ScaleUnobservable);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{
        essential_from_relative, project, relative_pose, rotation_angle, so3_exp, DbCamera, DbImageId,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    fn look_pose(rng: &mut impl Rng, center: Vec3) -> Pose {
        let w = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
        Pose::from_center(so3_exp(&w), center)
    }

    /// Query, two db cameras and six matches from a random scene in front of them.
    pub(crate) fn random_instance(rng: &mut impl Rng) -> (Pose, Database, [Correspondence2D2D; 5], Correspondence2D2D) {
        let cq = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
        let q = look_pose(rng, cq);
        let ca = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
        let a = look_pose(rng, ca);
        let cb = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
        let b = look_pose(rng, cb);
        let db: Database = [
            (DbImageId(0), DbCamera { pose: a, intrinsics: k() }),
            (DbImageId(1), DbCamera { pose: b, intrinsics: k() }),
        ]
        .into_iter()
        .collect();
        let mut mk = |cam: &Pose, id: u32| loop {
            let x = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(5.0..10.0));
            if let (Ok(pq), Ok(pd)) = (project(&q, &k(), &x), project(cam, &k(), &x)) {
                break Correspondence2D2D { query_pixel: pq, db_pixel: pd, db_image: DbImageId(id), feature: 0 };
            }
        };
        let five = std::array::from_fn(|_| mk(&a, 0));
        let one = mk(&b, 1);
        (q, db, five, one)
    }

    #[test]
    fn recovers_absolute_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tol = SolverTolerances::default();
        for _ in 0..200 {
            let (q, db, five, one) = random_instance(&mut rng);
            let sols = solve_e5p1(&five, &one, &db, &k(), &tol).unwrap();
            let best = sols.iter().map(|s| (s.pose.center() - q.center()).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-7, "translation error {best}");
            for s in &sols {
                assert!(s.scale > 0.0);
            }
        }
    }

    #[test]
    fn decomposition_matches_generator_and_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for forward in [false, true] {
            for _ in 0..100 {
                let r = so3_exp(&Vec3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ));
                let t = if forward {
                    Vec3::new(1e-3 * rng.random_range(-1.0..1.0), 1e-3 * rng.random_range(-1.0..1.0), -1.0)
                } else {
                    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                };
                let rel = Pose::new(r, t);
                let pairs: Vec<(Vec3, Vec3)> = (0..5)
                    .map(|_| loop {
                        let x = Vec3::new(
                            rng.random_range(-2.0..2.0),
                            rng.random_range(-2.0..2.0),
                            rng.random_range(4.0..8.0),
                        );
                        let xd = rel.transform(&x);
                        if xd.z > 0.5 {
                            break (x.normalize(), xd.normalize());
                        }
                    })
                    .collect();
                let e = essential_from_relative(&rel).unwrap();
                for sign in [1.0, -1.0] {
                    let (rr, tt) = decompose_essential(&(e.matrix() * sign), &pairs).unwrap();
                    assert!(rotation_angle(&(rr * r.transpose())) < 1e-8);
                    assert!((tt - t.normalize()).norm() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn pure_rotation_scale_unobservable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (q, mut db, mut five, one) = random_instance(&mut rng);
        let a = look_pose(&mut rng, q.center());
        db.insert(DbImageId(0), DbCamera { pose: a, intrinsics: k() });
        let rel = relative_pose(&q, &a);
        for m in five.iter_mut() {
            let xq = k().backproject(&m.query_pixel, 5.0);
            m.db_pixel = k().project_camera(&rel.transform(&xq)).unwrap();
        }
        assert_eq!(
            solve_e5p1(&five, &one, &db, &k(), &SolverTolerances::default()),
            Err(SolverError::ScaleUnobservable)
        );
    }

    #[test]
    fn far_sixth_point_scale_unobservable() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (q, db, five, mut one) = random_instance(&mut rng);
        let cam_b = db.get(DbImageId(1)).unwrap();
        let baseline = (q.center() - cam_b.pose.center()).norm();
        let dir = q.rotation.transpose() * Vec3::new(0.05, -0.02, 1.0).normalize();
        let x = q.center() + dir * baseline * 1e9;
        one.query_pixel = project(&q, &k(), &x).unwrap();
        one.db_pixel = project(&cam_b.pose, &k(), &x).unwrap();
        assert_eq!(
            solve_e5p1(&five, &one, &db, &k(), &SolverTolerances::default()),
            Err(SolverError::ScaleUnobservable)
        );
    }

    #[test]
    fn same_image_for_sixth_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (_, db, five, mut one) = random_instance(&mut rng);
        one.db_image = DbImageId(0);
        assert_eq!(
            solve_e5p1(&five, &one, &db, &k(), &SolverTolerances::default()),
            Err(SolverError::DegenerateSample)
        );
    }
}
