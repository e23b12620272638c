//! Absolute pose from three 2D-3D matches (Lambda Twist formulation).

use crate::geometry::{orthonormalize, project, Correspondence2D3D, Intrinsics, Mat3, Pose, Vec3};

use super::{SolverError, SolverTolerances};

/// Candidate poses for one minimal sample (at most four).
pub type P3PSolutionSet = Vec<Pose>;

pub fn solve_p3p(
    matches: &[Correspondence2D3D; 3],
    k: &Intrinsics,
    tol: &SolverTolerances,
) -> Result<P3PSolutionSet, SolverError> {
    let world = [matches[0].world_point, matches[1].world_point, matches[2].world_point];
    let bearings =
        [k.bearing(&matches[0].query_pixel), k.bearing(&matches[1].query_pixel), k.bearing(&matches[2].query_pixel)];
    let poses = p3p_bearings(&world, &bearings, tol)?;
    // Drop candidates that put a point behind the camera.
    Ok(poses.into_iter().filter(|p| world.iter().all(|x| project(p, k, x).is_ok())).collect())
}

/// Solves `λ_i f_i = R x_i + t` for unit bearings `f_i`.
pub fn p3p_bearings(world: &[Vec3; 3], bearings: &[Vec3; 3], tol: &SolverTolerances) -> Result<Vec<Pose>, SolverError> {
    let [x1, x2, x3] = *world;
    let f1 = bearings[0].normalize();
    let f2 = bearings[1].normalize();
    let f3 = bearings[2].normalize();

    let d12 = x1 - x2;
    let d13 = x1 - x3;
    let d23 = x2 - x3;
    let d12xd13 = d12.cross(&d13);
    if d12.norm() == 0.0 || d13.norm() == 0.0 || d23.norm() == 0.0 {
        return Err(SolverError::DegenerateSample);
    }
    if d12xd13.norm() < tol.collinearity * d12.norm() * d13.norm() {
        return Err(SolverError::DegenerateSample);
    }
    for (a, b) in [(f1, f2), (f1, f3), (f2, f3)] {
        if a.cross(&b).norm() < tol.collinearity {
            return Err(SolverError::DegenerateSample);
        }
    }

    let a12 = d12.norm_squared();
    let a13 = d13.norm_squared();
    let a23 = d23.norm_squared();

    let c12 = f1.dot(&f2);
    let c23 = f2.dot(&f3);
    let c31 = f3.dot(&f1);
    let blob = c12 * c23 * c31 - 1.0;

    let s12_sq = 1.0 - c12 * c12;
    let s23_sq = 1.0 - c23 * c23;
    let s31_sq = 1.0 - c31 * c31;

    let b12 = -2.0 * c12;
    let b13 = -2.0 * c31;
    let b23 = -2.0 * c23;

    let p3 = a13 * (a23 * s31_sq - a13 * s23_sq);
    let p2 = 2.0 * blob * a23 * a13 + a13 * (2.0 * a12 + a13) * s23_sq + a23 * (a23 - a12) * s31_sq;
    let p1 = a23 * (a13 - a23) * s12_sq - a12 * a12 * s23_sq - 2.0 * a12 * (blob * a23 + a13 * s23_sq);
    let p0 = a12 * (a12 * s23_sq - a23 * s12_sq);

    let g = if p3.abs() > 1e-300 {
        cubic_root(p2 / p3, p1 / p3, p0 / p3)
    } else {
        // Cubic degenerates to a quadratic; any real root yields a valid D0.
        match real_quadratic_roots(p2, p1, p0) {
            Some((r, _)) => r,
            None => return Ok(Vec::new()),
        }
    };

    let d0 = Mat3::new(
        a23 * (1.0 - g),
        -(a23 * c12),
        a23 * c31 * g,
        -(a23 * c12),
        a23 - a12 + a13 * g,
        -c23 * (a13 * g - a12),
        a23 * c31 * g,
        -c23 * (a13 * g - a12),
        g * (a13 - a23) - a12,
    );
    let (eig_vectors, eig_values) = eigen_singular(&d0);
    let ratio = (-eig_values[1] / eig_values[0]).max(0.0).sqrt();

    let mut lambdas: Vec<Vec3> = Vec::with_capacity(4);
    for s in [ratio, -ratio] {
        let w2 = 1.0 / (s * eig_vectors[(0, 1)] - eig_vectors[(0, 0)]);
        let w0 = w2 * (eig_vectors[(1, 0)] - s * eig_vectors[(1, 1)]);
        let w1 = w2 * (eig_vectors[(2, 0)] - s * eig_vectors[(2, 1)]);

        let a = 1.0 / ((a13 - a12) * w1 * w1 - a12 * b13 * w1 - a12);
        let b = a * (a13 * b12 * w1 - a12 * b13 * w0 - 2.0 * w0 * w1 * (a12 - a13));
        let c = a * ((a13 - a12) * w0 * w0 + a13 * b12 * w0 + a13);
        if !(b * b - 4.0 * c >= 0.0) {
            continue;
        }
        let Some((tau1, tau2)) = real_quadratic_roots(1.0, b, c) else { continue };
        for tau in [tau1, tau2] {
            if !(tau > 0.0) {
                continue;
            }
            let d = a23 / (tau * (b23 + tau) + 1.0);
            if !(d > 0.0) {
                continue;
            }
            let l2 = d.sqrt();
            let l3 = tau * l2;
            let l1 = w0 * l2 + w1 * l3;
            if l1 >= 0.0 {
                lambdas.push(Vec3::new(l1, l2, l3));
            }
        }
    }

    let x_mat = Mat3::from_columns(&[d12, d13, d12xd13]);
    let Some(x_inv) = x_mat.try_inverse() else {
        return Err(SolverError::DegenerateSample);
    };

    let mut poses = Vec::with_capacity(lambdas.len());
    for lambda in lambdas {
        let l = refine_depths(lambda, a12, a13, a23, b12, b13, b23);
        if !l.iter().all(|v| v.is_finite() && *v > 0.0) {
            continue;
        }
        let y1 = l[0] * f1;
        let y2 = l[1] * f2;
        let y3 = l[2] * f3;
        let e1 = y1 - y2;
        let e2 = y1 - y3;
        let y_mat = Mat3::from_columns(&[e1, e2, e1.cross(&e2)]);
        let r = orthonormalize(&(y_mat * x_inv));
        let t = ((y1 + y2 + y3) - r * (x1 + x2 + x3)) / 3.0;
        if r.iter().all(|v| v.is_finite()) && t.iter().all(|v| v.is_finite()) {
            poses.push(Pose::new(r, t));
        }
    }
    Ok(poses)
}

/// Gauss-Newton on the three law-of-cosines equations.
fn refine_depths(lambda: Vec3, a12: f64, a13: f64, a23: f64, b12: f64, b13: f64, b23: f64) -> Vec3 {
    let residual = |l: &Vec3| {
        Vec3::new(
            l[0] * l[0] + l[1] * l[1] + b12 * l[0] * l[1] - a12,
            l[0] * l[0] + l[2] * l[2] + b13 * l[0] * l[2] - a13,
            l[1] * l[1] + l[2] * l[2] + b23 * l[1] * l[2] - a23,
        )
    };
    let mut l = lambda;
    let mut r = residual(&l);
    let scale = a12 + a13 + a23;
    for _ in 0..10 {
        if r.abs().sum() < 1e-15 * scale {
            break;
        }
        let j = Mat3::new(
            2.0 * l[0] + b12 * l[1],
            2.0 * l[1] + b12 * l[0],
            0.0,
            2.0 * l[0] + b13 * l[2],
            0.0,
            2.0 * l[2] + b13 * l[0],
            0.0,
            2.0 * l[1] + b23 * l[2],
            2.0 * l[2] + b23 * l[1],
        );
        let Some(step) = j.lu().solve(&r) else { break };
        let next = l - step;
        let rn = residual(&next);
        if rn.abs().sum() >= r.abs().sum() {
            break;
        }
        l = next;
        r = rn;
    }
    l
}

/// Real roots of `a r^2 + b r + c`, numerically stable form.
fn real_quadratic_roots(a: f64, b: f64, c: f64) -> Option<(f64, f64)> {
    if a == 0.0 {
        return if b != 0.0 { Some((-c / b, -c / b)) } else { None };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    if q == 0.0 {
        return Some((0.0, 0.0));
    }
    Some((q / a, c / q))
}

/// One real root of `r^3 + b r^2 + c r + d`, chosen where the derivative is large.
fn cubic_root(b: f64, c: f64, d: f64) -> f64 {
    let mut r0;
    if b * b >= 3.0 * c {
        let v = (b * b - 3.0 * c).sqrt();
        let t1 = (-b - v) / 3.0;
        let k = ((t1 + b) * t1 + c) * t1 + d;
        if k > 0.0 {
            r0 = t1 - (-k / (3.0 * t1 + b)).sqrt();
        } else {
            let t2 = (-b + v) / 3.0;
            let k = ((t2 + b) * t2 + c) * t2 + d;
            r0 = t2 + (-k / (3.0 * t2 + b)).sqrt();
        }
    } else {
        r0 = -b / 3.0;
        if ((3.0 * r0 + 2.0 * b) * r0 + c).abs() < 1e-4 {
            r0 += 1.0;
        }
    }
    for i in 0..50 {
        let fx = ((r0 + b) * r0 + c) * r0 + d;
        if i >= 7 && fx.abs() < 1e-15 {
            break;
        }
        let fpx = (3.0 * r0 + 2.0 * b) * r0 + c;
        if fpx == 0.0 {
            break;
        }
        r0 -= fx / fpx;
    }
    r0
}

/// Eigen-decomposition of a symmetric 3x3 matrix known to be singular.
/// Returns the eigenvectors of the two nonzero eigenvalues (largest magnitude
/// first) as the first two columns.
fn eigen_singular(x: &Mat3) -> (Mat3, [f64; 2]) {
    let v3 = Vec3::new(
        x[(0, 1)] * x[(1, 2)] - x[(0, 2)] * x[(1, 1)],
        x[(0, 2)] * x[(0, 1)] - x[(1, 2)] * x[(0, 0)],
        x[(1, 1)] * x[(0, 0)] - x[(0, 1)] * x[(0, 1)],
    )
    .normalize();

    let x01_sq = x[(0, 1)] * x[(0, 1)];
    let b = -x[(0, 0)] - x[(1, 1)] - x[(2, 2)];
    let c = -x01_sq - x[(0, 2)] * x[(0, 2)] - x[(1, 2)] * x[(1, 2)]
        + x[(0, 0)] * (x[(1, 1)] + x[(2, 2)])
        + x[(1, 1)] * x[(2, 2)];
    let (mut e1, mut e2) = real_quadratic_roots(1.0, b, c).unwrap_or((-0.5 * b, -0.5 * b));
    if e1.abs() < e2.abs() {
        std::mem::swap(&mut e1, &mut e2);
    }

    let mx0011 = -x[(0, 0)] * x[(1, 1)];
    let prec_0 = x[(0, 1)] * x[(1, 2)] - x[(0, 2)] * x[(1, 1)];
    let prec_1 = x[(0, 1)] * x[(0, 2)] - x[(0, 0)] * x[(1, 2)];
    let vector_for = |e: f64| {
        let tmp = 1.0 / (e * (x[(0, 0)] + x[(1, 1)]) + mx0011 - e * e + x01_sq);
        let a1 = -(e * x[(0, 2)] + prec_0) * tmp;
        let a2 = -(e * x[(1, 2)] + prec_1) * tmp;
        Vec3::new(a1, a2, 1.0).normalize()
    };
    let v1 = vector_for(e1);
    let v2 = vector_for(e2);
    (Mat3::from_columns(&[v1, v2, v3]), [e1, e2])
}
