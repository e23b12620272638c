//! Five-point relative pose: nullspace basis, ten cubic constraints reduced by
//! Gauss-Jordan elimination, degree-10 hidden-variable polynomial in `z`
//! solved through its companion matrix.

use nalgebra::{DMatrix, SMatrix};

use crate::geometry::{EssentialMatrix, Mat3, Vec3};

use super::SolverError;

/// Monomial order: the first ten columns are eliminated.
const MONOMIALS: [(usize, usize, usize); 20] = [
    (3, 0, 0),
    (0, 3, 0),
    (2, 1, 0),
    (1, 2, 0),
    (2, 0, 1),
    (2, 0, 0),
    (0, 2, 1),
    (0, 2, 0),
    (1, 1, 1),
    (1, 1, 0),
    (1, 0, 2),
    (1, 0, 1),
    (1, 0, 0),
    (0, 1, 2),
    (0, 1, 1),
    (0, 1, 0),
    (0, 0, 3),
    (0, 0, 2),
    (0, 0, 1),
    (0, 0, 0),
];

const NO_MONOMIAL: u8 = u8::MAX;

const fn monomial_index(i: usize, j: usize, k: usize) -> u8 {
    let mut n = 0;
    while n < MONOMIALS.len() {
        let (a, b, c) = MONOMIALS[n];
        if a == i && b == j && c == k {
            return n as u8;
        }
        n += 1;
    }
    NO_MONOMIAL
}

/// Index of the product of two monomials, `NO_MONOMIAL` above degree three.
const PRODUCT: [[u8; 20]; 20] = {
    let mut table = [[NO_MONOMIAL; 20]; 20];
    let mut a = 0;
    while a < 20 {
        let mut b = 0;
        while b < 20 {
            let (i, j, k) = MONOMIALS[a];
            let (u, v, w) = MONOMIALS[b];
            if i + j + k + u + v + w <= 3 {
                table[a][b] = monomial_index(i + u, j + v, k + w);
            }
            b += 1;
        }
        a += 1;
    }
    table
};

/// Polynomial in `(x, y, z)` of total degree <= 3, coefficients in
/// [`MONOMIALS`] order.
#[derive(Clone, Copy)]
struct Poly3([f64; 20]);

impl Poly3 {
    fn zero() -> Self {
        Poly3([0.0; 20])
    }

    fn linear(x: f64, y: f64, z: f64, w: f64) -> Self {
        let mut p = Self::zero();
        p.0[monomial_index(1, 0, 0) as usize] = x;
        p.0[monomial_index(0, 1, 0) as usize] = y;
        p.0[monomial_index(0, 0, 1) as usize] = z;
        p.0[monomial_index(0, 0, 0) as usize] = w;
        p
    }

    fn mul(&self, other: &Poly3) -> Poly3 {
        let mut out = Poly3::zero();
        for (a, &ca) in self.0.iter().enumerate() {
            if ca == 0.0 {
                continue;
            }
            for (b, &cb) in other.0.iter().enumerate() {
                let p = PRODUCT[a][b];
                debug_assert!(p != NO_MONOMIAL || cb == 0.0);
                if p != NO_MONOMIAL {
                    out.0[p as usize] += ca * cb;
                }
            }
        }
        out
    }

    fn add(&self, other: &Poly3) -> Poly3 {
        Poly3(std::array::from_fn(|i| self.0[i] + other.0[i]))
    }

    fn scale(&self, s: f64) -> Poly3 {
        Poly3(self.0.map(|c| c * s))
    }

    fn eval(&self, x: f64, y: f64, z: f64) -> f64 {
        let (xp, yp, zp) = (powers(x), powers(y), powers(z));
        MONOMIALS.iter().zip(&self.0).map(|(&(i, j, k), c)| c * xp[i] * yp[j] * zp[k]).sum()
    }

    fn gradient(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (xp, yp, zp) = (powers(x), powers(y), powers(z));
        let mut g = [0.0; 3];
        for (&(i, j, k), &c) in MONOMIALS.iter().zip(&self.0) {
            if i > 0 {
                g[0] += c * i as f64 * xp[i - 1] * yp[j] * zp[k];
            }
            if j > 0 {
                g[1] += c * j as f64 * xp[i] * yp[j - 1] * zp[k];
            }
            if k > 0 {
                g[2] += c * k as f64 * xp[i] * yp[j] * zp[k - 1];
            }
        }
        g
    }
}

fn powers(v: f64) -> [f64; 4] {
    [1.0, v, v * v, v * v * v]
}

/// Polynomial in one variable, ascending powers.
#[derive(Clone, Debug, PartialEq)]
struct UniPoly(Vec<f64>);

impl UniPoly {
    fn mul(&self, other: &UniPoly) -> UniPoly {
        let mut out = vec![0.0; self.0.len() + other.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in other.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        UniPoly(out)
    }

    fn sub(&self, other: &UniPoly) -> UniPoly {
        let n = self.0.len().max(other.0.len());
        UniPoly((0..n).map(|i| self.0.get(i).unwrap_or(&0.0) - other.0.get(i).unwrap_or(&0.0)).collect())
    }

    fn add(&self, other: &UniPoly) -> UniPoly {
        let n = self.0.len().max(other.0.len());
        UniPoly((0..n).map(|i| self.0.get(i).unwrap_or(&0.0) + other.0.get(i).unwrap_or(&0.0)).collect())
    }

    fn eval(&self, z: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * z + c)
    }

    fn eval_with_derivative(&self, z: f64) -> (f64, f64) {
        let mut p = 0.0;
        let mut dp = 0.0;
        for c in self.0.iter().rev() {
            dp = dp * z + p;
            p = p * z + c;
        }
        (p, dp)
    }
}

/// Essential matrices consistent with five bearing pairs `(query, db)` under
/// `db^T E query = 0`. At most ten candidates, each normalized to unit
/// Frobenius norm.
pub fn solve_five_point(pairs: &[(Vec3, Vec3); 5]) -> Result<Vec<EssentialMatrix>, SolverError> {
    let mut a = SMatrix::<f64, 9, 9>::zeros();
    for (row, (q, d)) in pairs.iter().enumerate() {
        let q = q.normalize();
        let d = d.normalize();
        for r in 0..3 {
            for c in 0..3 {
                a[(row, 3 * r + c)] = d[r] * q[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(SolverError::DegenerateSample)?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = &svd.singular_values;
    if s[order[4]] < 1e-10 * s[order[0]].max(f64::MIN_POSITIVE) {
        return Err(SolverError::DegenerateSample);
    }
    let basis: [Mat3; 4] = std::array::from_fn(|b| {
        let row = v_t.row(order[5 + b]);
        Mat3::from_fn(|r, c| row[3 * r + c])
    });

    // The hidden-variable polynomial can lose roots to cancellation or to
    // clusters that split into complex pairs or leave B(z) too
    // ill-conditioned to recover (x, y). A second pass in an orthogonally
    // remixed basis hides another coordinate; every solution satisfying the
    // essential constraints is kept, duplicates removed. Further remixes run
    // only while a pass reports nearly-real roots or bad residuals.
    let (first, _) = solve_in_basis(&basis)?;
    let mut good: Vec<Mat3> = Vec::new();
    let mut keep = |sols: &[Mat3]| {
        for e in sols {
            let duplicate = good.iter().any(|g| (g - e).norm().min((g + e).norm()) < 1e-6);
            if essential_residual(e) <= RESIDUAL_TOL && !duplicate {
                good.push(*e);
            }
        }
    };
    keep(&first);
    for h in [[1.0, 2.0, 3.0, 4.0], [4.0, -1.0, 2.0, -3.0], [-2.0, 3.0, 1.0, 5.0]] {
        let h = nalgebra::Vector4::from(h).normalize();
        let q: nalgebra::Matrix4<f64> = nalgebra::Matrix4::identity() - h * h.transpose() * 2.0;
        let mixed: [Mat3; 4] = std::array::from_fn(|i| (0..4).map(|j| basis[j] * q[(i, j)]).sum());
        let Ok((sols, clean)) = solve_in_basis(&mixed) else { continue };
        keep(&sols);
        if clean && sols.iter().all(|e| essential_residual(e) <= RESIDUAL_TOL) {
            break;
        }
    }
    good.sort_by(|a, b| essential_residual(a).total_cmp(&essential_residual(b)));
    good.truncate(10);
    let out = if good.is_empty() { first } else { good };
    Ok(out.into_iter().map(EssentialMatrix).collect())
}

const RESIDUAL_TOL: f64 = 1e-10;

/// Unit-norm essential matrices `x B0 + y B1 + z B2 + B3` satisfying the
/// ten cubic constraints, one per real root in `z`. The flag is false when
/// some root was rejected as only nearly real.
#[allow(clippy::needless_range_loop)]
fn solve_in_basis(basis: &[Mat3; 4]) -> Result<(Vec<Mat3>, bool), SolverError> {
    let e_poly: Vec<Vec<Poly3>> = (0..3)
        .map(|r| {
            (0..3)
                .map(|c| Poly3::linear(basis[0][(r, c)], basis[1][(r, c)], basis[2][(r, c)], basis[3][(r, c)]))
                .collect()
        })
        .collect();

    let mut constraints: Vec<Poly3> = Vec::with_capacity(10);
    let det = e_poly[0][0]
        .mul(&e_poly[1][1].mul(&e_poly[2][2]).add(&e_poly[1][2].mul(&e_poly[2][1]).scale(-1.0)))
        .add(
            &e_poly[0][1]
                .mul(&e_poly[1][0].mul(&e_poly[2][2]).add(&e_poly[1][2].mul(&e_poly[2][0]).scale(-1.0)))
                .scale(-1.0),
        )
        .add(&e_poly[0][2].mul(&e_poly[1][0].mul(&e_poly[2][1]).add(&e_poly[1][1].mul(&e_poly[2][0]).scale(-1.0))));
    constraints.push(det);

    // E E^T
    let mut eet = vec![vec![Poly3::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = Poly3::zero();
            for k in 0..3 {
                acc = acc.add(&e_poly[i][k].mul(&e_poly[j][k]));
            }
            eet[i][j] = acc;
        }
    }
    let trace = eet[0][0].add(&eet[1][1]).add(&eet[2][2]);
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = Poly3::zero();
            for k in 0..3 {
                acc = acc.add(&eet[i][k].mul(&e_poly[k][j]));
            }
            constraints.push(acc.scale(2.0).add(&trace.mul(&e_poly[i][j]).scale(-1.0)));
        }
    }

    let mut m = DMatrix::<f64>::zeros(10, 20);
    for (r, p) in constraints.iter().enumerate() {
        for (c, &v) in p.0.iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    gauss_jordan(&mut m)?;

    // Rows of the reduced matrix: leading monomial + tail over columns 10..20.
    let row_poly = |r: usize, times_z: bool| -> [UniPoly; 3] {
        let t = |c: usize| m[(r, c)];
        let (xp, yp, cp) = (vec![t(12), t(11), t(10)], vec![t(15), t(14), t(13)], vec![t(19), t(18), t(17), t(16)]);
        let shift = |v: Vec<f64>| if times_z { std::iter::once(0.0).chain(v).collect() } else { v };
        [UniPoly(shift(xp)), UniPoly(shift(yp)), UniPoly(shift(cp))]
    };
    let mut b: Vec<[UniPoly; 3]> = Vec::with_capacity(3);
    for (e, f) in [(4, 5), (6, 7), (8, 9)] {
        let pe = row_poly(e, false);
        let pf = row_poly(f, true);
        b.push([pe[0].sub(&pf[0]), pe[1].sub(&pf[1]), pe[2].sub(&pf[2])]);
    }

    let det3 = |m: &Vec<[UniPoly; 3]>| -> UniPoly {
        let minor = |a: &UniPoly, d: &UniPoly, b: &UniPoly, c: &UniPoly| a.mul(d).sub(&b.mul(c));
        let t0 = m[0][0].mul(&minor(&m[1][1], &m[2][2], &m[1][2], &m[2][1]));
        let t1 = m[0][1].mul(&minor(&m[1][0], &m[2][2], &m[1][2], &m[2][0]));
        let t2 = m[0][2].mul(&minor(&m[1][0], &m[2][1], &m[1][1], &m[2][0]));
        t0.sub(&t1).add(&t2)
    };
    let poly = det3(&b);

    let mut solutions = Vec::new();
    let (roots, clean) = real_roots(&poly);
    for z in roots {
        let bz = Mat3::from_fn(|r, c| b[r][c].eval(z));
        let rows = [bz.row(0).transpose(), bz.row(1).transpose(), bz.row(2).transpose()];
        let candidates = [rows[0].cross(&rows[1]), rows[0].cross(&rows[2]), rows[1].cross(&rows[2])];
        let v = candidates.iter().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap();
        if v[2].abs() < 1e-300 {
            continue;
        }
        let combine = |(x, y, z): (f64, f64, f64)| {
            let e = basis[0] * x + basis[1] * y + basis[2] * z + basis[3];
            let n = e.norm();
            (n > 0.0 && n.is_finite()).then(|| e / n)
        };
        if let Some(e) = combine(polish(&constraints, v[0] / v[2], v[1] / v[2], z)) {
            solutions.push(e);
        }
    }
    Ok((solutions, clean))
}

/// Gauss-Newton on the ten cubic constraints around a root estimate.
fn polish(constraints: &[Poly3], mut x: f64, mut y: f64, mut z: f64) -> (f64, f64, f64) {
    let mut c = constraint_cost(constraints, x, y, z);
    for _ in 0..4 {
        let mut jtj = Mat3::zeros();
        let mut jtr = Vec3::zeros();
        for p in constraints {
            let g = Vec3::from(p.gradient(x, y, z));
            let r = p.eval(x, y, z);
            jtj += g * g.transpose();
            jtr += g * r;
        }
        let Some(step) = jtj.lu().solve(&jtr) else { break };
        let (nx, ny, nz) = (x - step[0], y - step[1], z - step[2]);
        let nc = constraint_cost(constraints, nx, ny, nz);
        if !(nc < c) {
            break;
        }
        (x, y, z, c) = (nx, ny, nz, nc);
    }
    (x, y, z)
}

fn constraint_cost(constraints: &[Poly3], x: f64, y: f64, z: f64) -> f64 {
    constraints.iter().map(|p| p.eval(x, y, z).powi(2)).sum()
}

/// Violation of `det E = 0` and `2 E E^T E - tr(E E^T) E = 0` by a unit-norm `E`.
fn essential_residual(e: &Mat3) -> f64 {
    let eet = e * e.transpose();
    (2.0 * eet * e - eet.trace() * e).norm() + e.determinant().abs()
}

/// In-place reduced row echelon form on the first `rows` columns with partial pivoting.
fn gauss_jordan(m: &mut DMatrix<f64>) -> Result<(), SolverError> {
    let rows = m.nrows();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for col in 0..rows {
        let pivot = (col..rows).max_by(|&a, &b| m[(a, col)].abs().total_cmp(&m[(b, col)].abs())).unwrap();
        if m[(pivot, col)].abs() < 1e-14 * scale {
            return Err(SolverError::DegenerateSample);
        }
        m.swap_rows(col, pivot);
        let p = m[(col, col)];
        for c in 0..m.ncols() {
            m[(col, c)] /= p;
        }
        for r in 0..rows {
            if r != col {
                let factor = m[(r, col)];
                if factor != 0.0 {
                    for c in 0..m.ncols() {
                        m[(r, c)] -= factor * m[(col, c)];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Real roots from companion-matrix eigenvalues, polished by Newton steps.
/// Accepts eigenvalues with `|imag| < 1e-8 (1 + |real|)` after polishing.
/// The flag is false if a rejected eigenvalue had `|imag| < 1e-2 (1 + |real|)`.
fn real_roots(poly: &UniPoly) -> (Vec<f64>, bool) {
    let max = poly.0.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    if max == 0.0 {
        return (Vec::new(), true);
    }
    let mut coeffs = poly.0.clone();
    while coeffs.len() > 1 && coeffs.last().unwrap().abs() < 1e-14 * max {
        coeffs.pop();
    }
    let deg = coeffs.len() - 1;
    if deg == 0 {
        return (Vec::new(), true);
    }
    let lead = coeffs[deg];
    let mut companion = DMatrix::<f64>::zeros(deg, deg);
    for i in 1..deg {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        companion[(i, deg - 1)] = -coeffs[i] / lead;
    }
    let trimmed = UniPoly(coeffs);
    let eig = companion.complex_eigenvalues();
    let mut roots: Vec<f64> = Vec::new();
    let mut clean = true;
    for ev in eig.iter() {
        let mut z = nalgebra::Complex::new(ev.re, ev.im);
        // Newton polishing in the complex plane; a genuinely real root
        // collapses onto the real axis.
        for _ in 0..8 {
            let (mut p, mut dp) = (nalgebra::Complex::new(0.0, 0.0), nalgebra::Complex::new(0.0, 0.0));
            for c in trimmed.0.iter().rev() {
                dp = dp * z + p;
                p = p * z + c;
            }
            if dp.norm() == 0.0 {
                break;
            }
            let step = p / dp;
            z -= step;
            if step.norm() < 1e-16 * (1.0 + z.norm()) {
                break;
            }
        }
        if !z.re.is_finite() {
            continue;
        }
        if z.im.abs() >= 1e-8 * (1.0 + z.re.abs()) {
            clean &= z.im.abs() >= 1e-2 * (1.0 + z.re.abs());
            continue;
        }
        let mut r = z.re;
        for _ in 0..3 {
            let (p, dp) = trimmed.eval_with_derivative(r);
            if dp == 0.0 {
                break;
            }
            r -= p / dp;
        }
        if r.is_finite() && !roots.iter().any(|x| (x - r).abs() <= 1e-12 * (1.0 + r.abs())) {
            roots.push(r);
        }
    }
    (roots, clean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{essential_from_relative, so3_exp, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(rng: &mut impl Rng, planar: bool) -> (Pose, [(Vec3, Vec3); 5]) {
        let w = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let t = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rel = Pose::new(so3_exp(&w), t);
        let pairs = std::array::from_fn(|_| loop {
            let x = if planar {
                Vec3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    6.0 + 0.3 * rng.random_range(-2.0..2.0),
                )
            } else {
                Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..8.0))
            };
            let xd = rel.transform(&x);
            if xd.z > 0.1 {
                break (x.normalize(), xd.normalize());
            }
        });
        (rel, pairs)
    }

    fn aligned_distance(a: &Mat3, b: &Mat3) -> f64 {
        (a - b).norm().min((a + b).norm())
    }

    #[test]
    fn recovers_ground_truth_essential() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for planar in [false, true] {
            for _ in 0..200 {
                let (rel, pairs) = sample(&mut rng, planar);
                let gt = essential_from_relative(&rel).unwrap();
                let sols = solve_five_point(&pairs).unwrap();
                assert!(sols.len() <= 10);
                let best = sols.iter().map(|e| aligned_distance(e.matrix(), gt.matrix())).fold(f64::INFINITY, f64::min);
                assert!(best < 1e-6, "planar={planar} distance {best}");
                for e in &sols {
                    let m = e.matrix();
                    assert!(m.determinant().abs() < 1e-8, "det {} n {}", m.determinant(), sols.len());
                    let cubic = 2.0 * m * m.transpose() * m - (m * m.transpose()).trace() * m;
                    assert!(cubic.norm() < 1e-8, "cubic {}", cubic.norm());
                    for (q, d) in &pairs {
                        assert!(d.dot(&(m * q)).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn pure_rotation_is_degenerate() {
        let r = so3_exp(&Vec3::new(0.1, 0.2, -0.1));
        let pairs = std::array::from_fn(|i| {
            let x = Vec3::new(i as f64 * 0.3 - 0.5, (i * i) as f64 * 0.1 - 0.4, 1.0).normalize();
            (x, r * x)
        });
        assert_eq!(solve_five_point(&pairs), Err(SolverError::DegenerateSample));
    }

    #[test]
    fn uni_poly_eval() {
        let p = UniPoly(vec![1.0, -3.0, 2.0]);
        assert_eq!(p.eval(1.0), 0.0);
        assert_eq!(p.eval(0.5), 0.0);
        let (mut r, clean) = real_roots(&p);
        assert!(clean);
        r.sort_by(f64::total_cmp);
        assert!((r[0] - 0.5).abs() < 1e-14 && (r[1] - 1.0).abs() < 1e-14);
    }
}
