//! Spherical geometry on the unit q-space shell.
//!
//! Every great circle in this crate is traversed with the same two-branch
//! parameterisation. A parameter `p` in `[-2, 2]` walks a full circle spanned
//! by a "cosine" axis `a` and a "sine" axis `b`:
//!
//! ```text
//! |p| <= 1        p a + sqrt(1 - p^2) b
//! 1 < |p| <= 2    sgn(p) (2 - |p|) a - sqrt(1 - (2 - |p|)^2) b
//! ```
//!
//! The dominant circle uses `(a, b) = (u2, u3)` with parameter `beta`; the
//! perpendicular circle through `q(beta)` uses `(a, b) = (u1, q(beta))` with
//! parameter `alpha`.
//!
//! Discretised grids store indices `k, j` in `0..N`. The symmetric index range
//! `-N/4 ..= 3N/4 - 1` used when writing the formulas maps onto storage by
//! `k mod N` (see [`signed_index`] and [`storage_index`]).

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Unit-norm tolerance for [`Direction`].
pub const UNIT_TOL: f64 = 1e-12;
/// Orthogonality tolerance for [`Frame`] and rotations.
pub const FRAME_TOL: f64 = 1e-10;

/// A unit vector on the q-space shell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vector3<f64>);

impl Direction {
    pub const E1: Direction = Direction(Vector3::new(1.0, 0.0, 0.0));
    pub const E2: Direction = Direction(Vector3::new(0.0, 1.0, 0.0));
    pub const E3: Direction = Direction(Vector3::new(0.0, 0.0, 1.0));

    /// Normalises `(x, y, z)`.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::from_vector(Vector3::new(x, y, z))
    }

    /// Normalises `v`; zero and non-finite vectors are rejected.
    pub fn from_vector(v: Vector3<f64>) -> Result<Self> {
        let norm = v.norm();
        if !norm.is_finite() || norm < 1e-300 {
            return Err(Error::Domain(format!("cannot normalise vector {:?}", v.as_slice())));
        }
        Ok(Direction(v / norm))
    }

    /// Wraps a vector already known to be unit length.
    pub(crate) fn from_unit(v: Vector3<f64>) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9, "not unit: {}", v.norm());
        Direction(v)
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.0.x, self.0.y, self.0.z]
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn antipode(&self) -> Direction {
        Direction(-self.0)
    }

    /// Geodesic angle in `[0, pi]`.
    pub fn angle_to(&self, other: &Direction) -> f64 {
        self.0.cross(&other.0).norm().atan2(self.0.dot(&other.0))
    }

    /// Angle between the axes `±self` and `±other`, in `[0, pi/2]`.
    pub fn axis_angle_to(&self, other: &Direction) -> f64 {
        let a = self.angle_to(other);
        a.min(std::f64::consts::PI - a)
    }

    /// The representative of `±self` whose first nonzero component is positive.
    pub fn canonical_sign(&self) -> Direction {
        for c in self.0.iter() {
            if *c > 0.0 {
                return *self;
            }
            if *c < 0.0 {
                return self.antipode();
            }
        }
        *self
    }

    pub fn rotated(&self, rotation: &Rotation3<f64>) -> Direction {
        Direction(rotation * self.0)
    }
}

/// A right-handed orthonormal basis `(u1, u2, u3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    u1: Direction,
    u2: Direction,
    u3: Direction,
}

impl Frame {
    pub fn new(u1: Direction, u2: Direction, u3: Direction) -> Result<Self> {
        let checks = [u1.dot(&u2), u1.dot(&u3), u2.dot(&u3)];
        if checks.iter().any(|d| d.abs() > FRAME_TOL) {
            return Err(Error::Domain(format!("frame axes not orthogonal: {checks:?}")));
        }
        if (u1.0.cross(&u2.0) - u3.0).norm() > FRAME_TOL {
            return Err(Error::Domain("frame is not right-handed".into()));
        }
        Ok(Frame { u1, u2, u3 })
    }

    /// Completes `(u1, u2)` with `u3 = u1 x u2`.
    pub fn from_axes(u1: Direction, u2: Direction) -> Result<Self> {
        let u3 = Direction::from_vector(u1.0.cross(&u2.0))?;
        Frame::new(u1, u2, u3)
    }

    pub fn canonical() -> Self {
        Frame { u1: Direction::E1, u2: Direction::E2, u3: Direction::E3 }
    }

    /// The frame whose axes are the columns of `rotation`.
    pub fn from_rotation(rotation: &Rotation3<f64>) -> Self {
        let m = rotation.matrix();
        Frame {
            u1: Direction::from_unit(m.column(0).into_owned()),
            u2: Direction::from_unit(m.column(1).into_owned()),
            u3: Direction::from_unit(m.column(2).into_owned()),
        }
    }

    pub fn u1(&self) -> &Direction {
        &self.u1
    }

    pub fn u2(&self) -> &Direction {
        &self.u2
    }

    pub fn u3(&self) -> &Direction {
        &self.u3
    }

    pub fn axes(&self) -> [&Direction; 3] {
        [&self.u1, &self.u2, &self.u3]
    }

    /// Columns `u1, u2, u3`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.u1.0, self.u2.0, self.u3.0])
    }
}

/// Checks that `m` is a proper rotation within [`FRAME_TOL`].
pub fn validate_rotation(m: &Matrix3<f64>) -> Result<Rotation3<f64>> {
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if !(err <= FRAME_TOL) || !((det - 1.0).abs() <= FRAME_TOL) {
        return Err(Error::Domain(format!(
            "matrix is not a proper rotation (orthogonality error {err:.3e}, det {det})"
        )));
    }
    Ok(Rotation3::from_matrix_unchecked(*m))
}

/// Applies `rotation` to every axis of `frame`.
pub fn rotate_frame(frame: &Frame, rotation: &Matrix3<f64>) -> Result<Frame> {
    let r = validate_rotation(rotation)?;
    Ok(Frame {
        u1: frame.u1.rotated(&r),
        u2: frame.u2.rotated(&r),
        u3: frame.u3.rotated(&r),
    })
}

/// Uniform random rotation via a normalised Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 1e-8 {
            let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
            return UnitQuaternion::from_quaternion(quat).to_rotation_matrix();
        }
    }
}

/// Rotation by `angle` about `axis` (right-hand rule).
pub fn axis_rotation(axis: &Direction, angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis.0), angle)
}

fn circle_point(p: f64, a: &Vector3<f64>, b: &Vector3<f64>, name: &str) -> Result<Vector3<f64>> {
    if !(p.abs() <= 2.0) {
        return Err(Error::Domain(format!("{name} = {p} is outside [-2, 2]")));
    }
    // |p| == 1 belongs to the first branch; both branches agree there.
    let v = if p.abs() <= 1.0 {
        a * p + b * (1.0 - p * p).max(0.0).sqrt()
    } else {
        let r = 2.0 - p.abs();
        a * (p.signum() * r) - b * (1.0 - r * r).max(0.0).sqrt()
    };
    Ok(v)
}

/// Point `q(beta)` on the dominant great circle `{q : u1 . q = 0}`.
pub fn beta_point(beta: f64, frame: &Frame) -> Result<Direction> {
    circle_point(beta, &frame.u2.0, &frame.u3.0, "beta").map(Direction::from_unit)
}

/// Point `q_perp(alpha, beta)` on the perpendicular great circle through
/// `u1` and `q(beta)`.
pub fn perp_point(alpha: f64, beta: f64, frame: &Frame) -> Result<Direction> {
    let q = beta_point(beta, frame)?;
    circle_point(alpha, &frame.u1.0, &q.0, "alpha").map(Direction::from_unit)
}

/// Symmetric index in `-N/4 ..= 3N/4 - 1` for storage index `k` in `0..N`.
pub fn signed_index(k: usize, n: usize) -> i64 {
    let k = (k % n) as i64;
    let n = n as i64;
    if k >= 3 * n / 4 {
        k - n
    } else {
        k
    }
}

/// Storage index in `0..N` for any integer grid index (cyclic extension).
pub fn storage_index(p: i64, n: usize) -> usize {
    p.rem_euclid(n as i64) as usize
}

/// The three-branch grid parameter (`beta_k` or `alpha_j`) for index `p`.
pub fn grid_parameter(p: i64, n: usize) -> f64 {
    let s = signed_index(storage_index(p, n), n);
    let c = (2.0 * std::f64::consts::PI * s as f64 / n as f64).cos();
    if s < 0 {
        2.0 - c
    } else if s < (n / 2) as i64 {
        c
    } else {
        -2.0 - c
    }
}

/// Orthonormal basis `(a, b)` of the plane perpendicular to `axis`.
///
/// Depends only on the axis `±axis`, so circles about `x` and `-x` are
/// sampled at identical points.
pub fn orthonormal_basis(axis: &Direction) -> (Direction, Direction) {
    let x = axis.canonical_sign().0;
    let helper = if x.x.abs() <= x.y.abs() && x.x.abs() <= x.z.abs() {
        Vector3::x()
    } else if x.y.abs() <= x.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let a = helper.cross(&x).normalize();
    let b = x.cross(&a);
    (Direction::from_unit(a), Direction::from_unit(b))
}

/// `count` equally spaced points on the great circle perpendicular to `axis`.
pub fn great_circle(axis: &Direction, count: usize) -> Vec<Direction> {
    let (a, b) = orthonormal_basis(axis);
    (0..count)
        .map(|i| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
            Direction::from_unit(a.0 * th.cos() + b.0 * th.sin())
        })
        .collect()
}

/// Vertices of the icosahedron subdivided `level` times (`10 * 4^level + 2` points).
pub fn icosphere(level: u32) -> Vec<Direction> {
    use std::collections::HashMap;

    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push((verts[a] + verts[b]).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    verts.into_iter().map(Direction::from_unit).collect()
}

/// The discretised dominant great circle and its perpendicular circles.
///
/// `dominant_points[k]` is `q_k` and `perp_points[j * N + k]` is
/// `q_perp(j, k)`, both in storage indexing. Accessors taking `i64` accept
/// any integer index and wrap cyclically.
#[derive(Debug, Clone)]
pub struct CircleGrid {
    frame: Frame,
    n: usize,
    dominant_points: Vec<Direction>,
    perp_points: Vec<Direction>,
    dominant_values: Vec<f64>,
    perp_values: Vec<f64>,
    /// Funk-Radon transform samples over the candidate directions, used for the GFA.
    pub frt_samples: Vec<f64>,
    /// Number of grid values produced by the interpolator's fallback path.
    pub fallback_count: usize,
}

/// Builds the `N x N` circle grid for `frame`. `N` must be a positive multiple of 8.
pub fn build_grid(frame: &Frame, n: usize) -> Result<CircleGrid> {
    if n == 0 || n % 8 != 0 {
        return Err(Error::Config(format!("grid size N = {n} must be a positive multiple of 8")));
    }
    let u1 = frame.u1.0;
    let dominant_points: Vec<Direction> = (0..n)
        .map(|k| {
            let beta = grid_parameter(k as i64, n);
            circle_point(beta, &frame.u2.0, &frame.u3.0, "beta").map(Direction::from_unit)
        })
        .collect::<Result<_>>()?;
    let mut perp_points = Vec::with_capacity(n * n);
    for j in 0..n {
        let alpha = grid_parameter(j as i64, n);
        for q in &dominant_points {
            perp_points.push(Direction::from_unit(circle_point(alpha, &u1, &q.0, "alpha")?));
        }
    }
    Ok(CircleGrid {
        frame: *frame,
        n,
        dominant_points,
        perp_points,
        dominant_values: vec![0.0; n],
        perp_values: vec![0.0; n * n],
        frt_samples: Vec::new(),
        fallback_count: 0,
    })
}

impl CircleGrid {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    /// Storage index `j` of the pole `alpha = 1`, i.e. the point `u1`.
    pub fn pole_index(&self) -> usize {
        0
    }

    /// Storage indices `j` with `alpha = 0`; these rows coincide with the dominant circle.
    pub fn equator_indices(&self) -> [usize; 2] {
        [self.n / 4, 3 * self.n / 4]
    }

    pub fn dominant_point(&self, k: i64) -> &Direction {
        &self.dominant_points[storage_index(k, self.n)]
    }

    pub fn perp_point(&self, j: i64, k: i64) -> &Direction {
        &self.perp_points[storage_index(j, self.n) * self.n + storage_index(k, self.n)]
    }

    pub fn dominant_points(&self) -> &[Direction] {
        &self.dominant_points
    }

    /// Row-major `[j * N + k]`.
    pub fn perp_points(&self) -> &[Direction] {
        &self.perp_points
    }

    pub fn dominant_value(&self, k: i64) -> f64 {
        self.dominant_values[storage_index(k, self.n)]
    }

    pub fn perp_value(&self, j: i64, k: i64) -> f64 {
        self.perp_values[storage_index(j, self.n) * self.n + storage_index(k, self.n)]
    }

    pub fn dominant_values(&self) -> &[f64] {
        &self.dominant_values
    }

    pub fn perp_values(&self) -> &[f64] {
        &self.perp_values
    }

    /// Evaluates `f` at every grid point.
    pub fn fill<F: Fn(&Direction) -> f64>(&mut self, f: F) {
        self.dominant_values = self.dominant_points.iter().map(&f).collect();
        self.perp_values = self.perp_points.iter().map(&f).collect();
    }

    /// Replaces the grid values; lengths must be `N` and `N * N`.
    pub fn set_values(&mut self, dominant: Vec<f64>, perp: Vec<f64>) -> Result<()> {
        if dominant.len() != self.n || perp.len() != self.n * self.n {
            return Err(Error::Data(format!(
                "grid value lengths {} / {} do not match N = {}",
                dominant.len(),
                perp.len(),
                self.n
            )));
        }
        self.dominant_values = dominant;
        self.perp_values = perp;
        Ok(())
    }

    /// Average perpendicular diffusion `N^-1 sum_k A(q_perp(j, k))`.
    pub fn avg_perp(&self, j: i64) -> f64 {
        let row = storage_index(j, self.n) * self.n;
        self.perp_values[row..row + self.n].iter().sum::<f64>() / self.n as f64
    }

    /// Average perpendicular diffusion on the dominant circle (`alpha = 0`).
    pub fn avg_perp_equator(&self) -> f64 {
        self.avg_perp(self.n as i64 / 4)
    }

    /// Average perpendicular diffusion at the pole (`alpha = 1`).
    pub fn avg_perp_pole(&self) -> f64 {
        self.avg_perp(0)
    }

    /// Mean over the dominant circle values.
    pub fn dominant_mean(&self) -> f64 {
        self.dominant_values.iter().sum::<f64>() / self.n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Direction, b: [f64; 3], tol: f64) {
        for (x, y) in a.to_array().iter().zip(b) {
            assert_abs_diff_eq!(*x, y, epsilon = tol);
        }
    }

    #[test]
    fn beta_point_examples() {
        let f = Frame::canonical();
        close(&beta_point(0.0, &f).unwrap(), [0.0, 0.0, 1.0], 1e-15);
        close(&beta_point(1.0, &f).unwrap(), [0.0, 1.0, 0.0], 1e-15);
        close(&beta_point(1.5, &f).unwrap(), [0.0, 0.5, -0.75f64.sqrt()], 1e-15);
        close(&beta_point(-1.5, &f).unwrap(), [0.0, -0.5, -0.75f64.sqrt()], 1e-15);
        assert!(matches!(beta_point(2.5, &f), Err(Error::Domain(_))));
        assert!(beta_point(f64::NAN, &f).is_err());
    }

    #[test]
    fn perp_point_examples() {
        let f = Frame::canonical();
        for beta in [-1.7, -0.3, 0.0, 0.9, 1.2] {
            let b = beta_point(beta, &f).unwrap();
            close(&perp_point(0.0, beta, &f).unwrap(), b.to_array(), 1e-15);
            close(&perp_point(1.0, beta, &f).unwrap(), [1.0, 0.0, 0.0], 1e-15);
        }
        close(&perp_point(0.6, 0.0, &f).unwrap(), [0.6, 0.0, 0.8], 1e-15);
        assert!(perp_point(-2.01, 0.0, &f).is_err());
    }

    #[test]
    fn grid_k0_and_pole() {
        let g = build_grid(&Frame::canonical(), 8).unwrap();
        close(g.dominant_point(0), [0.0, 1.0, 0.0], 1e-15);
        for k in 0..8 {
            close(g.perp_point(g.pole_index() as i64, k), [1.0, 0.0, 0.0], 1e-15);
            for j in g.equator_indices() {
                let p = g.perp_point(j as i64, k);
                assert!(p.axis_angle_to(g.dominant_point(k)) < 1e-12);
            }
        }
    }

    #[test]
    fn grid_requires_multiple_of_eight() {
        assert!(matches!(build_grid(&Frame::canonical(), 12), Err(Error::Config(_))));
        assert!(build_grid(&Frame::canonical(), 0).is_err());
    }

    #[test]
    fn grid_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frame = Frame::from_rotation(&random_rotation(&mut rng));
        let n = 64;
        let g = build_grid(&frame, n).unwrap();
        let step = 2.0 * std::f64::consts::PI / n as f64;
        for k in 0..n as i64 {
            let q = g.dominant_point(k);
            assert_abs_diff_eq!(q.vector().norm(), 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(frame.u1().dot(q), 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(q.angle_to(g.dominant_point(k + 1)), step, epsilon = 1e-8);
            assert_eq!(g.dominant_point(k + n as i64), q);
            assert_eq!(g.dominant_point(k - n as i64), q);
            for j in 0..n as i64 {
                let p = g.perp_point(j, k);
                assert_abs_diff_eq!(p.vector().norm(), 1.0, epsilon = 1e-10);
                assert_abs_diff_eq!(p.angle_to(g.perp_point(j + 1, k)), step, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn beta_index_is_equal_arc_bijection() {
        let n = 32usize;
        let f = Frame::canonical();
        let g = build_grid(&f, n).unwrap();
        for p in -(n as i64) / 4..(3 * n as i64) / 4 {
            let th = 2.0 * std::f64::consts::PI * p as f64 / n as f64;
            close(g.dominant_point(p), [0.0, th.cos(), th.sin()], 1e-12);
            assert_eq!(signed_index(storage_index(p, n), n), p);
        }
    }

    #[test]
    fn rotate_frame_examples() {
        let f = Frame::canonical();
        assert_eq!(rotate_frame(&f, &Matrix3::identity()).unwrap(), f);
        let r = axis_rotation(&Direction::E3, std::f64::consts::FRAC_PI_2);
        let g = rotate_frame(&f, r.matrix()).unwrap();
        close(g.u1(), [0.0, 1.0, 0.0], 1e-15);
        close(g.u2(), [-1.0, 0.0, 0.0], 1e-15);
        close(g.u3(), [0.0, 0.0, 1.0], 1e-15);
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(rotate_frame(&f, &reflect).is_err());
        assert!(rotate_frame(&f, &(Matrix3::identity() * 1.01)).is_err());
    }

    #[test]
    fn frame_validation() {
        assert!(Frame::new(Direction::E1, Direction::E3, Direction::E2).is_err());
        assert!(Frame::new(Direction::E1, Direction::E1, Direction::E3).is_err());
        assert!(Frame::from_axes(Direction::E2, Direction::E3).is_ok());
    }

    #[test]
    fn perpendicular_circle_shifted_by_two_is_same_circle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Frame::from_rotation(&random_rotation(&mut rng));
        for beta in [-1.0, -0.4, 0.0, 0.7] {
            for i in -40..40 {
                let alpha = i as f64 / 20.0;
                let shifted = perp_point(alpha, beta + 2.0 * if beta <= 0.0 { 1.0 } else { -1.0 }, &f)
                    .unwrap();
                let mirror = if alpha == 0.0 { 0.0 } else { alpha.signum() * (2.0 - alpha.abs()) };
                let p = if alpha == 0.0 {
                    beta_point(beta, &f).unwrap().antipode()
                } else {
                    perp_point(mirror, beta, &f).unwrap()
                };
                close(&shifted, p.to_array(), 1e-12);
            }
        }
    }

    #[test]
    fn icosphere_counts() {
        assert_eq!(icosphere(0).len(), 12);
        assert_eq!(icosphere(4).len(), 2562);
    }

    #[test]
    fn basis_is_shared_by_antipodes() {
        let d = Direction::new(0.3, -0.5, 0.8).unwrap();
        assert_eq!(orthonormal_basis(&d), orthonormal_basis(&d.antipode()));
        let (a, b) = orthonormal_basis(&d);
        assert_abs_diff_eq!(a.dot(&d), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.dot(&d), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(a.dot(&b), 0.0, epsilon = 1e-15);
    }
}
