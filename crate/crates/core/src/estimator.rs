//! From raw magnitudes to a filled [`CircleGrid`].
//!
//! Measurements are normalised by the mean `b = 0` magnitude, reflected to
//! their antipodes, and interpolated linearly inside the spherical Delaunay
//! triangulation of the augmented directions. The Funk-Radon transform of the
//! interpolant locates the dominant direction `u1`; `u2` is the largest value
//! on the dominant circle.

use std::collections::HashMap;
use std::sync::OnceLock;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{build_grid, great_circle, icosphere, orthonormal_basis, CircleGrid, Direction, Frame};
use crate::phantom::HardiSample;

/// Quadrature nodes per Funk-Radon circle.
pub const DEFAULT_FRT_NODES: usize = 72;
/// Samples on the dominant circle when choosing `u2`.
pub const MINOR_AXIS_SAMPLES: usize = 720;
/// Angular radius of the refinement cap around the coarse winner.
pub const REFINE_CAP_DEG: f64 = 20.0;
/// Directions closer than this (radians, as axes) are merged during normalisation.
pub const MERGE_TOL: f64 = 1e-9;

const CELLS: usize = 8;
const INSIDE_TOL: f64 = 1e-13;

/// Piecewise-linear interpolant on a spherical triangulation.
///
/// Within each triangle `(a, b, c)` the weights of `q` are
/// `(q . b x c, q . c x a, q . a x b)` normalised to sum one: barycentric
/// coordinates of the central projection of `q` onto the triangle's plane.
#[derive(Debug, Clone)]
pub struct SphericalInterpolator {
    points: Vec<Vector3<f64>>,
    values: Vec<f64>,
    triangles: Vec<[usize; 3]>,
    edge_normals: Vec<[Vector3<f64>; 3]>,
    neighbors: Vec<[usize; 3]>,
    cube_map: Vec<usize>,
}

impl SphericalInterpolator {
    /// Triangulates `points` (unit vectors surrounding the origin) carrying `values`.
    pub fn new(points: Vec<Vector3<f64>>, values: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::Data("interpolator points and values differ in length".into()));
        }
        if points.len() < 4 {
            return Err(Error::Data("interpolation needs at least 4 points".into()));
        }
        let triangles = convex_hull(&points)?;
        let edge_normals = triangles
            .iter()
            .map(|&[a, b, c]| {
                let (a, b, c) = (points[a], points[b], points[c]);
                [b.cross(&c), c.cross(&a), a.cross(&b)]
            })
            .collect();
        let mut edges = HashMap::with_capacity(triangles.len() * 3);
        for (t, tri) in triangles.iter().enumerate() {
            for i in 0..3 {
                edges.insert((tri[i], tri[(i + 1) % 3]), t);
            }
        }
        let neighbors = triangles
            .iter()
            .map(|tri| {
                // Neighbour across the edge opposite vertex i.
                std::array::from_fn(|i| {
                    let (p, q) = (tri[(i + 1) % 3], tri[(i + 2) % 3]);
                    edges.get(&(q, p)).copied().unwrap_or(usize::MAX)
                })
            })
            .collect();
        let mut interp = SphericalInterpolator {
            points,
            values,
            triangles,
            edge_normals,
            neighbors,
            cube_map: Vec::new(),
        };
        interp.cube_map = (0..6 * CELLS * CELLS)
            .map(|cell| interp.brute_force(&cell_center(cell)).map(|(t, _)| t).unwrap_or(0))
            .collect();
        Ok(interp)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    fn weights(&self, t: usize, q: &Vector3<f64>) -> [f64; 3] {
        let n = &self.edge_normals[t];
        [q.dot(&n[0]), q.dot(&n[1]), q.dot(&n[2])]
    }

    fn brute_force(&self, q: &Vector3<f64>) -> Option<(usize, [f64; 3])> {
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for t in 0..self.triangles.len() {
            let w = self.weights(t, q);
            let worst = w[0].min(w[1]).min(w[2]);
            if w.iter().sum::<f64>() > 0.0 && best.as_ref().is_none_or(|b| worst > b.2) {
                best = Some((t, w, worst));
            }
        }
        best.filter(|b| b.2 >= -1e-9).map(|(t, w, _)| (t, w))
    }

    fn locate(&self, q: &Vector3<f64>, hint: usize) -> Option<(usize, [f64; 3])> {
        let mut t = if hint < self.triangles.len() { hint } else { self.cube_map[cell_of(q)] };
        for _ in 0..self.triangles.len() {
            let w = self.weights(t, q);
            let (i, min) = w.iter().enumerate().fold((0, f64::MAX), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            if min >= -INSIDE_TOL {
                return Some((t, w));
            }
            let next = self.neighbors[t][i];
            if next == usize::MAX {
                break;
            }
            t = next;
        }
        self.brute_force(q)
    }

    /// Interpolated value at `q`; the flag reports use of the
    /// inverse-distance fallback for degenerate neighbourhoods.
    pub fn eval_with_hint(&self, q: &Direction, hint: &mut usize) -> (f64, bool) {
        let v = q.vector();
        if let Some((t, w)) = self.locate(v, *hint) {
            let w = [w[0].max(0.0), w[1].max(0.0), w[2].max(0.0)];
            let total = w[0] + w[1] + w[2];
            if total > 1e-300 {
                *hint = t;
                let tri = self.triangles[t];
                let value = (0..3).map(|i| w[i] * self.values[tri[i]]).sum::<f64>() / total;
                return (value, false);
            }
        }
        (self.inverse_distance(v), true)
    }

    pub fn eval(&self, q: &Direction) -> f64 {
        self.eval_with_hint(q, &mut usize::MAX.clone()).0
    }

    fn inverse_distance(&self, q: &Vector3<f64>) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (p, v) in self.points.iter().zip(&self.values) {
            let angle = p.cross(q).norm().atan2(p.dot(q));
            if angle < 1e-12 {
                return *v;
            }
            let w = 1.0 / (angle * angle);
            num += w * v;
            den += w;
        }
        num / den
    }
}

fn cell_of(q: &Vector3<f64>) -> usize {
    let (ax, ay, az) = (q.x.abs(), q.y.abs(), q.z.abs());
    let (face, u, v, m) = if ax >= ay && ax >= az {
        (if q.x > 0.0 { 0 } else { 1 }, q.y, q.z, ax)
    } else if ay >= az {
        (if q.y > 0.0 { 2 } else { 3 }, q.z, q.x, ay)
    } else {
        (if q.z > 0.0 { 4 } else { 5 }, q.x, q.y, az)
    };
    let idx = |s: f64| (((s / m + 1.0) * 0.5 * CELLS as f64) as usize).min(CELLS - 1);
    (face * CELLS + idx(u)) * CELLS + idx(v)
}

fn cell_center(cell: usize) -> Vector3<f64> {
    let face = cell / (CELLS * CELLS);
    let (i, j) = ((cell / CELLS) % CELLS, cell % CELLS);
    let u = -1.0 + (i as f64 + 0.5) * 2.0 / CELLS as f64;
    let v = -1.0 + (j as f64 + 0.5) * 2.0 / CELLS as f64;
    let s = if face % 2 == 0 { 1.0 } else { -1.0 };
    let p = match face / 2 {
        0 => Vector3::new(s, u, v),
        1 => Vector3::new(v, s, u),
        _ => Vector3::new(u, v, s),
    };
    p.normalize()
}

/// Incremental 3D convex hull; faces are outward oriented.
fn convex_hull(points: &[Vector3<f64>]) -> Result<Vec<[usize; 3]>> {
    let p = points;
    let argmax = |f: &dyn Fn(&Vector3<f64>) -> f64| {
        (0..p.len()).max_by(|&a, &b| f(&p[a]).total_cmp(&f(&p[b]))).unwrap_or(0)
    };
    let i0 = 0;
    let i1 = argmax(&|x| (x - p[i0]).norm());
    let i2 = argmax(&|x| (x - p[i0]).cross(&(p[i1] - p[i0])).norm());
    let orient = |a: usize, b: usize, c: usize, x: &Vector3<f64>| (p[b] - p[a]).cross(&(p[c] - p[a])).dot(&(x - p[a]));
    let i3 = argmax(&|x| orient(i0, i1, i2, x).abs());
    if orient(i0, i1, i2, &p[i3]).abs() < 1e-10 {
        return Err(Error::Data("sampling directions are coplanar; cannot triangulate".into()));
    }
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let seed = [i0, i1, i2, i3];
    for skip in 0..4 {
        let mut f: Vec<usize> = seed.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, v)| *v).collect();
        if orient(f[0], f[1], f[2], &p[seed[skip]]) > 0.0 {
            f.swap(1, 2);
        }
        faces.push([f[0], f[1], f[2]]);
    }
    let mut alive = vec![true; 4];
    for (idx, x) in p.iter().enumerate() {
        if seed.contains(&idx) {
            continue;
        }
        let visible: Vec<usize> =
            (0..faces.len()).filter(|&f| alive[f] && orient(faces[f][0], faces[f][1], faces[f][2], x) > 1e-14).collect();
        if visible.is_empty() {
            continue;
        }
        let mut directed = std::collections::HashSet::new();
        for &f in &visible {
            for i in 0..3 {
                directed.insert((faces[f][i], faces[f][(i + 1) % 3]));
            }
        }
        let mut horizon = Vec::new();
        for &f in &visible {
            for i in 0..3 {
                let (a, b) = (faces[f][i], faces[f][(i + 1) % 3]);
                if !directed.contains(&(b, a)) {
                    horizon.push((a, b));
                }
            }
            alive[f] = false;
        }
        for (a, b) in horizon {
            faces.push([a, b, idx]);
            alive.push(true);
        }
    }
    Ok(faces.into_iter().zip(alive).filter(|(_, a)| *a).map(|(f, _)| f).collect())
}

/// Normalised, antipodally augmented measurements with their interpolant.
#[derive(Debug, Clone)]
pub struct NormalizedDiffusion {
    points: Vec<Direction>,
    values: Vec<f64>,
    /// Per-measurement noise scale estimate, relative to `abar0`.
    pub sigma_star: f64,
    /// Whether `sigma_star` came from the nearest-neighbour fallback.
    pub sigma_star_fallback: bool,
    /// Mean `b = 0` magnitude used as the normaliser.
    pub abar0: f64,
    interpolator: SphericalInterpolator,
}

impl NormalizedDiffusion {
    /// Augmented directions: `points[2i]` and `points[2i + 1]` are antipodes.
    pub fn points(&self) -> &[Direction] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn interpolator(&self) -> &SphericalInterpolator {
        &self.interpolator
    }

    /// Linear interpolation of the normalised measurements at `q`.
    pub fn interpolate(&self, q: &Direction) -> f64 {
        self.interpolator.eval(q)
    }

    /// Funk-Radon transform: mean of the interpolant over `nodes` equally
    /// spaced points on the great circle perpendicular to `x`.
    pub fn frt(&self, x: &Direction, nodes: usize) -> Result<f64> {
        if nodes < 16 {
            return Err(Error::Config(format!("FRT needs at least 16 nodes, got {nodes}")));
        }
        Ok(self.frt_unchecked(x, nodes))
    }

    fn frt_unchecked(&self, x: &Direction, nodes: usize) -> f64 {
        let mut hint = usize::MAX;
        great_circle(x, nodes).iter().map(|q| self.interpolator.eval_with_hint(q, &mut hint).0).sum::<f64>()
            / nodes as f64
    }
}

/// Normalises `sample` by its mean `b = 0` magnitude and reflects every
/// measurement to its antipode. Coincident axes are merged by averaging.
pub fn normalize(sample: &HardiSample) -> Result<NormalizedDiffusion> {
    let abar0 = sample.b0_values.iter().sum::<f64>() / sample.b0_values.len() as f64;
    if !(abar0 > 0.0) || !abar0.is_finite() {
        return Err(Error::Data(format!("mean b=0 magnitude {abar0} is not positive")));
    }
    let mut axes: Vec<(Direction, f64, usize)> = Vec::new();
    for (d, v) in sample.scheme.directions().iter().zip(&sample.raw_values) {
        let d = d.canonical_sign();
        match axes.iter_mut().find(|(a, _, _)| a.axis_angle_to(&d) < MERGE_TOL) {
            Some(entry) => {
                entry.1 += v;
                entry.2 += 1;
            }
            None => axes.push((d, *v, 1)),
        }
    }
    let mut points = Vec::with_capacity(2 * axes.len());
    let mut values = Vec::with_capacity(2 * axes.len());
    for (d, sum, count) in &axes {
        let v = sum / *count as f64 / abar0;
        points.extend([*d, d.antipode()]);
        values.extend([v, v]);
    }
    if points.len() < 12 {
        return Err(Error::Data(format!("need at least 6 distinct axes, got {}", axes.len())));
    }
    let interpolator =
        SphericalInterpolator::new(points.iter().map(|p| *p.vector()).collect(), values.clone())?;
    let sigma = estimate_sigma_star(sample)?;
    Ok(NormalizedDiffusion {
        points,
        values,
        sigma_star: sigma.value,
        sigma_star_fallback: sigma.fallback,
        abar0,
        interpolator,
    })
}

/// Interpolates `nd` at `q`.
pub fn interpolate(nd: &NormalizedDiffusion, q: &Direction) -> f64 {
    nd.interpolate(q)
}

/// Funk-Radon transform of `nd` at `x` with `nodes` circle samples.
pub fn frt(nd: &NormalizedDiffusion, x: &Direction, nodes: usize) -> Result<f64> {
    nd.frt(x, nodes)
}

/// The estimated frame and the coarse Funk-Radon values.
#[derive(Debug, Clone)]
pub struct DominantEstimate {
    pub frame: Frame,
    /// FRT at each distinct sampled axis (one per antipodal pair).
    pub frt_values: Vec<f64>,
    pub candidate_count: usize,
}

/// Tuning for [`dominant_direction_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DominantOptions {
    pub frt_nodes: usize,
    pub refine_cap_deg: f64,
    pub minor_axis_samples: usize,
}

impl Default for DominantOptions {
    fn default() -> Self {
        DominantOptions {
            frt_nodes: DEFAULT_FRT_NODES,
            refine_cap_deg: REFINE_CAP_DEG,
            minor_axis_samples: MINOR_AXIS_SAMPLES,
        }
    }
}

fn refinement_points() -> &'static [Direction] {
    static POINTS: OnceLock<Vec<Direction>> = OnceLock::new();
    POINTS.get_or_init(|| icosphere(4))
}

/// Local maximisation of `f` on the sphere from `start` by a compass
/// search, halving the step from `initial` until it drops below `finest`.
pub fn pattern_search(
    start: Direction,
    start_value: f64,
    f: impl Fn(&Direction) -> f64,
    initial: f64,
    finest: f64,
) -> Direction {
    let (mut best, mut best_value) = (start, start_value);
    let mut step = initial;
    while step > finest {
        let (a, b) = orthonormal_basis(&best);
        let mut improved = false;
        for (s, t) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            let v = best.vector() * step.cos() + (a.vector() * s + b.vector() * t) * step.sin();
            let trial = Direction::from_unit(v.normalize());
            let value = f(&trial);
            if value > best_value {
                best = trial;
                best_value = value;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

/// Dominant direction with default options.
pub fn dominant_direction(nd: &NormalizedDiffusion) -> DominantEstimate {
    dominant_direction_with(nd, &DominantOptions::default())
}

/// Maximises the FRT over the sampled axes, then over icosphere points in a
/// cap around the winner, then by a shrinking local pattern search.
pub fn dominant_direction_with(nd: &NormalizedDiffusion, opts: &DominantOptions) -> DominantEstimate {
    let nodes = opts.frt_nodes.max(16);
    let frt = |x: &Direction| nd.frt_unchecked(x, nodes);
    let candidates: Vec<Direction> = nd.points.iter().step_by(2).copied().collect();
    let frt_values: Vec<f64> = candidates.iter().map(frt).collect();
    let mut best = candidates[0];
    let mut best_value = frt_values[0];
    for (c, v) in candidates.iter().zip(&frt_values) {
        if *v > best_value {
            best = *c;
            best_value = *v;
        }
    }
    let cos_cap = opts.refine_cap_deg.to_radians().cos();
    let coarse = best;
    for p in refinement_points() {
        if p.dot(&coarse).abs() >= cos_cap {
            let v = frt(p);
            if v > best_value {
                best = *p;
                best_value = v;
            }
        }
    }
    let best = pattern_search(best, best_value, frt, 2f64.to_radians(), 0.02f64.to_radians());
    let u1 = best.canonical_sign();
    let mut hint = usize::MAX;
    let mut u2 = Direction::E1;
    let mut u2_value = f64::NEG_INFINITY;
    for q in great_circle(&u1, opts.minor_axis_samples.max(8)) {
        let v = nd.interpolator.eval_with_hint(&q, &mut hint).0;
        if v > u2_value {
            u2 = q;
            u2_value = v;
        }
    }
    let frame = Frame::from_axes(u1, u2).expect("circle samples are orthogonal to u1");
    DominantEstimate { frame, candidate_count: frt_values.len(), frt_values }
}

/// Interpolates `nd` on the `N x N` circle grid of `est.frame`.
pub fn fill_grid(nd: &NormalizedDiffusion, est: &DominantEstimate, n: usize) -> Result<CircleGrid> {
    let mut grid = build_grid(&est.frame, n)?;
    let mut fallback = 0;
    let mut hint = usize::MAX;
    let mut eval = |q: &Direction| {
        let (v, fb) = nd.interpolator.eval_with_hint(q, &mut hint);
        fallback += fb as usize;
        v
    };
    let dominant: Vec<f64> = grid.dominant_points().iter().map(&mut eval).collect();
    let perp: Vec<f64> = grid.perp_points().iter().map(&mut eval).collect();
    grid.set_values(dominant, perp)?;
    grid.frt_samples = est.frt_values.clone();
    grid.fallback_count = fallback;
    Ok(grid)
}

/// How the spread of the dominant circle values is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Deviation {
    /// Maximum absolute deviation from the mean.
    #[default]
    Maximum,
    /// Median absolute deviation from the mean.
    Median,
}

/// Mean `abar_N` of the dominant circle values and the spread
/// `sigma_A = sqrt(rho) * dev_k |A(q_k) - abar_N|`.
pub fn estimate_sigma_circle(grid: &CircleGrid, rho: f64, deviation: Deviation) -> Result<(f64, f64)> {
    let values = grid.dominant_values();
    if values.is_empty() {
        return Err(Error::Data("dominant circle is empty".into()));
    }
    if !(rho > 0.0 && rho <= 3.0) {
        return Err(Error::Config(format!("rho = {rho} must lie in (0, 3]")));
    }
    let abar = values.iter().sum::<f64>() / values.len() as f64;
    let mut dev: Vec<f64> = values.iter().map(|v| (v - abar).abs()).collect();
    let spread = match deviation {
        Deviation::Maximum => dev.iter().copied().fold(0.0, f64::max),
        Deviation::Median => {
            dev.sort_by(f64::total_cmp);
            let m = dev.len();
            if m % 2 == 1 {
                dev[m / 2]
            } else {
                0.5 * (dev[m / 2 - 1] + dev[m / 2])
            }
        }
    };
    Ok((abar, rho.sqrt() * spread))
}

/// The noise scale estimate and its provenance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaStar {
    pub value: f64,
    pub fallback: bool,
}

/// Per-measurement noise scale relative to the mean `b = 0` magnitude.
///
/// With two or more `b = 0` acquisitions this is their sample standard
/// deviation; otherwise the simulator's known sigma; otherwise a robust
/// scale of nearest-neighbour differences, flagged as a fallback.
pub fn estimate_sigma_star(sample: &HardiSample) -> Result<SigmaStar> {
    let b0 = &sample.b0_values;
    let abar0 = b0.iter().sum::<f64>() / b0.len() as f64;
    if !(abar0 > 0.0) {
        return Err(Error::Data(format!("mean b=0 magnitude {abar0} is not positive")));
    }
    if b0.len() >= 2 {
        let var = b0.iter().map(|v| (v - abar0).powi(2)).sum::<f64>() / (b0.len() - 1) as f64;
        return Ok(SigmaStar { value: var.sqrt() / abar0, fallback: false });
    }
    if let Some(sigma) = sample.noise_sigma {
        return Ok(SigmaStar { value: sigma / abar0, fallback: false });
    }
    let dirs = sample.scheme.directions();
    let mut diffs: Vec<f64> = (0..dirs.len())
        .map(|i| {
            let j = (0..dirs.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| dirs[i].axis_angle_to(&dirs[a]).total_cmp(&dirs[i].axis_angle_to(&dirs[b])))
                .unwrap_or(i);
            (sample.raw_values[i] - sample.raw_values[j]).abs()
        })
        .collect();
    diffs.sort_by(f64::total_cmp);
    let median = diffs[diffs.len() / 2];
    // Median |X - Y| of two iid normals is 0.6745 * sqrt(2) sigma.
    Ok(SigmaStar { value: median / (0.6745 * 2f64.sqrt()) / abar0, fallback: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, signed_index};
    use crate::phantom::{acquire, electrostatic_scheme, PaperModel};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noiseless(model: PaperModel, n: usize) -> NormalizedDiffusion {
        let scheme = electrostatic_scheme(n).unwrap();
        normalize(&acquire(&model.model(), &scheme, 0.0, 0).unwrap()).unwrap()
    }

    #[test]
    fn hull_is_closed_triangulation() {
        let nd = noiseless(PaperModel::A1, 60);
        let interp = nd.interpolator();
        // Euler: a triangulated sphere with V vertices has 2V - 4 faces.
        assert_eq!(interp.triangles().len(), 2 * interp.points().len() - 4);
        let mut used = vec![false; interp.points().len()];
        for t in interp.triangles() {
            for v in t {
                used[*v] = true;
            }
        }
        assert!(used.iter().all(|u| *u));
    }

    #[test]
    fn isotropic_normalizes_to_constant() {
        let nd = noiseless(PaperModel::A3, 30);
        assert_eq!(nd.abar0, 1.0);
        for v in nd.values() {
            assert_abs_diff_eq!(*v, (-1.12f64).exp(), epsilon = 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let q = Direction::from_unit(random_rotation(&mut rng) * Vector3::y());
            assert_abs_diff_eq!(nd.interpolate(&q), (-1.12f64).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn interpolation_exact_at_nodes() {
        let scheme = electrostatic_scheme(40).unwrap();
        let nd = normalize(&acquire(&PaperModel::A2.model(), &scheme, 0.05, 3).unwrap()).unwrap();
        for (p, v) in nd.points().iter().zip(nd.values()) {
            assert_abs_diff_eq!(nd.interpolate(p), *v, epsilon = 1e-12);
        }
    }

    #[test]
    fn scale_invariance_of_normalization() {
        let scheme = electrostatic_scheme(20).unwrap().with_n0(4).unwrap();
        let mut s = acquire(&PaperModel::A1.model(), &scheme, 0.05, 8).unwrap();
        let a = normalize(&s).unwrap();
        s.raw_values.iter_mut().chain(s.b0_values.iter_mut()).for_each(|v| *v *= 2.0);
        s.noise_sigma = s.noise_sigma.map(|x| x * 2.0);
        let b = normalize(&s).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(a.sigma_star, b.sigma_star, epsilon = 1e-15);
    }

    #[test]
    fn frt_is_antipodally_symmetric_and_constant_on_isotropic() {
        let nd = noiseless(PaperModel::A2, 60);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = Direction::from_unit(random_rotation(&mut rng) * Vector3::z());
            assert_eq!(nd.frt(&x, 72).unwrap(), nd.frt(&x.antipode(), 72).unwrap());
        }
        assert!(nd.frt(&Direction::E1, 8).is_err());
        let iso = noiseless(PaperModel::A3, 60);
        assert_abs_diff_eq!(iso.frt(&Direction::E2, 32).unwrap(), (-1.12f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn dominant_direction_of_prolate() {
        let est = dominant_direction(&noiseless(PaperModel::A1, 60));
        assert!(est.frame.u1().axis_angle_to(&Direction::E1).to_degrees() < 3.0);
        assert_eq!(est.candidate_count, 60);
    }

    #[test]
    fn grid_averages_match_closed_form() {
        let nd = noiseless(PaperModel::A1, 60);
        let est = DominantEstimate { frame: Frame::canonical(), frt_values: vec![1.0; 60], candidate_count: 60 };
        let grid = fill_grid(&nd, &est, 128).unwrap();
        assert_eq!(grid.fallback_count, 0);
        assert_abs_diff_eq!(grid.avg_perp_equator(), (-0.32f64).exp(), epsilon = 0.05 * 0.7261);
        // The pole is a single point, reproduced by the interpolant up to its local error.
        assert!((grid.avg_perp_pole() / (-2.72f64).exp() - 1.0).abs() < 0.3);
        let j = grid.n() as i64 / 8;
        let alpha = (2.0 * std::f64::consts::PI * signed_index(j as usize, 128) as f64 / 128.0).cos();
        let expect = (-0.04 * (68.0 * alpha * alpha + 8.0 * (1.0 - alpha * alpha))).exp();
        assert!((grid.avg_perp(j) / expect - 1.0).abs() < 0.1);
    }

    #[test]
    fn sigma_circle_examples() {
        let mut grid = build_grid(&Frame::canonical(), 8).unwrap();
        grid.set_values(vec![0.9, 1.1, 0.9, 1.1, 0.9, 1.1, 0.9, 1.1], vec![1.0; 64]).unwrap();
        let (abar, sigma) = estimate_sigma_circle(&grid, 3.0, Deviation::Maximum).unwrap();
        assert_abs_diff_eq!(abar, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sigma, 3f64.sqrt() * 0.1, epsilon = 1e-12);
        grid.fill(|_| 0.4);
        let (abar, sigma) = estimate_sigma_circle(&grid, 3.0, Deviation::Median).unwrap();
        assert_abs_diff_eq!(abar, 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(sigma, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn sigma_star_paths() {
        let scheme = electrostatic_scheme(30).unwrap().with_n0(4).unwrap();
        let model = PaperModel::A1.model();
        let clean = acquire(&model, &scheme, 0.0, 1).unwrap();
        assert_eq!(estimate_sigma_star(&clean).unwrap().value, 0.0);
        let mut single = acquire(&model, &scheme.clone().with_n0(1).unwrap(), 0.05, 1).unwrap();
        let known = estimate_sigma_star(&single).unwrap();
        assert!(!known.fallback);
        assert_abs_diff_eq!(known.value, 0.05 / single.b0_values[0], epsilon = 1e-15);
        single.noise_sigma = None;
        let fb = estimate_sigma_star(&single).unwrap();
        assert!(fb.fallback && fb.value > 0.0);
    }
}
