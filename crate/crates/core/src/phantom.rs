//! Noiseless q-space diffusion models and the noisy acquisition simulator.
//!
//! Ellipsoid densities decay as `B(q^T D q)` with either the Gaussian kernel
//! `exp(-2 pi^2 s)` or the raw exponent `exp(-t s)`. The six reference models
//! use the raw exponent with `t = 0.04`.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{axis_rotation, Direction, Frame};

/// Diffusion time scale of the reference models.
pub const DEFAULT_T: f64 = 0.04;
/// Eigenvalues of the prolate reference tensor.
pub const PROLATE_LAMBDAS: [f64; 3] = [68.0, 8.0, 8.0];
/// b-value carried as metadata on generated schemes.
pub const DEFAULT_B_VALUE: f64 = 1600.0;

/// Radial decay applied to the quadratic form `s = q^T D q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// `exp(-2 pi^2 s)`, i.e. `B(r) = exp(-2 (pi r)^2)` at `r = sqrt(s)`.
    Gaussian,
    /// `exp(-t s)`.
    Exponent { t: f64 },
}

impl Kernel {
    pub fn decay(&self, s: f64) -> f64 {
        match self {
            Kernel::Gaussian => (-2.0 * PI * PI * s).exp(),
            Kernel::Exponent { t } => (-t * s).exp(),
        }
    }
}

/// A single ellipsoid density with eigenvalues along the frame axes.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidModel {
    lambdas: [f64; 3],
    frame: Frame,
    kernel: Kernel,
}

impl EllipsoidModel {
    pub fn new(lambdas: [f64; 3], frame: Frame, kernel: Kernel) -> Result<Self> {
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Domain(format!("eigenvalues must be finite and nonnegative: {lambdas:?}")));
        }
        if let Kernel::Exponent { t } = kernel {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Domain(format!("decay scale t = {t} must be positive")));
            }
        }
        Ok(EllipsoidModel { lambdas, frame, kernel })
    }

    /// Raw-exponent ellipsoid with `t = 0.04`.
    pub fn reference(lambdas: [f64; 3], frame: Frame) -> Result<Self> {
        Self::new(lambdas, frame, Kernel::Exponent { t: DEFAULT_T })
    }

    pub fn lambdas(&self) -> [f64; 3] {
        self.lambdas
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn quadratic_form(&self, q: &Direction) -> f64 {
        self.frame
            .axes()
            .iter()
            .zip(self.lambdas)
            .map(|(u, l)| l * u.dot(q).powi(2))
            .sum()
    }

    pub fn eval(&self, q: &Direction) -> f64 {
        self.kernel.decay(self.quadratic_form(q))
    }

    fn rotated(&self, r: &Rotation3<f64>) -> Self {
        EllipsoidModel { frame: Frame::from_rotation(&(r * rotation_of(&self.frame))), ..self.clone() }
    }
}

fn rotation_of(frame: &Frame) -> Rotation3<f64> {
    Rotation3::from_matrix_unchecked(frame.matrix())
}

/// Weighted sum of ellipsoid densities.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    components: Vec<(f64, EllipsoidModel)>,
}

impl MixtureModel {
    pub fn new(components: Vec<(f64, EllipsoidModel)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        if components.iter().any(|(w, _)| !(0.0..=1.0).contains(w)) {
            return Err(Error::Domain("mixture weights must lie in [0, 1]".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(MixtureModel { components })
    }

    pub fn components(&self) -> &[(f64, EllipsoidModel)] {
        &self.components
    }

    pub fn eval(&self, q: &Direction) -> f64 {
        self.components.iter().map(|(w, m)| w * m.eval(q)).sum()
    }
}

/// The closed-form asymmetric density built from Dawson functions.
#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetricModel {
    t: f64,
    frame: Frame,
}

impl AsymmetricModel {
    pub fn new(t: f64, frame: Frame) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Domain(format!("decay scale t = {t} must be positive")));
        }
        Ok(AsymmetricModel { t, frame })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn eval(&self, q: &Direction) -> f64 {
        self.eval_coords(q.dot(self.frame.u1()), q.dot(self.frame.u2()), q.dot(self.frame.u3()))
    }

    fn eval_coords(&self, c1: f64, c2: f64, c3: f64) -> f64 {
        let t = self.t;
        let even = (-68.0 * t * c1 * c1).exp() * ((-0.2 * t * c3 * c3).exp() + (-35.0 * t * c3 * c3).exp());
        let odd = 4.0 / PI
            * dawson((68.0 * t).sqrt() * c1)
            * (dawson((35.0 * t).sqrt() * c3) - dawson((0.2 * t).sqrt() * c3));
        (-11.0 * t * c2 * c2).exp() * (even + odd).abs()
    }
}

/// Any noiseless q-space density.
#[derive(Debug, Clone, PartialEq)]
pub enum DiffusionModel {
    Ellipsoid(EllipsoidModel),
    Mixture(MixtureModel),
    Asymmetric(AsymmetricModel),
}

impl DiffusionModel {
    pub fn eval(&self, q: &Direction) -> f64 {
        match self {
            DiffusionModel::Ellipsoid(m) => m.eval(q),
            DiffusionModel::Mixture(m) => m.eval(q),
            DiffusionModel::Asymmetric(m) => m.eval(q),
        }
    }

    /// Value at `q = 0`, the reference for the noise scale.
    pub fn eval_origin(&self) -> f64 {
        match self {
            DiffusionModel::Ellipsoid(_) | DiffusionModel::Mixture(_) => 1.0,
            DiffusionModel::Asymmetric(m) => m.eval_coords(0.0, 0.0, 0.0),
        }
    }

    /// The same density with every frame rotated by `r`.
    pub fn rotated(&self, r: &Rotation3<f64>) -> DiffusionModel {
        match self {
            DiffusionModel::Ellipsoid(m) => DiffusionModel::Ellipsoid(m.rotated(r)),
            DiffusionModel::Mixture(m) => DiffusionModel::Mixture(MixtureModel {
                components: m.components.iter().map(|(w, c)| (*w, c.rotated(r))).collect(),
            }),
            DiffusionModel::Asymmetric(m) => DiffusionModel::Asymmetric(AsymmetricModel {
                t: m.t,
                frame: Frame::from_rotation(&(r * rotation_of(&m.frame))),
            }),
        }
    }
}

/// Evaluates `model` at `q`.
pub fn eval_model(model: &DiffusionModel, q: &Direction) -> f64 {
    model.eval(q)
}

/// The six reference models of the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PaperModel {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
}

impl PaperModel {
    pub const ALL: [PaperModel; 6] =
        [PaperModel::A1, PaperModel::A2, PaperModel::A3, PaperModel::A4, PaperModel::A5, PaperModel::A6];

    /// Whether the experiment applies its random rotation to this model.
    pub fn is_rotated(&self) -> bool {
        !matches!(self, PaperModel::A6)
    }

    /// The model in the canonical frame.
    pub fn model(&self) -> DiffusionModel {
        let e = Frame::canonical();
        let ell = |l: [f64; 3], f: Frame| EllipsoidModel::reference(l, f).expect("valid reference eigenvalues");
        match self {
            PaperModel::A1 => DiffusionModel::Ellipsoid(ell(PROLATE_LAMBDAS, e)),
            PaperModel::A2 => DiffusionModel::Ellipsoid(ell([68.0, 15.0, 1.0], e)),
            PaperModel::A3 => DiffusionModel::Ellipsoid(ell([28.0, 28.0, 28.0], e)),
            PaperModel::A4 => DiffusionModel::Mixture(MixtureModel {
                components: vec![(0.5, ell(PROLATE_LAMBDAS, e)), (0.5, ell([8.0, 68.0, 8.0], e))],
            }),
            PaperModel::A5 => DiffusionModel::Asymmetric(AsymmetricModel { t: DEFAULT_T, frame: e }),
            PaperModel::A6 => DiffusionModel::Mixture(MixtureModel {
                components: vec![(0.3, ell(PROLATE_LAMBDAS, e)), (0.7, ell([42.5, 14.0, 20.0], a6_tilted_frame()))],
            }),
        }
    }

    /// The model as simulated in an experiment with rotation `r`.
    pub fn model_in_experiment(&self, r: &Rotation3<f64>) -> DiffusionModel {
        if self.is_rotated() {
            self.model().rotated(r)
        } else {
            self.model()
        }
    }
}

/// Angle between the two A6 components, measured in the e1-e2 plane.
pub const A6_TILT: f64 = 2.0 * PI / 5.0;

/// Frame of the second component of A6: the canonical axes turned by
/// [`A6_TILT`] about e3.
pub fn a6_tilted_frame() -> Frame {
    Frame::from_rotation(&axis_rotation(&Direction::E3, A6_TILT))
}

impl fmt::Display for PaperModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = PaperModel::ALL.iter().position(|m| m == self).unwrap_or(0) + 1;
        write!(f, "A{i}")
    }
}

impl FromStr for PaperModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A1" => Ok(PaperModel::A1),
            "A2" => Ok(PaperModel::A2),
            "A3" => Ok(PaperModel::A3),
            "A4" => Ok(PaperModel::A4),
            "A5" => Ok(PaperModel::A5),
            "A6" => Ok(PaperModel::A6),
            other => Err(Error::Config(format!("unknown model `{other}` (expected A1..A6)"))),
        }
    }
}

/// Dawson's integral `D(x) = exp(-x^2) int_0^x exp(t^2) dt`.
pub fn dawson(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 6.0 {
        // All terms positive, so no cancellation: exp(-x^2) sum x^(2n+1) / (n! (2n+1)).
        let x2 = ax * ax;
        let mut term = ax;
        let mut sum = ax;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= x2 / n;
            let contrib = term / (2.0 * n + 1.0);
            sum += contrib;
            if contrib <= sum * 1e-17 {
                break;
            }
        }
        (-x2).exp() * sum * x.signum()
    } else {
        // Asymptotic: 1/(2x) sum (2n-1)!! / (2x^2)^n.
        let inv = 1.0 / (2.0 * ax * ax);
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut n = 0.0;
        loop {
            n += 1.0;
            let next = term * (2.0 * n - 1.0) * inv;
            if next > term || next < 1e-18 {
                break;
            }
            term = next;
            sum += term;
        }
        sum / (2.0 * ax) * x.signum()
    }
}

/// Two-fiber voxel sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FiberKind {
    Forking,
    Crossing,
}

impl FromStr for FiberKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forking" => Ok(FiberKind::Forking),
            "crossing" => Ok(FiberKind::Crossing),
            other => Err(Error::Config(format!("unknown fiber kind `{other}` (expected forking or crossing)"))),
        }
    }
}

impl fmt::Display for FiberKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FiberKind::Forking => "forking",
            FiberKind::Crossing => "crossing",
        })
    }
}

/// Parameters of a fiber-evolution sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberEvolution {
    pub kind: FiberKind,
    /// Eigenvalues shared by both fiber components.
    pub lambdas: [f64; 3],
}

impl FiberEvolution {
    pub fn new(kind: FiberKind) -> Self {
        FiberEvolution { kind, lambdas: PROLATE_LAMBDAS }
    }

    /// The mixture at evolution time `t` in `[0, 1]`.
    ///
    /// The first fiber keeps weight `1 - t/2` along `e1`. Forking rotates the
    /// second fiber to `(cos(pi t/2), sin(pi t/2), 0)`; crossing holds it at `e2`.
    pub fn model(&self, t: f64) -> Result<MixtureModel> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("evolution time t = {t} outside [0, 1]")));
        }
        let a1 = 1.0 - t / 2.0;
        let angle = match self.kind {
            FiberKind::Forking => PI * t / 2.0,
            FiberKind::Crossing => PI / 2.0,
        };
        let first = EllipsoidModel::reference(self.lambdas, Frame::canonical())?;
        let mut components = vec![(a1, first)];
        if a1 < 1.0 {
            let frame = Frame::from_rotation(&axis_rotation(&Direction::E3, angle));
            components.push((1.0 - a1, EllipsoidModel::reference(self.lambdas, frame)?));
        }
        MixtureModel::new(components)
    }

    /// Evolution times of the voxel sequence: seven forking, six crossing.
    pub fn voxel_times(&self) -> Vec<f64> {
        match self.kind {
            FiberKind::Forking => (0..7).map(|i| i as f64 / 6.0).collect(),
            // First-fiber weights 1, 1, 0.75, 0.5, 0.75, 1.
            FiberKind::Crossing => vec![0.0, 0.0, 0.5, 1.0, 0.5, 0.0],
        }
    }

    pub fn voxel_models(&self) -> Result<Vec<MixtureModel>> {
        self.voxel_times().into_iter().map(|t| self.model(t)).collect()
    }
}

/// The mixture for `kind` at time `t` with the default eigenvalues.
pub fn fiber_evolution(kind: FiberKind, t: f64) -> Result<MixtureModel> {
    FiberEvolution::new(kind).model(t)
}

/// Gradient directions plus the number of `b = 0` acquisitions.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionScheme {
    directions: Vec<Direction>,
    n0: usize,
    b_value: f64,
}

impl AcquisitionScheme {
    pub fn new(directions: Vec<Direction>, n0: usize, b_value: f64) -> Result<Self> {
        if directions.len() < 6 {
            return Err(Error::Config(format!("scheme needs at least 6 directions, got {}", directions.len())));
        }
        if n0 < 1 {
            return Err(Error::Config("scheme needs at least one b=0 acquisition".into()));
        }
        Ok(AcquisitionScheme { directions, n0, b_value })
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn n(&self) -> usize {
        self.directions.len()
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn b_value(&self) -> f64 {
        self.b_value
    }

    pub fn with_n0(mut self, n0: usize) -> Result<Self> {
        if n0 < 1 {
            return Err(Error::Config("scheme needs at least one b=0 acquisition".into()));
        }
        self.n0 = n0;
        Ok(self)
    }

    /// Parses the text scheme format: an optional `n0=<int> b=<float>` header,
    /// then one `x y z` direction per line. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut n0 = 1;
        let mut b_value = DEFAULT_B_VALUE;
        let mut directions = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::parse(source, format!("line {}: {msg}", lineno + 1));
            if line.contains('=') {
                if !directions.is_empty() {
                    return Err(at("header must precede the directions".into()));
                }
                for field in line.split_whitespace() {
                    let (key, value) = field.split_once('=').ok_or_else(|| at(format!("bad header field `{field}`")))?;
                    match key {
                        "n0" => n0 = value.parse().map_err(|_| at(format!("bad n0 `{value}`")))?,
                        "b" => b_value = value.parse().map_err(|_| at(format!("bad b `{value}`")))?,
                        _ => return Err(at(format!("unknown header key `{key}`"))),
                    }
                }
                continue;
            }
            let fields: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| at(format!("bad number `{s}`"))))
                .collect::<Result<_>>()?;
            if fields.len() != 3 {
                return Err(at(format!("expected 3 fields, found {}", fields.len())));
            }
            let v = nalgebra::Vector3::new(fields[0], fields[1], fields[2]);
            if (v.norm() - 1.0).abs() > 1e-3 {
                return Err(at(format!("direction has norm {:.6}, expected 1", v.norm())));
            }
            directions.push(Direction::from_vector(v).map_err(|e| at(e.to_string()))?);
        }
        AcquisitionScheme::new(directions, n0, b_value).map_err(|e| Error::parse(source, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("n0={} b={}\n", self.n0, self.b_value);
        for d in &self.directions {
            out.push_str(&format!("{:.12} {:.12} {:.12}\n", d.x(), d.y(), d.z()));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Raw magnitudes on a scheme, as acquired or ingested.
#[derive(Debug, Clone, PartialEq)]
pub struct HardiSample {
    pub raw_values: Vec<f64>,
    pub b0_values: Vec<f64>,
    pub scheme: AcquisitionScheme,
    /// Noise standard deviation in absolute units, when known from simulation.
    pub noise_sigma: Option<f64>,
}

impl HardiSample {
    pub fn new(
        raw_values: Vec<f64>,
        b0_values: Vec<f64>,
        scheme: AcquisitionScheme,
        noise_sigma: Option<f64>,
    ) -> Result<Self> {
        if raw_values.len() != scheme.n() || b0_values.len() != scheme.n0() {
            return Err(Error::Data(format!(
                "sample has {} + {} values, scheme expects {} + {}",
                raw_values.len(),
                b0_values.len(),
                scheme.n(),
                scheme.n0()
            )));
        }
        if raw_values.iter().chain(&b0_values).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Data("magnitudes must be finite and nonnegative".into()));
        }
        Ok(HardiSample { raw_values, b0_values, scheme, noise_sigma })
    }
}

/// Deterministic per-task random stream: stream `stream` of the generator seeded by `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulates Rician magnitudes `|A(q) + sigma e1 + i sigma e2|` with
/// `sigma = noise_sigma * A(0)`, seeded by `seed`.
pub fn acquire(model: &DiffusionModel, scheme: &AcquisitionScheme, noise_sigma: f64, seed: u64) -> Result<HardiSample> {
    acquire_with(model, scheme, noise_sigma, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// As [`acquire`], drawing from an explicit stream.
pub fn acquire_with<R: Rng + ?Sized>(
    model: &DiffusionModel,
    scheme: &AcquisitionScheme,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<HardiSample> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::Domain(format!("noise sigma {noise_sigma} must be finite and nonnegative")));
    }
    let a0 = model.eval_origin();
    let sigma = noise_sigma * a0;
    let mut magnitude = |mean: f64| -> f64 {
        if sigma == 0.0 {
            return mean;
        }
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        (mean + sigma * re).hypot(sigma * im)
    };
    let raw_values = scheme.directions.iter().map(|q| magnitude(model.eval(q))).collect();
    let b0_values = (0..scheme.n0).map(|_| magnitude(a0)).collect();
    Ok(HardiSample { raw_values, b0_values, scheme: scheme.clone(), noise_sigma: Some(sigma) })
}

fn antipodal_energy(points: &[nalgebra::Vector3<f64>]) -> f64 {
    let mut e = 0.0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            e += 1.0 / (points[i] - points[j]).norm() + 1.0 / (points[i] + points[j]).norm();
        }
    }
    e
}

/// `n` directions minimising the antipodally symmetric Coulomb energy
/// `sum 1/|p_i - p_j| + 1/|p_i + p_j|`, found by projected gradient descent
/// from a fixed seeded start. Includes one `b = 0` acquisition.
pub fn electrostatic_scheme(n: usize) -> Result<AcquisitionScheme> {
    use nalgebra::Vector3;

    if n < 6 {
        return Err(Error::Config(format!("scheme needs at least 6 directions, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + n as u64);
    let mut points: Vec<Vector3<f64>> = (0..n)
        .map(|_| loop {
            let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            if v.norm() > 1e-6 {
                break v.normalize();
            }
        })
        .collect();
    let mut energy = antipodal_energy(&points);
    let mut step = 0.1 / n as f64;
    for _ in 0..4000 {
        let forces: Vec<Vector3<f64>> = (0..n)
            .map(|i| {
                let mut f = Vector3::zeros();
                for j in 0..n {
                    if i != j {
                        let d = points[i] - points[j];
                        let s = points[i] + points[j];
                        f += d / d.norm().powi(3) + s / s.norm().powi(3);
                    }
                }
                f - points[i] * points[i].dot(&f)
            })
            .collect();
        let trial: Vec<Vector3<f64>> =
            points.iter().zip(&forces).map(|(p, f)| (p + f * step).normalize()).collect();
        let trial_energy = antipodal_energy(&trial);
        if trial_energy < energy {
            let gain = energy - trial_energy;
            points = trial;
            energy = trial_energy;
            step *= 1.2;
            if gain < 1e-13 * energy {
                break;
            }
        } else {
            step *= 0.5;
            if step < 1e-14 {
                break;
            }
        }
    }
    let directions = points.into_iter().map(|p| Direction::from_unit(p).canonical_sign()).collect();
    AcquisitionScheme::new(directions, 1, DEFAULT_B_VALUE)
}
