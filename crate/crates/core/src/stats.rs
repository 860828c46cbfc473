//! Summary statistics, hypothesis tests and voxel classification on a filled
//! [`CircleGrid`].
//!
//! Throughout, `D[k]` is the value at the dominant-circle point `q_k`,
//! `P[j][k]` the value at `q_perp(j, k)`, and `ap(j)` the average
//! perpendicular diffusion `N^-1 sum_k P[j][k]`. The pole `alpha = 1` is
//! `j = 0` and the equator `alpha = 0` is `j = N/4`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::calibration::NullCalibration;
use crate::error::{Error, Result};
use crate::estimator::{dominant_direction_with, estimate_sigma_circle, fill_grid, normalize, Deviation, DominantOptions};
use crate::geometry::CircleGrid;
use crate::phantom::HardiSample;

/// Values below this never enter a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
/// Critical value of `U` at 5% for the sampling scheme.
pub const U_CRITICAL: f64 = 0.1185;
/// Conservative critical value of `U` at 5%.
pub const U_CRITICAL_CONSERVATIVE: f64 = 1.9637;
/// Two-sided 10% standard Gaussian quantile used by the asymmetry test.
pub const K_GAUSSIAN_CRITICAL: f64 = 1.6448536269514722;

fn safe_log(v: f64) -> Option<f64> {
    (v >= LOG_FLOOR && v.is_finite()).then(|| v.ln())
}

/// `log a / log b`, undefined when either value is below the floor or `log b` vanishes.
fn log_ratio(a: f64, b: f64) -> Option<f64> {
    let (la, lb) = (safe_log(a)?, safe_log(b)?);
    (lb.abs() > LOG_FLOOR).then(|| la / lb)
}

fn max_min(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), v| (hi.max(v), lo.min(v)))
}

/// `max_k D[k] / min_k D[k]`.
fn dominant_ratio(grid: &CircleGrid) -> f64 {
    let (hi, lo) = max_min(grid.dominant_values().iter().copied());
    hi / lo
}

/// `[max_j ap(j) / min_j ap(j)] / [max_k D / min_k D] - 1`.
pub fn tau(grid: &CircleGrid) -> f64 {
    let (hi, lo) = max_min((0..grid.n() as i64).map(|j| grid.avg_perp(j)));
    hi / lo / dominant_ratio(grid) - 1.0
}

/// `min_k [max_j P[j][k] / min_j P[j][k]] / [max_k D / min_k D] - 1`.
pub fn tau_tilde(grid: &CircleGrid) -> f64 {
    let n = grid.n();
    let p = grid.perp_values();
    let best = (0..n)
        .map(|k| {
            let (hi, lo) = max_min((0..n).map(|j| p[j * n + k]));
            hi / lo
        })
        .fold(f64::INFINITY, f64::min);
    best / dominant_ratio(grid) - 1.0
}

/// `log ap(alpha = 0) / log ap(alpha = 1)`.
pub fn xi(grid: &CircleGrid) -> Option<f64> {
    log_ratio(grid.avg_perp_equator(), grid.avg_perp_pole())
}

/// `max_k log D[k] / log D[k + N/4]`.
pub fn zeta(grid: &CircleGrid) -> Option<f64> {
    let q = grid.n() as i64 / 4;
    (0..grid.n() as i64)
        .map(|k| log_ratio(grid.dominant_value(k), grid.dominant_value(k + q)))
        .try_fold(f64::NEG_INFINITY, |acc, r| r.map(|r| acc.max(r)))
}

/// Per-circle asymmetry
/// `P_k = 8 sum_{j=1}^{N/4-1} (P[j][k] - P[j+N/4][k]) / sum_j P[j][k]`.
pub fn asymmetry_profile(grid: &CircleGrid) -> Option<Vec<f64>> {
    let n = grid.n();
    let q = n / 4;
    let p = grid.perp_values();
    (0..n)
        .map(|k| {
            let num: f64 = (1..q).map(|j| p[j * n + k] - p[(j + q) * n + k]).sum();
            let den: f64 = (0..n).map(|j| p[j * n + k]).sum();
            (den > 0.0).then(|| 8.0 * num / den)
        })
        .collect()
}

/// The window mean of `P_k` around its maximiser:
/// `(N/4 + 1)^-1 sum_{k = kb - N/8}^{kb + N/8} P_k`. Returns `(kb, K)`.
pub fn asymmetry_window(profile: &[f64]) -> (usize, f64) {
    let n = profile.len();
    let kb = (0..n).fold(0, |best, k| if profile[k] > profile[best] { k } else { best });
    let half = (n / 8) as i64;
    let sum: f64 = (-half..=half).map(|d| profile[(kb as i64 + d).rem_euclid(n as i64) as usize]).sum();
    (kb, sum / (n / 4 + 1) as f64)
}

/// Generalised fractional anisotropy of positive samples.
pub fn gfa(samples: &[f64]) -> Option<f64> {
    let n = samples.len();
    let total: f64 = samples.iter().sum();
    if n < 2 || !(total > 0.0) {
        return None;
    }
    let o: Vec<f64> = samples.iter().map(|v| v / total).collect();
    let mean = 1.0 / n as f64;
    let num = n as f64 * o.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
    let den = (n - 1) as f64 * o.iter().map(|x| x * x).sum::<f64>();
    Some((num / den).sqrt().clamp(0.0, 1.0))
}

/// The descriptive summaries of a grid. Log-based entries are `None` when a
/// value below [`LOG_FLOOR`] would enter a logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummarySet {
    pub tau: f64,
    pub tau_tilde: f64,
    pub xi: Option<f64>,
    pub zeta: Option<f64>,
    pub kappa: Option<f64>,
    pub gfa: Option<f64>,
}

impl SummarySet {
    /// Whether any summary is undefined (low SNR).
    pub fn is_undefined(&self) -> bool {
        self.xi.is_none() || self.zeta.is_none() || self.kappa.is_none()
    }
}

/// All summaries of `grid`; `gfa` uses `grid.frt_samples`.
pub fn summaries(grid: &CircleGrid) -> SummarySet {
    SummarySet {
        tau: tau(grid),
        tau_tilde: tau_tilde(grid),
        xi: xi(grid),
        zeta: zeta(grid),
        kappa: asymmetry_profile(grid).map(|p| asymmetry_window(&p).1),
        gfa: gfa(&grid.frt_samples),
    }
}

/// Apparent diffusion coefficient `-log(value) / b`.
pub fn adc(value: f64, b: f64) -> Result<f64> {
    if !(value > 0.0) || !(b > 0.0) {
        return Err(Error::Domain(format!("ADC needs value > 0 and b > 0, got {value}, {b}")));
    }
    Ok(-value.ln() / b)
}

/// Outcome of one hypothesis test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Decision {
    Reject,
    Fail,
    /// The statistic or its threshold is unavailable.
    Undefined,
}

impl Decision {
    fn upper(value: f64, threshold: f64) -> Decision {
        if value.is_nan() || threshold.is_nan() {
            Decision::Undefined
        } else if value > threshold {
            Decision::Reject
        } else {
            Decision::Fail
        }
    }

    fn lower(value: f64, threshold: f64) -> Decision {
        if value.is_nan() || threshold.is_nan() {
            Decision::Undefined
        } else if value < threshold {
            Decision::Reject
        } else {
            Decision::Fail
        }
    }

    pub fn is_reject(&self) -> bool {
        *self == Decision::Reject
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Reject => "reject",
            Decision::Fail => "fail",
            Decision::Undefined => "undefined",
        })
    }
}

/// The five test statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Statistic {
    U,
    UTilde,
    Q,
    V,
    K,
}

/// Which tail of the null distribution leads to rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    Upper,
    Lower,
    TwoSided,
}

impl Statistic {
    pub const ALL: [Statistic; 5] = [Statistic::U, Statistic::UTilde, Statistic::Q, Statistic::V, Statistic::K];

    pub fn tail(&self) -> Tail {
        match self {
            Statistic::Q => Tail::Lower,
            Statistic::K => Tail::TwoSided,
            _ => Tail::Upper,
        }
    }

    /// Nominal test size.
    pub fn nominal_level(&self) -> f64 {
        match self {
            Statistic::UTilde | Statistic::K => 0.10,
            _ => 0.05,
        }
    }

    /// Short tag of the hypothesis pair.
    pub fn hypothesis(&self) -> &'static str {
        match self {
            Statistic::U => "N-P/A",
            Statistic::UTilde => "M/U",
            Statistic::Q => "I/M",
            Statistic::V => "C/E",
            Statistic::K => "S/A",
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Statistic::U => "U",
            Statistic::UTilde => "Utilde",
            Statistic::Q => "Q",
            Statistic::V => "V",
            Statistic::K => "K",
        })
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "U" => Ok(Statistic::U),
            "Utilde" | "U~" => Ok(Statistic::UTilde),
            "Q" => Ok(Statistic::Q),
            "V" => Ok(Statistic::V),
            "K" => Ok(Statistic::K),
            other => Err(Error::Config(format!("unknown statistic `{other}`"))),
        }
    }
}

/// Estimation and test parameters shared by every voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisParams {
    /// Grid size `N`, a multiple of 8.
    pub n_grid: usize,
    pub rho: f64,
    pub deviation: Deviation,
    /// Multi-modality boundary `c` of the unimodality test.
    pub c: f64,
    pub m: usize,
    pub m_prime: usize,
    pub frt_nodes: usize,
    /// Critical value of `U`.
    pub u_critical: f64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            n_grid: 128,
            rho: 3.0,
            deviation: Deviation::Maximum,
            c: 2.0,
            m: 9,
            m_prime: 16,
            frt_nodes: crate::estimator::DEFAULT_FRT_NODES,
            u_critical: U_CRITICAL,
        }
    }
}

impl AnalysisParams {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_grid;
        if n == 0 || n % 8 != 0 {
            return Err(Error::Config(format!("N = {n} must be a positive multiple of 8")));
        }
        if !(self.m < self.m_prime && self.m_prime < 2 * self.m) {
            return Err(Error::Config(format!("(m, m') = ({}, {}) must satisfy m < m' < 2m", self.m, self.m_prime)));
        }
        if n % (2 * self.m_prime) != 0 {
            return Err(Error::Config(format!("N/(2m') must be an integer; N = {n}, m' = {}", self.m_prime)));
        }
        if !(self.rho > 0.0 && self.rho <= 3.0) {
            return Err(Error::Config(format!("rho = {} must lie in (0, 3]", self.rho)));
        }
        if !(self.c > 1.0) || !self.c.is_finite() {
            return Err(Error::Config(format!("c = {} must exceed 1", self.c)));
        }
        if self.frt_nodes < 16 {
            return Err(Error::Config(format!("FRT nodes {} must be at least 16", self.frt_nodes)));
        }
        Ok(())
    }
}

/// `num / den` with the zero-spread conventions: `0` for a vanishing
/// numerator, otherwise a signed infinity.
fn standardize(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num.abs() <= 1e-12 || num.is_nan() {
        0.0
    } else {
        num.signum() * f64::INFINITY
    }
}

/// Anisotropy test: `U = T abar_N / sigma_A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UTest {
    pub t: f64,
    pub u: f64,
    /// `sigma_A` vanished and `U` follows the zero-spread convention.
    pub degenerate: bool,
    pub decision: Decision,
}

pub fn test_u(grid: &CircleGrid, abar_n: f64, sigma_a: f64, critical: f64) -> UTest {
    let t = tau(grid);
    let u = standardize(t * abar_n, sigma_a);
    UTest { t, u, degenerate: !(sigma_a > 0.0), decision: Decision::upper(u, critical) }
}

/// Unimodality test: `U~ = (T~ - (c-1)) A(u1) / (sigma_A sqrt(2c^2 + 2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UTildeTest {
    pub t_tilde: f64,
    pub u_tilde: f64,
    pub degenerate: bool,
    pub decision: Decision,
}

pub fn test_u_tilde(grid: &CircleGrid, sigma_a: f64, c: f64, critical: f64) -> UTildeTest {
    let t_tilde = tau_tilde(grid);
    let a_min = grid.perp_value(grid.pole_index() as i64, 0);
    let u_tilde = standardize((t_tilde - (c - 1.0)) * a_min, sigma_a * (2.0 * c * c + 2.0).sqrt());
    UTildeTest { t_tilde, u_tilde, degenerate: !(sigma_a > 0.0), decision: Decision::upper(u_tilde, critical) }
}

/// Multi-modality test: `Q = rho (X - 1) |abar_N log abar_N| / sigma_2`.
#[derive(Debug, Clone, PartialEq)]
pub struct QTest {
    pub x: Option<f64>,
    pub q: Option<f64>,
    /// `X_k = log D[k] / log A(u1)` per dominant-circle point.
    pub x_k: Vec<Option<f64>>,
    pub decision: Decision,
}

/// `critical` is a lower-tail threshold: multi-modal grids have `X < 1`.
pub fn test_q(grid: &CircleGrid, abar_n: f64, sigma2: f64, rho: f64, critical: f64) -> QTest {
    let x = xi(grid);
    let scale = abar_n.abs().max(0.0) * safe_log(abar_n).map(f64::abs).unwrap_or(f64::NAN);
    let q = x.map(|x| standardize(rho * (x - 1.0) * scale, sigma2)).filter(|q| !q.is_nan());
    let pole = grid.perp_value(grid.pole_index() as i64, 0);
    let x_k = (0..grid.n() as i64).map(|k| log_ratio(grid.dominant_value(k), pole)).collect();
    let decision = q.map_or(Decision::Undefined, |q| Decision::lower(q, critical));
    QTest { x, q, x_k, decision }
}

/// Ellipsoidality test on the dominant circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VTest {
    pub k_max: Option<usize>,
    pub z: Option<f64>,
    pub v: Option<f64>,
    pub decision: Decision,
}

/// `Z = log D[k_max + N/(2m')] / log D[k_max + N/(2m') + N/4]` with `k_max`
/// maximising `log D[k] / log D[k + N/4]` over `1 <= k <= N/4`.
pub fn test_v(grid: &CircleGrid, abar_n: f64, sigma2: f64, m_prime: usize, critical: f64) -> VTest {
    let n = grid.n() as i64;
    let quarter = n / 4;
    let mut k_max = None;
    let mut best = f64::NEG_INFINITY;
    for k in 1..=quarter {
        match log_ratio(grid.dominant_value(k), grid.dominant_value(k + quarter)) {
            Some(r) if r > best => {
                best = r;
                k_max = Some(k as usize);
            }
            Some(_) => {}
            None => {
                k_max = None;
                break;
            }
        }
    }
    let shift = n / (2 * m_prime as i64);
    let z = k_max.and_then(|k| {
        let k = k as i64 + shift;
        log_ratio(grid.dominant_value(k), grid.dominant_value(k + quarter))
    });
    let scale = abar_n.abs() * safe_log(abar_n).map(f64::abs).unwrap_or(f64::NAN);
    let v = z.map(|z| standardize((z - 1.0) * scale, sigma2)).filter(|v| !v.is_nan());
    let decision = v.map_or(Decision::Undefined, |v| Decision::upper(v, critical));
    VTest { k_max, z, v, decision }
}

/// Asymmetry test.
#[derive(Debug, Clone, PartialEq)]
pub struct KTest {
    pub p_k: Option<Vec<f64>>,
    pub k_breve: Option<usize>,
    pub k: Option<f64>,
    /// `(K - mean_0) / sd_0` under the calibrated prolate null.
    pub standardized: Option<f64>,
    pub decision: Decision,
}

/// Computes `P_k` and `K`; the decision compares the standardised `K`
/// with the two-sided Gaussian quantile `z_critical`.
pub fn test_k(grid: &CircleGrid, null_moments: Option<(f64, f64)>, z_critical: f64) -> KTest {
    let p_k = asymmetry_profile(grid);
    let window = p_k.as_deref().map(asymmetry_window);
    let k = window.map(|w| w.1);
    let standardized = k.zip(null_moments).map(|(k, (mean, sd))| standardize(k - mean, sd));
    let decision = standardized.map_or(Decision::Undefined, |z| Decision::upper(z.abs(), z_critical));
    KTest { p_k, k_breve: window.map(|w| w.0), k, standardized, decision }
}

/// Every statistic of one voxel, before thresholds are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Statistics {
    pub abar_n: f64,
    pub sigma_a: f64,
    pub sigma_star: f64,
    pub sigma2: f64,
    pub t: f64,
    pub u: f64,
    pub t_tilde: f64,
    pub u_tilde: f64,
    pub x: Option<f64>,
    pub q: Option<f64>,
    pub x_k: Vec<Option<f64>>,
    pub k_max: Option<usize>,
    pub z: Option<f64>,
    pub v: Option<f64>,
    pub p_k: Option<Vec<f64>>,
    pub k_breve: Option<usize>,
    pub k: Option<f64>,
    /// `sigma_A` vanished; `U` and `U~` follow the zero-spread convention.
    pub degenerate_spread: bool,
    /// Grid values that came from the interpolation fallback.
    pub fallback_count: usize,
}

impl Statistics {
    /// The raw value of `stat`, when defined.
    pub fn value(&self, stat: Statistic) -> Option<f64> {
        match stat {
            Statistic::U => Some(self.u),
            Statistic::UTilde => Some(self.u_tilde),
            Statistic::Q => self.q,
            Statistic::V => self.v,
            Statistic::K => self.k,
        }
        .filter(|v| !v.is_nan())
    }
}

/// Computes all statistics of a filled grid. `sigma_star` is the noise scale
/// relative to the normaliser.
pub fn compute_statistics(grid: &CircleGrid, sigma_star: f64, params: &AnalysisParams) -> Result<Statistics> {
    let (abar_n, sigma_a) = estimate_sigma_circle(grid, params.rho, params.deviation)?;
    let sigma2 = sigma_a.min(sigma_star);
    let u = test_u(grid, abar_n, sigma_a, f64::NAN);
    let ut = test_u_tilde(grid, sigma_a, params.c, f64::NAN);
    let q = test_q(grid, abar_n, sigma2, params.rho, f64::NAN);
    let v = test_v(grid, abar_n, sigma2, params.m_prime, f64::NAN);
    let k = test_k(grid, None, K_GAUSSIAN_CRITICAL);
    Ok(Statistics {
        abar_n,
        sigma_a,
        sigma_star,
        sigma2,
        t: u.t,
        u: u.u,
        t_tilde: ut.t_tilde,
        u_tilde: ut.u_tilde,
        x: q.x,
        q: q.q,
        x_k: q.x_k,
        k_max: v.k_max,
        z: v.z,
        v: v.v,
        p_k: k.p_k,
        k_breve: k.k_breve,
        k: k.k,
        degenerate_spread: u.degenerate,
        fallback_count: grid.fallback_count,
    })
}

/// Normalisation, dominant direction, grid and statistics for one sample.
pub fn analyze_sample(sample: &HardiSample, params: &AnalysisParams) -> Result<(CircleGrid, Statistics)> {
    params.validate()?;
    let nd = normalize(sample)?;
    let opts = DominantOptions { frt_nodes: params.frt_nodes, ..DominantOptions::default() };
    let est = dominant_direction_with(&nd, &opts);
    let grid = fill_grid(&nd, &est, params.n_grid)?;
    let stats = compute_statistics(&grid, nd.sigma_star, params)?;
    Ok((grid, stats))
}

/// Thresholds for the five tests. `None` leaves the decision undefined.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CriticalValues {
    pub u: Option<f64>,
    pub u_tilde: Option<f64>,
    /// Lower-tail threshold.
    pub q: Option<f64>,
    pub v: Option<f64>,
    /// Null mean and standard deviation of `K`.
    pub k_null: Option<(f64, f64)>,
    /// Two-sided Gaussian quantile for the standardised `K`.
    pub k_z: f64,
}

impl CriticalValues {
    /// Published `U` threshold, others unset.
    pub fn with_default_u() -> Self {
        CriticalValues { u: Some(U_CRITICAL), k_z: K_GAUSSIAN_CRITICAL, ..Default::default() }
    }
}

/// Voxel structure label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Classification {
    Isotropic,
    UnimodalProlate,
    UnimodalScalene,
    UnimodalAsymmetric,
    Multimodal,
    Undetermined,
}

impl Classification {
    pub const ALL: [Classification; 6] = [
        Classification::Isotropic,
        Classification::UnimodalProlate,
        Classification::UnimodalScalene,
        Classification::UnimodalAsymmetric,
        Classification::Multimodal,
        Classification::Undetermined,
    ];

    /// Integer code used in classification maps.
    pub fn code(&self) -> u8 {
        *self as u8
    }

    pub fn is_unimodal(&self) -> bool {
        matches!(
            self,
            Classification::UnimodalProlate | Classification::UnimodalScalene | Classification::UnimodalAsymmetric
        )
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::Isotropic => "isotropic",
            Classification::UnimodalProlate => "unimodal-prolate",
            Classification::UnimodalScalene => "unimodal-scalene",
            Classification::UnimodalAsymmetric => "unimodal-asymmetric",
            Classification::Multimodal => "multimodal",
            Classification::Undetermined => "undetermined",
        })
    }
}

/// Statistics with thresholds, p-values, decisions and the classification.
#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub statistics: Statistics,
    /// Standardised `K`, when null moments are known.
    pub k_standardized: Option<f64>,
    pub thresholds: BTreeMap<String, f64>,
    pub p_values: BTreeMap<Statistic, f64>,
    pub decisions: BTreeMap<Statistic, Decision>,
    pub classification: Classification,
}

impl TestReport {
    /// Applies `critical` to `statistics`; `tables` supply p-values and the
    /// calibrated `U` threshold reported next to the published one.
    pub fn new(statistics: Statistics, critical: &CriticalValues, tables: &[&NullCalibration]) -> Self {
        let mut thresholds = BTreeMap::new();
        let mut decisions = BTreeMap::new();
        let s = &statistics;
        let threshold = |t: Option<f64>| t.unwrap_or(f64::NAN);
        decisions.insert(Statistic::U, Decision::upper(s.u, threshold(critical.u)));
        decisions.insert(Statistic::UTilde, Decision::upper(s.u_tilde, threshold(critical.u_tilde)));
        decisions.insert(
            Statistic::Q,
            s.q.map_or(Decision::Undefined, |q| Decision::lower(q, threshold(critical.q))),
        );
        decisions.insert(
            Statistic::V,
            s.v.map_or(Decision::Undefined, |v| Decision::upper(v, threshold(critical.v))),
        );
        let k_standardized = s.k.zip(critical.k_null).map(|(k, (mean, sd))| standardize(k - mean, sd));
        decisions.insert(
            Statistic::K,
            k_standardized.map_or(Decision::Undefined, |z| Decision::upper(z.abs(), critical.k_z)),
        );
        for (name, value) in [("U", critical.u), ("Utilde", critical.u_tilde), ("Q", critical.q), ("V", critical.v)] {
            if let Some(v) = value {
                thresholds.insert(name.to_string(), v);
            }
        }
        if critical.k_null.is_some() {
            thresholds.insert("K_z".to_string(), critical.k_z);
        }
        let mut p_values = BTreeMap::new();
        for table in tables {
            let stat = table.statistic;
            if stat == Statistic::U {
                if let Some(t) = table.threshold(stat.nominal_level()) {
                    thresholds.insert("U_calibrated".to_string(), t);
                }
            }
            let value = if stat == Statistic::K { k_standardized } else { s.value(stat) };
            if let Some(v) = value {
                let p = if stat == Statistic::K {
                    let normal = Normal::standard();
                    2.0 * (1.0 - normal.cdf(v.abs()))
                } else {
                    table.p_value(v)
                };
                p_values.insert(stat, p.clamp(0.0, 1.0));
            }
        }
        let mut report = TestReport {
            statistics,
            k_standardized,
            thresholds,
            p_values,
            decisions,
            classification: Classification::Undetermined,
        };
        report.classification = classify_voxel(&report).unwrap_or(Classification::Undetermined);
        report
    }
}

/// The decision tree: `U` separates isotropic from anisotropic; among the
/// former `Q` flags multi-modality, among the latter `U~` separates unimodal
/// from multi-modal, and unimodal voxels are refined by `K` (asymmetric)
/// then `V` (scalene). Any undefined decision on the path is undetermined.
pub fn classify_voxel(report: &TestReport) -> Result<Classification> {
    let get = |s: Statistic| {
        report.decisions.get(&s).copied().ok_or_else(|| Error::Data(format!("missing decision for {s}")))
    };
    let c = match get(Statistic::U)? {
        Decision::Undefined => Classification::Undetermined,
        Decision::Fail => match get(Statistic::Q)? {
            Decision::Fail => Classification::Isotropic,
            Decision::Reject => Classification::Multimodal,
            Decision::Undefined => Classification::Undetermined,
        },
        Decision::Reject => match get(Statistic::UTilde)? {
            Decision::Fail => Classification::Multimodal,
            Decision::Undefined => Classification::Undetermined,
            Decision::Reject => match (get(Statistic::K)?, get(Statistic::V)?) {
                (Decision::Reject, _) => Classification::UnimodalAsymmetric,
                (Decision::Fail, Decision::Reject) => Classification::UnimodalScalene,
                (Decision::Fail, Decision::Fail) => Classification::UnimodalProlate,
                _ => Classification::Undetermined,
            },
        },
    };
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_grid, Frame};
    use approx::assert_abs_diff_eq;

    fn constant_grid(v: f64) -> CircleGrid {
        let mut g = build_grid(&Frame::canonical(), 32).unwrap();
        g.fill(|_| v);
        g.frt_samples = vec![v; 10];
        g
    }

    fn prolate_grid(lambdas: [f64; 3]) -> CircleGrid {
        let mut g = build_grid(&Frame::canonical(), 64).unwrap();
        g.fill(|q| (-0.04 * (lambdas[0] * q.x().powi(2) + lambdas[1] * q.y().powi(2) + lambdas[2] * q.z().powi(2))).exp());
        g
    }

    #[test]
    fn isotropic_summaries() {
        let s = summaries(&constant_grid(0.4));
        assert_eq!((s.tau, s.tau_tilde), (0.0, 0.0));
        assert_eq!((s.xi, s.zeta, s.kappa), (Some(1.0), Some(1.0), Some(0.0)));
        assert_abs_diff_eq!(s.gfa.unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn prolate_closed_forms() {
        let g = prolate_grid([68.0, 8.0, 8.0]);
        let s = summaries(&g);
        assert_abs_diff_eq!(s.tau, (0.04f64 * 60.0).exp() - 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.tau, s.tau_tilde, epsilon = 1e-9);
        assert_abs_diff_eq!(s.xi.unwrap(), 8.0 / 68.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.zeta.unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.kappa.unwrap(), 0.0, epsilon = 1e-12);
        let scalene = summaries(&prolate_grid([68.0, 15.0, 1.0]));
        assert!(scalene.zeta.unwrap() > 1.1);
    }

    #[test]
    fn low_snr_guard() {
        let s = summaries(&constant_grid(1e-13));
        assert!(s.xi.is_none() && s.zeta.is_none());
        assert!(s.is_undefined());
        // log 1 = 0 in the denominator.
        assert!(xi(&constant_grid(1.0)).is_none());
    }

    #[test]
    fn adc_values() {
        assert_eq!(adc(1.0, 3.0).unwrap(), 0.0);
        assert_abs_diff_eq!(adc((-2.0f64).exp(), 2.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(adc(0.06587, 1.0).unwrap(), 2.72, epsilon = 1e-4);
        assert!(adc(0.0, 1.0).is_err());
    }

    #[test]
    fn u_tilde_centred_on_boundary() {
        // Single prolate ellipsoid with exp(t (l1 - l2)) = c.
        let l1 = 8.0 + 2f64.ln() / 0.04;
        let g = prolate_grid([l1, 8.0, 8.0]);
        let t = test_u_tilde(&g, 0.1, 2.0, 0.0);
        assert_abs_diff_eq!(t.t_tilde, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.u_tilde, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_grid_tests() {
        let g = constant_grid(0.5);
        let u = test_u(&g, 0.5, 0.0, U_CRITICAL);
        assert_eq!((u.t, u.u, u.decision), (0.0, 0.0, Decision::Fail));
        assert!(u.degenerate);
        let q = test_q(&g, 0.5, 0.01, 3.0, -1.0);
        assert_eq!((q.x, q.q), (Some(1.0), Some(0.0)));
        let v = test_v(&g, 0.5, 0.01, 16, 1.0);
        assert_eq!((v.z, v.v), (Some(1.0), Some(0.0)));
        let k = test_k(&g, Some((0.0, 0.01)), K_GAUSSIAN_CRITICAL);
        assert_eq!(k.k, Some(0.0));
        assert_eq!(k.decision, Decision::Fail);
    }

    #[test]
    fn asymmetry_window_is_cyclic() {
        let mut p = vec![0.0; 16];
        p[0] = 1.0;
        p[15] = 0.5;
        p[2] = 0.25;
        let (kb, k) = asymmetry_window(&p);
        assert_eq!(kb, 0);
        assert_abs_diff_eq!(k, 1.75 / 5.0, epsilon = 1e-15);
    }

    #[test]
    fn gfa_bounds() {
        assert_eq!(gfa(&[1.0, 1.0, 1.0]), Some(0.0));
        assert_abs_diff_eq!(gfa(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert!(gfa(&[]).is_none());
    }

    fn report_with(decisions: [Decision; 5]) -> TestReport {
        let stats = compute_statistics(&constant_grid(0.5), 0.0, &AnalysisParams::default()).unwrap();
        let mut r = TestReport::new(stats, &CriticalValues::default(), &[]);
        r.decisions = Statistic::ALL.into_iter().zip(decisions).collect();
        r
    }

    #[test]
    fn classification_tree() {
        use Decision::*;
        let cases = [
            ([Fail, Fail, Fail, Fail, Fail], Classification::Isotropic),
            ([Fail, Fail, Reject, Fail, Fail], Classification::Multimodal),
            ([Reject, Fail, Fail, Reject, Fail], Classification::Multimodal),
            ([Reject, Reject, Fail, Fail, Fail], Classification::UnimodalProlate),
            ([Reject, Reject, Fail, Reject, Fail], Classification::UnimodalScalene),
            ([Reject, Reject, Fail, Reject, Reject], Classification::UnimodalAsymmetric),
            ([Undefined, Fail, Fail, Fail, Fail], Classification::Undetermined),
            ([Reject, Reject, Fail, Undefined, Fail], Classification::Undetermined),
        ];
        for (d, expect) in cases {
            assert_eq!(classify_voxel(&report_with(d)).unwrap(), expect, "{d:?}");
        }
        let mut r = report_with([Fail; 5]);
        r.decisions.remove(&Statistic::Q);
        assert!(classify_voxel(&r).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(AnalysisParams::default().validate().is_ok());
        let bad = AnalysisParams { m_prime: 8, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AnalysisParams { n_grid: 100, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
