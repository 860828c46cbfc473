//! Monte Carlo null distributions of the test statistics.
//!
//! Each statistic is simulated under its null model at the experiment's
//! noise level, scheme and analysis parameters. Results are stored as
//! empirical quantile tables keyed by a hash of that specification, so a
//! table can only be applied to the experiment it was built for.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Rotation3;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Frame;
use crate::phantom::{
    acquire_with, substream, AcquisitionScheme, DiffusionModel, EllipsoidModel, PaperModel, DEFAULT_T,
    PROLATE_LAMBDAS,
};
use crate::stats::{analyze_sample, AnalysisParams, Statistic, Statistics, Tail};

/// First line of every calibration file.
pub const TABLE_VERSION: &str = "# qspace-calibration v1";

/// Levels stored in every quantile table.
pub fn quantile_levels() -> Vec<f64> {
    let mut levels = vec![0.001, 0.005];
    levels.extend((1..100).map(|i| i as f64 / 100.0));
    levels.extend([0.995, 0.999]);
    levels
}

/// Null hypothesis models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NullModel {
    /// The isotropic reference model; null for `U` and `Q`.
    Isotropic,
    /// The prolate reference model; null for `V` and `K`.
    Prolate,
    /// A prolate ellipsoid whose perpendicular max/min ratio equals `c`,
    /// the boundary of the multi-modal null of `U~`.
    UnimodalBoundary,
}

impl NullModel {
    pub fn for_statistic(stat: Statistic) -> NullModel {
        match stat {
            Statistic::U | Statistic::Q => NullModel::Isotropic,
            Statistic::UTilde => NullModel::UnimodalBoundary,
            Statistic::V | Statistic::K => NullModel::Prolate,
        }
    }

    pub fn statistics(&self) -> &'static [Statistic] {
        match self {
            NullModel::Isotropic => &[Statistic::U, Statistic::Q],
            NullModel::UnimodalBoundary => &[Statistic::UTilde],
            NullModel::Prolate => &[Statistic::V, Statistic::K],
        }
    }

    /// The noiseless null density in the canonical frame.
    pub fn model(&self, c: f64) -> Result<DiffusionModel> {
        Ok(match self {
            NullModel::Isotropic => PaperModel::A3.model(),
            NullModel::Prolate => PaperModel::A1.model(),
            NullModel::UnimodalBoundary => {
                let minor = PROLATE_LAMBDAS[1];
                let lambdas = [minor + c.ln() / DEFAULT_T, minor, minor];
                DiffusionModel::Ellipsoid(EllipsoidModel::reference(lambdas, Frame::canonical())?)
            }
        })
    }
}

impl fmt::Display for NullModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NullModel::Isotropic => "isotropic",
            NullModel::Prolate => "prolate",
            NullModel::UnimodalBoundary => "unimodal-boundary",
        })
    }
}

impl FromStr for NullModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" => Ok(NullModel::Isotropic),
            "prolate" => Ok(NullModel::Prolate),
            "unimodal-boundary" => Ok(NullModel::UnimodalBoundary),
            other => Err(Error::Config(format!("unknown null model `{other}`"))),
        }
    }
}

/// Everything that determines a null distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSpec {
    pub model: NullModel,
    /// Noise standard deviation as a fraction of `A(0)`.
    pub noise_sigma: f64,
    pub scheme: AcquisitionScheme,
    pub params: AnalysisParams,
    /// Rotation applied to the null model, shared with the experiment.
    pub rotation: Rotation3<f64>,
}

impl NullSpec {
    /// Short content hash identifying this specification.
    pub fn hash(&self) -> String {
        let p = &self.params;
        let mut text = format!(
            "model={}\nsigma={:e}\nN={}\nrho={:e}\ndev={:?}\nc={:e}\nm={}\nm'={}\nfrt={}\n",
            self.model, self.noise_sigma, p.n_grid, p.rho, p.deviation, p.c, p.m, p.m_prime, p.frt_nodes
        );
        text.push_str(&self.scheme.to_text());
        for v in self.rotation.matrix().iter() {
            text.push_str(&format!("{v:.15e}\n"));
        }
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Empirical null distribution of one statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct NullCalibration {
    pub statistic: Statistic,
    pub null_model: NullModel,
    pub noise_sigma: f64,
    pub null_hash: String,
    pub reps: usize,
    pub seed: u64,
    /// `(level, value)` pairs, increasing in both.
    pub quantiles: Vec<(f64, f64)>,
    pub mean: f64,
    pub sd: f64,
}

/// Smallest replicate count for a threshold at `level`: 50 expected tail draws.
pub fn min_reps(level: f64) -> usize {
    (50.0 / level.min(1.0 - level)).ceil() as usize
}

fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    // Linear interpolation between order statistics.
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let (a, b) = (sorted[lo], sorted[hi]);
    if a == b {
        // Also covers repeated infinities, where a - a is NaN.
        return a;
    }
    let frac = h - lo as f64;
    if !(a.is_finite() && b.is_finite()) {
        return if frac == 0.0 { a } else { b };
    }
    a + frac * (b - a)
}

impl NullCalibration {
    /// Builds the table from simulated values; undefined values are dropped.
    pub fn from_samples(
        statistic: Statistic,
        spec: &NullSpec,
        values: &[f64],
        seed: u64,
    ) -> Result<NullCalibration> {
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
        if sorted.is_empty() {
            return Err(Error::Data(format!("no defined values of {statistic} under the {} null", spec.model)));
        }
        sorted.sort_by(f64::total_cmp);
        let finite: Vec<f64> = sorted.iter().copied().filter(|v| v.is_finite()).collect();
        let (mean, sd) = if finite.is_empty() {
            (sorted[0], 0.0)
        } else {
            let m = finite.iter().sum::<f64>() / finite.len() as f64;
            let var = finite.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (finite.len().max(2) - 1) as f64;
            (m, var.sqrt())
        };
        let quantiles = quantile_levels().into_iter().map(|p| (p, empirical_quantile(&sorted, p))).collect();
        Ok(NullCalibration {
            statistic,
            null_model: spec.model,
            noise_sigma: spec.noise_sigma,
            null_hash: spec.hash(),
            reps: values.len(),
            seed,
            quantiles,
            mean,
            sd,
        })
    }

    /// Null quantile at `level`, interpolated linearly between stored levels.
    pub fn quantile(&self, level: f64) -> f64 {
        let q = &self.quantiles;
        if level <= q[0].0 {
            return q[0].1;
        }
        for w in q.windows(2) {
            if level <= w[1].0 {
                let f = (level - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + f * (w[1].1 - w[0].1);
            }
        }
        q[q.len() - 1].1
    }

    /// Critical value for a test of size `level` in this statistic's tail.
    /// `None` for the two-sided `K`, which is standardised by `mean` and `sd`.
    pub fn threshold(&self, level: f64) -> Option<f64> {
        match self.statistic.tail() {
            Tail::Upper => Some(self.quantile(1.0 - level)),
            Tail::Lower => Some(self.quantile(level)),
            Tail::TwoSided => None,
        }
    }

    /// Empirical distribution function at `x`, interpolated from the table.
    pub fn cdf(&self, x: f64) -> f64 {
        let q = &self.quantiles;
        if x < q[0].1 {
            return 0.0;
        }
        if x >= q[q.len() - 1].1 {
            return 1.0;
        }
        for w in q.windows(2) {
            if x < w[1].1 {
                if w[1].1 == w[0].1 {
                    return w[1].0;
                }
                return w[0].0 + (x - w[0].1) / (w[1].1 - w[0].1) * (w[1].0 - w[0].0);
            }
        }
        1.0
    }

    /// Tail probability of `x` in the rejection direction.
    pub fn p_value(&self, x: f64) -> f64 {
        match self.statistic.tail() {
            Tail::Upper => 1.0 - self.cdf(x),
            Tail::Lower => self.cdf(x),
            Tail::TwoSided => {
                let f = self.cdf(x);
                (2.0 * f.min(1.0 - f)).min(1.0)
            }
        }
    }
}

/// Simulates `reps` replicates of the analysis under `spec`. Replicate `i`
/// draws from stream `i` of `seed`, so results do not depend on scheduling.
pub fn simulate_null(spec: &NullSpec, reps: usize, seed: u64) -> Result<Vec<Statistics>> {
    let model = spec.model.model(spec.params.c)?.rotated(&spec.rotation);
    let run = |i: usize| -> Result<Statistics> {
        let mut rng = substream(seed, i as u64);
        let sample = acquire_with(&model, &spec.scheme, spec.noise_sigma, &mut rng)?;
        Ok(analyze_sample(&sample, &spec.params)?.1)
    };
    if spec.noise_sigma == 0.0 {
        // Every replicate is the same noiseless acquisition.
        let s = run(0)?;
        return Ok(vec![s; reps]);
    }
    (0..reps).into_par_iter().map(run).collect()
}

/// Calibrates every statistic whose null is `spec.model`.
pub fn calibrate_spec(spec: &NullSpec, reps: usize, seed: u64) -> Result<Vec<NullCalibration>> {
    for stat in spec.model.statistics() {
        let need = min_reps(stat.nominal_level());
        if reps < need {
            return Err(Error::Config(format!(
                "{reps} replicates are too few for a {}% {stat} threshold (need {need})",
                stat.nominal_level() * 100.0
            )));
        }
    }
    let sims = simulate_null(spec, reps, seed)?;
    spec.model
        .statistics()
        .iter()
        .map(|&stat| {
            let values: Vec<f64> = sims.iter().map(|s| s.value(stat).unwrap_or(f64::NAN)).collect();
            NullCalibration::from_samples(stat, spec, &values, seed)
        })
        .collect()
}

/// Calibrates one statistic under `spec` (whose model must be its null).
pub fn calibrate_null(stat: Statistic, spec: &NullSpec, reps: usize, seed: u64) -> Result<NullCalibration> {
    if NullModel::for_statistic(stat) != spec.model {
        return Err(Error::Config(format!("the null model of {stat} is {}, not {}", NullModel::for_statistic(stat), spec.model)));
    }
    calibrate_spec(spec, reps, seed)?
        .into_iter()
        .find(|c| c.statistic == stat)
        .ok_or_else(|| Error::Config(format!("no calibration produced for {stat}")))
}

/// A collection of calibration tables, serialisable as versioned CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationSet {
    pub tables: Vec<NullCalibration>,
}

const HEADER: [&str; 10] =
    ["statistic", "null_model", "sigma", "null_hash", "level", "threshold", "reps", "seed", "mean", "sd"];

impl CalibrationSet {
    pub fn find(&self, stat: Statistic, null_hash: &str) -> Option<&NullCalibration> {
        self.tables.iter().find(|t| t.statistic == stat && t.null_hash == null_hash)
    }

    /// Adds or replaces tables with the same statistic and hash.
    pub fn insert(&mut self, table: NullCalibration) {
        self.tables.retain(|t| !(t.statistic == table.statistic && t.null_hash == table.null_hash));
        self.tables.push(table);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER)?;
        for t in &self.tables {
            for (level, value) in &t.quantiles {
                w.write_record([
                    t.statistic.to_string(),
                    t.null_model.to_string(),
                    format!("{}", t.noise_sigma),
                    t.null_hash.clone(),
                    format!("{level}"),
                    format!("{value:e}"),
                    t.reps.to_string(),
                    t.seed.to_string(),
                    format!("{:e}", t.mean),
                    format!("{:e}", t.sd),
                ])?;
            }
        }
        let body = String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?)
            .map_err(|e| Error::Data(e.to_string()))?;
        Ok(format!("{TABLE_VERSION}\n{body}"))
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.splitn(2, '\n');
        if lines.next().map(str::trim) != Some(TABLE_VERSION) {
            return Err(Error::parse(source, format!("missing `{TABLE_VERSION}` header")));
        }
        let mut reader = csv::Reader::from_reader(lines.next().unwrap_or("").as_bytes());
        let mut set = CalibrationSet::default();
        for (i, record) in reader.records().enumerate() {
            let r = record?;
            let at = |m: String| Error::parse(source, format!("row {}: {m}", i + 2));
            if r.len() != HEADER.len() {
                return Err(at(format!("expected {} fields, found {}", HEADER.len(), r.len())));
            }
            let num = |k: usize| r[k].parse::<f64>().map_err(|_| at(format!("bad number `{}`", &r[k])));
            let int = |k: usize| r[k].parse::<u64>().map_err(|_| at(format!("bad integer `{}`", &r[k])));
            let stat: Statistic = r[0].parse().map_err(|e: Error| at(e.to_string()))?;
            let null_model: NullModel = r[1].parse().map_err(|e: Error| at(e.to_string()))?;
            let (level, value) = (num(4)?, num(5)?);
            let hash = r[3].to_string();
            match set.tables.iter_mut().find(|t| t.statistic == stat && t.null_hash == hash) {
                Some(t) => {
                    let last = t.quantiles[t.quantiles.len() - 1];
                    if level <= last.0 || value < last.1 {
                        return Err(at("quantile table is not monotone".into()));
                    }
                    t.quantiles.push((level, value));
                }
                None => set.tables.push(NullCalibration {
                    statistic: stat,
                    null_model,
                    noise_sigma: num(2)?,
                    null_hash: hash,
                    reps: int(6)? as usize,
                    seed: int(7)?,
                    quantiles: vec![(level, value)],
                    mean: num(8)?,
                    sd: num(9)?,
                }),
            }
        }
        Ok(set)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::electrostatic_scheme;

    fn spec(model: NullModel, sigma: f64) -> NullSpec {
        NullSpec {
            model,
            noise_sigma: sigma,
            scheme: electrostatic_scheme(30).unwrap(),
            params: AnalysisParams { n_grid: 32, m: 3, m_prime: 4, frt_nodes: 32, ..Default::default() },
            rotation: Rotation3::identity(),
        }
    }

    #[test]
    fn noiseless_null_is_degenerate() {
        let s = spec(NullModel::Prolate, 0.0);
        let tables = calibrate_spec(&s, 1000, 1).unwrap();
        for t in &tables {
            let first = t.quantiles[0].1;
            assert!(t.quantiles.iter().all(|q| q.1 == first), "{}", t.statistic);
            assert!(t.sd.abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_reps_rejected() {
        assert!(calibrate_spec(&spec(NullModel::Isotropic, 0.05), 100, 1).is_err());
        assert!(calibrate_null(Statistic::U, &spec(NullModel::Prolate, 0.05), 1000, 1).is_err());
        assert_eq!(min_reps(0.05), 1000);
        assert_eq!(min_reps(0.10), 500);
    }

    #[test]
    fn table_round_trip_and_lookup() {
        let s = spec(NullModel::Isotropic, 0.05);
        let values: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = NullCalibration::from_samples(Statistic::U, &s, &values, 9).unwrap();
        assert!(t.quantiles.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].0 < w[1].0));
        assert!((t.p_value(t.threshold(0.05).unwrap()) - 0.05).abs() < 1e-9);
        let mut set = CalibrationSet::default();
        set.insert(t.clone());
        let back = CalibrationSet::parse(&set.to_csv().unwrap(), "mem").unwrap();
        let u = back.find(Statistic::U, &s.hash()).unwrap();
        assert_eq!(u.quantiles.len(), t.quantiles.len());
        assert!((u.quantile(0.95) - t.quantile(0.95)).abs() < 1e-12);
        assert!(CalibrationSet::parse("statistic\n", "mem").is_err());
    }

    #[test]
    fn hash_tracks_specification() {
        let a = spec(NullModel::Isotropic, 0.05);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.noise_sigma = 0.1;
        assert_ne!(a.hash(), b.hash());
    }
}
