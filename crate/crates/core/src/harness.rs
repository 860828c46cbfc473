//! Experiment drivers: the Monte Carlo rejection table, noiseless fiber
//! traces, and batch analysis of voxel volumes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Rotation3;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::calibration::{calibrate_spec, CalibrationSet, NullCalibration, NullModel, NullSpec};
use crate::error::{Error, Result};
use crate::estimator::{pattern_search, Deviation};
use crate::geometry::{build_grid, great_circle, icosphere, random_rotation, Direction, Frame};
use crate::phantom::{
    acquire_with, electrostatic_scheme, substream, AcquisitionScheme, DiffusionModel, FiberEvolution, FiberKind,
    HardiSample, PaperModel,
};
use crate::stats::{
    analyze_sample, summaries, AnalysisParams, Classification, CriticalValues, Decision,
    Statistic, SummarySet, TestReport, K_GAUSSIAN_CRITICAL, U_CRITICAL, U_CRITICAL_CONSERVATIVE,
};

/// Environment variable giving the default worker count.
pub const WORKERS_ENV: &str = "QSPACE_WORKERS";

/// splitmix64 finaliser, used to derive independent seeds from tags.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the task identified by `tags` within an experiment seeded by `seed`.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, t| mix(acc ^ mix(*t)))
}

/// The random rotation applied to the rotated models of an experiment.
pub fn experiment_rotation(seed: u64) -> Rotation3<f64> {
    random_rotation(&mut substream(derive_seed(seed, &[0x707]), 0))
}

/// Parses `1/30`, `0.05` or `0`.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let s = s.trim();
    let value = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| Error::Config(format!("bad fraction `{s}`")))?;
            let b: f64 = b.trim().parse().map_err(|_| Error::Config(format!("bad fraction `{s}`")))?;
            a / b
        }
        None => s.parse().map_err(|_| Error::Config(format!("bad number `{s}`")))?,
    };
    if !value.is_finite() || value < 0.0 {
        return Err(Error::Config(format!("noise level `{s}` must be finite and nonnegative")));
    }
    Ok(value)
}

/// Where the acquisition directions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SchemeSource {
    Electrostatic(usize),
    File(PathBuf),
}

/// A complete experiment description, read from `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub models: Vec<PaperModel>,
    /// Noise standard deviations as fractions of `A(0)`, with their labels.
    pub noise_levels: Vec<(String, f64)>,
    pub scheme: SchemeSource,
    pub n0: usize,
    pub replicates: usize,
    pub calibration_reps: usize,
    pub params: AnalysisParams,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            models: PaperModel::ALL.to_vec(),
            noise_levels: ["1/30", "1/20", "1/10", "1/2"]
                .iter()
                .map(|s| (s.to_string(), parse_fraction(s).expect("valid literal")))
                .collect(),
            scheme: SchemeSource::Electrostatic(60),
            n0: 1,
            replicates: 200,
            calibration_reps: 2000,
            params: AnalysisParams::default(),
            seed: 1,
            output: None,
            calibration: None,
            workers: None,
        }
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let bad = |what: &str| Error::Config(format!("bad {what} `{value}` for key `{key}`"));
        let int = || value.parse::<usize>().map_err(|_| bad("integer"));
        let float = || value.parse::<f64>().map_err(|_| bad("number"));
        match key.trim() {
            "models" => {
                self.models = value.split(',').map(str::parse).collect::<Result<_>>()?;
                if self.models.is_empty() {
                    return Err(Error::Config("models list is empty".into()));
                }
            }
            "noise" => {
                self.noise_levels = value
                    .split(',')
                    .map(|s| parse_fraction(s).map(|v| (s.trim().to_string(), v)))
                    .collect::<Result<_>>()?;
            }
            "scheme" => {
                self.scheme = match value.parse::<usize>() {
                    Ok(n) => SchemeSource::Electrostatic(n),
                    Err(_) => SchemeSource::File(PathBuf::from(value)),
                }
            }
            "n0" => self.n0 = int()?,
            "reps" | "replicates" => self.replicates = int()?,
            "calibration_reps" => self.calibration_reps = int()?,
            "N" | "grid" => self.params.n_grid = int()?,
            "rho" => self.params.rho = float()?,
            "deviation" => {
                self.params.deviation = match value {
                    "max" | "maximum" => Deviation::Maximum,
                    "median" => Deviation::Median,
                    _ => return Err(bad("deviation (max or median)")),
                }
            }
            "c" => self.params.c = float()?,
            "m" => self.params.m = int()?,
            "m_prime" => self.params.m_prime = int()?,
            "frt_nodes" => self.params.frt_nodes = int()?,
            "u_critical" => {
                self.params.u_critical = match value {
                    "default" => U_CRITICAL,
                    "conservative" => U_CRITICAL_CONSERVATIVE,
                    _ => float()?,
                }
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "output" => self.output = Some(PathBuf::from(value)),
            "calibration" => self.calibration = Some(PathBuf::from(value)),
            "workers" => self.workers = Some(int()?),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k, v).map_err(|e| Error::parse(source, format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.replicates < 1 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.noise_levels.is_empty() {
            return Err(Error::Config("no noise levels given".into()));
        }
        if let SchemeSource::File(p) = &self.scheme {
            if !p.exists() {
                return Err(Error::Config(format!("scheme file {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.calibration {
            if !p.exists() {
                return Err(Error::Config(format!("calibration file {} does not exist", p.display())));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// The acquisition scheme with this config's `n0`.
    pub fn scheme(&self) -> Result<AcquisitionScheme> {
        let scheme = match &self.scheme {
            SchemeSource::Electrostatic(n) => electrostatic_scheme(*n)?,
            SchemeSource::File(p) => AcquisitionScheme::read(p)?,
        };
        scheme.with_n0(self.n0)
    }

    /// Canonical text form; worker count and paths of outputs are excluded
    /// because they do not affect results.
    pub fn canonical_text(&self) -> String {
        let p = &self.params;
        let models: Vec<String> = self.models.iter().map(|m| m.to_string()).collect();
        let noise: Vec<&str> = self.noise_levels.iter().map(|(s, _)| s.as_str()).collect();
        let scheme = match &self.scheme {
            SchemeSource::Electrostatic(n) => n.to_string(),
            SchemeSource::File(f) => f.display().to_string(),
        };
        format!(
            "models = {}\nnoise = {}\nscheme = {}\nn0 = {}\nreps = {}\ncalibration_reps = {}\nN = {}\nrho = {}\n\
             deviation = {}\nc = {}\nm = {}\nm_prime = {}\nfrt_nodes = {}\nu_critical = {}\nseed = {}\n",
            models.join(","),
            noise.join(","),
            scheme,
            self.n0,
            self.replicates,
            self.calibration_reps,
            p.n_grid,
            p.rho,
            if p.deviation == Deviation::Median { "median" } else { "max" },
            p.c,
            p.m,
            p.m_prime,
            p.frt_nodes,
            p.u_critical,
            self.seed
        )
    }

    /// Short hash of [`canonical_text`](Self::canonical_text).
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical_text().as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Worker count: the config, then the environment, then all cores.
    pub fn worker_count(&self) -> usize {
        self.workers
            .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
            .filter(|w| *w > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    /// Runs `f` on a pool with [`worker_count`](Self::worker_count) threads.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.worker_count())
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Null specifications of an experiment at noise level `sigma`.
pub fn null_specs(cfg: &ExperimentConfig, scheme: &AcquisitionScheme, sigma: f64) -> Vec<NullSpec> {
    let rotation = experiment_rotation(cfg.seed);
    [NullModel::Isotropic, NullModel::UnimodalBoundary, NullModel::Prolate]
        .into_iter()
        .map(|model| NullSpec { model, noise_sigma: sigma, scheme: scheme.clone(), params: cfg.params, rotation })
        .collect()
}

/// Calibrates every null of `cfg` at every noise level.
pub fn calibrate_experiment(cfg: &ExperimentConfig) -> Result<CalibrationSet> {
    cfg.validate()?;
    let scheme = cfg.scheme()?;
    let mut set = CalibrationSet::default();
    for (ni, (_, sigma)) in cfg.noise_levels.iter().enumerate() {
        for (si, spec) in null_specs(cfg, &scheme, *sigma).iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[2, ni as u64, si as u64]);
            for table in cfg.install(|| calibrate_spec(spec, cfg.calibration_reps, seed))?? {
                set.insert(table);
            }
        }
    }
    Ok(set)
}

/// Thresholds and tables for one noise level.
#[derive(Debug, Clone)]
pub struct LevelCalibration {
    pub critical: CriticalValues,
    pub tables: Vec<NullCalibration>,
}

/// Looks up the tables of every test at `sigma`, failing with
/// [`Error::MissingCalibration`] when one is absent.
pub fn level_calibration(
    cfg: &ExperimentConfig,
    scheme: &AcquisitionScheme,
    sigma: f64,
    set: &CalibrationSet,
) -> Result<LevelCalibration> {
    let specs = null_specs(cfg, scheme, sigma);
    let mut tables = Vec::new();
    for stat in Statistic::ALL {
        let model = NullModel::for_statistic(stat);
        let spec = specs.iter().find(|s| s.model == model).expect("every null model has a spec");
        let table = set
            .find(stat, &spec.hash())
            .ok_or_else(|| Error::MissingCalibration { statistic: stat.to_string(), sigma: sigma.to_string() })?;
        tables.push(table.clone());
    }
    let get = |s: Statistic| tables.iter().find(|t| t.statistic == s).expect("present");
    let critical = CriticalValues {
        u: Some(cfg.params.u_critical),
        u_tilde: get(Statistic::UTilde).threshold(Statistic::UTilde.nominal_level()),
        q: get(Statistic::Q).threshold(Statistic::Q.nominal_level()),
        v: get(Statistic::V).threshold(Statistic::V.nominal_level()),
        k_null: Some((get(Statistic::K).mean, get(Statistic::K).sd)),
        k_z: K_GAUSSIAN_CRITICAL,
    };
    Ok(LevelCalibration { critical, tables })
}

/// Loads the configured calibration file, or calibrates in-process.
pub fn resolve_calibration(cfg: &ExperimentConfig) -> Result<CalibrationSet> {
    match &cfg.calibration {
        Some(path) => CalibrationSet::read(path),
        None => calibrate_experiment(cfg),
    }
}

/// Rejection counts for one statistic in one table cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellCount {
    /// Rejections among replicates passing the prerequisite stage.
    pub rejected: usize,
    pub denominator: usize,
    /// Rejections over all replicates.
    pub marginal: usize,
}

/// One (model, noise level) cell of the rejection table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table3Cell {
    pub model: PaperModel,
    pub noise_label: String,
    pub noise: f64,
    pub reps: usize,
    pub counts: BTreeMap<Statistic, CellCount>,
    pub classifications: BTreeMap<Classification, usize>,
    /// Replicates with an undefined statistic or interpolation fallback.
    pub flagged: usize,
}

/// The complete rejection table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table3 {
    pub cells: Vec<Table3Cell>,
    pub config_hash: String,
}

/// Replicate decisions, conditioned as in the sequential protocol:
/// `U` on all replicates, `U~`, `V`, `K` among `U` rejections and `Q` among
/// the rest. Undefined decisions count as non-rejections.
fn tally(model: PaperModel, label: &str, noise: f64, reports: &[TestReport]) -> Table3Cell {
    let mut counts = BTreeMap::new();
    for stat in Statistic::ALL {
        let mut c = CellCount { rejected: 0, denominator: 0, marginal: 0 };
        for r in reports {
            let u_rejected = r.decisions[&Statistic::U].is_reject();
            let eligible = match stat {
                Statistic::U => true,
                Statistic::Q => !u_rejected,
                _ => u_rejected,
            };
            let rejected = r.decisions[&stat].is_reject();
            c.marginal += rejected as usize;
            if eligible {
                c.denominator += 1;
                c.rejected += rejected as usize;
            }
        }
        counts.insert(stat, c);
    }
    let mut classifications = BTreeMap::new();
    for r in reports {
        *classifications.entry(r.classification).or_insert(0) += 1;
    }
    let flagged = reports
        .iter()
        .filter(|r| r.decisions.values().any(|d| *d == Decision::Undefined) || r.statistics.fallback_count > 0)
        .count();
    Table3Cell {
        model,
        noise_label: label.to_string(),
        noise,
        reps: reports.len(),
        counts,
        classifications,
        flagged,
    }
}

/// Runs the Monte Carlo rejection experiment with the given calibration.
pub fn run_table3_with(cfg: &ExperimentConfig, calibration: &CalibrationSet) -> Result<Table3> {
    cfg.validate()?;
    let scheme = cfg.scheme()?;
    let rotation = experiment_rotation(cfg.seed);
    let mut cells = Vec::new();
    for (ni, (label, sigma)) in cfg.noise_levels.iter().enumerate() {
        let level = level_calibration(cfg, &scheme, *sigma, calibration)?;
        let tables: Vec<&NullCalibration> = level.tables.iter().collect();
        for model in &cfg.models {
            let mi = PaperModel::ALL.iter().position(|m| m == model).unwrap_or(0);
            let diffusion = model.model_in_experiment(&rotation);
            let cell_seed = derive_seed(cfg.seed, &[1, mi as u64, ni as u64]);
            let reports: Vec<TestReport> = cfg.install(|| {
                (0..cfg.replicates)
                    .into_par_iter()
                    .map(|i| {
                        let mut rng = substream(cell_seed, i as u64);
                        let sample = acquire_with(&diffusion, &scheme, *sigma, &mut rng)?;
                        let (_, stats) = analyze_sample(&sample, &cfg.params)?;
                        Ok(TestReport::new(stats, &level.critical, &tables))
                    })
                    .collect::<Result<Vec<_>>>()
            })??;
            cells.push(tally(*model, label, *sigma, &reports));
        }
    }
    Ok(Table3 { cells, config_hash: cfg.hash() })
}

/// Resolves the calibration and runs the rejection experiment.
pub fn run_table3(cfg: &ExperimentConfig) -> Result<Table3> {
    let calibration = resolve_calibration(cfg)?;
    run_table3_with(cfg, &calibration)
}

impl Table3 {
    pub fn cell(&self, model: PaperModel, noise_label: &str) -> Option<&Table3Cell> {
        self.cells.iter().find(|c| c.model == model && c.noise_label == noise_label)
    }

    /// One row per (model, noise, statistic).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "model", "noise", "sigma", "reps", "statistic", "hypothesis", "rejected", "denominator", "rate",
            "marginal_rejected", "marginal_rate", "flagged",
        ])?;
        for c in &self.cells {
            for (stat, n) in &c.counts {
                let rate = |a: usize, b: usize| if b == 0 { String::new() } else { format!("{:.4}", a as f64 / b as f64) };
                w.write_record([
                    c.model.to_string(),
                    c.noise_label.clone(),
                    format!("{}", c.noise),
                    c.reps.to_string(),
                    stat.to_string(),
                    stat.hypothesis().to_string(),
                    n.rejected.to_string(),
                    n.denominator.to_string(),
                    rate(n.rejected, n.denominator),
                    n.marginal.to_string(),
                    rate(n.marginal, c.reps),
                    c.flagged.to_string(),
                ])?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).map_err(|e| Error::Data(e.to_string()))
    }

    /// Plain-text table in the `rejected/denominator` layout.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut labels: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !labels.contains(&c.noise_label.as_str()) {
                labels.push(&c.noise_label);
            }
        }
        let mut models: Vec<PaperModel> = Vec::new();
        for c in &self.cells {
            if !models.contains(&c.model) {
                models.push(c.model);
            }
        }
        let _ = write!(out, "{:<8}{:<7}{:<6}", "sigma", "test", "hyp");
        for m in &models {
            let _ = write!(out, "{:>12}", m.to_string());
        }
        out.push('\n');
        for label in labels {
            for stat in Statistic::ALL {
                let _ = write!(out, "{:<8}{:<7}{:<6}", label, stat.to_string(), stat.hypothesis());
                for m in &models {
                    let entry = self.cell(*m, label).map(|c| {
                        let n = c.counts[&stat];
                        if n.denominator == c.reps {
                            n.rejected.to_string()
                        } else {
                            format!("{}/{}", n.rejected, n.denominator)
                        }
                    });
                    let _ = write!(out, "{:>12}", entry.unwrap_or_default());
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Summaries of one voxel of a fiber trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub voxel: usize,
    pub weight: f64,
    pub summary: SummarySet,
}

/// Dense Funk-Radon argmax of a noiseless model, with `u2` at the largest
/// value on the dominant circle.
pub fn model_frame(model: &DiffusionModel) -> Frame {
    let frt = |x: &Direction| {
        let pts = great_circle(x, 360);
        pts.iter().map(|q| model.eval(q)).sum::<f64>() / pts.len() as f64
    };
    let mut u1 = Direction::E3;
    let mut best = f64::NEG_INFINITY;
    for p in icosphere(4).iter().filter(|p| p.z() >= 0.0) {
        let v = frt(p);
        if v > best {
            best = v;
            u1 = *p;
        }
    }
    let u1 = pattern_search(u1, best, frt, 1f64.to_radians(), 1e-7).canonical_sign();
    let mut u2 = Direction::E1;
    let mut best = f64::NEG_INFINITY;
    for q in great_circle(&u1, 2048) {
        let v = model.eval(&q);
        if v > best {
            best = v;
            u2 = q;
        }
    }
    Frame::from_axes(u1, u2).expect("circle samples are orthogonal to u1")
}

/// Noiseless summaries of `model` on an `N x N` grid in its dense frame.
pub fn model_summaries(model: &DiffusionModel, n: usize) -> Result<SummarySet> {
    let frame = model_frame(model);
    let mut grid = build_grid(&frame, n)?;
    grid.fill(|q| model.eval(q));
    grid.frt_samples = icosphere(3)
        .iter()
        .filter(|p| p.canonical_sign() == **p)
        .map(|x| {
            let pts = great_circle(x, 128);
            pts.iter().map(|q| model.eval(q)).sum::<f64>() / pts.len() as f64
        })
        .collect();
    Ok(summaries(&grid))
}

/// Summaries along the forking or crossing voxel sequence.
pub fn run_fiber_trace(evolution: &FiberEvolution, n: usize) -> Result<Vec<TraceRow>> {
    let times = evolution.voxel_times();
    evolution
        .voxel_models()?
        .into_iter()
        .zip(times)
        .enumerate()
        .map(|(voxel, (m, _))| {
            let weight = m.components()[0].0;
            let summary = model_summaries(&DiffusionModel::Mixture(m), n)?;
            Ok(TraceRow { voxel: voxel + 1, weight, summary })
        })
        .collect()
}

/// CSV with columns `voxel, tau, tau_tilde, xi, zeta, kappa, gfa`.
pub fn trace_csv(kind: FiberKind, rows: &[TraceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["voxel", "kind", "weight", "tau", "tau_tilde", "xi", "zeta", "kappa", "gfa"])?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.voxel.to_string(),
            kind.to_string(),
            format!("{}", r.weight),
            format!("{:.6}", s.tau),
            format!("{:.6}", s.tau_tilde),
            opt(s.xi),
            opt(s.zeta),
            opt(s.kappa),
            opt(s.gfa),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).map_err(|e| Error::Data(e.to_string()))
}

/// Header line of volume sidecar files.
pub const VOLUME_MAGIC: &str = "qspace-volume v1";

/// A voxel volume: flat little-endian `f32` data, `n0` b=0 values then `n`
/// diffusion-weighted values per voxel, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeDataset {
    pub dims: [usize; 3],
    pub scheme: AcquisitionScheme,
    pub data: Vec<f32>,
    pub mask: Option<Vec<u8>>,
    /// Known per-channel noise standard deviation in signal units, used
    /// for the noise scale when there are fewer than two b=0 images.
    pub noise_sigma: Option<f64>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl VolumeDataset {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn values_per_voxel(&self) -> usize {
        self.scheme.n() + self.scheme.n0()
    }

    pub fn validate(&self) -> Result<()> {
        let expect = self.voxel_count() * self.values_per_voxel();
        if self.data.len() != expect {
            return Err(Error::Data(format!(
                "volume holds {} values, dims {:?} with {} values per voxel need {expect}",
                self.data.len(),
                self.dims,
                self.values_per_voxel()
            )));
        }
        if let Some(m) = &self.mask {
            if m.len() != self.voxel_count() {
                return Err(Error::Data(format!("mask has {} voxels, volume has {}", m.len(), self.voxel_count())));
            }
        }
        Ok(())
    }

    pub fn is_masked_in(&self, voxel: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[voxel] != 0)
    }

    /// The measurements of one voxel.
    pub fn sample(&self, voxel: usize) -> Result<HardiSample> {
        let per = self.values_per_voxel();
        let v = &self.data[voxel * per..(voxel + 1) * per];
        let n0 = self.scheme.n0();
        let (b0, dwi) = v.split_at(n0);
        HardiSample::new(
            dwi.iter().map(|x| *x as f64).collect(),
            b0.iter().map(|x| *x as f64).collect(),
            self.scheme.clone(),
            self.noise_sigma,
        )
        .map_err(|e| Error::Data(format!("voxel {voxel} {:?}: {e}", self.coords(voxel))))
    }

    pub fn coords(&self, voxel: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [voxel % nx, (voxel / nx) % ny, voxel / (nx * ny)]
    }

    /// Reads the sidecar header at `path` and the files it names.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let src = path.display().to_string();
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        if lines.next() != Some(VOLUME_MAGIC) {
            return Err(Error::parse(&src, format!("first line must be `{VOLUME_MAGIC}`")));
        }
        let mut fields = BTreeMap::new();
        for l in lines {
            let (k, v) = l.split_once('=').ok_or_else(|| Error::parse(&src, format!("bad line `{l}`")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::parse(&src, format!("missing `{k}`")));
        let dims: Vec<usize> = get("dims")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::parse(&src, format!("bad dimension `{s}`"))))
            .collect::<Result<_>>()?;
        let dims: [usize; 3] = dims.try_into().map_err(|_| Error::parse(&src, "dims needs three integers"))?;
        let scheme = AcquisitionScheme::read(&resolve(base, get("scheme")?))?;
        let data = read_f32(&resolve(base, get("data")?))?;
        let mask = match fields.get("mask") {
            Some(m) => {
                let p = resolve(base, m);
                Some(std::fs::read(&p).map_err(|e| Error::io(&p, e))?)
            }
            None => None,
        };
        let noise_sigma = match fields.get("noise_sigma") {
            Some(v) => Some(
                v.parse::<f64>()
                    .ok()
                    .filter(|s| s.is_finite() && *s >= 0.0)
                    .ok_or_else(|| Error::parse(&src, format!("bad noise_sigma `{v}`")))?,
            ),
            None => None,
        };
        let ds = VolumeDataset { dims, scheme, data, mask, noise_sigma };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes `<stem>.hdr`, `<stem>.scheme`, `<stem>.f32` and optionally `<stem>.mask` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.scheme.write(&dir.join(format!("{stem}.scheme")))?;
        write_f32(&dir.join(format!("{stem}.f32")), &self.data)?;
        let mut header = format!(
            "{VOLUME_MAGIC}\ndims = {} {} {}\nscheme = {stem}.scheme\ndata = {stem}.f32\n",
            self.dims[0], self.dims[1], self.dims[2]
        );
        if let Some(s) = self.noise_sigma {
            header.push_str(&format!("noise_sigma = {s:e}\n"));
        }
        if let Some(mask) = &self.mask {
            let p = dir.join(format!("{stem}.mask"));
            std::fs::write(&p, mask).map_err(|e| Error::io(&p, e))?;
            header.push_str(&format!("mask = {stem}.mask\n"));
        }
        let path = dir.join(format!("{stem}.hdr"));
        std::fs::write(&path, header).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Simulates a volume whose voxel `v` follows `models[v]` at noise `sigma`.
/// The known noise level is recorded when it is the same in every voxel.
pub fn synthesize_volume(
    dims: [usize; 3],
    models: &[DiffusionModel],
    scheme: &AcquisitionScheme,
    sigma: f64,
    seed: u64,
) -> Result<VolumeDataset> {
    let count: usize = dims.iter().product();
    if models.len() != count {
        return Err(Error::Data(format!("{} voxel models for {count} voxels", models.len())));
    }
    let mut data = Vec::with_capacity(count * (scheme.n() + scheme.n0()));
    let mut levels = Vec::with_capacity(count);
    for (v, model) in models.iter().enumerate() {
        let s = acquire_with(model, scheme, sigma, &mut substream(seed, v as u64))?;
        data.extend(s.b0_values.iter().chain(&s.raw_values).map(|x| *x as f32));
        levels.push(s.noise_sigma);
    }
    let noise_sigma = levels.first().copied().flatten().filter(|s| levels.iter().all(|l| *l == Some(*s)));
    Ok(VolumeDataset { dims, scheme: scheme.clone(), data, mask: None, noise_sigma })
}

/// Names of the per-voxel output maps, in file order.
pub const MAP_NAMES: [&str; 14] =
    ["T", "U", "Ttilde", "Utilde", "X", "Q", "Z", "V", "K", "p_U", "p_Utilde", "p_Q", "p_V", "p_K"];

/// Per-voxel results; masked-out voxels hold NaN and code 255.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMaps {
    pub dims: [usize; 3],
    pub maps: Vec<Vec<f32>>,
    pub classification: Vec<u8>,
}

/// Code of voxels outside the mask in the classification map.
pub const MASKED_CODE: u8 = 255;

fn voxel_row(report: &TestReport) -> Vec<f32> {
    let s = &report.statistics;
    let o = |v: Option<f64>| v.unwrap_or(f64::NAN) as f32;
    let p = |st: Statistic| report.p_values.get(&st).copied().unwrap_or(f64::NAN) as f32;
    vec![
        s.t as f32,
        s.u as f32,
        s.t_tilde as f32,
        s.u_tilde as f32,
        o(s.x),
        o(s.q),
        o(s.z),
        o(s.v),
        o(s.k),
        p(Statistic::U),
        p(Statistic::UTilde),
        p(Statistic::Q),
        p(Statistic::V),
        p(Statistic::K),
    ]
}

fn analyze_voxel(ds: &VolumeDataset, v: usize, params: &AnalysisParams, level: &LevelCalibration) -> Result<(Vec<f32>, u8)> {
    if !ds.is_masked_in(v) {
        return Ok((vec![f32::NAN; MAP_NAMES.len()], MASKED_CODE));
    }
    let sample = ds.sample(v)?;
    let tables: Vec<&NullCalibration> = level.tables.iter().collect();
    let report = match analyze_sample(&sample, params) {
        Ok((_, stats)) => TestReport::new(stats, &level.critical, &tables),
        Err(Error::Data(_)) => {
            return Ok((vec![f32::NAN; MAP_NAMES.len()], Classification::Undetermined.code()));
        }
        Err(e) => return Err(e),
    };
    Ok((voxel_row(&report), report.classification.code()))
}

fn chunk_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("chunks").join(format!("chunk_{index:06}.bin"))
}

/// Analyses every masked voxel and writes one `f32` map per statistic and
/// p-value plus `classification.u8` into `out`. Work proceeds in chunks of
/// `chunk` voxels, each persisted under `out/chunks`; chunks already on
/// disk are reused, so an interrupted run resumes where it stopped.
pub fn analyze_volume(
    ds: &VolumeDataset,
    cfg: &ExperimentConfig,
    calibration: &CalibrationSet,
    out: &Path,
    chunk: usize,
) -> Result<VolumeMaps> {
    ds.validate()?;
    cfg.params.validate()?;
    let sigma = cfg.noise_levels.first().map(|n| n.1).ok_or_else(|| Error::Config("no noise level".into()))?;
    let level = level_calibration(cfg, &ds.scheme, sigma, calibration)?;
    let chunk = chunk.max(1);
    std::fs::create_dir_all(out.join("chunks")).map_err(|e| Error::io(out, e))?;
    let count = ds.voxel_count();
    let width = MAP_NAMES.len();
    let mut rows: Vec<f32> = Vec::with_capacity(count * width);
    let mut codes: Vec<u8> = Vec::with_capacity(count);
    for (ci, start) in (0..count).step_by(chunk).enumerate() {
        let end = (start + chunk).min(count);
        let path = chunk_path(out, ci);
        let expected = (end - start) * (width * 4 + 1);
        if let Ok(bytes) = std::fs::read(&path) {
            if bytes.len() == expected {
                let (vals, cls) = bytes.split_at((end - start) * width * 4);
                rows.extend(vals.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
                codes.extend_from_slice(cls);
                continue;
            }
        }
        let results: Vec<(Vec<f32>, u8)> = cfg.install(|| {
            (start..end).into_par_iter().map(|v| analyze_voxel(ds, v, &cfg.params, &level)).collect::<Result<Vec<_>>>()
        })??;
        let mut bytes = Vec::with_capacity(expected);
        for (r, _) in &results {
            bytes.extend(r.iter().flat_map(|x| x.to_le_bytes()));
        }
        bytes.extend(results.iter().map(|(_, c)| *c));
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        for (r, c) in results {
            rows.extend(r);
            codes.push(c);
        }
    }
    let maps: Vec<Vec<f32>> = (0..width).map(|m| (0..count).map(|v| rows[v * width + m]).collect()).collect();
    let mut header = format!("qspace-maps v1\ndims = {} {} {}\nconfig = {}\n", ds.dims[0], ds.dims[1], ds.dims[2], cfg.hash());
    for (name, map) in MAP_NAMES.iter().zip(&maps) {
        write_f32(&out.join(format!("{name}.f32")), map)?;
        header.push_str(&format!("map = {name}.f32\n"));
    }
    let cls_path = out.join("classification.u8");
    std::fs::write(&cls_path, &codes).map_err(|e| Error::io(&cls_path, e))?;
    header.push_str("classification = classification.u8\n");
    for c in Classification::ALL {
        header.push_str(&format!("code {} = {c}\n", c.code()));
    }
    header.push_str(&format!("code {MASKED_CODE} = masked\n"));
    let hdr = out.join("maps.hdr");
    std::fs::write(&hdr, header).map_err(|e| Error::io(&hdr, e))?;
    Ok(VolumeMaps { dims: ds.dims, maps, classification: codes })
}

/// Statistics of a single sample under a resolved calibration.
pub fn report_sample(sample: &HardiSample, params: &AnalysisParams, level: &LevelCalibration) -> Result<TestReport> {
    let (_, stats) = analyze_sample(sample, params)?;
    let tables: Vec<&NullCalibration> = level.tables.iter().collect();
    Ok(TestReport::new(stats, &level.critical, &tables))
}
