//! Data-generating processes and the Monte Carlo harness.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use rayon::prelude::*;

use crate::bootstrap::{intervals, run_bootstrap, BootstrapOptions, BootstrapScheme};
use crate::data::{ClusterBlock, ClusteredDataset, QuantileLevel, RandomEffects, INTERCEPT};
use crate::error::{Error, Result};
use crate::estimators::{
    fit_canay, fit_marginal, fit_oracle, fit_penalized, fit_twostep, jackknife_adjust, PenaltyKind,
    PenaltySpec, TwoStepFit, TwoStepOptions,
};
use crate::lqmm::{fit_lqmm, LqmmOptions};
use crate::rng::{Purpose, StreamKey};

/// Unit-variance error laws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ErrorDist {
    Gaussian,
    /// Student t with 3 degrees of freedom divided by sqrt(3).
    T3Scaled,
    /// Asymmetric Laplace with location 0, skewness `tau0` and scale `sigma0`.
    Ald {
        tau0: f64,
        sigma0: f64,
    },
}

impl ErrorDist {
    /// The asymmetric Laplace law with unit variance.
    pub fn ald_unit(tau0: f64) -> Result<Self> {
        if !(tau0 > 0.0 && tau0 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ALD skewness must be in (0, 1), got {tau0}"
            )));
        }
        let sigma0 = tau0 * (1.0 - tau0) / (1.0 - 2.0 * tau0 + 2.0 * tau0 * tau0).sqrt();
        Ok(Self::Ald { tau0, sigma0 })
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            Self::Gaussian => std_normal().inverse_cdf(p),
            Self::T3Scaled => {
                statrs::distribution::StudentsT::new(0.0, 1.0, 3.0)
                    .expect("valid t law")
                    .inverse_cdf(p)
                    / 3f64.sqrt()
            }
            Self::Ald { tau0, sigma0 } => {
                if p <= tau0 {
                    sigma0 / (1.0 - tau0) * (p / tau0).ln()
                } else {
                    -sigma0 / tau0 * ((1.0 - p) / (1.0 - tau0)).ln()
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Gaussian => rng.sample(StandardNormal),
            Self::T3Scaled => {
                let t: f64 = StudentT::new(3.0).expect("valid t law").sample(rng);
                t / 3f64.sqrt()
            }
            Self::Ald { .. } => {
                // Inverse CDF; the open interval keeps both logarithms finite.
                let p: f64 = rng.random_range(f64::EPSILON..1.0);
                self.quantile(p)
            }
        }
    }
}

impl fmt::Display for ErrorDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian => write!(f, "gaussian"),
            Self::T3Scaled => write!(f, "t3_scaled"),
            Self::Ald { tau0, sigma0 } => write!(f, "ald({tau0},{sigma0})"),
        }
    }
}

impl FromStr for ErrorDist {
    type Err = Error;

    /// `gaussian`, `t3_scaled`, `ald(tau0)` (unit variance) or `ald(tau0, sigma0)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "gaussian" | "normal" => return Ok(Self::Gaussian),
            "t3_scaled" | "t3" => return Ok(Self::T3Scaled),
            _ => {}
        }
        let inner = s
            .strip_prefix("ald(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::Config(format!("unknown error distribution `{s}`")))?;
        let parts: Vec<f64> = inner
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad ALD parameters `{inner}`")))?;
        match parts[..] {
            [tau0] => Self::ald_unit(tau0).map_err(|e| Error::Config(e.to_string())),
            [tau0, sigma0] if tau0 > 0.0 && tau0 < 1.0 && sigma0 > 0.0 => {
                Ok(Self::Ald { tau0, sigma0 })
            }
            _ => Err(Error::Config(format!("bad ALD parameters `{inner}`"))),
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Estimators the harness can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    Oracle,
    Marginal,
    Canay,
    Lqmm,
    TwoStep,
    /// Bootstrap bias-adjusted two-step.
    Adjusted,
    Jackknife,
    L1,
    L2,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 9] = [
        Self::Oracle,
        Self::Marginal,
        Self::Canay,
        Self::Lqmm,
        Self::TwoStep,
        Self::Adjusted,
        Self::Jackknife,
        Self::L1,
        Self::L2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::Marginal => "marginal",
            Self::Canay => "canay",
            Self::Lqmm => "lqmm",
            Self::TwoStep => "twostep",
            Self::Adjusted => "adj",
            Self::Jackknife => "jackknife",
            Self::L1 => "l1",
            Self::L2 => "l2",
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .or(match s.as_str() {
                "two-step" | "two_step" => Some(Self::TwoStep),
                "adjusted" => Some(Self::Adjusted),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

/// Simulation design with equal cluster sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub n_clusters: usize,
    pub cluster_size: usize,
    pub tau: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub gamma: f64,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    pub error_dist: ErrorDist,
    /// Random-slope variance; `None` for a random intercept only.
    pub sigma_v2: Option<f64>,
    pub reps: usize,
    pub b: usize,
    pub alpha: f64,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Schemes for the adjusted estimator; one report row set per scheme.
    pub schemes: Vec<BootstrapScheme>,
}

impl ScenarioSpec {
    /// The benchmark design: N = 500 clusters of 6, gamma = 0.4, unit variances,
    /// Gaussian errors, tau = 0.1, B = 100, 95% intervals.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            n_clusters: 500,
            cluster_size: 6,
            tau: 0.1,
            beta0: 1.0,
            beta1: 1.0,
            gamma: 0.4,
            sigma_u2: 1.0,
            sigma_e2: 1.0,
            error_dist: ErrorDist::Gaussian,
            sigma_v2: None,
            reps: 200,
            b: 100,
            alpha: 0.05,
            seed,
            estimators: vec![
                EstimatorKind::Lqmm,
                EstimatorKind::TwoStep,
                EstimatorKind::Adjusted,
            ],
            schemes: vec![BootstrapScheme::Rw],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_clusters < 2 {
            return bad(format!("N must be at least 2, got {}", self.n_clusters));
        }
        if self.cluster_size < 1 {
            return bad("cluster size must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must be in (0, 1), got {}", self.tau));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        for (name, v) in [("sigma_u2", self.sigma_u2), ("sigma_e2", self.sigma_e2)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        if let Some(v) = self.sigma_v2 {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("sigma_v2 must be > 0, got {v}"));
            }
        }
        if !(self.beta0.is_finite() && self.beta1.is_finite()) {
            return bad("mean-model parameters must be finite".into());
        }
        if self.reps < 1 {
            return bad("reps must be at least 1".into());
        }
        if self.b < 2 {
            return bad(format!("B must be at least 2, got {}", self.b));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must be in (0, 1), got {}", self.alpha));
        }
        if self.estimators.contains(&EstimatorKind::Adjusted) && self.schemes.is_empty() {
            return bad("the adjusted estimator needs at least one bootstrap scheme".into());
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for key `{key}`")))
        }
        let v = value.trim();
        match key.trim() {
            "N" | "n_clusters" => self.n_clusters = num(key, v)?,
            "n_i" | "cluster_size" => self.cluster_size = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "beta0" => self.beta0 = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "sigma_u2" => self.sigma_u2 = num(key, v)?,
            "sigma_e2" => self.sigma_e2 = num(key, v)?,
            "error_dist" => self.error_dist = v.parse()?,
            "sigma_v2" | "random_slope" => {
                self.sigma_v2 = match v {
                    "" | "none" => None,
                    _ => Some(num(key, v)?),
                }
            }
            "reps" => self.reps = num(key, v)?,
            "B" | "b" => self.b = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "estimators" => {
                self.estimators = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "scheme" | "schemes" => {
                self.schemes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            other => return Err(Error::Config(format!("unknown scenario key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file (`#` starts a comment). Keys not
    /// present keep the benchmark defaults; `seed` is required.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(parse_key_values(text)?)
    }

    /// Settings applied in order over the benchmark defaults; later keys win.
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut spec = Self::benchmark(0);
        let mut seen_seed = false;
        for (k, v) in pairs {
            seen_seed |= k == "seed";
            spec.set(&k, &v)?;
        }
        if !seen_seed {
            return Err(Error::Config(
                "scenario is missing the required key `seed`".into(),
            ));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn tau_level(&self) -> QuantileLevel {
        QuantileLevel::new(self.tau).expect("validated tau")
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// True conditional-quantile coefficients (intercept, slope).
pub fn true_params(spec: &ScenarioSpec) -> (f64, f64) {
    let q = spec.error_dist.quantile(spec.tau);
    let se = spec.sigma_e2.sqrt();
    (spec.beta0 + se * q, spec.beta1 + spec.gamma * se * q)
}

/// tau-quantile of Y given x with the random intercept integrated out (Gaussian model).
pub fn marginal_quantile(spec: &ScenarioSpec, x: f64, tau: QuantileLevel) -> Result<f64> {
    if spec.error_dist != ErrorDist::Gaussian {
        return Err(Error::Unsupported(
            "marginal quantile is available in closed form for Gaussian errors only".into(),
        ));
    }
    if spec.sigma_v2.is_some() {
        return Err(Error::Unsupported(
            "marginal quantile assumes a random intercept only".into(),
        ));
    }
    let h = 1.0 + spec.gamma * x;
    let sd = (spec.sigma_u2 + h * h * spec.sigma_e2).sqrt();
    Ok(spec.beta0 + spec.beta1 * x + std_normal().inverse_cdf(tau.value()) * sd)
}

/// A simulated dataset with its true effects (intercepts, and slopes when present).
#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub data: ClusteredDataset,
    /// N x q true effects, columns aligned with Z.
    pub effects: RandomEffects,
}

pub fn gen_dataset<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<SimulatedData> {
    let n = spec.cluster_size;
    let su = spec.sigma_u2.sqrt();
    let se = spec.sigma_e2.sqrt();
    let sv = spec.sigma_v2.map(f64::sqrt);
    let q = if sv.is_some() { 2 } else { 1 };
    let width = spec.n_clusters.saturating_sub(1).to_string().len();
    let mut clusters = Vec::with_capacity(spec.n_clusters);
    let mut effects = DMatrix::zeros(spec.n_clusters, q);
    for i in 0..spec.n_clusters {
        let u: f64 = su * rng.sample::<f64, _>(StandardNormal);
        effects[(i, 0)] = u;
        let v = match sv {
            Some(s) => {
                let v = s * rng.sample::<f64, _>(StandardNormal);
                effects[(i, 1)] = v;
                v
            }
            None => 0.0,
        };
        let mut y = Vec::with_capacity(n);
        let mut x = DMatrix::zeros(n, 2);
        for j in 0..n {
            let xv: f64 = rng.random();
            let e = se * spec.error_dist.sample(rng);
            x[(j, 0)] = 1.0;
            x[(j, 1)] = xv;
            y.push(spec.beta0 + u + (spec.beta1 + v) * xv + (1.0 + spec.gamma * xv) * e);
        }
        let z = if q == 2 {
            x.clone()
        } else {
            DMatrix::from_element(n, 1, 1.0)
        };
        clusters.push(ClusterBlock {
            id: format!("{i:0width$}"),
            y,
            x,
            z,
        });
    }
    let z_index = if q == 2 { vec![0, 1] } else { vec![0] };
    let data = ClusteredDataset::new(clusters, vec![INTERCEPT.into(), "x".into()], z_index)?
        .with_column_names("y", "cluster");
    Ok(SimulatedData {
        data,
        effects: RandomEffects(effects),
    })
}

/// Interval constructions tracked by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum CiKind {
    /// Estimate -/+ z * sandwich standard error.
    Wald,
    /// Basic bootstrap interval.
    Basic,
    /// Bias-adjusted estimate -/+ z * adjusted standard error.
    SeAdjusted,
}

impl CiKind {
    pub const ALL: [CiKind; 3] = [Self::Wald, Self::Basic, Self::SeAdjusted];

    pub fn name(self) -> &'static str {
        match self {
            Self::Wald => "wald",
            Self::Basic => "basic",
            Self::SeAdjusted => "se_adj",
        }
    }
}

/// One estimator's output on one dataset.
#[derive(Clone, Debug)]
struct Outcome {
    estimate: Vec<f64>,
    intervals: Vec<(CiKind, Vec<(f64, f64)>)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CiSummary {
    pub kind: CiKind,
    /// Replications that produced this interval.
    pub n: usize,
    pub coverage: f64,
    /// sqrt(c (1 - c) / n).
    pub mcse: f64,
    pub length: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub estimator: String,
    pub component: String,
    pub reps_used: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// SD / sqrt(reps_used).
    pub mcse_bias: f64,
    pub ci: Vec<CiSummary>,
}

impl ReportRow {
    pub fn ci(&self, kind: CiKind) -> Option<&CiSummary> {
        self.ci.iter().find(|c| c.kind == kind)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Exclusion {
    pub rep: usize,
    pub estimator: String,
    pub message: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimReport {
    pub spec: ScenarioSpec,
    pub truth: Vec<f64>,
    pub rows: Vec<ReportRow>,
    pub exclusions: Vec<Exclusion>,
    /// Summed wall-clock seconds per estimator; not part of rendered reports.
    pub seconds: Vec<(String, f64)>,
}

impl SimReport {
    pub fn row(&self, estimator: &str, component: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .filter(|r| r.estimator == estimator)
            .nth(component)
    }
}

/// Report label of an estimator (the adjusted one carries its scheme).
fn label(kind: EstimatorKind, scheme: Option<BootstrapScheme>) -> String {
    match scheme {
        Some(s) => format!("{}({})", kind.name(), s),
        None => kind.name().to_string(),
    }
}

fn wald(beta: &[f64], se: &[f64], z: f64) -> Vec<(f64, f64)> {
    beta.iter()
        .zip(se)
        .map(|(b, s)| (b - z * s, b + z * s))
        .collect()
}

struct RepResult {
    /// Aligned with the harness labels.
    outcomes: Vec<std::result::Result<Outcome, String>>,
    seconds: Vec<f64>,
}

fn run_replication(
    spec: &ScenarioSpec,
    labels: &[(EstimatorKind, Option<BootstrapScheme>)],
    rep: usize,
) -> Result<RepResult> {
    let tau = spec.tau_level();
    let key = StreamKey::new(spec.seed).child(Purpose::Replication, rep as u64);
    let sim = gen_dataset(spec, &mut key.child(Purpose::DataGeneration, 0).rng())?;
    let data = &sim.data;
    let z = normal_quantile(1.0 - spec.alpha / 2.0);

    let mut twostep: Option<std::result::Result<TwoStepFit, String>> = None;
    let mut outcomes = Vec::with_capacity(labels.len());
    let mut seconds = Vec::with_capacity(labels.len());
    for (slot, &(kind, scheme)) in labels.iter().enumerate() {
        let start = Instant::now();
        let needs_twostep = matches!(kind, EstimatorKind::TwoStep | EstimatorKind::Adjusted);
        if needs_twostep && twostep.is_none() {
            twostep =
                Some(fit_twostep(data, tau, &TwoStepOptions::default()).map_err(|e| e.to_string()));
        }
        let out: std::result::Result<Outcome, String> = match kind {
            EstimatorKind::Oracle => fit_oracle(data, &sim.effects, tau)
                .map(|f| Outcome {
                    intervals: vec![(CiKind::Wald, wald(&f.beta, &f.se, z))],
                    estimate: f.beta.0,
                })
                .map_err(|e| e.to_string()),
            EstimatorKind::Marginal => fit_marginal(data, tau)
                .map(|f| Outcome {
                    intervals: vec![(CiKind::Wald, wald(&f.beta, &f.se, z))],
                    estimate: f.beta.0,
                })
                .map_err(|e| e.to_string()),
            EstimatorKind::Canay => fit_canay(data, tau)
                .map(|f| Outcome {
                    intervals: vec![(CiKind::Wald, wald(&f.beta, &f.se, z))],
                    estimate: f.beta.0,
                })
                .map_err(|e| e.to_string()),
            EstimatorKind::Lqmm => fit_lqmm(data, tau, &LqmmOptions::default())
                .map(|f| Outcome {
                    estimate: f.beta.0,
                    intervals: Vec::new(),
                })
                .map_err(|e| e.to_string()),
            EstimatorKind::TwoStep => match twostep.as_ref().expect("fitted above") {
                Ok(f) => Ok(Outcome {
                    estimate: f.beta.to_vec(),
                    intervals: vec![(CiKind::Wald, wald(&f.beta, &f.se_obs, z))],
                }),
                Err(e) => Err(e.clone()),
            },
            EstimatorKind::Adjusted => match twostep.as_ref().expect("fitted above") {
                Ok(f) => {
                    let scheme = scheme.expect("adjusted rows carry a scheme");
                    let bkey = key.child(Purpose::Bootstrap, slot as u64);
                    run_bootstrap(
                        data,
                        tau,
                        spec.b,
                        scheme,
                        f,
                        &BootstrapOptions::default(),
                        bkey,
                    )
                    .and_then(|run| intervals(&f.beta, &f.se_obs, &run, spec.alpha))
                    .map(|set| {
                        let mut iv = vec![(CiKind::Basic, set.basic)];
                        if let Some(s) = set.se_adjusted {
                            iv.push((CiKind::SeAdjusted, s));
                        }
                        Outcome {
                            estimate: set.beta_adj.0,
                            intervals: iv,
                        }
                    })
                    .map_err(|e| e.to_string())
                }
                Err(e) => Err(e.clone()),
            },
            EstimatorKind::Jackknife => {
                jackknife_adjust(data, key.child(Purpose::Jackknife, 0), |d| {
                    fit_lqmm(d, tau, &LqmmOptions::default()).map(|f| f.beta)
                })
                .map(|b| Outcome {
                    estimate: b.0,
                    intervals: Vec::new(),
                })
                .map_err(|e| e.to_string())
            }
            EstimatorKind::L1 | EstimatorKind::L2 => {
                let pk = if kind == EstimatorKind::L1 {
                    PenaltyKind::L1
                } else {
                    PenaltyKind::L2
                };
                fit_penalized(data, tau, &PenaltySpec::cv(pk))
                    .map(|f| Outcome {
                        estimate: f.beta.0,
                        intervals: Vec::new(),
                    })
                    .map_err(|e| e.to_string())
            }
        };
        outcomes.push(out);
        seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(RepResult { outcomes, seconds })
}

fn normal_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Runs `spec.reps` replications (in parallel on the current rayon pool)
/// and aggregates bias, SD, RMSE, coverage and interval length per
/// estimator and component. Failed fits are excluded and listed.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<SimReport> {
    spec.validate()?;
    let (t0, t1) = true_params(spec);
    let truth = vec![t0, t1];
    let mut labels = Vec::new();
    for &kind in &spec.estimators {
        if kind == EstimatorKind::Adjusted {
            labels.extend(spec.schemes.iter().map(|&s| (kind, Some(s))));
        } else {
            labels.push((kind, None));
        }
    }
    let reps: Vec<RepResult> = (0..spec.reps)
        .into_par_iter()
        .map(|r| run_replication(spec, &labels, r))
        .collect::<Result<_>>()?;

    let components = [INTERCEPT.to_string(), "x".to_string()];
    let mut rows = Vec::new();
    let mut exclusions = Vec::new();
    let mut seconds = Vec::new();
    for (slot, &(kind, scheme)) in labels.iter().enumerate() {
        let name = label(kind, scheme);
        let mut ok: Vec<&Outcome> = Vec::new();
        for (r, rep) in reps.iter().enumerate() {
            match &rep.outcomes[slot] {
                Ok(o) => ok.push(o),
                Err(message) => exclusions.push(Exclusion {
                    rep: r,
                    estimator: name.clone(),
                    message: message.clone(),
                }),
            }
        }
        seconds.push((name.clone(), reps.iter().map(|r| r.seconds[slot]).sum()));
        for (k, component) in components.iter().enumerate() {
            let est: Vec<f64> = ok.iter().map(|o| o.estimate[k]).collect();
            let ci = CiKind::ALL
                .iter()
                .filter_map(|&kind| {
                    let hits: Vec<(f64, f64)> = ok
                        .iter()
                        .filter_map(|o| {
                            o.intervals
                                .iter()
                                .find(|(c, _)| *c == kind)
                                .map(|(_, v)| v[k])
                        })
                        .collect();
                    (!hits.is_empty()).then(|| summarize_ci(kind, &hits, truth[k]))
                })
                .collect();
            rows.push(summarize(&name, component, &est, truth[k], ci));
        }
    }
    Ok(SimReport {
        spec: spec.clone(),
        truth,
        rows,
        exclusions,
        seconds,
    })
}

fn summarize(
    estimator: &str,
    component: &str,
    est: &[f64],
    truth: f64,
    ci: Vec<CiSummary>,
) -> ReportRow {
    let n = est.len();
    let nf = n as f64;
    let mean = est.iter().sum::<f64>() / nf;
    let sd = if n > 1 {
        (est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    let rmse = (est.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / nf).sqrt();
    ReportRow {
        estimator: estimator.to_string(),
        component: component.to_string(),
        reps_used: n,
        truth,
        mean,
        bias: mean - truth,
        sd,
        rmse,
        mcse_bias: sd / nf.sqrt(),
        ci,
    }
}

fn summarize_ci(kind: CiKind, intervals: &[(f64, f64)], truth: f64) -> CiSummary {
    let n = intervals.len() as f64;
    let coverage = intervals
        .iter()
        .filter(|(lo, hi)| *lo <= truth && truth <= *hi)
        .count() as f64
        / n;
    CiSummary {
        kind,
        n: intervals.len(),
        coverage,
        mcse: (coverage * (1.0 - coverage) / n).sqrt(),
        length: intervals.iter().map(|(lo, hi)| hi - lo).sum::<f64>() / n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
}

/// Formats with 4 significant digits; non-finite values render as `NA`.
pub fn sig4(x: f64) -> String {
    if !x.is_finite() {
        return "NA".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-5..=9).contains(&mag) {
        return format!("{x:.3e}");
    }
    let decimals = (3 - mag).max(0) as usize;
    let scale = 10f64.powi(3 - mag);
    let rounded = (x * scale).round() / scale;
    // Rounding can carry into a new digit (9.9996 -> 10.00).
    let mag2 = if rounded == 0.0 {
        mag
    } else {
        rounded.abs().log10().floor() as i32
    };
    let decimals = if mag2 > mag {
        decimals.saturating_sub(1)
    } else {
        decimals
    };
    format!("{rounded:.decimals$}")
}

const BASE_COLUMNS: [&str; 9] = [
    "estimator",
    "component",
    "reps_used",
    "truth",
    "bias",
    "sd",
    "rmse",
    "mcse_bias",
    "mean",
];

fn header() -> Vec<String> {
    let mut h: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for kind in CiKind::ALL {
        for m in ["coverage", "mcse", "length"] {
            h.push(format!("{m}_{}", kind.name()));
        }
    }
    h
}

fn cells(row: &ReportRow) -> Vec<String> {
    let mut c = vec![
        row.estimator.clone(),
        row.component.clone(),
        row.reps_used.to_string(),
        sig4(row.truth),
        sig4(row.bias),
        sig4(row.sd),
        sig4(row.rmse),
        sig4(row.mcse_bias),
        sig4(row.mean),
    ];
    for kind in CiKind::ALL {
        match row.ci(kind) {
            Some(s) => c.extend([sig4(s.coverage), sig4(s.mcse), sig4(s.length)]),
            None => c.extend(["".to_string(), "".to_string(), "".to_string()]),
        }
    }
    c
}

/// Renders the report rows (timings excluded, so output is reproducible).
pub fn report_render(report: &SimReport, format: ReportFormat) -> String {
    let header = header();
    let body: Vec<Vec<String>> = report.rows.iter().map(cells).collect();
    match format {
        ReportFormat::Csv => {
            let mut out = header.join(",");
            out.push('\n');
            for row in &body {
                let quoted: Vec<String> = row
                    .iter()
                    .map(|c| {
                        if c.contains(',') || c.contains('"') {
                            format!("\"{}\"", c.replace('"', "\"\""))
                        } else {
                            c.clone()
                        }
                    })
                    .collect();
                out.push_str(&quoted.join(","));
                out.push('\n');
            }
            out
        }
        ReportFormat::Text => {
            let mut widths: Vec<usize> = header.iter().map(String::len).collect();
            for row in &body {
                for (w, c) in widths.iter_mut().zip(row) {
                    *w = (*w).max(c.len());
                }
            }
            let mut out = String::new();
            let line = |cells: &[String], out: &mut String| {
                let parts: Vec<String> = cells
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(k, (c, w))| {
                        if k < 2 {
                            format!("{c:<w$}")
                        } else {
                            format!("{c:>w$}")
                        }
                    })
                    .collect();
                let _ = writeln!(out, "{}", parts.join("  ").trim_end());
            };
            line(&header, &mut out);
            for row in &body {
                line(row, &mut out);
            }
            if !report.exclusions.is_empty() {
                let _ = writeln!(out, "\nexcluded fits: {}", report.exclusions.len());
                for e in &report.exclusions {
                    let _ = writeln!(out, "  rep {} {}: {}", e.rep, e.estimator, e.message);
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ScenarioSpec {
        ScenarioSpec::benchmark(1)
    }

    #[test]
    fn benchmark_truth() {
        // Published to three decimals (truncated): -0.2816 and 0.4874.
        let (b0, b1) = true_params(&spec());
        assert!((b0 - (-0.281)).abs() < 1e-3, "{b0}");
        assert!((b1 - 0.487).abs() < 1e-3, "{b1}");
        let mut s = spec();
        s.tau = 0.5;
        let (b0, b1) = true_params(&s);
        assert!((b0 - 1.0).abs() < 1e-15 && (b1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ald_truth_is_exact() {
        let mut s = spec();
        s.gamma = 0.0;
        s.error_dist = ErrorDist::ald_unit(0.1).unwrap();
        assert_eq!(true_params(&s), (1.0, 1.0));
        if let ErrorDist::Ald { sigma0, .. } = s.error_dist {
            assert!((sigma0 - 0.09939).abs() < 1e-5);
        }
    }

    #[test]
    fn marginal_quantile_reductions() {
        let mut s = spec();
        s.tau = 0.5;
        assert_eq!(marginal_quantile(&s, 0.3, s.tau_level()).unwrap(), 1.3);
        s.error_dist = ErrorDist::T3Scaled;
        assert!(matches!(
            marginal_quantile(&s, 0.3, s.tau_level()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn error_laws_have_unit_variance_and_right_quantiles() {
        let mut rng = StreamKey::new(5).rng();
        for dist in [
            ErrorDist::Gaussian,
            ErrorDist::T3Scaled,
            ErrorDist::ald_unit(0.1).unwrap(),
        ] {
            let n = 400_000;
            let mut v: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
            v.sort_by(f64::total_cmp);
            for p in [0.1, 0.5, 0.9] {
                let emp = v[(p * n as f64) as usize];
                let q = dist.quantile(p);
                // Density at the quantile from a central difference of the quantile function.
                let dens = 2e-4 / (dist.quantile(p + 1e-4) - dist.quantile(p - 1e-4));
                let se = (p * (1.0 - p) / n as f64).sqrt() / dens;
                assert!((emp - q).abs() < 4.0 * se, "{dist} p={p}: {emp} vs {q}");
            }
            if dist != ErrorDist::T3Scaled {
                let mean = v.iter().sum::<f64>() / n as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                assert!((var - 1.0).abs() < 0.02, "{dist}: {var}");
            }
        }
    }

    #[test]
    fn scenario_file_parsing() {
        let s = ScenarioSpec::parse("seed = 9\nN = 50 # clusters\nerror_dist = ald(0.1)\nestimators = lqmm, twostep\nscheme = RW,CW\n").unwrap();
        assert_eq!(s.n_clusters, 50);
        assert_eq!(s.seed, 9);
        assert_eq!(
            s.estimators,
            vec![EstimatorKind::Lqmm, EstimatorKind::TwoStep]
        );
        assert_eq!(s.schemes, vec![BootstrapScheme::Rw, BootstrapScheme::Cw]);
        let err = ScenarioSpec::parse("seed = 1\nbogus = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(ScenarioSpec::parse("N = 4\n").is_err());
        assert!(ScenarioSpec::parse("seed = 1\ngamma = -1\n").is_err());
    }

    #[test]
    fn generated_design() {
        let mut s = spec();
        s.n_clusters = 12;
        let sim = gen_dataset(&s, &mut StreamKey::new(2).rng()).unwrap();
        assert_eq!(sim.data.n_clusters(), 12);
        assert_eq!(sim.data.n_obs(), 72);
        assert_eq!(sim.data.clusters()[3].id, "03");
        assert!(sim.data.clusters().iter().all(|c| c
            .x
            .column(1)
            .iter()
            .all(|&x| (0.0..1.0).contains(&x))));
        s.sigma_v2 = Some(1.0);
        let sim = gen_dataset(&s, &mut StreamKey::new(2).rng()).unwrap();
        assert_eq!(sim.data.q(), 2);
        assert_eq!(sim.effects.q(), 2);
    }

    #[test]
    fn sig4_formatting() {
        assert_eq!(sig4(0.123456), "0.1235");
        assert_eq!(sig4(-0.0281), "-0.02810");
        assert_eq!(sig4(12.3456), "12.35");
        assert_eq!(sig4(9.99996), "10.00");
        assert_eq!(sig4(1234.5), "1235");
        assert_eq!(sig4(0.0), "0");
        assert_eq!(sig4(f64::NAN), "NA");
    }

    #[test]
    fn empty_and_single_row_reports() {
        let mut s = spec();
        s.estimators.clear();
        let empty = SimReport {
            spec: s,
            truth: vec![0.0, 0.0],
            rows: Vec::new(),
            exclusions: Vec::new(),
            seconds: Vec::new(),
        };
        let csv = report_render(&empty, ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 1);
        let row = summarize("oracle", "x", &[1.0, 2.0, 4.0], 2.0, Vec::new());
        let one = SimReport {
            rows: vec![row],
            ..empty
        };
        assert_eq!(report_render(&one, ReportFormat::Csv).lines().count(), 2);
    }

    #[test]
    fn rmse_identity_on_summaries() {
        let est = [0.3, -0.1, 0.25, 0.9, 0.4];
        let row = summarize("e", "c", &est, 0.2, Vec::new());
        let n = est.len() as f64;
        let lhs = row.rmse.powi(2);
        let rhs = row.bias.powi(2) + row.sd.powi(2) * (n - 1.0) / n;
        assert!((lhs - rhs).abs() <= 1e-12 * lhs);
    }

    #[test]
    fn small_scenario_is_deterministic() {
        let mut s = spec();
        s.n_clusters = 30;
        s.reps = 3;
        s.b = 20;
        s.estimators = vec![
            EstimatorKind::Oracle,
            EstimatorKind::Marginal,
            EstimatorKind::TwoStep,
            EstimatorKind::Adjusted,
        ];
        let a = report_render(&run_scenario(&s).unwrap(), ReportFormat::Csv);
        let b = report_render(&run_scenario(&s).unwrap(), ReportFormat::Csv);
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 1 + 2 * 4);
    }
}
