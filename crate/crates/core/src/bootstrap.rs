//! Resampling schemes, bias adjustment and bootstrap intervals.
//!
//! Replicate `b` draws from its own stream `key.child(Bootstrap, b)`, so a
//! run is reproducible regardless of how replicates are scheduled.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{ClusteredDataset, FixedEffects, QuantileLevel, RandomEffects};
use crate::error::{Error, Result};
use crate::estimators::{fit_twostep, TwoStepFit, TwoStepOptions};
use crate::lqmm::LqmmOptions;
use crate::qr::solve_qr;
use crate::rng::{Purpose, StreamKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BootstrapScheme {
    /// Wild bootstrap of the residuals, each coupled to its own observation,
    /// plus resampled predicted effects.
    Rw,
    /// Pooled residuals and predicted effects, resampled independently.
    Rrr,
    /// Whole clusters resampled with replacement.
    Rc,
    /// Wild bootstrap with one weight per cluster on level-zero residuals.
    Cw,
}

impl BootstrapScheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rw => "RW",
            Self::Rrr => "RRR",
            Self::Rc => "RC",
            Self::Cw => "CW",
        }
    }

    /// Whether the scheme produces oracle replicates (known bootstrap effects).
    pub fn has_oracle(self) -> bool {
        matches!(self, Self::Rw | Self::Rrr)
    }
}

impl fmt::Display for BootstrapScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BootstrapScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RW" => Ok(Self::Rw),
            "RRR" => Ok(Self::Rrr),
            "RC" => Ok(Self::Rc),
            "CW" => Ok(Self::Cw),
            other => Err(Error::Config(format!("unknown bootstrap scheme `{other}`"))),
        }
    }
}

/// Two-point weights: 2(1 - tau) with probability 1 - tau, -2 tau with
/// probability tau. Their tau-quantile is 0.
pub fn draw_weights<R: Rng + ?Sized>(tau: QuantileLevel, count: usize, rng: &mut R) -> Vec<f64> {
    let t = tau.value();
    (0..count)
        .map(|_| {
            if rng.random::<f64>() < t {
                -2.0 * t
            } else {
                2.0 * (1.0 - t)
            }
        })
        .collect()
}

/// N rows drawn with replacement from the predicted effects.
fn resample_effects<R: Rng + ?Sized>(blp: &RandomEffects, rng: &mut R) -> RandomEffects {
    let n = blp.n_clusters();
    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    RandomEffects(blp.0.select_rows(picks.iter()))
}

fn fitted(
    data: &ClusteredDataset,
    beta: &[f64],
    effects: Option<&RandomEffects>,
) -> Result<Vec<f64>> {
    let x = data.x_stacked();
    let mut out: Vec<f64> = (0..x.nrows())
        .map(|i| (0..x.ncols()).map(|k| x[(i, k)] * beta[k]).sum())
        .collect();
    if let Some(u) = effects {
        for (o, z) in out.iter_mut().zip(data.z_offset(u)?) {
            *o += z;
        }
    }
    Ok(out)
}

fn check_fit(fit: &TwoStepFit, data: &ClusteredDataset) -> Result<()> {
    if fit.residuals.len() != data.n_obs()
        || fit.blp.n_clusters() != data.n_clusters()
        || fit.beta.len() != data.p()
    {
        return Err(Error::Dimension(
            "two-step fit does not belong to this dataset".into(),
        ));
    }
    Ok(())
}

/// Y* = x'b + z'u* + w |e| with one weight per observation. Draw order:
/// N effect picks, then one weight per stacked row.
pub fn gen_rw<R: Rng + ?Sized>(
    fit: &TwoStepFit,
    data: &ClusteredDataset,
    tau: QuantileLevel,
    rng: &mut R,
) -> Result<(Vec<f64>, RandomEffects)> {
    check_fit(fit, data)?;
    let u_star = resample_effects(&fit.blp, rng);
    let w = draw_weights(tau, data.n_obs(), rng);
    let mut y = fitted(data, &fit.beta, Some(&u_star))?;
    for ((yi, wi), e) in y.iter_mut().zip(&w).zip(&fit.residuals) {
        *yi += wi * e.abs();
    }
    Ok((y, u_star))
}

/// Y* = x'b + z'u* + e*, with e* drawn with replacement from the pooled residuals.
pub fn gen_rrr<R: Rng + ?Sized>(
    fit: &TwoStepFit,
    data: &ClusteredDataset,
    rng: &mut R,
) -> Result<(Vec<f64>, RandomEffects)> {
    check_fit(fit, data)?;
    let u_star = resample_effects(&fit.blp, rng);
    let n = fit.residuals.len();
    let mut y = fitted(data, &fit.beta, Some(&u_star))?;
    for yi in y.iter_mut() {
        *yi += fit.residuals[rng.random_range(0..n)];
    }
    Ok((y, u_star))
}

/// N whole clusters drawn with replacement, relabelled 1..=N.
pub fn gen_rc<R: Rng + ?Sized>(data: &ClusteredDataset, rng: &mut R) -> Result<ClusteredDataset> {
    let n = data.n_clusters();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "cluster resampling needs at least 2 clusters, got {n}"
        )));
    }
    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    data.resample_clusters(&picks)
}

/// Y* = x'b + w_i |Y - x'b| with one weight per cluster.
pub fn gen_cw<R: Rng + ?Sized>(
    beta: &[f64],
    data: &ClusteredDataset,
    tau: QuantileLevel,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if beta.len() != data.p() {
        return Err(Error::Dimension(format!(
            "{} coefficients for p = {}",
            beta.len(),
            data.p()
        )));
    }
    let w = draw_weights(tau, data.n_clusters(), rng);
    let fit = fitted(data, beta, None)?;
    let y = data.y_stacked();
    let mut out = Vec::with_capacity(y.len());
    let mut row = 0;
    for (c, wi) in data.clusters().iter().zip(&w) {
        for _ in 0..c.len() {
            out.push(fit[row] + wi * (y[row] - fit[row]).abs());
            row += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BootstrapOptions {
    /// Working-model settings for the refits (quadrature size is reused).
    pub lqmm: LqmmOptions,
    /// Seed each refit's optimizer at the original fit's estimates.
    pub warm_start: bool,
    /// Largest tolerated failure fraction.
    pub max_failure_rate: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            lqmm: LqmmOptions::default(),
            warm_start: true,
            max_failure_rate: 0.2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BootstrapRun {
    pub scheme: BootstrapScheme,
    /// Requested replicates.
    pub b: usize,
    /// Two-step estimates of the successful replicates, in replicate order.
    pub beta_star_twostep: Vec<Vec<f64>>,
    /// Oracle estimates (RW and RRR only), aligned with `beta_star_twostep`.
    pub beta_star_oracle: Option<Vec<Vec<f64>>>,
    pub mean_twostep: Vec<f64>,
    pub sd_twostep: Vec<f64>,
    pub sd_oracle: Option<Vec<f64>>,
    /// Indices of replicates whose refit failed.
    pub failed: Vec<usize>,
}

impl BootstrapRun {
    pub fn n_failed(&self) -> usize {
        self.failed.len()
    }

    pub fn n_used(&self) -> usize {
        self.beta_star_twostep.len()
    }

    fn from_replicates(
        scheme: BootstrapScheme,
        b: usize,
        reps: Vec<Result<Replicate>>,
    ) -> Self {
        let mut twostep = Vec::new();
        let mut oracle = Vec::new();
        let mut failed = Vec::new();
        for (k, r) in reps.into_iter().enumerate() {
            match r {
                Ok((t, o)) => {
                    twostep.push(t);
                    if let Some(o) = o {
                        oracle.push(o);
                    }
                }
                Err(e) => {
                    log::debug!("bootstrap replicate {k} failed: {e}");
                    failed.push(k);
                }
            }
        }
        let oracle = scheme.has_oracle().then_some(oracle);
        Self {
            scheme,
            b,
            mean_twostep: column_means(&twostep),
            sd_twostep: column_sds(&twostep),
            sd_oracle: oracle.as_deref().map(column_sds),
            beta_star_twostep: twostep,
            beta_star_oracle: oracle,
            failed,
        }
    }
}

impl BootstrapRun {
    /// The run for linear combinations `weights[m] . beta` of the components.
    pub fn linear_map(&self, weights: &[Vec<f64>]) -> BootstrapRun {
        let map = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    weights
                        .iter()
                        .map(|w| w.iter().zip(r).map(|(a, b)| a * b).sum())
                        .collect()
                })
                .collect()
        };
        let twostep = map(&self.beta_star_twostep);
        let oracle = self.beta_star_oracle.as_deref().map(map);
        BootstrapRun {
            scheme: self.scheme,
            b: self.b,
            mean_twostep: column_means(&twostep),
            sd_twostep: column_sds(&twostep),
            sd_oracle: oracle.as_deref().map(column_sds),
            beta_star_twostep: twostep,
            beta_star_oracle: oracle,
            failed: self.failed.clone(),
        }
    }
}

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let n = rows.len() as f64;
    (0..first.len())
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
        .collect()
}

/// Sample standard deviations (divisor n - 1); NaN with fewer than two rows.
fn column_sds(rows: &[Vec<f64>]) -> Vec<f64> {
    let means = column_means(rows);
    let n = rows.len() as f64;
    means
        .iter()
        .enumerate()
        .map(|(k, m)| (rows.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
        .collect()
}

/// Two-step estimate and, for RW and RRR, the oracle estimate.
type Replicate = (Vec<f64>, Option<Vec<f64>>);

/// Draws B bootstrap samples and refits the two-step estimator on each.
/// RW, RRR and CW perturb `fit`; RC resamples the raw clusters (and uses
/// `fit` only as a warm start). Replicates run on the current rayon pool.
pub fn run_bootstrap(
    data: &ClusteredDataset,
    tau: QuantileLevel,
    b: usize,
    scheme: BootstrapScheme,
    fit: &TwoStepFit,
    opts: &BootstrapOptions,
    key: StreamKey,
) -> Result<BootstrapRun> {
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 bootstrap replicates, got {b}"
        )));
    }
    if data.n_clusters() < 2 {
        return Err(Error::InvalidArgument(
            "bootstrap needs at least 2 clusters".into(),
        ));
    }
    check_fit(fit, data)?;
    let (data, fit) = &canonical_inputs(data, fit)?;
    let mut lqmm = opts.lqmm.clone();
    lqmm.nk = fit.lqmm.nk;
    if opts.warm_start {
        lqmm.start = Some(fit.lqmm.start());
    }
    let refit = TwoStepOptions {
        lqmm,
        standard_errors: false,
    };
    let x = data.x_stacked();

    let replicate = |k: usize| -> Result<Replicate> {
        let mut rng = key.child(Purpose::Bootstrap, k as u64).rng();
        let (sample, u_star) = match scheme {
            BootstrapScheme::Rw => {
                let (y, u) = gen_rw(fit, data, tau, &mut rng)?;
                (data.with_responses(&y)?, Some(u))
            }
            BootstrapScheme::Rrr => {
                let (y, u) = gen_rrr(fit, data, &mut rng)?;
                (data.with_responses(&y)?, Some(u))
            }
            BootstrapScheme::Cw => (
                data.with_responses(&gen_cw(&fit.beta, data, tau, &mut rng)?)?,
                None,
            ),
            BootstrapScheme::Rc => (gen_rc(data, &mut rng)?, None),
        };
        let oracle = match &u_star {
            Some(u) => {
                Some(solve_qr(&sample.y_stacked(), &x, tau, Some(&sample.z_offset(u)?))?.beta)
            }
            None => None,
        };
        let two = fit_twostep(&sample, tau, &refit)?;
        if !two.lqmm.converged {
            return Err(Error::Solver {
                iterations: two.lqmm.n_evals,
                gap: f64::NAN,
            });
        }
        Ok((two.beta.into_inner(), oracle))
    };

    let reps: Vec<_> = (0..b).into_par_iter().map(replicate).collect();
    let run = BootstrapRun::from_replicates(scheme, b, reps);
    let failed = run.n_failed();
    if failed as f64 > opts.max_failure_rate * b as f64 || run.n_used() < 2 {
        return Err(Error::UnreliableBootstrap {
            failed,
            total: b,
            partial: Box::new(run),
        });
    }
    if failed > 0 {
        log::warn!("{failed} of {b} bootstrap replicates failed and were excluded");
    }
    Ok(run)
}

/// Dataset and fit with clusters sorted by id, so draws do not depend on
/// the input cluster order.
fn canonical_inputs(
    data: &ClusteredDataset,
    fit: &TwoStepFit,
) -> Result<(ClusteredDataset, TwoStepFit)> {
    let order = data.canonical_order();
    let mut starts = Vec::with_capacity(order.len());
    let mut acc = 0;
    for c in data.clusters() {
        starts.push(acc);
        acc += c.len();
    }
    let residuals = order
        .iter()
        .flat_map(|&i| {
            fit.residuals[starts[i]..starts[i] + data.clusters()[i].len()]
                .iter()
                .copied()
        })
        .collect();
    let rows = |u: &RandomEffects| RandomEffects(u.0.select_rows(order.iter()));
    let mut out = fit.clone();
    out.residuals = residuals;
    out.blp = rows(&fit.blp);
    out.lqmm.blp = rows(&fit.lqmm.blp);
    out.lqmm.blp_raw = rows(&fit.lqmm.blp_raw);
    Ok((data.permuted(&order)?, out))
}

/// 2 b - mean(b*).
pub fn bias_adjust(beta: &[f64], run: &BootstrapRun) -> Result<FixedEffects> {
    if run.mean_twostep.len() != beta.len() {
        return Err(Error::Dimension(
            "bootstrap run and estimate differ in length".into(),
        ));
    }
    Ok(FixedEffects(
        beta.iter()
            .zip(&run.mean_twostep)
            .map(|(b, m)| 2.0 * b - m)
            .collect(),
    ))
}

/// Interpolated order statistic at probability `p` (sample quantile type 7).
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const MIN_CI_REPLICATES: usize = 20;

/// (2 b - q*(1 - alpha/2), 2 b - q*(alpha/2)) per component.
pub fn basic_ci(beta: &[f64], run: &BootstrapRun, alpha: f64) -> Result<Vec<(f64, f64)>> {
    if run.n_used() < MIN_CI_REPLICATES {
        return Err(Error::InvalidArgument(format!(
            "basic intervals need at least {MIN_CI_REPLICATES} usable replicates, have {}",
            run.n_used()
        )));
    }
    check_alpha(alpha)?;
    Ok((0..beta.len())
        .map(|k| {
            let mut col: Vec<f64> = run.beta_star_twostep.iter().map(|r| r[k]).collect();
            col.sort_by(f64::total_cmp);
            let lo = 2.0 * beta[k] - quantile_type7(&col, 1.0 - alpha / 2.0);
            let hi = 2.0 * beta[k] - quantile_type7(&col, alpha / 2.0);
            (lo, hi)
        })
        .collect())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "alpha must be in (0, 1), got {alpha}"
        )))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SeAdjusted {
    pub beta_adj: FixedEffects,
    pub se_adj: Vec<f64>,
    pub intervals: Vec<(f64, f64)>,
}

/// SE_adj = SD*_two-step SE_obs / SD*_oracle and beta_adj -/+ z(1 - alpha/2) SE_adj.
pub fn se_adjusted_ci(
    beta: &[f64],
    se_obs: &[f64],
    run: &BootstrapRun,
    alpha: f64,
) -> Result<SeAdjusted> {
    check_alpha(alpha)?;
    let sd_oracle = run.sd_oracle.as_ref().ok_or_else(|| {
        Error::Unsupported(format!("{} bootstrap has no oracle replicates", run.scheme))
    })?;
    if se_obs.len() != beta.len() {
        return Err(Error::Dimension(
            "standard errors and estimate differ in length".into(),
        ));
    }
    if let Some(k) = sd_oracle.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateReplicates(format!(
            "oracle replicates of component {k} have zero spread"
        )));
    }
    let beta_adj = bias_adjust(beta, run)?;
    let z = Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - alpha / 2.0);
    let se_adj: Vec<f64> = (0..beta.len())
        .map(|k| run.sd_twostep[k] * se_obs[k] / sd_oracle[k])
        .collect();
    let intervals = beta_adj
        .iter()
        .zip(&se_adj)
        .map(|(b, s)| (b - z * s, b + z * s))
        .collect();
    Ok(SeAdjusted {
        beta_adj,
        se_adj,
        intervals,
    })
}

/// Everything the bootstrap yields for one estimate.
#[derive(Clone, Debug, Serialize)]
pub struct IntervalSet {
    pub alpha: f64,
    pub beta_adj: FixedEffects,
    pub basic: Vec<(f64, f64)>,
    /// RW and RRR only.
    pub se_adjusted: Option<Vec<(f64, f64)>>,
    pub se_adj: Option<Vec<f64>>,
}

pub fn intervals(
    beta: &[f64],
    se_obs: &[f64],
    run: &BootstrapRun,
    alpha: f64,
) -> Result<IntervalSet> {
    let basic = basic_ci(beta, run, alpha)?;
    let (beta_adj, se_adjusted, se_adj) = if run.scheme.has_oracle() {
        let s = se_adjusted_ci(beta, se_obs, run, alpha)?;
        (s.beta_adj, Some(s.intervals), Some(s.se_adj))
    } else {
        (bias_adjust(beta, run)?, None, None)
    };
    Ok(IntervalSet {
        alpha,
        beta_adj,
        basic,
        se_adjusted,
        se_adj,
    })
}

#[derive(Clone, Debug, Serialize)]
struct ComponentSummary<'a> {
    name: &'a str,
    estimate: f64,
    mean: f64,
    sd: f64,
    bias: f64,
    sd_oracle: Option<f64>,
    basic_ci: Option<(f64, f64)>,
    se_adjusted_ci: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize)]
struct RunSummary<'a> {
    b: usize,
    scheme: &'a str,
    n_failed: usize,
    alpha: f64,
    components: Vec<ComponentSummary<'a>>,
}

/// JSON summary of a run: B, scheme and per-component mean, SD, bias and intervals.
pub fn summary_json(
    names: &[String],
    beta: &[f64],
    se_obs: &[f64],
    run: &BootstrapRun,
    alpha: f64,
) -> Result<String> {
    let basic = basic_ci(beta, run, alpha).ok();
    let adj = se_adjusted_ci(beta, se_obs, run, alpha).ok();
    let components = names
        .iter()
        .enumerate()
        .map(|(k, name)| ComponentSummary {
            name,
            estimate: beta[k],
            mean: run.mean_twostep[k],
            sd: run.sd_twostep[k],
            bias: run.mean_twostep[k] - beta[k],
            sd_oracle: run.sd_oracle.as_ref().map(|s| s[k]),
            basic_ci: basic.as_ref().map(|b| b[k]),
            se_adjusted_ci: adj.as_ref().map(|a| a.intervals[k]),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&RunSummary {
        b: run.b,
        scheme: run.scheme.name(),
        n_failed: run.n_failed(),
        alpha,
        components,
    })?)
}

/// Replicate matrix (rows = replicates) for callers that want linear algebra.
pub fn replicate_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let p = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), p, |i, k| rows[i][k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClusterBlock, INTERCEPT};
    use crate::estimators::fit_twostep_given_effects;
    use crate::lqmm::fit_lqmm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tau(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn dataset(ys: &[&[f64]]) -> ClusteredDataset {
        let clusters = ys
            .iter()
            .enumerate()
            .map(|(i, y)| ClusterBlock {
                id: format!("c{i}"),
                y: y.to_vec(),
                x: DMatrix::from_fn(y.len(), 2, |j, k| if k == 0 { 1.0 } else { j as f64 }),
                z: DMatrix::from_element(y.len(), 1, 1.0),
            })
            .collect();
        ClusteredDataset::new(clusters, vec![INTERCEPT.into(), "x".into()], vec![0]).unwrap()
    }

    fn run_of(
        scheme: BootstrapScheme,
        twostep: Vec<Vec<f64>>,
        oracle: Option<Vec<Vec<f64>>>,
    ) -> BootstrapRun {
        let b = twostep.len();
        let reps = twostep
            .into_iter()
            .enumerate()
            .map(|(k, t)| Ok((t, oracle.as_ref().map(|o| o[k].clone()))))
            .collect();
        BootstrapRun::from_replicates(scheme, b, reps)
    }

    /// Two-step fit on a line with zero effects: residuals zero, effects zero.
    fn exact_fit() -> (ClusteredDataset, TwoStepFit) {
        let data = dataset(&[&[1.0, 3.0, 5.0], &[1.0, 3.0, 5.0], &[1.0, 3.0, 5.0, 7.0]]);
        let t = tau(0.3);
        let lqmm = fit_lqmm(&data, t, &LqmmOptions::default()).unwrap();
        let zero = RandomEffects::zeros(3, 1);
        let fit = fit_twostep_given_effects(&data, t, lqmm, &zero, false).unwrap();
        (data, fit)
    }

    #[test]
    fn weights_support_and_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = draw_weights(tau(0.5), 1000, &mut rng);
        assert!(w.iter().all(|&v| v == 1.0 || v == -1.0));
        let n = 100_000;
        let w = draw_weights(tau(0.1), n, &mut rng);
        assert!(w.iter().all(|&v| v == 1.8 || v == -0.2));
        let neg = w.iter().filter(|&&v| v < 0.0).count() as f64 / n as f64;
        assert!((neg - 0.1).abs() < 3.0 * (0.09f64 / n as f64).sqrt());
        for t in [0.1, 0.3, 0.75] {
            let w = draw_weights(tau(t), n, &mut rng);
            let mean = w.iter().sum::<f64>() / n as f64;
            let var = 4.0 * t * (1.0 - t);
            assert!((mean - (2.0 - 4.0 * t)).abs() < 3.0 * (var / n as f64).sqrt());
        }
    }

    #[test]
    fn rw_without_noise_reproduces_the_fit() {
        let (data, fit) = exact_fit();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (y, u) = gen_rw(&fit, &data, tau(0.3), &mut rng).unwrap();
        assert_eq!(y, fitted(&data, &fit.beta, None).unwrap());
        assert!(u.0.iter().all(|&v| v == 0.0));
        let (y, _) = gen_rrr(&fit, &data, &mut rng).unwrap();
        assert_eq!(y, fitted(&data, &fit.beta, None).unwrap());
        assert_eq!(gen_cw(&fit.beta, &data, tau(0.3), &mut rng).unwrap(), y);
    }

    #[test]
    fn rw_perturbation_follows_weight_law() {
        let (data, mut fit) = exact_fit();
        fit.residuals = vec![2.0; data.n_obs()];
        let base = fitted(&data, &fit.beta, None).unwrap();
        let t = tau(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut neg = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let (y, _) = gen_rw(&fit, &data, t, &mut rng).unwrap();
            let d = y[0] - base[0];
            assert!(d == 2.0 || d == -2.0);
            neg += usize::from(d < 0.0);
        }
        assert!((neg as f64 / draws as f64 - 0.5).abs() < 3.0 * (0.25 / draws as f64).sqrt());
    }

    #[test]
    fn rrr_constant_residuals() {
        let (data, mut fit) = exact_fit();
        fit.residuals = vec![0.7; data.n_obs()];
        let base = fitted(&data, &fit.beta, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (y, _) = gen_rrr(&fit, &data, &mut rng).unwrap();
        for (a, b) in y.iter().zip(&base) {
            assert!((a - b - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn cw_shares_the_cluster_weight() {
        // Intercept-only fit at 0: r = (1, -1), w = -0.2 -> perturbations (-0.2, -0.2).
        let clusters = vec![ClusterBlock {
            id: "a".into(),
            y: vec![1.0, -1.0],
            x: DMatrix::from_element(2, 1, 1.0),
            z: DMatrix::from_element(2, 1, 1.0),
        }];
        let data = ClusteredDataset::new(clusters, vec![INTERCEPT.into()], vec![0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen_negative = false;
        for _ in 0..200 {
            let y = gen_cw(&[0.0], &data, tau(0.1), &mut rng).unwrap();
            assert_eq!(y[0], y[1]);
            assert!(y[0] == -0.2 || y[0] == 1.8);
            seen_negative |= y[0] == -0.2;
        }
        assert!(seen_negative);
    }

    #[test]
    fn rc_blocks_and_preconditions() {
        let data = dataset(&[&[1.0, 2.0], &[5.0, 6.0, 7.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let rs = gen_rc(&data, &mut rng).unwrap();
            assert_eq!(rs.n_clusters(), 2);
            for c in rs.clusters() {
                assert!(data
                    .clusters()
                    .iter()
                    .any(|o| o.y == c.y && o.x == c.x && o.z == c.z));
            }
            let ids: Vec<&str> = rs.clusters().iter().map(|c| c.id.as_str()).collect();
            assert_eq!(ids, ["1", "2"]);
        }
        let single = dataset(&[&[1.0, 2.0]]);
        assert!(matches!(
            gen_rc(&single, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn bias_adjustment_examples() {
        let run = run_of(
            BootstrapScheme::Cw,
            vec![vec![1.1, 0.9], vec![1.1, 0.9]],
            None,
        );
        let adj = bias_adjust(&[1.0, 1.0], &run).unwrap();
        assert!((adj[0] - 0.9).abs() < 1e-12 && (adj[1] - 1.1).abs() < 1e-12);
        let run = run_of(BootstrapScheme::Cw, vec![vec![2.0, 3.0]; 3], None);
        assert_eq!(bias_adjust(&[2.0, 3.0], &run).unwrap().0, vec![2.0, 3.0]);
    }

    #[test]
    fn basic_interval_examples() {
        let run = run_of(BootstrapScheme::Rc, vec![vec![0.5]; 25], None);
        assert_eq!(basic_ci(&[0.5], &run, 0.05).unwrap(), vec![(0.5, 0.5)]);
        let reps: Vec<Vec<f64>> = (0..41)
            .map(|k| vec![1.0 + (k as f64 - 20.0) * 0.1])
            .collect();
        let run = run_of(BootstrapScheme::Rc, reps, None);
        let (lo, hi) = basic_ci(&[1.0], &run, 0.1).unwrap()[0];
        assert!(((1.0 - lo) - (hi - 1.0)).abs() < 1e-12);
        let short = run_of(BootstrapScheme::Rc, vec![vec![0.0]; 5], None);
        assert!(basic_ci(&[0.0], &short, 0.05).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&v, 0.0), 1.0);
        assert_eq!(quantile_type7(&v, 1.0), 4.0);
        assert!((quantile_type7(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile_type7(&v, 0.1) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn se_adjustment_ratio_one() {
        let reps: Vec<Vec<f64>> = (0..30)
            .map(|k| vec![(k as f64).sin(), (k as f64).cos()])
            .collect();
        let run = run_of(BootstrapScheme::Rw, reps.clone(), Some(reps));
        let s = se_adjusted_ci(&[0.2, 0.3], &[0.11, 0.07], &run, 0.05).unwrap();
        assert!((s.se_adj[0] - 0.11).abs() < 1e-12 && (s.se_adj[1] - 0.07).abs() < 1e-12);

        let flat = vec![vec![0.0, 1.0]; 30];
        let run = run_of(BootstrapScheme::Rw, flat.clone(), Some(flat));
        assert!(matches!(
            se_adjusted_ci(&[0.0, 1.0], &[0.1, 0.1], &run, 0.05),
            Err(Error::DegenerateReplicates(_))
        ));
        let run = run_of(BootstrapScheme::Cw, vec![vec![0.0, 1.0]; 30], None);
        assert!(matches!(
            se_adjusted_ci(&[0.0, 1.0], &[0.1, 0.1], &run, 0.05),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn sds_recompute_from_stored_replicates() {
        let reps: Vec<Vec<f64>> = (0..17)
            .map(|k| vec![k as f64 * 0.3, (k * k) as f64])
            .collect();
        let run = run_of(BootstrapScheme::Rw, reps.clone(), Some(reps));
        let m = replicate_matrix(&run.beta_star_twostep);
        for k in 0..2 {
            let col = m.column(k);
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0).sqrt();
            assert!((sd - run.sd_twostep[k]).abs() <= 1e-12 * sd.max(1.0));
        }
    }

    #[test]
    fn failure_bookkeeping() {
        let reps = (0..10)
            .map(|k| {
                if k % 4 == 0 {
                    Err(Error::Numerical {
                        cluster: 0,
                        message: "x".into(),
                    })
                } else {
                    Ok((vec![k as f64], None))
                }
            })
            .collect();
        let run = BootstrapRun::from_replicates(BootstrapScheme::Cw, 10, reps);
        assert_eq!(run.failed, vec![0, 4, 8]);
        assert_eq!(run.n_used(), 7);
    }

    #[test]
    fn degenerate_rw_oracle_replicates_equal_estimate() {
        let (data, fit) = exact_fit();
        let run = run_bootstrap(
            &data,
            tau(0.3),
            4,
            BootstrapScheme::Rw,
            &fit,
            &BootstrapOptions::default(),
            StreamKey::new(3),
        );
        // Noise-free data: every oracle replicate is the original estimate.
        let run = match run {
            Ok(r) => r,
            Err(Error::UnreliableBootstrap { partial, .. }) => *partial,
            Err(e) => panic!("{e}"),
        };
        for o in run.beta_star_oracle.unwrap() {
            for (a, b) in o.iter().zip(fit.beta.iter()) {
                assert!((a - b).abs() < 1e-9, "{o:?} vs {:?}", fit.beta);
            }
        }
    }
}
