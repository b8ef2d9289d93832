//! Fixed-effect estimators for clustered quantile regression.
//!
//! Every estimator processes clusters in id order, so results do not depend
//! on the order in which clusters are stored.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, FixedEffects, QuantileLevel, RandomEffects};
use crate::error::{Error, Result};
use crate::lqmm::{fit_lqmm, LqmmFit, LqmmOptions};
use crate::qr::{
    fit_qr, interior_point, rho, solve_qr, ClusterPenaltyDesign, DenseDesign, LpDesign,
    NormalFactor, QrFit,
};
use crate::rng::StreamKey;

/// A dataset in canonical cluster order plus the row map back to the caller's order.
struct Canonical {
    data: ClusteredDataset,
    order: Vec<usize>,
    /// canonical stacked row -> original stacked row
    rows: Vec<usize>,
}

impl Canonical {
    fn new(data: &ClusteredDataset) -> Result<Self> {
        let order = data.canonical_order();
        let mut starts = Vec::with_capacity(data.n_clusters());
        let mut acc = 0;
        for c in data.clusters() {
            starts.push(acc);
            acc += c.len();
        }
        let mut rows = Vec::with_capacity(acc);
        for &i in &order {
            rows.extend(starts[i]..starts[i] + data.clusters()[i].len());
        }
        Ok(Self {
            data: data.permuted(&order)?,
            order,
            rows,
        })
    }

    fn effects(&self, u: &RandomEffects) -> RandomEffects {
        RandomEffects(u.0.select_rows(self.order.iter()))
    }

    fn restore_rows(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (k, &r) in self.rows.iter().enumerate() {
            out[r] = v[k];
        }
        out
    }

    fn restore_clusters(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (k, &i) in self.order.iter().enumerate() {
            out[i] = v[k];
        }
        out
    }

    fn restore_fit(&self, mut fit: QrFit) -> QrFit {
        fit.residuals = self.restore_rows(&fit.residuals);
        fit
    }
}

fn qr_with_offset(
    data: &ClusteredDataset,
    tau: QuantileLevel,
    offset: Option<&[f64]>,
) -> Result<QrFit> {
    fit_qr(&data.y_stacked(), &data.x_stacked(), tau, offset)
}

/// Quantile regression with the true random effects as offsets.
pub fn fit_oracle(
    data: &ClusteredDataset,
    u_true: &RandomEffects,
    tau: QuantileLevel,
) -> Result<QrFit> {
    let canon = Canonical::new(data)?;
    let offset = canon.data.z_offset(&canon.effects(u_true))?;
    Ok(canon.restore_fit(qr_with_offset(&canon.data, tau, Some(&offset))?))
}

/// Quantile regression ignoring the clustering.
pub fn fit_marginal(data: &ClusteredDataset, tau: QuantileLevel) -> Result<QrFit> {
    let canon = Canonical::new(data)?;
    Ok(canon.restore_fit(qr_with_offset(&canon.data, tau, None)?))
}

fn require_random_intercept(data: &ClusteredDataset, what: &str) -> Result<()> {
    if data.is_random_intercept_only() {
        Ok(())
    } else {
        Err(Error::Unsupported(format!(
            "{what} allows only a cluster-specific intercept (q = 1, Z = intercept)"
        )))
    }
}

/// Within (cluster-demeaned) least squares for the non-intercept columns,
/// then centered cluster intercepts mean_i(y - x'beta_slopes).
pub(crate) fn within_intercepts(data: &ClusteredDataset) -> Result<Vec<f64>> {
    let p = data.p();
    let k = p - 1;
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for c in data.clusters() {
        let n = c.len() as f64;
        let ybar = c.y.iter().sum::<f64>() / n;
        let xbar: Vec<f64> = (1..p).map(|a| c.x.column(a).sum() / n).collect();
        for j in 0..c.len() {
            let dy = c.y[j] - ybar;
            for a in 0..k {
                let da = c.x[(j, a + 1)] - xbar[a];
                xty[a] += da * dy;
                for b in 0..k {
                    xtx[(a, b)] += da * (c.x[(j, b + 1)] - xbar[b]);
                }
            }
        }
    }
    let slopes = if k == 0 {
        DVector::zeros(0)
    } else {
        xtx.cholesky()
            .ok_or_else(|| {
                Error::SingularDesign("covariates have no within-cluster variation".into())
            })?
            .solve(&xty)
    };
    let mut u: Vec<f64> = data
        .clusters()
        .iter()
        .map(|c| {
            let s: f64 = (0..c.len())
                .map(|j| c.y[j] - (0..k).map(|a| c.x[(j, a + 1)] * slopes[a]).sum::<f64>())
                .sum();
            s / c.len() as f64
        })
        .collect();
    let mean = u.iter().sum::<f64>() / u.len() as f64;
    u.iter_mut().for_each(|v| *v -= mean);
    Ok(u)
}

/// Mean-regression cluster effects followed by quantile regression on the
/// adjusted responses.
pub fn fit_canay(data: &ClusteredDataset, tau: QuantileLevel) -> Result<QrFit> {
    require_random_intercept(data, "the mean-regression two-step estimator")?;
    let canon = Canonical::new(data)?;
    let u = within_intercepts(&canon.data)?;
    let offset: Vec<f64> = canon
        .data
        .clusters()
        .iter()
        .zip(&u)
        .flat_map(|(c, &ui)| std::iter::repeat_n(ui, c.len()))
        .collect();
    Ok(canon.restore_fit(qr_with_offset(&canon.data, tau, Some(&offset))?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyKind {
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Lambda {
    Value(f64),
    /// Chosen by cross-validation; `grid = None` uses [`default_grid`].
    CrossValidate {
        grid: Option<Vec<f64>>,
        folds: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda: Lambda,
}

impl PenaltySpec {
    pub fn cv(kind: PenaltyKind) -> Self {
        Self {
            kind,
            lambda: Lambda::CrossValidate {
                grid: None,
                folds: 5,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PenalizedFit {
    pub beta: FixedEffects,
    /// Estimated cluster intercepts in dataset order.
    pub intercepts: Vec<f64>,
    pub lambda: f64,
    /// Check loss plus penalty at the solution.
    pub objective: f64,
    pub residuals: Vec<f64>,
}

/// Minimizes L(beta, u0; Y) + lambda * sum pen(u_i0) over beta and the cluster intercepts.
pub fn fit_penalized(
    data: &ClusteredDataset,
    tau: QuantileLevel,
    spec: &PenaltySpec,
) -> Result<PenalizedFit> {
    require_random_intercept(data, "the penalized estimator")?;
    let lambda = match &spec.lambda {
        Lambda::Value(l) => *l,
        Lambda::CrossValidate { .. } => cross_validate_lambda(data, tau, spec)?,
    };
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "penalty must be finite and >= 0, got {lambda}"
        )));
    }
    let canon = Canonical::new(data)?;
    let (beta, u) = penalized_core(&canon.data, tau.value(), spec.kind, lambda)?;
    let mut residuals = Vec::with_capacity(canon.data.n_obs());
    for (c, &ui) in canon.data.clusters().iter().zip(&u) {
        for j in 0..c.len() {
            let fit: f64 = (0..c.x.ncols()).map(|k| c.x[(j, k)] * beta[k]).sum();
            residuals.push(c.y[j] - fit - ui);
        }
    }
    let loss: f64 = residuals.iter().map(|&r| rho(r, tau.value())).sum();
    let penalty: f64 = match spec.kind {
        PenaltyKind::L1 => u.iter().map(|v| v.abs()).sum(),
        PenaltyKind::L2 => u.iter().map(|v| v * v).sum(),
    };
    Ok(PenalizedFit {
        beta: FixedEffects(beta),
        intercepts: canon.restore_clusters(&u),
        lambda,
        objective: loss + lambda * penalty,
        residuals: canon.restore_rows(&residuals),
    })
}

fn cluster_index(data: &ClusteredDataset) -> Vec<usize> {
    data.cluster_of_rows()
}

fn penalized_core(
    data: &ClusteredDataset,
    tau: f64,
    kind: PenaltyKind,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if lambda == 0.0 {
        return unpenalized_intercepts(data, tau);
    }
    match kind {
        PenaltyKind::L1 => l1_core(data, tau, lambda),
        PenaltyKind::L2 => l2_core(data, tau, lambda),
    }
}

fn dense(data: &ClusteredDataset, drop_intercept: bool) -> DenseDesign {
    let x = data.x_stacked();
    let first = usize::from(drop_intercept);
    let p = x.ncols() - first;
    let mut rows = Vec::with_capacity(x.nrows() * p);
    for i in 0..x.nrows() {
        rows.extend((first..x.ncols()).map(|k| x[(i, k)]));
    }
    DenseDesign::from_rows(x.nrows(), p, rows)
}

fn l1_core(data: &ClusteredDataset, tau: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = dense(data, false);
    let cluster = cluster_index(data);
    let design = ClusterPenaltyDesign {
        x: &x,
        cluster: &cluster,
        n_clusters: data.n_clusters(),
        lambda,
    };
    let mut y = data.y_stacked();
    y.resize(design.nrows(), 0.0);
    let ip = interior_point(&design, &y, tau)?;
    if !ip.converged {
        return Err(Error::Solver {
            iterations: ip.iterations,
            gap: ip.gap,
        });
    }
    let u = ip.beta[x.p..].to_vec();
    let mut beta = ip.beta;
    beta.truncate(x.p);
    Ok((beta, u))
}

/// Cluster intercepts as free parameters: the intercept is their mean.
fn unpenalized_intercepts(data: &ClusteredDataset, tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = dense(data, true);
    let cluster = cluster_index(data);
    let design = ClusterPenaltyDesign {
        x: &x,
        cluster: &cluster,
        n_clusters: data.n_clusters(),
        lambda: 0.0,
    };
    let mut y = data.y_stacked();
    y.resize(design.nrows(), 0.0);
    let ip = interior_point(&design, &y, tau)?;
    if !ip.converged {
        return Err(Error::Solver {
            iterations: ip.iterations,
            gap: ip.gap,
        });
    }
    let mut u = ip.beta[x.p..].to_vec();
    let b0 = u.iter().sum::<f64>() / u.len() as f64;
    u.iter_mut().for_each(|v| *v -= b0);
    let mut beta = vec![b0];
    beta.extend_from_slice(&ip.beta[..x.p]);
    Ok((beta, u))
}

const MM_MAX_ITER: usize = 500;
const MM_TOL: f64 = 1e-7;

/// Majorize-minimize with the quadratic upper bound of the check loss at
/// the current residuals; each step is a weighted ridge fit.
fn l2_core(data: &ClusteredDataset, tau: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = dense(data, false);
    let n = x.n;
    let p = x.p;
    let m = data.n_clusters();
    let cluster = cluster_index(data);
    let y = data.y_stacked();
    let design = ClusterPenaltyDesign {
        x: &x,
        cluster: &cluster,
        n_clusters: m,
        lambda: 1.0,
    };

    // Start from the marginal fit with zero intercepts.
    let marg = solve_qr(&y, &x.to_matrix(), QuantileLevel::new(tau)?, None)?;
    let mut beta = marg.beta;
    let mut u = vec![0.0; m];
    let scale = marg.residuals.iter().map(|r| r.abs()).sum::<f64>() / n as f64;
    let eps = 1e-9 * scale.max(1e-300);

    let mut r = marg.residuals.clone();
    let objective = |r: &[f64], u: &[f64]| {
        r.iter().map(|&v| rho(v, tau)).sum::<f64>() + lambda * u.iter().map(|v| v * v).sum::<f64>()
    };
    let mut f_old = objective(&r, &u);
    let half = 0.5 * (tau - 0.5);
    let mut d = vec![0.0; n + 2 * m];
    for k in 0..m {
        d[n + k] = lambda;
    }
    for iter in 1..=MM_MAX_ITER {
        for i in 0..n {
            d[i] = 1.0 / (4.0 * r[i].abs().max(eps));
        }
        let factor = design.factor(&d)?;
        let mut rhs = vec![0.0; p + m];
        for i in 0..n {
            let v = d[i] * y[i] + half;
            for (a, xa) in x.row(i).iter().enumerate() {
                rhs[a] += xa * v;
            }
            rhs[p + cluster[i]] += v;
        }
        let theta = factor.solve(&rhs);
        beta.copy_from_slice(&theta[..p]);
        u.copy_from_slice(&theta[p..]);
        for i in 0..n {
            let fit: f64 = x.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum();
            r[i] = y[i] - fit - u[cluster[i]];
        }
        let f_new = objective(&r, &u);
        if (f_old - f_new).abs() <= MM_TOL * f_new.abs().max(1.0) {
            return Ok((beta, u));
        }
        f_old = f_new;
        if iter == MM_MAX_ITER {
            break;
        }
    }
    Err(Error::MmNonConvergence {
        trace_len: MM_MAX_ITER,
    })
}

/// Default penalty grid: 20 log-spaced values on [0.01, 10]. The l1 penalty
/// and the check loss scale alike with the response, so its grid is used
/// as is; the l2 grid is divided by the residual MAD of a marginal fit.
pub fn default_grid(
    data: &ClusteredDataset,
    tau: QuantileLevel,
    kind: PenaltyKind,
) -> Result<Vec<f64>> {
    let base: Vec<f64> = (0..20)
        .map(|k| 10f64.powf(-2.0 + 3.0 * k as f64 / 19.0))
        .collect();
    match kind {
        PenaltyKind::L1 => Ok(base),
        PenaltyKind::L2 => {
            let marg = fit_marginal_solution(data, tau)?;
            let s = mad(&marg);
            let s = if s > 0.0 { s } else { 1.0 };
            Ok(base.into_iter().map(|l| l / s).collect())
        }
    }
}

fn fit_marginal_solution(data: &ClusteredDataset, tau: QuantileLevel) -> Result<Vec<f64>> {
    let canon = Canonical::new(data)?;
    Ok(solve_qr(&canon.data.y_stacked(), &canon.data.x_stacked(), tau, None)?.residuals)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mad(v: &[f64]) -> f64 {
    let mut w = v.to_vec();
    let med = median(&mut w);
    let mut dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    1.4826 * median(&mut dev)
}

/// K-fold cross-validation of the penalty. Row j of (canonical) cluster i
/// is held out in fold (i + j) mod K; the score is the held-out mean check
/// loss; ties go to the larger penalty.
pub fn cross_validate_lambda(
    data: &ClusteredDataset,
    tau: QuantileLevel,
    spec: &PenaltySpec,
) -> Result<f64> {
    require_random_intercept(data, "the penalized estimator")?;
    let (grid, folds) = match &spec.lambda {
        Lambda::Value(l) => return Ok(*l),
        Lambda::CrossValidate { grid, folds } => (grid.clone(), *folds),
    };
    let mut grid = match grid {
        Some(g) => g,
        None => default_grid(data, tau, spec.kind)?,
    };
    if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument(
            "penalty grid must be nonempty and positive".into(),
        ));
    }
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let canon = Canonical::new(data)?;
    let data = &canon.data;
    let t = tau.value();

    struct Fold {
        train: ClusteredDataset,
        /// training-cluster index of every full-data cluster, if present
        slot: Vec<Option<usize>>,
        held: Vec<(usize, usize)>,
    }
    let mut fold_sets = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut keep: Vec<Vec<usize>> = Vec::new();
        let mut kept_clusters = Vec::new();
        let mut slot = vec![None; data.n_clusters()];
        let mut held = Vec::new();
        for (i, c) in data.clusters().iter().enumerate() {
            let rows: Vec<usize> = (0..c.len()).filter(|j| (i + j) % folds != f).collect();
            held.extend(
                (0..c.len())
                    .filter(|j| (i + j) % folds == f)
                    .map(|j| (i, j)),
            );
            if !rows.is_empty() {
                slot[i] = Some(kept_clusters.len());
                kept_clusters.push(i);
                keep.push(rows);
            }
        }
        if held.is_empty() {
            continue;
        }
        let sub = data.subset_clusters(&kept_clusters)?.select_rows(&keep)?;
        fold_sets.push(Fold {
            train: sub,
            slot,
            held,
        });
    }

    let mut best: Option<(f64, f64)> = None;
    for &lambda in &grid {
        let mut loss = 0.0;
        let mut count = 0usize;
        for fold in &fold_sets {
            let (beta, u) = penalized_core(&fold.train, t, spec.kind, lambda)?;
            for &(i, j) in &fold.held {
                let c = &data.clusters()[i];
                let ui = fold.slot[i].map_or(0.0, |s| u[s]);
                let fit: f64 = (0..c.x.ncols()).map(|k| c.x[(j, k)] * beta[k]).sum();
                loss += rho(c.y[j] - fit - ui, t);
                count += 1;
            }
        }
        let score = loss / count as f64;
        if best.is_none_or(|(s, _)| score <= s) {
            best = Some((score, lambda));
        }
    }
    Ok(best.map(|(_, l)| l).unwrap_or(grid[grid.len() - 1]))
}

#[derive(Clone, Debug)]
pub struct TwoStepOptions {
    pub lqmm: LqmmOptions,
    /// Compute sandwich standard errors for the Step-2 fit.
    pub standard_errors: bool,
}

impl Default for TwoStepOptions {
    fn default() -> Self {
        Self {
            lqmm: LqmmOptions::default(),
            standard_errors: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoStepFit {
    pub beta: FixedEffects,
    /// Centered predictions, dataset order.
    pub blp: RandomEffects,
    /// Empty when standard errors were not requested.
    pub se_obs: Vec<f64>,
    pub cov_obs: Option<DMatrix<f64>>,
    /// Y - X'beta - Z'u~ per observation, dataset order.
    pub residuals: Vec<f64>,
    pub objective: f64,
    pub lqmm: LqmmFit,
}

/// Step 1: working-model fit and centered predictions. Step 2: quantile
/// regression with Z'u~ as offsets.
pub fn fit_twostep(
    data: &ClusteredDataset,
    tau: QuantileLevel,
    opts: &TwoStepOptions,
) -> Result<TwoStepFit> {
    let lqmm = fit_lqmm(data, tau, &opts.lqmm)?;
    if !lqmm.converged {
        log::debug!("two-step: working model did not converge");
    }
    let blp = lqmm.blp.clone();
    twostep_with_effects(data, tau, lqmm, blp, opts.standard_errors)
}

/// Step 2 with caller-supplied effects in place of the predictions.
pub fn fit_twostep_given_effects(
    data: &ClusteredDataset,
    tau: QuantileLevel,
    lqmm: LqmmFit,
    effects: &RandomEffects,
    standard_errors: bool,
) -> Result<TwoStepFit> {
    twostep_with_effects(data, tau, lqmm, effects.clone(), standard_errors)
}

fn twostep_with_effects(
    data: &ClusteredDataset,
    tau: QuantileLevel,
    lqmm: LqmmFit,
    blp: RandomEffects,
    standard_errors: bool,
) -> Result<TwoStepFit> {
    let canon = Canonical::new(data)?;
    let offset = canon.data.z_offset(&canon.effects(&blp))?;
    let y = canon.data.y_stacked();
    let x = canon.data.x_stacked();
    let (beta, residuals, objective, se_obs, cov_obs) = if standard_errors {
        let f = fit_qr(&y, &x, tau, Some(&offset))?;
        (f.beta.0, f.residuals, f.objective, f.se, Some(f.cov))
    } else {
        let s = solve_qr(&y, &x, tau, Some(&offset))?;
        (s.beta, s.residuals, s.objective, Vec::new(), None)
    };
    Ok(TwoStepFit {
        beta: FixedEffects(beta),
        blp,
        se_obs,
        cov_obs,
        residuals: canon.restore_rows(&residuals),
        objective,
        lqmm,
    })
}

/// Half-panel jackknife: 2 b - (b_1 + b_2) / 2 with b_h the base estimate on
/// a random half of every cluster. Odd clusters put the extra row in either
/// half with probability 1/2.
pub fn jackknife_adjust<F>(data: &ClusteredDataset, key: StreamKey, base: F) -> Result<FixedEffects>
where
    F: Fn(&ClusteredDataset) -> Result<FixedEffects>,
{
    if let Some(c) = data.clusters().iter().find(|c| c.len() < 2) {
        return Err(Error::Unsupported(format!(
            "half-panel jackknife needs at least 2 rows per cluster; cluster `{}` has {}",
            c.id,
            c.len()
        )));
    }
    let canon = Canonical::new(data)?;
    let mut rng = key.rng();
    let mut first = Vec::with_capacity(canon.data.n_clusters());
    let mut second = Vec::with_capacity(canon.data.n_clusters());
    for c in canon.data.clusters() {
        let n = c.len();
        let mut idx: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            let j = rng.random_range(0..=k);
            idx.swap(k, j);
        }
        let mut h1 = n / 2;
        if n % 2 == 1 && rng.random::<bool>() {
            h1 += 1;
        }
        let (a, b) = idx.split_at(h1);
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        first.push(a);
        second.push(b);
    }
    let full = base(&canon.data)?;
    let b1 = base(&canon.data.select_rows(&first)?)?;
    let b2 = base(&canon.data.select_rows(&second)?)?;
    if b1.len() != full.len() || b2.len() != full.len() {
        return Err(Error::Dimension(
            "base estimator changed dimension across halves".into(),
        ));
    }
    Ok(FixedEffects(
        (0..full.len())
            .map(|k| 2.0 * full[k] - 0.5 * (b1[k] + b2[k]))
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClusterBlock, INTERCEPT};
    use crate::qr::objective;
    use crate::rng::Purpose;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tau(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn panel(m: usize, n: usize, seed: u64, sigma_u: f64) -> (ClusteredDataset, RandomEffects) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clusters = Vec::new();
        let mut u = Vec::new();
        for i in 0..m {
            let ui: f64 = sigma_u * rng.sample::<f64, _>(StandardNormal);
            u.push(ui);
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|&xv| 1.0 + xv + ui + rng.sample::<f64, _>(StandardNormal))
                .collect();
            clusters.push(ClusterBlock {
                id: format!("{i:03}"),
                y,
                x: DMatrix::from_fn(n, 2, |j, k| if k == 0 { 1.0 } else { x[j] }),
                z: DMatrix::from_element(n, 1, 1.0),
            });
        }
        (
            ClusteredDataset::new(clusters, vec![INTERCEPT.into(), "x".into()], vec![0]).unwrap(),
            RandomEffects(DMatrix::from_column_slice(m, 1, &u)),
        )
    }

    #[test]
    fn zero_effects_oracle_is_marginal() {
        let (data, _) = panel(20, 4, 1, 1.0);
        let zero = RandomEffects::zeros(20, 1);
        let a = fit_oracle(&data, &zero, tau(0.3)).unwrap();
        let b = fit_marginal(&data, tau(0.3)).unwrap();
        assert_eq!(a.objective, b.objective);
        assert_eq!(a.beta, b.beta);
    }

    #[test]
    fn single_cluster_marginal_is_plain_qr() {
        let (data, _) = panel(1, 30, 2, 1.0);
        let a = fit_marginal(&data, tau(0.4)).unwrap();
        let b = fit_qr(&data.y_stacked(), &data.x_stacked(), tau(0.4), None).unwrap();
        assert_eq!(a.beta, b.beta);
    }

    #[test]
    fn offset_identity() {
        let (data, u) = panel(15, 5, 3, 1.0);
        let fit = fit_oracle(&data, &u, tau(0.7)).unwrap();
        let direct = objective(&fit.beta, &u, &data, tau(0.7)).unwrap();
        assert!((fit.objective - direct).abs() <= 1e-10 * direct.max(1.0));
    }

    #[test]
    fn canay_hand_example() {
        // Two clusters, slope-free design: u_i = mean(y_i) - grand mean of cluster means.
        let clusters = vec![
            ClusterBlock {
                id: "a".into(),
                y: vec![1.0, 3.0],
                x: DMatrix::from_element(2, 1, 1.0),
                z: DMatrix::from_element(2, 1, 1.0),
            },
            ClusterBlock {
                id: "b".into(),
                y: vec![4.0, 6.0, 8.0],
                x: DMatrix::from_element(3, 1, 1.0),
                z: DMatrix::from_element(3, 1, 1.0),
            },
        ];
        let data = ClusteredDataset::new(clusters, vec![INTERCEPT.into()], vec![0]).unwrap();
        let u = within_intercepts(&data).unwrap();
        assert_relative_eq!(u[0], -2.0, epsilon = 1e-12);
        assert_relative_eq!(u[1], 2.0, epsilon = 1e-12);
        // Adjusted responses (3, 5, 2, 4, 6): median 4.
        let fit = fit_canay(&data, tau(0.5)).unwrap();
        assert_relative_eq!(fit.beta[0], 4.0, epsilon = 1e-10);

        // With a covariate: within slope from demeaned data.
        let clusters = vec![
            ClusterBlock {
                id: "a".into(),
                y: vec![1.0, 3.0],
                x: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]),
                z: DMatrix::from_element(2, 1, 1.0),
            },
            ClusterBlock {
                id: "b".into(),
                y: vec![5.0, 9.0],
                x: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 2.0]),
                z: DMatrix::from_element(2, 1, 1.0),
            },
        ];
        let data =
            ClusteredDataset::new(clusters, vec![INTERCEPT.into(), "x".into()], vec![0]).unwrap();
        // Demeaned: a: x (-.5,.5) y (-1,1); b: x (-1,1) y (-2,2) -> slope (1+4)/(0.5+2) = 2.
        // Cluster means of y - 2x: a: (1 + 1)/2 = 1, b: (5 + 5)/2 = 5; centered: -2, 2.
        let u = within_intercepts(&data).unwrap();
        assert_relative_eq!(u[0], -2.0, epsilon = 1e-12);
        assert_relative_eq!(u[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn canay_rejects_random_slopes() {
        let (data, _) = panel(5, 3, 4, 1.0);
        let slopes = ClusteredDataset::new(
            data.clusters()
                .iter()
                .map(|c| ClusterBlock {
                    z: c.x.clone(),
                    ..c.clone()
                })
                .collect(),
            data.x_names().to_vec(),
            vec![0, 1],
        )
        .unwrap();
        assert!(matches!(
            fit_canay(&slopes, tau(0.5)),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            fit_penalized(&slopes, tau(0.5), &PenaltySpec::cv(PenaltyKind::L1)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn huge_penalty_recovers_marginal() {
        let (data, _) = panel(12, 5, 5, 1.0);
        let marg = fit_marginal(&data, tau(0.3)).unwrap();
        for kind in [PenaltyKind::L1, PenaltyKind::L2] {
            let fit = fit_penalized(
                &data,
                tau(0.3),
                &PenaltySpec {
                    kind,
                    lambda: Lambda::Value(1e4),
                },
            )
            .unwrap();
            // l1: exact zeros. l2: stationarity bounds |u_i| by n_i max(tau, 1 - tau) / (2 lambda).
            let (u_tol, f_tol) = match kind {
                PenaltyKind::L1 => (1e-6, 1e-6),
                PenaltyKind::L2 => (5.0 * 0.7 / 2e4 * (1.0 + 1e-6), 1e-4),
            };
            assert!(
                fit.intercepts.iter().all(|u| u.abs() <= u_tol),
                "{kind:?} {:?}",
                fit.intercepts
            );
            assert!(
                (fit.objective - marg.objective).abs() < f_tol * marg.objective.max(1.0),
                "{kind:?}"
            );
        }
    }

    #[test]
    fn unpenalized_l1_matches_grid_search() {
        // Three clusters, intercept-only model: beta0 + u_i is just each cluster's quantile.
        let ys: [&[f64]; 3] = [&[0.3, 1.2, -0.4], &[2.0, 2.5], &[-1.0, 0.1, 0.7, 0.2]];
        let clusters = ys
            .iter()
            .enumerate()
            .map(|(i, y)| ClusterBlock {
                id: i.to_string(),
                y: y.to_vec(),
                x: DMatrix::from_element(y.len(), 1, 1.0),
                z: DMatrix::from_element(y.len(), 1, 1.0),
            })
            .collect();
        let data = ClusteredDataset::new(clusters, vec![INTERCEPT.into()], vec![0]).unwrap();
        let t = 0.4;
        let fit = fit_penalized(
            &data,
            tau(t),
            &PenaltySpec {
                kind: PenaltyKind::L1,
                lambda: Lambda::Value(0.0),
            },
        )
        .unwrap();
        // Coarse grid over each cluster's level c_i = beta0 + u_i (separable).
        let mut grid_obj = 0.0;
        for y in ys {
            let best = (0..=4000)
                .map(|k| -2.0 + k as f64 * 0.001)
                .map(|c| y.iter().map(|&v| rho(v - c, t)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            grid_obj += best;
        }
        assert!(
            (fit.objective - grid_obj).abs() < 1e-3,
            "{} vs {grid_obj}",
            fit.objective
        );
        assert!(fit.intercepts.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn l1_value_curve_is_monotone() {
        let (data, _) = panel(10, 4, 6, 1.0);
        let mut last = -1.0;
        for lambda in [0.01, 0.1, 0.5, 1.0, 3.0, 10.0] {
            let fit = fit_penalized(
                &data,
                tau(0.25),
                &PenaltySpec {
                    kind: PenaltyKind::L1,
                    lambda: Lambda::Value(lambda),
                },
            )
            .unwrap();
            assert!(fit.objective >= last - 1e-7);
            last = fit.objective;
        }
    }

    #[test]
    fn cv_single_value_and_ties() {
        let (data, _) = panel(10, 5, 7, 1.0);
        let spec = PenaltySpec {
            kind: PenaltyKind::L1,
            lambda: Lambda::CrossValidate {
                grid: Some(vec![0.7]),
                folds: 5,
            },
        };
        assert_eq!(cross_validate_lambda(&data, tau(0.5), &spec).unwrap(), 0.7);
        // Beyond the largest subgradient every penalty zeroes all intercepts,
        // so the scores tie and the largest value wins.
        let spec = PenaltySpec {
            kind: PenaltyKind::L1,
            lambda: Lambda::CrossValidate {
                grid: Some(vec![50.0, 100.0, 200.0]),
                folds: 5,
            },
        };
        assert_eq!(
            cross_validate_lambda(&data, tau(0.5), &spec).unwrap(),
            200.0
        );
    }

    #[test]
    fn estimators_ignore_cluster_order() {
        let (data, u) = panel(25, 4, 8, 1.0);
        let order: Vec<usize> = (0..25).rev().collect();
        let shuffled = data.permuted(&order).unwrap();
        let u_shuffled = RandomEffects(u.0.select_rows(order.iter()));
        let t = tau(0.25);
        assert_eq!(
            fit_marginal(&data, t).unwrap().beta,
            fit_marginal(&shuffled, t).unwrap().beta
        );
        assert_eq!(
            fit_oracle(&data, &u, t).unwrap().beta,
            fit_oracle(&shuffled, &u_shuffled, t).unwrap().beta
        );
        assert_eq!(
            fit_canay(&data, t).unwrap().beta,
            fit_canay(&shuffled, t).unwrap().beta
        );
        let spec = PenaltySpec {
            kind: PenaltyKind::L1,
            lambda: Lambda::Value(0.5),
        };
        let a = fit_penalized(&data, t, &spec).unwrap();
        let b = fit_penalized(&shuffled, t, &spec).unwrap();
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.intercepts[0], b.intercepts[24]);
    }

    #[test]
    fn jackknife_identities() {
        let (data, _) = panel(8, 5, 9, 1.0);
        let key = StreamKey::new(1).child(Purpose::Jackknife, 0);
        let constant = jackknife_adjust(&data, key, |_| Ok(FixedEffects(vec![0.5, -2.0]))).unwrap();
        assert_eq!(constant.0, vec![0.5, -2.0]);

        let (single, _) = panel(4, 1, 9, 1.0);
        assert!(matches!(
            jackknife_adjust(&single, key, |_| Ok(FixedEffects(vec![0.0]))),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn twostep_with_true_effects_is_oracle() {
        let (data, u) = panel(30, 4, 10, 1.0);
        let t = tau(0.3);
        let lqmm = fit_lqmm(&data, t, &LqmmOptions::default()).unwrap();
        let hooked = fit_twostep_given_effects(&data, t, lqmm, &u, true).unwrap();
        let oracle = fit_oracle(&data, &u, t).unwrap();
        assert_eq!(hooked.beta, oracle.beta);
        assert_eq!(hooked.objective, oracle.objective);
    }
}
