//! Linear quantile mixed model with an asymmetric Laplace working likelihood.
//!
//! Conditional on the random effects u_i the responses of cluster i are
//! independent ALD(x'beta + z'u_i, sigma, tau); u_i ~ N(0, S S'). The random
//! effects are integrated out with a tensor Gauss–Hermite rule and the
//! resulting pseudo log-likelihood is maximized by Nelder–Mead.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{ClusteredDataset, FixedEffects, QuantileLevel, RandomEffects, Stacked};
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::qr::{rho, solve_qr};

const SCALE_FLOOR: f64 = 1e-6;
pub const DEFAULT_NK: usize = 15;

/// Location, scale and skewness of an asymmetric Laplace law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AldParams {
    pub mu: f64,
    pub sigma: f64,
    pub tau: f64,
}

impl AldParams {
    pub fn new(mu: f64, sigma: f64, tau: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) || !(tau > 0.0 && tau < 1.0) || !mu.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "ALD parameters need sigma > 0 and 0 < tau < 1 (mu = {mu}, sigma = {sigma}, tau = {tau})"
            )));
        }
        Ok(Self { mu, sigma, tau })
    }
}

/// log f(y) = log(tau (1 - tau) / sigma) - rho_tau((y - mu) / sigma).
pub fn ald_logpdf(y: f64, params: AldParams) -> f64 {
    let AldParams { mu, sigma, tau } = params;
    (tau * (1.0 - tau) / sigma).ln() - rho((y - mu) / sigma, tau)
}

/// Mean of ALD(0, sigma, tau).
pub fn ald_mean(sigma: f64, tau: f64) -> f64 {
    sigma * (1.0 - 2.0 * tau) / (tau * (1.0 - tau))
}

/// Variance of ALD(mu, sigma, tau).
pub fn ald_variance(sigma: f64, tau: f64) -> f64 {
    sigma * sigma * (1.0 - 2.0 * tau + 2.0 * tau * tau) / (tau * tau * (1.0 - tau) * (1.0 - tau))
}

/// Nodes and weights with `sum_k w_k g(x_k) ~ E g(U)`, U ~ N(0, 1).
///
/// Nodes come from Newton iteration on the orthonormal Hermite recurrence,
/// are returned in increasing order, and are exactly symmetric.
pub fn gauss_hermite(nk: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(1..=64).contains(&nk) {
        return Err(Error::InvalidArgument(format!(
            "number of quadrature nodes must be in 1..=64, got {nk}"
        )));
    }
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let n = nk;
    let m = n.div_ceil(2);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let root2 = std::f64::consts::SQRT_2;
    let mut nodes: Vec<f64> = x.iter().rev().map(|v| v * root2).collect();
    let mut weights: Vec<f64> = w.iter().rev().copied().collect();
    for i in 0..n / 2 {
        nodes[n - 1 - i] = -nodes[i];
        weights[n - 1 - i] = weights[i];
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);
    Ok((nodes, weights))
}

/// Scale of the Gaussian random effects: u = S v with v ~ N(0, I).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ReScale {
    /// Standard deviation of a scalar random effect.
    Sd(f64),
    /// Lower-triangular Cholesky factor, stored row-major.
    Cholesky { q: usize, factor: Vec<f64> },
}

impl ReScale {
    pub fn q(&self) -> usize {
        match self {
            ReScale::Sd(_) => 1,
            ReScale::Cholesky { q, .. } => *q,
        }
    }

    pub fn cholesky(l: &DMatrix<f64>) -> Result<Self> {
        let q = l.nrows();
        if l.ncols() != q || q == 0 {
            return Err(Error::Dimension("Cholesky factor must be square".into()));
        }
        let mut factor = vec![0.0; q * q];
        for i in 0..q {
            for j in 0..=i {
                factor[i * q + j] = l[(i, j)];
            }
        }
        Ok(ReScale::Cholesky { q, factor })
    }

    /// The map v -> S v as a dense matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            ReScale::Sd(phi) => DMatrix::from_element(1, 1, *phi),
            ReScale::Cholesky { q, factor } => DMatrix::from_row_slice(*q, *q, factor),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let s = self.matrix();
        &s * s.transpose()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        match self {
            ReScale::Sd(phi) => out[0] = phi * v[0],
            ReScale::Cholesky { q, factor } => {
                for i in 0..*q {
                    out[i] = (0..=i).map(|j| factor[i * q + j] * v[j]).sum();
                }
            }
        }
    }

    fn is_valid(&self) -> bool {
        match self {
            ReScale::Sd(phi) => phi.is_finite() && *phi >= 0.0,
            ReScale::Cholesky { q, factor } => {
                factor.iter().all(|v| v.is_finite()) && (0..*q).all(|i| factor[i * q + i] >= 0.0)
            }
        }
    }
}

/// Tensor Gauss–Hermite grid in q dimensions.
#[derive(Clone, Debug)]
struct Grid {
    q: usize,
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl Grid {
    fn new(q: usize, nk: usize) -> Result<Self> {
        if q > 2 {
            return Err(Error::Unsupported(format!(
                "tensor quadrature is limited to at most 2 random effects, got {q}"
            )));
        }
        let (x, w) = gauss_hermite(nk)?;
        let k = nk.pow(q as u32);
        let mut nodes = Vec::with_capacity(k * q);
        let mut log_weights = Vec::with_capacity(k);
        for idx in 0..k {
            let mut rest = idx;
            let mut lw = 0.0;
            for _ in 0..q {
                let d = rest % nk;
                rest /= nk;
                nodes.push(x[d]);
                lw += w[d].ln();
            }
            log_weights.push(lw);
        }
        Ok(Self {
            q,
            nodes,
            log_weights,
        })
    }

    fn len(&self) -> usize {
        self.log_weights.len()
    }

    /// Random-effect values S v_k for every node, row-major K x q.
    fn scaled(&self, s: &ReScale) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes.len()];
        for (v, u) in self
            .nodes
            .chunks_exact(self.q)
            .zip(out.chunks_exact_mut(self.q))
        {
            s.apply(v, u);
        }
        out
    }
}

/// Pre-stacked data and quadrature rule for repeated likelihood evaluation.
struct Evaluator {
    st: Stacked,
    tau: f64,
    grid: Grid,
    intercept_only: bool,
}

impl Evaluator {
    fn new(data: &ClusteredDataset, tau: f64, nk: usize) -> Result<Self> {
        Ok(Self {
            st: data.stacked(),
            tau,
            grid: Grid::new(data.q(), nk)?,
            intercept_only: data.is_random_intercept_only(),
        })
    }

    fn residuals(&self, beta: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for row in 0..self.st.n() {
            let fit: f64 = self
                .st
                .x_row(row)
                .iter()
                .zip(beta)
                .map(|(x, b)| x * b)
                .sum();
            out.push(self.st.y[row] - fit);
        }
    }

    /// log w_k - sum_j rho(r_ij - z_ij'u_k) / sigma for every node k.
    fn node_terms(&self, i: usize, r: &[f64], u: &[f64], inv_sigma: f64, out: &mut [f64]) {
        let tau = self.tau;
        let tm1 = tau - 1.0;
        let range = self.st.cluster_range(i);
        let ri = &r[range.clone()];
        let q = self.grid.q;
        if self.intercept_only {
            for (k, o) in out.iter_mut().enumerate() {
                let uk = u[k];
                let mut s = 0.0;
                for &rj in ri {
                    let v = rj - uk;
                    s += (tau * v).max(tm1 * v);
                }
                *o = self.grid.log_weights[k] - s * inv_sigma;
            }
        } else {
            for (k, o) in out.iter_mut().enumerate() {
                let uk = &u[k * q..(k + 1) * q];
                let mut s = 0.0;
                for (row, &rj) in range.clone().zip(ri) {
                    let zu: f64 = self.st.z_row(row).iter().zip(uk).map(|(z, b)| z * b).sum();
                    let v = rj - zu;
                    s += (tau * v).max(tm1 * v);
                }
                *o = self.grid.log_weights[k] - s * inv_sigma;
            }
        }
    }

    fn loglik(&self, beta: &[f64], sigma: f64, scale: &ReScale, r: &mut Vec<f64>) -> Result<f64> {
        self.residuals(beta, r);
        let u = self.grid.scaled(scale);
        let inv_sigma = 1.0 / sigma;
        let log_c = (self.tau * (1.0 - self.tau) / sigma).ln();
        let mut terms = vec![0.0; self.grid.len()];
        let mut total = 0.0;
        for i in 0..self.st.n_clusters() {
            self.node_terms(i, r, &u, inv_sigma, &mut terms);
            let lse = log_sum_exp(&terms);
            let ni = self.st.cluster_range(i).len() as f64;
            let term = ni * log_c + lse;
            if !term.is_finite() {
                return Err(Error::Numerical {
                    cluster: i,
                    message: "non-finite marginal likelihood contribution".into(),
                });
            }
            total += term;
        }
        Ok(total)
    }

    fn posterior_means(&self, beta: &[f64], sigma: f64, scale: &ReScale) -> Result<DMatrix<f64>> {
        let mut r = Vec::new();
        self.residuals(beta, &mut r);
        let q = self.grid.q;
        let u = self.grid.scaled(scale);
        let mut terms = vec![0.0; self.grid.len()];
        let m = self.st.n_clusters();
        let mut out = DMatrix::zeros(m, q);
        for i in 0..m {
            self.node_terms(i, &r, &u, 1.0 / sigma, &mut terms);
            let mx = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let mut numer = vec![0.0; q];
            for (k, &t) in terms.iter().enumerate() {
                let e = (t - mx).exp();
                denom += e;
                for d in 0..q {
                    numer[d] += e * u[k * q + d];
                }
            }
            for d in 0..q {
                let v = numer[d] / denom;
                if !v.is_finite() {
                    return Err(Error::Numerical {
                        cluster: i,
                        message: "non-finite posterior mean".into(),
                    });
                }
                out[(i, d)] = v;
            }
        }
        Ok(out)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY || !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
}

fn check_params(data: &ClusteredDataset, beta: &[f64], sigma: f64, scale: &ReScale) -> Result<()> {
    if beta.len() != data.p() {
        return Err(Error::Dimension(format!(
            "beta has length {}, design has {} columns",
            beta.len(),
            data.p()
        )));
    }
    if scale.q() != data.q() {
        return Err(Error::Dimension(format!(
            "random-effect scale has dimension {}, data has q = {}",
            scale.q(),
            data.q()
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite())
        || !scale.is_valid()
        || beta.iter().any(|b| !b.is_finite())
    {
        return Err(Error::InvalidArgument(
            "invalid working-model parameters".into(),
        ));
    }
    Ok(())
}

/// Gauss–Hermite approximation of the ALD pseudo log-likelihood with the
/// random effects integrated out.
pub fn marginal_loglik(
    beta: &FixedEffects,
    sigma: f64,
    re_scale: &ReScale,
    data: &ClusteredDataset,
    tau: QuantileLevel,
    nk: usize,
) -> Result<f64> {
    check_params(data, beta, sigma, re_scale)?;
    let ev = Evaluator::new(data, tau.value(), nk)?;
    ev.loglik(beta, sigma, re_scale, &mut Vec::new())
}

/// Quadrature posterior means of the random effects (uncentered).
pub fn predict_blp(
    beta: &FixedEffects,
    sigma: f64,
    re_scale: &ReScale,
    data: &ClusteredDataset,
    tau: QuantileLevel,
    nk: usize,
) -> Result<RandomEffects> {
    check_params(data, beta, sigma, re_scale)?;
    let ev = Evaluator::new(data, tau.value(), nk)?;
    Ok(RandomEffects(ev.posterior_means(beta, sigma, re_scale)?))
}

/// Linear predictor Psi Z_i' (Z_i Psi Z_i' + v I)^{-1} (y_i - X_i beta - m 1)
/// with v, m the variance and mean of the ALD error (uncentered).
pub fn predict_blp_linear(
    beta: &FixedEffects,
    sigma: f64,
    re_scale: &ReScale,
    data: &ClusteredDataset,
    tau: QuantileLevel,
) -> Result<RandomEffects> {
    check_params(data, beta, sigma, re_scale)?;
    let t = tau.value();
    let var_e = ald_variance(sigma, t);
    let mean_e = ald_mean(sigma, t);
    let psi = re_scale.covariance();
    let q = data.q();
    let mut out = DMatrix::zeros(data.n_clusters(), q);
    for (i, c) in data.clusters().iter().enumerate() {
        let n = c.len();
        let e = DVector::from_iterator(
            n,
            (0..n).map(|j| {
                let fit: f64 = (0..data.p()).map(|k| c.x[(j, k)] * beta[k]).sum();
                c.y[j] - fit - mean_e
            }),
        );
        let zpsi = &c.z * &psi;
        let mut v = &zpsi * c.z.transpose();
        for j in 0..n {
            v[(j, j)] += var_e;
        }
        let sol = v
            .cholesky()
            .ok_or_else(|| Error::Numerical {
                cluster: i,
                message: "marginal covariance is not positive definite".into(),
            })?
            .solve(&e);
        let u = zpsi.transpose() * sol;
        for d in 0..q {
            out[(i, d)] = u[d];
        }
    }
    Ok(RandomEffects(out))
}

/// Subtracts each column's unweighted mean over clusters.
pub fn center(blp_raw: &RandomEffects) -> RandomEffects {
    let m = blp_raw.0.nrows();
    let mut out = blp_raw.0.clone();
    if m == 0 {
        return RandomEffects(out);
    }
    for d in 0..out.ncols() {
        let mean = out.column(d).iter().sum::<f64>() / m as f64;
        out.column_mut(d).iter_mut().for_each(|v| *v -= mean);
    }
    RandomEffects(out)
}

/// Which random-effect predictor the fit reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BlpKind {
    /// Posterior mean under the working model, by quadrature.
    PosteriorMean,
    /// Linear predictor from the first two moments of the working model.
    Linear,
}

/// Parameters used to seed the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct LqmmStart {
    pub beta: Vec<f64>,
    pub sigma: f64,
    pub re_scale: ReScale,
}

#[derive(Clone, Debug)]
pub struct LqmmOptions {
    pub nk: usize,
    /// Objective evaluations per optimizer run; `None` means 2000 x dimension.
    pub max_evals: Option<usize>,
    pub tol: f64,
    pub blp: BlpKind,
    /// Warm start; the initial simplex is half the default size.
    pub start: Option<LqmmStart>,
    /// Holds the random-effect scale at this value instead of estimating it.
    pub fixed_re_scale: Option<ReScale>,
}

impl Default for LqmmOptions {
    fn default() -> Self {
        Self {
            nk: DEFAULT_NK,
            max_evals: None,
            tol: 1e-6,
            blp: BlpKind::Linear,
            start: None,
            fixed_re_scale: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LqmmFit {
    pub beta: FixedEffects,
    pub sigma: f64,
    pub re_scale: ReScale,
    pub loglik: f64,
    /// Centered predictions, one row per cluster in dataset order.
    #[serde(skip)]
    pub blp: RandomEffects,
    #[serde(skip)]
    pub blp_raw: RandomEffects,
    pub converged: bool,
    pub n_evals: usize,
    pub nk: usize,
    pub tau: f64,
}

impl LqmmFit {
    pub fn start(&self) -> LqmmStart {
        LqmmStart {
            beta: self.beta.to_vec(),
            sigma: self.sigma,
            re_scale: self.re_scale.clone(),
        }
    }
}

/// Maps the unconstrained optimizer vector to working-model parameters.
struct Layout {
    p: usize,
    q: usize,
    fixed: Option<ReScale>,
}

impl Layout {
    fn dim(&self) -> usize {
        self.p
            + 1
            + if self.fixed.is_some() {
                0
            } else {
                self.q * (self.q + 1) / 2
            }
    }

    fn unpack(&self, theta: &[f64]) -> (Vec<f64>, f64, ReScale) {
        let beta = theta[..self.p].to_vec();
        let sigma = theta[self.p].exp().max(SCALE_FLOOR);
        if let Some(s) = &self.fixed {
            return (beta, sigma, s.clone());
        }
        let rest = &theta[self.p + 1..];
        let scale = if self.q == 1 {
            ReScale::Sd(rest[0].exp().max(SCALE_FLOOR))
        } else {
            let q = self.q;
            let mut factor = vec![0.0; q * q];
            let mut k = 0;
            for i in 0..q {
                for j in 0..=i {
                    factor[i * q + j] = if i == j {
                        rest[k].exp().max(SCALE_FLOOR)
                    } else {
                        rest[k]
                    };
                    k += 1;
                }
            }
            ReScale::Cholesky { q, factor }
        };
        (beta, sigma, scale)
    }

    fn pack(&self, beta: &[f64], sigma: f64, scale: &ReScale) -> Vec<f64> {
        let mut theta = beta.to_vec();
        theta.push(sigma.max(SCALE_FLOOR).ln());
        if self.fixed.is_some() {
            return theta;
        }
        match scale {
            ReScale::Sd(phi) => theta.push(phi.max(SCALE_FLOOR).ln()),
            ReScale::Cholesky { q, factor } => {
                for i in 0..*q {
                    for j in 0..=i {
                        let v = factor[i * q + j];
                        theta.push(if i == j { v.max(SCALE_FLOOR).ln() } else { v });
                    }
                }
            }
        }
        theta
    }
}

/// Cheap deterministic starting values from a marginal quantile fit.
fn initial_values(data: &ClusteredDataset, tau: QuantileLevel) -> Result<(LqmmStart, Vec<f64>)> {
    let y = data.y_stacked();
    let x = data.x_stacked();
    let marg = solve_qr(&y, &x, tau, None)?;
    let n = y.len() as f64;
    let sigma = (marg
        .residuals
        .iter()
        .map(|&r| rho(r, tau.value()))
        .sum::<f64>()
        / n)
        .max(SCALE_FLOOR);

    let mut means = Vec::with_capacity(data.n_clusters());
    let mut row = 0;
    for c in data.clusters() {
        let s: f64 = marg.residuals[row..row + c.len()].iter().sum();
        means.push(s / c.len() as f64);
        row += c.len();
    }
    let m = means.len() as f64;
    let mbar = means.iter().sum::<f64>() / m;
    let sd = if means.len() > 1 {
        (means.iter().map(|v| (v - mbar).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    let phi = sd.max(1e-3 * sigma).max(SCALE_FLOOR);

    let col_sd: Vec<f64> = (0..data.p())
        .map(|k| {
            if k == 0 {
                return 1.0;
            }
            let col = x.column(k);
            let mean = col.iter().sum::<f64>() / n;
            let s = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();

    let q = data.q();
    let re_scale = if q == 1 {
        ReScale::Sd(phi / col_rms(&x, data.z_index()[0]))
    } else {
        let mut l = DMatrix::zeros(q, q);
        for (d, &k) in data.z_index().iter().enumerate() {
            l[(d, d)] = phi / col_rms(&x, k);
        }
        ReScale::cholesky(&l)?
    };
    Ok((
        LqmmStart {
            beta: marg.beta,
            sigma,
            re_scale,
        },
        col_sd,
    ))
}

fn col_rms(x: &DMatrix<f64>, k: usize) -> f64 {
    let col = x.column(k);
    let v = (col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64).sqrt();
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

/// Fits the working model and predicts centered random effects.
pub fn fit_lqmm(
    data: &ClusteredDataset,
    tau: QuantileLevel,
    opts: &LqmmOptions,
) -> Result<LqmmFit> {
    if data.n_clusters() < 2 {
        return Err(Error::InvalidData(
            "the mixed model needs at least two clusters".into(),
        ));
    }
    // Clusters are processed in id order so the fit does not depend on labelling order.
    let order = data.canonical_order();
    let canon = data.permuted(&order)?;
    let p = canon.p();
    let q = canon.q();
    let ev = Evaluator::new(&canon, tau.value(), opts.nk)?;

    let (default_start, col_sd) = initial_values(&canon, tau)?;
    let warm = opts.start.is_some();
    let start = match &opts.start {
        Some(s) => {
            check_params(&canon, &s.beta, s.sigma, &s.re_scale)?;
            s.clone()
        }
        None => default_start,
    };
    if let Some(fixed) = &opts.fixed_re_scale {
        check_params(&canon, &start.beta, start.sigma, fixed)?;
    }
    let layout = Layout {
        p,
        q,
        fixed: opts.fixed_re_scale.clone(),
    };
    let theta0 = layout.pack(&start.beta, start.sigma, &start.re_scale);
    let sigma0 = start.sigma;
    let shrink = if warm { 0.5 } else { 1.0 };
    let mut steps: Vec<f64> = (0..layout.dim())
        .map(|k| {
            if k < p {
                (0.1 * theta0[k].abs()).max(0.05 * sigma0 / col_sd[k])
            } else {
                0.1
            }
        })
        .collect();
    steps.iter_mut().for_each(|s| *s *= shrink);

    let mut scratch = Vec::with_capacity(canon.n_obs());
    let mut objective = |theta: &[f64]| {
        let (beta, sigma, scale) = layout.unpack(theta);
        match ev.loglik(&beta, sigma, &scale, &mut scratch) {
            Ok(v) => -v,
            Err(_) => f64::INFINITY,
        }
    };
    let nm_opts = NelderMeadOptions {
        max_evals: opts.max_evals.unwrap_or(2000 * layout.dim()),
        f_tol: opts.tol,
        adaptive: true,
    };
    let mut res = nelder_mead(&mut objective, &theta0, &steps, nm_opts);
    let mut n_evals = res.n_evals;
    if !res.converged {
        steps.iter_mut().for_each(|s| *s *= 0.5);
        let again = nelder_mead(&mut objective, &res.x, &steps, nm_opts);
        n_evals += again.n_evals;
        if again.fx <= res.fx {
            res = again;
        } else {
            res.converged = again.converged;
        }
    }
    if !res.converged {
        log::debug!("working-model optimizer stopped after {n_evals} evaluations");
    }

    let (beta, sigma, re_scale) = layout.unpack(&res.x);
    if sigma <= SCALE_FLOOR {
        log::warn!("working-model scale hit its floor {SCALE_FLOOR}");
    }
    let loglik = ev.loglik(&beta, sigma, &re_scale, &mut scratch)?;
    let beta = FixedEffects(beta);
    let raw_canon = match opts.blp {
        BlpKind::PosteriorMean => RandomEffects(ev.posterior_means(&beta, sigma, &re_scale)?),
        BlpKind::Linear => predict_blp_linear(&beta, sigma, &re_scale, &canon, tau)?,
    };
    let mut raw = DMatrix::zeros(data.n_clusters(), q);
    for (k, &i) in order.iter().enumerate() {
        raw.set_row(i, &raw_canon.0.row(k));
    }
    let blp_raw = RandomEffects(raw);
    let blp = center_sorted(&blp_raw, &order);
    Ok(LqmmFit {
        beta,
        sigma,
        re_scale,
        loglik,
        blp,
        blp_raw,
        converged: res.converged,
        n_evals,
        nk: opts.nk,
        tau: tau.value(),
    })
}

/// Centering with the column means accumulated in `order`.
fn center_sorted(raw: &RandomEffects, order: &[usize]) -> RandomEffects {
    let m = order.len() as f64;
    let mut out = raw.0.clone();
    for d in 0..out.ncols() {
        let mean = order.iter().map(|&i| raw.0[(i, d)]).sum::<f64>() / m;
        out.column_mut(d).iter_mut().for_each(|v| *v -= mean);
    }
    RandomEffects(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClusterBlock, INTERCEPT};
    use approx::assert_relative_eq;

    fn tau(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn intercept_clusters(ys: &[&[f64]]) -> ClusteredDataset {
        let clusters = ys
            .iter()
            .enumerate()
            .map(|(i, y)| ClusterBlock {
                id: format!("c{i}"),
                y: y.to_vec(),
                x: DMatrix::from_element(y.len(), 1, 1.0),
                z: DMatrix::from_element(y.len(), 1, 1.0),
            })
            .collect();
        ClusteredDataset::new(clusters, vec![INTERCEPT.into()], vec![0]).unwrap()
    }

    #[test]
    fn ald_density_values() {
        let p = AldParams::new(0.0, 1.0, 0.1).unwrap();
        assert_relative_eq!(ald_logpdf(0.0, p), 0.09f64.ln(), epsilon = 1e-12);
        let p = AldParams::new(1.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(ald_logpdf(3.0, p), 0.25f64.ln() - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ald_density_integrates_to_one() {
        for (sigma, t) in [(1.0, 0.1), (0.5, 0.5), (2.0, 0.9)] {
            let p = AldParams::new(0.3, sigma, t).unwrap();
            // Trapezoid rule on a grid wide enough for the exponential tails.
            let (lo, hi, m) = (-400.0, 400.0, 2_000_000usize);
            let h = (hi - lo) / m as f64;
            let mut s = 0.0;
            for k in 0..=m {
                let w = if k == 0 || k == m { 0.5 } else { 1.0 };
                s += w * ald_logpdf(lo + k as f64 * h, p).exp();
            }
            assert!((s * h - 1.0).abs() < 1e-6, "integral {}", s * h);
        }
    }

    #[test]
    fn quadrature_moments() {
        let (x, w) = gauss_hermite(15).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert!((m2 - 1.0).abs() < 1e-12);
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m4 - 3.0).abs() < 1e-11);
        let mgf: f64 = x.iter().zip(&w).map(|(x, w)| w * x.exp()).sum();
        assert!((mgf - 0.5f64.exp()).abs() < 1e-8);
        for i in 0..15 {
            assert_eq!(x[i], -x[14 - i]);
        }
        assert!(gauss_hermite(0).is_err());
        assert!(gauss_hermite(65).is_err());
        for nk in [1, 2, 7, 31, 64] {
            let (x, w) = gauss_hermite(nk).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
            if nk > 1 {
                assert!((m2 - 1.0).abs() < 1e-10, "nk {nk}: {m2}");
            }
        }
    }

    #[test]
    fn center_examples() {
        let raw = RandomEffects(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]));
        assert_eq!(center(&raw).0.as_slice(), &[-1.0, 0.0, 1.0]);
        let c = center(&center(&raw));
        assert_eq!(c.0.as_slice(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_scale_reduces_to_independent_density() {
        let data = intercept_clusters(&[&[0.5, 1.5, -0.2], &[2.0, 0.1]]);
        let beta = FixedEffects(vec![0.3]);
        let t = tau(0.25);
        let ll = marginal_loglik(&beta, 0.7, &ReScale::Sd(0.0), &data, t, 15).unwrap();
        let direct: f64 = data
            .y_stacked()
            .iter()
            .map(|&y| ald_logpdf(y, AldParams::new(0.3, 0.7, 0.25).unwrap()))
            .sum();
        assert_relative_eq!(ll, direct, epsilon = 1e-12);
    }

    #[test]
    fn doubling_clusters_doubles_loglik() {
        let data = intercept_clusters(&[&[0.5, 1.5], &[2.0, 0.1, 0.4]]);
        let twice =
            intercept_clusters(&[&[0.5, 1.5], &[2.0, 0.1, 0.4], &[0.5, 1.5], &[2.0, 0.1, 0.4]]);
        let beta = FixedEffects(vec![0.3]);
        let s = ReScale::Sd(0.8);
        let a = marginal_loglik(&beta, 0.7, &s, &data, tau(0.3), 15).unwrap();
        let b = marginal_loglik(&beta, 0.7, &s, &twice, tau(0.3), 15).unwrap();
        assert_eq!(2.0 * a, b);
    }

    #[test]
    fn symmetric_cluster_predicts_zero() {
        let data = intercept_clusters(&[&[1.0, 1.0, 1.0], &[0.0, 2.0]]);
        let beta = FixedEffects(vec![1.0]);
        let s = ReScale::Sd(0.6);
        let blp = predict_blp(&beta, 1.0, &s, &data, tau(0.5), 15).unwrap();
        assert!(blp.0[(0, 0)].abs() < 1e-10);
        let lin = predict_blp_linear(&beta, 1.0, &s, &data, tau(0.5)).unwrap();
        assert!(lin.0[(0, 0)].abs() < 1e-10);
    }

    #[test]
    fn linear_predictor_closed_form_for_intercepts() {
        let data = intercept_clusters(&[&[1.0, 3.0, 2.5], &[0.0, 2.0]]);
        let beta = FixedEffects(vec![0.4]);
        let (sigma, phi, t) = (0.8, 0.6, 0.2);
        let lin = predict_blp_linear(&beta, sigma, &ReScale::Sd(phi), &data, tau(t)).unwrap();
        let (v, m) = (ald_variance(sigma, t), ald_mean(sigma, t));
        for (i, c) in data.clusters().iter().enumerate() {
            let n = c.len() as f64;
            let s: f64 = c.y.iter().map(|y| y - 0.4 - m).sum();
            let expect = phi * phi * s / (v + n * phi * phi);
            assert_relative_eq!(lin.0[(i, 0)], expect, epsilon = 1e-12);
        }
    }
}
