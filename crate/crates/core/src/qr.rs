//! Check-loss minimization.
//!
//! The linear program behind quantile regression is solved in its bounded
//! dual form
//!
//! ```text
//! max  y'a   s.t.  X'a = (1 - tau) X'1,   0 <= a <= 1
//! ```
//!
//! by a Mehrotra predictor-corrector interior point method; the Lagrange
//! multipliers of the equality constraints are the regression coefficients.
//! For dense designs of moderate width the interior solution is then pushed
//! to an exact vertex by a simplex-style descent over interpolating bases.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::data::{ClusteredDataset, FixedEffects, QuantileLevel, RandomEffects};
use crate::error::{Error, Result};

const MAX_IP_ITER: usize = 200;
const GAP_TOL: f64 = 1e-8;
const STEP_FACTOR: f64 = 0.99995;
const MAX_CROSSOVER_WIDTH: usize = 64;

/// rho_tau(v) = v (tau - 1{v < 0}).
#[inline]
pub fn check_loss(v: f64, tau: QuantileLevel) -> f64 {
    rho(v, tau.value())
}

#[inline]
pub(crate) fn rho(v: f64, tau: f64) -> f64 {
    if v < 0.0 {
        (tau - 1.0) * v
    } else {
        tau * v
    }
}

/// Total check loss of `residuals`, summed in index order.
pub fn total_loss(residuals: &[f64], tau: QuantileLevel) -> f64 {
    residuals.iter().map(|&r| check_loss(r, tau)).sum()
}

/// Sum over clusters and observations of rho_tau(y - x'beta - z'u_i).
pub fn objective(
    beta: &FixedEffects,
    u: &RandomEffects,
    data: &ClusteredDataset,
    tau: QuantileLevel,
) -> Result<f64> {
    if beta.len() != data.p() {
        return Err(Error::Dimension(format!(
            "beta has length {}, design has {} columns",
            beta.len(),
            data.p()
        )));
    }
    let offset = data.z_offset(u)?;
    let mut total = 0.0;
    let mut row = 0;
    for c in data.clusters() {
        for j in 0..c.len() {
            let fit: f64 = (0..data.p()).map(|k| c.x[(j, k)] * beta[k]).sum();
            total += check_loss(c.y[j] - fit - offset[row], tau);
            row += 1;
        }
    }
    Ok(total)
}

/// Result of a quantile regression fit.
#[derive(Clone, Debug, Serialize)]
pub struct QrFit {
    pub beta: FixedEffects,
    pub se: Vec<f64>,
    /// Sandwich covariance of `beta`; `se` is the square root of its diagonal.
    #[serde(skip)]
    pub cov: DMatrix<f64>,
    /// y - offset - X beta.
    pub residuals: Vec<f64>,
    pub objective: f64,
    pub tau: f64,
    pub iterations: usize,
}

/// Coefficients, residuals and attained loss without standard errors.
#[derive(Clone, Debug)]
pub struct QrSolution {
    pub beta: Vec<f64>,
    pub residuals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Fits the tau-th conditional quantile of `y - offset` on the columns of `x`,
/// with Hall–Sheather sandwich standard errors.
pub fn fit_qr(
    y: &[f64],
    x: &DMatrix<f64>,
    tau: QuantileLevel,
    offset: Option<&[f64]>,
) -> Result<QrFit> {
    let n = x.nrows();
    let p = x.ncols();
    if n <= p {
        return Err(Error::InvalidArgument(format!(
            "quantile regression needs more observations than coefficients (n = {n}, p = {p})"
        )));
    }
    let sol = solve_qr(y, x, tau, offset)?;
    let target = shifted(y, offset)?;
    let design = DenseDesign::from_matrix(x);
    let cov = sandwich_cov(&target, &design, tau, &sol.beta)?;
    let se = diag_se(&cov);
    Ok(QrFit {
        beta: FixedEffects(sol.beta),
        se,
        cov,
        residuals: sol.residuals,
        objective: sol.objective,
        tau: tau.value(),
        iterations: sol.iterations,
    })
}

/// Point estimate only; used wherever standard errors are not consumed.
pub fn solve_qr(
    y: &[f64],
    x: &DMatrix<f64>,
    tau: QuantileLevel,
    offset: Option<&[f64]>,
) -> Result<QrSolution> {
    let target = shifted(y, offset)?;
    if target.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "{} responses for a design with {} rows",
            target.len(),
            x.nrows()
        )));
    }
    if x.nrows() < x.ncols() || x.ncols() == 0 {
        return Err(Error::SingularDesign(format!(
            "{} rows cannot identify {} coefficients",
            x.nrows(),
            x.ncols()
        )));
    }
    let design = DenseDesign::from_matrix(x);
    solve_dense(&design, &target, tau.value())
}

fn shifted(y: &[f64], offset: Option<&[f64]>) -> Result<Vec<f64>> {
    match offset {
        None => Ok(y.to_vec()),
        Some(o) if o.len() == y.len() => Ok(y.iter().zip(o).map(|(a, b)| a - b).collect()),
        Some(o) => Err(Error::Dimension(format!(
            "offset has length {}, response has {}",
            o.len(),
            y.len()
        ))),
    }
}

pub(crate) fn solve_dense(design: &DenseDesign, y: &[f64], tau: f64) -> Result<QrSolution> {
    if crate::data::numerical_rank(&design.to_matrix()) < design.p {
        return Err(Error::SingularDesign(format!(
            "design with {} columns is rank deficient",
            design.p
        )));
    }
    let ip = interior_point(design, y, tau)?;
    let mut basis = Vec::new();
    let beta = if design.p <= MAX_CROSSOVER_WIDTH {
        match crossover(design, y, tau, &ip.beta) {
            Some((b, h)) => {
                basis = h;
                b
            }
            None if ip.converged => ip.beta,
            None => {
                return Err(Error::Solver {
                    iterations: ip.iterations,
                    gap: ip.gap,
                })
            }
        }
    } else if ip.converged {
        ip.beta
    } else {
        return Err(Error::Solver {
            iterations: ip.iterations,
            gap: ip.gap,
        });
    };
    let mut fitted = vec![0.0; design.n];
    design.mul(&beta, &mut fitted);
    let mut residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    // Interpolated rows are exact zeros of the vertex solution.
    for &i in &basis {
        residuals[i] = 0.0;
    }
    let objective = residuals.iter().map(|&r| rho(r, tau)).sum();
    Ok(QrSolution {
        beta,
        residuals,
        objective,
        iterations: ip.iterations,
    })
}

/// A design matrix as seen by the interior point method.
pub(crate) trait LpDesign {
    type Factor: NormalFactor;

    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// out = X b
    fn mul(&self, b: &[f64], out: &mut [f64]);
    /// out = X' v
    fn tmul(&self, v: &[f64], out: &mut [f64]);
    /// Factorizes X' diag(d) X.
    fn factor(&self, d: &[f64]) -> Result<Self::Factor>;
}

pub(crate) trait NormalFactor {
    fn solve(&self, rhs: &[f64]) -> Vec<f64>;
}

/// Cholesky factor of a small symmetric positive definite matrix; a
/// vanishing diagonal jitter is added when the plain factorization fails.
pub(crate) struct DenseFactor(nalgebra::Cholesky<f64, nalgebra::Dyn>);

impl DenseFactor {
    pub fn new(mut m: DMatrix<f64>) -> Result<Self> {
        if let Some(c) = m.clone().cholesky() {
            return Ok(Self(c));
        }
        let scale = (0..m.nrows())
            .map(|i| m[(i, i)].abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        let mut jitter = scale * 1e-14;
        for _ in 0..8 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            if let Some(c) = m.clone().cholesky() {
                return Ok(Self(c));
            }
            jitter *= 100.0;
        }
        Err(Error::SingularDesign(
            "normal equations are not positive definite".into(),
        ))
    }
}

impl NormalFactor for DenseFactor {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.0
            .solve(&DVector::from_column_slice(rhs))
            .as_slice()
            .to_vec()
    }
}

/// Row-major dense design.
#[derive(Clone, Debug)]
pub(crate) struct DenseDesign {
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl DenseDesign {
    pub fn from_matrix(x: &DMatrix<f64>) -> Self {
        let (n, p) = x.shape();
        let mut data = Vec::with_capacity(n * p);
        for i in 0..n {
            data.extend(x.row(i).iter());
        }
        Self { n, p, data }
    }

    pub fn from_rows(n: usize, p: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * p);
        Self { n, p, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.p, &self.data)
    }

    fn weighted_gram(&self, d: &[f64]) -> DMatrix<f64> {
        let p = self.p;
        let mut g = DMatrix::zeros(p, p);
        for i in 0..self.n {
            let x = self.row(i);
            let w = d[i];
            for a in 0..p {
                let wa = w * x[a];
                for b in 0..=a {
                    g[(a, b)] += wa * x[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                g[(b, a)] = g[(a, b)];
            }
        }
        g
    }
}

impl LpDesign for DenseDesign {
    type Factor = DenseFactor;

    fn nrows(&self) -> usize {
        self.n
    }

    fn ncols(&self) -> usize {
        self.p
    }

    fn mul(&self, b: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).iter().zip(b).map(|(x, c)| x * c).sum();
        }
    }

    fn tmul(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.row(i)) {
                *o += x * vi;
            }
        }
    }

    fn factor(&self, d: &[f64]) -> Result<DenseFactor> {
        DenseFactor::new(self.weighted_gram(d))
    }
}

/// `[X | cluster indicators]` stacked over `2N` penalty rows `(0, +-lambda e_k)`.
///
/// Check loss on the two penalty rows of cluster k sums to lambda |u_k|, so
/// the augmented problem is the l1-penalized fit with cluster intercepts.
/// Normal equations are reduced to the fixed block by a Schur complement.
pub(crate) struct ClusterPenaltyDesign<'a> {
    pub x: &'a DenseDesign,
    pub cluster: &'a [usize],
    pub n_clusters: usize,
    pub lambda: f64,
}

pub(crate) struct ClusterPenaltyFactor {
    schur: DenseFactor,
    cross: DMatrix<f64>,
    diag: Vec<f64>,
    p: usize,
}

impl NormalFactor for ClusterPenaltyFactor {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let p = self.p;
        let (r1, r2) = rhs.split_at(p);
        let mut reduced = r1.to_vec();
        for (k, (&r, &e)) in r2.iter().zip(&self.diag).enumerate() {
            let s = r / e;
            for a in 0..p {
                reduced[a] -= self.cross[(a, k)] * s;
            }
        }
        let b = self.schur.solve(&reduced);
        let mut out = b.clone();
        for (k, (&r, &e)) in r2.iter().zip(&self.diag).enumerate() {
            let cb: f64 = (0..p).map(|a| self.cross[(a, k)] * b[a]).sum();
            out.push((r - cb) / e);
        }
        out
    }
}

impl LpDesign for ClusterPenaltyDesign<'_> {
    type Factor = ClusterPenaltyFactor;

    fn nrows(&self) -> usize {
        self.x.n + 2 * self.n_clusters
    }

    fn ncols(&self) -> usize {
        self.x.p + self.n_clusters
    }

    fn mul(&self, b: &[f64], out: &mut [f64]) {
        let (n, p, m) = (self.x.n, self.x.p, self.n_clusters);
        let (beta, u) = b.split_at(p);
        for i in 0..n {
            out[i] = self
                .x
                .row(i)
                .iter()
                .zip(beta)
                .map(|(x, c)| x * c)
                .sum::<f64>()
                + u[self.cluster[i]];
        }
        for k in 0..m {
            out[n + k] = self.lambda * u[k];
            out[n + m + k] = -self.lambda * u[k];
        }
    }

    fn tmul(&self, v: &[f64], out: &mut [f64]) {
        let (n, p, m) = (self.x.n, self.x.p, self.n_clusters);
        out.iter_mut().for_each(|o| *o = 0.0);
        let (ob, ou) = out.split_at_mut(p);
        for i in 0..n {
            for (o, x) in ob.iter_mut().zip(self.x.row(i)) {
                *o += x * v[i];
            }
            ou[self.cluster[i]] += v[i];
        }
        for k in 0..m {
            ou[k] += self.lambda * (v[n + k] - v[n + m + k]);
        }
    }

    fn factor(&self, d: &[f64]) -> Result<ClusterPenaltyFactor> {
        let (n, p, m) = (self.x.n, self.x.p, self.n_clusters);
        let mut gram = self.x.weighted_gram(&d[..n]);
        let mut cross = DMatrix::zeros(p, m);
        let mut diag = vec![0.0; m];
        for i in 0..n {
            let c = self.cluster[i];
            for (a, x) in self.x.row(i).iter().enumerate() {
                cross[(a, c)] += d[i] * x;
            }
            diag[c] += d[i];
        }
        let l2 = self.lambda * self.lambda;
        for k in 0..m {
            diag[k] += l2 * (d[n + k] + d[n + m + k]);
            if !(diag[k] > 0.0) {
                return Err(Error::SingularDesign(format!("cluster {k} has no rows")));
            }
        }
        for a in 0..p {
            for b in 0..=a {
                let s: f64 = (0..m)
                    .map(|k| cross[(a, k)] * cross[(b, k)] / diag[k])
                    .sum();
                gram[(a, b)] -= s;
                if a != b {
                    gram[(b, a)] -= s;
                }
            }
        }
        Ok(ClusterPenaltyFactor {
            schur: DenseFactor::new(gram)?,
            cross,
            diag,
            p,
        })
    }
}

pub(crate) struct IpResult {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub gap: f64,
    pub converged: bool,
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, &d)| d < 0.0)
        .map(|(&x, &d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

/// Primal-dual predictor-corrector iterations on the bounded dual.
pub(crate) fn interior_point<D: LpDesign>(design: &D, y: &[f64], tau: f64) -> Result<IpResult> {
    let n = design.nrows();
    let p = design.ncols();

    let mut rhs_b = vec![0.0; p];
    design.tmul(&vec![1.0 - tau; n], &mut rhs_b);

    // Least squares start.
    let ls = design.factor(&vec![1.0; n])?;
    let mut xty = vec![0.0; p];
    design.tmul(y, &mut xty);
    let mut beta = ls.solve(&xty);

    let mut fitted = vec![0.0; n];
    design.mul(&beta, &mut fitted);
    let r: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let mean_abs = r.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let scale_y = y.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let delta = (0.5 * mean_abs).max(1e-8 * (1.0 + scale_y));

    let mut a = vec![1.0 - tau; n];
    let mut s = vec![tau; n];
    let mut w: Vec<f64> = r.iter().map(|&v| v.max(0.0) + delta).collect();
    let mut z: Vec<f64> = r.iter().map(|&v| (-v).max(0.0) + delta).collect();

    let mut q = vec![0.0; n];
    let mut rt = vec![0.0; n];
    let mut tmp_p = vec![0.0; p];
    let mut xd = vec![0.0; n];
    let mut rp = vec![0.0; n];

    let mut gap = dot(&a, &z) + dot(&s, &w);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < MAX_IP_ITER {
        let primal: f64 = tau * w.iter().sum::<f64>() + (1.0 - tau) * z.iter().sum::<f64>();
        if gap <= GAP_TOL || gap <= 1e-13 * (1.0 + primal.abs()) {
            converged = true;
            break;
        }
        iterations += 1;

        design.mul(&beta, &mut fitted);
        for i in 0..n {
            rp[i] = y[i] - fitted[i] - w[i] + z[i];
        }
        design.tmul(&a, &mut tmp_p);
        let rb: Vec<f64> = rhs_b.iter().zip(&tmp_p).map(|(b, x)| b - x).collect();

        for i in 0..n {
            q[i] = 1.0 / (w[i] / s[i] + z[i] / a[i]);
        }
        let factor = design.factor(&q)?;

        // Solves the Newton system for complementarity targets (rza, rws).
        let mut direction = |rza: &dyn Fn(usize) -> f64,
                             rws: &dyn Fn(usize) -> f64|
         -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
            for i in 0..n {
                rt[i] = rp[i] - rws(i) / s[i] + rza(i) / a[i];
            }
            let qr_: Vec<f64> = (0..n).map(|i| q[i] * rt[i]).collect();
            design.tmul(&qr_, &mut tmp_p);
            let rhs: Vec<f64> = tmp_p.iter().zip(&rb).map(|(u, v)| u - v).collect();
            let db = factor.solve(&rhs);
            design.mul(&db, &mut xd);
            let mut da = vec![0.0; n];
            let mut dz = vec![0.0; n];
            let mut dw = vec![0.0; n];
            for i in 0..n {
                da[i] = q[i] * (rt[i] - xd[i]);
                dz[i] = (rza(i) - z[i] * da[i]) / a[i];
                dw[i] = (rws(i) + w[i] * da[i]) / s[i];
            }
            (db, da, dz, dw)
        };

        let (_, da_aff, dz_aff, dw_aff) = direction(&|i| -a[i] * z[i], &|i| -s[i] * w[i]);
        let ds_aff: Vec<f64> = da_aff.iter().map(|v| -v).collect();
        let ap = max_step(&a, &da_aff).min(max_step(&s, &ds_aff)).min(1.0);
        let ad = max_step(&z, &dz_aff).min(max_step(&w, &dw_aff)).min(1.0);
        let mut mu_aff = 0.0;
        for i in 0..n {
            mu_aff += (a[i] + ap * da_aff[i]) * (z[i] + ad * dz_aff[i])
                + (s[i] + ap * ds_aff[i]) * (w[i] + ad * dw_aff[i]);
        }
        let sigma = (mu_aff / gap).clamp(0.0, 1.0).powi(3);
        let mu = sigma * gap / (2 * n) as f64;

        let (db, da, dz, dw) = direction(&|i| mu - a[i] * z[i] - da_aff[i] * dz_aff[i], &|i| {
            mu - s[i] * w[i] - ds_aff[i] * dw_aff[i]
        });
        let ds: Vec<f64> = da.iter().map(|v| -v).collect();
        let ap = (STEP_FACTOR * max_step(&a, &da).min(max_step(&s, &ds))).min(1.0);
        let ad = (STEP_FACTOR * max_step(&z, &dz).min(max_step(&w, &dw))).min(1.0);

        for i in 0..n {
            a[i] += ap * da[i];
            s[i] += ap * ds[i];
            z[i] += ad * dz[i];
            w[i] += ad * dw[i];
        }
        for (b, d) in beta.iter_mut().zip(&db) {
            *b += ad * d;
        }
        let new_gap = dot(&a, &z) + dot(&s, &w);
        if !new_gap.is_finite() {
            break;
        }
        let stalled = ap < 1e-10 && ad < 1e-10;
        gap = new_gap;
        if stalled {
            break;
        }
    }
    if !converged {
        let primal: f64 = tau * w.iter().sum::<f64>() + (1.0 - tau) * z.iter().sum::<f64>();
        converged = gap <= GAP_TOL || gap <= 1e-13 * (1.0 + primal.abs());
    }
    Ok(IpResult {
        beta,
        iterations,
        gap,
        converged,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Moves from an approximate minimizer to an optimal vertex: picks an
/// interpolating basis among the smallest residuals and descends along
/// edges until no edge direction improves the loss.
fn crossover(
    design: &DenseDesign,
    y: &[f64],
    tau: f64,
    start: &[f64],
) -> Option<(Vec<f64>, Vec<usize>)> {
    let n = design.n;
    let p = design.p;
    let mut fitted = vec![0.0; n];
    design.mul(start, &mut fitted);
    let r0: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| r0[i].abs().total_cmp(&r0[j].abs()).then(i.cmp(&j)));
    let mut basis = Vec::with_capacity(p);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(p);
    for &i in &order {
        let mut v = design.row(i).to_vec();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for e in &ortho {
            let c = dot(&v, e);
            v.iter_mut().zip(e).for_each(|(x, ei)| *x -= c * ei);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            ortho.push(v);
            basis.push(i);
            if basis.len() == p {
                break;
            }
        }
    }
    if basis.len() < p {
        return None;
    }

    let scale_y = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let zero_tol = 1e-12 * scale_y;
    let mut g = vec![0.0; n * p];
    let max_pivots = 50 * n + 1000;

    for _ in 0..max_pivots {
        let bmat = DMatrix::from_fn(p, p, |a, b| design.row(basis[a])[b]);
        let binv = bmat.try_inverse()?;
        let yb = DVector::from_iterator(p, basis.iter().map(|&i| y[i]));
        let beta = &binv * yb;
        let beta = beta.as_slice();
        if beta.iter().any(|b| !b.is_finite()) {
            return None;
        }
        design.mul(beta, &mut fitted);
        let mut r: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        for v in r.iter_mut() {
            if v.abs() <= zero_tol {
                *v = 0.0;
            }
        }
        let mut is_basic = vec![false; n];
        for &i in &basis {
            r[i] = 0.0;
            is_basic[i] = true;
        }

        // g = X B^{-1}, row-major.
        for i in 0..n {
            let x = design.row(i);
            for k in 0..p {
                g[i * p + k] = (0..p).map(|a| x[a] * binv[(a, k)]).sum();
            }
        }

        let mut best: Option<(f64, usize, f64)> = None;
        for k in 0..p {
            for sign in [1.0, -1.0] {
                let mut slope = if sign > 0.0 { 1.0 - tau } else { tau };
                let mut scale = slope;
                for i in 0..n {
                    if is_basic[i] {
                        continue;
                    }
                    let gi = sign * g[i * p + k];
                    scale += gi.abs();
                    // A zero residual moves to whichever side the step pushes it.
                    let below = r[i] < 0.0 || (r[i] == 0.0 && gi > 0.0);
                    slope += if below { (1.0 - tau) * gi } else { -tau * gi };
                }
                if slope < -1e-12 * scale && best.is_none_or(|(s, _, _)| slope < s) {
                    best = Some((slope, k, sign));
                }
            }
        }
        let Some((slope0, k, sign)) = best else {
            return Some((beta.to_vec(), basis));
        };

        let mut breaks: Vec<(f64, f64, usize)> = (0..n)
            .filter(|&i| !is_basic[i] && r[i] != 0.0)
            .filter_map(|i| {
                let gi = sign * g[i * p + k];
                let t = r[i] / gi;
                (gi != 0.0 && t > 0.0).then_some((t, gi.abs(), i))
            })
            .collect();
        breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let mut slope = slope0;
        let mut entering = None;
        for &(_, dg, i) in &breaks {
            slope += dg;
            if slope >= 0.0 {
                entering = Some(i);
                break;
            }
        }
        basis[k] = entering?;
    }
    None
}

/// Exhaustive search over interpolating subsets; a test oracle for small problems.
pub fn brute_force_qr(y: &[f64], x: &DMatrix<f64>, tau: QuantileLevel) -> Result<FixedEffects> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Dimension(format!(
            "{} responses for {n} design rows",
            y.len()
        )));
    }
    if n > 15 || p > 3 || p == 0 || n < p {
        return Err(Error::InvalidArgument(format!(
            "brute-force search needs p <= n <= 15 and 1 <= p <= 3 (n = {n}, p = {p})"
        )));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx: Vec<usize> = (0..p).collect();
    loop {
        let sub = DMatrix::from_fn(p, p, |a, b| x[(idx[a], b)]);
        let rhs = DVector::from_iterator(p, idx.iter().map(|&i| y[i]));
        let lu = sub.lu();
        let det = lu.determinant();
        let scale: f64 = idx
            .iter()
            .map(|&i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .product();
        if det.abs() > 1e-12 * scale.max(1e-300) {
            if let Some(b) = lu.solve(&rhs) {
                let obj: f64 = (0..n)
                    .map(|i| {
                        let fit: f64 = (0..p).map(|k| x[(i, k)] * b[k]).sum();
                        check_loss(y[i] - fit, tau)
                    })
                    .sum();
                if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                    best = Some((obj, b.as_slice().to_vec()));
                }
            }
        }
        // Next combination in lexicographic order.
        let mut k = p;
        loop {
            if k == 0 {
                return best
                    .map(|(_, b)| FixedEffects(b))
                    .ok_or(Error::DegenerateDesign { p });
            }
            k -= 1;
            if idx[k] < n - p + k {
                idx[k] += 1;
                for m in k + 1..p {
                    idx[m] = idx[m - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Hall–Sheather bandwidth on the probability scale with alpha = 0.05.
pub fn hall_sheather_bandwidth(tau: f64, n: usize) -> f64 {
    let std = Normal::standard();
    let z_alpha = std.inverse_cdf(0.975);
    let x0 = std.inverse_cdf(tau);
    let f0 = std.pdf(x0);
    (n as f64).powf(-1.0 / 3.0)
        * z_alpha.powf(2.0 / 3.0)
        * (1.5 * f0 * f0 / (2.0 * x0 * x0 + 1.0)).powf(1.0 / 3.0)
}

/// Sandwich standard errors with difference-quotient density estimates.
pub fn standard_errors(
    y: &[f64],
    x: &DMatrix<f64>,
    tau: QuantileLevel,
    beta_hat: &FixedEffects,
) -> Result<Vec<f64>> {
    let design = DenseDesign::from_matrix(x);
    let cov = sandwich_cov(y, &design, tau, beta_hat)?;
    Ok(diag_se(&cov))
}

/// Square roots of the diagonal; NaN entries stay NaN.
fn diag_se(cov: &DMatrix<f64>) -> Vec<f64> {
    cov.diagonal()
        .iter()
        .map(|&v| if v.is_nan() { v } else { v.max(0.0).sqrt() })
        .collect()
}

fn sandwich_cov(
    y: &[f64],
    design: &DenseDesign,
    tau: QuantileLevel,
    beta_hat: &[f64],
) -> Result<DMatrix<f64>> {
    let (n, p) = (design.n, design.p);
    if n <= p {
        return Err(Error::InvalidArgument(format!(
            "standard errors need n > p (n = {n}, p = {p})"
        )));
    }
    if beta_hat.len() != p {
        return Err(Error::Dimension(format!(
            "beta has length {}, design has {p} columns",
            beta_hat.len()
        )));
    }
    let t = tau.value();
    let mut h = hall_sheather_bandwidth(t, n);
    let h_max = (t - 0.001).min(0.999 - t);
    if h > h_max {
        let clipped = if h_max > 0.0 {
            h_max
        } else {
            0.5 * t.min(1.0 - t)
        };
        log::warn!("bandwidth {h:.4} at tau = {t} clipped to {clipped:.4}");
        h = clipped;
    }
    let hi = solve_dense(design, y, t + h)?.beta;
    let lo = solve_dense(design, y, t - h)?.beta;
    let diff: Vec<f64> = hi.iter().zip(&lo).map(|(a, b)| a - b).collect();
    let mut dyhat = vec![0.0; n];
    design.mul(&diff, &mut dyhat);
    let f: Vec<f64> = dyhat
        .iter()
        .map(|&d| {
            if d > f64::EPSILON {
                2.0 * h / d
            } else {
                f64::EPSILON
            }
        })
        .collect();
    let hmat = design.weighted_gram(&f);
    let jmat = design.weighted_gram(&vec![1.0; n]);
    let Some(hinv) = hmat.try_inverse() else {
        // Degenerate density estimates (tiny samples); the point estimate stands.
        log::warn!(
            "density-weighted Gram matrix is singular at tau = {t}; standard errors unavailable"
        );
        return Ok(DMatrix::from_element(p, p, f64::NAN));
    };
    let mut cov = &hinv * jmat * &hinv;
    cov *= t * (1.0 - t);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn tau(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn ones(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    #[test]
    fn check_loss_values() {
        assert_eq!(check_loss(-2.0, tau(0.5)), 1.0);
        assert_relative_eq!(check_loss(-1.0, tau(0.1)), 0.9, epsilon = 1e-15);
        assert_relative_eq!(check_loss(2.0, tau(0.1)), 0.2, epsilon = 1e-15);
        assert_eq!(check_loss(0.0, tau(0.3)), 0.0);
    }

    #[test]
    fn sample_median() {
        let fit = fit_qr(&[1.0, 2.0, 3.0], &ones(3), tau(0.5), None).unwrap();
        assert_relative_eq!(fit.beta[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(fit.objective, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lower_quartile_objective_on_flat_segment() {
        let y = [1.0, 2.0, 3.0, 4.0];
        // Breakpoint oracle: the loss is piecewise linear in beta with kinks at the data.
        let oracle = y
            .iter()
            .map(|&b| y.iter().map(|&v| rho(v - b, 0.25)).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(oracle, 1.5, epsilon = 1e-12);
        let fit = fit_qr(&y, &ones(4), tau(0.25), None).unwrap();
        assert!((fit.objective - 1.5).abs() < 1e-8);
        assert!((1.0 - 1e-8..=2.0 + 1e-8).contains(&fit.beta[0]));
    }

    #[test]
    fn exactly_determined_brute_force() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let b = brute_force_qr(&[1.0, 3.0], &x, tau(0.3)).unwrap();
        assert_relative_eq!(b[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(b[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_design_detected() {
        let x = DMatrix::from_element(4, 1, 0.0);
        assert!(matches!(
            brute_force_qr(&[1.0, 2.0, 3.0, 4.0], &x, tau(0.5)),
            Err(Error::DegenerateDesign { p: 1 })
        ));
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(
            fit_qr(&[1.0, 2.0, 3.0], &x, tau(0.5), None),
            Err(Error::SingularDesign(_))
        ));
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..200 {
            let n = rng.random_range(4..=12);
            let p = rng.random_range(1..=3);
            let t = [0.1, 0.25, 0.5, 0.9][case % 4];
            let x = DMatrix::from_fn(n, p, |_, k| {
                if k == 0 {
                    1.0
                } else {
                    rng.sample::<f64, _>(StandardNormal)
                }
            });
            let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let bf = brute_force_qr(&y, &x, tau(t)).unwrap();
            let obj_bf: f64 = (0..n)
                .map(|i| rho(y[i] - (0..p).map(|k| x[(i, k)] * bf[k]).sum::<f64>(), t))
                .sum();
            let sol = solve_qr(&y, &x, tau(t), None).unwrap();
            assert!(
                (sol.objective - obj_bf).abs() <= 1e-8,
                "case {case}: {} vs {obj_bf}",
                sol.objective
            );
        }
    }

    #[test]
    fn subgradient_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let x = DMatrix::from_fn(n, 3, |_, k| if k == 0 { 1.0 } else { rng.random::<f64>() });
        let y: Vec<f64> = (0..n)
            .map(|i| x[(i, 1)] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        for t in [0.1, 0.5, 0.9] {
            let sol = solve_qr(&y, &x, tau(t), None).unwrap();
            let neg = sol.residuals.iter().filter(|&&r| r < 0.0).count() as f64;
            let nonpos = sol.residuals.iter().filter(|&&r| r <= 0.0).count() as f64;
            assert!(neg <= n as f64 * t + 1e-9);
            assert!(nonpos >= n as f64 * t - 3.0);
        }
    }

    #[test]
    fn hall_sheather_se_matches_asymptotics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 1000;
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let std = Normal::standard();
        for t in [0.5, 0.1] {
            let fit = fit_qr(&y, &ones(n), tau(t), None).unwrap();
            let q = std.inverse_cdf(t);
            let asym = (t * (1.0 - t)).sqrt() / std.pdf(q) / (n as f64).sqrt();
            assert!(
                (fit.se[0] / asym - 1.0).abs() < 0.25,
                "tau {t}: se {} vs {asym}",
                fit.se[0]
            );
        }
    }

    #[test]
    fn duplicated_rows_shrink_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 500;
        let x = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.random::<f64>() });
        let y: Vec<f64> = (0..n)
            .map(|i| x[(i, 1)] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let base = fit_qr(&y, &x, tau(0.5), None).unwrap();
        let x2 = DMatrix::from_fn(2 * n, 2, |i, k| x[(i % n, k)]);
        let y2: Vec<f64> = (0..2 * n).map(|i| y[i % n]).collect();
        let dup = fit_qr(&y2, &x2, tau(0.5), None).unwrap();
        for k in 0..2 {
            let ratio = dup.se[k] / base.se[k];
            assert!((ratio * 2f64.sqrt() - 1.0).abs() < 0.10, "ratio {ratio}");
        }
    }

    #[test]
    fn objective_matches_residual_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 300;
        let x = DMatrix::from_fn(n, 2, |_, k| if k == 0 { 1.0 } else { rng.random::<f64>() });
        let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let fit = fit_qr(&y, &x, tau(0.2), None).unwrap();
        let recomputed = total_loss(&fit.residuals, tau(0.2));
        assert!((fit.objective - recomputed).abs() <= 1e-10 * recomputed.max(1.0));
        assert!(fit.se.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn penalized_design_products_are_adjoint() {
        let x = DenseDesign::from_rows(4, 2, vec![1.0, 0.5, 1.0, -1.0, 1.0, 2.0, 1.0, 0.0]);
        let cluster = [0, 0, 1, 1];
        let d = ClusterPenaltyDesign {
            x: &x,
            cluster: &cluster,
            n_clusters: 2,
            lambda: 0.7,
        };
        let b = [0.3, -1.2, 0.4, 2.0];
        let v = [1.0, -2.0, 0.5, 0.25, 3.0, -1.0, 0.1, 0.2];
        let mut xb = vec![0.0; 8];
        d.mul(&b, &mut xb);
        let mut xtv = vec![0.0; 4];
        d.tmul(&v, &mut xtv);
        assert_relative_eq!(dot(&xb, &v), dot(&b, &xtv), epsilon = 1e-12);

        // Factor solve against a dense normal matrix.
        let weights = [0.5, 1.0, 2.0, 0.25, 1.5, 0.75, 1.25, 0.6];
        let dense = DMatrix::from_fn(8, 4, |i, j| {
            let mut e = vec![0.0; 4];
            e[j] = 1.0;
            let mut col = vec![0.0; 8];
            d.mul(&e, &mut col);
            col[i]
        });
        let normal =
            dense.transpose() * DMatrix::from_diagonal(&DVector::from_row_slice(&weights)) * &dense;
        let rhs = [1.0, 2.0, -1.0, 0.5];
        let expect = normal.lu().solve(&DVector::from_row_slice(&rhs)).unwrap();
        let got = d.factor(&weights).unwrap().solve(&rhs);
        for k in 0..4 {
            assert_relative_eq!(got[k], expect[k], epsilon = 1e-10);
        }
    }
}
