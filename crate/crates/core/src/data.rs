//! Clustered-data representation, validation and CSV ingestion.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name given to the implicit all-ones column of every fixed-effect design.
pub const INTERCEPT: &str = "(Intercept)";

fn is_intercept_alias(name: &str) -> bool {
    matches!(
        name.trim().to_ascii_lowercase().as_str(),
        "(intercept)" | "intercept" | "1"
    )
}

/// A quantile level strictly inside (0, 1).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidArgument(format!(
                "quantile level must lie in (0, 1), got {tau}"
            )))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Population-level coefficients, one per column of the fixed-effect design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedEffects(pub Vec<f64>);

impl FixedEffects {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.iter().all(|b| b.is_finite()) {
            Ok(Self(beta))
        } else {
            Err(Error::InvalidArgument(
                "fixed effects must be finite".into(),
            ))
        }
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FixedEffects {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for FixedEffects {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

/// Cluster-specific deviations: an N x q matrix, row i for cluster i.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomEffects(pub DMatrix<f64>);

impl RandomEffects {
    pub fn new(u: DMatrix<f64>) -> Result<Self> {
        if u.iter().all(|v| v.is_finite()) {
            Ok(Self(u))
        } else {
            Err(Error::InvalidArgument(
                "random effects must be finite".into(),
            ))
        }
    }

    pub fn zeros(n_clusters: usize, q: usize) -> Self {
        Self(DMatrix::zeros(n_clusters, q))
    }

    pub fn n_clusters(&self) -> usize {
        self.0.nrows()
    }

    pub fn q(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }
}

/// One cluster: its responses and fixed/random-effect design rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterBlock {
    pub id: String,
    pub y: Vec<f64>,
    /// n_i x p, first column all ones.
    pub x: DMatrix<f64>,
    /// n_i x q, each column a copy of some column of `x`.
    pub z: DMatrix<f64>,
}

impl ClusterBlock {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Cluster-major stacking of a dataset with row-major design matrices, used
/// by the numerical kernels.
#[derive(Clone, Debug)]
pub(crate) struct Stacked {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub starts: Vec<usize>,
    pub p: usize,
    pub q: usize,
}

impl Stacked {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.starts.len() - 1
    }

    #[inline]
    pub fn x_row(&self, row: usize) -> &[f64] {
        &self.x[row * self.p..(row + 1) * self.p]
    }

    #[inline]
    pub fn z_row(&self, row: usize) -> &[f64] {
        &self.z[row * self.q..(row + 1) * self.q]
    }

    pub fn cluster_range(&self, i: usize) -> std::ops::Range<usize> {
        self.starts[i]..self.starts[i + 1]
    }
}

/// An ordered collection of clusters sharing one design layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusteredDataset {
    clusters: Vec<ClusterBlock>,
    x_names: Vec<String>,
    z_index: Vec<usize>,
    response_name: String,
    cluster_name: String,
}

impl ClusteredDataset {
    /// Builds a dataset, checking every structural invariant.
    ///
    /// `x_names` labels the columns of X (the first one is the intercept) and
    /// `z_index[k]` is the column of X that Z column k copies.
    pub fn new(
        clusters: Vec<ClusterBlock>,
        x_names: Vec<String>,
        z_index: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            clusters,
            x_names,
            z_index,
            response_name: "y".into(),
            cluster_name: "cluster".into(),
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn with_column_names(mut self, response: &str, cluster: &str) -> Self {
        self.response_name = response.into();
        self.cluster_name = cluster.into();
        self
    }

    fn check(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::InvalidData("dataset has no clusters".into()));
        }
        let p = self.x_names.len();
        let q = self.z_index.len();
        if p == 0 {
            return Err(Error::InvalidData(
                "fixed-effect design has no columns".into(),
            ));
        }
        if q == 0 || q > p {
            return Err(Error::InvalidData(format!(
                "random-effect dimension must satisfy 1 <= q <= p, got q = {q}, p = {p}"
            )));
        }
        if let Some(&bad) = self.z_index.iter().find(|&&k| k >= p) {
            return Err(Error::InvalidData(format!(
                "random-effect column maps to missing fixed column {bad}"
            )));
        }
        let mut seen = HashMap::with_capacity(self.clusters.len());
        for (i, c) in self.clusters.iter().enumerate() {
            if let Some(prev) = seen.insert(c.id.as_str(), i) {
                return Err(Error::InvalidData(format!(
                    "duplicate cluster id `{}` (clusters {prev} and {i})",
                    c.id
                )));
            }
            let n = c.y.len();
            if n == 0 {
                return Err(Error::InvalidData(format!("cluster `{}` is empty", c.id)));
            }
            if c.x.nrows() != n || c.x.ncols() != p || c.z.nrows() != n || c.z.ncols() != q {
                return Err(Error::Dimension(format!(
                    "cluster `{}`: y has {n} rows, X is {}x{}, Z is {}x{} (expected p = {p}, q = {q})",
                    c.id,
                    c.x.nrows(),
                    c.x.ncols(),
                    c.z.nrows(),
                    c.z.ncols()
                )));
            }
            if !(c.y.iter().all(|v| v.is_finite())
                && c.x.iter().all(|v| v.is_finite())
                && c.z.iter().all(|v| v.is_finite()))
            {
                return Err(Error::InvalidData(format!(
                    "cluster `{}` contains non-finite values",
                    c.id
                )));
            }
            if c.x.column(0).iter().any(|&v| v != 1.0) {
                return Err(Error::InvalidData(format!(
                    "cluster `{}`: first column of X must be identically 1",
                    c.id
                )));
            }
            for (k, &col) in self.z_index.iter().enumerate() {
                if c.z.column(k) != c.x.column(col) {
                    return Err(Error::InvalidData(format!(
                        "cluster `{}`: Z column {k} does not match X column {col}",
                        c.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn clusters(&self) -> &[ClusterBlock] {
        &self.clusters
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).sum()
    }

    pub fn p(&self) -> usize {
        self.x_names.len()
    }

    pub fn q(&self) -> usize {
        self.z_index.len()
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_names(&self) -> Vec<String> {
        self.z_index
            .iter()
            .map(|&k| self.x_names[k].clone())
            .collect()
    }

    pub fn z_index(&self) -> &[usize] {
        &self.z_index
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn cluster_name(&self) -> &str {
        &self.cluster_name
    }

    /// True when the only random effect is the intercept.
    pub fn is_random_intercept_only(&self) -> bool {
        self.z_index == [0]
    }

    /// All responses stacked cluster-major.
    pub fn y_stacked(&self) -> Vec<f64> {
        self.clusters
            .iter()
            .flat_map(|c| c.y.iter().copied())
            .collect()
    }

    /// Fixed-effect design stacked cluster-major.
    pub fn x_stacked(&self) -> DMatrix<f64> {
        let n = self.n_obs();
        let p = self.p();
        let mut x = DMatrix::zeros(n, p);
        let mut row = 0;
        for c in &self.clusters {
            for j in 0..c.len() {
                for k in 0..p {
                    x[(row, k)] = c.x[(j, k)];
                }
                row += 1;
            }
        }
        x
    }

    /// Cluster index of every stacked row.
    pub fn cluster_of_rows(&self) -> Vec<usize> {
        self.clusters
            .iter()
            .enumerate()
            .flat_map(|(i, c)| std::iter::repeat_n(i, c.len()))
            .collect()
    }

    pub(crate) fn stacked(&self) -> Stacked {
        let n = self.n_obs();
        let p = self.p();
        let q = self.q();
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n * p);
        let mut z = Vec::with_capacity(n * q);
        let mut starts = Vec::with_capacity(self.clusters.len() + 1);
        starts.push(0);
        for c in &self.clusters {
            for j in 0..c.len() {
                y.push(c.y[j]);
                x.extend(c.x.row(j).iter());
                z.extend(c.z.row(j).iter());
            }
            starts.push(y.len());
        }
        Stacked {
            y,
            x,
            z,
            starts,
            p,
            q,
        }
    }

    /// Stacked Z_ij' u_i for a full set of random effects.
    pub fn z_offset(&self, u: &RandomEffects) -> Result<Vec<f64>> {
        if u.n_clusters() != self.n_clusters() || u.q() != self.q() {
            return Err(Error::Dimension(format!(
                "random effects are {}x{}, dataset needs {}x{}",
                u.n_clusters(),
                u.q(),
                self.n_clusters(),
                self.q()
            )));
        }
        let mut out = Vec::with_capacity(self.n_obs());
        for (i, c) in self.clusters.iter().enumerate() {
            for j in 0..c.len() {
                out.push((0..self.q()).map(|k| c.z[(j, k)] * u.0[(i, k)]).sum());
            }
        }
        Ok(out)
    }

    /// Same design with the stacked responses replaced.
    pub fn with_responses(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.n_obs() {
            return Err(Error::Dimension(format!(
                "{} responses supplied for {} observations",
                y.len(),
                self.n_obs()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for c in &mut out.clusters {
            let n = c.len();
            c.y.copy_from_slice(&y[offset..offset + n]);
            offset += n;
        }
        out.check()?;
        Ok(out)
    }

    /// Clusters reordered so that output cluster k is input cluster `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut taken = vec![false; self.n_clusters()];
        if order.len() != self.n_clusters()
            || order
                .iter()
                .any(|&i| i >= taken.len() || std::mem::replace(&mut taken[i], true))
        {
            return Err(Error::InvalidArgument(
                "not a permutation of the clusters".into(),
            ));
        }
        let mut out = self.clone();
        out.clusters = order.iter().map(|&i| self.clusters[i].clone()).collect();
        Ok(out)
    }

    /// Only the listed clusters, in the listed order.
    pub fn subset_clusters(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|&i| i >= self.n_clusters()) {
            return Err(Error::InvalidArgument("invalid cluster subset".into()));
        }
        let mut out = self.clone();
        out.clusters = keep.iter().map(|&i| self.clusters[i].clone()).collect();
        out.check()?;
        Ok(out)
    }

    /// Cluster positions sorted by id: a labelling-independent processing order.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_clusters()).collect();
        order.sort_by(|&a, &b| self.clusters[a].id.cmp(&self.clusters[b].id));
        order
    }

    /// Keeps, for each cluster, the rows listed in `rows[i]` (in that order).
    pub fn select_rows(&self, rows: &[Vec<usize>]) -> Result<Self> {
        if rows.len() != self.n_clusters() {
            return Err(Error::Dimension("one row list per cluster required".into()));
        }
        let mut clusters = Vec::with_capacity(self.n_clusters());
        for (c, keep) in self.clusters.iter().zip(rows) {
            if keep.iter().any(|&j| j >= c.len()) {
                return Err(Error::InvalidArgument(format!(
                    "row index out of range for cluster `{}`",
                    c.id
                )));
            }
            clusters.push(ClusterBlock {
                id: c.id.clone(),
                y: keep.iter().map(|&j| c.y[j]).collect(),
                x: c.x.select_rows(keep.iter()),
                z: c.z.select_rows(keep.iter()),
            });
        }
        let mut out = self.clone();
        out.clusters = clusters;
        out.check()?;
        Ok(out)
    }

    /// Dataset made of copies of the listed clusters, relabelled `1..=len`.
    pub fn resample_clusters(&self, picks: &[usize]) -> Result<Self> {
        if picks.iter().any(|&i| i >= self.n_clusters()) {
            return Err(Error::InvalidArgument("cluster index out of range".into()));
        }
        let mut out = self.clone();
        out.clusters = picks
            .iter()
            .enumerate()
            .map(|(k, &i)| ClusterBlock {
                id: (k + 1).to_string(),
                ..self.clusters[i].clone()
            })
            .collect();
        Ok(out)
    }

    /// The schema that reloads a file produced by [`write_csv`].
    pub fn csv_schema(&self) -> CsvSchema {
        CsvSchema {
            response: self.response_name.clone(),
            cluster_id: self.cluster_name.clone(),
            fixed_covariates: self.x_names[1..].to_vec(),
            random_covariates: self.z_names(),
        }
    }
}

/// Column mapping for [`load_csv`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub response: String,
    pub cluster_id: String,
    /// Fixed-effect covariates; the intercept is always added in front.
    pub fixed_covariates: Vec<String>,
    /// Random-effect covariates: `intercept` and/or names from `fixed_covariates`.
    pub random_covariates: Vec<String>,
}

impl CsvSchema {
    pub fn random_intercept(response: &str, cluster_id: &str, fixed: &[&str]) -> Self {
        Self {
            response: response.into(),
            cluster_id: cluster_id.into(),
            fixed_covariates: fixed.iter().map(|s| s.to_string()).collect(),
            random_covariates: vec![INTERCEPT.into()],
        }
    }
}

/// Reads a comma-separated file into a dataset.
///
/// Rows are grouped by cluster id; clusters appear in order of first
/// appearance and keep the file order of their rows.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<ClusteredDataset> {
    let mut text = String::new();
    File::open(path.as_ref())?.read_to_string(&mut text)?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: &CsvSchema) -> Result<ClusteredDataset> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("CSV input is empty".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };

    let y_col = find(&schema.response)?;
    let id_col = find(&schema.cluster_id)?;
    let x_cols = schema
        .fixed_covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut x_names = vec![INTERCEPT.to_string()];
    x_names.extend(schema.fixed_covariates.iter().cloned());

    if schema.random_covariates.is_empty() {
        return Err(Error::Schema(
            "at least one random covariate is required".into(),
        ));
    }
    let mut z_index = Vec::with_capacity(schema.random_covariates.len());
    for name in &schema.random_covariates {
        let k = if is_intercept_alias(name) {
            0
        } else {
            schema
                .fixed_covariates
                .iter()
                .position(|f| f == name)
                .map(|k| k + 1)
                .ok_or_else(|| {
                    Error::Schema(format!(
                        "random covariate `{name}` is neither the intercept nor a fixed covariate"
                    ))
                })?
        };
        if z_index.contains(&k) {
            return Err(Error::Schema(format!(
                "random covariate `{name}` listed twice"
            )));
        }
        z_index.push(k);
    }

    let p = x_names.len();
    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    let mut xs: Vec<Vec<f64>> = Vec::new();

    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    column: headers[col].clone(),
                    message: if raw.is_empty() {
                        "missing value".into()
                    } else {
                        format!("`{raw}` is not a finite number")
                    },
                })
        };
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row,
                column: headers[id_col].clone(),
                message: "missing cluster id".into(),
            });
        }
        let yv = cell(y_col)?;
        let mut xrow = Vec::with_capacity(p);
        xrow.push(1.0);
        for &c in &x_cols {
            xrow.push(cell(c)?);
        }
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            ys.push(Vec::new());
            xs.push(Vec::new());
            ys.len() - 1
        });
        ys[slot].push(yv);
        xs[slot].extend(xrow);
    }
    if order.is_empty() {
        return Err(Error::EmptyInput(
            "CSV input has a header but no data rows".into(),
        ));
    }

    let clusters = order
        .into_iter()
        .zip(ys)
        .zip(xs)
        .map(|((id, y), xflat)| {
            let n = y.len();
            let x = DMatrix::from_row_slice(n, p, &xflat);
            let z = DMatrix::from_fn(n, z_index.len(), |j, k| x[(j, z_index[k])]);
            ClusterBlock { id, y, x, z }
        })
        .collect();
    Ok(ClusteredDataset::new(clusters, x_names, z_index)?
        .with_column_names(&schema.response, &schema.cluster_id))
}

/// Writes the dataset in the layout read back by [`load_csv`] with
/// [`ClusteredDataset::csv_schema`]. Numbers use the shortest decimal form
/// that round-trips exactly.
pub fn write_csv(data: &ClusteredDataset, mut out: impl Write) -> Result<()> {
    let mut header = vec![data.cluster_name.clone(), data.response_name.clone()];
    header.extend(data.x_names[1..].iter().cloned());
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(&header)?;
    for c in &data.clusters {
        for j in 0..c.len() {
            let mut rec = vec![c.id.clone(), format!("{}", c.y[j])];
            rec.extend((1..data.p()).map(|k| format!("{}", c.x[(j, k)])));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Summary of a dataset's shape and conditioning.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    pub n_clusters: usize,
    pub n_obs: usize,
    pub p: usize,
    pub q: usize,
    pub min_cluster_size: usize,
    pub median_cluster_size: f64,
    pub max_cluster_size: usize,
    pub singleton_clusters: usize,
    pub x_rank: usize,
    pub rank_deficient: bool,
}

/// Shape summary plus the numerical rank of the stacked fixed-effect design
/// (column-pivoted QR). Rank deficiency is reported, not rejected.
pub fn validate(data: &ClusteredDataset) -> Diagnostics {
    let mut sizes: Vec<usize> = data.clusters.iter().map(|c| c.len()).collect();
    sizes.sort_unstable();
    let m = sizes.len();
    let median = if m % 2 == 1 {
        sizes[m / 2] as f64
    } else {
        0.5 * (sizes[m / 2 - 1] + sizes[m / 2]) as f64
    };
    let x_rank = numerical_rank(&data.x_stacked());
    let p = data.p();
    let diag = Diagnostics {
        n_clusters: m,
        n_obs: data.n_obs(),
        p,
        q: data.q(),
        min_cluster_size: sizes[0],
        median_cluster_size: median,
        max_cluster_size: sizes[m - 1],
        singleton_clusters: sizes.iter().filter(|&&s| s == 1).count(),
        x_rank,
        rank_deficient: x_rank < p,
    };
    if diag.rank_deficient {
        log::warn!("stacked fixed-effect design has rank {x_rank} < p = {p}");
    }
    diag
}

pub(crate) fn numerical_rank(x: &DMatrix<f64>) -> usize {
    if x.nrows() == 0 || x.ncols() == 0 {
        return 0;
    }
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let k = r.nrows().min(r.ncols());
    let lead = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if lead == 0.0 {
        return 0;
    }
    let tol = lead * 1e-10 * (x.nrows().max(x.ncols()) as f64);
    (0..k).filter(|&i| r[(i, i)].abs() > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema_xz() -> CsvSchema {
        CsvSchema::random_intercept("y", "id", &["x"])
    }

    #[test]
    fn two_by_two_file() {
        let text = "id,y,x\na,1.0,0.5\na,2.0,0.25\nb,3.0,1\nb,4.5,2\n";
        let ds = parse_csv(text, &schema_xz()).unwrap();
        assert_eq!(ds.n_clusters(), 2);
        assert_eq!(ds.p(), 2);
        assert_eq!(ds.q(), 1);
        let a = &ds.clusters()[0];
        assert_eq!(a.id, "a");
        assert_eq!(a.y, vec![1.0, 2.0]);
        assert_eq!(a.x[(1, 1)], 0.25);
        assert_eq!(a.z[(0, 0)], 1.0);
    }

    #[test]
    fn grouping_is_by_id_not_contiguity() {
        let grouped = "id,y,x\na,1,0\na,2,1\nb,3,2\nb,4,3\n";
        let shuffled = "id,y,x\na,1,0\nb,3,2\na,2,1\nb,4,3\n";
        let g = parse_csv(grouped, &schema_xz()).unwrap();
        let s = parse_csv(shuffled, &schema_xz()).unwrap();
        assert_eq!(g, s);
    }

    #[test]
    fn singleton_clusters_retained() {
        let text = "id,y,x\na,1,0\nb,3,2\nb,4,3\n";
        let ds = parse_csv(text, &schema_xz()).unwrap();
        assert_eq!(ds.clusters()[0].len(), 1);
        assert_eq!(validate(&ds).singleton_clusters, 1);
    }

    #[test]
    fn error_paths() {
        let missing = parse_csv("id,y\na,1\n", &schema_xz()).unwrap_err();
        assert!(matches!(missing, Error::Schema(_)), "{missing}");

        let bad = parse_csv("id,y,x\na,1,0\na,oops,1\n", &schema_xz()).unwrap_err();
        match bad {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("unexpected {other}"),
        }

        let blank = parse_csv("id,y,x\na,1,\n", &schema_xz()).unwrap_err();
        assert!(matches!(blank, Error::Parse { row: 1, .. }));

        assert!(matches!(
            parse_csv("", &schema_xz()),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            parse_csv("id,y,x\n", &schema_xz()),
            Err(Error::EmptyInput(_))
        ));

        let mut s = schema_xz();
        s.random_covariates = vec!["w".into()];
        assert!(matches!(
            parse_csv("id,y,x,w\na,1,0,1\n", &s),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn random_slope_columns_follow_user_order() {
        let text = "id,y,x\na,1,0.5\na,2,0.25\nb,3,1\nb,4.5,2\n";
        let mut s = schema_xz();
        s.random_covariates = vec!["x".into(), "intercept".into()];
        let ds = parse_csv(text, &s).unwrap();
        assert_eq!(ds.z_index(), &[1, 0]);
        assert_eq!(ds.clusters()[1].z[(1, 0)], 2.0);
        assert_eq!(ds.clusters()[1].z[(1, 1)], 1.0);
    }

    #[test]
    fn duplicated_column_flags_rank_deficiency() {
        let text = "id,y,x,x2\na,1,0.5,0.5\na,2,0.25,0.25\nb,3,1,1\nb,4.5,2,2\n";
        let s = CsvSchema::random_intercept("y", "id", &["x", "x2"]);
        let d = validate(&parse_csv(text, &s).unwrap());
        assert_eq!(d.x_rank, 2);
        assert!(d.rank_deficient);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let block = ClusterBlock {
            id: "a".into(),
            y: vec![1.0],
            x: DMatrix::from_element(1, 1, 1.0),
            z: DMatrix::from_element(1, 1, 1.0),
        };
        let err =
            ClusteredDataset::new(vec![block.clone(), block], vec![INTERCEPT.into()], vec![0])
                .unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)));
    }
}
