//! Command-line front end: `clusterqr fit` and `clusterqr simulate`.
//!
//! Both commands accept a flat `key = value` configuration file; command-line
//! flags override its keys. Exit codes: 0 success, 1 runtime or numerical
//! failure, 2 configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::bootstrap::{intervals, run_bootstrap, summary_json, BootstrapOptions, BootstrapScheme};
use crate::data::{load_csv, validate, ClusteredDataset, CsvSchema, QuantileLevel, INTERCEPT};
use crate::error::{Error, Result};
use crate::estimators::{
    fit_canay, fit_marginal, fit_penalized, fit_twostep, PenaltyKind, PenaltySpec, TwoStepOptions,
};
use crate::lqmm::{fit_lqmm, LqmmOptions};
use crate::rng::{Purpose, StreamKey};
use crate::simulation::{
    parse_key_values, report_render, run_scenario, EstimatorKind, ReportFormat, ScenarioSpec,
};

/// Seed used by `fit` when none is given.
pub const DEFAULT_FIT_SEED: u64 = 20_240_601;
/// Environment variable holding the worker-thread budget.
pub const THREADS_ENV: &str = "CLUSTERQR_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "clusterqr",
    version,
    about = "Bias-adjusted quantile regression for clustered data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one estimator per quantile level to a CSV file.
    Fit(FitArgs),
    /// Run a Monte Carlo scenario and write CSV and text reports.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args, Default)]
pub struct FitArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub response: Option<String>,
    /// Cluster identifier column.
    #[arg(long)]
    pub cluster: Option<String>,
    /// Comma-separated fixed-effect covariates (an intercept is always added).
    #[arg(long)]
    pub fixed: Option<String>,
    /// Comma-separated random-effect covariates; defaults to the intercept.
    #[arg(long)]
    pub random: Option<String>,
    /// Comma-separated quantile levels.
    #[arg(long)]
    pub tau: Option<String>,
    /// adj (default), twostep, lqmm, marginal, canay, l1 or l2.
    #[arg(long)]
    pub estimator: Option<String>,
    /// RW (default), RRR, RC or CW.
    #[arg(long)]
    pub scheme: Option<String>,
    /// Bootstrap replicates.
    #[arg(long = "b")]
    pub b: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Master seed for bootstrap draws (default 20240601).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output CSV path; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// `REF=K1,K2,...`: report K - REF for each K (repeatable).
    #[arg(long)]
    pub contrast: Vec<String>,
    /// Write the bootstrap run summaries as JSON to this path.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct SimulateArgs {
    /// Scenario file of `key = value` lines.
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long = "b")]
    pub b: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Comma-separated estimator list.
    #[arg(long)]
    pub estimators: Option<String>,
    /// Comma-separated bootstrap schemes for the adjusted estimator.
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output prefix: writes PREFIX.csv and PREFIX.txt.
    #[arg(long, default_value = "report")]
    pub output: PathBuf,
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = e.print();
            } else {
                eprintln!("error: {}", one_line(&e.to_string()));
            }
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Schema(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn thread_pool(flag: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got `{v}`"
                ))
            })?),
            Err(_) => None,
        },
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))
}

fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read `{}`: {e}", path.display())))?;
    parse_key_values(&text)
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// Fully resolved settings for `fit`.
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub data: PathBuf,
    pub schema: CsvSchema,
    pub taus: Vec<QuantileLevel>,
    pub estimator: EstimatorKind,
    pub scheme: BootstrapScheme,
    pub b: usize,
    pub alpha: f64,
    pub seed: u64,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
    pub contrasts: Vec<(String, Vec<String>)>,
    pub summary: Option<PathBuf>,
}

impl FitConfig {
    /// Merges config-file keys with flags (flags win) and validates.
    pub fn resolve(args: FitArgs) -> Result<Self> {
        let mut data = None;
        let mut response = None;
        let mut cluster = None;
        let mut fixed = None;
        let mut random = None;
        let mut tau = None;
        let mut estimator = None;
        let mut scheme = None;
        let mut b = None;
        let mut alpha = None;
        let mut seed = None;
        let mut threads = None;
        let mut output = None;
        let mut contrast = Vec::new();
        let mut summary = None;
        if let Some(path) = &args.config {
            for (k, v) in read_config(path)? {
                let num =
                    |what: &str| Error::Config(format!("invalid value `{v}` for key `{what}`"));
                match k.as_str() {
                    "data" => data = Some(PathBuf::from(&v)),
                    "response" => response = Some(v),
                    "cluster" => cluster = Some(v),
                    "fixed" => fixed = Some(v),
                    "random" => random = Some(v),
                    "tau" => tau = Some(v),
                    "estimator" => estimator = Some(v),
                    "scheme" => scheme = Some(v),
                    "B" | "b" => b = Some(v.parse().map_err(|_| num("B"))?),
                    "alpha" => alpha = Some(v.parse().map_err(|_| num("alpha"))?),
                    "seed" => seed = Some(v.parse().map_err(|_| num("seed"))?),
                    "threads" => threads = Some(v.parse().map_err(|_| num("threads"))?),
                    "output" => output = Some(PathBuf::from(&v)),
                    "contrast" => contrast.push(v),
                    "summary" => summary = Some(PathBuf::from(&v)),
                    other => {
                        return Err(Error::Config(format!(
                            "unknown configuration key `{other}`"
                        )))
                    }
                }
            }
        }
        let data = args
            .data
            .or(data)
            .ok_or_else(|| Error::Config("missing `data`".into()))?;
        let response = args
            .response
            .or(response)
            .ok_or_else(|| Error::Config("missing `response`".into()))?;
        let cluster = args
            .cluster
            .or(cluster)
            .ok_or_else(|| Error::Config("missing `cluster`".into()))?;
        let fixed = list(&args.fixed.or(fixed).unwrap_or_default());
        let random = args
            .random
            .or(random)
            .map(|r| list(&r))
            .unwrap_or_else(|| vec![INTERCEPT.into()]);
        let taus = list(
            &args
                .tau
                .or(tau)
                .ok_or_else(|| Error::Config("missing `tau`".into()))?,
        )
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .and_then(|v| QuantileLevel::new(v).ok())
                .ok_or_else(|| Error::Config(format!("invalid quantile level `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
        if taus.is_empty() {
            return Err(Error::Config("tau list is empty".into()));
        }
        let estimator: EstimatorKind = args
            .estimator
            .or(estimator)
            .as_deref()
            .unwrap_or("adj")
            .parse()?;
        if estimator == EstimatorKind::Oracle || estimator == EstimatorKind::Jackknife {
            return Err(Error::Config(format!(
                "estimator `{}` is available in simulations only",
                estimator.name()
            )));
        }
        let scheme: BootstrapScheme = args.scheme.or(scheme).as_deref().unwrap_or("RW").parse()?;
        let b = args.b.or(b).unwrap_or(100);
        if estimator == EstimatorKind::Adjusted && b < 2 {
            return Err(Error::Config(format!("B must be at least 2, got {b}")));
        }
        let alpha = args.alpha.or(alpha).unwrap_or(0.05);
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0, 1), got {alpha}"
            )));
        }
        contrast.extend(args.contrast);
        let contrasts = contrast
            .iter()
            .map(|c| {
                let (r, ks) = c.split_once('=').ok_or_else(|| {
                    Error::Config(format!("contrast `{c}` is not of the form REF=K1,K2"))
                })?;
                let ks = list(ks);
                if r.trim().is_empty() || ks.is_empty() {
                    return Err(Error::Config(format!(
                        "contrast `{c}` is not of the form REF=K1,K2"
                    )));
                }
                Ok((r.trim().to_string(), ks))
            })
            .collect::<Result<Vec<_>>>()?;
        if !contrasts.is_empty() && estimator != EstimatorKind::Adjusted {
            return Err(Error::Config(
                "contrasts need the bootstrap (estimator `adj`)".into(),
            ));
        }
        Ok(Self {
            data,
            schema: CsvSchema {
                response,
                cluster_id: cluster,
                fixed_covariates: fixed,
                random_covariates: random,
            },
            taus,
            estimator,
            scheme,
            b,
            alpha,
            seed: args.seed.or(seed).unwrap_or(DEFAULT_FIT_SEED),
            threads: args.threads.or(threads),
            output: args.output.or(output),
            contrasts,
            summary: args.summary.or(summary),
        })
    }
}

/// One output record per (tau, component or contrast).
#[derive(Clone, Debug, PartialEq)]
pub struct FitRecord {
    pub tau: f64,
    pub component: String,
    pub estimate: f64,
    pub beta_adj: Option<f64>,
    pub se_obs: Option<f64>,
    pub se_adj: Option<f64>,
    pub basic_ci: Option<(f64, f64)>,
    pub se_adjusted_ci: Option<(f64, f64)>,
    pub b: Option<usize>,
    pub scheme: Option<BootstrapScheme>,
}

pub const FIT_COLUMNS: [&str; 12] = [
    "tau",
    "component",
    "estimate",
    "beta_adj",
    "se_obs",
    "se_adj",
    "basic_lo",
    "basic_hi",
    "se_adj_lo",
    "se_adj_hi",
    "B",
    "scheme",
];

fn num_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x}"))
}

pub fn render_fit(records: &[FitRecord]) -> String {
    let mut out = FIT_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let cells = [
            format!("{}", r.tau),
            r.component.clone(),
            format!("{}", r.estimate),
            num_cell(r.beta_adj),
            num_cell(r.se_obs),
            num_cell(r.se_adj),
            num_cell(r.basic_ci.map(|c| c.0)),
            num_cell(r.basic_ci.map(|c| c.1)),
            num_cell(r.se_adjusted_ci.map(|c| c.0)),
            num_cell(r.se_adjusted_ci.map(|c| c.1)),
            r.b.map_or_else(|| "NA".into(), |b| b.to_string()),
            r.scheme.map_or_else(|| "NA".into(), |s| s.to_string()),
        ];
        let cells: Vec<String> = cells
            .into_iter()
            .map(|c| {
                if c.contains(',') || c.contains('"') {
                    format!("\"{}\"", c.replace('"', "\"\""))
                } else {
                    c
                }
            })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn plain_records(tau: f64, names: &[String], beta: &[f64], se: Option<&[f64]>) -> Vec<FitRecord> {
    names
        .iter()
        .enumerate()
        .map(|(k, n)| FitRecord {
            tau,
            component: n.clone(),
            estimate: beta[k],
            beta_adj: None,
            se_obs: se.map(|s| s[k]),
            se_adj: None,
            basic_ci: None,
            se_adjusted_ci: None,
            b: None,
            scheme: None,
        })
        .collect()
}

/// Contrast weight vectors and labels `K - REF`.
fn contrast_weights(
    names: &[String],
    contrasts: &[(String, Vec<String>)],
) -> Result<(Vec<Vec<f64>>, Vec<String>)> {
    let index = |n: &str| {
        names
            .iter()
            .position(|m| m == n)
            .ok_or_else(|| Error::Config(format!("contrast names unknown coefficient `{n}`")))
    };
    let mut weights = Vec::new();
    let mut labels = Vec::new();
    for (r, ks) in contrasts {
        let ri = index(r)?;
        for k in ks {
            let ki = index(k)?;
            let mut w = vec![0.0; names.len()];
            w[ki] += 1.0;
            w[ri] -= 1.0;
            weights.push(w);
            labels.push(format!("{k} - {r}"));
        }
    }
    Ok((weights, labels))
}

/// Runs the configured estimator at every quantile level.
pub fn fit_records(
    data: &ClusteredDataset,
    cfg: &FitConfig,
) -> Result<(Vec<FitRecord>, Vec<String>)> {
    let names = data.x_names().to_vec();
    let (cw, clabels) = contrast_weights(&names, &cfg.contrasts)?;
    let root = StreamKey::new(cfg.seed);
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    for (ti, &tau) in cfg.taus.iter().enumerate() {
        let t = tau.value();
        match cfg.estimator {
            EstimatorKind::Marginal => {
                let f = fit_marginal(data, tau)?;
                records.extend(plain_records(t, &names, &f.beta, Some(&f.se)));
            }
            EstimatorKind::Canay => {
                let f = fit_canay(data, tau)?;
                records.extend(plain_records(t, &names, &f.beta, Some(&f.se)));
            }
            EstimatorKind::Lqmm => {
                let f = fit_lqmm(data, tau, &LqmmOptions::default())?;
                records.extend(plain_records(t, &names, &f.beta, None));
            }
            EstimatorKind::L1 | EstimatorKind::L2 => {
                let kind = if cfg.estimator == EstimatorKind::L1 {
                    PenaltyKind::L1
                } else {
                    PenaltyKind::L2
                };
                let f = fit_penalized(data, tau, &PenaltySpec::cv(kind))?;
                records.extend(plain_records(t, &names, &f.beta, None));
            }
            EstimatorKind::TwoStep => {
                let f = fit_twostep(data, tau, &TwoStepOptions::default())?;
                records.extend(plain_records(t, &names, &f.beta, Some(&f.se_obs)));
            }
            EstimatorKind::Adjusted => {
                let f = fit_twostep(data, tau, &TwoStepOptions::default())?;
                let key = root.child(Purpose::Bootstrap, ti as u64);
                let run = run_bootstrap(
                    data,
                    tau,
                    cfg.b,
                    cfg.scheme,
                    &f,
                    &BootstrapOptions::default(),
                    key,
                )?;
                let set = intervals(&f.beta, &f.se_obs, &run, cfg.alpha)?;
                summaries.push(summary_json(&names, &f.beta, &f.se_obs, &run, cfg.alpha)?);
                for (k, n) in names.iter().enumerate() {
                    records.push(FitRecord {
                        tau: t,
                        component: n.clone(),
                        estimate: f.beta[k],
                        beta_adj: Some(set.beta_adj[k]),
                        se_obs: Some(f.se_obs[k]),
                        se_adj: set.se_adj.as_ref().map(|s| s[k]),
                        basic_ci: Some(set.basic[k]),
                        se_adjusted_ci: set.se_adjusted.as_ref().map(|s| s[k]),
                        b: Some(cfg.b),
                        scheme: Some(cfg.scheme),
                    });
                }
                if !cw.is_empty() {
                    let est: Vec<f64> = cw.iter().map(|w| dot(w, &f.beta)).collect();
                    let cov = f.cov_obs.as_ref().expect("standard errors requested");
                    let se: Vec<f64> = cw
                        .iter()
                        .map(|w| {
                            let v = quad_form(cov, w);
                            if v.is_nan() {
                                v
                            } else {
                                v.max(0.0).sqrt()
                            }
                        })
                        .collect();
                    let crun = run.linear_map(&cw);
                    let cset = intervals(&est, &se, &crun, cfg.alpha)?;
                    for (m, label) in clabels.iter().enumerate() {
                        records.push(FitRecord {
                            tau: t,
                            component: label.clone(),
                            estimate: est[m],
                            beta_adj: Some(cset.beta_adj[m]),
                            se_obs: Some(se[m]),
                            se_adj: cset.se_adj.as_ref().map(|s| s[m]),
                            basic_ci: Some(cset.basic[m]),
                            se_adjusted_ci: cset.se_adjusted.as_ref().map(|s| s[m]),
                            b: Some(cfg.b),
                            scheme: Some(cfg.scheme),
                        });
                    }
                }
            }
            EstimatorKind::Oracle | EstimatorKind::Jackknife => {
                unreachable!("rejected while resolving")
            }
        }
    }
    Ok((records, summaries))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn quad_form(m: &DMatrix<f64>, w: &[f64]) -> f64 {
    let n = w.len();
    (0..n)
        .map(|i| (0..n).map(|j| w[i] * m[(i, j)] * w[j]).sum::<f64>())
        .sum()
}

pub fn cmd_fit(args: FitArgs) -> Result<()> {
    let cfg = FitConfig::resolve(args)?;
    let pool = thread_pool(cfg.threads)?;
    let data = load_csv(&cfg.data, &cfg.schema)?;
    let diag = validate(&data);
    log::info!(
        "{} clusters, {} observations, cluster sizes {}..{}",
        diag.n_clusters,
        diag.n_obs,
        diag.min_cluster_size,
        diag.max_cluster_size
    );
    let (records, summaries) = pool.install(|| fit_records(&data, &cfg))?;
    let text = render_fit(&records);
    match &cfg.output {
        Some(path) => fs::write(path, &text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    if let Some(path) = &cfg.summary {
        fs::write(path, format!("[{}]\n", summaries.join(",\n")))?;
    }
    Ok(())
}

/// Scenario file keys with command-line overrides appended.
pub fn resolve_scenario(args: &SimulateArgs) -> Result<ScenarioSpec> {
    let mut pairs = read_config(&args.scenario)?;
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    push("seed", args.seed.map(|v| v.to_string()));
    push("reps", args.reps.map(|v| v.to_string()));
    push("B", args.b.map(|v| v.to_string()));
    push("tau", args.tau.map(|v| v.to_string()));
    push("estimators", args.estimators.clone());
    push("scheme", args.scheme.clone());
    ScenarioSpec::from_pairs(pairs)
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let spec = resolve_scenario(&args)?;
    let pool = thread_pool(args.threads)?;
    let report = pool.install(|| run_scenario(&spec))?;
    let csv = report_render(&report, ReportFormat::Csv);
    let text = report_render(&report, ReportFormat::Text);
    let mut csv_path = args.output.clone().into_os_string();
    csv_path.push(".csv");
    let mut txt_path = args.output.clone().into_os_string();
    txt_path.push(".txt");
    fs::write(&csv_path, &csv)?;
    fs::write(&txt_path, &text)?;
    let mut out = std::io::stdout().lock();
    write!(out, "{text}")?;
    for (name, secs) in &report.seconds {
        writeln!(
            out,
            "time {name}: {secs:.2} s total, {:.3} s per replication",
            secs / spec.reps as f64
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Schema("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Solver {
                iterations: 1,
                gap: 1.0
            }),
            1
        );
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("fit.cfg");
        fs::write(
            &cfg,
            "data = a.csv\nresponse = y\ncluster = id\ntau = 0.1, 0.5\nB = 50\n",
        )
        .unwrap();
        let resolved = FitConfig::resolve(FitArgs {
            config: Some(cfg.clone()),
            b: Some(7),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(resolved.b, 7);
        assert_eq!(resolved.taus.len(), 2);
        assert_eq!(resolved.seed, DEFAULT_FIT_SEED);
        assert_eq!(resolved.estimator, EstimatorKind::Adjusted);

        fs::write(&cfg, "data = a.csv\nwhatever = 1\n").unwrap();
        let err = FitConfig::resolve(FitArgs {
            config: Some(cfg),
            ..Default::default()
        })
        .unwrap_err();
        assert!(err.to_string().contains("whatever"));
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn contrast_parsing() {
        let names: Vec<String> = ["(Intercept)", "a", "b", "c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (w, l) =
            contrast_weights(&names, &[("a".into(), vec!["b".into(), "c".into()])]).unwrap();
        assert_eq!(
            w,
            vec![vec![0.0, -1.0, 1.0, 0.0], vec![0.0, -1.0, 0.0, 1.0]]
        );
        assert_eq!(l, vec!["b - a", "c - a"]);
        assert!(contrast_weights(&names, &[("z".into(), vec!["a".into()])]).is_err());
    }
}
