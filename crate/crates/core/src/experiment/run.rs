use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use super::{ExperimentConfig, HeldOut, Task};
use crate::error::{Error, Result};
use crate::eval::{CilMetrics, Metrics};
use crate::losses::{LossBreakdown, LossWeights};
use crate::model::{BundleShape, MaskReport, ModelBundle};
use crate::protocols::{generate, make_cil_schedule, make_gcd_split, make_mdg_gcd_split};
use crate::trainer::{evaluate_gcd, train_cil, train_gcd, train_mdg_gcd};

/// `v<crate version>+<git describe>` of the build.
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"), "+", env!("PLREG_GIT_DESCRIBE"));

pub const METRICS_HEADER_GCD: [&str; 10] = [
    "task",
    "preset",
    "seed",
    "held_out_domain",
    "acc_all",
    "acc_known",
    "acc_unknown",
    "w_p1",
    "w_p2",
    "w_lreg",
];

pub const METRICS_HEADER_CIL: [&str; 9] = [
    "task", "preset", "seed", "session", "session_acc", "avg_acc", "w_p1", "w_p2", "w_lreg",
];

const TRACE_COLUMNS: [&str; 6] = ["l_p1", "l_p2", "l_lreg", "l_main", "l_plreg", "l_final"];

/// Everything one seed produced.
#[derive(Clone, Debug)]
pub enum SeedResult {
    Gcd {
        metrics: Metrics,
        traces: Vec<LossBreakdown>,
    },
    MdgGcd {
        /// `(held-out domain, metrics on it, traces)` per split.
        domains: Vec<(usize, Metrics, Vec<LossBreakdown>)>,
    },
    Cil {
        metrics: CilMetrics,
        masks: Vec<MaskReport>,
        traces: Vec<Vec<LossBreakdown>>,
    },
}

impl SeedResult {
    /// Column names of [`SeedResult::summary`] for a task.
    pub fn summary_columns(task: Task) -> &'static [&'static str] {
        match task {
            Task::Gcd | Task::MdgGcd => &["acc_all", "acc_known", "acc_unknown"],
            Task::Cil => &["avg_acc", "last_acc"],
        }
    }

    /// Headline numbers of the seed; mDG+GCD averages over held-out domains.
    pub fn summary(&self) -> Vec<f64> {
        match self {
            SeedResult::Gcd { metrics, .. } => vec![metrics.acc_all, metrics.acc_known, metrics.acc_unknown],
            SeedResult::MdgGcd { domains } => {
                let n = domains.len() as f64;
                let mut s = vec![0.0; 3];
                for (_, m, _) in domains {
                    s[0] += m.acc_all;
                    s[1] += m.acc_known;
                    s[2] += m.acc_unknown;
                }
                s.into_iter().map(|v| v / n).collect()
            }
            SeedResult::Cil { metrics, .. } => vec![
                metrics.average,
                metrics.per_session_acc.last().copied().unwrap_or(0.0),
            ],
        }
    }
}

/// Trains and evaluates one seed of a resolved config.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let cfg = cfg.resolved();
    let spec = cfg.spec_for(seed);
    let train = cfg.train_config(seed);
    let shape = |k: usize| BundleShape {
        input_dim: spec.input_dim(),
        dim: cfg.model.dim,
        num_classes: k,
        depth: cfg.model.depth,
    };
    match cfg.task {
        Task::Gcd => {
            let data = generate(&spec)?;
            let split = make_gcd_split(&data, spec.num_known, spec.num_classes, seed)?;
            let out = train_gcd(&split, ModelBundle::init(shape(spec.num_classes), seed)?, &train)?;
            let metrics = evaluate_gcd(&out.bundle, &split.unlabeled, &split, &train)?;
            Ok(SeedResult::Gcd {
                metrics,
                traces: out.traces,
            })
        }
        Task::MdgGcd => {
            let data = generate(&spec)?;
            let domains: Vec<usize> = match cfg.held_out_domain {
                HeldOut::All => (0..spec.num_domains).collect(),
                HeldOut::Domain(d) => vec![d],
            };
            let splits = domains
                .iter()
                .map(|&d| {
                    make_mdg_gcd_split(&data, spec.num_known, spec.num_classes, spec.num_domains, d, seed)
                })
                .collect::<Result<Vec<_>>>()?;
            let outs = train_mdg_gcd(&splits, |_| ModelBundle::init(shape(spec.num_classes), seed), &train)?;
            Ok(SeedResult::MdgGcd {
                domains: outs
                    .into_iter()
                    .map(|o| (o.held_out_domain, o.metrics, o.traces))
                    .collect(),
            })
        }
        Task::Cil => {
            let style = cfg.style.unwrap_or_default();
            let schedule = make_cil_schedule(&spec, cfg.sessions, style, seed)?;
            let k0 = schedule.sessions[0].classes.len();
            let out = train_cil(&spec, &schedule, ModelBundle::init(shape(k0), seed)?, &train)?;
            Ok(SeedResult::Cil {
                metrics: out.metrics,
                masks: out.masks,
                traces: out.traces,
            })
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PLREG_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| Error::Config(format!("PLREG_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs `jobs` on the worker pool; results come back in input order.
fn par_map<T: Sync, R: Send>(jobs: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Result<Vec<R>> {
    let pool = thread_pool()?;
    Ok(pool.install(|| jobs.par_iter().map(&f).collect()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

fn trace_record(prefix: &[String], epoch: usize, t: &LossBreakdown) -> Vec<String> {
    let mut r = prefix.to_vec();
    r.push(epoch.to_string());
    for v in [t.l_p1, t.l_p2, t.l_lreg, t.l_main, t.l_plreg, t.l_final] {
        r.push(v.to_string());
    }
    r
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    /// Seeds in config order with their results.
    pub results: Vec<(u64, SeedResult)>,
    pub failures: Vec<(u64, String)>,
}

/// Runs every seed and writes `metrics.csv`, `traces.csv`, `masks.csv` (CIL)
/// and `manifest.txt` into the output directory. If any seed fails the
/// outputs of the others are still written, the manifest is marked partial
/// and the first failure is returned.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let cfg = config.resolved();
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;

    let outcomes = par_map(&cfg.seeds, |&s| run_seed(&cfg, s))?;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut first_err = None;
    for (&seed, r) in cfg.seeds.iter().zip(outcomes) {
        match r {
            Ok(v) => results.push((seed, v)),
            Err(e) => {
                failures.push((seed, e.to_string()));
                first_err.get_or_insert(e);
            }
        }
    }

    write_metrics(&cfg, &results, &dir.join("metrics.csv"))?;
    write_traces(&cfg, &results, &dir.join("traces.csv"))?;
    if cfg.task == Task::Cil {
        write_masks(&results, &dir.join("masks.csv"))?;
    }
    write_manifest(&cfg, "run", &failures, &dir.join("manifest.txt"))?;

    match first_err {
        Some(e) => Err(e),
        None => Ok(RunSummary {
            output_dir: dir,
            results,
            failures,
        }),
    }
}

fn weight_fields(cfg: &ExperimentConfig) -> [String; 3] {
    let w = cfg.weights.unwrap_or(LossWeights::ZERO);
    [w.w_p1.to_string(), w.w_p2.to_string(), w.w_lreg.to_string()]
}

fn write_metrics(cfg: &ExperimentConfig, results: &[(u64, SeedResult)], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let preset = cfg.preset.clone().unwrap_or_default();
    let task = cfg.task.to_string();
    let weights = weight_fields(cfg);
    if cfg.task == Task::Cil {
        w.write_record(METRICS_HEADER_CIL)?;
    } else {
        w.write_record(METRICS_HEADER_GCD)?;
    }
    let gcd_row = |seed: u64, domain: String, m: &Metrics| {
        let mut r = vec![task.clone(), preset.clone(), seed.to_string(), domain];
        r.extend([m.acc_all, m.acc_known, m.acc_unknown].map(|v| v.to_string()));
        r.extend(weights.iter().cloned());
        r
    };
    for (seed, res) in results {
        match res {
            SeedResult::Gcd { metrics, .. } => w.write_record(gcd_row(*seed, String::new(), metrics))?,
            SeedResult::MdgGcd { domains } => {
                for (d, m, _) in domains {
                    w.write_record(gcd_row(*seed, d.to_string(), m))?;
                }
            }
            SeedResult::Cil { metrics, .. } => {
                for (i, acc) in metrics.per_session_acc.iter().enumerate() {
                    let mut r = vec![task.clone(), preset.clone(), seed.to_string(), i.to_string()];
                    r.push(acc.to_string());
                    r.push(metrics.average.to_string());
                    r.extend(weights.iter().cloned());
                    w.write_record(r)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_traces(cfg: &ExperimentConfig, results: &[(u64, SeedResult)], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<&str> = vec!["seed"];
    match cfg.task {
        Task::Gcd => {}
        Task::MdgGcd => header.push("held_out_domain"),
        Task::Cil => header.push("session"),
    }
    header.push("epoch");
    header.extend(TRACE_COLUMNS);
    w.write_record(&header)?;
    for (seed, res) in results {
        let s = seed.to_string();
        match res {
            SeedResult::Gcd { traces, .. } => {
                for (e, t) in traces.iter().enumerate() {
                    w.write_record(trace_record(std::slice::from_ref(&s), e + 1, t))?;
                }
            }
            SeedResult::MdgGcd { domains } => {
                for (d, _, traces) in domains {
                    for (e, t) in traces.iter().enumerate() {
                        w.write_record(trace_record(&[s.clone(), d.to_string()], e + 1, t))?;
                    }
                }
            }
            SeedResult::Cil { traces, .. } => {
                for (i, session) in traces.iter().enumerate() {
                    for (e, t) in session.iter().enumerate() {
                        w.write_record(trace_record(&[s.clone(), i.to_string()], e + 1, t))?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

const MASKS_HEADER: [&str; 5] = ["seed", "session", "dim_index", "normalized_importance", "binarized"];

fn write_masks(results: &[(u64, SeedResult)], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(MASKS_HEADER)?;
    for (seed, res) in results {
        if let SeedResult::Cil { masks, .. } = res {
            for m in masks {
                for (i, (n, b)) in m.normalized.iter().zip(&m.binarized).enumerate() {
                    w.write_record([
                        seed.to_string(),
                        m.session.to_string(),
                        i.to_string(),
                        n.to_string(),
                        b.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_manifest(
    cfg: &ExperimentConfig,
    command: &str,
    failures: &[(u64, String)],
    path: &Path,
) -> Result<()> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut s = String::new();
    let _ = writeln!(s, "version = {VERSION}");
    let _ = writeln!(s, "timestamp = {stamp}");
    let _ = writeln!(s, "command = {command}");
    if failures.is_empty() {
        let _ = writeln!(s, "status = complete");
    } else {
        let _ = writeln!(s, "status = partial");
        for (seed, e) in failures {
            let _ = writeln!(s, "failed_seed = {seed}: {}", e.replace('\n', " "));
        }
    }
    let _ = writeln!(s, "config = {}", serde_json::to_string(cfg)?);
    fs::write(path, s)?;
    Ok(())
}

/// Reads the resolved configuration back out of a `manifest.txt`.
pub fn config_from_manifest(text: &str) -> Result<ExperimentConfig> {
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("config = "))
        .ok_or_else(|| Error::Config("manifest has no `config = ` line".into()))?;
    super::parse_config_str(line)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    WP1,
    WP2,
    WLreg,
    LambdaInfomax,
    LambdaKd,
}

impl SweepAxis {
    pub const NAMES: [&'static str; 5] = ["w_p1", "w_p2", "w_lreg", "lambda_infomax", "lambda_kd"];

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "w_p1" => SweepAxis::WP1,
            "w_p2" => SweepAxis::WP2,
            "w_lreg" => SweepAxis::WLreg,
            "lambda_infomax" => SweepAxis::LambdaInfomax,
            "lambda_kd" => SweepAxis::LambdaKd,
            other => {
                return Err(Error::Usage(format!(
                    "unknown sweep axis {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::WP1 => "w_p1",
            SweepAxis::WP2 => "w_p2",
            SweepAxis::WLreg => "w_lreg",
            SweepAxis::LambdaInfomax => "lambda_infomax",
            SweepAxis::LambdaKd => "lambda_kd",
        }
    }

    /// Resolved copy of `cfg` with this axis set to `value`.
    fn apply(self, cfg: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut c = cfg.resolved();
        let w = c.weights.get_or_insert(LossWeights::ZERO);
        match self {
            SweepAxis::WP1 => w.w_p1 = value,
            SweepAxis::WP2 => w.w_p2 = value,
            SweepAxis::WLreg => w.w_lreg = value,
            SweepAxis::LambdaInfomax => c.lambda_infomax = value,
            SweepAxis::LambdaKd => c.lambda_kd = value,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    /// `None` marks the per-value mean row.
    pub seed: Option<u64>,
    pub values: Vec<f64>,
}

/// Runs the config once per value of `axis` and writes `sweep.csv` (one row
/// per value and seed, then one mean row per value) plus `sweep_manifest.txt`.
pub fn sweep(config: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Usage(format!("sweep value {v} is not finite")));
    }
    config.validate()?;
    let points: Vec<ExperimentConfig> = values.iter().map(|&v| axis.apply(config, v)).collect();
    for p in &points {
        p.validate()?;
    }
    let jobs: Vec<(usize, u64)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| p.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let outcomes = par_map(&jobs, |&(i, s)| run_seed(&points[i], s))?;

    let mut per_value: BTreeMap<usize, Vec<SweepRow>> = BTreeMap::new();
    for (&(i, seed), r) in jobs.iter().zip(outcomes) {
        per_value.entry(i).or_default().push(SweepRow {
            value: values[i],
            seed: Some(seed),
            values: r?.summary(),
        });
    }
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for (i, seed_rows) in per_value {
        let n = seed_rows.len() as f64;
        let width = seed_rows[0].values.len();
        let mean = (0..width)
            .map(|c| seed_rows.iter().map(|r| r.values[c]).sum::<f64>() / n)
            .collect();
        means.push(SweepRow {
            value: values[i],
            seed: None,
            values: mean,
        });
        rows.extend(seed_rows);
    }
    rows.extend(means);

    let cfg = config.resolved();
    fs::create_dir_all(&cfg.output_dir)?;
    let mut w = csv_writer(&cfg.output_dir.join("sweep.csv"))?;
    let mut header = vec!["kind", "axis", "value", "seed"];
    header.extend(SeedResult::summary_columns(cfg.task));
    w.write_record(&header)?;
    for r in &rows {
        let mut rec = vec![
            if r.seed.is_some() { "seed" } else { "mean" }.to_string(),
            axis.name().to_string(),
            r.value.to_string(),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
        ];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(rec)?;
    }
    w.flush()?;
    let values_s: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    let command = format!("sweep axis={} values={}", axis.name(), values_s.join(","));
    write_manifest(&cfg, &command, &[], &cfg.output_dir.join("sweep_manifest.txt"))?;
    Ok(rows)
}

/// Turns a run's `masks.csv` into per-seed heat-map and binarized matrices
/// (rows = latent dimension, columns = sessions plus their average).
/// Returns the files written.
pub fn export_masks(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let src = run_dir.join("masks.csv");
    let mut rdr = csv::Reader::from_path(&src)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", src.display())))?;
    if rdr.headers()?.iter().ne(MASKS_HEADER) {
        return Err(Error::Contract(format!("{} has an unexpected header", src.display())));
    }
    // seed -> session -> normalized importances in dim order
    let mut data: BTreeMap<u64, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Contract("short masks.csv row".into()))
        };
        let bad = |what: &str| Error::Contract(format!("malformed {what} in masks.csv"));
        let seed: u64 = field(0)?.parse().map_err(|_| bad("seed"))?;
        let session: usize = field(1)?.parse().map_err(|_| bad("session"))?;
        let value: f64 = field(3)?.parse().map_err(|_| bad("normalized_importance"))?;
        data.entry(seed).or_default().entry(session).or_default().push(value);
    }

    let mut written = Vec::new();
    for (seed, sessions) in &data {
        let dims = sessions.values().map(Vec::len).max().unwrap_or(0);
        if sessions.values().any(|v| v.len() != dims) {
            return Err(Error::Contract(format!("seed {seed}: sessions have different widths")));
        }
        let mut header = vec!["dim_index".to_string()];
        header.extend(sessions.keys().map(|s| format!("session_{s}")));
        header.push("avg".into());
        let heat_path = run_dir.join(format!("mask_heatmap_seed{seed}.csv"));
        let bin_path = run_dir.join(format!("mask_binarized_seed{seed}.csv"));
        let mut heat = csv_writer(&heat_path)?;
        let mut bin = csv_writer(&bin_path)?;
        heat.write_record(&header)?;
        bin.write_record(&header)?;
        for d in 0..dims {
            let col: Vec<f64> = sessions.values().map(|v| v[d]).collect();
            let avg = col.iter().sum::<f64>() / col.len() as f64;
            let mut h = vec![d.to_string()];
            let mut b = vec![d.to_string()];
            for v in col.iter().chain(std::iter::once(&avg)) {
                h.push(v.to_string());
                b.push(u8::from(*v > MaskReport::THRESHOLD).to_string());
            }
            heat.write_record(h)?;
            bin.write_record(b)?;
        }
        heat.flush()?;
        bin.flush()?;
        written.push(heat_path);
        written.push(bin_path);
    }
    Ok(written)
}
