//! CSV persistence, run manifests, sweeps, aggregation and message audits.
//!
//! A run directory holds:
//!
//! | file | columns |
//! |------|---------|
//! | `steps.csv` | `t`, `s{i}_{c}`, `a{i}_{c}`, `cost{i}`, `global_cost`, `q`, `v_next`, `delta`, `updated`, `skipped` |
//! | `updates.csv` | `step`, `skipped`, `mode`, `norm_d{i}`, `sigma{i}`, `cert_local`, `cert_i_plus_c`, `cert_stacked`, `reason` |
//! | `thetas.csv` | `step`, `agent`, `theta_{k}` |
//! | `timing.csv` | `phase`, `seconds` (wall clock, not reproducible) |
//! | `messages.csv` | message log, when enabled |
//! | `manifest.toml` | config snapshot, seed, algorithm, SHA-256 of the reproducible files |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::Topology;
use crate::messages::{audit, gac_payload_per_epoch, read_records, AuditReport, AuditSpec};
use crate::{Error, Result};

use super::config::{Algorithm, ExperimentConfig};
use super::metrics::{bands, moving_average, window_mean, MOVING_WINDOW, PERCENTILE_RULE};
use super::run::{run, RunOutput};

/// Files whose content is fully determined by config and seed.
pub const REPRODUCIBLE_FILES: [&str; 3] = ["steps.csv", "updates.csv", "thetas.csv"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub steps: usize,
    pub version: String,
    /// SHA-256 over the reproducible files, in the order listed.
    pub content_hash: String,
    pub files: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

fn bool_str(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn opt_bool(b: Option<bool>) -> &'static str {
    match b {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    }
}

fn lf_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

pub fn write_steps(out: &RunOutput, path: &Path) -> Result<()> {
    let mut w = lf_writer(path)?;
    let first = out.steps.first();
    let m = first.map_or(0, |s| s.state.len());
    let n = first.map_or(0, |s| s.state[0].len());
    let nu = first.map_or(0, |s| s.action[0].len());
    let mut header = vec!["t".to_string()];
    for i in 0..m {
        header.extend((0..n).map(|c| format!("s{i}_{c}")));
    }
    for i in 0..m {
        header.extend((0..nu).map(|c| format!("a{i}_{c}")));
    }
    header.extend((0..m).map(|i| format!("cost{i}")));
    header.extend(["global_cost", "q", "v_next", "delta", "updated", "skipped"].map(String::from));
    w.write_record(&header)?;
    for s in &out.steps {
        let mut row = vec![s.t.to_string()];
        row.extend(s.state.iter().flat_map(|v| v.iter().map(|x| x.to_string())));
        row.extend(s.action.iter().flat_map(|v| v.iter().map(|x| x.to_string())));
        row.extend(s.local_costs.iter().map(|x| x.to_string()));
        row.extend([s.global_cost, s.q, s.v_next, s.delta].map(|x| x.to_string()));
        row.push(bool_str(s.updated).into());
        row.push(bool_str(s.skipped).into());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_updates(out: &RunOutput, agents: usize, path: &Path) -> Result<()> {
    let mut w = lf_writer(path)?;
    let mut header = vec!["step".to_string(), "skipped".into(), "mode".into()];
    header.extend((0..agents).map(|i| format!("norm_d{i}")));
    header.extend((0..agents).map(|i| format!("sigma{i}")));
    header.extend(["cert_local", "cert_i_plus_c", "cert_stacked", "reason"].map(String::from));
    w.write_record(&header)?;
    for e in &out.metrics.updates {
        let mut row = vec![e.step.to_string(), bool_str(e.skipped).into(), e.mode.clone()];
        row.extend((0..agents).map(|i| e.direction_norms.get(i).map_or(String::new(), |x| x.to_string())));
        row.extend((0..agents).map(|i| e.sigmas.get(i).map_or(String::new(), |x| x.to_string())));
        let c = e.certificates;
        row.extend([0, 1, 2].map(|k| opt_bool(c.map(|c| c[k])).to_string()));
        row.push(e.reason.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_thetas(out: &RunOutput, path: &Path) -> Result<()> {
    let mut w = lf_writer(path)?;
    let width = out
        .thetas
        .iter()
        .flat_map(|s| s.thetas.iter().map(|t| t.len()))
        .max()
        .unwrap_or(0);
    let mut header = vec!["step".to_string(), "agent".into()];
    header.extend((0..width).map(|k| format!("theta_{k}")));
    w.write_record(&header)?;
    for s in &out.thetas {
        for (i, th) in s.thetas.iter().enumerate() {
            let mut row = vec![s.step.to_string(), i.to_string()];
            row.extend((0..width).map(|k| th.get(k).map_or(String::new(), |x| x.to_string())));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_timing(out: &RunOutput, path: &Path) -> Result<()> {
    let t = &out.metrics.times;
    let mut w = lf_writer(path)?;
    w.write_record(["phase", "seconds"])?;
    for (k, v) in [
        ("policy", t.policy),
        ("q_eval", t.q_eval),
        ("sensitivity", t.sensitivity),
        ("consensus", t.consensus),
        ("update", t.update),
    ] {
        w.write_record([k.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes all files of one run into `dir` and returns the manifest.
pub fn write_run(cfg: &ExperimentConfig, out: &RunOutput, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    write_steps(out, &dir.join("steps.csv"))?;
    write_updates(out, cfg.topology.agents(), &dir.join("updates.csv"))?;
    write_thetas(out, &dir.join("thetas.csv"))?;
    write_timing(out, &dir.join("timing.csv"))?;
    if out.messages.enabled() {
        let mut f = fs::File::create(dir.join("messages.csv"))?;
        out.messages.write_csv(&mut f)?;
    }
    let mut all = Sha256::new();
    let mut files = BTreeMap::new();
    for name in REPRODUCIBLE_FILES {
        let bytes = fs::read(dir.join(name))?;
        all.update(&bytes);
        files.insert(name.to_string(), sha256_hex(&bytes));
    }
    let manifest = Manifest {
        algorithm: out.algorithm,
        seed: out.seed,
        steps: out.steps.len(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        content_hash: all.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        files,
        config: cfg.clone(),
    };
    fs::write(dir.join("manifest.toml"), toml::to_string(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(toml::from_str(&fs::read_to_string(dir.join("manifest.toml"))?)?)
}

pub fn run_dir_name(algo: Algorithm, seed: u64) -> String {
    format!("{algo}_seed{seed}")
}

/// Runs one instance and persists it under `out/<algo>_seed<seed>`.
pub fn run_to_dir(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<(RunOutput, PathBuf)> {
    let result = run(cfg, seed)?;
    let dir = out.join(run_dir_name(cfg.algorithm, seed));
    write_run(cfg, &result, &dir)?;
    Ok((result, dir))
}

/// Fraction of a run forming the first and last evaluation windows.
pub const EVAL_FRACTION: f64 = 0.1;

/// Mean stage cost over the last 10% of steps.
pub fn end_window_cost(out: &RunOutput) -> f64 {
    window_mean(&out.metrics.stage_cost, EVAL_FRACTION, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    /// Mean over seeds of the end-window mean stage cost.
    pub metric: f64,
    pub per_seed: Vec<(u64, f64)>,
}

/// Ascending metric; equal metrics put the larger step size first.
pub fn sort_sweep(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| a.metric.total_cmp(&b.metric).then(b.alpha.total_cmp(&a.alpha)));
}

/// Runs every `(alpha, seed)` arm with the same seeds, writes the runs under
/// `out/alpha_<alpha>/` and the table to `out/sweep.csv`.
pub fn sweep(cfg: &ExperimentConfig, alphas: &[f64], seeds: &[u64], out: Option<&Path>) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one step size and one seed".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut c = cfg.clone();
        c.learner.alpha = Some(alpha);
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let metric = match out {
                Some(dir) => {
                    let (r, _) = run_to_dir(&c, seed, &dir.join(format!("alpha_{alpha:e}")))?;
                    end_window_cost(&r)
                }
                None => end_window_cost(&run(&c, seed)?),
            };
            log::info!("{} alpha {alpha:e} seed {seed}: end-window cost {metric}", c.algorithm);
            per_seed.push((seed, metric));
        }
        let metric = per_seed.iter().map(|(_, m)| m).sum::<f64>() / per_seed.len() as f64;
        rows.push(SweepRow {
            alpha,
            metric,
            per_seed,
        });
    }
    sort_sweep(&mut rows);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = lf_writer(&dir.join("sweep.csv"))?;
        w.write_record(["rank", "algorithm", "alpha", "metric", "seeds"])?;
        for (k, r) in rows.iter().enumerate() {
            let seeds: Vec<String> = r.per_seed.iter().map(|(s, m)| format!("{s}:{m}")).collect();
            w.write_record([
                k.to_string(),
                cfg.algorithm.to_string(),
                format!("{:e}", r.alpha),
                r.metric.to_string(),
                seeds.join(" "),
            ])?;
        }
        w.flush()?;
    }
    Ok(rows)
}

/// `|delta|` and stage cost series read back from a `steps.csv`.
pub fn read_series(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("{} lacks column {name}", path.display())))
    };
    let (ci, di) = (col("global_cost")?, col("delta")?);
    let mut cost = Vec::new();
    let mut td = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |k: usize| {
            rec[k]
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        };
        cost.push(parse(ci)?);
        td.push(parse(di)?.abs());
    }
    Ok((td, cost))
}

/// Run directories below `root` (any directory holding a manifest).
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join("manifest.toml").is_file() {
            out.push(d.clone());
        }
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Per-algorithm percentile bands of the 100-step moving averages of `|delta|`
/// and stage cost, written to `out/bands_<algo>.csv` plus `out/aggregate.toml`.
pub fn aggregate(input: &Path, out: &Path) -> Result<BTreeMap<Algorithm, usize>> {
    let runs = find_runs(input)?;
    if runs.is_empty() {
        return Err(Error::Config(format!("no runs found under {}", input.display())));
    }
    let mut groups: BTreeMap<Algorithm, Vec<(Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for dir in &runs {
        let manifest = read_manifest(dir)?;
        let (td, cost) = read_series(&dir.join("steps.csv"))?;
        groups
            .entry(manifest.algorithm)
            .or_default()
            .push((moving_average(&td, MOVING_WINDOW), moving_average(&cost, MOVING_WINDOW)));
    }
    fs::create_dir_all(out)?;
    let mut counts = BTreeMap::new();
    for (algo, series) in &groups {
        let td = bands(&series.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
        let cost = bands(&series.iter().map(|s| s.1.clone()).collect::<Vec<_>>());
        let mut w = lf_writer(&out.join(format!("bands_{algo}.csv")))?;
        w.write_record([
            "t",
            "td_p32",
            "td_median",
            "td_p68",
            "cost_p32",
            "cost_median",
            "cost_p68",
        ])?;
        for t in 0..td.median.len() {
            w.write_record(
                [
                    t as f64,
                    td.p32[t],
                    td.median[t],
                    td.p68[t],
                    cost.p32[t],
                    cost.median[t],
                    cost.p68[t],
                ]
                .iter()
                .enumerate()
                .map(|(k, x)| if k == 0 { t.to_string() } else { x.to_string() }),
            )?;
        }
        w.flush()?;
        counts.insert(*algo, series.len());
    }
    let mut meta = fs::File::create(out.join("aggregate.toml"))?;
    writeln!(meta, "percentile_rule = \"{PERCENTILE_RULE}\"")?;
    writeln!(meta, "moving_window = {MOVING_WINDOW}")?;
    writeln!(meta, "td_series = \"moving average of |delta|\"")?;
    writeln!(meta, "\n[runs]")?;
    for (a, n) in &counts {
        writeln!(meta, "{a} = {n}")?;
    }
    Ok(counts)
}

#[derive(Debug)]
pub struct MessageAudit {
    pub dir: PathBuf,
    pub report: AuditReport,
    /// Epochs whose GAC payload is neither the per-step scalars alone nor
    /// the per-step scalars plus one C matrix.
    pub payload_violations: Vec<String>,
}

impl MessageAudit {
    pub fn passed(&self) -> bool {
        self.report.passed() && self.payload_violations.is_empty()
    }
}

/// Audits the message logs of every run below `input`.
pub fn audit_messages(input: &Path) -> Result<Vec<MessageAudit>> {
    let mut out = Vec::new();
    for dir in find_runs(input)? {
        let path = dir.join("messages.csv");
        if !path.is_file() {
            continue;
        }
        let manifest = read_manifest(&dir)?;
        let cfg = &manifest.config;
        let records = read_records(fs::File::open(&path)?)?;
        let spec = AuditSpec {
            trajectory_len: cfg.mpc.horizon * cfg.mpc.structure.state_dim,
            sample_count: cfg.learner.samples,
        };
        let topo: &Topology = &cfg.topology;
        let report = audit(&records, topo, &spec);
        let t = cfg.learner.samples;
        let allowed = [3, 3 + t * (t + 1) / 2];
        let payload_violations = gac_payload_per_epoch(&records)?
            .into_iter()
            .filter(|(_, p)| !allowed.contains(p))
            .map(|(e, p)| format!("epoch {e}: GAC payload {p}"))
            .collect();
        out.push(MessageAudit {
            dir,
            report,
            payload_violations,
        });
    }
    Ok(out)
}
