//! Experiment orchestration: configuration documents, the top-level
//! experiments (constants report, coupling contraction, propagation-of-chaos
//! rates in W_1 and W_eta, LLN, Gronwall, Duhamel, moment curves), CSV/JSON
//! persistence and the deterministic run record.
//!
//! Experiments fan out over replicas through an explicitly sized rayon pool;
//! every replica owns its noise streams and aggregation runs in fixed index
//! order, so output files are byte-identical for any worker count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{
    fit_rate, gronwall_bound, lln_gap, second_moment_curve, duhamel_residual, GronwallInput,
};
use crate::constants::{
    check_contraction_hypotheses, contraction_constants, FCache,
};
use crate::error::{ChaosError, Result};
use crate::model::{model_from_json_value, ModelSpec};
use crate::rng::{stream, Channel};
use crate::sde::{
    sample_exchangeable_init, simulate_particle_system, simulate_reference_flow,
    simulate_reflection_coupling, InitKind, MeasureFlow, ParticleEnsemble, SimConfig,
};
use crate::transport::{wasserstein_1d, wasserstein_assignment, ASSIGNMENT_CAP};

/// Initial-law document.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitDoc {
    Point { x: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: f64 },
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    Mixture { weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64> },
}

impl InitDoc {
    pub fn to_kind(&self) -> InitKind {
        match self {
            InitDoc::Point { x } => InitKind::Point(x.clone()),
            InitDoc::Gaussian { mean, std } => InitKind::Gaussian { mean: mean.clone(), std: *std },
            InitDoc::UniformBox { lo, hi } => InitKind::UniformBox { lo: lo.clone(), hi: hi.clone() },
            InitDoc::Mixture { weights, means, stds } => InitKind::Mixture {
                weights: weights.clone(),
                means: means.clone(),
                stds: stds.clone(),
            },
        }
    }
}

fn default_n_list() -> Vec<usize> {
    vec![8, 16, 32, 64, 128, 256]
}
fn default_k() -> usize {
    1
}
fn default_eta_list() -> Vec<f64> {
    vec![1.0]
}
fn default_dt() -> f64 {
    0.05
}
fn default_t_end() -> f64 {
    10.0
}
fn default_out_every() -> usize {
    20
}
fn default_replicas() -> usize {
    128
}
fn default_seed() -> u64 {
    0
}
fn default_cg() -> f64 {
    1.0
}
fn default_displacement() -> f64 {
    2.0
}
fn default_w_replicas() -> usize {
    64
}
fn default_theta() -> f64 {
    1.0
}
fn default_c() -> f64 {
    1.0
}
fn default_grid() -> usize {
    400
}
fn default_mc_budget() -> usize {
    400
}
fn default_fd_step() -> f64 {
    0.05
}

/// One experiment described as a JSON document. Unused fields for a given
/// kind are ignored; missing ones fall back to documented defaults.
#[derive(Debug, Clone, Deserialize)]
pub struct ExperimentConfig {
    pub kind: String,
    #[serde(default)]
    pub model: Option<Value>,
    #[serde(default)]
    pub model2: Option<Value>,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_eta_list")]
    pub eta_list: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    /// Record every this-many steps.
    #[serde(default = "default_out_every")]
    pub out_every: usize,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// 0 means "8x the largest N in the list".
    #[serde(default)]
    pub n_ref: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Smoothing width for the coupling (0 = hard reflection).
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_cg")]
    pub c_g: f64,
    /// Initial separation |Z_0| for coupling runs.
    #[serde(default = "default_displacement")]
    pub displacement: f64,
    /// Replica budget for assignment-solver distance estimates.
    #[serde(default = "default_w_replicas")]
    pub w_replicas: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_mc_budget")]
    pub mc_budget: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub init: Option<InitDoc>,
    /// Emit full per-particle trajectories instead of moment summaries.
    #[serde(default)]
    pub full_output: bool,
    /// Evaluation points for the Duhamel test (first coordinate).
    #[serde(default)]
    pub z_points: Option<Vec<f64>>,
}

const KNOWN_KINDS: &[&str] = &[
    "constants",
    "simulate",
    "couple",
    "poc",
    "poc-eta",
    "uniform-time",
    "lln",
    "gronwall",
    "duhamel",
    "moments",
];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| ChaosError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !KNOWN_KINDS.contains(&self.kind.as_str()) {
            return Err(ChaosError::Config(format!(
                "kind: unknown experiment \"{}\" (expected one of {KNOWN_KINDS:?})",
                self.kind
            )));
        }
        if self.n_list.is_empty() || self.n_list.iter().any(|&n| n == 0) {
            return Err(ChaosError::Config("n_list: needs positive entries".into()));
        }
        if self.k == 0 || self.k > *self.n_list.iter().min().unwrap() {
            return Err(ChaosError::Config("k: must satisfy 1 <= k <= min(n_list)".into()));
        }
        for &eta in &self.eta_list {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(ChaosError::Config(format!("eta_list: eta {eta} outside (0, 1]")));
            }
        }
        if !(self.dt > 0.0) || !(self.t_end >= 0.0) {
            return Err(ChaosError::Config("dt/t_end: need dt > 0 and T >= 0".into()));
        }
        if self.replicas == 0 {
            return Err(ChaosError::Config("replicas: must be >= 1".into()));
        }
        Ok(())
    }

    fn model(&self) -> Result<ModelSpec> {
        match &self.model {
            Some(doc) => model_from_json_value(doc),
            None => Err(ChaosError::Config("model: required for this experiment".into())),
        }
    }

    fn init_kind(&self, d: usize) -> InitKind {
        match &self.init {
            Some(doc) => doc.to_kind(),
            None => InitKind::Gaussian { mean: vec![0.0; d], std: 1.0 },
        }
    }

    fn resolved_n_ref(&self) -> usize {
        if self.n_ref > 0 {
            self.n_ref
        } else {
            8 * self.n_list.iter().copied().max().unwrap_or(1)
        }
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig { dt: self.dt, t_end: self.t_end, seed: self.seed, replicas: self.replicas }
    }
}

/// Provenance record written at the end of every run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub kind: String,
    pub config: Value,
    pub version: String,
    pub wall_seconds: f64,
    pub digests: BTreeMap<String, String>,
    pub summary: Value,
}

/// Floating point with 17 significant digits, enough to round-trip f64.
fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents)?;
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

/// N indices sampled without replacement from `0..pool` (partial
/// Fisher–Yates), deterministic in the stream coordinates.
fn subsample_without_replacement(
    pool: usize,
    count: usize,
    seed: u64,
    replica: u64,
    tag: u64,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool).collect();
    let mut rng = stream(seed, replica, tag, Channel::Subsample);
    let take = count.min(pool);
    for i in 0..take {
        let j = i + (rng.gen::<u64>() as usize) % (pool - i);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

struct ExperimentOutput {
    summary: Value,
    files: Vec<PathBuf>,
}

fn constants_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    let model = cfg.model()?;
    let consts = contraction_constants(&model)?;
    let report = check_contraction_hypotheses(&model, cfg.c_g)?;
    let doc = json!({
        "delta": consts.delta,
        "c_E": consts.c_e,
        "lambda0": consts.lambda0,
        "kappa0": report.threshold_kappa0,
        "thresholds": {
            "coupling": report.threshold_coupling,
            "half_k2": report.threshold_half_k2,
            "kappa0": report.threshold_kappa0,
        },
        "lhs_kb_plus_ksigma": report.lhs,
        "gates": {
            "coupling": report.gate_coupling,
            "fluctuation": report.gate_fluctuation,
            "overall": report.gate_overall,
        },
        "c_G": report.c_g,
        "d": report.dim,
        "quadrature_error": consts.quadrature_error,
        "truncation_radius": consts.truncation_radius,
    });
    let path = out_dir.join("constants_report.json");
    write_file(&path, serde_json::to_string_pretty(&doc)?.as_bytes())?;
    Ok(ExperimentOutput { summary: doc, files: vec![path] })
}

fn coupling_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    let model = cfg.model()?;
    let consts = contraction_constants(&model)?;
    let sim = cfg.sim_config();
    sim.validate()?;
    let n_ref = cfg.resolved_n_ref();
    let flow = simulate_reference_flow(&model, n_ref, &cfg.init_kind(model.d), &sim, cfg.out_every)?;
    let r_hi = (cfg.displacement.abs() * 4.0 + 10.0).max(20.0);
    let fcache = FCache::new(&model.profile, model.beta, r_hi, 4096)?;
    let mut x_tilde = vec![0.0; model.d];
    let mut x_hat = vec![0.0; model.d];
    x_tilde[0] = cfg.displacement / 2.0;
    x_hat[0] = -cfg.displacement / 2.0;

    let traces: Vec<_> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            simulate_reflection_coupling(
                &model,
                &flow,
                &x_tilde,
                &x_hat,
                &sim,
                r as u64,
                cfg.epsilon,
                &fcache,
                cfg.out_every,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let times = traces[0].times.clone();
    let m = cfg.replicas as f64;
    let mut rows = Vec::with_capacity(times.len());
    let mut curve = Vec::with_capacity(times.len());
    for (ti, &t) in times.iter().enumerate() {
        let mut acc = crate::numeric::Kahan::new();
        let mut acc2 = crate::numeric::Kahan::new();
        let mut merged = 0usize;
        for trace in &traces {
            let v = trace.f_z[ti];
            acc.add(v);
            acc2.add(v * v);
            if trace.tau.map_or(false, |tau| tau <= t) {
                merged += 1;
            }
        }
        let mean = acc.value() / m;
        let var = (acc2.value() / m - mean * mean).max(0.0);
        let se = (var / m).sqrt();
        curve.push((t, mean, se, merged as f64 / m));
        rows.push(vec![fmt17(t), fmt17(mean), fmt17(se), fmt17(merged as f64 / m)]);
    }
    let csv_path = out_dir.join("couple.csv");
    write_csv(&csv_path, "t,e_f_z,stderr,fraction_merged", &rows)?;

    // Exponential fit on the strictly positive part of the curve (skip t=0).
    let fit_points: Vec<(f64, f64)> = curve
        .iter()
        .skip(1)
        .filter(|(_, mean, _, _)| *mean > 0.0)
        .map(|(t, mean, _, _)| (*t, *mean))
        .collect();
    let f0 = fcache.f(cfg.displacement.abs());
    let (rate, rate_ci, r2) = if fit_points.len() >= 3 {
        let fit = fit_rate(&fit_points, false)?;
        (-fit.slope, fit.ci_half, fit.r2)
    } else {
        (f64::INFINITY, 0.0, 1.0)
    };
    // Pointwise envelope check beyond t = 0.5 with MC slack.
    let envelope_ok = curve.iter().all(|(t, mean, se, _)| {
        *t < 0.5 || *mean <= 1.05 * (-consts.lambda0 * t).exp() * f0 + 3.0 * se
    });
    let summary = json!({
        "lambda0": consts.lambda0,
        "f_z0": f0,
        "fitted_rate": rate,
        "rate_ci_half": rate_ci,
        "fit_r2": r2,
        "rate_pass": rate >= 0.9 * consts.lambda0,
        "envelope_pass": envelope_ok,
        "fraction_merged_final": curve.last().map(|c| c.3),
        "epsilon": cfg.epsilon,
        "replicas": cfg.replicas,
    });
    let report_path = out_dir.join("report.json");
    write_file(&report_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(ExperimentOutput { summary, files: vec![csv_path, report_path] })
}

/// Per-replica distance table: `dist[time][eta]`, with assignment-based
/// entries possibly absent (NaN) outside the designated replica budget.
struct PocReplica {
    dists: Vec<Vec<f64>>,
}

fn poc_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    let model = cfg.model()?;
    if model.d != 1 || cfg.k != 1 {
        return Err(ChaosError::Config(
            "poc: this experiment is wired for d = 1, k = 1 marginals".into(),
        ));
    }
    let sim = cfg.sim_config();
    sim.validate()?;
    let n_ref = cfg.resolved_n_ref();
    let init = cfg.init_kind(model.d);
    let flow = simulate_reference_flow(&model, n_ref, &init, &sim, cfg.out_every)?;
    let times: Vec<f64> = flow.clouds().iter().map(|c| c.time).collect();
    let n_times = times.len();
    // Sorted-matching W1 is exact and cheap, evaluated on every replica;
    // assignment-based W_eta runs on a replica subset and a time subset
    // (early window for the short-time shape, last third for the plateau).
    let needs_assignment = cfg.eta_list.iter().any(|&e| e < 1.0);
    let plateau_start = n_times - n_times / 3;
    let assignment_times: Vec<usize> = (0..n_times)
        .filter(|&ti| ti < 6 || ti >= plateau_start)
        .collect();
    let w_replicas = cfg.w_replicas.min(cfg.replicas);

    let mut per_n: Vec<Vec<PocReplica>> = Vec::with_capacity(cfg.n_list.len());
    for (n_idx, &n) in cfg.n_list.iter().enumerate() {
        if n > ASSIGNMENT_CAP {
            return Err(ChaosError::Config(format!(
                "n_list: N = {n} exceeds the assignment cap {ASSIGNMENT_CAP}"
            )));
        }
        let results: Vec<PocReplica> = (0..cfg.replicas)
            .into_par_iter()
            .map(|rep| -> Result<PocReplica> {
                let replica_id = ((n_idx + 1) as u64) << 32 | rep as u64;
                let init_ens =
                    sample_exchangeable_init(&init, model.d, n, cfg.seed, replica_id)?;
                let traj =
                    simulate_particle_system(&model, &init_ens, &sim, replica_id, cfg.out_every)?;
                if traj.len() != n_times {
                    return Err(ChaosError::Numeric("output grid mismatch".into()));
                }
                let mut dists = vec![vec![f64::NAN; cfg.eta_list.len()]; n_times];
                for ti in 0..n_times {
                    let cloud = traj[ti].states();
                    let ref_cloud = flow.clouds()[ti].states();
                    let pick =
                        subsample_without_replacement(n_ref, n, cfg.seed, replica_id, ti as u64);
                    let sampled: Vec<f64> = pick.iter().map(|&j| ref_cloud[j]).collect();
                    for (ei, &eta) in cfg.eta_list.iter().enumerate() {
                        if eta == 1.0 {
                            dists[ti][ei] = wasserstein_1d(cloud, &sampled, 1.0)?.value;
                        } else if needs_assignment
                            && (rep as usize) < w_replicas
                            && assignment_times.contains(&ti)
                        {
                            dists[ti][ei] = wasserstein_assignment(
                                cloud,
                                &sampled,
                                1,
                                1,
                                eta,
                                ASSIGNMENT_CAP,
                            )?
                            .value;
                        }
                    }
                }
                Ok(PocReplica { dists })
            })
            .collect::<Result<Vec<_>>>()?;
        per_n.push(results);
    }

    // Aggregate: mean and stderr over the replicas carrying a value.
    let mut rows = Vec::new();
    // mean_table[(eta index, n index)][time] = (mean, stderr).
    let mut mean_table: Vec<Vec<Vec<(f64, f64)>>> =
        vec![vec![Vec::new(); cfg.n_list.len()]; cfg.eta_list.len()];
    for (n_idx, &n) in cfg.n_list.iter().enumerate() {
        for ti in 0..n_times {
            for (ei, &eta) in cfg.eta_list.iter().enumerate() {
                let vals: Vec<f64> = per_n[n_idx]
                    .iter()
                    .map(|r| r.dists[ti][ei])
                    .filter(|v| v.is_finite())
                    .collect();
                if vals.is_empty() {
                    mean_table[ei][n_idx].push((f64::NAN, f64::NAN));
                    continue;
                }
                let m = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / m;
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0).max(1.0);
                let se = (var / m).sqrt();
                mean_table[ei][n_idx].push((mean, se));
                rows.push(vec![
                    format!("{n}"),
                    fmt17(times[ti]),
                    fmt17(eta),
                    fmt17(mean),
                    fmt17(se),
                ]);
            }
        }
    }
    let csv_path = out_dir.join("poc.csv");
    write_csv(&csv_path, "n,t,eta,w_estimate,stderr", &rows)?;

    // Plateau (mean over the last third of the grid) and log-log slope per
    // eta; uniform-in-time diagnostics on the second half for eta = 1.
    let mut plateaus = Vec::new();
    let mut slopes = Vec::new();
    for (ei, &eta) in cfg.eta_list.iter().enumerate() {
        let mut fit_points = Vec::new();
        for (n_idx, &n) in cfg.n_list.iter().enumerate() {
            let window: Vec<(f64, f64)> = mean_table[ei][n_idx][plateau_start..]
                .iter()
                .filter(|(m, _)| m.is_finite())
                .copied()
                .collect();
            if window.is_empty() {
                continue;
            }
            let mean = window.iter().map(|(m, _)| m).sum::<f64>() / window.len() as f64;
            // Conservative: time points are correlated, so average the
            // per-time errors instead of shrinking by 1/sqrt(count).
            let se = window.iter().map(|(_, s)| s).sum::<f64>() / window.len() as f64;
            plateaus.push(json!({"eta": eta, "n": n, "plateau": mean, "stderr": se}));
            if mean > 0.0 {
                fit_points.push((n as f64, mean));
            }
        }
        if fit_points.len() >= 3 {
            let fit = fit_rate(&fit_points, true)?;
            slopes.push(json!({
                "eta": eta,
                "slope": fit.slope,
                "ci_half": fit.ci_half,
                "r2": fit.r2,
            }));
        }
    }
    let mut uniform = Vec::new();
    if let Some(ei) = cfg.eta_list.iter().position(|&e| e == 1.0) {
        for (n_idx, &n) in cfg.n_list.iter().enumerate() {
            let half = n_times / 2;
            let mut window: Vec<f64> = mean_table[ei][n_idx][half..]
                .iter()
                .filter(|(m, _)| m.is_finite())
                .map(|(m, _)| *m)
                .collect();
            if window.len() < 3 {
                continue;
            }
            let max = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            window.sort_by(f64::total_cmp);
            let median = window[window.len() / 2];
            uniform.push(json!({"n": n, "max_second_half": max, "median_second_half": median}));
        }
    }
    let summary = json!({
        "n_ref": n_ref,
        "replicas": cfg.replicas,
        "w_replicas": w_replicas,
        "plateaus": plateaus,
        "slopes": slopes,
        "uniform_in_time": uniform,
    });
    let report_path = out_dir.join("report.json");
    write_file(&report_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(ExperimentOutput { summary, files: vec![csv_path, report_path] })
}

fn lln_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    // Built-in instance of the LLN lemma: h(v, w) = w, Z uniform on [0, 1].
    let rows = lln_gap(
        |_, w| w[0],
        |_| 0.5,
        |rng: &mut crate::rng::Stream, out: &mut [f64]| out[0] = rng.gen(),
        1,
        &cfg.n_list,
        cfg.replicas,
        cfg.seed,
    )?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![format!("{}", r.n), fmt17(r.mean_gap), fmt17(r.stderr)])
        .collect();
    let csv_path = out_dir.join("lln.csv");
    write_csv(&csv_path, "n,mean_gap,stderr", &csv_rows)?;
    let fit_points: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.mean_gap > 0.0).map(|r| (r.n as f64, r.mean_gap)).collect();
    let fit = fit_rate(&fit_points, true)?;
    let summary = json!({
        "rows": rows.iter().map(|r| json!({"n": r.n, "gap": r.mean_gap, "stderr": r.stderr})).collect::<Vec<_>>(),
        "slope": fit.slope,
        "ci_half": fit.ci_half,
        "r2": fit.r2,
    });
    let report_path = out_dir.join("report.json");
    write_file(&report_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(ExperimentOutput { summary, files: vec![csv_path, report_path] })
}

fn gronwall_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    let input = GronwallInput {
        a: vec![1.0; cfg.grid + 1],
        t_end: cfg.t_end,
        c: cfg.c,
        theta: cfg.theta,
        tolerance: 1e-12,
    };
    let bound = gronwall_bound(&input)?;
    let h = cfg.t_end / cfg.grid as f64;
    let rows: Vec<Vec<String>> = bound
        .iter()
        .enumerate()
        .map(|(i, b)| vec![fmt17(i as f64 * h), fmt17(*b)])
        .collect();
    let csv_path = out_dir.join("gronwall.csv");
    write_csv(&csv_path, "t,bound", &rows)?;
    let summary = json!({
        "theta": cfg.theta,
        "c": cfg.c,
        "t_end": cfg.t_end,
        "bound_at_end": bound.last(),
    });
    let report_path = out_dir.join("report.json");
    write_file(&report_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(ExperimentOutput { summary, files: vec![csv_path, report_path] })
}

fn duhamel_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    let model1 = cfg.model()?;
    let model2 = match &cfg.model2 {
        Some(doc) => model_from_json_value(doc)?,
        None => model1.clone(),
    };
    let flow = MeasureFlow::new(vec![ParticleEnsemble::from_states(
        0.0,
        vec![0.0; 8 * model1.d],
        model1.d,
    )])?;
    let zs = cfg.z_points.clone().unwrap_or_else(|| vec![-0.7, 0.0, 0.7]);
    let z_grid: Vec<Vec<f64>> = zs
        .iter()
        .map(|&z| {
            let mut v = vec![0.0; model1.d];
            v[0] = z;
            v
        })
        .collect();
    let f = |x: &[f64]| (-x.iter().map(|v| v * v).sum::<f64>() / 2.0).exp();
    let report = duhamel_residual(
        &model1,
        &model2,
        &flow,
        &f,
        cfg.t_end.min(2.0).max(0.1),
        &z_grid,
        cfg.mc_budget,
        cfg.fd_step,
        cfg.seed,
    )?;
    let summary = json!({
        "max_residual": report.max_residual,
        "error": report.error,
        "pass": report.max_residual <= 3.0 * report.error + 1e-3,
        "warning": report.warning,
    });
    let report_path = out_dir.join("report.json");
    write_file(&report_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(ExperimentOutput { summary, files: vec![report_path] })
}

fn moments_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    let model = cfg.model()?;
    let sim = cfg.sim_config();
    sim.validate()?;
    let n = *cfg.n_list.iter().max().unwrap();
    let init = sample_exchangeable_init(&cfg.init_kind(model.d), model.d, n, cfg.seed, 0)?;
    let traj = simulate_particle_system(&model, &init, &sim, 0, cfg.out_every)?;
    let curve = second_moment_curve(&traj)?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|(t, m, se)| vec![fmt17(*t), fmt17(*m), fmt17(*se)])
        .collect();
    let csv_path = out_dir.join("moments.csv");
    write_csv(&csv_path, "t,mean_norm2,stderr", &rows)?;
    let max_over = |lo: f64, hi: f64| -> f64 {
        curve
            .iter()
            .filter(|(t, _, _)| *t >= lo && *t <= hi)
            .map(|(_, m, _)| *m)
            .fold(0.0f64, f64::max)
    };
    let half = cfg.t_end / 2.0;
    let summary = json!({
        "n": n,
        "max_first_half": max_over(0.0, half),
        "max_full": max_over(0.0, cfg.t_end),
    });
    let report_path = out_dir.join("report.json");
    write_file(&report_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(ExperimentOutput { summary, files: vec![csv_path, report_path] })
}

fn simulate_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    let model = cfg.model()?;
    let sim = cfg.sim_config();
    sim.validate()?;
    let n = *cfg.n_list.iter().max().unwrap();
    let init_kind = cfg.init_kind(model.d);
    let trajs: Vec<Vec<ParticleEnsemble>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|rep| {
            let init = sample_exchangeable_init(&init_kind, model.d, n, cfg.seed, rep as u64)?;
            simulate_particle_system(&model, &init, &sim, rep as u64, cfg.out_every)
        })
        .collect::<Result<Vec<_>>>()?;
    let files;
    let summary;
    if cfg.full_output {
        let mut rows = Vec::new();
        for (rep, traj) in trajs.iter().enumerate() {
            for ens in traj {
                for p in 0..ens.len() {
                    let mut row = vec![fmt17(ens.time), format!("{rep}"), format!("{p}")];
                    row.extend(ens.point(p).iter().map(|v| fmt17(*v)));
                    rows.push(row);
                }
            }
        }
        let header = {
            let coords: Vec<String> = (0..model.d).map(|k| format!("coord_{k}")).collect();
            format!("t,replica,particle,{}", coords.join(","))
        };
        let csv_path = out_dir.join("trajectory.csv");
        write_csv(&csv_path, &header, &rows)?;
        summary = json!({"rows": rows.len(), "replicas": cfg.replicas, "n": n});
        files = vec![csv_path];
    } else {
        // Pooled moment summaries across replicas, fixed index order.
        let n_times = trajs[0].len();
        let mut rows = Vec::with_capacity(n_times);
        for ti in 0..n_times {
            let mut acc = crate::numeric::Kahan::new();
            let mut acc2 = crate::numeric::Kahan::new();
            let mut count = 0usize;
            for traj in &trajs {
                let ens = &traj[ti];
                for p in 0..ens.len() {
                    let norm2: f64 = ens.point(p).iter().map(|v| v * v).sum();
                    acc.add(norm2);
                    acc2.add(norm2 * norm2);
                    count += 1;
                }
            }
            let m = count as f64;
            let mean = acc.value() / m;
            let var = (acc2.value() / m - mean * mean).max(0.0);
            rows.push(vec![fmt17(trajs[0][ti].time), fmt17(mean), fmt17((var / m).sqrt())]);
        }
        let csv_path = out_dir.join("moments.csv");
        write_csv(&csv_path, "t,mean_norm2,stderr", &rows)?;
        summary = json!({"replicas": cfg.replicas, "n": n, "times": n_times});
        files = vec![csv_path];
    }
    Ok(ExperimentOutput { summary, files })
}

/// Runs one experiment, writes its artifacts and the run record into
/// `out_dir`, and returns the record. `threads` sizes the worker pool (1 is
/// fully serial); results are identical for any value.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<RunRecord> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let started = std::time::Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| ChaosError::Config(format!("threads: {e}")))?;
    let output = pool.install(|| match cfg.kind.as_str() {
        "constants" => constants_experiment(cfg, out_dir),
        "couple" => coupling_experiment(cfg, out_dir),
        "poc" | "poc-eta" | "uniform-time" => poc_experiment(cfg, out_dir),
        "lln" => lln_experiment(cfg, out_dir),
        "gronwall" => gronwall_experiment(cfg, out_dir),
        "duhamel" => duhamel_experiment(cfg, out_dir),
        "moments" => moments_experiment(cfg, out_dir),
        "simulate" => simulate_experiment(cfg, out_dir),
        other => Err(ChaosError::Config(format!("kind: unhandled experiment \"{other}\""))),
    })?;
    let mut digests = BTreeMap::new();
    for file in &output.files {
        let bytes = std::fs::read(file)?;
        let name = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        digests.insert(name, sha256_hex(&bytes));
    }
    let record = RunRecord {
        kind: cfg.kind.clone(),
        config: serde_json::to_value(RunConfigSnapshot::from(cfg))?,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_seconds: started.elapsed().as_secs_f64(),
        digests,
        summary: output.summary,
    };
    // Atomic record write: temp file then rename.
    let record_doc = json!({
        "kind": record.kind,
        "config": record.config,
        "version": record.version,
        "wall_seconds": record.wall_seconds,
        "digests": record.digests,
        "summary": record.summary,
    });
    let tmp = out_dir.join("run_record.json.tmp");
    write_file(&tmp, serde_json::to_string_pretty(&record_doc)?.as_bytes())?;
    std::fs::rename(&tmp, out_dir.join("run_record.json"))?;
    Ok(record)
}

/// Reduced config snapshot embedded in the run record (model documents are
/// echoed verbatim).
#[derive(serde::Serialize)]
struct RunConfigSnapshot {
    kind: String,
    model: Option<Value>,
    model2: Option<Value>,
    n_list: Vec<usize>,
    k: usize,
    eta_list: Vec<f64>,
    dt: f64,
    t_end: f64,
    out_every: usize,
    replicas: usize,
    n_ref: usize,
    seed: u64,
    epsilon: f64,
    c_g: f64,
    displacement: f64,
    w_replicas: usize,
    theta: f64,
    c: f64,
    grid: usize,
    mc_budget: usize,
    fd_step: f64,
}

impl From<&ExperimentConfig> for RunConfigSnapshot {
    fn from(cfg: &ExperimentConfig) -> Self {
        RunConfigSnapshot {
            kind: cfg.kind.clone(),
            model: cfg.model.clone(),
            model2: cfg.model2.clone(),
            n_list: cfg.n_list.clone(),
            k: cfg.k,
            eta_list: cfg.eta_list.clone(),
            dt: cfg.dt,
            t_end: cfg.t_end,
            out_every: cfg.out_every,
            replicas: cfg.replicas,
            n_ref: cfg.resolved_n_ref(),
            seed: cfg.seed,
            epsilon: cfg.epsilon,
            c_g: cfg.c_g,
            displacement: cfg.displacement,
            w_replicas: cfg.w_replicas,
            theta: cfg.theta,
            c: cfg.c,
            grid: cfg.grid,
            mc_budget: cfg.mc_budget,
            fd_step: cfg.fd_step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou_model_doc() -> Value {
        json!({
            "family": "linear", "d": 1, "n": 1, "beta": 1.0,
            "constants": {"k1": 0.0, "k2": 1.0, "r": 1.0, "kb": 0.0, "ksigma": 1e-9},
            "params": {"a": 1.0}
        })
    }

    #[test]
    fn config_validation_messages_name_fields() {
        let err = ExperimentConfig::from_json(r#"{"kind": "warp"}"#).unwrap_err();
        assert!(err.to_string().contains("kind"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"kind": "poc", "eta_list": [1.5]}"#).unwrap_err();
        assert!(err.to_string().contains("eta_list"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"kind": "poc", "n_list": []}"#).unwrap_err();
        assert!(err.to_string().contains("n_list"), "{err}");
        let err = ExperimentConfig::from_json("{ not json").unwrap_err();
        assert!(err.to_string().contains("config"), "{err}");
    }

    #[test]
    fn constants_experiment_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(
            &json!({"kind": "constants", "model": ou_model_doc()}).to_string(),
        )
        .unwrap();
        let record = run(&cfg, dir.path(), 1).unwrap();
        assert!(dir.path().join("constants_report.json").exists());
        assert!(dir.path().join("run_record.json").exists());
        let delta = record.summary["delta"].as_f64().unwrap();
        assert!((delta - 2.0).abs() < 1e-6, "delta {delta}");
        let lambda0 = record.summary["lambda0"].as_f64().unwrap();
        assert!((lambda0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gronwall_experiment_reaches_e() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(
            &json!({"kind": "gronwall", "theta": 1.0, "c": 1.0, "t_end": 1.0, "grid": 200})
                .to_string(),
        )
        .unwrap();
        let record = run(&cfg, dir.path(), 1).unwrap();
        let end = record.summary["bound_at_end"].as_f64().unwrap();
        assert!((end - std::f64::consts::E).abs() / std::f64::consts::E < 1e-7);
    }

    #[test]
    fn determinism_across_thread_counts() {
        let cfg = ExperimentConfig::from_json(
            &json!({
                "kind": "poc",
                "model": {
                    "family": "linear", "d": 1, "n": 1, "beta": 1.0,
                    "constants": {"k1": 0.0, "k2": 1.0, "r": 1.0, "kb": 0.05, "ksigma": 0.01},
                    "params": {"a": 1.0, "kappa": 0.05, "sigma_family": "bounded_smooth", "sigma_scale": 0.1}
                },
                "n_list": [8, 16],
                "t_end": 1.0,
                "dt": 0.1,
                "out_every": 2,
                "replicas": 8,
                "n_ref": 64,
                "seed": 42
            })
            .to_string(),
        )
        .unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = run(&cfg, d1.path(), 1).unwrap();
        let r2 = run(&cfg, d2.path(), 4).unwrap();
        assert_eq!(r1.digests, r2.digests, "digests differ across thread counts");
    }

    #[test]
    fn lln_experiment_slope_near_half() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(
            &json!({"kind": "lln", "n_list": [16, 64, 256, 1024], "replicas": 1500, "seed": 4})
                .to_string(),
        )
        .unwrap();
        let record = run(&cfg, dir.path(), 1).unwrap();
        let slope = record.summary["slope"].as_f64().unwrap();
        assert!((-0.65..=-0.35).contains(&slope), "slope {slope}");
    }

    #[test]
    fn couple_experiment_ou_contracts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(
            &json!({
                "kind": "couple",
                "model": ou_model_doc(),
                "t_end": 3.0,
                "dt": 0.002,
                "out_every": 100,
                "replicas": 200,
                "n_ref": 64,
                "displacement": 2.0,
                "seed": 6
            })
            .to_string(),
        )
        .unwrap();
        let record = run(&cfg, dir.path(), 1).unwrap();
        let rate = record.summary["fitted_rate"].as_f64().unwrap();
        assert!(rate > 0.6, "fitted contraction rate {rate}");
        assert!(dir.path().join("couple.csv").exists());
    }

    #[test]
    fn subsample_is_unique_and_deterministic() {
        let a = subsample_without_replacement(100, 20, 1, 2, 3);
        let b = subsample_without_replacement(100, 20, 1, 2, 3);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 20);
        let c = subsample_without_replacement(100, 20, 1, 2, 4);
        assert_ne!(a, c);
    }
}
