//! Monte Carlo experiment runner: paired evaluation of the precoding methods
//! over scenario grids, aggregated into report rows.

pub mod flops;
pub mod report;
pub mod table3;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::channel::{self, ChannelParams, CsiNoiseModel};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{self, ChannelSet, SystemConfig};
use crate::neural::dataset::{build_dataset, split, DatasetSpec};
use crate::neural::loss::{recover_and_rate, recover_columns};
use crate::neural::prune::{self, PruneSchedule};
use crate::neural::train::TrainConfig;
use crate::neural::NetworkModel;
use crate::rng::{derive_seed, sub_rng};
use crate::transform;
use crate::wmmse::{self, WmmseOptions};

pub use flops::{flops_lcp, flops_wmmse};
pub use report::{read_csv, write_csv, write_report, ReportRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Table3Snr,
    Table3Users,
    SweepUsers,
    SweepSnr,
    OfdmGranularity,
    Pruning,
    ImperfectCsi,
    GeneralizationStreams,
    GeneralizationZerofill,
    Timing,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Table3Snr => "table3_snr",
            Scenario::Table3Users => "table3_users",
            Scenario::SweepUsers => "sweep_users",
            Scenario::SweepSnr => "sweep_snr",
            Scenario::OfdmGranularity => "ofdm_granularity",
            Scenario::Pruning => "pruning",
            Scenario::ImperfectCsi => "imperfect_csi",
            Scenario::GeneralizationStreams => "generalization_streams",
            Scenario::GeneralizationZerofill => "generalization_zerofill",
            Scenario::Timing => "timing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// MIMO WMMSE designed on the observed channels.
    Wmmse,
    /// Transform, exact MISO WMMSE, recovery.
    LcpIdeal,
    /// Transform, learned features, recovery.
    LcpNet,
    /// Eigen-based zero forcing.
    Ezf,
    /// MIMO WMMSE designed on the true channels (ratio reference under CSI error).
    WmmseOracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Wmmse => "wmmse",
            Method::LcpIdeal => "lcp_ideal",
            Method::LcpNet => "lcp_net",
            Method::Ezf => "ezf",
            Method::WmmseOracle => "wmmse_oracle",
        }
    }
}

/// Experiment description; the grid fields used depend on the scenario and
/// fall back to the defaults of [`ExperimentSpec::grid_defaults`] when empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub scenario: Scenario,
    pub cfg: SystemConfig,
    #[serde(default = "ChannelParams::unit")]
    pub params: ChannelParams,
    pub n_realizations: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
    /// Network checkpoint for `lcp_net`. `{K}`, `{B}` and `{snr}` are replaced
    /// by the point's user count, granularity and SNR.
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub wmmse: WmmseOptions,
    #[serde(default)]
    pub snr_db: Vec<f64>,
    #[serde(default)]
    pub users: Vec<usize>,
    #[serde(default)]
    pub granularity: Vec<usize>,
    #[serde(default)]
    pub error_var: Vec<f64>,
    #[serde(default)]
    pub active_users: Vec<usize>,
    #[serde(default)]
    pub prune: Option<PruneSchedule>,
    /// Data sizes and optimizer settings for pruning fine-tuning.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Record wall times (always on in the timing scenario). Off by default so
    /// that reports are byte-reproducible.
    #[serde(default)]
    pub record_time: bool,
}

impl ExperimentSpec {
    pub fn new(name: &str, scenario: Scenario, cfg: SystemConfig, n_realizations: usize, seed: u64, methods: Vec<Method>) -> Self {
        Self {
            name: name.into(),
            scenario,
            cfg,
            params: ChannelParams::unit(),
            n_realizations,
            seed,
            methods,
            output_path: None,
            checkpoint: None,
            wmmse: WmmseOptions::default(),
            snr_db: Vec::new(),
            users: Vec::new(),
            granularity: Vec::new(),
            error_var: Vec::new(),
            active_users: Vec::new(),
            prune: None,
            train: None,
            record_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_realizations == 0 {
            return bad("n_realizations must be at least 1");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        self.cfg.validate()?;
        self.params.validate()?;
        self.wmmse.validate()?;
        if self.methods.contains(&Method::LcpNet) && self.checkpoint.is_none() {
            return bad("lcp_net needs a checkpoint");
        }
        if self.scenario == Scenario::Pruning && (self.checkpoint.is_none() || self.train.is_none()) {
            return bad("pruning needs a checkpoint and a train section");
        }
        if self.error_var.iter().any(|&e| !(e >= 0.0)) {
            return bad("error variances must be nonnegative");
        }
        if self.active_users.iter().any(|&a| a == 0 || a > self.cfg.n_users) {
            return bad("active user counts must lie in 1..=K");
        }
        Ok(())
    }
}

/// Points of the scenario grid.
#[derive(Debug, Clone)]
struct Point {
    cfg: SystemConfig,
    params: ChannelParams,
    error_var: f64,
    active_users: usize,
    mixed_streams: bool,
    pruned: Option<usize>,
    model: Option<NetworkModel>,
}

fn checkpoint_path(template: &str, cfg: &SystemConfig) -> PathBuf {
    PathBuf::from(
        template
            .replace("{K}", &cfg.n_users.to_string())
            .replace("{B}", &cfg.granularity.to_string())
            .replace("{snr}", &format!("{}", cfg.snr_db().round())),
    )
}

fn base_point(spec: &ExperimentSpec, cfg: SystemConfig) -> Point {
    let params = spec.params.clone().with_rb(cfg.granularity);
    Point { active_users: cfg.n_users, cfg, params, error_var: 0.0, mixed_streams: false, pruned: None, model: None }
}

fn user_cfg(base: &SystemConfig, k: usize) -> SystemConfig {
    let d = base.streams.first().copied().unwrap_or(1);
    let mut cfg = base.clone();
    cfg.n_users = k;
    cfg.streams = vec![d; k];
    cfg.weights = vec![1.0; k];
    cfg
}

fn expand(spec: &ExperimentSpec) -> Result<Vec<Point>> {
    let base = &spec.cfg;
    let or = |v: &[f64], d: &[f64]| if v.is_empty() { d.to_vec() } else { v.to_vec() };
    let mut points = match spec.scenario {
        Scenario::Table3Snr | Scenario::SweepSnr => or(&spec.snr_db, &[-5.0, 0.0, 5.0, 10.0, 15.0])
            .into_iter()
            .map(|s| base_point(spec, base.clone().with_snr_db(s)))
            .collect(),
        Scenario::Table3Users | Scenario::SweepUsers => {
            let users = if spec.users.is_empty() { vec![8, 10, 12, 14, 16] } else { spec.users.clone() };
            users.into_iter().map(|k| base_point(spec, user_cfg(base, k))).collect()
        }
        Scenario::OfdmGranularity => {
            let bs = if spec.granularity.is_empty() { vec![1, 2, 4] } else { spec.granularity.clone() };
            bs.into_iter().map(|b| base_point(spec, base.clone().with_granularity(b))).collect()
        }
        Scenario::ImperfectCsi => or(&spec.error_var, &[0.01, 0.05, 0.1])
            .into_iter()
            .map(|e| Point { error_var: e, ..base_point(spec, base.clone()) })
            .collect(),
        Scenario::GeneralizationStreams => {
            vec![base_point(spec, base.clone()), Point { mixed_streams: true, ..base_point(spec, base.clone()) }]
        }
        Scenario::GeneralizationZerofill => {
            let act = if spec.active_users.is_empty() { (1..=base.n_users).collect() } else { spec.active_users.clone() };
            act.into_iter().map(|a| Point { active_users: a, ..base_point(spec, base.clone()) }).collect()
        }
        Scenario::Pruning | Scenario::Timing => vec![base_point(spec, base.clone())],
    };
    for p in points.iter_mut() {
        p.cfg.validate()?;
        if spec.methods.contains(&Method::LcpNet) || spec.scenario == Scenario::Pruning {
            let path = checkpoint_path(spec.checkpoint.as_deref().unwrap_or_default(), &p.cfg);
            let model = NetworkModel::load(&path)
                .map_err(|e| Error::InvalidConfig(format!("checkpoint {}: {e}", path.display())))?;
            check_model(&model, &p.cfg)?;
            p.model = Some(model);
        }
    }
    if spec.scenario == Scenario::Pruning {
        points = pruning_points(spec, points.remove(0))?;
    }
    Ok(points)
}

fn check_model(model: &NetworkModel, cfg: &SystemConfig) -> Result<()> {
    if model.arch.n_streams != cfg.total_streams() || model.arch.n_rb != cfg.granularity {
        return Err(Error::InvalidConfig(format!(
            "checkpoint built for M={} B={}, scenario needs M={} B={}",
            model.arch.n_streams,
            model.arch.n_rb,
            cfg.total_streams(),
            cfg.granularity
        )));
    }
    Ok(())
}

/// Unpruned model followed by one point per schedule round.
fn pruning_points(spec: &ExperimentSpec, base: Point) -> Result<Vec<Point>> {
    let schedule = spec.prune.clone().unwrap_or_default();
    let tc = spec.train.clone().unwrap_or_default();
    let ds = DatasetSpec::new(base.params.clone(), base.cfg.clone(), tc.n_train + tc.n_val, derive_seed(spec.seed, 0x7072_756e));
    let (train_set, val, _) = split(build_dataset(&ds)?, tc.n_train, tc.n_val);
    let model = base.model.clone().expect("pruning point carries a model");
    let rounds = prune::prune_schedule(&model, &schedule, &train_set, &val, &base.cfg, &tc)?;
    let mut points = vec![Point { pruned: Some(0), ..base.clone() }];
    for (i, r) in rounds.into_iter().enumerate() {
        points.push(Point { pruned: Some(i + 1), model: Some(r.model), ..base.clone() });
    }
    Ok(points)
}

/// Random per-user stream counts in `1..=cap` with the same total as `cfg`.
pub fn random_stream_pattern(cfg: &SystemConfig, cap: usize, rng: &mut impl Rng) -> Vec<usize> {
    let total = cfg.total_streams();
    let cap = cap.min(cfg.n_rx).max(1);
    let mut d = vec![1; cfg.n_users];
    let mut left = total.saturating_sub(cfg.n_users).min(cfg.n_users * (cap - 1));
    while left > 0 {
        let k = rng.random_range(0..cfg.n_users);
        if d[k] < cap {
            d[k] += 1;
            left -= 1;
        }
    }
    d
}

/// Order-independent fingerprint of a channel draw.
pub fn draw_hash(ch: &ChannelSet) -> u64 {
    let mut h = DefaultHasher::new();
    for m in ch.entries() {
        for z in m.iter() {
            z.re.to_bits().hash(&mut h);
            z.im.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Per-method outcome of one realization.
#[derive(Debug, Clone, Copy)]
struct Outcome {
    wsr: f64,
    seconds: f64,
    iters: usize,
}

/// Precoders of `method` designed on `observed`, scored on `truth`. The
/// recorded time covers the design only.
fn run_method(
    method: Method,
    truth: &ChannelSet,
    observed: &ChannelSet,
    cfg: &SystemConfig,
    opts: &WmmseOptions,
    model: Option<&NetworkModel>,
) -> Result<Outcome> {
    let start = Instant::now();
    let (pre, iters) = match method {
        Method::Wmmse | Method::WmmseOracle => {
            let design = if method == Method::Wmmse { observed } else { truth };
            let (pre, trace) = wmmse::wmmse_mimo_ofdm(design, cfg, opts)?;
            (pre, trace.n_iters)
        }
        Method::LcpIdeal => {
            let (pre, diag) = transform::lcp_ideal_solve(observed, cfg, opts)?;
            (pre, diag.miso_trace.n_iters)
        }
        Method::Ezf => (transform::ezf_precoders(observed, cfg)?, 0),
        Method::LcpNet => {
            let model = model.ok_or_else(|| Error::InvalidConfig("lcp_net needs a model".into()))?;
            (lcp_net_precoders(model, observed, cfg)?, 0)
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    Ok(Outcome { wsr: model::sum_rate_ofdm(truth, &pre, cfg)?, seconds, iters })
}

/// Learned pipeline: transform, predict features, recover, score on `truth`.
pub fn lcp_net_rate(model: &NetworkModel, truth: &ChannelSet, observed: &ChannelSet, cfg: &SystemConfig) -> Result<f64> {
    let problem = transform::mimo_to_miso(observed, cfg)?;
    let f = model.forward(&problem)?;
    Ok(recover_and_rate(&problem, Some(truth), cfg, &f.p, &f.lambda, f.q.as_deref(), false)?.wsr)
}

/// Learned pipeline returning precoders.
pub fn lcp_net_precoders(model: &NetworkModel, observed: &ChannelSet, cfg: &SystemConfig) -> Result<model::PrecoderSet> {
    let problem = transform::mimo_to_miso(observed, cfg)?;
    let gram = model::virtual_gram(&problem);
    let input = model.prepare_with(&[&problem], &[model::weight_gram(&problem, &gram)])?;
    let f = model.predict_input(&input).remove(0);
    let cols = recover_columns(&problem, &gram, cfg, &f.p, &f.lambda, f.q.as_deref())?;
    transform::assemble_precoders(&cols, &problem.stream_owner, cfg)
}

/// All methods of one realization on a shared draw.
struct Realization {
    hash: u64,
    outcomes: Vec<Outcome>,
}

fn realize(spec: &ExperimentSpec, point: &Point, methods: &[Method], r: usize) -> Result<Realization> {
    let seed = derive_seed(spec.seed, r as u64);
    let mut cfg = point.cfg.clone();
    if point.mixed_streams {
        cfg.d_max = cfg.n_rx.min(4);
        cfg.streams = random_stream_pattern(&point.cfg, 4, &mut sub_rng(seed, 3));
    }
    let mut truth = channel::gen_channel(&point.params, &cfg, derive_seed(seed, 0));
    truth.zero_fill_from(point.active_users);
    let observed = if point.error_var > 0.0 {
        let mut o = channel::add_csi_noise(&truth, CsiNoiseModel { error_var: point.error_var }, derive_seed(seed, 2))?;
        o.zero_fill_from(point.active_users);
        o
    } else {
        truth.clone()
    };
    let hash = draw_hash(&truth);
    let mut outcomes = Vec::with_capacity(methods.len());
    for &m in methods {
        outcomes.push(run_method(m, &truth, &observed, &cfg, &spec.wmmse, point.model.as_ref())?);
        if draw_hash(&truth) != hash {
            return Err(Error::Degenerate("channel draw modified during evaluation"));
        }
    }
    Ok(Realization { hash, outcomes })
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Methods evaluated at a point: the requested ones plus the oracle WMMSE
/// reference when CSI is noisy.
fn point_methods(spec: &ExperimentSpec, point: &Point) -> Vec<Method> {
    let mut m = spec.methods.clone();
    if point.error_var > 0.0 && !m.contains(&Method::WmmseOracle) {
        m.push(Method::WmmseOracle);
    }
    m
}

/// Result of [`run`]: aggregated rows plus the draw fingerprints per point.
#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub draw_hashes: Vec<Vec<u64>>,
    pub meta: serde_json::Value,
}

pub fn environment_stamp() -> serde_json::Value {
    json!({
        "crate": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "parallel": cfg!(feature = "parallel"),
        "threads": exec::worker_threads(),
    })
}

/// Runs every point of the spec; all methods of a realization share one draw.
pub fn run(spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let points = expand(spec)?;
    let timing = spec.scenario == Scenario::Timing;
    let record_time = timing || spec.record_time;
    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    for point in &points {
        let methods = point_methods(spec, point);
        let reals: Vec<Realization> = if timing {
            realize(spec, point, &methods, 0)?;
            (0..spec.n_realizations).map(|r| realize(spec, point, &methods, r)).collect::<Result<_>>()?
        } else {
            exec::par_map_range(spec.n_realizations, |r| realize(spec, point, &methods, r))
                .into_iter()
                .collect::<Result<_>>()?
        };
        hashes.push(reals.iter().map(|r| r.hash).collect());
        let column = |i: usize, f: fn(&Outcome) -> f64| -> Vec<f64> { reals.iter().map(|r| f(&r.outcomes[i])).collect() };
        let reference_idx = methods
            .iter()
            .position(|&m| m == Method::WmmseOracle)
            .or_else(|| (point.error_var == 0.0).then(|| methods.iter().position(|&m| m == Method::Wmmse)).flatten());
        let reference = reference_idx.map(|i| mean_stderr(&column(i, |o| o.wsr)).0);
        for (i, &m) in methods.iter().enumerate() {
            let (mean, se) = mean_stderr(&column(i, |o| o.wsr));
            let times = column(i, |o| o.seconds * 1e3);
            let time_ms = record_time.then(|| if timing { median(&times) } else { mean_stderr(&times).0 });
            let flops = match m {
                Method::Wmmse | Method::WmmseOracle => {
                    let iters = column(i, |o| o.iters as f64);
                    Some(flops_wmmse(&point.cfg, mean_stderr(&iters).0.round() as u64))
                }
                Method::LcpNet => point.model.as_ref().map(|net| {
                    let d = net.arch.input_dim();
                    flops_lcp(&point.cfg, &net.specs(), d * d)
                }),
                _ => None,
            };
            rows.push(ReportRow {
                scenario: spec.scenario.name().into(),
                snr_db: (point.cfg.snr_db() * 1e9).round() / 1e9,
                n_users: point.cfg.n_users,
                granularity: point.cfg.granularity,
                error_var: point.error_var,
                streams: if point.mixed_streams {
                    "mixed".into()
                } else {
                    point.cfg.streams.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("-")
                },
                active_users: point.active_users,
                pruned: point.pruned,
                method: m.name().into(),
                mean_wsr: mean,
                stderr: se,
                ratio: reference.map(|r| mean / r),
                time_ms,
                flops,
            });
        }
    }
    let meta = json!({
        "spec": spec,
        "environment": environment_stamp(),
        "wmmse_defaults": spec.wmmse,
        "draw_hashes": hashes,
        "time_statistic": if timing { "median" } else { "mean" },
    });
    if let Some(path) = &spec.output_path {
        write_report(path, &rows, &meta)?;
    }
    Ok(Report { rows, draw_hashes: hashes, meta })
}

/// Writes the report files next to `dir/<spec name>`.
pub fn write_in_dir(dir: &Path, spec: &ExperimentSpec, report: &Report) -> Result<PathBuf> {
    let path = dir.join(format!("{}.csv", spec.name));
    write_report(&path, &report.rows, &report.meta)?;
    Ok(path)
}
