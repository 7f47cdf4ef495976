//! `lcp`: data generation, solving, training, pruning and benchmark runs.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use lcp_core::channel::{self, ChannelFileHeader, ChannelParams};
use lcp_core::experiment::{self, table3, ExperimentSpec};
use lcp_core::model::{self, ChannelSet, PrecoderSet, SystemConfig};
use lcp_core::neural::dataset::{self, DatasetSpec, Sample};
use lcp_core::neural::prune::{self, PruneSchedule};
use lcp_core::neural::train::{self, TrainConfig};
use lcp_core::neural::{Architecture, NetworkModel};
use lcp_core::transform;
use lcp_core::wmmse::{self, WmmseOptions};

#[derive(Parser)]
#[command(name = "lcp", version, about = "Multi-user MIMO precoding experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the realization (or sample) count.
    #[arg(long, global = true)]
    realizations: Option<usize>,
    /// Network checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled channel dataset.
    GenData,
    /// Compute precoders for the channel sets of a channel file.
    Solve {
        #[arg(long, value_enum)]
        method: SolveMethod,
        /// Channel file written by `gen-data` or the channel exporter.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a network on a generated dataset.
    Train,
    /// Apply a pruning schedule to a trained network.
    Prune,
    /// Run an experiment spec.
    Bench,
    /// Run the transformation-loss tables.
    #[command(name = "reproduce-table3")]
    ReproduceTable3 {
        /// Exit with status 3 when a ratio threshold is missed.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveMethod {
    Wmmse,
    LcpIdeal,
    LcpNet,
    Ezf,
}

/// A configuration problem; exits with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Threshold failure in `reproduce-table3 --check`; exits with status 3.
#[derive(Debug)]
struct CheckFailed;

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("acceptance thresholds not met")
    }
}

impl std::error::Error for CheckFailed {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Surfaces invalid configurations detected inside the library as
/// [`ConfigError`].
fn lib<T>(r: lcp_core::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        lcp_core::Error::InvalidConfig(_) | lcp_core::Error::DimensionMismatch(_) | lcp_core::Error::TooManyStreams(..) => {
            config_err(e.to_string())
        }
        other => other.into(),
    })
}

fn read_config<T: DeserializeOwned>(path: Option<&Path>) -> Result<T> {
    let path = path.ok_or_else(|| config_err("--config is required"))?;
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| path.display().to_string())
}

fn default_params() -> ChannelParams {
    ChannelParams::unit()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveJob {
    cfg: SystemConfig,
    #[serde(default)]
    wmmse: WmmseOptions,
}

/// Configuration shared by `train` and `prune`.
#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct LearnJob {
    cfg: SystemConfig,
    #[serde(default = "default_params")]
    params: ChannelParams,
    #[serde(default)]
    train: TrainConfig,
    /// CSI error variance of the training inputs.
    #[serde(default)]
    error_var: f64,
    #[serde(default)]
    active_users: Vec<usize>,
    #[serde(default)]
    architecture: Option<Architecture>,
    #[serde(default)]
    wmmse: WmmseOptions,
    #[serde(default)]
    prune: PruneSchedule,
}

impl LearnJob {
    fn dataset_spec(&self) -> DatasetSpec {
        let tc = &self.train;
        let mut spec = DatasetSpec::new(
            self.params.clone().with_rb(self.cfg.granularity),
            self.cfg.clone(),
            tc.n_train + tc.n_val + tc.n_test,
            tc.seed,
        );
        if self.error_var > 0.0 {
            spec = spec.with_noise(self.error_var);
        }
        spec.active_users = self.active_users.clone();
        spec.wmmse = self.wmmse.clone();
        spec
    }

    fn architecture(&self) -> Architecture {
        self.architecture.clone().unwrap_or_else(|| {
            let (m, b) = (self.cfg.total_streams(), self.cfg.granularity);
            if b == 1 {
                Architecture::mimo(m, self.cfg.total_power, self.cfg.noise_var)
            } else {
                Architecture::ofdm(m, b, self.cfg.total_power, self.cfg.noise_var)
            }
        })
    }

    fn data(&self) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
        let spec = self.dataset_spec();
        eprintln!("generating {} samples", spec.count);
        let samples = lib(dataset::build_dataset(&spec))?;
        Ok(dataset::split(samples, self.train.n_train, self.train.n_val))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn label_wsr(samples: &[Sample]) -> f64 {
    mean(&samples.iter().map(|s| s.label_wsr).collect::<Vec<_>>())
}

fn gen_data(g: &Global) -> Result<()> {
    let mut spec: DatasetSpec = read_config(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    if let Some(n) = g.realizations {
        spec.count = n;
    }
    if spec.count == 0 {
        return Err(config_err("count must be at least 1"));
    }
    let samples = lib(dataset::build_dataset(&spec))?;
    fs::create_dir_all(&g.out)?;
    let path = g.out.join("dataset.bin");
    let mut w = BufWriter::new(fs::File::create(&path)?);
    lib(dataset::write_dataset(&mut w, &spec, &samples))?;
    w.flush()?;
    println!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn precoders_json(pre: &PrecoderSet) -> serde_json::Value {
    let users: Vec<_> = pre
        .per_user
        .iter()
        .map(|v| {
            let cols: Vec<Vec<[f64; 2]>> =
                v.column_iter().map(|c| c.iter().map(|z| [z.re, z.im]).collect()).collect();
            json!({ "columns": cols })
        })
        .collect();
    json!(users)
}

fn solve(g: &Global, method: SolveMethod, input: &Path) -> Result<()> {
    let job: SolveJob = read_config(g.config.as_deref())?;
    lib(job.cfg.validate())?;
    let mut r = BufReader::new(fs::File::open(input).with_context(|| input.display().to_string())?);
    let (header, sets) = read_channels(&mut r)?;
    let cfg = &job.cfg;
    if header.k != cfg.n_users || header.n_rx != cfg.n_rx || header.n_tx != cfg.n_tx || header.n_rb != cfg.granularity {
        return Err(config_err(format!(
            "channel file has K={} N_r={} N_t={} B={}, config differs",
            header.k, header.n_rx, header.n_tx, header.n_rb
        )));
    }
    let net = match method {
        SolveMethod::LcpNet => {
            let path = g.checkpoint.as_deref().ok_or_else(|| config_err("lcp_net needs --checkpoint"))?;
            Some(lib(NetworkModel::load(path))?)
        }
        _ => None,
    };
    let mut results = Vec::new();
    let mut rates = Vec::new();
    for set in &sets {
        let pre = match method {
            SolveMethod::Wmmse => lib(wmmse::wmmse_mimo_ofdm(set, cfg, &job.wmmse))?.0,
            SolveMethod::LcpIdeal => lib(transform::lcp_ideal_solve(set, cfg, &job.wmmse))?.0,
            SolveMethod::Ezf => lib(transform::ezf_precoders(set, cfg))?,
            SolveMethod::LcpNet => lib(experiment::lcp_net_precoders(net.as_ref().expect("model loaded"), set, cfg))?,
        };
        let wsr = lib(model::sum_rate_ofdm(set, &pre, cfg))?;
        rates.push(wsr);
        results.push(json!({ "wsr": wsr, "precoders": precoders_json(&pre) }));
    }
    fs::create_dir_all(&g.out)?;
    write_json(&g.out.join("solve.json"), &json!({ "cfg": cfg, "results": results }))?;
    println!("{} channel sets, mean wsr {:.4}", sets.len(), mean(&rates));
    Ok(())
}

/// Reads either a plain channel file or the true channels of a dataset file.
fn read_channels<R: std::io::BufRead>(r: &mut R) -> Result<(ChannelFileHeader, Vec<ChannelSet>)> {
    let mut text = String::new();
    r.read_line(&mut text)?;
    let header: serde_json::Value = serde_json::from_str(&text).map_err(|e| config_err(format!("channel header: {e}")))?;
    let rest = {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        buf
    };
    let mut joined = text.into_bytes();
    joined.extend_from_slice(&rest);
    let mut cursor = std::io::Cursor::new(joined);
    if header.get("format").is_some() {
        let (_, samples) = lib(dataset::read_dataset(&mut cursor))?;
        let h: ChannelFileHeader = serde_json::from_value(header).map_err(|e| config_err(format!("channel header: {e}")))?;
        return Ok((h, samples.into_iter().map(|s| s.truth).collect()));
    }
    lib(channel::read_channel_file(&mut cursor))
}

fn train_cmd(g: &Global) -> Result<()> {
    let mut job: LearnJob = read_config(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        job.train.seed = seed;
    }
    lib(job.train.validate())?;
    lib(job.dataset_spec().validate())?;
    let arch = job.architecture();
    let net = lib(NetworkModel::new(arch, job.train.seed))?;
    let (tr, val, test) = job.data()?;
    let (best, report) = lib(train::train(net, &tr, &val, &job.cfg, &job.train))?;
    fs::create_dir_all(&g.out)?;
    lib(best.save(&g.out.join("model.json")))?;
    lib(train::write_curve(fs::File::create(g.out.join("curve.csv"))?, &report.curve))?;
    let test_wsr = if test.is_empty() { f64::NAN } else { lib(train::evaluate(&best, &test, &job.cfg))? };
    let label = label_wsr(&test);
    write_json(
        &g.out.join("train_report.json"),
        &json!({
            "job": job,
            "best_epoch": report.best_epoch,
            "best_val_wsr": report.best_val_wsr,
            "label_val_wsr": report.label_val_wsr,
            "test_wsr": test_wsr,
            "test_label_wsr": label,
            "test_ratio": test_wsr / label,
            "environment": experiment::environment_stamp(),
        }),
    )?;
    println!("best epoch {}, test wsr {:.4} ({:.2}% of labels)", report.best_epoch, test_wsr, 100.0 * test_wsr / label);
    Ok(())
}

fn prune_cmd(g: &Global) -> Result<()> {
    let mut job: LearnJob = read_config(g.config.as_deref())?;
    if let Some(seed) = g.seed {
        job.train.seed = seed;
    }
    lib(job.train.validate())?;
    let path = g.checkpoint.as_deref().ok_or_else(|| config_err("prune needs --checkpoint"))?;
    let net = lib(NetworkModel::load(path))?;
    lib(job.prune.validate(&net.conv_filters()))?;
    let (tr, val, test) = job.data()?;
    let rounds = lib(prune::prune_schedule(&net, &job.prune, &tr, &val, &job.cfg, &job.train))?;
    fs::create_dir_all(&g.out)?;
    let mut w = csv_writer(&g.out.join("prune.csv"))?;
    writeln!(w, "round,removed,filters,conv_term,val_wsr,test_wsr")?;
    let eval = |m: &NetworkModel| -> Result<f64> {
        if test.is_empty() {
            Ok(f64::NAN)
        } else {
            lib(train::evaluate(m, &test, &job.cfg))
        }
    };
    let base_val = lib(train::evaluate(&net, &val, &job.cfg))?;
    writeln!(w, "0,,{},{},{},{}", join(&net.conv_filters()), prune::model_conv_term(&net), base_val, eval(&net)?)?;
    for (i, r) in rounds.iter().enumerate() {
        lib(r.model.save(&g.out.join(format!("pruned_{}.json", i + 1))))?;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            i + 1,
            join(&r.removed),
            join(&r.model.conv_filters()),
            r.conv_term,
            r.report.best_val_wsr,
            eval(&r.model)?
        )?;
    }
    w.flush()?;
    println!("{} pruning rounds written to {}", rounds.len(), g.out.display());
    Ok(())
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-")
}

fn csv_writer(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path).with_context(|| path.display().to_string())?))
}

fn bench(g: &Global) -> Result<()> {
    let mut spec: ExperimentSpec = read_config(g.config.as_deref())?;
    apply_overrides(&mut spec, g);
    let report = lib(experiment::run(&spec))?;
    let path = lib(experiment::write_in_dir(&g.out, &spec, &report))?;
    print_rows(&report.rows);
    println!("wrote {}", path.display());
    Ok(())
}

fn apply_overrides(spec: &mut ExperimentSpec, g: &Global) {
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    if let Some(n) = g.realizations {
        spec.n_realizations = n;
    }
    if let Some(c) = &g.checkpoint {
        spec.checkpoint = Some(c.display().to_string());
    }
    spec.output_path = None;
}

fn print_rows(rows: &[experiment::ReportRow]) {
    for r in rows {
        println!(
            "{:<24} snr {:>6.1} K {:>2} B {} err {:<5} {:<13} wsr {:>8.4} +- {:.4} ratio {}",
            r.scenario,
            r.snr_db,
            r.n_users,
            r.granularity,
            r.error_var,
            r.method,
            r.mean_wsr,
            r.stderr,
            r.ratio.map_or("-".into(), |x| format!("{x:.4}"))
        );
    }
}

fn reproduce_table3(g: &Global, check: bool) -> Result<()> {
    let mut rows = Vec::new();
    for mut spec in table3::table3_specs(200, 0) {
        if let Some(path) = &g.config {
            let patch: serde_json::Value = read_config(Some(path))?;
            if let Some(n) = patch.get("n_realizations").and_then(|v| v.as_u64()) {
                spec.n_realizations = n as usize;
            }
        }
        apply_overrides(&mut spec, g);
        spec.checkpoint = None;
        let report = lib(experiment::run(&spec))?;
        lib(experiment::write_in_dir(&g.out, &spec, &report))?;
        rows.extend(report.rows);
    }
    print_rows(&rows);
    let checks = table3::check_table3(&rows);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if check && checks.iter().any(|c| !c.passed) {
        return Err(CheckFailed.into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            bail!(ConfigError("--threads must be at least 1".into()));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow!(e))?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::GenData => gen_data(g),
        Command::Solve { method, input } => solve(g, *method, input),
        Command::Train => train_cmd(g),
        Command::Prune => prune_cmd(g),
        Command::Bench => bench(g),
        Command::ReproduceTable3 { check } => reproduce_table3(g, *check),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<ConfigError>() {
                ExitCode::from(2)
            } else if e.is::<CheckFailed>() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
