//! Training data: channel draws paired with their (optionally noisy)
//! observation, the virtual problem seen by the network, and WMMSE labels.

use std::io::{BufRead, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss;
use crate::channel::{self, ChannelParams, CsiNoiseModel};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::c;
use crate::model::{ChannelSet, KeyFeatures, SystemConfig, VirtualMisoProblem};
use crate::rng::{derive_seed, sub_rng};
use crate::transform;
use crate::wmmse::{self, WmmseOptions};

/// Recipe for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub params: ChannelParams,
    pub cfg: SystemConfig,
    #[serde(default)]
    pub noise: Option<CsiNoiseModel>,
    pub count: usize,
    pub seed: u64,
    /// Active-user counts drawn uniformly per sample; users beyond the drawn
    /// count are zero-filled. Empty means every user is active.
    #[serde(default)]
    pub active_users: Vec<usize>,
    #[serde(default)]
    pub wmmse: WmmseOptions,
}

impl DatasetSpec {
    pub fn new(params: ChannelParams, cfg: SystemConfig, count: usize, seed: u64) -> Self {
        Self { params, cfg, noise: None, count, seed, active_users: Vec::new(), wmmse: WmmseOptions::default() }
    }

    pub fn with_noise(mut self, error_var: f64) -> Self {
        self.noise = Some(CsiNoiseModel { error_var });
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.cfg.validate()?;
        self.wmmse.validate()?;
        if self.params.n_rb != self.cfg.granularity {
            return Err(Error::InvalidConfig(format!(
                "channel RBs {} differ from granularity {}",
                self.params.n_rb, self.cfg.granularity
            )));
        }
        if self.active_users.iter().any(|&a| a == 0 || a > self.cfg.n_users) {
            return Err(Error::InvalidConfig("active-user counts must lie in 1..=K".into()));
        }
        Ok(())
    }
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Channels used to score precoders.
    pub truth: ChannelSet,
    /// Channels the precoder is designed from (equal to `truth` without noise).
    pub observed: ChannelSet,
    /// Virtual problem of `observed`.
    pub problem: VirtualMisoProblem,
    pub labels: KeyFeatures,
    /// Rate of the labels on `truth`.
    pub label_wsr: f64,
}

fn labels_for(problem: &VirtualMisoProblem, cfg: &SystemConfig, opts: &WmmseOptions) -> Result<KeyFeatures> {
    let (_, trace) = wmmse::wmmse_ofdm_miso(problem, cfg, opts)?;
    let mut f = if problem.n_rb() == 1 {
        wmmse::extract_features_miso(&trace, problem, cfg)?
    } else {
        wmmse::extract_features_ofdm(&trace, problem, cfg)?
    };
    f.gamma = None;
    Ok(f)
}

fn finish_sample(spec: &DatasetSpec, truth: ChannelSet, observed: ChannelSet, labels: Option<KeyFeatures>) -> Result<Sample> {
    let problem = transform::mimo_to_miso(&observed, &spec.cfg)?;
    let labels = match labels {
        Some(l) => l,
        None => labels_for(&problem, &spec.cfg, &spec.wmmse)?,
    };
    let label_wsr = loss::features_wsr(&problem, &truth, &spec.cfg, &labels)?;
    Ok(Sample { truth, observed, problem, labels, label_wsr })
}

/// Draws sample `index` of `spec`; depends only on `(spec.seed, index)`.
pub fn build_sample(spec: &DatasetSpec, index: usize) -> Result<Sample> {
    let seed = derive_seed(spec.seed, index as u64);
    let mut truth = channel::gen_channel(&spec.params, &spec.cfg, derive_seed(seed, 0));
    let active = if spec.active_users.is_empty() {
        spec.cfg.n_users
    } else {
        spec.active_users[sub_rng(seed, 1).random_range(0..spec.active_users.len())]
    };
    truth.zero_fill_from(active);
    let observed = match spec.noise {
        Some(noise) => {
            let mut noisy = channel::add_csi_noise(&truth, noise, derive_seed(seed, 2))?;
            noisy.zero_fill_from(active);
            noisy
        }
        None => truth.clone(),
    };
    finish_sample(spec, truth, observed, None)
}

/// Builds `spec.count` samples (in parallel, order-stable).
pub fn build_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    exec::par_map_range(spec.count, |i| build_sample(spec, i)).into_iter().collect()
}

const DATASET_FORMAT: &str = "lcp-dataset/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    #[serde(flatten)]
    channels: channel::ChannelFileHeader,
    spec: DatasetSpec,
}

fn write_f64s<W: Write>(w: &mut W, xs: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = xs.flat_map(|x| x.to_le_bytes()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
}

/// Writes a dataset: a JSON header line, then per sample the true channel
/// block, the observed channel block (noisy datasets only) and the labels
/// `[p, lambda, (re q, im q)...]` as little-endian `f64`.
pub fn write_dataset<W: Write>(w: &mut W, spec: &DatasetSpec, samples: &[Sample]) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        channels: channel::ChannelFileHeader {
            k: spec.cfg.n_users,
            n_rx: spec.cfg.n_rx,
            n_tx: spec.cfg.n_tx,
            n_rb: spec.cfg.granularity,
            count: samples.len(),
            seed: spec.seed,
            params: spec.params.clone(),
        },
        spec: spec.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    w.write_all(b"\n")?;
    for s in samples {
        channel::write_channel_block(w, &s.truth)?;
        if spec.noise.is_some() {
            channel::write_channel_block(w, &s.observed)?;
        }
        write_f64s(w, s.labels.to_flat().into_iter())?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: &mut R) -> Result<(DatasetSpec, Vec<Sample>)> {
    let header: DatasetHeader = channel::read_header_line(r)?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Format(format!("unsupported dataset format {:?}", header.format)));
    }
    let spec = header.spec;
    spec.validate()?;
    let h = &header.channels;
    let (m, b) = (spec.cfg.total_streams(), spec.cfg.granularity);
    let mut samples = Vec::with_capacity(h.count);
    for _ in 0..h.count {
        let truth = channel::read_channel_block(r, h.k, h.n_rb, h.n_rx, h.n_tx)?;
        let observed = if spec.noise.is_some() {
            let mut o = channel::read_channel_block(r, h.k, h.n_rb, h.n_rx, h.n_tx)?;
            o.is_noisy = true;
            o
        } else {
            truth.clone()
        };
        let flat = read_f64s(r, m + m * b + if b > 1 { 2 * m * b } else { 0 })?;
        let labels = KeyFeatures {
            p: flat[..m].to_vec(),
            lambda: flat[m..m + m * b].to_vec(),
            q: (b > 1).then(|| flat[m + m * b..].chunks_exact(2).map(|z| c(z[0], z[1])).collect()),
            gamma: None,
        };
        samples.push(finish_sample(&spec, truth, observed, Some(labels))?);
    }
    Ok((spec, samples))
}

/// Splits samples into consecutive train / validation / test parts.
pub fn split(samples: Vec<Sample>, n_train: usize, n_val: usize) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let mut it = samples.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let val = it.by_ref().take(n_val).collect();
    (train, val, it.collect())
}
