//! Wideband clustered multipath channel generation, imperfect-CSI corruption
//! and the binary channel file format.

use std::f64::consts::PI;
use std::io::{BufRead, Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{c, CMat, CVec, C64};
use crate::model::{ChannelSet, SystemConfig};
use crate::rng::{derive_seed, rng_from};

/// Multipath channel parameters. Delays are held in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ParamsRepr", into = "ParamsRepr")]
pub struct ChannelParams {
    pub n_paths: usize,
    pub delay_min: f64,
    pub delay_max: f64,
    pub sample_rate: f64,
    pub n_rb: usize,
    pub seed: u64,
    /// Scale path gains by `1/sqrt(L)` so every channel entry has unit mean
    /// power instead of `L`.
    pub unit_gain: bool,
}

/// On-disk form with delays in nanoseconds. Missing fields take the defaults.
#[derive(Serialize, Deserialize)]
#[serde(default)]
struct ParamsRepr {
    n_paths: usize,
    delay_min_ns: f64,
    delay_max_ns: f64,
    sample_rate_hz: f64,
    n_rb: usize,
    seed: u64,
    unit_gain: bool,
}

impl Default for ParamsRepr {
    fn default() -> Self {
        ChannelParams::default().into()
    }
}

impl From<ParamsRepr> for ChannelParams {
    fn from(r: ParamsRepr) -> Self {
        Self {
            n_paths: r.n_paths,
            delay_min: r.delay_min_ns / 1e9,
            delay_max: r.delay_max_ns / 1e9,
            sample_rate: r.sample_rate_hz,
            n_rb: r.n_rb,
            seed: r.seed,
            unit_gain: r.unit_gain,
        }
    }
}

impl From<ChannelParams> for ParamsRepr {
    fn from(p: ChannelParams) -> Self {
        Self {
            n_paths: p.n_paths,
            delay_min_ns: p.delay_min * 1e9,
            delay_max_ns: p.delay_max * 1e9,
            sample_rate_hz: p.sample_rate,
            n_rb: p.n_rb,
            seed: p.seed,
            unit_gain: p.unit_gain,
        }
    }
}

impl Default for ChannelParams {
    /// 10 paths, delays uniform on 0..100 ns, 0.32 GHz sampling, one RB.
    fn default() -> Self {
        Self { n_paths: 10, delay_min: 0.0, delay_max: 100e-9, sample_rate: 0.32e9, n_rb: 1, seed: 0, unit_gain: false }
    }
}

impl ChannelParams {
    /// Default parameters with unit-power channel entries, the scale used by
    /// the benchmark scenarios.
    pub fn unit() -> Self {
        Self { unit_gain: true, ..Self::default() }
    }

    pub fn with_rb(mut self, n_rb: usize) -> Self {
        self.n_rb = n_rb;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_rb == 0 {
            return Err(Error::InvalidConfig("n_paths and n_rb must be positive".into()));
        }
        if !(self.delay_min >= 0.0 && self.delay_max >= self.delay_min && self.delay_max.is_finite()) {
            return Err(Error::InvalidConfig("delays must satisfy 0 <= min <= max".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(())
    }
}

/// Additive circular Gaussian channel-estimation error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsiNoiseModel {
    pub error_var: f64,
}

/// ULA response with half-wavelength spacing.
pub fn steering_vector(angle: f64, n_elems: usize) -> CVec {
    let s = PI * angle.sin();
    CVec::from_iterator(n_elems, (0..n_elems).map(|i| C64::from_polar(1.0, s * i as f64)))
}

/// Sample of a circular complex Gaussian with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    c(s * re, s * im)
}

/// Matrix with i.i.d. `CN(0, var)` entries, filled column-major.
pub fn complex_gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, var: f64) -> CMat {
    CMat::from_fn(rows, cols, |_, _| complex_gaussian(rng, var))
}

/// One propagation path of a user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Path {
    pub gain: C64,
    pub delay: f64,
    pub aoa: f64,
    pub aod: f64,
}

/// Paths of every user, shared across RBs.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub per_user: Vec<Vec<Path>>,
}

/// Draws the path parameters of user `k`.
pub fn draw_paths(params: &ChannelParams, seed: u64, k: usize) -> Vec<Path> {
    let mut rng = rng_from(derive_seed(seed, k as u64));
    let var = if params.unit_gain { 1.0 / params.n_paths as f64 } else { 1.0 };
    (0..params.n_paths)
        .map(|_| {
            let gain = complex_gaussian(&mut rng, var);
            let delay = if params.delay_max > params.delay_min {
                rng.random_range(params.delay_min..params.delay_max)
            } else {
                params.delay_min
            };
            let aoa = rng.random_range(0.0..2.0 * PI);
            let aod = rng.random_range(0.0..2.0 * PI);
            Path { gain, delay, aoa, aod }
        })
        .collect()
}

/// Builds `H_{k,b} = sum_l g_l exp(-j 2 pi tau_l f_s b / B) a_r(aoa_l) a_t(aod_l)^T`, `b = 1..B`.
pub fn channel_from_paths(paths: &PathSet, sample_rate: f64, n_rb: usize, n_rx: usize, n_tx: usize) -> ChannelSet {
    let k_users = paths.per_user.len();
    let mut entries = Vec::with_capacity(k_users * n_rb);
    for user in &paths.per_user {
        let responses: Vec<CMat> = user
            .iter()
            .map(|p| steering_vector(p.aoa, n_rx) * steering_vector(p.aod, n_tx).transpose())
            .collect();
        for b in 1..=n_rb {
            let mut h = CMat::zeros(n_rx, n_tx);
            for (p, a) in user.iter().zip(&responses) {
                let phase = C64::from_polar(1.0, -2.0 * PI * p.delay * sample_rate * b as f64 / n_rb as f64);
                h += a * (p.gain * phase);
            }
            entries.push(h);
        }
    }
    ChannelSet::new(k_users, n_rb, entries).expect("path-built channels are finite and consistent")
}

/// One channel realization for every user of `cfg`.
pub fn gen_channel(params: &ChannelParams, cfg: &SystemConfig, seed: u64) -> ChannelSet {
    let per_user = exec::par_map_range(cfg.n_users, |k| draw_paths(params, seed, k));
    channel_from_paths(&PathSet { per_user }, params.sample_rate, params.n_rb, cfg.n_rx, cfg.n_tx)
}

/// Copy of `channels` with every entry perturbed by `CN(0, error_var)`.
pub fn add_csi_noise(channels: &ChannelSet, noise: CsiNoiseModel, seed: u64) -> Result<ChannelSet> {
    if !(noise.error_var >= 0.0 && noise.error_var.is_finite()) {
        return Err(Error::InvalidConfig(format!("error variance {} is negative", noise.error_var)));
    }
    if channels.is_noisy {
        return Err(Error::AlreadyNoisy);
    }
    let mut out = channels.clone();
    out.is_noisy = true;
    if noise.error_var > 0.0 {
        let mut rng = rng_from(seed);
        for h in out.entries_mut() {
            for z in h.iter_mut() {
                *z += complex_gaussian(&mut rng, noise.error_var);
            }
        }
    }
    Ok(out)
}

/// Header line of a channel file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFileHeader {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N_r")]
    pub n_rx: usize,
    #[serde(rename = "N_t")]
    pub n_tx: usize,
    #[serde(rename = "B")]
    pub n_rb: usize,
    pub count: usize,
    pub seed: u64,
    pub params: ChannelParams,
}

/// Appends the entries of `set` as little-endian interleaved `(re, im)` pairs,
/// ordered user, RB, row, column.
pub fn write_channel_block<W: Write>(w: &mut W, set: &ChannelSet) -> Result<()> {
    let mut buf = Vec::with_capacity(set.entries().len() * set.n_rx * set.n_tx * 16);
    for h in set.entries() {
        for r in 0..set.n_rx {
            for col in 0..set.n_tx {
                let z = h[(r, col)];
                buf.extend_from_slice(&z.re.to_le_bytes());
                buf.extend_from_slice(&z.im.to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_channel_block<R: Read>(r: &mut R, k: usize, n_rb: usize, n_rx: usize, n_tx: usize) -> Result<ChannelSet> {
    let mut buf = vec![0u8; k * n_rb * n_rx * n_tx * 16];
    r.read_exact(&mut buf)?;
    let mut vals = buf.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut entries = Vec::with_capacity(k * n_rb);
    for _ in 0..k * n_rb {
        let mut h = CMat::zeros(n_rx, n_tx);
        for row in 0..n_rx {
            for col in 0..n_tx {
                let re = vals.next().unwrap();
                let im = vals.next().unwrap();
                h[(row, col)] = c(re, im);
            }
        }
        entries.push(h);
    }
    ChannelSet::new(k, n_rb, entries)
}

pub fn write_channel_file<W: Write>(w: &mut W, header: &ChannelFileHeader, sets: &[ChannelSet]) -> Result<()> {
    if header.count != sets.len() {
        return Err(Error::Format(format!("header count {} but {} sets", header.count, sets.len())));
    }
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    for s in sets {
        if (s.n_users, s.n_rb, s.n_rx, s.n_tx) != (header.k, header.n_rb, header.n_rx, header.n_tx) {
            return Err(Error::DimensionMismatch("channel set differs from header".into()));
        }
        write_channel_block(w, s)?;
    }
    Ok(())
}

pub fn read_header_line<R: BufRead, T: serde::de::DeserializeOwned>(r: &mut R) -> Result<T> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim().is_empty() {
        return Err(Error::Format("missing header line".into()));
    }
    Ok(serde_json::from_str(line.trim_end())?)
}

pub fn read_channel_file<R: BufRead>(r: &mut R) -> Result<(ChannelFileHeader, Vec<ChannelSet>)> {
    let header: ChannelFileHeader = read_header_line(r)?;
    let sets = (0..header.count)
        .map(|_| read_channel_block(r, header.k, header.n_rb, header.n_rx, header.n_tx))
        .collect::<Result<Vec<_>>>()?;
    Ok((header, sets))
}
