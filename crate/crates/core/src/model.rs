//! Domain types, weighted sum-rate evaluation and the Gram-matrix input
//! packing shared by every other module.
//!
//! Rates are in bits/s/Hz (base-2 logarithms). A multi-RB instance shares one
//! precoder per user across all of its resource blocks; `B = 1` is the plain
//! narrowband model.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMat, CVec, C64, ZERO};

/// Relative slack allowed on the total power budget.
pub const POWER_SLACK: f64 = 1e-9;

/// System dimensions, power budget, noise and user priorities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_tx: usize,
    pub n_rx: usize,
    pub n_users: usize,
    /// Data streams per user (`d_k`).
    pub streams: Vec<usize>,
    pub d_max: usize,
    pub total_power: f64,
    pub noise_var: f64,
    /// Per-user priority weights (`alpha_k`).
    pub weights: Vec<f64>,
    /// Number of resource blocks sharing one precoder.
    #[serde(default = "one")]
    pub granularity: usize,
}

fn one() -> usize {
    1
}

impl SystemConfig {
    /// Unit power budget, unit weights and `sigma^2 = 10^(-snr/10)`.
    pub fn uniform(n_tx: usize, n_rx: usize, n_users: usize, d: usize, snr_db: f64) -> Self {
        Self {
            n_tx,
            n_rx,
            n_users,
            streams: vec![d; n_users],
            d_max: d,
            total_power: 1.0,
            noise_var: noise_var_from_snr_db(snr_db),
            weights: vec![1.0; n_users],
            granularity: 1,
        }
    }

    /// Standard case: 16 transmit antennas, 2 receive antennas, one stream per user.
    pub fn case1(n_users: usize) -> Self {
        Self::uniform(16, 2, n_users, 1, 0.0)
    }

    /// Massive case: 64 transmit antennas, 4 receive antennas, two streams per user.
    pub fn case2(n_users: usize) -> Self {
        Self::uniform(64, 4, n_users, 2, 0.0)
    }

    pub fn with_snr_db(mut self, snr_db: f64) -> Self {
        self.noise_var = noise_var_from_snr_db(snr_db);
        self
    }

    pub fn with_granularity(mut self, b: usize) -> Self {
        self.granularity = b;
        self
    }

    pub fn snr_db(&self) -> f64 {
        10.0 * (self.total_power / self.noise_var).log10()
    }

    /// `M`, the total number of streams.
    pub fn total_streams(&self) -> usize {
        self.streams.iter().sum()
    }

    /// Index of the first stream of each user.
    pub fn stream_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.streams
            .iter()
            .map(|d| {
                let o = acc;
                acc += d;
                o
            })
            .collect()
    }

    /// Owning user of every stream, in stream order.
    pub fn stream_owner(&self) -> Vec<usize> {
        self.streams
            .iter()
            .enumerate()
            .flat_map(|(k, &d)| std::iter::repeat_n(k, d))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_tx == 0 || self.n_rx == 0 || self.n_users == 0 || self.granularity == 0 {
            return bad("antenna, user and RB counts must be positive".into());
        }
        if self.streams.len() != self.n_users || self.weights.len() != self.n_users {
            return bad(format!(
                "expected {} stream counts and weights, got {} and {}",
                self.n_users,
                self.streams.len(),
                self.weights.len()
            ));
        }
        let cap = self.d_max.min(self.n_rx);
        if let Some(d) = self.streams.iter().find(|&&d| d == 0 || d > cap) {
            return bad(format!("stream count {d} outside 1..={cap}"));
        }
        if self.total_streams() > self.n_tx {
            return bad(format!(
                "{} streams exceed {} transmit antennas",
                self.total_streams(),
                self.n_tx
            ));
        }
        if self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad("weights must be positive".into());
        }
        if !(self.noise_var > 0.0 && self.noise_var.is_finite()) {
            return bad("noise variance must be positive".into());
        }
        if !(self.total_power > 0.0 && self.total_power.is_finite()) {
            return bad("power budget must be positive".into());
        }
        Ok(())
    }
}

pub fn noise_var_from_snr_db(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Channel matrices `H_{k,b}` (`n_rx x n_tx`), stored user-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub n_users: usize,
    pub n_rb: usize,
    pub n_rx: usize,
    pub n_tx: usize,
    entries: Vec<CMat>,
    pub is_noisy: bool,
}

impl ChannelSet {
    pub fn new(n_users: usize, n_rb: usize, entries: Vec<CMat>) -> Result<Self> {
        if entries.len() != n_users * n_rb || entries.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} channel matrices, got {}",
                n_users * n_rb,
                entries.len()
            )));
        }
        let (n_rx, n_tx) = entries[0].shape();
        if entries.iter().any(|h| h.shape() != (n_rx, n_tx)) {
            return Err(Error::DimensionMismatch("channel matrices differ in shape".into()));
        }
        if !entries.iter().all(linalg::is_finite) {
            return Err(Error::NonFinite("channel matrix"));
        }
        Ok(Self { n_users, n_rb, n_rx, n_tx, entries, is_noisy: false })
    }

    /// One matrix per user (`B = 1`).
    pub fn single(entries: Vec<CMat>) -> Result<Self> {
        let k = entries.len();
        Self::new(k, 1, entries)
    }

    pub fn get(&self, user: usize, rb: usize) -> &CMat {
        &self.entries[user * self.n_rb + rb]
    }

    pub fn get_mut(&mut self, user: usize, rb: usize) -> &mut CMat {
        &mut self.entries[user * self.n_rb + rb]
    }

    pub fn entries(&self) -> &[CMat] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [CMat] {
        &mut self.entries
    }

    /// Right-multiplies every channel matrix by `omega`.
    pub fn rotate(&self, omega: &CMat) -> Self {
        let mut out = self.clone();
        for h in out.entries.iter_mut() {
            *h = &*h * omega;
        }
        out
    }

    /// Replaces the channels of users `active..` with zeros.
    pub fn zero_fill_from(&mut self, active: usize) {
        for k in active..self.n_users {
            for b in 0..self.n_rb {
                self.get_mut(k, b).fill(ZERO);
            }
        }
    }

    pub fn check_against(&self, cfg: &SystemConfig) -> Result<()> {
        if self.n_users != cfg.n_users || self.n_rx != cfg.n_rx || self.n_tx != cfg.n_tx {
            return Err(Error::DimensionMismatch(format!(
                "channels are K={} {}x{} but config is K={} {}x{}",
                self.n_users, self.n_rx, self.n_tx, cfg.n_users, cfg.n_rx, cfg.n_tx
            )));
        }
        if self.n_rb != cfg.granularity {
            return Err(Error::DimensionMismatch(format!(
                "channels have {} RBs but config granularity is {}",
                self.n_rb, cfg.granularity
            )));
        }
        Ok(())
    }
}

/// Per-user precoding matrices `V_k` (`n_tx x d_k`).
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderSet {
    pub per_user: Vec<CMat>,
}

impl PrecoderSet {
    pub fn zeros(cfg: &SystemConfig) -> Self {
        Self { per_user: cfg.streams.iter().map(|&d| CMat::zeros(cfg.n_tx, d)).collect() }
    }

    /// `sum_k Tr(V_k V_k^H)`.
    pub fn total_power(&self) -> f64 {
        self.per_user.iter().map(|v| v.norm_squared()).sum()
    }

    /// Rescales so the total power equals `budget` (no-op for an all-zero set).
    pub fn scale_to(&mut self, budget: f64) {
        let p = self.total_power();
        if p > 0.0 {
            let s = (budget / p).sqrt();
            for v in self.per_user.iter_mut() {
                *v *= C64::new(s, 0.0);
            }
        }
    }

    pub fn is_feasible(&self, budget: f64) -> bool {
        self.total_power() <= budget * (1.0 + POWER_SLACK)
    }

    pub fn check_against(&self, cfg: &SystemConfig) -> Result<()> {
        if self.per_user.len() != cfg.n_users {
            return Err(Error::DimensionMismatch("precoder count differs from user count".into()));
        }
        for (v, &d) in self.per_user.iter().zip(&cfg.streams) {
            if v.shape() != (cfg.n_tx, d) {
                return Err(Error::DimensionMismatch(format!(
                    "precoder is {:?}, expected {}x{}",
                    v.shape(),
                    cfg.n_tx,
                    d
                )));
            }
        }
        if !self.per_user.iter().all(linalg::is_finite) {
            return Err(Error::NonFinite("precoder"));
        }
        Ok(())
    }
}

/// Merged single-antenna virtual channels with inherited weights.
///
/// `channels[b]` is the `M x n_tx` matrix whose row `m` is the virtual channel
/// of stream `m` on RB `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualMisoProblem {
    pub channels: Vec<CMat>,
    /// Per-stream weights (`beta_m`).
    pub weights: Vec<f64>,
    pub stream_owner: Vec<usize>,
}

impl VirtualMisoProblem {
    pub fn new(channels: Vec<CMat>, weights: Vec<f64>, stream_owner: Vec<usize>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::DimensionMismatch("virtual problem needs at least one RB".into()));
        }
        let shape = channels[0].shape();
        if channels.iter().any(|h| h.shape() != shape) {
            return Err(Error::DimensionMismatch("virtual channels differ in shape across RBs".into()));
        }
        if weights.len() != shape.0 || stream_owner.len() != shape.0 {
            return Err(Error::DimensionMismatch(format!(
                "{} streams but {} weights and {} owners",
                shape.0,
                weights.len(),
                stream_owner.len()
            )));
        }
        Ok(Self { channels, weights, stream_owner })
    }

    /// Single-RB problem with unit weights, each stream its own user.
    pub fn from_rows(h: CMat) -> Self {
        let m = h.nrows();
        Self { channels: vec![h], weights: vec![1.0; m], stream_owner: (0..m).collect() }
    }

    pub fn n_streams(&self) -> usize {
        self.channels[0].nrows()
    }

    pub fn n_rb(&self) -> usize {
        self.channels.len()
    }

    pub fn n_tx(&self) -> usize {
        self.channels[0].ncols()
    }

    /// Virtual channel of stream `m` on RB `b`, as a `1 x n_tx` row.
    pub fn row(&self, m: usize, b: usize) -> nalgebra::DMatrixView<'_, C64> {
        self.channels[b].rows(m, 1)
    }

    /// All `M * B` rows stacked stream-major (row `m * B + b`).
    pub fn stacked(&self) -> CMat {
        let (m, b, n) = (self.n_streams(), self.n_rb(), self.n_tx());
        let mut out = CMat::zeros(m * b, n);
        for s in 0..m {
            for r in 0..b {
                out.row_mut(s * b + r).copy_from(&self.channels[r].row(s));
            }
        }
        out
    }

    /// Right-multiplies every virtual channel by `omega`.
    pub fn rotate(&self, omega: &CMat) -> Self {
        let mut out = self.clone();
        for h in out.channels.iter_mut() {
            *h = &*h * omega;
        }
        out
    }

    /// Streams whose virtual channel is zero on every RB (zero-filled users).
    pub fn active_streams(&self) -> Vec<bool> {
        (0..self.n_streams())
            .map(|m| self.channels.iter().any(|h| h.row(m).iter().any(|z| z.norm() > 0.0)))
            .collect()
    }
}

/// Key features from which the recovery module rebuilds a precoder.
///
/// `lambda` and `q` are stored stream-major: entry `m * B + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFeatures {
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<C64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<C64>>,
}

impl KeyFeatures {
    pub fn n_streams(&self) -> usize {
        self.p.len()
    }

    pub fn n_rb(&self) -> usize {
        self.lambda.len() / self.p.len().max(1)
    }

    /// Checks non-negativity and that both power vectors sum to `budget`.
    pub fn validate(&self, budget: f64) -> Result<()> {
        let m = self.p.len();
        if m == 0 || self.lambda.len() % m != 0 {
            return Err(Error::DimensionMismatch("lambda length must be a multiple of M".into()));
        }
        if let Some(q) = &self.q {
            if q.len() != self.lambda.len() {
                return Err(Error::DimensionMismatch("q must have M*B entries".into()));
            }
        }
        if self.p.iter().chain(&self.lambda).any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidConfig("key features must be finite and nonnegative".into()));
        }
        let tol = 1e-9 * budget;
        let sp: f64 = self.p.iter().sum();
        let sl: f64 = self.lambda.iter().sum();
        if (sp - budget).abs() > tol || (sl - budget).abs() > tol {
            return Err(Error::InvalidConfig(format!(
                "feature sums p={sp}, lambda={sl} differ from budget {budget}"
            )));
        }
        Ok(())
    }

    /// Flat real vector `[p, lambda, re(q), im(q)...]` used by the supervised loss.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.p.len() + self.lambda.len() * 3);
        out.extend_from_slice(&self.p);
        out.extend_from_slice(&self.lambda);
        if let Some(q) = &self.q {
            for z in q {
                out.push(z.re);
                out.push(z.im);
            }
        }
        out
    }
}

/// Real packing of a Hermitian matrix: real upper triangle (with the diagonal)
/// and imaginary parts of the strict upper triangle mirrored below.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInput {
    pub matrix: DMatrix<f64>,
}

impl PackedInput {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Convergence record of an iterative WMMSE run.
///
/// `wsr_per_iter[0]` is the objective at the initial point and entry `t` the
/// objective after update `t`. `final_u` and `final_w` hold the receiver and
/// weight iterates used for the last precoder update, indexed `k * B + b`
/// (scalars are `1 x 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct WmmseTrace {
    pub wsr_per_iter: Vec<f64>,
    pub n_iters: usize,
    pub converged: bool,
    pub final_u: Vec<CMat>,
    pub final_w: Vec<CMat>,
}

impl WmmseTrace {
    pub fn final_wsr(&self) -> f64 {
        *self.wsr_per_iter.last().unwrap_or(&0.0)
    }

    /// Largest decrease between successive objective values (0 if monotone).
    pub fn worst_decrease(&self) -> f64 {
        self.wsr_per_iter.windows(2).fold(0.0, |m, w| m.max(w[0] - w[1]))
    }

    pub fn is_monotone(&self, slack: f64) -> bool {
        self.worst_decrease() <= slack
    }

    /// `{"n_iters":..,"converged":..,"iterations":[{"iter":0,"wsr":..},..]}`.
    pub fn to_json(&self) -> serde_json::Value {
        let its: Vec<_> = self
            .wsr_per_iter
            .iter()
            .enumerate()
            .map(|(i, w)| serde_json::json!({"iter": i, "wsr": w}))
            .collect();
        serde_json::json!({"n_iters": self.n_iters, "converged": self.converged, "iterations": its})
    }
}

/// Weighted sum rate of a single-RB MIMO downlink.
pub fn sum_rate_mimo(channels: &ChannelSet, precoders: &PrecoderSet, cfg: &SystemConfig) -> Result<f64> {
    if channels.n_rb != 1 {
        return Err(Error::DimensionMismatch(format!(
            "sum_rate_mimo needs one RB, got {}",
            channels.n_rb
        )));
    }
    sum_rate_ofdm(channels, precoders, cfg)
}

/// Weighted sum rate over every RB with one shared precoder per user.
pub fn sum_rate_ofdm(channels: &ChannelSet, precoders: &PrecoderSet, cfg: &SystemConfig) -> Result<f64> {
    if channels.n_users != cfg.n_users || channels.n_tx != cfg.n_tx {
        return Err(Error::DimensionMismatch("channels do not match the configuration".into()));
    }
    precoders.check_against(cfg)?;
    Ok(per_user_rates(channels, precoders, cfg.noise_var)?
        .iter()
        .zip(&cfg.weights)
        .map(|(r, a)| a * r)
        .sum())
}

/// Unweighted rate of every user summed over its RBs.
pub fn per_user_rates(channels: &ChannelSet, precoders: &PrecoderSet, noise_var: f64) -> Result<Vec<f64>> {
    let k_users = channels.n_users;
    let mut rates = vec![0.0; k_users];
    for (k, rate) in rates.iter_mut().enumerate() {
        for b in 0..channels.n_rb {
            let h = channels.get(k, b);
            let mut total = CMat::identity(channels.n_rx, channels.n_rx) * C64::new(noise_var, 0.0);
            let mut own = CMat::zeros(channels.n_rx, channels.n_rx);
            for (j, v) in precoders.per_user.iter().enumerate() {
                if v.ncols() == 0 {
                    continue;
                }
                let e = h * v;
                let cov = &e * e.adjoint();
                total += &cov;
                if j == k {
                    own = cov;
                }
            }
            let interference = &total - &own;
            let with = linalg::log2_det_hpd(total, "rate covariance")?;
            let without = linalg::log2_det_hpd(interference, "interference-plus-noise covariance")?;
            *rate += with - without;
        }
    }
    Ok(rates)
}

/// Weighted sum of per-stream single-antenna rates of a virtual problem,
/// treating every other stream as interference.
pub fn virtual_sum_rate(problem: &VirtualMisoProblem, columns: &[CVec], noise_var: f64) -> f64 {
    let m = problem.n_streams();
    let mut total = 0.0;
    for b in 0..problem.n_rb() {
        let h = &problem.channels[b];
        let mut gains = vec![0.0; m * m];
        for (j, v) in columns.iter().enumerate() {
            let hv = h * v;
            for i in 0..m {
                gains[i * m + j] = hv[i].norm_sqr();
            }
        }
        for i in 0..m {
            let signal = gains[i * m + i];
            let interf: f64 = (0..m).filter(|&j| j != i).map(|j| gains[i * m + j]).sum();
            total += problem.weights[i] * (1.0 + signal / (interf + noise_var)).log2();
        }
    }
    total
}

/// Gram matrix of the weighted virtual channels, entry `(i, j)` equal to
/// `sqrt(beta_i beta_j) h_i h_j^H`, indexed stream-major over `(m, b)`.
pub fn weighted_gram(problem: &VirtualMisoProblem) -> CMat {
    weight_gram(problem, &virtual_gram(problem))
}

/// Unweighted Gram `H H^H` of the `M B` stacked virtual rows.
pub fn virtual_gram(problem: &VirtualMisoProblem) -> CMat {
    let stacked = problem.stacked();
    &stacked * stacked.adjoint()
}

/// Applies the stream weights to an unweighted virtual Gram.
pub fn weight_gram(problem: &VirtualMisoProblem, gram: &CMat) -> CMat {
    let b = problem.n_rb();
    let scale: Vec<f64> = (0..gram.nrows()).map(|r| problem.weights[r / b].sqrt()).collect();
    let mut g = gram.clone();
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            g[(i, j)] *= scale[i] * scale[j];
        }
        g[(i, i)].im = 0.0;
    }
    g
}

/// Weighted Gram of the `B` RB channels of stream `m` (a `B x B` block).
pub fn stream_gram(problem: &VirtualMisoProblem, m: usize) -> CMat {
    let b = problem.n_rb();
    let mut rows = CMat::zeros(b, problem.n_tx());
    for r in 0..b {
        rows.row_mut(r).copy_from(&problem.channels[r].row(m));
    }
    let mut g = &rows * rows.adjoint() * C64::new(problem.weights[m], 0.0);
    for i in 0..b {
        g[(i, i)].im = 0.0;
    }
    g
}

const HERMITIAN_TOL: f64 = 1e-10;

/// Packs a Hermitian matrix into a real square matrix of the same size.
pub fn pack_hermitian(g: &CMat) -> Result<PackedInput> {
    let n = g.nrows();
    if g.ncols() != n {
        return Err(Error::DimensionMismatch("Gram matrix must be square".into()));
    }
    let defect = linalg::hermitian_defect(g);
    let scale = linalg::max_abs(g).max(1.0);
    if defect > HERMITIAN_TOL * scale {
        return Err(Error::NotHermitian(defect));
    }
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        p[(i, i)] = g[(i, i)].re;
        for j in i + 1..n {
            p[(i, j)] = g[(i, j)].re;
            p[(j, i)] = g[(i, j)].im;
        }
    }
    Ok(PackedInput { matrix: p })
}

/// Inverse of [`pack_hermitian`].
pub fn unpack_hermitian(packed: &PackedInput) -> CMat {
    let p = &packed.matrix;
    let n = p.nrows();
    let mut g = CMat::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = C64::new(p[(i, i)], 0.0);
        for j in i + 1..n {
            g[(i, j)] = C64::new(p[(i, j)], p[(j, i)]);
            g[(j, i)] = C64::new(p[(i, j)], -p[(j, i)]);
        }
    }
    g
}
