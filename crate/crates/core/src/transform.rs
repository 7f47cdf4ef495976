//! MIMO to MISO transformation, precoder reassembly, closed-form recovery from
//! key features, and the eigen-based zero-forcing baseline.

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec, RowSvd};
use crate::model::{self, ChannelSet, KeyFeatures, PrecoderSet, SystemConfig, VirtualMisoProblem, WmmseTrace};
use crate::wmmse::{self, WmmseOptions};

/// Truncated SVD `H = Q diag(s) T^H` of one channel matrix.
pub type SvdTriple = RowSvd;

pub fn svd_triple(h: &CMat) -> SvdTriple {
    linalg::row_svd(h)
}

/// Virtual rows of user `k` on RB `b`: the `d_k` strongest `s_i t_i^H`,
/// formed as `q_i^H H`.
fn user_rows(h: &CMat, d: usize) -> CMat {
    let svd = linalg::row_svd(h);
    svd.left.columns(0, d).adjoint() * h
}

fn check_streams(cfg: &SystemConfig) -> Result<()> {
    match cfg.streams.iter().find(|&&d| d > cfg.n_rx) {
        Some(&d) => Err(Error::TooManyStreams(d, cfg.n_rx)),
        None => Ok(()),
    }
}

/// Merges every user's strongest singular directions into one virtual MISO
/// problem. Works per RB when the channel set has several RBs.
pub fn mimo_to_miso(channels: &ChannelSet, cfg: &SystemConfig) -> Result<VirtualMisoProblem> {
    channels.check_against(cfg)?;
    check_streams(cfg)?;
    let offsets = cfg.stream_offsets();
    let m = cfg.total_streams();
    let mut per_rb = Vec::with_capacity(channels.n_rb);
    for b in 0..channels.n_rb {
        let mut rows = CMat::zeros(m, cfg.n_tx);
        for k in 0..cfg.n_users {
            let r = user_rows(channels.get(k, b), cfg.streams[k]);
            rows.rows_mut(offsets[k], cfg.streams[k]).copy_from(&r);
        }
        per_rb.push(rows);
    }
    let owner = cfg.stream_owner();
    let weights = owner.iter().map(|&k| cfg.weights[k]).collect();
    VirtualMisoProblem::new(per_rb, weights, owner)
}

/// Single-RB virtual problem built from each user's RB-stacked channel
/// `[H_{k,1}; ...; H_{k,B}]`, i.e. the directions that are strongest on
/// average over the RBs.
pub fn stacked_virtual_problem(channels: &ChannelSet, cfg: &SystemConfig) -> Result<VirtualMisoProblem> {
    channels.check_against(cfg)?;
    let (nr, nb) = (cfg.n_rx, channels.n_rb);
    if let Some(&d) = cfg.streams.iter().find(|&&d| d > nr * nb) {
        return Err(Error::TooManyStreams(d, nr * nb));
    }
    let offsets = cfg.stream_offsets();
    let mut rows = CMat::zeros(cfg.total_streams(), cfg.n_tx);
    for k in 0..cfg.n_users {
        let mut stacked = CMat::zeros(nr * nb, cfg.n_tx);
        for b in 0..nb {
            stacked.rows_mut(b * nr, nr).copy_from(channels.get(k, b));
        }
        let r = user_rows(&stacked, cfg.streams[k]);
        rows.rows_mut(offsets[k], cfg.streams[k]).copy_from(&r);
    }
    let owner = cfg.stream_owner();
    let weights = owner.iter().map(|&k| cfg.weights[k]).collect();
    VirtualMisoProblem::new(vec![rows], weights, owner)
}

/// Groups per-stream columns into per-user precoders in stream order.
pub fn assemble_precoders(columns: &[CVec], stream_owner: &[usize], cfg: &SystemConfig) -> Result<PrecoderSet> {
    if columns.len() != cfg.total_streams() || stream_owner != cfg.stream_owner().as_slice() {
        return Err(Error::DimensionMismatch("stream owner map does not match the configuration".into()));
    }
    let offsets = cfg.stream_offsets();
    Ok(PrecoderSet {
        per_user: (0..cfg.n_users)
            .map(|k| linalg::from_columns(cfg.n_tx, &columns[offsets[k]..offsets[k] + cfg.streams[k]]))
            .collect(),
    })
}

/// Threshold under which a recovered stream power counts as zero.
pub const ZERO_POWER: f64 = 1e-12;

/// Unit-normalizes each direction and scales it by `sqrt(p_m)`. Zero
/// directions become zero columns, allowed only for (near) zero power.
fn scale_directions(dirs: Vec<CVec>, p: &[f64]) -> Result<Vec<CVec>> {
    dirs.into_iter()
        .enumerate()
        .map(|(m, d)| {
            let n = d.norm();
            if !n.is_finite() {
                return Err(Error::NonFinite("recovered direction"));
            }
            if n == 0.0 {
                if p[m] >= ZERO_POWER {
                    return Err(Error::ZeroDirection { stream: m, power: p[m] });
                }
                return Ok(d);
            }
            Ok(d * c(p[m].sqrt() / n, 0.0))
        })
        .collect()
}

fn check_features(problem: &VirtualMisoProblem, f: &KeyFeatures, budget: f64) -> Result<()> {
    if f.p.len() != problem.n_streams() || f.lambda.len() != problem.n_streams() * problem.n_rb() {
        return Err(Error::DimensionMismatch(format!(
            "features sized for M={} B={}, problem has M={} B={}",
            f.p.len(),
            f.n_rb(),
            problem.n_streams(),
            problem.n_rb()
        )));
    }
    f.validate(budget)
}

/// Recovery through the `n_tx`-dimensional inverse
/// `(sigma^2 I + sum lambda_m h_m^H h_m)^{-1} h_m^H`.
pub fn recover_precoders_full(problem: &VirtualMisoProblem, f: &KeyFeatures, cfg: &SystemConfig) -> Result<Vec<CVec>> {
    if problem.n_rb() != 1 {
        return Err(Error::DimensionMismatch("single-RB recovery on a multi-RB problem".into()));
    }
    check_features(problem, f, cfg.total_power)?;
    let ones = vec![c(1.0, 0.0); problem.n_streams()];
    let dirs = wmmse::structured_columns(problem, &f.lambda, &ones, cfg.noise_var)?;
    scale_directions(dirs, &f.p)
}

/// Recovery through the `M`-dimensional inverse
/// `H~ (sigma^2 I + H~^H H~)^{-1} Lambda^{-1/2}` with `H~ = H^H Lambda^{1/2}`.
/// Falls back to [`recover_precoders_full`] when some `lambda_m` is zero.
pub fn recover_precoders(problem: &VirtualMisoProblem, f: &KeyFeatures, cfg: &SystemConfig) -> Result<Vec<CVec>> {
    if problem.n_rb() != 1 {
        return Err(Error::DimensionMismatch("single-RB recovery on a multi-RB problem".into()));
    }
    check_features(problem, f, cfg.total_power)?;
    if f.lambda.iter().any(|&l| l <= 0.0) {
        return recover_precoders_full(problem, f, cfg);
    }
    let m = problem.n_streams();
    let sq: Vec<f64> = f.lambda.iter().map(|l| l.sqrt()).collect();
    let h = &problem.channels[0];
    // H~ = H^H diag(sqrt(lambda)), n_tx x M
    let mut ht = h.adjoint();
    for (j, mut col) in ht.column_iter_mut().enumerate() {
        col *= c(sq[j], 0.0);
    }
    let mut inner = ht.adjoint() * &ht;
    linalg::add_diagonal(&mut inner, cfg.noise_var);
    inner = (&inner + inner.adjoint()) * c(0.5, 0.0);
    let mut rhs = CMat::zeros(m, m);
    for j in 0..m {
        rhs[(j, j)] = c(1.0 / sq[j], 0.0);
    }
    let coef = linalg::solve_hpd(inner, &rhs, "compressed recovery")?;
    let dirs = ht * coef;
    scale_directions((0..m).map(|j| dirs.column(j).into_owned()).collect(), &f.p)
}

/// Multi-RB recovery `sqrt(p_m) f[(sigma^2 I + sum lambda h^H h)^{-1} sum_b q_{m,b} h_{m,b}^H]`.
/// With `B = 1` and no `q`, the combiners default to one.
pub fn recover_precoders_ofdm(problem: &VirtualMisoProblem, f: &KeyFeatures, cfg: &SystemConfig) -> Result<Vec<CVec>> {
    check_features(problem, f, cfg.total_power)?;
    let q = match &f.q {
        Some(q) => q.clone(),
        None if problem.n_rb() == 1 => vec![c(1.0, 0.0); problem.n_streams()],
        None => return Err(Error::DimensionMismatch("multi-RB recovery needs combiner weights".into())),
    };
    let dirs = wmmse::structured_columns(problem, &f.lambda, &q, cfg.noise_var)?;
    scale_directions(dirs, &f.p)
}

/// Eigen-based zero forcing: pseudo-inverse directions of the virtual channel
/// with equal power per active stream. Streams with a zero virtual channel
/// get a zero column.
pub fn ezf(problem: &VirtualMisoProblem, cfg: &SystemConfig) -> Result<Vec<CVec>> {
    if problem.n_rb() != 1 {
        return Err(Error::DimensionMismatch("ezf works on a single-RB virtual problem".into()));
    }
    let active = problem.active_streams();
    let idx: Vec<usize> = (0..active.len()).filter(|&m| active[m]).collect();
    if idx.is_empty() {
        return Err(Error::Degenerate("every virtual channel is zero"));
    }
    if idx.len() > problem.n_tx() {
        return Err(Error::RankDeficient("more active streams than antennas"));
    }
    let h = &problem.channels[0];
    let mut ha = CMat::zeros(idx.len(), problem.n_tx());
    for (r, &m) in idx.iter().enumerate() {
        ha.row_mut(r).copy_from(&h.row(m));
    }
    let gram = &ha * ha.adjoint();
    let chol = linalg::cholesky(gram, "virtual channel Gram").map_err(|_| Error::RankDeficient("virtual channel"))?;
    let l = chol.l_dirty();
    let top = (0..l.nrows()).fold(0.0f64, |a, i| a.max(l[(i, i)].re));
    if (0..l.nrows()).any(|i| !(l[(i, i)].re > 1e-7 * top)) {
        return Err(Error::RankDeficient("virtual channel"));
    }
    let coef = chol.solve(&CMat::identity(idx.len(), idx.len()));
    let dirs = ha.adjoint() * coef;
    let scale = (cfg.total_power / idx.len() as f64).sqrt();
    let mut out = vec![CVec::zeros(problem.n_tx()); problem.n_streams()];
    for (r, &m) in idx.iter().enumerate() {
        let d = dirs.column(r);
        out[m] = d * c(scale / d.norm(), 0.0);
    }
    Ok(out)
}

/// EZF precoders for a channel set with any number of RBs.
pub fn ezf_precoders(channels: &ChannelSet, cfg: &SystemConfig) -> Result<PrecoderSet> {
    let problem = stacked_virtual_problem(channels, cfg)?;
    let cols = ezf(&problem, cfg)?;
    assemble_precoders(&cols, &problem.stream_owner, cfg)
}

/// Result of the transform + exact MISO solve pipeline.
#[derive(Debug, Clone)]
pub struct LcpDiagnostics {
    pub problem: VirtualMisoProblem,
    pub columns: Vec<CVec>,
    pub miso_trace: WmmseTrace,
    /// Weighted sum rate of the assembled precoders on the MIMO channels.
    pub wsr: f64,
    pub wmmse_wsr: Option<f64>,
    /// `wsr / wmmse_wsr`, the transformation-loss ratio.
    pub ratio: Option<f64>,
}

/// Transform, solve the MISO problem by WMMSE, and reassemble. No reference
/// MIMO solve is run.
pub fn lcp_ideal_solve(channels: &ChannelSet, cfg: &SystemConfig, opts: &WmmseOptions) -> Result<(PrecoderSet, LcpDiagnostics)> {
    let problem = mimo_to_miso(channels, cfg)?;
    let (columns, miso_trace) = wmmse::wmmse_ofdm_miso(&problem, cfg, opts)?;
    let pre = assemble_precoders(&columns, &problem.stream_owner, cfg)?;
    let wsr = model::sum_rate_ofdm(channels, &pre, cfg)?;
    Ok((pre, LcpDiagnostics { problem, columns, miso_trace, wsr, wmmse_wsr: None, ratio: None }))
}

/// [`lcp_ideal_solve`] plus the ratio against MIMO WMMSE on the same channels.
pub fn lcp_ideal(channels: &ChannelSet, cfg: &SystemConfig, opts: &WmmseOptions) -> Result<(PrecoderSet, LcpDiagnostics)> {
    let (pre, mut diag) = lcp_ideal_solve(channels, cfg, opts)?;
    let (_, trace) = wmmse::wmmse_mimo_ofdm(channels, cfg, opts)?;
    let reference = trace.final_wsr();
    diag.wmmse_wsr = Some(reference);
    diag.ratio = Some(diag.wsr / reference);
    Ok((pre, diag))
}
