//! WMMSE solvers for the MIMO, MISO and multi-RB MISO weighted sum-rate
//! problems, and extraction of the key features from converged iterates.
//!
//! All solvers use the penalized updates where the power budget enters through
//! `sigma^2 / P_T * Tr(.)` terms. The resulting objective is invariant to a
//! common scaling of the precoders, so every iterate is rescaled to the full
//! budget before the objective is recorded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, c, CMat, CVec, C64, ZERO};
use crate::model::{self, ChannelSet, KeyFeatures, PrecoderSet, SystemConfig, VirtualMisoProblem, WmmseTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Dominant right singular directions of each user's (RB-stacked) channel,
    /// equal power per stream.
    #[default]
    MatchedFilterEqualPower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmmseOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    #[serde(default)]
    pub init_scheme: InitScheme,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self { max_iters: 300, rel_tol: 1e-6, init_scheme: InitScheme::MatchedFilterEqualPower }
    }
}

impl WmmseOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("max_iters and rel_tol must be positive".into()));
        }
        Ok(())
    }

    fn converged(&self, prev: f64, cur: f64) -> bool {
        (cur - prev).abs() / cur.abs().max(1e-12) < self.rel_tol
    }
}

/// Top `d` right singular directions of `rows`, each scaled to `scale`.
/// Directions of a zero matrix come out as zero columns.
fn dominant_directions(rows: &CMat, d: usize, scale: f64) -> Vec<CVec> {
    let svd = linalg::row_svd(rows);
    (0..d)
        .map(|i| {
            if i < svd.right.ncols() {
                svd.right.column(i) * c(scale, 0.0)
            } else {
                CVec::zeros(rows.ncols())
            }
        })
        .collect()
}

fn stack_user(channels: &ChannelSet, k: usize) -> CMat {
    let (nr, nb) = (channels.n_rx, channels.n_rb);
    let mut out = CMat::zeros(nr * nb, channels.n_tx);
    for b in 0..nb {
        out.rows_mut(b * nr, nr).copy_from(channels.get(k, b));
    }
    out
}

/// Initial precoders for the MIMO solvers.
pub fn init_mimo(channels: &ChannelSet, cfg: &SystemConfig) -> Result<PrecoderSet> {
    let scale = (cfg.total_power / cfg.total_streams() as f64).sqrt();
    let mut set = PrecoderSet {
        per_user: (0..cfg.n_users)
            .map(|k| linalg::from_columns(cfg.n_tx, &dominant_directions(&stack_user(channels, k), cfg.streams[k], scale)))
            .collect(),
    };
    if set.total_power() == 0.0 {
        return Err(Error::Degenerate("every channel is zero"));
    }
    set.scale_to(cfg.total_power);
    Ok(set)
}

/// Single-RB MIMO WMMSE.
pub fn wmmse_mimo(channels: &ChannelSet, cfg: &SystemConfig, opts: &WmmseOptions) -> Result<(PrecoderSet, WmmseTrace)> {
    if channels.n_rb != 1 {
        return Err(Error::DimensionMismatch("wmmse_mimo needs a single RB".into()));
    }
    wmmse_mimo_ofdm(channels, cfg, opts)
}

/// MIMO WMMSE over `B` RBs with one precoder per user shared by all RBs.
pub fn wmmse_mimo_ofdm(channels: &ChannelSet, cfg: &SystemConfig, opts: &WmmseOptions) -> Result<(PrecoderSet, WmmseTrace)> {
    cfg.validate()?;
    opts.validate()?;
    channels.check_against(cfg)?;
    if let Some(&d) = cfg.streams.iter().find(|&&d| d > cfg.n_rx) {
        return Err(Error::TooManyStreams(d, cfg.n_rx));
    }
    let init = init_mimo(channels, cfg)?;
    wmmse_mimo_from(channels, cfg, opts, init)
}

/// MIMO WMMSE from a given feasible starting point.
pub fn wmmse_mimo_from(
    channels: &ChannelSet,
    cfg: &SystemConfig,
    opts: &WmmseOptions,
    mut v: PrecoderSet,
) -> Result<(PrecoderSet, WmmseTrace)> {
    let (kn, nb, nt) = (cfg.n_users, channels.n_rb, cfg.n_tx);
    let sigma2 = cfg.noise_var;
    let pt = cfg.total_power;
    let mut trace = WmmseTrace {
        wsr_per_iter: vec![model::sum_rate_ofdm(channels, &v, cfg)?],
        n_iters: 0,
        converged: false,
        final_u: Vec::new(),
        final_w: Vec::new(),
    };
    for _ in 0..opts.max_iters {
        let power = v.total_power();
        let mut us = Vec::with_capacity(kn * nb);
        let mut ws = Vec::with_capacity(kn * nb);
        for k in 0..kn {
            for b in 0..nb {
                let h = channels.get(k, b);
                let mut cov = CMat::identity(cfg.n_rx, cfg.n_rx) * c(sigma2 / pt * power, 0.0);
                for vm in &v.per_user {
                    let e = h * vm;
                    cov += &e * e.adjoint();
                }
                let hv = h * &v.per_user[k];
                let u = linalg::solve_hpd(cov, &hv, "receiver covariance")?;
                let mut e = CMat::identity(cfg.streams[k], cfg.streams[k]) - u.adjoint() * &hv;
                e = (&e + e.adjoint()) * c(0.5, 0.0);
                let mut w = linalg::inverse(e, "MSE matrix")?;
                w = (&w + w.adjoint()) * c(0.5, 0.0);
                us.push(u);
                ws.push(w);
            }
        }
        let mut a = CMat::zeros(nt, nt);
        let mut trace_term = 0.0;
        let mut rhs = CMat::zeros(nt, cfg.total_streams());
        let offsets = cfg.stream_offsets();
        for k in 0..kn {
            let alpha = cfg.weights[k];
            for b in 0..nb {
                let (u, w) = (&us[k * nb + b], &ws[k * nb + b]);
                let h = channels.get(k, b);
                let g = h.adjoint() * u;
                let gw = &g * w;
                a += &gw * g.adjoint() * c(alpha, 0.0);
                trace_term += alpha * (u * w * u.adjoint()).trace().re;
                let mut block = rhs.columns_mut(offsets[k], cfg.streams[k]);
                block += gw * c(alpha, 0.0);
            }
        }
        linalg::add_diagonal(&mut a, sigma2 / pt * trace_term);
        a = (&a + a.adjoint()) * c(0.5, 0.0);
        let sol = linalg::solve_hpd(a, &rhs, "precoder update")?;
        let mut next = PrecoderSet {
            per_user: (0..kn).map(|k| sol.columns(offsets[k], cfg.streams[k]).into_owned()).collect(),
        };
        if !next.per_user.iter().all(linalg::is_finite) {
            return Err(Error::NonFinite("precoder iterate"));
        }
        if next.total_power() == 0.0 {
            return Err(Error::Degenerate("precoder update vanished"));
        }
        next.scale_to(pt);
        v = next;
        let wsr = model::sum_rate_ofdm(channels, &v, cfg)?;
        let prev = *trace.wsr_per_iter.last().unwrap();
        trace.wsr_per_iter.push(wsr);
        trace.n_iters += 1;
        trace.final_u = us;
        trace.final_w = ws;
        if opts.converged(prev, wsr) {
            trace.converged = true;
            break;
        }
    }
    Ok((v, trace))
}

/// Rows of stream `m` across all RBs (`B x n_tx`).
fn stream_rows(problem: &VirtualMisoProblem, m: usize) -> CMat {
    let mut rows = CMat::zeros(problem.n_rb(), problem.n_tx());
    for b in 0..problem.n_rb() {
        rows.row_mut(b).copy_from(&problem.channels[b].row(m));
    }
    rows
}

/// Initial columns for the MISO solvers.
pub fn init_miso(problem: &VirtualMisoProblem, total_power: f64) -> Result<Vec<CVec>> {
    let m = problem.n_streams();
    let scale = (total_power / m as f64).sqrt();
    let mut cols: Vec<CVec> = (0..m).map(|s| dominant_directions(&stream_rows(problem, s), 1, scale).remove(0)).collect();
    let power: f64 = cols.iter().map(|v| v.norm_squared()).sum();
    if power == 0.0 {
        return Err(Error::Degenerate("every virtual channel is zero"));
    }
    let s = (total_power / power).sqrt();
    for v in cols.iter_mut() {
        *v *= c(s, 0.0);
    }
    Ok(cols)
}

/// Receiver and weight scalars of every `(stream, RB)` pair for fixed columns
/// whose total power equals the budget. Indexed `m * B + b`.
fn miso_receivers(problem: &VirtualMisoProblem, cols: &[CVec], sigma2_eff: f64) -> (Vec<C64>, Vec<f64>) {
    let (m_streams, nb) = (problem.n_streams(), problem.n_rb());
    let vmat = linalg::from_columns(problem.n_tx(), cols);
    let mut us = vec![ZERO; m_streams * nb];
    let mut ws = vec![1.0; m_streams * nb];
    for b in 0..nb {
        let e = &problem.channels[b] * &vmat;
        for m in 0..m_streams {
            let total: f64 = sigma2_eff + e.row(m).iter().map(|z| z.norm_sqr()).sum::<f64>();
            let own = e[(m, m)];
            us[m * nb + b] = own / total;
            ws[m * nb + b] = total / (total - own.norm_sqr());
        }
    }
    (us, ws)
}

/// `lambda` and unnormalized combiners `q~` from receiver/weight scalars.
fn lambda_and_combiners(problem: &VirtualMisoProblem, us: &[C64], ws: &[f64], pt: f64) -> Result<(Vec<f64>, Vec<C64>)> {
    let nb = problem.n_rb();
    let beta = |i: usize| problem.weights[i / nb];
    let s: f64 = (0..us.len()).map(|i| beta(i) * us[i].norm_sqr() * ws[i]).sum();
    if !(s > 0.0) {
        return Err(Error::Degenerate("all receive scalars are zero"));
    }
    let lambda = (0..us.len()).map(|i| pt * beta(i) * us[i].norm_sqr() * ws[i] / s).collect();
    let q = (0..us.len()).map(|i| us[i] * (pt * beta(i) * ws[i] / s)).collect();
    Ok((lambda, q))
}

/// `(sigma^2 I + sum lambda h^H h)^{-1} sum_b h_{m,b}^H q_{m,b}` for every stream.
pub fn structured_columns(problem: &VirtualMisoProblem, lambda: &[f64], q: &[C64], sigma2: f64) -> Result<Vec<CVec>> {
    let (m_streams, nb, nt) = (problem.n_streams(), problem.n_rb(), problem.n_tx());
    let stacked = problem.stacked();
    let mut scaled = stacked.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= c(lambda[i], 0.0);
    }
    let mut a = stacked.adjoint() * &scaled;
    linalg::add_diagonal(&mut a, sigma2);
    a = (&a + a.adjoint()) * c(0.5, 0.0);
    let mut rhs = CMat::zeros(nt, m_streams);
    for m in 0..m_streams {
        for b in 0..nb {
            let i = m * nb + b;
            let mut col = rhs.column_mut(m);
            col += stacked.row(i).adjoint() * q[i];
        }
    }
    let sol = linalg::solve_hpd(a, &rhs, "structured precoder")?;
    Ok((0..m_streams).map(|m| sol.column(m).into_owned()).collect())
}

/// Unit factor removing the phase of the first nonzero combiner of stream `m`.
fn combiner_phase(q: &[C64], m: usize, nb: usize) -> C64 {
    q[m * nb..(m + 1) * nb]
        .iter()
        .find(|z| z.norm() > 0.0)
        .map(|z| z.conj() / z.norm())
        .unwrap_or(c(1.0, 0.0))
}

/// Single-RB MISO WMMSE on a virtual problem.
pub fn wmmse_miso(problem: &VirtualMisoProblem, cfg: &SystemConfig, opts: &WmmseOptions) -> Result<(Vec<CVec>, WmmseTrace)> {
    if problem.n_rb() != 1 {
        return Err(Error::DimensionMismatch("wmmse_miso needs a single RB".into()));
    }
    wmmse_ofdm_miso(problem, cfg, opts)
}

/// Multi-RB MISO WMMSE with one column per stream shared by every RB.
///
/// Returned columns carry the phase convention of the key features: each is
/// rotated so that the combiner of its first RB is real and positive.
pub fn wmmse_ofdm_miso(problem: &VirtualMisoProblem, cfg: &SystemConfig, opts: &WmmseOptions) -> Result<(Vec<CVec>, WmmseTrace)> {
    opts.validate()?;
    if problem.n_streams() > problem.n_tx() {
        return Err(Error::DimensionMismatch(format!(
            "{} streams exceed {} antennas",
            problem.n_streams(),
            problem.n_tx()
        )));
    }
    if !(cfg.noise_var > 0.0 && cfg.total_power > 0.0) {
        return Err(Error::InvalidConfig("noise variance and power budget must be positive".into()));
    }
    let (sigma2, pt, nb) = (cfg.noise_var, cfg.total_power, problem.n_rb());
    let mut cols = init_miso(problem, pt)?;
    let mut trace = WmmseTrace {
        wsr_per_iter: vec![model::virtual_sum_rate(problem, &cols, sigma2)],
        n_iters: 0,
        converged: false,
        final_u: Vec::new(),
        final_w: Vec::new(),
    };
    let mut last_q = Vec::new();
    for _ in 0..opts.max_iters {
        let power: f64 = cols.iter().map(|v| v.norm_squared()).sum();
        let (us, ws) = miso_receivers(problem, &cols, sigma2 / pt * power);
        let (lambda, q) = lambda_and_combiners(problem, &us, &ws, pt)?;
        let mut next = structured_columns(problem, &lambda, &q, sigma2)?;
        let p: f64 = next.iter().map(|v| v.norm_squared()).sum();
        if !p.is_finite() {
            return Err(Error::NonFinite("precoder iterate"));
        }
        if p == 0.0 {
            return Err(Error::Degenerate("precoder update vanished"));
        }
        let s = (pt / p).sqrt();
        for v in next.iter_mut() {
            *v *= c(s, 0.0);
        }
        cols = next;
        let wsr = model::virtual_sum_rate(problem, &cols, sigma2);
        let prev = *trace.wsr_per_iter.last().unwrap();
        trace.wsr_per_iter.push(wsr);
        trace.n_iters += 1;
        trace.final_u = us.iter().map(|&u| CMat::from_element(1, 1, u)).collect();
        trace.final_w = ws.iter().map(|&w| CMat::from_element(1, 1, c(w, 0.0))).collect();
        last_q = q;
        if opts.converged(prev, wsr) {
            trace.converged = true;
            break;
        }
    }
    for (m, v) in cols.iter_mut().enumerate() {
        *v *= combiner_phase(&last_q, m, nb);
    }
    Ok((cols, trace))
}

fn scalars_from_trace(trace: &WmmseTrace, expected: usize) -> Result<(Vec<C64>, Vec<f64>)> {
    if trace.final_u.len() != expected || trace.final_w.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "trace holds {} receivers, problem needs {}",
            trace.final_u.len(),
            expected
        )));
    }
    if trace.final_u.iter().chain(&trace.final_w).any(|x| x.shape() != (1, 1)) {
        return Err(Error::DimensionMismatch("MISO trace must hold scalar iterates".into()));
    }
    let us = trace.final_u.iter().map(|u| u[(0, 0)]).collect();
    let mut ws = Vec::with_capacity(expected);
    for w in &trace.final_w {
        let z = w[(0, 0)];
        if z.im.abs() >= 1e-9 {
            return Err(Error::NonFinite("complex MSE weight"));
        }
        ws.push(z.re);
    }
    Ok((us, ws))
}

/// Key features `(p, lambda, gamma)` of a converged single-RB MISO run.
pub fn extract_features_miso(trace: &WmmseTrace, problem: &VirtualMisoProblem, cfg: &SystemConfig) -> Result<KeyFeatures> {
    if problem.n_rb() != 1 {
        return Err(Error::DimensionMismatch("extract_features_miso needs a single RB".into()));
    }
    let mut f = extract_features_ofdm(trace, problem, cfg)?;
    f.q = None;
    Ok(f)
}

/// Key features `(p, lambda, q)` of a converged multi-RB MISO run.
///
/// `q` is rescaled per stream so that its largest modulus is one and its first
/// nonzero entry is real and positive; `gamma` keeps the raw combiners.
pub fn extract_features_ofdm(trace: &WmmseTrace, problem: &VirtualMisoProblem, cfg: &SystemConfig) -> Result<KeyFeatures> {
    let (m_streams, nb) = (problem.n_streams(), problem.n_rb());
    let pt = cfg.total_power;
    let (us, ws) = scalars_from_trace(trace, m_streams * nb)?;
    let (lambda, gamma) = lambda_and_combiners(problem, &us, &ws, pt)?;
    let cols = structured_columns(problem, &lambda, &gamma, cfg.noise_var)?;
    let norms: Vec<f64> = cols.iter().map(|v| v.norm_squared()).collect();
    let total: f64 = norms.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("extracted precoder is zero"));
    }
    let p = norms.iter().map(|n| pt * n / total).collect();
    let mut q = vec![ZERO; m_streams * nb];
    for m in 0..m_streams {
        let rot = combiner_phase(&gamma, m, nb);
        let peak = gamma[m * nb..(m + 1) * nb].iter().fold(0.0f64, |a, z| a.max(z.norm()));
        for b in 0..nb {
            q[m * nb + b] = if peak > 0.0 { gamma[m * nb + b] * rot / peak } else { ZERO };
        }
    }
    Ok(KeyFeatures { p, lambda, q: Some(q), gamma: Some(gamma) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::complex_gaussian_matrix;
    use crate::rng::rng_from;

    fn miso_cfg(m: usize, nt: usize, snr_db: f64) -> SystemConfig {
        SystemConfig::uniform(nt, 1, m, 1, snr_db)
    }

    #[test]
    fn scalar_fixed_point() {
        let mut cfg = SystemConfig::uniform(1, 1, 1, 1, 0.0);
        cfg.noise_var = 1.0;
        let ch = ChannelSet::single(vec![CMat::from_element(1, 1, c(1.0, 0.0))]).unwrap();
        let (v, trace) = wmmse_mimo(&ch, &cfg, &WmmseOptions::default()).unwrap();
        assert!((v.per_user[0][(0, 0)].norm() - 1.0).abs() < 1e-12);
        assert!((trace.final_wsr() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn miso_single_stream_is_mrt() {
        let p = VirtualMisoProblem::from_rows(CMat::from_row_slice(1, 2, &[c(2.0, 0.0), ZERO]));
        let cfg = miso_cfg(1, 2, 0.0);
        let (v, trace) = wmmse_miso(&p, &cfg, &WmmseOptions::default()).unwrap();
        assert!((v[0][0] - c(1.0, 0.0)).norm() < 1e-12 && v[0][1].norm() < 1e-12);
        assert!((trace.final_wsr() - 5f64.log2()).abs() < 1e-12);
        let f = extract_features_miso(&trace, &p, &cfg).unwrap();
        assert!((f.p[0] - 1.0).abs() < 1e-12 && (f.lambda[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn miso_symmetric_split() {
        let p = VirtualMisoProblem::from_rows(CMat::identity(2, 2));
        let cfg = miso_cfg(2, 2, 0.0);
        let (v, trace) = wmmse_miso(&p, &cfg, &WmmseOptions::default()).unwrap();
        for col in &v {
            assert!((col.norm_squared() - 0.5).abs() < 1e-12);
        }
        let f = extract_features_miso(&trace, &p, &cfg).unwrap();
        for i in 0..2 {
            assert!((f.p[i] - 0.5).abs() < 1e-12 && (f.lambda[i] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn miso_agrees_with_mimo_specialization() {
        let mut rng = rng_from(31);
        let (m, nt) = (3, 4);
        let h = complex_gaussian_matrix(&mut rng, m, nt, 1.0);
        let cfg = miso_cfg(m, nt, 5.0);
        let opts = WmmseOptions { max_iters: 100, ..Default::default() };
        let (_, t_miso) = wmmse_miso(&VirtualMisoProblem::from_rows(h.clone()), &cfg, &opts).unwrap();
        let ch = ChannelSet::single((0..m).map(|i| h.rows(i, 1).into_owned()).collect()).unwrap();
        let (_, t_mimo) = wmmse_mimo(&ch, &cfg, &opts).unwrap();
        assert_eq!(t_miso.n_iters, t_mimo.n_iters);
        let (a, b) = (t_miso.final_wsr(), t_mimo.final_wsr());
        assert!((a - b).abs() <= 1e-6 * a, "{a} vs {b}");
    }

    #[test]
    fn ofdm_reduces_to_single_rb() {
        let mut rng = rng_from(2);
        let h = complex_gaussian_matrix(&mut rng, 3, 6, 1.0);
        let cfg = miso_cfg(3, 6, 0.0);
        let opts = WmmseOptions::default();
        let single = VirtualMisoProblem::from_rows(h.clone());
        let (v1, t1) = wmmse_miso(&single, &cfg, &opts).unwrap();
        let (v2, t2) = wmmse_ofdm_miso(&single, &cfg, &opts).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);

        let doubled = VirtualMisoProblem::new(vec![h.clone(), h], vec![1.0; 3], vec![0, 1, 2]).unwrap();
        let (v3, t3) = wmmse_ofdm_miso(&doubled, &cfg, &opts).unwrap();
        for (a, b) in v1.iter().zip(&v3) {
            assert!((a - b).norm() < 1e-9);
        }
        assert!((t3.final_wsr() - 2.0 * t1.final_wsr()).abs() < 1e-9 * t3.final_wsr());
        let f = extract_features_ofdm(&t3, &doubled, &cfg).unwrap();
        let q = f.q.unwrap();
        for m in 0..3 {
            assert!((q[2 * m] - q[2 * m + 1]).norm() < 1e-9);
        }
    }

    #[test]
    fn traces_are_monotone_and_feasible() {
        let mut rng = rng_from(17);
        let cfg = SystemConfig::uniform(8, 2, 3, 2, 10.0);
        for _ in 0..10 {
            let ch = ChannelSet::single((0..3).map(|_| complex_gaussian_matrix(&mut rng, 2, 8, 1.0)).collect()).unwrap();
            let (v, t) = wmmse_mimo(&ch, &cfg, &WmmseOptions::default()).unwrap();
            assert!(t.is_monotone(1e-9), "worst decrease {}", t.worst_decrease());
            assert!(v.is_feasible(1.0));
        }
        let problem = VirtualMisoProblem::new(
            (0..4).map(|_| complex_gaussian_matrix(&mut rng, 3, 6, 1.0)).collect(),
            vec![1.0, 2.0, 0.5],
            vec![0, 1, 2],
        )
        .unwrap();
        let (cols, t) = wmmse_ofdm_miso(&problem, &miso_cfg(3, 6, 0.0), &WmmseOptions::default()).unwrap();
        assert!(t.is_monotone(1e-9));
        let p: f64 = cols.iter().map(|v| v.norm_squared()).sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn miso_is_weight_scale_covariant() {
        let mut rng = rng_from(44);
        let h = complex_gaussian_matrix(&mut rng, 4, 8, 1.0);
        let cfg = miso_cfg(4, 8, 0.0);
        let mut a = VirtualMisoProblem::from_rows(h);
        a.weights = vec![1.0, 2.0, 3.0, 0.5];
        let mut b = a.clone();
        b.weights.iter_mut().for_each(|w| *w *= 7.5);
        let opts = WmmseOptions { max_iters: 50, rel_tol: 1e-300, ..Default::default() };
        let (va, _) = wmmse_miso(&a, &cfg, &opts).unwrap();
        let (vb, _) = wmmse_miso(&b, &cfg, &opts).unwrap();
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn structure_round_trip() {
        let mut rng = rng_from(5);
        let h = complex_gaussian_matrix(&mut rng, 4, 8, 1.0);
        let cfg = miso_cfg(4, 8, 0.0);
        let p = VirtualMisoProblem::from_rows(h);
        let (v, t) = wmmse_miso(&p, &cfg, &WmmseOptions::default()).unwrap();
        let f = extract_features_miso(&t, &p, &cfg).unwrap();
        f.validate(1.0).unwrap();
        let lam = f.lambda.clone();
        let dirs = structured_columns(&p, &lam, &vec![c(1.0, 0.0); 4], cfg.noise_var).unwrap();
        for m in 0..4 {
            let rebuilt = dirs[m].normalize() * c(f.p[m].sqrt(), 0.0);
            assert!((rebuilt - &v[m]).iter().all(|z| z.norm() < 1e-8));
        }
    }

    #[test]
    fn zero_channels_are_rejected() {
        let cfg = SystemConfig::uniform(2, 1, 1, 1, 0.0);
        let ch = ChannelSet::single(vec![CMat::zeros(1, 2)]).unwrap();
        assert!(matches!(wmmse_mimo(&ch, &cfg, &WmmseOptions::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn trace_json_lists_iterations() {
        let p = VirtualMisoProblem::from_rows(CMat::identity(2, 2));
        let (_, t) = wmmse_miso(&p, &miso_cfg(2, 2, 0.0), &WmmseOptions::default()).unwrap();
        let j = t.to_json();
        assert_eq!(j["iterations"].as_array().unwrap().len(), t.wsr_per_iter.len());
    }
}
