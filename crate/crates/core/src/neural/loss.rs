//! Training losses: feature MSE and the negative weighted sum rate of the
//! recovered precoders, with a hand-derived adjoint through the recovery.

use ndarray::{Array2, IxDyn};

use super::network::{TapeForward, LAMBDA_FLOOR};
use super::tape::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{self, c, CMat, CVec, C64};
use crate::model::{self, ChannelSet, KeyFeatures, SystemConfig, VirtualMisoProblem};

/// Mean squared error between flattened feature vectors.
pub fn loss_supervised(pred: &KeyFeatures, label: &KeyFeatures) -> f64 {
    let (a, b) = (pred.to_flat(), label.to_flat());
    assert_eq!(a.len(), b.len(), "feature vectors differ in length");
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Label tensors `[N, M]`, `[N, M B]` and optionally `[N, 2 M B]` of a batch.
pub fn label_tensors(labels: &[&KeyFeatures]) -> (Tensor, Tensor, Option<Tensor>) {
    let n = labels.len();
    let (m, mb) = (labels[0].p.len(), labels[0].lambda.len());
    let p = Array2::from_shape_fn((n, m), |(s, i)| labels[s].p[i]).into_dyn();
    let l = Array2::from_shape_fn((n, mb), |(s, i)| labels[s].lambda[i]).into_dyn();
    let q = labels[0].q.as_ref().map(|_| {
        Array2::from_shape_fn((n, 2 * mb), |(s, i)| {
            let z = labels[s].q.as_ref().expect("mixed labels")[i / 2];
            if i % 2 == 0 {
                z.re
            } else {
                z.im
            }
        })
        .into_dyn()
    });
    (p, l, q)
}

/// Supervised loss on the tape: MSE over the concatenation `[p, lambda, q]`.
pub fn supervised_on_tape(tape: &mut Tape, fwd: &TapeForward, labels: &[&KeyFeatures]) -> Var {
    let (p, l, q) = label_tensors(labels);
    let mut parts = vec![(tape.mse(fwd.p, &p), p.len()), (tape.mse(fwd.lambda, &l), l.len())];
    if let (Some(qv), Some(qt)) = (fwd.q, q.as_ref()) {
        parts.push((tape.mse(qv, qt), qt.len()));
    }
    let total: usize = parts.iter().map(|x| x.1).sum();
    let vars: Vec<Var> = parts.iter().map(|x| x.0).collect();
    let coefs: Vec<f64> = parts.iter().map(|x| x.1 as f64 / total as f64).collect();
    tape.weighted_sum(&vars, &coefs)
}

/// Gradients of the weighted sum rate with respect to the features.
#[derive(Debug, Clone)]
pub struct FeatureGrad {
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `(d/d re q, d/d im q)` per `(m, b)`.
    pub q: Vec<(f64, f64)>,
}

/// Outcome of the structured recovery followed by rate evaluation.
#[derive(Debug, Clone)]
pub struct RateEval {
    pub wsr: f64,
    pub columns: Vec<CVec>,
    pub grad: Option<FeatureGrad>,
}

/// Recovers per-stream precoders from `(p, lambda, q)` on the virtual
/// `problem` via `v_m ~ H^H (sigma^2 I + Lambda H H^H)^{-1} Y e_m` scaled to
/// power `p_m`, where `H` stacks the `M B` virtual rows and `Y` holds the
/// combiners. `lambda` is floored at `LAMBDA_FLOOR * P_T`.
///
/// With `truth` given, also evaluates the weighted sum rate on those MIMO
/// channels (each user's streams form its precoder, shared by every RB) and,
/// when `want_grad`, its gradient with respect to the features.
pub fn recover_and_rate(
    problem: &VirtualMisoProblem,
    truth: Option<&ChannelSet>,
    cfg: &SystemConfig,
    p: &[f64],
    lambda: &[f64],
    q: Option<&[C64]>,
    want_grad: bool,
) -> Result<RateEval> {
    let gram = model::virtual_gram(problem);
    let rec = recover(problem, &gram, cfg, p, lambda, q)?;
    rate_of_recovery(problem, truth, cfg, p, lambda, &gram, rec, want_grad)
}

/// Recovered columns only, reusing the unweighted virtual Gram `H H^H`.
pub fn recover_columns(
    problem: &VirtualMisoProblem,
    gram: &CMat,
    cfg: &SystemConfig,
    p: &[f64],
    lambda: &[f64],
    q: Option<&[C64]>,
) -> Result<Vec<CVec>> {
    Ok(recover(problem, gram, cfg, p, lambda, q)?.columns)
}

struct Recovery {
    hs: CMat,
    x: CMat,
    y: CMat,
    z: CMat,
    norms: Vec<f64>,
    columns: Vec<CVec>,
}

fn recover(
    problem: &VirtualMisoProblem,
    gram: &CMat,
    cfg: &SystemConfig,
    p: &[f64],
    lambda: &[f64],
    q: Option<&[C64]>,
) -> Result<Recovery> {
    let (m, nb, nt) = (problem.n_streams(), problem.n_rb(), problem.n_tx());
    let mb = m * nb;
    if p.len() != m || lambda.len() != mb || q.is_some_and(|q| q.len() != mb) || gram.shape() != (mb, mb) {
        return Err(Error::DimensionMismatch("features do not match the virtual problem".into()));
    }
    let sigma2 = cfg.noise_var;
    let floor = LAMBDA_FLOOR * cfg.total_power;
    let hs = problem.stacked();
    let lam: Vec<f64> = lambda.iter().map(|&l| l.max(floor)).collect();
    let mut w = CMat::zeros(mb, mb);
    for i in 0..mb {
        for j in 0..mb {
            w[(i, j)] = gram[(i, j)] * lam[i];
        }
        w[(i, i)] += c(sigma2, 0.0);
    }
    let x = w.try_inverse().ok_or(Error::Singular("recovery system"))?;
    if !linalg::is_finite(&x) {
        return Err(Error::NonFinite("recovery inverse"));
    }
    let mut y = CMat::zeros(mb, m);
    for s in 0..m {
        for b in 0..nb {
            y[(s * nb + b, s)] = q.map_or(c(1.0, 0.0), |q| q[s * nb + b]);
        }
    }
    let z = if nb == 1 && q.is_none() { hs.adjoint() * &x } else { hs.adjoint() * (&x * &y) };
    let norms: Vec<f64> = (0..m).map(|s| z.column(s).norm()).collect();
    let columns: Vec<CVec> = (0..m)
        .map(|s| {
            if norms[s] > 0.0 && p[s] > 0.0 {
                z.column(s) * c(p[s].sqrt() / norms[s], 0.0)
            } else {
                CVec::zeros(nt)
            }
        })
        .collect();
    if columns.iter().any(|v| !v.iter().all(|z| z.re.is_finite() && z.im.is_finite())) {
        return Err(Error::NonFinite("recovered precoder"));
    }
    Ok(Recovery { hs, x, y, z, norms, columns })
}

#[allow(clippy::too_many_arguments)]
fn rate_of_recovery(
    problem: &VirtualMisoProblem,
    truth: Option<&ChannelSet>,
    cfg: &SystemConfig,
    p: &[f64],
    lambda: &[f64],
    gram: &CMat,
    rec: Recovery,
    want_grad: bool,
) -> Result<RateEval> {
    let (m, nb, nt) = (problem.n_streams(), problem.n_rb(), problem.n_tx());
    let mb = m * nb;
    let floor = LAMBDA_FLOOR * cfg.total_power;
    let Recovery { hs, x, y, z, norms, columns } = rec;
    let Some(truth) = truth else {
        return Ok(RateEval { wsr: f64::NAN, columns, grad: None });
    };
    let vall = linalg::from_columns(nt, &columns);
    let (wsr, g_v) = rate_and_grad(truth, cfg, &vall, &problem.stream_owner, want_grad)?;
    if !want_grad {
        return Ok(RateEval { wsr, columns, grad: None });
    }
    let g_v = g_v.expect("gradient requested");
    let mut gp = vec![0.0; m];
    let mut gz = CMat::zeros(nt, m);
    for s in 0..m {
        if !(norms[s] > 0.0 && p[s] > 0.0) {
            continue;
        }
        let u = z.column(s) / c(norms[s], 0.0);
        let g = g_v.column(s);
        let ug = u.dotc(&g);
        gp[s] = ug.re / (2.0 * p[s].sqrt());
        let k = p[s].sqrt() / norms[s];
        gz.set_column(s, &((g - u * c(ug.re, 0.0)) * c(k, 0.0)));
    }
    let ga = &hs * gz;
    let gx = &ga * y.adjoint();
    let gy = x.adjoint() * &ga;
    let gw = -(x.adjoint() * gx * x.adjoint());
    let glam: Vec<f64> = (0..mb)
        .map(|i| {
            if lambda[i] < floor {
                return 0.0;
            }
            (0..mb).map(|j| (gw[(i, j)].conj() * gram[(i, j)]).re).sum()
        })
        .collect();
    let gq = (0..mb).map(|i| (gy[(i, i / nb)].re, gy[(i, i / nb)].im)).collect();
    Ok(RateEval { wsr, columns, grad: Some(FeatureGrad { p: gp, lambda: glam, q: gq }) })
}

/// Weighted sum rate of stream columns `v` (grouped by `owner`) on the MIMO
/// channels, and optionally its gradient `df = Re tr(G^H dV)`.
fn rate_and_grad(
    truth: &ChannelSet,
    cfg: &SystemConfig,
    v: &CMat,
    owner: &[usize],
    want_grad: bool,
) -> Result<(f64, Option<CMat>)> {
    let nr = truth.n_rx;
    let mut wsr = 0.0;
    let mut grad = want_grad.then(|| CMat::zeros(v.nrows(), v.ncols()));
    let ln2 = std::f64::consts::LN_2;
    for k in 0..truth.n_users {
        let alpha = cfg.weights[k];
        for b in 0..truth.n_rb {
            let h = truth.get(k, b);
            let e = h * v;
            let mut t = &e * e.adjoint();
            let mut own = CMat::zeros(nr, nr);
            for (j, &o) in owner.iter().enumerate() {
                if o == k {
                    let col = e.column(j);
                    own += &col * col.adjoint();
                }
            }
            linalg::add_diagonal(&mut t, cfg.noise_var);
            let s = &t - &own;
            let t_chol = linalg::cholesky(t, "rate covariance")?;
            let s_chol = linalg::cholesky(s, "interference covariance")?;
            let logdet = |ch: &nalgebra::linalg::Cholesky<C64, nalgebra::Dyn>| {
                let l = ch.l_dirty();
                (0..l.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum::<f64>() / ln2
            };
            wsr += alpha * (logdet(&t_chol) - logdet(&s_chol));
            if let Some(g) = grad.as_mut() {
                let ht = h.adjoint() * t_chol.solve(&e);
                let hs = h.adjoint() * s_chol.solve(&e);
                let scale = c(2.0 * alpha / ln2, 0.0);
                for (j, &o) in owner.iter().enumerate() {
                    let mut col = ht.column(j).into_owned();
                    if o != k {
                        col -= hs.column(j);
                    }
                    let mut gcol = g.column_mut(j);
                    gcol += col * scale;
                }
            }
        }
    }
    Ok((wsr, grad))
}

/// Per-sample data needed by the sum-rate loss.
pub struct RateTarget<'a> {
    pub problem: &'a VirtualMisoProblem,
    pub truth: &'a ChannelSet,
}

/// Negative mean weighted sum rate of a batch, recorded as one tape node
/// with parents `p`, `lambda` and (multi-RB) `q`.
pub fn unsupervised_on_tape(tape: &mut Tape, fwd: &TapeForward, batch: &[RateTarget<'_>], cfg: &SystemConfig) -> Result<Var> {
    let p = super::tape::to2(tape.value(fwd.p));
    let l = super::tape::to2(tape.value(fwd.lambda));
    let q = fwd.q.map(|v| super::tape::to2(tape.value(v)));
    let n = batch.len();
    let evals = exec::par_map_range(n, |s| {
        let qs: Option<Vec<C64>> = q.as_ref().map(|q| (0..q.ncols() / 2).map(|i| c(q[(s, 2 * i)], q[(s, 2 * i + 1)])).collect());
        recover_and_rate(batch[s].problem, Some(batch[s].truth), cfg, &p.row(s).to_vec(), &l.row(s).to_vec(), qs.as_deref(), true)
    });
    let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;
    let mean = evals.iter().map(|e| e.wsr).sum::<f64>() / n as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("sum-rate loss"));
    }
    let inv = -1.0 / n as f64;
    let (pm, lm) = (p.ncols(), l.ncols());
    let gp = Array2::from_shape_fn((n, pm), |(s, i)| inv * evals[s].grad.as_ref().unwrap().p[i]).into_dyn();
    let gl = Array2::from_shape_fn((n, lm), |(s, i)| inv * evals[s].grad.as_ref().unwrap().lambda[i]).into_dyn();
    let gq = q.as_ref().map(|q| {
        Array2::from_shape_fn((n, q.ncols()), |(s, i)| {
            let (re, im) = evals[s].grad.as_ref().unwrap().q[i / 2];
            inv * if i % 2 == 0 { re } else { im }
        })
        .into_dyn()
    });
    let mut parents = vec![fwd.p, fwd.lambda];
    if let Some(v) = fwd.q {
        parents.push(v);
    }
    Ok(tape.custom(&parents, Tensor::from_elem(IxDyn(&[]), -mean), move |g| {
        let s = g.iter().next().copied().unwrap_or(1.0);
        let mut out = vec![&gp * s, &gl * s];
        if let Some(gq) = &gq {
            out.push(gq * s);
        }
        out
    }))
}

/// Weighted sum rate of features on the true channels (no gradient).
pub fn features_wsr(problem: &VirtualMisoProblem, truth: &ChannelSet, cfg: &SystemConfig, f: &KeyFeatures) -> Result<f64> {
    Ok(recover_and_rate(problem, Some(truth), cfg, &f.p, &f.lambda, f.q.as_deref(), false)?.wsr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::complex_gaussian_matrix;
    use crate::model::sum_rate_ofdm;
    use crate::rng::rng_from;
    use crate::transform;
    use crate::wmmse::{self, WmmseOptions};
    use rand::Rng;

    fn setup(nb: usize, seed: u64) -> (SystemConfig, ChannelSet, VirtualMisoProblem) {
        let mut cfg = SystemConfig::uniform(6, 2, 3, 1, 3.0).with_granularity(nb);
        cfg.weights = vec![1.0, 0.7, 1.3];
        cfg.streams = vec![1, 2, 1];
        let mut rng = rng_from(seed);
        let entries = (0..3 * nb).map(|_| complex_gaussian_matrix(&mut rng, 2, 6, 1.0)).collect();
        let ch = ChannelSet::new(3, nb, entries).unwrap();
        let pr = transform::mimo_to_miso(&ch, &cfg).unwrap();
        (cfg, ch, pr)
    }

    fn random_features(m: usize, mb: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<C64>) {
        let mut rng = rng_from(seed);
        let p: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
        let l: Vec<f64> = (0..mb).map(|_| rng.random_range(0.1..1.0)).collect();
        let q: Vec<C64> = (0..mb).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        (p, l, q)
    }

    #[test]
    fn rate_matches_reference_rate() {
        let (cfg, ch, pr) = setup(2, 1);
        let (p, l, q) = random_features(4, 8, 2);
        let ev = recover_and_rate(&pr, Some(&ch), &cfg, &p, &l, Some(&q), false).unwrap();
        let pre = transform::assemble_precoders(&ev.columns, &pr.stream_owner, &cfg).unwrap();
        let reference = sum_rate_ofdm(&ch, &pre, &cfg).unwrap();
        assert!((ev.wsr - reference).abs() < 1e-10 * reference);
        for (v, &pm) in ev.columns.iter().zip(&p) {
            assert!((v.norm_squared() - pm).abs() < 1e-12);
        }
    }

    #[test]
    fn recovery_matches_structured_columns() {
        let (cfg, _, pr) = setup(2, 3);
        let (p, l, q) = random_features(4, 8, 4);
        let ev = recover_and_rate(&pr, None, &cfg, &p, &l, Some(&q), false).unwrap();
        let dirs = wmmse::structured_columns(&pr, &l, &q, cfg.noise_var).unwrap();
        for (v, d) in ev.columns.iter().zip(&dirs) {
            let u = d / c(d.norm(), 0.0);
            let w = v / c(v.norm(), 0.0);
            assert!((u - w).norm() < 1e-10);
        }
    }

    fn fd_check(nb: usize, seed: u64) {
        let (cfg, ch, pr) = setup(nb, seed);
        let (m, mb) = (4, 4 * nb);
        let (p, l, q) = random_features(m, mb, seed + 100);
        let ev = recover_and_rate(&pr, Some(&ch), &cfg, &p, &l, Some(&q), true).unwrap();
        let g = ev.grad.unwrap();
        let f = |p: &[f64], l: &[f64], q: &[C64]| recover_and_rate(&pr, Some(&ch), &cfg, p, l, Some(q), false).unwrap().wsr;
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        for i in 0..m {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[i] += h;
            b[i] -= h;
            let num = (f(&a, &l, &q) - f(&b, &l, &q)) / (2.0 * h);
            assert!(rel(g.p[i], num) < 1e-5, "p[{i}] {} vs {num}", g.p[i]);
        }
        for i in 0..mb {
            let (mut a, mut b) = (l.clone(), l.clone());
            a[i] += h;
            b[i] -= h;
            let num = (f(&p, &a, &q) - f(&p, &b, &q)) / (2.0 * h);
            assert!(rel(g.lambda[i], num) < 1e-5, "lambda[{i}] {} vs {num}", g.lambda[i]);
            for (part, dir) in [(0, c(h, 0.0)), (1, c(0.0, h))] {
                let (mut a, mut b) = (q.clone(), q.clone());
                a[i] += dir;
                b[i] -= dir;
                let num = (f(&p, &l, &a) - f(&p, &l, &b)) / (2.0 * h);
                let ana = if part == 0 { g.q[i].0 } else { g.q[i].1 };
                if nb == 1 {
                    continue;
                }
                assert!(rel(ana, num) < 1e-5, "q[{i}].{part} {ana} vs {num}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_single_rb() {
        fd_check(1, 5);
    }

    #[test]
    fn gradient_matches_finite_differences_multi_rb() {
        fd_check(3, 6);
    }

    #[test]
    fn floored_lambda_has_zero_gradient() {
        let (cfg, ch, pr) = setup(1, 7);
        let ev = recover_and_rate(&pr, Some(&ch), &cfg, &[0.25; 4], &[0.5, 0.5, 0.0, 0.0], None, true).unwrap();
        let g = ev.grad.unwrap();
        assert_eq!(g.lambda[2], 0.0);
        assert_eq!(g.lambda[3], 0.0);
        assert!(ev.wsr.is_finite());
    }

    #[test]
    fn labels_reproduce_ideal_rate() {
        let (_, ch, _) = setup(1, 8);
        let cfg = SystemConfig::uniform(6, 2, 3, 1, 3.0);
        let opts = WmmseOptions { max_iters: 5000, rel_tol: 1e-13, ..Default::default() };
        let (_, diag) = transform::lcp_ideal_solve(&ch, &cfg, &opts).unwrap();
        let f = wmmse::extract_features_miso(&diag.miso_trace, &diag.problem, &cfg).unwrap();
        let wsr = features_wsr(&diag.problem, &ch, &cfg, &f).unwrap();
        assert!(f.lambda.iter().all(|&l| l > LAMBDA_FLOOR));
        assert!((wsr - diag.wsr).abs() < 1e-8 * diag.wsr, "{wsr} vs {}", diag.wsr);
    }

    #[test]
    fn single_stream_rate_ignores_features() {
        let cfg = SystemConfig::uniform(5, 1, 1, 1, 0.0);
        let mut rng = rng_from(9);
        let h = complex_gaussian_matrix(&mut rng, 1, 5, 1.0);
        let ch = ChannelSet::single(vec![h.clone()]).unwrap();
        let pr = transform::mimo_to_miso(&ch, &cfg).unwrap();
        let expected = (1.0 + cfg.total_power * h.norm_squared() / cfg.noise_var).log2();
        for l in [1e-9, 0.3, 1.0] {
            let wsr = recover_and_rate(&pr, Some(&ch), &cfg, &[1.0], &[l], None, false).unwrap().wsr;
            assert!((wsr - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn supervised_loss_examples() {
        let a = KeyFeatures { p: vec![0.5, 0.5], lambda: vec![0.25, 0.75], q: None, gamma: None };
        assert_eq!(loss_supervised(&a, &a), 0.0);
        let mut b = a.clone();
        b.lambda[1] += 0.1;
        assert!((loss_supervised(&a, &b) - 0.01 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn zero_stream_gets_zero_column() {
        let (cfg, mut ch, _) = setup(1, 10);
        ch.zero_fill_from(2);
        let pr = transform::mimo_to_miso(&ch, &cfg).unwrap();
        let ev = recover_and_rate(&pr, Some(&ch), &cfg, &[0.5, 0.25, 0.25, 0.0], &[0.25; 4], None, true).unwrap();
        assert_eq!(ev.columns[3].norm(), 0.0);
    }
}
