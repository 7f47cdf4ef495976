//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (unaffected by output capture) and asserts the same condition. Tests hold a
//! global lock so timings are not disturbed by each other.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use lcp_core::channel::{complex_gaussian_matrix, gen_channel, ChannelParams};
use lcp_core::experiment::table3::{check_table3, table3_specs};
use lcp_core::experiment::{run, ExperimentSpec, Method, ReportRow, Scenario};
use lcp_core::linalg::{c, CMat, C64};
use lcp_core::model::{pack_hermitian, weighted_gram, ChannelSet, KeyFeatures, SystemConfig, VirtualMisoProblem};
use lcp_core::neural::dataset::{build_dataset, split, DatasetSpec, Sample};
use lcp_core::neural::loss::recover_and_rate;
use lcp_core::neural::prune::{predicted_conv_term, prune_schedule, PruneSchedule};
use lcp_core::neural::tape::{gradient_check, Tape, Tensor, Var};
use lcp_core::neural::train::{evaluate, train, TrainConfig};
use lcp_core::neural::{Architecture, LayerSpec, NetworkModel};
use lcp_core::rng::rng_from;
use lcp_core::transform::{lcp_ideal_solve, mimo_to_miso, recover_precoders, recover_precoders_full, recover_precoders_ofdm};
use lcp_core::wmmse::{extract_features_ofdm, wmmse_mimo_ofdm, wmmse_ofdm_miso, WmmseOptions};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, passed: bool, detail: &str, elapsed: Duration) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "AC{id:<2} {tag} {name}: {detail} [{:.1} s]", elapsed.as_secs_f64());
    assert!(passed, "AC{id} {name}: {detail}");
}

fn unit_features(rng: &mut impl Rng, n: usize, lo: f64) -> Vec<f64> {
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(lo..1.0)).collect();
    let s: f64 = x.iter().sum();
    x.iter().map(|v| v / s).collect()
}

fn random_unitary(rng: &mut impl Rng, n: usize) -> CMat {
    complex_gaussian_matrix(rng, n, n, 1.0).qr().q()
}

fn row<'a>(rows: &'a [ReportRow], method: &str) -> &'a ReportRow {
    rows.iter().find(|r| r.method == method).unwrap_or_else(|| panic!("no {method} row"))
}

#[test]
fn ac01_wmmse_monotone() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = rng_from(0xA1);
    let opts = WmmseOptions::default();
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let k = rng.random_range(2..=8);
        let cfg = SystemConfig::case1(k).with_snr_db(rng.random_range(-5.0..15.0));
        let ch = gen_channel(&ChannelParams::unit(), &cfg, 1000 + i);
        let (_, trace) = wmmse_mimo_ofdm(&ch, &cfg, &opts).unwrap();
        worst = worst.max(trace.worst_decrease());
    }
    let el = t.elapsed();
    let ok = worst <= 1e-9 && el < Duration::from_secs(120);
    verdict(1, "wmmse monotonicity", ok, &format!("worst decrease {worst:.3e} over 200 traces"), el);
}

#[test]
fn ac02_recovery_paths_agree() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = rng_from(0xA2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(1..=8);
        let nt = rng.random_range(2..=16);
        let cfg = SystemConfig::uniform(nt, 1, m, 1, rng.random_range(-5.0..15.0));
        let h = complex_gaussian_matrix(&mut rng, m, nt, 1.0);
        let weights = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
        let problem = VirtualMisoProblem::new(vec![h], weights, (0..m).collect()).unwrap();
        let f = KeyFeatures { p: unit_features(&mut rng, m, 0.1), lambda: unit_features(&mut rng, m, 0.1), q: None, gamma: None };
        assert!(f.lambda.iter().all(|&l| l > 1e-3));
        let a = recover_precoders(&problem, &f, &cfg).unwrap();
        let b = recover_precoders_full(&problem, &f, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let scale = y.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1e-300);
            worst = worst.max(x.iter().zip(y.iter()).map(|(u, v)| (u - v).norm()).fold(0.0, f64::max) / scale);
        }
    }
    let el = t.elapsed();
    let ok = worst <= 1e-10 && el < Duration::from_secs(10);
    verdict(2, "recovery equivalence", ok, &format!("worst relative entry error {worst:.3e}"), el);
}

#[test]
fn ac03_rotation_invariance() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = rng_from(0xA3);
    let opts = WmmseOptions::default();
    let (mut packed_err, mut wsr_err): (f64, f64) = (0.0, 0.0);
    for i in 0..50 {
        let k = rng.random_range(2..=6);
        let cfg = SystemConfig::case1(k).with_snr_db(rng.random_range(-5.0..15.0));
        let ch = gen_channel(&ChannelParams::unit(), &cfg, 3000 + i);
        let rotated = ch.rotate(&random_unitary(&mut rng, cfg.n_tx));
        let pa = pack_hermitian(&weighted_gram(&mimo_to_miso(&ch, &cfg).unwrap())).unwrap();
        let pb = pack_hermitian(&weighted_gram(&mimo_to_miso(&rotated, &cfg).unwrap())).unwrap();
        packed_err = packed_err.max((&pa.matrix - &pb.matrix).abs().max());
        let (_, da) = lcp_ideal_solve(&ch, &cfg, &opts).unwrap();
        let (_, db) = lcp_ideal_solve(&rotated, &cfg, &opts).unwrap();
        wsr_err = wsr_err.max((da.wsr - db.wsr).abs() / da.wsr);
    }
    let el = t.elapsed();
    let ok = packed_err <= 1e-12 && wsr_err <= 1e-8 && el < Duration::from_secs(60);
    verdict(3, "rotation invariance", ok, &format!("packed input {packed_err:.3e}, lcp_ideal wsr {wsr_err:.3e} relative"), el);
}

struct Table3 {
    rows: Vec<ReportRow>,
    elapsed: Duration,
}

fn table3() -> &'static Table3 {
    static CELL: OnceLock<Table3> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let [snr, mut users] = table3_specs(200, 0x7AB3);
        users.users = vec![8, 12, 16];
        let mut rows = run(&snr).unwrap().rows;
        rows.extend(run(&users).unwrap().rows);
        Table3 { rows, elapsed: t.elapsed() }
    })
}

fn table3_check(id: u32, index: usize) {
    let _g = serial();
    let tab = table3();
    let check = &check_table3(&tab.rows)[index];
    let ok = check.passed && tab.elapsed < Duration::from_secs(1800);
    verdict(id, check.name, ok, &check.detail, tab.elapsed);
}

#[test]
fn ac04_table3_ratio_at_0db() {
    table3_check(4, 0);
}

#[test]
fn ac05_table3_snr_trend() {
    table3_check(5, 1);
}

#[test]
fn ac06_table3_user_trend() {
    table3_check(6, 2);
}

#[test]
fn ac07_ofdm_structure_round_trip() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = rng_from(0xA7);
    let opts = WmmseOptions::default();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = rng.random_range(2..=6);
        let nt = rng.random_range(m..=16);
        let cfg = SystemConfig::uniform(nt, 1, m, 1, rng.random_range(-5.0..15.0)).with_granularity(4);
        let chans = (0..4).map(|_| complex_gaussian_matrix(&mut rng, m, nt, 1.0)).collect();
        let problem = VirtualMisoProblem::new(chans, vec![1.0; m], (0..m).collect()).unwrap();
        let (cols, trace) = wmmse_ofdm_miso(&problem, &cfg, &opts).unwrap();
        let f = extract_features_ofdm(&trace, &problem, &cfg).unwrap();
        let rec = recover_precoders_ofdm(&problem, &f, &cfg).unwrap();
        for (a, b) in cols.iter().zip(&rec) {
            worst = worst.max(a.iter().zip(b.iter()).map(|(u, v)| (u - v).norm()).fold(0.0, f64::max));
        }
    }
    let el = t.elapsed();
    let ok = worst <= 1e-8 && el < Duration::from_secs(300);
    verdict(7, "ofdm structure round trip", ok, &format!("worst entry error {worst:.3e}"), el);
}

struct Trained {
    cfg: SystemConfig,
    tc: TrainConfig,
    model: NetworkModel,
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
    elapsed: Duration,
    _dir: tempfile::TempDir,
    checkpoint: String,
}

fn train_toy(error_var: Option<f64>, seed: u64) -> Trained {
    let t = Instant::now();
    let cfg = SystemConfig::case1(4);
    let tc = TrainConfig::default();
    let mut spec = DatasetSpec::new(ChannelParams::unit(), cfg.clone(), tc.n_train + tc.n_val, seed);
    let mut test_spec = DatasetSpec::new(ChannelParams::unit(), cfg.clone(), 1000, seed + 1);
    if let Some(v) = error_var {
        spec = spec.with_noise(v);
        test_spec = test_spec.with_noise(v);
    }
    let (train_set, val, _) = split(build_dataset(&spec).unwrap(), tc.n_train, tc.n_val);
    let test = build_dataset(&test_spec).unwrap();
    let net = NetworkModel::new(Architecture::mimo(cfg.total_streams(), cfg.total_power, cfg.noise_var), seed).unwrap();
    let (model, _) = train(net, &train_set, &val, &cfg, &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let checkpoint = path.to_str().unwrap().to_string();
    Trained { cfg, tc, model, train: train_set, val, test, elapsed: t.elapsed(), _dir: dir, checkpoint }
}

fn toy() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| train_toy(None, 0x70E))
}

#[test]
fn ac08_toy_training() {
    let _g = serial();
    let toy = toy();
    let t = Instant::now();
    let mut spec = ExperimentSpec::new("toy", Scenario::SweepSnr, toy.cfg.clone(), 1000, 0xA8, vec![Method::Wmmse, Method::LcpNet, Method::Ezf]);
    spec.snr_db = vec![0.0];
    spec.checkpoint = Some(toy.checkpoint.clone());
    let rows = run(&spec).unwrap().rows;
    let (net, ezf) = (row(&rows, "lcp_net").ratio.unwrap(), row(&rows, "ezf").ratio.unwrap());
    let el = toy.elapsed + t.elapsed();
    let ok = net >= 0.93 && ezf < net && el < Duration::from_secs(1800);
    let detail = format!("lcp_net/wmmse {net:.4} (>= 0.93), ezf/wmmse {ezf:.4}, wmmse wsr {:.3}", row(&rows, "wmmse").mean_wsr);
    verdict(8, "toy training", ok, &detail, el);
}

#[test]
fn ac09_pruning_retention() {
    let _g = serial();
    let toy = toy();
    let t = Instant::now();
    let schedule = PruneSchedule::default();
    let rounds = prune_schedule(&toy.model, &schedule, &toy.train, &toy.val, &toy.cfg, &toy.tc).unwrap();
    let base = evaluate(&toy.model, &toy.test, &toy.cfg).unwrap();
    let last = rounds.last().unwrap();
    let pruned = evaluate(&last.model, &toy.test, &toy.cfg).unwrap();
    let specs = toy.model.specs();
    let kernels: Vec<usize> = specs
        .iter()
        .filter_map(|s| match *s {
            LayerSpec::Conv2d { kernel_size, .. } => Some(kernel_size),
            _ => None,
        })
        .collect();
    let mut filters = toy.model.conv_filters();
    for (f, r) in filters.iter_mut().zip(schedule.rounds.last().unwrap()) {
        *f -= r;
    }
    let d = toy.model.arch.input_dim();
    let predicted = predicted_conv_term(&filters, &kernels, d * d);
    let loss = 1.0 - pruned / base;
    let ok = loss <= 0.015 && last.conv_term == predicted;
    let detail = format!(
        "held-out wsr {base:.4} -> {pruned:.4} (loss {:.2}%), conv term {} vs predicted {predicted} for filters {filters:?}",
        100.0 * loss,
        last.conv_term
    );
    verdict(9, "pruning retention", ok, &detail, t.elapsed());
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Distinct probe indices (all of them when the tensor is small).
fn probes(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = rng_from(seed);
    for i in (1..len).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    idx.truncate(count.min(len));
    idx
}

/// Scalarizes `y` by a fixed random linear functional.
fn project(t: &mut Tape, y: Var, seed: u64) -> Var {
    let w = random_tensor(t.value(y).shape(), seed);
    let v = (t.value(y) * &w).sum();
    t.custom(&[y], Tensor::from_elem(IxDyn(&[]), v), move |g| {
        let s = g.iter().next().copied().unwrap_or(1.0);
        vec![w.mapv(|wi| wi * s)]
    })
}

fn layer_checks() -> Vec<(&'static str, usize, f64)> {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-8;
    let mut out = Vec::new();
    let x = random_tensor(&[2, 3, 5, 5], 1);
    let w = random_tensor(&[4, 3, 3, 3], 2);
    let (x1, w1) = (x.clone(), w.clone());
    let px = probes(x.len(), 20, 3);
    let e = gradient_check(&x, &px, H, FLOOR, move |t, xv| {
        let wv = t.leaf(w1.clone());
        let y = t.conv2d(xv, wv);
        project(t, y, 4)
    });
    out.push(("conv2d input", px.len(), e));
    let pw = probes(w.len(), 20, 5);
    let e = gradient_check(&w, &pw, H, FLOOR, move |t, wv| {
        let xv = t.leaf(x1.clone());
        let y = t.conv2d(xv, wv);
        project(t, y, 4)
    });
    out.push(("conv2d kernel", pw.len(), e));

    let x = random_tensor(&[4, 6, 3, 3], 6);
    let gb = random_tensor(&[1, 12], 7);
    let gamma = gb.slice(ndarray::s![0, ..6]).to_owned().into_dyn();
    let beta = gb.slice(ndarray::s![0, 6..]).to_owned().into_dyn();
    let (g1, b1) = (gamma.clone(), beta.clone());
    let px = probes(x.len(), 20, 9);
    let e = gradient_check(&x, &px, H, FLOOR, move |t, xv| {
        let (g, b) = (t.leaf(g1.clone()), t.leaf(b1.clone()));
        let (y, _) = t.batch_norm_train(xv, g, b);
        project(t, y, 10)
    });
    out.push(("batchnorm (train) input", px.len(), e));
    let x2 = x.clone();
    let pg = probes(12, 12, 11);
    let e = gradient_check(&gb, &pg, H, FLOOR, move |t, v| {
        let xv = t.leaf(x2.clone());
        let g = t.slice_cols(v, 0, 6);
        let b = t.slice_cols(v, 6, 6);
        let g = t.reshape(g, &[6]);
        let b = t.reshape(b, &[6]);
        let (y, _) = t.batch_norm_train(xv, g, b);
        project(t, y, 10)
    });
    out.push(("batchnorm (train) gamma/beta", pg.len(), e));
    let px = probes(x.len(), 20, 12);
    let e = gradient_check(&x, &px, H, FLOOR, move |t, xv| {
        let (g, b) = (t.leaf(gamma.clone()), t.leaf(beta.clone()));
        let y = t.batch_norm_eval(xv, g, b, &[0.1, -0.2, 0.0, 0.3, 0.5, -0.1], &[0.5, 2.0, 1.0, 0.7, 1.3, 0.9]);
        project(t, y, 13)
    });
    out.push(("batchnorm (eval) input", px.len(), e));

    let x = random_tensor(&[4, 8], 14);
    let p = probes(32, 20, 15);
    let e = gradient_check(&x, &p, H, FLOOR, |t, xv| {
        let y = t.leaky_relu(xv, 0.01);
        project(t, y, 16)
    });
    out.push(("leaky relu", p.len(), e));
    let e = gradient_check(&x, &p, H, FLOOR, |t, xv| {
        let y = t.sigmoid(xv);
        project(t, y, 17)
    });
    out.push(("sigmoid", p.len(), e));
    let w = random_tensor(&[5, 8], 18);
    let b = random_tensor(&[5], 19);
    let (w1, b1) = (w.clone(), b.clone());
    let e = gradient_check(&x, &p, H, FLOOR, move |t, xv| {
        let (wv, bv) = (t.leaf(w1.clone()), t.leaf(b1.clone()));
        let y = t.linear(xv, wv, bv);
        project(t, y, 20)
    });
    out.push(("dense input", p.len(), e));
    let x1 = x.clone();
    let pw = probes(40, 20, 21);
    let e = gradient_check(&w, &pw, H, FLOOR, move |t, wv| {
        let (xv, bv) = (t.leaf(x1.clone()), t.leaf(b.clone()));
        let y = t.linear(xv, wv, bv);
        project(t, y, 20)
    });
    out.push(("dense weight", pw.len(), e));

    let xp = x.mapv(|v| v.abs() + 0.1);
    let mask = Array2::from_shape_fn((4, 5), |(r, c)| if r == 3 && c > 2 { 0.0 } else { 1.0 });
    let p = probes(32, 20, 22);
    let e = gradient_check(&xp, &p, H, FLOOR, move |t, xv| {
        let s = t.slice_cols(xv, 3, 5);
        let y = t.masked_l1_normalize(s, &mask, 2.0);
        let r = t.reshape(y, &[20]);
        project(t, r, 23)
    });
    out.push(("slice / l1-normalize / reshape", p.len(), e));
    out
}

fn recovery_check(nb: usize, seed: u64) -> (usize, f64) {
    let mut cfg = SystemConfig::uniform(6, 2, 3, 1, 3.0).with_granularity(nb);
    cfg.weights = vec![1.0, 0.7, 1.3];
    cfg.streams = vec![1, 2, 1];
    let mut rng = rng_from(seed);
    let entries = (0..3 * nb).map(|_| complex_gaussian_matrix(&mut rng, 2, 6, 1.0)).collect();
    let ch = ChannelSet::new(3, nb, entries).unwrap();
    let pr = mimo_to_miso(&ch, &cfg).unwrap();
    let (m, mb) = (4, 4 * nb);
    let p: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
    let l: Vec<f64> = (0..mb).map(|_| rng.random_range(0.1..1.0)).collect();
    let q: Vec<C64> = (0..mb).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let g = recover_and_rate(&pr, Some(&ch), &cfg, &p, &l, Some(&q), true).unwrap().grad.unwrap();
    let f = |p: &[f64], l: &[f64], q: &[C64]| recover_and_rate(&pr, Some(&ch), &cfg, p, l, Some(q), false).unwrap().wsr;
    let h = 1e-5;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let (mut n, mut worst): (usize, f64) = (0, 0.0);
    for i in 0..m {
        let (mut a, mut b) = (p.clone(), p.clone());
        a[i] += h;
        b[i] -= h;
        worst = worst.max(rel(g.p[i], (f(&a, &l, &q) - f(&b, &l, &q)) / (2.0 * h)));
        n += 1;
    }
    for i in 0..mb {
        let (mut a, mut b) = (l.clone(), l.clone());
        a[i] += h;
        b[i] -= h;
        worst = worst.max(rel(g.lambda[i], (f(&p, &a, &q) - f(&p, &b, &q)) / (2.0 * h)));
        n += 1;
        if nb == 1 {
            continue;
        }
        for (part, dir) in [(0, c(h, 0.0)), (1, c(0.0, h))] {
            let (mut a, mut b) = (q.clone(), q.clone());
            a[i] += dir;
            b[i] -= dir;
            let ana = if part == 0 { g.q[i].0 } else { g.q[i].1 };
            worst = worst.max(rel(ana, (f(&p, &l, &a) - f(&p, &l, &b)) / (2.0 * h)));
            n += 1;
        }
    }
    (n, worst)
}

#[test]
fn ac10_gradients() {
    let _g = serial();
    let t = Instant::now();
    let mut checks = layer_checks();
    let (n1, e1) = recovery_check(1, 31);
    let (n2, e2) = recovery_check(2, 32);
    checks.push(("recovery + rate", n1 + n2, e1.max(e2)));
    let el = t.elapsed();
    let ok = checks.iter().all(|&(_, n, e)| n >= 12 && e <= 1e-4)
        && checks.iter().filter(|c| c.0.starts_with("batchnorm (train)")).map(|c| c.1).sum::<usize>() >= 20
        && n1 + n2 >= 20
        && el < Duration::from_secs(60);
    let detail = checks.iter().map(|(name, n, e)| format!("{name} {e:.1e} ({n})")).collect::<Vec<_>>().join(", ");
    verdict(10, "gradient correctness", ok, &detail, el);
}

#[test]
fn ac11_imperfect_csi_ordering() {
    let _g = serial();
    let t = Instant::now();
    let noisy = train_toy(Some(0.1), 0xC51);
    let mut spec = ExperimentSpec::new("csi", Scenario::ImperfectCsi, noisy.cfg.clone(), 500, 0xA11, vec![Method::Wmmse, Method::LcpNet]);
    spec.error_var = vec![0.1];
    spec.checkpoint = Some(noisy.checkpoint.clone());
    let rows = run(&spec).unwrap().rows;
    let (net, wmmse) = (row(&rows, "lcp_net").ratio.unwrap(), row(&rows, "wmmse").ratio.unwrap());
    let detail = format!("ratio to oracle wmmse: lcp_net {net:.4}, wmmse on noisy csi {wmmse:.4}");
    verdict(11, "imperfect csi ordering", net > wmmse, &detail, t.elapsed());
}

#[test]
fn ac12_timing_ordering() {
    let _g = serial();
    let t = Instant::now();
    let cfg = SystemConfig::case2(10);
    let net = NetworkModel::new(Architecture::mimo(cfg.total_streams(), cfg.total_power, cfg.noise_var), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("untrained.json");
    net.save(&path).unwrap();
    let mut spec = ExperimentSpec::new("timing", Scenario::Timing, cfg, 50, 0xA12, vec![Method::Wmmse, Method::LcpNet, Method::Ezf]);
    spec.checkpoint = Some(path.to_str().unwrap().into());
    let rows = run(&spec).unwrap().rows;
    let time = |m: &str| row(&rows, m).time_ms.unwrap();
    let (w, n, e) = (time("wmmse"), time("lcp_net"), time("ezf"));
    let ok = w >= 5.0 * n && n <= 4.0 * e;
    let detail = format!("median ms: wmmse {w:.3}, lcp_net {n:.3}, ezf {e:.3} (wmmse/lcp_net {:.1}, lcp_net/ezf {:.2})", w / n, n / e);
    verdict(12, "timing ordering", ok, &detail, t.elapsed());
}
