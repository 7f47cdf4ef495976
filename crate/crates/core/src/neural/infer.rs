//! Tape-free inference. Same arithmetic as the eval-mode tape forward, but
//! without value clones or recorded closures.

use std::cell::RefCell;

use ndarray::{s, Array2, ArrayView2, Axis};

use super::network::{Layer, LayerSpec, NetInput, NetworkModel};
use super::tape::BN_EPS;

/// Output columns per im2col block, sized to keep the block in cache.
const BLOCK: usize = 128;

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// `x: [C, H*W]` to `[F, H*W]`, same padding, stride 1. The input is
/// zero-padded and the product is taken over padded-width rows, so every
/// im2col row is one contiguous copy; the extra columns are dropped after.
fn conv(x: &Array2<f64>, w: &ndarray::ArrayD<f64>, h: usize, wd: usize) -> Array2<f64> {
    let (f, c, j) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let pad = j / 2;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let span = (h - 1) * wp + wd;
    let mut padded = vec![0.0; c * hp * wp];
    for ch in 0..c {
        let row = x.row(ch);
        let row = row.as_slice().expect("contiguous activations");
        for y in 0..h {
            let dst = ch * hp * wp + (y + pad) * wp + pad;
            padded[dst..dst + wd].copy_from_slice(&row[y * wd..(y + 1) * wd]);
        }
    }
    let wmat = w.view().into_shape_with_order((f, c * j * j)).expect("standard-layout kernel");
    let kk = c * j * j;
    let mut wide = Array2::<f64>::zeros((f, span));
    SCRATCH.with_borrow_mut(|cols| {
        for start in (0..span).step_by(BLOCK) {
            let len = BLOCK.min(span - start);
            cols.clear();
            for ch in 0..c {
                for ky in 0..j {
                    for kx in 0..j {
                        let src = ch * hp * wp + ky * wp + kx + start;
                        cols.extend_from_slice(&padded[src..src + len]);
                    }
                }
            }
            let block = ArrayView2::from_shape((kk, len), cols.as_slice()).expect("im2col shape");
            wide.slice_mut(s![.., start..start + len]).assign(&wmat.dot(&block));
        }
    });
    let mut out = Array2::zeros((f, h * wd));
    for y in 0..h {
        out.slice_mut(s![.., y * wd..(y + 1) * wd]).assign(&wide.slice(s![.., y * wp..y * wp + wd]));
    }
    out
}

/// Runs `layers` in eval mode. Feature maps are `[C, H*W]` for one sample;
/// after a flatten (or for a dense-only stack) rows are samples.
pub(crate) fn run(layers: &[Layer], mut x: Array2<f64>, h: usize, wd: usize) -> Array2<f64> {
    for layer in layers {
        let p = &layer.params;
        match layer.spec {
            LayerSpec::Conv2d { .. } => x = conv(&x, &p[0], h, wd),
            LayerSpec::Batchnorm { .. } => {
                for (ch, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
                    let scale = p[0][ch] / (p[3][ch] + BN_EPS).sqrt();
                    let shift = p[1][ch] - p[2][ch] * scale;
                    row.mapv_inplace(|v| v * scale + shift);
                }
            }
            LayerSpec::LeakyRelu { slope } => x.mapv_inplace(|v| if v > 0.0 { v } else { slope * v }),
            LayerSpec::Flatten => {
                let len = x.len();
                x = x.as_standard_layout().into_owned().into_shape_with_order((1, len)).expect("flatten");
            }
            LayerSpec::FullyConnected { in_dim, out_dim } => {
                let w = p[0].view().into_shape_with_order((out_dim, in_dim)).expect("dense weight");
                let mut y = if x.nrows() == 1 {
                    w.dot(&x.row(0)).insert_axis(Axis(0))
                } else {
                    x.dot(&w.t())
                };
                y += &p[1].view().into_shape_with_order(out_dim).expect("dense bias");
                x = y;
            }
            LayerSpec::Sigmoid => x.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
        }
    }
    x
}

fn normalize(mut row: ndarray::ArrayViewMut1<f64>, mask: ndarray::ArrayView1<f64>, scale: f64) {
    let sum: f64 = row.iter().zip(mask).map(|(x, m)| x * m).sum();
    for (x, &m) in row.iter_mut().zip(mask) {
        *x = if sum > 0.0 { scale * m * *x / sum } else { 0.0 };
    }
}

/// `(p [N, M], lambda [N, M*B], raw q [N, 2*M*B])` for a prepared batch.
pub(crate) fn infer(model: &NetworkModel, input: &NetInput) -> (Array2<f64>, Array2<f64>, Option<Array2<f64>>) {
    let n = input.batch_size();
    let (m, d) = (model.arch.n_streams, model.arch.input_dim());
    let mut p = Array2::zeros((n, m));
    let mut lambda = Array2::zeros((n, d));
    for s in 0..n {
        let plane = input.grams.slice(s![s, 0, .., ..]).to_owned().into_shape_with_order((1, d * d)).expect("gram plane");
        let out = run(&model.trunk, plane, d, d);
        p.row_mut(s).assign(&out.slice(s![0, ..m]));
        lambda.row_mut(s).assign(&out.slice(s![0, m..]));
    }
    let pt = model.arch.total_power;
    for s in 0..n {
        normalize(p.row_mut(s), input.p_mask.row(s), pt);
        normalize(lambda.row_mut(s), input.lambda_mask.row(s), pt);
    }
    let q = input.stream_grams.as_ref().map(|sg| {
        let raw = run(&model.q_head, sg.clone(), 1, 1);
        raw.into_shape_with_order((n, 2 * d)).expect("q rows")
    });
    (p, lambda, q)
}
