//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation of one forward pass together with a
//! closure mapping the gradient of its output to the gradients of its inputs.
//! [`Tape::backward`] replays the closures in reverse order.

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(like.raw_dim()))
    }
}

/// Batch statistics computed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), back: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records an operation with a caller-supplied backward rule. `back`
    /// receives the output gradient and returns one gradient per parent.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, back: impl Fn(&Tensor) -> Vec<Tensor> + 'static) -> Var {
        self.nodes.push(Node { value, parents: parents.iter().map(|v| v.0).collect(), back: Some(Box::new(back)) });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar output, seeded with 1.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            let Some(back) = &self.nodes[i].back else { continue };
            let Some(g) = grads[i].take() else { continue };
            let parent_grads = back(&g);
            for (&p, pg) in self.nodes[i].parents.iter().zip(parent_grads) {
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Same-padding, stride-1 2-D convolution without bias.
    /// `x: [N, C, H, W]`, `w: [F, C, J, J]` with odd `J`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let geo = ConvGeometry::new(xv.shape(), wv.shape());
        let cols = im2col(&xv, &geo);
        let wmat = wv.as_standard_layout().into_owned().into_shape_with_order((geo.f, geo.c * geo.j * geo.j)).unwrap();
        let out = cols_to_output(&cols.dot(&wmat.t()), &geo);
        self.custom(&[x, w], out, move |g| {
            let g2 = output_to_cols(g, &geo);
            let gw = g2.t().dot(&cols).into_shape_with_order(IxDyn(&[geo.f, geo.c, geo.j, geo.j])).unwrap();
            let gx = col2im(&g2.dot(&wmat), &geo);
            vec![gx, gw]
        })
    }

    /// Batch normalization over `(N, H, W)` per channel using the batch's own
    /// statistics. Returns the statistics for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let xv = self.value(x).clone();
        let (gv, bv) = (self.value(gamma).clone(), self.value(beta).clone());
        let shape = xv.shape().to_vec();
        let (n, ch, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = (n * hw) as f64;
        let xs = xv.as_slice().unwrap();
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for b in 0..n {
            for cc in 0..ch {
                let base = (b * ch + cc) * hw;
                mean[cc] += xs[base..base + hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for cc in 0..ch {
                let base = (b * ch + cc) * hw;
                var[cc] += xs[base..base + hw].iter().map(|v| (v - mean[cc]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for cc in 0..ch {
                let base = (b * ch + cc) * hw;
                for i in base..base + hw {
                    xhat[i] = (xs[i] - mean[cc]) * inv_std[cc];
                    out[i] = gv[cc] * xhat[i] + bv[cc];
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&shape), out).unwrap();
        let v = self.custom(&[x, gamma, beta], out, move |g| {
            let gs = g.as_slice().unwrap();
            let mut gbeta = vec![0.0; ch];
            let mut ggamma = vec![0.0; ch];
            for b in 0..n {
                for cc in 0..ch {
                    let base = (b * ch + cc) * hw;
                    for i in base..base + hw {
                        gbeta[cc] += gs[i];
                        ggamma[cc] += gs[i] * xhat[i];
                    }
                }
            }
            let mut gx = vec![0.0; gs.len()];
            for b in 0..n {
                for cc in 0..ch {
                    let base = (b * ch + cc) * hw;
                    let k = gv[cc] * inv_std[cc] / count;
                    for i in base..base + hw {
                        gx[i] = k * (count * gs[i] - gbeta[cc] - xhat[i] * ggamma[cc]);
                    }
                }
            }
            vec![
                Tensor::from_shape_vec(IxDyn(&shape), gx).unwrap(),
                Tensor::from_shape_vec(IxDyn(&[ch]), ggamma).unwrap(),
                Tensor::from_shape_vec(IxDyn(&[ch]), gbeta).unwrap(),
            ]
        });
        (v, BatchStats { mean, var })
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let xv = self.value(x).clone();
        let (gv, bv) = (self.value(gamma).clone(), self.value(beta).clone());
        let shape = xv.shape().to_vec();
        let (n, ch, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mean = mean.to_vec();
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for cc in 0..ch {
                let base = (b * ch + cc) * hw;
                for i in base..base + hw {
                    out[i] = gv[cc] * (xs[i] - mean[cc]) * inv_std[cc] + bv[cc];
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.custom(&[x, gamma, beta], out, move |g| {
            let gs = g.as_slice().unwrap();
            let mut gx = vec![0.0; gs.len()];
            let mut ggamma = vec![0.0; ch];
            let mut gbeta = vec![0.0; ch];
            for b in 0..n {
                for cc in 0..ch {
                    let base = (b * ch + cc) * hw;
                    for i in base..base + hw {
                        gx[i] = gs[i] * gv[cc] * inv_std[cc];
                        ggamma[cc] += gs[i] * (xs_at(&xv, i) - mean[cc]) * inv_std[cc];
                        gbeta[cc] += gs[i];
                    }
                }
            }
            vec![
                Tensor::from_shape_vec(IxDyn(&shape), gx).unwrap(),
                Tensor::from_shape_vec(IxDyn(&[ch]), ggamma).unwrap(),
                Tensor::from_shape_vec(IxDyn(&[ch]), gbeta).unwrap(),
            ]
        })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = self.value(x).clone();
        let out = xv.mapv(|v| if v > 0.0 { v } else { slope * v });
        self.custom(&[x], out, move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(&xv, |gi, &xi| {
                if xi <= 0.0 {
                    *gi *= slope
                }
            });
            vec![gx]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        let out = xv.as_standard_layout().into_owned().into_shape_with_order(IxDyn(shape)).unwrap();
        self.custom(&[x], out, move |g| {
            vec![g.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&in_shape)).unwrap()]
        })
    }

    /// `x: [N, D]`, `w: [O, D]`, `b: [O]` to `x w^T + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = to2(self.value(x));
        let wv = to2(self.value(w));
        let bv = self.value(b).clone();
        let mut out = xv.dot(&wv.t());
        for mut row in out.rows_mut() {
            row += &bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        }
        self.custom(&[x, w, b], out.into_dyn(), move |g| {
            let g2 = to2(g);
            vec![g2.dot(&wv).into_dyn(), g2.t().dot(&xv).into_dyn(), g2.sum_axis(Axis(0)).into_dyn()]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let y = out.clone();
        self.custom(&[x], out, move |g| {
            let mut gx = g.clone();
            gx.zip_mut_with(&y, |gi, &yi| *gi *= yi * (1.0 - yi));
            vec![gx]
        })
    }

    /// Columns `start..start + len` of a `[N, D]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = to2(self.value(x));
        let (n, d) = xv.dim();
        let out = xv.slice(ndarray::s![.., start..start + len]).to_owned();
        self.custom(&[x], out.into_dyn(), move |g| {
            let mut gx = Array2::zeros((n, d));
            gx.slice_mut(ndarray::s![.., start..start + len]).assign(&to2(g));
            vec![gx.into_dyn()]
        })
    }

    /// Row-wise `scale * m_i x_i / sum_j m_j x_j` on a positive `[N, D]` tensor.
    /// Rows whose masked sum is zero map to zero.
    pub fn masked_l1_normalize(&mut self, x: Var, mask: &Array2<f64>, scale: f64) -> Var {
        let xv = to2(self.value(x));
        let (n, d) = xv.dim();
        let mask = mask.clone();
        let sums: Vec<f64> = (0..n).map(|r| (0..d).map(|j| mask[(r, j)] * xv[(r, j)]).sum()).collect();
        let out = Array2::from_shape_fn((n, d), |(r, j)| {
            if sums[r] > 0.0 {
                scale * mask[(r, j)] * xv[(r, j)] / sums[r]
            } else {
                0.0
            }
        });
        let y = out.clone();
        self.custom(&[x], out.into_dyn(), move |g| {
            let g2 = to2(g);
            let mut gx = Array2::zeros((n, d));
            for r in 0..n {
                if sums[r] <= 0.0 {
                    continue;
                }
                let dot: f64 = (0..d).map(|i| g2[(r, i)] * y[(r, i)]).sum::<f64>() / scale;
                for j in 0..d {
                    gx[(r, j)] = mask[(r, j)] * scale / sums[r] * (g2[(r, j)] - dot);
                }
            }
            vec![gx.into_dyn()]
        })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Var {
        let diff = self.value(x) - target;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        self.custom(&[x], Tensor::from_elem(IxDyn(&[]), loss), move |g| {
            let s = g.iter().next().copied().unwrap_or(1.0);
            vec![diff.mapv(|d| 2.0 * d / n * s)]
        })
    }

    /// `sum_i c_i x_i` over scalar inputs, for combining losses.
    pub fn weighted_sum(&mut self, xs: &[Var], coefs: &[f64]) -> Var {
        let total: f64 = xs.iter().zip(coefs).map(|(v, c)| self.value(*v).iter().sum::<f64>() * c).sum();
        let shapes: Vec<_> = xs.iter().map(|v| self.value(*v).raw_dim()).collect();
        let coefs = coefs.to_vec();
        self.custom(xs, Tensor::from_elem(IxDyn(&[]), total), move |g| {
            let s = g.iter().next().copied().unwrap_or(1.0);
            shapes.iter().zip(&coefs).map(|(sh, c)| Tensor::from_elem(sh.clone(), s * c)).collect()
        })
    }
}

fn xs_at(x: &Tensor, i: usize) -> f64 {
    x.as_slice().unwrap()[i]
}

pub(crate) fn to2(t: &Tensor) -> Array2<f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a 2-D tensor").to_owned()
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    j: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize]) -> Self {
        assert_eq!(x.len(), 4, "conv input must be [N, C, H, W]");
        assert_eq!(w.len(), 4, "conv kernel must be [F, C, J, J]");
        assert_eq!(x[1], w[1], "conv channel mismatch");
        assert!(w[2] == w[3] && w[2] % 2 == 1, "conv kernels must be square and odd");
        Self { n: x[0], c: x[1], h: x[2], w: x[3], f: w[0], j: w[2] }
    }
}

/// Rows indexed `(n, y, x)`, columns `(c, ky, kx)`.
fn im2col(x: &Tensor, g: &ConvGeometry) -> Array2<f64> {
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let pad = (g.j / 2) as isize;
    let kk = g.c * g.j * g.j;
    let mut cols = vec![0.0; g.n * g.h * g.w * kk];
    for n in 0..g.n {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = ((n * g.h + y) * g.w + xx) * kk;
                for c in 0..g.c {
                    let plane = (n * g.c + c) * g.h * g.w;
                    for ky in 0..g.j {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.j {
                            let sx = xx as isize + kx as isize - pad;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            cols[row + (c * g.j + ky) * g.j + kx] = xs[plane + sy as usize * g.w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.n * g.h * g.w, kk), cols).unwrap()
}

fn col2im(cols: &Array2<f64>, g: &ConvGeometry) -> Tensor {
    let pad = (g.j / 2) as isize;
    let kk = g.c * g.j * g.j;
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().unwrap();
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for n in 0..g.n {
        for y in 0..g.h {
            for xx in 0..g.w {
                let row = ((n * g.h + y) * g.w + xx) * kk;
                for c in 0..g.c {
                    let plane = (n * g.c + c) * g.h * g.w;
                    for ky in 0..g.j {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.j {
                            let sx = xx as isize + kx as isize - pad;
                            if sx < 0 || sx >= g.w as isize {
                                continue;
                            }
                            x[plane + sy as usize * g.w + sx as usize] += cs[row + (c * g.j + ky) * g.j + kx];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[g.n, g.c, g.h, g.w]), x).unwrap()
}

/// `[N*H*W, F]` to `[N, F, H, W]`.
fn cols_to_output(y: &Array2<f64>, g: &ConvGeometry) -> Tensor {
    let hw = g.h * g.w;
    let mut out = vec![0.0; g.n * g.f * hw];
    for n in 0..g.n {
        for p in 0..hw {
            let row = y.row(n * hw + p);
            for f in 0..g.f {
                out[(n * g.f + f) * hw + p] = row[f];
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[g.n, g.f, g.h, g.w]), out).unwrap()
}

/// `[N, F, H, W]` to `[N*H*W, F]`.
fn output_to_cols(t: &Tensor, g: &ConvGeometry) -> Array2<f64> {
    let ts = t.as_standard_layout();
    let ts = ts.as_slice().unwrap();
    let hw = g.h * g.w;
    Array2::from_shape_fn((g.n * hw, g.f), |(r, f)| {
        let (n, p) = (r / hw, r % hw);
        ts[(n * g.f + f) * hw + p]
    })
}

/// Direct (non-im2col) same-padding convolution used as a test oracle.
pub fn conv2d_reference(x: &Tensor, w: &Tensor) -> Tensor {
    let g = ConvGeometry::new(x.shape(), w.shape());
    let pad = (g.j / 2) as isize;
    let mut out = Tensor::zeros(IxDyn(&[g.n, g.f, g.h, g.w]));
    for n in 0..g.n {
        for f in 0..g.f {
            for y in 0..g.h {
                for xx in 0..g.w {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        for ky in 0..g.j {
                            for kx in 0..g.j {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy >= 0 && sy < g.h as isize && sx >= 0 && sx < g.w as isize {
                                    acc += w[[f, c, ky, kx]] * x[[n, c, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    out[[n, f, y, xx]] = acc;
                }
            }
        }
    }
    out
}

/// Central finite-difference check of `d f / d leaf` at `probes` coordinates
/// of `input`. `f` builds a scalar on a fresh tape from the leaf holding
/// `input`. Returns the worst relative error, measured as
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn gradient_check(
    input: &Tensor,
    probes: &[usize],
    h: f64,
    floor: f64,
    f: impl Fn(&mut Tape, Var) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let leaf = tape.leaf(input.clone());
    let out = f(&mut tape, leaf);
    let grads = tape.backward(out);
    let analytic = grads.get_or_zeros(leaf, input);
    let eval = |x: Tensor| {
        let mut t = Tape::new();
        let l = t.leaf(x);
        let o = f(&mut t, l);
        t.value(o).iter().sum::<f64>()
    };
    let mut worst: f64 = 0.0;
    for &i in probes {
        let mut plus = input.clone();
        plus.as_slice_mut().unwrap()[i] += h;
        let mut minus = input.clone();
        minus.as_slice_mut().unwrap()[i] -= h;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
