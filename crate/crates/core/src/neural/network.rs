//! Convolutional feature predictor: layer specs, parameters, forward pass and
//! JSON checkpoints.

use ndarray::{Array2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::tape::{BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg::{c, CMat, C64};
use crate::model::{self, KeyFeatures, VirtualMisoProblem};
use crate::rng::rng_from;

pub const CHECKPOINT_VERSION: &str = "lcp-model/1";
pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_MOMENTUM: f64 = 0.1;
/// Lower bound applied to predicted `lambda` (relative to `P_T`) before recovery.
pub const LAMBDA_FLOOR: f64 = 1e-6;
/// Hidden width of the per-stream combiner head.
pub const Q_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d { in_channels: usize, n_filters: usize, kernel_size: usize },
    Batchnorm { channels: usize },
    LeakyRelu { slope: f64 },
    Flatten,
    FullyConnected { in_dim: usize, out_dim: usize },
    Sigmoid,
}

/// A layer with its parameter tensors: conv `[w]`, batchnorm
/// `[gamma, beta, running_mean, running_var]`, fully connected `[w, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
}

impl Layer {
    /// Indices of the parameters updated by the optimizer.
    pub fn trainable(&self) -> &'static [usize] {
        match self.spec {
            LayerSpec::Conv2d { .. } => &[0],
            LayerSpec::Batchnorm { .. } | LayerSpec::FullyConnected { .. } => &[0, 1],
            _ => &[],
        }
    }
}

/// Dimensions the network is built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Number of virtual streams `M`.
    pub n_streams: usize,
    /// RBs sharing one precoder, `B`.
    pub n_rb: usize,
    pub total_power: f64,
    pub noise_var: f64,
    /// `(filters, kernel)` of each convolutional block.
    pub conv: Vec<(usize, usize)>,
}

impl Architecture {
    /// The three-block network for single-RB problems.
    pub fn mimo(n_streams: usize, total_power: f64, noise_var: f64) -> Self {
        Self { n_streams, n_rb: 1, total_power, noise_var, conv: vec![(16, 7), (8, 5), (4, 3)] }
    }

    /// The four-block network for multi-RB problems with combiner heads.
    pub fn ofdm(n_streams: usize, n_rb: usize, total_power: f64, noise_var: f64) -> Self {
        Self { n_streams, n_rb, total_power, noise_var, conv: vec![(32, 7), (16, 5), (8, 3), (4, 3)] }
    }

    /// Side of the square packed input, `M * B`.
    pub fn input_dim(&self) -> usize {
        self.n_streams * self.n_rb
    }

    pub fn has_q_head(&self) -> bool {
        self.n_rb > 1
    }

    fn out_dim(&self) -> usize {
        self.n_streams + self.n_streams * self.n_rb
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_streams == 0 || self.n_rb == 0 || self.conv.is_empty() {
            return Err(Error::InvalidConfig("network needs streams, RBs and at least one conv block".into()));
        }
        if self.conv.iter().any(|&(f, j)| f == 0 || j % 2 == 0) {
            return Err(Error::InvalidConfig("conv blocks need filters and odd kernels".into()));
        }
        if !(self.total_power > 0.0 && self.noise_var > 0.0) {
            return Err(Error::InvalidConfig("power and noise must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub arch: Architecture,
    pub trunk: Vec<Layer>,
    /// Per-stream combiner head (multi-RB only).
    pub q_head: Vec<Layer>,
    pub seed: u64,
}

/// Network inputs for a batch: packed weighted Grams `[N, 1, D, D]`, the
/// masks of active streams, and packed per-stream Grams `[N * M, B * B]`.
#[derive(Debug, Clone)]
pub struct NetInput {
    pub grams: Tensor,
    pub p_mask: Array2<f64>,
    pub lambda_mask: Array2<f64>,
    pub stream_grams: Option<Array2<f64>>,
}

impl NetInput {
    pub fn batch_size(&self) -> usize {
        self.grams.shape()[0]
    }
}

/// Tape handles of one forward pass.
pub struct TapeForward {
    pub p: Var,
    pub lambda: Var,
    /// Raw combiner outputs `[N, 2 * M * B]`, `(re, im)` interleaved.
    pub q: Option<Var>,
    /// Leaf handles of every parameter, trunk then head, in layer order.
    pub params: Vec<Vec<Var>>,
    /// Batch statistics of each batchnorm (train mode), trunk then head.
    pub bn_stats: Vec<Option<BatchStats>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-bound..bound))
}

fn conv_layer(c_in: usize, f: usize, j: usize, rng: &mut impl Rng) -> Layer {
    let fan_in = (c_in * j * j) as f64;
    Layer {
        spec: LayerSpec::Conv2d { in_channels: c_in, n_filters: f, kernel_size: j },
        params: vec![uniform(&[f, c_in, j, j], (6.0 / fan_in).sqrt(), rng)],
    }
}

fn bn_layer(ch: usize) -> Layer {
    Layer {
        spec: LayerSpec::Batchnorm { channels: ch },
        params: vec![
            Tensor::ones(IxDyn(&[ch])),
            Tensor::zeros(IxDyn(&[ch])),
            Tensor::zeros(IxDyn(&[ch])),
            Tensor::ones(IxDyn(&[ch])),
        ],
    }
}

fn fc_layer(i: usize, o: usize, gain: f64, rng: &mut impl Rng) -> Layer {
    Layer {
        spec: LayerSpec::FullyConnected { in_dim: i, out_dim: o },
        params: vec![uniform(&[o, i], gain * (6.0 / (i + o) as f64).sqrt(), rng), Tensor::zeros(IxDyn(&[o]))],
    }
}

fn plain(spec: LayerSpec) -> Layer {
    Layer { spec, params: Vec::new() }
}

impl NetworkModel {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(seed);
        let d = arch.input_dim();
        let mut trunk = Vec::new();
        let mut c_in = 1;
        for &(f, j) in &arch.conv {
            trunk.push(conv_layer(c_in, f, j, &mut rng));
            trunk.push(bn_layer(f));
            trunk.push(plain(LayerSpec::LeakyRelu { slope: LEAKY_SLOPE }));
            c_in = f;
        }
        trunk.push(plain(LayerSpec::Flatten));
        trunk.push(fc_layer(c_in * d * d, arch.out_dim(), 1.0, &mut rng));
        trunk.push(plain(LayerSpec::Sigmoid));
        let mut q_head = Vec::new();
        if arch.has_q_head() {
            let b = arch.n_rb;
            q_head.push(fc_layer(b * b, Q_HIDDEN, 2f64.sqrt(), &mut rng));
            q_head.push(plain(LayerSpec::LeakyRelu { slope: LEAKY_SLOPE }));
            q_head.push(fc_layer(Q_HIDDEN, Q_HIDDEN, 2f64.sqrt(), &mut rng));
            q_head.push(plain(LayerSpec::LeakyRelu { slope: LEAKY_SLOPE }));
            q_head.push(fc_layer(Q_HIDDEN, 2 * b, 1.0, &mut rng));
        }
        Ok(Self { arch, trunk, q_head, seed })
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(&self.q_head)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.trunk.iter_mut().chain(self.q_head.iter_mut())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.trunk.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.layers().map(|l| l.trainable().iter().map(|&i| l.params[i].len()).sum::<usize>()).sum()
    }

    /// Filter counts of the convolutional layers, in order.
    pub fn conv_filters(&self) -> Vec<usize> {
        self.trunk
            .iter()
            .filter_map(|l| match l.spec {
                LayerSpec::Conv2d { n_filters, .. } => Some(n_filters),
                _ => None,
            })
            .collect()
    }

    /// Builds the network input for a batch of virtual problems.
    pub fn prepare(&self, problems: &[&VirtualMisoProblem]) -> Result<NetInput> {
        let grams: Vec<_> = problems.iter().map(|p| model::weighted_gram(p)).collect();
        self.prepare_with(problems, &grams)
    }

    /// [`NetworkModel::prepare`] with precomputed weighted Grams.
    pub fn prepare_with(&self, problems: &[&VirtualMisoProblem], weighted_grams: &[CMat]) -> Result<NetInput> {
        let (m, b) = (self.arch.n_streams, self.arch.n_rb);
        let d = m * b;
        let n = problems.len();
        let scale = self.arch.total_power / self.arch.noise_var;
        let mut grams = Tensor::zeros(IxDyn(&[n, 1, d, d]));
        let mut p_mask = Array2::zeros((n, m));
        let mut lambda_mask = Array2::zeros((n, d));
        let mut stream_grams = self.arch.has_q_head().then(|| Array2::zeros((n * m, b * b)));
        for (s, problem) in problems.iter().enumerate() {
            if problem.n_streams() != m || problem.n_rb() != b {
                return Err(Error::DimensionMismatch(format!(
                    "network expects M={m} B={b}, problem has M={} B={}",
                    problem.n_streams(),
                    problem.n_rb()
                )));
            }
            let packed = model::pack_hermitian(&weighted_grams[s])?;
            for i in 0..d {
                for j in 0..d {
                    grams[[s, 0, i, j]] = packed.matrix[(i, j)] * scale;
                }
                if packed.matrix[(i, i)] > 0.0 {
                    lambda_mask[(s, i)] = 1.0;
                    p_mask[(s, i / b)] = 1.0;
                }
            }
            if let Some(sg) = stream_grams.as_mut() {
                for st in 0..m {
                    let packed = model::pack_hermitian(&model::stream_gram(problem, st))?;
                    for (k, v) in packed.matrix.transpose().iter().enumerate() {
                        sg[(s * m + st, k)] = v * scale;
                    }
                }
            }
        }
        Ok(NetInput { grams, p_mask, lambda_mask, stream_grams })
    }

    /// Records the forward pass on `tape`. `p` and `lambda` are normalized to
    /// sum to `P_T` over active entries.
    pub fn forward_tape(&self, tape: &mut Tape, input: &NetInput, mode: Mode) -> TapeForward {
        let n = input.batch_size();
        let (m, d) = (self.arch.n_streams, self.arch.input_dim());
        let mut params = Vec::new();
        let mut bn_stats = Vec::new();
        let x = tape.leaf(input.grams.clone());
        let out = run_layers(tape, &self.trunk, x, mode, &mut params, &mut bn_stats, n);
        let p_raw = tape.slice_cols(out, 0, m);
        let l_raw = tape.slice_cols(out, m, d);
        let pt = self.arch.total_power;
        let p = tape.masked_l1_normalize(p_raw, &input.p_mask, pt);
        let lambda = tape.masked_l1_normalize(l_raw, &input.lambda_mask, pt);
        let q = input.stream_grams.as_ref().map(|sg| {
            let x = tape.leaf(sg.clone().into_dyn());
            let raw = run_layers(tape, &self.q_head, x, mode, &mut params, &mut bn_stats, n * m);
            tape.reshape(raw, &[n, 2 * d])
        });
        TapeForward { p, lambda, q, params, bn_stats }
    }

    /// Inference for a batch of problems (eval-mode batchnorm).
    pub fn predict(&self, problems: &[&VirtualMisoProblem]) -> Result<Vec<KeyFeatures>> {
        Ok(self.predict_input(&self.prepare(problems)?))
    }

    /// Inference on an already prepared batch.
    pub fn predict_input(&self, input: &NetInput) -> Vec<KeyFeatures> {
        let (p, lambda, q) = super::infer::infer(self, input);
        let b = self.arch.n_rb;
        (0..input.batch_size())
            .map(|s| KeyFeatures {
                p: p.row(s).to_vec(),
                lambda: lambda.row(s).to_vec(),
                q: q.as_ref().map(|q| {
                    let raw: Vec<C64> = (0..self.arch.input_dim()).map(|i| c(q[(s, 2 * i)], q[(s, 2 * i + 1)])).collect();
                    q_convention(&raw, b)
                }),
                gamma: None,
            })
            .collect()
    }

    /// Inference for one problem.
    pub fn forward(&self, problem: &VirtualMisoProblem) -> Result<KeyFeatures> {
        Ok(self.predict(&[problem])?.remove(0))
    }

    /// Blends batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchStats>], batch_elems: &[usize]) {
        let mut it = stats.iter().zip(batch_elems);
        for layer in self.layers_mut() {
            if !matches!(layer.spec, LayerSpec::Batchnorm { .. }) {
                continue;
            }
            let Some((Some(s), &count)) = it.next() else { continue };
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            for (i, (&mean, &var)) in s.mean.iter().zip(&s.var).enumerate() {
                layer.params[2][i] = (1.0 - BN_MOMENTUM) * layer.params[2][i] + BN_MOMENTUM * mean;
                layer.params[3][i] = (1.0 - BN_MOMENTUM) * layer.params[3][i] + BN_MOMENTUM * var * unbias;
            }
        }
    }

    /// Elements per channel seen by each batchnorm for a batch of `n` samples.
    pub fn bn_counts(&self, n: usize) -> Vec<usize> {
        let d = self.arch.input_dim();
        self.layers()
            .filter(|l| matches!(l.spec, LayerSpec::Batchnorm { .. }))
            .map(|_| n * d * d)
            .collect()
    }

    pub fn to_json(&self) -> Value {
        let layers = |ls: &[Layer]| -> Value {
            ls.iter()
                .map(|l| json!({"spec": l.spec, "params": l.params.iter().map(tensor_to_json).collect::<Vec<_>>()}))
                .collect()
        };
        json!({
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "arch": self.arch,
            "trunk": layers(&self.trunk),
            "q_head": layers(&self.q_head),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let version = v.get("version").and_then(Value::as_str).unwrap_or("");
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version:?}")));
        }
        let arch: Architecture = serde_json::from_value(v["arch"].clone())?;
        arch.validate()?;
        let seed = v["seed"].as_u64().ok_or_else(|| Error::Format("checkpoint seed".into()))?;
        let layers = |key: &str| -> Result<Vec<Layer>> {
            let arr = v[key].as_array().ok_or_else(|| Error::Format(format!("checkpoint {key}")))?;
            arr.iter()
                .map(|l| {
                    let spec: LayerSpec = serde_json::from_value(l["spec"].clone())?;
                    let params = l["params"]
                        .as_array()
                        .ok_or_else(|| Error::Format("layer params".into()))?
                        .iter()
                        .map(tensor_from_json)
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Layer { spec, params })
                })
                .collect()
        };
        let model = Self { arch, trunk: layers("trunk")?, q_head: layers("q_head")?, seed };
        model.check_shapes()?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&serde_json::from_str(&text)?)
    }

    /// Verifies that layer specs chain and parameter shapes match them.
    pub fn check_shapes(&self) -> Result<()> {
        let d = self.arch.input_dim();
        let bad = |msg: String| Err(Error::Format(msg));
        let mut ch = 1usize;
        let mut flat: Option<usize> = None;
        for (i, l) in self.trunk.iter().enumerate() {
            let shapes: Vec<&[usize]> = l.params.iter().map(|p| p.shape()).collect();
            match l.spec {
                LayerSpec::Conv2d { in_channels, n_filters, kernel_size: j } => {
                    if in_channels != ch || shapes != [&[n_filters, in_channels, j, j][..]] {
                        return bad(format!("conv layer {i} shape"));
                    }
                    ch = n_filters;
                }
                LayerSpec::Batchnorm { channels } => {
                    if channels != ch || shapes.len() != 4 || shapes.iter().any(|s| *s != [channels]) {
                        return bad(format!("batchnorm layer {i} shape"));
                    }
                }
                LayerSpec::Flatten => flat = Some(ch * d * d),
                LayerSpec::FullyConnected { in_dim, out_dim } => {
                    if flat != Some(in_dim) || shapes != [&[out_dim, in_dim][..], &[out_dim][..]] {
                        return bad(format!("dense layer {i} shape"));
                    }
                    flat = Some(out_dim);
                }
                LayerSpec::LeakyRelu { .. } | LayerSpec::Sigmoid => {}
            }
        }
        if flat != Some(self.arch.out_dim()) {
            return bad("trunk output size".into());
        }
        if self.arch.has_q_head() != !self.q_head.is_empty() {
            return bad("combiner head presence".into());
        }
        Ok(())
    }
}

fn run_layers(
    tape: &mut Tape,
    layers: &[Layer],
    mut x: Var,
    mode: Mode,
    params: &mut Vec<Vec<Var>>,
    bn_stats: &mut Vec<Option<BatchStats>>,
    n: usize,
) -> Var {
    for layer in layers {
        let vars: Vec<Var> = layer.params.iter().map(|p| tape.leaf(p.clone())).collect();
        x = match layer.spec {
            LayerSpec::Conv2d { .. } => tape.conv2d(x, vars[0]),
            LayerSpec::Batchnorm { .. } => match mode {
                Mode::Train => {
                    let (y, stats) = tape.batch_norm_train(x, vars[0], vars[1]);
                    bn_stats.push(Some(stats));
                    y
                }
                Mode::Eval => {
                    bn_stats.push(None);
                    let mean = layer.params[2].as_slice().unwrap().to_vec();
                    let var = layer.params[3].as_slice().unwrap().to_vec();
                    tape.batch_norm_eval(x, vars[0], vars[1], &mean, &var)
                }
            },
            LayerSpec::LeakyRelu { slope } => tape.leaky_relu(x, slope),
            LayerSpec::Flatten => {
                let len = tape.value(x).len() / n;
                tape.reshape(x, &[n, len])
            }
            LayerSpec::FullyConnected { .. } => tape.linear(x, vars[0], vars[1]),
            LayerSpec::Sigmoid => tape.sigmoid(x),
        };
        params.push(vars);
    }
    x
}

/// Scales each stream's `B` combiners so the largest modulus is one and the
/// first nonzero entry is real and positive.
pub fn q_convention(q: &[C64], n_rb: usize) -> Vec<C64> {
    let mut out = vec![C64::new(0.0, 0.0); q.len()];
    for m in 0..q.len() / n_rb {
        let block = &q[m * n_rb..(m + 1) * n_rb];
        let peak = block.iter().fold(0.0f64, |a, z| a.max(z.norm()));
        let Some(first) = block.iter().find(|z| z.norm() > 0.0) else { continue };
        let rot = first.conj() / first.norm();
        for b in 0..n_rb {
            out[m * n_rb + b] = block[b] * rot / peak;
        }
    }
    out
}

pub fn tensor_to_json(t: &Tensor) -> Value {
    fn rec(data: &[f64], shape: &[usize]) -> Value {
        if shape.is_empty() {
            return json!(data[0]);
        }
        let stride: usize = shape[1..].iter().product();
        Value::Array((0..shape[0]).map(|i| rec(&data[i * stride..(i + 1) * stride], &shape[1..])).collect())
    }
    let std = t.as_standard_layout();
    rec(std.as_slice().unwrap(), t.shape())
}

pub fn tensor_from_json(v: &Value) -> Result<Tensor> {
    fn shape_of(v: &Value, shape: &mut Vec<usize>) {
        if let Value::Array(a) = v {
            shape.push(a.len());
            if let Some(first) = a.first() {
                shape_of(first, shape);
            }
        }
    }
    fn flatten(v: &Value, out: &mut Vec<f64>) -> Result<()> {
        match v {
            Value::Array(a) => a.iter().try_for_each(|x| flatten(x, out)),
            Value::Number(n) => {
                out.push(n.as_f64().ok_or_else(|| Error::Format("tensor entry".into()))?);
                Ok(())
            }
            _ => Err(Error::Format("tensor entries must be numbers".into())),
        }
    }
    let mut shape = Vec::new();
    shape_of(v, &mut shape);
    let mut data = Vec::new();
    flatten(v, &mut data)?;
    Tensor::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Format(format!("ragged tensor: {e}")))
}
