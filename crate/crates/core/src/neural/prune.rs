//! Structured pruning of convolutional filters by l2 norm, and the
//! convolutional operation count used to quantify it.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::network::{LayerSpec, NetworkModel};
use super::tape::Tensor;
use super::train::{self, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::model::SystemConfig;

/// Cumulative per-round removal counts for the leading conv layers, plus the
/// fine-tuning applied after every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub rounds: Vec<Vec<usize>>,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self { rounds: vec![vec![8, 4], vec![12, 6], vec![15, 7]], finetune_lr: 1e-4, finetune_epochs: 5 }
    }
}

impl PruneSchedule {
    /// Checks that the rounds are cumulative and leave every layer a filter.
    pub fn validate(&self, filters: &[usize]) -> Result<()> {
        let mut prev = vec![0; filters.len()];
        for round in &self.rounds {
            if round.len() > filters.len() {
                return Err(Error::InvalidConfig(format!("schedule targets {} conv layers, model has {}", round.len(), filters.len())));
            }
            for (i, &r) in round.iter().enumerate() {
                if r >= filters[i] {
                    return Err(Error::InvalidConfig(format!("cannot remove {r} of {} filters in conv layer {i}", filters[i])));
                }
                if r < prev[i] {
                    return Err(Error::InvalidConfig("schedule removals must be cumulative".into()));
                }
                prev[i] = r;
            }
        }
        if !(self.finetune_lr > 0.0) {
            return Err(Error::InvalidConfig("fine-tune learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// `sum_l F_l J_l^2 C_{l-1} C_l` over the conv layers of `specs`, where
/// `F_l = spatial` is the number of output positions of every layer.
pub fn conv_term(specs: &[LayerSpec], spatial: usize) -> u64 {
    specs
        .iter()
        .map(|s| match *s {
            LayerSpec::Conv2d { in_channels, n_filters, kernel_size } => {
                (spatial * kernel_size * kernel_size * in_channels * n_filters) as u64
            }
            _ => 0,
        })
        .sum()
}

/// Conv term of a model's trunk.
pub fn model_conv_term(model: &NetworkModel) -> u64 {
    let d = model.arch.input_dim();
    conv_term(&model.specs(), d * d)
}

/// Conv term predicted for filter counts `filters` with kernels `kernels`.
pub fn predicted_conv_term(filters: &[usize], kernels: &[usize], spatial: usize) -> u64 {
    let mut c_prev = 1;
    let mut total = 0u64;
    for (&f, &j) in filters.iter().zip(kernels) {
        total += (spatial * j * j * c_prev * f) as u64;
        c_prev = f;
    }
    total
}

fn select(t: &Tensor, axis: usize, keep: &[usize]) -> Tensor {
    t.select(Axis(axis), keep).as_standard_layout().into_owned()
}

/// Removes `remove[i]` filters of smallest l2 norm from conv layer `i`,
/// together with the matching batchnorm entries and the input channels of the
/// next conv layer (or the matching columns of the dense layer that follows
/// the last conv block).
pub fn prune_filters(model: &NetworkModel, remove: &[usize]) -> Result<NetworkModel> {
    let filters = model.conv_filters();
    if remove.len() > filters.len() || remove.iter().zip(&filters).any(|(&r, &f)| r >= f) {
        return Err(Error::InvalidConfig(format!("cannot remove {remove:?} filters from layers with {filters:?}")));
    }
    let mut out = model.clone();
    let conv_idx: Vec<usize> =
        out.trunk.iter().enumerate().filter(|(_, l)| matches!(l.spec, LayerSpec::Conv2d { .. })).map(|(i, _)| i).collect();
    let spatial = model.arch.input_dim().pow(2);
    for (ci, &r) in remove.iter().enumerate() {
        if r == 0 {
            continue;
        }
        let li = conv_idx[ci];
        let w = &out.trunk[li].params[0];
        let f = w.shape()[0];
        let mut norms: Vec<(f64, usize)> =
            (0..f).map(|i| (w.index_axis(Axis(0), i).iter().map(|x| x * x).sum::<f64>(), i)).collect();
        norms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut keep: Vec<usize> = norms[r..].iter().map(|x| x.1).collect();
        keep.sort_unstable();
        let kept = keep.len();
        let layer = &mut out.trunk[li];
        layer.params[0] = select(&layer.params[0], 0, &keep);
        if let LayerSpec::Conv2d { n_filters, .. } = &mut layer.spec {
            *n_filters = kept;
        }
        for next in li + 1..out.trunk.len() {
            let layer = &mut out.trunk[next];
            match &mut layer.spec {
                LayerSpec::Batchnorm { channels } => {
                    *channels = kept;
                    for p in layer.params.iter_mut() {
                        *p = select(p, 0, &keep);
                    }
                }
                LayerSpec::Conv2d { in_channels, .. } => {
                    *in_channels = kept;
                    layer.params[0] = select(&layer.params[0], 1, &keep);
                    break;
                }
                LayerSpec::FullyConnected { in_dim, .. } => {
                    let cols: Vec<usize> = keep.iter().flat_map(|&c| c * spatial..(c + 1) * spatial).collect();
                    *in_dim = cols.len();
                    layer.params[0] = select(&layer.params[0], 1, &cols);
                    break;
                }
                _ => {}
            }
        }
    }
    out.check_shapes()?;
    Ok(out)
}

/// One pruned-and-fine-tuned model per schedule round.
#[derive(Debug, Clone)]
pub struct PruneRound {
    pub removed: Vec<usize>,
    pub model: NetworkModel,
    pub report: TrainReport,
    pub conv_term: u64,
}

/// Applies the cumulative schedule to `model`, fine-tuning after each round.
pub fn prune_schedule(
    model: &NetworkModel,
    schedule: &PruneSchedule,
    train_set: &[Sample],
    val: &[Sample],
    cfg: &SystemConfig,
    tc: &TrainConfig,
) -> Result<Vec<PruneRound>> {
    schedule.validate(&model.conv_filters())?;
    let mut current = model.clone();
    let mut done = vec![0; schedule.rounds.first().map_or(0, Vec::len)];
    let mut rounds = Vec::new();
    for round in &schedule.rounds {
        done.resize(round.len(), 0);
        let delta: Vec<usize> = round.iter().zip(&done).map(|(a, b)| a - b).collect();
        let pruned = prune_filters(&current, &delta)?;
        let (tuned, report) = train::fine_tune(pruned, train_set, val, cfg, tc, schedule.finetune_lr, schedule.finetune_epochs)?;
        rounds.push(PruneRound { removed: round.clone(), conv_term: model_conv_term(&tuned), model: tuned.clone(), report });
        current = tuned;
        done = round.clone();
    }
    Ok(rounds)
}

/// Sets filter `index` of conv layer `conv` and its batchnorm shift to zero.
pub fn zero_filter(model: &mut NetworkModel, conv: usize, index: usize) {
    let li = model
        .trunk
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.spec, LayerSpec::Conv2d { .. }))
        .nth(conv)
        .map(|(i, _)| i)
        .expect("conv layer index");
    model.trunk[li].params[0].index_axis_mut(Axis(0), index).fill(0.0);
    if let Some(bn) = model.trunk.get_mut(li + 1) {
        if matches!(bn.spec, LayerSpec::Batchnorm { .. }) {
            bn.params[1][index] = 0.0;
            bn.params[2][index] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::complex_gaussian_matrix;
    use crate::model::VirtualMisoProblem;
    use crate::neural::network::Architecture;
    use crate::rng::rng_from;

    fn problems(n: usize) -> Vec<VirtualMisoProblem> {
        let mut rng = rng_from(3);
        (0..n).map(|_| VirtualMisoProblem::from_rows(complex_gaussian_matrix(&mut rng, 4, 8, 1.0))).collect()
    }

    #[test]
    fn toy_conv_term_counts() {
        let net = NetworkModel::new(Architecture::mimo(4, 1.0, 1.0), 0).unwrap();
        assert_eq!(model_conv_term(&net), 68_352);
        let pruned = prune_filters(&net, &[15, 7]).unwrap();
        assert_eq!(model_conv_term(&pruned), 1_760);
        assert_eq!(predicted_conv_term(&[1, 1, 4], &[7, 5, 3], 16), 1_760);
        assert_eq!(pruned.conv_filters(), vec![1, 1, 4]);
    }

    #[test]
    fn removing_nothing_keeps_outputs() {
        let net = NetworkModel::new(Architecture::mimo(4, 1.0, 1.0), 1).unwrap();
        let same = prune_filters(&net, &[0, 0]).unwrap();
        assert_eq!(same, net);
    }

    #[test]
    fn removing_a_zero_filter_keeps_outputs() {
        let mut net = NetworkModel::new(Architecture::mimo(4, 1.0, 1.0), 2).unwrap();
        zero_filter(&mut net, 0, 5);
        zero_filter(&mut net, 1, 2);
        let pruned = prune_filters(&net, &[1, 1]).unwrap();
        let ps = problems(6);
        for p in &ps {
            let (a, b) = (net.forward(p).unwrap(), pruned.forward(p).unwrap());
            for (x, y) in a.p.iter().chain(&a.lambda).zip(b.p.iter().chain(&b.lambda)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pruning_last_conv_adjusts_dense_layer() {
        let net = NetworkModel::new(Architecture::mimo(3, 1.0, 1.0), 4).unwrap();
        let pruned = prune_filters(&net, &[0, 0, 2]).unwrap();
        assert_eq!(pruned.conv_filters(), vec![16, 8, 2]);
        pruned.forward(&VirtualMisoProblem::from_rows(complex_gaussian_matrix(&mut rng_from(1), 3, 5, 1.0))).unwrap();
    }

    #[test]
    fn schedule_validation() {
        let s = PruneSchedule::default();
        assert!(s.validate(&[16, 8, 4]).is_ok());
        assert!(s.validate(&[15, 8, 4]).is_err());
        let bad = PruneSchedule { rounds: vec![vec![8, 4], vec![4, 4]], ..Default::default() };
        assert!(bad.validate(&[16, 8, 4]).is_err());
        let net = NetworkModel::new(Architecture::mimo(4, 1.0, 1.0), 0).unwrap();
        assert!(prune_filters(&net, &[16, 0]).is_err());
    }
}
