//! Leading-order operation counts with unit constants.

use crate::model::SystemConfig;
use crate::neural::prune::conv_term;
use crate::neural::LayerSpec;

/// Learned pipeline: `K N_t N_r^2 + N_t M^2 + M^3 + K N_r^3`, plus the conv
/// term `sum_l F_l J_l^2 C_{l-1} C_l` with `F_l = spatial` and the dense layer
/// `F_{L-1} F_out`.
pub fn flops_lcp(cfg: &SystemConfig, specs: &[LayerSpec], spatial: usize) -> u64 {
    let (k, nt, nr) = (cfg.n_users as u64, cfg.n_tx as u64, cfg.n_rx as u64);
    let m = cfg.total_streams() as u64;
    let dense: u64 = specs
        .iter()
        .map(|s| match *s {
            LayerSpec::FullyConnected { in_dim, out_dim } => (in_dim * out_dim) as u64,
            _ => 0,
        })
        .sum();
    k * nt * nr * nr + nt * m * m + m * m * m + k * nr * nr * nr + conv_term(specs, spatial) + dense
}

/// WMMSE: `L_w (K^2 N_t N_r^2 + K^2 N_t^2 N_r + K N_t^3 + K^2 N_r^3)`.
pub fn flops_wmmse(cfg: &SystemConfig, n_iters: u64) -> u64 {
    let (k, nt, nr) = (cfg.n_users as u64, cfg.n_tx as u64, cfg.n_rx as u64);
    n_iters * (k * k * nt * nr * nr + k * k * nt * nt * nr + k * nt * nt * nt + k * k * nr * nr * nr)
}
