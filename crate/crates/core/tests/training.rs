use lcp_core::channel::ChannelParams;
use lcp_core::experiment::{run, ExperimentSpec, Method, Scenario};
use lcp_core::model::SystemConfig;
use lcp_core::neural::dataset::{build_dataset, DatasetSpec};
use lcp_core::neural::loss::loss_supervised;
use lcp_core::neural::train::{train, TrainConfig};
use lcp_core::neural::{Architecture, NetworkModel};

#[test]
fn supervised_phase_overfits_a_small_set() {
    let cfg = SystemConfig::uniform(8, 2, 3, 1, 0.0);
    let samples = build_dataset(&DatasetSpec::new(ChannelParams::unit(), cfg.clone(), 32, 5)).unwrap();
    let tc = TrainConfig {
        lr_supervised: 3e-3,
        decay_every: 1000,
        batch_size: 32,
        n_train: 32,
        n_val: 32,
        epochs_supervised: 600,
        epochs_unsupervised: 0,
        ..TrainConfig::default()
    };
    let net = NetworkModel::new(Architecture::mimo(3, cfg.total_power, cfg.noise_var), 1).unwrap();
    let (model, report) = train(net, &samples, &samples, &cfg, &tc).unwrap();
    let problems: Vec<_> = samples.iter().map(|s| &s.problem).collect();
    let pred = model.predict(&problems).unwrap();
    let mse = pred.iter().zip(&samples).map(|(p, s)| loss_supervised(p, &s.labels)).sum::<f64>() / samples.len() as f64;
    assert!(mse < 1e-4, "supervised mse {mse}");
    assert!(report.curve.len() >= 600);
}

#[test]
fn trained_checkpoint_runs_through_the_runner() {
    let cfg = SystemConfig::uniform(8, 2, 3, 1, 0.0);
    let samples = build_dataset(&DatasetSpec::new(ChannelParams::unit(), cfg.clone(), 96, 6)).unwrap();
    let tc = TrainConfig { batch_size: 32, n_train: 64, n_val: 32, epochs_supervised: 3, epochs_unsupervised: 3, ..TrainConfig::default() };
    let net = NetworkModel::new(Architecture::mimo(3, cfg.total_power, cfg.noise_var), 2).unwrap();
    let (model, _) = train(net, &samples[..64], &samples[64..], &cfg, &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    assert_eq!(NetworkModel::load(&path).unwrap(), model);
    let mut spec = ExperimentSpec::new("net", Scenario::SweepSnr, cfg, 8, 3, vec![Method::Wmmse, Method::LcpNet, Method::Ezf]);
    spec.snr_db = vec![0.0];
    spec.checkpoint = Some(path.to_str().unwrap().into());
    let rows = run(&spec).unwrap().rows;
    assert_eq!(rows.len(), 3);
    let net_row = rows.iter().find(|r| r.method == "lcp_net").unwrap();
    assert!(net_row.ratio.unwrap() > 0.5 && net_row.ratio.unwrap() <= 1.05);
}
