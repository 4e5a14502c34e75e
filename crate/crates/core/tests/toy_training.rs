use rflux::toy_train::{
    decreasing_refinements, disk_grid, field_rms_error, refinement_gaps, train, GaussianOracle,
    ToyDataset, ToyVelocityNet, TrainConfig,
};

#[test]
fn standard_gaussian_training_recovers_the_oracle_field() {
    let dataset = ToyDataset::gaussian([0.0, 0.0], 1.0).unwrap();
    let cfg = TrainConfig::default();
    let mut net = ToyVelocityNet::new(64, 16, cfg.seed).unwrap();
    let report = train(&dataset, &mut net, &cfg).unwrap();
    assert_eq!(report.losses.len(), cfg.steps);
    assert!(report.losses.iter().all(|l| l.is_finite()));

    let oracle = GaussianOracle {
        mu: [0.0, 0.0],
        sigma: 1.0,
    };
    let rms = field_rms_error(&net, &oracle, &disk_grid([0.0, 0.0], 0.1), &[0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
    assert!(rms < 0.2, "field rms {rms}");

    let gaps = refinement_gaps(&net, 1024, &[2, 4, 8, 16, 32], 128, 3).unwrap();
    assert!(decreasing_refinements(&gaps) >= 3, "{gaps:?}");
}
