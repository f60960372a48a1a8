use dcfl::dataset::{generate_synthetic, train_test_split};
use dcfl::eval::{
    improvement_report, read_results_csv, run_grid, write_results_csv, AxisValue, ExperimentData, GridOptions,
    SweepAxis, Variant,
};
use dcfl::model::MlpConfig;
use dcfl::orchestrator::RunConfig;
use dcfl::partition::{dirichlet_local_partition, label_entropy, Alpha, Federation, PartitionConfig};
use dcfl::selection::TargetKind;
use dcfl::strategies::{LocalTraining, StrategyKind};

fn mean_client_entropy(alpha: f64) -> f64 {
    let ds = generate_synthetic(10, 2, 300, 3.0, 0).unwrap();
    let mut total = 0.0;
    for seed in 0..5 {
        let cfg = PartitionConfig {
            num_clients: 30,
            alpha_local: Alpha::new(alpha).unwrap(),
            alpha_global: Alpha::INF,
            seed,
        };
        let fed = dirichlet_local_partition(&ds, &cfg).unwrap();
        total += fed.shards().iter().map(|s| label_entropy(&s.label_counts)).sum::<f64>() / 30.0;
    }
    total / 5.0
}

#[test]
fn client_label_entropy_grows_with_alpha() {
    let entropies: Vec<f64> = [0.05, 0.3, 2.0, 50.0].iter().map(|&a| mean_client_entropy(a)).collect();
    for w in entropies.windows(2) {
        assert!(w[0] < w[1], "{entropies:?}");
    }
    // 10 classes: the homogeneous limit approaches ln 10
    assert!(entropies[3] > 0.9 * 10f64.ln());
}

#[test]
fn federation_survives_a_jsonl_round_trip() {
    let ds = generate_synthetic(3, 2, 50, 3.0, 1).unwrap();
    let cfg = PartitionConfig {
        num_clients: 7,
        alpha_local: Alpha::new(0.5).unwrap(),
        alpha_global: Alpha::INF,
        seed: 3,
    };
    let fed = dirichlet_local_partition(&ds, &cfg).unwrap();
    let mut buf = Vec::new();
    fed.write_jsonl(&mut buf).unwrap();
    let back = Federation::read_jsonl(&buf[..], &ds).unwrap();
    assert_eq!(back, fed);
}

#[test]
fn small_grid_produces_a_consistent_report() {
    let ds = generate_synthetic(3, 4, 120, 5.0, 2).unwrap();
    let (train, test) = train_test_split(&ds, 0.8, 2).unwrap();
    let data = ExperimentData {
        name: "blobs".into(),
        train,
        test,
    };
    let mut base = RunConfig::with_defaults(MlpConfig::new(vec![4, 8, 3], 0.0).unwrap());
    base.rounds = 3;
    base.repeats = 2;
    base.partition.num_clients = 12;
    base.selection.m = 3;
    base.selection.m_dc = 2;
    base.training = LocalTraining {
        epochs: 1,
        batch_size: 16,
        eta: 0.05,
    };
    let variants = [
        Variant::baseline(StrategyKind::FedAvg),
        Variant::dc(StrategyKind::FedAvg, TargetKind::Real),
    ];
    let values = [AxisValue(0.2), AxisValue(f64::INFINITY)];
    let cells = run_grid(&base, &data, SweepAxis::AlphaLocal, &values, &variants, GridOptions::default()).unwrap();
    assert_eq!(cells.len(), 4);
    assert!(cells.iter().all(|c| c.repeats == 2 && c.complete()));

    let again = run_grid(&base, &data, SweepAxis::AlphaLocal, &values, &variants, GridOptions::default()).unwrap();
    assert_eq!(cells, again);

    let mut csv = Vec::new();
    write_results_csv(&mut csv, &cells).unwrap();
    let rows = read_results_csv(&csv[..]).unwrap();
    let deltas = improvement_report(&rows).unwrap();
    assert_eq!(deltas.len(), 2);
    assert_eq!(deltas[1].alpha, "inf");
    let expected = cells[1].mean_f1 - cells[0].mean_f1;
    assert!((deltas[0].delta_mean - expected).abs() < 1e-12);

    let err = run_grid(&base, &data, SweepAxis::AlphaLocal, &[], &variants, GridOptions::default()).unwrap_err();
    assert!(err.to_string().contains("sweep.values"));
}
