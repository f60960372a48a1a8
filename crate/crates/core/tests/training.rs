use dcfl::dataset::{generate_synthetic, train_test_split};
use dcfl::model::{init_params, sgd_step, Mlp, MlpConfig, Mode};
use dcfl::partition::ClientShard;
use dcfl::seed::rng_from_seed;
use dcfl::strategies::{client_update, LocalTraining, StrategyConfig, StrategyKind};

#[test]
fn separable_blobs_are_learned_by_plain_sgd() {
    let ds = generate_synthetic(3, 2, 150, 8.0, 1).unwrap();
    let (train, test) = train_test_split(&ds, 0.8, 1).unwrap();
    let cfg = MlpConfig::new(vec![2, 16, 3], 0.0).unwrap();
    let mlp = Mlp::new(cfg.clone()).unwrap();
    let mut params = init_params(&cfg, 3);

    let mut losses = Vec::new();
    for _ in 0..50 {
        let (loss, grad) = mlp
            .loss_and_grad(&params, train.features().view(), train.labels(), None, Mode::Eval)
            .unwrap();
        losses.push(loss);
        params = sgd_step(&params, &grad, 0.1).unwrap();
    }
    let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(decreasing >= 45, "loss fell on only {decreasing} of 49 steps");

    let preds = mlp.predict(&params, test.features().view()).unwrap();
    let correct = preds.iter().zip(test.labels()).filter(|(p, l)| p == l).count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "accuracy {acc}");
}

#[test]
fn local_epochs_reduce_the_client_loss() {
    let ds = generate_synthetic(4, 6, 100, 4.0, 2).unwrap();
    let cfg = MlpConfig::new(vec![6, 20, 4], 0.2).unwrap();
    let mlp = Mlp::new(cfg.clone()).unwrap();
    let global = init_params(&cfg, 4);
    let shard = ClientShard {
        client_id: 0,
        label_counts: ds.label_counts(),
        sample_indices: (0..ds.len()).collect(),
    };
    let strategy = StrategyConfig::new(StrategyKind::FedAvg);
    let loss_after = |epochs| {
        let training = LocalTraining {
            epochs,
            batch_size: 32,
            eta: 0.05,
        };
        let out = client_update(
            &mlp,
            &global,
            &shard,
            &ds,
            &strategy,
            &training,
            &mut rng_from_seed(1),
            &mut rng_from_seed(2),
        )
        .unwrap();
        mlp.loss_and_grad(&out.new_params, ds.features().view(), ds.labels(), None, Mode::Eval)
            .unwrap()
            .0
    };
    let (initial, _) = mlp
        .loss_and_grad(&global, ds.features().view(), ds.labels(), None, Mode::Eval)
        .unwrap();
    let one = loss_after(1);
    let three = loss_after(3);
    assert!(one < initial, "{one} >= {initial}");
    assert!(three < one, "{three} >= {one}");
}

#[test]
fn strong_proximal_term_limits_drift() {
    let ds = generate_synthetic(3, 4, 80, 5.0, 6).unwrap();
    let cfg = MlpConfig::new(vec![4, 12, 3], 0.0).unwrap();
    let mlp = Mlp::new(cfg.clone()).unwrap();
    let global = init_params(&cfg, 8);
    let shard = ClientShard {
        client_id: 0,
        label_counts: ds.label_counts(),
        sample_indices: (0..ds.len()).collect(),
    };
    let training = LocalTraining {
        epochs: 3,
        batch_size: 16,
        eta: 0.05,
    };
    let drift = |mu| {
        let mut s = StrategyConfig::new(StrategyKind::FedProx);
        s.mu = mu;
        client_update(&mlp, &global, &shard, &ds, &s, &training, &mut rng_from_seed(5), &mut rng_from_seed(6))
            .unwrap()
            .drift
    };
    let loose = drift(0.0);
    let tight = drift(10.0);
    assert!(tight < loose, "mu=10 drift {tight} vs mu=0 drift {loose}");
}
