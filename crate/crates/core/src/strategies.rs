//! Server aggregation rules and the client-side local update.

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{sgd_step, Mlp, Mode, ModelParams, Prox};
use crate::partition::ClientShard;
use crate::seed::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    FedAvg,
    FedAtt,
    FedProx,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "FedAvg",
            StrategyKind::FedAtt => "FedAtt",
            StrategyKind::FedProx => "FedProx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// FedProx proximal coefficient.
    pub mu: f64,
    /// FedAtt server step size.
    pub epsilon: f64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            mu: 0.01,
            epsilon: 1.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.is_nan() || self.mu < 0.0 {
            return Err(Error::config("strategy.mu", "must be >= 0"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config("strategy.epsilon", "must be > 0"));
        }
        Ok(())
    }
}

/// Minibatch SGD settings of the local update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdateResult {
    pub client_id: usize,
    pub new_params: ModelParams,
    pub num_samples: usize,
    /// Mean minibatch loss over the last local epoch; `None` when no epoch ran.
    pub mean_loss: Option<f64>,
    /// `|w_k - w_t|_2` after local training.
    pub drift: f64,
}

fn sorted_updates(updates: &[ClientUpdateResult]) -> Vec<&ClientUpdateResult> {
    let mut sorted: Vec<&ClientUpdateResult> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    sorted
}

fn check_shapes(global: &ModelParams, updates: &[ClientUpdateResult]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Empty("aggregation needs at least one client update".into()));
    }
    if let Some(u) = updates.iter().find(|u| !u.new_params.same_shape(global)) {
        return Err(Error::Shape(format!("update of client {} has a foreign layout", u.client_id)));
    }
    Ok(())
}

/// Sample-weighted mean of the client models.
pub fn aggregate_fedavg(global: &ModelParams, updates: &[ClientUpdateResult]) -> Result<ModelParams> {
    check_shapes(global, updates)?;
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::Empty("client updates report zero samples in total".into()));
    }
    let mut out: Option<Vec<f64>> = None;
    for u in sorted_updates(updates) {
        if u.num_samples == 0 {
            continue;
        }
        let weight = u.num_samples as f64 / total as f64;
        match out.as_mut() {
            None => out = Some(u.new_params.flat().iter().map(|v| weight * v).collect()),
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(u.new_params.flat()) {
                    *a += weight * v;
                }
            }
        }
    }
    ModelParams::from_flat(global.shapes(), out.expect("total > 0 implies a weighted update"))
}

/// FedProx changes only the local objective; the server step is FedAvg.
pub fn aggregate_fedprox(global: &ModelParams, updates: &[ClientUpdateResult]) -> Result<ModelParams> {
    aggregate_fedavg(global, updates)
}

/// Layer-wise attentive aggregation. For each layer the attention over
/// clients is `softmax(|w_t - w_k|_2)`, and the server moves by
/// `epsilon * sum_k a_k (w_t - w_k)` away from `w_t`.
pub fn aggregate_fedatt(global: &ModelParams, updates: &[ClientUpdateResult], epsilon: f64) -> Result<ModelParams> {
    check_shapes(global, updates)?;
    let sorted = sorted_updates(updates);
    let mut out = global.clone();
    for range in global.layer_ranges() {
        let w_t = &global.flat()[range.clone()];
        let scores: Vec<f64> = sorted
            .iter()
            .map(|u| {
                u.new_params.flat()[range.clone()]
                    .iter()
                    .zip(w_t)
                    .map(|(k, t)| (t - k) * (t - k))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let attention = softmax(&scores);
        let mut step = vec![0.0; range.len()];
        for (u, a) in sorted.iter().zip(&attention) {
            for ((s, t), k) in step.iter_mut().zip(w_t).zip(&u.new_params.flat()[range.clone()]) {
                *s += a * (t - k);
            }
        }
        for (o, s) in out.flat_mut()[range].iter_mut().zip(&step) {
            *o -= epsilon * s;
        }
    }
    Ok(out)
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn aggregate(strategy: &StrategyConfig, global: &ModelParams, updates: &[ClientUpdateResult]) -> Result<ModelParams> {
    match strategy.kind {
        StrategyKind::FedAvg => aggregate_fedavg(global, updates),
        StrategyKind::FedAtt => aggregate_fedatt(global, updates, strategy.epsilon),
        StrategyKind::FedProx => aggregate_fedprox(global, updates),
    }
}

/// Local training of one client, starting from the global model. Each
/// epoch reshuffles the shard and runs minibatch SGD; a shard smaller than
/// the batch size trains on one partial batch. FedProx anchors the proximal
/// term at the received global model.
#[allow(clippy::too_many_arguments)]
pub fn client_update(
    mlp: &Mlp,
    global: &ModelParams,
    shard: &ClientShard,
    data: &Dataset,
    strategy: &StrategyConfig,
    training: &LocalTraining,
    shuffle_rng: &mut SimRng,
    dropout_rng: &mut SimRng,
) -> Result<ClientUpdateResult> {
    if shard.is_empty() {
        return Err(Error::Empty(format!("client {} holds no samples", shard.client_id)));
    }
    if training.batch_size == 0 {
        return Err(Error::config("run.batch_size", "must be at least 1"));
    }
    let prox = match strategy.kind {
        StrategyKind::FedProx => Some(Prox {
            mu: strategy.mu,
            anchor: global,
        }),
        _ => None,
    };
    let mut params = global.clone();
    let mut order = shard.sample_indices.clone();
    let mut mean_loss = None;
    for _ in 0..training.epochs {
        order.shuffle(shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(training.batch_size) {
            let x = data.features().select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let (loss, grad) = mlp
                .loss_and_grad(&params, x.view(), &y, prox, Mode::Train(dropout_rng))
                .map_err(|e| e.at_client(shard.client_id))?;
            params = sgd_step(&params, &grad, training.eta).map_err(|e| e.at_client(shard.client_id))?;
            epoch_loss += loss;
            batches += 1;
        }
        mean_loss = Some(epoch_loss / batches as f64);
    }
    let drift = params.l2_distance(global);
    Ok(ClientUpdateResult {
        client_id: shard.client_id,
        new_params: params,
        num_samples: shard.len(),
        mean_loss,
        drift,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::LayerShape;

    fn scalar_shapes() -> Vec<LayerShape> {
        // one layer holding a single bias-free weight is not expressible;
        // a 1x1 layer carries a weight and a bias
        vec![LayerShape { rows: 1, cols: 1 }]
    }

    fn update(id: usize, n: usize, values: &[f64], shapes: &[LayerShape]) -> ClientUpdateResult {
        ClientUpdateResult {
            client_id: id,
            new_params: ModelParams::from_flat(shapes, values.to_vec()).unwrap(),
            num_samples: n,
            mean_loss: None,
            drift: 0.0,
        }
    }

    #[test]
    fn fedavg_equal_weights() {
        let s = scalar_shapes();
        let g = ModelParams::zeros(&s);
        let out = aggregate_fedavg(&g, &[update(0, 5, &[1.0, 2.0], &s), update(1, 5, &[3.0, 6.0], &s)]).unwrap();
        assert_eq!(out.flat(), &[2.0, 4.0]);
    }

    #[test]
    fn fedavg_single_update_is_identity() {
        let s = scalar_shapes();
        let g = ModelParams::zeros(&s);
        let u = update(3, 7, &[0.123456789, -9.87654321], &s);
        assert_eq!(aggregate_fedavg(&g, std::slice::from_ref(&u)).unwrap(), u.new_params);
    }

    #[test]
    fn fedavg_weighted_example() {
        let s = scalar_shapes();
        let g = ModelParams::zeros(&s);
        let ups = [
            update(0, 1, &[10.0, 0.0], &s),
            update(1, 2, &[40.0, 0.0], &s),
            update(2, 3, &[100.0, 0.0], &s),
        ];
        let out = aggregate_fedavg(&g, &ups).unwrap();
        assert!((out.flat()[0] - 65.0).abs() < 1e-12);
        assert_eq!(aggregate_fedprox(&g, &ups).unwrap(), out);
    }

    #[test]
    fn fedavg_zero_samples_rejected() {
        let s = scalar_shapes();
        let g = ModelParams::zeros(&s);
        assert!(aggregate_fedavg(&g, &[update(0, 0, &[1.0, 1.0], &s)]).is_err());
        assert!(aggregate_fedavg(&g, &[]).is_err());
    }

    #[test]
    fn fedavg_order_independent() {
        let s = scalar_shapes();
        let g = ModelParams::zeros(&s);
        let a = update(0, 3, &[0.1, 0.7], &s);
        let b = update(1, 5, &[0.3, -0.2], &s);
        let c = update(2, 11, &[1.9, 0.05], &s);
        let x = aggregate_fedavg(&g, &[a.clone(), b.clone(), c.clone()]).unwrap();
        let y = aggregate_fedavg(&g, &[c, a, b]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn fedatt_fixed_point() {
        let s = vec![LayerShape { rows: 2, cols: 3 }, LayerShape { rows: 2, cols: 2 }];
        let g = ModelParams::from_flat(&s, (0..14).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
        let ups: Vec<_> = (0..4).map(|i| update(i, 10, g.flat(), &s)).collect();
        assert_eq!(aggregate_fedatt(&g, &ups, 1.2).unwrap(), g);
    }

    #[test]
    fn fedatt_single_client_full_step() {
        let s = scalar_shapes();
        let g = ModelParams::from_flat(&s, vec![0.5, -1.0]).unwrap();
        let u = update(0, 3, &[2.0, 4.0], &s);
        let out = aggregate_fedatt(&g, &[u], 1.0).unwrap();
        assert!((out.flat()[0] - 2.0).abs() < 1e-15);
        assert!((out.flat()[1] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn fedatt_two_client_example() {
        // a 1x1 layer with zero bias everywhere: only the weight moves
        let s = scalar_shapes();
        let g = ModelParams::zeros(&s);
        let ups = [update(0, 1, &[1.0, 0.0], &s), update(1, 1, &[3.0, 0.0], &s)];
        let out = aggregate_fedatt(&g, &ups, 1.0).unwrap();
        let a0 = 1.0 / (1.0 + 2f64.exp());
        let expected = a0 * 1.0 + (1.0 - a0) * 3.0;
        assert!((out.flat()[0] - expected).abs() < 1e-12);
        assert!((out.flat()[0] - 2.7616).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn fedavg_stays_in_client_hull(
            vals in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 6), 1..6),
            ns in proptest::collection::vec(1usize..100, 6),
        ) {
            let s = vec![LayerShape { rows: 2, cols: 2 }];
            let g = ModelParams::zeros(&s);
            let ups: Vec<_> = vals.iter().enumerate().map(|(i, v)| update(i, ns[i], v, &s)).collect();
            let out = aggregate_fedavg(&g, &ups).unwrap();
            for j in 0..6 {
                let lo = vals.iter().map(|v| v[j]).fold(f64::INFINITY, f64::min);
                let hi = vals.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.flat()[j] >= lo - 1e-12 && out.flat()[j] <= hi + 1e-12);
            }
            let total: usize = ns[..vals.len()].iter().sum();
            let wsum: f64 = ns[..vals.len()].iter().map(|&n| n as f64 / total as f64).sum();
            prop_assert!((wsum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn attention_normalized(scores in proptest::collection::vec(0.0f64..500.0, 1..20)) {
            let a = softmax(&scores);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.iter().all(|&x| x >= 0.0));
        }
    }
}
