//! The server loop: per round select clients, train them locally,
//! aggregate, and score the global model on the test set.

use std::io::Write;

use ndarray::s;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::weighted_f1;
use crate::labeldist::{target_balanced, target_real, LabelDistribution};
use crate::model::{init_params, Mlp, MlpConfig, ModelParams};
use crate::partition::{Alpha, Federation, PartitionConfig};
use crate::selection::{
    exhaustive_dc_select, greedy_dc_select, no_augmentation, random_augment, random_select, SelectionConfig,
    SelectionMode, SelectionOutcome, SelectionStep, StopReason, TargetKind,
};
use crate::seed::{derive_rng, derive_seed};
use crate::strategies::{aggregate, client_update, ClientUpdateResult, LocalTraining, StrategyConfig, StrategyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rounds: usize,
    pub training: LocalTraining,
    pub strategy: StrategyConfig,
    pub selection: SelectionConfig,
    pub model: MlpConfig,
    pub partition: PartitionConfig,
    pub repeats: usize,
    pub master_seed: u64,
    /// Worker threads for client updates; 1 runs them inline.
    pub jobs: usize,
}

impl RunConfig {
    /// T=100, M=100, m=10, m_DC=5, E=3, alphas 2, R=3; B=32, eta=0.05.
    pub fn with_defaults(model: MlpConfig) -> Self {
        Self {
            rounds: 100,
            training: LocalTraining {
                epochs: 3,
                batch_size: 32,
                eta: 0.05,
            },
            strategy: StrategyConfig::new(StrategyKind::FedAvg),
            selection: SelectionConfig {
                m: 10,
                m_dc: 5,
                target: TargetKind::Balanced,
                mode: SelectionMode::Greedy,
                secure_agg: true,
            },
            model,
            partition: PartitionConfig {
                num_clients: 100,
                alpha_local: Alpha::new(2.0).expect("positive"),
                alpha_global: Alpha::new(2.0).expect("positive"),
                seed: 0,
            },
            repeats: 3,
            master_seed: 0,
            jobs: 1,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.partition.num_clients
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("run.rounds", "must be at least 1"));
        }
        if self.repeats == 0 {
            return Err(Error::config("run.repeats", "must be at least 1"));
        }
        if self.jobs == 0 {
            return Err(Error::config("run.jobs", "must be at least 1"));
        }
        if self.training.batch_size == 0 {
            return Err(Error::config("run.batch_size", "must be at least 1"));
        }
        if self.training.eta.is_nan() || self.training.eta <= 0.0 {
            return Err(Error::config("run.eta", "must be positive"));
        }
        self.partition.validate()?;
        self.selection.validate()?;
        self.strategy.validate()?;
        self.model.validate()?;
        let needed = self.selection.m + self.selection.effective_m_dc();
        if needed > self.num_clients() {
            return Err(Error::config(
                "selection.m_dc",
                format!("m + m_dc = {needed} exceeds the {} clients", self.num_clients()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientLoss {
    pub client: usize,
    pub samples: usize,
    /// Mean minibatch loss of the last local epoch; null for empty shards.
    pub loss: Option<f64>,
    pub drift: Option<f64>,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub base_clients: Vec<usize>,
    pub added_clients: Vec<usize>,
    pub initial_distance: Option<f64>,
    pub achieved_distance: Option<f64>,
    pub stop: StopReason,
    pub trace: Vec<SelectionStep>,
    pub client_losses: Vec<ClientLoss>,
    pub weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub record: String,
    pub rounds: usize,
    /// Score of the untrained initial model.
    pub initial_f1: f64,
    /// Headline number: score after the last round.
    pub final_f1: f64,
    pub best_f1: f64,
    pub best_round: usize,
    pub mean_active_clients: f64,
    pub mean_achieved_distance: Option<f64>,
    pub client_sample_totals: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub logs: Vec<RoundLog>,
    pub summary: RunSummary,
    pub final_params: ModelParams,
}

impl RunOutput {
    /// JSON lines: one record per round, then the summary record.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| Error::io("<run log>", e);
        for log in &self.logs {
            writeln!(out, "{}", serde_json::to_string(log).expect("round logs serialize")).map_err(io)?;
        }
        writeln!(out, "{}", serde_json::to_string(&self.summary).expect("summary serializes")).map_err(io)?;
        Ok(())
    }
}

/// A prepared run: validated configuration, target and worker pool.
pub struct Simulation<'a> {
    cfg: &'a RunConfig,
    mlp: Mlp,
    federation: &'a Federation,
    train: &'a Dataset,
    test: &'a Dataset,
    target: Option<LabelDistribution>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: &'a RunConfig, federation: &'a Federation, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if test.is_empty() {
            return Err(Error::Empty("test set is empty".into()));
        }
        if federation.num_clients() != cfg.num_clients() {
            return Err(Error::Consistency(format!(
                "federation has {} clients, configuration expects {}",
                federation.num_clients(),
                cfg.num_clients()
            )));
        }
        if federation.num_classes() != train.num_classes() || test.num_classes() != train.num_classes() {
            return Err(Error::Consistency("class count differs between federation, train and test".into()));
        }
        if cfg.model.input_dim() != train.feature_dim() || cfg.model.num_classes() != train.num_classes() {
            return Err(Error::config(
                "model.layer_sizes",
                format!(
                    "network {:?} does not fit data with {} features and {} classes",
                    cfg.model.layer_sizes,
                    train.feature_dim(),
                    train.num_classes()
                ),
            ));
        }
        let mlp = Mlp::new(cfg.model.clone())?;
        let mask_seed = cfg.selection.secure_agg.then(|| derive_seed(cfg.master_seed, 0, "masks/target"));
        let target = match cfg.selection.target {
            TargetKind::Real => Some(target_real(federation, mask_seed)?),
            TargetKind::Balanced => Some(target_balanced(train.num_classes())?),
            TargetKind::None => None,
        };
        let pool = if cfg.jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.jobs)
                    .build()
                    .map_err(|e| Error::config("run.jobs", e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            cfg,
            mlp,
            federation,
            train,
            test,
            target,
            pool,
        })
    }

    pub fn target(&self) -> Option<&LabelDistribution> {
        self.target.as_ref()
    }

    pub fn initial_params(&self) -> ModelParams {
        init_params(&self.cfg.model, derive_seed(self.cfg.master_seed, 0, "init"))
    }

    /// Base draw plus augmentation for round `round` (1-based).
    pub fn select(&self, round: usize) -> Result<SelectionOutcome> {
        let cfg = self.cfg;
        let seed = cfg.master_seed;
        let r = round as u64;
        let base = random_select(&self.federation.client_ids(), cfg.selection.m, &mut derive_rng(seed, r, "select"))?;
        let m_dc = cfg.selection.m_dc;
        match cfg.selection.mode {
            SelectionMode::None => no_augmentation(&base, self.federation, self.target()),
            SelectionMode::Greedy => {
                let target = self.target().expect("validated: DC modes carry a target");
                let masks = cfg.selection.secure_agg.then(|| derive_seed(seed, r, "masks"));
                greedy_dc_select(&base, self.federation, target, m_dc, masks)
            }
            SelectionMode::Exhaustive => {
                let target = self.target().expect("validated: DC modes carry a target");
                exhaustive_dc_select(&base, self.federation, target, m_dc)
            }
            SelectionMode::RandomAugment => {
                random_augment(&base, self.federation, m_dc, self.target(), &mut derive_rng(seed, r, "augment"))
            }
        }
    }

    /// Local updates of every non-empty active client, sorted by client id.
    pub fn train_round(&self, round: usize, global: &ModelParams, active: &[usize]) -> Result<Vec<ClientUpdateResult>> {
        let mut trainable: Vec<usize> = active.iter().copied().filter(|&c| !self.federation.shard(c).is_empty()).collect();
        trainable.sort_unstable();
        let seed = self.cfg.master_seed;
        let r = round as u64;
        let work = |&client: &usize| -> Result<ClientUpdateResult> {
            let mut shuffle = derive_rng(seed, r, &format!("shuffle/{client}"));
            let mut dropout = derive_rng(seed, r, &format!("dropout/{client}"));
            client_update(
                &self.mlp,
                global,
                self.federation.shard(client),
                self.train,
                &self.cfg.strategy,
                &self.cfg.training,
                &mut shuffle,
                &mut dropout,
            )
            .map_err(|e| e.in_round(round))
        };
        match &self.pool {
            Some(pool) => pool.install(|| trainable.par_iter().map(work).collect()),
            None => trainable.iter().map(work).collect(),
        }
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<f64> {
        const CHUNK: usize = 4096;
        let features = self.test.features();
        let mut predictions = Vec::with_capacity(self.test.len());
        let mut start = 0;
        while start < self.test.len() {
            let end = (start + CHUNK).min(self.test.len());
            predictions.extend(self.mlp.predict(params, features.slice(s![start..end, ..]))?);
            start = end;
        }
        weighted_f1(&predictions, self.test.labels(), self.test.num_classes())
    }

    pub fn run(&self) -> Result<RunOutput> {
        let mut global = self.initial_params();
        let initial_f1 = self.evaluate(&global)?;
        let mut logs = Vec::with_capacity(self.cfg.rounds);
        for round in 1..=self.cfg.rounds {
            let selection = self.select(round)?;
            let active = selection.active_set();
            let updates = self.train_round(round, &global, &active)?;
            if !updates.is_empty() {
                global = aggregate(&self.cfg.strategy, &global, &updates).map_err(|e| e.in_round(round))?;
                if !global.is_finite() {
                    return Err(Error::Divergence {
                        round: Some(round),
                        client: None,
                    });
                }
            }
            let f1 = self.evaluate(&global)?;
            let mut client_losses: Vec<ClientLoss> = active
                .iter()
                .map(|&c| {
                    let u = updates.iter().find(|u| u.client_id == c);
                    ClientLoss {
                        client: c,
                        samples: self.federation.shard(c).len(),
                        loss: u.and_then(|u| u.mean_loss),
                        drift: u.map(|u| u.drift),
                    }
                })
                .collect();
            client_losses.sort_by_key(|c| c.client);
            logs.push(RoundLog {
                round,
                base_clients: selection.base,
                added_clients: selection.added,
                initial_distance: selection.initial_distance,
                achieved_distance: selection.achieved_distance,
                stop: selection.stop,
                trace: selection.trace,
                client_losses,
                weighted_f1: f1,
            });
        }
        let summary = summarize(&logs, initial_f1, self.federation);
        Ok(RunOutput {
            logs,
            summary,
            final_params: global,
        })
    }
}

fn summarize(logs: &[RoundLog], initial_f1: f64, federation: &Federation) -> RunSummary {
    let last = logs.last().expect("at least one round");
    let (best_round, best_f1) = logs
        .iter()
        .map(|l| (l.round, l.weighted_f1))
        .fold((0, initial_f1), |acc, (r, f)| if f > acc.1 { (r, f) } else { acc });
    let active: usize = logs.iter().map(|l| l.base_clients.len() + l.added_clients.len()).sum();
    let distances: Vec<f64> = logs.iter().filter_map(|l| l.achieved_distance).collect();
    RunSummary {
        record: "summary".into(),
        rounds: logs.len(),
        initial_f1,
        final_f1: last.weighted_f1,
        best_f1,
        best_round,
        mean_active_clients: active as f64 / logs.len() as f64,
        mean_achieved_distance: (!distances.is_empty()).then(|| distances.iter().sum::<f64>() / distances.len() as f64),
        client_sample_totals: federation.client_totals(),
    }
}

/// Runs the configured number of rounds on a prepared federation.
pub fn run_federated(cfg: &RunConfig, federation: &Federation, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    Simulation::new(cfg, federation, train, test)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, train_test_split};
    use crate::partition::{dirichlet_local_partition, ClientShard};

    fn data() -> (Dataset, Dataset) {
        let ds = generate_synthetic(3, 4, 200, 6.0, 5).unwrap();
        train_test_split(&ds, 0.8, 5).unwrap()
    }

    fn config(num_clients: usize) -> RunConfig {
        let mut cfg = RunConfig::with_defaults(MlpConfig::new(vec![4, 16, 3], 0.0).unwrap());
        cfg.rounds = 5;
        cfg.partition.num_clients = num_clients;
        cfg.partition.alpha_local = Alpha::new(0.3).unwrap();
        cfg.partition.seed = 9;
        cfg.selection.m = 3;
        cfg.selection.m_dc = 2;
        cfg.selection.target = TargetKind::Real;
        cfg.training = LocalTraining {
            epochs: 1,
            batch_size: 16,
            eta: 0.05,
        };
        cfg.master_seed = 77;
        cfg
    }

    #[test]
    fn one_round_one_client_matches_a_direct_update() {
        let (train, test) = data();
        let mut cfg = config(1);
        cfg.rounds = 1;
        cfg.selection.m = 1;
        cfg.selection.mode = SelectionMode::None;
        cfg.selection.target = TargetKind::None;
        let shard = ClientShard {
            client_id: 0,
            label_counts: train.label_counts(),
            sample_indices: (0..train.len()).collect(),
        };
        let fed = Federation::new(vec![shard.clone()], &train).unwrap();
        let out = run_federated(&cfg, &fed, &train, &test).unwrap();

        let mlp = Mlp::new(cfg.model.clone()).unwrap();
        let init = init_params(&cfg.model, derive_seed(cfg.master_seed, 0, "init"));
        let direct = client_update(
            &mlp,
            &init,
            &shard,
            &train,
            &cfg.strategy,
            &cfg.training,
            &mut derive_rng(cfg.master_seed, 1, "shuffle/0"),
            &mut derive_rng(cfg.master_seed, 1, "dropout/0"),
        )
        .unwrap();
        assert_eq!(out.final_params.flat(), direct.new_params.flat());
    }

    #[test]
    fn greedy_with_no_budget_equals_the_baseline() {
        let (train, test) = data();
        let mut cfg = config(8);
        let fed = dirichlet_local_partition(&train, &cfg.partition).unwrap();
        cfg.selection.mode = SelectionMode::None;
        let base = run_federated(&cfg, &fed, &train, &test).unwrap();
        cfg.selection.mode = SelectionMode::Greedy;
        cfg.selection.m_dc = 0;
        let dc = run_federated(&cfg, &fed, &train, &test).unwrap();
        assert_eq!(base.final_params.flat(), dc.final_params.flat());
        for (a, b) in base.logs.iter().zip(&dc.logs) {
            assert_eq!(a.base_clients, b.base_clients);
            assert!(b.added_clients.is_empty());
            assert_eq!(a.weighted_f1, b.weighted_f1);
        }
    }

    #[test]
    fn runs_are_reproducible_and_thread_count_invariant() {
        let (train, test) = data();
        let mut cfg = config(8);
        let fed = dirichlet_local_partition(&train, &cfg.partition).unwrap();
        let a = run_federated(&cfg, &fed, &train, &test).unwrap();
        let b = run_federated(&cfg, &fed, &train, &test).unwrap();
        cfg.jobs = 3;
        let c = run_federated(&cfg, &fed, &train, &test).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.logs, c.logs);
        assert_eq!(a.final_params.flat(), c.final_params.flat());
        let mut x = Vec::new();
        let mut y = Vec::new();
        a.write_jsonl(&mut x).unwrap();
        c.write_jsonl(&mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn active_set_stays_within_bounds() {
        let (train, test) = data();
        let cfg = config(10);
        let fed = dirichlet_local_partition(&train, &cfg.partition).unwrap();
        let out = run_federated(&cfg, &fed, &train, &test).unwrap();
        for log in &out.logs {
            assert_eq!(log.base_clients.len(), 3);
            assert!(log.added_clients.len() <= 2);
            assert!(log.added_clients.iter().all(|c| !log.base_clients.contains(c)));
            if let (Some(i), Some(f)) = (log.initial_distance, log.achieved_distance) {
                assert!(f <= i);
            }
        }
    }

    #[test]
    fn fedprox_without_proximal_term_is_fedavg() {
        let (train, test) = data();
        let mut cfg = config(6);
        let fed = dirichlet_local_partition(&train, &cfg.partition).unwrap();
        let avg = run_federated(&cfg, &fed, &train, &test).unwrap();
        cfg.strategy.kind = StrategyKind::FedProx;
        cfg.strategy.mu = 0.0;
        let prox = run_federated(&cfg, &fed, &train, &test).unwrap();
        assert_eq!(avg.final_params.flat(), prox.final_params.flat());
    }

    #[test]
    fn training_improves_the_score() {
        let (train, test) = data();
        let mut cfg = config(8);
        cfg.rounds = 15;
        let fed = dirichlet_local_partition(&train, &cfg.partition).unwrap();
        let out = run_federated(&cfg, &fed, &train, &test).unwrap();
        assert!(out.summary.final_f1 > 0.85, "final F1 {}", out.summary.final_f1);
        assert!(out.summary.final_f1 > out.summary.initial_f1);
        assert!(out.summary.best_f1 >= out.summary.final_f1);
    }

    #[test]
    fn oversized_selection_is_a_config_error() {
        let (train, test) = data();
        let mut cfg = config(4);
        cfg.selection.m = 3;
        cfg.selection.m_dc = 2;
        let fed = dirichlet_local_partition(&train, &cfg.partition).unwrap();
        let err = run_federated(&cfg, &fed, &train, &test).unwrap_err();
        assert_eq!(err.category(), crate::error::ErrorCategory::Config);
        cfg.selection.mode = SelectionMode::None;
        assert!(run_federated(&cfg, &fed, &train, &test).is_ok());
    }
}
