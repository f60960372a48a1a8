//! The four subcommands. Each writes into `<run.out>/<config hash>/`.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use dcfl::dataset::{
    covtype_surrogate_rows, generate_synthetic, load_covtype_csv, load_mnist_idx, parse_covtype, train_test_split,
    Dataset,
};
use dcfl::eval::{
    improvement_report, read_results_csv, run_grid, write_delta_csv, write_results_csv, ExperimentData, GridOptions,
    ResultRow,
};
use dcfl::model::{save_checkpoint, MlpConfig};
use dcfl::orchestrator::{run_federated, RunConfig};
use dcfl::partition::{apply_global_imbalance, dirichlet_local_partition, Federation, PartitionConfig};
use dcfl::selection::SelectionConfig;
use dcfl::strategies::{LocalTraining, StrategyConfig};
use dcfl::{Error, Result};

use crate::config::{Config, DatasetKind};

/// Loaded data plus digests of the files it came from.
pub struct LoadedData {
    pub data: ExperimentData,
    pub sources: Vec<(String, String)>,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::config(key, "required for the mnist dataset"))
}

/// Generated CovType-shaped rows, fed through the regular CSV parser.
pub fn surrogate_covtype(rows: usize, seed: u64) -> Result<Dataset> {
    let mut text = String::new();
    for row in covtype_surrogate_rows(rows, seed) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    parse_covtype(BufReader::new(Cursor::new(text)))
}

pub fn load_data(cfg: &Config) -> Result<LoadedData> {
    let d = &cfg.dataset;
    let mut sources = Vec::new();
    let (train, test) = match d.kind {
        DatasetKind::Mnist => {
            let paths = [
                ("dataset.train_images", required(&d.train_images, "dataset.train_images")?),
                ("dataset.train_labels", required(&d.train_labels, "dataset.train_labels")?),
                ("dataset.test_images", required(&d.test_images, "dataset.test_images")?),
                ("dataset.test_labels", required(&d.test_labels, "dataset.test_labels")?),
            ];
            for (key, p) in paths {
                sources.push((key.to_string(), file_digest(p)?));
            }
            (load_mnist_idx(paths[0].1, paths[1].1)?, load_mnist_idx(paths[2].1, paths[3].1)?)
        }
        DatasetKind::Covtype => {
            sources.push(("dataset.path".to_string(), file_digest(&d.path)?));
            train_test_split(&load_covtype_csv(&d.path)?, d.train_fraction, d.split_seed)?
        }
        DatasetKind::CovtypeSurrogate => {
            sources.push(("generated".into(), format!("covtype_surrogate rows={} seed={}", d.surrogate_rows, d.split_seed)));
            train_test_split(&surrogate_covtype(d.surrogate_rows, d.split_seed)?, d.train_fraction, d.split_seed)?
        }
        DatasetKind::Synthetic => {
            sources.push(("generated".into(), "synthetic".into()));
            let ds = generate_synthetic(
                d.synthetic_classes,
                d.synthetic_dim,
                d.synthetic_per_class,
                d.synthetic_separation,
                d.split_seed,
            )?;
            train_test_split(&ds, d.train_fraction, d.split_seed)?
        }
    };
    let train = if d.train_subsample > 0 { train.subsample(d.train_subsample, d.split_seed) } else { train };
    let test = if d.test_subsample > 0 { test.subsample(d.test_subsample, d.split_seed) } else { test };
    Ok(LoadedData {
        data: ExperimentData {
            name: d.display_name(),
            train,
            test,
        },
        sources,
    })
}

/// Maps the file sections onto the simulator configuration.
pub fn run_config(cfg: &Config, data: &ExperimentData) -> Result<RunConfig> {
    let mut layers = vec![data.train.feature_dim()];
    layers.extend(cfg.model.hidden_for(cfg.dataset.kind));
    layers.push(data.train.num_classes());
    let model = MlpConfig::new(layers, cfg.model.dropout).map_err(|e| Error::config("model", e.to_string()))?;
    let mut strategy = StrategyConfig::new(cfg.strategy.kind.into());
    strategy.mu = cfg.strategy.mu;
    strategy.epsilon = cfg.strategy.epsilon;
    let rc = RunConfig {
        rounds: cfg.run.rounds,
        training: LocalTraining {
            epochs: cfg.run.epochs,
            batch_size: cfg.run.batch_size,
            eta: cfg.run.eta,
        },
        strategy,
        selection: SelectionConfig {
            m: cfg.selection.m,
            m_dc: cfg.selection.m_dc,
            target: cfg.selection.target.into(),
            mode: cfg.selection.mode.into(),
            secure_agg: cfg.selection.secure_agg,
        },
        model,
        partition: PartitionConfig {
            num_clients: cfg.partition.num_clients,
            alpha_local: cfg.partition.alpha_local,
            alpha_global: cfg.partition.alpha_global,
            seed: cfg.partition.seed,
        },
        repeats: cfg.run.repeats,
        master_seed: cfg.run.seed,
        jobs: cfg.run.jobs,
    };
    rc.validate()?;
    Ok(rc)
}

pub fn output_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = cfg.run.out.join(cfg.hash());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Training set after global imbalance, and its federation.
pub fn federation(cfg: &Config, rc: &RunConfig, data: &ExperimentData) -> Result<(Dataset, Federation)> {
    let train = apply_global_imbalance(&data.train, &rc.partition)?;
    let fed = match &cfg.partition.file {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            Federation::read_jsonl(BufReader::new(file), &train)?
        }
        None => dirichlet_local_partition(&train, &rc.partition)?,
    };
    if fed.num_clients() != rc.num_clients() {
        return Err(Error::config(
            "partition.num_clients",
            format!("federation file has {} clients", fed.num_clients()),
        ));
    }
    Ok((train, fed))
}

pub fn cmd_partition(cfg: &Config) -> Result<PathBuf> {
    let loaded = load_data(cfg)?;
    let rc = run_config(cfg, &loaded.data)?;
    let (_, fed) = federation(cfg, &rc, &loaded.data)?;
    let dir = output_dir(cfg)?;
    let mut buf = Vec::new();
    fed.write_jsonl(&mut buf)?;
    write_file(&dir.join("federation.jsonl"), &buf)?;
    let manifest = json!({
        "config_hash": cfg.hash(),
        "dataset": loaded.data.name,
        "sources": loaded.sources.iter().map(|(k, v)| json!({"key": k, "sha256": v})).collect::<Vec<_>>(),
        "seed": rc.partition.seed,
        "num_clients": rc.partition.num_clients,
        "alpha_local": rc.partition.alpha_local,
        "alpha_global": rc.partition.alpha_global,
        "federation_sha256": hex(&Sha256::digest(&buf)),
        "client_totals": fed.client_totals(),
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    log::info!("wrote {} client shards to {}", fed.num_clients(), dir.display());
    Ok(dir)
}

pub fn cmd_run(cfg: &Config) -> Result<PathBuf> {
    let loaded = load_data(cfg)?;
    let rc = run_config(cfg, &loaded.data)?;
    let (train, fed) = federation(cfg, &rc, &loaded.data)?;
    let dir = output_dir(cfg)?;
    let started = Instant::now();
    let out = run_federated(&rc, &fed, &train, &loaded.data.test)?;
    let wall = started.elapsed().as_secs_f64();

    let hash = cfg.hash();
    let mut log = BufWriter::new(Vec::new());
    writeln!(
        log,
        "{}",
        json!({"record": "config", "config_hash": hash, "config": cfg_for_record(cfg)})
    )
    .map_err(|e| Error::io("<log>", e))?;
    out.write_jsonl(&mut log)?;
    write_file(&dir.join("log.jsonl"), &log.into_inner().expect("in-memory buffer"))?;
    save_checkpoint(&dir.join("model.ckpt"), &out.final_params)?;
    write_json(&dir.join("timing.json"), &json!({"config_hash": hash, "wall_seconds": wall}))?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "config_hash": hash,
            "dataset": loaded.data.name,
            "strategy": dcfl::eval::Variant {
                strategy: rc.strategy.kind,
                mode: rc.selection.mode,
                target: rc.selection.target,
            }.label(),
            "summary": out.summary,
        }),
    )?;
    log::info!(
        "final F1 {:.4}, best {:.4} (round {}), {:.1}s",
        out.summary.final_f1,
        out.summary.best_f1,
        out.summary.best_round,
        wall
    );
    Ok(dir)
}

fn cfg_for_record(cfg: &Config) -> Config {
    let mut c = cfg.clone();
    c.run.jobs = 1;
    c.run.out = PathBuf::new();
    c
}

pub fn cmd_sweep(cfg: &Config) -> Result<PathBuf> {
    let variants = cfg.sweep.variants()?;
    let loaded = load_data(cfg)?;
    let rc = run_config(cfg, &loaded.data)?;
    if cfg.partition.file.is_some() {
        return Err(Error::config("partition.file", "sweeps partition per value and cannot reuse a file"));
    }
    let opts = GridOptions {
        repartition_per_repeat: cfg.sweep.repartition_per_repeat,
    };
    let dir = output_dir(cfg)?;
    let cells = run_grid(&rc, &loaded.data, cfg.sweep.axis.into(), &cfg.sweep.axis_values(), &variants, opts)?;

    let mut results = Vec::new();
    write_results_csv(&mut results, &cells)?;
    write_file(&dir.join("results.csv"), &results)?;
    let mut detail = Vec::new();
    for c in &cells {
        detail.extend(serde_json::to_vec(c).expect("cells serialize"));
        detail.push(b'\n');
    }
    write_file(&dir.join("cells.jsonl"), &detail)?;
    if variants.iter().any(|v| v.is_baseline()) && variants.iter().any(|v| !v.is_baseline()) {
        let rows: Vec<ResultRow> = cells.iter().map(ResultRow::from).collect();
        let mut delta = Vec::new();
        write_delta_csv(&mut delta, &improvement_report(&rows)?)?;
        write_file(&dir.join("delta.csv"), &delta)?;
    }
    let incomplete = cells.iter().filter(|c| !c.complete()).count();
    if incomplete > 0 {
        log::warn!("{incomplete} cells have diverged repeats; see cells.jsonl");
    }
    Ok(dir)
}

/// Delta table from an existing results CSV.
pub fn cmd_report(results: &Path, out: &Path) -> Result<()> {
    let file = fs::File::open(results).map_err(|e| Error::io(results, e))?;
    let rows = read_results_csv(BufReader::new(file))?;
    let mut delta = Vec::new();
    write_delta_csv(&mut delta, &improvement_report(&rows)?)?;
    write_file(out, &delta)
}
