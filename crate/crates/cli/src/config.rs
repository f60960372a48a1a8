//! The experiment file: TOML with one table per concern.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use dcfl::eval::{AxisValue, SweepAxis, Variant};
use dcfl::partition::Alpha;
use dcfl::selection::{SelectionMode, TargetKind};
use dcfl::strategies::StrategyKind;
use dcfl::{Error, Result};

/// Annotated listing of every key and its default.
pub const DEFAULT_CONFIG: &str = include_str!("../default.toml");

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub strategy: StrategySection,
    pub selection: SelectionSection,
    pub run: RunSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Covtype,
    Mnist,
    Synthetic,
    CovtypeSurrogate,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Covtype => "covtype",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::CovtypeSurrogate => "covtype_surrogate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    pub name: Option<String>,
    pub path: PathBuf,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_fraction: f64,
    pub train_subsample: usize,
    pub test_subsample: usize,
    pub split_seed: u64,
    pub surrogate_rows: usize,
    pub synthetic_classes: usize,
    pub synthetic_dim: usize,
    pub synthetic_per_class: usize,
    pub synthetic_separation: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Covtype,
            name: None,
            path: PathBuf::from("data/covtype.data"),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_fraction: 0.8,
            train_subsample: 0,
            test_subsample: 0,
            split_seed: 0,
            surrogate_rows: 30_000,
            synthetic_classes: 10,
            synthetic_dim: 20,
            synthetic_per_class: 300,
            synthetic_separation: 3.0,
        }
    }
}

impl DatasetSection {
    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub num_clients: usize,
    pub alpha_local: Alpha,
    pub alpha_global: Alpha,
    pub seed: u64,
    pub file: Option<PathBuf>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            num_clients: 100,
            alpha_local: Alpha::new(2.0).expect("positive"),
            alpha_global: Alpha::new(2.0).expect("positive"),
            seed: 0,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Option<Vec<usize>>,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: None,
            dropout: 0.2,
        }
    }
}

impl ModelSection {
    pub fn hidden_for(&self, kind: DatasetKind) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| match kind {
            DatasetKind::Covtype | DatasetKind::CovtypeSurrogate => vec![45, 30, 15],
            DatasetKind::Mnist => vec![128, 64],
            DatasetKind::Synthetic => vec![32, 16],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyName {
    Fedavg,
    Fedatt,
    Fedprox,
}

impl From<StrategyName> for StrategyKind {
    fn from(s: StrategyName) -> Self {
        match s {
            StrategyName::Fedavg => StrategyKind::FedAvg,
            StrategyName::Fedatt => StrategyKind::FedAtt,
            StrategyName::Fedprox => StrategyKind::FedProx,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Greedy,
    Exhaustive,
    RandomAugment,
    None,
}

impl From<ModeName> for SelectionMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::Greedy => SelectionMode::Greedy,
            ModeName::Exhaustive => SelectionMode::Exhaustive,
            ModeName::RandomAugment => SelectionMode::RandomAugment,
            ModeName::None => SelectionMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetName {
    Real,
    Balanced,
    None,
}

impl From<TargetName> for TargetKind {
    fn from(t: TargetName) -> Self {
        match t {
            TargetName::Real => TargetKind::Real,
            TargetName::Balanced => TargetKind::Balanced,
            TargetName::None => TargetKind::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySection {
    pub kind: StrategyName,
    pub mu: f64,
    pub epsilon: f64,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            kind: StrategyName::Fedavg,
            mu: 0.01,
            epsilon: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub mode: ModeName,
    pub target: TargetName,
    pub m: usize,
    pub m_dc: usize,
    pub secure_agg: bool,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            mode: ModeName::Greedy,
            target: TargetName::Balanced,
            m: 10,
            m_dc: 5,
            secure_agg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub repeats: usize,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            rounds: 100,
            epochs: 3,
            batch_size: 32,
            eta: 0.05,
            repeats: 3,
            seed: 0,
            jobs: 1,
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisName {
    AlphaLocal,
    AlphaGlobal,
    MDc,
}

impl From<AxisName> for SweepAxis {
    fn from(a: AxisName) -> Self {
        match a {
            AxisName::AlphaLocal => SweepAxis::AlphaLocal,
            AxisName::AlphaGlobal => SweepAxis::AlphaGlobal,
            AxisName::MDc => SweepAxis::MDc,
        }
    }
}

/// A sweep value: a number, or "inf".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepValue(pub AxisValue);

impl Serialize for SweepValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0 .0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0 .0)
        }
    }
}

impl<'de> Deserialize<'de> for SweepValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(SweepValue(AxisValue(v as f64))),
            Raw::Num(v) => Ok(SweepValue(AxisValue(v))),
            Raw::Text(t) => t.parse().map(SweepValue).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub axis: AxisName,
    pub values: Vec<SweepValue>,
    pub strategies: Vec<StrategyName>,
    pub modes: Vec<ModeName>,
    pub targets: Vec<TargetName>,
    pub repartition_per_repeat: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        let values = [f64::INFINITY, 5.0, 2.0, 1.0, 0.5, 0.2, 0.1];
        Self {
            axis: AxisName::AlphaLocal,
            values: values.iter().map(|&v| SweepValue(AxisValue(v))).collect(),
            strategies: vec![StrategyName::Fedavg],
            modes: vec![ModeName::None, ModeName::Greedy],
            targets: vec![TargetName::Balanced],
            repartition_per_repeat: false,
        }
    }
}

impl SweepSection {
    /// Baselines once per strategy; every other mode once per target.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        for (key, empty) in [
            ("sweep.values", self.values.is_empty()),
            ("sweep.strategies", self.strategies.is_empty()),
            ("sweep.modes", self.modes.is_empty()),
        ] {
            if empty {
                return Err(Error::config(key, "list is empty"));
            }
        }
        let mut out = Vec::new();
        for &s in &self.strategies {
            for &m in &self.modes {
                if m == ModeName::None {
                    out.push(Variant::baseline(s.into()));
                    continue;
                }
                if self.targets.is_empty() {
                    return Err(Error::config("sweep.targets", "list is empty"));
                }
                for &t in &self.targets {
                    out.push(Variant {
                        strategy: s.into(),
                        mode: m.into(),
                        target: t.into(),
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn axis_values(&self) -> Vec<AxisValue> {
        self.values.iter().map(|v| v.0).collect()
    }
}

/// Parses a config document, applying `section.key=value` overrides on top.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<Config> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<config>", e.to_string()))?;
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    let merged = toml::to_string(&table).map_err(|e| Error::config("<config>", e.to_string()))?;
    toml::from_str(&merged).map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config(p.display().to_string(), e.to_string()))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::config(item, "override must look like section.key=value"))?;
    let key = key.trim();
    let (section, field) = key
        .split_once('.')
        .ok_or_else(|| Error::config(key, "override key must look like section.key"))?;
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(Error::config(section, "is not a table")),
    }
}

impl Config {
    /// Hex digest of everything that influences results. `run.jobs` and
    /// `run.out` are excluded: they do not change any output bytes.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.jobs = 1;
        c.run.out = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
