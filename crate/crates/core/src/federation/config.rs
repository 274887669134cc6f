//! Run configuration and its flat `key = value` text form.
//!
//! Grammar: one `key = value` per line; `#` starts a comment; blank lines are
//! ignored; later assignments override earlier ones. The manifest written for
//! every run uses the same grammar with every key present, so it can be fed
//! back as a config file to replay the run.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::adapters::{dense_rank, FinetuneInit};
use crate::backbone::BackboneConfig;
use crate::data::{LossScope, PartitionKind};
use crate::error::{Error, Result};
use crate::saliency::Metric;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregationMode {
    /// Dense weighted sum of all uploads, masked by the recipient's masks.
    Literal,
    /// Per entry, weights renormalized over the uploaders that keep it.
    OverlapNormalized,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::Literal => "literal",
            AggregationMode::OverlapNormalized => "overlap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(AggregationMode::Literal),
            "overlap" => Ok(AggregationMode::OverlapNormalized),
            other => Err(Error::config(format!("unknown aggregation mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generated corpus with `per_category` examples in each of the 8 categories.
    Synthetic { per_category: usize, seed: u64 },
    Jsonl(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub clients: usize,
    pub participation: f64,
    /// Explicit participants per round; overrides `participation` when set.
    pub participants: Option<usize>,
    pub rounds: usize,
    pub local_epochs: usize,
    /// `None` picks 10 for dense rank 16 and 5 otherwise.
    pub prune_epochs: Option<usize>,
    pub rank: usize,
    pub sparsity: f64,
    /// Ranks of the Small, Medium and Large budget levels.
    pub hetero_ranks: Option<[usize; 3]>,
    /// Common dense rank; `None` derives it from rank/sparsity or the largest level rank.
    pub dense_rank: Option<usize>,
    pub metric: Metric,
    pub aggregation: AggregationMode,
    pub partition: PartitionKind,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub score_batch: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub finetune_init: FinetuneInit,
    /// All clients start search and tuning from the same dense adapters.
    pub shared_init: bool,
    pub loss_scope: LossScope,
    pub train_fraction: f64,
    pub data: DataSource,
    pub backbone: BackboneConfig,
    pub backbone_checkpoint: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            clients: 16,
            participation: 0.1,
            participants: None,
            rounds: 30,
            local_epochs: 1,
            prune_epochs: None,
            rank: 8,
            sparsity: 0.5,
            hetero_ranks: None,
            dense_rank: None,
            metric: Metric::First,
            aggregation: AggregationMode::Literal,
            partition: PartitionKind::Pathological { classes_per_client: 2 },
            batch_size: 64,
            micro_batch: 8,
            score_batch: 64,
            learning_rate: 2.0,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            finetune_init: FinetuneInit::Reinit,
            shared_init: true,
            loss_scope: LossScope::Full,
            train_fraction: 0.8,
            data: DataSource::Synthetic {
                per_category: 50,
                seed: 0,
            },
            backbone: BackboneConfig::default(),
            backbone_checkpoint: None,
            seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value '{v}' for key '{key}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean '{v}' for key '{key}'"))),
    }
}

fn opt_usize(key: &str, v: &str) -> Result<Option<usize>> {
    match v {
        "auto" | "none" | "0" => Ok(None),
        _ => parse_value(key, v).map(Some),
    }
}

fn show_opt(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl RunConfig {
    /// Participants per round: the explicit count, else `round(participation·m)`, at least 1.
    pub fn participants_per_round(&self) -> usize {
        self.participants
            .unwrap_or_else(|| ((self.participation * self.clients as f64).round() as usize).max(1))
    }

    /// Dense rank shared by every client's adapters.
    pub fn common_dense_rank(&self) -> Result<usize> {
        if let Some(r) = self.dense_rank {
            return Ok(r);
        }
        match self.hetero_ranks {
            Some(ranks) => Ok(*ranks.iter().max().expect("three ranks")),
            None => dense_rank(self.rank, self.sparsity),
        }
    }

    pub fn prune_epochs_for(&self, dense_rank: usize) -> usize {
        self.prune_epochs
            .unwrap_or(if dense_rank == 16 { 10 } else { 5 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("clients must be at least 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!(
                "participation {} outside (0, 1]",
                self.participation
            )));
        }
        let k = self.participants_per_round();
        if k == 0 || k > self.clients {
            return Err(Error::config(format!(
                "{k} participants per round with {} clients",
                self.clients
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be at least 1"));
        }
        if self.prune_epochs == Some(0) {
            return Err(Error::config("prune_epochs must be at least 1"));
        }
        if self.batch_size == 0 || self.micro_batch == 0 || self.score_batch == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if self.micro_batch > self.batch_size {
            return Err(Error::config("micro_batch larger than batch_size"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum outside [0, 1)"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config("train_fraction outside (0, 1]"));
        }
        let r_max = self.common_dense_rank()?;
        match self.hetero_ranks {
            Some(ranks) => {
                if let Some(r) = ranks.iter().find(|&&r| r == 0 || r > r_max) {
                    return Err(Error::config(format!(
                        "level rank {r} outside 1..={r_max}"
                    )));
                }
            }
            None => {
                dense_rank(self.rank, self.sparsity)?;
            }
        }
        self.backbone.validate()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "clients" => self.clients = parse_value(key, v)?,
            "participation" => self.participation = parse_value(key, v)?,
            "participants" => self.participants = opt_usize(key, v)?,
            "rounds" => self.rounds = parse_value(key, v)?,
            "local_epochs" => self.local_epochs = parse_value(key, v)?,
            "prune_epochs" => self.prune_epochs = opt_usize(key, v)?,
            "rank" => self.rank = parse_value(key, v)?,
            "sparsity" => self.sparsity = parse_value(key, v)?,
            "hetero_ranks" => {
                self.hetero_ranks = match v {
                    "none" | "" => None,
                    _ => {
                        let parts: Vec<usize> = v
                            .split(',')
                            .map(|p| parse_value(key, p.trim()))
                            .collect::<Result<_>>()?;
                        let arr: [usize; 3] = parts.try_into().map_err(|_| {
                            Error::config("hetero_ranks needs three comma-separated ranks")
                        })?;
                        Some(arr)
                    }
                }
            }
            "dense_rank" => self.dense_rank = opt_usize(key, v)?,
            "metric" => self.metric = Metric::parse(v)?,
            "aggregation" => self.aggregation = AggregationMode::parse(v)?,
            "partition" => {
                self.partition = match v {
                    "pathological" => PartitionKind::Pathological {
                        classes_per_client: match self.partition {
                            PartitionKind::Pathological { classes_per_client } => classes_per_client,
                            _ => 2,
                        },
                    },
                    "dirichlet" => PartitionKind::Dirichlet {
                        beta: match self.partition {
                            PartitionKind::Dirichlet { beta } => beta,
                            _ => 0.5,
                        },
                    },
                    other => return Err(Error::config(format!("unknown partition '{other}'"))),
                }
            }
            "classes_per_client" => {
                let c = parse_value(key, v)?;
                if let PartitionKind::Pathological { classes_per_client } = &mut self.partition {
                    *classes_per_client = c;
                }
            }
            "dirichlet_beta" => {
                let b = parse_value(key, v)?;
                if let PartitionKind::Dirichlet { beta } = &mut self.partition {
                    *beta = b;
                }
            }
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "micro_batch" => self.micro_batch = parse_value(key, v)?,
            "score_batch" => self.score_batch = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "finetune_init" => self.finetune_init = FinetuneInit::parse(v)?,
            "shared_init" => self.shared_init = parse_bool(key, v)?,
            "loss_scope" => self.loss_scope = LossScope::parse(v)?,
            "train_fraction" => self.train_fraction = parse_value(key, v)?,
            "data" => {
                self.data = match v {
                    "synthetic" => match self.data {
                        DataSource::Synthetic { .. } => self.data.clone(),
                        DataSource::Jsonl(_) => DataSource::Synthetic {
                            per_category: 50,
                            seed: 0,
                        },
                    },
                    path => DataSource::Jsonl(PathBuf::from(path)),
                }
            }
            "synth_per_category" => {
                let n = parse_value(key, v)?;
                if let DataSource::Synthetic { per_category, .. } = &mut self.data {
                    *per_category = n;
                }
            }
            "data_seed" => {
                let s = parse_value(key, v)?;
                if let DataSource::Synthetic { seed, .. } = &mut self.data {
                    *seed = s;
                }
            }
            "backbone.vocab_size" => self.backbone.vocab_size = parse_value(key, v)?,
            "backbone.d_model" => self.backbone.d_model = parse_value(key, v)?,
            "backbone.n_layers" => self.backbone.n_layers = parse_value(key, v)?,
            "backbone.n_heads" => self.backbone.n_heads = parse_value(key, v)?,
            "backbone.d_ff" => self.backbone.d_ff = parse_value(key, v)?,
            "backbone.max_seq" => self.backbone.max_seq = parse_value(key, v)?,
            "backbone.init_seed" => self.backbone.init_seed = parse_value(key, v)?,
            "backbone_checkpoint" => {
                self.backbone_checkpoint = match v {
                    "none" | "" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            "seed" => self.seed = parse_value(key, v)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies every assignment of a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("config line {}: expected key = value", i + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key in a fixed order; feeding this back reproduces `self`.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("clients", self.clients.to_string());
        kv("participation", format!("{:?}", self.participation));
        kv("participants", show_opt(self.participants));
        kv("rounds", self.rounds.to_string());
        kv("local_epochs", self.local_epochs.to_string());
        kv("prune_epochs", show_opt(self.prune_epochs));
        kv("rank", self.rank.to_string());
        kv("sparsity", format!("{:?}", self.sparsity));
        kv(
            "hetero_ranks",
            self.hetero_ranks
                .map_or_else(|| "none".into(), |r| format!("{},{},{}", r[0], r[1], r[2])),
        );
        kv("dense_rank", show_opt(self.dense_rank));
        kv("metric", self.metric.as_str().into());
        kv("aggregation", self.aggregation.as_str().into());
        match self.partition {
            PartitionKind::Pathological { classes_per_client } => {
                kv("partition", "pathological".into());
                kv("classes_per_client", classes_per_client.to_string());
            }
            PartitionKind::Dirichlet { beta } => {
                kv("partition", "dirichlet".into());
                kv("dirichlet_beta", format!("{beta:?}"));
            }
        }
        kv("batch_size", self.batch_size.to_string());
        kv("micro_batch", self.micro_batch.to_string());
        kv("score_batch", self.score_batch.to_string());
        kv("learning_rate", format!("{:?}", self.learning_rate));
        kv("optimizer", self.optimizer.as_str().into());
        kv("momentum", format!("{:?}", self.momentum));
        kv("finetune_init", self.finetune_init.as_str().into());
        kv("shared_init", self.shared_init.to_string());
        kv("loss_scope", self.loss_scope.as_str().into());
        kv("train_fraction", format!("{:?}", self.train_fraction));
        match &self.data {
            DataSource::Synthetic { per_category, seed } => {
                kv("data", "synthetic".into());
                kv("synth_per_category", per_category.to_string());
                kv("data_seed", seed.to_string());
            }
            DataSource::Jsonl(p) => kv("data", p.display().to_string()),
        }
        let b = &self.backbone;
        kv("backbone.vocab_size", b.vocab_size.to_string());
        kv("backbone.d_model", b.d_model.to_string());
        kv("backbone.n_layers", b.n_layers.to_string());
        kv("backbone.n_heads", b.n_heads.to_string());
        kv("backbone.d_ff", b.d_ff.to_string());
        kv("backbone.max_seq", b.max_seq.to_string());
        kv("backbone.init_seed", b.init_seed.to_string());
        kv(
            "backbone_checkpoint",
            self.backbone_checkpoint
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
        );
        s
    }
}
