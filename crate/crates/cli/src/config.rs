//! Flat experiment configuration and the per-stage hashes stamped into
//! artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tkg_refine::adapters::{AdapterConfig, GnnAdapterConfig, ModelConfig, RuleAdapterConfig, Similarity};
use tkg_refine::eval::StaticScoring;
use tkg_refine::fusion::{FusionConfig, FusionMode, GateKind};
use tkg_refine::lm::SoftmaxMode;
use tkg_refine::prompt::PromptConfig;
use tkg_refine::retrieval::{RetrievalConfig, Strategy};
use tkg_refine::rules::{Aggregation, GroundingConfig, MiningConfig};
use tkg_refine::train::TrainConfig;
use tkg_refine::Error;

/// Documented keys, printed by `--help`.
pub const KEYS_HELP: &str = "\
Configuration keys (flat TOML; relative paths resolve against the config file):
  dataset_dir          directory with train.txt, valid.txt, test.txt [, stat.txt]
  interval             raw timestamp units per snapshot (default 1)
  inverse_queries      also evaluate (o, r^-1, ?, t) queries (default true)
  relation_names       optional TSV `id<TAB>name` used in prompts
  output_dir           experiment directory (rules/, cache/, ckpt/, reports/)
  seed                 seed for mining, initialization and shuffling (default 0)
  walks_per_relation   rule-mining walks per head relation (default 200)
  max_body_len         longest rule body (default 3)
  walk_decay           recency bias of walk sampling (default 0.1)
  confidence_samples   body groundings sampled per rule confidence (default 500)
  grounding_max        groundings kept per rule and query (default 1000)
  grounding_window     only use the last N snapshots; 0 = all (default 0)
  static_lambda        decay of static rule scoring (default 0.1)
  static_aggregation   sum | max (default sum)
  retrieval            entity_key | rule_based (default entity_key)
  history_budget       facts per prompt (default 50)
  min_rule_confidence  rule-based retrieval threshold (default 0)
  fact_parens          wrap prompt facts in parentheses (default false)
  backend              scripted:<spec.json> (required for precompute)
  k                    candidates kept per query (default 20)
  max_tokens           generated tokens per entity; 0 = digits(|E|-1)+1 (default 0)
  softmax              log_prob | probability (default log_prob)
  adapter              rule | gnn (default gnn)
  dim                  embedding width (default 64)
  rule_lambda          decay in learned rule confidence (default 0.1)
  similarity           cosine | dot (default cosine)
  gnn_hops             expansion hops (default 2)
  gnn_prune            nodes kept per hop (default 50)
  gnn_neighbors        earlier neighbors per node (default 30)
  gate                 mlp | fixed (default mlp)
  fusion               mixture | product (default mixture)
  fusion_epsilon       product-mode smoothing (default 1e-4)
  epochs               training epochs (default 5)
  learning_rate        optimizer step size (default 1e-4)
  batch_size           queries per update (default 128)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset_dir: PathBuf,
    pub interval: u64,
    pub inverse_queries: bool,
    pub relation_names: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,

    pub walks_per_relation: usize,
    pub max_body_len: usize,
    pub walk_decay: f64,
    pub confidence_samples: usize,
    pub grounding_max: usize,
    pub grounding_window: u32,
    pub static_lambda: f64,
    pub static_aggregation: Aggregation,

    pub retrieval: Strategy,
    pub history_budget: usize,
    pub min_rule_confidence: f64,
    pub fact_parens: bool,
    pub backend: String,
    pub k: usize,
    pub max_tokens: usize,
    pub softmax: SoftmaxMode,

    pub adapter: AdapterKind,
    pub dim: usize,
    pub rule_lambda: f64,
    pub similarity: Similarity,
    pub gnn_hops: usize,
    pub gnn_prune: usize,
    pub gnn_neighbors: usize,
    pub gate: GateChoice,
    pub fusion: FusionMode,
    pub fusion_epsilon: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Rule,
    Gnn,
}

impl AdapterKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AdapterKind::Rule => "rule",
            AdapterKind::Gnn => "gnn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GateChoice {
    Mlp,
    Fixed,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mining = MiningConfig::default();
        let grounding = GroundingConfig::default();
        let retrieval = RetrievalConfig::default();
        let rule = RuleAdapterConfig::default();
        let gnn = GnnAdapterConfig::default();
        let train = TrainConfig::default();
        let fusion = FusionConfig::default();
        Self {
            dataset_dir: PathBuf::from("data"),
            interval: 1,
            inverse_queries: true,
            relation_names: None,
            output_dir: PathBuf::from("run"),
            seed: 0,
            walks_per_relation: mining.walks_per_relation,
            max_body_len: mining.max_body_len,
            walk_decay: mining.decay,
            confidence_samples: mining.confidence_samples,
            grounding_max: grounding.max_per_rule,
            grounding_window: 0,
            static_lambda: 0.1,
            static_aggregation: Aggregation::Sum,
            retrieval: retrieval.strategy,
            history_budget: retrieval.history_budget,
            min_rule_confidence: retrieval.min_rule_confidence,
            fact_parens: false,
            backend: String::new(),
            k: 20,
            max_tokens: 0,
            softmax: SoftmaxMode::LogProb,
            adapter: AdapterKind::Gnn,
            dim: rule.dim,
            rule_lambda: rule.lambda,
            similarity: rule.similarity,
            gnn_hops: gnn.hops,
            gnn_prune: gnn.prune_budget,
            gnn_neighbors: gnn.neighbor_cap,
            gate: GateChoice::Mlp,
            fusion: fusion.mode,
            fusion_epsilon: fusion.epsilon,
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
        }
    }
}

/// Pipeline stages whose outputs carry a hash of the keys they depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Rules,
    Cache,
    Checkpoint,
    Report,
}

impl ExperimentConfig {
    /// Parses a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset_dir = base.join(&cfg.dataset_dir);
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.relation_names = cfg.relation_names.map(|p| base.join(p));
        if let Some(spec) = cfg.backend.strip_prefix("scripted:") {
            cfg.backend = format!("scripted:{}", base.join(spec).display());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.interval == 0 {
            return bad("interval must be positive");
        }
        if self.k == 0 || self.history_budget == 0 {
            return bad("k and history_budget must be positive");
        }
        if self.dim == 0 || self.gnn_hops == 0 || self.gnn_prune == 0 || self.gnn_neighbors == 0 {
            return bad("dim, gnn_hops, gnn_prune and gnn_neighbors must be positive");
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive");
        }
        if self.fusion == FusionMode::Product && !(self.fusion_epsilon > 0.0) {
            return bad("fusion_epsilon must be positive in product mode");
        }
        if !(self.rule_lambda > 0.0) || !(self.static_lambda > 0.0) {
            return bad("decay rates must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 over the canonical JSON of the keys `stage` depends on.
    /// Paths of the experiment directory itself never enter the hash.
    pub fn hash(&self, stage: Stage) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("struct");
        obj.remove("output_dir");
        // dataset location is identified by content elsewhere; keep only its name
        obj.insert(
            "dataset_dir".into(),
            self.dataset_dir.file_name().map(|n| n.to_string_lossy().into_owned()).into(),
        );
        // scripted backends are identified by their spec contents
        let backend_id = match self.backend.strip_prefix("scripted:") {
            Some(p) => match std::fs::read(p) {
                Ok(bytes) => format!("scripted:{}", hex::encode(Sha256::digest(&bytes))),
                Err(_) => self.backend.clone(),
            },
            None => self.backend.clone(),
        };
        obj.insert("backend".into(), backend_id.into());
        let names = self
            .relation_names
            .as_ref()
            .map(|p| std::fs::read(p).map(|b| hex::encode(Sha256::digest(&b))).unwrap_or_else(|_| p.display().to_string()));
        obj.insert("relation_names".into(), names.into());
        let data = ["dataset_dir", "interval", "inverse_queries", "seed"];
        let mining = ["walks_per_relation", "max_body_len", "walk_decay", "confidence_samples"];
        let cache = ["relation_names", "retrieval", "history_budget", "min_rule_confidence", "fact_parens", "backend", "k", "max_tokens"];
        let mut keep: Vec<&str> = data.to_vec();
        match stage {
            Stage::Rules => keep.extend(mining),
            Stage::Cache => {
                keep.extend(cache);
                if self.retrieval == Strategy::RuleBased {
                    keep.extend(mining);
                }
            }
            Stage::Checkpoint => {
                let static_keys = ["static_lambda", "static_aggregation"];
                keep = obj.keys().map(String::as_str).filter(|k| !static_keys.contains(k)).collect();
            }
            Stage::Report => keep = obj.keys().map(String::as_str).collect(),
        }
        let picked: serde_json::Map<String, serde_json::Value> = obj
            .iter()
            .filter(|(k, _)| keep.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let bytes = serde_json::to_vec(&picked).expect("json");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig {
            walks_per_relation: self.walks_per_relation,
            max_body_len: self.max_body_len,
            decay: self.walk_decay,
            confidence_samples: self.confidence_samples,
            seed: self.seed,
        }
    }

    pub fn grounding(&self) -> GroundingConfig {
        GroundingConfig {
            window: (self.grounding_window > 0).then_some(self.grounding_window),
            max_per_rule: self.grounding_max,
        }
    }

    pub fn static_scoring(&self) -> StaticScoring {
        StaticScoring {
            lambda: self.static_lambda,
            aggregation: self.static_aggregation,
            grounding: self.grounding(),
        }
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            strategy: self.retrieval,
            history_budget: self.history_budget,
            min_rule_confidence: self.min_rule_confidence,
        }
    }

    pub fn prompt(&self) -> PromptConfig {
        PromptConfig {
            fact_parens: self.fact_parens,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let adapter = match self.adapter {
            AdapterKind::Rule => AdapterConfig::Rule(RuleAdapterConfig {
                dim: self.dim,
                lambda: self.rule_lambda,
                similarity: self.similarity,
                grounding: self.grounding(),
            }),
            AdapterKind::Gnn => AdapterConfig::Gnn(GnnAdapterConfig {
                dim: self.dim,
                hops: self.gnn_hops,
                prune_budget: self.gnn_prune,
                neighbor_cap: self.gnn_neighbors,
            }),
        };
        ModelConfig {
            adapter,
            gate: match self.gate {
                GateChoice::Mlp => GateKind::Mlp,
                GateChoice::Fixed => GateKind::FixedHalf,
            },
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            mode: self.fusion,
            epsilon: self.fusion_epsilon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}
