//! Trainable adapters over the temporal graph: learned rule re-scoring and
//! an attention-flow subgraph reasoner. Both share a relation embedding table
//! with the fusion gate.

mod gnn;
mod rule;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gnn::{Expansion, GnnAdapter, GnnAdapterConfig, Node};
pub use rule::{RuleAdapter, RuleAdapterConfig, Similarity};

use crate::autodiff::{ParamId, ParamSet, Tape};
use crate::dist::EntityDistribution;
use crate::error::{Error, Result};
use crate::fusion::{Gate, GateKind, TapeDistribution};
use crate::kg::{EntityId, HistoryView, Query};
use crate::rules::RuleStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterConfig {
    Rule(RuleAdapterConfig),
    Gnn(GnnAdapterConfig),
}

impl AdapterConfig {
    pub fn dim(&self) -> usize {
        match self {
            AdapterConfig::Rule(c) => c.dim,
            AdapterConfig::Gnn(c) => c.dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdapterConfig::Rule(_) => "rule",
            AdapterConfig::Gnn(_) => "gnn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub adapter: AdapterConfig,
    pub gate: GateKind,
}

#[derive(Clone, Debug)]
pub enum Adapter {
    Rule(RuleAdapter),
    Gnn(GnnAdapter),
}

/// Adapter plus gate, with every trainable tensor in one parameter set.
#[derive(Clone, Debug)]
pub struct AdapterModel {
    pub params: ParamSet,
    pub adapter: Adapter,
    pub gate: Gate,
    config: ModelConfig,
    relation_vocab: u32,
    rel_emb: ParamId,
}

impl AdapterModel {
    /// `relation_vocab` counts inverse relations too. The rule adapter needs
    /// the mined rule store.
    pub fn new(config: ModelConfig, relation_vocab: u32, rules: Option<Arc<RuleStore>>, seed: u64) -> Result<Self> {
        let d = config.adapter.dim();
        if d == 0 || relation_vocab == 0 {
            return Err(Error::Config("adapter dimension and relation vocabulary must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let rel_emb = params.uniform("rel_emb", &[relation_vocab as usize, d], (3.0 / d as f64).sqrt(), &mut rng);
        let adapter = match config.adapter {
            AdapterConfig::Rule(c) => {
                let store = rules.ok_or_else(|| Error::MissingArtifact("rule store for the rule adapter".into()))?;
                Adapter::Rule(RuleAdapter::new(c, &mut params, rel_emb, store, &mut rng))
            }
            AdapterConfig::Gnn(c) => Adapter::Gnn(GnnAdapter::new(c, &mut params, rel_emb, &mut rng)),
        };
        let gate = Gate::new(config.gate, &mut params, d, &mut rng);
        Ok(Self {
            params,
            adapter,
            gate,
            config,
            relation_vocab,
            rel_emb,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn relation_embeddings(&self) -> ParamId {
        self.rel_emb
    }

    pub fn forward(&self, tape: &mut Tape<'_>, view: HistoryView<'_>, query: &Query) -> TapeDistribution {
        match &self.adapter {
            Adapter::Rule(a) => a.forward(tape, view, query),
            Adapter::Gnn(a) => a.forward(tape, view, query),
        }
    }

    /// Adapter distribution for `query` given the visible history.
    pub fn distribution(&self, view: HistoryView<'_>, query: &Query) -> EntityDistribution {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, view, query);
        out.value(&tape)
    }

    pub fn gate_weight(&self, query: &Query) -> f64 {
        self.gate.weight_value(&self.params, self.rel_emb, query)
    }

    /// Entities the adapter can score for `query`.
    pub fn candidates(&self, view: HistoryView<'_>, query: &Query) -> Vec<EntityId> {
        self.distribution(view, query).support().collect()
    }

    /// Writes a checkpoint: magic, format version, JSON header, then every
    /// tensor as little-endian f32 in registration order.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let header = CheckpointHeader {
            config_hash: config_hash.to_string(),
            model: self.config,
            relation_vocab: self.relation_vocab,
            tensors: self
                .params
                .tensors()
                .iter()
                .map(|t| TensorInfo {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let head = serde_json::to_vec(&header)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(head.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&head).map_err(io)?;
        for t in self.params.tensors() {
            for &x in &t.data {
                w.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads a checkpoint written by [`AdapterModel::save`]. The stored
    /// configuration hash must equal `expected_hash` when one is given.
    pub fn load(path: &Path, rules: Option<Arc<RuleStore>>, expected_hash: Option<&str>) -> Result<(Self, CheckpointHeader)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not an adapter checkpoint"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(|_| bad("truncated header"))?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut head = vec![0u8; len];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&head).map_err(|e| bad(&e.to_string()))?;
        if let Some(h) = expected_hash {
            if h != header.config_hash {
                return Err(Error::HashMismatch {
                    expected: h.to_string(),
                    found: header.config_hash.clone(),
                });
            }
        }
        let mut model = AdapterModel::new(header.model, header.relation_vocab, rules, 0)?;
        if model.params.len() != header.tensors.len() {
            return Err(bad("tensor count differs from the model layout"));
        }
        for (t, info) in model.params.tensors_mut().iter_mut().zip(&header.tensors) {
            if t.name != info.name || t.shape != info.shape {
                return Err(bad(&format!("tensor {} does not match the model layout", info.name)));
            }
            let mut buf = vec![0u8; t.data.len() * 4];
            r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
            for (x, chunk) in t.data.iter_mut().zip(buf.chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            }
        }
        if r.read(&mut [0u8; 1]).map_err(|e| Error::io(path, e))? != 0 {
            return Err(bad("trailing bytes after payload"));
        }
        Ok((model, header))
    }

    /// Rounds every parameter to f32, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in self.params.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

const MAGIC: &[u8; 8] = b"TKGADAPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub model: ModelConfig,
    pub relation_vocab: u32,
    pub tensors: Vec<TensorInfo>,
}

#[cfg(test)]
mod tests;
