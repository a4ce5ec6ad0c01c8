//! Precomputed language-model candidates, one newline-delimited JSON record
//! per query after a leading metadata record:
//!
//! ```text
//! {"meta":{"model":"...","config_hash":"...","k":20,"max_tokens":5,"generation":"beam"}}
//! {"qid":0,"entries":[[1024,"-0.35667494393873245"],[17,"-1.2"]]}
//! {"qid":1,"entries":[]}
//! ```
//!
//! Log-probabilities are shortest round-trip decimal strings. An empty entry
//! list records an explicit zero distribution.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    beam_generate, build_entity_distribution, iterative_generate, map_sequences_to_entities, LanguageModel,
    SoftmaxMode,
};
use crate::dist::EntityDistribution;
use crate::error::{Error, Result};
use crate::kg::{EntityId, Query, TemporalKg};
use crate::prompt::{render_prompt, PromptConfig, RelationLexicon};
use crate::retrieval::{retrieve, RetrievalConfig};
use crate::rules::RuleStore;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generation {
    /// Beam sequence-level decoding.
    #[default]
    Beam,
    /// Repeated greedy draws (ablation stub).
    Iterative,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub model: String,
    pub config_hash: String,
    pub k: usize,
    pub max_tokens: usize,
    pub generation: Generation,
}

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    meta: CacheMeta,
}

#[derive(Serialize, Deserialize)]
struct Record {
    qid: usize,
    entries: Vec<(EntityId, String)>,
}

fn encode(qid: usize, pairs: &[(EntityId, f64)]) -> Result<String> {
    let rec = Record {
        qid,
        entries: pairs.iter().map(|&(e, lp)| (e, format!("{lp}"))).collect(),
    };
    let mut line = serde_json::to_string(&rec)?;
    line.push('\n');
    Ok(line)
}

fn qid_hint(line: &str) -> usize {
    line.strip_prefix("{\"qid\":")
        .map(|rest| rest.chars().take_while(char::is_ascii_digit).collect::<String>())
        .and_then(|d| d.parse().ok())
        .unwrap_or(usize::MAX)
}

fn decode(line: &str) -> Result<(usize, Vec<(EntityId, f64)>)> {
    let rec: Record = serde_json::from_str(line).map_err(|e| Error::CorruptRecord {
        qid: qid_hint(line),
        msg: e.to_string(),
    })?;
    let pairs = rec
        .entries
        .iter()
        .map(|(e, lp)| {
            lp.parse::<f64>()
                .ok()
                .filter(|v| !v.is_nan())
                .map(|v| (*e, v))
                .ok_or_else(|| Error::CorruptRecord {
                    qid: rec.qid,
                    msg: format!("bad log-probability {lp:?}"),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rec.qid, pairs))
}

/// Sealed, read-only view of a cache file.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionCache {
    pub meta: CacheMeta,
    entries: BTreeMap<usize, Vec<(EntityId, f64)>>,
}

impl DistributionCache {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (meta, entries, _) = parse_cache(&text, false)?;
        Ok(Self { meta, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, qid: usize) -> bool {
        self.entries.contains_key(&qid)
    }

    pub fn pairs(&self, qid: usize) -> Result<&[(EntityId, f64)]> {
        self.entries
            .get(&qid)
            .map(Vec::as_slice)
            .ok_or(Error::CacheMiss(qid))
    }

    pub fn distribution(&self, qid: usize, mode: SoftmaxMode) -> Result<EntityDistribution> {
        Ok(build_entity_distribution(self.pairs(qid)?, mode))
    }

    /// Query ids from `queries` without an entry.
    pub fn missing(&self, queries: &[Query]) -> Vec<usize> {
        queries
            .iter()
            .filter(|q| !self.entries.contains_key(&q.id))
            .map(|q| q.id)
            .collect()
    }
}

type Parsed = (CacheMeta, BTreeMap<usize, Vec<(EntityId, f64)>>, usize);

/// Returns meta, entries and the byte length of the complete-record prefix.
/// With `tolerate_tail`, a final line without newline is treated as an
/// interrupted write and ignored.
fn parse_cache(text: &str, tolerate_tail: bool) -> Result<Parsed> {
    let mut entries = BTreeMap::new();
    let mut meta: Option<CacheMeta> = None;
    let mut offset = 0usize;
    let mut valid_len = 0usize;
    for line in text.split_inclusive('\n') {
        offset += line.len();
        let complete = line.ends_with('\n');
        let body = line.trim_end_matches('\n');
        if !complete && tolerate_tail {
            break;
        }
        if body.trim().is_empty() {
            valid_len = offset;
            continue;
        }
        if meta.is_none() {
            let m: MetaRecord = serde_json::from_str(body).map_err(|e| Error::CorruptRecord {
                qid: usize::MAX,
                msg: format!("bad metadata record: {e}"),
            })?;
            meta = Some(m.meta);
        } else {
            let (qid, pairs) = decode(body)?;
            entries.insert(qid, pairs);
        }
        valid_len = offset;
    }
    let meta = meta.ok_or_else(|| Error::CorruptRecord {
        qid: usize::MAX,
        msg: "missing metadata record".into(),
    })?;
    Ok((meta, entries, valid_len))
}

pub struct PrecomputeJob<'a> {
    pub lm: &'a dyn LanguageModel,
    pub kg: &'a TemporalKg,
    pub queries: &'a [Query],
    pub retrieval: RetrievalConfig,
    pub rules: Option<&'a RuleStore>,
    pub lexicon: &'a RelationLexicon,
    pub prompt: PromptConfig,
    pub k: usize,
    pub max_tokens: usize,
    pub generation: Generation,
}

impl PrecomputeJob<'_> {
    /// retrieve -> render -> decode -> map for one query.
    pub fn candidates(&self, query: &Query) -> Result<Vec<(EntityId, f64)>> {
        let view = self.kg.history_before(query.time);
        let facts = retrieve(view, query, &self.retrieval, self.rules);
        let prompt = render_prompt(&facts, query, self.lexicon, self.prompt)?;
        let result = match self.generation {
            Generation::Beam => beam_generate(self.lm, &prompt, self.k, self.max_tokens),
            Generation::Iterative => iterative_generate(self.lm, &prompt.text, self.k, self.max_tokens),
        }
        .map_err(|msg| Error::Backend { qid: query.id, msg })?;
        Ok(map_sequences_to_entities(self.lm, &result, self.kg.entity_count()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PrecomputeStats {
    pub computed: usize,
    pub skipped: usize,
}

const CHUNK: usize = 256;

/// Fills the cache at `path` for every query, resuming from whatever complete
/// records already exist. Refuses to append to a cache with different metadata.
pub fn precompute_cache(job: &PrecomputeJob<'_>, path: &Path, meta: &CacheMeta) -> Result<PrecomputeStats> {
    let mut present: HashSet<usize> = HashSet::new();
    if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (found, entries, valid_len) = parse_cache(&text, true)?;
        if &found != meta {
            return Err(Error::HashMismatch {
                expected: meta.config_hash.clone(),
                found: found.config_hash,
            });
        }
        if valid_len < text.len() {
            log::warn!("{}: dropping interrupted trailing record", path.display());
            let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
            f.set_len(valid_len as u64).map_err(|e| Error::io(path, e))?;
        }
        present.extend(entries.into_keys());
    } else {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut line = serde_json::to_string(&MetaRecord { meta: meta.clone() })?;
        line.push('\n');
        fs::write(path, line).map_err(|e| Error::io(path, e))?;
    }

    let todo: Vec<&Query> = job.queries.iter().filter(|q| !present.contains(&q.id)).collect();
    let stats = PrecomputeStats {
        computed: todo.len(),
        skipped: job.queries.len() - todo.len(),
    };
    let mut file = OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
    for chunk in todo.chunks(CHUNK) {
        let lines = chunk
            .par_iter()
            .map(|q| job.candidates(q).and_then(|pairs| encode(q.id, &pairs)))
            .collect::<Vec<Result<String>>>();
        for line in lines {
            let line = line?;
            file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        file.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{augment_inverse, DatasetSplit, Quadruple};
    use crate::lm::backend::ScriptedBehavior;
    use crate::lm::{ScriptedLm, ScriptedSpec, TokenId};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting<'a> {
        inner: &'a dyn LanguageModel,
        calls: AtomicUsize,
    }

    impl LanguageModel for Counting<'_> {
        fn name(&self) -> String {
            self.inner.name()
        }
        fn vocab_size(&self) -> usize {
            self.inner.vocab_size()
        }
        fn stop_token(&self) -> TokenId {
            self.inner.stop_token()
        }
        fn token_text(&self, t: TokenId) -> &str {
            self.inner.token_text(t)
        }
        fn next_token_logprobs(&self, c: &str, g: &[TokenId]) -> std::result::Result<Vec<f64>, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.next_token_logprobs(c, g)
        }
    }

    fn setup() -> (TemporalKg, Vec<Query>, RelationLexicon) {
        let mut train = Vec::new();
        for t in 0..6 {
            train.push(Quadruple::new(t % 3, 0, 3 + t % 2, t));
            train.push(Quadruple::new(5, 1, t % 3, t));
        }
        let valid = vec![Quadruple::new(0, 0, 4, 6)];
        let test = vec![Quadruple::new(1, 0, 3, 7), Quadruple::new(9, 1, 8, 7)];
        let split = DatasetSplit::from_parts(train, valid, test).unwrap();
        let all: Vec<Quadruple> = split.train.iter().chain(&split.valid).chain(&split.test).copied().collect();
        let kg = augment_inverse(&TemporalKg::new(10, 2, all).unwrap()).unwrap();
        let queries = split.all_queries(true, 2);
        (kg, queries, RelationLexicon::numbered(2, true))
    }

    fn lm() -> ScriptedLm {
        ScriptedLm::new(ScriptedSpec {
            entity_count: 10,
            behavior: ScriptedBehavior::CopyRecent { decay: 0.3 },
            noise: 0.02,
            seed: 0,
        })
        .unwrap()
    }

    fn meta() -> CacheMeta {
        CacheMeta {
            model: "scripted".into(),
            config_hash: "abc".into(),
            k: 5,
            max_tokens: 3,
            generation: Generation::Beam,
        }
    }

    #[test]
    fn precompute_round_trip_and_idempotence() {
        let (kg, queries, lex) = setup();
        let base = lm();
        let counting = Counting {
            inner: &base,
            calls: AtomicUsize::new(0),
        };
        let job = PrecomputeJob {
            lm: &counting,
            kg: &kg,
            queries: &queries,
            retrieval: RetrievalConfig::default(),
            rules: None,
            lexicon: &lex,
            prompt: PromptConfig::default(),
            k: 5,
            max_tokens: 3,
            generation: Generation::Beam,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.ndjson");
        let stats = precompute_cache(&job, &path, &meta()).unwrap();
        assert_eq!(stats.computed, queries.len());
        let first = fs::read(&path).unwrap();
        let calls = counting.calls.load(Ordering::SeqCst);
        assert!(calls > 0);

        let again = precompute_cache(&job, &path, &meta()).unwrap();
        assert_eq!(again.computed, 0);
        assert_eq!(counting.calls.load(Ordering::SeqCst), calls);
        assert_eq!(fs::read(&path).unwrap(), first);

        let cache = DistributionCache::load(&path).unwrap();
        for q in &queries {
            let pairs = job.candidates(q).unwrap();
            assert_eq!(cache.pairs(q.id).unwrap(), pairs.as_slice());
            assert_eq!(
                cache.distribution(q.id, SoftmaxMode::LogProb).unwrap(),
                build_entity_distribution(&pairs, SoftmaxMode::LogProb)
            );
        }
        // cold-start subject 9 -> explicit zero entry
        let cold = queries.iter().find(|q| q.subject == 9).unwrap();
        assert!(cache.distribution(cold.id, SoftmaxMode::LogProb).unwrap().is_zero());

        // determinism across fresh runs
        let path2 = dir.path().join("cache2.ndjson");
        precompute_cache(&job, &path2, &meta()).unwrap();
        assert_eq!(fs::read(&path2).unwrap(), first);

        // resume after an interrupted write
        let cut = first.len() - 7;
        let path3 = dir.path().join("cache3.ndjson");
        fs::write(&path3, &first[..cut]).unwrap();
        precompute_cache(&job, &path3, &meta()).unwrap();
        assert_eq!(fs::read(&path3).unwrap(), first);

        // mismatched configuration refuses to append
        let other = CacheMeta {
            config_hash: "zzz".into(),
            ..meta()
        };
        assert!(matches!(precompute_cache(&job, &path, &other), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn corrupted_record_names_query() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ndjson");
        let mut text = serde_json::to_string(&MetaRecord { meta: meta() }).unwrap();
        text.push('\n');
        text.push_str("{\"qid\":0,\"entries\":[[3,\"-0.5\"]]}\n");
        text.push_str("{\"qid\":7,\"entries\":[[3,\"oops\"]]}\n");
        fs::write(&path, text).unwrap();
        match DistributionCache::load(&path) {
            Err(Error::CorruptRecord { qid, .. }) => assert_eq!(qid, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decimal_strings_round_trip() {
        for lp in [-0.1f64, -1e-300, -123.456789012345, -(0.3f64.ln())] {
            let line = encode(4, &[(1, lp)]).unwrap();
            let (qid, pairs) = decode(line.trim_end()).unwrap();
            assert_eq!(qid, 4);
            assert_eq!(pairs[0].1.to_bits(), lp.to_bits());
        }
    }
}
