//! Mini-batch training of adapter and gate parameters against a frozen,
//! cached language-model distribution.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterModel;
use crate::autodiff::{Adam, Grads, Tape};
use crate::error::{Error, Result};
use crate::eval::filtered_rank;
use crate::fusion::{fused_loss, FusionConfig};
use crate::kg::{Query, TemporalKg};
use crate::lm::{DistributionCache, SoftmaxMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 1e-4,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// One CSV row: `epoch,split,hits1,hits3,hits10,loss`. Train rows of epochs
/// after 0 use the forward passes made during that epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation Hits@3 (earliest on ties).
    pub best: AdapterModel,
    pub best_epoch: usize,
    pub log: Vec<LogRow>,
}

/// Per-query inputs that stay fixed during training.
pub struct TrainData<'a> {
    pub kg: &'a TemporalKg,
    pub cache: &'a DistributionCache,
    pub fusion: FusionConfig,
    pub softmax: SoftmaxMode,
}

#[derive(Clone, Debug)]
pub struct QueryOutcome {
    pub loss: f64,
    pub rank: usize,
    pub grads: Option<Grads>,
}

impl TrainData<'_> {
    /// Fused loss (and optionally gradients) of one query.
    pub fn query(&self, model: &AdapterModel, q: &Query, with_grads: bool) -> Result<QueryOutcome> {
        let answer = q
            .answer
            .ok_or_else(|| Error::Validation(format!("training query {} has no answer", q.id)))?;
        let p_llm = self.cache.distribution(q.id, self.softmax)?;
        let view = self.kg.history_before(q.time);
        let mut tape = Tape::new(&model.params);
        let ada = model.forward(&mut tape, view, q);
        let w = model.gate.weight(&mut tape, model.relation_embeddings(), q);
        let (loss, fused) = fused_loss(&mut tape, &p_llm, &ada, w, &self.fusion, answer);
        let rank = filtered_rank(&fused, answer, &self.kg.same_time_filter_set(q), self.kg.entity_count());
        Ok(QueryOutcome {
            loss: tape.scalar(loss),
            rank,
            grads: with_grads.then(|| tape.backward(loss)),
        })
    }

    fn pass(&self, model: &AdapterModel, queries: &[Query]) -> Result<Vec<QueryOutcome>> {
        queries.par_iter().map(|q| self.query(model, q, false)).collect()
    }
}

fn summarize(epoch: usize, split: &str, outcomes: &[QueryOutcome]) -> LogRow {
    let n = outcomes.len().max(1) as f64;
    let frac = |k: usize| outcomes.iter().filter(|o| o.rank <= k).count() as f64 / n;
    LogRow {
        epoch,
        split: split.to_string(),
        hits1: frac(1),
        hits3: frac(3),
        hits10: frac(10),
        loss: outcomes.iter().map(|o| o.loss).sum::<f64>() / n,
    }
}

/// Trains `model` on `train` queries, selecting the epoch with the best
/// validation Hits@3. Epoch 0 rows describe the untrained model. Every query
/// must have a cache entry.
pub fn train_adapter(
    mut model: AdapterModel,
    data: &TrainData<'_>,
    train: &[Query],
    valid: &[Query],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if let Some(&qid) = data.cache.missing(train).first().or(data.cache.missing(valid).first()) {
        return Err(Error::CacheMiss(qid));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut log = vec![
        summarize(0, "train", &data.pass(&model, train)?),
        summarize(0, "valid", &data.pass(&model, valid)?),
    ];
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = log[1].hits3;
    log::info!("epoch 0: train loss {:.5}, valid hits@3 {:.4}", log[0].loss, best_score);

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(train.len());
        for batch in order.chunks(config.batch_size) {
            let outs: Vec<QueryOutcome> = batch
                .par_iter()
                .map(|&i| data.query(&model, &train[i], true))
                .collect::<Result<_>>()?;
            let mut grads = model.params.zero_grads();
            for o in &outs {
                grads.add_assign(o.grads.as_ref().expect("requested"));
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Validation(format!("non-finite gradient in epoch {epoch}")));
            }
            adam.step(&mut model.params, &grads);
            seen.extend(outs.into_iter().map(|o| QueryOutcome { grads: None, ..o }));
        }
        log.push(summarize(epoch, "train", &seen));
        let v = summarize(epoch, "valid", &data.pass(&model, valid)?);
        log::info!(
            "epoch {epoch}: train loss {:.5}, valid hits@1/3/10 {:.4}/{:.4}/{:.4}",
            log.last().map_or(0.0, |r| r.loss),
            v.hits1,
            v.hits3,
            v.hits10
        );
        if v.hits3 > best_score {
            best_score = v.hits3;
            best_epoch = epoch;
            best = model.clone();
        }
        log.push(v);
    }
    Ok(TrainOutcome { best, best_epoch, log })
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,split,hits1,hits3,hits10,loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6},{:.8}", r.epoch, r.split, r.hits1, r.hits3, r.hits10, r.loss);
    }
    s
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    std::fs::write(path, log_to_csv(rows)).map_err(|e| Error::io(path, e))
}
