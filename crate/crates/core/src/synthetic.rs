//! Generated recurrence graphs with a known answer rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kg::{DatasetSplit, EntityId, Quadruple, Time};

/// Every subject owns one `(s, r)` chain whose object persists over time.
/// Subjects and objects come from disjoint entity ranges. Objects may switch
/// only during the training period, so every validation and test fact's
/// object is the most recent earlier object of its chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceConfig {
    pub subjects: u32,
    pub objects: u32,
    pub relations: u32,
    pub train_steps: Time,
    pub valid_steps: Time,
    pub test_steps: Time,
    /// Probability that a chain emits a fact at a step.
    pub emit_prob: f64,
    /// Probability that a training-period emission switches object.
    pub switch_prob: f64,
    pub seed: u64,
}

impl Default for RecurrenceConfig {
    fn default() -> Self {
        Self {
            subjects: 100,
            objects: 100,
            relations: 4,
            train_steps: 40,
            valid_steps: 10,
            test_steps: 10,
            emit_prob: 0.7,
            switch_prob: 0.05,
            seed: 0,
        }
    }
}

impl RecurrenceConfig {
    pub fn entity_count(&self) -> u32 {
        self.subjects + self.objects
    }
}

/// Returns the split; entity and relation counts follow from the config.
pub fn recurrence_dataset(cfg: &RecurrenceConfig) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    let pick = |rng: &mut ChaCha8Rng| -> EntityId { cfg.subjects + rng.gen_range(0..cfg.objects) };
    let end = cfg.train_steps + cfg.valid_steps + cfg.test_steps;
    for s in 0..cfg.subjects {
        let r = s % cfg.relations;
        let mut object = pick(&mut rng);
        let mut emitted = false;
        for t in 0..end {
            let in_train = t < cfg.train_steps;
            if !rng.gen_bool(cfg.emit_prob) {
                continue;
            }
            if in_train && emitted && rng.gen_bool(cfg.switch_prob) && cfg.objects > 1 {
                let old = object;
                while object == old {
                    object = pick(&mut rng);
                }
            }
            if !in_train && !emitted {
                // chains start during training
                continue;
            }
            emitted = true;
            let fact = Quadruple::new(s, r, object, t);
            if in_train {
                train.push(fact);
            } else if t < cfg.train_steps + cfg.valid_steps {
                valid.push(fact);
            } else {
                test.push(fact);
            }
        }
    }
    DatasetSplit::from_parts(train, valid, test)
}
