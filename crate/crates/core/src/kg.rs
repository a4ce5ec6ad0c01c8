//! Temporal knowledge graph storage: quadruples, snapshot indexing, the
//! (subject, relation) and subject neighbourhood indices, leakage-free history
//! views and the time-aware filter used by evaluation.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;
/// Normalized snapshot index (raw timestamp divided by the dataset interval).
pub type Time = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quadruple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
    pub time: Time,
}

impl Quadruple {
    pub fn new(subject: EntityId, relation: RelationId, object: EntityId, time: Time) -> Self {
        Self {
            subject,
            relation,
            object,
            time,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Valid,
    Test,
}

/// A forecasting query `(subject, relation, ?, time)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    /// Position in [`DatasetSplit::all_queries`]; the key used by caches and rank dumps.
    pub id: usize,
    pub subject: EntityId,
    pub relation: RelationId,
    pub time: Time,
    pub answer: Option<EntityId>,
    pub direction: Direction,
    pub part: SplitPart,
}

impl Query {
    /// An unlabelled query, e.g. for pure inference.
    pub fn open(subject: EntityId, relation: RelationId, time: Time) -> Self {
        Self {
            id: 0,
            subject,
            relation,
            time,
            answer: None,
            direction: Direction::Forward,
            part: SplitPart::Test,
        }
    }

    pub fn with_answer(mut self, answer: EntityId) -> Self {
        self.answer = Some(answer);
        self
    }
}

/// Temporal KG with every fact from all splits. Immutable once built.
#[derive(Clone, Debug)]
pub struct TemporalKg {
    entity_count: u32,
    relation_count: u32,
    augmented: bool,
    /// Sorted by (time, subject, relation, object).
    facts: Vec<Quadruple>,
    /// `facts[snapshot_offsets[t]..snapshot_offsets[t + 1]]` is snapshot `t`.
    snapshot_offsets: Vec<usize>,
    by_subject_relation: HashMap<(EntityId, RelationId), Vec<u32>>,
    by_subject: HashMap<EntityId, Vec<u32>>,
    duplicates_dropped: usize,
}

#[derive(Serialize, Deserialize)]
struct StoredKg {
    entity_count: u32,
    relation_count: u32,
    augmented: bool,
    facts: Vec<Quadruple>,
}

impl TemporalKg {
    /// Builds the graph, dropping exact duplicate quadruples.
    pub fn new(entity_count: u32, relation_count: u32, facts: Vec<Quadruple>) -> Result<Self> {
        Self::build(entity_count, relation_count, false, facts)
    }

    fn build(
        entity_count: u32,
        relation_count: u32,
        augmented: bool,
        mut facts: Vec<Quadruple>,
    ) -> Result<Self> {
        let rel_bound = if augmented {
            relation_count * 2
        } else {
            relation_count
        };
        for q in &facts {
            if q.subject >= entity_count || q.object >= entity_count {
                return Err(Error::Validation(format!(
                    "entity out of range in {q:?} (entity count {entity_count})"
                )));
            }
            if q.relation >= rel_bound {
                return Err(Error::Validation(format!(
                    "relation out of range in {q:?} (relation bound {rel_bound})"
                )));
            }
        }
        facts.sort_unstable_by_key(|q| (q.time, q.subject, q.relation, q.object));
        let before = facts.len();
        facts.dedup();
        let duplicates_dropped = before - facts.len();
        if duplicates_dropped > 0 {
            log::warn!("dropped {duplicates_dropped} duplicate quadruples");
        }

        let num_snapshots = facts.last().map_or(0, |q| q.time as usize + 1);
        let mut snapshot_offsets = vec![0usize; num_snapshots + 1];
        for q in &facts {
            snapshot_offsets[q.time as usize + 1] += 1;
        }
        for t in 0..num_snapshots {
            snapshot_offsets[t + 1] += snapshot_offsets[t];
        }

        let mut by_subject_relation: HashMap<(EntityId, RelationId), Vec<u32>> = HashMap::new();
        let mut by_subject: HashMap<EntityId, Vec<u32>> = HashMap::new();
        for (i, q) in facts.iter().enumerate() {
            by_subject_relation
                .entry((q.subject, q.relation))
                .or_default()
                .push(i as u32);
            by_subject.entry(q.subject).or_default().push(i as u32);
        }
        let recency = |facts: &[Quadruple], i: &u32| {
            let q = facts[*i as usize];
            (std::cmp::Reverse(q.time), q.relation, q.object)
        };
        for list in by_subject_relation.values_mut() {
            list.sort_unstable_by_key(|i| recency(&facts, i));
        }
        for list in by_subject.values_mut() {
            list.sort_unstable_by_key(|i| recency(&facts, i));
        }

        Ok(Self {
            entity_count,
            relation_count,
            augmented,
            facts,
            snapshot_offsets,
            by_subject_relation,
            by_subject,
            duplicates_dropped,
        })
    }

    pub fn entity_count(&self) -> u32 {
        self.entity_count
    }

    /// Base relation count, before inverse augmentation.
    pub fn relation_count(&self) -> u32 {
        self.relation_count
    }

    /// Size of the relation vocabulary in use (doubled when augmented).
    pub fn relation_vocab(&self) -> u32 {
        if self.augmented {
            self.relation_count * 2
        } else {
            self.relation_count
        }
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// Inverse of a relation id in the augmented vocabulary.
    pub fn inverse_relation(&self, r: RelationId) -> RelationId {
        if r >= self.relation_count {
            r - self.relation_count
        } else {
            r + self.relation_count
        }
    }

    pub fn facts(&self) -> &[Quadruple] {
        &self.facts
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates_dropped
    }

    pub fn num_snapshots(&self) -> usize {
        self.snapshot_offsets.len().saturating_sub(1)
    }

    pub fn snapshot(&self, t: Time) -> &[Quadruple] {
        let t = t as usize;
        if t >= self.num_snapshots() {
            return &[];
        }
        &self.facts[self.snapshot_offsets[t]..self.snapshot_offsets[t + 1]]
    }

    fn offset_before(&self, t: Time) -> usize {
        let t = (t as usize).min(self.num_snapshots());
        self.snapshot_offsets.get(t).copied().unwrap_or(0)
    }

    /// Facts with `(subject, relation)`, most recent first.
    pub fn by_subject_relation(&self, s: EntityId, r: RelationId) -> impl Iterator<Item = &Quadruple> {
        self.by_subject_relation
            .get(&(s, r))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
            .iter()
            .map(move |&i| &self.facts[i as usize])
    }

    /// Facts with `subject`, most recent first.
    pub fn by_subject(&self, s: EntityId) -> impl Iterator<Item = &Quadruple> {
        self.by_subject
            .get(&s)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
            .iter()
            .map(move |&i| &self.facts[i as usize])
    }

    /// Read-only view of the facts strictly before `t`.
    pub fn history_before(&self, t: Time) -> HistoryView<'_> {
        HistoryView { kg: self, before: t }
    }

    /// Full-graph view (every fact visible).
    pub fn full_view(&self) -> HistoryView<'_> {
        HistoryView {
            kg: self,
            before: Time::MAX,
        }
    }

    /// Objects `o' != answer` such that `(s, r, o', t)` exists anywhere in the dataset.
    pub fn same_time_filter_set(&self, query: &Query) -> HashSet<EntityId> {
        let answer = query.answer;
        self.facts_sr_in(query.subject, query.relation, query.time, query.time + 1)
            .iter()
            .map(|q| q.object)
            .filter(|&o| Some(o) != answer)
            .collect()
    }

    /// Facts with `(s, r)` and `lo <= time < hi`, most recent first.
    pub fn facts_sr_in(&self, s: EntityId, r: RelationId, lo: Time, hi: Time) -> Vec<Quadruple> {
        let Some(list) = self.by_subject_relation.get(&(s, r)) else {
            return Vec::new();
        };
        let slice = self.time_slice(list, lo, hi);
        slice.iter().map(|&i| self.facts[i as usize]).collect()
    }

    fn time_slice<'a>(&self, list: &'a [u32], lo: Time, hi: Time) -> &'a [u32] {
        // list is time-descending
        let start = list.partition_point(|&i| self.facts[i as usize].time >= hi);
        let end = list.partition_point(|&i| self.facts[i as usize].time >= lo);
        if start >= end {
            &[]
        } else {
            &list[start..end]
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let stored = StoredKg {
            entity_count: self.entity_count,
            relation_count: self.relation_count,
            augmented: self.augmented,
            facts: self.facts.clone(),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredKg = serde_json::from_str(text)?;
        Self::build(
            stored.entity_count,
            stored.relation_count,
            stored.augmented,
            stored.facts,
        )
    }
}

/// Adds `(o, r + |R|, s, t)` for every `(s, r, o, t)`.
pub fn augment_inverse(kg: &TemporalKg) -> Result<TemporalKg> {
    if kg.augmented {
        return Err(Error::AlreadyAugmented);
    }
    let nr = kg.relation_count;
    let mut facts = Vec::with_capacity(kg.facts.len() * 2);
    facts.extend_from_slice(&kg.facts);
    facts.extend(
        kg.facts
            .iter()
            .map(|q| Quadruple::new(q.object, q.relation + nr, q.subject, q.time)),
    );
    let mut out = TemporalKg::build(kg.entity_count, nr, true, facts)?;
    out.duplicates_dropped += kg.duplicates_dropped;
    Ok(out)
}

/// The historical graph `G_{<t}`: only facts strictly before `before` are visible.
#[derive(Clone, Copy, Debug)]
pub struct HistoryView<'a> {
    kg: &'a TemporalKg,
    before: Time,
}

impl<'a> HistoryView<'a> {
    pub fn kg(&self) -> &'a TemporalKg {
        self.kg
    }

    pub fn before(&self) -> Time {
        self.before
    }

    pub fn facts(&self) -> &'a [Quadruple] {
        &self.kg.facts[..self.kg.offset_before(self.before)]
    }

    pub fn len(&self) -> usize {
        self.facts().len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts().is_empty()
    }

    /// Narrows the view; never widens it.
    pub fn restrict(&self, t: Time) -> HistoryView<'a> {
        HistoryView {
            kg: self.kg,
            before: self.before.min(t),
        }
    }

    /// Visible facts with `(s, r)`, most recent first.
    pub fn by_subject_relation(&self, s: EntityId, r: RelationId) -> &'a [u32] {
        match self.kg.by_subject_relation.get(&(s, r)) {
            Some(list) => self.kg.time_slice(list, 0, self.before),
            None => &[],
        }
    }

    /// Visible facts with subject `s`, most recent first.
    pub fn by_subject(&self, s: EntityId) -> &'a [u32] {
        match self.kg.by_subject.get(&s) {
            Some(list) => self.kg.time_slice(list, 0, self.before),
            None => &[],
        }
    }

    /// Visible facts with `(s, r)` in `[lo, hi)`, most recent first.
    pub fn sr_in(&self, s: EntityId, r: RelationId, lo: Time, hi: Time) -> &'a [u32] {
        match self.kg.by_subject_relation.get(&(s, r)) {
            Some(list) => self.kg.time_slice(list, lo, hi.min(self.before)),
            None => &[],
        }
    }

    /// Visible facts with subject `s` in `[lo, hi)`, most recent first.
    pub fn subject_in(&self, s: EntityId, lo: Time, hi: Time) -> &'a [u32] {
        match self.kg.by_subject.get(&s) {
            Some(list) => self.kg.time_slice(list, lo, hi.min(self.before)),
            None => &[],
        }
    }

    pub fn fact(&self, idx: u32) -> &'a Quadruple {
        &self.kg.facts[idx as usize]
    }
}

/// Train / valid / test fact lists with their snapshot ranges.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    pub train_times: (Time, Time),
    pub valid_times: (Time, Time),
    pub test_times: (Time, Time),
    /// Non-empty lines read per split file, before deduplication.
    pub lines_read: [usize; 3],
}

impl DatasetSplit {
    pub fn from_parts(
        mut train: Vec<Quadruple>,
        mut valid: Vec<Quadruple>,
        mut test: Vec<Quadruple>,
    ) -> Result<Self> {
        let lines_read = [train.len(), valid.len(), test.len()];
        for (name, part) in [("train", &mut train), ("valid", &mut valid), ("test", &mut test)] {
            if part.is_empty() {
                return Err(Error::EmptySplit(name.to_string()));
            }
            part.sort_unstable_by_key(|q| (q.time, q.subject, q.relation, q.object));
            part.dedup();
        }
        let range = |v: &[Quadruple]| (v[0].time, v[v.len() - 1].time);
        let (train_times, valid_times, test_times) = (range(&train), range(&valid), range(&test));
        if !(train_times.1 < valid_times.0 && valid_times.1 < test_times.0) {
            return Err(Error::Validation(format!(
                "split boundaries not monotonic: train {train_times:?}, valid {valid_times:?}, test {test_times:?}"
            )));
        }
        Ok(Self {
            train,
            valid,
            test,
            train_times,
            valid_times,
            test_times,
            lines_read,
        })
    }

    pub fn part(&self, part: SplitPart) -> &[Quadruple] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Valid => &self.valid,
            SplitPart::Test => &self.test,
        }
    }

    /// Every query in a stable order: for each split, forward queries then
    /// (optionally) inverse queries. `Query::id` is the position in this list.
    pub fn all_queries(&self, with_inverse: bool, relation_count: u32) -> Vec<Query> {
        let mut out = Vec::new();
        for part in [SplitPart::Train, SplitPart::Valid, SplitPart::Test] {
            let facts = self.part(part);
            for q in facts {
                out.push(Query {
                    id: out.len(),
                    subject: q.subject,
                    relation: q.relation,
                    time: q.time,
                    answer: Some(q.object),
                    direction: Direction::Forward,
                    part,
                });
            }
            if with_inverse {
                for q in facts {
                    out.push(Query {
                        id: out.len(),
                        subject: q.object,
                        relation: q.relation + relation_count,
                        time: q.time,
                        answer: Some(q.subject),
                        direction: Direction::Inverse,
                        part,
                    });
                }
            }
        }
        out
    }
}

/// Loads a RE-NET style dataset directory (`train.txt`, `valid.txt`,
/// `test.txt`, optional `stat.txt`). Timestamps are divided by `interval`.
pub fn load_dataset(dir: &Path, interval: u64) -> Result<(TemporalKg, DatasetSplit)> {
    if interval == 0 {
        return Err(Error::Config("interval must be positive".into()));
    }
    let mut parts = Vec::with_capacity(3);
    for name in ["train.txt", "valid.txt", "test.txt"] {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let facts = parse_facts(&path, &text, interval)?;
        if facts.is_empty() {
            return Err(Error::EmptySplit(name.trim_end_matches(".txt").to_string()));
        }
        parts.push(facts);
    }
    let test = parts.pop().unwrap_or_default();
    let valid = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();

    let stat_path = dir.join("stat.txt");
    let (entity_count, relation_count) = if stat_path.exists() {
        let text = fs::read_to_string(&stat_path).map_err(|e| Error::io(&stat_path, e))?;
        let nums: Vec<u32> = text
            .split_whitespace()
            .take(2)
            .map(|tok| {
                tok.parse().map_err(|_| Error::Parse {
                    file: stat_path.clone(),
                    line: 1,
                    msg: format!("non-integer count {tok:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if nums.len() < 2 {
            return Err(Error::Parse {
                file: stat_path,
                line: 1,
                msg: "expected entity and relation counts".into(),
            });
        }
        (nums[0], nums[1])
    } else {
        let all = train.iter().chain(&valid).chain(&test);
        let (mut ne, mut nr) = (0u32, 0u32);
        for q in all {
            ne = ne.max(q.subject + 1).max(q.object + 1);
            nr = nr.max(q.relation + 1);
        }
        (ne, nr)
    };

    let split = DatasetSplit::from_parts(train, valid, test)?;
    let all: Vec<Quadruple> = split
        .train
        .iter()
        .chain(&split.valid)
        .chain(&split.test)
        .copied()
        .collect();
    let mut kg = TemporalKg::new(entity_count, relation_count, all)?;
    kg.duplicates_dropped = split.lines_read.iter().sum::<usize>() - kg.len();
    if kg.duplicates_dropped > 0 {
        log::warn!(
            "{}: {} duplicate quadruples dropped",
            dir.display(),
            kg.duplicates_dropped
        );
    }
    Ok((kg, split))
}

fn parse_facts(path: &Path, text: &str, interval: u64) -> Result<Vec<Quadruple>> {
    let mut out = Vec::new();
    let mut misaligned = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| Error::Parse {
            file: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        if cols.len() < 4 {
            return Err(err(format!("expected at least 4 columns, found {}", cols.len())));
        }
        let mut nums = [0u64; 4];
        for (slot, tok) in nums.iter_mut().zip(&cols[..4]) {
            *slot = tok
                .parse()
                .map_err(|_| err(format!("non-integer field {tok:?}")))?;
        }
        if nums[3] % interval != 0 {
            misaligned += 1;
        }
        let to_u32 = |v: u64| u32::try_from(v).map_err(|_| err(format!("value {v} out of range")));
        out.push(Quadruple::new(
            to_u32(nums[0])?,
            to_u32(nums[1])?,
            to_u32(nums[2])?,
            to_u32(nums[3] / interval)?,
        ));
    }
    if misaligned > 0 {
        log::warn!(
            "{}: {misaligned} timestamps not aligned to interval {interval}; floored",
            path.display()
        );
    }
    Ok(out)
}

/// Writes the split as `train.txt` / `valid.txt` / `test.txt` / `stat.txt`
/// with raw timestamps `time * interval`.
pub fn write_dataset(
    dir: &Path,
    entity_count: u32,
    relation_count: u32,
    split: &DatasetSplit,
    interval: u64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, facts) in [
        ("train.txt", &split.train),
        ("valid.txt", &split.valid),
        ("test.txt", &split.test),
    ] {
        let mut text = String::with_capacity(facts.len() * 16);
        for q in facts {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                q.subject,
                q.relation,
                q.object,
                q.time as u64 * interval
            ));
        }
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("stat.txt");
    fs::write(&path, format!("{entity_count}\t{relation_count}\n")).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kg(rng: &mut ChaCha8Rng, ne: u32, nr: u32, nt: u32, n: usize) -> TemporalKg {
        let facts = (0..n)
            .map(|_| {
                Quadruple::new(
                    rng.gen_range(0..ne),
                    rng.gen_range(0..nr),
                    rng.gen_range(0..ne),
                    rng.gen_range(0..nt),
                )
            })
            .collect();
        TemporalKg::new(ne, nr, facts).unwrap()
    }

    #[test]
    fn augment_adds_inverse_and_doubles() {
        let kg = TemporalKg::new(10, 230, vec![Quadruple::new(3, 5, 7, 4)]).unwrap();
        let aug = augment_inverse(&kg).unwrap();
        assert_eq!(aug.len(), 2);
        assert!(aug.facts().contains(&Quadruple::new(7, 235, 3, 4)));
        assert!(aug.facts().contains(&Quadruple::new(3, 5, 7, 4)));
        assert_eq!(aug.relation_vocab(), 460);
        assert!(matches!(augment_inverse(&aug), Err(Error::AlreadyAugmented)));
    }

    #[test]
    fn history_before_bounds() {
        let kg = TemporalKg::new(
            5,
            2,
            vec![
                Quadruple::new(0, 0, 1, 0),
                Quadruple::new(1, 1, 2, 1),
                Quadruple::new(2, 0, 3, 2),
            ],
        )
        .unwrap();
        assert!(kg.history_before(0).is_empty());
        let view = kg.history_before(2);
        let times: Vec<Time> = view.facts().iter().map(|q| q.time).collect();
        assert_eq!(times, vec![0, 1]);
    }

    #[test]
    fn history_view_matches_brute_force_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let kg = random_kg(&mut rng, 12, 3, 8, 40);
            let t = rng.gen_range(0..10);
            let brute = kg.facts().iter().filter(|q| q.time < t).count();
            let view = kg.history_before(t);
            assert_eq!(view.len(), brute);
            // history_before(t) and facts at >= t partition the fact set
            let rest = kg.facts().iter().filter(|q| q.time >= t).count();
            assert_eq!(view.len() + rest, kg.len());
        }
    }

    #[test]
    fn subject_relation_index_matches_sorted_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let kg = random_kg(&mut rng, 8, 3, 6, 60);
            for s in 0..8 {
                for r in 0..3 {
                    let mut brute: Vec<Quadruple> = kg
                        .facts()
                        .iter()
                        .filter(|q| q.subject == s && q.relation == r)
                        .copied()
                        .collect();
                    brute.sort_by_key(|q| (std::cmp::Reverse(q.time), q.relation, q.object));
                    let indexed: Vec<Quadruple> = kg.by_subject_relation(s, r).copied().collect();
                    assert_eq!(indexed, brute);
                }
            }
        }
    }

    #[test]
    fn filter_set_definition() {
        let kg = TemporalKg::new(
            12,
            2,
            vec![
                Quadruple::new(1, 0, 4, 3),
                Quadruple::new(1, 0, 9, 3),
                Quadruple::new(1, 0, 2, 3),
                Quadruple::new(1, 0, 5, 2),
                Quadruple::new(1, 1, 6, 3),
            ],
        )
        .unwrap();
        let q = Query::open(1, 0, 3).with_answer(2);
        let set = kg.same_time_filter_set(&q);
        assert_eq!(set, HashSet::from([4, 9]));
        assert!(kg.same_time_filter_set(&Query::open(1, 0, 7).with_answer(2)).is_empty());
    }

    #[test]
    fn json_round_trip_preserves_facts_and_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kg = augment_inverse(&random_kg(&mut rng, 10, 3, 5, 50)).unwrap();
        let back = TemporalKg::from_json(&kg.to_json().unwrap()).unwrap();
        assert_eq!(back.facts(), kg.facts());
        assert_eq!(back.relation_vocab(), kg.relation_vocab());
        for s in 0..10 {
            assert_eq!(
                back.by_subject(s).collect::<Vec<_>>(),
                kg.by_subject(s).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn load_toy_dataset_normalizes_time() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), "0\t0\t1\t0\n1\t0\t2\t24\n").unwrap();
        fs::write(dir.path().join("valid.txt"), "2\t1\t3\t48\t0\n").unwrap();
        fs::write(dir.path().join("test.txt"), "3\t1\t0\t72\n").unwrap();
        let (kg, split) = load_dataset(dir.path(), 24).unwrap();
        let times: Vec<Time> = kg.facts().iter().map(|q| q.time).collect();
        assert_eq!(times, vec![0, 1, 2, 3]);
        assert_eq!(kg.entity_count(), 4);
        assert_eq!(kg.relation_count(), 2);
        assert_eq!(split.train_times, (0, 1));
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), "").unwrap();
        fs::write(dir.path().join("valid.txt"), "0\t0\t1\t5\n").unwrap();
        fs::write(dir.path().join("test.txt"), "0\t0\t1\t6\n").unwrap();
        let err = load_dataset(dir.path(), 1).unwrap_err();
        assert!(err.to_string().contains("empty split"), "{err}");

        fs::write(dir.path().join("train.txt"), "0\t0\t1\t1\n0\t0\tx\t2\n").unwrap();
        match load_dataset(dir.path(), 1).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }

        fs::write(dir.path().join("train.txt"), "0\t0\t1\n").unwrap();
        assert!(matches!(load_dataset(dir.path(), 1), Err(Error::Parse { line: 1, .. })));

        fs::write(dir.path().join("train.txt"), "0\t0\t1\t9\n").unwrap();
        assert!(matches!(load_dataset(dir.path(), 1), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicates_are_counted() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.txt"), "0\t0\t1\t0\n0\t0\t1\t0\n").unwrap();
        fs::write(dir.path().join("valid.txt"), "0\t0\t1\t1\n").unwrap();
        fs::write(dir.path().join("test.txt"), "0\t0\t1\t2\n").unwrap();
        let (kg, split) = load_dataset(dir.path(), 1).unwrap();
        assert_eq!(kg.len(), 3);
        assert_eq!(kg.duplicates_dropped(), 1);
        assert_eq!(split.lines_read, [2, 1, 1]);
    }
}
