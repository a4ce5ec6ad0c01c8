use serde::{Deserialize, Serialize};

use crate::kg::EntityId;

/// Sparse probability mass over entity ids.
///
/// Entries are kept sorted by entity id with strictly positive mass. An empty
/// distribution is the explicit "zero distribution" (no prediction).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityDistribution {
    mass: Vec<(EntityId, f64)>,
}

impl EntityDistribution {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn point(e: EntityId) -> Self {
        Self {
            mass: vec![(e, 1.0)],
        }
    }

    /// Normalizes non-negative weights; duplicate ids are summed and
    /// non-positive weights dropped. All-zero input yields the zero distribution.
    pub fn from_weights(weights: impl IntoIterator<Item = (EntityId, f64)>) -> Self {
        let mut mass: Vec<(EntityId, f64)> = weights
            .into_iter()
            .filter(|&(_, w)| w > 0.0 && w.is_finite())
            .collect();
        mass.sort_by_key(|&(e, _)| e);
        let mut merged: Vec<(EntityId, f64)> = Vec::with_capacity(mass.len());
        for (e, w) in mass {
            match merged.last_mut() {
                Some((le, lw)) if *le == e => *lw += w,
                _ => merged.push((e, w)),
            }
        }
        let total: f64 = merged.iter().map(|&(_, w)| w).sum();
        if total <= 0.0 {
            return Self::zero();
        }
        for (_, w) in &mut merged {
            *w /= total;
        }
        Self { mass: merged }
    }

    /// Softmax over scores (logits), computed with max-shift.
    pub fn softmax(scores: impl IntoIterator<Item = (EntityId, f64)>) -> Self {
        let scores: Vec<(EntityId, f64)> = scores.into_iter().collect();
        if scores.is_empty() {
            return Self::zero();
        }
        let max = scores
            .iter()
            .map(|&(_, s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        Self::from_weights(scores.into_iter().map(|(e, s)| (e, (s - max).exp())))
    }

    /// Takes already-normalized sorted entries as-is (used by the autodiff path).
    pub(crate) fn from_sorted_unchecked(mass: Vec<(EntityId, f64)>) -> Self {
        Self { mass }
    }

    pub fn is_zero(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn get(&self, e: EntityId) -> f64 {
        self.mass
            .binary_search_by_key(&e, |&(id, _)| id)
            .map_or(0.0, |i| self.mass[i].1)
    }

    pub fn entries(&self) -> &[(EntityId, f64)] {
        &self.mass
    }

    pub fn support(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.mass.iter().map(|&(e, _)| e)
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().map(|&(_, p)| p).sum()
    }

    /// Highest-mass entity; ties go to the smaller id.
    pub fn argmax(&self) -> Option<EntityId> {
        let mut best: Option<(EntityId, f64)> = None;
        for &(e, p) in &self.mass {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((e, p));
            }
        }
        best.map(|(e, _)| e)
    }

    /// Entities sorted by descending mass (ties by ascending id).
    pub fn ranked(&self) -> Vec<(EntityId, f64)> {
        let mut v = self.mass.clone();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_weights_normalizes_and_merges() {
        let d = EntityDistribution::from_weights([(3, 1.0), (1, 2.0), (3, 1.0), (5, 0.0)]);
        assert_eq!(d.entries(), &[(1, 0.5), (3, 0.5)]);
        assert!(EntityDistribution::from_weights([(1, 0.0)]).is_zero());
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = EntityDistribution::softmax([(1, 0.3), (2, -1.0), (7, 2.0)]);
        let b = EntityDistribution::softmax([(1, 100.3), (2, 99.0), (7, 102.0)]);
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x.0, y.0);
            assert!((x.1 - y.1).abs() < 1e-12);
        }
        assert_eq!(a.argmax(), Some(7));
    }
}
