//! Combination of the language-model and adapter distributions, the
//! query-conditioned gate and the binary cross-entropy objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, ParamId, ParamSet, Tape, Var};
use crate::dist::EntityDistribution;
use crate::kg::{EntityId, Query};

/// Clamp inside the logarithms of the loss.
pub const LOSS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `(1 - w) p_llm + w p_adapter`.
    #[default]
    Mixture,
    /// `(p_llm + eps) (p_adapter + eps)^w`, renormalized.
    Product,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Mixture,
            epsilon: 1e-4,
        }
    }
}

fn union_support(a: &EntityDistribution, b: &EntityDistribution) -> Vec<EntityId> {
    let mut u: Vec<EntityId> = a.support().chain(b.support()).collect();
    u.sort_unstable();
    u.dedup();
    u
}

/// Fuses two distributions with adapter weight `w` in (0, 1). A zero input
/// leaves the other distribution unchanged.
pub fn fuse(p_llm: &EntityDistribution, p_adapter: &EntityDistribution, w: f64, config: &FusionConfig) -> EntityDistribution {
    if p_llm.is_zero() {
        return p_adapter.clone();
    }
    if p_adapter.is_zero() {
        return p_llm.clone();
    }
    let support = union_support(p_llm, p_adapter);
    match config.mode {
        FusionMode::Mixture => EntityDistribution::from_weights(
            support
                .iter()
                .map(|&e| (e, (1.0 - w) * p_llm.get(e) + w * p_adapter.get(e))),
        ),
        FusionMode::Product => {
            let eps = config.epsilon;
            EntityDistribution::from_weights(
                support
                    .iter()
                    .map(|&e| (e, (p_llm.get(e) + eps) * (p_adapter.get(e) + eps).powf(w))),
            )
        }
    }
}

/// `-[log(p_ans + eps) + sum_{j != ans} log(1 - p_j + eps)]` over the support;
/// zero-mass entities contribute nothing.
pub fn bce_loss(fused: &EntityDistribution, answer: EntityId) -> f64 {
    let mut total = (fused.get(answer) + LOSS_EPS).ln();
    for &(e, p) in fused.entries() {
        if e != answer {
            total += (1.0 - p + LOSS_EPS).ln();
        }
    }
    -total
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Sigmoid perceptron over the query relation embedding.
    #[default]
    Mlp,
    /// Plain average of the two distributions.
    FixedHalf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    FixedHalf,
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

impl Gate {
    /// Registers gate parameters of width `dim` when `kind` is `Mlp`.
    pub fn new(kind: GateKind, params: &mut ParamSet, dim: usize, rng: &mut impl rand::Rng) -> Self {
        match kind {
            GateKind::FixedHalf => Gate::FixedHalf,
            GateKind::Mlp => {
                let bound = (6.0 / (2 * dim) as f64).sqrt();
                Gate::Mlp {
                    w1: params.uniform("gate.w1", &[dim, dim], bound, rng),
                    b1: params.zeros("gate.b1", &[dim]),
                    w2: params.uniform("gate.w2", &[dim], (3.0 / dim as f64).sqrt(), rng),
                    b2: params.zeros("gate.b2", &[1]),
                }
            }
        }
    }

    pub fn kind(&self) -> GateKind {
        match self {
            Gate::FixedHalf => GateKind::FixedHalf,
            Gate::Mlp { .. } => GateKind::Mlp,
        }
    }

    /// Adapter weight `w` for `query` on the tape.
    pub fn weight(&self, tape: &mut Tape<'_>, relation_embeddings: ParamId, query: &Query) -> Var {
        match *self {
            Gate::FixedHalf => tape.constant(vec![0.5]),
            Gate::Mlp { w1, b1, w2, b2 } => {
                let e = tape.row(relation_embeddings, query.relation as usize);
                let h = tape.matvec(w1, e);
                let b1 = tape.param(b1);
                let h = tape.add(h, b1);
                let h = tape.tanh(h);
                let w2 = tape.param(w2);
                let s = tape.dot(w2, h);
                let b2 = tape.param(b2);
                let s = tape.add(s, b2);
                tape.sigmoid(s)
            }
        }
    }

    /// Value-only gate weight.
    pub fn weight_value(&self, params: &ParamSet, relation_embeddings: ParamId, query: &Query) -> f64 {
        match self {
            Gate::FixedHalf => 0.5,
            Gate::Mlp { .. } => {
                let mut tape = Tape::new(params);
                let w = self.weight(&mut tape, relation_embeddings, query);
                let v = tape.scalar(w);
                debug_assert!((v - sigmoid(0.0)).abs() <= 0.5);
                v
            }
        }
    }
}

/// Adapter output on a tape: sorted candidate entities and their
/// probabilities (`None` for the zero distribution).
#[derive(Clone, Debug)]
pub struct TapeDistribution {
    pub candidates: Vec<EntityId>,
    pub probs: Option<Var>,
}

impl TapeDistribution {
    pub fn zero() -> Self {
        Self {
            candidates: Vec::new(),
            probs: None,
        }
    }

    pub fn value(&self, tape: &Tape<'_>) -> EntityDistribution {
        match self.probs {
            None => EntityDistribution::zero(),
            Some(p) => EntityDistribution::from_sorted_unchecked(
                self.candidates.iter().copied().zip(tape.value(p).iter().copied()).collect(),
            ),
        }
    }
}

/// Differentiable fusion followed by the BCE loss. Returns the loss node and
/// the fused distribution values.
pub fn fused_loss(
    tape: &mut Tape<'_>,
    p_llm: &EntityDistribution,
    adapter: &TapeDistribution,
    w: Var,
    config: &FusionConfig,
    answer: EntityId,
) -> (Var, EntityDistribution) {
    let Some(ada_probs) = adapter.probs else {
        let loss = tape.constant(vec![bce_loss(p_llm, answer)]);
        return (loss, p_llm.clone());
    };
    let fused = if p_llm.is_zero() {
        ada_probs
    } else {
        let mut support: Vec<EntityId> = p_llm.support().chain(adapter.candidates.iter().copied()).collect();
        support.sort_unstable();
        support.dedup();
        let mut parts = Vec::with_capacity(support.len());
        let mut j = 0;
        for &e in &support {
            if j < adapter.candidates.len() && adapter.candidates[j] == e {
                parts.push(tape.index(ada_probs, j));
                j += 1;
            } else {
                parts.push(tape.constant(vec![0.0]));
            }
        }
        let ada_u = tape.concat(&parts);
        let fused = match config.mode {
            FusionMode::Mixture => {
                let llm = tape.constant(support.iter().map(|&e| p_llm.get(e)).collect());
                let neg = tape.scale(w, -1.0);
                let one_minus = tape.add_const(neg, 1.0);
                let a = tape.mul_scalar(llm, one_minus);
                let b = tape.mul_scalar(ada_u, w);
                tape.add(a, b)
            }
            FusionMode::Product => {
                let eps = config.epsilon;
                let llm = tape.constant(support.iter().map(|&e| p_llm.get(e) + eps).collect());
                let shifted = tape.add_const(ada_u, eps);
                let logs = tape.log(shifted);
                let powed = tape.mul_scalar(logs, w);
                let powed = tape.exp(powed);
                tape.mul(llm, powed)
            }
        };
        let fused = tape.normalize(fused);
        let values = TapeDistribution {
            candidates: support,
            probs: Some(fused),
        };
        return finish_loss(tape, values, answer);
    };
    finish_loss(
        tape,
        TapeDistribution {
            candidates: adapter.candidates.clone(),
            probs: Some(fused),
        },
        answer,
    )
}

fn finish_loss(tape: &mut Tape<'_>, fused: TapeDistribution, answer: EntityId) -> (Var, EntityDistribution) {
    let probs = fused.probs.expect("non-zero fused distribution");
    let neg = tape.scale(probs, -1.0);
    let complement = tape.add_const(neg, 1.0 + LOSS_EPS);
    let logs = tape.log(complement);
    let mut total = tape.sum(logs);
    match fused.candidates.binary_search(&answer) {
        Ok(pos) => {
            let own = tape.index(logs, pos);
            total = tape.sub(total, own);
            let p = tape.index(probs, pos);
            let p = tape.add_const(p, LOSS_EPS);
            let lp = tape.log(p);
            total = tape.add(total, lp);
        }
        Err(_) => {
            total = tape.add_const(total, LOSS_EPS.ln());
        }
    }
    let loss = tape.scale(total, -1.0);
    let values = fused.value(tape);
    (loss, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::testing::{numeric_grads, rel_errors};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(entries: &[(EntityId, f64)]) -> EntityDistribution {
        EntityDistribution::from_weights(entries.iter().copied())
    }

    #[test]
    fn mixture_hand_arithmetic() {
        let f = fuse(
            &dist(&[(0, 0.8), (1, 0.2)]),
            &dist(&[(1, 0.5), (2, 0.5)]),
            0.5,
            &FusionConfig::default(),
        );
        assert!((f.get(0) - 0.4).abs() < 1e-12);
        assert!((f.get(1) - 0.35).abs() < 1e-12);
        assert!((f.get(2) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn degradation_and_idempotence() {
        let a = dist(&[(3, 0.7), (4, 0.3)]);
        for mode in [FusionMode::Mixture, FusionMode::Product] {
            let cfg = FusionConfig { mode, epsilon: 1e-3 };
            assert_eq!(fuse(&EntityDistribution::zero(), &a, 0.3, &cfg), a);
            assert_eq!(fuse(&a, &EntityDistribution::zero(), 0.3, &cfg), a);
            assert!(fuse(&EntityDistribution::zero(), &EntityDistribution::zero(), 0.3, &cfg).is_zero());
            let p = EntityDistribution::point(7);
            let f = fuse(&p, &p, 0.37, &cfg);
            assert_eq!(f.support().collect::<Vec<_>>(), vec![7]);
            assert!((f.get(7) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_monotone_in_w() {
        let llm = dist(&[(0, 0.6), (1, 0.4)]);
        let ada = dist(&[(1, 0.9), (2, 0.1)]);
        let cfg = FusionConfig::default();
        let mut prev = fuse(&llm, &ada, 0.05, &cfg);
        for k in 2..20 {
            let cur = fuse(&llm, &ada, k as f64 * 0.05, &cfg);
            assert!(cur.get(1) > prev.get(1)); // adapter-favoured
            assert!(cur.get(0) < prev.get(0)); // llm-favoured
            prev = cur;
        }
    }

    #[test]
    fn bce_values() {
        assert!(bce_loss(&EntityDistribution::point(3), 3) <= 1e-7);
        let wrong = bce_loss(&EntityDistribution::point(4), 3);
        assert!(wrong.is_finite() && wrong > 30.0);
        let half = dist(&[(3, 0.5), (9, 0.5)]);
        assert!((bce_loss(&half, 3) - 2.0 * 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn gate_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let emb = ps.uniform("rel", &[4, 6], 0.5, &mut rng);
        let gate = Gate::new(GateKind::Mlp, &mut ps, 6, &mut rng);
        let q = Query::open(0, 2, 5);
        let w = gate.weight_value(&ps, emb, &q);
        assert!(w > 0.0 && w < 1.0);
        if let Gate::Mlp { w2, .. } = gate {
            ps.get_mut(w2).data.iter_mut().for_each(|x| *x = 0.0);
        }
        assert_eq!(gate.weight_value(&ps, emb, &q), 0.5);
        assert_eq!(Gate::FixedHalf.weight_value(&ps, emb, &q), 0.5);
    }

    fn random_sparse(rng: &mut ChaCha8Rng, n: u32) -> EntityDistribution {
        let k = rng.gen_range(1..6);
        dist(&(0..k).map(|_| (rng.gen_range(0..n), rng.gen_range(0.01..1.0))).collect::<Vec<_>>())
    }

    #[test]
    fn tape_fusion_matches_plain_fusion_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for case in 0..40 {
            let mut ps = ParamSet::new();
            let emb = ps.uniform("rel", &[3, 5], 0.8, &mut rng);
            let logits = ps.uniform("logits", &[4], 1.0, &mut rng);
            let gate = Gate::new(GateKind::Mlp, &mut ps, 5, &mut rng);
            let llm = if case % 7 == 0 { EntityDistribution::zero() } else { random_sparse(&mut rng, 8) };
            let cands = vec![1, 3, 4, 6];
            let answer = rng.gen_range(0..8);
            let mode = if case % 2 == 0 { FusionMode::Mixture } else { FusionMode::Product };
            let cfg = FusionConfig { mode, epsilon: 1e-3 };
            let q = Query::open(0, 1, 3);
            let run = |t: &mut Tape<'_>| {
                let l = t.param(logits);
                let p = t.softmax(l);
                let ada = TapeDistribution {
                    candidates: cands.clone(),
                    probs: Some(p),
                };
                let w = gate.weight(t, emb, &q);
                let (loss, fused) = fused_loss(t, &llm, &ada, w, &cfg, answer);
                (loss, fused, ada.value(t), t.scalar(w))
            };
            let mut tape = Tape::new(&ps);
            let (loss, fused, ada, w) = run(&mut tape);
            let plain = fuse(&llm, &ada, w, &cfg);
            assert_eq!(plain.support().collect::<Vec<_>>(), fused.support().collect::<Vec<_>>());
            for (a, b) in plain.entries().iter().zip(fused.entries()) {
                assert!((a.1 - b.1).abs() < 1e-12);
            }
            assert!((tape.scalar(loss) - bce_loss(&plain, answer)).abs() < 1e-9);
            let analytic = tape.backward(loss);
            let numeric = numeric_grads(
                &ps,
                |p| {
                    let mut t = Tape::new(p);
                    let (l, ..) = run(&mut t);
                    t.scalar(l)
                },
                1e-6,
            );
            for err in rel_errors(&analytic, &numeric) {
                assert!(err < 1e-4, "rel err {err}");
            }
        }
    }
}
