use std::collections::BTreeSet;

use rand::Rng;

use super::*;
use crate::autodiff::testing::{numeric_grads, rel_errors};
use crate::fusion::{fused_loss, FusionConfig, FusionMode};
use crate::kg::{augment_inverse, Quadruple, RelationId, TemporalKg, Time};
use crate::rules::{ground_rules, mine_rules, static_score, Aggregation, GroundingConfig, MiningConfig};

fn random_kg(rng: &mut ChaCha8Rng, entities: u32, relations: u32, facts: usize, horizon: Time) -> TemporalKg {
    let facts = (0..facts)
        .map(|_| {
            Quadruple::new(
                rng.gen_range(0..entities),
                rng.gen_range(0..relations),
                rng.gen_range(0..entities),
                rng.gen_range(0..horizon),
            )
        })
        .collect();
    augment_inverse(&TemporalKg::new(entities, relations, facts).unwrap()).unwrap()
}

fn gnn_config(dim: usize, hops: usize, prune: usize, cap: usize) -> ModelConfig {
    ModelConfig {
        adapter: AdapterConfig::Gnn(GnnAdapterConfig {
            dim,
            hops,
            prune_budget: prune,
            neighbor_cap: cap,
        }),
        gate: GateKind::Mlp,
    }
}

fn rule_config(dim: usize, similarity: Similarity) -> ModelConfig {
    ModelConfig {
        adapter: AdapterConfig::Rule(RuleAdapterConfig {
            dim,
            lambda: 0.1,
            similarity,
            grounding: GroundingConfig::default(),
        }),
        gate: GateKind::Mlp,
    }
}

/// Checks analytic gradients of the fused loss on `count` random queries with
/// non-empty adapter output.
fn check_gradients(model: &AdapterModel, kg: &TemporalKg, rng: &mut ChaCha8Rng, count: usize) {
    let mut checked = 0;
    let mut tries = 0;
    while checked < count {
        tries += 1;
        assert!(tries < 2000, "too few scorable queries");
        let t = rng.gen_range(3..12);
        let q = Query::open(
            rng.gen_range(0..kg.entity_count()),
            rng.gen_range(0..kg.relation_vocab()),
            t,
        );
        let view = kg.history_before(t);
        if model.distribution(view, &q).is_zero() {
            continue;
        }
        let answer = rng.gen_range(0..kg.entity_count());
        let llm = EntityDistribution::from_weights((0..3).map(|_| (rng.gen_range(0..kg.entity_count()), rng.gen_range(0.1..1.0))));
        let cfg = FusionConfig {
            mode: if checked % 2 == 0 { FusionMode::Mixture } else { FusionMode::Product },
            epsilon: 1e-3,
        };
        let loss_of = |p: &ParamSet| {
            let mut m = model.clone();
            m.params = p.clone();
            let mut tape = Tape::new(&m.params);
            let out = m.forward(&mut tape, view, &q);
            let w = m.gate.weight(&mut tape, m.relation_embeddings(), &q);
            let (l, _) = fused_loss(&mut tape, &llm, &out, w, &cfg, answer);
            tape.scalar(l)
        };
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, view, &q);
        let w = model.gate.weight(&mut tape, model.relation_embeddings(), &q);
        let (l, _) = fused_loss(&mut tape, &llm, &out, w, &cfg, answer);
        let analytic = tape.backward(l);
        let numeric = numeric_grads(&model.params, loss_of, 1e-6);
        for (i, err) in rel_errors(&analytic, &numeric).into_iter().enumerate() {
            assert!(err < 1e-4, "{}: rel err {err}", model.params.tensors()[i].name);
        }
        checked += 1;
    }
}

#[test]
fn gnn_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let kg = random_kg(&mut rng, 8, 3, 40, 12);
    let model = AdapterModel::new(gnn_config(4, 2, 1000, 1000), kg.relation_vocab(), None, 5).unwrap();
    check_gradients(&model, &kg, &mut rng, 20);
}

#[test]
fn rule_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let kg = random_kg(&mut rng, 8, 3, 60, 12);
    let store = mine_rules(kg.full_view(), &MiningConfig::default()).unwrap();
    assert!(!store.is_empty());
    for sim in [Similarity::Cosine, Similarity::Dot] {
        let model = AdapterModel::new(rule_config(4, sim), kg.relation_vocab(), Some(Arc::new(store.clone())), 1).unwrap();
        check_gradients(&model, &kg, &mut rng, 20);
    }
}

fn tanh_mlp_logit(params: &ParamSet, q_rel: RelationId, rel: RelationId, dt: f64) -> f64 {
    let get = |n: &str| params.get(params.id(n).unwrap());
    let mv = |m: &str, x: &[f64]| -> Vec<f64> {
        let t = get(m);
        (0..t.shape[0]).map(|i| t.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    let emb = get("rel_emb");
    let te: Vec<f64> = get("gnn.omega")
        .data
        .iter()
        .zip(&get("gnn.phase").data)
        .map(|(w, p)| (w * dt + p).cos())
        .collect();
    let a = mv("gnn.w_q", emb.row(q_rel as usize));
    let b = mv("gnn.w_r", emb.row(rel as usize));
    let c = mv("gnn.w_t", &te);
    let b1 = &get("gnn.b1").data;
    let w2 = &get("gnn.w2").data;
    (0..a.len()).map(|i| w2[i] * (a[i] + b[i] + c[i] + b1[i]).tanh()).sum::<f64>() + get("gnn.b2").data[0]
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

#[test]
fn two_hop_attention_matches_hand_unrolled_flow() {
    let facts = vec![
        Quadruple::new(0, 0, 1, 8),
        Quadruple::new(0, 1, 2, 6),
        Quadruple::new(1, 1, 3, 5),
        Quadruple::new(1, 0, 2, 3),
        Quadruple::new(2, 0, 3, 4),
        Quadruple::new(0, 0, 3, 10), // not earlier than the query
    ];
    let kg = TemporalKg::new(4, 2, facts).unwrap();
    let mut model = AdapterModel::new(gnn_config(6, 2, 50, 30), 2, None, 3).unwrap();
    // make the bias matter as well
    let b2 = model.params.id("gnn.b2").unwrap();
    model.params.get_mut(b2).data[0] = 0.3;
    let q = Query::open(0, 1, 10);
    let p = &model.params;
    let hop1 = softmax(&[tanh_mlp_logit(p, 1, 0, 2.0), tanh_mlp_logit(p, 1, 1, 4.0)]);
    let (a18, a26) = (hop1[0], hop1[1]);
    let from1 = softmax(&[tanh_mlp_logit(p, 1, 1, 3.0), tanh_mlp_logit(p, 1, 0, 5.0)]);
    let a35 = a18 * from1[0];
    let a23 = a18 * from1[1];
    let a34 = a26; // single edge out of (2, 6)
    let expected = softmax(&[a18, a26 + a23, a35 + a34]);

    let trace = match &model.adapter {
        Adapter::Gnn(g) => g.expand(&model.params, kg.history_before(10), &q),
        _ => unreachable!(),
    };
    let want: BTreeMap<Node, f64> = [((1, 8), a18), ((2, 6), a26), ((3, 5), a35), ((2, 3), a23), ((3, 4), a34)].into();
    assert_eq!(trace.attention.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
    for (n, a) in &want {
        assert!((trace.attention[n] - a).abs() < 1e-12, "{n:?}");
    }
    let dist = model.distribution(kg.history_before(10), &q);
    assert_eq!(dist.support().collect::<Vec<_>>(), vec![1, 2, 3]);
    for (e, p) in [1, 2, 3].into_iter().zip(expected) {
        assert!((dist.get(e) - p).abs() < 1e-12);
    }
}

use std::collections::BTreeMap;

#[test]
fn star_graph_attention_is_uniform() {
    let facts: Vec<_> = (1..=6).map(|o| Quadruple::new(0, 0, o, 4)).collect();
    let kg = TemporalKg::new(7, 1, facts).unwrap();
    let model = AdapterModel::new(gnn_config(8, 1, 50, 30), 1, None, 11).unwrap();
    let dist = model.distribution(kg.history_before(9), &Query::open(0, 0, 9));
    assert_eq!(dist.len(), 6);
    for e in 1..=6 {
        assert!((dist.get(e) - 1.0 / 6.0).abs() < 1e-12);
    }

    // different relations and times, but a zero output layer
    let facts: Vec<_> = (1..=6).map(|o| Quadruple::new(0, o % 3, o, o)).collect();
    let kg = TemporalKg::new(7, 3, facts).unwrap();
    let mut model = AdapterModel::new(gnn_config(8, 1, 50, 30), 3, None, 11).unwrap();
    let w2 = model.params.id("gnn.w2").unwrap();
    model.params.get_mut(w2).data.iter_mut().for_each(|x| *x = 0.0);
    let dist = model.distribution(kg.history_before(9), &Query::open(0, 0, 9));
    for e in 1..=6 {
        assert!((dist.get(e) - 1.0 / 6.0).abs() < 1e-12);
    }
}

fn reachable(kg: &TemporalKg, q: &Query, hops: usize) -> BTreeSet<EntityId> {
    let mut frontier: BTreeSet<(EntityId, Time)> = [(q.subject, q.time)].into();
    let mut seen = BTreeSet::new();
    for _ in 0..hops {
        let mut next = BTreeSet::new();
        for &(e, t) in &frontier {
            for f in kg.facts() {
                if f.subject == e && f.time < t && f.time < q.time {
                    next.insert((f.object, f.time));
                }
            }
        }
        seen.extend(next.iter().map(|n| n.0));
        frontier = next;
    }
    seen
}

#[test]
fn unbounded_expansion_reaches_exactly_the_temporal_neighborhood() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..40 {
        let kg = random_kg(&mut rng, 12, 3, 50, 15);
        let hops = 1 + case % 3;
        let model = AdapterModel::new(gnn_config(4, hops, usize::MAX, usize::MAX), kg.relation_vocab(), None, case as u64).unwrap();
        let q = Query::open(rng.gen_range(0..12), rng.gen_range(0..6), rng.gen_range(1..16));
        let got: BTreeSet<EntityId> = model.candidates(kg.history_before(q.time), &q).into_iter().collect();
        assert_eq!(got, reachable(&kg, &q, hops));
    }
}

#[test]
fn pruning_bounds_frontiers_and_neighbors() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kg = random_kg(&mut rng, 30, 4, 600, 20);
    let model = AdapterModel::new(gnn_config(4, 3, 5, 4), kg.relation_vocab(), None, 0).unwrap();
    let Adapter::Gnn(g) = &model.adapter else { unreachable!() };
    for s in 0..30 {
        let q = Query::open(s, 0, 20);
        let trace = g.expand(&model.params, kg.history_before(20), &q);
        assert!(trace.frontiers.iter().all(|f| f.len() <= 5));
        // first hop touches at most neighbor_cap nodes
        assert!(trace.frontiers.first().map_or(0, Vec::len) <= 4);
        assert!(trace.attention.keys().all(|&(_, t)| t < 20));
    }
}

#[test]
fn static_confidence_mode_ranks_like_static_scoring() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let kg = random_kg(&mut rng, 10, 3, 120, 15);
    let store = Arc::new(mine_rules(kg.full_view(), &MiningConfig::default()).unwrap());
    let model = AdapterModel::new(rule_config(4, Similarity::StaticConfidence), kg.relation_vocab(), Some(store.clone()), 0).unwrap();
    let mut compared = 0;
    for s in 0..10 {
        for r in 0..kg.relation_vocab() {
            let q = Query::open(s, r, 15);
            let view = kg.history_before(15);
            let stat = static_score(&ground_rules(view, &q, &store, &GroundingConfig::default()), &store, 0.1, 15, Aggregation::Sum);
            let ada = model.distribution(view, &q);
            assert_eq!(stat.support().collect::<Vec<_>>(), ada.support().collect::<Vec<_>>());
            for &(a, pa) in stat.entries() {
                for &(b, pb) in stat.entries() {
                    if pa > pb + 1e-12 {
                        assert!(ada.get(a) > ada.get(b));
                        compared += 1;
                    }
                }
            }
        }
    }
    assert!(compared > 0);
}

#[test]
fn empty_history_gives_zero_distributions() {
    let kg = augment_inverse(&TemporalKg::new(5, 2, vec![Quadruple::new(0, 0, 1, 5)]).unwrap()).unwrap();
    let store = Arc::new(mine_rules(kg.full_view(), &MiningConfig::default()).unwrap());
    for cfg in [gnn_config(4, 2, 50, 30), rule_config(4, Similarity::Cosine)] {
        let model = AdapterModel::new(cfg, kg.relation_vocab(), Some(store.clone()), 0).unwrap();
        assert!(model.distribution(kg.history_before(5), &Query::open(0, 0, 5)).is_zero());
        assert!(model.candidates(kg.history_before(3), &Query::open(0, 0, 3)).is_empty());
    }
}

#[test]
fn rule_embedding_of_head_matches_itself() {
    let kg = augment_inverse(&TemporalKg::new(5, 2, vec![Quadruple::new(0, 0, 1, 5)]).unwrap()).unwrap();
    let store = Arc::new(RuleStore::new(Vec::new()));
    let model = AdapterModel::new(rule_config(8, Similarity::Cosine), kg.relation_vocab(), Some(store), 0).unwrap();
    let Adapter::Rule(a) = &model.adapter else { unreachable!() };
    let x = a.embed(&model.params, &[2]);
    assert_eq!(x, a.embed(&model.params, &[2]));
    assert_ne!(x, a.embed(&model.params, &[1, 2]));
}

#[test]
fn checkpoint_round_trip_and_guards() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adapter.ckpt");
    let mut model = AdapterModel::new(gnn_config(6, 2, 50, 30), 4, None, 77).unwrap();
    model.save(&path, "abc").unwrap();
    let (loaded, header) = AdapterModel::load(&path, None, Some("abc")).unwrap();
    assert_eq!(header.config_hash, "abc");
    model.round_to_f32();
    assert_eq!(loaded.params, model.params);
    assert!(matches!(
        AdapterModel::load(&path, None, Some("other")),
        Err(Error::HashMismatch { .. })
    ));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(AdapterModel::load(&path, None, None), Err(Error::Checkpoint(_))));
    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(AdapterModel::load(&path, None, None), Err(Error::Checkpoint(_))));

    let rule = rule_config(4, Similarity::Cosine);
    assert!(matches!(AdapterModel::new(rule, 4, None, 0), Err(Error::MissingArtifact(_))));
}
