use confnet_dst::confnet::{
    best_path, from_transcript, n_best_paths, prune, truncate_arcs, Arc, ArcSet, ConfusionNetwork, EPSILON,
};
use confnet_dst::datagen::{default_ontology, generate_corpus, NoiseModel};
use confnet_dst::embeddings::{EmbeddingTable, Vocabulary};
use confnet_dst::encoder::{encode_network, EncoderParams, EncoderVariant};
use confnet_dst::evalbench::{evaluate, Mode};
use confnet_dst::model::Model;
use confnet_dst::numerics::{matvec, softmax, Mat, Rng};
use proptest::prelude::*;

const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

/// Arc sets as (word index, raw weight) pairs; duplicate words are merged away.
fn network() -> impl Strategy<Value = ConfusionNetwork> {
    let arc = (0..WORDS.len() + 1, 0.01f64..1.0);
    let position = prop::collection::vec(arc, 1..5);
    prop::collection::vec(position, 1..6).prop_map(|positions| {
        let sets = positions
            .into_iter()
            .map(|arcs| {
                let mut seen = std::collections::BTreeMap::new();
                for (w, s) in arcs {
                    seen.entry(w).or_insert(s);
                }
                let total: f64 = seen.values().sum();
                let arcs = seen
                    .into_iter()
                    .map(|(w, s)| Arc::new(WORDS.get(w).copied().unwrap_or(EPSILON), s / total))
                    .collect();
                ArcSet::new(arcs).unwrap()
            })
            .collect();
        ConfusionNetwork::new("p", sets)
    })
}

fn table(dim: usize, seed: u64) -> EmbeddingTable {
    let vocab = Vocabulary::sorted(WORDS.iter().map(|w| w.to_string()).chain([EPSILON.to_string()]));
    EmbeddingTable::build(vocab, dim, &mut Rng::new(seed)).unwrap()
}

fn brute_force(net: &ConfusionNetwork) -> Vec<(Vec<String>, f64)> {
    let mut paths: Vec<(Vec<String>, f64, Vec<usize>)> = vec![(vec![], 1.0, vec![])];
    for pos in net.positions() {
        paths = paths
            .iter()
            .flat_map(|(t, s, ix)| {
                pos.iter().enumerate().map(move |(i, a)| {
                    let mut t = t.clone();
                    if a.token != EPSILON {
                        t.push(a.token.clone());
                    }
                    let mut ix = ix.clone();
                    ix.push(i);
                    (t, s * a.score, ix)
                })
            })
            .collect();
    }
    paths.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.2.cmp(&b.2)));
    paths.into_iter().map(|(t, s, _)| (t, s)).collect()
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(xs in prop::collection::vec(-20.0f64..20.0, 1..10), c in -50.0f64..50.0) {
        let p = softmax(&xs);
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let q = softmax(&shifted);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(q.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matvec_distributes(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
        let mut rng = Rng::new(seed);
        let m = Mat::uniform(rows, cols, 1.0, &mut rng);
        let u: Vec<f64> = (0..cols).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let v: Vec<f64> = (0..cols).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let lhs = matvec(&m, &sum).unwrap();
        let (mu, mv) = (matvec(&m, &u).unwrap(), matvec(&m, &v).unwrap());
        for i in 0..rows {
            prop_assert!((lhs[i] - mu[i] - mv[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn prune_is_idempotent_subset(net in network(), thr in 0.0f64..0.6) {
        let once = prune(&net, thr).unwrap();
        prop_assert_eq!(&prune(&once, thr).unwrap(), &once);
        prop_assert_eq!(once.len(), net.len());
        for (p, q) in once.positions().iter().zip(net.positions()) {
            prop_assert_eq!(p.top(), q.top());
            prop_assert!(p.iter().all(|a| q.arcs().contains(a)));
        }
    }

    #[test]
    fn nbest_matches_brute_force(net in network(), n in 1usize..12) {
        let got = n_best_paths(&net, n);
        let want = brute_force(&net);
        prop_assert_eq!(got.len(), n.min(want.len()));
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(&g.tokens, &w.0);
            prop_assert!((g.score - w.1).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_keeps_best_path(net in network(), k in 1usize..4) {
        prop_assert_eq!(best_path(&truncate_arcs(&net, k).unwrap()).tokens, best_path(&net).tokens);
    }

    #[test]
    fn arc_order_does_not_matter(net in network(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let shuffled: Vec<ArcSet> = net
            .positions()
            .iter()
            .map(|p| {
                let mut arcs = p.arcs().to_vec();
                rng.shuffle(&mut arcs);
                ArcSet::new(arcs).unwrap()
            })
            .collect();
        prop_assert_eq!(ConfusionNetwork::new("p", shuffled), net);
    }

    #[test]
    fn v1_is_homogeneous_in_scores(net in network(), c in 0.1f64..1.0) {
        let t = table(6, 1);
        let p = EncoderParams::init(EncoderVariant::V1, 6, &mut Rng::new(2));
        let scaled: Vec<ArcSet> = net
            .positions()
            .iter()
            .map(|pos| ArcSet::new(pos.iter().map(|a| Arc::new(a.token.clone(), a.score * c)).collect()).unwrap())
            .collect();
        let base = encode_network(&p, &t, &net).unwrap();
        let other = encode_network(&p, &t, &ConfusionNetwork::new("p", scaled)).unwrap();
        for (x, y) in base.iter().zip(&other) {
            for (a, b) in x.embedding.iter().zip(y.embedding.iter()) {
                prop_assert!((a * c - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn v3_ignores_scores(net in network(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let t = table(6, 3);
        let p = EncoderParams::init(EncoderVariant::V3, 6, &mut Rng::new(4));
        let rescored: Vec<ArcSet> = net
            .positions()
            .iter()
            .map(|pos| {
                let k = pos.len() as f64;
                ArcSet::new(pos.iter().map(|a| Arc::new(a.token.clone(), (0.01 + 0.99 * rng.uniform()) / k)).collect()).unwrap()
            })
            .collect();
        let base = encode_network(&p, &t, &net).unwrap();
        let other = encode_network(&p, &t, &ConfusionNetwork::new("p", rescored)).unwrap();
        for (x, y) in base.iter().zip(&other) {
            for (a, b) in x.embedding.iter().zip(y.embedding.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn asr_list_prediction_is_convex(net in network(), n in 1usize..6, seed in any::<u64>()) {
        let ontology = default_ontology(2, 2).unwrap();
        let model = Model::init(ontology, table(6, 5), EncoderVariant::V1, 4, 0.0, Default::default(), &mut Rng::new(seed));
        let hyps = n_best_paths(&net, n);
        let combined = model.predict_asr_nlist(&hyps).unwrap();
        let singles: Vec<_> = hyps.iter().map(|h| model.predict_asr_nlist(std::slice::from_ref(h)).unwrap()).collect();
        for (k, p) in combined.probs.iter().enumerate() {
            let lo = singles.iter().map(|s| s.probs[k]).fold(f64::INFINITY, f64::min);
            let hi = singles.iter().map(|s| s.probs[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*p >= lo - 1e-12 && *p <= hi + 1e-12);
        }
    }
}

#[test]
fn single_hypothesis_list_matches_lifted_network() {
    let ontology = default_ontology(2, 3).unwrap();
    let corpus = generate_corpus(
        &ontology,
        15,
        &NoiseModel { substitution_prob: 0.5, max_confusions: 3, truth_drop_prob: 0.3 },
        &mut Rng::new(8),
    )
    .unwrap();
    let vocab = Vocabulary::sorted(
        corpus.iter().flat_map(|d| &d.turns).flat_map(|t| t.confnet.positions().iter().flat_map(|p| p.iter().map(|a| a.token.clone()))),
    );
    let t = EmbeddingTable::build(vocab, 8, &mut Rng::new(1)).unwrap();
    let model = Model::init(ontology, t, EncoderVariant::V1, 8, 0.0, Default::default(), &mut Rng::new(2));
    let asr = evaluate(&model, &corpus, Mode::AsrN(1), 0.5).unwrap();
    let mut lifted = corpus.clone();
    for turn in lifted.iter_mut().flat_map(|d| d.turns.iter_mut()) {
        let pre = model.preprocess.apply(&turn.confnet).unwrap();
        let tokens = best_path(&pre).tokens;
        let tokens = if tokens.is_empty() { vec![EPSILON.to_string()] } else { tokens };
        turn.confnet = from_transcript(turn.confnet.utterance_id.clone(), &tokens).unwrap();
    }
    let cn = evaluate(&model, &lifted, Mode::Confnet { max_arcs: None }, 0.5).unwrap();
    assert_eq!(asr, cn);
}

#[test]
fn evaluation_ignores_dialogue_order() {
    let ontology = default_ontology(3, 4).unwrap();
    let mut corpus = generate_corpus(&ontology, 25, &NoiseModel::clean(), &mut Rng::new(9)).unwrap();
    let vocab = Vocabulary::sorted(corpus.iter().flat_map(|d| &d.turns).flat_map(|t| t.transcript.clone()));
    let t = EmbeddingTable::build(vocab, 8, &mut Rng::new(1)).unwrap();
    let model = Model::init(ontology, t, EncoderVariant::V2, 8, 0.0, Default::default(), &mut Rng::new(2));
    let before = evaluate(&model, &corpus, Mode::Confnet { max_arcs: None }, 0.5).unwrap();
    corpus.reverse();
    assert_eq!(before, evaluate(&model, &corpus, Mode::Confnet { max_arcs: None }, 0.5).unwrap());
}
