mod common;

use std::collections::{BTreeSet, VecDeque};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use relsift::attnmap::{kl_divergence, localized_context_distribution};
use relsift::corpus::{load_corpus, make_folds, Corpus, Label, LoadMode, SentenceRecord, Span};
use relsift::depgraph::{
    check_assumption, sard_predict, shortest_dependency_path, Assumption, ConjMode, DepTree, SardConfig,
};
use relsift::pairgen::{estimate_prior_from_acceptance, generate_pairs, split_pointwise, LabelSource};
use relsift::riskmin::head::{LinearHead, Mode};
use relsift::riskmin::loss::logistic_loss;
use relsift::riskmin::{
    loss_noisy_unbiased, risk_pcomp_corrected, risk_pcomp_unbiased, Correction, EstimatorConfig, Method,
    NoiseRates, Objective,
};

const UPOS: [&str; 5] = ["VERB", "NOUN", "CCONJ", "ADP", "SCONJ"];

/// Random tree: a shuffled order where each node attaches to an earlier one.
fn arb_tree() -> impl Strategy<Value = (DepTree, Span, Span)> {
    (3usize..14, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut heads = vec![0usize; n];
        for k in 1..n {
            heads[order[k]] = order[rng.random_range(0..k)] + 1;
        }
        let upos: Vec<&str> = (0..n).map(|_| UPOS[rng.random_range(0..UPOS.len())]).collect();
        let tree = DepTree::from_heads("t", &upos, &heads).unwrap();
        let cut = rng.random_range(1..n);
        let e1 = Span::new(rng.random_range(0..cut), cut - 1);
        let s2 = rng.random_range(cut..n);
        let e2 = Span::new(s2, rng.random_range(s2..n));
        (tree, e1, e2)
    })
}

fn bfs_distance(tree: &DepTree, a: usize, b: usize) -> usize {
    let n = tree.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        if let Some(h) = tree.head(i) {
            adj[i].push(h);
            adj[h].push(i);
        }
    }
    let mut dist = vec![usize::MAX; n];
    dist[a] = 0;
    let mut q = VecDeque::from([a]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                q.push_back(v);
            }
        }
    }
    dist[b]
}

fn arb_dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-9;
        v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
    })
}

/// Pairwise sets always come in equal sizes.
fn paired_scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..20).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #[test]
    fn sdp_is_symmetric((tree, e1, e2) in arb_tree()) {
        let fwd = shortest_dependency_path(&tree, e1, e2).unwrap();
        let mut back = shortest_dependency_path(&tree, e2, e1).unwrap().path;
        back.reverse();
        prop_assert_eq!(fwd.path, back);
    }

    #[test]
    fn sdp_matches_bfs((tree, e1, e2) in arb_tree()) {
        let sdp = shortest_dependency_path(&tree, e1, e2).unwrap();
        let (a, b) = (tree.anchor(e1).unwrap(), tree.anchor(e2).unwrap());
        prop_assert_eq!(sdp.path[0], a);
        prop_assert_eq!(*sdp.path.last().unwrap(), b);
        prop_assert_eq!(sdp.path.len() - 1, bfs_distance(&tree, a, b));
        for w in sdp.path.windows(2) {
            prop_assert!(tree.head(w[0]) == Some(w[1]) || tree.head(w[1]) == Some(w[0]));
        }
        prop_assert_eq!(sdp.path.iter().collect::<BTreeSet<_>>().len(), sdp.path.len());
    }

    #[test]
    fn assumptions_nest((tree, e1, e2) in arb_tree()) {
        let sdp = shortest_dependency_path(&tree, e1, e2).unwrap();
        if check_assumption(Assumption::RootVerb, &sdp, &tree) {
            prop_assert!(check_assumption(Assumption::RootWord, &sdp, &tree));
            prop_assert!(check_assumption(Assumption::Verb, &sdp, &tree));
        }
    }

    #[test]
    fn no_conjunction_rule_is_stricter((tree, e1, e2) in arb_tree(), a in 1u8..=3, deprel in any::<bool>()) {
        let mode = if deprel { ConjMode::Deprel } else { ConjMode::Upos };
        let h1 = sard_predict(&tree, e1, e2, &SardConfig::new(a, 1).unwrap().with_conj_mode(mode)).unwrap();
        let h2 = sard_predict(&tree, e1, e2, &SardConfig::new(a, 2).unwrap().with_conj_mode(mode)).unwrap();
        if h2 == Label::Positive {
            prop_assert_eq!(h1, Label::Positive);
        }
    }

    #[test]
    fn lcd_normalized_symmetric_scale_free(
        (a1, a2) in (2usize..30).prop_flat_map(|n| (arb_dist(n), arb_dist(n))),
        c in 1e-3f64..1e3,
    ) {
        let l = localized_context_distribution(&a1, &a2);
        prop_assert!(!l.degenerate);
        prop_assert!((l.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(l.weights.iter().all(|&w| w >= 0.0));
        let r = localized_context_distribution(&a2, &a1);
        let scaled: Vec<f64> = a1.iter().map(|x| x * c).collect();
        let s = localized_context_distribution(&scaled, &a2);
        for i in 0..a1.len() {
            prop_assert!((r.weights[i] - l.weights[i]).abs() < 1e-12);
            prop_assert!((s.weights[i] - l.weights[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self((p, q) in (2usize..20).prop_flat_map(|n| (arb_dist(n), arb_dist(n)))) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn corpus_round_trip(labels in prop::collection::vec(prop::option::of(any::<bool>()), 1..30)) {
        let records: Vec<SentenceRecord> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| SentenceRecord {
                id: format!("r{i}"),
                tokens: (0..i % 5 + 2).map(|k| format!("tok \"{k}\"")).collect(),
                e1: Span::single(0),
                e2: Span::single(i % 5 + 1),
                gold_label: l.map(Label::from_sign),
            })
            .collect();
        let corpus = Corpus::new(records).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        corpus.write_to(&path).unwrap();
        let back = load_corpus(&path, LoadMode::Strict).unwrap();
        prop_assert_eq!(back.records(), corpus.records());
    }

    #[test]
    fn folds_partition_the_corpus(n in 2usize..200, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let labels: Vec<Label> = (0..n).map(|i| Label::from_sign(i % 3 == 0)).collect();
        let corpus = common::label_corpus(&labels);
        let plan = make_folds(&corpus, k, seed).unwrap();
        let mut seen = vec![0usize; n];
        for f in 0..k {
            let test = plan.test_indices(f);
            let train = plan.train_indices(f);
            prop_assert_eq!(test.len() + train.len(), n);
            for i in test {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn prior_roots_are_mirror_images(pi in 0.05f64..0.95) {
        let drawn = 1_000_000u64;
        let accepted = ((1.0 - pi * (1.0 - pi)) * drawn as f64).round() as u64;
        let (lo, hi) = estimate_prior_from_acceptance(accepted, drawn).unwrap();
        prop_assert!((lo + hi - 1.0).abs() < 1e-12);
        let target = pi.min(1.0 - pi);
        prop_assert!((lo - target).abs() < 1e-3);
    }

    #[test]
    fn risk_ignores_score_order(
        pos in prop::collection::vec(-5.0f64..5.0, 1..20),
        neg in prop::collection::vec(-5.0f64..5.0, 1..20),
        pi in 0.05f64..0.95,
        method in 0usize..Method::ALL.len(),
    ) {
        let m = Method::ALL[method];
        let mut cfg = EstimatorConfig::new(m, pi, 0);
        if m == Method::Uu {
            cfg = cfg.with_uu_thetas(0.8, 0.2);
        }
        let obj = Objective::new(&cfg, m.uses_pruning().then_some((1.2, 1.1))).unwrap();
        let mut rp = pos.clone();
        let mut rn = neg.clone();
        rp.reverse();
        rn.rotate_left(neg.len() / 2);
        prop_assert!((obj.risk(&pos, &neg) - obj.risk(&rp, &rn)).abs() < 1e-12);
    }

    #[test]
    fn label_flip_duality(
        (pos, neg) in paired_scores(),
        pi in 0.05f64..0.95,
    ) {
        let flipped_pos: Vec<f64> = neg.iter().map(|s| -s).collect();
        let flipped_neg: Vec<f64> = pos.iter().map(|s| -s).collect();
        let a = risk_pcomp_unbiased(&pos, &neg, pi).unwrap();
        let b = risk_pcomp_unbiased(&flipped_pos, &flipped_neg, 1.0 - pi).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn corrections_agree_when_brackets_nonnegative(
        (pos, neg) in paired_scores(),
        pi in 0.05f64..0.95,
    ) {
        let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&s| f(s)).sum::<f64>() / v.len() as f64;
        let lp = |s: f64| logistic_loss(s);
        let ln = |s: f64| logistic_loss(-s);
        let first = mean(&pos, &lp) - (1.0 - pi) * mean(&neg, &lp);
        let second = mean(&neg, &ln) - pi * mean(&pos, &ln);
        prop_assume!(first >= 0.0 && second >= 0.0);
        let u = risk_pcomp_unbiased(&pos, &neg, pi).unwrap();
        for g in [Correction::Relu, Correction::Abs] {
            prop_assert!((risk_pcomp_corrected(&pos, &neg, pi, g).unwrap() - u).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_loss_reduces_without_noise(s in -20.0f64..20.0, positive in any::<bool>()) {
        let y = Label::from_sign(positive);
        let got = loss_noisy_unbiased(s, y, NoiseRates::ZERO).unwrap();
        prop_assert!((got - logistic_loss(y.as_f64() * s)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dropout_preserves_expected_score(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut head = LinearHead::new(d, 0.0, &mut rng).unwrap();
        let clean = head.forward(&refs, Mode::Train, &mut rng).unwrap().scores;
        head.set_dropout(0.3).unwrap();
        let draws = 20_000;
        let mut mean = vec![0.0; rows.len()];
        let mut hits_zero = false;
        for _ in 0..draws {
            let s = head.forward(&refs, Mode::Train, &mut rng).unwrap().scores;
            for (m, v) in mean.iter_mut().zip(&s) {
                *m += v / draws as f64;
            }
            hits_zero |= s.iter().zip(&clean).any(|(a, b)| a != b);
        }
        prop_assert!(hits_zero);
        let bound = 6.0 * head.params.w.iter().map(|w| w.abs()).sum::<f64>() * 3.0 / (draws as f64).sqrt();
        for (m, c) in mean.iter().zip(&clean) {
            prop_assert!((m - c).abs() < bound, "mean {m} vs clean {c}");
        }
    }
}

/// Over a fixed pool, the pairwise-comparison risk averaged across many small
/// batches matches the supervised risk of that pool.
#[test]
fn pcomp_risk_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let f = |x: f64| 1.5 * x - 0.2;
    let labels: Vec<Label> = (0..2000).map(|_| Label::from_sign(rng.random::<f64>() < 0.4)).collect();
    let xs: Vec<f64> = labels.iter().map(|l| l.as_f64() + noise.sample(&mut rng)).collect();
    let pi = labels.iter().filter(|l| l.is_positive()).count() as f64 / labels.len() as f64;
    let truth = labels
        .iter()
        .zip(&xs)
        .map(|(l, &x)| logistic_loss(l.as_f64() * f(x)))
        .sum::<f64>()
        / labels.len() as f64;

    let batches = 10_000;
    let mut vals = Vec::with_capacity(batches);
    for b in 0..batches {
        let (pairs, _) = generate_pairs(&labels, 8, b as u64).unwrap();
        let sets = split_pointwise(&pairs, LabelSource::Gold).unwrap();
        let sp: Vec<f64> = sets.pos_set.iter().map(|&i| f(xs[i])).collect();
        let sn: Vec<f64> = sets.neg_set.iter().map(|&i| f(xs[i])).collect();
        vals.push(risk_pcomp_unbiased(&sp, &sn, pi).unwrap());
    }
    let m = vals.iter().sum::<f64>() / batches as f64;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (batches - 1) as f64;
    let se = (var / batches as f64).sqrt();
    assert!((m - truth).abs() < 3.0 * se, "mean {m} truth {truth} se {se}");
}
