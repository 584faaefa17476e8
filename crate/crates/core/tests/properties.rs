use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use biasaudit::math;
use biasaudit::metrics::{delta_kl_pct, kl_divergence, normalized_kl, CategoryDistribution};
use biasaudit::parser::{parse_output, render_pairs};
use biasaudit::promptgen::{build_pool, make_batches, Direction, TaskKind};
use biasaudit::sae::{planted_sae, SaeParams};
use biasaudit::scoring::{build_feature_sets, correlation_scores, cumulative_mass, rank_topk, SourceTask, Strategy as SetStrategy};

fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter_map("all-zero weights", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-9).then(|| w.iter().map(|x| x / s).collect())
    })
}

fn positive_simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    })
}

fn pair_of_simplices() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..6).prop_flat_map(|k| (simplex(k), positive_simplex(k)))
}

fn word() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z' ]{0,10}[A-Za-z]"
}

fn direction() -> impl Strategy<Value = Direction> {
    prop_oneof![Just(Direction::DemoR), Just(Direction::DemoL)]
}

fn random_sae(width: usize, n: usize, seed: u64) -> SaeParams {
    use rand::Rng;
    let mut rng = math::rng(seed);
    let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    SaeParams { layer: 0, width, n_features: n, w_enc: draw(width * n), b_enc: draw(n), w_dec: draw(n * width), b_dec: draw(width) }
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_itself((p, r) in pair_of_simplices()) {
        prop_assert!(kl_divergence(&p, &r).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&r, &r).unwrap().abs() < 1e-12);
        let n = normalized_kl(&p, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&n));
    }

    #[test]
    fn delta_kl_sign_follows_direction(b in 0.001f64..5.0, a in 0.0f64..5.0) {
        let d = delta_kl_pct(b, a).unwrap();
        prop_assert_eq!(d < 0.0, a < b);
        prop_assert!(d >= -100.0);
    }

    #[test]
    fn distributions_normalize(counts in prop::collection::vec(0usize..20, 2..6)) {
        let d = CategoryDistribution { counts: counts.clone() };
        match d.probabilities() {
            Some(p) => {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.iter().all(|x| *x >= 0.0));
            }
            None => prop_assert_eq!(counts.iter().sum::<usize>(), 0),
        }
    }

    #[test]
    fn softmax_normalizes(logits in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = math::softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let lp = math::log_softmax(&logits);
        prop_assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn topk_picks_largest_magnitudes(scores in prop::collection::vec(-3i32..4, 1..40), k in 1usize..50) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let top = rank_topk(&scores, k).unwrap();
        prop_assert_eq!(top.indices.len(), k.min(scores.len()));
        prop_assert_eq!(top.shortfall, k.saturating_sub(scores.len()));
        let chosen: BTreeSet<usize> = top.indices.iter().copied().collect();
        prop_assert_eq!(chosen.len(), top.indices.len());
        let floor = top.indices.iter().map(|&i| scores[i].abs()).fold(f64::INFINITY, f64::min);
        for (i, s) in scores.iter().enumerate() {
            if !chosen.contains(&i) {
                prop_assert!(s.abs() <= floor);
                if s.abs() == floor {
                    prop_assert!(top.indices.iter().all(|&j| scores[j].abs() > floor || j < i));
                }
            }
        }
    }

    #[test]
    fn topk_ignores_input_order(scores in prop::collection::vec(-100.0f64..100.0, 1..30), k in 1usize..30, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..scores.len()).collect();
        perm.shuffle(&mut math::rng(seed));
        let shuffled: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let mags = |s: &[f64], idx: &[usize]| -> Vec<u64> {
            let mut v: Vec<u64> = idx.iter().map(|&i| s[i].abs().to_bits()).collect();
            v.sort_unstable();
            v
        };
        let a = rank_topk(&scores, k).unwrap();
        let b = rank_topk(&shuffled, k).unwrap();
        prop_assert_eq!(mags(&scores, &a.indices), mags(&shuffled, &b.indices));
        prop_assert_eq!(a, rank_topk(&scores, k).unwrap());
    }

    #[test]
    fn feature_set_algebra(
        attr in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 12), 1..3),
        corr in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 12), 3),
        k in 1usize..12,
    ) {
        let attr: BTreeMap<usize, Vec<f64>> = attr.into_iter().enumerate().collect();
        let corr: BTreeMap<usize, Vec<f64>> = corr.into_iter().take(attr.len()).enumerate().collect();
        let source = SourceTask { kind: TaskKind::GenderName, direction: Direction::DemoR };
        let sets = build_feature_sets(&attr, &corr, k, source).unwrap();
        let by: BTreeMap<SetStrategy, _> = sets.iter().map(|s| (s.name, s.members.clone())).collect();
        let (a, c) = (&by[&SetStrategy::Attribution], &by[&SetStrategy::Correlation]);
        prop_assert_eq!(&by[&SetStrategy::Intersection], &a.intersection(c).copied().collect());
        prop_assert_eq!(&by[&SetStrategy::NonOverlap], &a.difference(c).copied().collect());
        for set in &sets {
            for &layer in attr.keys() {
                prop_assert!(set.layer_members(layer).count() <= k);
            }
        }
    }

    #[test]
    fn mass_curve_is_monotone(scores in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let grid: Vec<usize> = (1..=scores.len()).collect();
        let curve = cumulative_mass(0, &scores, &grid).unwrap();
        for w in curve.points.windows(2) {
            prop_assert!(w[1].1 >= w[0].1);
        }
        let last = curve.points.last().unwrap().1;
        if curve.all_zero {
            prop_assert_eq!(last, 0.0);
        } else {
            prop_assert!((last - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn correlations_are_bounded(
        acts in prop::collection::vec(prop::collection::vec(0.0f64..3.0, 5), 4..30),
        labels in prop::collection::vec(any::<bool>(), 30),
    ) {
        let mut labels: Vec<bool> = labels.into_iter().take(acts.len()).collect();
        labels[0] = true;
        labels[1] = false;
        let (r, _) = correlation_scores(&acts, &labels).unwrap();
        prop_assert!(r.iter().all(|v| v.is_finite() && (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn parser_round_trips(pairs in prop::collection::vec((word(), word()), 1..10), dir in direction()) {
        let parsed = parse_output(&render_pairs(&pairs, dir), dir);
        prop_assert!(parsed.unparsed_lines.is_empty());
        let got: Vec<(String, String)> = parsed.pairs.iter().map(|p| (p.item.clone(), p.label.clone())).collect();
        let want: Vec<(String, String)> = pairs.iter().map(|(a, b)| (a.trim().to_string(), b.trim().to_string())).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn parser_accounts_for_every_line(raw in "[a-z \\-\\n]{0,80}", dir in direction()) {
        let parsed = parse_output(&raw, dir);
        let lines = raw.lines().filter(|l| !l.trim().is_empty()).count();
        prop_assert!(parsed.pairs.len() + parsed.unparsed_lines.len() >= lines);
    }

    #[test]
    fn batching_is_duplicate_free(n in 8usize..40, dup in 1usize..5, seed in any::<u64>()) {
        let items: Vec<String> = (0..n).map(|i| format!("item{i}")).collect();
        let pool = build_pool(&items, dup, seed).unwrap();
        prop_assert_eq!(pool.len(), n * dup);
        let b = make_batches(&pool, 8, seed).unwrap();
        for batch in &b.batches {
            prop_assert_eq!(batch.len(), 8);
            prop_assert_eq!(batch.iter().collect::<BTreeSet<_>>().len(), 8);
        }
        prop_assert!(b.dropped.len() < 8 || b.dropped.iter().collect::<BTreeSet<_>>().len() < 8);
        let mut seen: Vec<&String> = b.batches.iter().flatten().chain(&b.dropped).collect();
        let mut all: Vec<&String> = pool.iter().collect();
        seen.sort();
        all.sort();
        prop_assert_eq!(seen, all);
        prop_assert_eq!(&b, &make_batches(&pool, 8, seed).unwrap());
    }

    #[test]
    fn sae_codes_are_nonnegative(x in prop::collection::vec(-2.0f64..2.0, 6), seed in any::<u64>()) {
        let sae = random_sae(6, 10, seed);
        prop_assert!(sae.encode(&x).unwrap().iter().all(|f| *f >= 0.0));
        prop_assert_eq!(sae.decode(&[0.0; 10]).unwrap(), sae.b_dec.clone());
    }

    #[test]
    fn planted_sae_inverts_on_span(coeffs in prop::collection::vec(0.0f64..3.0, 5), seed in any::<u64>()) {
        let (n, w) = (5, 9);
        let basis = math::orthonormal_rows(n, w, &mut math::rng(seed));
        let sae = planted_sae(&basis, n, w, 0).unwrap();
        let mut x = vec![0.0; w];
        for (j, c) in coeffs.iter().enumerate() {
            math::axpy(*c, &basis[j * w..(j + 1) * w], &mut x);
        }
        let f = sae.encode(&x).unwrap();
        for (a, b) in f.iter().zip(&coeffs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let back = sae.reconstruct(&x).unwrap();
        prop_assert!(x.iter().zip(&back).all(|(p, q)| (p - q).abs() < 1e-12));
    }
}
