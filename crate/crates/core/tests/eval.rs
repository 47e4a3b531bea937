use std::collections::BTreeSet;

use proptest::prelude::*;
use tagkit::eval::*;

/// Integer scores so transformed copies keep exactly the same ties.
fn instance() -> impl Strategy<Value = (Vec<i64>, Vec<bool>)> {
    (1usize..60).prop_flat_map(|n| (prop::collection::vec(-20i64..20, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("needs a relevant item", |(_, r)| r.iter().any(|&x| x))
}

fn floats(v: &[i64]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[test]
fn worked_examples() {
    assert_eq!(average_precision(&[3.0, 2.0, 1.0], &[true, false, true]).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
    assert_eq!(average_precision(&[1.0], &[true]).unwrap(), 1.0);
    assert!(matches!(average_precision(&[1.0], &[false]), Err(EvalError::NoRelevant)));
    assert!(matches!(precision_at_k(&[1.0], &[true], 0), Err(EvalError::BadK { .. })));
}

proptest! {
    #[test]
    fn strictly_monotone_maps_keep_ap((scores, rel) in instance(), a in 1i64..5, b in -100i64..100) {
        let base = average_precision(&floats(&scores), &rel).unwrap();
        let affine: Vec<i64> = scores.iter().map(|s| a * s + b).collect();
        let cubed: Vec<i64> = scores.iter().map(|s| s * s * s).collect();
        prop_assert_eq!(average_precision(&floats(&affine), &rel).unwrap(), base);
        prop_assert_eq!(average_precision(&floats(&cubed), &rel).unwrap(), base);
        let squashed: Vec<f64> = scores.iter().map(|&s| 1.0 / (1.0 + (-(s as f64) / 7.0).exp())).collect();
        prop_assert_eq!(average_precision(&squashed, &rel).unwrap(), base);
    }

    #[test]
    fn ap_lies_between_worst_ranking_and_one((scores, rel) in instance()) {
        let ap = average_precision(&floats(&scores), &rel).unwrap();
        let n = rel.len();
        let r = rel.iter().filter(|&&x| x).count();
        let worst = (1..=r).map(|i| i as f64 / (n - r + i) as f64).sum::<f64>() / r as f64;
        prop_assert!(ap <= 1.0 + 1e-15 && ap >= worst - 1e-15, "{} not in [{}, 1]", ap, worst);
    }

    #[test]
    fn shuffles_keeping_order_within_tie_blocks_keep_ap((scores, rel) in instance(), keys in prop::collection::vec(any::<u32>(), 60)) {
        let ap = average_precision(&floats(&scores), &rel).unwrap();
        let n = scores.len();
        // an arbitrary permutation, then each tie block's items are put back
        // into that block's new slots in their original order
        let mut slots: Vec<usize> = (0..n).collect();
        slots.sort_by_key(|&i| keys[i]);
        let mut out = vec![0usize; n];
        let blocks: BTreeSet<i64> = scores.iter().copied().collect();
        for b in blocks {
            let members: Vec<usize> = (0..n).filter(|&i| scores[i] == b).collect();
            let targets: Vec<usize> = (0..n).filter(|&j| scores[slots[j]] == b).collect();
            for (item, slot) in members.into_iter().zip(targets) {
                out[slot] = item;
            }
        }
        let s2: Vec<f64> = out.iter().map(|&i| scores[i] as f64).collect();
        let r2: Vec<bool> = out.iter().map(|&i| rel[i]).collect();
        prop_assert_eq!(average_precision(&s2, &r2).unwrap(), ap);
    }

    #[test]
    fn precision_at_k_counts_top_k((scores, rel) in instance(), pick in any::<prop::sample::Index>()) {
        let k = pick.index(rel.len()) + 1;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].cmp(&scores[a]).then(a.cmp(&b)));
        let hits = order[..k].iter().filter(|&&i| rel[i]).count();
        prop_assert_eq!(precision_at_k(&floats(&scores), &rel, k).unwrap(), hits as f64 / k as f64);
    }

    #[test]
    fn subset_map_is_mean_of_subset_aps(seed in any::<u64>(), tags in 2usize..8) {
        let mut preds = RankedPredictions::default();
        for t in 0..tags {
            for i in 0..20u64 {
                let v = seed.rotate_left((t * 7 + i as usize) as u32) ^ (i * 2654435761);
                preds.add_score(&format!("i{i}"), &format!("t{t}"), (v % 13) as f64);
                if v % 3 == 0 {
                    preds.add_truth(&format!("i{i}"), &format!("t{t}"));
                }
            }
        }
        let subset: BTreeSet<String> = (0..tags).step_by(2).map(|t| format!("t{t}")).collect();
        let aps = preds.per_tag_ap(Some(&subset)).unwrap();
        prop_assume!(!aps.is_empty());
        let mean = aps.values().sum::<f64>() / aps.len() as f64;
        prop_assert_eq!(mean_ap(&preds, Some(&subset)).unwrap(), mean);
        for (tag, ap) in &aps {
            prop_assert_eq!(Some(*ap), preds.tag_ap(tag).unwrap());
        }
    }
}

#[test]
fn unknown_subset_tag_is_an_error() {
    let mut preds = RankedPredictions::default();
    preds.add_score("a", "dog", 1.0);
    preds.add_truth("a", "dog");
    let subset: BTreeSet<String> = ["cat".to_string()].into();
    assert!(matches!(mean_ap(&preds, Some(&subset)), Err(EvalError::UnknownTag(_))));
}
