use kltrace_core::metrics::*;
use proptest::prelude::*;

/// Independent enumeration: per threshold, classify each record into exactly
/// one outcome cell of the (pred visible, gt visible, close) table.
struct Oracle {
    ad: Option<f64>,
    delta: Option<f64>,
    aj: f64,
    oa: f64,
}

fn oracle(records: &[EvalRecord], thresholds: &[f64]) -> Oracle {
    let mut dist_sum = 0.0;
    let mut n_vis = 0usize;
    for r in records {
        if !r.gt_occluded {
            let dx = r.pred[0] - r.gt[0];
            let dy = r.pred[1] - r.gt[1];
            dist_sum += (dx * dx + dy * dy).sqrt();
            n_vis += 1;
        }
    }
    let mut delta_sum = 0.0;
    let mut aj_sum = 0.0;
    for &t in thresholds {
        let mut within = 0usize;
        let mut counts = [0usize; 3]; // tp, fp, fn
        for r in records {
            let dx = r.pred[0] - r.gt[0];
            let dy = r.pred[1] - r.gt[1];
            let close = (dx * dx + dy * dy).sqrt() <= t;
            if !r.gt_occluded && close {
                within += 1;
            }
            match (r.pred_occluded, r.gt_occluded, close) {
                (false, false, true) => counts[0] += 1,
                (false, false, false) => {
                    counts[1] += 1;
                    counts[2] += 1;
                }
                (false, true, _) => counts[1] += 1,
                (true, false, _) => counts[2] += 1,
                (true, true, _) => {}
            }
        }
        if n_vis > 0 {
            delta_sum += within as f64 / n_vis as f64;
        }
        let den = counts.iter().sum::<usize>();
        aj_sum += if den == 0 { 1.0 } else { counts[0] as f64 / den as f64 };
    }
    let hits = records.iter().filter(|r| r.pred_occluded == r.gt_occluded).count();
    Oracle {
        ad: (n_vis > 0).then(|| dist_sum / n_vis as f64),
        delta: (n_vis > 0).then(|| delta_sum / thresholds.len() as f64),
        aj: aj_sum / thresholds.len() as f64,
        oa: hits as f64 / records.len() as f64,
    }
}

fn record() -> impl Strategy<Value = EvalRecord> {
    // Quarter-pixel offsets keep distances representable and ties exact.
    (-40i32..40, -40i32..40, any::<bool>(), any::<bool>()).prop_map(|(dx, dy, po, go)| EvalRecord {
        query: 0,
        pred: [10.0 + dx as f64 * 0.25, 5.0 + dy as f64 * 0.25],
        pred_occluded: po,
        gt: [10.0, 5.0],
        gt_occluded: go,
    })
}

proptest! {
    #[test]
    fn matches_brute_force(records in prop::collection::vec(record(), 1..=20)) {
        let t = DEFAULT_THRESHOLDS;
        let o = oracle(&records, &t);
        let r = MetricsReport::compute(&records, &t).unwrap();
        prop_assert_eq!(r.ad, o.ad);
        prop_assert_eq!(r.delta_avg, o.delta);
        prop_assert_eq!(r.aj, o.aj);
        prop_assert_eq!(r.oa, o.oa);
    }

    #[test]
    fn ranges_and_permutation(records in prop::collection::vec(record(), 1..=20), rot in 0usize..20) {
        let t = DEFAULT_THRESHOLDS;
        let r = MetricsReport::compute(&records, &t).unwrap();
        for v in [r.aj, r.oa].into_iter().chain(r.delta_avg) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(r.ad.is_none_or(|a| a >= 0.0));
        let mut shuffled = records.clone();
        shuffled.rotate_left(rot % records.len());
        shuffled.reverse();
        let s = MetricsReport::compute(&shuffled, &t).unwrap();
        prop_assert_eq!(s.ad.map(|a| (a * 1e9).round()), r.ad.map(|a| (a * 1e9).round()));
        prop_assert_eq!(s.aj, r.aj);
        prop_assert_eq!(s.delta_avg, r.delta_avg);
        prop_assert_eq!(s.oa, r.oa);
    }

    #[test]
    fn enlarging_thresholds_never_lowers_delta(records in prop::collection::vec(record(), 1..=20), i in 0usize..5, bump in 0.0f64..10.0) {
        prop_assume!(records.iter().any(|r| !r.gt_occluded));
        let t = DEFAULT_THRESHOLDS;
        let mut bigger = t;
        bigger[i] += bump;
        bigger.sort_by(f64::total_cmp);
        prop_assert!(delta_avg(&records, &bigger).unwrap() >= delta_avg(&records, &t).unwrap());
    }

    #[test]
    fn jaccard_bounded_by_delta_when_flags_are_right(records in prop::collection::vec(record(), 1..=20)) {
        let visible: Vec<EvalRecord> = records
            .into_iter()
            .map(|r| EvalRecord { pred_occluded: false, gt_occluded: false, ..r })
            .collect();
        let t = DEFAULT_THRESHOLDS;
        prop_assert!(average_jaccard(&visible, &t).unwrap() <= delta_avg(&visible, &t).unwrap() + 1e-12);
    }
}

#[test]
fn hand_fixtures_match_oracle() {
    let two = vec![
        EvalRecord {
            query: 0,
            pred: [1.5, 0.0],
            pred_occluded: false,
            gt: [0.0, 0.0],
            gt_occluded: false,
        },
        EvalRecord {
            query: 1,
            pred: [0.0, 3.0],
            pred_occluded: false,
            gt: [0.0, 0.0],
            gt_occluded: false,
        },
    ];
    let r = MetricsReport::compute(&two, &DEFAULT_THRESHOLDS).unwrap();
    let o = oracle(&two, &DEFAULT_THRESHOLDS);
    assert_eq!(r.ad, Some(2.25));
    assert_eq!(r.delta_avg, o.delta);
    assert!((r.delta_avg.unwrap() - 0.7).abs() < 1e-15);
    assert_eq!(r.aj, o.aj);
    assert!((r.aj - 2.0 / 3.0).abs() < 1e-15);
}
