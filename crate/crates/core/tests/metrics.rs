mod common;

use coseg::metrics::{aji_ids, hausdorff_mask, object_f1_ids, panoptic_quality_ids};

#[test]
fn instance_metrics_agree_with_exhaustive_matching() {
    let mut matched = 0;
    for seed in 0..500 {
        let (_, _, gt, pred) = common::random_pair(seed);
        let f1 = object_f1_ids(&pred, &gt).unwrap();
        assert!((f1 - common::oracle_f1(&gt, &pred)).abs() < 1e-9, "f1 seed {seed}");
        let q = panoptic_quality_ids(&pred, &gt).unwrap();
        let (pq, sq, rq) = common::oracle_pq(&gt, &pred);
        assert!((q.pq - pq).abs() < 1e-9 && (q.sq - sq).abs() < 1e-9 && (q.rq - rq).abs() < 1e-9, "pq seed {seed}");
        assert!((q.pq - q.sq * q.rq).abs() < 1e-9);
        let a = aji_ids(&pred, &gt).unwrap();
        assert!((a - common::oracle_aji(&gt, &pred)).abs() < 1e-9, "aji seed {seed}");
        for v in [f1, a, q.pq, q.sq, q.rq] {
            assert!((0.0..=1.0).contains(&v));
        }
        matched += common::exhaustive_matching(&gt, &pred).len();
    }
    assert!(matched > 300, "fixtures should exercise matching, got {matched}");
}

#[test]
fn hausdorff_agrees_with_all_pairs_search() {
    for seed in 0..150 {
        let (h, w, gt, pred) = common::random_pair(1000 + seed);
        let a: Vec<bool> = gt.iter().map(|&v| v != 0).collect();
        let b: Vec<bool> = pred.iter().map(|&v| v != 0).collect();
        let got = hausdorff_mask(&b, &a, h, w).unwrap();
        let want = common::oracle_hausdorff(&b, &a, h, w);
        match (got, want) {
            (Some(x), Some(y)) => assert!((x - y).abs() < 1e-9, "seed {seed}: {x} vs {y}"),
            (x, y) => assert_eq!(x, y, "seed {seed}"),
        }
    }
}

#[test]
fn metrics_ignore_instance_labelling() {
    for seed in 0..50 {
        let (_, _, gt, pred) = common::random_pair(2000 + seed);
        let relabel: Vec<u32> = pred.iter().map(|&v| if v == 0 { 0 } else { 100 - v }).collect();
        assert_eq!(object_f1_ids(&pred, &gt).unwrap(), object_f1_ids(&relabel, &gt).unwrap());
        assert_eq!(aji_ids(&pred, &gt).unwrap(), aji_ids(&relabel, &gt).unwrap());
        assert_eq!(panoptic_quality_ids(&pred, &gt).unwrap(), panoptic_quality_ids(&relabel, &gt).unwrap());
    }
}
