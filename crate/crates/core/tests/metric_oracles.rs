mod support;

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use support::{full_sort, hit_at, seeded};
use word4per_core::cache::FeatureTable;
use word4per_core::metrics::*;
use word4per_core::retrieval::RetrievalResult;

fn ranking(ids: &[String]) -> RetrievalResult {
    RetrievalResult {
        ranked_ids: ids.to_vec(),
        scores: (0..ids.len()).map(|i| -(i as f64)).collect(),
        indices: (0..ids.len()).collect(),
        query: None,
    }
}

fn random_case(r: &mut impl Rng, max_len: usize, max_gt: usize) -> (Vec<String>, Vec<String>) {
    let n = r.random_range(1..=max_len);
    let mut ids: Vec<String> = (0..n).map(|i| format!("g{i}")).collect();
    ids.shuffle(r);
    let m = r.random_range(1..=max_gt.min(n));
    let gt: Vec<String> = ids.choose_multiple(r, m).cloned().collect();
    (ids, gt)
}

#[test]
fn ap_and_rank_k_match_oracle_on_1000_rankings() {
    let mut r = seeded(300);
    for _ in 0..1000 {
        let (ids, gt) = random_case(&mut r, 60, 8);
        let set: BTreeSet<String> = gt.iter().cloned().collect();
        let res = ranking(&ids);
        let ap = average_precision(&res, &set).unwrap();
        assert!((ap - support::average_precision(&ids, &gt)).abs() <= 1e-12);
        for k in [1, 5, 10, 20] {
            assert_eq!(rank_k(&res, &set, k).unwrap(), hit_at(&ids, &gt, k));
        }
    }
}

#[test]
fn ap_of_hits_at_one_and_three() {
    let ids: Vec<String> = ["a", "x", "b", "y"].iter().map(|s| s.to_string()).collect();
    let gt = BTreeSet::from(["a".to_string(), "b".to_string()]);
    let ap = average_precision(&ranking(&ids), &gt).unwrap();
    assert!((ap - 0.833333).abs() < 1e-6);
    assert!((ap - 5.0 / 6.0).abs() < 1e-15);
}

#[test]
fn fifty_items_five_ground_truths() {
    let mut r = seeded(301);
    let mut ids: Vec<String> = (0..50).map(|i| format!("g{i}")).collect();
    ids.shuffle(&mut r);
    let gt: Vec<String> = ids.choose_multiple(&mut r, 5).cloned().collect();
    let set: BTreeSet<String> = gt.iter().cloned().collect();
    let ap = average_precision(&ranking(&ids), &set).unwrap();
    assert!((ap - support::average_precision(&ids, &gt)).abs() <= 1e-12);
}

#[test]
fn rank_k_examples() {
    let ids: Vec<String> = (1..=12).map(|i| format!("r{i}")).collect();
    let res = ranking(&ids);
    let gt = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    for k in [1, 5, 10] {
        assert!(rank_k(&res, &gt(&["r1"]), k).unwrap());
    }
    assert!(!rank_k(&res, &gt(&["r6"]), 5).unwrap());
    assert!(rank_k(&res, &gt(&["r6"]), 10).unwrap());
    assert!(rank_k(&res, &gt(&["r4", "r9"]), 5).unwrap());
    assert!(rank_k(&res, &gt(&["missing"]), 5).is_err());
    assert!(average_precision(&res, &BTreeSet::new()).is_err());
}

#[test]
fn whole_gallery_ground_truth_is_perfect() {
    let mut r = seeded(302);
    for _ in 0..50 {
        let (ids, _) = random_case(&mut r, 30, 1);
        let set: BTreeSet<String> = ids.iter().cloned().collect();
        assert_eq!(average_precision(&ranking(&ids), &set).unwrap(), 1.0);
        assert!(rank_k(&ranking(&ids), &set, 1).unwrap());
    }
}

fn table(r: &mut impl Rng, n: usize, d: usize, prefix: &str) -> (FeatureTable, Vec<Vec<f32>>) {
    let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
    let t = FeatureTable::from_rows(d, rows.iter().enumerate().map(|(i, v)| (format!("{prefix}{i}"), v.clone()))).unwrap();
    (t, rows)
}

/// End-to-end report over random embeddings against a brute-force sort.
#[test]
fn report_matches_full_sort_oracle() {
    let mut r = seeded(303);
    let (gallery, rows) = table(&mut r, 40, 6, "g");
    let queries: Vec<EvalQuery> = (0..25)
        .map(|i| {
            let m = r.random_range(1..=3);
            EvalQuery {
                query_id: format!("q{i}"),
                image_id: format!("g{}", r.random_range(0..40)),
                caption: None,
                gt: (0..m).map(|_| format!("g{}", r.random_range(0..40))).collect(),
            }
        })
        .collect();
    let embeddings: Vec<Vec<f32>> = (0..25).map(|_| (0..6).map(|_| r.random_range(-1.0f32..1.0)).collect()).collect();
    let mut next = 0;
    let report = evaluate_queries(&queries, &gallery, false, |_| {
        next += 1;
        Ok(embeddings[next - 1].clone())
    })
    .unwrap();

    let mut hits = [0usize; 3];
    let mut ap_sum = 0.0;
    for (q, e) in queries.iter().zip(&embeddings) {
        let order: Vec<String> = full_sort(e, &rows).into_iter().map(|(i, _)| format!("g{i}")).collect();
        let gt: Vec<String> = q.gt.iter().cloned().collect();
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            *h += hit_at(&order, &gt, k) as usize;
        }
        ap_sum += support::average_precision(&order, &gt);
    }
    let pct = |x: f64| 100.0 * x / 25.0;
    assert!((report.rank1 - pct(hits[0] as f64)).abs() < 1e-12);
    assert!((report.rank5 - pct(hits[1] as f64)).abs() < 1e-12);
    assert!((report.rank10 - pct(hits[2] as f64)).abs() < 1e-12);
    assert!((report.map - pct(ap_sum)).abs() < 1e-10);

    assert!(report.rank1 <= report.rank5 && report.rank5 <= report.rank10);
    let mean_ap = report.per_query.iter().map(|q| q.average_precision).sum::<f64>() / 25.0;
    assert!((report.map - 100.0 * mean_ap).abs() < 1e-12);
}

#[test]
fn map_invariant_under_gallery_relabeling() {
    let mut r = seeded(304);
    let (gallery, rows) = table(&mut r, 30, 5, "g");
    let relabeled =
        FeatureTable::from_rows(5, rows.iter().enumerate().map(|(i, v)| (format!("other-{}", 29 - i), v.clone()))).unwrap();
    let q: Vec<f32> = (0..5).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let query = |prefix: &str, map: &dyn Fn(usize) -> usize| EvalQuery {
        query_id: "q".into(),
        image_id: format!("{prefix}{}", map(0)),
        caption: None,
        gt: [3, 7, 11].iter().map(|&i| format!("{prefix}{}", map(i))).collect(),
    };
    let a = evaluate_queries(&[query("g", &|i| i)], &gallery, false, |_| Ok(q.clone())).unwrap();
    let b = evaluate_queries(&[query("other-", &|i| 29 - i)], &relabeled, false, |_| Ok(q.clone())).unwrap();
    assert_eq!(a.map, b.map);
    assert_eq!(a.rank1, b.rank1);
}

#[test]
fn duplicate_queries_score_identically_and_empty_set_fails() {
    let mut r = seeded(305);
    let (gallery, _) = table(&mut r, 10, 4, "g");
    let q = EvalQuery {
        query_id: "a".into(),
        image_id: "g0".into(),
        caption: Some("red".into()),
        gt: BTreeSet::from(["g3".to_string()]),
    };
    let e: Vec<f32> = vec![0.1, 0.4, -0.3, 0.9];
    let report = evaluate_queries(&[q.clone(), q], &gallery, true, |_| Ok(e.clone())).unwrap();
    assert_eq!(report.per_query[0].average_precision, report.per_query[1].average_precision);
    assert!(evaluate_queries(&[], &gallery, false, |_| Ok(e.clone())).is_err());
}
