#[path = "support/oracles.rs"]
mod oracles;

use mvnad::metrics::*;
use mvnad::rng::Rng;
use oracles::{brute_aupro, f1_sweep, flood_fill, pairwise_auroc, random_instance, random_map};
use proptest::prelude::*;

#[test]
fn auroc_matches_pairwise_oracle() {
    let mut rng = Rng::new(1, 0);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut rng);
        let a = auroc(&s, &l).unwrap();
        assert!((a - pairwise_auroc(&s, &l)).abs() <= 1e-12);
    }
}

#[test]
fn f1_matches_exhaustive_sweep() {
    let mut rng = Rng::new(2, 0);
    for _ in 0..1000 {
        let (s, l) = random_instance(&mut rng);
        let (f1, t) = f1_max(&s, &l).unwrap();
        assert_eq!(f1, f1_sweep(&s, &l));
        // the reported threshold attains it
        let tp = s.iter().zip(&l).filter(|(x, y)| **x >= t && **y).count() as f64;
        let pred = s.iter().filter(|x| **x >= t).count() as f64;
        let pos = l.iter().filter(|y| **y).count() as f64;
        assert_eq!(2.0 * tp / (pred + pos), f1);
    }
}

#[test]
fn components_match_flood_fill() {
    let mut rng = Rng::new(3, 0);
    for _ in 0..200 {
        let m = random_map(&mut rng, 16, 16);
        let (labels, n) = connected_components(&m.mask, 16, 16);
        let regions = flood_fill(&m.mask, 16, 16);
        assert_eq!(n, regions.len());
        for (k, region) in regions.iter().enumerate() {
            // flood fill discovers regions in row-major order of first pixel too
            assert!(region.iter().all(|&i| labels[i] as usize == k + 1));
        }
    }
}

#[test]
fn aupro_matches_brute_force_sweep() {
    let mut rng = Rng::new(4, 0);
    for i in 0..100 {
        let maps: Vec<LabeledMap> = (0..1 + i % 3).map(|_| random_map(&mut rng, 16, 16)).collect();
        let limit = if i % 4 == 0 { 1.0 } else { 0.3 };
        let a = aupro(&maps, limit).unwrap();
        let b = brute_aupro(&maps, limit);
        assert!((a - b).abs() < 1e-9, "instance {i}: {a} vs {b}");
    }
}

#[test]
fn pixel_auroc_is_flattened_auroc() {
    let mut rng = Rng::new(5, 0);
    let a = random_map(&mut rng, 2, 2);
    let mut b = random_map(&mut rng, 2, 2);
    b.mask = vec![false, false, true, false];
    let scores: Vec<f64> = a.map.iter().chain(&b.map).copied().collect();
    let labels: Vec<bool> = a.mask.iter().chain(&b.mask).copied().collect();
    assert_eq!(pixel_auroc(&[a, b]).unwrap(), pairwise_auroc(&scores, &labels));
}

#[test]
fn single_region_aupro_equals_pixel_auroc() {
    let mut rng = Rng::new(6, 0);
    for _ in 0..50 {
        let mut mask = vec![false; 256];
        let (r0, c0) = (rng.below(12), rng.below(12));
        for r in r0..r0 + 4 {
            for c in c0..c0 + 4 {
                mask[r * 16 + c] = true;
            }
        }
        let map: Vec<f64> = (0..256).map(|i| rng.below(20) as f64 + if mask[i] { 5.0 } else { 0.0 }).collect();
        let m = LabeledMap::new(16, 16, map, mask).unwrap();
        let a = aupro(&[m.clone()], 1.0).unwrap();
        assert!((a - pixel_auroc(&[m]).unwrap()).abs() < 1e-12);
    }
}

fn result(cat: &str, id: usize, view: usize, anomalous: bool, map: Vec<f64>, mask: Vec<bool>) -> ViewResult {
    let score = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ViewResult {
        category: cat.into(),
        sample_id: format!("{cat}{id}"),
        view,
        sample_anomalous: anomalous,
        score,
        map: LabeledMap::new(2, 2, map, mask).unwrap(),
    }
}

#[test]
fn side_view_oracle_maps() {
    let mut results = Vec::new();
    for id in 0..10 {
        let anomalous = id >= 5;
        for v in 0..5 {
            let mask = if anomalous && v == 2 { vec![true, false, false, false] } else { vec![false; 4] };
            let map = mask.iter().map(|&m| m as u8 as f64).collect();
            results.push(result("a", id, v, anomalous, map, mask));
        }
    }
    let report = evaluate_run(&results, 5, 0.3).unwrap();
    assert_eq!(report.row("a", RowKind::SampleMax).unwrap().i_auroc, Some(1.0));
    assert_eq!(report.row("a", RowKind::View(0)).unwrap().i_auroc, Some(0.5));
    assert_eq!(report.row("a", RowKind::View(2)).unwrap().p_aupro, Some(1.0));
    assert_eq!(report.row("a", RowKind::AllViews).unwrap().i_auroc, Some(1.0));
    assert!(evaluate_run(&results[1..], 5, 0.3).is_err());
}

#[test]
fn macro_average_is_unweighted() {
    let mut results = Vec::new();
    let mut rng = Rng::new(8, 0);
    for (cat, n) in [("a", 4), ("b", 12)] {
        for id in 0..n {
            let anomalous = id % 2 == 0;
            for v in 0..5 {
                let mask = if anomalous { vec![false, true, false, false] } else { vec![false; 4] };
                let map = (0..4).map(|_| rng.uniform()).collect();
                results.push(result(cat, id, v, anomalous, map, mask));
            }
        }
    }
    let report = evaluate_run(&results, 5, 0.3).unwrap();
    for kind in [RowKind::AllViews, RowKind::View(3), RowKind::SampleMax] {
        let a = report.row("a", kind).unwrap().i_auroc.unwrap();
        let b = report.row("b", kind).unwrap().i_auroc.unwrap();
        let m = report.row(MEAN_CATEGORY, kind).unwrap().i_auroc.unwrap();
        assert!((m - (a + b) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn identical_view_copies_match_single_view() {
    let mut rng = Rng::new(9, 0);
    let mut results = Vec::new();
    let mut single = Vec::new();
    for id in 0..8 {
        let anomalous = id % 3 == 0;
        let mask = if anomalous { vec![true, true, false, false] } else { vec![false; 4] };
        let map: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
        for v in 0..5 {
            results.push(result("a", id, v, anomalous, map.clone(), mask.clone()));
        }
        single.push(result("a", id, 0, anomalous, map, mask));
    }
    let multi = evaluate_run(&results, 5, 0.3).unwrap();
    let one = evaluate_run(&single, 1, 0.3).unwrap();
    let a = multi.row("a", RowKind::AllViews).unwrap();
    let b = one.row("a", RowKind::AllViews).unwrap();
    assert!((a.i_auroc.unwrap() - b.i_auroc.unwrap()).abs() < 1e-15);
    assert!((a.p_aupro.unwrap() - b.p_aupro.unwrap()).abs() < 1e-12);
    assert_eq!(a.i_f1, b.i_f1);
}

proptest! {
    #[test]
    fn auroc_invariant_under_monotone_maps(seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 0);
        let (s, l) = random_instance(&mut rng);
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 1.0).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
    }

    #[test]
    fn flipped_labels_complement(seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 1);
        let n = 2 + rng.below(60);
        let s: Vec<f64> = (0..n).map(|i| i as f64 + rng.uniform() * 0.5).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.5).collect();
        l[0] = true;
        l[1] = false;
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        let sum = auroc(&s, &l).unwrap() + auroc(&s, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }
}
