//! Brute-force metric oracles shared by the metric tests and acceptance.

use std::collections::VecDeque;

use mvnad::metrics::LabeledMap;
use mvnad::rng::Rng;

pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn random_instance(rng: &mut Rng) -> (Vec<f64>, Vec<bool>) {
    let n = 2 + rng.below(199);
    let levels = 1 + rng.below(30);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
    (scores, labels)
}

pub fn f1_sweep(scores: &[f64], labels: &[bool]) -> f64 {
    // every achievable partition is "score >= some observed value" or nothing
    let mut cuts: Vec<f64> = scores.to_vec();
    cuts.push(f64::INFINITY);
    cuts.iter()
        .map(|&t| {
            let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l).count() as f64;
            let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && !**l).count() as f64;
            let fnn = scores.iter().zip(labels).filter(|(s, l)| **s < t && **l).count() as f64;
            if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + fnn)
            }
        })
        .fold(0.0, f64::max)
}

pub fn flood_fill(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] || seen[r * w + c] {
                continue;
            }
            let mut region = Vec::new();
            let mut q = VecDeque::from([(r, c)]);
            seen[r * w + c] = true;
            while let Some((y, x)) = q.pop_front() {
                region.push(y * w + x);
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if mask[ny * w + nx] && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            q.push_back((ny, nx));
                        }
                    }
                }
            }
            region.sort_unstable();
            regions.push(region);
        }
    }
    regions
}

pub fn random_map(rng: &mut Rng, h: usize, w: usize) -> LabeledMap {
    let density = rng.uniform_range(0.05, 0.4);
    let mut mask: Vec<bool> = (0..h * w).map(|_| rng.uniform() < density).collect();
    mask[rng.below(h * w)] = true;
    let levels = 2 + rng.below(40);
    let map = mask
        .iter()
        .map(|&m| (rng.below(levels) + if m { rng.below(levels / 2 + 1) } else { 0 }) as f64 / levels as f64)
        .collect();
    LabeledMap::new(h, w, map, mask).unwrap()
}

pub fn brute_aupro(maps: &[LabeledMap], limit: f64) -> f64 {
    let regions: Vec<(usize, Vec<usize>)> = maps
        .iter()
        .enumerate()
        .flat_map(|(k, m)| flood_fill(&m.mask, m.height, m.width).into_iter().map(move |r| (k, r)))
        .collect();
    let negatives: usize = maps.iter().map(|m| m.mask.iter().filter(|&&x| !x).count()).sum();
    let mut thresholds: Vec<f64> = maps.iter().flat_map(|m| m.map.iter().copied()).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut points = vec![(0.0, 0.0)];
    for t in thresholds {
        let fp: usize = maps
            .iter()
            .map(|m| m.map.iter().zip(&m.mask).filter(|(v, k)| **v >= t && !**k).count())
            .sum();
        let pro: f64 = regions
            .iter()
            .map(|(k, r)| r.iter().filter(|&&i| maps[*k].map[i] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        points.push((fp as f64 / negatives as f64, pro));
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        let x_end = x1.min(limit);
        let y_end = if x1 > limit { y0 + (y1 - y0) * (limit - x0) / (x1 - x0) } else { y1 };
        area += (x_end - x0) * (y0 + y_end) / 2.0;
    }
    area / limit
}
