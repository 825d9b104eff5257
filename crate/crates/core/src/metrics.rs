//! Image- and pixel-level anomaly detection metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_FPR_LIMIT: f64 = 0.3;
/// Above this many distinct map values AUPRO falls back to quantile thresholds.
pub const EXACT_SWEEP_LIMIT: usize = 1_000_000;
const QUANTILE_THRESHOLDS: usize = 256;

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "both classes are required ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via tie-averaged ranks (Mann-Whitney U).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tie group spanning ranks i+1..=j gets (i+1+j)/2.
    // Sums are kept doubled so they stay integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let doubled_rank = (i + 1 + j) as u128;
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled_rank * positives;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    // 2U = 2R - P(P+1)
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

/// Maximum F1 over thresholds at -inf, midpoints between consecutive distinct
/// scores, and +inf, predicting anomalous when `score >= t`. Returns
/// `(f1, threshold)`; the lowest maximizing threshold wins.
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let (pos, _) = check_scores(scores, labels)?;
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let f1 = |tp: usize, fp: usize| -> f64 {
        let fnn = pos - tp;
        if tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
        }
    };
    // Everything predicted anomalous at -inf.
    let (mut tp, mut fp) = (pos, pairs.len() - pos);
    let mut best = (f1(tp, fp), f64::NEG_INFINITY);
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            j += 1;
        }
        let threshold = if j < pairs.len() {
            pairs[i].0 + 0.5 * (pairs[j].0 - pairs[i].0)
        } else {
            f64::INFINITY
        };
        let score = f1(tp, fp);
        if score > best.0 {
            best = (score, threshold);
        }
        i = j;
    }
    Ok(best)
}

/// One anomaly map with its ground-truth mask, both `H x W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledMap {
    pub height: usize,
    pub width: usize,
    pub map: Vec<f64>,
    pub mask: Vec<bool>,
}

impl LabeledMap {
    pub fn new(height: usize, width: usize, map: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if map.len() != height * width || mask.len() != height * width {
            return Err(Error::Metric(format!(
                "map ({}) and mask ({}) must both hold {height}x{width} values",
                map.len(),
                mask.len()
            )));
        }
        Ok(Self {
            height,
            width,
            map,
            mask,
        })
    }
}

pub fn pixel_auroc(maps: &[LabeledMap]) -> Result<f64> {
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.map.iter().copied()).collect();
    let labels: Vec<bool> = maps.iter().flat_map(|m| m.mask.iter().copied()).collect();
    auroc(&scores, &labels)
}

/// 8-connected component labels (0 = background, regions numbered from 1 in
/// row-major order of their first pixel) and the region count.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), height * width, "mask does not match its shape");
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / width) as isize, (i % width) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    let j = nr as usize * width + nc as usize;
                    if mask[j] && labels[j] == 0 {
                        labels[j] = count;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Area under the per-region-overlap curve up to `fpr_limit`, normalized by
/// the limit.
pub fn aupro(maps: &[LabeledMap], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Metric(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    // (score, region index or None for negatives)
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for m in maps {
        let (labels, count) = connected_components(&m.mask, m.height, m.width);
        let offset = region_sizes.len();
        region_sizes.extend(std::iter::repeat(0).take(count));
        for (&score, &label) in m.map.iter().zip(&labels) {
            if score.is_nan() {
                return Err(Error::Metric("NaN in anomaly map".into()));
            }
            let region = (label > 0).then(|| offset + label as usize - 1);
            if let Some(r) = region {
                region_sizes[r] += 1;
            }
            pixels.push((score, region));
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::Metric("AUPRO needs at least one anomalous pixel".into()));
    }
    let negatives = pixels.iter().filter(|p| p.1.is_none()).count();
    if negatives == 0 {
        return Err(Error::Metric("AUPRO needs at least one normal pixel".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut distinct = 1;
    for w in pixels.windows(2) {
        if w[0].0 != w[1].0 {
            distinct += 1;
        }
    }
    let keep: Option<Vec<bool>> = (distinct > EXACT_SWEEP_LIMIT).then(|| {
        let mut keep = vec![false; distinct];
        for q in 1..=QUANTILE_THRESHOLDS {
            keep[(q * distinct / QUANTILE_THRESHOLDS).min(distinct) - 1] = true;
        }
        keep
    });

    let regions = region_sizes.len() as f64;
    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut pro_sum) = (0usize, 0.0f64);
    let mut group = 0;
    let mut i = 0;
    while i < pixels.len() {
        let mut j = i;
        while j < pixels.len() && pixels[j].0 == pixels[i].0 {
            match pixels[j].1 {
                Some(r) => pro_sum += 1.0 / region_sizes[r] as f64,
                None => fp += 1,
            }
            j += 1;
        }
        if keep.as_ref().map_or(true, |k| k[group]) {
            curve.push((fp as f64 / negatives as f64, pro_sum / regions));
        }
        group += 1;
        i = j;
    }
    Ok(integrate_to_limit(&curve, fpr_limit) / fpr_limit)
}

/// Trapezoidal area under a curve with nondecreasing x, clipped at `limit`
/// with linear interpolation.
pub fn integrate_to_limit(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += 0.5 * (x1 - x0) * (y0 + y1);
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += 0.5 * (limit - x0) * (y0 + y);
            break;
        }
    }
    area
}

/// Result of running a detector on one view of one test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewResult {
    pub category: String,
    pub sample_id: String,
    pub view: usize,
    /// Sample-level ground truth.
    pub sample_anomalous: bool,
    pub score: f64,
    pub map: LabeledMap,
}

impl ViewResult {
    pub fn view_anomalous(&self) -> bool {
        self.map.mask.iter().any(|&m| m)
    }
}

/// Which slice of the results a report row covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowKind {
    /// Every view of every sample as an independent image, labeled by its
    /// own mask.
    AllViews,
    /// Only view `v` of each sample, labeled by the sample label.
    View(usize),
    /// Sample score = max over views, labeled by the sample label.
    SampleMax,
}

impl RowKind {
    pub fn name(self) -> String {
        match self {
            RowKind::AllViews => "all".into(),
            RowKind::View(v) => v.to_string(),
            RowKind::SampleMax => "max".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(RowKind::AllViews),
            "max" => Ok(RowKind::SampleMax),
            v => v
                .parse()
                .map(RowKind::View)
                .map_err(|_| Error::Metric(format!("unknown report row `{v}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub category: String,
    pub kind: RowKind,
    /// `None` when the metric is undefined (e.g. a single class).
    pub i_auroc: Option<f64>,
    pub i_f1: Option<f64>,
    pub p_auroc: Option<f64>,
    pub p_aupro: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub fpr_limit: f64,
    pub rows: Vec<MetricRow>,
}

/// Name of the macro-average pseudo category.
pub const MEAN_CATEGORY: &str = "mean";

fn image_metrics(scores: &[f64], labels: &[bool]) -> (Option<f64>, Option<f64>) {
    (
        auroc(scores, labels).ok(),
        f1_max(scores, labels).ok().map(|(f, _)| f),
    )
}

fn pixel_metrics(maps: &[LabeledMap], fpr_limit: f64) -> (Option<f64>, Option<f64>) {
    (pixel_auroc(maps).ok(), aupro(maps, fpr_limit).ok())
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<Option<f64>> = values.collect();
    if v.is_empty() || v.iter().any(Option::is_none) {
        return None;
    }
    Some(v.iter().flatten().sum::<f64>() / v.len() as f64)
}

/// Per-category rows for the pooled per-view protocol, each single view,
/// and per-sample max aggregation, followed by macro-averaged `mean` rows.
pub fn evaluate_run(results: &[ViewResult], views: usize, fpr_limit: f64) -> Result<MetricReport> {
    let mut by_cat: BTreeMap<&str, BTreeMap<&str, Vec<&ViewResult>>> = BTreeMap::new();
    for r in results {
        by_cat
            .entry(r.category.as_str())
            .or_default()
            .entry(r.sample_id.as_str())
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for (cat, samples) in &by_cat {
        for (id, vs) in samples {
            let mut seen: Vec<usize> = vs.iter().map(|r| r.view).collect();
            seen.sort_unstable();
            if seen != (0..views).collect::<Vec<_>>() {
                return Err(Error::Metric(format!(
                    "sample {id} has views {seen:?}, expected 0..{views}"
                )));
            }
        }
        let all: Vec<&ViewResult> = samples.values().flatten().copied().collect();

        let scores: Vec<f64> = all.iter().map(|r| r.score).collect();
        let labels: Vec<bool> = all.iter().map(|r| r.view_anomalous()).collect();
        let maps: Vec<LabeledMap> = all.iter().map(|r| r.map.clone()).collect();
        let (i_auroc, i_f1) = image_metrics(&scores, &labels);
        let (p_auroc, p_aupro) = pixel_metrics(&maps, fpr_limit);
        rows.push(MetricRow {
            category: cat.to_string(),
            kind: RowKind::AllViews,
            i_auroc,
            i_f1,
            p_auroc,
            p_aupro,
        });

        for v in 0..views {
            let these: Vec<&ViewResult> = all.iter().filter(|r| r.view == v).copied().collect();
            let scores: Vec<f64> = these.iter().map(|r| r.score).collect();
            let labels: Vec<bool> = these.iter().map(|r| r.sample_anomalous).collect();
            let maps: Vec<LabeledMap> = these.iter().map(|r| r.map.clone()).collect();
            let (i_auroc, i_f1) = image_metrics(&scores, &labels);
            let (p_auroc, p_aupro) = pixel_metrics(&maps, fpr_limit);
            rows.push(MetricRow {
                category: cat.to_string(),
                kind: RowKind::View(v),
                i_auroc,
                i_f1,
                p_auroc,
                p_aupro,
            });
        }

        let scores: Vec<f64> = samples
            .values()
            .map(|vs| vs.iter().map(|r| r.score).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let labels: Vec<bool> = samples.values().map(|vs| vs[0].sample_anomalous).collect();
        let (i_auroc, i_f1) = image_metrics(&scores, &labels);
        rows.push(MetricRow {
            category: cat.to_string(),
            kind: RowKind::SampleMax,
            i_auroc,
            i_f1,
            p_auroc,
            p_aupro,
        });
    }
    let kinds: Vec<RowKind> = rows
        .iter()
        .filter(|r| r.category == rows[0].category)
        .map(|r| r.kind)
        .collect();
    for kind in kinds {
        let same: Vec<&MetricRow> = rows.iter().filter(|r| r.kind == kind).collect();
        let mean_row = MetricRow {
            category: MEAN_CATEGORY.into(),
            kind,
            i_auroc: mean_of(same.iter().map(|r| r.i_auroc)),
            i_f1: mean_of(same.iter().map(|r| r.i_f1)),
            p_auroc: mean_of(same.iter().map(|r| r.p_auroc)),
            p_aupro: mean_of(same.iter().map(|r| r.p_aupro)),
        };
        rows.push(mean_row);
    }
    Ok(MetricReport { fpr_limit, rows })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

fn parse_metric(s: &str) -> Result<Option<f64>> {
    if s == "nan" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Metric(format!("bad metric value `{s}`")))
}

pub const CSV_HEADER: &str = "category,view,i_auroc,i_f1,p_auroc,p_aupro";

impl MetricReport {
    pub fn row(&self, category: &str, kind: RowKind) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.category == category && r.kind == kind)
    }

    /// CSV with `# key=value` preamble lines.
    pub fn to_csv(&self, preamble: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in preamble {
            let _ = writeln!(out, "# {k}={v}");
        }
        let _ = writeln!(out, "# fpr_limit={}", self.fpr_limit);
        let _ = writeln!(out, "{CSV_HEADER}");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.category,
                r.kind.name(),
                fmt_metric(r.i_auroc),
                fmt_metric(r.i_f1),
                fmt_metric(r.p_auroc),
                fmt_metric(r.p_aupro)
            );
        }
        out
    }

    /// Parses [`MetricReport::to_csv`] output, returning the preamble too.
    pub fn from_csv(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut preamble = Vec::new();
        let mut fpr_limit = None;
        let mut rows = Vec::new();
        let mut header_seen = false;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest
                    .trim()
                    .split_once('=')
                    .ok_or_else(|| Error::Metric(format!("bad preamble line `{line}`")))?;
                if k == "fpr_limit" {
                    fpr_limit = Some(v.parse::<f64>().map_err(|_| Error::Metric(format!("bad fpr_limit `{v}`")))?);
                } else {
                    preamble.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            if !header_seen {
                if line != CSV_HEADER {
                    return Err(Error::Metric(format!("expected header `{CSV_HEADER}`")));
                }
                header_seen = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Metric(format!("expected 6 fields in `{line}`")));
            }
            rows.push(MetricRow {
                category: f[0].to_string(),
                kind: RowKind::parse(f[1])?,
                i_auroc: parse_metric(f[2])?,
                i_f1: parse_metric(f[3])?,
                p_auroc: parse_metric(f[4])?,
                p_aupro: parse_metric(f[5])?,
            });
        }
        let fpr_limit = fpr_limit.ok_or_else(|| Error::Metric("report lacks fpr_limit".into()))?;
        Ok((Self { fpr_limit, rows }, preamble))
    }

    pub fn to_table(&self) -> String {
        let headers = ["Category", "View", "I-AUROC", "I-F1", "P-AUROC", "P-AUPRO"];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.category.clone(),
                    r.kind.name(),
                    fmt_metric(r.i_auroc),
                    fmt_metric(r.i_f1),
                    fmt_metric(r.p_auroc),
                    fmt_metric(r.p_aupro),
                ]
            })
            .collect();
        let headers = headers.map(String::from);
        format_table(&headers, &body)
    }
}

/// Left-aligns the first column and right-aligns the rest.
pub fn format_table<const N: usize>(headers: &[String; N], rows: &[[String; N]]) -> String {
    let mut widths: [usize; N] = std::array::from_fn(|i| headers[i].len());
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String; N]| -> String {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "  {cell:>w$}");
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(headers);
    let total: usize = widths.iter().sum::<usize>() + 2 * (N - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(
            auroc(&[0.9, 0.5, 0.5, 0.1], &[true, false, true, false]).unwrap(),
            0.875
        );
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_max(&[0.9, 0.1], &[true, false]).unwrap().0, 1.0);
        let (f1, t) = f1_max(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((f1 - 0.8).abs() < 1e-15);
        assert!(t <= 0.7);
        // all predicted anomalous: 2P / (P + n)
        let (f1, _) = f1_max(&[0.5; 5], &[true, true, false, false, false]).unwrap();
        assert!((f1 - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn components() {
        let (_, n) = connected_components(&[false; 9], 3, 3);
        assert_eq!(n, 0);
        let diag = [true, false, false, true];
        let (labels, n) = connected_components(&diag, 2, 2);
        assert_eq!((n, labels), (1, vec![1, 0, 0, 1]));
        let two = [true, false, true, true, false, true];
        let (labels, n) = connected_components(&two, 2, 3);
        assert_eq!(n, 2);
        assert_eq!(labels, vec![1, 0, 2, 1, 0, 2]);
    }

    #[test]
    fn aupro_trivial_cases() {
        let mask = vec![false, true, true, false, false, false, false, true, false];
        let perfect = LabeledMap::new(3, 3, mask.iter().map(|&m| m as u8 as f64).collect(), mask.clone()).unwrap();
        assert_eq!(aupro(&[perfect.clone()], 0.3).unwrap(), 1.0);
        assert_eq!(pixel_auroc(&[perfect]).unwrap(), 1.0);
        let constant = LabeledMap::new(3, 3, vec![0.2; 9], mask.clone()).unwrap();
        assert_eq!(pixel_auroc(&[constant]).unwrap(), 0.5);
        let anti = LabeledMap::new(3, 3, mask.iter().map(|&m| !m as u8 as f64).collect(), mask).unwrap();
        assert_eq!(aupro(&[anti], 0.3).unwrap(), 0.0);
        assert!(aupro(&[LabeledMap::new(1, 2, vec![0.0, 1.0], vec![false; 2]).unwrap()], 0.3).is_err());
    }

    #[test]
    fn clipped_integration() {
        let curve = [(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)];
        assert!((integrate_to_limit(&curve, 0.25) - 0.0625).abs() < 1e-15);
        assert!((integrate_to_limit(&curve, 1.0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let report = MetricReport {
            fpr_limit: 0.3,
            rows: vec![MetricRow {
                category: "a".into(),
                kind: RowKind::View(2),
                i_auroc: Some(0.5),
                i_f1: None,
                p_auroc: Some(1.0),
                p_aupro: Some(0.25),
            }],
        };
        let pre = vec![("seed".to_string(), "7".to_string())];
        let (back, p) = MetricReport::from_csv(&report.to_csv(&pre)).unwrap();
        assert_eq!(back, report);
        assert_eq!(p, pre);
        assert!(report.to_table().contains("P-AUPRO"));
    }
}
