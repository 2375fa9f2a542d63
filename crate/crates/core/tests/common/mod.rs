//! Brute-force reference implementations shared by the property and acceptance tests.
#![allow(dead_code)]

use eviscreen::feature_store::Label;
use eviscreen::knowledge_bank::{KnowledgeBank, Provenance};
use eviscreen::metrics::ScoredCase;

pub fn scored(scores: &[f64], positive: &[bool]) -> Vec<ScoredCase> {
    scores
        .iter()
        .zip(positive)
        .enumerate()
        .map(|(i, (&s, &p))| {
            let label = if p { Label::Pathological } else { Label::Normal };
            ScoredCase::new(format!("c{i}"), s, label)
        })
        .collect()
}

fn split(cases: &[ScoredCase]) -> (Vec<f64>, Vec<f64>) {
    let pos = cases.iter().filter(|c| c.label.is_positive()).map(|c| c.score).collect();
    let neg = cases.iter().filter(|c| !c.label.is_positive()).map(|c| c.score).collect();
    (pos, neg)
}

/// Pairwise enumeration; ties count half.
pub fn auroc(cases: &[ScoredCase]) -> f64 {
    let (pos, neg) = split(cases);
    let mut twice = 0u64;
    for p in &pos {
        for n in &neg {
            twice += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    twice as f64 / (2.0 * pos.len() as f64 * neg.len() as f64)
}

/// Sweep over every observed score and +inf, rule `s >= tau`.
/// `x` must be an integer percentage so recall can be compared exactly.
pub fn spe_at_recall(cases: &[ScoredCase], x: u32) -> f64 {
    let (pos, neg) = split(cases);
    let mut thresholds: Vec<f64> = cases.iter().map(|c| c.score).collect();
    thresholds.push(f64::INFINITY);
    let mut best: Option<usize> = None;
    for &tau in &thresholds {
        let tp = pos.iter().filter(|&&s| s >= tau).count();
        let tn = neg.iter().filter(|&&s| s < tau).count();
        if 100 * tp >= x as usize * pos.len() {
            best = Some(best.map_or(tn, |b| b.max(tn)));
        }
    }
    best.expect("the lowest score reaches full recall") as f64 / neg.len() as f64
}

/// Direct enumeration of the separation rate with strict inequalities.
pub fn csr(cases: &[ScoredCase]) -> f64 {
    let (pos, neg) = split(cases);
    let mut outside = 0;
    for c in cases {
        let below_all_pos = pos.iter().all(|&p| c.score < p);
        let above_all_neg = neg.iter().all(|&n| c.score > n);
        outside += below_all_pos as usize + above_all_neg as usize;
    }
    outside as f64 / cases.len() as f64
}

/// Step-wise AP with negatives placed first inside each tie and positives in input order.
pub fn average_precision(cases: &[ScoredCase]) -> f64 {
    let n_pos = cases.iter().filter(|c| c.label.is_positive()).count();
    let mut terms: Vec<(usize, f64)> = Vec::new();
    for (i, c) in cases.iter().enumerate().filter(|(_, c)| c.label.is_positive()) {
        let higher = cases.iter().filter(|o| o.score > c.score).count();
        let pos_higher = cases.iter().filter(|o| o.label.is_positive() && o.score > c.score).count();
        let neg_tied = cases.iter().filter(|o| !o.label.is_positive() && o.score == c.score).count();
        let pos_tied_before = cases[..i].iter().filter(|o| o.label.is_positive() && o.score == c.score).count();
        let rank = higher + neg_tied + pos_tied_before + 1;
        let tp = pos_higher + pos_tied_before + 1;
        terms.push((rank, tp as f64 / rank as f64));
    }
    terms.sort_by_key(|t| t.0);
    terms.iter().map(|t| t.1).sum::<f64>() / n_pos as f64
}

pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s
}

/// Linear scan: all distances, stable sort, first `k`.
pub fn knn(vectors: &[f32], dim: usize, query: &[f32], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = vectors.chunks(dim).map(|v| sq_dist(v, query)).enumerate().collect();
    all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    all.truncate(k);
    all.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
}

pub fn raw_bank(dim: usize, vectors: Vec<f32>) -> KnowledgeBank {
    KnowledgeBank::from_parts(
        dim,
        vectors,
        Provenance {
            source_label: Label::Normal,
            subsample_ratio: 1.0,
            seed: 0,
            normalized: false,
            source_count: 0,
        },
    )
    .unwrap()
}

/// Covering radius of `centers` over all points.
pub fn radius(points: &[Vec<f64>], centers: &[usize]) -> f64 {
    points
        .iter()
        .map(|p| {
            centers
                .iter()
                .map(|&c| p.iter().zip(&points[c]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Optimal k-center radius by enumerating every center subset of size `k`.
pub fn optimal_radius(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize == k {
            let centers: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            best = best.min(radius(points, &centers));
        }
    }
    best
}
