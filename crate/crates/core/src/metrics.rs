//! Screening metrics: AUROC, average precision, specificity at a recall
//! floor (Spe@X%R) and the clear separation rate (CSR).
//!
//! Every metric is defined over observed scores with the rule
//! "positive iff score ≥ τ" and requires both classes to be present.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::feature_store::Label;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCase {
    pub case_id: String,
    pub score: f64,
    pub label: Label,
    pub category: Option<String>,
}

impl ScoredCase {
    pub fn new(case_id: impl Into<String>, score: f64, label: Label) -> Self {
        Self {
            case_id: case_id.into(),
            score,
            label,
            category: None,
        }
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub ap: f64,
    /// `(X, Spe@X%R)` in request order.
    pub spe_at: Vec<(f64, f64)>,
    pub csr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub categories: Vec<(String, MetricsReport)>,
}

impl MetricsReport {
    pub fn spe(&self, x: f64) -> Option<f64> {
        self.spe_at.iter().find(|(k, _)| *k == x).map(|&(_, v)| v)
    }
}

pub const DEFAULT_RECALL_LEVELS: [f64; 3] = [95.0, 99.0, 100.0];

fn class_counts(cases: &[ScoredCase]) -> Result<(usize, usize)> {
    if let Some(c) = cases.iter().find(|c| !c.score.is_finite()) {
        return Err(Error::Metric(format!("case {} has a non-finite score", c.case_id)));
    }
    let n_pos = cases.iter().filter(|c| c.label.is_positive()).count();
    let n_neg = cases.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "both classes are required (positives: {n_pos}, negatives: {n_neg})"
        )));
    }
    Ok((n_pos, n_neg))
}

/// Indices sorted by descending score; among equal scores negatives come first.
fn ranked_descending(cases: &[ScoredCase]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cases.len()).collect();
    idx.sort_by(|&a, &b| {
        cases[b]
            .score
            .total_cmp(&cases[a].score)
            .then(cases[a].label.is_positive().cmp(&cases[b].label.is_positive()))
    });
    idx
}

/// Maximum specificity over thresholds whose recall is at least `x`%.
pub fn spe_at_recall(cases: &[ScoredCase], x: f64) -> Result<f64> {
    if !(x > 0.0 && x <= 100.0) {
        return Err(Error::Metric(format!("recall level must lie in (0, 100], got {x}")));
    }
    let (n_pos, n_neg) = class_counts(cases)?;
    let order = ranked_descending(cases);
    // Specificity only falls as τ decreases, so the first (highest) threshold
    // reaching the recall floor is optimal.
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let tau = cases[order[i]].score;
        while i < order.len() && cases[order[i]].score == tau {
            if cases[order[i]].label.is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if tp as f64 / n_pos as f64 >= x / 100.0 {
            return Ok((n_neg - fp) as f64 / n_neg as f64);
        }
    }
    unreachable!("the minimum score attains full recall")
}

/// Fraction of cases strictly below every positive or strictly above every negative.
pub fn csr(cases: &[ScoredCase]) -> Result<f64> {
    class_counts(cases)?;
    let min_pos = cases
        .iter()
        .filter(|c| c.label.is_positive())
        .map(|c| c.score)
        .fold(f64::INFINITY, f64::min);
    let max_neg = cases
        .iter()
        .filter(|c| !c.label.is_positive())
        .map(|c| c.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let below = cases.iter().filter(|c| c.score < min_pos).count();
    let above = cases.iter().filter(|c| c.score > max_neg).count();
    Ok((below + above) as f64 / cases.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties counting half.
pub fn auroc(cases: &[ScoredCase]) -> Result<f64> {
    let (n_pos, n_neg) = class_counts(cases)?;
    let mut idx: Vec<usize> = (0..cases.len()).collect();
    idx.sort_by(|&a, &b| cases[a].score.total_cmp(&cases[b].score));
    // Twice the Mann–Whitney U statistic, kept integral.
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let s = cases[idx[i]].score;
        let (mut pos_here, mut neg_here) = (0u64, 0u64);
        while i < idx.len() && cases[idx[i]].score == s {
            if cases[idx[i]].label.is_positive() {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            i += 1;
        }
        twice_u += pos_here * (2 * neg_below + neg_here);
        neg_below += neg_here;
    }
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Step-wise average precision with pessimistic tie ordering.
pub fn average_precision(cases: &[ScoredCase]) -> Result<f64> {
    let (n_pos, _) = class_counts(cases)?;
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranked_descending(cases).iter().enumerate() {
        if cases[i].label.is_positive() {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

fn report_for(cases: &[ScoredCase], recall_levels: &[f64]) -> Result<MetricsReport> {
    let (n_pos, n_neg) = class_counts(cases)?;
    let spe_at = recall_levels
        .iter()
        .map(|&x| Ok((x, spe_at_recall(cases, x)?)))
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        auroc: auroc(cases)?,
        ap: average_precision(cases)?,
        spe_at,
        csr: csr(cases)?,
        n_pos,
        n_neg,
        categories: Vec::new(),
    })
}

/// All metrics, plus one sub-report per positive category (that category's
/// positives against every negative) when categories are present.
pub fn full_report(cases: &[ScoredCase], recall_levels: &[f64]) -> Result<MetricsReport> {
    let mut report = report_for(cases, recall_levels)?;
    let categories: BTreeSet<&str> = cases
        .iter()
        .filter(|c| c.label.is_positive())
        .filter_map(|c| c.category.as_deref())
        .collect();
    for cat in categories {
        let subset: Vec<ScoredCase> = cases
            .iter()
            .filter(|c| !c.label.is_positive() || c.category.as_deref() == Some(cat))
            .cloned()
            .collect();
        report
            .categories
            .push((cat.to_owned(), report_for(&subset, recall_levels)?));
    }
    Ok(report)
}

fn format_level(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x}")
    }
}

fn metric_rows(r: &MetricsReport) -> Vec<(String, f64)> {
    let mut rows = vec![("AUROC".to_owned(), r.auroc), ("AP".to_owned(), r.ap)];
    for &(x, v) in &r.spe_at {
        rows.push((format!("Spe@{}%R", format_level(x)), v));
    }
    rows.push(("CSR".to_owned(), r.csr));
    rows
}

/// `scope,metric,value` rows; the overall report uses scope `all`.
pub fn report_to_csv(r: &MetricsReport) -> String {
    let mut out = String::from("scope,metric,value\n");
    let mut emit = |scope: &str, r: &MetricsReport| {
        for (name, v) in metric_rows(r) {
            let _ = writeln!(out, "{scope},{name},{v}");
        }
        let _ = writeln!(out, "{scope},n_pos,{}", r.n_pos);
        let _ = writeln!(out, "{scope},n_neg,{}", r.n_neg);
    };
    emit("all", r);
    for (cat, sub) in &r.categories {
        emit(cat, sub);
    }
    out
}

/// Aligned text table in percent, metrics as rows, one column per scope.
pub fn report_to_table(r: &MetricsReport) -> String {
    let mut scopes: Vec<(&str, &MetricsReport)> = vec![("all", r)];
    scopes.extend(r.categories.iter().map(|(c, s)| (c.as_str(), s)));
    let names: Vec<String> = metric_rows(r).into_iter().map(|(n, _)| n).collect();
    let name_w = names.iter().map(String::len).max().unwrap_or(6).max(6);
    let col_w = scopes.iter().map(|(s, _)| s.len()).max().unwrap_or(0).max(8);
    let mut out = format!("{:<name_w$}", "Metric");
    for (s, _) in &scopes {
        let _ = write!(out, "  {s:>col_w$}");
    }
    out.push('\n');
    for (row, name) in names.iter().enumerate() {
        let _ = write!(out, "{name:<name_w$}");
        for (_, sub) in &scopes {
            let v = metric_rows(sub)[row].1 * 100.0;
            let _ = write!(out, "  {v:>col_w$.2}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<name_w$}", "n_pos/n_neg");
    for (_, sub) in &scopes {
        let counts = format!("{}/{}", sub.n_pos, sub.n_neg);
        let _ = write!(out, "  {counts:>col_w$}");
    }
    out.push('\n');
    out
}

/// Serializes scored cases as `case_id,score,label[,category]`.
pub fn scores_to_csv(cases: &[ScoredCase]) -> String {
    let with_category = cases.iter().any(|c| c.category.is_some());
    let mut out = String::from(if with_category {
        "case_id,score,label,category\n"
    } else {
        "case_id,score,label\n"
    });
    for c in cases {
        let _ = write!(out, "{},{},{}", c.case_id, c.score, c.label.as_u8());
        if with_category {
            let _ = write!(out, ",{}", c.category.as_deref().unwrap_or(""));
        }
        out.push('\n');
    }
    out
}

pub fn parse_scores_csv(text: &str, path: &Path) -> Result<Vec<ScoredCase>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::load(path, "empty score file"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let with_category = match columns.as_slice() {
        ["case_id", "score", "label"] => false,
        ["case_id", "score", "label", "category"] => true,
        _ => {
            return Err(Error::load(
                path,
                format!("unexpected header '{header}' (expected case_id,score,label[,category])"),
            ))
        }
    };
    let mut cases = Vec::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| Error::load(path, format!("line {}: {what}", lineno + 1));
        if fields.len() != columns.len() {
            return Err(bad(&format!("expected {} fields, found {}", columns.len(), fields.len())));
        }
        let score: f64 = fields[1].parse().map_err(|_| bad("score is not a number"))?;
        if !score.is_finite() {
            return Err(bad("score is not finite"));
        }
        let label = match fields[2] {
            "0" => Label::Normal,
            "1" => Label::Pathological,
            other => return Err(bad(&format!("label must be 0 or 1, found '{other}'"))),
        };
        let mut case = ScoredCase::new(fields[0], score, label);
        if with_category && !fields[3].is_empty() {
            case.category = Some(fields[3].to_owned());
        }
        cases.push(case);
    }
    Ok(cases)
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoredCase>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::load(path, format!("cannot read score file: {e}")))?;
    parse_scores_csv(&text, path)
}
