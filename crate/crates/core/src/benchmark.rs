//! Synthetic cases and the end-to-end experiment harness.
//!
//! Normal patches come from a Gaussian mixture. A pathological case is a
//! normal case whose contiguous rectangular lesion block is redrawn from
//! anomaly clusters. Experiments split a dataset into bank, training and test
//! partitions, build both banks, score the test partition with one method and
//! report metrics.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{screen_normal_only, screen_training_free, ContrastiveConfig};
use crate::error::{Error, Result};
use crate::feature_store::{aggregate_local, split_dataset, FeatureMap, Label, LabeledCase};
use crate::knowledge_bank::{
    coreset_subsample, coreset_with_size, collect_features, denoise_bank, BankPair, FeatureSet, KnowledgeBank,
};
use crate::metrics::{full_report, MetricsReport, ScoredCase, DEFAULT_RECALL_LEVELS};
use crate::reasoning::evidence::EvidenceSet;
use crate::reasoning::train::{predict_with_evidence, prepare_examples, train_on_examples};
use crate::reasoning::{retrieve_evidence, ReasoningConfig, TrainConfig};
use crate::util::{floor_fraction, seeded_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub n_normal_clusters: usize,
    pub n_anomaly_clusters: usize,
    /// Per-coordinate standard deviation of normal patches around their center.
    pub cluster_spread: f64,
    /// Distance of an anomaly center from the normal center it is placed next to.
    pub anomaly_offset: f64,
    pub lesion_patch_fraction: f64,
    pub n_normal_cases: usize,
    pub n_path_cases: usize,
    pub seed: u64,
    /// Per-coordinate standard deviation of lesion patches.
    #[serde(default = "default_anomaly_spread")]
    pub anomaly_spread: f64,
    /// Share of anomaly clusters placed at `near_anomaly_offset` instead.
    #[serde(default)]
    pub near_anomaly_fraction: f64,
    #[serde(default)]
    pub near_anomaly_offset: f64,
}

fn default_anomaly_spread() -> f64 {
    0.1
}

impl SynthConfig {
    /// Anomaly clusters far outside the normal mixture.
    pub fn easy() -> Self {
        Self {
            d: 16,
            h: 8,
            w: 8,
            n_normal_clusters: 4,
            n_anomaly_clusters: 2,
            cluster_spread: 0.25,
            anomaly_offset: 4.0,
            lesion_patch_fraction: 0.25,
            n_normal_cases: 40,
            n_path_cases: 40,
            seed: 7,
            anomaly_spread: 0.1,
            near_anomaly_fraction: 0.0,
            near_anomaly_offset: 0.0,
        }
    }

    /// Half the lesions come from anomaly clusters inside the normal spread.
    pub fn hard() -> Self {
        Self {
            d: 8,
            n_anomaly_clusters: 8,
            anomaly_offset: 3.0,
            near_anomaly_fraction: 0.5,
            near_anomaly_offset: 0.6,
            n_normal_cases: 200,
            n_path_cases: 200,
            seed: 11,
            ..Self::easy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("h", self.h),
            ("w", self.w),
            ("n_normal_clusters", self.n_normal_clusters),
            ("n_anomaly_clusters", self.n_anomaly_clusters),
            ("n_normal_cases", self.n_normal_cases),
            ("n_path_cases", self.n_path_cases),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, v) in [
            ("cluster_spread", self.cluster_spread),
            ("anomaly_offset", self.anomaly_offset),
            ("anomaly_spread", self.anomaly_spread),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be a positive real, got {v}")));
            }
        }
        if !(self.lesion_patch_fraction > 0.0 && self.lesion_patch_fraction < 1.0) {
            return Err(Error::Config(format!(
                "lesion_patch_fraction must lie in (0, 1), got {}",
                self.lesion_patch_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.near_anomaly_fraction) {
            return Err(Error::Config(format!(
                "near_anomaly_fraction must lie in [0, 1], got {}",
                self.near_anomaly_fraction
            )));
        }
        if !(self.near_anomaly_offset.is_finite() && self.near_anomaly_offset >= 0.0) {
            return Err(Error::Config("near_anomaly_offset must be non-negative".into()));
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    /// Anomaly clusters just outside the normal spread, with enough bank
    /// cases for banks of more than 1000 vectors per class.
    fn default() -> Self {
        Self {
            anomaly_offset: 0.8,
            n_normal_cases: 160,
            n_path_cases: 160,
            seed: 3,
            ..Self::easy()
        }
    }
}

/// Rectangle `(rows, cols)` fitting the grid whose area is closest to
/// `fraction · h · w` (at least 1), preferring near-square shapes.
pub fn lesion_shape(h: usize, w: usize, fraction: f64) -> (usize, usize) {
    let target = ((fraction * (h * w) as f64).round() as usize).max(1);
    let mut best = (1, 1);
    let mut best_key = (usize::MAX, usize::MAX);
    for r in 1..=h {
        for c in 1..=w {
            let key = ((r * c).abs_diff(target), r.abs_diff(c));
            if key < best_key {
                best_key = key;
                best = (r, c);
            }
        }
    }
    best
}

fn gaussian_vector(rng: &mut impl Rng, center: &[f64], spread: f64, out: &mut Vec<f32>) {
    for &c in center {
        let z: f64 = StandardNormal.sample(rng);
        out.push((c + spread * z) as f32);
    }
}

/// Deterministic synthetic dataset: normal cases first, then pathological.
/// Each lesion is either near or far (chosen per case with probability
/// `near_anomaly_fraction`); every lesion patch then picks its own cluster
/// from that group.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<LabeledCase>> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let d = cfg.d;
    let normal_centers: Vec<Vec<f64>> = (0..cfg.n_normal_clusters)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let near = (cfg.near_anomaly_fraction * cfg.n_anomaly_clusters as f64).round() as usize;
    let anomaly_centers: Vec<Vec<f64>> = (0..cfg.n_anomaly_clusters)
        .map(|a| {
            let base = &normal_centers[rng.random_range(0..cfg.n_normal_clusters)];
            let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let offset = if a < near { cfg.near_anomaly_offset } else { cfg.anomaly_offset };
            base.iter().zip(&dir).map(|(b, u)| b + offset * u / norm).collect()
        })
        .collect();
    let (lr, lc) = lesion_shape(cfg.h, cfg.w, cfg.lesion_patch_fraction);
    let near_group: Vec<usize> = (0..near).collect();
    let far_group: Vec<usize> = (near..cfg.n_anomaly_clusters).collect();
    let mut cases = Vec::with_capacity(cfg.n_normal_cases + cfg.n_path_cases);
    for i in 0..cfg.n_normal_cases + cfg.n_path_cases {
        let pathological = i >= cfg.n_normal_cases;
        let lesion = pathological.then(|| {
            let top = rng.random_range(0..=cfg.h - lr);
            let left = rng.random_range(0..=cfg.w - lc);
            let group = if far_group.is_empty() || (!near_group.is_empty() && rng.random_bool(cfg.near_anomaly_fraction)) {
                &near_group
            } else {
                &far_group
            };
            (top, left, group)
        });
        let mut data = Vec::with_capacity(cfg.h * cfg.w * d);
        for r in 0..cfg.h {
            for c in 0..cfg.w {
                match lesion {
                    Some((top, left, group)) if (top..top + lr).contains(&r) && (left..left + lc).contains(&c) => {
                        let cluster = group[rng.random_range(0..group.len())];
                        gaussian_vector(&mut rng, &anomaly_centers[cluster], cfg.anomaly_spread, &mut data)
                    }
                    _ => {
                        let center = &normal_centers[rng.random_range(0..cfg.n_normal_clusters)];
                        gaussian_vector(&mut rng, center, cfg.cluster_spread, &mut data)
                    }
                }
            }
        }
        let (id, label) = if pathological {
            (format!("path_{:04}", i - cfg.n_normal_cases), Label::Pathological)
        } else {
            (format!("normal_{i:04}"), Label::Normal)
        };
        cases.push(LabeledCase::new(FeatureMap::new(id, cfg.h, cfg.w, d, data)?, label));
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ContrastiveDual,
    ContrastiveNormalOnly,
    Reasoning,
    ReasoningNoRetrieval,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::ContrastiveDual,
        Method::ContrastiveNormalOnly,
        Method::Reasoning,
        Method::ReasoningNoRetrieval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ContrastiveDual => "contrastive_dual",
            Method::ContrastiveNormalOnly => "contrastive_normal_only",
            Method::Reasoning => "reasoning",
            Method::ReasoningNoRetrieval => "reasoning_no_retrieval",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Everything that determines an experiment besides the method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    /// Share of each class used to build the banks.
    pub bank_split_ratio: f64,
    /// Share of each class of the remaining cases used for training; the rest is the test set.
    pub train_split_ratio: f64,
    pub split_seed: u64,
    pub window: usize,
    pub subsample_ratio: f64,
    /// Exact bank size per class, overriding `subsample_ratio`.
    pub bank_size: Option<usize>,
    pub bank_seed: u64,
    pub normalize: bool,
    /// Normal vectors injected into the pathological set, as a share of its size.
    pub contamination: f64,
    /// Drop fraction for denoising the pathological set before subsampling.
    pub denoise_q: Option<f64>,
    pub denoise_k: usize,
    pub contrastive: ContrastiveConfig,
    pub reasoning: ReasoningConfig,
    pub train: TrainConfig,
    pub recall_levels: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            bank_split_ratio: 0.5,
            train_split_ratio: 0.2,
            split_seed: 0,
            window: 3,
            subsample_ratio: 0.25,
            bank_size: None,
            bank_seed: 0,
            normalize: false,
            contamination: 0.0,
            denoise_q: None,
            denoise_k: 3,
            contrastive: ContrastiveConfig::default(),
            reasoning: ReasoningConfig::default(),
            train: TrainConfig::default(),
            recall_levels: DEFAULT_RECALL_LEVELS.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn easy() -> Self {
        Self {
            synth: SynthConfig::easy(),
            ..Self::default()
        }
    }

    /// Patch-level scoring on the hard data with a small reasoning head.
    pub fn hard() -> Self {
        Self {
            synth: SynthConfig::hard(),
            train_split_ratio: 0.5,
            window: 1,
            subsample_ratio: 0.5,
            reasoning: ReasoningConfig {
                depth: 1,
                d_model: 16,
                heads: 2,
                k: 3,
                mlp_hidden: 32,
                seed: 0,
            },
            train: TrainConfig {
                learning_rate: 3e-3,
                warmup_steps: 150,
                total_steps: 1500,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        for (name, v) in [
            ("bank_split_ratio", self.bank_split_ratio),
            ("train_split_ratio", self.train_split_ratio),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd and positive, got {}", self.window)));
        }
        if !(self.subsample_ratio > 0.0 && self.subsample_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "subsample_ratio must lie in (0, 1], got {}",
                self.subsample_ratio
            )));
        }
        if self.bank_size == Some(0) {
            return Err(Error::Config("bank_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.contamination) {
            return Err(Error::Config(format!(
                "contamination fraction must lie in [0, 1), got {}",
                self.contamination
            )));
        }
        if let Some(q) = self.denoise_q {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::Config(format!("denoise_q must lie in [0, 1), got {q}")));
            }
        }
        if self.denoise_k == 0 || self.contrastive.k == 0 {
            return Err(Error::Config("denoise_k and contrastive.k must be positive".into()));
        }
        self.reasoning.validate()?;
        self.train.validate()?;
        for &x in &self.recall_levels {
            if !(x > 0.0 && x <= 100.0) {
                return Err(Error::Config(format!("recall level {x} outside (0, 100]")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the whole config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub method: Method,
    /// Free-form tag of the run inside a study (e.g. `size=200`).
    pub label: String,
    pub report: MetricsReport,
    pub fingerprint: String,
    pub bank_sizes: (usize, usize),
    pub injected: usize,
    pub wall_clock: Duration,
}

/// Bank, training and test cases of one dataset.
#[derive(Debug, Clone)]
pub struct Partition {
    pub bank: Vec<LabeledCase>,
    pub train: Vec<LabeledCase>,
    pub test: Vec<LabeledCase>,
}

pub fn partition(dataset: &[LabeledCase], cfg: &ExperimentConfig) -> Result<Partition> {
    let outer = split_dataset(dataset, cfg.bank_split_ratio, cfg.split_seed)?;
    let inner = split_dataset(&outer.reasoning_subset, cfg.train_split_ratio, cfg.split_seed.wrapping_add(1))?;
    Ok(Partition {
        bank: outer.bank_subset,
        train: inner.bank_subset,
        test: inner.reasoning_subset,
    })
}

fn by_label(cases: &[LabeledCase], label: Label) -> Vec<LabeledCase> {
    cases.iter().filter(|c| c.label == label).cloned().collect()
}

/// Adds `⌊fraction · |pathological|⌋` vectors sampled without replacement
/// from `normal`; returns how many were added.
pub fn inject_normal_vectors(
    pathological: &mut FeatureSet,
    normal: &FeatureSet,
    fraction: f64,
    seed: u64,
) -> Result<usize> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("contamination fraction must lie in [0, 1), got {fraction}")));
    }
    let count = floor_fraction(fraction, pathological.len());
    if count > normal.len() {
        return Err(Error::Config(format!(
            "cannot inject {count} normal vectors from a set of {}",
            normal.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    let picked: Vec<f32> = sample(&mut rng, normal.len(), count)
        .into_iter()
        .flat_map(|i| normal.vector(i).iter().copied())
        .collect();
    pathological.extend_from(&picked)?;
    Ok(count)
}

fn subsample(set: &FeatureSet, cfg: &ExperimentConfig) -> Result<KnowledgeBank> {
    match cfg.bank_size {
        Some(n) if n > set.len() => Err(Error::Config(format!(
            "bank size {n} exceeds the {} available {} features",
            set.len(),
            if set.source_label().is_positive() { "pathological" } else { "normal" }
        ))),
        Some(n) => coreset_with_size(set, n, cfg.bank_seed, cfg.normalize),
        None => coreset_subsample(set, cfg.subsample_ratio, cfg.bank_seed, cfg.normalize),
    }
}

/// Builds both banks from the bank partition; returns the number of
/// injected contamination vectors alongside.
pub fn build_banks(bank_cases: &[LabeledCase], cfg: &ExperimentConfig) -> Result<(BankPair, usize)> {
    let normal_set = collect_features(&by_label(bank_cases, Label::Normal), cfg.window)?;
    let mut path_set = collect_features(&by_label(bank_cases, Label::Pathological), cfg.window)?;
    let injected = inject_normal_vectors(&mut path_set, &normal_set, cfg.contamination, cfg.bank_seed)?;
    if let Some(q) = cfg.denoise_q {
        path_set = denoise_bank(&path_set, q, cfg.denoise_k)?;
    }
    let banks = BankPair::new(subsample(&normal_set, cfg)?, subsample(&path_set, cfg)?)?;
    Ok((banks, injected))
}

fn aggregated(cases: &[LabeledCase], window: usize) -> Result<Vec<LabeledCase>> {
    cases
        .iter()
        .map(|c| Ok(LabeledCase::new(aggregate_local(&c.features, window)?, c.label)))
        .collect()
}

fn score_cases(
    method: Method,
    banks: &BankPair,
    train: &[LabeledCase],
    test: &[LabeledCase],
    cfg: &ExperimentConfig,
) -> Result<Vec<f64>> {
    match method {
        Method::ContrastiveDual => test
            .iter()
            .map(|c| screen_training_free(&c.features, banks, &cfg.contrastive).map(|r| r.score))
            .collect(),
        Method::ContrastiveNormalOnly => test
            .iter()
            .map(|c| screen_normal_only(&c.features, &banks.normal, &cfg.contrastive).map(|r| r.score))
            .collect(),
        Method::Reasoning | Method::ReasoningNoRetrieval => {
            let retrieval = method == Method::Reasoning;
            let k = cfg.reasoning.k;
            let examples = prepare_examples(train, retrieval.then_some(banks), k)?;
            let model = train_on_examples(&examples, &cfg.reasoning, &cfg.train)?;
            test.iter()
                .map(|c| {
                    let (ev_n, ev_p) = if retrieval {
                        retrieve_evidence(&c.features, banks, k)?
                    } else {
                        let ev = EvidenceSet::replicated_query(&c.features, k)?;
                        (ev.clone(), ev)
                    };
                    predict_with_evidence(&c.features, &ev_n, &ev_p, &model.params).map(|r| r.score)
                })
                .collect()
        }
    }
}

/// Runs one method end to end on `dataset` and reports metrics on the test partition.
pub fn run_experiment(dataset: &[LabeledCase], method: Method, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let started = Instant::now();
    let parts = partition(dataset, cfg)?;
    let (banks, injected) = build_banks(&parts.bank, cfg)?;
    let train = aggregated(&parts.train, cfg.window)?;
    let test = aggregated(&parts.test, cfg.window)?;
    let scores = score_cases(method, &banks, &train, &test, cfg)?;
    let scored: Vec<ScoredCase> = test
        .iter()
        .zip(scores)
        .map(|(c, s)| ScoredCase::new(c.case_id(), s, c.label))
        .collect();
    Ok(ExperimentResult {
        method,
        label: method.name().to_string(),
        report: full_report(&scored, &cfg.recall_levels)?,
        fingerprint: cfg.fingerprint(),
        bank_sizes: (banks.normal.len(), banks.pathological.len()),
        injected,
        wall_clock: started.elapsed(),
    })
}

/// `contrastive_dual` with banks cut to each size along the coreset order.
pub fn scaling_study(
    dataset: &[LabeledCase],
    base: &ExperimentConfig,
    bank_sizes: &[usize],
) -> Result<Vec<ExperimentResult>> {
    if bank_sizes.is_empty() || bank_sizes.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::Config(format!("bank sizes must be non-empty and ascending, got {bank_sizes:?}")));
    }
    let parts = partition(dataset, base)?;
    for label in [Label::Normal, Label::Pathological] {
        let available: usize = by_label(&parts.bank, label).iter().map(|c| c.features.num_patches()).sum();
        if let Some(&too_big) = bank_sizes.iter().find(|&&s| s > available) {
            return Err(Error::Config(format!(
                "bank size {too_big} exceeds the {available} available {} features",
                if label.is_positive() { "pathological" } else { "normal" }
            )));
        }
    }
    bank_sizes
        .iter()
        .map(|&size| {
            let cfg = ExperimentConfig {
                bank_size: Some(size),
                ..base.clone()
            };
            let mut r = run_experiment(dataset, Method::ContrastiveDual, &cfg)?;
            r.label = format!("size={size}");
            Ok(r)
        })
        .collect()
}

/// `contrastive_dual` with a clean pathological bank and with
/// `⌊fraction · |S_P|⌋` normal vectors injected before subsampling.
pub fn contamination_study(
    dataset: &[LabeledCase],
    base: &ExperimentConfig,
    fraction: f64,
) -> Result<(ExperimentResult, ExperimentResult)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("contamination fraction must lie in [0, 1), got {fraction}")));
    }
    let clean_cfg = ExperimentConfig {
        contamination: 0.0,
        ..base.clone()
    };
    let dirty_cfg = ExperimentConfig {
        contamination: fraction,
        ..base.clone()
    };
    let mut clean = run_experiment(dataset, Method::ContrastiveDual, &clean_cfg)?;
    clean.label = "clean".into();
    let mut dirty = run_experiment(dataset, Method::ContrastiveDual, &dirty_cfg)?;
    dirty.label = format!("contaminated={fraction}");
    Ok((clean, dirty))
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

pub fn results_header(recall_levels: &[f64]) -> String {
    let mut cols = vec![
        "study".to_string(),
        "label".into(),
        "method".into(),
        "fingerprint".into(),
        "bank_normal".into(),
        "bank_pathological".into(),
        "injected".into(),
        "auroc".into(),
        "ap".into(),
    ];
    cols.extend(recall_levels.iter().map(|x| format!("spe@{x}%r")));
    cols.extend(["csr".into(), "n_pos".into(), "n_neg".into()]);
    cols.join(",")
}

/// One CSV row per result; wall-clock time is left out so reruns are byte-identical.
pub fn results_rows(study: &str, results: &[ExperimentResult]) -> String {
    let mut out = String::new();
    for r in results {
        let mut cols = vec![
            study.to_string(),
            r.label.clone(),
            r.method.to_string(),
            r.fingerprint.clone(),
            r.bank_sizes.0.to_string(),
            r.bank_sizes.1.to_string(),
            r.injected.to_string(),
            fmt_metric(r.report.auroc),
            fmt_metric(r.report.ap),
        ];
        cols.extend(r.report.spe_at.iter().map(|&(_, v)| fmt_metric(v)));
        cols.extend([
            fmt_metric(r.report.csr),
            r.report.n_pos.to_string(),
            r.report.n_neg.to_string(),
        ]);
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// Appends rows to `path`, writing the header first when the file is new or empty.
pub fn append_results_csv(path: &Path, study: &str, results: &[ExperimentResult]) -> Result<()> {
    let Some(first) = results.first() else {
        return Ok(());
    };
    let levels: Vec<f64> = first.report.spe_at.iter().map(|&(x, _)| x).collect();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&results_header(&levels));
        text.push('\n');
    }
    text.push_str(&results_rows(study, results));
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const CHART_W: f64 = 480.0;
const CHART_H: f64 = 300.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn chart_frame(title: &str, body: &str) -> String {
    let (x0, y0, x1, y1) = (PAD, PAD, CHART_W - PAD / 2.0, CHART_H - PAD);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" viewBox=\"0 0 {CHART_W} {CHART_H}\">\n"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        CHART_W / 2.0,
        xml_escape(title)
    ));
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = y1 - v * (y1 - y0);
        s.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y:.1}\" x2=\"{x1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{v:.2}</text>\n",
            x0 - 4.0,
            y + 3.0
        ));
    }
    s.push_str(body);
    s.push_str("</svg>\n");
    s
}

fn y_of(v: f64) -> f64 {
    let (y0, y1) = (PAD, CHART_H - PAD);
    y1 - v.clamp(0.0, 1.0) * (y1 - y0)
}

/// Bars in `[0, 1]`, one per label.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let (x0, x1) = (PAD, CHART_W - PAD / 2.0);
    let slot = (x1 - x0) / bars.len().max(1) as f64;
    let mut body = String::new();
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = x0 + slot * i as f64 + slot * 0.15;
        let y = y_of(*v);
        body.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n",
            slot * 0.7,
            CHART_H - PAD - y,
            PALETTE[i % PALETTE.len()]
        ));
        body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            x + slot * 0.35,
            CHART_H - PAD + 14.0,
            xml_escape(label)
        ));
        body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{v:.3}</text>\n",
            x + slot * 0.35,
            y - 3.0
        ));
    }
    chart_frame(title, &body)
}

/// Polylines in `[0, 1]` over shared categorical x positions.
pub fn line_chart_svg(title: &str, xs: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (x0, x1) = (PAD, CHART_W - PAD / 2.0);
    let step = if xs.len() > 1 { (x1 - x0) / (xs.len() - 1) as f64 } else { 0.0 };
    let x_of = |i: usize| if xs.len() > 1 { x0 + step * i as f64 } else { (x0 + x1) / 2.0 };
    let mut body = String::new();
    for (i, x) in xs.iter().enumerate() {
        body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            x_of(i),
            CHART_H - PAD + 14.0,
            xml_escape(x)
        ));
    }
    for (s, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x_of(i), y_of(v)))
            .collect();
        body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
        body.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"{color}\">{}</text>\n",
            x1 - 90.0,
            PAD + 14.0 * (s + 1) as f64,
            xml_escape(name)
        ));
    }
    chart_frame(title, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            d: 4,
            h: 4,
            w: 4,
            n_normal_clusters: 2,
            n_anomaly_clusters: 2,
            cluster_spread: 0.2,
            anomaly_offset: 5.0,
            lesion_patch_fraction: 0.25,
            n_normal_cases: 8,
            n_path_cases: 8,
            seed: 1,
            anomaly_spread: 0.1,
            near_anomaly_fraction: 0.0,
            near_anomaly_offset: 0.0,
        }
    }

    fn small_experiment() -> ExperimentConfig {
        ExperimentConfig {
            synth: small(),
            window: 1,
            train_split_ratio: 0.5,
            reasoning: ReasoningConfig {
                depth: 1,
                d_model: 8,
                heads: 2,
                k: 2,
                mlp_hidden: 8,
                seed: 0,
            },
            train: TrainConfig {
                total_steps: 0,
                warmup_steps: 0,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let cases = generate_synthetic(&small()).unwrap();
        assert_eq!(cases.len(), 16);
        assert_eq!(cases.iter().filter(|c| c.label == Label::Normal).count(), 8);
        assert!(cases[..8].iter().all(|c| c.label == Label::Normal));
        assert!(cases[8..].iter().all(|c| c.label == Label::Pathological));
        assert_eq!(cases[8].case_id(), "path_0000");
    }

    #[test]
    fn lesion_covers_four_patches() {
        assert_eq!(lesion_shape(4, 4, 0.25), (2, 2));
        assert_eq!(lesion_shape(8, 8, 0.25), (4, 4));
        assert_eq!(lesion_shape(3, 3, 0.01), (1, 1));
        // Far anomalies make lesion patches the only ones away from every normal center.
        let cases = generate_synthetic(&small()).unwrap();
        let normal: Vec<&[f32]> = cases[..8].iter().flat_map(|c| c.features.patches()).collect();
        for case in &cases[8..] {
            let far = case
                .features
                .patches()
                .filter(|p| normal.iter().all(|q| crate::util::euclidean(p, q) > 2.0))
                .count();
            assert_eq!(far, 4, "{}", case.case_id());
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SynthConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_synth_config_is_rejected() {
        for bad in [
            SynthConfig { lesion_patch_fraction: 1.0, ..small() },
            SynthConfig { lesion_patch_fraction: 0.0, ..small() },
            SynthConfig { n_path_cases: 0, ..small() },
            SynthConfig { cluster_spread: -1.0, ..small() },
            SynthConfig { near_anomaly_fraction: 1.5, ..small() },
        ] {
            assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
        }
    }

    #[test]
    fn fingerprint_tracks_every_setting() {
        let base = ExperimentConfig::default();
        assert_eq!(base.fingerprint(), ExperimentConfig::default().fingerprint());
        let variants = [
            ExperimentConfig { split_seed: 1, ..base.clone() },
            ExperimentConfig { bank_seed: 1, ..base.clone() },
            ExperimentConfig { synth: SynthConfig { seed: 4, ..base.synth.clone() }, ..base.clone() },
            ExperimentConfig { train: TrainConfig { seed: 1, ..base.train.clone() }, ..base.clone() },
            ExperimentConfig { reasoning: ReasoningConfig { seed: 1, ..base.reasoning.clone() }, ..base.clone() },
            ExperimentConfig { contrastive: ContrastiveConfig { k: 5, ..base.contrastive.clone() }, ..base.clone() },
        ];
        for v in &variants {
            assert_ne!(v.fingerprint(), base.fingerprint());
        }
    }

    #[test]
    fn untrained_reasoning_still_reports() {
        let cfg = small_experiment();
        let data = generate_synthetic(&cfg.synth).unwrap();
        for method in [Method::Reasoning, Method::ReasoningNoRetrieval] {
            let r = run_experiment(&data, method, &cfg).unwrap();
            assert!(r.report.auroc.is_finite());
            assert_eq!((r.report.n_pos, r.report.n_neg), (2, 2));
        }
    }

    #[test]
    fn methods_roundtrip_through_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("patchcore".parse::<Method>().is_err());
    }

    #[test]
    fn scaling_sizes_are_checked() {
        let cfg = small_experiment();
        let data = generate_synthetic(&cfg.synth).unwrap();
        assert_eq!(scaling_study(&data, &cfg, &[4, 8, 16]).unwrap().len(), 3);
        assert!(matches!(scaling_study(&data, &cfg, &[8, 4]), Err(Error::Config(_))));
        // 4 bank cases per class × 16 patches.
        assert!(matches!(scaling_study(&data, &cfg, &[10, 65]), Err(Error::Config(_))));
    }

    #[test]
    fn smaller_bank_is_a_prefix() {
        let cfg = small_experiment();
        let data = generate_synthetic(&cfg.synth).unwrap();
        let parts = partition(&data, &cfg).unwrap();
        let (small_banks, _) = build_banks(&parts.bank, &ExperimentConfig { bank_size: Some(5), ..cfg.clone() }).unwrap();
        let (big_banks, _) = build_banks(&parts.bank, &ExperimentConfig { bank_size: Some(20), ..cfg }).unwrap();
        assert_eq!(small_banks.normal.as_flat(), &big_banks.normal.as_flat()[..5 * 4]);
        assert_eq!(small_banks.pathological.as_flat(), &big_banks.pathological.as_flat()[..5 * 4]);
    }

    #[test]
    fn contamination_counts() {
        let cfg = small_experiment();
        let data = generate_synthetic(&cfg.synth).unwrap();
        let (clean, same) = contamination_study(&data, &cfg, 0.0).unwrap();
        assert_eq!(clean.report, same.report);
        assert_eq!(same.injected, 0);
        let (_, dirty) = contamination_study(&data, &cfg, 0.2).unwrap();
        assert_eq!(dirty.injected, (0.2f64 * 64.0).floor() as usize);
        assert!(contamination_study(&data, &cfg, 1.0).is_err());
        assert!(contamination_study(&data, &cfg, -0.1).is_err());
    }

    #[test]
    fn partitions_are_disjoint() {
        let cfg = small_experiment();
        let data = generate_synthetic(&cfg.synth).unwrap();
        let p = partition(&data, &cfg).unwrap();
        let mut ids: Vec<&str> = p.bank.iter().chain(&p.train).chain(&p.test).map(|c| c.case_id()).collect();
        assert_eq!(ids.len(), 16);
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 16);
    }

    #[test]
    fn csv_rows_are_stable() {
        let cfg = small_experiment();
        let data = generate_synthetic(&cfg.synth).unwrap();
        let r = run_experiment(&data, Method::ContrastiveDual, &cfg).unwrap();
        let header = results_header(&cfg.recall_levels);
        let row = results_rows("demo", std::slice::from_ref(&r));
        assert_eq!(header.split(',').count(), row.trim_end().split(',').count());
        let again = run_experiment(&data, Method::ContrastiveDual, &cfg).unwrap();
        assert_eq!(row, results_rows("demo", &[again]));
        assert!(bar_chart_svg("a<b", &[("x".into(), 0.5)]).contains("a&lt;b"));
        assert!(line_chart_svg("t", &["1".into(), "2".into()], &[("s".into(), vec![0.1, 0.9])]).contains("<polyline"));
    }
}
