use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{ScreeningMethod, ScreeningResult};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureMap, Label, LabeledCase};
use crate::knowledge_bank::BankPair;
use crate::util::seeded_rng;

use super::autodiff::{sigmoid, Tape};
use super::evidence::{retrieve_evidence, EvidenceSet};
use super::model::{forward, forward_on_tape, BoundParams, ReasoningConfig, ReasoningParams};
use super::tensor::Matrix;

/// One case with its retrieved evidence, ready for the reasoning head.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub features: FeatureMap,
    pub evidence_normal: EvidenceSet,
    pub evidence_pathological: EvidenceSet,
    pub label: Label,
}

impl TrainingExample {
    pub fn retrieve(case: &LabeledCase, banks: &BankPair, k: usize) -> Result<Self> {
        let (evidence_normal, evidence_pathological) = retrieve_evidence(&case.features, banks, k)?;
        Ok(Self {
            features: case.features.clone(),
            evidence_normal,
            evidence_pathological,
            label: case.label,
        })
    }

    /// The case paired with itself as evidence on both branches.
    pub fn without_retrieval(case: &LabeledCase, k: usize) -> Result<Self> {
        let ev = EvidenceSet::replicated_query(&case.features, k)?;
        Ok(Self {
            features: case.features.clone(),
            evidence_normal: ev.clone(),
            evidence_pathological: ev,
            label: case.label,
        })
    }

    fn target(&self) -> f64 {
        if self.label.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate at `step`: linear from 0 to the peak at `warmup_steps`,
    /// then cosine decay reaching 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.learning_rate * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ReasoningParams,
    pub log: Vec<LogEntry>,
}

fn example_grad(example: &TrainingExample, params: &ReasoningParams) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let logit = forward_on_tape(
        &mut tape,
        &bound,
        &example.features,
        &example.evidence_normal,
        &example.evidence_pathological,
    )?;
    let loss = tape.bce_with_logits(logit, example.target());
    let grads = tape.backward(loss);
    let per_tensor = bound.vars().iter().map(|&v| grads.of(&tape, v)).collect();
    Ok((tape.value(loss).data[0], per_tensor))
}

/// Mean binary cross-entropy over `batch` and its gradient, shaped like `params`.
pub fn loss_and_grad(batch: &[&TrainingExample], params: &ReasoningParams) -> Result<(f64, ReasoningParams)> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let parts: Vec<(f64, Vec<Matrix>)> = batch
        .par_iter()
        .map(|ex| example_grad(ex, params))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for (l, tensors) in parts {
        loss += l;
        for (slot, g) in grad.tensors_mut().iter_mut().zip(tensors) {
            slot.value.add_assign(&g);
        }
    }
    for slot in grad.tensors_mut() {
        slot.value.data.iter_mut().for_each(|v| *v *= scale);
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    Ok((loss, grad))
}

/// Mean loss over `examples` without gradients.
pub fn mean_loss(examples: &[TrainingExample], params: &ReasoningParams) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let z = forward(&ex.features, &ex.evidence_normal, &ex.evidence_pathological, params)?;
            let y = ex.target();
            Ok(z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

struct AdamW {
    m: ReasoningParams,
    v: ReasoningParams,
    t: i32,
}

impl AdamW {
    const EPS: f64 = 1e-8;

    fn new(params: &ReasoningParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ReasoningParams, grad: &ReasoningParams, lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t);
        let bc2 = 1.0 - tc.beta2.powi(self.t);
        let slots = params
            .tensors_mut()
            .iter_mut()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in slots {
            let decay = if p.decay { tc.weight_decay } else { 0.0 };
            for i in 0..p.value.data.len() {
                let gi = g.value.data[i];
                let mi = tc.beta1 * m.value.data[i] + (1.0 - tc.beta1) * gi;
                let vi = tc.beta2 * v.value.data[i] + (1.0 - tc.beta2) * gi * gi;
                m.value.data[i] = mi;
                v.value.data[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + Self::EPS);
                let w = &mut p.value.data[i];
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

fn check_both_classes(examples: &[TrainingExample]) -> Result<()> {
    let pos = examples.iter().filter(|e| e.label.is_positive()).count();
    if pos == 0 || pos == examples.len() {
        return Err(Error::Training(format!(
            "training data must contain both classes, got {pos} pathological of {}",
            examples.len()
        )));
    }
    Ok(())
}

/// Trains from prepared examples for exactly `tc.total_steps` steps.
/// Mini-batches come from a seeded shuffle redrawn every epoch.
pub fn train_on_examples(
    examples: &[TrainingExample],
    rc: &ReasoningConfig,
    tc: &TrainConfig,
) -> Result<TrainedModel> {
    tc.validate()?;
    rc.validate()?;
    check_both_classes(examples)?;
    let feature_dim = examples[0].features.dim();
    let mut params = ReasoningParams::init(rc, feature_dim)?;
    let mut opt = AdamW::new(&params);
    let mut rng = seeded_rng(tc.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let batch_size = tc.batch_size.min(examples.len());
    let mut log = Vec::with_capacity(tc.total_steps);
    for step in 0..tc.total_steps {
        let mut batch = Vec::with_capacity(batch_size);
        while batch.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grad) = loss_and_grad(&batch, &params)?;
        let lr = tc.lr_at(step);
        opt.step(&mut params, &grad, lr, tc);
        log.push(LogEntry { step, lr, loss });
    }
    Ok(TrainedModel { params, log })
}

/// Retrieves evidence for each case from `banks` and trains the head.
pub fn train(
    dataset: &[LabeledCase],
    banks: &BankPair,
    rc: &ReasoningConfig,
    tc: &TrainConfig,
) -> Result<TrainedModel> {
    rc.validate()?;
    let examples = prepare_examples(dataset, Some(banks), rc.k)?;
    train_on_examples(&examples, rc, tc)
}

/// Builds examples with retrieved evidence, or with the query itself as
/// evidence when `banks` is `None`.
pub fn prepare_examples(dataset: &[LabeledCase], banks: Option<&BankPair>, k: usize) -> Result<Vec<TrainingExample>> {
    dataset
        .par_iter()
        .map(|case| match banks {
            Some(b) => TrainingExample::retrieve(case, b, k),
            None => TrainingExample::without_retrieval(case, k),
        })
        .collect()
}

/// Screening probability for one case.
pub fn predict(fm: &FeatureMap, banks: &BankPair, params: &ReasoningParams) -> Result<ScreeningResult> {
    let (ev_n, ev_p) = retrieve_evidence(fm, banks, params.config().k)?;
    predict_with_evidence(fm, &ev_n, &ev_p, params)
}

pub fn predict_with_evidence(
    fm: &FeatureMap,
    ev_n: &EvidenceSet,
    ev_p: &EvidenceSet,
    params: &ReasoningParams,
) -> Result<ScreeningResult> {
    let logit = forward(fm, ev_n, ev_p, params)?;
    Ok(ScreeningResult {
        case_id: fm.case_id().to_string(),
        score: sigmoid(logit),
        abnormality_map: None,
        method: ScreeningMethod::Reasoning,
    })
}

pub fn log_to_csv(log: &[LogEntry]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.step, e.lr, e.loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ReasoningConfig {
        ReasoningConfig {
            depth: 2,
            d_model: 8,
            heads: 2,
            k: 2,
            mlp_hidden: 8,
            seed: 1,
        }
    }

    fn example(rng: &mut impl Rng, label: Label, shift: f32) -> TrainingExample {
        let (h, w, d, k) = (2, 2, 3, 2);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0) + shift).collect::<Vec<_>>();
        let fm = FeatureMap::new("x", h, w, d, draw(h * w * d)).unwrap();
        let ev = |v: Vec<f32>| EvidenceSet {
            height: h,
            width: w,
            k,
            dim: d,
            vectors: v,
            distances: vec![0.0; h * w * k],
        };
        TrainingExample {
            features: fm,
            evidence_normal: ev(draw(h * w * k * d)),
            evidence_pathological: ev(draw(h * w * k * d)),
            label,
        }
    }

    /// Relative error `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps
    /// gradients at rounding-noise level (~1e-12) from dominating.
    fn max_relative_gradient_error(batch: &[&TrainingExample], params: &ReasoningParams) -> f64 {
        let (_, grad) = loss_and_grad(batch, params).unwrap();
        let step = 1e-4;
        let mut worst: f64 = 0.0;
        for (t, g) in params.tensors().iter().zip(grad.tensors()) {
            for i in 0..t.value.len() {
                let mut plus = params.clone();
                plus.get_mut(&t.name).unwrap().data[i] += step;
                let mut minus = params.clone();
                minus.get_mut(&t.name).unwrap().data[i] -= step;
                let numeric = (loss_and_grad(batch, &plus).unwrap().0 - loss_and_grad(batch, &minus).unwrap().0)
                    / (2.0 * step);
                let analytic = g.value.data[i];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = seeded_rng(21 + seed);
            let params = ReasoningParams::init(&ReasoningConfig { seed, ..tiny_config() }, 3).unwrap();
            let a = example(&mut rng, Label::Normal, 0.0);
            let b = example(&mut rng, Label::Pathological, 0.3);
            let err = max_relative_gradient_error(&[&a, &b], &params);
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn duplicating_the_batch_changes_nothing() {
        let mut rng = seeded_rng(22);
        let params = ReasoningParams::init(&tiny_config(), 3).unwrap();
        let a = example(&mut rng, Label::Normal, 0.0);
        let b = example(&mut rng, Label::Pathological, 0.0);
        let (l1, g1) = loss_and_grad(&[&a, &b], &params).unwrap();
        let (l2, g2) = loss_and_grad(&[&a, &b, &a, &b], &params).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (x, y) in g1.tensors().iter().zip(g2.tensors()) {
            for (u, v) in x.value.data.iter().zip(&y.value.data) {
                assert!((u - v).abs() <= 1e-14 * u.abs().max(1.0));
            }
        }
        assert!(matches!(loss_and_grad(&[], &params), Err(Error::Training(_))));
    }

    #[test]
    fn schedule_endpoints() {
        let tc = TrainConfig {
            learning_rate: 3e-3,
            warmup_steps: 10,
            total_steps: 50,
            ..TrainConfig::default()
        };
        assert!(tc.lr_at(0).abs() < 1e-12);
        assert!((tc.lr_at(10) - 3e-3).abs() < 1e-12);
        assert!((tc.lr_at(5) - 1.5e-3).abs() < 1e-12);
        assert!((tc.lr_at(30) - 1.5e-3).abs() < 1e-12);
        assert!(tc.lr_at(50).abs() < 1e-12);
        assert!(tc.lr_at(49) > 0.0);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            warmup_steps: 20,
            total_steps: 10,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"learning_rate": 0.01, "bogus": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
    }

    fn toy(rng: &mut impl Rng, n: usize) -> Vec<TrainingExample> {
        (0..n)
            .map(|i| {
                if i % 2 == 0 {
                    example(rng, Label::Normal, -0.5)
                } else {
                    example(rng, Label::Pathological, 0.5)
                }
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let mut rng = seeded_rng(23);
        let data = toy(&mut rng, 8);
        let tc = TrainConfig {
            total_steps: 12,
            warmup_steps: 3,
            batch_size: 3,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train_on_examples(&data, &tiny_config(), &tc).unwrap();
        let b = train_on_examples(&data, &tiny_config(), &tc).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 12);
        assert_eq!(log_to_csv(&a.log).lines().count(), 13);
        assert_ne!(a.params, ReasoningParams::init(&tiny_config(), 3).unwrap());
    }

    #[test]
    fn single_class_is_rejected() {
        let mut rng = seeded_rng(24);
        let data: Vec<_> = (0..4).map(|_| example(&mut rng, Label::Normal, 0.0)).collect();
        let r = train_on_examples(&data, &tiny_config(), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Training(_))));
    }

    #[test]
    fn separable_toy_is_learned() {
        let mut rng = seeded_rng(25);
        let data = toy(&mut rng, 16);
        let tc = TrainConfig {
            learning_rate: 3e-3,
            total_steps: 150,
            warmup_steps: 15,
            batch_size: 8,
            seed: 0,
            ..TrainConfig::default()
        };
        let model = train_on_examples(&data, &tiny_config(), &tc).unwrap();
        let loss = mean_loss(&data, &model.params).unwrap();
        assert!(loss < 0.1, "final training loss {loss}");
        for ex in &data {
            let r = predict_with_evidence(&ex.features, &ex.evidence_normal, &ex.evidence_pathological, &model.params)
                .unwrap();
            assert!(r.score > 0.0 && r.score < 1.0);
            assert_eq!(r.method, ScreeningMethod::Reasoning);
        }
    }
}
