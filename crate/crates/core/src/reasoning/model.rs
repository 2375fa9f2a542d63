//! Parameters and forward pass of the evidence-aware reasoning head.
//!
//! Each branch (normal, pathological) projects the patch features to
//! `d_model`, adds the fixed positional table and prepends a learnable class
//! token. Every block then lets each patch cross-attend to its own retrieved
//! evidence, followed by self-attention over all tokens and a feed-forward
//! sublayer, all pre-normalized with residual connections. The two final
//! class tokens are concatenated and classified by an MLP into one logit.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureMap;
use crate::util::seeded_rng;

use super::autodiff::{Tape, Var};
use super::evidence::EvidenceSet;
use super::positional::sincos_positional;
use super::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasoningConfig {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub k: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            d_model: 32,
            heads: 4,
            k: 3,
            mlp_hidden: 64,
            seed: 0,
        }
    }
}

impl ReasoningConfig {
    /// `depth = 0` is accepted: the head then sees only the class tokens.
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must be positive and divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::Config(format!(
                "d_model must be divisible by 4 for the positional table, got {}",
                self.d_model
            )));
        }
        if self.k == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("k and mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_hidden(&self) -> usize {
        2 * self.d_model
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Normal,
    Pathological,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Normal, Branch::Pathological];

    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Normal => "normal",
            Branch::Pathological => "pathological",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
    /// Whether decoupled weight decay applies (projection matrices only).
    pub decay: bool,
}

/// Weights of one evidence cross-attention sublayer.
#[derive(Debug, Clone)]
pub struct CrossAttentionWeights<T> {
    pub norm_gain: T,
    pub norm_bias: T,
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
}

/// Weights of one self-attention sublayer and the feed-forward sublayer after it.
#[derive(Debug, Clone)]
pub struct SelfAttentionWeights<T> {
    pub norm_gain: T,
    pub norm_bias: T,
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
    pub ffn_norm_gain: T,
    pub ffn_norm_bias: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
}

/// All learnable tensors of the reasoning head, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningParams {
    config: ReasoningConfig,
    feature_dim: usize,
    tensors: Vec<NamedTensor>,
    index: HashMap<String, usize>,
}

struct Layout {
    entries: Vec<(String, usize, usize, Init)>,
}

#[derive(Clone, Copy)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    Token,
}

impl Layout {
    fn build(config: &ReasoningConfig, feature_dim: usize) -> Self {
        let (dm, ffn) = (config.d_model, config.ffn_hidden());
        let mut entries = Vec::new();
        let mut add = |name: String, r: usize, c: usize, init: Init| entries.push((name, r, c, init));
        for branch in Branch::BOTH {
            let b = branch.prefix();
            add(format!("{b}.input.weight"), feature_dim, dm, Init::Xavier);
            add(format!("{b}.input.bias"), 1, dm, Init::Zeros);
            add(format!("{b}.cls"), 1, dm, Init::Token);
            for l in 0..config.depth {
                let p = format!("{b}.layer{l}");
                add(format!("{p}.cross.norm.gain"), 1, dm, Init::Ones);
                add(format!("{p}.cross.norm.bias"), 1, dm, Init::Zeros);
                add(format!("{p}.cross.query"), dm, dm, Init::Xavier);
                add(format!("{p}.cross.key"), feature_dim, dm, Init::Xavier);
                add(format!("{p}.cross.value"), feature_dim, dm, Init::Xavier);
                add(format!("{p}.cross.output"), dm, dm, Init::Xavier);
                add(format!("{p}.self.norm.gain"), 1, dm, Init::Ones);
                add(format!("{p}.self.norm.bias"), 1, dm, Init::Zeros);
                add(format!("{p}.self.query"), dm, dm, Init::Xavier);
                add(format!("{p}.self.key"), dm, dm, Init::Xavier);
                add(format!("{p}.self.value"), dm, dm, Init::Xavier);
                add(format!("{p}.self.output"), dm, dm, Init::Xavier);
                add(format!("{p}.ffn.norm.gain"), 1, dm, Init::Ones);
                add(format!("{p}.ffn.norm.bias"), 1, dm, Init::Zeros);
                add(format!("{p}.ffn.w1"), dm, ffn, Init::Xavier);
                add(format!("{p}.ffn.b1"), 1, ffn, Init::Zeros);
                add(format!("{p}.ffn.w2"), ffn, dm, Init::Xavier);
                add(format!("{p}.ffn.b2"), 1, dm, Init::Zeros);
            }
        }
        add("head.w1".into(), 2 * dm, config.mlp_hidden, Init::Xavier);
        add("head.b1".into(), 1, config.mlp_hidden, Init::Zeros);
        add("head.w2".into(), config.mlp_hidden, 1, Init::Xavier);
        add("head.b2".into(), 1, 1, Init::Zeros);
        Self { entries }
    }
}

impl ReasoningParams {
    /// Seeded initialization: Xavier-normal projections, unit norm gains,
    /// zero biases and unit-normal class tokens.
    pub fn init(config: &ReasoningConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let mut rng = seeded_rng(config.seed);
        let tensors = Layout::build(config, feature_dim)
            .entries
            .into_iter()
            .map(|(name, rows, cols, init)| {
                let value = match init {
                    Init::Zeros => Matrix::zeros(rows, cols),
                    Init::Ones => Matrix::filled(rows, cols, 1.0),
                    Init::Xavier | Init::Token => {
                        let std = match init {
                            Init::Xavier => (2.0 / (rows + cols) as f64).sqrt(),
                            _ => 1.0,
                        };
                        let dist = Normal::new(0.0, std).expect("positive std");
                        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
                    }
                };
                NamedTensor {
                    decay: matches!(init, Init::Xavier),
                    name,
                    value,
                }
            })
            .collect();
        Ok(Self::from_tensors(config.clone(), feature_dim, tensors))
    }

    fn from_tensors(config: ReasoningConfig, feature_dim: usize, tensors: Vec<NamedTensor>) -> Self {
        let index = tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Self {
            config,
            feature_dim,
            tensors,
            index,
        }
    }

    /// Replaces tensor values by name, checking the layout matches `config`.
    pub fn from_named(
        config: ReasoningConfig,
        feature_dim: usize,
        named: Vec<(String, Matrix)>,
    ) -> Result<Self> {
        let mut params = Self::init(&config, feature_dim)?;
        if named.len() != params.tensors.len() {
            return Err(Error::Input(format!(
                "expected {} parameter tensors, got {}",
                params.tensors.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let slot = params.get_mut(&name).ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
            if (slot.rows, slot.cols) != (value.rows, value.cols) {
                return Err(Error::Input(format!(
                    "parameter {name} has shape {}x{}, expected {}x{}",
                    value.rows, value.cols, slot.rows, slot.cols
                )));
            }
            if !value.all_finite() {
                return Err(Error::Numeric(format!("parameter {name} holds non-finite values")));
            }
            *slot = value;
        }
        Ok(params)
    }

    pub fn config(&self) -> &ReasoningConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.tensors[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.tensors[i].value)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Same layout with every value zeroed (gradient/optimizer state shape).
    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|t| NamedTensor {
                name: t.name.clone(),
                value: Matrix::zeros(t.value.rows, t.value.cols),
                decay: t.decay,
            })
            .collect();
        Self::from_tensors(self.config.clone(), self.feature_dim, tensors)
    }

    fn expect(&self, name: &str) -> &Matrix {
        self.get(name).unwrap_or_else(|| panic!("parameter {name} missing from layout"))
    }

    pub fn cross_weights(&self, branch: Branch, layer: usize) -> CrossAttentionWeights<Matrix> {
        let p = format!("{}.layer{layer}.cross", branch.prefix());
        let g = |s: &str| self.expect(&format!("{p}.{s}")).clone();
        CrossAttentionWeights {
            norm_gain: g("norm.gain"),
            norm_bias: g("norm.bias"),
            query: g("query"),
            key: g("key"),
            value: g("value"),
            output: g("output"),
        }
    }

    pub fn self_weights(&self, branch: Branch, layer: usize) -> SelfAttentionWeights<Matrix> {
        let p = format!("{}.layer{layer}", branch.prefix());
        let g = |s: &str| self.expect(&format!("{p}.{s}")).clone();
        SelfAttentionWeights {
            norm_gain: g("self.norm.gain"),
            norm_bias: g("self.norm.bias"),
            query: g("self.query"),
            key: g("self.key"),
            value: g("self.value"),
            output: g("self.output"),
            ffn_norm_gain: g("ffn.norm.gain"),
            ffn_norm_bias: g("ffn.norm.bias"),
            ffn_w1: g("ffn.w1"),
            ffn_b1: g("ffn.b1"),
            ffn_w2: g("ffn.w2"),
            ffn_b2: g("ffn.b2"),
        }
    }
}

/// Parameters registered as tape leaves, aligned with `ReasoningParams::tensors`.
pub(crate) struct BoundParams<'p> {
    params: &'p ReasoningParams,
    vars: Vec<Var>,
}

impl<'p> BoundParams<'p> {
    pub(crate) fn bind(tape: &mut Tape, params: &'p ReasoningParams) -> Self {
        let vars = params.tensors.iter().map(|t| tape.leaf(t.value.clone())).collect();
        Self { params, vars }
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, name: &str) -> Var {
        self.vars[*self
            .params
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from layout"))]
    }

    fn cross(&self, branch: Branch, layer: usize) -> CrossAttentionWeights<Var> {
        let p = format!("{}.layer{layer}.cross", branch.prefix());
        let v = |s: &str| self.var(&format!("{p}.{s}"));
        CrossAttentionWeights {
            norm_gain: v("norm.gain"),
            norm_bias: v("norm.bias"),
            query: v("query"),
            key: v("key"),
            value: v("value"),
            output: v("output"),
        }
    }

    fn selfw(&self, branch: Branch, layer: usize) -> SelfAttentionWeights<Var> {
        let p = format!("{}.layer{layer}", branch.prefix());
        let v = |s: &str| self.var(&format!("{p}.{s}"));
        SelfAttentionWeights {
            norm_gain: v("self.norm.gain"),
            norm_bias: v("self.norm.bias"),
            query: v("self.query"),
            key: v("self.key"),
            value: v("self.value"),
            output: v("self.output"),
            ffn_norm_gain: v("ffn.norm.gain"),
            ffn_norm_bias: v("ffn.norm.bias"),
            ffn_w1: v("ffn.w1"),
            ffn_b1: v("ffn.b1"),
            ffn_w2: v("ffn.w2"),
            ffn_b2: v("ffn.b2"),
        }
    }
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize, head_dim: usize) -> Vec<Var> {
    (0..heads).map(|h| tape.slice_cols(x, h * head_dim, head_dim)).collect()
}

/// Pre-norm evidence cross-attention: every patch row of `state` attends over
/// its own `k` rows of `evidence`; the projected result is added back.
pub(crate) fn cross_attention_on_tape(
    tape: &mut Tape,
    state: Var,
    evidence: Var,
    k: usize,
    w: &CrossAttentionWeights<Var>,
    heads: usize,
) -> Var {
    let head_dim = tape.value(state).cols / heads;
    let normed = tape.layer_norm(state, w.norm_gain, w.norm_bias);
    let q = tape.matmul(normed, w.query);
    let keys = tape.matmul(evidence, w.key);
    let values = tape.matmul(evidence, w.value);
    let (qs, ks, vs) = (
        split_heads(tape, q, heads, head_dim),
        split_heads(tape, keys, heads, head_dim),
        split_heads(tape, values, heads, head_dim),
    );
    let scale = 1.0 / (head_dim as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| tape.group_attention(qs[h], ks[h], vs[h], k, scale))
        .collect();
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let projected = tape.matmul(merged, w.output);
    tape.add(state, projected)
}

/// Pre-norm multi-head self-attention over all tokens followed by a
/// pre-norm GELU feed-forward, each with a residual connection.
pub(crate) fn self_attention_on_tape(
    tape: &mut Tape,
    tokens: Var,
    w: &SelfAttentionWeights<Var>,
    heads: usize,
) -> Var {
    let head_dim = tape.value(tokens).cols / heads;
    let normed = tape.layer_norm(tokens, w.norm_gain, w.norm_bias);
    let q = tape.matmul(normed, w.query);
    let keys = tape.matmul(normed, w.key);
    let values = tape.matmul(normed, w.value);
    let (qs, ks, vs) = (
        split_heads(tape, q, heads, head_dim),
        split_heads(tape, keys, heads, head_dim),
        split_heads(tape, values, heads, head_dim),
    );
    let scale = 1.0 / (head_dim as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let scores = tape.matmul_t(qs[h], ks[h]);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            tape.matmul(attn, vs[h])
        })
        .collect();
    let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    let projected = tape.matmul(merged, w.output);
    let tokens = tape.add(tokens, projected);

    let normed = tape.layer_norm(tokens, w.ffn_norm_gain, w.ffn_norm_bias);
    let hidden = tape.matmul(normed, w.ffn_w1);
    let hidden = tape.add_row(hidden, w.ffn_b1);
    let hidden = tape.gelu(hidden);
    let out = tape.matmul(hidden, w.ffn_w2);
    let out = tape.add_row(out, w.ffn_b2);
    tape.add(tokens, out)
}

fn bind_cross(tape: &mut Tape, w: &CrossAttentionWeights<Matrix>) -> CrossAttentionWeights<Var> {
    CrossAttentionWeights {
        norm_gain: tape.leaf(w.norm_gain.clone()),
        norm_bias: tape.leaf(w.norm_bias.clone()),
        query: tape.leaf(w.query.clone()),
        key: tape.leaf(w.key.clone()),
        value: tape.leaf(w.value.clone()),
        output: tape.leaf(w.output.clone()),
    }
}

fn check_heads(d_model: usize, heads: usize) -> Result<()> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {d_model}")));
    }
    Ok(())
}

/// Evidence cross-attention on plain matrices.
/// `state` is `P × d_model`, `evidence` is `(P·k) × d`, patch-major.
pub fn cross_attention(
    state: &Matrix,
    evidence: &Matrix,
    k: usize,
    weights: &CrossAttentionWeights<Matrix>,
    heads: usize,
) -> Result<Matrix> {
    check_heads(state.cols, heads)?;
    if k == 0 || evidence.rows != state.rows * k || evidence.cols != weights.key.rows {
        return Err(Error::Input(format!(
            "evidence {}x{} does not match {} patches with k={k} and key rows {}",
            evidence.rows, evidence.cols, state.rows, weights.key.rows
        )));
    }
    let mut tape = Tape::new();
    let s = tape.leaf(state.clone());
    let e = tape.leaf(evidence.clone());
    let w = bind_cross(&mut tape, weights);
    let out = cross_attention_on_tape(&mut tape, s, e, k, &w, heads);
    let out = tape.value(out).clone();
    if let Some(row) = (0..out.rows).find(|&r| out.row(r).iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite cross-attention output at patch {row}")));
    }
    Ok(out)
}

/// Self-attention plus feed-forward sublayer on plain matrices.
pub fn self_attention(tokens: &Matrix, weights: &SelfAttentionWeights<Matrix>, heads: usize) -> Result<Matrix> {
    check_heads(tokens.cols, heads)?;
    let mut tape = Tape::new();
    let t = tape.leaf(tokens.clone());
    let w = SelfAttentionWeights {
        norm_gain: tape.leaf(weights.norm_gain.clone()),
        norm_bias: tape.leaf(weights.norm_bias.clone()),
        query: tape.leaf(weights.query.clone()),
        key: tape.leaf(weights.key.clone()),
        value: tape.leaf(weights.value.clone()),
        output: tape.leaf(weights.output.clone()),
        ffn_norm_gain: tape.leaf(weights.ffn_norm_gain.clone()),
        ffn_norm_bias: tape.leaf(weights.ffn_norm_bias.clone()),
        ffn_w1: tape.leaf(weights.ffn_w1.clone()),
        ffn_b1: tape.leaf(weights.ffn_b1.clone()),
        ffn_w2: tape.leaf(weights.ffn_w2.clone()),
        ffn_b2: tape.leaf(weights.ffn_b2.clone()),
    };
    let out = self_attention_on_tape(&mut tape, t, &w, heads);
    let out = tape.value(out).clone();
    if let Some(row) = (0..out.rows).find(|&r| out.row(r).iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("non-finite self-attention output at token {row}")));
    }
    Ok(out)
}

fn check_inputs(params: &ReasoningParams, fm: &FeatureMap, ev_n: &EvidenceSet, ev_p: &EvidenceSet) -> Result<()> {
    if fm.dim() != params.feature_dim {
        return Err(Error::Input(format!(
            "case {} has d={} but the model expects d={}",
            fm.case_id(),
            fm.dim(),
            params.feature_dim
        )));
    }
    ev_n.check_matches(fm, params.feature_dim)?;
    ev_p.check_matches(fm, params.feature_dim)
}

/// Records the forward pass for one case and returns the `1 × 1` logit.
pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    bound: &BoundParams<'_>,
    fm: &FeatureMap,
    ev_n: &EvidenceSet,
    ev_p: &EvidenceSet,
) -> Result<Var> {
    let params = bound.params;
    check_inputs(params, fm, ev_n, ev_p)?;
    let cfg = &params.config;
    let patches = fm.num_patches();
    let positional = tape.leaf(sincos_positional(fm.height(), fm.width(), cfg.d_model)?);
    let features = tape.leaf(Matrix::from_f32(patches, fm.dim(), fm.data()));
    let mut class_tokens = Vec::with_capacity(2);
    for (branch, ev) in [(Branch::Normal, ev_n), (Branch::Pathological, ev_p)] {
        let b = branch.prefix();
        let evidence = tape.leaf(ev.to_matrix());
        let x = tape.matmul(features, bound.var(&format!("{b}.input.weight")));
        let x = tape.add_row(x, bound.var(&format!("{b}.input.bias")));
        let mut patch_tokens = tape.add(x, positional);
        let mut cls = bound.var(&format!("{b}.cls"));
        for layer in 0..cfg.depth {
            patch_tokens =
                cross_attention_on_tape(tape, patch_tokens, evidence, ev.k, &bound.cross(branch, layer), cfg.heads);
            let out = tape.value(patch_tokens);
            if let Some(row) = (0..out.rows).find(|&r| out.row(r).iter().any(|v| !v.is_finite())) {
                return Err(Error::Numeric(format!(
                    "non-finite cross-attention output for case {} at patch ({}, {}), {b} branch layer {layer}",
                    fm.case_id(),
                    row / fm.width(),
                    row % fm.width()
                )));
            }
            let tokens = tape.concat_rows(&[cls, patch_tokens]);
            let tokens = self_attention_on_tape(tape, tokens, &bound.selfw(branch, layer), cfg.heads);
            cls = tape.slice_rows(tokens, 0, 1);
            patch_tokens = tape.slice_rows(tokens, 1, patches);
        }
        class_tokens.push(cls);
    }
    let joined = tape.concat_cols(&class_tokens);
    let hidden = tape.matmul(joined, bound.var("head.w1"));
    let hidden = tape.add_row(hidden, bound.var("head.b1"));
    let hidden = tape.gelu(hidden);
    let logit = tape.matmul(hidden, bound.var("head.w2"));
    let logit = tape.add_row(logit, bound.var("head.b2"));
    if !tape.value(logit).data[0].is_finite() {
        return Err(Error::Numeric(format!("non-finite logit for case {}", fm.case_id())));
    }
    Ok(logit)
}

/// Screening logit for one case given its evidence from both banks.
pub fn forward(fm: &FeatureMap, ev_n: &EvidenceSet, ev_p: &EvidenceSet, params: &ReasoningParams) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params);
    let logit = forward_on_tape(&mut tape, &bound, fm, ev_n, ev_p)?;
    Ok(tape.value(logit).data[0])
}
