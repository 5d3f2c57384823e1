//! A small constructed decoder-only transformer with residual-stream hooks,
//! and the synthetic multiple-choice task it is evaluated on.
//!
//! Nothing is trained. Layer 0 has one aggregator head that averages the
//! planted coordinates of all earlier tokens into the current position;
//! every other head and MLP is seeded-random and only leaks weakly into the
//! planted coordinates. Label tokens read the class coordinates, and the
//! attractor label (label 0) additionally reads a corruption coordinate that
//! distractor tokens write. Corrupted prompts therefore fail in a way a
//! linear probe on the residual stream can see and a steering vector can
//! undo.
//!
//! Planted layout for `C` labels: coordinates `0..C` carry class evidence,
//! `C` is the corruption coordinate, `C + 1` the hedge coordinate that makes
//! the model emit a filler word before answering.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MeraError, Result};
use crate::steering::{LayerScope, SteeringPolicy, TokenScope};
use crate::trace_store::{PositionStrategy, TraceSet};

const EVIDENCE_STRENGTHS: [f64; 4] = [0.6, 0.8, 1.0, 1.2];
const DISTRACTOR_STRENGTHS: [f64; 3] = [3.0, 3.0, 3.0];
const HEDGE_STRENGTH: f64 = 2.0;
const FILLER_WORD_STRENGTH: f64 = -4.0;
/// Weight of random blocks on planted coordinates.
const PLANTED_LEAK: f64 = 0.002;
/// Smallest winning margin, in evidence-strength units, of a drawn prompt.
const MIN_EVIDENCE_MARGIN: f64 = 1.0;
/// Output scale of the seeded-random attention and MLP blocks.
const RANDOM_BLOCK_SCALE: f64 = 0.3;
const LABEL_GAIN: f64 = 60.0;
const CORRUPTION_GAIN: f64 = 1.0;
const HEDGE_GAIN: f64 = 120.0;
const RMS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLMConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Label words; label 0 is the attractor.
    pub labels: Vec<String>,
    pub planted_dims: usize,
}

impl Default for ToyLMConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            model_dim: 32,
            n_heads: 4,
            vocab_size: 64,
            max_seq_len: 32,
            seed: 0,
            labels: vec!["yes".into(), "no".into()],
            planted_dims: 4,
        }
    }
}

/// Token string table and the id ranges of each token role.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
    pub query: u32,
    pub filler: u32,
    pub hedge: u32,
    pub filler_word: u32,
    /// `evidence[c][s]`: evidence for class `c` at strength level `s`.
    pub evidence: Vec<Vec<u32>>,
    pub distractors: Vec<u32>,
    /// All surface variants of each label, canonical form first.
    pub label_variants: Vec<Vec<u32>>,
    pub noise: Vec<u32>,
}

fn capitalized(word: &str) -> String {
    let mut chars = word.chars();
    chars.next().map(|c| c.to_uppercase().chain(chars).collect()).unwrap_or_default()
}

/// Surface forms of a label: lower, upper and capitalized, each bare or
/// behind a space or newline.
pub fn surface_forms(label: &str) -> Vec<String> {
    let mut forms = Vec::new();
    for case in [label.to_lowercase(), label.to_uppercase(), capitalized(&label.to_lowercase())] {
        for prefix in ["", " ", "\n"] {
            let form = format!("{prefix}{case}");
            if !forms.contains(&form) {
                forms.push(form);
            }
        }
    }
    forms
}

impl Vocabulary {
    pub fn new(labels: &[String], vocab_size: usize) -> Result<Self> {
        let mut tokens: Vec<String> = vec!["Answer:".into(), " the".into(), " um".into(), " Well".into()];
        let next = |tokens: &Vec<String>| tokens.len() as u32;
        let mut evidence = Vec::new();
        for label in labels {
            let mut ids = Vec::new();
            for level in 1..=EVIDENCE_STRENGTHS.len() {
                ids.push(next(&tokens));
                tokens.push(format!("<ev:{label}:{level}>"));
            }
            evidence.push(ids);
        }
        let mut distractors = Vec::new();
        for level in 1..=DISTRACTOR_STRENGTHS.len() {
            distractors.push(next(&tokens));
            tokens.push(format!("<distract:{level}>"));
        }
        let mut label_variants = Vec::new();
        for label in labels {
            let mut ids = Vec::new();
            for form in surface_forms(label) {
                if tokens.contains(&form) {
                    return Err(MeraError::validation(format!("label surface form {form:?} collides with another token")));
                }
                ids.push(next(&tokens));
                tokens.push(form);
            }
            label_variants.push(ids);
        }
        if tokens.len() > vocab_size {
            return Err(MeraError::validation(format!(
                "vocabulary needs at least {} tokens, vocab_size is {vocab_size}",
                tokens.len()
            )));
        }
        let mut noise = Vec::new();
        while tokens.len() < vocab_size {
            noise.push(next(&tokens));
            tokens.push(format!("<tok{}>", tokens.len()));
        }
        Ok(Self {
            tokens,
            query: 0,
            filler: 1,
            hedge: 2,
            filler_word: 3,
            evidence,
            distractors,
            label_variants,
            noise,
        })
    }

    pub fn id_of(&self, text: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == text).map(|i| i as u32)
    }

    pub fn label_tokens(&self) -> Vec<u32> {
        self.label_variants.iter().map(|v| v[0]).collect()
    }

    /// Variant sets rebuilt by looking every surface form up in the string
    /// table, the way an external tokenizer would be searched.
    pub fn match_label_variants(&self, labels: &[String]) -> Result<Vec<Vec<u32>>> {
        if labels.is_empty() {
            return Err(MeraError::validation("empty label set"));
        }
        labels
            .iter()
            .map(|label| {
                let ids: Vec<u32> = surface_forms(label).iter().filter_map(|f| self.id_of(f)).collect();
                if ids.is_empty() {
                    Err(MeraError::validation(format!("label {label:?} has no token in the vocabulary")))
                } else {
                    Ok(ids)
                }
            })
            .collect()
    }
}

struct Head {
    wq: DMatrix<f64>,
    wk: DMatrix<f64>,
    wv: DMatrix<f64>,
}

struct Block {
    heads: Vec<Head>,
    wo: DMatrix<f64>,
    w1: DMatrix<f64>,
    w2: DMatrix<f64>,
}

pub struct ToyLM {
    pub config: ToyLMConfig,
    pub vocab: Vocabulary,
    embed: Vec<DVector<f64>>,
    blocks: Vec<Block>,
    unembed: DMatrix<f64>,
    unembed_bias: DVector<f64>,
}

impl ToyLMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(MeraError::validation(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.labels.len() < 2 {
            return Err(MeraError::validation("need at least two labels"));
        }
        if self.labels.iter().any(|l| l.is_empty() || l.chars().any(char::is_whitespace)) {
            return Err(MeraError::validation("labels must be nonempty single words"));
        }
        let mut distinct = self.labels.iter().map(|l| l.to_lowercase()).collect::<Vec<_>>();
        distinct.sort();
        distinct.dedup();
        if distinct.len() != self.labels.len() {
            return Err(MeraError::validation("labels must be distinct ignoring case"));
        }
        let needed = self.labels.len() + 2;
        if self.planted_dims != needed {
            return Err(MeraError::validation(format!("planted_dims must be {needed} for {} labels", self.labels.len())));
        }
        if self.planted_dims > self.model_dim / self.n_heads {
            return Err(MeraError::validation("planted coordinates must fit in one attention head"));
        }
        if self.max_seq_len == 0 {
            return Err(MeraError::validation("max_seq_len must be positive"));
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn rms_norm(x: &DVector<f64>) -> DVector<f64> {
    let rms = (x.norm_squared() / x.len() as f64 + RMS_EPS).sqrt();
    x / rms
}

/// Embedding with a fixed planted part and a random remainder scaled so the
/// whole vector has unit RMS.
fn embedding(rng: &mut ChaCha8Rng, d: usize, planted: &[f64]) -> DVector<f64> {
    let p = planted.len();
    let planted_sq: f64 = planted.iter().map(|x| x * x).sum();
    let rest = gaussian_matrix(rng, d - p, 1, 1.0);
    let scale = ((d as f64 - planted_sq).max(0.0)).sqrt() / rest.norm().max(1e-12);
    DVector::from_fn(d, |i, _| if i < p { planted[i] } else { rest[(i - p, 0)] * scale })
}

pub fn build_model(config: &ToyLMConfig) -> Result<ToyLM> {
    config.validate()?;
    let vocab = Vocabulary::new(&config.labels, config.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.model_dim;
    let n_labels = config.labels.len();
    let p = config.planted_dims;
    let (corrupt, hedge) = (n_labels, n_labels + 1);
    let head_dim = d / config.n_heads;
    let ff = 2 * d;

    let mut planted_of = vec![vec![0.0; p]; config.vocab_size];
    for (c, ids) in vocab.evidence.iter().enumerate() {
        for (&id, s) in ids.iter().zip(EVIDENCE_STRENGTHS) {
            planted_of[id as usize][c] = s;
        }
    }
    for (&id, s) in vocab.distractors.iter().zip(DISTRACTOR_STRENGTHS) {
        planted_of[id as usize][corrupt] = s;
    }
    planted_of[vocab.hedge as usize][hedge] = HEDGE_STRENGTH;
    planted_of[vocab.filler_word as usize][hedge] = FILLER_WORD_STRENGTH;
    if planted_of.iter().any(|v| v.iter().map(|x| x * x).sum::<f64>() > d as f64) {
        return Err(MeraError::validation("model_dim too small for the planted embedding strengths"));
    }
    let embed: Vec<DVector<f64>> = planted_of.iter().map(|planted| embedding(&mut rng, d, planted)).collect();

    let mut blocks = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let mut heads: Vec<Head> = (0..config.n_heads)
            .map(|_| Head {
                wq: gaussian_matrix(&mut rng, head_dim, d, 1.0 / (d as f64).sqrt()),
                wk: gaussian_matrix(&mut rng, head_dim, d, 1.0 / (d as f64).sqrt()),
                wv: gaussian_matrix(&mut rng, head_dim, d, 1.0 / (d as f64).sqrt()),
            })
            .collect();
        let mut wo = gaussian_matrix(&mut rng, d, d, RANDOM_BLOCK_SCALE / (d as f64).sqrt());
        let w1 = gaussian_matrix(&mut rng, ff, d, 1.0 / (d as f64).sqrt());
        let mut w2 = gaussian_matrix(&mut rng, d, ff, RANDOM_BLOCK_SCALE / (ff as f64).sqrt());
        for row in 0..p {
            wo.row_mut(row).scale_mut(PLANTED_LEAK);
            w2.row_mut(row).scale_mut(PLANTED_LEAK);
        }
        if layer == 0 {
            // aggregator: uniform causal attention copying planted coordinates
            heads[0].wq.fill(0.0);
            heads[0].wk.fill(0.0);
            heads[0].wv.fill(0.0);
            for i in 0..p {
                heads[0].wv[(i, i)] = 1.0;
            }
            wo.columns_mut(0, head_dim).fill(0.0);
            for i in 0..p {
                wo[(i, i)] = 1.0;
            }
        }
        blocks.push(Block { heads, wo, w1, w2 });
    }

    let mut unembed = gaussian_matrix(&mut rng, config.vocab_size, d, 0.3 / (d as f64).sqrt());
    unembed.columns_mut(0, p).fill(0.0);
    let mut unembed_bias = DVector::zeros(config.vocab_size);
    for (c, ids) in vocab.label_variants.iter().enumerate() {
        for (rank, &id) in ids.iter().enumerate() {
            let mut row = unembed.row_mut(id as usize);
            row.fill(0.0);
            row[c] = LABEL_GAIN;
            if c == 0 {
                row[corrupt] = LABEL_GAIN * CORRUPTION_GAIN;
            }
            // the canonical form is preferred, the others trail by a seeded margin
            unembed_bias[id as usize] = if rank == 0 { 0.0 } else { -rng.random_range(0.5..3.0) };
        }
    }
    unembed[(vocab.filler_word as usize, hedge)] = HEDGE_GAIN;

    Ok(ToyLM {
        config: config.clone(),
        vocab,
        embed,
        blocks,
        unembed,
        unembed_bias,
    })
}

/// A steering policy applied during a forward pass, with the scope it is
/// applied under.
#[derive(Debug, Clone, PartialEq)]
pub struct HookSpec {
    pub policy: SteeringPolicy,
    pub token_scope: TokenScope,
    pub layer_scope: LayerScope,
}

impl HookSpec {
    pub fn new(policy: SteeringPolicy) -> Self {
        Self {
            token_scope: policy.scope.token_scope,
            layer_scope: policy.scope.layer_scope,
            policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[seq_len][vocab]`.
    pub logits: Vec<Vec<f64>>,
    /// Residual after each block (after steering), row-major `[seq, L, d]`.
    pub trace: Vec<f64>,
    pub n_triggered: usize,
}

impl ForwardOutput {
    pub fn residual(&self, position: usize, layer: usize, n_layers: usize, d: usize) -> &[f64] {
        let start = (position * n_layers + layer) * d;
        &self.trace[start..start + d]
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl ToyLM {
    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn dim(&self) -> usize {
        self.config.model_dim
    }

    pub fn forward(&self, tokens: &[u32], hook: Option<&HookSpec>) -> Result<ForwardOutput> {
        self.forward_from(tokens, hook, tokens.len().saturating_sub(1))
    }

    /// Forward pass in which positions `>= generation_start` count as
    /// generation positions for token scoping.
    pub fn forward_from(&self, tokens: &[u32], hook: Option<&HookSpec>, generation_start: usize) -> Result<ForwardOutput> {
        if tokens.len() > self.config.max_seq_len {
            return Err(MeraError::validation(format!(
                "{} tokens exceed max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(MeraError::validation(format!("token id {bad} >= vocab_size {}", self.config.vocab_size)));
        }
        if let Some(h) = hook {
            h.policy.validate_for_model(self.n_layers(), self.dim())?;
        }
        let (n, d, n_layers) = (tokens.len(), self.dim(), self.n_layers());
        let head_dim = d / self.config.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut x: Vec<DVector<f64>> = tokens.iter().map(|&t| self.embed[t as usize].clone()).collect();
        let mut trace = vec![0.0; n * n_layers * d];
        let mut n_triggered = 0;

        for (layer, block) in self.blocks.iter().enumerate() {
            let normed: Vec<DVector<f64>> = x.iter().map(rms_norm).collect();
            let mut attn_out: Vec<DVector<f64>> = vec![DVector::zeros(d); n];
            for (h, head) in block.heads.iter().enumerate() {
                let q: Vec<DVector<f64>> = normed.iter().map(|v| &head.wq * v).collect();
                let k: Vec<DVector<f64>> = normed.iter().map(|v| &head.wk * v).collect();
                let v: Vec<DVector<f64>> = normed.iter().map(|v| &head.wv * v).collect();
                for t in 0..n {
                    let scores: Vec<f64> = (0..=t).map(|s| q[t].dot(&k[s]) * scale).collect();
                    let weights = softmax(&scores);
                    let mut mixed = DVector::zeros(head_dim);
                    for (s, w) in weights.iter().enumerate() {
                        mixed.axpy(*w, &v[s], 1.0);
                    }
                    attn_out[t].rows_mut(h * head_dim, head_dim).copy_from(&mixed);
                }
            }
            for t in 0..n {
                x[t] += &block.wo * &attn_out[t];
            }
            for xt in x.iter_mut() {
                let hidden = (&block.w1 * rms_norm(xt)).map(|z| z.max(0.0));
                *xt += &block.w2 * hidden;
            }
            if let Some(hook) = hook {
                if hook.layer_scope.includes(layer) {
                    for (t, xt) in x.iter_mut().enumerate() {
                        if hook.token_scope == TokenScope::GenerationOnly && t < generation_start {
                            continue;
                        }
                        if let Some(decision) = hook.policy.steer_at(layer, xt.as_slice())? {
                            if decision.triggered {
                                n_triggered += 1;
                                *xt += DVector::from_vec(decision.v);
                            }
                        }
                    }
                }
            }
            for (t, xt) in x.iter().enumerate() {
                let start = (t * n_layers + layer) * d;
                trace[start..start + d].copy_from_slice(xt.as_slice());
            }
        }

        let logits = x
            .iter()
            .map(|xt| {
                let out = &self.unembed * rms_norm(xt) + &self.unembed_bias;
                out.iter().copied().collect()
            })
            .collect();
        Ok(ForwardOutput { logits, trace, n_triggered })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Logits that produced each generated token.
    pub step_logits: Vec<Vec<f64>>,
    /// Forward pass over prompt plus all but the last generated token; it
    /// covers every position that emitted a token.
    pub last_pass: Option<ForwardOutput>,
}

/// Greedy decoding of `m` tokens. Positions from the last prompt token on
/// count as generation positions.
pub fn generate(model: &ToyLM, prompt: &[u32], m: usize, hook: Option<&HookSpec>) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(MeraError::validation("empty prompt"));
    }
    let mut seq = prompt.to_vec();
    let mut tokens = Vec::with_capacity(m);
    let mut step_logits = Vec::with_capacity(m);
    let mut last_pass = None;
    for _ in 0..m {
        let out = model.forward_from(&seq, hook, prompt.len() - 1)?;
        let row = out.logits.last().expect("nonempty sequence").clone();
        let next = argmax(&row) as u32;
        tokens.push(next);
        step_logits.push(row);
        seq.push(next);
        last_pass = Some(out);
    }
    Ok(Generation {
        tokens,
        step_logits,
        last_pass,
    })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n_instances: usize,
    /// Probability that a non-attractor instance gets distractor slots.
    pub corruption_rate: f64,
    pub attractor_prior: f64,
    pub n_evidence: usize,
    pub n_slots: usize,
    pub hedge_rate: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_instances: 500,
            corruption_rate: 0.8,
            attractor_prior: 0.5,
            n_evidence: 4,
            n_slots: 3,
            hedge_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt_tokens: Vec<u32>,
    pub true_label: usize,
    pub corrupted: bool,
    #[serde(default)]
    pub generated_tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub instances: Vec<TaskInstance>,
    pub labels: Vec<String>,
    pub label_variants: Vec<Vec<u32>>,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("corruption_rate", self.corruption_rate),
            ("attractor_prior", self.attractor_prior),
            ("hedge_rate", self.hedge_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(MeraError::validation(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.n_evidence == 0 {
            return Err(MeraError::validation("n_evidence must be positive"));
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.n_evidence + self.n_slots + 1
    }
}

/// Draws evidence tokens whose summed strength has a clear argmax equal to
/// `target`.
fn draw_evidence(rng: &mut ChaCha8Rng, vocab: &Vocabulary, n_evidence: usize, target: usize) -> Vec<u32> {
    let n_labels = vocab.evidence.len();
    loop {
        let mut totals = vec![0.0; n_labels];
        let mut tokens = Vec::with_capacity(n_evidence);
        for _ in 0..n_evidence {
            let class = rng.random_range(0..n_labels);
            let level = rng.random_range(0..EVIDENCE_STRENGTHS.len());
            totals[class] += EVIDENCE_STRENGTHS[level];
            tokens.push(vocab.evidence[class][level]);
        }
        let best = argmax(&totals);
        let clear = totals
            .iter()
            .enumerate()
            .all(|(c, t)| c == best || *t <= totals[best] - MIN_EVIDENCE_MARGIN + 1e-9);
        if best == target && clear {
            return tokens;
        }
    }
}

pub fn synth_task(model: &ToyLM, task: &TaskConfig, seed: u64) -> Result<TaskData> {
    task.validate()?;
    if task.prompt_len() + 1 > model.config.max_seq_len {
        return Err(MeraError::validation("prompt does not fit the model's max_seq_len"));
    }
    let vocab = &model.vocab;
    let n_labels = vocab.evidence.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..task.n_instances)
        .map(|_| {
            let true_label = if rng.random_bool(task.attractor_prior) {
                0
            } else {
                rng.random_range(1..n_labels)
            };
            let mut prompt = draw_evidence(&mut rng, vocab, task.n_evidence, true_label);
            let corrupted = true_label != 0 && rng.random_bool(task.corruption_rate);
            for _ in 0..task.n_slots {
                let slot = if corrupted {
                    vocab.distractors[rng.random_range(0..vocab.distractors.len())]
                } else if rng.random_bool(task.hedge_rate) {
                    vocab.hedge
                } else {
                    vocab.filler
                };
                prompt.push(slot);
            }
            prompt.push(vocab.query);
            TaskInstance {
                prompt_tokens: prompt,
                true_label,
                corrupted,
                generated_tokens: Vec::new(),
            }
        })
        .collect();
    Ok(TaskData {
        instances,
        labels: model.config.labels.clone(),
        label_variants: vocab.label_variants.clone(),
    })
}

/// Permutes true labels across instances; the control for probes and
/// calibration.
pub fn shuffle_labels(instances: &mut [TaskInstance], seed: u64) {
    let mut labels: Vec<usize> = instances.iter().map(|i| i.true_label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (inst, label) in instances.iter_mut().zip(labels) {
        inst.true_label = label;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelParse {
    /// Label index, or -1 when nothing parsed.
    pub predicted: i32,
    /// Completion index of the match in exact mode, 0 in last mode, -1 when
    /// nothing parsed.
    pub position: i32,
    /// Renormalized probability of the predicted label.
    pub prob: f64,
    /// Renormalized probability of every label at the parse position.
    pub label_probs: Vec<f64>,
}

impl LabelParse {
    fn no_parse(n_labels: usize) -> Self {
        Self {
            predicted: -1,
            position: -1,
            prob: 0.0,
            label_probs: vec![0.0; n_labels],
        }
    }
}

/// Label probabilities at one position: each label's softmax mass summed
/// over its variants, renormalized across labels.
pub fn label_probabilities(logits: &[f64], label_variants: &[Vec<u32>]) -> Result<Vec<f64>> {
    if label_variants.is_empty() || label_variants.iter().any(Vec::is_empty) {
        return Err(MeraError::validation("empty label set"));
    }
    let probs = softmax(logits);
    let mass: Vec<f64> = label_variants
        .iter()
        .map(|ids| ids.iter().map(|&id| probs.get(id as usize).copied().unwrap_or(0.0)).sum())
        .collect();
    let total: f64 = mass.iter().sum();
    if total == 0.0 {
        return Ok(vec![0.0; mass.len()]);
    }
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// Last mode: the label owning the highest-logit variant token at the final
/// prompt position.
pub fn parse_last(logits: &[f64], label_variants: &[Vec<u32>]) -> Result<LabelParse> {
    let label_probs = label_probabilities(logits, label_variants)?;
    let mut best: Option<(usize, f64)> = None;
    for (label, ids) in label_variants.iter().enumerate() {
        for &id in ids {
            let Some(&l) = logits.get(id as usize) else { continue };
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((label, l));
            }
        }
    }
    let Some((label, _)) = best else {
        return Ok(LabelParse::no_parse(label_variants.len()));
    };
    Ok(LabelParse {
        predicted: label as i32,
        position: 0,
        prob: label_probs[label],
        label_probs,
    })
}

/// Exact mode: the first completion token that is a variant of any label.
/// `step_logits[j]` are the logits that produced `completion[j]`.
pub fn parse_exact(completion: &[u32], step_logits: &[Vec<f64>], label_variants: &[Vec<u32>]) -> Result<LabelParse> {
    if label_variants.is_empty() || label_variants.iter().any(Vec::is_empty) {
        return Err(MeraError::validation("empty label set"));
    }
    for (j, token) in completion.iter().enumerate() {
        if let Some(label) = label_variants.iter().position(|ids| ids.contains(token)) {
            let label_probs = match step_logits.get(j) {
                Some(row) => label_probabilities(row, label_variants)?,
                None => return Err(MeraError::Shape(format!("no logits for completion position {j}"))),
            };
            return Ok(LabelParse {
                predicted: label as i32,
                position: j as i32,
                prob: label_probs[label],
                label_probs,
            });
        }
    }
    Ok(LabelParse::no_parse(label_variants.len()))
}

pub fn compute_error(prob_true: f64) -> f64 {
    1.0 - prob_true
}

pub fn compute_accuracy(predicted: i32, true_label: usize) -> u8 {
    u8::from(predicted >= 0 && predicted as usize == true_label)
}

/// Outcome of running one instance under one position strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutcome {
    pub parse: LabelParse,
    pub error: f64,
    pub correct: bool,
    /// Sequence position whose residual represents the instance.
    pub site: usize,
    /// Residuals `[L, d]` at `site`.
    pub activations: Vec<f64>,
    pub generated: Vec<u32>,
    pub n_triggered: usize,
}

pub fn run_instance(model: &ToyLM, instance: &TaskInstance, mode: PositionStrategy, m: usize, hook: Option<&HookSpec>) -> Result<InstanceOutcome> {
    let prompt = &instance.prompt_tokens;
    let (l, d) = (model.n_layers(), model.dim());
    let variants = &model.vocab.label_variants;
    let last = prompt.len() - 1;
    let (parse, pass, generated, site) = match mode {
        PositionStrategy::Last => {
            let out = model.forward(prompt, hook)?;
            let parse = parse_last(&out.logits[last], variants)?;
            (parse, out, Vec::new(), last)
        }
        PositionStrategy::Exact => {
            if m == 0 {
                return Err(MeraError::validation("exact mode needs a generation length of at least 1"));
            }
            let generation = generate(model, prompt, m, hook)?;
            let parse = parse_exact(&generation.tokens, &generation.step_logits, variants)?;
            let site = if parse.position >= 0 { last + parse.position as usize } else { last };
            let pass = generation.last_pass.expect("m >= 1");
            (parse, pass, generation.tokens, site)
        }
    };
    let prob_true = if parse.predicted >= 0 { parse.label_probs[instance.true_label] } else { 0.0 };
    let activations = (0..l).flat_map(|layer| pass.residual(site, layer, l, d).to_vec()).collect();
    Ok(InstanceOutcome {
        error: if parse.predicted >= 0 { compute_error(prob_true) } else { 1.0 },
        correct: compute_accuracy(parse.predicted, instance.true_label) == 1,
        parse,
        site,
        activations,
        generated,
        n_triggered: pass.n_triggered,
    })
}

pub fn run_instances(model: &ToyLM, instances: &[TaskInstance], mode: PositionStrategy, m: usize, hook: Option<&HookSpec>) -> Result<Vec<InstanceOutcome>> {
    instances.par_iter().map(|inst| run_instance(model, inst, mode, m, hook)).collect()
}

/// Unsteered traces for `instances`, one bundle-ready set per mode.
pub fn cache_traces(model: &ToyLM, instances: &[TaskInstance], mode: PositionStrategy, m: usize) -> Result<TraceSet> {
    let outcomes = run_instances(model, instances, mode, m, None)?;
    let mut traces = TraceSet::empty(model.n_layers(), model.dim(), mode, model.config.labels.clone());
    for (inst, out) in instances.iter().zip(&outcomes) {
        traces.activations.extend(out.activations.iter().map(|&x| x as f32));
        traces.errors.push(out.error as f32);
        traces.true_labels.push(inst.true_label as i32);
        traces.predicted_labels.push(out.parse.predicted);
        traces.label_probs.push(out.parse.prob as f32);
    }
    traces.validate()?;
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::ProbeKind;
    use crate::steering::{LayerEntry, Scope, Variant, POLICY_VERSION};

    fn model() -> ToyLM {
        build_model(&ToyLMConfig::default()).unwrap()
    }

    fn policy(alpha: f64, weights: impl Fn(usize) -> Vec<f64>, layers: usize) -> SteeringPolicy {
        SteeringPolicy {
            version: POLICY_VERSION,
            alpha: Some(alpha),
            variant: Variant::MeraRegression,
            scope: Scope::default(),
            layers: (0..layers)
                .map(|layer| LayerEntry {
                    layer,
                    kind: ProbeKind::Regression,
                    weights: weights(layer),
                })
                .collect(),
            abstained: false,
        }
    }

    #[test]
    fn vocabulary_layout() {
        let m = model();
        let v = &m.vocab;
        assert_eq!(v.tokens.len(), 64);
        assert_eq!(v.label_variants[0].len(), 9);
        assert_eq!(v.tokens[v.label_variants[1][0] as usize], "no");
        assert_eq!(v.match_label_variants(&m.config.labels).unwrap(), v.label_variants);
        assert!(v.id_of(" Yes").is_some() && v.id_of("\nNO").is_some());
        assert!(Vocabulary::new(&["yes".into(), "no".into()], 20).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = ToyLMConfig {
            n_heads: 5,
            ..ToyLMConfig::default()
        };
        assert_eq!(build_model(&bad).err().unwrap().code(), "validation");
        let bad = ToyLMConfig {
            planted_dims: 3,
            ..ToyLMConfig::default()
        };
        assert!(build_model(&bad).is_err());
    }

    #[test]
    fn deterministic_weights() {
        let prompt = [4, 9, 1, 1, 0];
        let a = model().forward(&prompt, None).unwrap();
        let b = model().forward(&prompt, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_layer_model_is_embed_unembed() {
        let m = build_model(&ToyLMConfig {
            n_layers: 0,
            ..ToyLMConfig::default()
        })
        .unwrap();
        let out = m.forward(&[5, 0], None).unwrap();
        assert!(out.trace.is_empty());
        let expected = &m.unembed * rms_norm(&m.embed[0]) + &m.unembed_bias;
        assert_eq!(out.logits[1], expected.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn forward_rejects_bad_tokens() {
        let m = model();
        assert_eq!(m.forward(&[64], None).unwrap_err().code(), "validation");
        assert!(m.forward(&[1; 33], None).is_err());
    }

    #[test]
    fn zero_weight_hook_is_neutral() {
        let m = model();
        let prompt = [4, 9, 5, 1, 2, 0];
        let plain = m.forward(&prompt, None).unwrap();
        let hook = HookSpec::new(policy(0.3, |_| vec![0.0; 32], 4));
        let hooked = m.forward(&prompt, Some(&hook)).unwrap();
        assert_eq!(plain, hooked);
        assert_eq!(hooked.n_triggered, 0);
    }

    #[test]
    fn high_alpha_hook_is_neutral() {
        let m = model();
        let task = synth_task(&m, &TaskConfig::default(), 1).unwrap();
        // |w·h| stays far below 1 with these small weights
        let hook = HookSpec::new(policy(1.0, |_| vec![0.001; 32], 4));
        for inst in task.instances.iter().take(20) {
            let plain = m.forward(&inst.prompt_tokens, None).unwrap();
            let hooked = m.forward(&inst.prompt_tokens, Some(&hook)).unwrap();
            assert_eq!(plain.logits, hooked.logits);
        }
    }

    #[test]
    fn single_layer_hook_hits_threshold_and_changes_downstream() {
        let m = model();
        let prompt = [4, 9, 5, 1, 2, 0];
        let plain = m.forward(&prompt, None).unwrap();
        let layer = 1;
        let last = prompt.len() - 1;
        let h = plain.residual(last, layer, 4, 32).to_vec();
        let mut p = policy(0.0, |_| h.clone(), 4);
        p.layers.retain(|e| e.layer == layer);
        p.scope.layer_scope = LayerScope::Single(layer);
        let hook = HookSpec::new(p);
        let out = m.forward(&prompt, Some(&hook)).unwrap();
        let steered = out.residual(last, layer, 4, 32);
        let dot: f64 = h.iter().zip(steered).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-6);
        assert_ne!(out.logits[last], plain.logits[last]);
        // earlier layers untouched
        assert_eq!(out.residual(last, 0, 4, 32), plain.residual(last, 0, 4, 32));
    }

    #[test]
    fn generation_only_scope_skips_prompt() {
        let m = model();
        let prompt = [4, 9, 5, 1, 2, 0];
        let plain = m.forward(&prompt, None).unwrap();
        let mut p = policy(-5.0, |_| vec![0.1; 32], 4);
        p.variant = Variant::MeraContrastive;
        p.scope.token_scope = TokenScope::GenerationOnly;
        let out = m.forward(&prompt, Some(&HookSpec::new(p))).unwrap();
        for t in 0..prompt.len() - 1 {
            assert_eq!(out.logits[t], plain.logits[t]);
        }
        assert_ne!(out.logits[prompt.len() - 1], plain.logits[prompt.len() - 1]);
    }

    #[test]
    fn generate_basics() {
        let m = model();
        let prompt = [4, 5, 1, 1, 1, 0];
        assert!(generate(&m, &prompt, 0, None).unwrap().tokens.is_empty());
        let a = generate(&m, &prompt, 6, None).unwrap();
        assert_eq!(a, generate(&m, &prompt, 6, None).unwrap());
        assert_eq!(a.tokens.len(), 6);
        // the last pass reproduces every step's logits
        let pass = a.last_pass.as_ref().unwrap();
        for (j, row) in a.step_logits.iter().enumerate() {
            assert_eq!(&pass.logits[prompt.len() - 1 + j], row);
        }
    }

    #[test]
    fn parse_examples() {
        let m = model();
        let variants = &m.vocab.label_variants;
        let yes = m.vocab.id_of("Yes").unwrap();
        let noise = m.vocab.noise[0];
        let rows = vec![vec![0.0; 64]; 3];
        let p = parse_exact(&[noise, yes, noise], &rows, variants).unwrap();
        assert_eq!((p.predicted, p.position), (0, 1));
        let p = parse_exact(&[noise, noise], &rows, variants).unwrap();
        assert_eq!((p.predicted, p.position, p.prob), (-1, -1, 0.0));
        assert!(parse_exact(&[yes], &rows, &[]).is_err());
    }

    #[test]
    fn last_mode_renormalizes() {
        // probabilities yes 0.2, no 0.6, rest 0.2 over two other tokens
        let variants = vec![vec![0], vec![1]];
        let logits: Vec<f64> = [0.2f64, 0.6, 0.1, 0.1].iter().map(|p| p.ln()).collect();
        let p = parse_last(&logits, &variants).unwrap();
        assert_eq!(p.predicted, 1);
        assert!((p.label_probs[0] - 0.25).abs() < 1e-12);
        assert!((compute_error(p.label_probs[0]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn error_and_accuracy_conventions() {
        assert_eq!(compute_error(1.0), 0.0);
        assert_eq!(compute_accuracy(-1, 0), 0);
        assert_eq!(compute_accuracy(1, 1), 1);
        assert_eq!(compute_accuracy(0, 1), 0);
    }

    fn accuracy(m: &ToyLM, task: &TaskConfig, seed: u64) -> f64 {
        let data = synth_task(m, task, seed).unwrap();
        let out = run_instances(m, &data.instances, PositionStrategy::Last, 0, None).unwrap();
        out.iter().filter(|o| o.correct).count() as f64 / out.len() as f64
    }

    #[test]
    fn corruption_controls_accuracy() {
        let m = model();
        let clean = accuracy(
            &m,
            &TaskConfig {
                corruption_rate: 0.0,
                ..TaskConfig::default()
            },
            5,
        );
        let broken = accuracy(
            &m,
            &TaskConfig {
                corruption_rate: 1.0,
                ..TaskConfig::default()
            },
            5,
        );
        assert!(clean >= 0.95, "clean accuracy {clean}");
        assert!(broken <= 0.5, "corrupted accuracy {broken}");
    }

    #[test]
    fn task_seeds_differ_but_match_statistics() {
        let m = model();
        let cfg = TaskConfig::default();
        let a = synth_task(&m, &cfg, 1).unwrap();
        let b = synth_task(&m, &cfg, 2).unwrap();
        assert_eq!(a, synth_task(&m, &cfg, 1).unwrap());
        let same = a.instances.iter().zip(&b.instances).filter(|(x, y)| x.prompt_tokens == y.prompt_tokens).count();
        assert!(same < 25);
        let frac = |d: &TaskData| d.instances.iter().filter(|i| i.true_label == 0).count() as f64 / 500.0;
        assert!((frac(&a) - frac(&b)).abs() < 0.1);
    }

    #[test]
    fn cached_traces_match_forward() {
        let m = model();
        let data = synth_task(
            &m,
            &TaskConfig {
                n_instances: 30,
                ..TaskConfig::default()
            },
            3,
        )
        .unwrap();
        let traces = cache_traces(&m, &data.instances, PositionStrategy::Last, 0).unwrap();
        assert_eq!(traces.n_examples(), 30);
        let inst = &data.instances[7];
        let out = m.forward(&inst.prompt_tokens, None).unwrap();
        let last = inst.prompt_tokens.len() - 1;
        for layer in 0..4 {
            let expected: Vec<f32> = out.residual(last, layer, 4, 32).iter().map(|&x| x as f32).collect();
            assert_eq!(traces.activation(7, layer), expected.as_slice());
        }
        let empty = cache_traces(&m, &[], PositionStrategy::Exact, 8).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn exact_mode_sites_follow_parse_positions() {
        let m = model();
        let data = synth_task(
            &m,
            &TaskConfig {
                n_instances: 100,
                ..TaskConfig::default()
            },
            4,
        )
        .unwrap();
        let mut shifted = 0;
        for inst in &data.instances {
            let out = run_instance(&m, inst, PositionStrategy::Exact, 8, None).unwrap();
            let gen = generate(&m, &inst.prompt_tokens, 8, None).unwrap();
            let parse = parse_exact(&gen.tokens, &gen.step_logits, &m.vocab.label_variants).unwrap();
            assert_eq!(out.parse, parse);
            let last = inst.prompt_tokens.len() - 1;
            if parse.position >= 0 {
                assert_eq!(out.site, last + parse.position as usize);
                shifted += usize::from(parse.position > 0);
            }
        }
        assert!(shifted > 0, "no instance answered after a filler word");
    }
}
