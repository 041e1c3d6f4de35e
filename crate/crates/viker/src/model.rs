//! The toy conditional autoregressive model.
//!
//! Given an image feature `z`, question tokens `x` and a teacher-forced answer
//! prefix, the model produces a distribution over the next answer token:
//!
//! ```text
//! m_i     = mean of token-embedding rows over (x ++ prefix)
//! h_i     = tanh(P z + A m_i + U[i] + b)
//! logits  = O h_i
//! p(v)    = softmax(logits)[v]        (log-sum-exp form)
//! ```
//!
//! All operations are pure functions of their inputs; `ModelParams` is never
//! mutated after construction, so everything here is safe to evaluate in
//! parallel over dataset items.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mat::{add_assign_slice, dot, Mat};

pub type TokenId = usize;

/// Hyperparameters fixing every tensor shape in the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub img_dim: usize,
    pub hidden_dim: usize,
    /// Maximum answer length the position table supports.
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab_size: 64, img_dim: 8, hidden_dim: 16, max_positions: 24 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 1 || self.img_dim < 1 || self.hidden_dim < 1 || self.max_positions < 1
        {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// Reserved end-of-answer token: the last vocabulary id.
    pub fn end_token(&self) -> TokenId {
        self.vocab_size - 1
    }
}

/// Labels used for the tensors in checkpoint files, in `tensors()` order.
pub const TENSOR_LABELS: [&str; 6] = ["E", "P", "U", "A", "O", "b"];

/// All learnable tensors of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// E: token embeddings, `[vocab_size x hidden_dim]`.
    pub token_embed: Mat,
    /// P: visual projector, `[hidden_dim x img_dim]`.
    pub img_proj: Mat,
    /// U: answer-position embeddings, `[max_positions x hidden_dim]`.
    pub pos_embed: Mat,
    /// A: context mixer, `[hidden_dim x hidden_dim]`.
    pub ctx_mix: Mat,
    /// O: output projection, `[vocab_size x hidden_dim]`.
    pub out_proj: Mat,
    /// b: bias, stored as a `[1 x hidden_dim]` matrix.
    pub bias: Mat,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let (v, d, h, l) = (config.vocab_size, config.img_dim, config.hidden_dim, config.max_positions);
        ModelParams {
            config,
            token_embed: Mat::zeros(v, h),
            img_proj: Mat::zeros(h, d),
            pos_embed: Mat::zeros(l, h),
            ctx_mix: Mat::zeros(h, h),
            out_proj: Mat::zeros(v, h),
            bias: Mat::zeros(1, h),
        }
    }

    pub fn tensors(&self) -> [&Mat; 6] {
        [&self.token_embed, &self.img_proj, &self.pos_embed, &self.ctx_mix, &self.out_proj, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut Mat; 6] {
        [
            &mut self.token_embed,
            &mut self.img_proj,
            &mut self.pos_embed,
            &mut self.ctx_mix,
            &mut self.out_proj,
            &mut self.bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat indexing across all tensors in `tensors()` order, row-major
    /// within each tensor. Used by the finite-difference checker.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t.as_slice()[idx];
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t.as_mut_slice()[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Exact bit-level equality (no NaN surprises, no epsilon).
    pub fn bitwise_eq(&self, other: &ModelParams) -> bool {
        self.config == other.config
            && self
                .tensors()
                .iter()
                .zip(other.tensors().iter())
                .all(|(a, b)| {
                    a.as_slice().len() == b.as_slice().len()
                        && a.as_slice()
                            .iter()
                            .zip(b.as_slice())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Draw every parameter i.i.d. uniform on [-0.1, 0.1] from a seeded generator.
/// Identical `(config, seed)` pairs produce bit-identical parameters.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(config.clone());
    for t in params.tensors_mut() {
        for v in t.as_mut_slice() {
            *v = rng.gen_range(-0.1..=0.1);
        }
    }
    params
}

/// Category label carried by every image feature, used by the
/// reference-image ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureCategory {
    People,
    Pets,
    Scene,
    Pattern,
    Persona,
}

impl FeatureCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureCategory::People => "people",
            FeatureCategory::Pets => "pets",
            FeatureCategory::Scene => "scene",
            FeatureCategory::Pattern => "pattern",
            FeatureCategory::Persona => "persona",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "people" => FeatureCategory::People,
            "pets" => FeatureCategory::Pets,
            "scene" => FeatureCategory::Scene,
            "pattern" => FeatureCategory::Pattern,
            "persona" => FeatureCategory::Persona,
            _ => return None,
        })
    }
}

/// An image, represented directly by its feature vector at desk scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature {
    pub values: Vec<f64>,
    pub category: FeatureCategory,
}

impl ImageFeature {
    pub fn new(values: Vec<f64>, category: FeatureCategory) -> Self {
        ImageFeature { values, category }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// One visual-question-answer item.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub id: u32,
    pub persona: u32,
    pub image: ImageFeature,
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    /// Ground-truth key-token slots; present on synthetic data only.
    pub key_mask: Option<Vec<bool>>,
}

impl Triple {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.question.is_empty() {
            return Err(Error::Validation(format!("triple {}: empty question", self.id)));
        }
        if self.answer.is_empty() {
            return Err(Error::Validation(format!("triple {}: empty answer", self.id)));
        }
        if self.answer.len() > config.max_positions {
            return Err(Error::Validation(format!(
                "triple {}: answer length {} exceeds max_positions {}",
                self.id,
                self.answer.len(),
                config.max_positions
            )));
        }
        for &t in self.question.iter().chain(&self.answer) {
            if t >= config.vocab_size {
                return Err(Error::TokenOutOfRange { token: t, vocab_size: config.vocab_size });
            }
        }
        if self.image.dim() != config.img_dim {
            return Err(Error::DimensionMismatch(format!(
                "triple {}: image dim {} vs config img_dim {}",
                self.id,
                self.image.dim(),
                config.img_dim
            )));
        }
        if let Some(mask) = &self.key_mask {
            if mask.len() != self.answer.len() {
                return Err(Error::Validation(format!(
                    "triple {}: key_mask length {} vs answer length {}",
                    self.id,
                    mask.len(),
                    self.answer.len()
                )));
            }
        }
        Ok(())
    }
}

/// A probability simplex over the vocabulary at one answer position.
/// Probabilities are kept alongside log-probabilities so that divergence
/// terms never have to re-exponentiate unstable quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

pub const SIMPLEX_TOL: f64 = 1e-12;

impl TokenDistribution {
    /// Stable softmax: log p = logits - logsumexp(logits).
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();
        let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        TokenDistribution { probs, log_probs }
    }

    /// Build from raw probabilities, validating the simplex invariants.
    /// Zero entries are allowed (their log-probability is -inf); strict
    /// positivity is only guaranteed for softmax outputs.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        let dist = TokenDistribution {
            log_probs: probs.iter().map(|&p| p.ln()).collect(),
            probs,
        };
        dist.validate_simplex()?;
        Ok(dist)
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_logits(&vec![0.0; n])
    }

    pub fn one_hot(n: usize, idx: usize) -> Self {
        assert!(idx < n);
        let mut probs = vec![0.0; n];
        probs[idx] = 1.0;
        let mut log_probs = vec![f64::NEG_INFINITY; n];
        log_probs[idx] = 0.0;
        TokenDistribution { probs, log_probs }
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn validate_simplex(&self) -> Result<()> {
        if self.probs.len() != self.log_probs.len() {
            return Err(Error::NotASimplex("probs/log_probs length mismatch".into()));
        }
        let mut sum = 0.0;
        for &p in &self.probs {
            if p.is_nan() || p < 0.0 {
                return Err(Error::NotASimplex(format!("negative or NaN probability {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::NotASimplex(format!("probabilities sum to {sum}")));
        }
        Ok(())
    }
}

/// Everything the backward pass needs about one teacher-forced position.
#[derive(Debug, Clone)]
pub(crate) struct PositionContext {
    /// question tokens followed by the answer prefix
    pub ctx_tokens: Vec<TokenId>,
    /// m_i, the pooled context embedding
    pub pooled: Vec<f64>,
    /// h_i = tanh(...)
    pub hidden: Vec<f64>,
    pub dist: TokenDistribution,
}

fn check_tokens(tokens: &[TokenId], vocab_size: usize) -> Result<()> {
    for &t in tokens {
        if t >= vocab_size {
            return Err(Error::TokenOutOfRange { token: t, vocab_size });
        }
    }
    Ok(())
}

pub(crate) fn forward_position(
    params: &ModelParams,
    image: &ImageFeature,
    question: &[TokenId],
    prefix: &[TokenId],
    position: usize,
) -> Result<PositionContext> {
    let cfg = &params.config;
    if position < 1 || position > cfg.max_positions {
        return Err(Error::PositionOutOfRange { position, max: cfg.max_positions });
    }
    if prefix.len() != position - 1 {
        return Err(Error::PrefixLength { position, expected: position - 1, got: prefix.len() });
    }
    check_tokens(question, cfg.vocab_size)?;
    check_tokens(prefix, cfg.vocab_size)?;
    if image.dim() != cfg.img_dim {
        return Err(Error::DimensionMismatch(format!(
            "image dim {} vs config img_dim {}",
            image.dim(),
            cfg.img_dim
        )));
    }
    let ctx_tokens: Vec<TokenId> = question.iter().chain(prefix).copied().collect();
    if ctx_tokens.is_empty() {
        return Err(Error::Validation("empty context: question and prefix are both empty".into()));
    }

    // m_i: arithmetic mean of embedding rows over question ++ prefix.
    let h = cfg.hidden_dim;
    let mut pooled = vec![0.0; h];
    for &t in &ctx_tokens {
        add_assign_slice(&mut pooled, params.token_embed.row(t));
    }
    let inv = 1.0 / ctx_tokens.len() as f64;
    for v in &mut pooled {
        *v *= inv;
    }

    // h_i = tanh(P z + A m + U[i] + b)
    let mut pre = params.img_proj.matvec(&image.values);
    let mixed = params.ctx_mix.matvec(&pooled);
    add_assign_slice(&mut pre, &mixed);
    add_assign_slice(&mut pre, params.pos_embed.row(position - 1));
    add_assign_slice(&mut pre, params.bias.row(0));
    let hidden: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();

    let logits: Vec<f64> = (0..cfg.vocab_size).map(|v| dot(params.out_proj.row(v), &hidden)).collect();
    Ok(PositionContext { ctx_tokens, pooled, hidden, dist: TokenDistribution::from_logits(&logits) })
}

/// Distribution of the next answer token at `position` (1-based), teacher
/// forced on the given prefix.
pub fn forward_token_dist(
    params: &ModelParams,
    image: &ImageFeature,
    question: &[TokenId],
    prefix: &[TokenId],
    position: usize,
) -> Result<TokenDistribution> {
    Ok(forward_position(params, image, question, prefix, position)?.dist)
}

/// log p(y | I, x) in nats: the sum over positions of the teacher-forced
/// log-probability of the ground-truth token. Computed from log-probs,
/// never from products of probabilities.
pub fn answer_log_prob(params: &ModelParams, triple: &Triple) -> Result<f64> {
    answer_log_prob_for(params, &triple.image, &triple.question, &triple.answer)
}

/// Same as [`answer_log_prob`] but for an arbitrary (image, question, answer)
/// combination; used to score refusal responses and multiple-choice candidates.
pub fn answer_log_prob_for(
    params: &ModelParams,
    image: &ImageFeature,
    question: &[TokenId],
    answer: &[TokenId],
) -> Result<f64> {
    if answer.is_empty() {
        return Err(Error::Validation("empty answer".into()));
    }
    if answer.len() > params.config.max_positions {
        return Err(Error::Validation(format!(
            "answer length {} exceeds max_positions {}",
            answer.len(),
            params.config.max_positions
        )));
    }
    check_tokens(answer, params.config.vocab_size)?;
    let mut total = 0.0;
    for (i, &tok) in answer.iter().enumerate() {
        let ctx = forward_position(params, image, question, &answer[..i], i + 1)?;
        total += ctx.dist.log_probs[tok];
    }
    Ok(total)
}

/// Mean negative log-likelihood over a dataset.
pub fn nll_loss(params: &ModelParams, data: &[Triple]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = crate::util::KahanSum::new();
    for triple in data {
        sum.add(answer_log_prob(params, triple)?);
    }
    Ok(-sum.value() / data.len() as f64)
}

/// Greedy autoregressive decoding: emit the argmax token at each position
/// (ties broken by lowest token id), feeding emitted tokens back as the
/// prefix. Stops after emitting the end-of-answer token or at `max_len`
/// (clamped to the position table).
pub fn greedy_decode(
    params: &ModelParams,
    image: &ImageFeature,
    question: &[TokenId],
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let end = params.config.end_token();
    let limit = max_len.min(params.config.max_positions);
    let mut out: Vec<TokenId> = Vec::with_capacity(limit);
    for i in 1..=limit {
        let ctx = forward_position(params, image, question, &out, i)?;
        let mut best = 0usize;
        let mut best_p = ctx.dist.log_probs[0];
        for (v, &lp) in ctx.dist.log_probs.iter().enumerate().skip(1) {
            if lp > best_p {
                best = v;
                best_p = lp;
            }
        }
        out.push(best);
        if best == end {
            break;
        }
    }
    Ok(out)
}
