//! Unlearning objectives.
//!
//! All losses decompose into per-position terms over teacher-forced answer
//! prefixes, so each one only has to provide its `d loss / d logits` and the
//! shared backward engine in [`crate::grad`] does the rest. The ViKeR loss is
//!
//! ```text
//! L(D_f) = (1/|D_f|) sum_s log p(y|I,x)  +  (lambda/|D_f|) sum_s sum_i div(R_i, Q_i)
//! ```
//!
//! with the reference distributions `R_i` treated as constants during
//! differentiation. With lambda = 0 the regularization term is skipped
//! entirely, so the code path (and the parameter trajectory it produces)
//! is identical to plain gradient ascent.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::{accumulate_position_gradient, dlogits_log_prob, GradientVector};
use crate::model::{
    answer_log_prob, answer_log_prob_for, forward_position, nll_loss, ModelParams,
    TokenDistribution, TokenId, Triple,
};
use crate::reference::ReferenceDistributions;
use crate::util::{log_sigmoid, sigmoid, KahanSum};

/// Which unlearning objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ga,
    Npo,
    IdkPo,
    Viker,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ga => "ga",
            Method::Npo => "npo",
            Method::IdkPo => "idkpo",
            Method::Viker => "viker",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ga" => Method::Ga,
            "npo" => Method::Npo,
            "idkpo" => Method::IdkPo,
            "viker" => Method::Viker,
            _ => return None,
        })
    }
}

/// Divergence used to pull the current distribution toward the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regularizer {
    Kl,
    Jsd,
    Cos,
}

impl Regularizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regularizer::Kl => "kl",
            Regularizer::Jsd => "jsd",
            Regularizer::Cos => "cos",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "kl" => Regularizer::Kl,
            "jsd" => Regularizer::Jsd,
            "cos" => Regularizer::Cos,
            _ => return None,
        })
    }
}

/// Method selector plus every knob an unlearning run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnConfig {
    pub method: Method,
    /// Regularization strength; 0.05 suits the 10% split, 0.5 the 15% split.
    pub lambda: f64,
    /// Number of reference images averaged per triple.
    pub k: usize,
    pub beta: f64,
    pub regularizer: Regularizer,
    pub steps: usize,
    pub learning_rate: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            method: Method::Viker,
            lambda: 0.5,
            k: 5,
            beta: 0.4,
            regularizer: Regularizer::Kl,
            steps: 200,
            // tuned so the shared 200-step budget separates the methods
            // instead of flattening every answer distribution
            learning_rate: 7e-4,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be a finite value >= 0".into()));
        }
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return Err(Error::Config("beta must be > 0".into()));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Pool of refusal-style answers used by IdkPO.
#[derive(Debug, Clone, PartialEq)]
pub struct IdkPool {
    pub responses: Vec<Vec<TokenId>>,
}

impl IdkPool {
    pub fn new(responses: Vec<Vec<TokenId>>, end_token: TokenId, vocab_size: usize) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::Validation("refusal pool must be non-empty".into()));
        }
        for r in &responses {
            if r.last() != Some(&end_token) {
                return Err(Error::Validation(
                    "every refusal response must end with the end-of-answer token".into(),
                ));
            }
            if r.iter().any(|&t| t >= vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token: *r.iter().find(|&&t| t >= vocab_size).unwrap(),
                    vocab_size,
                });
            }
        }
        Ok(IdkPool { responses })
    }

    /// Draw one refusal answer per triple from a seeded generator. The
    /// assignment is fixed for the whole run.
    pub fn assign(&self, n_triples: usize, seed: u64) -> Vec<Vec<TokenId>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x49_44_4b_50_4f); // "IDKPO"
        (0..n_triples)
            .map(|_| self.responses[rng.gen_range(0..self.responses.len())].clone())
            .collect()
    }
}

/// Sign-flipped NLL over the forget set: minimizing this drives the
/// likelihood of forget answers down.
pub fn ga_loss(params: &ModelParams, forget_set: &[Triple]) -> Result<f64> {
    Ok(-nll_loss(params, forget_set)?)
}

/// Divergence between a reference simplex R and a current simplex Q, in nats.
///
/// KL sums `R(v) * (ln R(v) - log Q(v))` with `0 log 0 := 0` on the R side
/// and `log Q` taken from the stable log-probability field. JSD is two KL
/// evaluations against the mixture M = (R+Q)/2. CoS is the cosine *penalty*
/// `1 - cos(R, Q)` so that all three are minimized at Q = R.
pub fn divergence(r: &TokenDistribution, q: &TokenDistribution, kind: Regularizer) -> Result<f64> {
    r.validate_simplex()?;
    q.validate_simplex()?;
    if r.vocab_size() != q.vocab_size() {
        return Err(Error::DimensionMismatch("divergence inputs differ in vocab size".into()));
    }
    Ok(match kind {
        Regularizer::Kl => kl_core(r, q),
        Regularizer::Jsd => jsd_core(r, q),
        Regularizer::Cos => cos_penalty(&r.probs, &q.probs),
    })
}

fn kl_core(r: &TokenDistribution, q: &TokenDistribution) -> f64 {
    let mut acc = 0.0;
    for (&rv, &qlp) in r.probs.iter().zip(&q.log_probs) {
        if rv > 0.0 {
            acc += rv * (rv.ln() - qlp);
        }
    }
    acc
}

/// 0.5 KL(R || M) + 0.5 KL(Q || M) with M = (R + Q)/2, fused into one pass.
/// The mixture has no stored log field, so its log is the one extra
/// logarithm per component relative to a KL evaluation.
fn jsd_core(r: &TokenDistribution, q: &TokenDistribution) -> f64 {
    let mut acc = 0.0;
    for v in 0..r.probs.len() {
        let rv = r.probs[v];
        let qv = q.probs[v];
        let m = 0.5 * (rv + qv);
        if m > 0.0 {
            let lnm = m.ln();
            if rv > 0.0 {
                acc += 0.5 * rv * (rv.ln() - lnm);
            }
            if qv > 0.0 {
                acc += 0.5 * qv * (q.log_probs[v] - lnm);
            }
        }
    }
    acc
}

fn mixture(r: &TokenDistribution, q: &TokenDistribution) -> TokenDistribution {
    let probs: Vec<f64> =
        r.probs.iter().zip(&q.probs).map(|(&a, &b)| 0.5 * (a + b)).collect();
    let log_probs: Vec<f64> = probs.iter().map(|&p| p.ln()).collect();
    TokenDistribution { probs, log_probs }
}

fn cos_penalty(r: &[f64], q: &[f64]) -> f64 {
    let dot: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
    let nr = r.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
    1.0 - dot / (nr * nq)
}

/// d divergence / d logits, where Q = softmax(logits) and R is constant.
fn divergence_dlogits(r: &TokenDistribution, q: &TokenDistribution, kind: Regularizer) -> Vec<f64> {
    match kind {
        // d KL / d logit_u = Q_u - R_u
        Regularizer::Kl => q.probs.iter().zip(&r.probs).map(|(&qv, &rv)| qv - rv).collect(),
        Regularizer::Jsd => {
            // d JSD / d Q_v = 0.5 ln(Q_v / M_v), chained through softmax.
            let m = mixture(r, q);
            let t: Vec<f64> = q
                .probs
                .iter()
                .zip(q.log_probs.iter().zip(&m.log_probs))
                .map(|(&qv, (&qlp, &mlp))| if qv > 0.0 { qv * 0.5 * (qlp - mlp) } else { 0.0 })
                .collect();
            chain_softmax(&q.probs, &t)
        }
        Regularizer::Cos => {
            let dot: f64 = r.probs.iter().zip(&q.probs).map(|(a, b)| a * b).sum();
            let nr = r.probs.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nq = q.probs.iter().map(|a| a * a).sum::<f64>().sqrt();
            let t: Vec<f64> = q
                .probs
                .iter()
                .zip(&r.probs)
                .map(|(&qv, &rv)| {
                    let g = -rv / (nr * nq) + dot * qv / (nr * nq * nq * nq);
                    qv * g
                })
                .collect();
            chain_softmax(&q.probs, &t)
        }
    }
}

/// Given t_v = Q_v * (d f / d Q_v), returns d f / d logits = t - Q * sum(t).
fn chain_softmax(q_probs: &[f64], t: &[f64]) -> Vec<f64> {
    let total: f64 = t.iter().sum();
    q_probs.iter().zip(t).map(|(&qv, &tv)| tv - qv * total).collect()
}

/// The full ViKeR objective: gradient ascent plus the per-position
/// divergence from the frozen reference distributions.
pub fn viker_loss(
    params: &ModelParams,
    forget_set: &[Triple],
    references: &BTreeMap<u32, ReferenceDistributions>,
    lambda: f64,
    kind: Regularizer,
) -> Result<f64> {
    let base = ga_loss(params, forget_set)?;
    if lambda == 0.0 {
        return Ok(base);
    }
    Ok(base + lambda * regularization_term(params, forget_set, references, kind)?)
}

/// The bare regularization sum `(1/|D_f|) sum_s sum_i div(R_i, Q_i)`.
pub fn regularization_term(
    params: &ModelParams,
    forget_set: &[Triple],
    references: &BTreeMap<u32, ReferenceDistributions>,
    kind: Regularizer,
) -> Result<f64> {
    if forget_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = KahanSum::new();
    for triple in forget_set {
        let refs = references.get(&triple.id).ok_or(Error::MissingReference(triple.id))?;
        refs.validate(triple.answer.len())?;
        for i in 0..triple.answer.len() {
            let q = forward_position(params, &triple.image, &triple.question, &triple.answer[..i], i + 1)?
                .dist;
            acc.add(divergence(&refs.per_position[i], &q, kind)?);
        }
    }
    Ok(acc.value() / forget_set.len() as f64)
}

/// NPO: keep only the dis-preferred branch of a DPO pair. The log-ratio is
/// computed at whole-answer granularity against the frozen full model.
pub fn npo_loss(
    params: &ModelParams,
    params_full: &ModelParams,
    forget_set: &[Triple],
    beta: f64,
) -> Result<f64> {
    if forget_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = KahanSum::new();
    for triple in forget_set {
        let ratio = answer_log_prob(params, triple)? - answer_log_prob(params_full, triple)?;
        acc.add(npo_from_ratio(ratio, beta));
    }
    Ok(acc.value() / forget_set.len() as f64)
}

fn npo_from_ratio(ratio: f64, beta: f64) -> f64 {
    -(2.0 / beta) * log_sigmoid(-beta * ratio)
}

/// IdkPO: prefer a refusal answer over the ground-truth answer, DPO style.
/// `idk_answers[i]` is the refusal drawn for `forget_set[i]`; use
/// [`IdkPool::assign`] to fix the draw for a whole run.
pub fn idkpo_loss(
    params: &ModelParams,
    params_full: &ModelParams,
    forget_set: &[Triple],
    idk_answers: &[Vec<TokenId>],
    beta: f64,
) -> Result<f64> {
    if forget_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if idk_answers.len() != forget_set.len() {
        return Err(Error::Validation("one refusal answer per forget triple required".into()));
    }
    let mut acc = KahanSum::new();
    for (triple, idk) in forget_set.iter().zip(idk_answers) {
        let margin = idkpo_margin(params, params_full, triple, idk)?;
        acc.add(-(1.0 / beta) * log_sigmoid(beta * margin));
    }
    Ok(acc.value() / forget_set.len() as f64)
}

fn idkpo_margin(
    params: &ModelParams,
    params_full: &ModelParams,
    triple: &Triple,
    idk: &[TokenId],
) -> Result<f64> {
    let idk_ratio = answer_log_prob_for(params, &triple.image, &triple.question, idk)?
        - answer_log_prob_for(params_full, &triple.image, &triple.question, idk)?;
    let ans_ratio = answer_log_prob(params, triple)? - answer_log_prob(params_full, triple)?;
    Ok(idk_ratio - ans_ratio)
}

/// A differentiable loss over a dataset, bundling everything its value and
/// analytic gradient need. The finite-difference oracle only sees `value`.
pub enum LossSpec<'a> {
    Nll { data: &'a [Triple] },
    Ga { forget: &'a [Triple] },
    Viker {
        forget: &'a [Triple],
        references: &'a BTreeMap<u32, ReferenceDistributions>,
        lambda: f64,
        regularizer: Regularizer,
    },
    Npo { forget: &'a [Triple], full: &'a ModelParams, beta: f64 },
    IdkPo {
        forget: &'a [Triple],
        full: &'a ModelParams,
        idk_answers: &'a [Vec<TokenId>],
        beta: f64,
    },
}

impl LossSpec<'_> {
    pub fn value(&self, params: &ModelParams) -> Result<f64> {
        match self {
            LossSpec::Nll { data } => nll_loss(params, data),
            LossSpec::Ga { forget } => ga_loss(params, forget),
            LossSpec::Viker { forget, references, lambda, regularizer } => {
                viker_loss(params, forget, references, *lambda, *regularizer)
            }
            LossSpec::Npo { forget, full, beta } => npo_loss(params, full, forget, *beta),
            LossSpec::IdkPo { forget, full, idk_answers, beta } => {
                idkpo_loss(params, full, forget, idk_answers, *beta)
            }
        }
    }

    pub fn gradient(&self, params: &ModelParams) -> Result<GradientVector> {
        let mut grads = GradientVector::zeros_like(params);
        match self {
            LossSpec::Nll { data } => {
                if data.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                let scale = -1.0 / data.len() as f64;
                for triple in *data {
                    accumulate_answer_gradient(params, triple, scale, None, &mut grads)?;
                }
            }
            LossSpec::Ga { forget } => {
                if forget.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                let scale = 1.0 / forget.len() as f64;
                for triple in *forget {
                    accumulate_answer_gradient(params, triple, scale, None, &mut grads)?;
                }
            }
            LossSpec::Viker { forget, references, lambda, regularizer } => {
                if forget.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                let scale = 1.0 / forget.len() as f64;
                for triple in *forget {
                    let reg = if *lambda > 0.0 {
                        let refs =
                            references.get(&triple.id).ok_or(Error::MissingReference(triple.id))?;
                        refs.validate(triple.answer.len())?;
                        Some((*lambda * scale, refs, *regularizer))
                    } else {
                        None
                    };
                    accumulate_answer_gradient(params, triple, scale, reg, &mut grads)?;
                }
            }
            LossSpec::Npo { forget, full, beta } => {
                if forget.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                let n = forget.len() as f64;
                for triple in *forget {
                    let ratio =
                        answer_log_prob(params, triple)? - answer_log_prob(full, triple)?;
                    let weight = (2.0 / n) * sigmoid(*beta * ratio);
                    accumulate_answer_gradient(params, triple, weight, None, &mut grads)?;
                }
            }
            LossSpec::IdkPo { forget, full, idk_answers, beta } => {
                if forget.is_empty() {
                    return Err(Error::EmptyDataset);
                }
                if idk_answers.len() != forget.len() {
                    return Err(Error::Validation(
                        "one refusal answer per forget triple required".into(),
                    ));
                }
                let n = forget.len() as f64;
                for (triple, idk) in forget.iter().zip(*idk_answers) {
                    let margin = idkpo_margin(params, full, triple, idk)?;
                    let c = sigmoid(-*beta * margin) / n;
                    // preferred (refusal) branch: d loss / d log p = -c
                    accumulate_sequence_gradient(params, triple, idk, -c, &mut grads)?;
                    // dis-preferred (ground truth) branch: d loss / d log p = +c
                    accumulate_answer_gradient(params, triple, c, None, &mut grads)?;
                }
            }
        }
        if !grads.all_finite() {
            return Err(Error::NonFiniteLoss("gradient contains non-finite components".into()));
        }
        Ok(grads)
    }
}

/// Gradient of the scalar loss w.r.t. every parameter tensor.
pub fn loss_gradient(params: &ModelParams, spec: &LossSpec) -> Result<GradientVector> {
    spec.gradient(params)
}

/// Walk the teacher-forced positions of `triple.answer`, accumulating
/// `scale * d log p(y_i) / d theta` plus, when present, the regularizer
/// contribution `reg_scale * d div(R_i, Q_i) / d theta`.
fn accumulate_answer_gradient(
    params: &ModelParams,
    triple: &Triple,
    scale: f64,
    reg: Option<(f64, &ReferenceDistributions, Regularizer)>,
    grads: &mut GradientVector,
) -> Result<()> {
    triple.validate(&params.config)?;
    for (i, &tok) in triple.answer.iter().enumerate() {
        let ctx =
            forward_position(params, &triple.image, &triple.question, &triple.answer[..i], i + 1)?;
        let mut dlogits = dlogits_log_prob(&ctx.dist.probs, tok, scale);
        if let Some((reg_scale, refs, kind)) = reg {
            let reg_d = divergence_dlogits(&refs.per_position[i], &ctx.dist, kind);
            for (d, r) in dlogits.iter_mut().zip(&reg_d) {
                *d += reg_scale * r;
            }
        }
        accumulate_position_gradient(params, &triple.image, &ctx, i + 1, &dlogits, grads);
    }
    Ok(())
}

/// Like [`accumulate_answer_gradient`] but for an arbitrary answer sequence
/// (the refusal branch of IdkPO).
fn accumulate_sequence_gradient(
    params: &ModelParams,
    triple: &Triple,
    answer: &[TokenId],
    scale: f64,
    grads: &mut GradientVector,
) -> Result<()> {
    for (i, &tok) in answer.iter().enumerate() {
        let ctx = forward_position(params, &triple.image, &triple.question, &answer[..i], i + 1)?;
        let dlogits = dlogits_log_prob(&ctx.dist.probs, tok, scale);
        accumulate_position_gradient(params, &triple.image, &ctx, i + 1, &dlogits, grads);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{check_gradients, finite_diff_gradient, GRAD_CHECK_STEP};
    use crate::model::{init_params, FeatureCategory, ImageFeature, ModelConfig};
    use crate::reference::{estimate_reference, RefCategory, ReferenceSet};
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig { vocab_size: 8, img_dim: 3, hidden_dim: 4, max_positions: 6 }
    }

    fn make_triples(cfg: &ModelConfig, seed: u64, n: usize) -> Vec<Triple> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|id| {
                let img: Vec<f64> = (0..cfg.img_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let qlen = rng.gen_range(1..=3);
                let alen = rng.gen_range(2..=4);
                Triple {
                    id: id as u32,
                    persona: 0,
                    image: ImageFeature::new(img, FeatureCategory::Persona),
                    question: (0..qlen).map(|_| rng.gen_range(0..cfg.vocab_size)).collect(),
                    answer: (0..alen).map(|_| rng.gen_range(0..cfg.vocab_size)).collect(),
                    key_mask: None,
                }
            })
            .collect()
    }

    fn references_for(
        params: &ModelParams,
        triples: &[Triple],
        seed: u64,
        k: usize,
    ) -> BTreeMap<u32, ReferenceDistributions> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<ImageFeature> = (0..k)
            .map(|_| {
                ImageFeature::new(
                    (0..params.config.img_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    FeatureCategory::People,
                )
            })
            .collect();
        let refs = ReferenceSet::new(images, RefCategory::People).unwrap();
        triples
            .iter()
            .map(|t| (t.id, estimate_reference(params, &refs, t).unwrap()))
            .collect()
    }

    #[test]
    fn ga_is_negated_nll() {
        let cfg = small_config();
        let p = init_params(&cfg, 31);
        let data = make_triples(&cfg, 1, 3);
        let ga = ga_loss(&p, &data).unwrap();
        let nll = nll_loss(&p, &data).unwrap();
        assert!((ga + nll).abs() < 1e-15);
    }

    #[test]
    fn ga_loss_is_zero_when_answers_are_certain() {
        // Saturate the output projection so one token per position carries
        // probability 1 up to f64 rounding; log p(y) is then exactly 0.
        let cfg = small_config();
        let mut p = ModelParams::zeros(cfg.clone());
        for c in 0..cfg.hidden_dim {
            *p.bias.at_mut(0, c) = 1.0;
            *p.out_proj.at_mut(2, c) = 500.0;
        }
        let t = Triple {
            id: 0,
            persona: 0,
            image: ImageFeature::new(vec![0.0; 3], FeatureCategory::Persona),
            question: vec![1],
            answer: vec![2, 2],
            key_mask: None,
        };
        assert_eq!(ga_loss(&p, &[t]).unwrap(), 0.0);
    }

    #[test]
    fn ga_gradient_is_exact_negation_of_nll_gradient() {
        let cfg = small_config();
        let p = init_params(&cfg, 33);
        let data = make_triples(&cfg, 2, 2);
        let g_ga = LossSpec::Ga { forget: &data }.gradient(&p).unwrap();
        let mut g_nll = LossSpec::Nll { data: &data }.gradient(&p).unwrap();
        g_nll.scale(-1.0);
        assert!(g_ga.max_abs_diff(&g_nll) < 1e-15);
    }

    #[test]
    fn kl_worked_example() {
        let r = TokenDistribution::from_probs(vec![0.5, 0.5]).unwrap();
        let q = TokenDistribution::from_probs(vec![0.25, 0.75]).unwrap();
        // direct two-term summation oracle
        let expected = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let got = divergence(&r, &q, Regularizer::Kl).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.143841).abs() < 1e-6);
    }

    #[test]
    fn kl_of_identical_distribution_is_zero() {
        let r = TokenDistribution::from_logits(&[0.3, -0.2, 1.4, 0.0]);
        let d = divergence(&r, &r, Regularizer::Kl).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn divergence_rejects_non_simplex() {
        let bad = TokenDistribution { probs: vec![0.5, 0.4], log_probs: vec![0.0, 0.0] };
        let ok = TokenDistribution::uniform(2);
        assert!(matches!(divergence(&bad, &ok, Regularizer::Kl), Err(Error::NotASimplex(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_nonnegative_and_zero_iff_equal(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let r = TokenDistribution::from_probs(raw.iter().map(|v| v / sum).collect()).unwrap();
            let raw2: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum2: f64 = raw2.iter().sum();
            let q = TokenDistribution::from_probs(raw2.iter().map(|v| v / sum2).collect()).unwrap();
            let d = divergence(&r, &q, Regularizer::Kl).unwrap();
            prop_assert!(d >= -1e-12);
            let self_d = divergence(&r, &r, Regularizer::Kl).unwrap();
            prop_assert!(self_d.abs() < 1e-12);
        }

        #[test]
        fn jsd_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                TokenDistribution::from_probs(raw.iter().map(|v| v / sum).collect()).unwrap()
            };
            let r = mk(&mut rng);
            let q = mk(&mut rng);
            let a = divergence(&r, &q, Regularizer::Jsd).unwrap();
            let b = divergence(&q, &r, Regularizer::Jsd).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn viker_with_zero_lambda_equals_ga_exactly() {
        let cfg = small_config();
        let p = init_params(&cfg, 41);
        let data = make_triples(&cfg, 3, 3);
        let refs = BTreeMap::new(); // must not be touched at lambda = 0
        let v = viker_loss(&p, &data, &refs, 0.0, Regularizer::Kl).unwrap();
        let g = ga_loss(&p, &data).unwrap();
        assert_eq!(v, g);
    }

    #[test]
    fn viker_regularization_vanishes_at_full_model_with_own_image_references() {
        // `w/o Vis`: the reference is the full model's own distribution on the
        // forget image, so at theta = theta_full the divergence term is zero.
        let cfg = small_config();
        let p = init_params(&cfg, 43);
        let data = make_triples(&cfg, 4, 2);
        let mut refs = BTreeMap::new();
        for t in &data {
            let own = ReferenceSet::new(vec![t.image.clone()], RefCategory::Forget).unwrap();
            refs.insert(t.id, estimate_reference(&p, &own, t).unwrap());
        }
        let reg = regularization_term(&p, &data, &refs, Regularizer::Kl).unwrap();
        assert!(reg.abs() < 1e-12, "reg = {reg}");
        let v = viker_loss(&p, &data, &refs, 0.5, Regularizer::Kl).unwrap();
        let g = ga_loss(&p, &data).unwrap();
        assert!((v - g).abs() < 1e-12);
    }

    #[test]
    fn viker_matches_bruteforce_double_loop() {
        let cfg = small_config();
        let p = init_params(&cfg, 47);
        let full = init_params(&cfg, 48);
        let data = make_triples(&cfg, 5, 2);
        let refs = references_for(&full, &data, 6, 3);
        let got = viker_loss(&p, &data, &refs, 0.5, Regularizer::Kl).unwrap();
        // brute force: explicit sums over triples, positions and vocabulary
        let mut expected = ga_loss(&p, &data).unwrap();
        let mut reg = 0.0;
        for t in &data {
            let r = &refs[&t.id];
            for i in 0..t.answer.len() {
                let q = crate::model::forward_token_dist(&p, &t.image, &t.question, &t.answer[..i], i + 1)
                    .unwrap();
                for v in 0..cfg.vocab_size {
                    let rv = r.per_position[i].probs[v];
                    if rv > 0.0 {
                        reg += rv * (rv.ln() - q.log_probs[v]);
                    }
                }
            }
        }
        expected += 0.5 * reg / data.len() as f64;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn viker_missing_reference_is_reported() {
        let cfg = small_config();
        let p = init_params(&cfg, 53);
        let data = make_triples(&cfg, 7, 2);
        let refs = BTreeMap::new();
        assert!(matches!(
            viker_loss(&p, &data, &refs, 0.5, Regularizer::Kl),
            Err(Error::MissingReference(_))
        ));
    }

    #[test]
    fn npo_closed_form_at_zero_ratio() {
        let cfg = small_config();
        let p = init_params(&cfg, 59);
        let data = make_triples(&cfg, 8, 3);
        let loss = npo_loss(&p, &p, &data, 0.4).unwrap();
        let expected = 5.0 * (2.0f64).ln(); // -(2/0.4) ln(1/2)
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn npo_is_monotone_in_the_log_ratio() {
        let mut prev = npo_from_ratio(-3.0, 0.4);
        for i in 1..=60 {
            let r = -3.0 + 0.1 * i as f64;
            let cur = npo_from_ratio(r, 0.4);
            assert!(cur > prev, "not increasing at ratio {r}");
            prev = cur;
        }
    }

    #[test]
    fn npo_vanishes_for_large_beta_and_negative_ratio() {
        let loss = npo_from_ratio(-1.0, 100.0);
        assert!(loss.abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn idkpo_closed_form_at_zero_ratios() {
        let cfg = small_config();
        let p = init_params(&cfg, 61);
        let data = make_triples(&cfg, 9, 2);
        let pool = IdkPool::new(
            vec![vec![1, cfg.end_token()], vec![3, 2, cfg.end_token()]],
            cfg.end_token(),
            cfg.vocab_size,
        )
        .unwrap();
        let idk = pool.assign(data.len(), 77);
        let loss = idkpo_loss(&p, &p, &data, &idk, 0.4).unwrap();
        let expected = 2.5 * (2.0f64).ln(); // -(1/0.4) ln(1/2)
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn idk_assignment_is_seed_deterministic() {
        let cfg = small_config();
        let pool = IdkPool::new(
            vec![
                vec![1, cfg.end_token()],
                vec![3, 2, cfg.end_token()],
                vec![4, cfg.end_token()],
            ],
            cfg.end_token(),
            cfg.vocab_size,
        )
        .unwrap();
        assert_eq!(pool.assign(10, 5), pool.assign(10, 5));
        // different seed should eventually differ
        assert_ne!(pool.assign(32, 5), pool.assign(32, 6));
    }

    #[test]
    fn idkpo_decreases_when_refusal_gets_likelier() {
        // Holding everything else fixed, a larger refusal log-ratio means a
        // larger margin and hence a smaller loss.
        let beta = 0.4;
        let at = |margin: f64| -(1.0 / beta) * log_sigmoid(beta * margin);
        assert!(at(1.0) < at(0.0));
        assert!(at(0.0) < at(-1.0));
    }

    #[test]
    fn idkpool_rejects_missing_end_token() {
        let cfg = small_config();
        assert!(IdkPool::new(vec![vec![1, 2]], cfg.end_token(), cfg.vocab_size).is_err());
        assert!(IdkPool::new(vec![], cfg.end_token(), cfg.vocab_size).is_err());
    }

    #[test]
    fn all_losses_pass_finite_difference_check() {
        let cfg = small_config();
        let params = init_params(&cfg, 3);
        let full = init_params(&cfg, 63);
        let data = make_triples(&cfg, 10, 2);
        let refs = references_for(&full, &data, 11, 3);
        let pool = IdkPool::new(
            vec![vec![1, cfg.end_token()], vec![3, 2, cfg.end_token()]],
            cfg.end_token(),
            cfg.vocab_size,
        )
        .unwrap();
        let idk = pool.assign(data.len(), 13);

        let specs: Vec<(&str, LossSpec)> = vec![
            ("nll", LossSpec::Nll { data: &data }),
            ("ga", LossSpec::Ga { forget: &data }),
            (
                "viker-kl",
                LossSpec::Viker { forget: &data, references: &refs, lambda: 0.5, regularizer: Regularizer::Kl },
            ),
            (
                "viker-jsd",
                LossSpec::Viker { forget: &data, references: &refs, lambda: 0.5, regularizer: Regularizer::Jsd },
            ),
            (
                "viker-cos",
                LossSpec::Viker { forget: &data, references: &refs, lambda: 0.5, regularizer: Regularizer::Cos },
            ),
            ("npo", LossSpec::Npo { forget: &data, full: &full, beta: 0.4 }),
            ("idkpo", LossSpec::IdkPo { forget: &data, full: &full, idk_answers: &idk, beta: 0.4 }),
        ];
        for (name, spec) in &specs {
            let analytic = spec.gradient(&params).unwrap();
            let fd = finite_diff_gradient(&params, GRAD_CHECK_STEP, |p| spec.value(p)).unwrap();
            let report = check_gradients(&analytic, &fd);
            assert!(
                report.pass,
                "{name}: max rel err {:.3e} at component {}",
                report.max_rel_err, report.worst_component
            );
        }
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let cfg = small_config();
        let p = init_params(&cfg, 67);
        let full = init_params(&cfg, 68);
        let data = make_triples(&cfg, 12, 2);
        let g_ga = LossSpec::Ga { forget: &data }.gradient(&p).unwrap();
        let g_npo = LossSpec::Npo { forget: &data, full: &full, beta: 0.4 }.gradient(&p).unwrap();
        // combined loss evaluated through the FD engine to keep the oracle honest
        let fd = finite_diff_gradient(&p, GRAD_CHECK_STEP, |q| {
            Ok(ga_loss(q, &data)? + npo_loss(q, &full, &data, 0.4)?)
        })
        .unwrap();
        let mut sum = g_ga.clone();
        sum.add_assign(&g_npo);
        let report = check_gradients(&sum, &fd);
        assert!(report.pass, "max rel err {:.3e}", report.max_rel_err);
    }
}
