//! Entropy-based normal/key token classification and numerical verifiers
//! for the token-level gradient-reweighting identities.
//!
//! The central identity: the gradient of the regularized unlearning loss for
//! a single triple decomposes into per-(position, token) pieces
//!
//! ```text
//! grad = sum_i sum_v (1{v = y_i} - lambda * R_i(v)) * grad log p(v | I, x, i)
//! ```
//!
//! and with one-hot references a position's gradient collapses to
//! `(1 - lambda)` times its plain gradient-ascent contribution. Both facts
//! are exact in real arithmetic; the verifiers here check them in f64 at
//! tolerances far below anything training dynamics could produce.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grad::{accumulate_position_gradient, dlogits_log_prob, GradientVector};
use crate::losses::{LossSpec, Regularizer};
use crate::model::{forward_position, ModelParams, TokenDistribution, TokenId, Triple};
use crate::reference::ReferenceDistributions;

/// Shannon entropy in nats, with `0 log 0 := 0`.
pub fn entropy(dist: &TokenDistribution) -> Result<f64> {
    dist.validate_simplex()?;
    let mut h = 0.0;
    for &p in &dist.probs {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Classification of one answer position against its reference distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenClassification {
    /// 1-based answer position.
    pub position: usize,
    pub token: TokenId,
    /// Entropy of the reference distribution at this position, in nats.
    pub entropy: f64,
    /// Reference mass concentrates on the ground-truth token (>= tau).
    pub is_normal: bool,
    /// Reference entropy reaches the key threshold (>= epsilon).
    pub is_key: bool,
}

/// Classify every answer position: normal when the reference assigns the
/// ground-truth token at least `tau`, key when the reference entropy is at
/// least `epsilon`. Both flags come from the same frozen references.
pub fn classify_tokens(
    refs: &ReferenceDistributions,
    answer: &[TokenId],
    tau: f64,
    epsilon: f64,
) -> Result<Vec<TokenClassification>> {
    if tau.is_nan() || tau <= 0.0 || tau > 1.0 {
        return Err(Error::Config("tau must lie in (0, 1]".into()));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be > 0".into()));
    }
    if refs.positions() != answer.len() {
        return Err(Error::DimensionMismatch(format!(
            "reference has {} positions, answer has {}",
            refs.positions(),
            answer.len()
        )));
    }
    let mut out = Vec::with_capacity(answer.len());
    for (i, &tok) in answer.iter().enumerate() {
        let dist = &refs.per_position[i];
        if tok >= dist.vocab_size() {
            return Err(Error::TokenOutOfRange { token: tok, vocab_size: dist.vocab_size() });
        }
        let h = entropy(dist)?;
        out.push(TokenClassification {
            position: i + 1,
            token: tok,
            entropy: h,
            is_normal: dist.probs[tok] >= tau,
            is_key: h >= epsilon,
        });
    }
    Ok(out)
}

/// Scale-free default for the key threshold: the median of the per-position
/// reference entropies within one answer.
pub fn median_entropy(refs: &ReferenceDistributions) -> Result<f64> {
    let mut hs: Vec<f64> =
        refs.per_position.iter().map(entropy).collect::<Result<Vec<_>>>()?;
    if hs.is_empty() {
        return Err(Error::Validation("no positions".into()));
    }
    hs.sort_by(|a, b| a.total_cmp(b));
    let n = hs.len();
    Ok(if n % 2 == 1 { hs[n / 2] } else { 0.5 * (hs[n / 2 - 1] + hs[n / 2]) })
}

/// Gradient of `log p(v | I, x, i)` w.r.t. all parameters, teacher forced on
/// the triple's ground-truth prefix. `position` is 1-based.
pub fn token_level_ga_gradient(
    params: &ModelParams,
    triple: &Triple,
    position: usize,
    token: TokenId,
) -> Result<GradientVector> {
    if position < 1 || position > triple.answer.len() {
        return Err(Error::PositionOutOfRange { position, max: triple.answer.len() });
    }
    if token >= params.config.vocab_size {
        return Err(Error::TokenOutOfRange { token, vocab_size: params.config.vocab_size });
    }
    let prefix = &triple.answer[..position - 1];
    let ctx = forward_position(params, &triple.image, &triple.question, prefix, position)?;
    let dlogits = dlogits_log_prob(&ctx.dist.probs, token, 1.0);
    let mut grads = GradientVector::zeros_like(params);
    accumulate_position_gradient(params, &triple.image, &ctx, position, &dlogits, &mut grads);
    Ok(grads)
}

/// Result of one reweighting check: the coefficient table
/// `c(i, v) = 1{v = y_i} - lambda * R_i(v)` and the largest componentwise
/// difference between the direct gradient and its reweighted reassembly.
#[derive(Debug, Clone)]
pub struct ReweightReport {
    pub triple_id: u32,
    pub lambda: f64,
    /// `coefficients[i][v]`, positions in answer order.
    pub coefficients: Vec<Vec<f64>>,
    pub max_discrepancy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ReweightReport {
    /// Structured text rendering consumed by the CLI.
    pub fn to_text(&self, label: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("check {label}\n"));
        out.push_str(&format!("triple_id {}\n", self.triple_id));
        out.push_str(&format!("lambda {}\n", self.lambda));
        out.push_str(&format!("max_discrepancy {:e}\n", self.max_discrepancy));
        out.push_str(&format!("tolerance {:e}\n", self.tolerance));
        out.push_str(&format!("pass {}\n", self.pass));
        for (i, row) in self.coefficients.iter().enumerate() {
            out.push_str(&format!("coeff {} ", i + 1));
            let cells: Vec<String> = row.iter().map(|c| format!("{c:.6}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }
}

pub const REWEIGHT_IDENTITY_TOL: f64 = 1e-8;
pub const ONEHOT_SCALING_TOL: f64 = 1e-10;

/// Verify the full reweighting identity on one triple: the direct gradient of
/// the regularized loss equals the coefficient-weighted sum of token-level
/// gradients, with the references held constant.
pub fn verify_reweighting_identity(
    params: &ModelParams,
    triple: &Triple,
    refs: &ReferenceDistributions,
    lambda: f64,
) -> Result<ReweightReport> {
    refs.validate(triple.answer.len())?;
    let vocab = params.config.vocab_size;

    // (a) direct gradient of the single-triple regularized loss
    let forget = std::slice::from_ref(triple);
    let mut map = BTreeMap::new();
    map.insert(triple.id, refs.clone());
    let direct = LossSpec::Viker {
        forget,
        references: &map,
        lambda,
        regularizer: Regularizer::Kl,
    }
    .gradient(params)?;

    // (b) reassembled from token-level gradients and the coefficient table
    let mut coefficients = Vec::with_capacity(triple.answer.len());
    let mut reassembled = GradientVector::zeros_like(params);
    for (i, &yi) in triple.answer.iter().enumerate() {
        let r = &refs.per_position[i];
        let coeffs: Vec<f64> = (0..vocab)
            .map(|v| if v == yi { 1.0 - lambda * r.probs[v] } else { -lambda * r.probs[v] })
            .collect();
        for (v, &c) in coeffs.iter().enumerate() {
            if c != 0.0 {
                let mut g = token_level_ga_gradient(params, triple, i + 1, v)?;
                g.scale(c);
                reassembled.add_assign(&g);
            }
        }
        coefficients.push(coeffs);
    }

    let max_discrepancy = direct.max_abs_diff(&reassembled);
    Ok(ReweightReport {
        triple_id: triple.id,
        lambda,
        coefficients,
        max_discrepancy,
        tolerance: REWEIGHT_IDENTITY_TOL,
        pass: max_discrepancy < REWEIGHT_IDENTITY_TOL,
    })
}

/// Direct per-position gradient of `log p(y_i) + lambda * KL(onehot || Q)`,
/// the regularized contribution of one position in the one-hot-reference
/// limit.
pub fn onehot_position_gradient(
    params: &ModelParams,
    triple: &Triple,
    position: usize,
    lambda: f64,
) -> Result<GradientVector> {
    if position < 1 || position > triple.answer.len() {
        return Err(Error::PositionOutOfRange { position, max: triple.answer.len() });
    }
    let yi = triple.answer[position - 1];
    let onehot = TokenDistribution::one_hot(params.config.vocab_size, yi);
    let prefix = &triple.answer[..position - 1];
    let ctx = forward_position(params, &triple.image, &triple.question, prefix, position)?;
    let mut dlogits = dlogits_log_prob(&ctx.dist.probs, yi, 1.0);
    for (v, d) in dlogits.iter_mut().enumerate() {
        // d KL(onehot || Q) / d logit_v = Q_v - onehot_v
        *d += lambda * (ctx.dist.probs[v] - onehot.probs[v]);
    }
    let mut grads = GradientVector::zeros_like(params);
    accumulate_position_gradient(params, &triple.image, &ctx, position, &dlogits, &mut grads);
    Ok(grads)
}

/// Verify the one-hot special case at a single position: with the reference
/// replaced by the Dirac distribution at `y_i`, the position's gradient under
/// the regularized loss equals `(1 - lambda)` times the plain gradient-ascent
/// contribution, and all other token coefficients vanish.
pub fn verify_onehot_scaling(
    params: &ModelParams,
    triple: &Triple,
    position: usize,
    lambda: f64,
) -> Result<ReweightReport> {
    if position < 1 || position > triple.answer.len() {
        return Err(Error::PositionOutOfRange { position, max: triple.answer.len() });
    }
    let vocab = params.config.vocab_size;
    let yi = triple.answer[position - 1];
    let direct = onehot_position_gradient(params, triple, position, lambda)?;

    // expected: (1 - lambda) * token-level gradient at (position, y_i)
    let mut expected = token_level_ga_gradient(params, triple, position, yi)?;
    expected.scale(1.0 - lambda);

    let coefficients: Vec<Vec<f64>> = vec![(0..vocab)
        .map(|v| if v == yi { 1.0 - lambda } else { 0.0 })
        .collect()];

    let max_discrepancy = direct.max_abs_diff(&expected);
    Ok(ReweightReport {
        triple_id: triple.id,
        lambda,
        coefficients,
        max_discrepancy,
        tolerance: ONEHOT_SCALING_TOL,
        pass: max_discrepancy < ONEHOT_SCALING_TOL,
    })
}
