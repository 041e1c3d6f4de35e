//! Gradient carrier, the per-position backward pass, and the
//! finite-difference checker.
//!
//! Every loss in this crate reduces to a sum of per-position terms whose
//! gradient with respect to the logits is known in closed form. The single
//! backward routine here maps such a `d loss / d logits` vector onto all
//! parameter tensors; loss modules only have to supply the right logit
//! gradients.

use crate::error::{Error, Result};
use crate::mat::{add_assign_slice, Mat};
use crate::model::{ImageFeature, ModelParams, PositionContext, TokenId};

/// Accumulated gradients, shape-isomorphic to [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub token_embed: Mat,
    pub img_proj: Mat,
    pub pos_embed: Mat,
    pub ctx_mix: Mat,
    pub out_proj: Mat,
    pub bias: Mat,
}

impl GradientVector {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let t = params.tensors();
        GradientVector {
            token_embed: Mat::zeros(t[0].rows(), t[0].cols()),
            img_proj: Mat::zeros(t[1].rows(), t[1].cols()),
            pos_embed: Mat::zeros(t[2].rows(), t[2].cols()),
            ctx_mix: Mat::zeros(t[3].rows(), t[3].cols()),
            out_proj: Mat::zeros(t[4].rows(), t[4].cols()),
            bias: Mat::zeros(t[5].rows(), t[5].cols()),
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

    pub fn num_components(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t.as_slice()[idx];
            }
            idx -= t.len();
        }
        panic!("flat index out of range");
    }

    pub fn add_assign(&mut self, other: &GradientVector) {
        let o = other.tensors();
        for (t, s) in self.tensors_mut().into_iter().zip(o) {
            t.add_assign(s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// max_i |a_i - b_i| over all components.
    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        let mut max = 0.0f64;
        for (a, b) in self.tensors().into_iter().zip(other.tensors()) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                max = max.max((x - y).abs());
            }
        }
        max
    }

    pub fn max_abs(&self) -> f64 {
        let mut max = 0.0f64;
        for t in self.tensors() {
            for v in t.as_slice() {
                max = max.max(v.abs());
            }
        }
        max
    }
}

/// Backpropagate `d loss / d logits` through one teacher-forced position,
/// accumulating into `grads` with the given scale factored into `dlogits`
/// already. The forward context must come from the same (params, inputs).
pub(crate) fn accumulate_position_gradient(
    params: &ModelParams,
    image: &ImageFeature,
    ctx: &PositionContext,
    position: usize,
    dlogits: &[f64],
    grads: &mut GradientVector,
) {
    debug_assert_eq!(dlogits.len(), params.config.vocab_size);

    // dO[v] += dlogits[v] * h
    for (v, &dl) in dlogits.iter().enumerate() {
        if dl != 0.0 {
            let row = grads.out_proj.row_mut(v);
            for (g, &hj) in row.iter_mut().zip(&ctx.hidden) {
                *g += dl * hj;
            }
        }
    }

    // dh = O^T dlogits
    let dh = params.out_proj.matvec_t(dlogits);

    // through tanh: da = dh * (1 - h^2)
    let da: Vec<f64> = dh.iter().zip(&ctx.hidden).map(|(d, h)| d * (1.0 - h * h)).collect();

    grads.img_proj.add_outer(1.0, &da, &image.values);
    grads.ctx_mix.add_outer(1.0, &da, &ctx.pooled);
    add_assign_slice(grads.pos_embed.row_mut(position - 1), &da);
    add_assign_slice(grads.bias.row_mut(0), &da);

    // dm = A^T da, distributed over the pooled embedding rows
    let dm = params.ctx_mix.matvec_t(&da);
    let inv = 1.0 / ctx.ctx_tokens.len() as f64;
    for &tok in &ctx.ctx_tokens {
        let row = grads.token_embed.row_mut(tok);
        for (g, &d) in row.iter_mut().zip(&dm) {
            *g += inv * d;
        }
    }
}

/// Gradient of `log p(v | I, x, i)` with respect to the logits: e_v - p.
pub(crate) fn dlogits_log_prob(dist_probs: &[f64], v: TokenId, scale: f64) -> Vec<f64> {
    let mut d: Vec<f64> = dist_probs.iter().map(|&p| -scale * p).collect();
    d[v] += scale;
    d
}

/// Central finite-difference gradient of an arbitrary scalar loss,
/// step `h` per component. The closure must be a pure function of params.
pub fn finite_diff_gradient<F>(params: &ModelParams, h: f64, mut loss: F) -> Result<GradientVector>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    let mut grads = GradientVector::zeros_like(params);
    let n = params.num_params();
    let mut work = params.clone();
    for idx in 0..n {
        let orig = params.get_flat(idx);
        work.set_flat(idx, orig + h);
        let plus = loss(&work)?;
        work.set_flat(idx, orig - h);
        let minus = loss(&work)?;
        work.set_flat(idx, orig);
        let g = (plus - minus) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::NonFiniteLoss(format!("finite difference at component {idx}")));
        }
        set_flat_grad(&mut grads, idx, g);
    }
    Ok(grads)
}

fn set_flat_grad(grads: &mut GradientVector, mut idx: usize, value: f64) {
    for t in grads.tensors_mut() {
        if idx < t.len() {
            t.as_mut_slice()[idx] = value;
            return;
        }
        idx -= t.len();
    }
    panic!("flat index out of range");
}

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub components_checked: usize,
    pub components_skipped: usize,
    pub max_rel_err: f64,
    pub worst_component: usize,
    pub pass: bool,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_REL_TOL: f64 = 1e-4;
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-8;

/// Compare analytic vs finite-difference gradients.
///
/// A component passes when `|a - fd| <= floor + rtol * max(|a|, |fd|)`: the
/// `1e-8` floor is the small-gradient threshold below which central
/// differences in f64 carry no signal, and `1e-4` is the relative accuracy
/// demanded above it. Components where both values sit under the floor are
/// counted as skipped.
pub fn check_gradients(analytic: &GradientVector, fd: &GradientVector) -> GradCheckReport {
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    let mut pass = true;
    let n = analytic.num_components();
    for idx in 0..n {
        let a = analytic.get_flat(idx);
        let f = fd.get_flat(idx);
        let mag = a.abs().max(f.abs());
        if mag <= GRAD_CHECK_ABS_FLOOR {
            skipped += 1;
            continue;
        }
        checked += 1;
        let rel = (a - f).abs() / mag;
        if rel > max_rel {
            max_rel = rel;
            worst = idx;
        }
        if (a - f).abs() > GRAD_CHECK_ABS_FLOOR + GRAD_CHECK_REL_TOL * mag {
            pass = false;
        }
    }
    GradCheckReport { components_checked: checked, components_skipped: skipped, max_rel_err: max_rel, worst_component: worst, pass }
}
