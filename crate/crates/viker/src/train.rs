//! Optimization: full fine-tuning on the benchmark, template-only
//! pretraining for the origin model, and unlearning runs.
//!
//! Determinism contract: the parameter trajectory is a pure function of
//! (initial params, dataset, config). Batch selection at step `t` uses a
//! generator seeded by `(seed, t)`, never a shared stream, so a run resumed
//! from a checkpoint continues exactly where an unbroken run would be.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{resample_attribute, VocabLayout};
use crate::error::{Error, Result};
use crate::grad::GradientVector;
use crate::losses::{IdkPool, LossSpec, Method, UnlearnConfig};
use crate::model::{forward_token_dist, ModelParams, Triple};
use crate::reference::ReferenceDistributions;

/// Adam accumulator state. Weight decay is fixed at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: GradientVector,
    pub second_moment: GradientVector,
    pub step: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64) -> Self {
        OptimizerState {
            first_moment: GradientVector::zeros_like(params),
            second_moment: GradientVector::zeros_like(params),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One adaptive-moment update with bias correction.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &GradientVector) {
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        let g = grads.tensors();
        let m = self.first_moment.tensors_mut();
        let v = self.second_moment.tensors_mut();
        let p = params.tensors_mut();
        for (((pt, gt), mt), vt) in p.into_iter().zip(g).zip(m).zip(v) {
            let ps = pt.as_mut_slice();
            let gs = gt.as_slice();
            let ms = mt.as_mut_slice();
            let vs = vt.as_mut_slice();
            for i in 0..ps.len() {
                ms[i] = b1 * ms[i] + (1.0 - b1) * gs[i];
                vs[i] = b2 * vs[i] + (1.0 - b2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Settings for the two training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Step cap.
    pub steps: usize,
    pub learning_rate: f64,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once every training answer reaches this mean per-token
    /// probability (template positions only, for the origin stage).
    pub convergence_prob: f64,
    /// How often (in steps) to run the convergence check.
    pub check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 4000,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
            convergence_prob: 0.9,
            check_every: 25,
        }
    }
}

/// Everything one optimization run leaves behind. Wall-clock time is kept
/// out of serialized run files so identical runs stay byte-identical; the
/// CLI writes it to a separate timing file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub command: String,
    pub config_lines: Vec<String>,
    pub loss_trace: Vec<f64>,
    pub steps_run: usize,
    pub converged: bool,
    pub seed: u64,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn config_hash(&self) -> u64 {
        crate::util::fnv1a(self.config_lines.join("\n").as_bytes())
    }
}

fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    if batch_size == 0 || batch_size >= n {
        return (0..n).collect();
    }
    let mix = seed ^ (step as u64).wrapping_mul(0x9e3779b97f4a7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(batch_size);
    idx
}

/// Mean per-token probability of one answer under teacher forcing,
/// optionally restricted to non-key positions.
fn answer_mean_token_prob(
    params: &ModelParams,
    triple: &Triple,
    template_only: bool,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &tok) in triple.answer.iter().enumerate() {
        if template_only {
            if let Some(mask) = &triple.key_mask {
                if mask[i] {
                    continue;
                }
            }
        }
        let d = forward_token_dist(params, &triple.image, &triple.question, &triple.answer[..i], i + 1)?;
        sum += d.probs[tok];
        count += 1;
    }
    Ok(sum / count as f64)
}

/// Minimum over answers of the mean per-token probability.
pub fn min_answer_token_prob(params: &ModelParams, data: &[Triple]) -> Result<f64> {
    let mut min = f64::INFINITY;
    for t in data {
        min = min.min(answer_mean_token_prob(params, t, false)?);
    }
    Ok(min)
}

fn min_template_token_prob(params: &ModelParams, data: &[Triple]) -> Result<f64> {
    let mut min = f64::INFINITY;
    for t in data {
        min = min.min(answer_mean_token_prob(params, t, true)?);
    }
    Ok(min)
}

fn divergence_abort(step: usize, loss: f64, trace: &[f64]) -> Error {
    let tail: Vec<String> = trace.iter().rev().take(5).rev().map(|l| format!("{l:.6}")).collect();
    Error::NonFiniteLoss(format!(
        "loss {loss} at step {step}; last finite losses [{}]",
        tail.join(", ")
    ))
}

/// Minimize the NLL over seeded-shuffled batches until every training answer
/// reaches the convergence probability or the step cap is hit.
pub fn train_full(
    params_init: &ModelParams,
    data: &[Triple],
    config: &TrainConfig,
    resume: Option<OptimizerState>,
) -> Result<(ModelParams, OptimizerState, RunRecord)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = params_init.clone();
    let mut opt = resume.unwrap_or_else(|| OptimizerState::new(&params, config.learning_rate));
    let mut trace = Vec::new();
    let mut converged = min_answer_token_prob(&params, data)? >= config.convergence_prob;
    while !converged && opt.step < config.steps {
        let idx = batch_indices(data.len(), config.batch_size, config.seed, opt.step);
        let batch: Vec<Triple> = idx.iter().map(|&i| data[i].clone()).collect();
        let spec = LossSpec::Nll { data: &batch };
        let loss = spec.value(&params)?;
        if !loss.is_finite() {
            return Err(divergence_abort(opt.step, loss, &trace));
        }
        let grads = spec.gradient(&params)?;
        opt.apply(&mut params, &grads);
        trace.push(loss);
        if opt.step.is_multiple_of(config.check_every) || opt.step >= config.steps {
            converged = min_answer_token_prob(&params, data)? >= config.convergence_prob;
        }
    }
    let steps_run = trace.len();
    let record = RunRecord {
        command: "train".into(),
        config_lines: train_config_lines(config),
        loss_trace: trace,
        steps_run,
        converged,
        seed: config.seed,
        wall_clock_seconds: 0.0,
    };
    Ok((params, opt, record))
}

/// Template-only pretraining: every batch resamples the attribute tokens
/// uniformly within their slots, so the model learns the answer templates
/// but stays at chance on persona attributes. Convergence is measured on
/// template positions only.
pub fn train_origin(
    params_init: &ModelParams,
    data: &[Triple],
    layout: &VocabLayout,
    config: &TrainConfig,
) -> Result<(ModelParams, OptimizerState, RunRecord)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = params_init.clone();
    let mut opt = OptimizerState::new(&params, config.learning_rate);
    let mut trace = Vec::new();
    let mut converged = false;
    while !converged && opt.step < config.steps {
        let idx = batch_indices(data.len(), config.batch_size, config.seed, opt.step);
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed ^ 0x6f726967 ^ (opt.step as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let batch: Vec<Triple> =
            idx.iter().map(|&i| resample_attribute(&data[i], layout, &mut rng)).collect();
        let spec = LossSpec::Nll { data: &batch };
        let loss = spec.value(&params)?;
        if !loss.is_finite() {
            return Err(divergence_abort(opt.step, loss, &trace));
        }
        let grads = spec.gradient(&params)?;
        opt.apply(&mut params, &grads);
        trace.push(loss);
        if opt.step.is_multiple_of(config.check_every) || opt.step >= config.steps {
            converged = min_template_token_prob(&params, data)? >= config.convergence_prob;
        }
    }
    let steps_run = trace.len();
    let record = RunRecord {
        command: "train-origin".into(),
        config_lines: train_config_lines(config),
        loss_trace: trace,
        steps_run,
        converged,
        seed: config.seed,
        wall_clock_seconds: 0.0,
    };
    Ok((params, opt, record))
}

fn train_config_lines(config: &TrainConfig) -> Vec<String> {
    vec![
        format!("steps {}", config.steps),
        format!("learning_rate {}", config.learning_rate),
        format!("batch_size {}", config.batch_size),
        format!("seed {}", config.seed),
        format!("convergence_prob {}", config.convergence_prob),
    ]
}

/// Run the configured number of unlearning steps on the forget set only.
/// ViKeR requires precomputed frozen references; NPO and IdkPO score against
/// an internal frozen copy of the full model. The full model passed in is
/// never mutated.
pub fn unlearn(
    params_full: &ModelParams,
    forget_set: &[Triple],
    config: &UnlearnConfig,
    references: Option<&BTreeMap<u32, ReferenceDistributions>>,
    idk_pool: Option<&IdkPool>,
) -> Result<(ModelParams, RunRecord)> {
    if forget_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate()?;
    if config.method == Method::Viker && config.lambda > 0.0 && references.is_none() {
        return Err(Error::Validation(
            "method viker requires precomputed reference distributions".into(),
        ));
    }
    let empty_refs = BTreeMap::new();
    let refs = references.unwrap_or(&empty_refs);
    let idk_answers = match config.method {
        Method::IdkPo => {
            let pool = idk_pool.ok_or_else(|| {
                Error::Validation("method idkpo requires a refusal answer pool".into())
            })?;
            pool.assign(forget_set.len(), config.seed)
        }
        _ => Vec::new(),
    };
    let frozen_full = params_full.clone();
    let mut params = params_full.clone();
    let mut opt = OptimizerState::new(&params, config.learning_rate);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let idx = batch_indices(forget_set.len(), config.batch_size, config.seed, step);
        let batch: Vec<Triple> = idx.iter().map(|&i| forget_set[i].clone()).collect();
        let batch_idk: Vec<Vec<usize>> = idx.iter().map(|&i| idk_answers.get(i).cloned().unwrap_or_default()).collect();
        let spec = match config.method {
            Method::Ga => LossSpec::Ga { forget: &batch },
            Method::Viker => LossSpec::Viker {
                forget: &batch,
                references: refs,
                lambda: config.lambda,
                regularizer: config.regularizer,
            },
            Method::Npo => LossSpec::Npo { forget: &batch, full: &frozen_full, beta: config.beta },
            Method::IdkPo => LossSpec::IdkPo {
                forget: &batch,
                full: &frozen_full,
                idk_answers: &batch_idk,
                beta: config.beta,
            },
        };
        let loss = spec.value(&params)?;
        if !loss.is_finite() {
            return Err(divergence_abort(step, loss, &trace));
        }
        let grads = spec.gradient(&params)?;
        opt.apply(&mut params, &grads);
        trace.push(loss);
    }
    let steps_run = trace.len();
    let record = RunRecord {
        command: "unlearn".into(),
        config_lines: unlearn_config_lines(config),
        loss_trace: trace,
        steps_run,
        converged: false,
        seed: config.seed,
        wall_clock_seconds: 0.0,
    };
    Ok((params, record))
}

pub fn unlearn_config_lines(config: &UnlearnConfig) -> Vec<String> {
    vec![
        format!("method {}", config.method.as_str()),
        format!("lambda {}", config.lambda),
        format!("k {}", config.k),
        format!("beta {}", config.beta),
        format!("regularizer {}", config.regularizer.as_str()),
        format!("steps {}", config.steps),
        format!("learning_rate {}", config.learning_rate),
        format!("batch_size {}", config.batch_size),
        format!("seed {}", config.seed),
        // production-scale reference values these desk-scale defaults replace
        "reference_learning_rate 5e-6".to_string(),
        "reference_batch_size 2".to_string(),
    ]
}
