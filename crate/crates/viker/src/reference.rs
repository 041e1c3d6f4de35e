//! Visual-guided token distribution estimation.
//!
//! For a forget triple `(I, x, y)` and a set of k irrelevant image features,
//! the ideal post-unlearning distribution at every answer position is the
//! arithmetic mean over the reference images of the full model's forward
//! distribution, teacher forced on the triple's own answer prefix. Only
//! forward passes are involved: nothing here creates or retains gradient
//! state, and the full model is never mutated.

use crate::error::{Error, Result};
use crate::model::{forward_token_dist, ImageFeature, ModelParams, TokenDistribution, Triple};

/// The reference image set fed to the full model in place of the forget image.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    pub images: Vec<ImageFeature>,
    pub category: RefCategory,
}

/// Where a reference set's images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RefCategory {
    People,
    Pets,
    Scene,
    Pattern,
    Forget,
    Retain,
}

impl RefCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefCategory::People => "people",
            RefCategory::Pets => "pets",
            RefCategory::Scene => "scene",
            RefCategory::Pattern => "pattern",
            RefCategory::Forget => "forget",
            RefCategory::Retain => "retain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "people" => RefCategory::People,
            "pets" => RefCategory::Pets,
            "scene" => RefCategory::Scene,
            "pattern" => RefCategory::Pattern,
            "forget" => RefCategory::Forget,
            "retain" => RefCategory::Retain,
            _ => return None,
        })
    }
}

impl ReferenceSet {
    pub fn new(images: Vec<ImageFeature>, category: RefCategory) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Validation("reference set must contain at least one image".into()));
        }
        let dim = images[0].dim();
        if images.iter().any(|i| i.dim() != dim) {
            return Err(Error::DimensionMismatch("reference images disagree on img_dim".into()));
        }
        Ok(ReferenceSet { images, category })
    }

    pub fn k(&self) -> usize {
        self.images.len()
    }
}

/// Per-position ideal distributions for one triple. Frozen at construction:
/// reference distributions are computed once from the full model before
/// unlearning starts and treated as constants afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistributions {
    pub per_position: Vec<TokenDistribution>,
    pub source_k: usize,
    pub frozen: bool,
}

impl ReferenceDistributions {
    pub fn positions(&self) -> usize {
        self.per_position.len()
    }

    pub fn validate(&self, answer_len: usize) -> Result<()> {
        if self.per_position.len() != answer_len {
            return Err(Error::DimensionMismatch(format!(
                "reference has {} positions, answer has {}",
                self.per_position.len(),
                answer_len
            )));
        }
        for d in &self.per_position {
            d.validate_simplex()?;
        }
        Ok(())
    }
}

/// Average the full model's per-position token distributions over the
/// reference images, teacher forcing the triple's own ground-truth answer.
pub fn estimate_reference(
    params_full: &ModelParams,
    refs: &ReferenceSet,
    triple: &Triple,
) -> Result<ReferenceDistributions> {
    triple.validate(&params_full.config)?;
    let k = refs.k();
    if refs.images[0].dim() != params_full.config.img_dim {
        return Err(Error::DimensionMismatch(format!(
            "reference img_dim {} vs model img_dim {}",
            refs.images[0].dim(),
            params_full.config.img_dim
        )));
    }
    let vocab = params_full.config.vocab_size;
    let mut per_position = Vec::with_capacity(triple.answer.len());
    for i in 0..triple.answer.len() {
        let prefix = &triple.answer[..i];
        let mut mean = vec![0.0f64; vocab];
        for image in &refs.images {
            let dist = forward_token_dist(params_full, image, &triple.question, prefix, i + 1)?;
            for (m, p) in mean.iter_mut().zip(&dist.probs) {
                *m += p;
            }
        }
        let inv = 1.0 / k as f64;
        for m in &mut mean {
            *m *= inv;
        }
        per_position.push(TokenDistribution::from_probs(mean)?);
    }
    Ok(ReferenceDistributions { per_position, source_k: k, frozen: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, FeatureCategory, ModelConfig};

    fn small_setup() -> (ModelParams, Triple) {
        let cfg = ModelConfig { vocab_size: 8, img_dim: 3, hidden_dim: 4, max_positions: 6 };
        let params = init_params(&cfg, 21);
        let triple = Triple {
            id: 1,
            persona: 0,
            image: ImageFeature::new(vec![0.5, -0.2, 0.1], FeatureCategory::Persona),
            question: vec![1, 2],
            answer: vec![3, 0, 7],
            key_mask: None,
        };
        (params, triple)
    }

    fn ref_img(v: Vec<f64>) -> ImageFeature {
        ImageFeature::new(v, FeatureCategory::People)
    }

    #[test]
    fn k_equals_one_reduces_to_plain_forward() {
        let (params, triple) = small_setup();
        let image = ref_img(vec![0.2, 0.9, -0.4]);
        let refs = ReferenceSet::new(vec![image.clone()], RefCategory::People).unwrap();
        let est = estimate_reference(&params, &refs, &triple).unwrap();
        for i in 0..triple.answer.len() {
            let direct =
                forward_token_dist(&params, &image, &triple.question, &triple.answer[..i], i + 1)
                    .unwrap();
            for v in 0..8 {
                assert!((est.per_position[i].probs[v] - direct.probs[v]).abs() < 1e-15);
            }
        }
        assert_eq!(est.source_k, 1);
        assert!(est.frozen);
    }

    #[test]
    fn two_images_average_componentwise() {
        let (params, triple) = small_setup();
        let a = ref_img(vec![0.2, 0.9, -0.4]);
        let b = ref_img(vec![-0.7, 0.3, 0.5]);
        let refs = ReferenceSet::new(vec![a.clone(), b.clone()], RefCategory::People).unwrap();
        let est = estimate_reference(&params, &refs, &triple).unwrap();
        for i in 0..triple.answer.len() {
            let pa = forward_token_dist(&params, &a, &triple.question, &triple.answer[..i], i + 1).unwrap();
            let pb = forward_token_dist(&params, &b, &triple.question, &triple.answer[..i], i + 1).unwrap();
            for v in 0..8 {
                let want = (pa.probs[v] + pb.probs[v]) / 2.0;
                assert!((est.per_position[i].probs[v] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_bruteforce_averaging_oracle() {
        let (params, triple) = small_setup();
        let images: Vec<ImageFeature> = (0..5)
            .map(|j| ref_img(vec![0.1 * j as f64, -0.3 + 0.2 * j as f64, 0.05 * j as f64 * j as f64]))
            .collect();
        let refs = ReferenceSet::new(images.clone(), RefCategory::People).unwrap();
        let est = estimate_reference(&params, &refs, &triple).unwrap();
        // brute force: k * |y| explicit forward calls, averaged
        for i in 0..triple.answer.len() {
            for v in 0..8 {
                let mut acc = 0.0;
                for img in &images {
                    let d = forward_token_dist(&params, img, &triple.question, &triple.answer[..i], i + 1)
                        .unwrap();
                    acc += d.probs[v];
                }
                let want = acc / 5.0;
                assert!((est.per_position[i].probs[v] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rows_are_simplices_and_permutation_invariant() {
        let (params, triple) = small_setup();
        let images: Vec<ImageFeature> = (0..4)
            .map(|j| ref_img(vec![(j as f64).sin(), (j as f64).cos(), 0.3 * j as f64]))
            .collect();
        let fwd = ReferenceSet::new(images.clone(), RefCategory::People).unwrap();
        let mut rev_images = images.clone();
        rev_images.reverse();
        let rev = ReferenceSet::new(rev_images, RefCategory::People).unwrap();
        let est_f = estimate_reference(&params, &fwd, &triple).unwrap();
        let est_r = estimate_reference(&params, &rev, &triple).unwrap();
        for i in 0..triple.answer.len() {
            let sum: f64 = est_f.per_position[i].probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for v in 0..8 {
                assert!((est_f.per_position[i].probs[v] - est_r.per_position[i].probs[v]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (params, triple) = small_setup();
        let refs = ReferenceSet::new(vec![ref_img(vec![0.1, 0.2])], RefCategory::People).unwrap();
        assert!(matches!(
            estimate_reference(&params, &refs, &triple),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn estimation_leaves_full_model_untouched() {
        let (params, triple) = small_setup();
        let before = params.clone();
        let refs =
            ReferenceSet::new(vec![ref_img(vec![0.3, 0.3, 0.3])], RefCategory::People).unwrap();
        let _ = estimate_reference(&params, &refs, &triple).unwrap();
        assert!(params.bitwise_eq(&before));
    }
}
