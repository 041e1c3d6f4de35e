//! Deterministic synthetic persona QA benchmark.
//!
//! Personas carry three attribute slots (birth city, occupation, hobby).
//! Each persona has several image features clustered around a unit-norm
//! canonical vector, and one QA template per slot. Answers share their
//! template words across personas and differ only at the attribute slot,
//! which the key mask marks; that makes ground-truth key tokens unambiguous.
//!
//! Vocabulary layout (disjoint id ranges, end token last):
//!
//! ```text
//! [q head][q slot x3][answer prefix x9][names x8][refusal x8][values 3x8][spare][end]
//! ```

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::IdkPool;
use crate::model::{FeatureCategory, ImageFeature, TokenId, Triple};
use crate::reference::RefCategory;

pub const SLOTS: usize = 3;
pub const SLOT_NAMES: [&str; SLOTS] = ["birth_city", "occupation", "hobby"];
const NAME_TOKENS: usize = 8;
const REFUSAL_TOKENS: usize = 8;
const VALUES_PER_SLOT: usize = 8;
const REFERENCE_PERSONAS: usize = 8;
const POOL_SIZE: usize = 8;

/// Where every token range lives for a given vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabLayout {
    pub vocab_size: usize,
    pub q_head: TokenId,
    pub q_slot: [TokenId; SLOTS],
    pub answer_prefix: [[TokenId; 3]; SLOTS],
    pub name_base: TokenId,
    pub name_count: usize,
    pub refusal_base: TokenId,
    pub refusal_count: usize,
    pub value_base: [TokenId; SLOTS],
    pub values_per_slot: usize,
    pub end_token: TokenId,
}

impl VocabLayout {
    pub fn for_vocab(vocab_size: usize) -> Result<Self> {
        let needed = 1 + SLOTS + 3 * SLOTS + NAME_TOKENS + REFUSAL_TOKENS + SLOTS * VALUES_PER_SLOT + 1;
        if vocab_size < needed {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} too small for benchmark layout (need >= {needed})"
            )));
        }
        let mut next = 0usize;
        let mut take = |n: usize| {
            let base = next;
            next += n;
            base
        };
        let q_head = take(1);
        let q_slot = [take(1), take(1), take(1)];
        let mut answer_prefix = [[0; 3]; SLOTS];
        for row in answer_prefix.iter_mut() {
            for cell in row.iter_mut() {
                *cell = take(1);
            }
        }
        let name_base = take(NAME_TOKENS);
        let refusal_base = take(REFUSAL_TOKENS);
        let value_base = [take(VALUES_PER_SLOT), take(VALUES_PER_SLOT), take(VALUES_PER_SLOT)];
        Ok(VocabLayout {
            vocab_size,
            q_head,
            q_slot,
            answer_prefix,
            name_base,
            name_count: NAME_TOKENS,
            refusal_base,
            refusal_count: REFUSAL_TOKENS,
            value_base,
            values_per_slot: VALUES_PER_SLOT,
            end_token: vocab_size - 1,
        })
    }

    pub fn question(&self, slot: usize) -> Vec<TokenId> {
        vec![self.q_head, self.q_slot[slot]]
    }

    pub fn answer(&self, slot: usize, value: TokenId) -> Vec<TokenId> {
        let p = &self.answer_prefix[slot];
        vec![p[0], p[1], p[2], value, self.end_token]
    }

    /// Index of the attribute slot within an answer built by [`Self::answer`].
    pub fn key_position(&self) -> usize {
        3
    }

    pub fn key_mask(&self) -> Vec<bool> {
        vec![false, false, false, true, false]
    }

    pub fn slot_values(&self, slot: usize) -> Vec<TokenId> {
        (0..self.values_per_slot).map(|i| self.value_base[slot] + i).collect()
    }

    /// Which slot a value token belongs to, if any.
    pub fn slot_of_value(&self, token: TokenId) -> Option<usize> {
        (0..SLOTS).find(|&s| {
            token >= self.value_base[s] && token < self.value_base[s] + self.values_per_slot
        })
    }

    pub fn slot_of_question(&self, question: &[TokenId]) -> Option<usize> {
        let second = *question.get(1)?;
        (0..SLOTS).find(|&s| self.q_slot[s] == second)
    }
}

/// One fictional character of the benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct Persona {
    pub id: u32,
    pub name: Vec<TokenId>,
    /// slot -> attribute value token
    pub attributes: [TokenId; SLOTS],
    /// unit L2 norm
    pub canonical_feature: Vec<f64>,
}

/// Everything needed to regenerate a benchmark deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub n_personas: usize,
    pub images_per_persona: usize,
    /// 0.10 mirrors the easier task split, 0.15 the harder one.
    pub forget_fraction: f64,
    pub feature_noise_sigma: f64,
    pub vocab_size: usize,
    pub img_dim: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            n_personas: 48,
            images_per_persona: 3,
            forget_fraction: 0.10,
            feature_noise_sigma: 0.05,
            vocab_size: 64,
            img_dim: 8,
            seed: 1,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.forget_fraction > 0.0 && self.forget_fraction < 1.0) {
            return Err(Error::Config(format!(
                "forget_fraction must lie strictly between 0 and 1, got {}",
                self.forget_fraction
            )));
        }
        if self.images_per_persona < 2 {
            return Err(Error::Config(
                "images_per_persona must be >= 2 (one is held out for generalization)".into(),
            ));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return Err(Error::Config("feature_noise_sigma must be finite and >= 0".into()));
        }
        if self.img_dim < 1 {
            return Err(Error::Config("img_dim must be >= 1".into()));
        }
        let nf = self.forget_count();
        if self.n_personas < nf + REFERENCE_PERSONAS + 1 {
            return Err(Error::Config(format!(
                "n_personas {} leaves no retain personas after {} forget and {} reference",
                self.n_personas, nf, REFERENCE_PERSONAS
            )));
        }
        Ok(())
    }

    pub fn forget_count(&self) -> usize {
        (self.forget_fraction * self.n_personas as f64).ceil() as usize
    }

    pub fn manifest_lines(&self) -> Vec<String> {
        vec![
            format!("n_personas {}", self.n_personas),
            format!("images_per_persona {}", self.images_per_persona),
            format!("forget_fraction {}", self.forget_fraction),
            format!("feature_noise_sigma {}", self.feature_noise_sigma),
            format!("vocab_size {}", self.vocab_size),
            format!("img_dim {}", self.img_dim),
            format!("seed {}", self.seed),
        ]
    }
}

/// Which split a triple belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Forget,
    Retain,
    Generalization,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Generalization => "generalization",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "forget" => Split::Forget,
            "retain" => Split::Retain,
            "generalization" => Split::Generalization,
            _ => return None,
        })
    }
}

/// The generated benchmark: the training set (`full` = forget + retain), the
/// held-out generalization triples, persona names, and reference image pools.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub spec: BenchmarkSpec,
    pub personas: Vec<Persona>,
    pub full: Vec<Triple>,
    pub forget: Vec<Triple>,
    pub retain: Vec<Triple>,
    pub generalization: Vec<Triple>,
    pub reference_pools: BTreeMap<RefCategory, Vec<ImageFeature>>,
}

impl DatasetSplit {
    pub fn layout(&self) -> Result<VocabLayout> {
        VocabLayout::for_vocab(self.spec.vocab_size)
    }

    pub fn persona_name(&self, persona: u32) -> Option<&[TokenId]> {
        self.personas.iter().find(|p| p.id == persona).map(|p| p.name.as_slice())
    }

    pub fn triple(&self, id: u32) -> Option<&Triple> {
        self.all_triples().find(|t| t.id == id)
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.forget.iter().chain(self.retain.iter()).chain(self.generalization.iter())
    }

    pub fn split_triples(&self, split: Split) -> &[Triple] {
        match split {
            Split::Forget => &self.forget,
            Split::Retain => &self.retain,
            Split::Generalization => &self.generalization,
        }
    }

    /// Reference image pool for a category. `people`, `pets`, `scene` and
    /// `pattern` are stored with the dataset; `forget` and `retain` are the
    /// first distinct image features of the corresponding split.
    pub fn reference_pool(&self, category: RefCategory) -> Result<Vec<ImageFeature>> {
        match category {
            RefCategory::Forget => Ok(distinct_features(&self.forget, POOL_SIZE)),
            RefCategory::Retain => Ok(distinct_features(&self.retain, POOL_SIZE)),
            other => self
                .reference_pools
                .get(&other)
                .cloned()
                .ok_or_else(|| Error::MissingReferencePool(other.as_str().to_string())),
        }
    }

    /// Structural invariants; also run when loading from disk.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let layout = self.layout()?;
        let mut seen = std::collections::BTreeSet::new();
        for t in self.all_triples() {
            if !seen.insert(t.id) {
                return Err(Error::Validation(format!("duplicate triple id {}", t.id)));
            }
        }
        if self.full.is_empty() || self.forget.is_empty() || self.retain.is_empty() {
            return Err(Error::Validation("forget, retain and full must be non-empty".into()));
        }
        // full is exactly forget + retain, matched by id
        let full_ids: std::collections::BTreeSet<u32> = self.full.iter().map(|t| t.id).collect();
        let fr_ids: std::collections::BTreeSet<u32> =
            self.forget.iter().chain(&self.retain).map(|t| t.id).collect();
        if full_ids != fr_ids {
            return Err(Error::Validation("full split must equal forget + retain".into()));
        }
        // forget personas and retain personas are disjoint
        let forget_personas: std::collections::BTreeSet<u32> =
            self.forget.iter().map(|t| t.persona).collect();
        for t in &self.retain {
            if forget_personas.contains(&t.persona) {
                return Err(Error::Validation(format!(
                    "persona {} appears in both forget and retain",
                    t.persona
                )));
            }
        }
        // generalization covers exactly the forget personas, on unseen features
        let gen_personas: std::collections::BTreeSet<u32> =
            self.generalization.iter().map(|t| t.persona).collect();
        if gen_personas != forget_personas {
            return Err(Error::Validation(
                "generalization split must cover exactly the forget personas".into(),
            ));
        }
        for g in &self.generalization {
            for f in &self.forget {
                if f.persona == g.persona && f.image.values == g.image.values {
                    return Err(Error::Validation(format!(
                        "generalization triple {} reuses a forget image",
                        g.id
                    )));
                }
            }
        }
        for t in self.all_triples() {
            if t.question.len() < 2 || t.answer.len() != 5 {
                return Err(Error::Validation(format!("triple {} has unexpected shape", t.id)));
            }
            let mask = t
                .key_mask
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("triple {} lacks a key mask", t.id)))?;
            if mask.iter().filter(|&&b| b).count() != 1 {
                return Err(Error::Validation(format!(
                    "triple {} must mark exactly one key position",
                    t.id
                )));
            }
            if !mask[layout.key_position()] {
                return Err(Error::Validation(format!(
                    "triple {} key mask disagrees with the template layout",
                    t.id
                )));
            }
        }
        for p in &self.personas {
            // loaded datasets persist names only; the feature is empty there
            if !p.canonical_feature.is_empty() {
                let norm: f64 = p.canonical_feature.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::Validation(format!(
                        "persona {} canonical feature is not unit norm",
                        p.id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn distinct_features(triples: &[Triple], limit: usize) -> Vec<ImageFeature> {
    let mut out: Vec<ImageFeature> = Vec::new();
    for t in triples {
        if out.iter().all(|f| f.values != t.image.values) {
            out.push(t.image.clone());
            if out.len() == limit {
                break;
            }
        }
    }
    out
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Generate the benchmark. Identical specs produce identical datasets.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let layout = VocabLayout::for_vocab(spec.vocab_size)?;
    let n = spec.n_personas;
    if n > layout.name_count * layout.name_count {
        return Err(Error::Config(format!(
            "vocabulary too small: {} name tokens support at most {} personas, requested {}",
            layout.name_count,
            layout.name_count * layout.name_count,
            n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // unique two-token names
    let mut name_pairs: Vec<(usize, usize)> = (0..layout.name_count)
        .flat_map(|a| (0..layout.name_count).map(move |b| (a, b)))
        .collect();
    name_pairs.shuffle(&mut rng);

    let personas: Vec<Persona> = (0..n)
        .map(|i| {
            let (a, b) = name_pairs[i];
            let attributes = [
                layout.value_base[0] + rng.gen_range(0..layout.values_per_slot),
                layout.value_base[1] + rng.gen_range(0..layout.values_per_slot),
                layout.value_base[2] + rng.gen_range(0..layout.values_per_slot),
            ];
            Persona {
                id: i as u32,
                name: vec![layout.name_base + a, layout.name_base + b],
                attributes,
                canonical_feature: unit_vector(spec.img_dim, &mut rng),
            }
        })
        .collect();

    // roles by shuffled order: forget first, reference people last
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let nf = spec.forget_count();
    let forget_personas: Vec<usize> = order[..nf].to_vec();
    let reference_personas: Vec<usize> = order[n - REFERENCE_PERSONAS..].to_vec();
    let qa_personas: Vec<usize> = order[..n - REFERENCE_PERSONAS].to_vec();

    let mut forget = Vec::new();
    let mut retain = Vec::new();
    let mut generalization = Vec::new();
    let mut next_id: u32 = 0;
    for &pi in &qa_personas {
        let persona = &personas[pi];
        let is_forget = forget_personas.contains(&pi);
        for j in 0..spec.images_per_persona {
            let noisy: Vec<f64> = persona
                .canonical_feature
                .iter()
                .map(|&c| c + spec.feature_noise_sigma * gauss(&mut rng))
                .collect();
            let feature = ImageFeature::new(normalize(noisy), FeatureCategory::Persona);
            for slot in 0..SLOTS {
                let triple = Triple {
                    id: next_id,
                    persona: persona.id,
                    image: feature.clone(),
                    question: layout.question(slot),
                    answer: layout.answer(slot, persona.attributes[slot]),
                    key_mask: Some(layout.key_mask()),
                };
                next_id += 1;
                if is_forget && j + 1 == spec.images_per_persona {
                    generalization.push(triple);
                } else if is_forget {
                    forget.push(triple);
                } else {
                    retain.push(triple);
                }
            }
        }
    }
    let mut full: Vec<Triple> = forget.iter().chain(&retain).cloned().collect();
    full.sort_by_key(|t| t.id);

    // reference pools
    let mut reference_pools = BTreeMap::new();
    reference_pools.insert(
        RefCategory::People,
        reference_personas
            .iter()
            .map(|&pi| ImageFeature::new(personas[pi].canonical_feature.clone(), FeatureCategory::People))
            .collect::<Vec<_>>(),
    );
    let pets_base = unit_vector(spec.img_dim, &mut rng);
    reference_pools.insert(
        RefCategory::Pets,
        (0..POOL_SIZE)
            .map(|_| {
                let v: Vec<f64> =
                    pets_base.iter().map(|&c| c + 0.02 * gauss(&mut rng)).collect();
                ImageFeature::new(normalize(v), FeatureCategory::Pets)
            })
            .collect::<Vec<_>>(),
    );
    reference_pools.insert(
        RefCategory::Scene,
        (0..POOL_SIZE)
            .map(|_| {
                ImageFeature::new(
                    (0..spec.img_dim).map(|_| 1.5 * gauss(&mut rng)).collect(),
                    FeatureCategory::Scene,
                )
            })
            .collect::<Vec<_>>(),
    );
    reference_pools.insert(
        RefCategory::Pattern,
        (0..POOL_SIZE)
            .map(|j| {
                let mut v = vec![0.0; spec.img_dim];
                v[j % spec.img_dim] = 1.0;
                ImageFeature::new(v, FeatureCategory::Pattern)
            })
            .collect::<Vec<_>>(),
    );

    let personas_with_qa: Vec<Persona> =
        qa_personas.iter().map(|&pi| personas[pi].clone()).collect();

    let split = DatasetSplit {
        spec: spec.clone(),
        personas: personas_with_qa,
        full,
        forget,
        retain,
        generalization,
        reference_pools,
    };
    split.validate()?;
    Ok(split)
}

/// Fixed refusal-answer pool over the reserved refusal tokens.
pub fn desk_idk_pool(layout: &VocabLayout) -> IdkPool {
    let r = layout.refusal_base;
    let e = layout.end_token;
    IdkPool::new(
        vec![
            vec![r, r + 1, e],
            vec![r + 2, r + 3, e],
            vec![r + 4, e],
            vec![r + 5, r + 6, r + 7, e],
            vec![r, r + 3, r + 5, e],
            vec![r + 1, r + 4, e],
            vec![r + 2, r + 7, e],
            vec![r + 6, r, r + 1, r + 2, e],
        ],
        e,
        layout.vocab_size,
    )
    .expect("desk refusal pool is valid by construction")
}

/// Clone a triple with its attribute token resampled uniformly within the
/// slot's value range. Used to build the template-only pretraining stream
/// for the origin model.
pub fn resample_attribute(triple: &Triple, layout: &VocabLayout, rng: &mut ChaCha8Rng) -> Triple {
    let mut out = triple.clone();
    let key = layout.key_position();
    if let Some(slot) = layout.slot_of_value(triple.answer[key]) {
        out.answer[key] = layout.value_base[slot] + rng.gen_range(0..layout.values_per_slot);
    }
    out
}

/// One likelihood-scored multiple-choice question.
#[derive(Debug, Clone, PartialEq)]
pub struct McItem {
    pub triple_id: u32,
    pub image: ImageFeature,
    pub question: Vec<TokenId>,
    pub candidates: Vec<Vec<TokenId>>,
    pub true_index: usize,
}

/// Build one multiple-choice item per triple: the true answer plus
/// `n_distractors` answers with the attribute token swapped for other values
/// of the same slot. Candidate order is a seeded shuffle keyed by triple id,
/// so evaluation is deterministic without any shared state.
pub fn build_mc_items(
    triples: &[Triple],
    layout: &VocabLayout,
    n_distractors: usize,
) -> Result<Vec<McItem>> {
    if n_distractors < 1 {
        return Err(Error::Config("at least one distractor is required".into()));
    }
    if n_distractors >= layout.values_per_slot {
        return Err(Error::Config(format!(
            "cannot draw {} distinct distractors from {} slot values",
            n_distractors,
            layout.values_per_slot - 1
        )));
    }
    let key = layout.key_position();
    let mut items = Vec::with_capacity(triples.len());
    for t in triples {
        let true_value = t.answer[key];
        let slot = layout
            .slot_of_value(true_value)
            .ok_or_else(|| Error::Validation(format!("triple {} has no attribute token", t.id)))?;
        let mut others: Vec<TokenId> =
            layout.slot_values(slot).into_iter().filter(|&v| v != true_value).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0x4d43_u64 ^ (t.id as u64).wrapping_mul(0x9e3779b97f4a7c15));
        others.shuffle(&mut rng);
        let mut candidates = vec![t.answer.clone()];
        for &v in others.iter().take(n_distractors) {
            let mut alt = t.answer.clone();
            alt[key] = v;
            candidates.push(alt);
        }
        // seeded order; index 0 is not special
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.shuffle(&mut rng);
        let shuffled: Vec<Vec<TokenId>> = idx.iter().map(|&i| candidates[i].clone()).collect();
        let true_index = idx.iter().position(|&i| i == 0).unwrap();
        items.push(McItem {
            triple_id: t.id,
            image: t.image.clone(),
            question: t.question.clone(),
            candidates: shuffled,
            true_index,
        });
    }
    Ok(items)
}
