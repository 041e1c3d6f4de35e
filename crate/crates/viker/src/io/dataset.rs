//! Line-oriented dataset files: a manifest block, persona name records,
//! reference image pools, and one triple per line.

use std::collections::BTreeMap;
use std::path::Path;

use super::{fmt_f64_slice, parse_f64, parse_f64_slice, parse_token_ids, parse_u32, parse_u64, parse_usize, read_to_string, write_string};
use crate::data::{BenchmarkSpec, DatasetSplit, Persona, Split};
use crate::error::{Error, Result};
use crate::model::{FeatureCategory, ImageFeature, Triple};
use crate::reference::RefCategory;

const HEADER: &str = "viker-dataset v1";

pub fn write_dataset(ds: &DatasetSplit) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    for line in ds.spec.manifest_lines() {
        out.push_str("manifest ");
        out.push_str(&line);
        out.push('\n');
    }
    for p in &ds.personas {
        let name: Vec<String> = p.name.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!("persona|{}|{}\n", p.id, name.join(" ")));
    }
    for (category, pool) in &ds.reference_pools {
        for img in pool {
            out.push_str(&format!("refpool|{}|{}\n", category.as_str(), fmt_f64_slice(&img.values)));
        }
    }
    for (split, triples) in [
        (Split::Forget, &ds.forget),
        (Split::Retain, &ds.retain),
        (Split::Generalization, &ds.generalization),
    ] {
        for t in triples {
            let q: Vec<String> = t.question.iter().map(|x| x.to_string()).collect();
            let a: Vec<String> = t.answer.iter().map(|x| x.to_string()).collect();
            let mask = match &t.key_mask {
                Some(m) => m.iter().map(|&b| if b { "1" } else { "0" }).collect::<Vec<_>>().join(" "),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "triple|{}|{}|{}|{}|{}|{}|{}\n",
                t.id,
                split.as_str(),
                t.persona,
                fmt_f64_slice(&t.image.values),
                q.join(" "),
                a.join(" "),
                mask
            ));
        }
    }
    out
}

pub fn parse_dataset(text: &str, source: &str) -> Result<DatasetSplit> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(source, 1, "empty file"))?;
    if header.trim() != HEADER {
        return Err(Error::parse(source, 1, format!("expected header '{HEADER}'")));
    }
    let mut manifest: BTreeMap<String, String> = BTreeMap::new();
    let mut personas: Vec<Persona> = Vec::new();
    let mut pools: BTreeMap<RefCategory, Vec<ImageFeature>> = BTreeMap::new();
    let mut forget = Vec::new();
    let mut retain = Vec::new();
    let mut generalization = Vec::new();
    let mut spec: Option<BenchmarkSpec> = None;

    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("manifest ") {
            let (key, value) = rest
                .split_once(' ')
                .ok_or_else(|| Error::parse(source, lineno, "manifest line needs 'key value'"))?;
            if manifest.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::parse(source, lineno, format!("duplicate manifest key '{key}'")));
            }
            continue;
        }
        // everything after the manifest needs the spec resolved
        if spec.is_none() {
            spec = Some(spec_from_manifest(&manifest, source, lineno)?);
        }
        let spec_ref = spec.as_ref().unwrap();
        let fields: Vec<&str> = line.split('|').collect();
        match fields[0] {
            "persona" => {
                if fields.len() != 3 {
                    return Err(Error::parse(source, lineno, "persona line needs 3 fields"));
                }
                let id = parse_u32(fields[1], source, lineno)?;
                let name = parse_token_ids(fields[2], spec_ref.vocab_size, source, lineno)?;
                if name.is_empty() {
                    return Err(Error::parse(source, lineno, "persona name must be non-empty"));
                }
                personas.push(Persona {
                    id,
                    name,
                    attributes: [0, 0, 0],
                    canonical_feature: vec![],
                });
            }
            "refpool" => {
                if fields.len() != 3 {
                    return Err(Error::parse(source, lineno, "refpool line needs 3 fields"));
                }
                let category = RefCategory::parse(fields[1]).ok_or_else(|| {
                    Error::parse(source, lineno, format!("unknown pool category '{}'", fields[1]))
                })?;
                if matches!(category, RefCategory::Forget | RefCategory::Retain) {
                    return Err(Error::parse(
                        source,
                        lineno,
                        "forget/retain pools are derived from the splits, not stored",
                    ));
                }
                let values = parse_f64_slice(fields[2], spec_ref.img_dim, source, lineno)?;
                let feat_category = match category {
                    RefCategory::People => FeatureCategory::People,
                    RefCategory::Pets => FeatureCategory::Pets,
                    RefCategory::Scene => FeatureCategory::Scene,
                    RefCategory::Pattern => FeatureCategory::Pattern,
                    _ => unreachable!(),
                };
                pools.entry(category).or_default().push(ImageFeature::new(values, feat_category));
            }
            "triple" => {
                if fields.len() != 8 {
                    return Err(Error::parse(source, lineno, "triple line needs 8 fields"));
                }
                let id = parse_u32(fields[1], source, lineno)?;
                let split = Split::parse(fields[2])
                    .ok_or_else(|| Error::parse(source, lineno, format!("unknown split '{}'", fields[2])))?;
                let persona = parse_u32(fields[3], source, lineno)?;
                let values = parse_f64_slice(fields[4], spec_ref.img_dim, source, lineno)?;
                let question = parse_token_ids(fields[5], spec_ref.vocab_size, source, lineno)?;
                let answer = parse_token_ids(fields[6], spec_ref.vocab_size, source, lineno)?;
                if question.is_empty() || answer.is_empty() {
                    return Err(Error::parse(source, lineno, "question and answer must be non-empty"));
                }
                let key_mask = if fields[7] == "-" {
                    None
                } else {
                    let mut mask = Vec::new();
                    for bit in fields[7].split_whitespace() {
                        mask.push(match bit {
                            "0" => false,
                            "1" => true,
                            _ => return Err(Error::parse(source, lineno, "mask bits must be 0 or 1")),
                        });
                    }
                    if mask.len() != answer.len() {
                        return Err(Error::parse(source, lineno, "mask length must match answer length"));
                    }
                    Some(mask)
                };
                let triple = Triple {
                    id,
                    persona,
                    image: ImageFeature::new(values, FeatureCategory::Persona),
                    question,
                    answer,
                    key_mask,
                };
                match split {
                    Split::Forget => forget.push(triple),
                    Split::Retain => retain.push(triple),
                    Split::Generalization => generalization.push(triple),
                }
            }
            other => return Err(Error::parse(source, lineno, format!("unknown record type '{other}'"))),
        }
    }

    let spec = match spec {
        Some(s) => s,
        None => spec_from_manifest(&manifest, source, 1)?,
    };
    let mut full: Vec<Triple> = forget.iter().chain(&retain).cloned().collect();
    full.sort_by_key(|t| t.id);
    let ds = DatasetSplit {
        spec,
        personas,
        full,
        forget,
        retain,
        generalization,
        reference_pools: pools,
    };
    ds.validate()?;
    Ok(ds)
}

fn spec_from_manifest(
    manifest: &BTreeMap<String, String>,
    source: &str,
    lineno: usize,
) -> Result<BenchmarkSpec> {
    let get = |key: &str| -> Result<&str> {
        manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::parse(source, lineno, format!("missing manifest key '{key}'")))
    };
    let spec = BenchmarkSpec {
        n_personas: parse_usize(get("n_personas")?, source, lineno)?,
        images_per_persona: parse_usize(get("images_per_persona")?, source, lineno)?,
        forget_fraction: parse_f64(get("forget_fraction")?, source, lineno)?,
        feature_noise_sigma: parse_f64(get("feature_noise_sigma")?, source, lineno)?,
        vocab_size: parse_usize(get("vocab_size")?, source, lineno)?,
        img_dim: parse_usize(get("img_dim")?, source, lineno)?,
        seed: parse_u64(get("seed")?, source, lineno)?,
    };
    if spec.vocab_size == 0 || spec.vocab_size > super::MAX_VOCAB {
        return Err(Error::parse(source, lineno, "vocab_size out of supported range"));
    }
    if spec.img_dim == 0 || spec.img_dim > super::MAX_DIM {
        return Err(Error::parse(source, lineno, "img_dim out of supported range"));
    }
    spec.validate()?;
    Ok(spec)
}

pub fn save_dataset(path: &Path, ds: &DatasetSplit) -> Result<()> {
    write_string(path, &write_dataset(ds))
}

pub fn load_dataset(path: &Path) -> Result<DatasetSplit> {
    let text = read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_benchmark;

    fn sample() -> DatasetSplit {
        generate_benchmark(&BenchmarkSpec { n_personas: 12, seed: 6, ..Default::default() }).unwrap()
    }

    #[test]
    fn dataset_round_trips_through_text() {
        let ds = sample();
        let text = write_dataset(&ds);
        let back = parse_dataset(&text, "test").unwrap();
        // personas lose attributes/features on disk; compare what is stored
        assert_eq!(back.spec, ds.spec);
        assert_eq!(back.forget, ds.forget);
        assert_eq!(back.retain, ds.retain);
        assert_eq!(back.generalization, ds.generalization);
        assert_eq!(back.full, ds.full);
        assert_eq!(back.reference_pools, ds.reference_pools);
        assert_eq!(back.personas.len(), ds.personas.len());
        for (a, b) in back.personas.iter().zip(&ds.personas) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.name, b.name);
        }
        // writing again is byte-identical
        assert_eq!(write_dataset(&back), text);
    }

    #[test]
    fn empty_file_is_an_error_not_an_empty_split() {
        assert!(parse_dataset("", "t").is_err());
        assert!(parse_dataset(HEADER, "t").is_err());
    }

    #[test]
    fn forget_persona_in_retain_is_a_validation_error() {
        let ds = sample();
        let text = write_dataset(&ds);
        let forget_persona = ds.forget[0].persona;
        // retag one retain triple with a forget persona
        let patched: Vec<String> = text
            .lines()
            .map(|l| {
                if l.starts_with("triple|") && l.contains("|retain|") {
                    let mut fields: Vec<&str> = l.split('|').collect();
                    let owned = forget_persona.to_string();
                    fields[3] = &owned;
                    return fields.join("|");
                }
                l.to_string()
            })
            .collect();
        let err = parse_dataset(&patched.join("\n"), "t");
        assert!(matches!(err, Err(Error::Validation(_))), "{err:?}");
    }

    #[test]
    fn malformed_lines_are_parse_errors() {
        let ds = sample();
        let text = write_dataset(&ds);
        let bad = text.replace("triple|0|", "triple|zzz|");
        assert!(parse_dataset(&bad, "t").is_err());
        let unknown = format!("{text}unknown|1|2\n");
        assert!(parse_dataset(&unknown, "t").is_err());
    }
}
