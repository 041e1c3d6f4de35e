//! Reference-distribution cache files, keyed by (triple id, reference
//! category, k). One decimal probability row per answer position; the
//! loader re-validates every simplex invariant.

use std::path::{Path, PathBuf};

use super::{fmt_f64_slice, parse_f64_slice, parse_u32, parse_usize, read_to_string, write_string, MAX_POSITIONS, MAX_VOCAB};
use crate::error::{Error, Result};
use crate::model::TokenDistribution;
use crate::reference::{RefCategory, ReferenceDistributions};

const HEADER: &str = "viker-refdist v1";

pub fn write_reference(
    refs: &ReferenceDistributions,
    triple_id: u32,
    category: RefCategory,
) -> String {
    let vocab = refs.per_position.first().map_or(0, TokenDistribution::vocab_size);
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    out.push_str(&format!("triple_id {triple_id}\n"));
    out.push_str(&format!("category {}\n", category.as_str()));
    out.push_str(&format!("k {}\n", refs.source_k));
    out.push_str(&format!("frozen {}\n", refs.frozen));
    out.push_str(&format!("vocab_size {vocab}\n"));
    out.push_str(&format!("positions {}\n", refs.per_position.len()));
    for dist in &refs.per_position {
        out.push_str("row ");
        out.push_str(&fmt_f64_slice(&dist.probs));
        out.push('\n');
    }
    out
}

pub fn parse_reference(text: &str, source: &str) -> Result<(ReferenceDistributions, u32, RefCategory)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(source, 1, "empty file"))?;
    if header.trim() != HEADER {
        return Err(Error::parse(source, 1, format!("expected header '{HEADER}'")));
    }
    let mut triple_id = None;
    let mut category = None;
    let mut k = None;
    let mut frozen = None;
    let mut vocab_size = None;
    let mut positions = None;
    let mut rows: Vec<TokenDistribution> = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| Error::parse(source, lineno, format!("expected 'key value', got '{line}'")))?;
        match key {
            "triple_id" => triple_id = Some(parse_u32(rest, source, lineno)?),
            "category" => {
                category = Some(RefCategory::parse(rest).ok_or_else(|| {
                    Error::parse(source, lineno, format!("unknown category '{rest}'"))
                })?)
            }
            "k" => k = Some(parse_usize(rest, source, lineno)?),
            "frozen" => {
                frozen = Some(match rest {
                    "true" => true,
                    "false" => false,
                    _ => return Err(Error::parse(source, lineno, "frozen must be true or false")),
                })
            }
            "vocab_size" => {
                let v = parse_usize(rest, source, lineno)?;
                if v == 0 || v > MAX_VOCAB {
                    return Err(Error::parse(source, lineno, format!("vocab_size {v} out of range")));
                }
                vocab_size = Some(v);
            }
            "positions" => {
                let v = parse_usize(rest, source, lineno)?;
                if v == 0 || v > MAX_POSITIONS {
                    return Err(Error::parse(source, lineno, format!("positions {v} out of range")));
                }
                positions = Some(v);
            }
            "row" => {
                let vocab = vocab_size
                    .ok_or_else(|| Error::parse(source, lineno, "vocab_size must appear before rows"))?;
                let expected = positions
                    .ok_or_else(|| Error::parse(source, lineno, "positions must appear before rows"))?;
                if rows.len() == expected {
                    return Err(Error::parse(source, lineno, "more rows than declared positions"));
                }
                let probs = parse_f64_slice(rest, vocab, source, lineno)?;
                if probs.iter().any(|&p| p <= 0.0) {
                    return Err(Error::NotASimplex(format!(
                        "{source} line {lineno}: reference probabilities must be strictly positive"
                    )));
                }
                let dist = TokenDistribution::from_probs(probs).map_err(|e| match e {
                    Error::NotASimplex(msg) => {
                        Error::NotASimplex(format!("{source} line {lineno}: {msg}"))
                    }
                    other => other,
                })?;
                rows.push(dist);
            }
            _ => return Err(Error::parse(source, lineno, format!("unknown field '{key}'"))),
        }
    }
    let expected = positions.ok_or_else(|| Error::parse(source, 1, "missing field 'positions'"))?;
    if rows.len() != expected {
        return Err(Error::parse(
            source,
            1,
            format!("declared {expected} positions but found {} rows", rows.len()),
        ));
    }
    let refs = ReferenceDistributions {
        per_position: rows,
        source_k: k.ok_or_else(|| Error::parse(source, 1, "missing field 'k'"))?,
        frozen: frozen.ok_or_else(|| Error::parse(source, 1, "missing field 'frozen'"))?,
    };
    Ok((
        refs,
        triple_id.ok_or_else(|| Error::parse(source, 1, "missing field 'triple_id'"))?,
        category.ok_or_else(|| Error::parse(source, 1, "missing field 'category'"))?,
    ))
}

/// Cache file name for one (triple, category, k) combination.
pub fn cache_file_name(triple_id: u32, category: RefCategory, k: usize) -> String {
    format!("ref_t{triple_id}_{}_k{k}.txt", category.as_str())
}

pub fn save_reference(
    dir: &Path,
    refs: &ReferenceDistributions,
    triple_id: u32,
    category: RefCategory,
) -> Result<PathBuf> {
    let path = dir.join(cache_file_name(triple_id, category, refs.source_k));
    write_string(&path, &write_reference(refs, triple_id, category))?;
    Ok(path)
}

pub fn load_reference(path: &Path) -> Result<(ReferenceDistributions, u32, RefCategory)> {
    let text = read_to_string(path)?;
    parse_reference(&text, &path.display().to_string())
}
