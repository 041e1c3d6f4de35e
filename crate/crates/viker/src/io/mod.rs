//! Text file formats: checkpoints, datasets, reference-distribution caches,
//! and flat key-value configs.
//!
//! All formats are line oriented and decimal. Floats are written with 17
//! significant digits, which round-trips every finite f64 exactly. Parsers
//! never panic on malformed input: every failure is a structured
//! [`Error::Parse`](crate::error::Error) carrying the source name and line.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod reference;

use crate::error::{Error, Result};

// Dimension caps keep hostile headers from requesting absurd allocations.
pub(crate) const MAX_VOCAB: usize = 65_536;
pub(crate) const MAX_DIM: usize = 4_096;
pub(crate) const MAX_POSITIONS: usize = 4_096;

/// 17 significant digits: lossless for 64-bit floats.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn fmt_f64_slice(xs: &[f64]) -> String {
    xs.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ")
}

pub(crate) fn parse_f64(s: &str, file: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| Error::parse(file, line, format!("invalid float '{s}'")))?;
    if !v.is_finite() {
        return Err(Error::parse(file, line, format!("non-finite value '{s}'")));
    }
    Ok(v)
}

pub(crate) fn parse_f64_slice(s: &str, expected: usize, file: &str, line: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(expected.min(1 << 20));
    for tok in s.split_whitespace() {
        if out.len() == expected {
            return Err(Error::parse(file, line, format!("expected {expected} values, found more")));
        }
        out.push(parse_f64(tok, file, line)?);
    }
    if out.len() != expected {
        return Err(Error::parse(
            file,
            line,
            format!("expected {expected} values, found {}", out.len()),
        ));
    }
    Ok(out)
}

pub(crate) fn parse_usize(s: &str, file: &str, line: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::parse(file, line, format!("invalid integer '{s}'")))
}

pub(crate) fn parse_u64(s: &str, file: &str, line: usize) -> Result<u64> {
    s.parse()
        .map_err(|_| Error::parse(file, line, format!("invalid integer '{s}'")))
}

pub(crate) fn parse_u32(s: &str, file: &str, line: usize) -> Result<u32> {
    s.parse()
        .map_err(|_| Error::parse(file, line, format!("invalid integer '{s}'")))
}

pub(crate) fn parse_token_ids(s: &str, vocab_size: usize, file: &str, line: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for tok in s.split_whitespace() {
        let id = parse_usize(tok, file, line)?;
        if id >= vocab_size {
            return Err(Error::parse(file, line, format!("token id {id} out of vocabulary")));
        }
        out.push(id);
    }
    Ok(out)
}

/// Read a whole file as a string with path-tagged errors.
pub fn read_to_string(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write a string, creating parent directories as needed.
pub fn write_string(path: &std::path::Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}
