//! Flat key-value config documents: unlearning configs and benchmark specs.
//! Every field has an embedded default and can be overridden line by line.

use super::{parse_f64, parse_u64, parse_usize};
use crate::data::BenchmarkSpec;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::losses::{Method, Regularizer, UnlearnConfig};

const UNLEARN_HEADER: &str = "viker-unlearn-config v1";
const SPEC_HEADER: &str = "viker-benchmark-spec v1";

pub fn write_unlearn_config(config: &UnlearnConfig) -> String {
    format!(
        "{UNLEARN_HEADER}\nmethod {}\nlambda {}\nk {}\nbeta {}\nregularizer {}\nsteps {}\nlearning_rate {}\nbatch_size {}\nseed {}\n",
        config.method.as_str(),
        fmt_f64(config.lambda),
        config.k,
        fmt_f64(config.beta),
        config.regularizer.as_str(),
        config.steps,
        fmt_f64(config.learning_rate),
        config.batch_size,
        config.seed,
    )
}

pub fn parse_unlearn_config(text: &str, source: &str) -> Result<UnlearnConfig> {
    let mut config = UnlearnConfig::default();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(source, 1, "empty file"))?;
    if header.trim() != UNLEARN_HEADER {
        return Err(Error::parse(source, 1, format!("expected header '{UNLEARN_HEADER}'")));
    }
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
            "method" => {
                config.method = Method::parse(rest)
                    .ok_or_else(|| Error::parse(source, lineno, format!("unknown method '{rest}'")))?
            }
            "lambda" => config.lambda = parse_f64(rest, source, lineno)?,
            "k" => config.k = parse_usize(rest, source, lineno)?,
            "beta" => config.beta = parse_f64(rest, source, lineno)?,
            "regularizer" => {
                config.regularizer = Regularizer::parse(rest).ok_or_else(|| {
                    Error::parse(source, lineno, format!("unknown regularizer '{rest}'"))
                })?
            }
            "steps" => config.steps = parse_usize(rest, source, lineno)?,
            "learning_rate" => config.learning_rate = parse_f64(rest, source, lineno)?,
            "batch_size" => config.batch_size = parse_usize(rest, source, lineno)?,
            "seed" => config.seed = parse_u64(rest, source, lineno)?,
            _ => return Err(Error::parse(source, lineno, format!("unknown field '{key}'"))),
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn write_benchmark_spec(spec: &BenchmarkSpec) -> String {
    format!(
        "{SPEC_HEADER}\nn_personas {}\nimages_per_persona {}\nforget_fraction {}\nfeature_noise_sigma {}\nvocab_size {}\nimg_dim {}\nseed {}\n",
        spec.n_personas,
        spec.images_per_persona,
        fmt_f64(spec.forget_fraction),
        fmt_f64(spec.feature_noise_sigma),
        spec.vocab_size,
        spec.img_dim,
        spec.seed,
    )
}

pub fn parse_benchmark_spec(text: &str, source: &str) -> Result<BenchmarkSpec> {
    let mut spec = BenchmarkSpec::default();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::parse(source, 1, "empty file"))?;
    if header.trim() != SPEC_HEADER {
        return Err(Error::parse(source, 1, format!("expected header '{SPEC_HEADER}'")));
    }
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
            "n_personas" => spec.n_personas = bounded(parse_usize(rest, source, lineno)?, 1_000_000, "n_personas", source, lineno)?,
            "images_per_persona" => spec.images_per_persona = bounded(parse_usize(rest, source, lineno)?, 1_000, "images_per_persona", source, lineno)?,
            "forget_fraction" => spec.forget_fraction = parse_f64(rest, source, lineno)?,
            "feature_noise_sigma" => spec.feature_noise_sigma = parse_f64(rest, source, lineno)?,
            "vocab_size" => spec.vocab_size = bounded(parse_usize(rest, source, lineno)?, super::MAX_VOCAB, "vocab_size", source, lineno)?,
            "img_dim" => spec.img_dim = bounded(parse_usize(rest, source, lineno)?, super::MAX_DIM, "img_dim", source, lineno)?,
            "seed" => spec.seed = parse_u64(rest, source, lineno)?,
            _ => return Err(Error::parse(source, lineno, format!("unknown field '{key}'"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn bounded(v: usize, cap: usize, name: &str, source: &str, lineno: usize) -> Result<usize> {
    if v == 0 || v > cap {
        return Err(Error::parse(source, lineno, format!("{name} {v} out of supported range 1..={cap}")));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unlearn_config_round_trips_with_all_fields() {
        let config = UnlearnConfig {
            method: Method::Npo,
            lambda: 0.3,
            k: 7,
            beta: 0.2,
            regularizer: Regularizer::Jsd,
            steps: 17,
            learning_rate: 5e-4,
            batch_size: 4,
            seed: 99,
        };
        let text = write_unlearn_config(&config);
        let back = parse_unlearn_config(&text, "t").unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn missing_fields_fall_back_to_defaults() {
        let text = "viker-unlearn-config v1\nmethod ga\n";
        let config = parse_unlearn_config(text, "t").unwrap();
        assert_eq!(config.method, Method::Ga);
        assert_eq!(config, UnlearnConfig { method: Method::Ga, ..Default::default() });
    }

    #[test]
    fn unknown_keys_and_bad_values_error() {
        assert!(parse_unlearn_config("viker-unlearn-config v1\nwat 3\n", "t").is_err());
        assert!(parse_unlearn_config("viker-unlearn-config v1\nlambda -1\n", "t").is_err());
        assert!(parse_unlearn_config("viker-unlearn-config v1\nbeta 0\n", "t").is_err());
        assert!(parse_unlearn_config("", "t").is_err());
    }

    #[test]
    fn benchmark_spec_round_trips_and_validates() {
        let spec = BenchmarkSpec { forget_fraction: 0.15, seed: 4, ..Default::default() };
        let text = write_benchmark_spec(&spec);
        let back = parse_benchmark_spec(&text, "t").unwrap();
        assert_eq!(back, spec);
        assert!(parse_benchmark_spec("viker-benchmark-spec v1\nforget_fraction 1.5\n", "t").is_err());
    }
}
