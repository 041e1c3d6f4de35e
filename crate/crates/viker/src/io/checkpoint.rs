//! Checkpoint files: the model config and each named tensor as a flat
//! decimal array, field names E, P, U, A, O, b. An optional trailing block
//! carries Adam state so runs can resume exactly.

use std::path::Path;

use super::{
    fmt_f64, fmt_f64_slice, parse_f64, parse_f64_slice, parse_usize, read_to_string, write_string,
    MAX_DIM, MAX_POSITIONS, MAX_VOCAB,
};
use crate::error::{Error, Result};
use crate::grad::GradientVector;
use crate::mat::Mat;
use crate::model::{ModelConfig, ModelParams, TENSOR_LABELS};
use crate::train::OptimizerState;

const HEADER: &str = "viker-checkpoint v1";

pub fn write_checkpoint(params: &ModelParams, opt: Option<&OptimizerState>) -> String {
    let cfg = &params.config;
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    out.push_str(&format!("vocab_size {}\n", cfg.vocab_size));
    out.push_str(&format!("img_dim {}\n", cfg.img_dim));
    out.push_str(&format!("hidden_dim {}\n", cfg.hidden_dim));
    out.push_str(&format!("max_positions {}\n", cfg.max_positions));
    for (label, tensor) in TENSOR_LABELS.iter().zip(params.tensors()) {
        out.push_str(label);
        out.push(' ');
        out.push_str(&fmt_f64_slice(tensor.as_slice()));
        out.push('\n');
    }
    if let Some(opt) = opt {
        out.push_str(&format!("opt_step {}\n", opt.step));
        out.push_str(&format!("opt_learning_rate {}\n", fmt_f64(opt.learning_rate)));
        out.push_str(&format!("opt_beta1 {}\n", fmt_f64(opt.beta1)));
        out.push_str(&format!("opt_beta2 {}\n", fmt_f64(opt.beta2)));
        out.push_str(&format!("opt_epsilon {}\n", fmt_f64(opt.epsilon)));
        for (label, tensor) in TENSOR_LABELS.iter().zip(opt.first_moment.tensors()) {
            out.push_str(&format!("m{label} {}\n", fmt_f64_slice(tensor.as_slice())));
        }
        for (label, tensor) in TENSOR_LABELS.iter().zip(opt.second_moment.tensors()) {
            out.push_str(&format!("v{label} {}\n", fmt_f64_slice(tensor.as_slice())));
        }
    }
    out
}

fn tensor_shape(label: &str, cfg: &ModelConfig) -> (usize, usize) {
    match label {
        "E" => (cfg.vocab_size, cfg.hidden_dim),
        "P" => (cfg.hidden_dim, cfg.img_dim),
        "U" => (cfg.max_positions, cfg.hidden_dim),
        "A" => (cfg.hidden_dim, cfg.hidden_dim),
        "O" => (cfg.vocab_size, cfg.hidden_dim),
        "b" => (1, cfg.hidden_dim),
        _ => unreachable!(),
    }
}

pub fn parse_checkpoint(text: &str, source: &str) -> Result<(ModelParams, Option<OptimizerState>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(source, 1, "empty file"))?;
    if header.trim() != HEADER {
        return Err(Error::parse(source, 1, format!("expected header '{HEADER}'")));
    }

    let mut vocab_size = None;
    let mut img_dim = None;
    let mut hidden_dim = None;
    let mut max_positions = None;
    let mut tensors: [Option<Vec<f64>>; 6] = [None, None, None, None, None, None];
    let mut m_tensors: [Option<Vec<f64>>; 6] = [None, None, None, None, None, None];
    let mut v_tensors: [Option<Vec<f64>>; 6] = [None, None, None, None, None, None];
    let mut opt_step = None;
    let mut opt_lr = None;
    let mut opt_beta1 = None;
    let mut opt_beta2 = None;
    let mut opt_epsilon = None;

    let mut config: Option<ModelConfig> = None;

    for (idx, raw) in lines {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, rest) = match line.split_once(' ') {
            Some(kv) => kv,
            None => return Err(Error::parse(source, lineno, format!("expected 'key value', got '{line}'"))),
        };
        let dim_field = |slot: &mut Option<usize>, cap: usize, name: &str, rest: &str| -> Result<()> {
            if slot.is_some() {
                return Err(Error::parse(source, lineno, format!("duplicate field '{name}'")));
            }
            let v = parse_usize(rest, source, lineno)?;
            if v == 0 || v > cap {
                return Err(Error::parse(source, lineno, format!("{name} {v} out of supported range 1..={cap}")));
            }
            *slot = Some(v);
            Ok(())
        };
        match key {
            "vocab_size" => dim_field(&mut vocab_size, MAX_VOCAB, "vocab_size", rest)?,
            "img_dim" => dim_field(&mut img_dim, MAX_DIM, "img_dim", rest)?,
            "hidden_dim" => dim_field(&mut hidden_dim, MAX_DIM, "hidden_dim", rest)?,
            "max_positions" => dim_field(&mut max_positions, MAX_POSITIONS, "max_positions", rest)?,
            "opt_step" => opt_step = Some(parse_usize(rest, source, lineno)?),
            "opt_learning_rate" => opt_lr = Some(parse_f64(rest, source, lineno)?),
            "opt_beta1" => opt_beta1 = Some(parse_f64(rest, source, lineno)?),
            "opt_beta2" => opt_beta2 = Some(parse_f64(rest, source, lineno)?),
            "opt_epsilon" => opt_epsilon = Some(parse_f64(rest, source, lineno)?),
            _ => {
                let (bucket, label): (&mut [Option<Vec<f64>>; 6], &str) =
                    if let Some(l) = key.strip_prefix('m').filter(|l| TENSOR_LABELS.contains(l)) {
                        (&mut m_tensors, l)
                    } else if let Some(l) = key.strip_prefix('v').filter(|l| TENSOR_LABELS.contains(l)) {
                        (&mut v_tensors, l)
                    } else if TENSOR_LABELS.contains(&key) {
                        (&mut tensors, key)
                    } else {
                        return Err(Error::parse(source, lineno, format!("unknown field '{key}'")));
                    };
                if config.is_none() {
                    config = Some(ModelConfig {
                        vocab_size: vocab_size.ok_or_else(|| missing(source, lineno, "vocab_size"))?,
                        img_dim: img_dim.ok_or_else(|| missing(source, lineno, "img_dim"))?,
                        hidden_dim: hidden_dim.ok_or_else(|| missing(source, lineno, "hidden_dim"))?,
                        max_positions: max_positions
                            .ok_or_else(|| missing(source, lineno, "max_positions"))?,
                    });
                }
                let cfg = config.as_ref().unwrap();
                let slot = TENSOR_LABELS.iter().position(|l| *l == label).unwrap();
                if bucket[slot].is_some() {
                    return Err(Error::parse(source, lineno, format!("duplicate tensor '{key}'")));
                }
                let (rows, cols) = tensor_shape(label, cfg);
                bucket[slot] = Some(parse_f64_slice(rest, rows * cols, source, lineno)?);
            }
        }
    }

    let cfg = config.ok_or_else(|| Error::parse(source, 1, "no tensors present"))?;
    let mut params = ModelParams::zeros(cfg.clone());
    for (slot, data) in tensors.into_iter().enumerate() {
        let label = TENSOR_LABELS[slot];
        let data = data.ok_or_else(|| Error::parse(source, 1, format!("missing tensor '{label}'")))?;
        let (rows, cols) = tensor_shape(label, &cfg);
        *params.tensors_mut()[slot] = Mat::from_vec(rows, cols, data);
    }

    let any_opt = opt_step.is_some()
        || opt_lr.is_some()
        || m_tensors.iter().any(Option::is_some)
        || v_tensors.iter().any(Option::is_some);
    let opt = if any_opt {
        let mut first = GradientVector::zeros_like(&params);
        let mut second = GradientVector::zeros_like(&params);
        for slot in 0..6 {
            let label = TENSOR_LABELS[slot];
            let (rows, cols) = tensor_shape(label, &cfg);
            let m = m_tensors[slot]
                .take()
                .ok_or_else(|| Error::parse(source, 1, format!("missing optimizer tensor 'm{label}'")))?;
            let v = v_tensors[slot]
                .take()
                .ok_or_else(|| Error::parse(source, 1, format!("missing optimizer tensor 'v{label}'")))?;
            *first.tensors_mut()[slot] = Mat::from_vec(rows, cols, m);
            *second.tensors_mut()[slot] = Mat::from_vec(rows, cols, v);
        }
        Some(OptimizerState {
            first_moment: first,
            second_moment: second,
            step: opt_step.ok_or_else(|| Error::parse(source, 1, "missing field 'opt_step'"))?,
            learning_rate: opt_lr.ok_or_else(|| Error::parse(source, 1, "missing field 'opt_learning_rate'"))?,
            beta1: opt_beta1.ok_or_else(|| Error::parse(source, 1, "missing field 'opt_beta1'"))?,
            beta2: opt_beta2.ok_or_else(|| Error::parse(source, 1, "missing field 'opt_beta2'"))?,
            epsilon: opt_epsilon.ok_or_else(|| Error::parse(source, 1, "missing field 'opt_epsilon'"))?,
        })
    } else {
        None
    };

    Ok((params, opt))
}

fn missing(source: &str, line: usize, field: &str) -> Error {
    Error::parse(source, line, format!("model config field '{field}' must appear before tensors"))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, opt: Option<&OptimizerState>) -> Result<()> {
    write_string(path, &write_checkpoint(params, opt))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<OptimizerState>)> {
    let text = read_to_string(path)?;
    parse_checkpoint(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn small() -> ModelParams {
        init_params(&ModelConfig { vocab_size: 5, img_dim: 2, hidden_dim: 3, max_positions: 4 }, 8)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let params = small();
        let text = write_checkpoint(&params, None);
        let (back, opt) = parse_checkpoint(&text, "test").unwrap();
        assert!(back.bitwise_eq(&params));
        assert!(opt.is_none());
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let params = small();
        let mut opt = OptimizerState::new(&params, 0.01);
        // make the moments non-trivial
        let g = crate::losses::LossSpec::Nll {
            data: &[crate::model::Triple {
                id: 0,
                persona: 0,
                image: crate::model::ImageFeature::new(vec![0.1, 0.2], crate::model::FeatureCategory::Persona),
                question: vec![1],
                answer: vec![2, 3],
                key_mask: None,
            }],
        }
        .gradient(&params)
        .unwrap();
        let mut p = params.clone();
        opt.apply(&mut p, &g);
        let text = write_checkpoint(&p, Some(&opt));
        let (back_p, back_opt) = parse_checkpoint(&text, "test").unwrap();
        assert!(back_p.bitwise_eq(&p));
        let back_opt = back_opt.unwrap();
        assert_eq!(back_opt.step, 1);
        assert_eq!(back_opt, opt);
    }

    #[test]
    fn truncated_and_malformed_inputs_error_cleanly() {
        let params = small();
        let text = write_checkpoint(&params, None);
        // drop the final line
        let truncated: String = text.lines().take(6).collect::<Vec<_>>().join("\n");
        assert!(parse_checkpoint(&truncated, "t").is_err());
        assert!(parse_checkpoint("", "t").is_err());
        assert!(parse_checkpoint("garbage header\nE 1", "t").is_err());
        let bad_float = text.replace("E ", "E zzz ");
        assert!(parse_checkpoint(&bad_float, "t").is_err());
        // tensor before config
        assert!(parse_checkpoint(&format!("{HEADER}\nE 1 2 3"), "t").is_err());
        // absurd dimensions are rejected before allocation
        assert!(parse_checkpoint(&format!("{HEADER}\nvocab_size 99999999999"), "t").is_err());
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        let params = small();
        let text = write_checkpoint(&params, None).replace("b ", "b inf ");
        assert!(parse_checkpoint(&text, "t").is_err());
    }
}
