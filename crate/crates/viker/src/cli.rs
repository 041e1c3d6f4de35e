//! Command-line front end. Commands are idempotent given identical flags and
//! inputs; wall-clock timings go to a separate `.timing.txt` file so the
//! main outputs stay byte-identical across runs.
//!
//! Exit codes: 0 success, 1 validation error, 2 verification failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{classify_tokens, median_entropy, verify_onehot_scaling, verify_reweighting_identity, ReweightReport};
use crate::data::{build_mc_items, desk_idk_pool, generate_benchmark, BenchmarkSpec, DatasetSplit, Split};
use crate::error::{Error, Result};
use crate::grad::{check_gradients, finite_diff_gradient, GradCheckReport, GRAD_CHECK_STEP};
use crate::io::{checkpoint, config as config_io, dataset as dataset_io, reference as reference_io};
use crate::losses::{IdkPool, LossSpec, Method, Regularizer, UnlearnConfig};
use crate::metrics::{bleu, coherence_proxy, mc_accuracy, mean_std, rec, rouge_l, MetricReport, MetricRow};
use crate::model::{greedy_decode, init_params, ModelConfig, ModelParams, TokenId, Triple};
use crate::reference::{estimate_reference, RefCategory, ReferenceDistributions, ReferenceSet};
use crate::train::{train_full, train_origin, unlearn, unlearn_config_lines, RunRecord, TrainConfig};

/// Environment variable naming the reference-distribution cache directory.
pub const CACHE_DIR_ENV: &str = "VIKER_CACHE_DIR";

#[derive(Parser, Debug)]
#[command(name = "viker", version, about = "Desk-scale unlearning laboratory")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic persona benchmark.
    Synth(SynthArgs),
    /// Train the origin or full model on a dataset.
    Train(TrainArgs),
    /// Precompute reference distributions into the cache directory.
    Refdist(RefdistArgs),
    /// Run an unlearning method on the forget split.
    Unlearn(UnlearnArgs),
    /// Greedy-decode every split and compute all metrics.
    Eval(EvalArgs),
    /// Finite-difference and gradient-reweighting verification.
    VerifyGrad(VerifyGradArgs),
    /// Dump per-position token distributions for one triple as CSV.
    DumpDist(DumpDistArgs),
    /// Aggregate metric reports across runs into a mean/std table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Benchmark spec file; mutually exclusive with --defaults.
    #[arg(long, conflicts_with = "defaults")]
    spec: Option<PathBuf>,
    /// Use the built-in default spec.
    #[arg(long)]
    defaults: bool,
    /// Dataset output path; the manifest goes to `<out>.manifest`.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory: checkpoint.txt, run.txt, run.timing.txt.
    #[arg(long)]
    out: PathBuf,
    /// `origin` pretrains templates only; `full` fits the whole dataset.
    #[arg(long, default_value = "full")]
    stage: String,
    /// Starting checkpoint (defaults to a fresh seeded init).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct RefdistArgs {
    /// Full-model checkpoint used for the forward passes.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Reference pool: people|pets|scene|pattern|forget|retain|self.
    #[arg(long, default_value = "people")]
    refs: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Cache directory to write per-triple reference files into.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct UnlearnArgs {
    /// ga | npo | idkpo | viker
    #[arg(long)]
    method: String,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    /// kl | jsd | cos
    #[arg(long)]
    reg: Option<String>,
    /// Reference pool for viker: people|pets|scene|pattern|forget|retain|self.
    #[arg(long)]
    refs: Option<String>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Triples per step; 0 means full batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory: checkpoint.txt, run.txt, config.txt, run.timing.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Origin-model checkpoint for the coherence proxy.
    #[arg(long)]
    origin: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory: metrics.csv, metrics.txt, decodes.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyGradArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Output directory for the verification reports.
    #[arg(long)]
    out: PathBuf,
    /// Self-test knob: add this value to one analytic gradient component so
    /// the failure path (exit code 2) can be exercised.
    #[arg(long)]
    perturb: Option<f64>,
}

#[derive(Args, Debug)]
struct DumpDistArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    triple: u32,
    #[arg(long)]
    data: PathBuf,
    /// Reference pool: people|pets|scene|pattern|forget|retain|self.
    #[arg(long, default_value = "people")]
    refs: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory whose subdirectories each hold run.txt + metrics.txt.
    #[arg(long)]
    runs: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Parse argv and run; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Refdist(args) => cmd_refdist(args),
        Command::Unlearn(args) => cmd_unlearn(args),
        Command::Eval(args) => cmd_eval(args),
        Command::VerifyGrad(args) => cmd_verify_grad(args),
        Command::DumpDist(args) => cmd_dump_dist(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<i32> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = crate::io::read_to_string(path)?;
            config_io::parse_benchmark_spec(&text, &path.display().to_string())?
        }
        None => {
            if !args.defaults {
                return Err(Error::Validation("pass either --spec FILE or --defaults".into()));
            }
            BenchmarkSpec::default()
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    // validate and generate before any file is written
    let ds = generate_benchmark(&spec)?;
    dataset_io::save_dataset(&args.out, &ds)?;
    let manifest_path = manifest_path_for(&args.out);
    crate::io::write_string(&manifest_path, &(spec.manifest_lines().join("\n") + "\n"))?;
    println!(
        "synth: {} triples ({} forget / {} retain / {} generalization) -> {}",
        ds.full.len() + ds.generalization.len(),
        ds.forget.len(),
        ds.retain.len(),
        ds.generalization.len(),
        args.out.display()
    );
    Ok(0)
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}

fn model_config_for(ds: &DatasetSplit) -> ModelConfig {
    ModelConfig {
        vocab_size: ds.spec.vocab_size,
        img_dim: ds.spec.img_dim,
        ..ModelConfig::default()
    }
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let ds = dataset_io::load_dataset(&args.data)?;
    let model_cfg = model_config_for(&ds);
    let init = match &args.init {
        Some(path) => {
            let (params, _) = checkpoint::load_checkpoint(path)?;
            if params.config != model_cfg {
                return Err(Error::Config(format!(
                    "checkpoint config {:?} does not match dataset-derived config {:?}",
                    params.config, model_cfg
                )));
            }
            params
        }
        None => init_params(&model_cfg, args.seed),
    };
    let config = TrainConfig {
        steps: args.steps,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        seed: args.seed,
        ..Default::default()
    };
    let started = Instant::now();
    let (params, opt, mut record) = match args.stage.as_str() {
        "full" => train_full(&init, &ds.full, &config, None)?,
        "origin" => {
            let layout = ds.layout()?;
            train_origin(&init, &ds.full, &layout, &config)?
        }
        other => return Err(Error::Validation(format!("unknown stage '{other}'"))),
    };
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    record.config_lines.extend(ds.spec.manifest_lines().iter().map(|l| format!("dataset.{l}")));
    checkpoint::save_checkpoint(&args.out.join("checkpoint.txt"), &params, Some(&opt))?;
    write_run_record(&args.out, &record)?;
    println!(
        "train --stage {}: {} steps, converged {}, final loss {:.6}",
        args.stage,
        record.steps_run,
        record.converged,
        record.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

/// Build the reference set for one triple: either its own image (`self`) or
/// the first k images of a dataset pool.
fn reference_set_for(
    ds: &DatasetSplit,
    refs: &str,
    k: usize,
    triple: &Triple,
) -> Result<(ReferenceSet, RefCategory)> {
    if refs == "self" {
        let set = ReferenceSet::new(vec![triple.image.clone()], RefCategory::Forget)?;
        return Ok((set, RefCategory::Forget));
    }
    let category = RefCategory::parse(refs)
        .ok_or_else(|| Error::Validation(format!("unknown reference pool '{refs}'")))?;
    let pool = ds.reference_pool(category)?;
    if pool.len() < k {
        return Err(Error::Validation(format!(
            "reference pool '{refs}' has only {} images, need k = {k}",
            pool.len()
        )));
    }
    Ok((ReferenceSet::new(pool[..k].to_vec(), category)?, category))
}

/// Compute (or load from the cache directory, when configured) the frozen
/// reference distributions for every forget triple.
fn references_for_forget(
    params_full: &ModelParams,
    ds: &DatasetSplit,
    refs: &str,
    k: usize,
    cache_dir: Option<&Path>,
) -> Result<BTreeMap<u32, ReferenceDistributions>> {
    let mut out = BTreeMap::new();
    for triple in &ds.forget {
        let (set, category) = reference_set_for(ds, refs, k, triple)?;
        let effective_k = set.k();
        if let Some(dir) = cache_dir {
            let path = dir.join(reference_io::cache_file_name(triple.id, category, effective_k));
            if path.exists() {
                let (cached, id, _) = reference_io::load_reference(&path)?;
                if id != triple.id {
                    return Err(Error::Validation(format!(
                        "cache file {} names triple {id}, expected {}",
                        path.display(),
                        triple.id
                    )));
                }
                cached.validate(triple.answer.len())?;
                out.insert(triple.id, cached);
                continue;
            }
        }
        let est = estimate_reference(params_full, &set, triple)?;
        if let Some(dir) = cache_dir {
            reference_io::save_reference(dir, &est, triple.id, category)?;
        }
        out.insert(triple.id, est);
    }
    Ok(out)
}

fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from)
}

fn cmd_refdist(args: RefdistArgs) -> Result<i32> {
    let (params, _) = checkpoint::load_checkpoint(&args.checkpoint)?;
    let ds = dataset_io::load_dataset(&args.data)?;
    ensure_model_matches(&params, &ds)?;
    let refs = references_for_forget(&params, &ds, &args.refs, args.k, Some(&args.out))?;
    println!("refdist: cached {} reference files in {}", refs.len(), args.out.display());
    Ok(0)
}

fn ensure_model_matches(params: &ModelParams, ds: &DatasetSplit) -> Result<()> {
    if params.config.vocab_size != ds.spec.vocab_size || params.config.img_dim != ds.spec.img_dim {
        return Err(Error::Config(format!(
            "checkpoint (vocab {}, img {}) does not match dataset (vocab {}, img {})",
            params.config.vocab_size, params.config.img_dim, ds.spec.vocab_size, ds.spec.img_dim
        )));
    }
    Ok(())
}

fn cmd_unlearn(args: UnlearnArgs) -> Result<i32> {
    let method = Method::parse(&args.method)
        .ok_or_else(|| Error::Validation(format!("unknown method '{}'", args.method)))?;
    let mut config = UnlearnConfig { method, ..Default::default() };
    if let Some(v) = args.lambda {
        if method != Method::Viker {
            eprintln!("warning: --lambda has no effect with --method {}; ignored", method.as_str());
        } else {
            if v > 1.0 {
                eprintln!("warning: lambda {v} lies outside the usual [0, 1] range");
            }
            config.lambda = v;
        }
    }
    if let Some(v) = args.k {
        if method != Method::Viker {
            eprintln!("warning: --k has no effect with --method {}; ignored", method.as_str());
        } else {
            config.k = v;
        }
    }
    if let Some(v) = args.beta {
        if matches!(method, Method::Ga | Method::Viker) {
            eprintln!("warning: --beta has no effect with --method {}; ignored", method.as_str());
        } else {
            config.beta = v;
        }
    }
    if let Some(r) = &args.reg {
        let reg = Regularizer::parse(r)
            .ok_or_else(|| Error::Validation(format!("unknown regularizer '{r}'")))?;
        if method != Method::Viker {
            eprintln!("warning: --reg has no effect with --method {}; ignored", method.as_str());
        } else {
            config.regularizer = reg;
        }
    }
    if let Some(v) = args.steps {
        config.steps = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    config.validate()?;
    if args.refs.is_some() && method != Method::Viker {
        eprintln!("warning: --refs has no effect with --method {}; ignored", method.as_str());
    }

    let (params_full, _) = checkpoint::load_checkpoint(&args.checkpoint)?;
    let ds = dataset_io::load_dataset(&args.data)?;
    ensure_model_matches(&params_full, &ds)?;
    let layout = ds.layout()?;

    let started = Instant::now();
    let references = if method == Method::Viker {
        let refs_name = args.refs.as_deref().unwrap_or("people");
        Some(references_for_forget(
            &params_full,
            &ds,
            refs_name,
            config.k,
            cache_dir_from_env().as_deref(),
        )?)
    } else {
        None
    };
    let pool: Option<IdkPool> =
        if method == Method::IdkPo { Some(desk_idk_pool(&layout)) } else { None };
    let (params, mut record) =
        unlearn(&params_full, &ds.forget, &config, references.as_ref(), pool.as_ref())?;
    record.wall_clock_seconds = started.elapsed().as_secs_f64();
    record.config_lines = unlearn_config_lines(&config);
    if let Some(refs_name) = &args.refs {
        record.config_lines.push(format!("reference_pool {refs_name}"));
    }
    record.config_lines.extend(ds.spec.manifest_lines().iter().map(|l| format!("dataset.{l}")));

    checkpoint::save_checkpoint(&args.out.join("checkpoint.txt"), &params, None)?;
    crate::io::write_string(&args.out.join("config.txt"), &config_io::write_unlearn_config(&config))?;
    write_run_record(&args.out, &record)?;
    println!(
        "unlearn --method {}: {} steps, final loss {:.6}",
        method.as_str(),
        record.steps_run,
        record.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(0)
}

fn write_run_record(dir: &Path, record: &RunRecord) -> Result<()> {
    let mut out = String::from("viker-run v1\n");
    out.push_str(&format!("command {}\n", record.command));
    out.push_str(&format!("config_hash {:016x}\n", record.config_hash()));
    out.push_str(&format!("seed {}\n", record.seed));
    out.push_str(&format!("steps_run {}\n", record.steps_run));
    out.push_str(&format!("converged {}\n", record.converged));
    for line in &record.config_lines {
        out.push_str(&format!("config.{line}\n"));
    }
    for (step, loss) in record.loss_trace.iter().enumerate() {
        out.push_str(&format!("loss {step} {loss}\n"));
    }
    crate::io::write_string(&dir.join("run.txt"), &out)?;
    crate::io::write_string(
        &dir.join("run.timing.txt"),
        &format!("wall_clock_seconds {}\n", record.wall_clock_seconds),
    )?;
    Ok(())
}

const METRIC_NAMES: [&str; 5] = ["acc", "rouge_l", "bleu", "rec", "coherence"];

fn strip_end(seq: &[TokenId], end: TokenId) -> Vec<TokenId> {
    seq.iter().copied().filter(|&t| t != end).collect()
}

fn eval_split(
    params: &ModelParams,
    origin: &ModelParams,
    ds: &DatasetSplit,
    split: Split,
    decode_log: &mut String,
) -> Result<MetricReport> {
    let triples = ds.split_triples(split);
    if triples.is_empty() {
        return Err(Error::Validation(format!("split {} is empty", split.as_str())));
    }
    let layout = ds.layout()?;
    let end = params.config.end_token();
    let items = build_mc_items(triples, &layout, 3)?;
    let acc = mc_accuracy(params, &items)?;

    let mut rouge_vals = Vec::new();
    let mut bleu_vals = Vec::new();
    let mut rec_vals = Vec::new();
    let mut coh_vals = Vec::new();
    let mut acc_vals = Vec::new();
    for (t, item) in triples.iter().zip(&items) {
        let decode = greedy_decode(params, &t.image, &t.question, params.config.max_positions)?;
        let gen = strip_end(&decode, end);
        let reference = strip_end(&t.answer, end);
        let (r, b) = if gen.is_empty() {
            (0.0, 0.0)
        } else {
            (rouge_l(&gen, &reference)?, bleu(&gen, &reference, 4)?)
        };
        rouge_vals.push(r);
        bleu_vals.push(b);
        let name = ds
            .persona_name(t.persona)
            .ok_or_else(|| Error::Validation(format!("no persona record for triple {}", t.id)))?;
        rec_vals.push(if rec(&gen, name) { 1.0 } else { 0.0 });
        // geometric-mean token probability of the decode under the origin model
        coh_vals.push(coherence_proxy(origin, &t.image, &t.question, &decode)?.exp());
        // per-item correctness for the std column
        let mut best = 0usize;
        let mut best_lp = f64::NEG_INFINITY;
        for (ci, cand) in item.candidates.iter().enumerate() {
            let lp = crate::model::answer_log_prob_for(params, &item.image, &item.question, cand)?;
            if lp > best_lp {
                best_lp = lp;
                best = ci;
            }
        }
        acc_vals.push(if best == item.true_index { 1.0 } else { 0.0 });

        let dec_str: Vec<String> = decode.iter().map(|x| x.to_string()).collect();
        let ans_str: Vec<String> = t.answer.iter().map(|x| x.to_string()).collect();
        decode_log.push_str(&format!(
            "triple {} {} decode {} answer {}\n",
            t.id,
            split.as_str(),
            dec_str.join(" "),
            ans_str.join(" ")
        ));
    }
    let (acc_mean, acc_std) = mean_std(&acc_vals);
    debug_assert!((acc_mean - acc).abs() < 1e-12);
    let rows = vec![
        MetricRow { metric: "acc".into(), mean: acc_mean, std: acc_std },
        row("rouge_l", &rouge_vals),
        row("bleu", &bleu_vals),
        row("rec", &rec_vals),
        row("coherence", &coh_vals),
    ];
    Ok(MetricReport {
        split: split.as_str().to_string(),
        n_items: triples.len(),
        rows,
        decode_dump: "decodes.txt".into(),
    })
}

fn row(name: &str, vals: &[f64]) -> MetricRow {
    let (mean, std) = mean_std(vals);
    MetricRow { metric: name.into(), mean, std }
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    let (params, _) = checkpoint::load_checkpoint(&args.checkpoint)?;
    let (origin, _) = checkpoint::load_checkpoint(&args.origin)?;
    let ds = dataset_io::load_dataset(&args.data)?;
    ensure_model_matches(&params, &ds)?;
    ensure_model_matches(&origin, &ds)?;

    let mut decode_log = String::new();
    let mut reports = Vec::new();
    for split in [Split::Forget, Split::Generalization, Split::Retain] {
        reports.push(eval_split(&params, &origin, &ds, split, &mut decode_log)?);
    }

    let mut csv = String::from("split,metric,mean,std\n");
    for report in &reports {
        for r in &report.rows {
            csv.push_str(&format!("{},{},{:.6},{:.6}\n", report.split, r.metric, r.mean, r.std));
        }
    }
    let mut txt = String::from("viker-metrics v1\n");
    txt.push_str(&format!("checkpoint {}\n", args.checkpoint.display()));
    txt.push_str(&format!("origin {}\n", args.origin.display()));
    for line in ds.spec.manifest_lines() {
        txt.push_str(&format!("manifest {line}\n"));
    }
    txt.push_str("decode_dump decodes.txt\n");
    for report in &reports {
        for r in &report.rows {
            txt.push_str(&format!(
                "metric {} {} {:.6} {:.6}\n",
                report.split, r.metric, r.mean, r.std
            ));
        }
    }
    txt.push('\n');
    txt.push_str(&format_metric_table(&reports));
    crate::io::write_string(&args.out.join("metrics.csv"), &csv)?;
    crate::io::write_string(&args.out.join("metrics.txt"), &txt)?;
    crate::io::write_string(&args.out.join("decodes.txt"), &decode_log)?;
    println!("eval: wrote metrics for {} splits to {}", reports.len(), args.out.display());
    Ok(0)
}

/// Human-readable table mirroring the forget/generalization/retain layout.
fn format_metric_table(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<16}", "split"));
    for m in METRIC_NAMES {
        out.push_str(&format!("{m:>12}"));
    }
    out.push('\n');
    for report in reports {
        out.push_str(&format!("{:<16}", report.split));
        for m in METRIC_NAMES {
            let r = report.rows.iter().find(|r| r.metric == m).unwrap();
            out.push_str(&format!("{:>12.4}", r.mean));
        }
        out.push('\n');
    }
    out
}

fn cmd_verify_grad(args: VerifyGradArgs) -> Result<i32> {
    let (params, _) = checkpoint::load_checkpoint(&args.checkpoint)?;
    let ds = dataset_io::load_dataset(&args.data)?;
    ensure_model_matches(&params, &ds)?;
    let layout = ds.layout()?;
    if args.lambda < 0.0 {
        return Err(Error::Validation("lambda must be >= 0".into()));
    }

    // small deterministic sample keeps the finite differences fast
    let sample: Vec<Triple> = ds.forget.iter().take(2).cloned().collect();
    let refs = references_for_forget(&params, &ds, "people", args.k, None)?;
    let pool = desk_idk_pool(&layout);
    let idk = pool.assign(sample.len(), 0);

    let mut all_pass = true;
    let mut fd_text = String::from("viker-gradient-checks v1\n");
    let specs: Vec<(&str, LossSpec)> = vec![
        ("nll", LossSpec::Nll { data: &sample }),
        ("ga", LossSpec::Ga { forget: &sample }),
        (
            "viker-kl",
            LossSpec::Viker { forget: &sample, references: &refs, lambda: args.lambda, regularizer: Regularizer::Kl },
        ),
        (
            "viker-jsd",
            LossSpec::Viker { forget: &sample, references: &refs, lambda: args.lambda, regularizer: Regularizer::Jsd },
        ),
        (
            "viker-cos",
            LossSpec::Viker { forget: &sample, references: &refs, lambda: args.lambda, regularizer: Regularizer::Cos },
        ),
        ("npo", LossSpec::Npo { forget: &sample, full: &params, beta: 0.4 }),
        ("idkpo", LossSpec::IdkPo { forget: &sample, full: &params, idk_answers: &idk, beta: 0.4 }),
    ];
    for (name, spec) in &specs {
        let mut analytic = spec.gradient(&params)?;
        if let Some(eps) = args.perturb {
            // corrupt one component so the failure path is observable
            let slot = analytic.tensors_mut()[0].as_mut_slice();
            slot[0] += eps;
        }
        let fd = finite_diff_gradient(&params, GRAD_CHECK_STEP, |p| spec.value(p))?;
        let report: GradCheckReport = check_gradients(&analytic, &fd);
        fd_text.push_str(&format!(
            "loss {name} pass {} max_rel_err {:e} checked {} skipped {}\n",
            report.pass, report.max_rel_err, report.components_checked, report.components_skipped
        ));
        all_pass &= report.pass;
    }

    let mut identity_text = String::new();
    let mut onehot_text = String::new();
    let mut max_identity = 0.0f64;
    let mut max_onehot = 0.0f64;
    for triple in &sample {
        let report: ReweightReport =
            verify_reweighting_identity(&params, triple, &refs[&triple.id], args.lambda)?;
        max_identity = max_identity.max(report.max_discrepancy);
        all_pass &= report.pass;
        identity_text.push_str(&report.to_text("reweighting-identity"));
        for &lambda in &[0.0, 0.5, 1.0] {
            let oh = verify_onehot_scaling(&params, triple, 1, lambda)?;
            max_onehot = max_onehot.max(oh.max_discrepancy);
            all_pass &= oh.pass;
            onehot_text.push_str(&oh.to_text("onehot-scaling"));
        }
    }
    let summary = format!(
        "pass {all_pass}\nmax_discrepancy reweighting-identity {max_identity:e}\nmax_discrepancy onehot-scaling {max_onehot:e}\n"
    );
    crate::io::write_string(&args.out.join("gradient_checks.txt"), &fd_text)?;
    crate::io::write_string(&args.out.join("reweighting_identity.txt"), &identity_text)?;
    crate::io::write_string(&args.out.join("onehot_scaling.txt"), &onehot_text)?;
    crate::io::write_string(&args.out.join("summary.txt"), &summary)?;
    println!("verify-grad: pass {all_pass} (identity {max_identity:.2e}, one-hot {max_onehot:.2e})");
    Ok(if all_pass { 0 } else { 2 })
}

fn cmd_dump_dist(args: DumpDistArgs) -> Result<i32> {
    let (params, _) = checkpoint::load_checkpoint(&args.checkpoint)?;
    let ds = dataset_io::load_dataset(&args.data)?;
    ensure_model_matches(&params, &ds)?;
    let triple = ds.triple(args.triple).ok_or(Error::UnknownTriple(args.triple))?.clone();

    let (set, category) = reference_set_for(&ds, &args.refs, args.k, &triple)?;
    let cache = cache_dir_from_env();
    let refs = {
        let mut loaded = None;
        if let Some(dir) = &cache {
            let path = dir.join(reference_io::cache_file_name(triple.id, category, set.k()));
            if path.exists() {
                let (cached, _, _) = reference_io::load_reference(&path)?;
                cached.validate(triple.answer.len())?;
                loaded = Some(cached);
            }
        }
        match loaded {
            Some(r) => r,
            None => estimate_reference(&params, &set, &triple)?,
        }
    };

    let epsilon = median_entropy(&refs)?.max(f64::MIN_POSITIVE);
    let classes = classify_tokens(&refs, &triple.answer, 0.9, epsilon)?;
    for c in &classes {
        // key/normal should be disjoint; report rather than enforce
        if c.is_normal && c.is_key {
            eprintln!(
                "note: position {} is flagged both normal and key (tau 0.9, epsilon {:.3e})",
                c.position, epsilon
            );
        }
    }

    let vocab = params.config.vocab_size;
    let mut csv = String::from("table,position,token,entropy,is_normal,is_key");
    for v in 0..vocab {
        csv.push_str(&format!(",p{v}"));
    }
    csv.push('\n');
    for (i, class) in classes.iter().enumerate() {
        let current =
            crate::model::forward_token_dist(&params, &triple.image, &triple.question, &triple.answer[..i], i + 1)?;
        let current_entropy = crate::analysis::entropy(&current)?;
        for (table, dist, entropy) in [
            ("current", &current, current_entropy),
            ("reference", &refs.per_position[i], class.entropy),
        ] {
            csv.push_str(&format!(
                "{table},{},{},{:.6},{},{}",
                class.position, class.token, entropy, class.is_normal, class.is_key
            ));
            for v in 0..vocab {
                csv.push_str(&format!(",{:.6}", dist.probs[v]));
            }
            csv.push('\n');
        }
    }
    crate::io::write_string(&args.out, &csv)?;
    println!("dump-dist: wrote {} rows to {}", 2 * classes.len(), args.out.display());
    Ok(0)
}

fn cmd_report(args: ReportArgs) -> Result<i32> {
    let entries = std::fs::read_dir(&args.runs)
        .map_err(|e| Error::io(args.runs.display().to_string(), e))?;
    let mut run_dirs: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(args.runs.display().to_string(), e))?;
        let path = entry.path();
        if path.is_dir() && path.join("run.txt").exists() && path.join("metrics.txt").exists() {
            run_dirs.push(path);
        }
    }
    run_dirs.sort();
    if run_dirs.is_empty() {
        return Err(Error::Validation(format!(
            "no run directories with run.txt + metrics.txt under {}",
            args.runs.display()
        )));
    }

    // method+seed from run.txt, manifest+metrics from metrics.txt
    struct Run {
        method: String,
        metrics: BTreeMap<(String, String), f64>,
        manifest: Vec<String>,
    }
    let mut runs = Vec::new();
    for dir in &run_dirs {
        let run_text = crate::io::read_to_string(&dir.join("run.txt"))?;
        let mut method = None;
        for line in run_text.lines() {
            if let Some(rest) = line.strip_prefix("config.method ") {
                method = Some(rest.to_string());
            }
        }
        let metrics_text = crate::io::read_to_string(&dir.join("metrics.txt"))?;
        let mut manifest = Vec::new();
        let mut metrics = BTreeMap::new();
        for (lineno, line) in metrics_text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("manifest ") {
                manifest.push(rest.to_string());
            } else if let Some(rest) = line.strip_prefix("metric ") {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                if fields.len() != 4 {
                    return Err(Error::parse(
                        dir.join("metrics.txt").display().to_string(),
                        lineno + 1,
                        "metric line needs 'split name mean std'",
                    ));
                }
                let mean: f64 = fields[2].parse().map_err(|_| {
                    Error::parse(
                        dir.join("metrics.txt").display().to_string(),
                        lineno + 1,
                        "invalid mean",
                    )
                })?;
                metrics.insert((fields[0].to_string(), fields[1].to_string()), mean);
            }
        }
        runs.push(Run {
            method: method
                .ok_or_else(|| Error::Validation(format!("{}: run.txt lacks config.method", dir.display())))?,
            metrics,
            manifest,
        });
    }

    // all runs must describe the same dataset
    let first_manifest = &runs[0].manifest;
    for (dir, run) in run_dirs.iter().zip(&runs) {
        if &run.manifest != first_manifest {
            return Err(Error::Validation(format!(
                "dataset manifest in {} differs from the first run; refusing to aggregate",
                dir.display()
            )));
        }
    }

    let mut methods: Vec<String> = runs.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut csv = String::from("method,split,metric,mean,std,n_runs\n");
    for method in &methods {
        let group: Vec<&Run> = runs.iter().filter(|r| &r.method == method).collect();
        let mut keys: Vec<(String, String)> =
            group[0].metrics.keys().cloned().collect();
        keys.sort();
        for key in keys {
            let vals: Vec<f64> =
                group.iter().filter_map(|r| r.metrics.get(&key)).copied().collect();
            let (mean, std) = mean_std(&vals);
            csv.push_str(&format!(
                "{method},{},{},{:.6},{:.6},{}\n",
                key.0,
                key.1,
                mean,
                std,
                vals.len()
            ));
        }
    }
    crate::io::write_string(&args.out, &csv)?;
    println!("report: aggregated {} runs over {} methods -> {}", runs.len(), methods.len(), args.out.display());
    Ok(0)
}
