//! End-to-end tests of the command-line interface: every command is run as a
//! real subprocess against a small shared benchmark.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::LazyLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_viker"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("failed to spawn viker");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Shared fixture: a small benchmark, an origin model, a full model and one
/// unlearning run per method, built once for the whole test binary.
struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data.txt")
    }
    fn origin_ckpt(&self) -> PathBuf {
        self.root.join("origin/checkpoint.txt")
    }
    fn full_ckpt(&self) -> PathBuf {
        self.root.join("full/checkpoint.txt")
    }
    fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
}

static FIXTURE: LazyLock<Fixture> = LazyLock::new(|| {
    let root = std::env::temp_dir().join(format!("viker-cli-test-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let fx = Fixture { root };

    // small custom spec keeps training fast
    let spec = "viker-benchmark-spec v1\nn_personas 12\nforget_fraction 0.2\nseed 5\n";
    std::fs::write(fx.root.join("spec.txt"), spec).unwrap();
    run_ok(bin()
        .arg("synth")
        .arg("--spec")
        .arg(fx.root.join("spec.txt"))
        .arg("--out")
        .arg(fx.data()));
    run_ok(bin()
        .args(["train", "--stage", "origin", "--seed", "1", "--steps", "2000"])
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(fx.root.join("origin")));
    run_ok(bin()
        .args(["train", "--stage", "full", "--seed", "2", "--steps", "5000"])
        .arg("--init")
        .arg(fx.origin_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(fx.root.join("full")));
    // batched unlearning makes the seed matter (full batch is seed-free)
    for (method, dir, seed) in
        [("viker", "viker-s1", "1"), ("viker", "viker-s2", "2"), ("ga", "ga-s1", "1")]
    {
        run_ok(bin()
            .args(["unlearn", "--method", method, "--seed", seed, "--steps", "60", "--batch-size", "8"])
            .arg("--checkpoint")
            .arg(fx.full_ckpt())
            .arg("--data")
            .arg(fx.data())
            .arg("--out")
            .arg(fx.runs().join(dir)));
        run_ok(bin()
            .arg("eval")
            .arg("--checkpoint")
            .arg(fx.runs().join(dir).join("checkpoint.txt"))
            .arg("--origin")
            .arg(fx.origin_ckpt())
            .arg("--data")
            .arg(fx.data())
            .arg("--out")
            .arg(fx.runs().join(dir)));
    }
    fx
});

#[test]
fn synth_is_deterministic_and_validates_before_writing() {
    let fx = &*FIXTURE;
    let out2 = fx.root.join("data-again.txt");
    run_ok(bin()
        .arg("synth")
        .arg("--spec")
        .arg(fx.root.join("spec.txt"))
        .arg("--out")
        .arg(&out2));
    assert_eq!(read(&fx.data()), read(&out2), "synth outputs differ across identical invocations");
    assert!(fx.root.join("data.txt.manifest").exists());

    // invalid fraction: rejected before any file is written
    let bad_spec = fx.root.join("bad-spec.txt");
    std::fs::write(&bad_spec, "viker-benchmark-spec v1\nforget_fraction 1.5\n").unwrap();
    let target = fx.root.join("must-not-exist.txt");
    let out = bin()
        .arg("synth")
        .arg("--spec")
        .arg(&bad_spec)
        .arg("--out")
        .arg(&target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!target.exists(), "synth wrote a file despite invalid spec");
}

#[test]
fn synth_defaults_produce_the_48_persona_benchmark() {
    let fx = &*FIXTURE;
    let out = fx.root.join("default-data.txt");
    run_ok(bin().args(["synth", "--defaults", "--seed", "1"]).arg("--out").arg(&out));
    let text = read(&out);
    assert!(text.contains("manifest n_personas 48"));
    assert!(text.contains("manifest forget_fraction 0.1"));
}

#[test]
fn full_model_reproduces_training_answers_and_origin_is_near_chance() {
    let fx = &*FIXTURE;
    let eval_dir = fx.root.join("eval-full");
    run_ok(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--origin")
        .arg(fx.origin_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&eval_dir));
    let csv = read(&eval_dir.join("metrics.csv"));
    // header + 3 splits x 5 metrics
    assert_eq!(csv.lines().count(), 16, "csv schema: {csv}");
    let retain_rouge: f64 = csv
        .lines()
        .find(|l| l.starts_with("retain,rouge_l"))
        .and_then(|l| l.split(',').nth(2))
        .unwrap()
        .parse()
        .unwrap();
    assert!((retain_rouge - 1.0).abs() < 1e-9, "full model retain rouge {retain_rouge}");
    let retain_acc: f64 = csv
        .lines()
        .find(|l| l.starts_with("retain,acc"))
        .and_then(|l| l.split(',').nth(2))
        .unwrap()
        .parse()
        .unwrap();
    assert!(retain_acc > 0.99, "full model retain acc {retain_acc}");

    // origin model: near-chance accuracy everywhere (4 candidates)
    let eval_origin = fx.root.join("eval-origin");
    run_ok(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(fx.origin_ckpt())
        .arg("--origin")
        .arg(fx.origin_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&eval_origin));
    let csv = read(&eval_origin.join("metrics.csv"));
    for split in ["forget", "generalization", "retain"] {
        let acc: f64 = csv
            .lines()
            .find(|l| l.starts_with(&format!("{split},acc")))
            .and_then(|l| l.split(',').nth(2))
            .unwrap()
            .parse()
            .unwrap();
        assert!(acc < 0.6, "origin {split} accuracy {acc} is far from chance");
    }
}

#[test]
fn unlearn_is_idempotent_with_timing_isolated() {
    let fx = &*FIXTURE;
    let again = fx.runs().join("viker-s1-again");
    run_ok(bin()
        .args(["unlearn", "--method", "viker", "--seed", "1", "--steps", "60", "--batch-size", "8"])
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&again));
    let first = fx.runs().join("viker-s1");
    assert_eq!(read(&first.join("checkpoint.txt")), read(&again.join("checkpoint.txt")));
    assert_eq!(read(&first.join("run.txt")), read(&again.join("run.txt")));
    assert_eq!(read(&first.join("config.txt")), read(&again.join("config.txt")));
    // wall clock lives only in the timing file
    assert!(!read(&first.join("run.txt")).contains("wall_clock"));
    assert!(read(&first.join("run.timing.txt")).starts_with("wall_clock_seconds "));
}

#[test]
fn unlearn_records_lambda_and_k_and_warns_on_mismatched_flags() {
    let fx = &*FIXTURE;
    let dir = fx.runs().join("viker-flags");
    let out = run_ok(bin()
        .args(["unlearn", "--method", "viker", "--lambda", "0.5", "--k", "5", "--steps", "5"])
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&dir));
    drop(out);
    let run = read(&dir.join("run.txt"));
    assert!(run.contains("config.lambda 0.5"));
    assert!(run.contains("config.k 5"));

    // --lambda with --method ga: warning, ignored, run proceeds
    let dir2 = fx.runs().join("ga-flags");
    let out = run_ok(bin()
        .args(["unlearn", "--method", "ga", "--lambda", "0.9", "--steps", "5"])
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&dir2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning"), "expected a warning on stderr, got: {stderr}");
    let run = read(&dir2.join("run.txt"));
    assert!(run.contains("config.lambda 0.5"), "ignored lambda must stay at its default");
}

#[test]
fn viker_without_the_reference_pool_names_the_missing_pool() {
    let fx = &*FIXTURE;
    // strip the people pool from a copy of the dataset
    let stripped: String = read(&fx.data())
        .lines()
        .filter(|l| !l.starts_with("refpool|people|"))
        .collect::<Vec<_>>()
        .join("\n");
    let data2 = fx.root.join("data-no-people.txt");
    std::fs::write(&data2, stripped + "\n").unwrap();
    let out = bin()
        .args(["unlearn", "--method", "viker", "--steps", "5"])
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(&data2)
        .arg("--out")
        .arg(fx.root.join("no-pool-run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("people"), "error must name the missing pool: {stderr}");
}

#[test]
fn ga_performs_no_reference_computation() {
    let fx = &*FIXTURE;
    let cache = fx.root.join("cache-ga");
    run_ok(bin()
        .args(["unlearn", "--method", "ga", "--steps", "5"])
        .env("VIKER_CACHE_DIR", &cache)
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(fx.runs().join("ga-nocache")));
    assert!(!cache.exists(), "ga run must not create reference cache files");

    let cache_vk = fx.root.join("cache-vk");
    run_ok(bin()
        .args(["unlearn", "--method", "viker", "--steps", "5"])
        .env("VIKER_CACHE_DIR", &cache_vk)
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(fx.runs().join("vk-cache")));
    let n = std::fs::read_dir(&cache_vk).unwrap().count();
    assert!(n > 0, "viker run with a cache dir must populate it");
}

#[test]
fn refdist_writes_loadable_cache_files() {
    let fx = &*FIXTURE;
    let cache = fx.root.join("refdist-cache");
    run_ok(bin()
        .args(["refdist", "--refs", "people", "--k", "3"])
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&cache));
    let mut files: Vec<_> = std::fs::read_dir(&cache).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert!(!files.is_empty());
    let (refs, _, _) = viker::io::reference::load_reference(&files[0]).unwrap();
    assert_eq!(refs.source_k, 3);
    assert!(refs.frozen);
}

#[test]
fn verify_grad_passes_clean_and_fails_when_corrupted() {
    let fx = &*FIXTURE;
    let out_dir = fx.root.join("verify");
    let out = run_ok(bin()
        .arg("verify-grad")
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&out_dir));
    assert!(String::from_utf8_lossy(&out.stdout).contains("pass true"));
    let summary = read(&out_dir.join("summary.txt"));
    assert!(summary.contains("max_discrepancy reweighting-identity"));
    assert!(summary.contains("max_discrepancy onehot-scaling"));

    let out = bin()
        .arg("verify-grad")
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--perturb")
        .arg("0.001")
        .arg("--out")
        .arg(fx.root.join("verify-bad"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "corrupted gradients must exit 2");
}

#[test]
fn dump_dist_rows_match_answer_length_and_classification() {
    let fx = &*FIXTURE;
    let data = read(&fx.data());
    let forget_id: u32 = data
        .lines()
        .find(|l| l.starts_with("triple|") && l.contains("|forget|"))
        .map(|l| l.split('|').nth(1).unwrap().parse().unwrap())
        .unwrap();
    let out_csv = fx.root.join("dump.csv");
    run_ok(bin()
        .args(["dump-dist", "--refs", "people", "--k", "5"])
        .arg("--triple")
        .arg(forget_id.to_string())
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&out_csv));
    let csv = read(&out_csv);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 5, "answers have 5 positions; expect |y| x 2 rows");
    // flags come from classify_tokens on the same references
    let ds = viker::io::dataset::load_dataset(&fx.data()).unwrap();
    let (params, _) = viker::io::checkpoint::load_checkpoint(&fx.full_ckpt()).unwrap();
    let triple = ds.triple(forget_id).unwrap().clone();
    let pool = ds.reference_pool(viker::reference::RefCategory::People).unwrap();
    let set = viker::reference::ReferenceSet::new(pool[..5].to_vec(), viker::reference::RefCategory::People).unwrap();
    let refs = viker::reference::estimate_reference(&params, &set, &triple).unwrap();
    let eps = viker::analysis::median_entropy(&refs).unwrap().max(f64::MIN_POSITIVE);
    let classes = viker::analysis::classify_tokens(&refs, &triple.answer, 0.9, eps).unwrap();
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        let pos: usize = fields[1].parse().unwrap();
        let class = &classes[pos - 1];
        assert_eq!(fields[4], class.is_normal.to_string());
        assert_eq!(fields[5], class.is_key.to_string());
    }
    // the key position carries the highest reference entropy
    let key_pos = triple.key_mask.as_ref().unwrap().iter().position(|&b| b).unwrap();
    let argmax = classes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.entropy.total_cmp(&b.1.entropy))
        .unwrap()
        .0;
    assert_eq!(argmax, key_pos);

    let out = bin()
        .args(["dump-dist", "--triple", "999999"])
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(fx.root.join("dump-bad.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown triple id must be a validation error");
}

#[test]
fn report_aggregates_by_method_and_rejects_mismatched_manifests() {
    let fx = &*FIXTURE;
    let report_csv = fx.root.join("report.csv");
    run_ok(bin()
        .arg("report")
        .arg("--runs")
        .arg(fx.runs())
        .arg("--out")
        .arg(&report_csv));
    let report = read(&report_csv);
    let methods: Vec<&str> = report
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let mut sorted = methods.clone();
    sorted.sort();
    assert_eq!(methods, sorted, "rows must be ordered by method name");
    // two viker seeds -> nonzero std somewhere in the viker rows
    let viker_stds: Vec<f64> = report
        .lines()
        .filter(|l| l.starts_with("viker,"))
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert!(viker_stds.iter().any(|&s| s > 0.0), "std columns must be populated across seeds");
    assert!(report.lines().any(|l| l.starts_with("viker,") && l.ends_with(",2")));
    assert!(report.lines().any(|l| l.starts_with("ga,") && l.ends_with(",1")));

    // a run evaluated against a different dataset must poison the aggregation
    let other_runs = fx.root.join("runs-mismatch");
    std::fs::create_dir_all(&other_runs).unwrap();
    for dir in ["viker-s1", "ga-s1"] {
        let src = fx.runs().join(dir);
        let dst = other_runs.join(dir);
        std::fs::create_dir_all(&dst).unwrap();
        for f in ["run.txt", "metrics.txt"] {
            std::fs::copy(src.join(f), dst.join(f)).unwrap();
        }
    }
    let metrics = read(&other_runs.join("ga-s1/metrics.txt"))
        .replace("manifest seed 5", "manifest seed 99");
    std::fs::write(other_runs.join("ga-s1/metrics.txt"), metrics).unwrap();
    let out = bin()
        .arg("report")
        .arg("--runs")
        .arg(&other_runs)
        .arg("--out")
        .arg(fx.root.join("report-bad.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "mismatched manifests must be a hard error");
    assert!(!fx.root.join("report-bad.csv").exists(), "no partial table on error");
}

#[test]
fn regularizer_and_reference_category_ablations_run_end_to_end() {
    let fx = &*FIXTURE;
    // JSD regularizer with pattern references, and the own-image (`self`)
    // configuration, both produce runs distinct from the KL/people default.
    let jsd_dir = fx.runs().join("viker-jsd-pattern");
    run_ok(bin()
        .args(["unlearn", "--method", "viker", "--reg", "jsd", "--refs", "pattern", "--steps", "20"])
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&jsd_dir));
    assert!(read(&jsd_dir.join("run.txt")).contains("config.regularizer jsd"));
    assert!(read(&jsd_dir.join("run.txt")).contains("config.reference_pool pattern"));

    let self_dir = fx.runs().join("viker-self");
    run_ok(bin()
        .args(["unlearn", "--method", "viker", "--refs", "self", "--steps", "20"])
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&self_dir));
    let kl_dir = fx.runs().join("viker-kl-people-short");
    run_ok(bin()
        .args(["unlearn", "--method", "viker", "--steps", "20"])
        .arg("--checkpoint")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(fx.data())
        .arg("--out")
        .arg(&kl_dir));
    let kl = read(&kl_dir.join("checkpoint.txt"));
    assert_ne!(kl, read(&jsd_dir.join("checkpoint.txt")));
    assert_ne!(kl, read(&self_dir.join("checkpoint.txt")));
}

#[test]
fn train_rejects_checkpoints_with_mismatched_vocab() {
    let fx = &*FIXTURE;
    // a dataset with a different img_dim produces an incompatible model config
    let spec = "viker-benchmark-spec v1\nn_personas 12\nforget_fraction 0.2\nimg_dim 4\nseed 5\n";
    let spec_path = fx.root.join("spec-img4.txt");
    std::fs::write(&spec_path, spec).unwrap();
    let data4 = fx.root.join("data-img4.txt");
    run_ok(bin().arg("synth").arg("--spec").arg(&spec_path).arg("--out").arg(&data4));
    let out = bin()
        .args(["train", "--stage", "full", "--steps", "1"])
        .arg("--init")
        .arg(fx.full_ckpt())
        .arg("--data")
        .arg(&data4)
        .arg("--out")
        .arg(fx.root.join("train-mismatch"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("does not match"), "{stderr}");
}
