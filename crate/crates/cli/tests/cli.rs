use std::path::Path;
use std::process::{Command, Output};

fn saap(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saap")).args(args).env("SAAP_DATA_DIR", data).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(data: &Path, args: &[&str]) -> String {
    let out = saap(data, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const GEN: &[&str] = &[
    "gen-data", "--heads", "2", "--train-prompts", "2", "--eval-prompts", "1", "--n-keys", "3000", "--n-queries", "40",
    "--set", "planted_min_gap=512", "--set", "local_span=128",
];

fn pipeline(data: &Path) {
    ok(data, GEN);
    ok(data, &["train-kmeans", "--c", "16", "--iters", "4", "--roped", "true"]);
    ok(data, &["train-qmodel", "--hidden", "16", "--lr", "1e-3", "--epochs", "2", "--batch-size", "32", "--recent", "128", "--long-range-threshold", "256"]);
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn error_kind(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    let v: serde_json::Value = serde_json::from_str(last).expect("machine-readable error line");
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn full_pipeline_emits_documented_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    pipeline(&data);
    ok(&data, &["build-index"]);
    assert!(data.join("head_001/index/prompt_000/ivf_off.u64").is_file());

    let mse = ok(&data, &["eval-mse", "--method", "kmeans", "--ells", "1,4,16", "--max-queries", "8"]);
    let lines: Vec<&str> = mse.lines().collect();
    assert_eq!(lines[0], "#schema=saap.mse_selectivity.v1");
    assert_eq!(lines[1], "method,param,selectivity,mse");
    assert_eq!(lines.len(), 5);
    let last: Vec<&str> = lines[4].split(',').collect();
    assert_eq!((last[0], last[1], last[2]), ("kmeans", "16", "1"));
    assert!(last[3].parse::<f64>().unwrap() < 1e-9);

    let probes = ok(&data, &["sweep-probes", "--cs", "8", "--ells", "0,1,2,4,8", "--recent", "128", "--max-queries", "8"]);
    assert!(probes.starts_with("#schema=saap.probe_sweep.v1\nC,ell,selectivity,coverage,max_visited_bucket\n"));
    let sel: Vec<f64> = probes.lines().skip(2).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(sel.len(), 5);
    assert!(sel.windows(2).all(|w| w[0] < w[1]), "{sel:?}");

    let assign = ok(&data, &["compare-assigners", "--ells", "2,16", "--recent", "128", "--max-queries", "8"]);
    assert!(assign.starts_with("#schema=saap.assignment_comparison.v1\nassigner,ell,coverage\n"));
    assert_eq!(assign.lines().count(), 2 + 6);

    let out_dir = tmp.path().join("diag");
    let args = ["diagnostics", "--span-k", "32", "--recent", "128", "--sample-size", "512", "--n-ood-queries", "100", "--out"];
    let mut full: Vec<&str> = args.to_vec();
    full.push(out_dir.to_str().unwrap());
    ok(&data, &full);
    for (file, header) in [
        ("attention_span.csv", "#schema=saap.attention_span.v1\nhead,k,span_fraction\n"),
        ("bucket_balance.csv", "#schema=saap.bucket_balance.v1\nhead,regime,mean_deviation,std_deviation\n"),
        ("assignment_overlap.csv", "#schema=saap.assignment_overlap.v1\nhead,shift,tv_distance,top5pct_query_share\n"),
    ] {
        assert!(std::fs::read_to_string(out_dir.join(file)).unwrap().starts_with(header), "{file}");
    }

    let all = ok(&data, &["compare-baselines", "--fractions", "0.2", "--bins", "8", "--lsh", "4x4", "--windows", "128", "--ells", "4", "--hash-bits", "8", "--reformer-buckets", "8", "--max-queries", "4"]);
    let methods: Vec<&str> = all.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["kmeans", "kmeans_roped", "saap", "streaming", "magicpig", "kdeformer", "reformer", "random"]);
}

#[test]
fn runs_are_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a);
    pipeline(&b);
    assert_eq!(files_under(&a), files_under(&b));
    let args = ["eval-mse", "--method", "random", "--fractions", "0.05,0.2", "--max-queries", "8", "--repetitions", "2"];
    assert_eq!(ok(&a, &args), ok(&b, &args));
    let other = tmp.path().join("c");
    let mut gen = GEN.to_vec();
    gen.extend(["--seed", "1"]);
    ok(&other, &gen);
    assert_ne!(
        std::fs::read(a.join("head_000/eval/prompt_000/keys_roped.tns")).unwrap(),
        std::fs::read(other.join("head_000/eval/prompt_000/keys_roped.tns")).unwrap()
    );
}

#[test]
fn config_file_matches_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&data, GEN);
    ok(&data, &["train-kmeans", "--c", "8", "--iters", "3"]);
    let cfg = tmp.path().join("exp.cfg");
    std::fs::write(&cfg, "# probe settings\nmethod = kmeans\nells = 1,2\nmax_queries = 8\nsink=1\nrecent=64\n").unwrap();
    let from_file = ok(&data, &["eval-mse", "--config", cfg.to_str().unwrap()]);
    let from_flags = ok(&data, &["eval-mse", "--method", "kmeans", "--ells", "1,2", "--max-queries", "8", "--sink", "1", "--recent", "64"]);
    assert_eq!(from_file, from_flags);
    // flags override the file
    let overridden = ok(&data, &["eval-mse", "--config", cfg.to_str().unwrap(), "--ells", "8"]);
    assert_eq!(overridden.lines().count(), 3);
}

#[test]
fn failures_exit_nonzero_with_an_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");

    let out = saap(&data, &["eval-mse", "--method", "kmeans"]);
    assert!(!out.status.success());
    assert_eq!(error_kind(&out), "missing_data");

    ok(&data, GEN);
    let out = saap(&data, GEN);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "config");

    ok(&data, &["train-kmeans", "--c", "8", "--iters", "2"]);
    let out = saap(&data, &["eval-mse", "--method", "sparse"]);
    assert_eq!(error_kind(&out), "invalid_argument");
    let out = saap(&data, &["eval-mse", "--method", "kmeans", "--ells", "9"]);
    assert_eq!(error_kind(&out), "invalid_argument");
    let out = saap(&data, &["eval-mse", "--method", "saap"]);
    assert_eq!(error_kind(&out), "invalid_argument");
    let out = saap(&data, &["compare-assigners"]);
    assert_eq!(error_kind(&out), "missing_data");
    let out = saap(&data, &["eval-mse", "--set", "no_such_key=1"]);
    assert_eq!(error_kind(&out), "config");
    let out = saap(&data, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");

    std::fs::write(data.join("head_000/partition/centroids.tns"), b"garbage").unwrap();
    let out = saap(&data, &["eval-mse", "--method", "kmeans", "--ells", "1"]);
    assert_eq!(error_kind(&out), "bad_magic");
}

#[test]
fn help_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = saap(tmp.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train-kmeans", "train-qmodel", "build-index", "eval-mse", "sweep-probes", "compare-assigners", "diagnostics", "compare-baselines"] {
        assert!(text.contains(sub), "{sub}");
    }
}
