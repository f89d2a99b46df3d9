use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cadaft::data::{content_hash, Split};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_cadaft");

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

fn cadaft(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("CADAFT_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = cadaft(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small benchmark and short training so every test stays quick.
const SMALL: &[&str] = &[
    "--set",
    "data.numeric.sizes = { source_train = 200, id_test = 100, target_unlabeled = 150, target_fewshot = 8, ood_test = 100 }",
    "--set",
    "train.epochs=4",
    "--set",
    "train.disc_steps=3",
    "--set",
    "train.batch_size=32",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn small_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&with_small(&["generate", "--out", p(&data)]));
    data
}

fn manifest(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn example_config_spells_out_the_defaults() {
    let a = ok(&["show-config"]);
    let b = ok(&["show-config", "--config", p(&example_config())]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn default_generate_writes_splits_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["generate", "--config", p(&example_config()), "--out", p(&out)]);
    let m = manifest(&out.join("manifest.json"));
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 0);
    let listed = m["datasets"].as_array().unwrap();
    assert_eq!(listed.len(), Split::ALL.len());
    for (entry, split) in listed.iter().zip(Split::ALL) {
        let file = out.join(split.file_name());
        assert_eq!(entry["path"], split.file_name());
        assert_eq!(entry["sha256"], content_hash(&fs::read(&file).unwrap()));
    }
    let lines = fs::read_to_string(out.join("source-train.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 4001);
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--seed", "9", "--out", p(&a)]);
    ok(&["generate", "--seed", "9", "--out", p(&b)]);
    for split in Split::ALL {
        let name = split.file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    let c = dir.path().join("c");
    ok(&["generate", "--seed", "10", "--out", p(&c)]);
    assert_ne!(
        fs::read(a.join("ood-test.jsonl")).unwrap(),
        fs::read(c.join("ood-test.jsonl")).unwrap()
    );
}

#[test]
fn textlike_generate_keeps_sentence_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    ok(&[
        "generate",
        "--set",
        "data.kind=textlike",
        "--set",
        "data.textlike.sizes = { source_train = 20, id_test = 5, target_unlabeled = 5, target_fewshot = 2, ood_test = 5 }",
        "--out",
        p(&out),
    ]);
    let pairs = fs::read_to_string(out.join("ood-test.pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 5);
    assert_eq!(manifest(&out.join("manifest.json"))["outputs"].as_array().unwrap().len(), 5);
}

#[test]
fn out_of_range_alignment_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let r = cadaft(&["generate", "--set", "data.numeric.target_alignment=1.5", "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("data.numeric.target_alignment"));
    assert!(!out.exists());

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[data.numeric]\nsource_alignment = [1.5]\n").unwrap();
    let r = cadaft(&["generate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("data.numeric.source_alignment[0]"));
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train\nepochs = 1\n").unwrap();
    assert_eq!(cadaft(&["show-config", "--config", p(&cfg)]).status.code(), Some(2));
    fs::write(&cfg, "[train]\nepochs = -1\n").unwrap();
    let r = cadaft(&["show-config", "--config", p(&cfg)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("train.epochs"));
    assert_eq!(cadaft(&["train"]).status.code(), Some(2));
}

#[test]
fn erm_only_ignores_target_splits() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    fs::remove_file(data.join("target-unlabeled.jsonl")).unwrap();
    fs::write(data.join("target-fewshot.jsonl"), "not a dataset").unwrap();
    let out = dir.path().join("run");
    let mut args = with_small(&["train", "--data", p(&data), "--out", p(&out)]);
    args.extend(["--set", "train.ablation=erm_only"]);
    ok(&args);
    let m = manifest(&out.join("manifest.json"));
    let roles: Vec<&str> = m["datasets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["role"].as_str().unwrap())
        .collect();
    assert_eq!(roles, ["source-train", "id-test", "ood-test"]);

    let r = cadaft(&with_small(&["train", "--data", p(&data), "--out", p(&out)]));
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("target-"));
}

#[test]
fn dims_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("r");
    let mut args = with_small(&["train", "--data", p(&data), "--out", p(&out)]);
    args.extend(["--set", "data.numeric.core_dims=5"]);
    let r = cadaft(&args);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("dims"));
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_owned)
        .collect()
}

#[test]
fn metrics_rows_follow_the_cadence() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    for (epochs, every, rows) in [(4, 1, 4), (6, 2, 3), (5, 2, 2)] {
        let out = dir.path().join(format!("r{epochs}-{every}"));
        let mut args = with_small(&["train", "--data", p(&data), "--out", p(&out)]);
        let (e, c) = (format!("train.epochs={epochs}"), format!("train.eval_every={every}"));
        args.extend(["--set", &e, "--set", &c]);
        ok(&args);
        assert_eq!(csv_rows(&out.join("metrics.csv")).len(), rows);
        assert_eq!(csv_rows(&out.join("final_metrics.csv")).len(), 1);
    }
}

#[test]
fn resume_with_zero_epochs_reproduces_the_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let first = dir.path().join("first");
    ok(&with_small(&["train", "--data", p(&data), "--out", p(&first)]));
    let again = dir.path().join("again");
    let ck = first.join("checkpoint.json");
    let mut args = with_small(&["train", "--data", p(&data), "--out", p(&again), "--resume", p(&ck)]);
    args.extend(["--set", "train.epochs=0"]);
    ok(&args);
    for f in ["final_metrics.csv", "metrics.csv", "checkpoint.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    let m = manifest(&again.join("manifest.json"));
    assert_eq!(m["inputs"][0]["sha256"], content_hash(&fs::read(&ck).unwrap()));
}

#[test]
fn split_training_matches_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let whole = dir.path().join("whole");
    ok(&with_small(&["train", "--data", p(&data), "--out", p(&whole)]));

    let half = dir.path().join("half");
    let mut args = with_small(&["train", "--data", p(&data), "--out", p(&half)]);
    args.extend(["--set", "train.epochs=2"]);
    ok(&args);
    let rest = dir.path().join("rest");
    let ck = half.join("checkpoint.json");
    let mut args = with_small(&["train", "--data", p(&data), "--out", p(&rest), "--resume", p(&ck)]);
    args.extend(["--set", "train.epochs=2"]);
    ok(&args);
    assert_eq!(
        fs::read(whole.join("checkpoint.json")).unwrap(),
        fs::read(rest.join("checkpoint.json")).unwrap()
    );

    let chunked = dir.path().join("chunked");
    let mut args = with_small(&["train", "--data", p(&data), "--out", p(&chunked)]);
    args.extend(["--set", "checkpoint_every=3"]);
    ok(&args);
    assert!(chunked.join("checkpoint-epoch-3.json").exists());
    assert_eq!(
        fs::read(whole.join("checkpoint.json")).unwrap(),
        fs::read(chunked.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn manifest_alone_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let first = dir.path().join("first");
    let mut args = with_small(&["train", "--data", p(&data), "--out", p(&first)]);
    args.extend(["--seed", "5", "--set", "train.ablation=no_confounder"]);
    ok(&args);
    let second = dir.path().join("second");
    let m = first.join("manifest.json");
    ok(&["train", "--config", p(&m), "--data", p(&data), "--out", p(&second)]);
    for f in ["metrics.csv", "checkpoint.json"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
    let (a, b) = (manifest(&m), manifest(&second.join("manifest.json")));
    assert_eq!(a["config"], b["config"]);
    assert_eq!(a["datasets"], b["datasets"]);
    assert_eq!(b["seed"], 5);
}

fn comparison(path: &Path) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let (runs, agg) = text.split_once("\n\n").unwrap();
    let parse = |block: &str| -> Vec<Vec<String>> {
        block
            .lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(|l| l.split(',').map(str::to_owned).collect())
            .collect()
    };
    (parse(runs), parse(agg))
}

#[test]
fn ablation_with_one_seed_has_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("abl");
    ok(&with_small(&["ablation", "--data", p(&data), "--out", p(&out), "--seeds", "1"]));
    let (runs, agg) = comparison(&out.join("comparison.csv"));
    let names: Vec<&str> = runs.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["erm_only", "no_confounder", "full"]);
    assert_eq!(agg.len(), 3);
    assert!(out.join("runs/full-seed1/final_metrics.csv").exists());
    assert_eq!(manifest(&out.join("manifest.json"))["seeds"], serde_json::json!([1]));
}

#[test]
fn ablation_aggregates_recompute_from_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("abl");
    ok(&with_small(&["ablation", "--data", p(&data), "--out", p(&out), "--seeds", "1-5"]));
    let (runs, agg) = comparison(&out.join("comparison.csv"));
    assert_eq!(runs.len(), 15);
    assert_eq!(agg.len(), 3);
    for a in &agg {
        let mine: Vec<&Vec<String>> = runs.iter().filter(|r| r[0] == a[0]).collect();
        assert_eq!(a[1], mine.len().to_string());
        for (col, mean_at) in [(2, 2), (3, 4)] {
            let v: Vec<f64> = mine.iter().map(|r| r[col].parse().unwrap()).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let got: f64 = a[mean_at].parse().unwrap();
            assert!((got - mean).abs() < 1e-12, "{a:?}");
        }
    }
}

#[test]
fn output_root_applies_to_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let r = Command::new(BIN)
        .args(["generate", "--set", "data.numeric.sizes.source_train=10", "--out", "rel/d"])
        .env("CADAFT_OUTPUT_ROOT", dir.path())
        .current_dir(dir.path().join("..").canonicalize().unwrap())
        .output()
        .unwrap();
    assert!(r.status.success());
    assert!(dir.path().join("rel/d/manifest.json").exists());
}

fn annotate_fixture(dir: &Path, body: &str) -> (PathBuf, PathBuf) {
    let input = dir.join("pairs.jsonl");
    fs::write(&input, body).unwrap();
    (input, dir.join("out/annotated.jsonl"))
}

#[test]
fn annotate_two_pair_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (input, out) = annotate_fixture(
        dir.path(),
        "{\"tokens_1\":\"a b c\",\"tokens_2\":\"a b d\",\"label\":0}\n\
         {\"tokens_1\":[\"a\",\"b\"],\"tokens_2\":[\"a\",\"b\"],\"label\":1}\n",
    );
    ok(&["annotate", p(&input), "--out", p(&out)]);
    let t_of = |path: &Path| -> Vec<u64> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["t"].as_u64().unwrap())
            .collect()
    };
    assert_eq!(t_of(&out), [0, 1]);
    let m = manifest(&dir.path().join("out/annotated.manifest.json"));
    assert_eq!(m["alpha"], 0.4);
    let sweep = fs::read_to_string(dir.path().join("out/annotated.sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "alpha,label_0,label_1");
    assert_eq!(lines.len(), 22);
    assert_eq!(lines[1], "0,1,1");
    assert_eq!(lines[21], "1,0,0");

    let strict = dir.path().join("strict.jsonl");
    ok(&["annotate", p(&input), "--out", p(&strict), "--alpha", "0.6"]);
    assert_eq!(t_of(&strict), [0, 0]);
}

#[test]
fn annotate_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let (input, out) = annotate_fixture(dir.path(), "");
    ok(&["annotate", p(&input), "--out", p(&out)]);
    assert_eq!(fs::read(&out).unwrap(), b"");
    assert_eq!(fs::read(dir.path().join("out/annotated.sweep.csv")).unwrap(), b"");
}

#[test]
fn annotate_malformed_line_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (input, out) = annotate_fixture(
        dir.path(),
        "{\"tokens_1\":\"a\",\"tokens_2\":\"a\"}\n\n{\"tokens_1\":\"a\"\n",
    );
    let r = cadaft(&["annotate", p(&input), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("pairs.jsonl:3:"));
    assert!(!dir.path().join("out").exists());

    let r = cadaft(&["annotate", p(&input), "--out", p(&out), "--alpha", "1.5"]);
    assert_eq!(r.status.code(), Some(2));
}
