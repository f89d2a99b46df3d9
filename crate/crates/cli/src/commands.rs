use std::fs;
use std::path::{Path, PathBuf};

use cadaft::checkpoint::{checkpoint_bytes, load_checkpoint};
use cadaft::data::Split;
use cadaft::datagen::{
    annotate_overlap, default_alpha_grid, generate_numeric, generate_textlike, sweep_alpha,
    SentencePair, SweepRow,
};
use cadaft::eval::{evaluate, metrics_csv, run_ablation_suite};
use cadaft::trainer::resume;
use cadaft::{Benchmark, MetricsRecord, TrainData, TrainState};

use crate::config::{DataKind, RunConfig};
use crate::failure::Failure;
use crate::manifest::{FileHash, RunManifest, MANIFEST_FILE};

pub const OUTPUT_ROOT_ENV: &str = "CADAFT_OUTPUT_ROOT";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_METRICS_FILE: &str = "final_metrics.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Relative output paths land under `$CADAFT_OUTPUT_ROOT` when it is set.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() && !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `bytes` to `dir/name` and records its hash under the bare name.
fn put(dir: &Path, name: &str, role: &str, bytes: &[u8], into: &mut Vec<FileHash>) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))?;
    into.push(FileHash::of_bytes(role, Path::new(name), bytes));
    Ok(())
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> Result<Vec<u8>, Failure> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(Failure::runtime)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let mut manifest = RunManifest::new("generate", Some(cfg));
    let (bench, pairs) = match cfg.data.kind {
        DataKind::Numeric => (generate_numeric(&cfg.data.numeric, cfg.seed)?, None),
        DataKind::Textlike => {
            let d = generate_textlike(&cfg.data.textlike, cfg.seed)?;
            (d.benchmark, Some(d.pairs))
        }
    };
    create_dir(out)?;
    for split in Split::ALL {
        let bytes = bench.split_bytes(split)?;
        put(out, &split.file_name(), split.name(), &bytes, &mut manifest.datasets)?;
    }
    if let Some(pairs) = pairs {
        for (split, rows) in pairs {
            let name = format!("{}.pairs.jsonl", split.name());
            put(out, &name, "sentence-pairs", &jsonl(&rows)?, &mut manifest.outputs)?;
        }
    }
    manifest.write(&out.join(MANIFEST_FILE))
}

/// Reads the splits a run needs; target splits are skipped when the
/// ablation never looks at them.
fn load_data(cfg: &RunConfig, dir: &Path, manifest: &mut RunManifest) -> Result<Benchmark, Failure> {
    let mut need = vec![Split::SourceTrain, Split::IdTest, Split::OodTest];
    if cfg.train.ablation.uses_target() {
        need.push(Split::TargetUnlabeled);
        if cfg.train.fewshot > 0 {
            need.push(Split::TargetFewshot);
        }
    }
    let bench = Benchmark::read_splits(dir, &need, &need).map_err(Failure::runtime)?;
    let want = cfg.dims();
    if bench.dims != want {
        return Err(Failure::config(format!(
            "data: {} holds dims {:?} but the configuration implies {:?}",
            dir.display(),
            bench.dims,
            want
        )));
    }
    for split in Split::ALL.into_iter().filter(|s| need.contains(s)) {
        manifest
            .datasets
            .push(FileHash::of(split.name(), &dir.join(split.file_name()))?);
    }
    Ok(bench)
}

/// Final evaluation of a state, with the epoch column counting completed
/// epochs.
fn final_record(state: &TrainState<f64>, cfg: &RunConfig, bench: &Benchmark) -> Result<MetricsRecord, Failure> {
    let mut rec = evaluate(&state.model, &bench.id_test, &bench.ood_test)?;
    rec.epoch = state.epoch;
    rec.seed = cfg.seed;
    rec.ablation = cfg.train.ablation;
    rec.train = state.history.last().map(|r| r.train).unwrap_or_default();
    Ok(rec)
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, from: Option<&Path>) -> Result<(), Failure> {
    let mut manifest = RunManifest::new("train", Some(cfg));
    let bench = load_data(cfg, data, &mut manifest)?;
    let tc = cfg.train_config();
    let mut state = match from {
        Some(p) => {
            manifest.inputs.push(FileHash::of("checkpoint", p)?);
            load_checkpoint::<f64>(p).map_err(Failure::runtime)?
        }
        None => TrainState::new(&tc, &bench.dims)?,
    };
    if state.model.dims() != &bench.dims {
        return Err(Failure::config("checkpoint model dimensions differ from the data"));
    }
    create_dir(out)?;
    let td = TrainData::from_benchmark(&bench);
    let chunk = if cfg.checkpoint_every == 0 {
        tc.epochs
    } else {
        cfg.checkpoint_every
    };
    let mut left = tc.epochs;
    loop {
        let step = chunk.min(left);
        let run = cadaft::TrainConfig {
            epochs: step,
            ..tc.clone()
        };
        state = resume(state, &run, &td)?.state;
        left -= step;
        if left == 0 {
            break;
        }
        let name = format!("checkpoint-epoch-{}.json", state.epoch);
        put(out, &name, "checkpoint", &checkpoint_bytes(&state)?, &mut manifest.outputs)?;
    }

    let last = final_record(&state, cfg, &bench)?;
    put(out, CHECKPOINT_FILE, "checkpoint", &checkpoint_bytes(&state)?, &mut manifest.outputs)?;
    put(out, METRICS_FILE, "metrics", metrics_csv(&state.history).as_bytes(), &mut manifest.outputs)?;
    put(
        out,
        FINAL_METRICS_FILE,
        "final-metrics",
        metrics_csv(std::slice::from_ref(&last)).as_bytes(),
        &mut manifest.outputs,
    )?;
    manifest.warnings = state.warnings.clone();
    eprintln!(
        "trained {} epochs: id_acc {:.4} ood_acc {:.4} domain_acc {:.4}",
        state.epoch, last.id_acc, last.ood_acc, last.domain_acc
    );
    manifest.write(&out.join(MANIFEST_FILE))
}

pub fn ablation(cfg: &RunConfig, data: &Path, out: &Path, seeds: &[u64]) -> Result<(), Failure> {
    let mut manifest = RunManifest::new("ablation", Some(cfg));
    manifest.seeds = seeds.to_vec();
    // Every ablation of the suite runs, so read all splits whatever the
    // configured one is.
    let full = RunConfig {
        train: cadaft::TrainConfig {
            ablation: cadaft::Ablation::Full,
            ..cfg.train.clone()
        },
        ..cfg.clone()
    };
    let bench = load_data(&full, data, &mut manifest)?;
    let table = run_ablation_suite::<f64>(&cfg.train_config(), &TrainData::from_benchmark(&bench), seeds)?;
    create_dir(out)?;
    put(out, COMPARISON_FILE, "comparison", table.to_csv().as_bytes(), &mut manifest.outputs)?;
    for row in &table.rows {
        let sub = format!("runs/{}-seed{}", row.ablation, row.seed);
        create_dir(&out.join(&sub))?;
        let name = format!("{sub}/{FINAL_METRICS_FILE}");
        let csv = metrics_csv(std::slice::from_ref(&row.metrics));
        put(out, &name, "final-metrics", csv.as_bytes(), &mut manifest.outputs)?;
    }
    for a in table.ablations() {
        let ood = table.ood_aggregate(a).unwrap();
        eprintln!("{a}: mean ood_acc {:.4} over {} runs", ood.mean, ood.n);
    }
    manifest.write(&out.join(MANIFEST_FILE))
}

/// Parses seed lists such as `1,2,7` or `1-5` (inclusive) or a mix.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |s: &str| s.trim().parse::<u64>().map_err(|e| format!("bad seed `{s}`: {e}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty seed range `{part}`"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(out)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let label = |l: &Option<usize>| l.map_or("unlabeled".to_string(), |v| format!("label_{v}"));
    let mut out = String::from("alpha");
    for l in first.fractions.keys() {
        out.push(',');
        out.push_str(&label(l));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r.alpha.to_string());
        for f in r.fractions.values() {
            out.push(',');
            out.push_str(&f.to_string());
        }
        out.push('\n');
    }
    out
}

/// `annotated.jsonl` → `annotated.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn annotate(input: &Path, alpha: f64, out: &Path, sweep: &Path) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Failure::config(format!("alpha: {alpha} is outside [0, 1]")));
    }
    let mut manifest = RunManifest::new("annotate", None);
    manifest.alpha = Some(alpha);
    let text = fs::read_to_string(input)
        .map_err(|e| Failure::runtime(format!("cannot read {}: {e}", input.display())))?;
    manifest.inputs.push(FileHash::of_bytes("sentence-pairs", input, text.as_bytes()));

    // Everything is parsed before anything is written.
    let mut records = Vec::new();
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: &dyn std::fmt::Display| {
            Failure::runtime(format!("{}:{}: {e}", input.display(), i + 1))
        };
        let mut obj: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(line).map_err(|e| at(&e))?;
        let pair: SentencePair =
            serde_json::from_value(serde_json::Value::Object(obj.clone())).map_err(|e| at(&e))?;
        let t = annotate_overlap(&pair, alpha).map_err(|e| at(&e))?;
        obj.insert("t".into(), t.into());
        records.push(obj);
        pairs.push(pair);
    }
    let table = sweep_alpha(&pairs, &default_alpha_grid())?;

    for p in [out, sweep] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
    }
    let body = jsonl(&records)?;
    fs::write(out, &body)?;
    manifest.outputs.push(FileHash::of_bytes("annotated", out, &body));
    let csv = sweep_csv(&table);
    fs::write(sweep, &csv)?;
    manifest.outputs.push(FileHash::of_bytes("sweep", sweep, csv.as_bytes()));
    eprintln!("annotated {} pairs at alpha {alpha}", records.len());
    manifest.write(&sibling(out, "manifest.json"))
}
