//! Accuracy, per-epoch metrics, ablation tables, and representation dumps.
//!
//! Metrics and comparison tables are written as comma-separated text whose
//! first line is a `# <format> v<version>` comment, followed by a fixed
//! header. List-valued cells join their entries with `;` and absent values
//! are empty cells.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{features, Benchmark, Instance, Split};
use crate::error::{Error, Result};
use crate::losses::{discrepancy_report, loss_adv_value};
use crate::model::CadaftModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{train, Ablation, TrainConfig, TrainData};

pub const METRICS_FORMAT: &str = "cadaft-metrics";
pub const TABLE_FORMAT: &str = "cadaft-comparison";
pub const REPRESENTATION_FORMAT: &str = "cadaft-representations";
pub const CSV_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Task,
    Domain,
    Confounder(usize),
}

/// Fraction of rows whose argmax matches `labels`; ties go to the lowest
/// class index.
pub fn accuracy_from_probs<T: Scalar>(prob: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("accuracy of an empty split".into()));
    }
    if prob.rows() != labels.len() {
        return Err(Error::Shape("one label per row".into()));
    }
    let hits = prob
        .argmax_rows()
        .into_iter()
        .zip(labels)
        .filter(|(p, l)| p == *l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn head_labels(rows: &[Instance], head: Head) -> Result<Vec<usize>> {
    rows.iter()
        .map(|r| {
            let l = match head {
                Head::Task => r.y,
                Head::Domain => Some(r.s),
                Head::Confounder(c) => r.t.as_ref().and_then(|t| t.get(c).copied()),
            };
            l.ok_or_else(|| Error::Contract(format!("row lacks the label for {head:?}")))
        })
        .collect()
}

pub fn accuracy<T: Scalar>(model: &CadaftModel<T>, rows: &[Instance], head: Head) -> Result<f64> {
    let labels = head_labels(rows, head)?;
    let refs: Vec<&Instance> = rows.iter().collect();
    let out = model.predict(&features(&refs)?)?;
    let prob = match head {
        Head::Task => &out.y_prob,
        Head::Domain => &out.s_prob,
        Head::Confounder(c) => out
            .t_prob
            .get(c)
            .ok_or_else(|| Error::Contract(format!("no confounder head {c}")))?,
    };
    accuracy_from_probs(prob, &labels)
}

/// Mean training losses over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLosses {
    pub task: f64,
    pub confounder: f64,
    pub adversarial: f64,
    pub disc: f64,
}

/// One evaluation of a model on the held-out ID and OOD splits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub id_acc: f64,
    pub ood_acc: f64,
    /// Domain-head accuracy on an equal mix of ID and OOD rows.
    pub domain_acc: f64,
    /// Per confounder, over annotated ID and OOD rows.
    pub confounder_acc: Vec<Option<f64>>,
    /// Uniform-confusion loss on ID rows against OOD rows.
    pub loss_adv: f64,
    pub discrepancy: f64,
    /// `(confounder, value, discrepancy)` per stratum.
    pub strata: Vec<(usize, usize, Option<f64>)>,
    pub train: TrainLosses,
}

/// Evaluates `model`; epoch, seed, ablation, and training losses are left
/// for the caller to fill in.
pub fn evaluate<T: Scalar>(
    model: &CadaftModel<T>,
    id_test: &[Instance],
    ood_test: &[Instance],
) -> Result<MetricsRecord> {
    if id_test.is_empty() || ood_test.is_empty() {
        return Err(Error::Empty("evaluation needs ID and OOD test rows".into()));
    }
    let dims = model.dims();
    let id_refs: Vec<&Instance> = id_test.iter().collect();
    let ood_refs: Vec<&Instance> = ood_test.iter().collect();
    let id_out = model.predict(&features(&id_refs)?)?;
    let ood_out = model.predict(&features(&ood_refs)?)?;

    let id_acc = accuracy_from_probs(&id_out.y_prob, &head_labels(id_test, Head::Task)?)?;
    let ood_acc = accuracy_from_probs(&ood_out.y_prob, &head_labels(ood_test, Head::Task)?)?;

    let k = id_test.len().min(ood_test.len());
    let mut hits = 0usize;
    for (out, rows) in [(&id_out, id_test), (&ood_out, ood_test)] {
        let pred = out.s_prob.argmax_rows();
        hits += rows[..k].iter().zip(&pred).filter(|(r, p)| r.s == **p).count();
    }
    let domain_acc = hits as f64 / (2 * k) as f64;

    let confounder_acc = (0..dims.confounder_arities.len())
        .map(|c| {
            let mut n = 0usize;
            let mut hit = 0usize;
            for (out, rows) in [(&id_out, id_test), (&ood_out, ood_test)] {
                let pred = out.t_prob[c].argmax_rows();
                for (r, p) in rows.iter().zip(pred) {
                    if let Some(v) = r.t.as_ref().and_then(|t| t.get(c)) {
                        n += 1;
                        hit += usize::from(*v == p);
                    }
                }
            }
            (n > 0).then(|| hit as f64 / n as f64)
        })
        .collect();

    let loss_adv = loss_adv_value(&id_out.s_prob, Some(&ood_out.s_prob))?.as_f64();
    let id_t: Vec<Option<Vec<usize>>> = id_test.iter().map(|r| r.t.clone()).collect();
    let ood_t: Vec<Option<Vec<usize>>> = ood_test.iter().map(|r| r.t.clone()).collect();
    let report = discrepancy_report(
        &id_out.s_prob,
        &ood_out.s_prob,
        dims.domains - 1,
        &id_t,
        &ood_t,
        &dims.confounder_arities,
    )?;

    Ok(MetricsRecord {
        id_acc,
        ood_acc,
        domain_acc,
        confounder_acc,
        loss_adv,
        discrepancy: report.pooled,
        strata: report
            .strata
            .into_iter()
            .map(|s| (s.confounder, s.value, s.discrepancy))
            .collect(),
        ..MetricsRecord::default()
    })
}

pub const METRICS_HEADER: &str = "epoch,seed,ablation,id_acc,ood_acc,domain_acc,confounder_acc,\
loss_adv,discrepancy,stratum_discrepancy,train_task,train_confounder,train_adversarial,train_disc";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let conf: Vec<String> = self.confounder_acc.iter().map(|v| opt(*v)).collect();
        let strata: Vec<String> = self
            .strata
            .iter()
            .map(|(c, v, d)| format!("{c}:{v}={}", opt(*d)))
            .collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.seed,
            self.ablation,
            self.id_acc,
            self.ood_acc,
            self.domain_acc,
            conf.join(";"),
            self.loss_adv,
            self.discrepancy,
            strata.join(";"),
            self.train.task,
            self.train.confounder,
            self.train.adversarial,
            self.train.disc,
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("# {METRICS_FORMAT} v{CSV_VERSION}\n{METRICS_HEADER}\n");
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Mean and sample standard deviation; the latter only for two or more values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Some(Aggregate { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub ablation: Ablation,
    pub seed: u64,
    pub id_acc: f64,
    pub ood_acc: f64,
    /// Final evaluation of the run.
    pub metrics: MetricsRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Ablations present, in first-seen order.
    pub fn ablations(&self) -> Vec<Ablation> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.ablation) {
                out.push(r.ablation);
            }
        }
        out
    }

    pub fn id_aggregate(&self, ablation: Ablation) -> Option<Aggregate> {
        self.aggregate(ablation, |r| r.id_acc)
    }

    pub fn ood_aggregate(&self, ablation: Ablation) -> Option<Aggregate> {
        self.aggregate(ablation, |r| r.ood_acc)
    }

    pub fn aggregate(&self, ablation: Ablation, f: impl Fn(&ComparisonRow) -> f64) -> Option<Aggregate> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.ablation == ablation).map(f).collect();
        Aggregate::of(&v)
    }

    /// Per-run rows, then a blank line and one aggregate row per ablation.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {TABLE_FORMAT} v{CSV_VERSION}\nablation,seed,id_acc,ood_acc\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.ablation, r.seed, r.id_acc, r.ood_acc);
        }
        out.push_str("\nablation,runs,id_mean,id_std,ood_mean,ood_std\n");
        for a in self.ablations() {
            let (id, ood) = (self.id_aggregate(a).unwrap(), self.ood_aggregate(a).unwrap());
            let _ = writeln!(
                out,
                "{a},{},{},{},{},{}",
                id.n,
                id.mean,
                opt(id.std),
                ood.mean,
                opt(ood.std)
            );
        }
        out
    }
}

/// The ablations a suite compares, in table order.
pub const SUITE: [Ablation; 3] = [Ablation::ErmOnly, Ablation::NoConfounder, Ablation::Full];

/// Trains every suite ablation for every seed, concurrently, and tabulates
/// the final ID and OOD accuracy of each run.
pub fn run_ablation_suite<T: Scalar>(
    config: &TrainConfig,
    data: &TrainData<'_>,
    seeds: &[u64],
) -> Result<ComparisonTable> {
    run_ablations::<T>(config, data, seeds, &SUITE)
}

pub fn run_ablations<T: Scalar>(
    config: &TrainConfig,
    data: &TrainData<'_>,
    seeds: &[u64],
    ablations: &[Ablation],
) -> Result<ComparisonTable> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    let jobs: Vec<(Ablation, u64)> = ablations
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results: Vec<Result<ComparisonRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(ablation, seed)| {
                scope.spawn(move || {
                    let cfg = TrainConfig {
                        ablation,
                        seed,
                        ..config.clone()
                    };
                    let wrap = |e: Error| Error::Run {
                        ablation: ablation.to_string(),
                        seed,
                        source: Box::new(e),
                    };
                    let out = train::<T>(&cfg, data).map_err(wrap)?;
                    let mut m = evaluate(out.model(), data.id_test, data.ood_test).map_err(wrap)?;
                    m.epoch = out.state.epoch;
                    m.seed = seed;
                    m.ablation = ablation;
                    Ok(ComparisonRow {
                        ablation,
                        seed,
                        id_acc: m.id_acc,
                        ood_acc: m.ood_acc,
                        metrics: m,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    Ok(ComparisonTable {
        rows: results.into_iter().collect::<Result<_>>()?,
    })
}

/// Writes one line per row: `z_0..z_{l-1}, y, s, t`.
pub fn dump_representations<T: Scalar>(model: &CadaftModel<T>, rows: &[Instance], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Empty("representation dump of an empty split".into()));
    }
    let refs: Vec<&Instance> = rows.iter().collect();
    let z = model.predict(&features(&refs)?)?.z;
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# {REPRESENTATION_FORMAT} v{CSV_VERSION}")?;
    let zs: Vec<String> = (0..z.cols()).map(|i| format!("z{i}")).collect();
    writeln!(w, "{},y,s,t", zs.join(","))?;
    for (i, r) in rows.iter().enumerate() {
        let vals: Vec<String> = z.row(i).iter().map(|v| v.as_f64().to_string()).collect();
        let t = r
            .t
            .as_ref()
            .map(|t| t.iter().map(usize::to_string).collect::<Vec<_>>().join(";"))
            .unwrap_or_default();
        let y = r.y.map(|y| y.to_string()).unwrap_or_default();
        writeln!(w, "{},{y},{},{t}", vals.join(","), r.s)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the representation block of a dump back as rows of floats.
pub fn read_representations(path: &Path) -> Result<Vec<Vec<f64>>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut width = None;
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(cells.iter().filter(|c| c.starts_with('z')).count()),
            Some(w) => out.push(
                cells[..w]
                    .iter()
                    .map(|c| {
                        c.parse::<f64>()
                            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        }
    }
    Ok(out)
}

/// Convenience for the benchmark's held-out splits.
pub fn evaluate_benchmark<T: Scalar>(model: &CadaftModel<T>, b: &Benchmark) -> Result<MetricsRecord> {
    evaluate(model, b.split(Split::IdTest), b.split(Split::OodTest))
}
