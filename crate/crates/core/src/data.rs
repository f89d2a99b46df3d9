//! Instances, benchmark splits, and the line-delimited dataset file format.
//!
//! A dataset file is UTF-8 JSON lines. The first line is a header carrying
//! the format name, version, split name, data dimensions, and an echo of the
//! generator spec. Every following line is one instance with the fields
//! `x, y, s, t, split` in that order.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "cadaft-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    SourceTrain,
    IdTest,
    TargetUnlabeled,
    TargetFewshot,
    OodTest,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::SourceTrain,
        Split::IdTest,
        Split::TargetUnlabeled,
        Split::TargetFewshot,
        Split::OodTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source-train",
            Split::IdTest => "id-test",
            Split::TargetUnlabeled => "target-unlabeled",
            Split::TargetFewshot => "target-fewshot",
            Split::OodTest => "ood-test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown split `{s}`")))
    }
}

/// One example: features, optional task label, domain, optional confounders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub x: Vec<f64>,
    pub y: Option<usize>,
    pub s: usize,
    pub t: Option<Vec<usize>>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub split: Split,
    pub dims: ModelDims,
    pub spec: serde_json::Value,
}

/// Every split of one generated benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub dims: ModelDims,
    pub spec: serde_json::Value,
    pub source_train: Vec<Instance>,
    pub id_test: Vec<Instance>,
    pub target_unlabeled: Vec<Instance>,
    pub target_fewshot: Vec<Instance>,
    pub ood_test: Vec<Instance>,
}

impl Benchmark {
    pub fn split(&self, split: Split) -> &[Instance] {
        match split {
            Split::SourceTrain => &self.source_train,
            Split::IdTest => &self.id_test,
            Split::TargetUnlabeled => &self.target_unlabeled,
            Split::TargetFewshot => &self.target_fewshot,
            Split::OodTest => &self.ood_test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Instance> {
        match split {
            Split::SourceTrain => &mut self.source_train,
            Split::IdTest => &mut self.id_test,
            Split::TargetUnlabeled => &mut self.target_unlabeled,
            Split::TargetFewshot => &mut self.target_fewshot,
            Split::OodTest => &mut self.ood_test,
        }
    }

    /// Serializes one split, header first.
    pub fn split_bytes(&self, split: Split) -> Result<Vec<u8>> {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            split,
            dims: self.dims.clone(),
            spec: self.spec.clone(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        for inst in self.split(split) {
            serde_json::to_writer(&mut out, inst)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    /// Writes every split to `dir`, returning each file with its content hash.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<(Split, PathBuf, String)>> {
        fs::create_dir_all(dir)?;
        Split::ALL
            .into_iter()
            .map(|split| {
                let bytes = self.split_bytes(split)?;
                let path = dir.join(split.file_name());
                let mut f = fs::File::create(&path)?;
                f.write_all(&bytes)?;
                Ok((split, path, content_hash(&bytes)))
            })
            .collect()
    }

    /// Reads every split present in `dir`; those in `required` must exist.
    pub fn read_dir(dir: &Path, required: &[Split]) -> Result<Self> {
        Self::read_splits(dir, &Split::ALL, required)
    }

    /// Reads only the splits in `wanted`; files of other splits are never
    /// opened, and their slots stay empty.
    pub fn read_splits(dir: &Path, wanted: &[Split], required: &[Split]) -> Result<Self> {
        let mut bench: Option<Benchmark> = None;
        for split in Split::ALL {
            if !wanted.contains(&split) && !required.contains(&split) {
                continue;
            }
            let path = dir.join(split.file_name());
            if !path.exists() {
                if required.contains(&split) {
                    return Err(Error::Format(format!(
                        "missing split file {}",
                        path.display()
                    )));
                }
                continue;
            }
            let (header, rows) = read_split_file(&path)?;
            if header.split != split {
                return Err(Error::Format(format!(
                    "{} declares split {}",
                    path.display(),
                    header.split
                )));
            }
            let b = bench.get_or_insert_with(|| Benchmark {
                dims: header.dims.clone(),
                spec: header.spec.clone(),
                source_train: Vec::new(),
                id_test: Vec::new(),
                target_unlabeled: Vec::new(),
                target_fewshot: Vec::new(),
                ood_test: Vec::new(),
            });
            if b.dims != header.dims {
                return Err(Error::Format(format!(
                    "{} has dims differing from the other splits",
                    path.display()
                )));
            }
            *b.split_mut(split) = rows;
        }
        bench.ok_or_else(|| Error::Format(format!("no split files in {}", dir.display())))
    }
}

pub fn read_split_file(path: &Path) -> Result<(DatasetHeader, Vec<Instance>)> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))??;
    let header: DatasetHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Format(format!("{}:1: bad header: {e}", path.display())))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 2)))?;
        check_instance(&inst, &header.dims)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 2)))?;
        rows.push(inst);
    }
    Ok((header, rows))
}

fn check_instance(inst: &Instance, dims: &ModelDims) -> Result<()> {
    if inst.x.len() != dims.input {
        return Err(Error::Format(format!(
            "feature width {} differs from {}",
            inst.x.len(),
            dims.input
        )));
    }
    if inst.y.is_some_and(|y| y >= dims.classes) || inst.s >= dims.domains {
        return Err(Error::Format("label out of range".into()));
    }
    if let Some(t) = &inst.t {
        if t.len() != dims.confounder_arities.len()
            || t.iter().zip(&dims.confounder_arities).any(|(&v, &a)| v >= a)
        {
            return Err(Error::Format("confounder annotation out of range".into()));
        }
    }
    Ok(())
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stacks instance features into a `[rows × d]` tensor.
pub fn features<T: Scalar>(rows: &[&Instance]) -> Result<Tensor<T>> {
    let width = rows
        .first()
        .map(|r| r.x.len())
        .ok_or_else(|| Error::Empty("no rows".into()))?;
    let mut v = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.x.len() != width {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        v.extend(r.x.iter().map(|&f| T::lit(f)));
    }
    Tensor::new(vec![rows.len(), width], v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bench() -> Benchmark {
        let dims = ModelDims {
            input: 2,
            classes: 2,
            domains: 2,
            confounder_arities: vec![2],
        };
        let inst = |x: f64, split| Instance {
            x: vec![x, -x / 3.0],
            y: Some(1),
            s: 0,
            t: Some(vec![1]),
            split,
        };
        Benchmark {
            dims,
            spec: serde_json::json!({"note": "fixture"}),
            source_train: vec![inst(0.1, Split::SourceTrain), inst(1e-300, Split::SourceTrain)],
            id_test: vec![inst(2.0, Split::IdTest)],
            target_unlabeled: vec![],
            target_fewshot: vec![],
            ood_test: vec![inst(std::f64::consts::PI, Split::OodTest)],
        }
    }

    #[test]
    fn file_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = bench();
        b.write_dir(dir.path()).unwrap();
        let back = Benchmark::read_dir(dir.path(), &[Split::SourceTrain]).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn record_field_order_is_fixed() {
        let bytes = bench().split_bytes(Split::IdTest).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let line = text.lines().nth(1).unwrap();
        assert!(line.starts_with(r#"{"x":[2.0,"#), "{line}");
        let order: Vec<usize> = ["\"x\"", "\"y\"", "\"s\"", "\"t\"", "\"split\""]
            .iter()
            .map(|k| line.find(k).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let b = bench();
        b.write_dir(dir.path()).unwrap();
        let p = dir.path().join(Split::SourceTrain.file_name());
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("{not json}\n");
        fs::write(&p, text).unwrap();
        let err = read_split_file(&p).unwrap_err().to_string();
        assert!(err.contains(":4:"), "{err}");
    }

    #[test]
    fn unwanted_splits_are_never_opened() {
        let dir = tempfile::tempdir().unwrap();
        let b = bench();
        b.write_dir(dir.path()).unwrap();
        fs::write(dir.path().join(Split::TargetUnlabeled.file_name()), "garbage").unwrap();
        let keep = [Split::SourceTrain, Split::OodTest];
        let back = Benchmark::read_splits(dir.path(), &keep, &keep).unwrap();
        assert_eq!(back.source_train, b.source_train);
        assert!(back.id_test.is_empty());
        assert!(Benchmark::read_dir(dir.path(), &keep).is_err());
    }

    #[test]
    fn missing_required_split() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Benchmark::read_dir(dir.path(), &[Split::SourceTrain]).is_err());
    }
}
