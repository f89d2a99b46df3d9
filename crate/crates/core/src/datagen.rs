//! Synthetic confounded benchmarks and the word-overlap confounder annotator.
//!
//! The numeric benchmark stacks a label-bearing core block and one block per
//! confounder. In source domains each confounder agrees with the label with
//! probability `source_alignment[s]`; in the target domain the agreement
//! flips to `target_alignment`, so a model that leans on the confounder
//! breaks out of distribution.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize};

use crate::data::{Benchmark, Instance, Split};
use crate::error::{Error, Result};
use crate::model::ModelDims;

/// Overlap threshold for entailment-style pairs.
pub const ALPHA_ENTAILMENT: f64 = 0.4;
/// Overlap threshold for paraphrase-style pairs.
pub const ALPHA_PARAPHRASE: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub source_train: usize,
    pub id_test: usize,
    pub target_unlabeled: usize,
    pub target_fewshot: usize,
    pub ood_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            source_train: 4000,
            id_test: 1000,
            target_unlabeled: 2000,
            target_fewshot: 16,
            ood_test: 1000,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::IdTest => self.id_test,
            Split::TargetUnlabeled => self.target_unlabeled,
            Split::TargetFewshot => self.target_fewshot,
            Split::OodTest => self.ood_test,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.source_train == 0 {
            return Err(Error::config("sizes.source_train", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub core_dims: usize,
    /// Width of each confounder block; its length is the confounder count.
    pub confounder_dims: Vec<usize>,
    pub classes: usize,
    /// Label agreement probability of the confounders, one per source domain.
    pub source_alignment: Vec<f64>,
    pub target_alignment: f64,
    pub core_separation: f64,
    pub confounder_separation: f64,
    pub noise: f64,
    pub sizes: SplitSizes,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            core_dims: 4,
            confounder_dims: vec![4],
            classes: 2,
            source_alignment: vec![0.95],
            target_alignment: 0.05,
            core_separation: 0.5,
            confounder_separation: 1.5,
            noise: 1.0,
            sizes: SplitSizes::default(),
        }
    }
}

fn check_probability(field: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(field, format!("{p} is outside [0, 1]")));
    }
    Ok(())
}

fn check_positive(field: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::config(field, format!("{v} must be positive and finite")));
    }
    Ok(())
}

impl SyntheticSpec {
    pub fn source_domains(&self) -> usize {
        self.source_alignment.len()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.core_dims + self.confounder_dims.iter().sum::<usize>(),
            classes: self.classes,
            domains: self.source_domains() + 1,
            confounder_arities: vec![self.classes; self.confounder_dims.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.core_dims == 0 {
            return Err(Error::config("core_dims", "must be at least 1"));
        }
        if let Some(i) = self.confounder_dims.iter().position(|&d| d == 0) {
            return Err(Error::config(
                format!("confounder_dims[{i}]"),
                "must be at least 1",
            ));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if self.source_alignment.is_empty() {
            return Err(Error::config("source_alignment", "need at least one source domain"));
        }
        for (i, &p) in self.source_alignment.iter().enumerate() {
            check_probability(&format!("source_alignment[{i}]"), p)?;
        }
        check_probability("target_alignment", self.target_alignment)?;
        check_positive("noise", self.noise)?;
        if !(self.core_separation.is_finite() && self.confounder_separation.is_finite()) {
            return Err(Error::config("core_separation", "separations must be finite"));
        }
        self.sizes.validate()
    }
}

/// Deterministic per-split stream so splits can be generated independently.
fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split as u64 + 1);
    rng
}

/// Draws a confounder value agreeing with `y` with probability `p`,
/// otherwise uniform over the remaining values.
fn draw_confounder(rng: &mut impl Rng, y: usize, arity: usize, p: f64) -> usize {
    if rng.random::<f64>() < p {
        return y;
    }
    let other = rng.random_range(0..arity - 1);
    if other >= y {
        other + 1
    } else {
        other
    }
}

fn push_block(
    x: &mut Vec<f64>,
    rng: &mut impl Rng,
    noise: &Normal<f64>,
    width: usize,
    value: usize,
    arity: usize,
    sep: f64,
) {
    for j in 0..width {
        let mean = if j % arity == value { sep } else { -sep };
        x.push(mean + noise.sample(rng));
    }
}

pub fn generate_numeric(spec: &SyntheticSpec, seed: u64) -> Result<Benchmark> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config("noise", e.to_string()))?;
    let target = spec.source_domains();
    let mut bench = Benchmark {
        dims: spec.dims(),
        spec: serde_json::to_value(spec)?,
        source_train: Vec::new(),
        id_test: Vec::new(),
        target_unlabeled: Vec::new(),
        target_fewshot: Vec::new(),
        ood_test: Vec::new(),
    };
    for split in Split::ALL {
        let mut rng = split_rng(seed, split);
        let rows = (0..spec.sizes.get(split))
            .map(|i| {
                let s = match split {
                    Split::SourceTrain | Split::IdTest => i % target,
                    _ => target,
                };
                let align = spec.source_alignment.get(s).copied().unwrap_or(spec.target_alignment);
                let y = rng.random_range(0..spec.classes);
                let t: Vec<usize> = spec
                    .confounder_dims
                    .iter()
                    .map(|_| draw_confounder(&mut rng, y, spec.classes, align))
                    .collect();
                let mut x = Vec::with_capacity(bench.dims.input);
                push_block(&mut x, &mut rng, &noise, spec.core_dims, y, spec.classes, spec.core_separation);
                for (&w, &v) in spec.confounder_dims.iter().zip(&t) {
                    push_block(&mut x, &mut rng, &noise, w, v, spec.classes, spec.confounder_separation);
                }
                let unlabeled = split == Split::TargetUnlabeled;
                Instance {
                    x,
                    y: (!unlabeled).then_some(y),
                    s,
                    t: (!unlabeled).then_some(t),
                    split,
                }
            })
            .collect();
        *bench_split(&mut bench, split) = rows;
    }
    Ok(bench)
}

fn bench_split(b: &mut Benchmark, split: Split) -> &mut Vec<Instance> {
    match split {
        Split::SourceTrain => &mut b.source_train,
        Split::IdTest => &mut b.id_test,
        Split::TargetUnlabeled => &mut b.target_unlabeled,
        Split::TargetFewshot => &mut b.target_fewshot,
        Split::OodTest => &mut b.ood_test,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    #[serde(deserialize_with = "tokens")]
    pub tokens_1: Vec<String>,
    #[serde(deserialize_with = "tokens")]
    pub tokens_2: Vec<String>,
    #[serde(default)]
    pub label: Option<usize>,
    #[serde(default)]
    pub domain: usize,
}

/// Accepts either a token array or a whitespace-separated sentence.
fn tokens<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Tokens {
        List(Vec<String>),
        Text(String),
    }
    Ok(match Tokens::deserialize(de)? {
        Tokens::List(v) => v,
        Tokens::Text(s) => s.split_whitespace().map(str::to_owned).collect(),
    })
}

impl SentencePair {
    pub fn from_text(a: &str, b: &str) -> Self {
        SentencePair {
            tokens_1: a.split_whitespace().map(str::to_owned).collect(),
            tokens_2: b.split_whitespace().map(str::to_owned).collect(),
            label: None,
            domain: 0,
        }
    }
}

/// Overlap score: cross-pair match count over the combined length.
///
/// By default every matching `(i, j)` pair counts, so duplicates count
/// multiply; `set_based` counts each shared distinct token once.
pub fn overlap_score(pair: &SentencePair, set_based: bool) -> Result<f64> {
    let (a, b) = (&pair.tokens_1, &pair.tokens_2);
    let total = a.len() + b.len();
    if total == 0 {
        return Err(Error::Empty("both token lists are empty".into()));
    }
    let matches = if set_based {
        let left: HashSet<&str> = a.iter().map(String::as_str).collect();
        let right: HashSet<&str> = b.iter().map(String::as_str).collect();
        left.intersection(&right).count()
    } else {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in b {
            *counts.entry(w.as_str()).or_default() += 1;
        }
        a.iter().map(|w| counts.get(w.as_str()).copied().unwrap_or(0)).sum()
    };
    Ok(matches as f64 / total as f64)
}

pub fn annotate_overlap(pair: &SentencePair, alpha: f64) -> Result<usize> {
    Ok(usize::from(overlap_score(pair, false)? >= alpha))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextlikeSpec {
    pub vocab_size: usize,
    pub len_1: usize,
    pub len_2: usize,
    /// Probability that overlap level agrees with the label, per source domain.
    pub source_correlation: Vec<f64>,
    /// Probability of a high-overlap pair in the target domain, for any label.
    pub target_high_rate: f64,
    pub alpha: f64,
    pub label_dims: usize,
    pub label_separation: f64,
    pub noise: f64,
    pub sizes: SplitSizes,
}

impl Default for TextlikeSpec {
    fn default() -> Self {
        TextlikeSpec {
            vocab_size: 64,
            len_1: 8,
            len_2: 8,
            source_correlation: vec![0.95],
            target_high_rate: 1.0,
            alpha: ALPHA_ENTAILMENT,
            label_dims: 4,
            label_separation: 0.5,
            noise: 1.0,
            sizes: SplitSizes::default(),
        }
    }
}

impl TextlikeSpec {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.vocab_size + self.label_dims,
            classes: 2,
            domains: self.source_correlation.len() + 1,
            confounder_arities: vec![2],
        }
    }

    /// Smallest number of copied tokens whose score reaches `alpha`.
    fn high_min(&self) -> usize {
        let total = (self.len_1 + self.len_2) as f64;
        (0..=self.len_1 + self.len_2)
            .find(|&m| m as f64 / total >= self.alpha)
            .unwrap_or(usize::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size", "must be at least 4"));
        }
        if self.len_1 == 0 || self.len_2 == 0 {
            return Err(Error::config("len_1", "sentence lengths must be at least 1"));
        }
        if self.vocab_size <= self.len_1 {
            return Err(Error::config(
                "vocab_size",
                "must exceed len_1 so filler tokens can avoid the first sentence",
            ));
        }
        if self.source_correlation.is_empty() {
            return Err(Error::config("source_correlation", "need at least one source domain"));
        }
        for (i, &p) in self.source_correlation.iter().enumerate() {
            check_probability(&format!("source_correlation[{i}]"), p)?;
        }
        check_probability("target_high_rate", self.target_high_rate)?;
        check_probability("alpha", self.alpha)?;
        check_positive("noise", self.noise)?;
        let m = self.high_min();
        if m > self.len_1.min(self.len_2) {
            return Err(Error::config(
                "alpha",
                format!(
                    "a score of {} needs {m} shared tokens but sentences have lengths {} and {}",
                    self.alpha, self.len_1, self.len_2
                ),
            ));
        }
        if m == 0 {
            return Err(Error::config("alpha", "alpha 0 leaves no room for low-overlap pairs"));
        }
        self.sizes.validate()
    }
}

/// A text-like benchmark with the generating sentence pairs kept per split.
#[derive(Clone, Debug)]
pub struct TextlikeData {
    pub benchmark: Benchmark,
    pub pairs: BTreeMap<Split, Vec<SentencePair>>,
}

/// Builds a pair whose score is exactly `shared / (len_1 + len_2)`.
fn make_pair(rng: &mut impl Rng, spec: &TextlikeSpec, shared: usize) -> SentencePair {
    let mut vocab: Vec<usize> = (0..spec.vocab_size).collect();
    vocab.shuffle(rng);
    let (first, rest) = vocab.split_at(spec.len_1);
    let mut second: Vec<usize> = first[..shared].to_vec();
    second.extend((shared..spec.len_2).map(|_| rest[rng.random_range(0..rest.len())]));
    second.shuffle(rng);
    let word = |i: &usize| format!("w{i}");
    SentencePair {
        tokens_1: first.iter().map(word).collect(),
        tokens_2: second.iter().map(word).collect(),
        label: None,
        domain: 0,
    }
}

pub fn generate_textlike(spec: &TextlikeSpec, seed: u64) -> Result<TextlikeData> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config("noise", e.to_string()))?;
    let high_min = spec.high_min();
    let high_max = spec.len_1.min(spec.len_2);
    let target = spec.source_correlation.len();
    let index: HashMap<String, usize> = (0..spec.vocab_size).map(|i| (format!("w{i}"), i)).collect();
    let mut data = TextlikeData {
        benchmark: Benchmark {
            dims: spec.dims(),
            spec: serde_json::to_value(spec)?,
            source_train: Vec::new(),
            id_test: Vec::new(),
            target_unlabeled: Vec::new(),
            target_fewshot: Vec::new(),
            ood_test: Vec::new(),
        },
        pairs: BTreeMap::new(),
    };
    for split in Split::ALL {
        let mut rng = split_rng(seed, split);
        let mut rows = Vec::new();
        let mut pairs = Vec::new();
        for i in 0..spec.sizes.get(split) {
            let s = match split {
                Split::SourceTrain | Split::IdTest => i % target,
                _ => target,
            };
            let y = rng.random_range(0..2usize);
            let high = match spec.source_correlation.get(s) {
                Some(&c) => (rng.random::<f64>() < c) == (y == 1),
                None => rng.random::<f64>() < spec.target_high_rate,
            };
            let shared = if high {
                rng.random_range(high_min..=high_max)
            } else {
                rng.random_range(0..high_min)
            };
            let mut pair = make_pair(&mut rng, spec, shared);
            pair.label = Some(y);
            pair.domain = s;
            let t = annotate_overlap(&pair, spec.alpha)?;
            let mut x = vec![0.0; spec.vocab_size];
            for w in pair.tokens_1.iter().chain(&pair.tokens_2) {
                x[index[w]] += 1.0;
            }
            push_block(&mut x, &mut rng, &noise, spec.label_dims, y, 2, spec.label_separation);
            let unlabeled = split == Split::TargetUnlabeled;
            rows.push(Instance {
                x,
                y: (!unlabeled).then_some(y),
                s,
                t: (!unlabeled).then_some(vec![t]),
                split,
            });
            pairs.push(pair);
        }
        *bench_split(&mut data.benchmark, split) = rows;
        data.pairs.insert(split, pairs);
    }
    Ok(data)
}

/// The default threshold grid, 0.0 to 1.0 in steps of 0.05.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    /// Fraction annotated `t = 1`, keyed by label (`None` for unlabeled pairs).
    pub fractions: BTreeMap<Option<usize>, f64>,
}

/// Per-label high-overlap fractions at each threshold. Empty input yields an
/// empty table.
pub fn sweep_alpha(pairs: &[SentencePair], grid: &[f64]) -> Result<Vec<SweepRow>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let mut by_label: BTreeMap<Option<usize>, Vec<f64>> = BTreeMap::new();
    for p in pairs {
        by_label.entry(p.label).or_default().push(overlap_score(p, false)?);
    }
    Ok(grid
        .iter()
        .map(|&alpha| SweepRow {
            alpha,
            fractions: by_label
                .iter()
                .map(|(&label, scores)| {
                    let hits = scores.iter().filter(|&&s| s >= alpha).count();
                    (label, hits as f64 / scores.len() as f64)
                })
                .collect(),
        })
        .collect())
}
