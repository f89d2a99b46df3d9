//! Alternating minimax training.
//!
//! Each epoch runs `disc_steps` discriminator steps, which fit the domain
//! head to the true domain labels with everything else frozen, followed by
//! one pass of feature steps over the source data. A feature step updates
//! the extractor, task head, and confounder heads on the supervised terms
//! plus `lambda` times the uniform-confusion loss, with the domain head
//! frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{features, Benchmark, Instance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsRecord, TrainLosses};
use crate::losses::{confounder_terms, cross_entropy_logits, loss_adv, pooled_cross_entropy, BatchLabels};
use crate::model::{BoundModel, CadaftModel, ModelConfig, ModelDims, ParamGroup};
use crate::nn::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Confounder heads untrained: plain adversarial adaptation.
    NoConfounder,
    /// Task cross-entropy on source only.
    ErmOnly,
    /// Adversarial weight forced to zero.
    NoAdversary,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoConfounder,
        Ablation::ErmOnly,
        Ablation::NoAdversary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoConfounder => "no_confounder",
            Ablation::ErmOnly => "erm_only",
            Ablation::NoAdversary => "no_adversary",
        }
    }

    pub fn uses_target(self) -> bool {
        self != Ablation::ErmOnly
    }

    pub fn uses_confounders(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoAdversary)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("ablation", format!("unknown ablation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Discriminator steps per epoch.
    pub disc_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the uniform-confusion loss.
    pub lambda: f64,
    /// Set by the caller; never read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    pub ablation: Ablation,
    /// How many few-shot target rows join the target pool.
    pub fewshot: usize,
    /// Evaluate after every `eval_every`-th epoch.
    pub eval_every: usize,
    /// Also train the extractor on the true-label domain cross-entropy.
    pub domain_ce_into_extractor: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            disc_steps: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            lambda: 1.0,
            seed: 0,
            ablation: Ablation::Full,
            fewshot: 16,
            eval_every: 1,
            domain_ce_into_extractor: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be finite and non-negative"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be finite and non-negative"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        self.model.validate()
    }

    pub fn effective_lambda(&self) -> f64 {
        match self.ablation {
            Ablation::Full | Ablation::NoConfounder => self.lambda,
            Ablation::ErmOnly | Ablation::NoAdversary => 0.0,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Borrowed views of every split a run may touch.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub dims: &'a ModelDims,
    pub source: &'a [Instance],
    pub target_unlabeled: &'a [Instance],
    pub target_fewshot: &'a [Instance],
    pub id_test: &'a [Instance],
    pub ood_test: &'a [Instance],
}

impl<'a> TrainData<'a> {
    pub fn from_benchmark(b: &'a Benchmark) -> Self {
        TrainData {
            dims: &b.dims,
            source: &b.source_train,
            target_unlabeled: &b.target_unlabeled,
            target_fewshot: &b.target_fewshot,
            id_test: &b.id_test,
            ood_test: &b.ood_test,
        }
    }
}

/// Which labels of a row a batch may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Source,
    /// Task labels masked; confounders kept only if `keep_t`.
    Target { keep_t: bool },
}

/// Features and labels of one mini-batch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: BatchLabels<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_rows(rows: &[&Instance], dims: &ModelDims, roles: &[Role]) -> Result<Self> {
        if roles.len() != rows.len() {
            return Err(Error::Shape("one role per row".into()));
        }
        let mut y = Vec::with_capacity(rows.len());
        let mut t = Vec::with_capacity(rows.len());
        for (r, role) in rows.iter().zip(roles) {
            match role {
                Role::Source => {
                    y.push(r.y);
                    t.push(r.t.clone());
                }
                Role::Target { keep_t } => {
                    y.push(None);
                    t.push(if *keep_t { r.t.clone() } else { None });
                }
            }
        }
        let s: Vec<usize> = rows.iter().map(|r| r.s).collect();
        Ok(Batch {
            x: features(rows)?,
            labels: BatchLabels::new(dims, &y, &s, &t)?,
        })
    }
}

/// Counts of optimizer steps and of freeze-contract violations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseAudit {
    pub disc_steps: u64,
    pub feature_steps: u64,
    pub violations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainState<T> {
    pub model: CadaftModel<T>,
    pub disc_opt: AdamState<T>,
    pub feature_opt: AdamState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<MetricsRecord>,
    pub warnings: Vec<String>,
    pub audit: PhaseAudit,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: &TrainConfig, dims: &ModelDims) -> Result<Self> {
        config.validate()?;
        Ok(TrainState {
            model: CadaftModel::new(dims.clone(), &config.model, config.seed)?,
            disc_opt: AdamState::new(config.adam()),
            feature_opt: AdamState::new(config.adam()),
            epoch: 0,
            history: Vec::new(),
            warnings: Vec::new(),
            audit: PhaseAudit::default(),
        })
    }
}

/// Tape handles of the feature-step objective.
#[derive(Clone, Debug)]
pub struct FeatureTerms {
    pub task: Var,
    pub confounder: Option<Var>,
    pub adversarial: Option<Var>,
    pub domain: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FeatureLosses {
    pub total: f64,
    pub task: f64,
    pub confounder: f64,
    pub adversarial: f64,
}

fn add_opt<T: Scalar>(tape: &mut Tape<T>, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        Some(a) => tape.add(a, v),
        None => Ok(v),
    }
}

/// Builds the feature-step objective on `tape` for an already bound model.
pub fn feature_objective<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundModel,
    config: &TrainConfig,
    src: &Batch<T>,
    tgt: Option<&Batch<T>>,
) -> Result<FeatureTerms> {
    if tgt.is_some_and(|b| b.labels.y_mask.iter().any(|&m| m)) {
        return Err(Error::Contract("target batch carries task labels".into()));
    }
    let tgt = tgt.filter(|_| config.ablation.uses_target());
    let xs = tape.constant(&src.x);
    let vs = bound.forward(tape, xs)?;
    let y = src
        .labels
        .y
        .as_ref()
        .ok_or_else(|| Error::Contract("source batch has no task labels".into()))?;
    let task = cross_entropy_logits(tape, vs.y_logits, y, &src.labels.y_mask)?.loss;

    let vt = match tgt {
        Some(b) => {
            let xt = tape.constant(&b.x);
            Some(bound.forward(tape, xt)?)
        }
        None => None,
    };

    let mut confounder = None;
    if config.ablation.uses_confounders() {
        let mut terms = confounder_terms(tape, &vs, &src.labels)?;
        if let (Some(b), Some(v)) = (tgt, &vt) {
            terms.extend(confounder_terms(tape, v, &b.labels)?);
        }
        for term in terms.into_iter().filter(|t| t.rows > 0) {
            confounder = Some(add_opt(tape, confounder, term.loss)?);
        }
    }

    let lambda = config.effective_lambda();
    let adversarial = match &vt {
        Some(v) if lambda > 0.0 => {
            let adv = loss_adv(tape, vs.s_logits, Some(v.s_logits))?;
            Some(tape.scale(adv, T::lit(lambda))?)
        }
        _ => None,
    };

    let domain = match (tgt, &vt) {
        (Some(b), Some(v)) if config.domain_ce_into_extractor => {
            let all_s = vec![true; src.labels.rows()];
            let all_t = vec![true; b.labels.rows()];
            Some(
                pooled_cross_entropy(
                    tape,
                    &[(vs.s_logits, &src.labels.s, &all_s), (v.s_logits, &b.labels.s, &all_t)],
                )?
                .loss,
            )
        }
        _ => None,
    };

    let mut total = task;
    for v in [confounder, adversarial, domain].into_iter().flatten() {
        total = tape.add(total, v)?;
    }
    Ok(FeatureTerms {
        task,
        confounder,
        adversarial,
        domain,
        total,
    })
}

/// One update of the extractor, task head, and confounder heads.
pub fn feature_step<T: Scalar>(
    state: &mut TrainState<T>,
    config: &TrainConfig,
    src: &Batch<T>,
    tgt: Option<&Batch<T>>,
) -> Result<FeatureLosses> {
    let mut tape = Tape::new();
    let bound = state.model.bind(&mut tape, ParamGroup::ExtractorAndHeads)?;
    let terms = feature_objective(&mut tape, &bound, config, src, tgt)?;
    let value = |v: Option<Var>| -> Result<f64> {
        v.map_or(Ok(0.0), |v| tape.scalar_value(v).map(T::as_f64))
    };
    let losses = FeatureLosses {
        total: value(Some(terms.total))?,
        task: value(Some(terms.task))?,
        confounder: value(terms.confounder)?,
        adversarial: value(terms.adversarial)?,
    };
    let grads = tape.backward(terms.total)?;
    let frozen = state.model.checksum(ParamGroup::DomainOnly);
    state.model.assign_grads(&grads, ParamGroup::ExtractorAndHeads)?;
    state
        .feature_opt
        .step(&mut state.model.params_mut(ParamGroup::ExtractorAndHeads))?;
    state.audit.feature_steps += 1;
    if state.model.checksum(ParamGroup::DomainOnly) != frozen {
        state.audit.violations += 1;
    }
    Ok(losses)
}

/// One update of the domain head on true domain labels; returns the pooled
/// domain cross-entropy before the update.
pub fn discriminator_step<T: Scalar>(
    state: &mut TrainState<T>,
    src: &Batch<T>,
    tgt: &Batch<T>,
) -> Result<f64> {
    if state.model.dims().domains < 2 {
        return Err(Error::config("domains", "discriminator needs at least two domains"));
    }
    let mut tape = Tape::new();
    let bound = state.model.bind(&mut tape, ParamGroup::DomainOnly)?;
    let mut logits = Vec::new();
    for b in [src, tgt] {
        let x = tape.constant(&b.x);
        let z = bound.encode(&mut tape, x)?;
        logits.push(bound.domain_logits(&mut tape, z)?);
    }
    let all_s = vec![true; src.labels.rows()];
    let all_t = vec![true; tgt.labels.rows()];
    let term = pooled_cross_entropy(
        &mut tape,
        &[(logits[0], &src.labels.s, &all_s), (logits[1], &tgt.labels.s, &all_t)],
    )?;
    let loss = tape.scalar_value(term.loss)?.as_f64();
    let grads = tape.backward(term.loss)?;
    let frozen = state.model.checksum(ParamGroup::ExtractorAndHeads);
    state.model.assign_grads(&grads, ParamGroup::DomainOnly)?;
    state
        .disc_opt
        .step(&mut state.model.params_mut(ParamGroup::DomainOnly))?;
    state.audit.disc_steps += 1;
    if state.model.checksum(ParamGroup::ExtractorAndHeads) != frozen {
        state.audit.violations += 1;
    }
    Ok(loss)
}

/// Everything a finished run hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
}

impl<T> TrainOutcome<T> {
    pub fn model(&self) -> &CadaftModel<T> {
        &self.state.model
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.state.history
    }
}

/// Sampling stream for one epoch; independent of all other epochs so a
/// resumed run draws exactly what an uninterrupted one would.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 32) + epoch as u64);
    rng
}

/// Rows a run draws target batches from, each with its role.
struct TargetPool<'a> {
    rows: Vec<&'a Instance>,
    roles: Vec<Role>,
}

fn target_pool<'a>(config: &TrainConfig, data: &TrainData<'a>) -> TargetPool<'a> {
    let keep_t = config.ablation.uses_confounders();
    let mut rows: Vec<&Instance> = data.target_unlabeled.iter().collect();
    let mut roles = vec![Role::Target { keep_t: false }; rows.len()];
    let shots = config.fewshot.min(data.target_fewshot.len());
    rows.extend(&data.target_fewshot[..shots]);
    roles.extend(std::iter::repeat_n(Role::Target { keep_t }, shots));
    TargetPool { rows, roles }
}

fn gather<T: Scalar>(
    rows: &[&Instance],
    roles: &[Role],
    idx: &[usize],
    dims: &ModelDims,
) -> Result<Batch<T>> {
    let r: Vec<&Instance> = idx.iter().map(|&i| rows[i]).collect();
    let ro: Vec<Role> = idx.iter().map(|&i| roles[i]).collect();
    Batch::from_rows(&r, dims, &ro)
}

fn sample(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train<T: Scalar>(config: &TrainConfig, data: &TrainData<'_>) -> Result<TrainOutcome<T>> {
    let state = TrainState::new(config, data.dims)?;
    resume(state, config, data)
}

/// Continues `state` for `config.epochs` further epochs.
pub fn resume<T: Scalar>(
    mut state: TrainState<T>,
    config: &TrainConfig,
    data: &TrainData<'_>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if state.model.dims() != data.dims {
        return Err(Error::config("dims", "model dimensions differ from the data"));
    }
    if config.epochs == 0 {
        return Ok(TrainOutcome { state });
    }
    if data.source.is_empty() {
        return Err(Error::Empty("source dataset".into()));
    }
    let pool = target_pool(config, data);
    let use_target = config.ablation.uses_target();
    if use_target && pool.rows.is_empty() {
        return Err(Error::Empty("target pool".into()));
    }
    let mut batch = config.batch_size.min(data.source.len());
    if use_target {
        batch = batch.min(pool.rows.len());
    }
    if batch != config.batch_size {
        let w = format!(
            "batch size {} exceeds a split; clamped to {batch}",
            config.batch_size
        );
        if !state.warnings.contains(&w) {
            state.warnings.push(w);
        }
    }
    let src_rows: Vec<&Instance> = data.source.iter().collect();
    let src_roles = vec![Role::Source; src_rows.len()];
    let dims = data.dims;

    let end = state.epoch + config.epochs;
    while state.epoch < end {
        let epoch = state.epoch;
        let mut rng = epoch_rng(config.seed, epoch);
        let mut losses = TrainLosses::default();

        if use_target {
            for _ in 0..config.disc_steps {
                let si = sample(&mut rng, src_rows.len(), batch);
                let ti = sample(&mut rng, pool.rows.len(), batch);
                let sb = gather(&src_rows, &src_roles, &si, dims)?;
                let tb = gather(&pool.rows, &pool.roles, &ti, dims)?;
                losses.disc += discriminator_step(&mut state, &sb, &tb)?;
            }
            if config.disc_steps > 0 {
                losses.disc /= config.disc_steps as f64;
            }
        }

        let mut order: Vec<usize> = (0..src_rows.len()).collect();
        order.shuffle(&mut rng);
        let mut tgt_order: Vec<usize> = (0..pool.rows.len()).collect();
        tgt_order.shuffle(&mut rng);
        let mut cursor = 0;
        let mut steps = 0usize;
        for chunk in order.chunks(batch) {
            let sb = gather(&src_rows, &src_roles, chunk, dims)?;
            let tb = if use_target {
                if cursor + chunk.len() > tgt_order.len() {
                    tgt_order.shuffle(&mut rng);
                    cursor = 0;
                }
                let ti = &tgt_order[cursor..cursor + chunk.len()];
                cursor += chunk.len();
                Some(gather(&pool.rows, &pool.roles, ti, dims)?)
            } else {
                None
            };
            let l = feature_step(&mut state, config, &sb, tb.as_ref())?;
            losses.task += l.task;
            losses.confounder += l.confounder;
            losses.adversarial += l.adversarial;
            steps += 1;
        }
        let n = steps as f64;
        losses.task /= n;
        losses.confounder /= n;
        losses.adversarial /= n;

        state.epoch += 1;
        if state.epoch.is_multiple_of(config.eval_every) {
            let mut rec = evaluate(&state.model, data.id_test, data.ood_test)?;
            rec.epoch = epoch;
            rec.seed = config.seed;
            rec.ablation = config.ablation;
            rec.train = losses;
            state.history.push(rec);
        }
    }
    Ok(TrainOutcome { state })
}
