//! Shared feature extractor with task, domain, and confounder heads.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Gradients, ParamKey, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{init_mlp_with, Activation, BoundMlp, Mlp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Data-determined sizes of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub classes: usize,
    /// Total number of domains, sources plus the target.
    pub domains: usize,
    /// One entry per confounder; may be empty.
    pub confounder_arities: Vec<usize>,
}

/// Architecture choices.
///
/// Heads default to a single linear layer followed by softmax. Head depth is
/// not fixed by the method; `head_hidden` adds hidden layers to every head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub extractor_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub head_hidden: Vec<usize>,
    /// Hidden-layer activation for every network.
    pub activation: Activation,
    /// Activation applied to the latent representation itself.
    pub latent_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor_hidden: vec![32],
            latent_dim: 8,
            head_hidden: Vec::new(),
            activation: Activation::Relu,
            latent_activation: Activation::Identity,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::config("model.latent_dim", "must be greater than 1"));
        }
        if self.extractor_hidden.iter().chain(&self.head_hidden).any(|&h| h == 0) {
            return Err(Error::config("model", "hidden sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Extractor, task head, and confounder heads.
    ExtractorAndHeads,
    /// The domain classifier alone.
    DomainOnly,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "RawModel<T>")]
pub struct CadaftModel<T> {
    dims: ModelDims,
    extractor: Mlp<T>,
    task_head: Mlp<T>,
    domain_head: Mlp<T>,
    confounder_heads: Vec<Mlp<T>>,
}

#[derive(Deserialize)]
#[serde(bound = "T: Scalar")]
struct RawModel<T> {
    dims: ModelDims,
    extractor: Mlp<T>,
    task_head: Mlp<T>,
    domain_head: Mlp<T>,
    confounder_heads: Vec<Mlp<T>>,
}

impl<T: Scalar> TryFrom<RawModel<T>> for CadaftModel<T> {
    type Error = Error;

    fn try_from(raw: RawModel<T>) -> Result<Self> {
        CadaftModel::from_parts(
            raw.dims,
            raw.extractor,
            raw.task_head,
            raw.domain_head,
            raw.confounder_heads,
        )
    }
}

/// Tape handles from one forward pass. Heads emit logits.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub z: Var,
    pub y_logits: Var,
    pub s_logits: Var,
    pub t_logits: Vec<Var>,
}

/// Evaluated representations and class posteriors for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs<T> {
    pub z: Tensor<T>,
    pub y_prob: Tensor<T>,
    pub s_prob: Tensor<T>,
    pub t_prob: Vec<Tensor<T>>,
}

fn with_latent_activation<T: Scalar>(mut m: Mlp<T>, act: Activation) -> Result<Mlp<T>> {
    if act == Activation::Identity {
        return Ok(m);
    }
    let mut layers = m.layers().to_vec();
    layers.last_mut().expect("nonempty").activation = act;
    m = Mlp::new(layers)?;
    Ok(m)
}

impl<T: Scalar> CadaftModel<T> {
    pub fn new(dims: ModelDims, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.input == 0 || dims.classes < 2 {
            return Err(Error::config("dims", "need input width ≥ 1 and ≥ 2 classes"));
        }
        if dims.domains < 1 || dims.confounder_arities.iter().any(|&a| a < 2) {
            return Err(Error::config("dims", "need ≥ 1 domain and confounder arities ≥ 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = config.latent_dim;
        let ext_dims: Vec<usize> = std::iter::once(dims.input)
            .chain(config.extractor_hidden.iter().copied())
            .chain(std::iter::once(l))
            .collect();
        let extractor = with_latent_activation(
            init_mlp_with(&ext_dims, config.activation, &mut rng)?,
            config.latent_activation,
        )?;
        let head = |out: usize, rng: &mut ChaCha8Rng| {
            let d: Vec<usize> = std::iter::once(l)
                .chain(config.head_hidden.iter().copied())
                .chain(std::iter::once(out))
                .collect();
            init_mlp_with(&d, config.activation, rng)
        };
        let task_head = head(dims.classes, &mut rng)?;
        let domain_head = head(dims.domains, &mut rng)?;
        let confounder_heads = dims
            .confounder_arities
            .iter()
            .map(|&a| head(a, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(dims, extractor, task_head, domain_head, confounder_heads)
    }

    pub fn from_parts(
        dims: ModelDims,
        extractor: Mlp<T>,
        task_head: Mlp<T>,
        domain_head: Mlp<T>,
        confounder_heads: Vec<Mlp<T>>,
    ) -> Result<Self> {
        let l = extractor.out_dim();
        if l < 2 {
            return Err(Error::Shape("latent width must exceed 1".into()));
        }
        if extractor.in_dim() != dims.input {
            return Err(Error::Shape("extractor input width differs from dims".into()));
        }
        let heads = std::iter::once(&task_head)
            .chain(std::iter::once(&domain_head))
            .chain(&confounder_heads);
        if heads.clone().any(|h| h.in_dim() != l) {
            return Err(Error::Shape("every head must read the latent width".into()));
        }
        if task_head.out_dim() != dims.classes || domain_head.out_dim() != dims.domains {
            return Err(Error::Shape("head widths differ from dims".into()));
        }
        if confounder_heads.len() != dims.confounder_arities.len()
            || confounder_heads
                .iter()
                .zip(&dims.confounder_arities)
                .any(|(h, &a)| h.out_dim() != a)
        {
            return Err(Error::Shape("confounder heads differ from dims".into()));
        }
        Ok(CadaftModel {
            dims,
            extractor,
            task_head,
            domain_head,
            confounder_heads,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn latent_dim(&self) -> usize {
        self.extractor.out_dim()
    }

    pub fn extractor(&self) -> &Mlp<T> {
        &self.extractor
    }

    pub fn task_head(&self) -> &Mlp<T> {
        &self.task_head
    }

    pub fn domain_head(&self) -> &Mlp<T> {
        &self.domain_head
    }

    pub fn confounder_heads(&self) -> &[Mlp<T>] {
        &self.confounder_heads
    }

    fn key_offsets(&self) -> (ParamKey, ParamKey, ParamKey, ParamKey) {
        let task = self.extractor.tensor_count();
        let domain = task + self.task_head.tensor_count();
        let conf = domain + self.domain_head.tensor_count();
        (0, task, domain, conf)
    }

    fn domain_keys(&self) -> std::ops::Range<ParamKey> {
        let (_, _, d, c) = self.key_offsets();
        d..c
    }

    pub fn tensor_count(&self) -> usize {
        self.all_tensors().count()
    }

    pub fn parameter_count(&self) -> usize {
        self.all_tensors().map(|t| t.len()).sum()
    }

    fn all_tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.extractor
            .tensors()
            .chain(self.task_head.tensors())
            .chain(self.domain_head.tensors())
            .chain(self.confounder_heads.iter().flat_map(|h| h.tensors()))
    }

    fn in_group(&self, key: ParamKey, group: ParamGroup) -> bool {
        let dom = self.domain_keys().contains(&key);
        match group {
            ParamGroup::All => true,
            ParamGroup::DomainOnly => dom,
            ParamGroup::ExtractorAndHeads => !dom,
        }
    }

    pub fn keys(&self, group: ParamGroup) -> Vec<ParamKey> {
        (0..self.tensor_count())
            .filter(|&k| self.in_group(k, group))
            .collect()
    }

    pub fn params(&self, group: ParamGroup) -> Vec<(ParamKey, &Tensor<T>)> {
        let dom = self.domain_keys();
        self.all_tensors()
            .enumerate()
            .filter(|(k, _)| match group {
                ParamGroup::All => true,
                ParamGroup::DomainOnly => dom.contains(k),
                ParamGroup::ExtractorAndHeads => !dom.contains(k),
            })
            .collect()
    }

    pub fn params_mut(&mut self, group: ParamGroup) -> Vec<(ParamKey, &mut Tensor<T>)> {
        let dom = self.domain_keys();
        self.extractor
            .tensors_mut()
            .chain(self.task_head.tensors_mut())
            .chain(self.domain_head.tensors_mut())
            .chain(self.confounder_heads.iter_mut().flat_map(|h| h.tensors_mut()))
            .enumerate()
            .filter(|(k, _)| match group {
                ParamGroup::All => true,
                ParamGroup::DomainOnly => dom.contains(k),
                ParamGroup::ExtractorAndHeads => !dom.contains(k),
            })
            .collect()
    }

    /// Copies gradients from a backward sweep into the tensors of `group`.
    pub fn assign_grads(&mut self, grads: &Gradients<T>, group: ParamGroup) -> Result<()> {
        for (key, tensor) in self.params_mut(group) {
            let g = grads
                .param(key)
                .ok_or_else(|| Error::Contract(format!("parameter {key} not on the tape")))?;
            tensor.set_grad(g.to_vec())?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.params_mut(ParamGroup::All) {
            t.clear_grad();
        }
    }

    /// Hash of the exact bits of every tensor in `group`.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h = DefaultHasher::new();
        for (k, t) in self.params(group) {
            h.write_usize(k);
            t.hash_bits(&mut h);
        }
        h.finish()
    }

    /// Puts every tensor on `tape`; tensors in `trainable` become parameters,
    /// the rest constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: ParamGroup) -> Result<BoundModel> {
        let (e, t, d, c) = self.key_offsets();
        let key = |k: ParamKey| self.in_group(k, trainable).then_some(k);
        let extractor = self.extractor.bind(tape, key(e))?;
        let task_head = self.task_head.bind(tape, key(t))?;
        let domain_head = self.domain_head.bind(tape, key(d))?;
        let mut next = c;
        let mut confounder_heads = Vec::with_capacity(self.confounder_heads.len());
        for h in &self.confounder_heads {
            confounder_heads.push(h.bind(tape, key(next))?);
            next += h.tensor_count();
        }
        Ok(BoundModel {
            extractor,
            task_head,
            domain_head,
            confounder_heads,
        })
    }

    /// Full forward pass with every tensor registered as a parameter.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<ModelVars> {
        self.bind(tape, ParamGroup::All)?.forward(tape, x)
    }

    /// Evaluates representations and posteriors without tracking gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<ModelOutputs<T>> {
        let z = self.extractor.predict(x)?;
        let y_prob = softmax(&self.task_head.predict(&z)?);
        let s_prob = softmax(&self.domain_head.predict(&z)?);
        let t_prob = self
            .confounder_heads
            .iter()
            .map(|h| h.predict(&z).map(|l| softmax(&l)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelOutputs {
            z,
            y_prob,
            s_prob,
            t_prob,
        })
    }
}

/// A model bound to one tape; may be applied to any number of batches.
#[derive(Clone, Debug)]
pub struct BoundModel {
    extractor: BoundMlp,
    task_head: BoundMlp,
    domain_head: BoundMlp,
    confounder_heads: Vec<BoundMlp>,
}

impl BoundModel {
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.extractor.apply(tape, x)
    }

    pub fn domain_logits<T: Scalar>(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        self.domain_head.apply(tape, z)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<ModelVars> {
        let z = self.extractor.apply(tape, x)?;
        let y_logits = self.task_head.apply(tape, z)?;
        let s_logits = self.domain_head.apply(tape, z)?;
        let t_logits = self
            .confounder_heads
            .iter()
            .map(|h| h.apply(tape, z))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelVars {
            z,
            y_logits,
            s_logits,
            t_logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(t: usize) -> ModelDims {
        ModelDims {
            input: 6,
            classes: 2,
            domains: 2,
            confounder_arities: vec![2; t],
        }
    }

    fn batch(rows: usize) -> Tensor<f64> {
        let v: Vec<f64> = (0..rows * 6).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        Tensor::new(vec![rows, 6], v).unwrap()
    }

    #[test]
    fn probabilities_are_normalized() {
        let m = CadaftModel::<f64>::new(dims(2), &ModelConfig::default(), 1).unwrap();
        let out = m.predict(&batch(1)).unwrap();
        assert_eq!(out.z.shape(), &[1, 8]);
        for p in [&out.y_prob, &out.s_prob, &out.t_prob[0], &out.t_prob[1]] {
            let s: f64 = p.values().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_confounder_set() {
        let m0 = CadaftModel::<f64>::new(dims(0), &ModelConfig::default(), 5).unwrap();
        let out = m0.predict(&batch(3)).unwrap();
        assert!(out.t_prob.is_empty());
        assert_eq!(out.y_prob.shape(), &[3, 2]);
        assert_eq!(m0.confounder_heads().len(), 0);
    }

    #[test]
    fn batch_permutation_equivariance() {
        let m = CadaftModel::<f64>::new(dims(1), &ModelConfig::default(), 2).unwrap();
        let x = batch(5);
        let perm = [3, 0, 4, 1, 2];
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x.select_rows(&perm).unwrap()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.z.row(i), a.z.row(p));
            assert_eq!(b.y_prob.row(i), a.y_prob.row(p));
            assert_eq!(b.s_prob.row(i), a.s_prob.row(p));
            assert_eq!(b.t_prob[0].row(i), a.t_prob[0].row(p));
        }
    }

    #[test]
    fn parameter_groups_partition() {
        let m = CadaftModel::<f64>::new(dims(2), &ModelConfig::default(), 3).unwrap();
        let dom = m.keys(ParamGroup::DomainOnly);
        let rest = m.keys(ParamGroup::ExtractorAndHeads);
        let all = m.keys(ParamGroup::All);
        assert!(dom.iter().all(|k| !rest.contains(k)));
        let mut union: Vec<_> = dom.iter().chain(&rest).copied().collect();
        union.sort();
        assert_eq!(union, all);
        let dom_tensors: Vec<_> = m.params(ParamGroup::DomainOnly).into_iter().map(|(_, t)| t).collect();
        let phi: Vec<_> = m.domain_head().tensors().collect();
        assert_eq!(dom_tensors, phi);
    }

    #[test]
    fn parameter_count_matches_layer_shapes() {
        // d=6 → 32 → 8; heads 8→2 each (task, domain, 2 confounders)
        let m = CadaftModel::<f64>::new(dims(2), &ModelConfig::default(), 3).unwrap();
        let expect = (6 * 32 + 32) + (32 * 8 + 8) + 4 * (8 * 2 + 2);
        assert_eq!(m.parameter_count(), expect);
        assert_eq!(m.tensor_count(), 4 + 2 * 4);
    }

    #[test]
    fn detached_domain_loss_isolated_from_extractor() {
        let m = CadaftModel::<f64>::new(dims(1), &ModelConfig::default(), 9).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&batch(4));
        let vars = m.forward(&mut tape, x).unwrap();
        let zd = tape.detach(vars.z).unwrap();
        // domain head again on detached z, using constants for φ to avoid duplicate keys
        let logits = m.domain_head().forward(&mut tape, zd, None).unwrap();
        let p = tape.softmax(logits).unwrap();
        let loss = tape.sum(p).unwrap();
        let lp = tape.log_softmax(logits).unwrap();
        let l2 = tape.mean(lp).unwrap();
        let total = tape.add(loss, l2).unwrap();
        let g = tape.backward(total).unwrap();
        for k in m.keys(ParamGroup::ExtractorAndHeads) {
            assert!(g.param(k).unwrap().iter().all(|&v| v == 0.0));
        }

        // same loss through the live z reaches the extractor
        let mut tape = Tape::new();
        let x = tape.constant(&batch(4));
        let vars = m.forward(&mut tape, x).unwrap();
        let lp = tape.log_softmax(vars.s_logits).unwrap();
        let sel = tape.constant(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let picked = tape.mul(lp, sel).unwrap();
        let loss = tape.mean(picked).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.param(0).unwrap().iter().any(|&v| v != 0.0));
        assert!(g.param(m.keys(ParamGroup::ExtractorAndHeads)[4]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_single_latent() {
        let cfg = ModelConfig {
            latent_dim: 1,
            ..ModelConfig::default()
        };
        assert!(CadaftModel::<f64>::new(dims(0), &cfg, 0).is_err());
    }
}
