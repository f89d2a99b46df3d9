//! Supervised, adversarial, and diagnostic losses.
//!
//! Every loss comes in two forms: a value-level function over probability
//! tensors, and a tape-level function over logits used for training. The tape
//! forms go through log-softmax so they stay finite for confident logits.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelOutputs, ModelVars};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One-hot targets and masks for a batch.
///
/// A row whose mask is `false` contributes nothing to that label's term and
/// its one-hot row is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLabels<T> {
    pub y: Option<Tensor<T>>,
    pub s: Tensor<T>,
    pub t: Vec<Option<Tensor<T>>>,
    pub y_mask: Vec<bool>,
    pub t_mask: Vec<Vec<bool>>,
}

fn one_hot<T: Scalar>(labels: &[Option<usize>], width: usize, what: &str) -> Result<Tensor<T>> {
    let mut v = vec![T::zero(); labels.len() * width];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            if c >= width {
                return Err(Error::Contract(format!("{what} label {c} out of range {width}")));
            }
            v[i * width + c] = T::one();
        }
    }
    Tensor::new(vec![labels.len(), width], v)
}

impl<T: Scalar> BatchLabels<T> {
    /// `t[i]` holds the annotation of every confounder for row `i`, or `None`.
    pub fn new(
        dims: &ModelDims,
        y: &[Option<usize>],
        s: &[usize],
        t: &[Option<Vec<usize>>],
    ) -> Result<Self> {
        let n = s.len();
        if n == 0 || y.len() != n || t.len() != n {
            return Err(Error::Shape("label columns must share a nonzero length".into()));
        }
        let y_mask: Vec<bool> = y.iter().map(Option::is_some).collect();
        let y_t = if y_mask.iter().any(|&m| m) {
            Some(one_hot(y, dims.classes, "task")?)
        } else {
            None
        };
        let s_t = one_hot(
            &s.iter().map(|&v| Some(v)).collect::<Vec<_>>(),
            dims.domains,
            "domain",
        )?;
        let mut t_tensors = Vec::new();
        let mut t_mask = Vec::new();
        for (c, &arity) in dims.confounder_arities.iter().enumerate() {
            let col: Vec<Option<usize>> = t
                .iter()
                .map(|row| row.as_ref().map(|v| v.get(c).copied()).unwrap_or(None))
                .collect();
            if t.iter().flatten().any(|row| row.len() != dims.confounder_arities.len()) {
                return Err(Error::Shape("confounder annotation width mismatch".into()));
            }
            let mask: Vec<bool> = col.iter().map(Option::is_some).collect();
            t_tensors.push(if mask.iter().any(|&m| m) {
                Some(one_hot(&col, arity, "confounder")?)
            } else {
                None
            });
            t_mask.push(mask);
        }
        Ok(BatchLabels {
            y: y_t,
            s: s_t,
            t: t_tensors,
            y_mask,
            t_mask,
        })
    }

    pub fn rows(&self) -> usize {
        self.s.rows()
    }

    /// Drops every confounder annotation.
    pub fn without_confounders(mut self) -> Self {
        for (t, m) in self.t.iter_mut().zip(self.t_mask.iter_mut()) {
            *t = None;
            m.iter_mut().for_each(|v| *v = false);
        }
        self
    }
}

/// A cross-entropy value together with the number of rows it averages.
/// `rows == 0` flags a fully masked batch, whose value is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy<T> {
    pub value: T,
    pub rows: usize,
}

impl<T> CrossEntropy<T> {
    pub fn all_masked(&self) -> bool {
        self.rows == 0
    }
}

/// Mean over unmasked rows of `−Σ_k target_k · ln prob_k`.
pub fn cross_entropy<T: Scalar>(
    prob: &Tensor<T>,
    target: &Tensor<T>,
    mask: &[bool],
) -> Result<CrossEntropy<T>> {
    if prob.shape() != target.shape() || mask.len() != prob.rows() {
        return Err(Error::Shape(format!(
            "cross entropy of {:?} against {:?} with {} mask rows",
            prob.shape(),
            target.shape(),
            mask.len()
        )));
    }
    if prob.values().iter().any(|p| p.is_nan()) {
        return Err(Error::Contract("NaN probability".into()));
    }
    let mut total = T::zero();
    let mut rows = 0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        rows += 1;
        for (&p, &q) in prob.row(i).iter().zip(target.row(i)) {
            if q != T::zero() {
                total = total - q * p.ln();
            }
        }
    }
    let value = if rows == 0 {
        T::zero()
    } else {
        total / T::from_usize(rows).unwrap()
    };
    Ok(CrossEntropy { value, rows })
}

/// Tape-level loss term with the number of rows it averages.
#[derive(Clone, Copy, Debug)]
pub struct Term {
    pub loss: Var,
    pub rows: usize,
}

/// Cross-entropy pooled over several (logits, one-hot target, mask) parts:
/// the mean over all unmasked rows of all parts.
pub fn pooled_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    parts: &[(Var, &Tensor<T>, &[bool])],
) -> Result<Term> {
    let rows: usize = parts
        .iter()
        .map(|(_, _, m)| m.iter().filter(|&&b| b).count())
        .sum();
    let mut acc: Option<Var> = None;
    if rows > 0 {
        let inv = T::one() / T::from_usize(rows).unwrap();
        for &(logits, target, mask) in parts {
            let shape = tape.shape(logits)?.to_vec();
            if shape != target.shape() || mask.len() != target.rows() {
                return Err(Error::Shape(format!(
                    "logits {shape:?} against target {:?}",
                    target.shape()
                )));
            }
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let cols = target.cols();
            let mut w = target.values().to_vec();
            for (i, &m) in mask.iter().enumerate() {
                let scale = if m { -inv } else { T::zero() };
                for v in &mut w[i * cols..(i + 1) * cols] {
                    *v = *v * scale;
                }
            }
            let wv = tape.constant(&Tensor::new(shape, w)?);
            let lp = tape.log_softmax(logits)?;
            let prod = tape.mul(lp, wv)?;
            let s = tape.sum(prod)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
    }
    let loss = match acc {
        Some(v) => v,
        None => tape.constant(&Tensor::scalar(T::zero())),
    };
    Ok(Term { loss, rows })
}

pub fn cross_entropy_logits<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &Tensor<T>,
    mask: &[bool],
) -> Result<Term> {
    pooled_cross_entropy(tape, &[(logits, target, mask)])
}

fn check_domains(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::config(
            "domains",
            "adversarial confusion needs at least two domains",
        ));
    }
    Ok(())
}

/// Mean cross-entropy of domain posteriors against the uniform distribution,
/// pooled over source and target rows. Its minimum is `ln N`.
pub fn loss_adv_value<T: Scalar>(s_prob_src: &Tensor<T>, s_prob_tgt: Option<&Tensor<T>>) -> Result<T> {
    let n = s_prob_src.cols();
    check_domains(n)?;
    if s_prob_tgt.is_some_and(|t| t.cols() != n) {
        return Err(Error::Shape("source and target domain widths differ".into()));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut total = T::zero();
    let mut rows = 0;
    for p in std::iter::once(s_prob_src).chain(s_prob_tgt) {
        if p.values().iter().any(|v| v.is_nan()) {
            return Err(Error::Contract("NaN probability".into()));
        }
        for i in 0..p.rows() {
            let s: T = p.row(i).iter().map(|&v| v.ln()).sum();
            total = total - inv_n * s;
            rows += 1;
        }
    }
    Ok(total / T::from_usize(rows).unwrap())
}

pub fn loss_adv<T: Scalar>(tape: &mut Tape<T>, s_logits_src: Var, s_logits_tgt: Option<Var>) -> Result<Var> {
    let mut parts = Vec::new();
    let mut targets = Vec::new();
    for v in std::iter::once(s_logits_src).chain(s_logits_tgt) {
        let shape = tape.shape(v)?.to_vec();
        let n = *shape.last().unwrap_or(&1);
        check_domains(n)?;
        let uniform = T::one() / T::from_usize(n).unwrap();
        let rows = shape.iter().product::<usize>() / n;
        targets.push((v, Tensor::new(shape, vec![uniform; rows * n])?, vec![true; rows]));
    }
    for (v, t, m) in &targets {
        parts.push((*v, t, m.as_slice()));
    }
    Ok(pooled_cross_entropy(tape, &parts)?.loss)
}

/// Individual terms of the maximization-step objective.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxStepTerms<T> {
    pub task_src: T,
    pub domain_src: T,
    pub confounder_src: Vec<T>,
    pub domain_tgt: T,
    pub confounder_tgt: Vec<T>,
}

impl<T: Scalar> MaxStepTerms<T> {
    pub fn total(&self) -> T {
        self.task_src
            + self.domain_src
            + self.confounder_src.iter().copied().sum::<T>()
            + self.domain_tgt
            + self.confounder_tgt.iter().copied().sum::<T>()
    }
}

fn check_target_labels<T>(labels: &BatchLabels<T>) -> Result<()> {
    if labels.y_mask.iter().any(|&m| m) {
        return Err(Error::Contract(
            "target batch carries task labels; the objective has no target task term".into(),
        ));
    }
    Ok(())
}

/// Source expectation of task, domain, and confounder cross-entropy plus the
/// target expectation of domain and confounder cross-entropy, evaluated on
/// probabilities. Confounder terms use only annotated rows.
pub fn loss_max_step<T: Scalar>(
    outputs_src: &ModelOutputs<T>,
    labels_src: &BatchLabels<T>,
    target: Option<(&ModelOutputs<T>, &BatchLabels<T>)>,
) -> Result<MaxStepTerms<T>> {
    let task_src = match &labels_src.y {
        Some(y) => cross_entropy(&outputs_src.y_prob, y, &labels_src.y_mask)?.value,
        None => T::zero(),
    };
    let all = vec![true; labels_src.rows()];
    let domain_src = cross_entropy(&outputs_src.s_prob, &labels_src.s, &all)?.value;
    let conf = |out: &ModelOutputs<T>, lab: &BatchLabels<T>| -> Result<Vec<T>> {
        out.t_prob
            .iter()
            .zip(lab.t.iter().zip(&lab.t_mask))
            .map(|(p, (t, m))| match t {
                Some(t) => cross_entropy(p, t, m).map(|c| c.value),
                None => Ok(T::zero()),
            })
            .collect()
    };
    let confounder_src = conf(outputs_src, labels_src)?;
    let (domain_tgt, confounder_tgt) = match target {
        Some((out, lab)) => {
            check_target_labels(lab)?;
            let all = vec![true; lab.rows()];
            (cross_entropy(&out.s_prob, &lab.s, &all)?.value, conf(out, lab)?)
        }
        None => (T::zero(), vec![T::zero(); confounder_src.len()]),
    };
    Ok(MaxStepTerms {
        task_src,
        domain_src,
        confounder_src,
        domain_tgt,
        confounder_tgt,
    })
}

/// Tape-level terms matching [`loss_max_step`].
#[derive(Clone, Debug)]
pub struct MaxStepVars {
    pub task_src: Term,
    pub domain_src: Term,
    pub confounder_src: Vec<Term>,
    pub domain_tgt: Option<Term>,
    pub confounder_tgt: Vec<Term>,
}

impl MaxStepVars {
    pub fn total<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let mut acc = tape.add(self.task_src.loss, self.domain_src.loss)?;
        for t in self
            .confounder_src
            .iter()
            .chain(&self.domain_tgt)
            .chain(&self.confounder_tgt)
        {
            acc = tape.add(acc, t.loss)?;
        }
        Ok(acc)
    }
}

pub fn loss_max_step_tape<T: Scalar>(
    tape: &mut Tape<T>,
    src: &ModelVars,
    labels_src: &BatchLabels<T>,
    target: Option<(&ModelVars, &BatchLabels<T>)>,
) -> Result<MaxStepVars> {
    let task_src = match &labels_src.y {
        Some(y) => cross_entropy_logits(tape, src.y_logits, y, &labels_src.y_mask)?,
        None => Term {
            loss: tape.constant(&Tensor::scalar(T::zero())),
            rows: 0,
        },
    };
    let all = vec![true; labels_src.rows()];
    let domain_src = cross_entropy_logits(tape, src.s_logits, &labels_src.s, &all)?;
    let confounder_src = confounder_terms(tape, src, labels_src)?;
    let (domain_tgt, confounder_tgt) = match target {
        Some((vars, lab)) => {
            check_target_labels(lab)?;
            let all = vec![true; lab.rows()];
            (
                Some(cross_entropy_logits(tape, vars.s_logits, &lab.s, &all)?),
                confounder_terms(tape, vars, lab)?,
            )
        }
        None => (None, Vec::new()),
    };
    Ok(MaxStepVars {
        task_src,
        domain_src,
        confounder_src,
        domain_tgt,
        confounder_tgt,
    })
}

pub(crate) fn confounder_terms<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    labels: &BatchLabels<T>,
) -> Result<Vec<Term>> {
    vars.t_logits
        .iter()
        .zip(labels.t.iter().zip(&labels.t_mask))
        .map(|(&logits, (t, m))| match t {
            Some(t) => cross_entropy_logits(tape, logits, t, m),
            None => Ok(Term {
                loss: tape.constant(&Tensor::scalar(T::zero())),
                rows: 0,
            }),
        })
        .collect()
}

/// Restricts the discrepancy to rows whose confounder value equals `value`.
#[derive(Clone, Copy, Debug)]
pub struct Stratum<'a> {
    pub src: &'a [Option<usize>],
    pub tgt: &'a [Option<usize>],
    pub value: usize,
}

/// `|mean_src p(s = designated) − mean_tgt p(s = designated)|`.
pub fn domain_discrepancy<T: Scalar>(
    s_prob_src: &Tensor<T>,
    s_prob_tgt: &Tensor<T>,
    designated: usize,
    stratum: Option<Stratum<'_>>,
) -> Result<T> {
    if designated >= s_prob_src.cols() || s_prob_src.cols() != s_prob_tgt.cols() {
        return Err(Error::Shape("designated domain out of range".into()));
    }
    let mean = |p: &Tensor<T>, filter: Option<&[Option<usize>]>, value: usize| -> Result<Option<T>> {
        if let Some(f) = filter {
            if f.len() != p.rows() {
                return Err(Error::Shape("stratum filter length differs from batch".into()));
            }
        }
        let mut sum = T::zero();
        let mut n = 0usize;
        for i in 0..p.rows() {
            if filter.is_none_or(|f| f[i] == Some(value)) {
                sum = sum + p.get(i, designated);
                n += 1;
            }
        }
        Ok((n > 0).then(|| sum / T::from_usize(n).unwrap()))
    };
    let (fs, ft, v) = match stratum {
        Some(s) => (Some(s.src), Some(s.tgt), s.value),
        None => (None, None, 0),
    };
    match (mean(s_prob_src, fs, v)?, mean(s_prob_tgt, ft, v)?) {
        (Some(a), Some(b)) => Ok((a - b).abs()),
        _ => Err(Error::EmptyStratum(match stratum {
            Some(s) => format!("no rows with confounder value {}", s.value),
            None => "empty batch".into(),
        })),
    }
}

/// Discrepancy for one (confounder, value) cell; `None` when a side is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct StratumDiscrepancy {
    pub confounder: usize,
    pub value: usize,
    pub discrepancy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscrepancyReport {
    pub pooled: f64,
    pub strata: Vec<StratumDiscrepancy>,
}

/// Pooled discrepancy plus one entry per confounder value.
pub fn discrepancy_report<T: Scalar>(
    s_prob_src: &Tensor<T>,
    s_prob_tgt: &Tensor<T>,
    designated: usize,
    src_t: &[Option<Vec<usize>>],
    tgt_t: &[Option<Vec<usize>>],
    arities: &[usize],
) -> Result<DiscrepancyReport> {
    let pooled = domain_discrepancy(s_prob_src, s_prob_tgt, designated, None)?.as_f64();
    let mut strata = Vec::new();
    for (c, &arity) in arities.iter().enumerate() {
        let col = |rows: &[Option<Vec<usize>>]| -> Vec<Option<usize>> {
            rows.iter()
                .map(|r| r.as_ref().and_then(|v| v.get(c).copied()))
                .collect()
        };
        let (cs, ct) = (col(src_t), col(tgt_t));
        for value in 0..arity {
            let st = Stratum {
                src: &cs,
                tgt: &ct,
                value,
            };
            let discrepancy = match domain_discrepancy(s_prob_src, s_prob_tgt, designated, Some(st)) {
                Ok(d) => Some(d.as_f64()),
                Err(Error::EmptyStratum(_)) => None,
                Err(e) => return Err(e),
            };
            strata.push(StratumDiscrepancy {
                confounder: c,
                value,
                discrepancy,
            });
        }
    }
    Ok(DiscrepancyReport { pooled, strata })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&t(&[&[0.5, 0.5]]), &t(&[&[0.0, 1.0]]), &[true]).unwrap();
        assert!((ce.value - std::f64::consts::LN_2).abs() < 1e-12);
        let ce = cross_entropy(&t(&[&[0.0, 1.0]]), &t(&[&[0.0, 1.0]]), &[true]).unwrap();
        assert_eq!(ce.value, 0.0);
        let ce = cross_entropy(
            &t(&[&[0.09003057, 0.24472847, 0.66524096]]),
            &t(&[&[1.0, 0.0, 0.0]]),
            &[true],
        )
        .unwrap();
        // −ln 0.09003057, evaluated in arbitrary precision
        assert!((ce.value - 2.40760596).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_all_masked_is_zero_and_flagged() {
        let ce = cross_entropy(&t(&[&[0.2, 0.8]]), &t(&[&[1.0, 0.0]]), &[false]).unwrap();
        assert!(ce.all_masked());
        assert_eq!(ce.value, 0.0);
    }

    #[test]
    fn cross_entropy_nan_is_contract_error() {
        let r = cross_entropy(&t(&[&[f64::NAN, 0.5]]), &t(&[&[1.0, 0.0]]), &[true]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn loss_adv_examples() {
        let u = t(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!((loss_adv_value(&u, Some(&u)).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        // confident rows are penalized without bound as confidence → 1
        let conf = t(&[&[0.99995, 0.00005]]);
        let at = loss_adv_value(&conf, None).unwrap();
        assert!((at - 4.951769).abs() < 1e-6);
        let sharper = t(&[&[1.0 - 1e-9, 1e-9]]);
        assert!(loss_adv_value(&sharper, None).unwrap() >= 10.0);
        let src = t(&[&[0.8, 0.2]]);
        let tgt = t(&[&[0.3, 0.7]]);
        let direct = (-0.5 * (0.8f64.ln() + 0.2f64.ln()) - 0.5 * (0.3f64.ln() + 0.7f64.ln())) / 2.0;
        let v = loss_adv_value(&src, Some(&tgt)).unwrap();
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 0.848307).abs() < 1e-6);
    }

    #[test]
    fn loss_adv_needs_two_domains() {
        let one = t(&[&[1.0]]);
        assert!(matches!(loss_adv_value(&one, None), Err(Error::Config { .. })));
    }

    #[test]
    fn tape_forms_match_value_forms() {
        let logits = t(&[&[0.3, -1.2, 2.0], &[1.0, 1.0, -0.5]]);
        let target = t(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]]);
        let mut tape = Tape::new();
        let lv = tape.constant(&logits);
        let term = cross_entropy_logits(&mut tape, lv, &target, &[true, true]).unwrap();
        let prob = crate::autodiff::softmax(&logits);
        let direct = cross_entropy(&prob, &target, &[true, true]).unwrap().value;
        assert!((tape.scalar_value(term.loss).unwrap() - direct).abs() < 1e-12);

        let adv = loss_adv(&mut tape, lv, Some(lv)).unwrap();
        let adv_direct = loss_adv_value(&prob, Some(&prob)).unwrap();
        assert!((tape.scalar_value(adv).unwrap() - adv_direct).abs() < 1e-12);
    }

    #[test]
    fn discrepancy_examples() {
        let a = t(&[&[0.4, 0.6], &[0.1, 0.9]]);
        assert_eq!(domain_discrepancy(&a, &a, 1, None).unwrap(), 0.0);
        let src = t(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let tgt = t(&[&[1.0, 0.0]]);
        assert_eq!(domain_discrepancy(&src, &tgt, 1, None).unwrap(), 1.0);
    }

    #[test]
    fn empty_stratum_is_signalled() {
        let a = t(&[&[0.4, 0.6]]);
        let f = [Some(0)];
        let st = Stratum {
            src: &f,
            tgt: &f,
            value: 1,
        };
        assert!(matches!(
            domain_discrepancy(&a, &a, 1, Some(st)),
            Err(Error::EmptyStratum(_))
        ));
    }

    #[test]
    fn target_task_labels_rejected() {
        let dims = ModelDims {
            input: 2,
            classes: 2,
            domains: 2,
            confounder_arities: vec![],
        };
        let src = BatchLabels::<f64>::new(&dims, &[Some(0)], &[0], &[None]).unwrap();
        let tgt = BatchLabels::<f64>::new(&dims, &[Some(1)], &[1], &[None]).unwrap();
        let out = ModelOutputs {
            z: t(&[&[0.0, 0.0]]),
            y_prob: t(&[&[0.5, 0.5]]),
            s_prob: t(&[&[0.5, 0.5]]),
            t_prob: vec![],
        };
        assert!(matches!(
            loss_max_step(&out, &src, Some((&out, &tgt))),
            Err(Error::Contract(_))
        ));
    }
}
