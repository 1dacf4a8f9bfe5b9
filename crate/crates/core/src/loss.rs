//! Cross-entropy, KL and the distillation objectives built from them.
//!
//! Every loss is a batch mean. Student probabilities live in the graph;
//! teacher probabilities enter as plain tensors, so no gradient can reach a
//! teacher. KL is taken as `KL(teacher ‖ student)`, i.e. the written
//! `KL(f_S, f_T)` maps to `Σ f_T log(f_T / f_S)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::model::{EnsembleTeacher, Model};
use crate::tensor::{one_hot, Tensor};

/// Tolerance on row sums of probability tensors.
pub const SIMPLEX_TOL: f64 = 1e-9;

fn check_rows(t: &Tensor, name: &'static str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::invalid(name, format!("expected a batch × classes matrix, got {:?}", t.shape())));
    }
    for i in 0..t.rows() {
        let row = t.row(i);
        if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(name, format!("row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(name, format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Batch of target distributions, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget(Tensor);

impl SoftTarget {
    pub fn new(probs: Tensor) -> Result<Self> {
        check_rows(&probs, "target")?;
        Ok(SoftTarget(probs))
    }

    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        Ok(SoftTarget(one_hot(labels, classes)?))
    }

    pub fn probs(&self) -> &Tensor {
        &self.0
    }
}

/// Convex combination `α·teacher + (1−α)·y`.
pub fn mix_labels(teacher_probs: &Tensor, y_onehot: &Tensor, alpha: f64) -> Result<SoftTarget> {
    check_unit("alpha", alpha)?;
    if teacher_probs.shape() != y_onehot.shape() {
        return Err(Error::Shape {
            op: "mix_labels",
            lhs: teacher_probs.shape().to_vec(),
            rhs: y_onehot.shape().to_vec(),
        });
    }
    let data = teacher_probs
        .data()
        .iter()
        .zip(y_onehot.data())
        .map(|(t, y)| alpha * t + (1.0 - alpha) * y)
        .collect();
    SoftTarget::new(Tensor::from_parts(y_onehot.shape().to_vec(), data))
}

fn check_unit(name: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("{v} not in [0, 1]")))
    }
}

fn check_same(g: &Graph, pred: Var, other: &Tensor, op: &'static str) -> Result<()> {
    if g.value(pred).shape() != other.shape() {
        return Err(Error::Shape {
            op,
            lhs: g.value(pred).shape().to_vec(),
            rhs: other.shape().to_vec(),
        });
    }
    Ok(())
}

/// `−(1/n) Σ_b Σ_i t_i log(p_i + 1e-12)`.
pub fn cross_entropy_soft(g: &mut Graph, pred: Var, target: &SoftTarget) -> Result<Var> {
    check_same(g, pred, target.probs(), "cross_entropy")?;
    let n = g.value(pred).rows() as f64;
    let logp = g.log(pred, Some(LOG_FLOOR))?;
    let t = g.constant(target.probs().clone());
    let prod = g.mul(t, logp)?;
    let total = g.sum(prod)?;
    g.scale(total, -1.0 / n)
}

/// `(1/n) Σ_b Σ_i q_i log((q_i + 1e-12)/(p_i + 1e-12))` with `q` the teacher.
pub fn kl_divergence(g: &mut Graph, student: Var, teacher: &Tensor) -> Result<Var> {
    check_same(g, student, teacher, "kl_divergence")?;
    let n = teacher.rows() as f64;
    let neg_entropy: f64 = teacher.data().iter().map(|q| q * (q + LOG_FLOOR).ln()).sum::<f64>() / n;
    let logp = g.log(student, Some(LOG_FLOOR))?;
    let q = g.constant(teacher.clone());
    let prod = g.mul(q, logp)?;
    let total = g.sum(prod)?;
    let cross = g.scale(total, -1.0 / n)?;
    let c = g.constant(Tensor::scalar(neg_entropy));
    g.add(cross, c)
}

fn weighted(g: &mut Graph, a: Var, wa: f64, b: Var, wb: f64) -> Result<Var> {
    let a = g.scale(a, wa)?;
    let b = g.scale(b, wb)?;
    g.add(a, b)
}

/// `(1−λ) CE(f_S(x), y) + λ KL(f_S(x), f_T(x))`.
pub fn ckd_loss(g: &mut Graph, s_clean: Var, t_clean: &Tensor, y: &SoftTarget, lambda: f64) -> Result<Var> {
    check_unit("lambda", lambda)?;
    let ce = cross_entropy_soft(g, s_clean, y)?;
    let kl = kl_divergence(g, s_clean, t_clean)?;
    weighted(g, ce, 1.0 - lambda, kl, lambda)
}

/// `(1−λ) CE(f_S(x), y) + λ KL(f_S(x′), f_T(x))`.
pub fn ard_loss(g: &mut Graph, s_clean: Var, s_adv: Var, t_clean: &Tensor, y: &SoftTarget, lambda: f64) -> Result<Var> {
    check_unit("lambda", lambda)?;
    let ce = cross_entropy_soft(g, s_clean, y)?;
    let kl = kl_divergence(g, s_adv, t_clean)?;
    weighted(g, ce, 1.0 - lambda, kl, lambda)
}

/// `(1−λ) KL(f_S(x), f_T(x)) + λ KL(f_S(x′), f_T(x))`.
pub fn rslad_loss(g: &mut Graph, s_clean: Var, s_adv: Var, t_clean: &Tensor, lambda: f64) -> Result<Var> {
    check_unit("lambda", lambda)?;
    let kl_clean = kl_divergence(g, s_clean, t_clean)?;
    let kl_adv = kl_divergence(g, s_adv, t_clean)?;
    weighted(g, kl_clean, 1.0 - lambda, kl_adv, lambda)
}

/// RSLAD with the teacher target replaced by `α f_T(x) + (1−α) y`.
pub fn rslad_lm_loss(
    g: &mut Graph,
    s_clean: Var,
    s_adv: Var,
    t_clean: &Tensor,
    y: Option<&SoftTarget>,
    lambda: f64,
    alpha: f64,
) -> Result<Var> {
    let y = y.ok_or_else(|| Error::invalid("labels", "label-mixed RSLAD requires labels"))?;
    let mixed = mix_labels(t_clean, y.probs(), alpha)?;
    rslad_loss(g, s_clean, s_adv, mixed.probs(), lambda)
}

/// `CE(f_S(x′), α f_T(x′) + (1−α) y)`; `t_adv` is the teacher (or ensemble)
/// evaluated at the adversarial input.
pub fn akd_loss(g: &mut Graph, s_adv: Var, t_adv: &Tensor, y: &SoftTarget, alpha: f64) -> Result<Var> {
    let target = mix_labels(t_adv, y.probs(), alpha)?;
    cross_entropy_soft(g, s_adv, &target)
}

/// Which objective a training run minimizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossVariant {
    /// Plain cross-entropy; adversarial training when an attack is configured.
    Ce,
    Ckd { lambda: f64 },
    Ard { lambda: f64 },
    Rslad { lambda: f64 },
    RsladLm { lambda: f64, alpha: f64 },
    Akd { alpha: f64 },
    EnsembleAkd { alpha: f64, beta: Vec<f64> },
}

impl LossVariant {
    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Ce => "ce",
            LossVariant::Ckd { .. } => "ckd",
            LossVariant::Ard { .. } => "ard",
            LossVariant::Rslad { .. } => "rslad",
            LossVariant::RsladLm { .. } => "rslad_lm",
            LossVariant::Akd { .. } => "akd",
            LossVariant::EnsembleAkd { .. } => "ensemble_akd",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossVariant::Ce => Ok(()),
            LossVariant::Ckd { lambda } | LossVariant::Ard { lambda } | LossVariant::Rslad { lambda } => {
                check_unit("lambda", *lambda)
            }
            LossVariant::RsladLm { lambda, alpha } => {
                check_unit("lambda", *lambda)?;
                check_unit("alpha", *alpha)
            }
            LossVariant::Akd { alpha } => check_unit("alpha", *alpha),
            LossVariant::EnsembleAkd { alpha, beta } => {
                check_unit("alpha", *alpha)?;
                crate::model::validate_beta(beta, beta.len())
            }
        }
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, LossVariant::Ce)
    }

    /// Whether the objective reads `x′`. Plain CE reads it when present.
    pub fn needs_adversarial(&self) -> bool {
        !matches!(self, LossVariant::Ce | LossVariant::Ckd { .. })
    }

    /// Builds the loss into `g`. `student_params` are the student's bound
    /// parameters; the teacher is evaluated outside the graph.
    pub fn build(
        &self,
        g: &mut Graph,
        student: &Model,
        student_params: &[Var],
        teacher: Option<&EnsembleTeacher>,
        inputs: &LossInputs,
    ) -> Result<Var> {
        self.validate()?;
        let classes = student.spec.num_classes;
        let y = SoftTarget::from_labels(inputs.labels, classes)?;
        let x_adv = || {
            inputs
                .x_adv
                .ok_or_else(|| Error::invalid("x_adv", format!("{} needs adversarial inputs", self.name())))
        };
        let teacher = || {
            teacher.ok_or_else(|| Error::Missing(format!("{} loss requires a teacher", self.name())))
        };
        let probs = |g: &mut Graph, x: &Tensor| -> Result<Var> {
            let xv = g.constant(x.clone());
            let z = student.logits(g, student_params, xv)?;
            g.softmax(z)
        };
        match self {
            LossVariant::Ce => {
                let s = probs(g, inputs.x_adv.unwrap_or(inputs.x))?;
                cross_entropy_soft(g, s, &y)
            }
            LossVariant::Ckd { lambda } => {
                let t = teacher()?.probs(inputs.x)?;
                let s = probs(g, inputs.x)?;
                ckd_loss(g, s, &t, &y, *lambda)
            }
            LossVariant::Ard { lambda } => {
                let t = teacher()?.probs(inputs.x)?;
                let xa = x_adv()?;
                let s = probs(g, inputs.x)?;
                let sa = probs(g, xa)?;
                ard_loss(g, s, sa, &t, &y, *lambda)
            }
            LossVariant::Rslad { lambda } => {
                let t = teacher()?.probs(inputs.x)?;
                let xa = x_adv()?;
                let s = probs(g, inputs.x)?;
                let sa = probs(g, xa)?;
                rslad_loss(g, s, sa, &t, *lambda)
            }
            LossVariant::RsladLm { lambda, alpha } => {
                let t = teacher()?.probs(inputs.x)?;
                let xa = x_adv()?;
                let s = probs(g, inputs.x)?;
                let sa = probs(g, xa)?;
                rslad_lm_loss(g, s, sa, &t, Some(&y), *lambda, *alpha)
            }
            LossVariant::Akd { alpha } => {
                let xa = x_adv()?;
                let t = teacher()?.probs(xa)?;
                let sa = probs(g, xa)?;
                akd_loss(g, sa, &t, &y, *alpha)
            }
            LossVariant::EnsembleAkd { alpha, beta } => {
                let xa = x_adv()?;
                let t = teacher()?.with_beta(beta.clone())?.probs(xa)?;
                let sa = probs(g, xa)?;
                akd_loss(g, sa, &t, &y, *alpha)
            }
        }
    }

    /// Loss value for a frozen student (no gradients).
    pub fn value(&self, student: &Model, teacher: Option<&EnsembleTeacher>, inputs: &LossInputs) -> Result<f64> {
        let mut g = Graph::new();
        let p = student.bind(&mut g, false);
        let l = self.build(&mut g, student, &p, teacher, inputs)?;
        Ok(g.scalar(l))
    }
}

/// A batch as seen by a loss: clean inputs, optional adversarial inputs, labels.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub x: &'a Tensor,
    pub x_adv: Option<&'a Tensor>,
    pub labels: &'a [usize],
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.scalar(v)
    }

    #[test]
    fn ce_examples() {
        let y = SoftTarget::from_labels(&[0, 1], 2).unwrap();
        let perfect = eval(|g| {
            let p = g.constant(y.probs().clone());
            cross_entropy_soft(g, p, &y)
        });
        assert!(perfect.abs() < 1e-11);

        let uniform = eval(|g| {
            let p = g.constant(Tensor::full(&[2, 2], 0.5));
            cross_entropy_soft(g, p, &y)
        });
        assert!((uniform - 2f64.ln()).abs() < 1e-11);
        let three = eval(|g| {
            let p = g.constant(Tensor::full(&[1, 3], 1.0 / 3.0));
            cross_entropy_soft(g, p, &SoftTarget::from_labels(&[2], 3).unwrap())
        });
        assert!((three - 3f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn ce_of_mixed_target_is_its_entropy() {
        // α = 0.8, f_T = [0.6, 0.4], y = 0 → [0.68, 0.32]
        let t = mix_labels(&probs(&[&[0.6, 0.4]]), &probs(&[&[1.0, 0.0]]), 0.8).unwrap();
        assert!((t.probs().data()[0] - 0.68).abs() < 1e-15);
        assert!((t.probs().data()[1] - 0.32).abs() < 1e-15);
        let v = eval(|g| {
            let p = g.constant(t.probs().clone());
            cross_entropy_soft(g, p, &t)
        });
        let oracle = -(0.68f64 * 0.68f64.ln() + 0.32 * 0.32f64.ln());
        assert!((v - oracle).abs() < 1e-10);
        assert!((v - 0.6269).abs() < 1e-4);
    }

    #[test]
    fn kl_examples() {
        let p = probs(&[&[0.3, 0.7], &[0.9, 0.1]]);
        let same = eval(|g| {
            let s = g.constant(p.clone());
            kl_divergence(g, s, &p)
        });
        assert!(same.abs() < 1e-15);
        let ln2 = eval(|g| {
            let s = g.constant(probs(&[&[0.5, 0.5]]));
            kl_divergence(g, s, &probs(&[&[1.0, 0.0]]))
        });
        assert!((ln2 - 2f64.ln()).abs() < 1e-11);
    }

    #[test]
    fn mix_labels_edges() {
        let t = probs(&[&[0.6, 0.4], &[0.2, 0.8]]);
        let y = one_hot(&[0, 0], 2).unwrap();
        assert_eq!(mix_labels(&t, &y, 0.0).unwrap().probs(), &y);
        assert_eq!(mix_labels(&t, &y, 1.0).unwrap().probs(), &t);
        assert!(mix_labels(&t, &y, 1.2).is_err());
        assert!(mix_labels(&t, &y, -0.1).is_err());
    }

    #[test]
    fn soft_target_validation() {
        assert!(SoftTarget::new(probs(&[&[0.5, 0.6]])).is_err());
        assert!(SoftTarget::new(probs(&[&[-0.1, 1.1]])).is_err());
        assert!(SoftTarget::new(probs(&[&[0.25, 0.75]])).is_ok());
    }

    #[test]
    fn rslad_lm_requires_labels() {
        let mut g = Graph::new();
        let s = g.constant(probs(&[&[0.5, 0.5]]));
        let t = probs(&[&[0.5, 0.5]]);
        assert!(rslad_lm_loss(&mut g, s, s, &t, None, 0.5, 0.5).is_err());
    }

    #[test]
    fn variant_validation() {
        assert!(LossVariant::Ckd { lambda: 1.5 }.validate().is_err());
        assert!(LossVariant::Akd { alpha: -0.5 }.validate().is_err());
        assert!(LossVariant::EnsembleAkd {
            alpha: 0.5,
            beta: vec![0.3, 0.6]
        }
        .validate()
        .is_err());
        assert!(LossVariant::EnsembleAkd {
            alpha: 0.5,
            beta: vec![0.25; 4]
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn variant_serde_shape() {
        let v: LossVariant = serde_json::from_str(r#"{"kind":"rslad_lm","lambda":0.5,"alpha":0.9}"#).unwrap();
        assert_eq!(v, LossVariant::RsladLm { lambda: 0.5, alpha: 0.9 });
        let ce: LossVariant = serde_json::from_str(r#"{"kind":"ce"}"#).unwrap();
        assert_eq!(ce, LossVariant::Ce);
    }
}
