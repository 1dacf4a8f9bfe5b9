//! L∞ adversarial example generation: FGSM, FGSM with random start, and PGD.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::seed;
use crate::tensor::{one_hot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Ffgsm,
    Pgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// L∞ radius in input units.
    pub epsilon: f64,
    pub step_size: f64,
    #[serde(default = "one")]
    pub iterations: usize,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default)]
    pub clamp_lo: f64,
    #[serde(default = "unit")]
    pub clamp_hi: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            method: AttackMethod::Fgsm,
            epsilon,
            step_size: epsilon,
            iterations: 1,
            random_start: false,
            restarts: 1,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            seed: 0,
        }
    }

    /// Random start in the full ball, one step of `1.25 ε`.
    pub fn ffgsm(epsilon: f64) -> Self {
        AttackConfig {
            method: AttackMethod::Ffgsm,
            step_size: 1.25 * epsilon,
            random_start: true,
            ..AttackConfig::fgsm(epsilon)
        }
    }

    /// PGD-k without random start.
    pub fn pgd(epsilon: f64, step_size: f64, iterations: usize) -> Self {
        AttackConfig {
            method: AttackMethod::Pgd,
            epsilon,
            step_size,
            iterations,
            random_start: false,
            restarts: 1,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
            seed: 0,
        }
    }

    /// Evaluation surrogate: PGD-20, random starts, two restarts.
    pub fn strong_eval(epsilon: f64, step_size: f64) -> Self {
        AttackConfig {
            random_start: true,
            restarts: 2,
            ..AttackConfig::pgd(epsilon, step_size, 20)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid("epsilon", "must be finite and >= 0"));
        }
        // A null attack (ε = 0) may also take a zero step.
        let step_ok = self.step_size > 0.0 || (self.step_size == 0.0 && self.epsilon == 0.0);
        if !step_ok || !self.step_size.is_finite() {
            return Err(Error::invalid("step_size", "must be finite and > 0 (or 0 with epsilon = 0)"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations", "must be >= 1"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts", "must be >= 1"));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::invalid("clamp_lo", "clamp_lo must be < clamp_hi"));
        }
        Ok(())
    }
}

/// Per-sample losses and the input gradient of their sum.
pub trait LossGradient {
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)>;
}

/// Cross-entropy of a frozen model, differentiated w.r.t. the input only.
pub struct CrossEntropyObjective<'a> {
    pub model: &'a Model,
}

impl<'a> CrossEntropyObjective<'a> {
    pub fn new(model: &'a Model) -> Self {
        CrossEntropyObjective { model }
    }
}

impl LossGradient for CrossEntropyObjective<'_> {
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let params = self.model.bind(&mut g, false);
        let xv = g.param(x.clone());
        let z = self.model.logits(&mut g, &params, xv)?;
        let ls = g.log_softmax(z)?;
        let y = g.constant(one_hot(labels, self.model.spec.num_classes)?);
        let picked = g.mul(ls, y)?;
        let total = g.sum(picked)?;
        let loss = g.neg(total)?;
        g.backward(loss)?;
        let c = self.model.spec.num_classes;
        let per_sample = g
            .value(ls)
            .data()
            .chunks(c)
            .zip(labels)
            .map(|(row, &yi)| -row[yi])
            .collect();
        let grad = g
            .grad(xv)
            .ok_or_else(|| Error::Backward("input gradient unavailable".into()))?;
        Ok((per_sample, grad))
    }
}

/// Clips `x_adv` into `[x - ε, x + ε] ∩ [lo, hi]` coordinatewise.
pub fn project_linf(x_adv: &Tensor, x_orig: &Tensor, epsilon: f64, clamp_lo: f64, clamp_hi: f64) -> Result<Tensor> {
    if x_adv.shape() != x_orig.shape() {
        return Err(Error::Shape {
            op: "project_linf",
            lhs: x_adv.shape().to_vec(),
            rhs: x_orig.shape().to_vec(),
        });
    }
    let data = x_adv
        .data()
        .iter()
        .zip(x_orig.data())
        .map(|(&a, &o)| a.clamp(o - epsilon, o + epsilon).clamp(clamp_lo, clamp_hi))
        .collect();
    Ok(Tensor::from_parts(x_adv.shape().to_vec(), data))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn signed_step(x: &Tensor, grad: &Tensor, step: f64) -> Tensor {
    let data = x.data().iter().zip(grad.data()).map(|(v, g)| v + step * sign(*g)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn random_start(x: &Tensor, cfg: &AttackConfig, restart: usize) -> Result<Tensor> {
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = seed::rng(cfg.seed, &[seed::ATTACK, restart as u64]);
    let data = x
        .data()
        .iter()
        .map(|v| v + rng.gen_range(-cfg.epsilon..=cfg.epsilon))
        .collect();
    project_linf(&Tensor::from_parts(x.shape().to_vec(), data), x, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi)
}

fn check_inputs(x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if x.shape().len() != 2 || x.rows() != labels.len() {
        return Err(Error::Shape {
            op: "attack",
            lhs: x.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    Ok(())
}

/// `x + ε sign(∇x loss)`, projected.
pub fn fgsm<L: LossGradient>(loss: &L, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    check_inputs(x, labels, cfg)?;
    let (_, grad) = loss.loss_and_grad(x, labels)?;
    project_linf(&signed_step(x, &grad, cfg.epsilon), x, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi)
}

/// Uniform start in the ε-ball, then one signed step of `cfg.step_size`.
pub fn ffgsm<L: LossGradient>(loss: &L, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    check_inputs(x, labels, cfg)?;
    let start = if cfg.random_start {
        random_start(x, cfg, 0)?
    } else {
        x.clone()
    };
    let (_, grad) = loss.loss_and_grad(&start, labels)?;
    project_linf(&signed_step(&start, &grad, cfg.step_size), x, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi)
}

fn pgd_single<L: LossGradient>(loss: &L, x: &Tensor, labels: &[usize], cfg: &AttackConfig, restart: usize) -> Result<Tensor> {
    let mut adv = if cfg.random_start {
        random_start(x, cfg, restart)?
    } else {
        x.clone()
    };
    for _ in 0..cfg.iterations {
        let (_, grad) = loss.loss_and_grad(&adv, labels)?;
        adv = project_linf(&signed_step(&adv, &grad, cfg.step_size), x, cfg.epsilon, cfg.clamp_lo, cfg.clamp_hi)?;
    }
    Ok(adv)
}

/// PGD-k. With several restarts each sample keeps the restart whose final
/// loss is highest.
pub fn pgd<L: LossGradient>(loss: &L, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    check_inputs(x, labels, cfg)?;
    if cfg.restarts == 1 {
        return pgd_single(loss, x, labels, cfg, 0);
    }
    let mut best = pgd_single(loss, x, labels, cfg, 0)?;
    let (mut best_loss, _) = loss.loss_and_grad(&best, labels)?;
    for r in 1..cfg.restarts {
        let cand = pgd_single(loss, x, labels, cfg, r)?;
        let (cand_loss, _) = loss.loss_and_grad(&cand, labels)?;
        for i in 0..labels.len() {
            if cand_loss[i] > best_loss[i] {
                best.row_mut(i).copy_from_slice(cand.row(i));
                best_loss[i] = cand_loss[i];
            }
        }
    }
    Ok(best)
}

/// Runs the attack named by `cfg.method`.
pub fn attack<L: LossGradient>(loss: &L, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    match cfg.method {
        AttackMethod::Fgsm => fgsm(loss, x, labels, cfg),
        AttackMethod::Ffgsm => ffgsm(loss, x, labels, cfg),
        AttackMethod::Pgd => pgd(loss, x, labels, cfg),
    }
}

/// One adversarial batch per restart, for evaluation that requires a
/// sample to survive every restart.
pub fn attack_each_restart<L: LossGradient>(loss: &L, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Vec<Tensor>> {
    check_inputs(x, labels, cfg)?;
    (0..cfg.restarts)
        .map(|r| match cfg.method {
            AttackMethod::Pgd => pgd_single(loss, x, labels, cfg, r),
            _ => attack(loss, x, labels, &AttackConfig {
                seed: seed::derive(cfg.seed, &[seed::RESTART, r as u64]),
                restarts: 1,
                ..cfg.clone()
            }),
        })
        .collect()
}
