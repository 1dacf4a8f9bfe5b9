//! SGD training for standard, adversarial and distillation objectives.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::mean_entropy_of;
use crate::attack::{self, AttackConfig, CrossEntropyObjective};
use crate::autodiff::Graph;
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::loss::{LossInputs, LossVariant};
use crate::model::{save_checkpoint, Checkpoint, EnsembleTeacher, Model, ModelSpec, Params};
use crate::seed;
use crate::tensor::Tensor;

/// Learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant {
        base_lr: f64,
    },
    /// `base_lr · decay^epoch`, held constant within an epoch.
    Exponential {
        base_lr: f64,
        decay: f64,
    },
    /// Two linear phases updated every batch: `max_lr / start_div` up to
    /// `max_lr` over the first half of the steps, then down to
    /// `max_lr / end_div`. `total_steps = 0` means "the whole run".
    OneCycle {
        max_lr: f64,
        #[serde(default)]
        total_steps: usize,
        #[serde(default = "default_start_div")]
        start_div: f64,
        #[serde(default = "default_end_div")]
        end_div: f64,
    },
}

fn default_start_div() -> f64 {
    25.0
}
fn default_end_div() -> f64 {
    2500.0
}

impl Schedule {
    pub fn one_cycle(max_lr: f64, total_steps: usize) -> Self {
        Schedule::OneCycle {
            max_lr,
            total_steps,
            start_div: default_start_div(),
            end_div: default_end_div(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("{v} must be positive")))
            }
        };
        match self {
            Schedule::Constant { base_lr } => positive("base_lr", *base_lr),
            Schedule::Exponential { base_lr, decay } => {
                positive("base_lr", *base_lr)?;
                if !(*decay > 0.0 && *decay <= 1.0) {
                    return Err(Error::invalid("decay", format!("{decay} not in (0, 1]")));
                }
                Ok(())
            }
            Schedule::OneCycle {
                max_lr,
                start_div,
                end_div,
                ..
            } => {
                positive("max_lr", *max_lr)?;
                positive("start_div", *start_div)?;
                positive("end_div", *end_div)
            }
        }
    }

    /// Fills in `total_steps` for a one-cycle schedule left on "auto".
    pub fn resolved(&self, epochs: usize, steps_per_epoch: usize) -> Schedule {
        match self {
            Schedule::OneCycle {
                max_lr,
                total_steps: 0,
                start_div,
                end_div,
            } => Schedule::OneCycle {
                max_lr: *max_lr,
                total_steps: epochs * steps_per_epoch,
                start_div: *start_div,
                end_div: *end_div,
            },
            other => other.clone(),
        }
    }
}

/// Learning rate for batch `step_in_epoch` of (0-based) `epoch`.
pub fn lr_at(schedule: &Schedule, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> Result<f64> {
    schedule.validate()?;
    if steps_per_epoch == 0 || step_in_epoch >= steps_per_epoch {
        return Err(Error::invalid("step_in_epoch", format!("{step_in_epoch} outside 0..{steps_per_epoch}")));
    }
    Ok(match schedule {
        Schedule::Constant { base_lr } => *base_lr,
        Schedule::Exponential { base_lr, decay } => base_lr * decay.powi(epoch as i32),
        Schedule::OneCycle {
            max_lr,
            total_steps,
            start_div,
            end_div,
        } => {
            if *total_steps == 0 {
                return Err(Error::invalid("total_steps", "unresolved one-cycle schedule"));
            }
            let t = (epoch * steps_per_epoch + step_in_epoch) as f64;
            let total = *total_steps as f64;
            if t >= total {
                return Err(Error::invalid("step", format!("step {t} beyond total_steps {total}")));
            }
            let (start, end) = (max_lr / start_div, max_lr / end_div);
            let half = total / 2.0;
            if t <= half {
                start + (max_lr - start) * t / half
            } else {
                let span = (total - 1.0 - half).max(f64::MIN_POSITIVE);
                max_lr + (end - max_lr) * ((t - half) / span).min(1.0)
            }
        }
    })
}

/// `w ← w − lr·g` for every tensor.
pub fn sgd_step(params: &Params, grads: &[Tensor], lr: f64) -> Result<Params> {
    if grads.len() != params.tensors.len() {
        return Err(Error::Missing(format!(
            "sgd_step: {} gradients for {} parameter tensors",
            grads.len(),
            params.tensors.len()
        )));
    }
    let mut out = params.clone();
    for ((_, w), g) in out.tensors.iter_mut().zip(grads) {
        if w.shape() != g.shape() {
            return Err(Error::Shape {
                op: "sgd_step",
                lhs: w.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        w.data_mut().iter_mut().zip(g.data()).for_each(|(w, g)| *w -= lr * g);
    }
    Ok(out)
}

/// SGD with optional momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64) -> Result<()> {
        if self.momentum == 0.0 && self.weight_decay == 0.0 {
            *params = sgd_step(params, grads, lr)?;
            return Ok(());
        }
        if self.velocity.is_empty() {
            self.velocity = params.tensors.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        }
        for (((_, w), g), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((w, g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *v = self.momentum * *v + d;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Which checkpoint is handed on as "the" model of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    /// A fixed (1-based) epoch.
    Epoch(usize),
    /// The epoch with the highest held-out robust accuracy (first on ties).
    BestRobust,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub schedule: Schedule,
    pub loss: LossVariant,
    /// Present for adversarial or distillation training. Regenerated every
    /// batch against the current student.
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
    #[serde(default)]
    pub checkpoint_every_epoch: bool,
    /// Attack used for per-epoch robust accuracy on held-out data.
    #[serde(default)]
    pub monitor_attack: Option<AttackConfig>,
    /// Keep per-sample correct-class probabilities after every epoch.
    #[serde(default)]
    pub record_probs: bool,
}

fn default_epochs() -> usize {
    50
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, seed: u64, schedule: Schedule, loss: LossVariant) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            seed,
            schedule,
            loss,
            attack: None,
            momentum: 0.0,
            weight_decay: 0.0,
            early_stop: None,
            checkpoint_every_epoch: false,
            monitor_attack: None,
            record_probs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        self.schedule.validate()?;
        self.loss.validate()?;
        if let Some(a) = &self.attack {
            a.validate()?;
            if a.restarts != 1 {
                return Err(Error::invalid("attack.restarts", "training attacks use a single restart"));
            }
        } else if self.loss.needs_adversarial() {
            return Err(Error::invalid("attack", format!("{} loss needs an attack", self.loss.name())));
        }
        if let Some(a) = &self.monitor_attack {
            a.validate()?;
        }
        match &self.early_stop {
            Some(EarlyStop::Epoch(k)) if *k == 0 || *k > self.epochs => {
                Err(Error::invalid("early_stop", format!("epoch {k} outside 1..={}", self.epochs)))
            }
            Some(EarlyStop::BestRobust) if self.monitor_attack.is_none() => {
                Err(Error::invalid("early_stop", "best_robust needs monitor_attack"))
            }
            _ => Ok(()),
        }
    }
}

/// One record per completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    pub entropy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    /// Per epoch, the probability of the true class for every training sample.
    pub prob_snapshots: Vec<Vec<f64>>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<RunLog> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::invalid("runlog", e.to_string())))
            .collect::<Result<Vec<EpochRecord>>>()?;
        Ok(RunLog {
            records,
            prob_snapshots: Vec::new(),
        })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Where per-epoch checkpoint files go: `{dir}/{prefix}_ep{k}.ckpt` and
/// `{dir}/{prefix}_final.ckpt`.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub prefix: String,
    pub config_hash: String,
}

impl CheckpointSink {
    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("{}_ep{epoch}.ckpt", self.prefix))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join(format!("{}_final.ckpt", self.prefix))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_model: Model,
    /// The early-stopped model, or the final one when no rule is set.
    pub designated: Model,
    pub designated_epoch: usize,
    pub log: RunLog,
    /// Model after every epoch, when `checkpoint_every_epoch` is set.
    pub snapshots: Vec<Model>,
    pub checkpoints: Vec<PathBuf>,
}

/// Trains a fresh model of `spec`. The teacher, if any, is only read.
pub fn train(
    spec: &ModelSpec,
    train_set: &Dataset,
    held_out: Option<&Dataset>,
    cfg: &TrainConfig,
    teacher: Option<&EnsembleTeacher>,
    sink: Option<&CheckpointSink>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    for ds in std::iter::once(train_set).chain(held_out) {
        if ds.input_dim() != spec.input_dim() || ds.num_classes != spec.num_classes {
            return Err(Error::invalid(
                "dataset",
                format!("{} does not match model input/classes", ds.name),
            ));
        }
    }
    if cfg.loss.needs_teacher() && teacher.is_none() {
        return Err(Error::Missing(format!("{} loss requires a teacher", cfg.loss.name())));
    }
    if let Some(t) = teacher {
        if t.num_classes() != spec.num_classes || t.members()[0].spec.input_dim() != spec.input_dim() {
            return Err(Error::invalid("teacher", "teacher does not match the student spec"));
        }
    }
    if matches!(cfg.early_stop, Some(EarlyStop::BestRobust)) && held_out.is_none() {
        return Err(Error::invalid("early_stop", "best_robust needs a held-out set"));
    }

    let mut model = Model::init(spec.clone(), cfg.seed)?;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let schedule = cfg.schedule.resolved(cfg.epochs, steps_per_epoch);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let use_attack = cfg.attack.as_ref().filter(|_| !matches!(cfg.loss, LossVariant::Ckd { .. }));

    let mut log = RunLog::default();
    let mut snapshots = Vec::new();
    let mut checkpoints = Vec::new();
    let mut designated: Option<(usize, Model)> = None;
    let mut best_robust = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        let e0 = epoch - 1;
        let mut loss_sum = 0.0;
        let mut epoch_lr = 0.0;
        for (b, batch) in batch_iter(train_set, cfg.batch_size, cfg.seed, e0).enumerate() {
            let lr = lr_at(&schedule, e0, b, steps_per_epoch)?;
            if b == 0 {
                epoch_lr = lr;
            }
            let x_adv = match use_attack {
                Some(a) => {
                    let a = a.clone().with_seed(seed::derive(cfg.seed, &[seed::ATTACK, e0 as u64, b as u64]));
                    Some(attack::attack(&CrossEntropyObjective::new(&model), &batch.inputs, &batch.labels, &a)?)
                }
                None => None,
            };
            let mut g = Graph::new();
            let params = model.bind(&mut g, true);
            let inputs = LossInputs {
                x: &batch.inputs,
                x_adv: x_adv.as_ref(),
                labels: &batch.labels,
            };
            let loss = cfg.loss.build(&mut g, &model, &params, teacher, &inputs)?;
            g.backward(loss)?;
            let grads = params
                .iter()
                .map(|&p| g.grad(p).ok_or_else(|| Error::Missing("parameter gradient missing".into())))
                .collect::<Result<Vec<_>>>()?;
            loss_sum += g.scalar(loss) * batch.labels.len() as f64;
            opt.step(&mut model.params, &grads, lr)?;
            if !model.params.is_finite() {
                return Err(Error::NonFinite { op: "sgd_step" });
            }
        }

        let probs = model.predict_probs(&train_set.inputs)?;
        let preds = probs.argmax_rows();
        let clean_acc = accuracy(&preds, &train_set.labels);
        let entropy = mean_entropy_of(&probs);
        if cfg.record_probs {
            log.prob_snapshots
                .push(train_set.labels.iter().enumerate().map(|(i, &y)| probs.row(i)[y]).collect());
        }
        let robust_acc = match (held_out, &cfg.monitor_attack) {
            (Some(ds), Some(a)) => evaluate(&model, ds, Some(a))?.robust_acc,
            _ => None,
        };
        log.records.push(EpochRecord {
            epoch,
            lr: epoch_lr,
            loss: loss_sum / train_set.len() as f64,
            clean_acc,
            robust_acc,
            entropy,
        });

        match cfg.early_stop {
            Some(EarlyStop::Epoch(k)) if k == epoch => designated = Some((epoch, model.clone())),
            Some(EarlyStop::BestRobust) => {
                let r = robust_acc.expect("monitor configured");
                if r > best_robust {
                    best_robust = r;
                    designated = Some((epoch, model.clone()));
                }
            }
            _ => {}
        }
        if cfg.checkpoint_every_epoch {
            snapshots.push(model.clone());
            if let Some(s) = sink {
                let path = s.epoch_path(epoch);
                save_checkpoint(
                    &Checkpoint {
                        model: model.clone(),
                        epoch,
                        config_hash: s.config_hash.clone(),
                    },
                    &path,
                )?;
                checkpoints.push(path);
            }
        }
    }

    if let Some(s) = sink {
        let path = s.final_path();
        save_checkpoint(
            &Checkpoint {
                model: model.clone(),
                epoch: cfg.epochs,
                config_hash: s.config_hash.clone(),
            },
            &path,
        )?;
        checkpoints.push(path);
    }
    let (designated_epoch, designated) = designated.unwrap_or((cfg.epochs, model.clone()));
    Ok(TrainOutcome {
        final_model: model,
        designated,
        designated_epoch,
        log,
        snapshots,
        checkpoints,
    })
}

fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
}

/// Evaluation chunk; attack randomness is keyed by chunk index, so results
/// do not depend on any training batch size.
pub const EVAL_CHUNK: usize = 1024;

/// Clean accuracy and, with an attack, robust accuracy. A sample counts as
/// robust only when it is classified correctly on the clean input and on
/// the output of every restart.
pub fn evaluate(model: &Model, dataset: &Dataset, attack_cfg: Option<&AttackConfig>) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "empty dataset"));
    }
    let mut clean_hits = 0usize;
    let mut robust_hits = 0usize;
    let n = dataset.len();
    for (c, start) in (0..n).step_by(EVAL_CHUNK).enumerate() {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let x = dataset.inputs.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
        let clean_ok: Vec<bool> = model
            .predict_probs(&x)?
            .argmax_rows()
            .iter()
            .zip(&y)
            .map(|(p, t)| p == t)
            .collect();
        clean_hits += clean_ok.iter().filter(|&&b| b).count();
        if let Some(a) = attack_cfg {
            let a = a.clone().with_seed(seed::derive(a.seed, &[seed::ATTACK, c as u64]));
            let mut ok = clean_ok.clone();
            for adv in attack::attack_each_restart(&CrossEntropyObjective::new(model), &x, &y, &a)? {
                let preds = model.predict_probs(&adv)?.argmax_rows();
                ok.iter_mut().zip(preds.iter().zip(&y)).for_each(|(o, (p, t))| *o &= p == t);
            }
            robust_hits += ok.iter().filter(|&&b| b).count();
        }
    }
    Ok(EvalResult {
        clean_acc: clean_hits as f64 / n as f64,
        robust_acc: attack_cfg.map(|_| robust_hits as f64 / n as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gaussian_blobs;

    #[test]
    fn exponential_schedule_values() {
        let s = Schedule::Exponential {
            base_lr: 0.1,
            decay: 0.9,
        };
        assert_eq!(lr_at(&s, 0, 0, 10).unwrap(), 0.1);
        assert_eq!(lr_at(&s, 0, 9, 10).unwrap(), 0.1);
        assert_eq!(lr_at(&s, 1, 3, 10).unwrap(), 0.1 * 0.9);
        assert!((lr_at(&s, 1, 0, 10).unwrap() - 0.09).abs() < 1e-15);
    }

    #[test]
    fn one_cycle_peaks_mid_run() {
        let s = Schedule::one_cycle(0.21, 100);
        assert_eq!(lr_at(&s, 5, 0, 10).unwrap(), 0.21);
        assert!((lr_at(&s, 0, 0, 10).unwrap() - 0.21 / 25.0).abs() < 1e-15);
        assert!((lr_at(&s, 9, 9, 10).unwrap() - 0.21 / 2500.0).abs() < 1e-15);
        let mut prev = 0.0;
        for t in 0..=50 {
            let lr = lr_at(&s, t / 10, t % 10, 10).unwrap();
            assert!(lr >= prev);
            prev = lr;
        }
        assert!(lr_at(&s, 10, 0, 10).is_err());
        assert!(lr_at(&Schedule::one_cycle(0.21, 0), 0, 0, 10).is_err());
    }

    #[test]
    fn constant_and_invalid_schedules() {
        let s = Schedule::Constant { base_lr: 0.05 };
        assert_eq!(lr_at(&s, 7, 2, 3).unwrap(), 0.05);
        assert!(lr_at(&Schedule::Constant { base_lr: 0.0 }, 0, 0, 1).is_err());
        assert!(lr_at(
            &Schedule::Exponential {
                base_lr: 0.1,
                decay: 1.5
            },
            0,
            0,
            1
        )
        .is_err());
        assert!(lr_at(&s, 0, 3, 3).is_err());
        let bad: std::result::Result<Schedule, _> = serde_json::from_str(r#"{"kind":"cosine","base_lr":0.1}"#);
        assert!(bad.is_err());
    }

    fn one_param(v: f64) -> Params {
        Params {
            seed: 0,
            tensors: vec![("w".into(), Tensor::vector(vec![v]))],
        }
    }

    #[test]
    fn sgd_step_examples() {
        let p = one_param(1.0);
        let g = vec![Tensor::vector(vec![2.0])];
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        let q = sgd_step(&p, &g, 0.1).unwrap();
        assert!((q.tensors[0].1.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(q, sgd_step(&p, &g, 0.1).unwrap());
        assert!(sgd_step(&p, &[], 0.1).is_err());
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = one_param(0.0);
        let mut opt = Sgd::new(0.5, 0.0);
        let g = vec![Tensor::vector(vec![1.0])];
        opt.step(&mut p, &g, 1.0).unwrap();
        opt.step(&mut p, &g, 1.0).unwrap();
        assert!((p.tensors[0].1.data()[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let base = TrainConfig::new(5, 8, 0, Schedule::Constant { base_lr: 0.1 }, LossVariant::Akd { alpha: 0.5 });
        assert!(base.validate().is_err(), "akd without attack");
        let mut ok = base.clone();
        ok.attack = Some(AttackConfig::pgd(0.1, 0.025, 7));
        assert!(ok.validate().is_ok());
        let mut late = ok.clone();
        late.early_stop = Some(EarlyStop::Epoch(6));
        assert!(late.validate().is_err());
        let mut restarts = ok.clone();
        restarts.attack.as_mut().unwrap().restarts = 2;
        assert!(restarts.validate().is_err());
        let mut best = ok.clone();
        best.early_stop = Some(EarlyStop::BestRobust);
        assert!(best.validate().is_err());
    }

    #[test]
    fn distillation_without_teacher_fails() {
        let ds = gen_gaussian_blobs(40, 2, 2, 4.0, 0).unwrap();
        let mut cfg = TrainConfig::new(1, 8, 0, Schedule::Constant { base_lr: 0.1 }, LossVariant::Ckd { lambda: 0.5 });
        cfg.attack = None;
        let spec = ModelSpec::mlp(2, &[4], 2);
        assert!(matches!(train(&spec, &ds, None, &cfg, None, None), Err(Error::Missing(_))));
        let wrong = ModelSpec::mlp(3, &[4], 2);
        cfg.loss = LossVariant::Ce;
        assert!(train(&wrong, &ds, None, &cfg, None, None).is_err());
    }

    #[test]
    fn evaluate_edge_cases() {
        let ds = gen_gaussian_blobs(64, 2, 2, 2.0, 1).unwrap();
        let m = Model::init(ModelSpec::mlp(2, &[8], 2), 0).unwrap();
        let clean = evaluate(&m, &ds, None).unwrap();
        assert!(clean.robust_acc.is_none());
        let null = evaluate(&m, &ds, Some(&AttackConfig::pgd(0.0, 0.01, 3))).unwrap();
        assert_eq!(null.robust_acc, Some(clean.clean_acc));

        // A model with zero weights and biases predicts class 0 everywhere.
        let mut flat = m.clone();
        for (_, t) in &mut flat.params.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(evaluate(&flat, &ds, None).unwrap().clean_acc, 0.5);
    }

    #[test]
    fn runlog_round_trip() {
        let log = RunLog {
            records: vec![EpochRecord {
                epoch: 1,
                lr: 0.1,
                loss: 0.5,
                clean_acc: 0.75,
                robust_acc: None,
                entropy: 0.3,
            }],
            prob_snapshots: vec![],
        };
        let text = log.to_jsonl();
        assert!(text.starts_with(r#"{"epoch":1,"lr":0.1,"loss":0.5,"clean_acc":0.75,"robust_acc":null,"entropy":0.3}"#));
        assert_eq!(RunLog::from_jsonl(&text).unwrap(), log);
    }
}
