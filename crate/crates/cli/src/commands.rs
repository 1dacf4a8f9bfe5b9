//! The four subcommands.

use std::time::Instant;

use akd_core::analysis::{
    cosine_similarity, difficulty_scores, improvement_curve, inner_product, mean_entropy, moving_average, rank_extremes,
    record_trajectories, DifficultyRanking, ModelTag, Trajectory,
};
use akd_core::model::{save_checkpoint, Checkpoint};
use akd_core::train::{evaluate, train, CheckpointSink};
use akd_core::{Dataset, EnsembleTeacher, Model};
use serde::Serialize;

use crate::artifacts::{self, Layout, MemberEntry, StudentManifest, TeacherManifest, TEACHER_PREFIX, STUDENT_PREFIX};
use crate::config::{Loaded, Splits};
use crate::error::{CliError, CliResult};

fn layout(run: &Loaded) -> Layout {
    Layout::new(&run.config.output_dir)
}

fn teacher_beta(run: &Loaded) -> Vec<f64> {
    let t = run.config.teacher.as_ref().expect("teacher block validated");
    t.beta.clone().unwrap_or_else(|| vec![1.0 / t.members as f64; t.members])
}

fn require_teacher_block(run: &Loaded) -> CliResult<&crate::config::TeacherConfig> {
    run.config
        .teacher
        .as_ref()
        .ok_or_else(|| CliError::config("`teacher`: block required for this command"))
}

fn require_student_block(run: &Loaded) -> CliResult<&crate::config::StudentConfig> {
    run.config
        .student
        .as_ref()
        .ok_or_else(|| CliError::config("`student`: block required for this command"))
}

pub fn train_teacher(run: &Loaded) -> CliResult<()> {
    let t = require_teacher_block(run)?;
    run.check_inputs()?;
    let data = run.datasets()?;
    let spec = run.model_spec(&data.train)?;
    let out = layout(run);
    let mut members = Vec::with_capacity(t.members);
    for i in 0..t.members {
        let cfg = run.config.member_config(i);
        eprintln!("teacher {}/{}: seed {}, {} epochs", i + 1, t.members, cfg.seed, cfg.epochs);
        let sink = CheckpointSink {
            dir: out.member(i),
            prefix: TEACHER_PREFIX.into(),
            config_hash: run.hash.clone(),
        };
        let res = train(&spec, &data.train, data.val.as_ref(), &cfg, None, Some(&sink))?;
        save_checkpoint(
            &Checkpoint {
                model: res.designated.clone(),
                epoch: res.designated_epoch,
                config_hash: run.hash.clone(),
            },
            &out.teacher_designated(i),
        )?;
        artifacts::write_text(&out.member(i).join("runlog.jsonl"), &res.log.to_jsonl())?;
        members.push(MemberEntry {
            member: i,
            seed: cfg.seed,
            epochs: cfg.epochs,
            designated_epoch: res.designated_epoch,
        });
    }
    artifacts::write_json(
        &out.teacher_manifest(),
        &TeacherManifest {
            config_hash: run.hash.clone(),
            beta: teacher_beta(run),
            members,
        },
    )
}

/// Teacher checkpoint paths the student would read, in member order.
fn teacher_sources(run: &Loaded) -> CliResult<(Vec<std::path::PathBuf>, Vec<usize>)> {
    let out = layout(run);
    let t = require_teacher_block(run)?;
    artifacts::require_files("teacher manifest (run train-teacher first)", &[out.teacher_manifest()])?;
    let manifest: TeacherManifest = artifacts::read_json(&out.teacher_manifest())?;
    if manifest.members.len() != t.members {
        return Err(CliError::Missing(format!(
            "teacher manifest lists {} members, config has {}",
            manifest.members.len(),
            t.members
        )));
    }
    let override_epoch = run.config.student.as_ref().and_then(|s| s.teacher_epoch);
    let (paths, epochs) = manifest
        .members
        .iter()
        .map(|m| match override_epoch {
            Some(k) => (out.teacher_epoch(m.member, k), k),
            None => (out.teacher_designated(m.member), m.designated_epoch),
        })
        .unzip::<_, _, Vec<_>, Vec<_>>();
    artifacts::require_files("teacher checkpoints", &paths)?;
    Ok((paths, epochs))
}

fn load_teacher(run: &Loaded, paths: &[std::path::PathBuf]) -> CliResult<EnsembleTeacher> {
    let members = paths
        .iter()
        .map(|p| artifacts::load(p, &run.hash).map(|c| c.model))
        .collect::<CliResult<Vec<Model>>>()?;
    Ok(EnsembleTeacher::new(members, teacher_beta(run))?)
}

pub fn train_student(run: &Loaded) -> CliResult<()> {
    let s = require_student_block(run)?;
    run.check_inputs()?;
    let (teacher_paths, teacher_epochs) = if s.train.loss.needs_teacher() {
        teacher_sources(run)?
    } else {
        (Vec::new(), Vec::new())
    };
    let teacher = if teacher_paths.is_empty() {
        None
    } else {
        Some(load_teacher(run, &teacher_paths)?)
    };
    let data = run.datasets()?;
    let spec = run.model_spec(&data.train)?;
    if let Some(t) = &teacher {
        if t.members()[0].spec.input_dim() != spec.input_dim() || t.num_classes() != spec.num_classes {
            return Err(CliError::config("`model`: teacher checkpoints do not match the dataset"));
        }
    }
    let out = layout(run);
    eprintln!("student: {} loss, seed {}, {} epochs", s.train.loss.name(), s.train.seed, s.train.epochs);
    let sink = CheckpointSink {
        dir: out.student(),
        prefix: STUDENT_PREFIX.into(),
        config_hash: run.hash.clone(),
    };
    let res = train(&spec, &data.train, data.val.as_ref(), &s.train, teacher.as_ref(), Some(&sink))?;
    artifacts::write_text(&out.student().join("runlog.jsonl"), &res.log.to_jsonl())?;
    artifacts::write_json(
        &out.student_manifest(),
        &StudentManifest {
            config_hash: run.hash.clone(),
            loss: s.train.loss.name().into(),
            seed: s.train.seed,
            epochs: s.train.epochs,
            teacher_epochs,
        },
    )
}

/// One line of a metrics file.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub config_hash: String,
    pub model: String,
    pub checkpoint_epoch: usize,
    pub seeds: Vec<u64>,
    pub split: &'static str,
    pub attack: String,
    pub epsilon: Option<f64>,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    pub mean_entropy_train: f64,
}

struct EvalTarget {
    name: String,
    path: std::path::PathBuf,
    seeds: Vec<u64>,
}

fn eval_targets(run: &Loaded) -> CliResult<Vec<EvalTarget>> {
    let out = layout(run);
    let mut targets = Vec::new();
    if let Some(t) = &run.config.teacher {
        for (i, &seed) in t.seeds.iter().enumerate() {
            targets.push(EvalTarget {
                name: format!("teacher_member{i}"),
                path: out.teacher_designated(i),
                seeds: vec![seed],
            });
        }
    }
    if let Some(s) = &run.config.student {
        targets.push(EvalTarget {
            name: "student".into(),
            path: out.student_final(),
            seeds: vec![s.train.seed],
        });
    }
    if targets.is_empty() {
        return Err(CliError::config("`teacher`/`student`: nothing to evaluate"));
    }
    Ok(targets)
}

pub fn evaluate_models(run: &Loaded) -> CliResult<()> {
    run.check_inputs()?;
    let targets = eval_targets(run)?;
    artifacts::require_files("checkpoints to evaluate", &targets.iter().map(|t| t.path.clone()).collect::<Vec<_>>())?;
    let Splits { train: train_set, test, .. } = run.datasets()?;
    let out = layout(run);
    let mut timing = serde_json::Map::new();
    for target in &targets {
        let started = Instant::now();
        let ck = artifacts::load(&target.path, &run.hash)?;
        let entropy = mean_entropy(&ck.model, &train_set)?;
        let base = |attack: String, epsilon: Option<f64>, clean_acc: f64, robust_acc: Option<f64>| MetricsRecord {
            experiment: run.config.name.clone(),
            config_hash: run.hash.clone(),
            model: target.name.clone(),
            checkpoint_epoch: ck.epoch,
            seeds: target.seeds.clone(),
            split: "test",
            attack,
            epsilon,
            clean_acc,
            robust_acc,
            mean_entropy_train: entropy,
        };
        let mut records = Vec::new();
        if run.config.eval_attacks().is_empty() {
            let r = evaluate(&ck.model, &test, None)?;
            records.push(base("none".into(), None, r.clean_acc, None));
        }
        for a in run.config.eval_attacks() {
            let r = evaluate(&ck.model, &test, Some(&a.attack))?;
            records.push(base(a.name.clone(), Some(a.attack.epsilon), r.clean_acc, r.robust_acc));
        }
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        artifacts::write_text(&out.metrics().join(format!("{}.jsonl", target.name)), &text)?;
        timing.insert(target.name.clone(), started.elapsed().as_secs_f64().into());
        eprintln!("evaluated {}", target.name);
    }
    // Wall times vary run to run, so they stay out of the metrics files.
    artifacts::write_json(
        &out.metrics().join("timing.json"),
        &serde_json::json!({ "config_hash": run.hash, "wall_seconds": timing }),
    )
}

fn load_snapshots(run: &Loaded) -> CliResult<(Vec<Model>, Vec<Model>)> {
    let out = layout(run);
    let t = require_teacher_block(run)?;
    let s = require_student_block(run)?;
    let missing = |epochs: usize, path: &dyn Fn(usize) -> std::path::PathBuf| -> Vec<usize> {
        (1..=epochs).filter(|&k| !path(k).is_file()).collect()
    };
    let mt = missing(t.train.epochs, &|k| out.teacher_epoch(0, k));
    let ms = missing(s.train.epochs, &|k| out.student_epoch(k));
    if !mt.is_empty() || !ms.is_empty() {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        return Err(CliError::Missing(format!(
            "per-epoch snapshots missing: teacher epochs [{}], student epochs [{}]",
            list(&mt),
            list(&ms)
        )));
    }
    let load = |paths: Vec<std::path::PathBuf>| -> CliResult<Vec<Model>> {
        paths.iter().map(|p| artifacts::load(p, &run.hash).map(|c| c.model)).collect()
    };
    Ok((
        load((1..=t.train.epochs).map(|k| out.teacher_epoch(0, k)).collect())?,
        load((1..=s.train.epochs).map(|k| out.student_epoch(k)).collect())?,
    ))
}

struct Table {
    text: String,
}

impl Table {
    fn new(hash: &str, header: &[String]) -> Self {
        let mut text = format!("# config_hash={hash}\n");
        text.push_str(&header.join("\t"));
        text.push('\n');
        Table { text }
    }

    fn row(&mut self, cells: &[String]) {
        self.text.push_str(&cells.join("\t"));
        self.text.push('\n');
    }
}

fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn cos_or_na(a: &Trajectory, b: &Trajectory) -> (String, String) {
    let inner = inner_product(a, b).map(num).unwrap_or_else(|_| "NA".into());
    let cos = cosine_similarity(a, b).map(num).unwrap_or_else(|_| "NA".into());
    (cos, inner)
}

pub fn analyze(run: &Loaded) -> CliResult<()> {
    if !run.config.analysis.enabled {
        return Err(CliError::config("`analysis.enabled`: analysis is disabled in this config"));
    }
    run.check_inputs()?;
    let (teacher, student) = load_snapshots(run)?;
    let data: Dataset = run.datasets()?.train;
    let cfg = &run.config.analysis;
    let hash = &run.hash;
    let k = teacher.len();
    let (x, y) = (&data.inputs, &data.labels);

    let scores = difficulty_scores(&teacher, x, y)?;
    let ranking = DifficultyRanking::from_scores(&scores)?;
    let mut rank_of = vec![0; data.len()];
    for (r, &(id, _)) in ranking.entries().iter().enumerate() {
        rank_of[id] = r;
    }

    let t_nat = record_trajectories(&teacher, x, y, None, ModelTag::Teacher)?;
    let s_nat = record_trajectories(&student, x, y, None, ModelTag::Student)?;
    let adv = match &cfg.attack {
        Some(a) => Some((
            record_trajectories(&teacher, x, y, Some(a), ModelTag::Teacher)?,
            record_trajectories(&student, x, y, Some(a), ModelTag::Student)?,
        )),
        None => None,
    };

    let mut difficulty = Table::new(hash, &cols(&["rank", "sample_id", "label", "difficulty"]));
    for (r, &(id, score)) in ranking.entries().iter().enumerate() {
        difficulty.row(&[r.to_string(), id.to_string(), y[id].to_string(), num(score)]);
    }

    let mut header = cols(&["sample_id", "model", "input"]);
    header.extend((1..=k).map(|e| format!("p_ep{e}")));
    let mut trajectories = Table::new(hash, &header);
    let mut sets: Vec<(&str, &str, &[Trajectory])> = vec![("teacher", "natural", &t_nat), ("student", "natural", &s_nat)];
    if let Some((ta, sa)) = &adv {
        sets.push(("teacher", "adversarial", ta));
        sets.push(("student", "adversarial", sa));
    }
    for (model, input, set) in &sets {
        for tr in set.iter() {
            let mut row = vec![tr.sample_id.to_string(), model.to_string(), input.to_string()];
            row.extend(tr.probs.iter().map(|p| num(*p)));
            trajectories.row(&row);
        }
    }

    let mut header = cols(&["sample_id", "rank", "cossim_natural", "inner_natural"]);
    if adv.is_some() {
        header.extend(cols(&["cossim_adversarial", "inner_adversarial"]));
    }
    let mut cossim = Table::new(hash, &header);
    let mut cos_nat = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (c, ip) = cos_or_na(&t_nat[i], &s_nat[i]);
        let mut row = vec![i.to_string(), rank_of[i].to_string(), c.clone(), ip];
        if let Some((ta, sa)) = &adv {
            let (c, ip) = cos_or_na(&ta[i], &sa[i]);
            row.extend([c, ip]);
        }
        cos_nat.push(c);
        cossim.row(&row);
    }

    let curve = improvement_curve(&s_nat, &t_nat, &ranking)?;
    let deltas: Vec<f64> = curve.iter().map(|p| p.delta).collect();
    let window = cfg.smoothing_window.min(if deltas.len() % 2 == 1 { deltas.len() } else { deltas.len() - 1 });
    let smooth = moving_average(&deltas, window)?;
    let mut improvement = Table::new(
        hash,
        &cols(&["rank", "sample_id", "difficulty", "p_T_K", "p_S_K", "delta", "delta_smoothed", "cossim"]),
    );
    for (p, sm) in curve.iter().zip(&smooth) {
        let id = p.sample_id;
        improvement.row(&[
            p.rank.to_string(),
            id.to_string(),
            num(scores[id]),
            num(t_nat[id].last()),
            num(s_nat[id].last()),
            num(p.delta),
            num(*sm),
            cos_nat[id].clone(),
        ]);
    }

    let mut entropy = Table::new(hash, &cols(&["epoch", "teacher_entropy", "student_entropy"]));
    for (e, (t, s)) in teacher.iter().zip(&student).enumerate() {
        entropy.row(&[(e + 1).to_string(), num(mean_entropy(t, &data)?), num(mean_entropy(s, &data)?)]);
    }

    let n = cfg.extremes.min(data.len());
    let (easiest, hardest) = rank_extremes(&ranking, n)?;
    let mut extremes = Table::new(hash, &cols(&["group", "position", "sample_id", "label", "difficulty"]));
    for (group, ids) in [("easiest", &easiest), ("hardest", &hardest)] {
        for (pos, &id) in ids.iter().enumerate() {
            extremes.row(&[group.into(), pos.to_string(), id.to_string(), y[id].to_string(), num(scores[id])]);
        }
    }

    let dir = layout(run).analysis();
    for (name, table) in [
        ("difficulty.tsv", difficulty),
        ("trajectories.tsv", trajectories),
        ("cossim.tsv", cossim),
        ("improvement.tsv", improvement),
        ("entropy.tsv", entropy),
        ("extremes.tsv", extremes),
    ] {
        artifacts::write_text(&dir.join(name), &table.text)?;
    }
    eprintln!("analyzed {} samples over {k} epochs", data.len());
    Ok(())
}
