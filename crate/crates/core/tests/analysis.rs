use akd_core::analysis::{
    cosine_similarity, difficulty_score, difficulty_scores, improvement_curve, mean_entropy, moving_average, rank_extremes,
    record_trajectories, DifficultyRanking, InputKind, ModelTag,
};
use akd_core::data::gen_two_moons;
use akd_core::train::train;
use akd_core::{AttackConfig, LossVariant, Model, ModelSpec, Schedule, TrainConfig};

fn snapshots() -> (Vec<Model>, akd_core::Dataset) {
    let data = gen_two_moons(200, 0.05, 2).unwrap();
    let mut cfg = TrainConfig::new(6, 32, 5, Schedule::one_cycle(0.21, 0), LossVariant::Ce);
    cfg.momentum = 0.9;
    cfg.checkpoint_every_epoch = true;
    let out = train(&ModelSpec::mlp(2, &[16], 2), &data, None, &cfg, None, None).unwrap();
    (out.snapshots, data)
}

fn brute_probs(m: &Model, x: &[f64]) -> Vec<f64> {
    // forward pass written out by hand for an mlp
    let mut h = x.to_vec();
    let layers = m.params.tensors.len() / 2;
    for l in 0..layers {
        let w = m.params.get(&format!("dense{l}.weight")).unwrap();
        let b = m.params.get(&format!("dense{l}.bias")).unwrap();
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let mut next = vec![0.0; dout];
        for j in 0..dout {
            let mut acc = b.data()[j];
            for i in 0..din {
                acc += h[i] * w.data()[i * dout + j];
            }
            next[j] = if l + 1 < layers { acc.max(0.0) } else { acc };
        }
        h = next;
    }
    let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = h.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn difficulty_matches_brute_force() {
    let (snaps, data) = snapshots();
    let scores = difficulty_scores(&snaps, &data.inputs, &data.labels).unwrap();
    for i in (0..data.len()).step_by(7) {
        let mut total = 0.0;
        for m in &snaps {
            total += -(brute_probs(m, data.inputs.row(i))[data.labels[i]] + 1e-12).ln();
        }
        let expect = total / snaps.len() as f64;
        assert!((scores[i] - expect).abs() <= 1e-12, "{} vs {expect}", scores[i]);
        assert!((difficulty_score(&snaps, data.inputs.row(i), data.labels[i]).unwrap() - expect).abs() <= 1e-12);
    }
}

#[test]
fn mean_entropy_matches_brute_force_and_is_bounded() {
    let (snaps, data) = snapshots();
    for m in &snaps {
        let mut total = 0.0;
        for i in 0..data.len() {
            for p in brute_probs(m, data.inputs.row(i)) {
                if p > 0.0 {
                    total -= p * p.ln();
                }
            }
        }
        let expect = total / data.len() as f64;
        let h = mean_entropy(m, &data).unwrap();
        assert!((h - expect).abs() <= 1e-12);
        assert!((0.0..=2f64.ln()).contains(&h));
    }
}

#[test]
fn adversarial_trajectories_sit_below_natural_ones() {
    let (snaps, data) = snapshots();
    let nat = record_trajectories(&snaps, &data.inputs, &data.labels, None, ModelTag::Student).unwrap();
    let adv = record_trajectories(&snaps, &data.inputs, &data.labels, Some(&AttackConfig::pgd(0.1, 0.025, 7)), ModelTag::Student)
        .unwrap();
    assert_eq!(nat[0].input_kind, InputKind::Natural);
    assert_eq!(adv[0].input_kind, InputKind::Adversarial);
    assert!(nat.iter().all(|t| t.probs.len() == snaps.len() && t.probs.iter().all(|p| (0.0..=1.0).contains(p))));
    for k in 0..snaps.len() {
        let mean = |set: &[akd_core::analysis::Trajectory]| set.iter().map(|t| t.probs[k]).sum::<f64>() / set.len() as f64;
        assert!(mean(&adv) <= mean(&nat) + 0.02);
    }
    for (a, b) in nat.iter().zip(&adv) {
        let c = cosine_similarity(a, b).unwrap();
        assert!((0.0..=1.0).contains(&c));
    }
}

#[test]
fn improvement_curve_follows_ranking() {
    let (snaps, data) = snapshots();
    let teacher = record_trajectories(&snaps[..3], &data.inputs, &data.labels, None, ModelTag::Teacher).unwrap();
    let student = record_trajectories(&snaps[3..], &data.inputs, &data.labels, None, ModelTag::Student).unwrap();
    let ranking = DifficultyRanking::from_scores(&difficulty_scores(&snaps[..3], &data.inputs, &data.labels).unwrap()).unwrap();
    let curve = improvement_curve(&student, &teacher, &ranking).unwrap();
    assert_eq!(curve.len(), data.len());
    for (r, pt) in curve.iter().enumerate() {
        assert_eq!(pt.rank, r);
        assert_eq!(pt.sample_id, ranking.entries()[r].0);
        assert_eq!(pt.delta, student[pt.sample_id].last() - teacher[pt.sample_id].last());
    }
    let smooth = moving_average(&curve.iter().map(|p| p.delta).collect::<Vec<_>>(), 51).unwrap();
    assert_eq!(smooth.len(), curve.len());
    let (easy, hard) = rank_extremes(&ranking, 5).unwrap();
    let s = ranking.entries();
    assert!(easy.iter().all(|&i| s.iter().find(|e| e.0 == i).unwrap().1 <= s[5].1));
    assert!(hard.iter().all(|&i| s.iter().find(|e| e.0 == i).unwrap().1 >= s[s.len() - 6].1));
}

#[test]
fn moving_average_brute_force() {
    let series: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64 - 1.5).collect();
    for w in [1, 3, 5, 19] {
        let got = moving_average(&series, w).unwrap();
        for i in 0..series.len() {
            let lo = i.saturating_sub(w / 2);
            let hi = (i + w / 2).min(series.len() - 1);
            let expect = series[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            assert!((got[i] - expect).abs() <= 1e-12);
        }
    }
    assert!(moving_average(&series, 4).is_err());
    assert!(moving_average(&series, 21).is_err());
}
