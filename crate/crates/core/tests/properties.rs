use akd_core::attack::{self, CrossEntropyObjective};
use akd_core::loss::{kl_divergence, mix_labels};
use akd_core::tensor::one_hot;
use akd_core::{AttackConfig, AttackMethod, EnsembleTeacher, Graph, Model, ModelSpec, Tensor};
use proptest::prelude::*;

fn rows_strategy(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0..=1.0f64, n * d).prop_map(move |v| Tensor::new(vec![n, d], v).unwrap())
}

fn simplex_rows(n: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.001..1.0f64, n * c).prop_map(move |v| {
        let mut t = Tensor::new(vec![n, c], v).unwrap();
        for i in 0..n {
            let s: f64 = t.row(i).iter().sum();
            t.row_mut(i).iter_mut().for_each(|p| *p /= s);
        }
        t
    })
}

fn method() -> impl Strategy<Value = AttackMethod> {
    prop_oneof![Just(AttackMethod::Fgsm), Just(AttackMethod::Ffgsm), Just(AttackMethod::Pgd)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn attacks_stay_in_ball_and_box(
        x in rows_strategy(4, 3),
        labels in prop::collection::vec(0usize..3, 4),
        eps in 0.0..0.5f64,
        step_frac in 0.05..1.5f64,
        iters in 1usize..5,
        m in method(),
        seed in any::<u64>(),
        model_seed in 0u64..20,
    ) {
        let model = Model::init(ModelSpec::mlp(3, &[4], 3), model_seed).unwrap();
        let cfg = match m {
            AttackMethod::Fgsm => AttackConfig::fgsm(eps),
            AttackMethod::Ffgsm => AttackConfig::ffgsm(eps),
            AttackMethod::Pgd => AttackConfig::pgd(eps, eps * step_frac, iters),
        }
        .with_seed(seed);
        let adv = attack::attack(&CrossEntropyObjective::new(&model), &x, &labels, &cfg).unwrap();
        prop_assert_eq!(adv.shape(), x.shape());
        for (a, o) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - o).abs() <= eps + 1e-9);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn mixed_labels_are_distributions(t in simplex_rows(3, 4), labels in prop::collection::vec(0usize..4, 3), alpha in 0.0..=1.0f64) {
        let y = one_hot(&labels, 4).unwrap();
        let m = mix_labels(&t, &y, alpha).unwrap();
        for i in 0..3 {
            let row = m.probs().row(i);
            prop_assert!(row.iter().all(|p| *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn kl_is_nonnegative(s in simplex_rows(3, 4), t in simplex_rows(3, 4)) {
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let v = kl_divergence(&mut g, sv, &t).unwrap();
        prop_assert!(g.scalar(v) >= -1e-12);
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let v = kl_divergence(&mut g, sv, &s).unwrap();
        prop_assert!(g.scalar(v).abs() <= 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(z in prop::collection::vec(-50.0..50.0f64, 12)) {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(vec![3, 4], z).unwrap());
        let p = g.softmax(v).unwrap();
        let p = g.value(p);
        for i in 0..3 {
            prop_assert!(p.row(i).iter().all(|q| (0.0..=1.0).contains(q)));
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn ensembles_output_distributions(raw in prop::collection::vec(0.01..1.0f64, 3), x in rows_strategy(5, 2)) {
        let total: f64 = raw.iter().sum();
        let beta: Vec<f64> = raw.iter().map(|b| b / total).collect();
        let members = (0..3).map(|i| Model::init(ModelSpec::mlp(2, &[4], 3), i).unwrap()).collect();
        let ens = EnsembleTeacher::new(members, beta).unwrap();
        let p = ens.probs(&x).unwrap();
        for i in 0..5 {
            prop_assert!(p.row(i).iter().all(|q| (0.0..=1.0).contains(q)));
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn invalid_beta_is_rejected(raw in prop::collection::vec(0.01..1.0f64, 2), bump in 0.01..0.5f64) {
        let total: f64 = raw.iter().sum();
        let beta: Vec<f64> = vec![raw[0] / total + bump, raw[1] / total];
        let members = (0..2).map(|i| Model::init(ModelSpec::mlp(2, &[], 2), i).unwrap()).collect();
        prop_assert!(EnsembleTeacher::new(members, beta).is_err());
    }
}
