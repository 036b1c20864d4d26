use std::sync::Arc;

use kfatt::datagen::{generate, GenConfig};
use kfatt::eval::{auc, auc_brute_force, auc_with, bench_latency, evaluate, evaluate_scores, render_metrics, Subset, TieMode};
use kfatt::model::{CtrInstance, Event, KernelMode, Model, ModelConfig, SubsetTags, Vocab};
use kfatt::{Error, Rng};
use proptest::prelude::*;

fn scored_set(rng: &mut Rng, n: usize, levels: usize) -> (Vec<f64>, Vec<f64>) {
    // Scores drawn from a few levels so ties are common.
    let mut labels: Vec<f64> = (0..n).map(|_| rng.below(2) as f64).collect();
    labels[0] = 1.0;
    labels[1] = 0.0;
    let scores = (0..n).map(|_| rng.below(levels) as f64 / levels as f64 - 0.3).collect();
    (scores, labels)
}

#[test]
fn fast_auc_matches_pairwise_with_ties() {
    let mut rng = Rng::new(1);
    for _ in 0..100 {
        let n = 2 + rng.below(200);
        let levels = 1 + rng.below(12);
        let (s, y) = scored_set(&mut rng, n, levels);
        for ties in [TieMode::Half, TieMode::Strict] {
            let fast = auc_with(&s, &y, ties).unwrap();
            let slow = auc_brute_force(&s, &y, ties).unwrap();
            assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
        }
    }
}

#[test]
fn auc_invariant_under_cubic_transform() {
    let mut rng = Rng::new(2);
    for _ in 0..100 {
        let n = 2 + rng.below(100);
        let (mut s, y) = scored_set(&mut rng, n, 50);
        for x in s.iter_mut() {
            *x += 0.01 * rng.normal();
        }
        let t: Vec<f64> = s.iter().map(|x| x * x * x + x).collect();
        assert!((auc(&s, &y).unwrap() - auc(&t, &y).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn empty_class_is_undefined() {
    assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::AucUndefined(_))));
    assert!(matches!(auc(&[0.1, 0.2], &[0.0, 0.0]), Err(Error::AucUndefined(_))));
}

fn instances(n: usize, rng: &mut Rng) -> Vec<CtrInstance> {
    let history = Arc::new(vec![Event { timestamp: 0, query: 1, item: 1 }]);
    (0..n)
        .map(|i| CtrInstance {
            user: i,
            timestamp: 10,
            query: 1,
            item: 1,
            label: rng.below(2) as f64,
            history: Arc::clone(&history),
            tags: SubsetTags {
                new: i % 2 == 0,
                infreq: i % 3 == 0,
            },
        })
        .collect()
}

#[test]
fn random_scores_sit_near_one_half() {
    let mut rng = Rng::new(3);
    let test = instances(12_000, &mut rng);
    let scores: Vec<f64> = (0..test.len()).map(|_| rng.uniform()).collect();
    let rows = evaluate_scores("random", &scores, &test, TieMode::Half).unwrap();
    for r in &rows {
        assert!(r.n_pos + r.n_neg >= 2000);
        let a = r.auc.unwrap();
        assert!((0.45..=0.55).contains(&a), "{}: {a}", r.subset.name());
    }
}

#[test]
fn empty_subset_is_reported_not_an_error() {
    let mut rng = Rng::new(4);
    let mut test = instances(10, &mut rng);
    for (i, t) in test.iter_mut().enumerate() {
        t.tags = SubsetTags::default();
        t.label = (i % 2) as f64;
    }
    let rows = evaluate_scores("m", &[0.5; 10], &test, TieMode::Half).unwrap();
    let new = rows.iter().find(|r| r.subset == Subset::New).unwrap();
    assert_eq!(new.auc, None);
    assert_eq!((new.n_pos, new.n_neg), (0, 0));
    assert!(render_metrics(&rows).contains("name=m subset=new auc=n/a n_pos=0 n_neg=0"));
}

#[test]
fn cheating_predictor_scores_one_on_noiseless_data() {
    let cfg = GenConfig {
        users: 800,
        click_noise: 0.0,
        ..GenConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let truth = ds.truth.as_ref().unwrap();
    let scores: Vec<f64> = ds
        .test
        .iter()
        .map(|i| {
            let c = truth.world.query_category[i.query];
            let best = truth.world.nearest_item(c, cfg.items_per_category, &truth.interest(i.user, i.query));
            f64::from(u8::from(best == i.item))
        })
        .collect();
    let rows = evaluate_scores("oracle", &scores, &ds.test, TieMode::Half).unwrap();
    let all = rows.iter().find(|r| r.subset == Subset::All).unwrap();
    assert_eq!(all.auc, Some(1.0));
}

#[test]
fn evaluating_a_frozen_model_twice_is_identical() {
    let ds = generate(&GenConfig {
        users: 150,
        ..GenConfig::default()
    })
    .unwrap();
    let model = Model::new(ModelConfig::default(), ds.vocab, &mut Rng::new(5)).unwrap();
    let a = render_metrics(&evaluate("m", &model, &ds.test, TieMode::Half).unwrap());
    let b = render_metrics(&evaluate("m", &model, &ds.test, TieMode::Half).unwrap());
    assert_eq!(a, b);
}

fn small_model() -> ModelConfig {
    ModelConfig {
        kernel: KernelMode::Transformer,
        d_model: 8,
        d_k: 4,
        d_v: 4,
        mlp_hidden: 8,
        ..ModelConfig::default()
    }
}

#[test]
fn bench_rows_are_ordered_and_counted() {
    let kernels = vec!["transformer".to_string(), "transformer_full".to_string(), "kfatt_freq".to_string()];
    let rows = bench_latency(&small_model(), &kernels, &[25, 50, 100], 200, 1).unwrap();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        assert!(r.p99_us >= r.p50_us, "{}", r.render());
        assert!(r.attn_macs <= r.macs);
    }
    for len in [50, 100] {
        let get = |k: &str| rows.iter().find(|r| r.kernel == k && r.length == len).unwrap();
        let (split, full) = (get("transformer"), get("transformer_full"));
        assert_eq!(split.sessions, len / 25);
        assert_eq!(full.sessions, 1);
        assert!(split.macs <= full.macs);
        assert!(split.attn_macs < full.attn_macs);
    }
}

#[test]
fn single_session_attention_cost_is_quadratic() {
    let kernels = vec!["transformer_full".to_string()];
    let rows = bench_latency(&small_model(), &kernels, &[8, 16, 32], 200, 2).unwrap();
    let m: Vec<f64> = rows.iter().map(|r| r.attn_macs as f64).collect();
    assert!((m[1] / m[0] - 4.0).abs() < 1e-12, "{m:?}");
    assert!((m[2] / m[1] - 4.0).abs() < 1e-12, "{m:?}");
}

#[test]
fn bench_rejects_too_few_reps_and_zero_length() {
    let k = vec!["transformer".to_string()];
    assert!(matches!(bench_latency(&small_model(), &k, &[10], 50, 1), Err(Error::Config(_))));
    assert!(matches!(bench_latency(&small_model(), &k, &[0], 200, 1), Err(Error::Config(_))));
}

#[test]
fn synthetic_history_stays_in_vocab() {
    let v = Vocab { queries: 64, items: 256 };
    let h = kfatt::eval::synthetic_history(60, v, &mut Rng::new(1));
    assert_eq!(h.len(), 60);
    assert!(h.iter().all(|e| e.query >= 1 && e.query < 64 && e.item >= 1 && e.item < 256));
}

proptest! {
    #[test]
    fn auc_fast_equals_brute(seed in any::<u64>(), n in 2usize..80, levels in 1usize..20) {
        let (s, y) = scored_set(&mut Rng::new(seed), n, levels);
        let fast = auc(&s, &y).unwrap();
        let slow = auc_brute_force(&s, &y, TieMode::Half).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&fast));
    }

    #[test]
    fn auc_of_negated_scores_is_complement(seed in any::<u64>(), n in 2usize..80) {
        let (s, y) = scored_set(&mut Rng::new(seed), n, 7);
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auc(&s, &y).unwrap() + auc(&neg, &y).unwrap() - 1.0).abs() <= 1e-12);
    }
}
