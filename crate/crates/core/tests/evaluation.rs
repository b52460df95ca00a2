use gamma::data::{synthesize_biased_suite, Dataset, Sample, SplitPlan, SuiteConfig};
use gamma::eval::{activation_profile, average_ranks, evaluate, plcc, predict, srcc, EvalConfig};
use gamma::experiment::{ablation_suite, run_plan, AblationAxis, ExperimentConfig};
use gamma::model::{build_model, EncoderConfig, GammaModel};
use gamma::moae::ForwardCtx;
use gamma::nn::ParamGroup;
use gamma::prompts::PromptStrategy;
use gamma::train::{PretrainConfig, TrainConfig};
use proptest::prelude::*;

fn brute_ranks(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    v.iter()
        .map(|x| {
            let first = sorted.iter().position(|y| y == x).unwrap();
            let last = sorted.iter().rposition(|y| y == x).unwrap();
            (first + last) as f64 / 2.0 + 1.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

fn nonconstant(v: &[f64]) -> bool {
    v.iter().any(|&x| x != v[0])
}

/// Pairs of equal-length vectors drawn from a few levels so ties are common.
fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=200).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..8).prop_map(|v| f64::from(v) * 0.25), n),
            prop::collection::vec(-1.0f64..1.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matches_brute_force((a, b) in pairs()) {
        prop_assume!(nonconstant(&a) && nonconstant(&b));
        prop_assert_eq!(average_ranks(&a), brute_ranks(&a));
        let s = srcc(&a, &b).unwrap();
        prop_assert!((s - pearson(&brute_ranks(&a), &brute_ranks(&b))).abs() <= 1e-12);
        prop_assert!((plcc(&a, &b).unwrap() - pearson(&a, &b)).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn srcc_ignores_monotone_transforms((a, b) in pairs()) {
        prop_assume!(nonconstant(&a) && nonconstant(&b));
        let s = srcc(&a, &b).unwrap();
        for f in [f64::exp as fn(f64) -> f64, |x: f64| x * x * x, |x: f64| 3.0 * x - 7.0] {
            let t: Vec<f64> = a.iter().map(|&x| f(x)).collect();
            prop_assert_eq!(srcc(&t, &b).unwrap(), s);
        }
    }

    #[test]
    fn plcc_under_affine_maps((a, b) in pairs(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        prop_assume!(nonconstant(&a) && nonconstant(&b));
        let p = plcc(&a, &b).unwrap();
        let t: Vec<f64> = a.iter().map(|&x| scale * x + shift).collect();
        prop_assert!((plcc(&t, &b).unwrap() - p).abs() < 1e-9);
        let r: Vec<f64> = a.iter().map(|&x| -x).collect();
        prop_assert!((plcc(&r, &b).unwrap() + p).abs() < 1e-12);
    }
}

fn small() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        moae_layers: 2,
        d: 16,
        heads: 2,
        ..EncoderConfig::default()
    }
}

/// Larger weights than the init so that views give visibly different scores.
fn amplified(mut m: GammaModel) -> GammaModel {
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let g = m.store.param(id).group;
        if matches!(g, ParamGroup::Embeddings | ParamGroup::Attention | ParamGroup::Ffn | ParamGroup::Adapter) {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 15.0);
        }
    }
    m
}

fn suite() -> (Vec<Dataset>, SplitPlan) {
    let ds = synthesize_biased_suite(&SuiteConfig::with_size(100, 0.05), 2).unwrap();
    let plan = run_plan(&ds, 2).unwrap();
    (ds, plan)
}

#[test]
fn oracle_predictor_is_perfect_without_noise() {
    let ds = synthesize_biased_suite(&SuiteConfig::with_size(100, 0.0), 3).unwrap();
    for d in &ds {
        let z: Vec<f64> = d.samples.iter().map(|s| s.latent.unwrap()).collect();
        let y: Vec<f64> = d.samples.iter().map(|s| s.norm_mos).collect();
        assert_eq!(srcc(&z, &y).unwrap(), 1.0, "{}", d.spec.name);
    }
}

#[test]
fn evaluation_is_reproducible_and_worker_independent() {
    let (ds, plan) = suite();
    let m = amplified(build_model(&small(), 1).unwrap());
    let run = |views, workers| {
        let cfg = EvalConfig {
            views,
            view_patches: 10,
            workers,
            chunk: 7,
            seed: 4,
        };
        evaluate(&m, &ds, &plan, PromptStrategy::Sdp, &cfg, &ForwardCtx::default()).unwrap()
    };
    assert_eq!(run(1, 1), run(1, 1));
    let a = run(10, 1);
    assert_eq!(a, run(10, 8));
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&run(10, 3)).unwrap());
    assert_eq!(a.datasets.len(), 5);
    assert!(a.datasets.iter().all(|d| d.n == 20));
}

#[test]
fn view_averaging_reduces_variance() {
    let (ds, _) = suite();
    let m = amplified(build_model(&small(), 2).unwrap());
    let samples: Vec<&Sample> = ds.iter().flat_map(|d| d.samples.iter().take(8)).collect();
    let spread = |views| {
        let reps: Vec<Vec<f64>> = (0..6)
            .map(|seed| {
                let cfg = EvalConfig {
                    views,
                    view_patches: 6,
                    seed,
                    ..EvalConfig::default()
                };
                predict(&m, &samples, PromptStrategy::Sdp, &cfg, &ForwardCtx::default()).unwrap()
            })
            .collect();
        let mut total = 0.0;
        for i in 0..samples.len() {
            let v: Vec<f64> = reps.iter().map(|r| r[i]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            total += (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        }
        total / samples.len() as f64
    };
    let (one, ten) = (spread(1), spread(10));
    assert!(one > 0.0);
    assert!(ten <= one, "V=10 spread {ten} vs V=1 spread {one}");
}

#[test]
fn untrained_profiles_are_uniform_probability_vectors() {
    let (ds, plan) = suite();
    let m = build_model(&small(), 3).unwrap();
    let p = activation_profile(&m, &ds, &plan, 16).unwrap();
    assert_eq!(p.rows.len(), 5 * 2);
    for r in &p.rows {
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // router logits at init are ~0.02·|x| ≈ 0.08 for width 16, so
        // weights stay within about 1/3 ± 0.08
        assert!(r.weights.iter().all(|w| (w - 1.0 / 3.0).abs() < 0.08), "{r:?}");
    }
    // below the differentiation bar a trained model has to clear
    assert!(p.max_l1(p.last_layer().unwrap()) < 0.1);
    let csv = p.to_csv();
    assert_eq!(csv.lines().count(), 1 + 3 * p.rows.len());

    let plain = build_model(&EncoderConfig { experts: 0, moae_layers: 0, ..small() }, 3).unwrap();
    assert!(activation_profile(&plain, &ds, &plan, 16).is_err());
}

fn tiny_experiment() -> ExperimentConfig {
    ExperimentConfig {
        model: small(),
        training: TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        },
        evaluation: EvalConfig {
            views: 2,
            ..EvalConfig::default()
        },
        suite: SuiteConfig::with_size(100, 0.05),
        pretrain: PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        },
        runs: 1,
    }
}

#[test]
fn ablation_driver_rows() {
    let cfg = tiny_experiment();
    let (rows, _) = ablation_suite(&cfg, &[AblationAxis::Experts(vec![0, 1, 3, 5])], 1).unwrap();
    assert_eq!(rows.iter().map(|r| r.config.as_str()).collect::<Vec<_>>(), ["experts=0", "experts=1", "experts=3", "experts=5"]);

    let (rows, _) = ablation_suite(&cfg, &[AblationAxis::Sigma], 1).unwrap();
    assert_eq!(rows.len(), 2);
    assert_ne!(rows[0].report, rows[1].report);

    let (rows, outcomes) = ablation_suite(&cfg, &[AblationAxis::SingleExpert], 1).unwrap();
    assert_eq!(rows.len(), 1 + 3);
    assert!(rows[1..].iter().enumerate().all(|(e, r)| r.config.ends_with(&format!("expert{e}"))));
    assert_eq!(outcomes[0].single_expert[0].len(), 3);

    assert!(AblationAxis::parse("bogus").is_err());
}
