use gamma::data::{synthesize_biased_suite, Dataset, SplitPlan, SuiteConfig, TrainingStream};
use gamma::eval::{evaluate, EvalConfig};
use gamma::experiment::run_plan;
use gamma::model::{build_model, EncoderConfig, GammaModel};
use gamma::moae::ForwardCtx;
use gamma::nn::{read_checkpoint, write_checkpoint, ParamGroup};
use gamma::prompts::PromptStrategy;
use gamma::train::{train_mixed, train_stream, train_task_specific, TrainConfig};

fn small() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        moae_layers: 2,
        d: 16,
        heads: 2,
        ..EncoderConfig::default()
    }
}

fn suite(size: usize) -> (Vec<Dataset>, SplitPlan) {
    let ds = synthesize_biased_suite(&SuiteConfig::with_size(size, 0.05), 1).unwrap();
    let plan = run_plan(&ds, 1).unwrap();
    (ds, plan)
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_change_nothing() {
    let (ds, plan) = suite(100);
    let mut m = build_model(&small(), 1).unwrap();
    let before = write_checkpoint(&m.store);
    let rep = train_mixed(&mut m, &ds, &plan, &config(0)).unwrap();
    assert_eq!(rep.steps, 0);
    assert_eq!(write_checkpoint(&m.store), before);
}

#[test]
fn loss_falls_on_a_frozen_batch() {
    let ds = synthesize_biased_suite(&SuiteConfig::default(), 1).unwrap();
    let plan = run_plan(&ds, 1).unwrap();
    let mut m = build_model(&EncoderConfig::default(), 1).unwrap();
    let batch: Vec<usize> = plan.parts[0].0[..8].to_vec();
    let stream = TrainingStream::single(0, &batch, 5);
    let tc = TrainConfig {
        epochs: 50,
        clip_norm: None,
        ..config(50)
    };
    let rep = train_stream(&mut m, &ds, &stream, &tc).unwrap();
    let l = &rep.step_losses;
    assert_eq!(l.len(), 50);
    assert!(l.iter().all(|v| v.is_finite()));
    let rises = l.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 5, "{rises} rising steps: {l:?}");
    assert!(l[49] < l[0]);
}

fn group_bytes(m: &GammaModel, group: ParamGroup) -> Vec<u8> {
    read_checkpoint(&write_checkpoint(&m.store))
        .unwrap()
        .into_iter()
        .filter(|r| r.group == group)
        .flat_map(|r| r.data.into_iter().flat_map(f64::to_le_bytes))
        .collect()
}

#[test]
fn training_respects_the_freeze_policy_and_logs_sigma() {
    let (ds, plan) = suite(100);
    let mut m = build_model(&small(), 1).unwrap();
    let shared = group_bytes(&m, ParamGroup::SharedExperts);
    let ffn = group_bytes(&m, ParamGroup::Ffn);
    assert!(!shared.is_empty());
    let rep = train_mixed(&mut m, &ds, &plan, &config(2)).unwrap();
    assert_eq!(group_bytes(&m, ParamGroup::SharedExperts), shared);
    assert_eq!(group_bytes(&m, ParamGroup::Ffn), ffn);
    assert!(rep.step_losses.iter().all(|v| v.is_finite()));
    assert_eq!(rep.datasets_read.len(), ds.len());

    let first: Vec<_> = rep.sigma.records.iter().filter(|r| r.step == 0).collect();
    assert_eq!(first.len(), 4);
    assert!(first.iter().all(|r| r.sigma == 0.0));
    for enc in ["visual", "text"] {
        for layer in 0..2 {
            let t = rep.sigma.trajectory(enc, layer);
            assert!(t.windows(2).all(|w| w[0].0 < w[1].0), "{enc} {layer}");
            assert_eq!(t.last().unwrap().0, rep.steps);
        }
    }
    let last = rep.sigma.trajectory("visual", 1);
    assert!(last.last().unwrap().1.abs() > 0.0);
}

#[test]
fn training_is_deterministic() {
    let (ds, plan) = suite(100);
    let run = || {
        let mut m = build_model(&small(), 4).unwrap();
        let rep = train_mixed(&mut m, &ds, &plan, &config(1)).unwrap();
        (write_checkpoint(&m.store), rep.sigma.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn task_specific_is_mixed_training_on_one_dataset() {
    let (ds, plan) = suite(100);
    let i = 2;
    let mut a = build_model(&small(), 3).unwrap();
    let rep = train_task_specific(&mut a, &ds, &plan, i, &config(1)).unwrap();
    assert_eq!(rep.datasets_read.iter().copied().collect::<Vec<_>>(), vec![i]);

    let one = vec![ds[i].clone()];
    let one_plan = SplitPlan {
        parts: vec![plan.parts[i].clone()],
        ..plan.clone()
    };
    let mut b = build_model(&small(), 3).unwrap();
    train_mixed(&mut b, &one, &one_plan, &config(1)).unwrap();
    assert_eq!(write_checkpoint(&a.store), write_checkpoint(&b.store));
    assert!(train_task_specific(&mut a, &ds, &plan, 9, &config(1)).is_err());
}

#[test]
fn fine_tuning_helps_its_own_dataset() {
    let (ds, plan) = suite(200);
    let i = 1;
    let mut m = build_model(&small(), 6).unwrap();
    train_mixed(&mut m, &ds, &plan, &config(2)).unwrap();
    let eval_cfg = EvalConfig {
        views: 1,
        view_patches: 16,
        ..EvalConfig::default()
    };
    let score = |m: &GammaModel| {
        evaluate(m, &ds, &plan, PromptStrategy::Sdp, &eval_cfg, &ForwardCtx::default()).unwrap().datasets[i].srcc
    };
    let mixed = score(&m);
    train_task_specific(&mut m, &ds, &plan, i, &config(4)).unwrap();
    let tuned = score(&m);
    assert!(tuned > mixed, "mixed {mixed} tuned {tuned}");
}
