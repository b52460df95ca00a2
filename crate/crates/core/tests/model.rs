use gamma::diagnostics::{check_end_to_end, gradcheck_battery, toy_config};
use gamma::model::{build_model, EncoderConfig, GammaModel, ImageInput, ScoreHead, LEVEL_INIT};
use gamma::moae::ForwardCtx;
use gamma::nn::{write_checkpoint, ParamGroup, ParamStore};
use gamma::prompts::{naive_prompts, prompts_for_scene, PromptSet, Scene};
use gamma::tensor::{GradCheckOptions, Tape, Tensor};
use gamma::GammaError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn head_score(sims: &[f64], tau: f64) -> f64 {
    let mut store = ParamStore::new();
    let head = ScoreHead::new(&mut store, 4, tau, 0);
    let mut tape = Tape::new();
    let s = tape.constant(1, 5, sims.to_vec()).unwrap();
    let q = head.score_similarities(&store, &mut tape, s).unwrap();
    tape.scalar_value(q)
}

#[test]
fn uniform_similarities_give_mean_level() {
    let q = head_score(&[0.3; 5], 0.07);
    assert!((q - 0.6).abs() < 1e-15, "{q}");
}

#[test]
fn hand_softmax_score() {
    let q = head_score(&[0.0, 0.0, 0.0, 0.0, 4f64.ln()], 1.0);
    assert!((q - 0.75).abs() <= 1e-12, "{q}");
}

#[test]
fn cold_temperature_picks_the_top_level() {
    let q = head_score(&[0.1, 0.2, 0.0, 0.3, 0.5], 1e-4);
    assert!((q - 1.0).abs() < 1e-12);
    let q = head_score(&[0.9, 0.2, 0.0, 0.3, 0.5], 1e-4);
    assert!((q - 0.2).abs() < 1e-12);
}

#[test]
fn score_needs_five_levels() {
    let mut store = ParamStore::new();
    let head = ScoreHead::new(&mut store, 4, 1.0, 0);
    let mut tape = Tape::new();
    let s = tape.constant(1, 4, vec![0.0; 4]).unwrap();
    assert!(matches!(head.score_similarities(&store, &mut tape, s), Err(GammaError::Config(_))));
    assert!(PromptSet::new(vec!["a".into(); 4]).is_err());
}

fn random_image(cfg: &EncoderConfig, rng: &mut impl Rng) -> Tensor {
    let n = cfg.patches() * cfg.channels;
    Tensor::matrix(cfg.patches(), cfg.channels, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small() -> EncoderConfig {
    EncoderConfig {
        layers: 3,
        moae_layers: 3,
        d: 16,
        heads: 2,
        ..EncoderConfig::default()
    }
}

/// Larger weights than the default init so differences are not hidden by a
/// near-linear network.
fn amplified(mut m: GammaModel) -> GammaModel {
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let g = m.store.param(id).group;
        if !matches!(g, ParamGroup::LevelWeights | ParamGroup::Temperature | ParamGroup::Sigma | ParamGroup::Norms) {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 15.0);
        }
    }
    m
}

#[test]
fn fresh_moae_model_matches_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = small();
    let base = build_model(&EncoderConfig { experts: 0, moae_layers: 0, ..cfg.clone() }, 9).unwrap();
    let moae = build_model(&cfg, 9).unwrap();
    let (base, moae) = (amplified(base), amplified(moae));
    for i in 0..10 {
        let img = random_image(&cfg, &mut rng);
        let set = prompts_for_scene(Scene::GROUPS[i % 5]);
        let a = base.predict_score(&img, &set).unwrap();
        let b = moae.predict_score(&img, &set).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!((0.2..=1.0).contains(&a));
    }
}

#[test]
fn k_zero_is_a_plain_encoder() {
    let cfg = small();
    let plain = build_model(&EncoderConfig { experts: 0, moae_layers: 0, ..cfg.clone() }, 4).unwrap();
    let k0 = build_model(&EncoderConfig { moae_layers: 0, ..cfg.clone() }, 4).unwrap();
    assert_eq!(write_checkpoint(&plain.store), write_checkpoint(&k0.store));
}

#[test]
fn build_is_deterministic_and_counts_parameters() {
    let cfg = small();
    let a = build_model(&cfg, 1).unwrap();
    let b = build_model(&cfg, 1).unwrap();
    assert_eq!(write_checkpoint(&a.store), write_checkpoint(&b.store));
    assert_ne!(write_checkpoint(&a.store), write_checkpoint(&build_model(&cfg, 2).unwrap().store));

    let vocab = a.vocab.len();
    let mut counts = Vec::new();
    for n in [0, 1, 3, 5] {
        let c = EncoderConfig { experts: n, moae_layers: if n == 0 { 0 } else { 3 }, ..cfg.clone() };
        let m = build_model(&c, 1).unwrap();
        assert_eq!(m.store.num_scalars(), c.param_count(vocab));
        counts.push(m.store.num_scalars());
    }
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");

    assert!(build_model(&EncoderConfig { moae_layers: 4, ..cfg.clone() }, 1).is_err());
    assert!(build_model(&EncoderConfig { heads: 3, ..cfg.clone() }, 1).is_err());
    assert!(build_model(&EncoderConfig { tau: 0.0, ..cfg }, 1).is_err());
}

#[test]
fn default_freeze_policy_is_applied() {
    let m = build_model(&small(), 1).unwrap();
    for p in m.store.params() {
        let trainable = matches!(
            p.group,
            ParamGroup::AdaptiveExperts
                | ParamGroup::Router
                | ParamGroup::Sigma
                | ParamGroup::Adapter
                | ParamGroup::LevelWeights
                | ParamGroup::Temperature
        );
        assert_eq!(p.tensor.requires_grad(), trainable, "{}", p.name);
    }
    assert_eq!(m.store.get(m.head.levels).data(), &LEVEL_INIT);
    assert!(m.sigma_values().iter().all(|&(_, _, s)| s == 0.0));
    assert_eq!(m.sigma_values().len(), 6);
}

#[test]
fn text_features() {
    let m = amplified(build_model(&small(), 5).unwrap());
    let enc = |s: &str| {
        let mut tape = Tape::new();
        let v = m.encode_text(&mut tape, &m.vocab.tokenize(s)).unwrap();
        tape.value(v).to_vec()
    };
    assert_eq!(enc("face bad-quality image"), enc("face bad-quality image"));
    assert_ne!(enc("face bad-quality image"), enc("underwater bad-quality image"));
    let mut tape = Tape::new();
    assert!(matches!(m.encode_text(&mut tape, &[m.vocab.len()]), Err(GammaError::Input(_))));
    assert!(m.encode_text(&mut tape, &[2; 17]).is_err());

    let feats = |set: &PromptSet| {
        let mut tape = Tape::new();
        let v = m.encode_prompt_set(&mut tape, set).unwrap();
        tape.value(v).to_vec()
    };
    let face = prompts_for_scene(Scene::FaceQuality);
    assert_eq!(feats(&face), feats(&face));
    assert_ne!(feats(&face), feats(&prompts_for_scene(Scene::UnderwaterQuality)));
}

#[test]
fn image_shape_is_checked_and_views_work() {
    let cfg = small();
    let m = build_model(&cfg, 5).unwrap();
    let mut tape = Tape::new();
    let bad = Tensor::matrix(4, cfg.channels, vec![0.0; 4 * cfg.channels]).unwrap();
    assert!(matches!(m.encode_image(&mut tape, &bad), Err(GammaError::Dimension { .. })));
    let img = random_image(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
    let idx = [0, 5, 7];
    let out = m
        .encode_images(&mut tape, &[ImageInput { image: &img, patches: Some(&idx) }, ImageInput::full(&img)], &ForwardCtx::default())
        .unwrap();
    assert_eq!(tape.shape(out.features), (2, cfg.d));
    assert_eq!(out.routes.len(), 3);
    assert_eq!(tape.shape(out.routes[0]), (3 + 16, 3));
}

#[test]
fn prompt_order_matters() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = small();
    let m = amplified(build_model(&cfg, 2).unwrap());
    let img = random_image(&cfg, &mut rng);
    let set = naive_prompts();
    let mut rev = set.levels().to_vec();
    rev.reverse();
    let a = m.predict_score(&img, &set).unwrap();
    let b = m.predict_score(&img, &PromptSet::new(rev).unwrap()).unwrap();
    assert!((a - b).abs() > 1e-9);
}

#[test]
fn end_to_end_gradients() {
    let r = check_end_to_end(2, 60, GradCheckOptions { eps: 1e-5, tol: 1e-3 }, 7).unwrap();
    assert!(r.passed(), "{:?}", r.report);
    assert!(r.report.coordinates >= 100);
}

#[test]
fn gradcheck_battery_passes() {
    let checks = gradcheck_battery(2, 11).unwrap();
    assert_eq!(checks.len(), 9);
    for c in &checks {
        assert!(c.passed(), "{}: {:?}", c.name, c.report);
    }
    let _ = toy_config();
}
