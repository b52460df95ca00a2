//! Finite-difference checks of every layer type and of the full scoring
//! pipeline, against both inputs and parameters.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::moae::{ForwardCtx, MoaeLayer, RouterInput};
use crate::model::{build_model, EncoderConfig, GammaModel, ImageInput, ScoreHead};
use crate::nn::{Affine, Embedding, Ffn, FreezePolicy, LayerNorm, ParamGroup, ParamId, ParamStore, SelfAttention, TransformerBlock};
use crate::prompts::{PromptStrategy, Scene};
use crate::seed;
use crate::tensor::{grad_check, grad_check_with, CheckReport, GradCheckOptions, Segments, Tape, Tensor, Var};

/// Result of checking one layer type over several random inputs.
#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub name: &'static str,
    pub report: CheckReport,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Compares tape gradients of `f` w.r.t. parameters `ids` of `holder` with
/// finite differences on up to `max_coords` randomly chosen coordinates.
pub fn check_params<M, F>(
    holder: &mut M,
    store_of: fn(&mut M) -> &mut ParamStore,
    ids: &[ParamId],
    f: F,
    max_coords: usize,
    opts: GradCheckOptions,
    rng: &mut impl Rng,
) -> Result<CheckReport>
where
    F: for<'a> Fn(&'a M, &mut Tape<'a>) -> Result<Var>,
{
    let saved: Vec<bool> = {
        let store = store_of(holder);
        let saved = store.params().iter().map(|p| p.tensor.requires_grad()).collect();
        let all: Vec<ParamId> = store.ids().collect();
        for id in all {
            store.get_mut(id).set_requires_grad(ids.contains(&id));
        }
        saved
    };
    let numels: Vec<usize> = {
        let store = store_of(holder);
        ids.iter().map(|&id| store.get(id).numel()).collect()
    };
    let (base, sig, analytic, coords) = {
        let mut tape = Tape::new().tracking_kinks();
        let out = f(holder, &mut tape)?;
        let grads = tape.backward(out)?;
        let mut analytic = Vec::new();
        let mut coords = Vec::new();
        for (&id, &n) in ids.iter().zip(&numels) {
            // parameters the loss never reached are checked against zero
            match grads.for_key(id.index()) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat_n(0.0, n)),
            }
            coords.extend((0..n).map(|k| (id, k)));
        }
        (tape.scalar_value(out), tape.kink_signature(), analytic, coords)
    };
    let picked: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(rng, coords.len(), max_coords).into_vec();
        v.sort_unstable();
        v
    };
    let report = grad_check_with(&analytic, &picked, base, sig, opts, |c, delta| {
        let (id, k) = coords[c];
        let old = store_of(holder).get(id).data()[k];
        store_of(holder).get_mut(id).data_mut()[k] = old + delta;
        let r = {
            let mut tape = Tape::new().tracking_kinks();
            let out = f(holder, &mut tape);
            out.map(|o| (tape.scalar_value(o), tape.kink_signature()))
        };
        store_of(holder).get_mut(id).data_mut()[k] = old;
        r
    });
    let store = store_of(holder);
    let all: Vec<ParamId> = store.ids().collect();
    for (id, flag) in all.into_iter().zip(saved) {
        store.get_mut(id).set_requires_grad(flag);
    }
    report
}

fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
        .expect("positive dims")
}

/// Adds N(0, std²) noise to every parameter so checks run away from the
/// near-linear regime of a fresh initialization.
fn jitter(store: &mut ParamStore, std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("finite std");
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
}

/// Scalar probe `Σ y ⊙ P` with a fixed random `P`, turning any layer output
/// into a check objective.
fn probe<'a>(tape: &mut Tape<'a>, y: Var, p: &'a Tensor) -> Result<Var> {
    let pv = tape.leaf(p);
    let m = tape.mul(y, pv)?;
    Ok(tape.sum(m))
}

struct Case<L> {
    store: ParamStore,
    layer: L,
    probe: Tensor,
}

fn store_of<L>(c: &mut Case<L>) -> &mut ParamStore {
    &mut c.store
}

/// Checks a layer against its input and all of its parameters, over
/// `inputs` random inputs.
fn check_layer<L>(
    name: &'static str,
    inputs: usize,
    opts: GradCheckOptions,
    rng: &mut impl Rng,
    make: impl Fn(&mut ParamStore, &mut dyn rand::RngCore) -> (L, usize, usize, usize),
    forward: impl for<'a> Fn(&L, &'a ParamStore, &mut Tape<'a>, Var) -> Result<Var> + Copy,
) -> Result<LayerCheck> {
    let mut report = CheckReport::empty(opts.tol);
    for _ in 0..inputs {
        let mut store = ParamStore::new();
        let (layer, rows, cols, out_cols) = make(&mut store, rng);
        jitter(&mut store, 0.3, rng);
        let out_rows = rows;
        let mut case = Case {
            store,
            layer,
            probe: random_tensor(out_rows, out_cols, rng),
        };
        let x = random_tensor(rows, cols, rng);
        {
            let c = &case;
            let r = grad_check(
                |t, v| {
                    let y = forward(&c.layer, &c.store, t, v)?;
                    probe(t, y, &c.probe)
                },
                &x,
                opts.eps,
                opts.tol,
            )?;
            report.merge(&r);
        }
        let ids: Vec<ParamId> = case.store.ids().collect();
        let r = check_params(
            &mut case,
            store_of,
            &ids,
            |c, t| {
                let xv = t.constant(x.rows(), x.cols(), x.data().to_vec())?;
                let y = forward(&c.layer, &c.store, t, xv)?;
                probe(t, y, &c.probe)
            },
            64,
            opts,
            rng,
        )?;
        report.merge(&r);
    }
    Ok(LayerCheck { name, report })
}

/// Small architecture used for end-to-end checks.
pub fn toy_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        moae_layers: 2,
        d: 8,
        heads: 2,
        experts: 2,
        tau: 0.5,
        patch_grid: 2,
        channels: 3,
        max_prompt_len: 16,
        ..EncoderConfig::default()
    }
}

fn model_store(m: &mut GammaModel) -> &mut ParamStore {
    &mut m.store
}

/// MSE of two scored images (two scenes, scene prompts) against fixed
/// targets; every trainable parameter is exercised.
pub fn end_to_end_loss<'a>(m: &'a GammaModel, tape: &mut Tape<'a>, images: &[Tensor], targets: &[f64]) -> Result<Var> {
    let batch: Vec<ImageInput<'_>> = images.iter().map(ImageInput::full).collect();
    let img = m.encode_images(tape, &batch, &ForwardCtx::default())?.features;
    let mut seqs = m.tokenize_set(&PromptStrategy::Sdp.prompts(Scene::FaceQuality));
    seqs.extend(m.tokenize_set(&PromptStrategy::Sdp.prompts(Scene::NaturalAesthetics)));
    let txt = m.encode_texts(tape, &seqs, &ForwardCtx::default())?.features;
    let pick: Vec<usize> = (0..images.len()).flat_map(|b| (0..5).map(move |k| 5 * (b % 2) + k)).collect();
    let q = m.head.score(&m.store, tape, img, txt, &pick)?;
    let t = tape.constant(targets.len(), 1, targets.to_vec())?;
    tape.mse(q, t)
}

/// Gradient check of the full score pipeline w.r.t. every trainable
/// parameter of a perturbed toy model.
pub fn check_end_to_end(inputs: usize, coords: usize, opts: GradCheckOptions, seed: u64) -> Result<LayerCheck> {
    let mut rng = seed::rng(seed, &["gradcheck", "end-to-end"]);
    let mut report = CheckReport::empty(opts.tol);
    for i in 0..inputs {
        let cfg = toy_config();
        let mut m = build_model(&cfg, seed::derive_indexed(seed, &["gradcheck", "model"], i as u64))?;
        jitter(&mut m.store, 0.2, &mut rng);
        m.set_sigma(rng.random_range(0.3..1.0));
        m.clamp_tau(0.2);
        m.set_trainable(&FreezePolicy::default());
        let images: Vec<Tensor> = (0..2).map(|_| random_tensor(cfg.patches(), cfg.channels, &mut rng)).collect();
        let targets: Vec<f64> = (0..2).map(|_| rng.random_range(0.0..1.0)).collect();
        let ids: Vec<ParamId> = m.store.ids().filter(|&id| m.store.get(id).requires_grad()).collect();
        let imgs = &images;
        let tg = &targets;
        let r = check_params(&mut m, model_store, &ids, |m, t| end_to_end_loss(m, t, imgs, tg), coords, opts, &mut rng)?;
        report.merge(&r);
    }
    Ok(LayerCheck {
        name: "end-to-end",
        report,
    })
}

/// Runs every check; each layer type is tried on `inputs` random inputs.
pub fn gradcheck_battery(inputs: usize, seed: u64) -> Result<Vec<LayerCheck>> {
    // at 1e-5 the roundoff of the difference (~1e-10) alone breaks the
    // tolerance on coordinates whose true gradient is exactly zero
    let layer_opts = GradCheckOptions { eps: 1e-4, tol: 1e-4 };
    let mut rng = seed::rng(seed, &["gradcheck", "layers"]);
    let rng = &mut rng;
    let mut out = Vec::new();
    out.push(check_layer(
        "affine",
        inputs,
        layer_opts,
        rng,
        |s, r| (Affine::new(s, "a", ParamGroup::Adapter, 5, 4, r.next_u64()), 3, 5, 4),
        |l: &Affine, s, t, x| l.forward(s, t, x),
    )?);
    out.push(check_layer(
        "layer-norm",
        inputs,
        layer_opts,
        rng,
        |s, _| (LayerNorm::new(s, "n", 6), 3, 6, 6),
        |l: &LayerNorm, s, t, x| l.forward(s, t, x),
    )?);
    out.push(check_layer(
        "attention",
        inputs,
        layer_opts,
        rng,
        |s, r| (SelfAttention::new(s, "at", 8, 2, r.next_u64()), 4, 8, 8),
        |l: &SelfAttention, s, t, x| {
            let segs = Segments::from_lengths(&[1, 3])?;
            l.forward(s, t, x, &segs)
        },
    )?);
    out.push(check_layer(
        "ffn",
        inputs,
        layer_opts,
        rng,
        |s, r| (Ffn::new(s, "f", ParamGroup::Ffn, 4, 16, r.next_u64()), 3, 4, 4),
        |l: &Ffn, s, t, x| l.forward(s, t, x),
    )?);
    out.push(check_layer(
        "embedding",
        inputs,
        layer_opts,
        rng,
        |s, r| (Embedding::new(s, "e", 6, 4, r.next_u64()), 3, 4, 4),
        |l: &Embedding, s, t, x| {
            let e = l.forward(s, t, &[2, 0, 2])?;
            let y = t.mul(e, x)?;
            t.add(y, e)
        },
    )?);
    out.push(check_layer(
        "transformer-block",
        inputs,
        layer_opts,
        rng,
        |s, r| (TransformerBlock::new(s, "b", 8, 2, r.next_u64()).expect("valid block"), 3, 8, 8),
        |l: &TransformerBlock, s, t, x| l.forward(s, t, x, &Segments::uniform(1, 3)?),
    )?);
    out.push(check_layer(
        "moae",
        inputs,
        layer_opts,
        rng,
        |s, r| {
            let l = MoaeLayer::new(s, "m", 4, 16, 3, RouterInput::Token, r.next_u64()).expect("valid layer");
            (l, 3, 4, 4)
        },
        |l: &MoaeLayer, s, t, x| Ok(l.forward(s, t, x, &Segments::uniform(1, 3)?, &ForwardCtx::default())?.output),
    )?);
    out.push(check_layer(
        "score-head",
        inputs,
        layer_opts,
        rng,
        |s, r| {
            // tau well away from zero so the jitter cannot flip its sign
            (ScoreHead::new(s, 4, 1.5, r.next_u64()), 2, 4, 1)
        },
        |h: &ScoreHead, s, t, x| {
            let texts = t.constant(5, 4, (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect())?;
            h.score(s, t, x, texts, &[0, 1, 2, 3, 4, 4, 3, 2, 1, 0])
        },
    )?);
    out.push(check_end_to_end(
        inputs,
        24,
        GradCheckOptions { eps: 1e-5, tol: 1e-3 },
        seed,
    )?);
    Ok(out)
}
