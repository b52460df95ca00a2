//! Dual-encoder assessor: a patch encoder for images, a token encoder for
//! level prompts, MoAE blocks in the last `K` layers of both, and a score
//! head that turns image/prompt similarities into a quality score.

use serde::{Deserialize, Serialize};

use crate::error::{GammaError, Result};
use crate::moae::{ForwardCtx, MoaeLayer, RouterInput};
use crate::nn::{Affine, Embedding, FreezePolicy, ParamGroup, ParamId, ParamStore, TransformerBlock};
use crate::prompts::{PromptSet, Vocabulary};
use crate::seed;
use crate::tensor::{Segments, Tape, Tensor, Var};

pub const LEVEL_INIT: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    FirstToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Blocks per encoder.
    pub layers: usize,
    /// Trailing blocks that carry an MoAE layer.
    pub moae_layers: usize,
    pub d: usize,
    pub heads: usize,
    /// Adaptive experts per MoAE layer; 0 builds the plain baseline.
    pub experts: usize,
    pub tau: f64,
    /// Images are `patch_grid² × channels`.
    pub patch_grid: usize,
    pub channels: usize,
    pub max_prompt_len: usize,
    pub pooling: Pooling,
    pub router_input: RouterInput,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            moae_layers: 6,
            d: 32,
            heads: 4,
            experts: 3,
            tau: 0.07,
            patch_grid: 4,
            channels: 8,
            max_prompt_len: 16,
            pooling: Pooling::Mean,
            router_input: RouterInput::Token,
        }
    }
}

impl EncoderConfig {
    pub fn patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn hidden(&self) -> usize {
        4 * self.d
    }

    pub fn has_moae(&self) -> bool {
        self.experts > 0 && self.moae_layers > 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GammaError::Config(m));
        if self.layers == 0 || self.d == 0 || self.patch_grid == 0 || self.channels == 0 || self.max_prompt_len == 0 {
            return bad("layers, d, patch_grid, channels and max_prompt_len must be positive".into());
        }
        if self.moae_layers > self.layers {
            return bad(format!("moae_layers {} exceeds layers {}", self.moae_layers, self.layers));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("width {} is not divisible into {} heads", self.d, self.heads));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    /// Scalar parameter count, from the architecture alone.
    pub fn param_count(&self, vocab: usize) -> usize {
        let (d, h) = (self.d, self.hidden());
        let ffn = d * h + h + h * d + d;
        let block = 4 * d + (3 * d * d + 3 * d) + (d * d + d);
        let moae = if self.has_moae() {
            self.moae_layers * (self.experts * ffn + self.experts * d + 1)
        } else {
            0
        };
        let encoder = self.layers * (block + ffn) + moae;
        let visual_in = self.channels * d + d + self.patches() * d;
        let text_in = vocab * d + self.max_prompt_len * d;
        let head = 2 * (d * d + d) + 5 + 1;
        2 * encoder + visual_in + text_in + head
    }
}

#[derive(Clone, Debug)]
enum Input {
    Patches(Affine),
    Tokens(Embedding),
}

#[derive(Clone, Debug)]
pub struct Encoder {
    input: Input,
    pos: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pooling: Pooling,
}

/// Features of a batch plus the router outputs of each MoAE layer, in layer
/// order.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub features: Var,
    pub routes: Vec<Var>,
    pub segments: Segments,
}

impl Encoder {
    fn build(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, input: Input, positions: usize, seed: u64) -> Result<Self> {
        let pos = Embedding::new(store, &format!("{name}.pos"), positions, cfg.d, seed);
        let first_moae = cfg.layers - cfg.moae_layers;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let bname = format!("{name}.block{i}");
            let block = if cfg.experts > 0 && i >= first_moae {
                TransformerBlock::new_moae(store, &bname, cfg.d, cfg.heads, cfg.experts, cfg.router_input, seed)?
            } else {
                TransformerBlock::new(store, &bname, cfg.d, cfg.heads, seed)?
            };
            blocks.push(block);
        }
        Ok(Self {
            input,
            pos,
            blocks,
            pooling: cfg.pooling,
        })
    }

    pub fn moae_layers(&self) -> impl Iterator<Item = (usize, &MoaeLayer)> {
        self.blocks.iter().enumerate().filter_map(|(i, b)| b.moae().map(|l| (i, l)))
    }

    fn run<'p>(
        &self,
        store: &'p ParamStore,
        tape: &mut Tape<'p>,
        x: Var,
        pos_idx: &[usize],
        segs: Segments,
        ctx: &ForwardCtx,
    ) -> Result<Encoded> {
        let p = self.pos.forward(store, tape, pos_idx)?;
        let mut h = tape.add(x, p)?;
        let mut routes = Vec::new();
        for b in &self.blocks {
            h = b.forward_with(store, tape, h, &segs, ctx, &mut routes)?;
        }
        let features = match self.pooling {
            Pooling::Mean => tape.segment_mean(h, &segs)?,
            Pooling::FirstToken => tape.gather_rows(h, &segs.starts())?,
        };
        Ok(Encoded {
            features,
            routes,
            segments: segs,
        })
    }
}

/// Adapter, level weights `C` and temperature `tau`:
/// `q = Σ_k C_k softmax(adapter(I)·T_k / tau)_k`.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    pub up: Affine,
    pub down: Affine,
    pub levels: ParamId,
    pub tau: ParamId,
}

impl ScoreHead {
    pub fn new(store: &mut ParamStore, d: usize, tau: f64, seed: u64) -> Self {
        Self {
            up: Affine::new(store, "head.adapter.up", ParamGroup::Adapter, d, d, seed),
            down: Affine::new(store, "head.adapter.down", ParamGroup::Adapter, d, d, seed),
            levels: store.add(
                "head.C",
                ParamGroup::LevelWeights,
                Tensor::matrix(1, 5, LEVEL_INIT.to_vec()).expect("static shape"),
            ),
            tau: store.add("head.tau", ParamGroup::Temperature, Tensor::scalar(tau)),
        }
    }

    pub fn adapt<'p>(&self, store: &'p ParamStore, tape: &mut Tape<'p>, image: Var) -> Result<Var> {
        let h = self.up.forward(store, tape, image)?;
        let h = tape.relu(h);
        self.down.forward(store, tape, h)
    }

    /// Scores from raw similarities `sims` (`B × 5`, ordered bad → perfect).
    pub fn score_similarities<'p>(&self, store: &'p ParamStore, tape: &mut Tape<'p>, sims: Var) -> Result<Var> {
        let (b, k) = tape.shape(sims);
        if k != 5 {
            return Err(GammaError::Config(format!("need 5 level similarities per sample, got {b}×{k}")));
        }
        let tau = store.bind(tape, self.tau);
        let s = tape.div_by(sims, tau)?;
        let p = tape.softmax(s, 1)?;
        let c = store.bind(tape, self.levels);
        tape.matmul_t(p, c)
    }

    /// `images` is `B × d`, `texts` stacks prompt features `P × d`, and
    /// `pick[5b..5b+5]` are the rows of `texts` sample `b` is scored against.
    pub fn score<'p>(
        &self,
        store: &'p ParamStore,
        tape: &mut Tape<'p>,
        images: Var,
        texts: Var,
        pick: &[usize],
    ) -> Result<Var> {
        let adapted = self.adapt(store, tape, images)?;
        let sims = tape.matmul_t(adapted, texts)?;
        let s = tape.pick_cols(sims, pick, 5)?;
        self.score_similarities(store, tape, s)
    }
}

/// One image to encode, optionally restricted to a subset of its patches.
#[derive(Clone, Copy, Debug)]
pub struct ImageInput<'a> {
    pub image: &'a Tensor,
    pub patches: Option<&'a [usize]>,
}

impl<'a> ImageInput<'a> {
    pub fn full(image: &'a Tensor) -> Self {
        Self { image, patches: None }
    }
}

#[derive(Clone, Debug)]
pub struct GammaModel {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub visual: Encoder,
    pub text: Encoder,
    pub head: ScoreHead,
    pub vocab: Vocabulary,
}

/// Deterministic construction from `seed`. Parameters are initialized from
/// their names, so models that differ only in MoAE settings share every
/// common weight.
pub fn build_model(config: &EncoderConfig, seed: u64) -> Result<GammaModel> {
    config.validate()?;
    let seed = seed::derive(seed, &["model"]);
    let vocab = Vocabulary::lexicon();
    let mut store = ParamStore::new();
    let patch = Affine::new(&mut store, "visual.patch", ParamGroup::Embeddings, config.channels, config.d, seed);
    let visual = Encoder::build(&mut store, "visual", config, Input::Patches(patch), config.patches(), seed)?;
    let tok = Embedding::new(&mut store, "text.tok", vocab.len(), config.d, seed);
    let text = Encoder::build(&mut store, "text", config, Input::Tokens(tok), config.max_prompt_len, seed)?;
    let head = ScoreHead::new(&mut store, config.d, config.tau, seed);
    store.set_trainable(&FreezePolicy::default());
    Ok(GammaModel {
        config: config.clone(),
        store,
        visual,
        text,
        head,
        vocab,
    })
}

impl GammaModel {
    pub fn set_trainable(&mut self, policy: &FreezePolicy) {
        self.store.set_trainable(policy);
    }

    /// Encodes a batch of images into `B × d` features.
    pub fn encode_images<'p>(&'p self, tape: &mut Tape<'p>, batch: &[ImageInput<'_>], ctx: &ForwardCtx) -> Result<Encoded> {
        let Input::Patches(embed) = &self.visual.input else {
            unreachable!("visual encoder takes patches")
        };
        let (p, c) = (self.config.patches(), self.config.channels);
        let mut rows = Vec::new();
        let mut pos = Vec::new();
        let mut lengths = Vec::with_capacity(batch.len());
        for item in batch {
            if item.image.rows() != p || item.image.cols() != c {
                return Err(GammaError::dim("encode_image", item.image.shape(), &[p, c]));
            }
            let before = pos.len();
            match item.patches {
                Some(idx) => pos.extend_from_slice(idx),
                None => pos.extend(0..p),
            }
            if pos.len() == before {
                return Err(GammaError::Input("image view selects no patches".into()));
            }
            for &i in &pos[before..] {
                if i >= p {
                    return Err(GammaError::Input(format!("patch index {i} out of range for {p} patches")));
                }
                rows.extend_from_slice(&item.image.data()[i * c..(i + 1) * c]);
            }
            lengths.push(pos.len() - before);
        }
        let segs = Segments::from_lengths(&lengths)?;
        let x = tape.constant(pos.len(), c, rows)?;
        let x = embed.forward(&self.store, tape, x)?;
        self.visual.run(&self.store, tape, x, &pos, segs, ctx)
    }

    pub fn encode_image<'p>(&'p self, tape: &mut Tape<'p>, image: &Tensor) -> Result<Var> {
        Ok(self.encode_images(tape, &[ImageInput::full(image)], &ForwardCtx::default())?.features)
    }

    /// Encodes token sequences into `S × d` features.
    pub fn encode_texts<'p>(&'p self, tape: &mut Tape<'p>, seqs: &[Vec<usize>], ctx: &ForwardCtx) -> Result<Encoded> {
        let Input::Tokens(embed) = &self.text.input else {
            unreachable!("text encoder takes tokens")
        };
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() || s.len() > self.config.max_prompt_len {
                return Err(GammaError::Input(format!(
                    "prompt of {} tokens; need 1..={}",
                    s.len(),
                    self.config.max_prompt_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= self.vocab.len()) {
                return Err(GammaError::Input(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.vocab.len()
                )));
            }
            ids.extend_from_slice(s);
            pos.extend(0..s.len());
            lengths.push(s.len());
        }
        let segs = Segments::from_lengths(&lengths)?;
        let x = embed.forward(&self.store, tape, &ids)?;
        self.text.run(&self.store, tape, x, &pos, segs, ctx)
    }

    pub fn encode_text<'p>(&'p self, tape: &mut Tape<'p>, tokens: &[usize]) -> Result<Var> {
        Ok(self.encode_texts(tape, &[tokens.to_vec()], &ForwardCtx::default())?.features)
    }

    pub fn tokenize_set(&self, set: &PromptSet) -> Vec<Vec<usize>> {
        set.levels().iter().map(|p| self.vocab.tokenize(p)).collect()
    }

    /// `5 × d` text features of one prompt set.
    pub fn encode_prompt_set<'p>(&'p self, tape: &mut Tape<'p>, set: &PromptSet) -> Result<Var> {
        Ok(self.encode_texts(tape, &self.tokenize_set(set), &ForwardCtx::default())?.features)
    }

    /// Forward-only score of one full image against one prompt set.
    pub fn predict_score(&self, image: &Tensor, set: &PromptSet) -> Result<f64> {
        let mut tape = Tape::new();
        let i = self.encode_image(&mut tape, image)?;
        let t = self.encode_prompt_set(&mut tape, set)?;
        let q = self.head.score(&self.store, &mut tape, i, t, &[0, 1, 2, 3, 4])?;
        Ok(tape.scalar_value(q))
    }

    pub fn sigma_values(&self) -> Vec<(&'static str, usize, f64)> {
        let mut out = Vec::new();
        for (name, enc) in [("visual", &self.visual), ("text", &self.text)] {
            for (i, l) in enc.moae_layers() {
                out.push((name, i, l.sigma_value(&self.store)));
            }
        }
        out
    }

    pub fn visual_has_trainable(&self) -> bool {
        self.store
            .params()
            .iter()
            .any(|p| p.name.starts_with("visual.") && p.tensor.requires_grad())
    }

    pub fn text_has_trainable(&self) -> bool {
        self.store
            .params()
            .iter()
            .any(|p| p.name.starts_with("text.") && p.tensor.requires_grad())
    }

    /// Copies the backbone (embeddings, attention, norms and feed-forward
    /// weights) from `src` by parameter name, then re-seeds every adaptive
    /// expert from its shared expert. Returns the number of tensors copied.
    pub fn load_backbone(&mut self, src: &ParamStore) -> Result<usize> {
        let backbone = |g: ParamGroup| {
            matches!(
                g,
                ParamGroup::Embeddings | ParamGroup::Attention | ParamGroup::Norms | ParamGroup::Ffn | ParamGroup::SharedExperts
            )
        };
        let ids: Vec<ParamId> = self.store.ids().collect();
        let mut copied = 0;
        for id in ids {
            let p = self.store.param(id);
            if !backbone(p.group) {
                continue;
            }
            let Some(sid) = src.find(&p.name) else { continue };
            let from = src.param(sid);
            if !backbone(from.group) {
                continue;
            }
            if from.tensor.shape() != p.tensor.shape() {
                return Err(GammaError::dim("load_backbone", p.tensor.shape(), from.tensor.shape()));
            }
            let values = from.tensor.data().to_vec();
            self.store.get_mut(id).data_mut().copy_from_slice(&values);
            copied += 1;
        }
        let layers: Vec<MoaeLayer> = self
            .visual
            .moae_layers()
            .chain(self.text.moae_layers())
            .map(|(_, l)| l.clone())
            .collect();
        for l in layers {
            l.init_adaptive_from_shared(&mut self.store)?;
        }
        Ok(copied)
    }

    /// Keeps `tau` at or above `floor`.
    pub fn clamp_tau(&mut self, floor: f64) {
        let t = &mut self.store.get_mut(self.head.tau).data_mut()[0];
        if !(*t >= floor) {
            *t = floor;
        }
    }

    /// Sets every MoAE merge factor to `value`.
    pub fn set_sigma(&mut self, value: f64) {
        let ids: Vec<ParamId> = self
            .visual
            .moae_layers()
            .chain(self.text.moae_layers())
            .map(|(_, l)| l.sigma)
            .collect();
        for id in ids {
            self.store.get_mut(id).data_mut()[0] = value;
        }
    }
}
