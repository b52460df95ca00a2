use super::{ParamGroup, ParamId, ParamStore, INIT_STD};
use crate::error::{GammaError, Result};
use crate::moae::{ForwardCtx, MoaeLayer, RouterInput};
use crate::tensor::{Segments, Tape, Var};

/// `y = x·Wᵀ + b` with `W` stored `d_out × d_in`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Affine {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize, seed: u64) -> Self {
        let weight = store.add_gaussian(&format!("{name}.weight"), group, d_out, d_in, INIT_STD, seed);
        let bias = store.add_filled(&format!("{name}.bias"), group, 1, d_out, 0.0);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'p>(&self, store: &'p ParamStore, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let b = store.bind(tape, self.bias);
        let y = tape.matmul_t(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_filled(&format!("{name}.gamma"), ParamGroup::Norms, 1, d, 1.0),
            beta: store.add_filled(&format!("{name}.beta"), ParamGroup::Norms, 1, d, 0.0),
        }
    }

    pub fn forward<'p>(&self, store: &'p ParamStore, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let g = store.bind(tape, self.gamma);
        let b = store.bind(tape, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Two affine maps with a rectifier between, `d → hidden → d`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub up: Affine,
    pub down: Affine,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, hidden: usize, seed: u64) -> Self {
        Self {
            up: Affine::new(store, &format!("{name}.up"), group, d, hidden, seed),
            down: Affine::new(store, &format!("{name}.down"), group, hidden, d, seed),
        }
    }

    pub fn forward<'p>(&self, store: &'p ParamStore, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let h = self.up.forward(store, tape, x)?;
        let h = tape.relu(h);
        self.down.forward(store, tape, h)
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.up.weight, self.up.bias, self.down.weight, self.down.bias]
    }
}

/// Multi-head self-attention with a fused query/key/value projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Affine,
    pub out: Affine,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, seed: u64) -> Self {
        Self {
            qkv: Affine::new(store, &format!("{name}.qkv"), ParamGroup::Attention, d, 3 * d, seed),
            out: Affine::new(store, &format!("{name}.out"), ParamGroup::Attention, d, d, seed),
            heads,
        }
    }

    pub fn forward<'p>(&self, store: &'p ParamStore, tape: &mut Tape<'p>, x: Var, segs: &Segments) -> Result<Var> {
        let qkv = self.qkv.forward(store, tape, x)?;
        let a = tape.attention(qkv, segs, self.heads)?;
        self.out.forward(store, tape, a)
    }
}

/// Lookup table `rows × d`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub d: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, d: usize, seed: u64) -> Self {
        Self {
            table: store.add_gaussian(name, ParamGroup::Embeddings, rows, d, INIT_STD, seed),
            rows,
            d,
        }
    }

    pub fn forward<'p>(&self, store: &'p ParamStore, tape: &mut Tape<'p>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.rows) {
            return Err(GammaError::Input(format!(
                "embedding index {bad} out of range for table of {} rows",
                self.rows
            )));
        }
        let t = store.bind(tape, self.table);
        tape.gather_rows(t, ids)
    }
}

/// Feed-forward sublayer of a block: the plain network or an MoAE layer
/// wrapped around it.
#[derive(Clone, Debug)]
pub enum Mlp {
    Plain(Ffn),
    Moae(MoaeLayer),
}

/// Pre-norm transformer block:
/// `h = x + attn(norm1(x))`, `y = h + mlp(norm2(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub d: usize,
}

impl TransformerBlock {
    /// Block with a plain FFN registered as `{name}.ffn`.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, seed: u64) -> Result<Self> {
        Self::build(store, name, d, heads, seed, |store| {
            Ok(Mlp::Plain(Ffn::new(store, &format!("{name}.ffn"), ParamGroup::Ffn, d, 4 * d, seed)))
        })
    }

    /// Block whose FFN is an MoAE layer with `experts` adaptive experts.
    pub fn new_moae(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        experts: usize,
        router_input: RouterInput,
        seed: u64,
    ) -> Result<Self> {
        Self::build(store, name, d, heads, seed, |store| {
            Ok(Mlp::Moae(MoaeLayer::new(store, name, d, 4 * d, experts, router_input, seed)?))
        })
    }

    fn build(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        seed: u64,
        mlp: impl FnOnce(&mut ParamStore) -> Result<Mlp>,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(GammaError::Config(format!(
                "width {d} is not divisible into {heads} heads"
            )));
        }
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), d);
        let attn = SelfAttention::new(store, &format!("{name}.attn"), d, heads, seed);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), d);
        let mlp = mlp(store)?;
        Ok(Self {
            norm1,
            attn,
            norm2,
            mlp,
            d,
        })
    }

    pub fn forward<'p>(&self, store: &'p ParamStore, tape: &mut Tape<'p>, x: Var, segs: &Segments) -> Result<Var> {
        self.forward_with(store, tape, x, segs, &ForwardCtx::default(), &mut Vec::new())
    }

    /// Forward pass that also records the router output of an MoAE sublayer
    /// into `routes`.
    pub fn forward_with<'p>(
        &self,
        store: &'p ParamStore,
        tape: &mut Tape<'p>,
        x: Var,
        segs: &Segments,
        ctx: &ForwardCtx,
        routes: &mut Vec<Var>,
    ) -> Result<Var> {
        let (rows, cols) = tape.shape(x);
        if cols != self.d {
            return Err(GammaError::dim("block_forward", &[rows, cols], &[rows, self.d]));
        }
        let n1 = self.norm1.forward(store, tape, x)?;
        let a = self.attn.forward(store, tape, n1, segs)?;
        let h = tape.add(x, a)?;
        let n2 = self.norm2.forward(store, tape, h)?;
        let m = match &self.mlp {
            Mlp::Plain(ffn) => ffn.forward(store, tape, n2)?,
            Mlp::Moae(layer) => {
                let out = layer.forward(store, tape, n2, segs, ctx)?;
                routes.push(out.weights);
                out.output
            }
        };
        tape.add(h, m)
    }

    pub fn moae(&self) -> Option<&MoaeLayer> {
        match &self.mlp {
            Mlp::Moae(l) => Some(l),
            Mlp::Plain(_) => None,
        }
    }
}
