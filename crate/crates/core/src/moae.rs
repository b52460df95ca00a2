//! Mixture of Assessment Experts: a frozen shared FFN plus `n` tunable
//! copies mixed by a per-token softmax router and merged through a scalar
//! gate `sigma`:
//!
//! `y = shared(x) + sigma * Σ_i softmax(W x)_i * expert_i(x)`

use serde::{Deserialize, Serialize};

use crate::error::{GammaError, Result};
use crate::nn::{Ffn, ParamGroup, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Segments, Tape, Var};

/// What the router looks at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterInput {
    /// Each token's own (normalized) hidden vector.
    #[default]
    Token,
    /// The mean over the tokens of the sequence, shared by all its tokens.
    Pooled,
}

/// Per-evaluation options for MoAE layers. A default context routes
/// normally; [`ForwardCtx::force_single_expert`] pins every router to one
/// expert for as long as that context is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardCtx {
    forced: Option<usize>,
}

impl ForwardCtx {
    pub fn force_single_expert(layer: &MoaeLayer, index: usize) -> Result<Self> {
        Self::forcing(index, layer.n)
    }

    /// Pins expert `index` in models with `n` experts per layer.
    pub fn forcing(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(GammaError::Config(format!(
                "expert index {index} out of range for {n} experts"
            )));
        }
        Ok(Self { forced: Some(index) })
    }

    pub fn forced_expert(&self) -> Option<usize> {
        self.forced
    }
}

#[derive(Clone, Debug)]
pub struct MoaeLayer {
    pub shared: Ffn,
    pub adaptive: Vec<Ffn>,
    /// `n × d` router matrix.
    pub router: ParamId,
    /// `1 × 1` merge factor.
    pub sigma: ParamId,
    pub n: usize,
    pub d: usize,
    pub router_input: RouterInput,
}

#[derive(Clone, Copy, Debug)]
pub struct MoaeOutput {
    pub output: Var,
    /// `tokens × n` mixture weights.
    pub weights: Var,
}

impl MoaeLayer {
    /// Builds the layer under `name`. The shared expert is registered as
    /// `{name}.ffn`, the same name a plain block uses for its FFN, so a model
    /// with and without MoAE gets identical shared weights from one seed.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        n: usize,
        router_input: RouterInput,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(GammaError::Config("an MoAE layer needs at least one expert".into()));
        }
        let shared = Ffn::new(store, &format!("{name}.ffn"), ParamGroup::SharedExperts, d, hidden, seed);
        let adaptive = (0..n)
            .map(|i| Ffn::new(store, &format!("{name}.ffn.expert{i}"), ParamGroup::AdaptiveExperts, d, hidden, seed))
            .collect();
        let router = store.add_gaussian(&format!("{name}.ffn.router"), ParamGroup::Router, n, d, INIT_STD, seed);
        let sigma = store.add_filled(&format!("{name}.ffn.sigma"), ParamGroup::Sigma, 1, 1, 0.0);
        let layer = Self {
            shared,
            adaptive,
            router,
            sigma,
            n,
            d,
            router_input,
        };
        layer.init_adaptive_from_shared(store)?;
        Ok(layer)
    }

    /// Overwrites every adaptive expert with a copy of the shared expert.
    pub fn init_adaptive_from_shared(&self, store: &mut ParamStore) -> Result<()> {
        for e in &self.adaptive {
            for (src, dst) in self.shared.ids().into_iter().zip(e.ids()) {
                store.copy_values(src, dst)?;
            }
        }
        Ok(())
    }

    pub fn sigma_value(&self, store: &ParamStore) -> f64 {
        store.get(self.sigma).data()[0]
    }

    fn check_width(&self, tape: &Tape<'_>, x: Var, op: &'static str) -> Result<()> {
        let (r, c) = tape.shape(x);
        if c != self.d {
            return Err(GammaError::dim(op, &[r, c], &[r, self.d]));
        }
        Ok(())
    }

    /// Router weights `softmax(W x)` per token, or a constant one-hot matrix
    /// when the context forces an expert.
    pub fn route<'p>(
        &self,
        store: &'p ParamStore,
        tape: &mut Tape<'p>,
        x: Var,
        segs: &Segments,
        ctx: &ForwardCtx,
    ) -> Result<Var> {
        self.check_width(tape, x, "route")?;
        let rows = tape.shape(x).0;
        if let Some(i) = ctx.forced {
            if i >= self.n {
                return Err(GammaError::Config(format!(
                    "expert index {i} out of range for {} experts",
                    self.n
                )));
            }
            let mut w = vec![0.0; rows * self.n];
            w.iter_mut().skip(i).step_by(self.n).for_each(|v| *v = 1.0);
            return tape.constant(rows, self.n, w);
        }
        let input = match self.router_input {
            RouterInput::Token => x,
            RouterInput::Pooled => {
                let m = tape.segment_mean(x, segs)?;
                tape.segment_expand(m, segs)?
            }
        };
        let w = store.bind(tape, self.router);
        let logits = tape.matmul_t(input, w)?;
        tape.softmax(logits, 1)
    }

    /// `Σ_i weights[:, i] ⊙ expert_i(x)`.
    pub fn adaptive_mixture<'p>(
        &self,
        store: &'p ParamStore,
        tape: &mut Tape<'p>,
        x: Var,
        weights: Var,
    ) -> Result<Var> {
        let outs = self
            .adaptive
            .iter()
            .map(|e| e.forward(store, tape, x))
            .collect::<Result<Vec<_>>>()?;
        tape.mix(weights, &outs)
    }

    pub fn forward<'p>(
        &self,
        store: &'p ParamStore,
        tape: &mut Tape<'p>,
        x: Var,
        segs: &Segments,
        ctx: &ForwardCtx,
    ) -> Result<MoaeOutput> {
        self.check_width(tape, x, "moae_forward")?;
        let shared = self.shared.forward(store, tape, x)?;
        let weights = self.route(store, tape, x, segs, ctx)?;
        let mixed = match ctx.forced {
            // one-hot weights select a single expert; skip the others
            Some(i) => self.adaptive[i].forward(store, tape, x)?,
            None => self.adaptive_mixture(store, tape, x, weights)?,
        };
        let sigma = store.bind(tape, self.sigma);
        let gated = tape.scale_by(mixed, sigma)?;
        let output = tape.add(shared, gated)?;
        Ok(MoaeOutput { output, weights })
    }
}
