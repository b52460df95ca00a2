//! Parameters, freeze policies, transformer building blocks and the
//! checkpoint format.

mod checkpoint;
mod layers;

pub use checkpoint::{read_checkpoint, records_to_bytes, write_checkpoint, CheckpointRecord};
pub use layers::{Affine, Embedding, Ffn, LayerNorm, Mlp, SelfAttention, TransformerBlock};

use std::collections::BTreeSet;
use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GammaError, Result};
use crate::seed;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Coarse parameter families; freeze policies and checkpoint diffs work at
/// this granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Embeddings,
    Attention,
    Norms,
    /// Feed-forward networks of layers without an MoAE block.
    Ffn,
    SharedExperts,
    AdaptiveExperts,
    Router,
    Sigma,
    Adapter,
    LevelWeights,
    Temperature,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 11] = [
        ParamGroup::Embeddings,
        ParamGroup::Attention,
        ParamGroup::Norms,
        ParamGroup::Ffn,
        ParamGroup::SharedExperts,
        ParamGroup::AdaptiveExperts,
        ParamGroup::Router,
        ParamGroup::Sigma,
        ParamGroup::Adapter,
        ParamGroup::LevelWeights,
        ParamGroup::Temperature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embeddings => "embeddings",
            ParamGroup::Attention => "attention",
            ParamGroup::Norms => "norms",
            ParamGroup::Ffn => "ffn",
            ParamGroup::SharedExperts => "shared-experts",
            ParamGroup::AdaptiveExperts => "adaptive-experts",
            ParamGroup::Router => "router",
            ParamGroup::Sigma => "sigma",
            ParamGroup::Adapter => "adapter",
            ParamGroup::LevelWeights => "C",
            ParamGroup::Temperature => "tau",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| GammaError::Config(format!("unknown parameter group `{name}`")))
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which parameter groups the optimizer may touch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    trainable: BTreeSet<ParamGroup>,
}

impl Default for FreezePolicy {
    /// Only the MoAE blocks and the score head learn; the encoders, including
    /// every shared expert, stay frozen.
    fn default() -> Self {
        Self::trainable([
            ParamGroup::AdaptiveExperts,
            ParamGroup::Router,
            ParamGroup::Sigma,
            ParamGroup::Adapter,
            ParamGroup::LevelWeights,
            ParamGroup::Temperature,
        ])
    }
}

impl FreezePolicy {
    pub fn trainable(groups: impl IntoIterator<Item = ParamGroup>) -> Self {
        Self {
            trainable: groups.into_iter().collect(),
        }
    }

    pub fn freeze_all() -> Self {
        Self {
            trainable: BTreeSet::new(),
        }
    }

    /// Parses group names; an empty list means the default policy.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.is_empty() {
            return Ok(Self::default());
        }
        let groups = names
            .iter()
            .map(|n| ParamGroup::from_name(n.as_ref()))
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(Self { trainable: groups })
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.trainable.contains(&group)
    }

    pub fn groups(&self) -> impl Iterator<Item = ParamGroup> + '_ {
        self.trainable.iter().copied()
    }

    pub fn with(mut self, group: ParamGroup) -> Self {
        self.trainable.insert(group);
        self
    }

    pub fn without(mut self, group: ParamGroup) -> Self {
        self.trainable.remove(&group);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Flat, ordered collection of every parameter in a model. Layers refer to
/// entries by [`ParamId`]; the order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, group, tensor });
        ParamId(self.params.len() - 1)
    }

    /// Adds a `rows × cols` parameter drawn from N(0, std²). The generator is
    /// keyed by `(seed, name)` so the same name always gets the same values.
    pub fn add_gaussian(
        &mut self,
        name: &str,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        std: f64,
        seed: u64,
    ) -> ParamId {
        let mut rng = seed::rng(seed, &["init", name]);
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        self.add(name, group, Tensor::matrix(rows, cols, data).expect("positive dims"))
    }

    pub fn add_filled(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(
            name,
            group,
            Tensor::matrix(rows, cols, vec![value; rows * cols]).expect("positive dims"),
        )
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.param(id).group == group).collect()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad())
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Puts a parameter on the tape (memoized per tape).
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, id: ParamId) -> Var {
        tape.bind(id.0, &self.params[id.0].tensor)
    }

    /// Sets every parameter's trainable flag from its group.
    pub fn set_trainable(&mut self, policy: &FreezePolicy) {
        for p in &mut self.params {
            p.tensor.set_requires_grad(policy.is_trainable(p.group));
        }
    }

    /// Moves tape gradients onto the trainable tensors; trainable parameters
    /// the loss did not reach get a zero gradient.
    pub fn assign_grads(&mut self, grads: &mut Gradients) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let g = grads.take_key(i).unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
            p.tensor.set_grad(Some(g)).expect("gradient length matches parameter");
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            if p.tensor.requires_grad() {
                p.tensor.set_grad(None).expect("clearing never fails");
            }
        }
    }

    /// Overwrites `dst`'s values with `src`'s (same shape required).
    pub fn copy_values(&mut self, src: ParamId, dst: ParamId) -> Result<()> {
        if self.get(src).shape() != self.get(dst).shape() {
            return Err(GammaError::dim(
                "copy_values",
                self.get(src).shape(),
                self.get(dst).shape(),
            ));
        }
        let values = self.get(src).data().to_vec();
        self.get_mut(dst).data_mut().copy_from_slice(&values);
        Ok(())
    }
}
