//! The interface shared by every trainable channel model.

use serde::{Deserialize, Serialize};

use crate::channel::ChannelMatrix;
use crate::error::Result;
use crate::math::Vec3;

/// One channel query: transmitter and receiver reference positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub tx: Vec3,
    pub rx: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RendererKind {
    Ngrf,
    Cs1,
    Cs2,
    Mlp,
}

impl RendererKind {
    pub fn tag(self) -> &'static str {
        match self {
            RendererKind::Ngrf => "ngrf",
            RendererKind::Cs1 => "cs1",
            RendererKind::Cs2 => "cs2",
            RendererKind::Mlp => "mlp",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "ngrf" => Some(RendererKind::Ngrf),
            "cs1" => Some(RendererKind::Cs1),
            "cs2" => Some(RendererKind::Cs2),
            "mlp" => Some(RendererKind::Mlp),
            _ => None,
        }
    }
}

impl std::fmt::Display for RendererKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    /// Gaussian centers: own learning rate schedule, frozen after the cutoff.
    Position,
    Standard,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub kind: GroupKind,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, kind: GroupKind) -> Self {
        ParamGroup { name: name.into(), kind }
    }
}

/// Forward pass output with everything the loss needs.
pub struct Forward<C> {
    pub channels: Vec<ChannelMatrix>,
    /// Per-Gaussian activation, averaged over the batch. Empty for models without one.
    pub activations: Vec<f64>,
    /// Per-Gaussian scales, `N×3`. Empty for models without them.
    pub scales: Vec<f64>,
    pub cache: C,
}

/// Named `f64` tensor for checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedArray { name: name.into(), shape, data }
    }
}

/// A differentiable channel model the trainer can optimize.
pub trait FieldModel: Clone + Send + Sync {
    type Cache;

    fn kind(&self) -> RendererKind;

    /// `(N_t, N_r)`
    fn dims(&self) -> (usize, usize);

    fn forward(&self, queries: &[Query]) -> Result<Forward<Self::Cache>>;

    fn predict(&self, queries: &[Query]) -> Result<Vec<ChannelMatrix>> {
        Ok(self.forward(queries)?.channels)
    }

    /// Gradients for every group in [`FieldModel::groups`] order. `grad_activations`
    /// and `grad_scales` match the shapes of [`Forward::activations`] and [`Forward::scales`].
    fn backward(
        &self,
        cache: &Self::Cache,
        grad_h: &[ChannelMatrix],
        grad_activations: &[f64],
        grad_scales: &[f64],
    ) -> Result<Vec<Vec<f64>>>;

    fn groups(&self) -> Vec<ParamGroup>;

    fn params(&self) -> Vec<&[f64]>;

    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    /// Projection applied after each optimizer step.
    fn after_step(&mut self) {}

    /// Fixed output multiplier fitted to the training data. Models that work in
    /// physical units ignore it.
    fn set_output_scale(&mut self, _scale: f64) {}

    /// JSON description plus parameter tensors.
    fn export(&self) -> (serde_json::Value, Vec<NamedArray>);
}

/// Groups query indices by transmitter position, in order of first appearance.
pub fn group_by_tx(queries: &[Query]) -> Vec<(Vec3, Vec<usize>)> {
    let mut groups: Vec<(Vec3, Vec<usize>)> = Vec::new();
    for (k, q) in queries.iter().enumerate() {
        let key = q.tx.to_array().map(f64::to_bits);
        match groups.iter_mut().find(|(t, _)| t.to_array().map(f64::to_bits) == key) {
            Some((_, idx)) => idx.push(k),
            None => groups.push((q.tx, vec![k])),
        }
    }
    groups
}

/// Edit counter used to detect stale forward caches. Equality ignores it, so a
/// model compares equal to its saved and reloaded copy.
#[derive(Clone, Copy, Debug, Default)]
pub struct Revision(u64);

impl Revision {
    pub(crate) fn bump(&mut self) {
        self.0 += 1;
    }

    pub(crate) fn get(self) -> u64 {
        self.0
    }
}

impl PartialEq for Revision {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
