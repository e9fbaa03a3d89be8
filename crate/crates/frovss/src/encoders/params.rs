//! Named parameter storage shared by the encoders and the decoder.
//!
//! Parameters are registered in a fixed declaration order (which is
//! also the checkpoint block order) and carry the role and encoder
//! depth the fine-tuning policy needs.

use ndarray::Array2;

use crate::rng::hash_f64s;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Attention,
    Positional,
    Mlp,
    Norm,
    Decoder,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    /// Encoder depth, 1..=L; 0 for parameters outside the layer stack.
    pub layer_index: usize,
    pub value: Array2<f64>,
    /// Set by the fine-tuning policy; text parameters stay frozen.
    pub trainable: bool,
    /// Per-parameter learning rate set by the policy.
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        role: ParamRole,
        layer_index: usize,
        value: Array2<f64>,
    ) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            role,
            layer_index,
            value,
            trainable: false,
            lr: 0.0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_policy(&mut self, id: ParamId, trainable: bool, lr: f64) {
        let p = &mut self.params[id.0];
        p.trainable = trainable;
        p.lr = lr;
    }

    /// Push every parameter onto a tape; trainable ones as leaves that
    /// collect gradients, the rest as constants.
    pub fn stage(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Push every parameter as a constant (inference path: no
    /// gradients recorded anywhere).
    pub fn stage_frozen(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect()
    }

    /// Ids of parameters with one of the given roles, in declaration
    /// order.
    pub fn ids_with_roles(&self, roles: &[ParamRole]) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| roles.contains(&p.role))
            .map(|(id, _)| id)
            .collect()
    }

    /// Hash of all parameter values with the given roles; used by the
    /// freezing invariants.
    pub fn hash_roles(&self, roles: &[ParamRole]) -> String {
        let mut values = Vec::new();
        for (_, p) in self.iter() {
            if roles.contains(&p.role) {
                values.extend(p.value.iter().copied());
            }
        }
        hash_f64s(&values)
    }

    pub fn total_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Roles that live in the image encoder.
pub const ENCODER_ROLES: [ParamRole; 4] = [
    ParamRole::Attention,
    ParamRole::Positional,
    ParamRole::Mlp,
    ParamRole::Norm,
];
