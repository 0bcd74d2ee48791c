use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor plus its RMSprop running mean of squared gradients.
///
/// Non-trainable entries (batch-norm running statistics) live in the same
/// store so they travel with checkpoints, but the optimizer skips them.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub path: String,
    pub tensor: Tensor,
    pub accumulator: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, path: String, tensor: Tensor, trainable: bool) -> ParamId {
        assert!(
            self.find(&path).is_none(),
            "duplicate parameter path {path}"
        );
        let accumulator = Tensor::zeros(tensor.shape());
        self.params.push(Parameter {
            path,
            tensor,
            accumulator,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add(&mut self, path: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(path.into(), tensor, true)
    }

    /// Registers non-trainable state.
    pub fn add_buffer(&mut self, path: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(path.into(), tensor, false)
    }

    /// Weight initialized uniformly in `±sqrt(1/fan_in)`.
    pub fn add_fan_in<R: Rng + ?Sized>(
        &mut self,
        path: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        self.add(path, Tensor::uniform(shape, bound, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.path == path).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Overwrites values (and accumulators) from `other`, matching by path.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.path == p.path)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", p.path)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::Dimension {
                    op: "load parameter",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: src.tensor.shape().to_vec(),
                });
            }
            p.tensor = src.tensor.clone();
            p.accumulator = src.accumulator.clone();
        }
        Ok(())
    }

    /// Applies batch-norm running-statistic updates recorded during a
    /// train-mode forward pass.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            let m = u.momentum;
            for (r, b) in self.params[u.running_mean.0]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&u.batch_mean)
            {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.params[u.running_var.0]
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&u.batch_var)
            {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

/// Pending running-statistics update from one batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}
