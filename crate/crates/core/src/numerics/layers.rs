use rand::Rng;

use super::params::{ParamId, ParamStore, StatUpdate};
use super::tape::{Mode, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Fully connected layer `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_fan_in(format!("{path}.weight"), &[in_dim, out_dim], in_dim, rng);
        let bias = store.add(format!("{path}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        linear_forward(tape, x, w, b)
    }
}

/// `input·weights + bias` recorded on the tape.
pub fn linear_forward(tape: &mut Tape, input: Var, weights: Var, bias: Var) -> Result<Var> {
    let xw = tape.matmul(input, weights)?;
    tape.add_row(xw, bias)
}

/// Bias-free 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let kernel = store.add_fan_in(
            format!("{path}.kernel"),
            &[c_out, c_in, k, k],
            c_in * k * k,
            rng,
        );
        Conv2d {
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        conv2d_forward(tape, x, k, self.stride, self.padding)
    }
}

pub fn conv2d_forward(
    tape: &mut Tape,
    input: Var,
    kernels: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    tape.conv2d(input, kernels, stride, padding)
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{path}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{path}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(
                format!("{path}.running_mean"),
                Tensor::zeros(&[channels]),
            ),
            running_var: store.add_buffer(
                format!("{path}.running_var"),
                Tensor::full(&[channels], 1.0),
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, mean, var) = batchnorm_forward(tape, x, gamma, beta, None)?;
                tape.record_stat_update(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                    momentum: BATCHNORM_MOMENTUM,
                });
                Ok(y)
            }
            Mode::Eval => {
                let (y, _, _) = batchnorm_forward(
                    tape,
                    x,
                    gamma,
                    beta,
                    Some((
                        store.get(self.running_mean).data(),
                        store.get(self.running_var).data(),
                    )),
                )?;
                Ok(y)
            }
        }
    }
}

/// Batch normalization; `running = None` selects train mode.
pub fn batchnorm_forward(
    tape: &mut Tape,
    input: Var,
    gamma: Var,
    beta: Var,
    running: Option<(&[f64], &[f64])>,
) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    tape.batch_norm(input, gamma, beta, BATCHNORM_EPS, running)
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Result of an attention forward pass.
pub struct AttentionOutput {
    pub output: Var,
    /// The fused softmax node; see [`Tape::attention_weights`].
    pub scores: Var,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        path: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{path}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{path}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{path}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{path}.output"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `query` is `[batch·n_q, dim]`, `key_value` is `[batch·n_kv, dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        key_value: Var,
        batch: usize,
    ) -> Result<AttentionOutput> {
        let q = self.query.forward(tape, store, query)?;
        let k = self.key.forward(tape, store, key_value)?;
        let v = self.value.forward(tape, store, key_value)?;
        let scores = tape.attention(q, k, v, batch, self.heads)?;
        let output = self.output.forward(tape, store, scores)?;
        Ok(AttentionOutput { output, scores })
    }
}

/// Single-sequence multi-head attention: `query [n_q, d]` over `key_value [n_kv, d]`.
pub fn multihead_attention(
    tape: &mut Tape,
    store: &ParamStore,
    query: Var,
    key_value: Var,
    heads: usize,
    params: &MultiHeadAttention,
) -> Result<AttentionOutput> {
    if heads != params.heads {
        return Err(Error::Config(format!(
            "attention built for {} heads, called with {heads}",
            params.heads
        )));
    }
    params.forward(tape, store, query, key_value, 1)
}
