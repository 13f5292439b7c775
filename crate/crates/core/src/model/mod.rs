//! Loan screening network: dual-head initial encoder with a learned
//! positional table, a causal sequence backbone (transformer stack or a
//! recurrent cell), a demographic MLP, fusion onto the unit hypersphere, a
//! label predictor and a domain classifier behind gradient reversal.

mod checkpoint;
mod encoder;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor};
pub use encoder::{
    attention_block, encode_sequence, initial_encode, recurrent_encode, transformer_layer,
    BackboneVars, InitialEncoderVars, RecurrentVars, TransformerLayerVars,
};
pub use forward::{
    encode_demographics, fuse, mlp_head, BoundParams, Dropout, ForwardOutput, MlpVars, ModelInputs,
    Mode,
};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DEMOGRAPHIC_WIDTH, SEQUENCE_WIDTH};
use crate::rng::seeded;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("observability flag must be 0 or 1, got {0}")]
    Observability(f64),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Transformer,
    Rnn,
    Lstm,
    Gru,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 4] = [Self::Transformer, Self::Rnn, Self::Lstm, Self::Gru];

    pub fn name(self) -> &'static str {
        match self {
            Self::Transformer => "transformer",
            Self::Rnn => "rnn",
            Self::Lstm => "lstm",
            Self::Gru => "gru",
        }
    }

    /// Number of stacked gate blocks in the recurrent weight matrices.
    pub fn gates(self) -> usize {
        match self {
            Self::Transformer => 0,
            Self::Rnn => 1,
            Self::Lstm => 4,
            Self::Gru => 3,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transformer" => Ok(Self::Transformer),
            "rnn" => Ok(Self::Rnn),
            "lstm" => Ok(Self::Lstm),
            "gru" => Ok(Self::Gru),
            other => Err(ModelError::Config {
                field: "backbone",
                reason: format!("unknown backbone `{other}` (expected transformer, rnn, lstm or gru)"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_transformer_layers: usize,
    pub feedforward_dim: usize,
    pub dropout_keep_prob: f64,
    /// Rows of the positional table; longer histories keep their most
    /// recent loans.
    pub max_sequence_length: usize,
    pub backbone: BackboneKind,
    pub n_demographic_features: usize,
    pub grl_lambda: f64,
    pub causal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            n_transformer_layers: 2,
            feedforward_dim: 64,
            dropout_keep_prob: 0.9,
            max_sequence_length: 32,
            backbone: BackboneKind::Transformer,
            n_demographic_features: DEMOGRAPHIC_WIDTH,
            grl_lambda: 1.0,
            causal: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| {
            Err(ModelError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.hidden_dim == 0 {
            return bad("hidden_dim", "must be positive");
        }
        if self.feedforward_dim == 0 {
            return bad("feedforward_dim", "must be positive");
        }
        if !(self.dropout_keep_prob > 0.0 && self.dropout_keep_prob <= 1.0) {
            return bad("dropout_keep_prob", "must lie in (0, 1]");
        }
        if self.max_sequence_length == 0 {
            return bad("max_sequence_length", "must be positive");
        }
        if self.n_demographic_features == 0 {
            return bad("n_demographic_features", "must be positive");
        }
        if !(self.grl_lambda >= 0.0 && self.grl_lambda.is_finite()) {
            return bad("grl_lambda", "must be a finite value >= 0");
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden_dim;
        let f = self.feedforward_dim;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("encoder.w0".into(), vec![SEQUENCE_WIDTH, h]),
            ("encoder.b0".into(), vec![h]),
            ("encoder.w1".into(), vec![SEQUENCE_WIDTH, h]),
            ("encoder.b1".into(), vec![h]),
            ("encoder.positional".into(), vec![self.max_sequence_length, h]),
        ];
        match self.backbone {
            BackboneKind::Transformer => {
                for l in 0..self.n_transformer_layers {
                    let p = |s: &str| format!("layer{l}.{s}");
                    out.extend([
                        (p("wq"), vec![h, h]),
                        (p("wk"), vec![h, h]),
                        (p("wv"), vec![h, h]),
                        (p("wo"), vec![h, h]),
                        (p("bo"), vec![h]),
                        (p("norm1.gain"), vec![h]),
                        (p("norm1.bias"), vec![h]),
                        (p("ff.w1"), vec![h, f]),
                        (p("ff.b1"), vec![f]),
                        (p("ff.w2"), vec![f, h]),
                        (p("ff.b2"), vec![h]),
                        (p("norm2.gain"), vec![h]),
                        (p("norm2.bias"), vec![h]),
                    ]);
                }
            }
            kind => {
                let g = kind.gates() * h;
                out.extend([
                    ("recurrent.w_x".into(), vec![h, g]),
                    ("recurrent.b_x".into(), vec![g]),
                    ("recurrent.w_h".into(), vec![h, g]),
                    ("recurrent.b_h".into(), vec![g]),
                ]);
            }
        }
        for (head, d_in, d_out) in [
            ("demographic", self.n_demographic_features, h),
            ("label", h, 2),
            ("domain", h, 2),
        ] {
            out.extend([
                (format!("{head}.w1"), vec![d_in, h]),
                (format!("{head}.b1"), vec![h]),
                (format!("{head}.w2"), vec![h, d_out]),
                (format!("{head}.b2"), vec![d_out]),
            ]);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameter count of `ModelConfig::default()`.
pub const DEFAULT_PARAMETER_COUNT: usize = 66_180;

/// Model parameters with their names. Construction is a pure function of
/// `(config, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Model {
    /// Weights are uniform in `±1/sqrt(fan_in)`, biases and norm shifts are
    /// zero, norm gains are one, and the positional table is `N(0, 0.02²)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.parameter_layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with("positional") {
                (0..n)
                    .map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            } else if shape.len() == 2 {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Self::from_parts(config, names, params)
    }

    pub fn from_parts(config: ModelConfig, names: Vec<String>, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != names.len() || names.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters for this config, found {}",
                layout.len(),
                names.len()
            )));
        }
        for ((name, shape), (n, p)) in layout.iter().zip(names.iter().zip(&params)) {
            if name != n || shape.as_slice() != p.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{n}` {:?} does not match expected `{name}` {shape:?}",
                    p.shape()
                )));
            }
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}
