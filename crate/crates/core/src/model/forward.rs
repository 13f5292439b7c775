use super::encoder::{
    encode_sequence, initial_encode, BackboneVars, InitialEncoderVars, RecurrentVars,
    TransformerLayerVars,
};
use super::{BackboneKind, Model, Result};
use crate::data::Batch;
use crate::rng::derive_seed;
use crate::tensor::{DropoutMask, Graph, SeqLayout, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Training mode; every dropout site draws its mask from this seed.
    Train { seed: u64 },
}

impl Mode {
    pub fn is_training(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Dropout settings for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub mode: Mode,
    pub keep_prob: f64,
}

impl Dropout {
    /// Applies a fresh mask for `site`; the identity in evaluation mode.
    pub fn apply(&self, g: &mut Graph, x: Var, site: u64) -> Result<Var> {
        match self.mode {
            Mode::Eval => Ok(x),
            Mode::Train { seed } => {
                let shape = g.value(x).shape().to_vec();
                let mask = DropoutMask::new(derive_seed(seed, site), &shape, self.keep_prob)?;
                Ok(g.dropout(x, &mask, true)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// `relu(x W1 + b1) W2 + b2`, with optional dropout on the hidden layer.
pub fn mlp_head(g: &mut Graph, x: Var, p: &MlpVars, hidden_dropout: Option<(&Dropout, u64)>) -> Result<Var> {
    let a = g.matmul(x, p.w1)?;
    let a = g.add_row(a, p.b1)?;
    let mut a = g.relu(a);
    if let Some((d, site)) = hidden_dropout {
        a = d.apply(g, a, site)?;
    }
    let o = g.matmul(a, p.w2)?;
    Ok(g.add_row(o, p.b2)?)
}

/// Demographic encoder: `[B, n_features] -> [B, hidden]`.
pub fn encode_demographics(g: &mut Graph, d: Var, p: &MlpVars, dropout: &Dropout) -> Result<Var> {
    mlp_head(g, d, p, Some((dropout, 30)))
}

/// Element-wise sum projected onto the unit sphere, row by row.
pub fn fuse(g: &mut Graph, f_a: Var, f_d: Var) -> Result<Var> {
    let s = g.add(f_a, f_d)?;
    Ok(g.l2_normalize_rows(s)?)
}

/// Graph handles of every model parameter.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub all: Vec<Var>,
    pub encoder: InitialEncoderVars,
    pub backbone: BackboneVars,
    pub demographic: MlpVars,
    pub label: MlpVars,
    pub domain: MlpVars,
}

/// Model inputs already placed on a graph. Inputs are usually constants;
/// tests make them leaves to inspect input gradients.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    /// `[N, 6]` packed loan features.
    pub sequences: Var,
    pub observed: Vec<f64>,
    pub positions: Vec<usize>,
    pub layout: SeqLayout,
    /// `[B, n_features]`.
    pub demographics: Var,
}

impl ModelInputs {
    pub fn from_batch(g: &mut Graph, batch: &Batch, requires_grad: bool) -> Self {
        Self {
            sequences: g.leaf(batch.packed_sequences(), requires_grad),
            observed: batch.packed(&batch.observed),
            positions: batch.packed(&batch.positions),
            layout: batch.layout(),
            demographics: g.leaf(batch.demographics_tensor(), requires_grad),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[N, hidden]` unit-norm fused features, one row per packed loan.
    pub features: Var,
    /// `[N, 2]`; column 1 is repayment.
    pub label_logits: Var,
    pub domain_logits: Var,
    pub sequence_features: Var,
    pub demographic_features: Var,
}

impl Model {
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let all: Vec<Var> = self.params().iter().map(|t| g.param(t.clone())).collect();
        let v = |name: &str| all[self.position(name).unwrap_or_else(|| panic!("missing {name}"))];
        let encoder = InitialEncoderVars {
            w0: v("encoder.w0"),
            b0: v("encoder.b0"),
            w1: v("encoder.w1"),
            b1: v("encoder.b1"),
            positional: v("encoder.positional"),
        };
        let backbone = match self.config().backbone {
            BackboneKind::Transformer => BackboneVars::Transformer(
                (0..self.config().n_transformer_layers)
                    .map(|l| {
                        let p = |s: &str| v(&format!("layer{l}.{s}"));
                        TransformerLayerVars {
                            wq: p("wq"),
                            wk: p("wk"),
                            wv: p("wv"),
                            wo: p("wo"),
                            bo: p("bo"),
                            norm1_gain: p("norm1.gain"),
                            norm1_bias: p("norm1.bias"),
                            ff_w1: p("ff.w1"),
                            ff_b1: p("ff.b1"),
                            ff_w2: p("ff.w2"),
                            ff_b2: p("ff.b2"),
                            norm2_gain: p("norm2.gain"),
                            norm2_bias: p("norm2.bias"),
                        }
                    })
                    .collect(),
            ),
            kind => BackboneVars::Recurrent(RecurrentVars {
                kind,
                w_x: v("recurrent.w_x"),
                b_x: v("recurrent.b_x"),
                w_h: v("recurrent.w_h"),
                b_h: v("recurrent.b_h"),
            }),
        };
        let mlp = |head: &str| MlpVars {
            w1: v(&format!("{head}.w1")),
            b1: v(&format!("{head}.b1")),
            w2: v(&format!("{head}.w2")),
            b2: v(&format!("{head}.b2")),
        };
        let (demographic, label, domain) = (mlp("demographic"), mlp("label"), mlp("domain"));
        BoundParams {
            all,
            encoder,
            backbone,
            demographic,
            label,
            domain,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, batch: &Batch, mode: Mode) -> Result<ForwardOutput> {
        let inputs = ModelInputs::from_batch(g, batch, false);
        self.forward_inputs(g, p, &inputs, mode)
    }

    pub fn forward_inputs(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        inputs: &ModelInputs,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let cfg = self.config();
        let dropout = Dropout {
            mode,
            keep_prob: cfg.dropout_keep_prob,
        };
        let h = initial_encode(g, inputs.sequences, &inputs.observed, &inputs.positions, &p.encoder)?;
        let h = dropout.apply(g, h, 1)?;
        let f_a = encode_sequence(g, h, &p.backbone, &inputs.layout, cfg.causal, &dropout)?;
        let f_d = encode_demographics(g, inputs.demographics, &p.demographic, &dropout)?;
        let f_d_rows = g.gather_rows(f_d, &inputs.layout.row_owner())?;
        let features = fuse(g, f_a, f_d_rows)?;
        let label_logits = mlp_head(g, features, &p.label, None)?;
        let reversed = g.grad_reverse(features, cfg.grl_lambda);
        let domain_logits = mlp_head(g, reversed, &p.domain, None)?;
        Ok(ForwardOutput {
            features,
            label_logits,
            domain_logits,
            sequence_features: f_a,
            demographic_features: f_d,
        })
    }

    /// Evaluation-mode repayment probabilities and fused features for every
    /// packed loan of `batch`.
    pub fn predict(&self, batch: &Batch) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let out = self.forward(&mut g, &p, batch, Mode::Eval)?;
        let probs = g.softmax(out.label_logits);
        let pv = g.value(probs);
        let scores = (0..pv.rows()).map(|r| pv.row(r)[1]).collect();
        let fv = g.value(out.features);
        let features = (0..fv.rows()).map(|r| fv.row(r).to_vec()).collect();
        Ok((scores, features))
    }
}
