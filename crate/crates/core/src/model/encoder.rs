use super::forward::Dropout;
use super::{BackboneKind, ModelError, Result};
use crate::tensor::{Graph, SeqLayout, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct InitialEncoderVars {
    pub w0: Var,
    pub b0: Var,
    pub w1: Var,
    pub b1: Var,
    pub positional: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

/// Gate blocks are stacked along columns: LSTM `[i, f, g, o]`, GRU
/// `[r, z, n]`.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentVars {
    pub kind: BackboneKind,
    pub w_x: Var,
    pub b_x: Var,
    pub w_h: Var,
    pub b_h: Var,
}

#[derive(Debug, Clone)]
pub enum BackboneVars {
    Transformer(Vec<TransformerLayerVars>),
    Recurrent(RecurrentVars),
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// `h = (1 - S)(C W0 + b0) + S (C W1 + b1) + P[t]` for packed rows `C`.
pub fn initial_encode(
    g: &mut Graph,
    c: Var,
    observed: &[f64],
    positions: &[usize],
    p: &InitialEncoderVars,
) -> Result<Var> {
    if let Some(&bad) = observed.iter().find(|&&s| s != 0.0 && s != 1.0) {
        return Err(ModelError::Observability(bad));
    }
    let x0 = g.matmul(c, p.w0)?;
    let h0 = g.add_row(x0, p.b0)?;
    let x1 = g.matmul(c, p.w1)?;
    let h1 = g.add_row(x1, p.b1)?;
    let unobserved: Vec<f64> = observed.iter().map(|s| 1.0 - s).collect();
    let h0 = g.mul_rows(h0, &unobserved)?;
    let h1 = g.mul_rows(h1, observed)?;
    let h = g.add(h0, h1)?;
    let pos = g.gather_rows(p.positional, positions)?;
    Ok(g.add(h, pos)?)
}

/// Single-head scaled dot-product self-attention followed by the output
/// projection.
pub fn attention_block(
    g: &mut Graph,
    x: Var,
    p: &TransformerLayerVars,
    layout: &SeqLayout,
    causal: bool,
    key_valid: Option<&[bool]>,
) -> Result<Var> {
    let q = g.matmul(x, p.wq)?;
    let k = g.matmul(x, p.wk)?;
    let v = g.matmul(x, p.wv)?;
    let a = g.attention(q, k, v, layout, causal, key_valid)?;
    let o = g.matmul(a, p.wo)?;
    Ok(g.add_row(o, p.bo)?)
}

/// Post-norm encoder layer: `x1 = LN(x + Attn(x))`, `out = LN(x1 + FF(x1))`,
/// then dropout.
pub fn transformer_layer(
    g: &mut Graph,
    x: Var,
    p: &TransformerLayerVars,
    layout: &SeqLayout,
    causal: bool,
    dropout: &Dropout,
    site: u64,
) -> Result<Var> {
    let a = attention_block(g, x, p, layout, causal, None)?;
    let r1 = g.add(x, a)?;
    let x1 = g.layer_norm(r1, p.norm1_gain, p.norm1_bias, LAYER_NORM_EPS)?;
    let f = g.matmul(x1, p.ff_w1)?;
    let f = g.add_row(f, p.ff_b1)?;
    let f = g.relu(f);
    let f = g.matmul(f, p.ff_w2)?;
    let f = g.add_row(f, p.ff_b2)?;
    let r2 = g.add(x1, f)?;
    let out = g.layer_norm(r2, p.norm2_gain, p.norm2_bias, LAYER_NORM_EPS)?;
    dropout.apply(g, out, site)
}

/// Per-timestep sequence features from the initially encoded rows `h`.
pub fn encode_sequence(
    g: &mut Graph,
    h: Var,
    backbone: &BackboneVars,
    layout: &SeqLayout,
    causal: bool,
    dropout: &Dropout,
) -> Result<Var> {
    match backbone {
        BackboneVars::Transformer(layers) => {
            let mut x = h;
            for (l, p) in layers.iter().enumerate() {
                x = transformer_layer(g, x, p, layout, causal, dropout, 10 + l as u64)?;
            }
            Ok(x)
        }
        BackboneVars::Recurrent(p) => {
            let out = recurrent_encode(g, h, p, layout)?;
            dropout.apply(g, out, 20)
        }
    }
}

/// Single-layer recurrent pass over packed sequences from a zero state.
///
/// Sequences are visited longest first, so the sequences still running at
/// step `t` always form a prefix of the state rows.
pub fn recurrent_encode(g: &mut Graph, h: Var, p: &RecurrentVars, layout: &SeqLayout) -> Result<Var> {
    let gates = p.kind.gates();
    if gates == 0 {
        return Err(ModelError::Config {
            field: "backbone",
            reason: "recurrent_encode needs rnn, lstm or gru".into(),
        });
    }
    let width = g.value(p.w_h).shape()[0];
    if g.value(p.w_h).cols() != gates * width || g.value(p.w_x).cols() != gates * width {
        return Err(ModelError::Config {
            field: "backbone",
            reason: format!("{} weights do not have {gates} gate blocks", p.kind),
        });
    }
    let mut order: Vec<usize> = (0..layout.num_sequences()).collect();
    order.sort_by_key(|&b| std::cmp::Reverse(layout.len_of(b)));

    let xw = g.matmul(h, p.w_x)?;
    let xw = g.add_row(xw, p.b_x)?;

    let mut outputs = Vec::with_capacity(layout.max_len());
    let mut packed_of = Vec::with_capacity(layout.total());
    let mut state: Option<Var> = None;
    let mut cell: Option<Var> = None;
    for t in 0..layout.max_len() {
        let active = order.iter().take_while(|&&b| layout.len_of(b) > t).count();
        let rows: Vec<usize> = order[..active].iter().map(|&b| layout.offset(b) + t).collect();
        packed_of.extend_from_slice(&rows);
        let x_t = g.gather_rows(xw, &rows)?;
        let keep: Vec<usize> = (0..active).collect();
        let h_prev = match state {
            None => g.constant(Tensor::zeros(&[active, width])),
            Some(s) if g.value(s).rows() == active => s,
            Some(s) => g.gather_rows(s, &keep)?,
        };
        let hw = g.matmul(h_prev, p.w_h)?;
        let hw = g.add_row(hw, p.b_h)?;
        let h_new = match p.kind {
            BackboneKind::Rnn => {
                let z = g.add(x_t, hw)?;
                g.tanh(z)
            }
            BackboneKind::Lstm => {
                let c_prev = match cell {
                    None => g.constant(Tensor::zeros(&[active, width])),
                    Some(c) if g.value(c).rows() == active => c,
                    Some(c) => g.gather_rows(c, &keep)?,
                };
                let z = g.add(x_t, hw)?;
                let i = g.slice_cols(z, 0, width)?;
                let i = g.sigmoid(i);
                let f = g.slice_cols(z, width, width)?;
                let f = g.sigmoid(f);
                let cand = g.slice_cols(z, 2 * width, width)?;
                let cand = g.tanh(cand);
                let o = g.slice_cols(z, 3 * width, width)?;
                let o = g.sigmoid(o);
                let kept = g.mul(f, c_prev)?;
                let written = g.mul(i, cand)?;
                let c = g.add(kept, written)?;
                cell = Some(c);
                let tc = g.tanh(c);
                g.mul(o, tc)?
            }
            BackboneKind::Gru => {
                let xr = g.slice_cols(x_t, 0, width)?;
                let hr = g.slice_cols(hw, 0, width)?;
                let r = g.add(xr, hr)?;
                let r = g.sigmoid(r);
                let xz = g.slice_cols(x_t, width, width)?;
                let hz = g.slice_cols(hw, width, width)?;
                let z = g.add(xz, hz)?;
                let z = g.sigmoid(z);
                let xn = g.slice_cols(x_t, 2 * width, width)?;
                let hn = g.slice_cols(hw, 2 * width, width)?;
                let gated = g.mul(r, hn)?;
                let n = g.add(xn, gated)?;
                let n = g.tanh(n);
                // (1 - z) n + z h_prev
                let diff = g.sub(h_prev, n)?;
                let carry = g.mul(z, diff)?;
                g.add(n, carry)?
            }
            BackboneKind::Transformer => unreachable!("checked above"),
        };
        outputs.push(h_new);
        state = Some(h_new);
    }
    let stacked = g.concat_rows(&outputs)?;
    let mut inverse = vec![0usize; packed_of.len()];
    for (k, &row) in packed_of.iter().enumerate() {
        inverse[row] = k;
    }
    Ok(g.gather_rows(stacked, &inverse)?)
}
