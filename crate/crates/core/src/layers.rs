//! Neural building blocks: multi-layer bidirectional LSTM, multi-head
//! self-attention with an optional residual connection, and small MLP
//! output heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_last, stack_axis1, Mask, Param, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};

/// Activation used between MLP-head layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

/// Xavier-uniform initialization: U(-L, L) with L = sqrt(6 / (fan_in + fan_out)).
fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect()
}

// ---- LSTM -------------------------------------------------------------------

/// One direction of one LSTM layer. Gate layout along the packed 4H axis
/// is input, forget, cell, output.
struct LstmDirection {
    w_ih: Param, // [input_dim, 4H]
    w_hh: Param, // [H, 4H]
    bias: Param, // [4H], forget segment initialized to 1.0
}

impl LstmDirection {
    fn new(
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<LstmDirection> {
        let w_ih = params.register(Param::new(
            format!("{prefix}.w_ih"),
            &[input_dim, 4 * hidden],
            xavier(rng, input_dim, 4 * hidden),
        )?);
        let w_hh = params.register(Param::new(
            format!("{prefix}.w_hh"),
            &[hidden, 4 * hidden],
            xavier(rng, hidden, 4 * hidden),
        )?);
        let mut bias = vec![0.0; 4 * hidden];
        for b in bias.iter_mut().take(2 * hidden).skip(hidden) {
            *b = 1.0;
        }
        let bias = params.register(Param::new(format!("{prefix}.bias"), &[4 * hidden], bias)?);
        Ok(LstmDirection { w_ih, w_hh, bias })
    }

    /// Run the recurrence over `[B, T, D]` input in the given time order,
    /// returning per-step hidden states indexed by absolute timestep.
    ///
    /// At masked steps both hidden and cell state are carried through
    /// unchanged, so padding never perturbs the valid trajectory.
    fn run(
        &self,
        tape: &Tape,
        x: &Tensor,
        mask: &Mask,
        hidden: usize,
        reverse: bool,
    ) -> Result<Vec<Tensor>> {
        let (batch, steps) = (x.shape()[0], x.shape()[1]);
        let w_ih = tape.watch(&self.w_ih);
        let w_hh = tape.watch(&self.w_hh);
        let bias = tape.watch(&self.bias);
        let mut h = Tensor::zeros(&[batch, hidden]);
        let mut c = Tensor::zeros(&[batch, hidden]);
        let mut outputs: Vec<Option<Tensor>> = vec![None; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let x_t = x.select_axis1(t)?;
            let z = x_t.matmul(&w_ih)?.add(&h.matmul(&w_hh)?)?.add(&bias)?;
            let i_gate = z.slice_last(0, hidden)?.sigmoid();
            let f_gate = z.slice_last(hidden, hidden)?.sigmoid();
            let g_gate = z.slice_last(2 * hidden, hidden)?.tanh();
            let o_gate = z.slice_last(3 * hidden, hidden)?.sigmoid();
            let c_new = f_gate.mul(&c)?.add(&i_gate.mul(&g_gate)?)?;
            let h_new = o_gate.mul(&c_new.tanh())?;

            // state freeze: masked steps keep the previous h and c
            let m: Vec<f64> = (0..batch)
                .map(|b| if mask.valid(b, t) { 1.0 } else { 0.0 })
                .collect();
            let keep: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
            let m = Tensor::from_vec(&[batch, 1], m)?;
            let keep = Tensor::from_vec(&[batch, 1], keep)?;
            c = c_new.mul(&m)?.add(&c.mul(&keep)?)?;
            h = h_new.mul(&m)?.add(&h.mul(&keep)?)?;
            outputs[t] = Some(h.clone());
        }
        Ok(outputs.into_iter().map(|o| o.expect("every step visited")).collect())
    }
}

struct LstmLayer {
    forward: LstmDirection,
    backward: LstmDirection,
}

/// Multi-layer bidirectional LSTM; output feature width is twice the
/// per-direction hidden size.
pub struct LstmStack {
    input_dim: usize,
    hidden_dim: usize,
    layers: Vec<LstmLayer>,
}

impl LstmStack {
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<LstmStack> {
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d_in = if l == 0 { input_dim } else { 2 * hidden_dim };
            layers.push(LstmLayer {
                forward: LstmDirection::new(
                    &format!("lstm.l{l}.fwd"),
                    d_in,
                    hidden_dim,
                    params,
                    rng,
                )?,
                backward: LstmDirection::new(
                    &format!("lstm.l{l}.bwd"),
                    d_in,
                    hidden_dim,
                    params,
                    rng,
                )?,
            });
        }
        Ok(LstmStack {
            input_dim,
            hidden_dim,
            layers,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    /// Encode `[B, T, D]` into `[B, T, 2H]` hidden states.
    pub fn forward(&self, tape: &Tape, x: &Tensor, mask: &Mask) -> Result<Tensor> {
        if x.shape().len() != 3 || x.shape()[2] != self.input_dim {
            return Err(Error::Config(format!(
                "lstm configured for input width {}, got input of shape {:?}",
                self.input_dim,
                x.shape()
            )));
        }
        let steps = x.shape()[1];
        let mut current = x.clone();
        for layer in &self.layers {
            let fwd = layer.forward.run(tape, &current, mask, self.hidden_dim, false)?;
            let bwd = layer.backward.run(tape, &current, mask, self.hidden_dim, true)?;
            let per_step: Vec<Tensor> = (0..steps)
                .map(|t| concat_last(&[&fwd[t], &bwd[t]]))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = per_step.iter().collect();
            current = stack_axis1(&refs)?;
        }
        Ok(current)
    }
}

// ---- multi-head self-attention ----------------------------------------------

struct HeadProjection {
    wq: Param,
    bq: Param,
    wk: Param,
    bk: Param,
    wv: Param,
    bv: Param,
}

/// Scaled dot-product self-attention with per-head projections and a
/// shared output projection.
pub struct MultiHeadAttention {
    model_dim: usize,
    head_dim: usize,
    heads: Vec<HeadProjection>,
    w_out: Param,
    b_out: Param,
}

impl MultiHeadAttention {
    pub fn new(
        model_dim: usize,
        num_heads: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<MultiHeadAttention> {
        if num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "model_dim {model_dim} not divisible by {num_heads} heads"
            )));
        }
        let head_dim = model_dim / num_heads;
        let mut heads = Vec::with_capacity(num_heads);
        for i in 0..num_heads {
            let mut proj = |tag: &str| -> Result<(Param, Param)> {
                let w = params.register(Param::new(
                    format!("attn.h{i}.w{tag}"),
                    &[model_dim, head_dim],
                    xavier(rng, model_dim, head_dim),
                )?);
                let b = params.register(Param::new(
                    format!("attn.h{i}.b{tag}"),
                    &[head_dim],
                    vec![0.0; head_dim],
                )?);
                Ok((w, b))
            };
            let (wq, bq) = proj("q")?;
            let (wk, bk) = proj("k")?;
            let (wv, bv) = proj("v")?;
            heads.push(HeadProjection {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
            });
        }
        let w_out = params.register(Param::new(
            "attn.out.w",
            &[model_dim, model_dim],
            xavier(rng, model_dim, model_dim),
        )?);
        let b_out = params.register(Param::new("attn.out.b", &[model_dim], vec![0.0; model_dim])?);
        Ok(MultiHeadAttention {
            model_dim,
            head_dim,
            heads,
            w_out,
            b_out,
        })
    }

    /// `[B, T, M] -> [B, T, M]`; adds the input back when `residual`.
    pub fn forward(&self, tape: &Tape, h: &Tensor, mask: &Mask, residual: bool) -> Result<Tensor> {
        if h.shape().len() != 3 || h.shape()[2] != self.model_dim {
            return Err(Error::Config(format!(
                "attention configured for width {}, got input of shape {:?}",
                self.model_dim,
                h.shape()
            )));
        }
        let (batch, steps) = (h.shape()[0], h.shape()[1]);
        let flat = h.reshape(&[batch * steps, self.model_dim])?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();

        let mut scores = Vec::with_capacity(self.heads.len());
        let mut values = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let project = |w: &Param, b: &Param| -> Result<Tensor> {
                flat.matmul(&tape.watch(w))?
                    .add(&tape.watch(b))?
                    .reshape(&[batch, steps, self.head_dim])
            };
            let q = project(&head.wq, &head.bq)?;
            let k = project(&head.wk, &head.bk)?;
            let v = project(&head.wv, &head.bv)?;
            scores.push(q.matmul(&k.transpose_last2()?)?.mul_scalar(scale));
            values.push(v);
        }
        let score_refs: Vec<&Tensor> = scores.iter().collect();
        let weights = stack_axis1(&score_refs)?.masked_softmax(mask)?;

        let mut contexts = Vec::with_capacity(self.heads.len());
        for (i, v) in values.iter().enumerate() {
            contexts.push(weights.select_axis1(i)?.matmul(v)?);
        }
        let ctx_refs: Vec<&Tensor> = contexts.iter().collect();
        let merged = concat_last(&ctx_refs)?
            .reshape(&[batch * steps, self.model_dim])?
            .matmul(&tape.watch(&self.w_out))?
            .add(&tape.watch(&self.b_out))?
            .reshape(&[batch, steps, self.model_dim])?;
        if residual {
            merged.add(h)
        } else {
            Ok(merged)
        }
    }
}

// ---- MLP heads ---------------------------------------------------------------

/// Affine stack with an activation between layers and a raw final output.
pub struct MlpHead {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<(Param, Param)>,
}

impl MlpHead {
    /// `widths` runs from the input width to the output width,
    /// e.g. `[256, 64, 1]`.
    pub fn new(
        name: &str,
        widths: &[usize],
        activation: Activation,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<MlpHead> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "mlp head {name} needs at least input and output widths, got {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = params.register(Param::new(
                format!("{name}.l{l}.w"),
                &[fan_in, fan_out],
                xavier(rng, fan_in, fan_out),
            )?);
            let b = params.register(Param::new(format!("{name}.l{l}.b"), &[fan_out], vec![0.0; fan_out])?);
            layers.push((w, b));
        }
        Ok(MlpHead {
            widths: widths.to_vec(),
            activation,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// `[N, in] -> [N, out]`.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let mut current = x.clone();
        let last = self.layers.len() - 1;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            current = current.matmul(&tape.watch(w))?.add(&tape.watch(b))?;
            if l != last {
                current = self.activation.apply(&current);
            }
        }
        Ok(current)
    }
}

#[cfg(test)]
mod tests;
