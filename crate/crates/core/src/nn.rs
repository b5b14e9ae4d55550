//! Layers recorded on a [`Tape`]: dense MLPs, a GRU cell and an embedding
//! lookup.
//!
//! Parameter containers hold plain tensors; `bind` places them on a tape,
//! either as differentiable inputs or as constants.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{AdError, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("{layer}: expected width {expected}, got {got}")]
    Width {
        layer: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}: inconsistent parameter shapes")]
    Shapes(&'static str),
    #[error("gru_encode: empty sequence")]
    EmptySequence,
    #[error("embedding index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    None,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::None => x,
        }
    }
}

/// `weight` is `[out, in]`; `bias` is `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

fn bind_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.input(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

impl Dense {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> DenseVars {
        DenseVars {
            weight: bind_tensor(tape, &self.weight, trainable),
            bias: self.bias.as_ref().map(|b| bind_tensor(tape, b, trainable)),
        }
    }
}

/// `W x + b` for a vector `x`.
pub fn dense_forward(tape: &mut Tape, layer: &DenseVars, x: Var) -> Result<Var, AdError> {
    let y = tape.matmul(layer.weight, x)?;
    match layer.bias {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Dense>,
    activations: Vec<Activation>,
}

impl MlpParams {
    pub fn new(layers: Vec<Dense>, activations: Vec<Activation>) -> Result<Self, NnError> {
        let chained = layers.windows(2).all(|w| w[0].out_dim() == w[1].in_dim());
        let biases_fit = layers.iter().all(|l| {
            l.weight.rank() == 2
                && l.bias
                    .as_ref()
                    .is_none_or(|b| b.shape() == [l.out_dim()])
        });
        if layers.is_empty() || layers.len() != activations.len() || !chained || !biases_fit {
            return Err(NnError::Shapes("mlp"));
        }
        Ok(Self {
            layers,
            activations,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        MlpVars {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            activations: self.activations.clone(),
            in_dim: self.in_dim(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<DenseVars>,
    pub activations: Vec<Activation>,
    in_dim: usize,
}

impl MlpVars {
    pub fn new(layers: Vec<DenseVars>, activations: Vec<Activation>, in_dim: usize) -> Self {
        Self {
            layers,
            activations,
            in_dim,
        }
    }
}

pub fn mlp_forward(tape: &mut Tape, mlp: &MlpVars, x: Var) -> Result<Var, NnError> {
    let got = tape.value(x).len();
    if got != mlp.in_dim {
        return Err(NnError::Width {
            layer: "mlp",
            expected: mlp.in_dim,
            got,
        });
    }
    let mut h = x;
    for (layer, act) in mlp.layers.iter().zip(&mlp.activations) {
        let pre = dense_forward(tape, layer, h)?;
        h = act.apply(tape, pre);
    }
    Ok(h)
}

/// Input weights `[hidden, input]`, recurrent weights `[hidden, hidden]` and
/// biases `[hidden]` for the update (z), reset (r) and candidate (h) paths.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.w_z.rank() != 2 {
            return Err(NnError::Shapes("gru"));
        }
        let (h, i) = (self.hidden_dim(), self.input_dim());
        let ok = [&self.w_z, &self.w_r, &self.w_h]
            .iter()
            .all(|w| w.shape() == [h, i])
            && [&self.u_z, &self.u_r, &self.u_h]
                .iter()
                .all(|u| u.shape() == [h, h])
            && [&self.b_z, &self.b_r, &self.b_h]
                .iter()
                .all(|b| b.shape() == [h]);
        if ok {
            Ok(())
        } else {
            Err(NnError::Shapes("gru"))
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GruVars {
        let mut b = |t: &Tensor| bind_tensor(tape, t, trainable);
        GruVars {
            w_z: b(&self.w_z),
            u_z: b(&self.u_z),
            b_z: b(&self.b_z),
            w_r: b(&self.w_r),
            u_r: b(&self.u_r),
            b_r: b(&self.b_r),
            w_h: b(&self.w_h),
            u_h: b(&self.u_h),
            b_h: b(&self.b_h),
            input_dim: self.input_dim(),
            hidden_dim: self.hidden_dim(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
    input_dim: usize,
    hidden_dim: usize,
}

fn gate(tape: &mut Tape, w: Var, x: Var, u: Var, h: Var, b: Var) -> Result<Var, AdError> {
    let wx = tape.matmul(w, x)?;
    let uh = tape.matmul(u, h)?;
    let s = tape.add(wx, uh)?;
    tape.add(s, b)
}

/// One GRU update:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// h̃  = tanh(W_h x + U_h (r ∘ h) + b_h)
/// h' = (1 − z) ∘ h + z ∘ h̃
/// ```
pub fn gru_step(tape: &mut Tape, gru: &GruVars, x: Var, h_prev: Var) -> Result<Var, NnError> {
    let (xw, hw) = (tape.value(x).len(), tape.value(h_prev).len());
    if xw != gru.input_dim {
        return Err(NnError::Width {
            layer: "gru input",
            expected: gru.input_dim,
            got: xw,
        });
    }
    if hw != gru.hidden_dim {
        return Err(NnError::Width {
            layer: "gru hidden",
            expected: gru.hidden_dim,
            got: hw,
        });
    }
    let z_pre = gate(tape, gru.w_z, x, gru.u_z, h_prev, gru.b_z)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, gru.w_r, x, gru.u_r, h_prev, gru.b_r)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h_prev)?;
    let cand_pre = gate(tape, gru.w_h, x, gru.u_h, rh, gru.b_h)?;
    let cand = tape.tanh(cand_pre);
    // (1 − z)∘h + z∘h̃  ==  h + z∘(h̃ − h)
    let delta = tape.sub(cand, h_prev)?;
    let step = tape.mul(z, delta)?;
    Ok(tape.add(h_prev, step)?)
}

/// Left fold of [`gru_step`] over `sequence`, starting from `h0`.
pub fn gru_encode(
    tape: &mut Tape,
    gru: &GruVars,
    sequence: &[Var],
    h0: Var,
) -> Result<Var, NnError> {
    if sequence.is_empty() {
        return Err(NnError::EmptySequence);
    }
    sequence
        .iter()
        .try_fold(h0, |h, &x| gru_step(tape, gru, x, h))
}

/// `N × E` matrix whose row `d` is district `d`'s embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub table: Tensor,
}

impl EmbeddingTable {
    pub fn rows(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn row(&self, d: usize) -> Option<&[f64]> {
        (d < self.rows()).then(|| &self.table.data()[d * self.dim()..(d + 1) * self.dim()])
    }
}

/// Row `d` of the `[rows, dim]` table bound at `table`. The gradient of the
/// result lands in that row only.
pub fn embed_lookup(tape: &mut Tape, table: Var, d: usize) -> Result<Var, NnError> {
    let shape = tape.value(table).shape().to_vec();
    if shape.len() != 2 {
        return Err(NnError::Shapes("embedding"));
    }
    let (rows, dim) = (shape[0], shape[1]);
    if d >= rows {
        return Err(NnError::IndexOutOfRange { index: d, rows });
    }
    Ok(tape.slice(table, d * dim, dim)?)
}
