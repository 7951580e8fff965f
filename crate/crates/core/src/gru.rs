//! GRU cell and the bidirectional layer that produces the per-frame memory
//! rows (forward hidden state plus backward hidden state).
//!
//! Input dimension equals the hidden size `K`: the TARM resizes each frame
//! to `K` before the cell, so all six weight matrices are square.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tape, Tensor, TensorError, TensorId};

/// One direction's gate parameters. Gate equations, with `x` and `h` as row
/// vectors:
///
/// ```text
/// z = sigmoid(x·Wz + h·Uz + bz)
/// r = sigmoid(x·Wr + h·Ur + br)
/// c = tanh(x·Wh + (r ⊙ h)·Uh + bh)
/// h' = (1 − z) ⊙ h + z ⊙ c
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<F> {
    pub w_update: Tensor<F>,
    pub w_reset: Tensor<F>,
    pub w_cand: Tensor<F>,
    pub u_update: Tensor<F>,
    pub u_reset: Tensor<F>,
    pub u_cand: Tensor<F>,
    pub b_update: Tensor<F>,
    pub b_reset: Tensor<F>,
    pub b_cand: Tensor<F>,
}

impl<F: Scalar> GruParams<F> {
    pub fn zeros(k: usize) -> Self {
        Self {
            w_update: Tensor::zeros(vec![k, k]),
            w_reset: Tensor::zeros(vec![k, k]),
            w_cand: Tensor::zeros(vec![k, k]),
            u_update: Tensor::zeros(vec![k, k]),
            u_reset: Tensor::zeros(vec![k, k]),
            u_cand: Tensor::zeros(vec![k, k]),
            b_update: Tensor::zeros(vec![k]),
            b_reset: Tensor::zeros(vec![k]),
            b_cand: Tensor::zeros(vec![k]),
        }
    }

    /// Weights uniform in ±1/√K, biases zero.
    pub fn init(k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        let mut mat = || {
            let data = (0..k * k)
                .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::new(vec![k, k], data).expect("square shape")
        };
        Self {
            w_update: mat(),
            w_reset: mat(),
            w_cand: mat(),
            u_update: mat(),
            u_reset: mat(),
            u_cand: mat(),
            b_update: Tensor::zeros(vec![k]),
            b_reset: Tensor::zeros(vec![k]),
            b_cand: Tensor::zeros(vec![k]),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_update.shape()[0]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        f(format!("{prefix}.Wz"), &self.w_update);
        f(format!("{prefix}.Wr"), &self.w_reset);
        f(format!("{prefix}.Wh"), &self.w_cand);
        f(format!("{prefix}.Uz"), &self.u_update);
        f(format!("{prefix}.Ur"), &self.u_reset);
        f(format!("{prefix}.Uh"), &self.u_cand);
        f(format!("{prefix}.bz"), &self.b_update);
        f(format!("{prefix}.br"), &self.b_reset);
        f(format!("{prefix}.bh"), &self.b_cand);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.Wz"), &mut self.w_update);
        f(format!("{prefix}.Wr"), &mut self.w_reset);
        f(format!("{prefix}.Wh"), &mut self.w_cand);
        f(format!("{prefix}.Uz"), &mut self.u_update);
        f(format!("{prefix}.Ur"), &mut self.u_reset);
        f(format!("{prefix}.Uh"), &mut self.u_cand);
        f(format!("{prefix}.bz"), &mut self.b_update);
        f(format!("{prefix}.br"), &mut self.b_reset);
        f(format!("{prefix}.bh"), &mut self.b_cand);
    }

    /// Records the parameters as leaves on `tape`.
    pub fn register(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> GruIds {
        GruIds {
            w_update: tape.named_leaf(&format!("{prefix}.Wz"), &self.w_update, trainable),
            w_reset: tape.named_leaf(&format!("{prefix}.Wr"), &self.w_reset, trainable),
            w_cand: tape.named_leaf(&format!("{prefix}.Wh"), &self.w_cand, trainable),
            u_update: tape.named_leaf(&format!("{prefix}.Uz"), &self.u_update, trainable),
            u_reset: tape.named_leaf(&format!("{prefix}.Ur"), &self.u_reset, trainable),
            u_cand: tape.named_leaf(&format!("{prefix}.Uh"), &self.u_cand, trainable),
            b_update: tape.named_leaf(&format!("{prefix}.bz"), &self.b_update, trainable),
            b_reset: tape.named_leaf(&format!("{prefix}.br"), &self.b_reset, trainable),
            b_cand: tape.named_leaf(&format!("{prefix}.bh"), &self.b_cand, trainable),
        }
    }
}

/// Tape handles for one registered [`GruParams`].
#[derive(Debug, Clone, Copy)]
pub struct GruIds {
    w_update: TensorId,
    w_reset: TensorId,
    w_cand: TensorId,
    u_update: TensorId,
    u_reset: TensorId,
    u_cand: TensorId,
    b_update: TensorId,
    b_reset: TensorId,
    b_cand: TensorId,
}

/// Independent forward and backward cells sharing the hidden size.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGruParams<F> {
    pub forward: GruParams<F>,
    pub backward: GruParams<F>,
}

impl<F: Scalar> BiGruParams<F> {
    pub fn zeros(k: usize) -> Self {
        Self {
            forward: GruParams::zeros(k),
            backward: GruParams::zeros(k),
        }
    }

    pub fn init(k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            forward: GruParams::init(k, rng),
            backward: GruParams::init(k, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.forward.hidden_size()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
        self.forward.visit(&format!("{prefix}.fwd"), f);
        self.backward.visit(&format!("{prefix}.bwd"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.forward.visit_mut(&format!("{prefix}.fwd"), f);
        self.backward.visit_mut(&format!("{prefix}.bwd"), f);
    }

    pub fn register(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> BiGruIds {
        BiGruIds {
            forward: self.forward.register(tape, &format!("{prefix}.fwd"), trainable),
            backward: self.backward.register(tape, &format!("{prefix}.bwd"), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiGruIds {
    pub forward: GruIds,
    pub backward: GruIds,
}

/// One gate step: maps a `1×K` frame and the previous hidden row to the
/// next hidden row.
pub fn gru_step<F: Scalar>(
    tape: &mut Tape<F>,
    ids: &GruIds,
    x_t: TensorId,
    h_prev: TensorId,
) -> Result<TensorId, TensorError> {
    let z_pre = {
        let xw = tape.affine(x_t, ids.w_update, ids.b_update)?;
        let hu = tape.matmul(h_prev, ids.u_update)?;
        tape.add(xw, hu)?
    };
    let z = tape.sigmoid(z_pre);

    let r_pre = {
        let xw = tape.affine(x_t, ids.w_reset, ids.b_reset)?;
        let hu = tape.matmul(h_prev, ids.u_reset)?;
        tape.add(xw, hu)?
    };
    let r = tape.sigmoid(r_pre);

    let cand_pre = {
        let xw = tape.affine(x_t, ids.w_cand, ids.b_cand)?;
        let rh = tape.mul(r, h_prev)?;
        let rhu = tape.matmul(rh, ids.u_cand)?;
        tape.add(xw, rhu)?
    };
    let cand = tape.tanh(cand_pre);

    // (1−z)⊙h + z⊙c, written as h + z⊙(c − h).
    let delta = tape.sub(cand, h_prev)?;
    let gated = tape.mul(z, delta)?;
    tape.add(h_prev, gated)
}

/// Bidirectional scan over a `T×K` input: row `t` of the result is the
/// forward hidden state at `t` plus the backward hidden state at `t`.
/// Both scans start from zero hidden states.
pub fn bigru_forward<F: Scalar>(
    tape: &mut Tape<F>,
    ids: &BiGruIds,
    x: TensorId,
) -> Result<TensorId, TensorError> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(TensorError::InvalidArgument {
            op: "bigru_forward",
            message: format!("need a T×K input with T >= 1, got {shape:?}"),
        });
    }
    let (t_len, k) = (shape[0], shape[1]);

    let rows: Vec<TensorId> = (0..t_len)
        .map(|t| tape.select_row(x, t))
        .collect::<Result<_, _>>()?;

    let mut h = tape.constant_filled(vec![1, k], F::zero());
    let mut fwd = Vec::with_capacity(t_len);
    for &row in &rows {
        h = gru_step(tape, &ids.forward, row, h)?;
        fwd.push(h);
    }

    let mut h = tape.constant_filled(vec![1, k], F::zero());
    let mut bwd = vec![h; t_len];
    for t in (0..t_len).rev() {
        h = gru_step(tape, &ids.backward, rows[t], h)?;
        bwd[t] = h;
    }

    let combined: Vec<TensorId> = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.add(f, b))
        .collect::<Result<_, _>>()?;
    tape.concat_rows(&combined)
}
