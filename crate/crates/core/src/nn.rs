//! Dense layers shared by the field networks.

use rand::Rng;

use crate::autograd::{ParamGroup, ParamId, ParamStore, Real, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Layer {
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Weights uniform in `±1/√fan_in`, zero bias.
pub fn dense<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Layer {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let weight = store.add_uniform(format!("{name}.weight"), fan_in, fan_out, ParamGroup::Network, bound, rng);
    let bias = store.add_zeros(format!("{name}.bias"), 1, fan_out, ParamGroup::Network);
    Layer { weight, bias }
}

/// First layer of a network whose input is `[x ⊕ c]`, with `c` a single row
/// shared by every sample: computes `x·W_x + (c·W_c + b)` without
/// materializing the broadcast. `W` rows are ordered `[x; c]`.
pub fn split_first_layer<T: Real>(
    tape: &mut Tape<'_, T>,
    layer: &Layer,
    x: Var,
    cond: Option<Var>,
) -> Result<Var, TensorError> {
    let w = tape.param(layer.weight);
    let b = tape.param(layer.bias);
    let (_, dx) = tape.shape(x);
    let (rows, _) = tape.shape(w);
    let wx = tape.slice_rows(w, 0, dx)?;
    let row = match cond {
        Some(c) => {
            let wc = tape.slice_rows(w, dx, rows - dx)?;
            let cw = tape.matmul(c, wc)?;
            tape.add(cw, b)?
        }
        None => b,
    };
    tape.linear(x, wx, Some(row))
}
