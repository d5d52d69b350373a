//! Dense matrices with reverse-mode differentiation, plus Adam and EMA.

mod optim;
mod params;
mod real;
mod tape;

pub use optim::{Adam, AdamConfig, Ema};
pub use params::{Grads, Param, ParamGroup, ParamId, ParamStore};
pub use real::{lit, to_f64, Real};
pub use tape::{sigmoid, BackwardCtx, CustomOp, Tape, TapeStats, Var, GATHER_ZERO, TRUNC_EXP_BOUND};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("contract violation in {op}: shapes {left:?} and {right:?} are not conformable")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("contract violation: buffer of length {got} given for {expected} elements")]
    BadLength { expected: usize, got: usize },
    #[error("contract violation: gather index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("contract violation: backward needs a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("contract violation: backward called on an inference tape")]
    NotRecording,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn forward_examples() {
        let p = empty();
        let mut t = Tape::new(&p);
        let z = t.constant(vec![0.0], 1, 1).unwrap();
        let s = t.sigmoid(z);
        assert_eq!(t.value(s), &[0.5]);

        let x = t.constant(vec![20.0, -20.0, 1.0], 1, 3).unwrap();
        let e = t.trunc_exp(x);
        assert_eq!(t.value(e), &[15f64.exp(), (-15f64).exp(), 1f64.exp()]);

        let a = t.constant(vec![1.0, 2.0], 1, 2).unwrap();
        let b = t.constant(vec![3.0], 1, 1).unwrap();
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_examples() {
        let p = empty();
        let mut t = Tape::new(&p);
        let x = t.input(vec![1.0, 2.0], 1, 2).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);

        let mut t = Tape::new(&p);
        let w = t.input(vec![0.0], 1, 1).unwrap();
        let s = t.sigmoid(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut p = empty();
        let id = p.add("w", 1, 2, ParamGroup::Network, vec![1.0, -1.0]);
        let mut t = Tape::new(&p);
        let w = t.param(id);
        let sq = t.square(w);
        let loss = t.sum(sq);
        t.backward(loss).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.param_grads().get(id).unwrap(), &[4.0, -4.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let p = empty();
        let mut t = Tape::new(&p);
        let a = t.constant(vec![0.0; 6], 2, 3).unwrap();
        let b = t.constant(vec![0.0; 6], 3, 2).unwrap();
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(3, 2)"), "{msg}");
        let err = t.matmul(a, a).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let p = empty();
        let mut t = Tape::new(&p);
        let a = t.input(vec![1.0, 2.0], 1, 2).unwrap();
        assert_eq!(t.backward(a).unwrap_err(), TensorError::NonScalarLoss { rows: 1, cols: 2 });
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut p = empty();
        let id = p.add("w", 1, 1, ParamGroup::Network, vec![3.0]);
        let mut t = Tape::inference(&p);
        let w = t.param(id);
        let y = t.square(w);
        assert_eq!(t.value(y), &[9.0]);
        assert!(!t.needs_grad(y));
        assert_eq!(t.backward(y).unwrap_err(), TensorError::NotRecording);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = empty();
        let mut t = Tape::new(&p);
        let a = t.constant(vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0], 2, 3).unwrap();
        let s = t.softmax_rows(a);
        for row in t.value(s).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let p = empty();
        let mut t = Tape::new(&p);
        let x = t.input((0..6).map(|i| i as f64 * 0.3 - 1.0).collect(), 3, 2).unwrap();
        let w = t.input(vec![0.5, -1.0, 2.0, 0.25], 2, 2).unwrap();
        let b = t.input(vec![0.1, -0.2], 1, 2).unwrap();
        let l = t.linear(x, w, Some(b)).unwrap();
        let m = t.matmul(x, w).unwrap();
        let m = t.add_row(m, b).unwrap();
        assert_eq!(t.value(l), t.value(m));
    }
}
