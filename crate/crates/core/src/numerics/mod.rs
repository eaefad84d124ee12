//! Dense matrices, a recorded trace with reverse-mode gradients, and the
//! eager building blocks every other module composes.

mod graph;
mod matrix;
mod param;

pub use graph::{AttnMask, Gradients, Graph, NodeId};
pub use matrix::{Matrix, Precision, Real};
pub use param::{Group, Init, ParamId, ParamStore, ParamTensor};

pub(crate) use param::stream_seed;

use crate::error::{Error, Result};

/// `x · weight + bias`, bias broadcast over rows.
pub fn linear_forward<T: Real>(
    x: &Matrix<T>,
    weight: &ParamTensor<T>,
    bias: &ParamTensor<T>,
) -> Result<Matrix<T>> {
    x.ensure_finite("linear_forward input")?;
    if bias.value.rows() != 1 || bias.value.cols() != weight.value.cols() {
        return Err(Error::shape(
            "linear_forward",
            format!(
                "bias {:?} for weight {:?}",
                bias.value.shape(),
                weight.value.shape()
            ),
        ));
    }
    let mut out = x.matmul(&weight.value)?;
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(bias.value.row(0)) {
            *o += b;
        }
    }
    out.ensure_finite("linear_forward")?;
    Ok(out)
}

/// Single-head scaled dot-product attention. Returns `(output, weights)`;
/// weights are exactly zero where `mask` forbids attention.
pub fn attention_forward<T: Real>(
    queries: &Matrix<T>,
    keys: &Matrix<T>,
    values: &Matrix<T>,
    mask: &AttnMask,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let (out, mut weights) = graph::attention_kernel(queries, keys, values, 1, mask)?;
    out.ensure_finite("attention_forward")?;
    Ok((out, weights.remove(0)))
}

/// Mean negative log-softmax over rows whose target differs from `ignore`.
pub fn cross_entropy<T: Real>(logits: &Matrix<T>, targets: &[usize], ignore: Option<usize>) -> Result<T> {
    logits.ensure_finite("cross_entropy input")?;
    let (_, loss, _, _) = graph::cross_entropy_kernel(logits, targets, ignore)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(m: Matrix<f64>) -> ParamTensor<f64> {
        let (r, c) = m.shape();
        ParamTensor {
            name: "t".into(),
            group: Group::Fusion,
            value: m,
            grad: Matrix::zeros(r, c),
            frozen: false,
        }
    }

    #[test]
    fn linear_identity_case() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let out = linear_forward(&x, &tensor(Matrix::identity(2)), &tensor(Matrix::zeros(1, 2))).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_multiplied() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![3.0], vec![5.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let out = linear_forward(&x, &tensor(w), &tensor(b)).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn linear_rejects_nan_and_bad_shapes() {
        let x = Matrix::from_vec(1, 2, vec![f64::NAN, 1.0]).unwrap();
        let w = tensor(Matrix::identity(2));
        let b = tensor(Matrix::zeros(1, 2));
        assert!(matches!(linear_forward(&x, &w, &b), Err(Error::NonFinite(_))));
        let x = Matrix::zeros(1, 3);
        assert!(matches!(linear_forward(&x, &w, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn attention_single_key() {
        let q = Matrix::<f64>::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let v = Matrix::from_rows(&[vec![7.0, 8.0]]).unwrap();
        let (out, w) = attention_forward(&q, &q, &v, &AttnMask::Full).unwrap();
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(out.data(), &[7.0, 8.0]);
    }

    #[test]
    fn attention_equal_logits_are_uniform() {
        let q = Matrix::<f64>::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let (_, w) = attention_forward(&q, &k, &v, &AttnMask::Full).unwrap();
        for &x in w.data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_masked_key_gets_exact_zero() {
        let q = Matrix::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 0.0], vec![5.0, 5.0]]).unwrap();
        let mask = AttnMask::Dense {
            rows: 1,
            cols: 2,
            allowed: vec![true, false],
        };
        let (_, w) = attention_forward(&q, &k, &k, &mask).unwrap();
        assert_eq!(w.data(), &[1.0, 0.0]);
    }

    #[test]
    fn attention_row_without_keys_is_an_error() {
        let q = Matrix::<f64>::zeros(2, 2);
        let mask = AttnMask::Dense {
            rows: 2,
            cols: 2,
            allowed: vec![true, false, false, false],
        };
        assert!(matches!(
            attention_forward(&q, &q, &q, &mask),
            Err(Error::EmptyAttentionRow { row: 1 })
        ));
    }

    #[test]
    fn cross_entropy_reference_cases() {
        let uniform = Matrix::<f64>::zeros(1, 4);
        assert!((cross_entropy(&uniform, &[2], None).unwrap() - 4f64.ln()).abs() < 1e-12);

        let mut peaked = Matrix::<f64>::zeros(1, 4);
        peaked.set(0, 1, 20.0);
        assert!(cross_entropy(&peaked, &[1], None).unwrap() < 1e-8);

        let two = Matrix::<f64>::from_rows(&[vec![0.5, -1.0, 2.0], vec![3.0, 0.0, 0.0]]).unwrap();
        let single = two.slice_rows(0, 1).unwrap();
        let masked = cross_entropy(&two, &[2, 9], Some(9)).unwrap();
        assert_eq!(masked, cross_entropy(&single, &[2], None).unwrap());
        assert!(masked >= 0.0);
    }

    #[test]
    fn cross_entropy_errors() {
        let l = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(cross_entropy(&l, &[1, 1], Some(1)), Err(Error::AllIgnored)));
        assert!(matches!(cross_entropy(&l, &[0, 3], None), Err(Error::Target(_))));
    }
}
