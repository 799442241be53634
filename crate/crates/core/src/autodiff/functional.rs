//! Value-only versions of the activation and loss primitives.
//!
//! The graph ops in [`super::graph`] call into these for their forward values,
//! so both paths agree bit-for-bit.

use super::Tensor;
use crate::error::{KoalaError, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to predicted probabilities inside [`kl_loss`].
pub const PROB_FLOOR: f64 = 1e-12;

fn check_temperature<S: Scalar>(op: &'static str, t: S) -> Result<()> {
    if t <= S::zero() || !t.is_finite() {
        return Err(KoalaError::InvalidTemperature {
            op,
            value: t.as_f64(),
        });
    }
    Ok(())
}

/// Row-wise `softmax(z / t)` over the last axis.
pub fn softmax_t<S: Scalar>(z: &Tensor<S>, t: S) -> Result<Tensor<S>> {
    check_temperature("softmax_t", t)?;
    if !z.is_finite() {
        return Err(KoalaError::NonFiniteInput { op: "softmax_t" });
    }
    let mut out = z.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for x in row.iter_mut() {
            *x = ((*x - max) / t).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    Ok(out)
}

/// Row-wise `log_softmax(z / t)`.
pub fn log_softmax_t<S: Scalar>(z: &Tensor<S>, t: S) -> Result<Tensor<S>> {
    check_temperature("log_softmax_t", t)?;
    if !z.is_finite() {
        return Err(KoalaError::NonFiniteInput {
            op: "log_softmax_t",
        });
    }
    let mut out = z.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = row
            .iter()
            .map(|&x| ((x - max) / t).exp())
            .sum::<S>()
            .ln();
        for x in row.iter_mut() {
            *x = (*x - max) / t - lse;
        }
    }
    Ok(out)
}

pub(crate) fn check_distribution<S: Scalar>(
    op: &'static str,
    name: &str,
    p: &Tensor<S>,
) -> Result<()> {
    let tol = S::prob_tolerance();
    for (i, row) in p.row_iter().enumerate() {
        if row.iter().any(|&x| x < S::zero() || !x.is_finite()) {
            return Err(KoalaError::InvalidProbabilities {
                op,
                reason: format!("{name} row {i} has a negative or non-finite entry"),
            });
        }
        let s: S = row.iter().copied().sum();
        if (s - S::one()).abs() > tol {
            return Err(KoalaError::InvalidProbabilities {
                op,
                reason: format!("{name} row {i} sums to {s}"),
            });
        }
    }
    Ok(())
}

/// `p * ln(p / q)` with `0 ln 0 = 0` and `q` clamped at [`PROB_FLOOR`].
#[inline]
pub(crate) fn kl_term<S: Scalar>(p: S, q: S) -> S {
    if p > S::zero() {
        p * (p / q.max(S::of(PROB_FLOOR))).ln()
    } else {
        S::zero()
    }
}

/// `KL(p || q)` per row, averaged over rows. `p` is the target distribution.
pub fn kl_loss<S: Scalar>(p: &Tensor<S>, q: &Tensor<S>) -> Result<S> {
    p.expect_same_shape(q, "kl_loss")?;
    check_distribution("kl_loss", "target", p)?;
    check_distribution("kl_loss", "prediction", q)?;
    let total: S = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(&a, &b)| kl_term(a, b))
        .sum();
    Ok(total / S::of(p.rows() as f64))
}

/// Mean of squared elementwise differences.
pub fn mse_loss<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    a.expect_same_shape(b, "mse_loss")?;
    let total: S = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(total / S::of(a.len() as f64))
}

pub(crate) fn check_labels<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<()> {
    let classes = logits.cols();
    if labels.len() != logits.rows() {
        return Err(KoalaError::ShapeMismatch {
            op: "cross_entropy_loss",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(KoalaError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Per-row negative log-likelihood of the true class.
pub fn cross_entropy_rows<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<Vec<S>> {
    check_labels(logits, labels)?;
    let logp = log_softmax_t(logits, S::one())?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -logp.row(i)[y])
        .collect())
}

/// Mean cross-entropy of `logits` against class indices.
pub fn cross_entropy_loss<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let rows = cross_entropy_rows(logits, labels)?;
    Ok(rows.iter().copied().sum::<S>() / S::of(rows.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor<f64> {
        Tensor::vector(x.to_vec())
    }

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax_t(&v(&[0., 0., 0.]), 7.0).unwrap();
        for &x in p.data() {
            close(x, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_temperature_examples() {
        let e = std::f64::consts::E;
        let p = softmax_t(&v(&[7., 0.]), 7.0).unwrap();
        close(p.data()[0], e / (e + 1.0), 1e-12);
        close(p.data()[0], 0.73106, 1e-5);
        close(p.data()[1], 0.26894, 1e-5);

        let sharp = softmax_t(&v(&[2., 0.]), 1.0).unwrap();
        let flat = softmax_t(&v(&[2., 0.]), 2.0).unwrap();
        close(sharp.data()[0], 0.88080, 1e-5);
        close(sharp.data()[1], 0.11920, 1e-5);
        close(flat.data()[0], 0.73106, 1e-5);
        assert!(flat.data()[0] < sharp.data()[0]);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(
            softmax_t(&v(&[1., 2.]), 0.0),
            Err(KoalaError::InvalidTemperature { .. })
        ));
        assert!(matches!(
            softmax_t(&v(&[1., 2.]), -1.0),
            Err(KoalaError::InvalidTemperature { .. })
        ));
        assert!(matches!(
            softmax_t(&v(&[1., f64::NAN]), 1.0),
            Err(KoalaError::NonFiniteInput { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        close(kl_loss(&v(&[0.5, 0.5]), &v(&[0.5, 0.5])).unwrap(), 0.0, 1e-15);
        close(
            kl_loss(&v(&[1., 0.]), &v(&[0.5, 0.5])).unwrap(),
            2f64.ln(),
            1e-12,
        );
        close(kl_loss(&v(&[1., 0.]), &v(&[0.5, 0.5])).unwrap(), std::f64::consts::LN_2, 1e-12);
        let expected = 0.9 * 9f64.ln() + 0.1 * (1.0f64 / 9.0).ln();
        let got = kl_loss(&v(&[0.9, 0.1]), &v(&[0.1, 0.9])).unwrap();
        close(got, expected, 1e-12);
        close(got, 0.8 * 9f64.ln(), 1e-12);
        close(got, 1.75778, 1e-5);
    }

    #[test]
    fn kl_errors() {
        assert!(kl_loss(&v(&[0.5, 0.5]), &v(&[0.2, 0.3, 0.5])).is_err());
        assert!(matches!(
            kl_loss(&v(&[1.5, -0.5]), &v(&[0.5, 0.5])),
            Err(KoalaError::InvalidProbabilities { .. })
        ));
    }

    #[test]
    fn mse_examples() {
        close(mse_loss(&v(&[1., 2.]), &v(&[1., 2.])).unwrap(), 0.0, 0.0);
        close(mse_loss(&v(&[0., 0.]), &v(&[3., 4.])).unwrap(), 12.5, 1e-15);
        close(mse_loss(&v(&[1.]), &v(&[-1.])).unwrap(), 4.0, 1e-15);
        assert!(mse_loss(&v(&[1.]), &v(&[1., 2.])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let m = |rows: &[Vec<f64>]| Tensor::from_rows(rows).unwrap();
        close(
            cross_entropy_loss(&m(&[vec![1000., 0.]]), &[0]).unwrap(),
            0.0,
            1e-12,
        );
        close(
            cross_entropy_loss(&m(&[vec![0., 0.]]), &[1]).unwrap(),
            2f64.ln(),
            1e-12,
        );
        close(
            cross_entropy_loss(&m(&[vec![0., 0., 0., 0.]]), &[2]).unwrap(),
            1.38629,
            1e-5,
        );
        assert!(matches!(
            cross_entropy_loss(&m(&[vec![0., 0.]]), &[2]),
            Err(KoalaError::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }
}
