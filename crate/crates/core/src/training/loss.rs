use crate::error::{Error, Result};
use crate::runtime::gate::softmax;
use crate::runtime::linalg::Matrix;
use crate::scalar::Scalar;

fn check<S: Scalar>(logits: &Matrix<S>, targets: &[u32], mask: &[bool]) -> Result<usize> {
    if logits.rows() != targets.len() || targets.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} mask entries",
            logits.rows(),
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= logits.cols()) {
        return Err(Error::TokenOutOfRange {
            token: t,
            vocab: logits.cols(),
        });
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::EmptyMask),
        n => Ok(n),
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln()
}

/// Mean negative log-likelihood of `targets` over the masked positions.
pub fn lm_loss<S: Scalar>(logits: &Matrix<S>, targets: &[u32], mask: &[bool]) -> Result<S> {
    let n = check(logits, targets, mask)?;
    let mut total = S::zero();
    for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            let row = logits.row(t);
            total += log_sum_exp(row) - row[y as usize];
        }
    }
    Ok(total / S::from_usize(n).unwrap())
}

/// Loss and its gradient with respect to the logits.
pub fn lm_loss_grad<S: Scalar>(logits: &Matrix<S>, targets: &[u32], mask: &[bool]) -> Result<(S, Matrix<S>, usize)> {
    let n = check(logits, targets, mask)?;
    let scale = S::one() / S::from_usize(n).unwrap();
    let mut total = S::zero();
    let mut d = Matrix::zeros(logits.rows(), logits.cols());
    for (t, (&y, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        let row = logits.row(t);
        total += log_sum_exp(row) - row[y as usize];
        let p = softmax(row);
        let dr = d.row_mut(t);
        for (dv, pv) in dr.iter_mut().zip(p) {
            *dv = pv * scale;
        }
        dr[y as usize] -= scale;
    }
    Ok((total * scale, d, n))
}
