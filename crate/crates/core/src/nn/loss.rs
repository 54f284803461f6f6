use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean squared error over every entry of a `(batch, outputs)` prediction,
/// together with its gradient with respect to `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            layer: "mse_loss".into(),
            expected: target.shape().to_vec(),
            actual: pred.shape().to_vec(),
        });
    }
    if pred.is_empty() || pred.rows() == 0 {
        return Err(Error::EmptyDataset("mse_loss on an empty batch".into()));
    }
    let n = pred.len() as f64;
    let diff: Vec<f64> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.iter().map(|d| 2.0 * d / n).collect();
    Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Softmax cross-entropy averaged over the batch. `logits` is
/// `(batch, classes)`; returns the loss and its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 || logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            layer: "softmax_cross_entropy".into(),
            expected: vec![labels.len(), logits.shape().get(1).copied().unwrap_or(0)],
            actual: logits.shape().to_vec(),
        });
    }
    let classes = logits.shape()[1];
    let batch = labels.len() as f64;
    let mut grad = Vec::with_capacity(logits.len());
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::InvalidConfig(format!("label {label} >= {classes} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label] - max);
        grad.extend(exps.iter().enumerate().map(|(j, e)| {
            let p = e / z;
            (if j == label { p - 1.0 } else { p }) / batch
        }));
    }
    Ok((loss / batch, Tensor::new(logits.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_fit_is_zero() {
        let t = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let (loss, grad) = mse_loss(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unit_errors() {
        let p = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let t = Tensor::zeros(&[1, 2]);
        assert_eq!(mse_loss(&p, &t).unwrap().0, 1.0);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let p = Tensor::new(vec![3, 2], vec![0.3, -1.2, 0.8, 2.1, -0.4, 0.05]).unwrap();
        let t = Tensor::new(vec![3, 2], vec![1.0, 0.2, -0.7, 1.9, 0.0, -0.3]).unwrap();
        let (_, grad) = mse_loss(&p, &t).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.data_mut()[i] += h;
            let mut minus = p.clone();
            minus.data_mut()[i] -= h;
            let numeric = (mse_loss(&plus, &t).unwrap().0 - mse_loss(&minus, &t).unwrap().0) / (2.0 * h);
            assert!((numeric - grad.data()[i]).abs() < 1e-7, "entry {i}");
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let p = Tensor::zeros(&[2, 2]);
        let t = Tensor::zeros(&[2, 3]);
        assert!(mse_loss(&p, &t).is_err());
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let logits = Tensor::new(vec![2, 3], vec![0.2, -0.5, 1.3, 2.0, 0.1, -1.0]).unwrap();
        let labels = [2, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let numeric = (softmax_cross_entropy(&plus, &labels).unwrap().0
                - softmax_cross_entropy(&minus, &labels).unwrap().0)
                / (2.0 * h);
            assert!((numeric - grad.data()[i]).abs() < 1e-8);
        }
    }
}
