use super::layers::softmax;
use super::{NetError, Tensor};

/// Mean softmax cross-entropy over the rows of `logits (n, k)`.
/// Returns the loss and its gradient `(softmax − onehot) / n`.
pub fn softmax_ce_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), NetError> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(NetError::Shape(format!("{} labels for {} logit rows", labels.len(), n)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NetError::Label { label: bad, classes: k });
    }
    if n == 0 {
        return Ok((0.0, Tensor::zeros(&[0, k])));
    }
    let mut prob = softmax(logits)?;
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (r, &l) in labels.iter().enumerate() {
        let row = &logits.data()[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[l];
        prob.data_mut()[r * k + l] -= 1.0;
    }
    prob.scale(inv_n);
    Ok((loss * inv_n, prob))
}

/// Weighted smooth-L1 loss: `0.5·d²` for `|d| < 1`, else `|d| − 0.5`,
/// summed with `weights` and divided by the total weight. Zero when all
/// weights are zero.
pub fn smooth_l1_loss(pred: &Tensor, target: &Tensor, weights: &Tensor) -> Result<(f64, Tensor), NetError> {
    if pred.shape() != target.shape() || pred.shape() != weights.shape() {
        return Err(NetError::Shape(format!(
            "smooth L1 shapes differ: pred {:?}, target {:?}, weights {:?}",
            pred.shape(),
            target.shape(),
            weights.shape()
        )));
    }
    let total: f64 = weights.sum();
    let mut grad = Tensor::zeros(pred.shape());
    if total <= 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for i in 0..pred.len() {
        let w = weights.data()[i];
        if w == 0.0 {
            continue;
        }
        let d = pred.data()[i] - target.data()[i];
        let (l, g) = if d.abs() < 1.0 {
            (0.5 * d * d, d)
        } else {
            (d.abs() - 0.5, d.signum())
        };
        loss += w * l;
        grad.data_mut()[i] = w * g / total;
    }
    Ok((loss / total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn ce_limits() {
        let (l, _) = softmax_ce_loss(&t(&[2, 2], &[50.0, -50.0, -50.0, 50.0]), &[0, 1]).unwrap();
        assert!(l < 1e-12);
        let (l, g) = softmax_ce_loss(&Tensor::zeros(&[3, 5]), &[0, 4, 2]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        // (1/5 − 1)/3 at the label, 1/15 elsewhere
        assert!((g.data()[0] - (0.2 - 1.0) / 3.0).abs() < 1e-15);
        assert!((g.data()[1] - 0.2 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let e = softmax_ce_loss(&Tensor::zeros(&[1, 2]), &[2]).unwrap_err();
        assert!(matches!(e, NetError::Label { label: 2, classes: 2 }));
        assert!(softmax_ce_loss(&Tensor::zeros(&[2, 2]), &[0]).is_err());
    }

    #[test]
    fn smooth_l1_values() {
        let w = Tensor::filled(&[1], 1.0);
        let (l, _) = smooth_l1_loss(&t(&[1], &[3.0]), &t(&[1], &[3.0]), &w).unwrap();
        assert_eq!(l, 0.0);
        let (l, g) = smooth_l1_loss(&t(&[1], &[2.0]), &t(&[1], &[0.0]), &w).unwrap();
        assert_eq!(l, 1.5);
        assert_eq!(g.data(), &[1.0]);
        let (l, _) = smooth_l1_loss(&t(&[2], &[0.5, 9.0]), &t(&[2], &[0.0, 0.0]), &t(&[2], &[1.0, 0.0])).unwrap();
        assert_eq!(l, 0.125);
        assert!(smooth_l1_loss(&t(&[2], &[0.0; 2]), &t(&[1], &[0.0]), &t(&[2], &[1.0; 2])).is_err());
    }
}
