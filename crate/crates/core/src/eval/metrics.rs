use super::{EvalError, Result};

fn masked_pairs(scores: &[f64], labels: &[f64], mask: &[bool]) -> Result<Vec<(f64, bool)>> {
    if scores.len() != labels.len() || labels.len() != mask.len() {
        return Err(EvalError::Shape(format!(
            "{} scores, {} labels, {} mask entries",
            scores.len(),
            labels.len(),
            mask.len()
        )));
    }
    let mut out = Vec::with_capacity(scores.len());
    for ((&s, &l), &m) in scores.iter().zip(labels).zip(mask) {
        if !m {
            continue;
        }
        if l != 0.0 && l != 1.0 {
            return Err(EvalError::Shape(format!("classification label {l} is not 0 or 1")));
        }
        if !s.is_finite() {
            return Err(EvalError::NonFinite);
        }
        out.push((s, l == 1.0));
    }
    Ok(out)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, over the masked-in entries.
pub fn roc_auc(scores: &[f64], labels: &[f64], mask: &[bool]) -> Result<f64> {
    let mut pairs = masked_pairs(scores, labels, mask)?;
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mid-ranks over tie groups (Mann-Whitney U).
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * pairs[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Unweighted mean of per-column ROC-AUC. Columns holding a single class
/// are skipped with a warning; an error is returned if none remain.
pub fn roc_auc_multi(scores: &[Vec<f64>], labels: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<f64> {
    let mut vals = Vec::new();
    for (c, ((s, l), m)) in scores.iter().zip(labels).zip(masks).enumerate() {
        match roc_auc(s, l, m) {
            Ok(v) => vals.push(v),
            Err(EvalError::DegenerateLabels) => log::warn!("column {c} holds a single class; skipped"),
            Err(e) => return Err(e),
        }
    }
    if vals.is_empty() {
        return Err(EvalError::DegenerateLabels);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// `sum_k P(k) * (R(k) - R(k-1))` over thresholds at each distinct score,
/// taken in descending order.
pub fn average_precision(scores: &[f64], labels: &[f64], mask: &[bool]) -> Result<f64> {
    let mut pairs = masked_pairs(scores, labels, mask)?;
    let total_pos = pairs.iter().filter(|p| p.1).count();
    if total_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let mut group_pos = 0;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            group_pos += usize::from(pairs[j].1);
            j += 1;
        }
        tp += group_pos;
        fp += (j - i) - group_pos;
        if group_pos > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (group_pos as f64 / total_pos as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// Masked positive rate of one label column.
pub fn base_rate(labels: &[f64], mask: &[bool]) -> f64 {
    let (pos, n) = labels
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((0.0, 0.0), |(p, n), (l, _)| (p + l, n + 1.0));
    if n == 0.0 {
        0.0
    } else {
        pos / n
    }
}

/// Mean over classes of `AP_i - BaseRate_i`. Classes without a positive
/// are excluded with a warning.
pub fn delta_ap(scores: &[Vec<f64>], labels: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<f64> {
    let mut vals = Vec::new();
    for (c, ((s, l), m)) in scores.iter().zip(labels).zip(masks).enumerate() {
        match average_precision(s, l, m) {
            Ok(ap) => vals.push(ap - base_rate(l, m)),
            Err(EvalError::NoPositives) => log::warn!("class {c} has no positives; excluded from delta AP"),
            Err(e) => return Err(e),
        }
    }
    if vals.is_empty() {
        return Err(EvalError::NoPositives);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn check_len(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(EvalError::Shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((s / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(v - mean) / std` of one task's values across methods, with the
/// population standard deviation. Identical values map to 0.
pub fn normalized_rmse(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(EvalError::Shape("normalization needs at least two methods".into()));
    }
    let (mean, std) = mean_std(values);
    Ok(values
        .iter()
        .map(|v| if std == 0.0 { 0.0 } else { (v - mean) / std })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0], &all(4)).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0], &all(4)).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0], &all(4)).unwrap(), 0.75);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1.0, 1.0], &all(2)), Err(EvalError::DegenerateLabels)));
        let masked = roc_auc(&[0.9, 0.1, 0.8], &[0.0, 0.0, 1.0], &[false, true, true]).unwrap();
        assert_eq!(masked, 1.0);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0], &all(4)).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.2, 0.9], &[1.0, 0.0], &all(2)).unwrap(), 0.5);
        assert!(matches!(average_precision(&[0.2], &[0.0], &all(1)), Err(EvalError::NoPositives)));
    }

    #[test]
    fn delta_ap_examples() {
        let l = vec![vec![1.0, 0.0, 0.0, 0.0]];
        let s = vec![vec![0.9, 0.1, 0.2, 0.3]];
        assert_eq!(delta_ap(&s, &l, &[all(4)]).unwrap(), 0.75);
        let l = vec![vec![1.0, 0.0, 1.0, 0.0]];
        assert_eq!(delta_ap(&l, &l, &[all(4)]).unwrap(), 0.5);
        let l2 = vec![vec![1.0, 0.0, 1.0, 0.0], vec![0.0; 4]];
        let s2 = vec![l2[0].clone(), vec![0.3; 4]];
        assert_eq!(delta_ap(&s2, &l2, &[all(4), all(4)]).unwrap(), 0.5);
    }

    #[test]
    fn regression_metrics() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        let n = normalized_rmse(&[1.0, 2.0, 3.0]).unwrap();
        for (a, b) in n.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(normalized_rmse(&[1.0]).is_err());
    }
}
