use super::{CapsNetError, MarginLossConfig, Result};

/// Margin loss summed over classes: the true class is pushed above `m+`,
/// the others below `m-` with weight `lambda`.
pub fn margin_loss(lengths: &[f64], label: &[f64], cfg: &MarginLossConfig) -> Result<f64> {
    if lengths.len() != label.len() {
        return Err(CapsNetError::Label(format!(
            "{} lengths but label has {} entries",
            lengths.len(),
            label.len()
        )));
    }
    let ones = label.iter().filter(|&&t| t == 1.0).count();
    if ones != 1 || label.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(CapsNetError::Label("label must be one-hot".into()));
    }
    if let Some(bad) = lengths.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(CapsNetError::LengthOutOfRange(*bad));
    }
    Ok(lengths
        .iter()
        .zip(label)
        .map(|(&l, &t)| {
            t * (cfg.m_plus - l).max(0.0).powi(2) + cfg.lambda * (1.0 - t) * (l - cfg.m_minus).max(0.0).powi(2)
        })
        .sum())
}

/// Index of the longest capsule; ties go to the lowest index.
pub fn predict_grid<T: PartialOrd + Copy>(lengths: &[T]) -> usize {
    let mut best = 0;
    for (i, &l) in lengths.iter().enumerate().skip(1) {
        if l > lengths[best] {
            best = i;
        }
    }
    best
}
