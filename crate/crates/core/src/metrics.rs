//! Evaluation metrics.

/// 11-point interpolated average precision.
///
/// Items are ranked by descending score (stable, so ties keep input order).
/// For each recall level `r/10`, the best precision at any rank whose
/// recall reaches the level is taken; the mean over the 11 levels is
/// returned. With no relevant items the result is 0.
pub fn average_precision_11pt(scores: &[f64], relevant: &[bool]) -> f64 {
    assert_eq!(
        scores.len(),
        relevant.len(),
        "scores and relevance differ in length"
    );
    let npos = relevant.iter().filter(|&&r| r).count();
    if npos == 0 {
        log::warn!("average precision requested with no relevant items; reporting 0");
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // best[r] = max precision over ranks with recall >= r/10
    let mut best = [0.0f64; 11];
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            tp += 1;
        }
        let precision = tp as f64 / (rank + 1) as f64;
        for (r, b) in best.iter_mut().enumerate() {
            if 10 * tp >= r * npos && precision > *b {
                *b = precision;
            }
        }
    }
    best.iter().sum::<f64>() / 11.0
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Fraction of samples whose predicted class is among their labels.
pub fn top1_accuracy(predicted: &[usize], labels: &[Vec<usize>]) -> f64 {
    assert_eq!(predicted.len(), labels.len());
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted
        .iter()
        .zip(labels)
        .filter(|(p, l)| l.contains(p))
        .count();
    hits as f64 / predicted.len() as f64
}
