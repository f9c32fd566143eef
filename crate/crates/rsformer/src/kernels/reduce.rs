//! Summation helpers.

/// Pairwise (binary-tree) summation.
///
/// Splits down to single elements, so summing `2^k` identical values incurs
/// no rounding at all; this is what makes the constant-input loss identities
/// hold exactly. Accuracy on general data is also better than a left fold.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Mean via pairwise summation.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}
