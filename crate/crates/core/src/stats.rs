//! Summary statistics shared by the estimators and the harness.

/// Two-sided 95% normal critical value.
pub const Z95: f64 = 1.959_963_984_540_054;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Variance with denominator `n - ddof`.
pub fn variance(xs: &[f64], ddof: usize) -> f64 {
    if xs.len() <= ddof {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - ddof) as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sd(xs: &[f64]) -> f64 {
    libm::sqrt(variance(xs, 1))
}

/// Standard error of the mean, `sd / sqrt(n)`.
pub fn sem(xs: &[f64]) -> f64 {
    sd(xs) / libm::sqrt(xs.len() as f64)
}
