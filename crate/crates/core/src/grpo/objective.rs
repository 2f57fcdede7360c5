use super::GroupWeightMode;

/// Log-ratios are clamped to `[-30, 30]` before exponentiation.
pub const RATIO_EXPONENT_LIMIT: f64 = 30.0;

/// Mean and population standard deviation.
pub fn group_mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(R_i - mean) / (std + delta)`, times `std / (std + delta)` in
/// variance-scaled mode.
pub fn normalize_advantages(rewards: &[f64], delta: f64, mode: GroupWeightMode) -> Vec<f64> {
    let (mean, std) = group_mean_std(rewards);
    let weight = match mode {
        GroupWeightMode::Uniform => 1.0,
        GroupWeightMode::VarianceScaled => std / (std + delta),
    };
    rewards
        .iter()
        .map(|r| weight * (r - mean) / (std + delta))
        .collect()
}

pub fn ratio_exponent_clamped(logp_new: f64, logp_old: f64) -> bool {
    (logp_new - logp_old).abs() > RATIO_EXPONENT_LIMIT
}

/// `exp(logp_new - logp_old)` with the exponent clamped to +-30.
pub fn importance_ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old)
        .clamp(-RATIO_EXPONENT_LIMIT, RATIO_EXPONENT_LIMIT)
        .exp()
}

/// `min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * advantage).min(clipped * advantage)
}

/// k3 estimator `exp(x) - x - 1` with `x = logp_ref - logp_new`; never
/// negative.
pub fn kl_penalty(logp_new: f64, logp_ref: f64) -> f64 {
    let x = logp_ref - logp_new;
    // exp_m1 keeps precision for tiny |x|; max guards the last ulp.
    (x.exp_m1() - x).max(0.0)
}
