/// Learning rate at `step` (0-based) for a linear-warmup + cosine-decay
/// schedule over `total_steps`.
///
/// * Warmup: rises linearly, reaching `base_lr` at the end of step
///   `warmup_steps - 1`.
/// * Decay: half-cosine from `base_lr` toward zero over the remaining steps.
/// * Degenerate inputs are handled: zero warmup starts at full rate, and a
///   schedule that is all warmup never decays.
///
/// The result is always in `[0, base_lr]`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    assert!(base_lr >= 0.0, "base_lr must be non-negative");
    if total_steps == 0 {
        return base_lr;
    }
    let step = step.min(total_steps - 1);
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps.saturating_sub(warmup_steps);
    if decay_steps == 0 {
        return base_lr;
    }
    let progress = (step - warmup_steps) as f64 / decay_steps as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}
