use std::f64::consts::PI;

/// Linear warmup to `base_lr` over `warmup_steps`, then half-cosine decay to
/// zero at `total_steps`. Steps past `total_steps` stay at zero.
pub fn cosine_schedule(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}
