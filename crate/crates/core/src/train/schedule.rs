/// Cosine annealing from `lr0` at `t = 0` to `lr_min` at `t = total`:
/// `lr_min + (lr0 − lr_min)·(1 + cos(π·t/total))/2`.
///
/// Indices past `total` clamp to `lr_min`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_min;
    }
    if t == 0 {
        return lr0;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    lr_min + (lr0 - lr_min) * (1.0 + phase.cos()) / 2.0
}
