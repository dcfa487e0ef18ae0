use crate::config::TrainConfig;

/// Learning rate for 1-based `epoch`: linear warmup reaching `lr` at the end
/// of the warmup epochs, then cosine decay reaching `min_lr` at the last epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let (peak, floor) = (cfg.lr, cfg.min_lr);
    let warm = cfg.warmup_epochs.min(cfg.epochs);
    if epoch <= warm {
        return peak * epoch as f64 / warm as f64;
    }
    let span = cfg.epochs - warm;
    if span == 0 {
        return peak;
    }
    let t = (epoch - warm) as f64 / span as f64;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
