//! Correlation, significance and reliability bins for (score, IoU) pairs.

use ddl_core::evalcal::calibration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), ddl_core::evalcal::EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pairs: Vec<(f64, f64)> = (0..200)
        .map(|_| {
            let sigma: f64 = rng.random_range(0.0..=1.0);
            let iou = (0.8 * sigma + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);
            (sigma, iou)
        })
        .collect();
    let report = calibration(&pairs)?;
    print!("{}", report.render_text());
    Ok(())
}
