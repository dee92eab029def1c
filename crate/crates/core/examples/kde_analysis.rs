//! Densities of prompt scores, split at the median into good and bad halves.

use ddl_core::evalcal::{kde, EvalError, KdeSplit};

fn main() -> Result<(), EvalError> {
    let scores = [
        0.31, 0.35, 0.42, 0.44, 0.47, 0.52, 0.58, 0.61, 0.66, 0.69, 0.71, 0.74,
    ];
    for curve in kde(&scores, KdeSplit::Median)? {
        let (i, peak) =
            curve.density.iter().enumerate().fold(
                (0, 0.0),
                |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc },
            );
        println!(
            "{:?}: n={} h={:.4} peak {:.3} at {:.3}, integral {:.5}",
            curve.label,
            curve.n,
            curve.bandwidth,
            peak,
            curve.grid[i],
            curve.integral()
        );
    }
    Ok(())
}
