//! Sample-based distances.

use crate::error::{Error, Result};
use crate::numerics::rng::StreamKey;
use crate::numerics::tensor::Matrix;

/// Projection count used by every evaluation in the crate.
pub const DEFAULT_PROJECTIONS: usize = 64;

/// Seed for the fixed projection set.
pub const PROJECTION_SEED: u64 = 0x005e_ed0f_5113;

/// Unit directions drawn from a seeded isotropic Gaussian.
pub fn projection_directions(dim: usize, count: usize, key: StreamKey) -> Vec<Vec<f64>> {
    let mut rng = key.stream();
    (0..count)
        .map(|_| loop {
            let v = rng.normals(dim);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

/// Sliced Wasserstein-2 distance between two equal-size samples:
/// `sqrt(mean_θ W2²(θᵀa, θᵀb))`, each 1-D term solved by sorted matching.
pub fn sliced_w2(a: &Matrix, b: &Matrix, projections: usize) -> Result<f64> {
    sliced_w2_with(
        a,
        b,
        &projection_directions(a.cols, projections, StreamKey::new(PROJECTION_SEED)),
    )
}

pub fn sliced_w2_with(a: &Matrix, b: &Matrix, dirs: &[Vec<f64>]) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols || a.rows == 0 {
        return Err(Error::Shape {
            context: "sliced_w2 needs equal nonempty samples".into(),
            expected: vec![a.rows, a.cols],
            actual: vec![b.rows, b.cols],
        });
    }
    if dirs.is_empty() {
        return Err(Error::invalid("sliced_w2 needs at least one projection"));
    }
    let project = |m: &Matrix, d: &[f64]| -> Vec<f64> {
        let mut p: Vec<f64> = (0..m.rows)
            .map(|r| m.row(r).iter().zip(d).map(|(x, y)| x * y).sum())
            .collect();
        p.sort_by(f64::total_cmp);
        p
    };
    let mut total = 0.0;
    for d in dirs {
        let pa = project(a, d);
        let pb = project(b, d);
        total += pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / a.rows as f64;
    }
    Ok((total / dirs.len() as f64).sqrt())
}
