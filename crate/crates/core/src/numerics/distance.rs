use std::cmp::Ordering;

use crate::error::{FlowError, Result};
use crate::numerics::Tensor;

/// Squared energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` between two sample sets
/// (`[n, d]` and `[m, d]`), using all pairs including the diagonal (V-statistic), so the
/// result is nonnegative up to rounding.
///
/// The two sets are put into a canonical order before summation, which makes the
/// result exactly symmetric in its arguments.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() < 2 || b.rows() < 2 {
        return Err(FlowError::invalid("energy distance needs at least 2 samples per set"));
    }
    if a.cols() != b.cols() {
        return Err(FlowError::invalid(format!("dimension mismatch: {} vs {}", a.cols(), b.cols())));
    }
    let (x, y) = match canonical_order(a, b) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let cross = mean_pairwise(x, y);
    let within = mean_pairwise(x, x) + mean_pairwise(y, y);
    Ok(2.0 * cross - within)
}

fn canonical_order(a: &Tensor, b: &Tensor) -> Ordering {
    a.rows().cmp(&b.rows()).then_with(|| {
        a.data().iter().zip(b.data()).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
    })
}

fn mean_pairwise(x: &Tensor, y: &Tensor) -> f64 {
    let mut total = 0.0;
    for xi in x.row_iter() {
        let mut row = 0.0;
        for yj in y.row_iter() {
            let s: f64 = xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum();
            row += s.sqrt();
        }
        total += row;
    }
    total / (x.rows() as f64 * y.rows() as f64)
}
