use super::Point;
use crate::autograd::Real;
use crate::error::{Error, Result};

/// For each point of `from`, the index of its nearest point in `to` (lowest
/// index on ties) and the squared distance to it.
pub fn nearest_indices<T: Real>(from: &[[T; 3]], to: &[[T; 3]]) -> (Vec<usize>, Vec<T>) {
    let mut idx = Vec::with_capacity(from.len());
    let mut d2 = Vec::with_capacity(from.len());
    for p in from {
        let mut best = 0;
        let mut best_d = T::infinity();
        for (j, q) in to.iter().enumerate() {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let dz = p[2] - q[2];
            let d = dx * dx + dy * dy + dz * dz;
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        idx.push(best);
        d2.push(best_d);
    }
    (idx, d2)
}

fn widen<T: Real>(pts: &[[T; 3]]) -> Vec<[f64; 3]> {
    pts.iter().map(|p| p.map(|c| c.as_f64())).collect()
}

fn check_nonempty<T>(p: &[T], g: &[T]) -> Result<()> {
    if p.is_empty() || g.is_empty() {
        return Err(Error::Argument("chamfer distance of an empty cloud".into()));
    }
    Ok(())
}

fn directed_means<T: Real>(p: &[[T; 3]], g: &[[T; 3]], squared: bool) -> (f64, f64) {
    let (p, g) = (widen(p), widen(g));
    let term = |d2: Vec<f64>| -> f64 {
        let n = d2.len() as f64;
        let mut v: Vec<f64> = if squared { d2 } else { d2.iter().map(|v| v.sqrt()).collect() };
        v.sort_by(f64::total_cmp);
        v.iter().sum::<f64>() / n
    };
    (term(nearest_indices(&p, &g).1), term(nearest_indices(&g, &p).1))
}

/// Symmetric Chamfer distance with Euclidean per-pair distances, accumulated
/// in `f64`.
pub fn chamfer_l1<T: Real>(p: &[[T; 3]], g: &[[T; 3]]) -> Result<f64> {
    check_nonempty(p, g)?;
    let (a, b) = directed_means(p, g, false);
    Ok(a + b)
}

/// Symmetric Chamfer distance with squared Euclidean per-pair distances.
pub fn chamfer_l2<T: Real>(p: &[[T; 3]], g: &[[T; 3]]) -> Result<f64> {
    check_nonempty(p, g)?;
    let (a, b) = directed_means(p, g, true);
    Ok(a + b)
}

/// Harmonic mean of precision (share of `p` within `tau` of `g`) and recall
/// (share of `g` within `tau` of `p`); 0 when both are 0.
pub fn f_score(p: &[Point], g: &[Point], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("F-score threshold must be > 0, got {tau}")));
    }
    check_nonempty(p, g)?;
    let (p, g) = (widen(p), widen(g));
    let t2 = tau * tau;
    let share = |a: &[[f64; 3]], b: &[[f64; 3]]| -> f64 {
        let (_, d2) = nearest_indices(a, b);
        d2.iter().filter(|&&d| d <= t2).count() as f64 / a.len() as f64
    };
    let precision = share(&p, &g);
    let recall = share(&g, &p);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Default F-score threshold: 1% of the ground truth's bounding-box diagonal.
pub fn default_tau(g: &[Point]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in g {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k] as f64);
            hi[k] = hi[k].max(p[k] as f64);
        }
    }
    let diag = (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt();
    0.01 * diag
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_offset_pair() {
        let p = [[0.0f32, 0.0, 0.0]];
        let g = [[1.0f32, 0.0, 0.0]];
        assert_eq!(chamfer_l1(&p, &g).unwrap(), 2.0);
        assert_eq!(chamfer_l2(&p, &g).unwrap(), 2.0);
    }

    #[test]
    fn identity_is_zero() {
        let p = [[0.1f32, 0.2, 0.3], [0.5, -0.5, 0.0]];
        assert_eq!(chamfer_l1(&p, &p).unwrap(), 0.0);
        assert_eq!(chamfer_l2(&p, &p).unwrap(), 0.0);
        assert_eq!(f_score(&p, &p, 1e-9).unwrap(), 1.0);
    }

    #[test]
    fn empty_and_bad_tau_rejected() {
        let p = [[0.0f32; 3]];
        let e: [[f32; 3]; 0] = [];
        assert!(matches!(chamfer_l1(&p, &e), Err(Error::Argument(_))));
        assert!(matches!(chamfer_l2(&e, &p), Err(Error::Argument(_))));
        assert!(matches!(f_score(&p, &p, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn disjoint_sets_score_zero() {
        let p = [[0.0f32, 0.0, 0.0], [0.0, 0.1, 0.0]];
        let g = [[5.0f32, 0.0, 0.0]];
        assert_eq!(f_score(&p, &g, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn half_overlapping_sets() {
        // p = {a, b, c, d}, g = {a, b, e, f}; c, d, e, f far from everything.
        // precision = 2/4, recall = 2/4, F = 0.5 by enumeration.
        let p = [[0.0f32, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 9.0, 0.0]];
        let g = [[0.0f32, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 5.0], [0.0, 0.0, 9.0]];
        assert!((f_score(&p, &g, 0.5).unwrap() - 0.5).abs() < 1e-12);
        // three of four in p near g, one of four in g near p:
        // precision 3/4, recall 2/4 -> F = 2*(3/8)/(5/4) = 0.6
        let p2 = [[0.0f32, 0.0, 0.0], [1.0, 0.0, 0.0], [1.1, 0.0, 0.0], [0.0, 9.0, 0.0]];
        assert!((f_score(&p2, &g, 0.5).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn default_tau_of_unit_cube_diagonal() {
        let g = [[0.0f32, 0.0, 0.0], [1.0, 1.0, 1.0]];
        assert!((default_tau(&g) - 0.01 * 3f64.sqrt()).abs() < 1e-12);
    }
}
