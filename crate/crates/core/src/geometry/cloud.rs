use super::Point;
use crate::error::{Error, Result};

/// An ordered list of 3D points with an optional class id.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    label: Option<u32>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: Option<u32>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("point cloud needs at least one point".into()));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Argument("point cloud has non-finite coordinates".into()));
        }
        Ok(PointCloud { points, label })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn label(&self) -> Option<u32> {
        self.label
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_label(mut self, label: Option<u32>) -> Self {
        self.label = label;
        self
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k] as f64;
            }
        }
        c.map(|v| v / self.points.len() as f64)
    }

    /// Centers on the centroid and scales so the farthest point has norm 1.
    pub fn normalize(&mut self) {
        let c = self.centroid();
        let shifted: Vec<[f64; 3]> = self
            .points
            .iter()
            .map(|p| [p[0] as f64 - c[0], p[1] as f64 - c[1], p[2] as f64 - c[2]])
            .collect();
        let max_norm = shifted
            .iter()
            .map(|q| (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt())
            .fold(0.0f64, f64::max);
        let s = if max_norm > 0.0 { 1.0 / max_norm } else { 1.0 };
        self.points = shifted
            .iter()
            .map(|q| [(q[0] * s) as f32, (q[1] * s) as f32, (q[2] * s) as f32])
            .collect();
    }

    pub fn normalized(mut self) -> Self {
        self.normalize();
        self
    }

    /// Largest pairwise distance (exhaustive).
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max(dist(a, b));
            }
        }
        best
    }
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum()
}

pub(crate) fn dist(a: &Point, b: &Point) -> f64 {
    dist2(a, b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_nan() {
        assert!(PointCloud::new(vec![], None).is_err());
        assert!(PointCloud::new(vec![[0.0, f32::NAN, 0.0]], None).is_err());
    }

    #[test]
    fn normalize_centers_and_scales() {
        let pc = PointCloud::new(vec![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0], [2.0, 4.0, 1.0]], None)
            .unwrap()
            .normalized();
        let c = pc.centroid();
        assert!(c.iter().all(|v| v.abs() < 1e-6));
        let max = pc
            .points()
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0f32, f32::max);
        assert!((max - 1.0).abs() < 1e-6);
    }
}
