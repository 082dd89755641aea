use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rotation {
    /// Uniform over SO(3).
    Full,
    /// Uniform angle about the z axis.
    ZAxis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    None,
    /// Isotropic scale in [0.8, 1.25] and translation in [-0.1, 0.1]^3.
    ScaleTranslate,
    Rotate(Rotation),
}

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);
pub const TRANSLATE_RANGE: f64 = 0.1;

pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R, op: Augmentation) -> PointCloud {
    let map = |f: &dyn Fn([f64; 3]) -> [f64; 3]| -> PointCloud {
        let pts = cloud
            .points()
            .iter()
            .map(|p| f(p.map(|c| c as f64)).map(|c| c as f32))
            .collect();
        PointCloud::new(pts, cloud.label()).expect("finite affine image of a valid cloud")
    };
    match op {
        Augmentation::None => cloud.clone(),
        Augmentation::ScaleTranslate => {
            let s = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
            let t: [f64; 3] =
                std::array::from_fn(|_| rng.random_range(-TRANSLATE_RANGE..=TRANSLATE_RANGE));
            map(&|p| [p[0] * s + t[0], p[1] * s + t[1], p[2] * s + t[2]])
        }
        Augmentation::Rotate(kind) => {
            let r = match kind {
                Rotation::Full => random_rotation(rng),
                Rotation::ZAxis => {
                    let a = rng.random_range(0.0..std::f64::consts::TAU);
                    let (s, c) = a.sin_cos();
                    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
                }
            };
            map(&|p| std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2]))
        }
    }
}

/// Rotation matrix from a uniformly random unit quaternion.
pub(crate) fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter_mut().for_each(|v| *v /= n);
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}
