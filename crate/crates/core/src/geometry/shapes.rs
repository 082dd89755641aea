use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PointCloud;
use crate::error::{Error, Result};

/// The eight procedural shape classes; the discriminant is the class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere = 0,
    Cube = 1,
    Torus = 2,
    Cylinder = 3,
    Cone = 4,
    Pyramid = 5,
    Plane = 6,
    Helix = 7,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Pyramid,
        ShapeKind::Plane,
        ShapeKind::Helix,
    ];

    pub fn label(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Plane => "plane",
            ShapeKind::Helix => "helix",
        }
    }

    pub fn from_label(label: u32) -> Result<Self> {
        Self::ALL
            .get(label as usize)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown shape label {label}")))
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown shape kind {s:?}")))
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    loop {
        let v = [gauss(rng), gauss(rng), gauss(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|c| c / n);
        }
    }
}

fn in_disk<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..TAU);
    (r * a.cos(), r * a.sin())
}

fn in_triangle<R: Rng + ?Sized>(rng: &mut R, a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let (r1, r2) = (rng.random::<f64>().sqrt(), rng.random::<f64>());
    std::array::from_fn(|k| (1.0 - r1) * a[k] + r1 * (1.0 - r2) * b[k] + r1 * r2 * c[k])
}

fn tri_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let u: [f64; 3] = std::array::from_fn(|k| b[k] - a[k]);
    let v: [f64; 3] = std::array::from_fn(|k| c[k] - a[k]);
    let x = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Picks an index with probability proportional to `weights`.
fn pick<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Raw surface samples of one shape instance, before normalization. Shape
/// proportions are drawn from `rng` so that instances within a class vary.
pub fn sample_surface<R: Rng + ?Sized>(kind: ShapeKind, n: usize, rng: &mut R) -> Result<Vec<[f64; 3]>> {
    if n < 8 {
        return Err(Error::Argument(format!("shapes need at least 8 points, got {n}")));
    }
    let pts = match kind {
        ShapeKind::Sphere => {
            // Antipodal pairs plus, for odd n, a great-circle triangle, so the
            // centroid is exactly the centre and normalization keeps radii.
            let mut pts = Vec::with_capacity(n);
            if n % 2 == 1 {
                let u = unit_vector(rng);
                let mut w = unit_vector(rng);
                let d = u[0] * w[0] + u[1] * w[1] + u[2] * w[2];
                w = std::array::from_fn(|k| w[k] - d * u[k]);
                let wn = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
                w = w.map(|c| c / wn);
                for j in 0..3 {
                    let a = TAU * j as f64 / 3.0;
                    pts.push(std::array::from_fn(|k| a.cos() * u[k] + a.sin() * w[k]));
                }
            }
            while pts.len() < n {
                let v = unit_vector(rng);
                pts.push(v);
                pts.push(v.map(|c| -c));
            }
            pts
        }
        ShapeKind::Cube => (0..n)
            .map(|_| {
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
                p[axis] = sign;
                p
            })
            .collect(),
        ShapeKind::Torus => {
            let big = 1.0;
            let small = rng.random_range(0.25..0.45);
            let mut pts = Vec::with_capacity(n);
            while pts.len() < n {
                let (u, v) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
                // area element is proportional to (R + r cos v)
                if rng.random::<f64>() * (big + small) > big + small * v.cos() {
                    continue;
                }
                let ring = big + small * v.cos();
                pts.push([ring * u.cos(), ring * u.sin(), small * v.sin()]);
            }
            pts
        }
        ShapeKind::Cylinder => {
            let r = rng.random_range(0.4..0.7);
            let h = rng.random_range(0.6..1.0);
            let weights = [TAU * r * 2.0 * h, PI * r * r, PI * r * r];
            (0..n)
                .map(|_| match pick(rng, &weights) {
                    0 => {
                        let a = rng.random_range(0.0..TAU);
                        [r * a.cos(), r * a.sin(), rng.random_range(-h..=h)]
                    }
                    cap => {
                        let (x, y) = in_disk(rng, r);
                        [x, y, if cap == 1 { h } else { -h }]
                    }
                })
                .collect()
        }
        ShapeKind::Cone => {
            let r: f64 = rng.random_range(0.5..0.9);
            let height = rng.random_range(1.0..1.6);
            let slant: f64 = (r * r + height * height).sqrt();
            let weights = [PI * r * slant, PI * r * r];
            (0..n)
                .map(|_| match pick(rng, &weights) {
                    0 => {
                        let t = rng.random::<f64>().sqrt();
                        let a = rng.random_range(0.0..TAU);
                        [r * t * a.cos(), r * t * a.sin(), height * (1.0 - t)]
                    }
                    _ => {
                        let (x, y) = in_disk(rng, r);
                        [x, y, 0.0]
                    }
                })
                .collect()
        }
        ShapeKind::Pyramid => {
            let a = rng.random_range(0.6..1.0);
            let height = rng.random_range(0.8..1.4);
            let apex = [0.0, 0.0, height];
            let base = [[-a, -a, 0.0], [a, -a, 0.0], [a, a, 0.0], [-a, a, 0.0]];
            let mut tris: Vec<[[f64; 3]; 3]> =
                (0..4).map(|i| [base[i], base[(i + 1) % 4], apex]).collect();
            tris.push([base[0], base[1], base[2]]);
            tris.push([base[0], base[2], base[3]]);
            let weights: Vec<f64> = tris.iter().map(|t| tri_area(t[0], t[1], t[2])).collect();
            (0..n)
                .map(|_| {
                    let t = tris[pick(rng, &weights)];
                    in_triangle(rng, t[0], t[1], t[2])
                })
                .collect()
        }
        ShapeKind::Plane => {
            let b = rng.random_range(0.5..1.0);
            (0..n)
                .map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-b..=b), 0.0])
                .collect()
        }
        ShapeKind::Helix => {
            let radius = rng.random_range(0.6..0.8);
            let turns = rng.random_range(2.0..3.5);
            let tube = 0.05;
            (0..n)
                .map(|_| {
                    let t = rng.random::<f64>();
                    let a = TAU * turns * t;
                    let c = [radius * a.cos(), radius * a.sin(), 2.0 * t - 1.0];
                    std::array::from_fn(|k| c[k] + tube * gauss(rng))
                })
                .collect()
        }
    };
    Ok(pts)
}

/// One normalized instance of `kind` with `n` points and its class label.
pub fn gen_shape<R: Rng + ?Sized>(kind: ShapeKind, n: usize, rng: &mut R) -> Result<PointCloud> {
    let pts = sample_surface(kind, n, rng)?
        .into_iter()
        .map(|p| p.map(|c| c as f32))
        .collect();
    Ok(PointCloud::new(pts, Some(kind.label()))?.normalized())
}
