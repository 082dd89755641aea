use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::sample_seed;
use crate::geometry::io::{read_cloud, read_manifest, write_cloud, write_manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::geometry::{
    augment, gen_shape, Augmentation,
    PointCloud, ShapeKind,
};

pub const N_CLASSES: usize = ShapeKind::ALL.len();
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub val: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[PointCloud]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Argument(format!("unknown split {name:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Train / val / test sizes for `n` items of one class (70 / 15 / 15),
/// keeping at least one item in each split once there are three.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let floor = usize::from(n >= 3);
    let train = ((0.7 * n as f64).round() as usize).min(n - 2 * floor);
    let val = ((0.15 * n as f64).round() as usize).clamp(floor, n - train - floor);
    [train, val, n - train - val]
}

/// One generated cloud with its file name and split.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub file: String,
    pub split: usize,
    pub cloud: PointCloud,
}

/// The synthetic shape dataset, generated in memory. Each cloud depends only
/// on `(seed, class, index)`; `pose` is applied once per cloud.
pub fn generate(n_per_class: usize, points: usize, pose: Augmentation, seed: u64) -> Result<Vec<Generated>> {
    let mut out = Vec::with_capacity(N_CLASSES * n_per_class);
    for kind in ShapeKind::ALL {
        let class = kind.label() as usize;
        let mut order: Vec<usize> = (0..n_per_class).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(seed, usize::MAX - class)));
        let sizes = split_sizes(n_per_class);
        let mut split_of = vec![0; n_per_class];
        for (rank, &i) in order.iter().enumerate() {
            split_of[i] = if rank < sizes[0] {
                0
            } else if rank < sizes[0] + sizes[1] {
                1
            } else {
                2
            };
        }
        for (i, &split) in split_of.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, class * n_per_class + i));
            let cloud = gen_shape(kind, points, &mut rng)?;
            let cloud = augment(&cloud, &mut rng, pose);
            out.push(Generated {
                file: format!("{}_{i:04}.xyz", kind.name()),
                split,
                cloud,
            });
        }
    }
    Ok(out)
}

pub fn in_memory(n_per_class: usize, points: usize, pose: Augmentation, seed: u64) -> Result<Dataset> {
    let mut ds = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for g in generate(n_per_class, points, pose, seed)? {
        match g.split {
            0 => ds.train.push(g.cloud),
            1 => ds.val.push(g.cloud),
            _ => ds.test.push(g.cloud),
        }
    }
    Ok(ds)
}

/// Writes every cloud under `dir/clouds/` and one manifest per split.
/// Returns the number of cloud files written.
pub fn write_dataset(dir: &Path, n_per_class: usize, points: usize, pose: Augmentation, seed: u64) -> Result<usize> {
    let clouds = dir.join("clouds");
    std::fs::create_dir_all(&clouds).map_err(|e| Error::io(&clouds, e))?;
    let generated = generate(n_per_class, points, pose, seed)?;
    let mut manifests: [Vec<ManifestEntry>; 3] = Default::default();
    for g in &generated {
        write_cloud(&clouds.join(&g.file), &g.cloud)?;
        manifests[g.split].push(ManifestEntry {
            path: PathBuf::from("clouds").join(&g.file),
            label: g.cloud.label().expect("generated clouds are labelled"),
        });
    }
    for (name, entries) in SPLITS.iter().zip(&manifests) {
        write_manifest(&manifest_path(dir, name), entries)?;
    }
    Ok(generated.len())
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.txt"))
}

/// Reads one split. A cloud whose own label disagrees with its manifest
/// entry, or a label outside the known classes, is a data error.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<PointCloud>> {
    let entries = read_manifest(&manifest_path(dir, split))?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.label as usize >= N_CLASSES {
            return Err(Error::Data(format!(
                "{}: label {} outside the {N_CLASSES} classes",
                e.path.display(),
                e.label
            )));
        }
        let cloud = read_cloud(&e.path)?;
        match cloud.label() {
            Some(l) if l != e.label => {
                return Err(Error::Data(format!(
                    "{}: file label {l} but manifest label {}",
                    e.path.display(),
                    e.label
                )))
            }
            _ => out.push(cloud.with_label(Some(e.label))),
        }
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: load_split(dir, "train")?,
        val: load_split(dir, "val")?,
        test: load_split(dir, "test")?,
    })
}
