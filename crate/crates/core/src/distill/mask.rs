use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStrategy {
    /// A uniformly random subset of tokens.
    Random,
    /// The tokens whose centroids are nearest to a random anchor centroid.
    Block,
}

impl MaskStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MaskStrategy::Random),
            "block" => Ok(MaskStrategy::Block),
            _ => Err(Error::Config(format!("unknown mask strategy {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::Random => "random",
            MaskStrategy::Block => "block",
        }
    }
}

/// Per-token mask of one sample; `true` means masked.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub mask: Vec<bool>,
    pub strategy: MaskStrategy,
    pub ratio: f64,
}

impl MaskSpec {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }
}

/// Number of masked tokens for a ratio, rounding half away from zero.
pub fn mask_count(n_s: usize, ratio: f64) -> usize {
    ((ratio * n_s as f64).round() as usize).min(n_s)
}

/// Draws a mask over `n_s` tokens. Block masks need the token centroids.
pub fn gen_mask<R: Rng + ?Sized>(
    n_s: usize,
    strategy: MaskStrategy,
    ratio: f64,
    centroids: Option<&[Point]>,
    rng: &mut R,
) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let count = mask_count(n_s, ratio);
    let mut mask = vec![false; n_s];
    match strategy {
        MaskStrategy::Random => {
            for i in rand::seq::index::sample(rng, n_s, count) {
                mask[i] = true;
            }
        }
        MaskStrategy::Block => {
            let c = centroids.ok_or_else(|| Error::Argument("block masking needs centroids".into()))?;
            if c.len() != n_s {
                return Err(Error::Argument(format!("{} centroids for {n_s} tokens", c.len())));
            }
            if n_s > 0 {
                let anchor = rng.random_range(0..n_s);
                for i in nearest_to(c, anchor).into_iter().take(count) {
                    mask[i] = true;
                }
            }
        }
    }
    Ok(MaskSpec { mask, strategy, ratio })
}

/// Token indices by distance to `anchor`'s centroid, ties by index.
pub fn nearest_to(centroids: &[Point], anchor: usize) -> Vec<usize> {
    let a = centroids[anchor];
    let d = |p: &Point| (0..3).map(|k| (p[k] as f64 - a[k] as f64).powi(2)).sum::<f64>();
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&i, &j| d(&centroids[i]).total_cmp(&d(&centroids[j])).then(i.cmp(&j)));
    order
}

/// Mask strategy and ratio of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    pub ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            strategy: MaskStrategy::Random,
            ratio: 0.75,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }

    /// One independent mask per sample.
    pub fn draw<R: Rng + ?Sized>(&self, centroids: &[&[Point]], rng: &mut R) -> Result<Vec<MaskSpec>> {
        centroids
            .iter()
            .map(|c| gen_mask(c.len(), self.strategy, self.ratio, Some(c), rng))
            .collect()
    }
}
