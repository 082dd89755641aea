//! Desk-scale stand-in for an image-pretrained transformer.
//!
//! The stack is pretrained by masked patch reconstruction on procedural
//! 16×16 grayscale textures cut into sixteen 4×4 patches, then handed out
//! without its pixel embedding and head.

use std::f32::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::nn::{Init, LayerNorm, Linear};
use super::transformer::{Pass, StackConfig, TransformerStack};
use crate::autograd::{cosine_lr, AdamW, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 16;
pub const PATCH_SIDE: usize = 4;
const GRID: usize = IMAGE_SIDE / PATCH_SIDE;
const TOKENS: usize = GRID * GRID;
const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE;
const MASKED: usize = TOKENS / 2;
const EVAL_IMAGES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Checker,
    Stripes,
    Blobs,
}

/// A random image of the given texture family, row-major, values in [0, 1].
pub fn render_texture<R: Rng + ?Sized>(kind: Texture, rng: &mut R) -> Vec<f32> {
    let s = IMAGE_SIDE;
    let mut img = vec![0f32; s * s];
    match kind {
        Texture::Checker => {
            let period = rng.random_range(2..=6);
            let (dx, dy) = (rng.random_range(0..period), rng.random_range(0..period));
            let (lo, hi) = (rng.random_range(0.0..0.4), rng.random_range(0.6..1.0));
            for y in 0..s {
                for x in 0..s {
                    let on = ((x + dx) / period + (y + dy) / period) % 2 == 0;
                    img[y * s + x] = if on { hi } else { lo };
                }
            }
        }
        Texture::Stripes => {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.3..1.2);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (c, sn) = (angle.cos(), angle.sin());
            for y in 0..s {
                for x in 0..s {
                    let u = x as f32 * c + y as f32 * sn;
                    img[y * s + x] = 0.5 + 0.5 * (freq * u + phase).sin();
                }
            }
        }
        Texture::Blobs => {
            let n = rng.random_range(1..=3);
            for _ in 0..n {
                let (cx, cy) = (rng.random_range(0.0..s as f32), rng.random_range(0.0..s as f32));
                let r = rng.random_range(1.5..4.0);
                for y in 0..s {
                    for x in 0..s {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        img[y * s + x] += (-d2 / (2.0 * r * r)).exp();
                    }
                }
            }
            for v in img.iter_mut() {
                *v = v.min(1.0);
            }
        }
    }
    img
}

fn random_image<R: Rng + ?Sized>(rng: &mut R) -> Vec<f32> {
    let kind = [Texture::Checker, Texture::Stripes, Texture::Blobs][rng.random_range(0..3)];
    render_texture(kind, rng)
}

/// Rearranges an image into `TOKENS` rows of `PATCH_DIM` centred pixels.
fn patchify(img: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(img.len());
    for gy in 0..GRID {
        for gx in 0..GRID {
            for py in 0..PATCH_SIDE {
                for px in 0..PATCH_SIDE {
                    let (y, x) = (gy * PATCH_SIDE + py, gx * PATCH_SIDE + px);
                    out.push(img[y * IMAGE_SIDE + x] - 0.5);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoundationConfig {
    pub stack: StackConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FoundationConfig {
    fn default() -> Self {
        FoundationConfig {
            stack: StackConfig::new(96, 6, 4),
            steps: 300,
            batch: 16,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// A pretrained stack whose parameters are named relative to the stack
/// (`blocks.0.attn.qkv.w`, ..., `norm.bias`).
#[derive(Clone, Debug)]
pub struct Foundation {
    pub stack: TransformerStack,
    pub store: ParamStore,
    /// Masked reconstruction loss on a fixed held-out batch before and
    /// after pretraining.
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct Scaffold {
    stack: TransformerStack,
    embed: Linear,
    pos: String,
    mask_token: String,
    head_norm: LayerNorm,
    head: Linear,
}

impl Scaffold {
    /// Mean squared pixel error over masked patches.
    fn loss(&self, g: &mut Graph<f32>, store: &ParamStore, images: &[Vec<f32>], masks: &[Vec<usize>], pass: &mut Pass) -> Result<crate::autograd::Var> {
        let b = images.len();
        let pix: Vec<f32> = images.iter().flat_map(|im| patchify(im)).collect();
        let x = g.constant(Tensor::new(vec![b * TOKENS, PATCH_DIM], pix)?);
        let e = self.embed.forward(g, store, x)?;
        let mt = g.param(store, &self.mask_token)?;
        let with_mask = g.concat(&[e, mt], 0)?;
        let mut idx: Vec<usize> = (0..b * TOKENS).collect();
        let mut masked_rows = Vec::with_capacity(b * MASKED);
        for (i, m) in masks.iter().enumerate() {
            for &t in m {
                idx[i * TOKENS + t] = b * TOKENS;
                masked_rows.push(i * TOKENS + t);
            }
        }
        let h = g.gather_rows(with_mask, &idx)?;
        let pos1 = g.param(store, &self.pos)?;
        let pos = g.gather_rows(pos1, &(0..b * TOKENS).map(|r| r % TOKENS).collect::<Vec<_>>())?;
        let h = g.add(h, pos)?;
        let h = self.stack.forward(g, store, h, pos, b, None, pass)?;
        let h = self.stack.final_norm(g, store, h)?;
        let h = self.head_norm.forward(g, store, h)?;
        let h = g.gather_rows(h, &masked_rows)?;
        let y = self.head.forward(g, store, h)?;
        let target = g.gather_rows(x, &masked_rows)?;
        let d = g.sub(y, target)?;
        let d2 = g.mul(d, d)?;
        Ok(g.mean(d2))
    }
}

fn draw_masks<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| {
            let mut m = sample(rng, TOKENS, MASKED).into_vec();
            m.sort_unstable();
            m
        })
        .collect()
}

/// Pretrains a transformer stack on procedural textures. The result depends
/// only on `cfg`, so equal configs give bit-identical stacks.
pub fn make_surrogate_foundation(cfg: &FoundationConfig) -> Result<Foundation> {
    if cfg.batch == 0 {
        return Err(Error::Config("foundation batch must be positive".into()));
    }
    let c = cfg.stack.width;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let stack = TransformerStack::new(&mut store, "", StackConfig { drop_path: 0.0, ..cfg.stack }, &mut rng)?;
    let init = Init::Normal(0.02);
    let sc = Scaffold {
        embed: Linear::new(&mut store, "pretrain.embed", PATCH_DIM, c, init, &mut rng)?,
        pos: "pretrain.pos".into(),
        mask_token: "pretrain.mask_token".into(),
        head_norm: LayerNorm::new(&mut store, "pretrain.head_norm", c)?,
        head: Linear::new(&mut store, "pretrain.head", c, PATCH_DIM, init, &mut rng)?,
        stack,
    };
    store.normal(sc.pos.clone(), vec![TOKENS, c], 0.02, &mut rng)?;
    store.normal(sc.mask_token.clone(), vec![1, c], 0.02, &mut rng)?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f00d);
    let eval_images: Vec<Vec<f32>> = (0..EVAL_IMAGES).map(|_| random_image(&mut eval_rng)).collect();
    let eval_masks = draw_masks(EVAL_IMAGES, &mut eval_rng);
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = sc.loss(&mut g, store, &eval_images, &eval_masks, &mut Pass::Eval)?;
        Ok(g.value(l).item() as f64)
    };

    let initial_loss = eval(&store)?;
    let mut opt = AdamW::new(0.05);
    let warmup = (cfg.steps / 10) as u64;
    for step in 0..cfg.steps {
        let images: Vec<Vec<f32>> = (0..cfg.batch).map(|_| random_image(&mut rng)).collect();
        let masks = draw_masks(cfg.batch, &mut rng);
        let mut g = Graph::new();
        let l = sc.loss(&mut g, &store, &images, &masks, &mut Pass::Eval)?;
        g.backward(l)?;
        let lr = cosine_lr(step as u64, warmup, cfg.steps as u64, cfg.lr)?;
        opt.step(&mut store, &g.param_grads(), lr)?;
    }
    let final_loss = eval(&store)?;

    let mut kept = ParamStore::new();
    for (name, p) in store.iter().filter(|(n, _)| !n.starts_with("pretrain.")) {
        kept.insert(name, p.shape.clone(), p.data.clone())?;
    }
    Ok(Foundation {
        stack: sc.stack,
        store: kept,
        initial_loss,
        final_loss,
    })
}
