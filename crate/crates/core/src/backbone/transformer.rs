use rand::{Rng, RngCore};

use super::nn::{interleave, rows_within, zeros_var, Init, LayerNorm, Linear};
use crate::autograd::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

const TRANSFORMER_STD: f32 = 0.02;

/// Whether a forward pass is stochastic (drop-path, dropout) or not.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Drop-path rate of the last block; earlier blocks ramp linearly from 0.
    pub drop_path: f64,
}

impl StackConfig {
    pub fn new(width: usize, depth: usize, heads: usize) -> Self {
        StackConfig {
            width,
            depth,
            heads,
            mlp_ratio: 4,
            drop_path: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(format!("degenerate transformer dims {self:?}")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop-path rate {} outside [0, 1)", self.drop_path)));
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub drop_path: f64,
}

/// Pre-norm transformer blocks plus a final LayerNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerStack {
    pub prefix: String,
    pub cfg: StackConfig,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl TransformerStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: StackConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let init = Init::Normal(TRANSFORMER_STD);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = join(prefix, &format!("blocks.{l}"));
            let drop_path = if cfg.depth > 1 {
                cfg.drop_path * l as f64 / (cfg.depth - 1) as f64
            } else {
                cfg.drop_path
            };
            blocks.push(Block {
                ln1: LayerNorm::new(store, format!("{p}.ln1"), c)?,
                qkv: Linear::new(store, format!("{p}.attn.qkv"), c, 3 * c, init, rng)?,
                proj: Linear::new(store, format!("{p}.attn.proj"), c, c, init, rng)?,
                ln2: LayerNorm::new(store, format!("{p}.ln2"), c)?,
                fc1: Linear::new(store, format!("{p}.mlp.fc1"), c, cfg.mlp_ratio * c, init, rng)?,
                fc2: Linear::new(store, format!("{p}.mlp.fc2"), cfg.mlp_ratio * c, c, init, rng)?,
                drop_path,
            });
        }
        let norm = LayerNorm::new(store, join(prefix, "norm"), c)?;
        Ok(TransformerStack {
            prefix: prefix.to_string(),
            cfg,
            blocks,
            norm,
        })
    }

    /// The same architecture addressed under another name prefix.
    pub fn renamed(&self, prefix: &str) -> Self {
        let swap = |name: &str| {
            let rest = if self.prefix.is_empty() {
                name
            } else {
                &name[self.prefix.len() + 1..]
            };
            join(prefix, rest)
        };
        let lin = |l: &Linear| Linear {
            name: swap(&l.name),
            ..l.clone()
        };
        let ln = |l: &LayerNorm| LayerNorm { name: swap(&l.name) };
        TransformerStack {
            prefix: prefix.to_string(),
            cfg: self.cfg,
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: ln(&b.ln1),
                    qkv: lin(&b.qkv),
                    proj: lin(&b.proj),
                    ln2: ln(&b.ln2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                    drop_path: b.drop_path,
                })
                .collect(),
            norm: ln(&self.norm),
        }
    }

    /// Pattern selecting every parameter of this stack.
    pub fn selector(&self) -> String {
        join(&self.prefix, "*")
    }

    /// Runs every block over `batch` sequences laid out row-wise in `h`,
    /// re-adding `pos` inside each block. With prompts, deep banks insert
    /// fresh prompts before each of their layers and drop those rows after
    /// it; shallow banks are appended once and their rows are returned.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        h: Var,
        pos: Var,
        batch: usize,
        prompts: Option<&PromptBank>,
        pass: &mut Pass,
    ) -> Result<Var> {
        let c = self.cfg.width;
        let shape = g.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != c || g.shape(pos) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "stack of width {c} given hidden {:?} and positions {:?}",
                shape,
                g.shape(pos)
            )));
        }
        if batch == 0 || shape[0] % batch != 0 {
            return Err(Error::Shape(format!("{} rows do not split into {batch} sequences", shape[0])));
        }
        let t = shape[0] / batch;
        let bank = prompts.filter(|p| p.count > 0);
        if let Some(p) = bank {
            if p.width != c {
                return Err(Error::Shape(format!("prompts of width {} for a stack of width {c}", p.width)));
            }
        }
        let (mut h, mut pos) = (h, pos);
        match bank {
            Some(p) if p.kind == PromptKind::Shallow => {
                let pv = g.param(store, &p.names[0])?;
                h = interleave(g, h, pv, batch, false)?;
                let z = zeros_var(g, &[p.count, c])?;
                pos = interleave(g, pos, z, batch, false)?;
                for b in &self.blocks {
                    h = self.block(g, store, b, h, pos, batch, pass)?;
                }
            }
            Some(p) => {
                let z = zeros_var(g, &[p.count, c])?;
                let pos_ext = interleave(g, pos, z, batch, false)?;
                let keep = rows_within(batch, t + p.count, 0, t);
                for (l, b) in self.blocks.iter().enumerate() {
                    if let Some(name) = p.names.get(l) {
                        let pv = g.param(store, name)?;
                        let x = interleave(g, h, pv, batch, false)?;
                        let x = self.block(g, store, b, x, pos_ext, batch, pass)?;
                        h = g.gather_rows(x, &keep)?;
                    } else {
                        h = self.block(g, store, b, h, pos, batch, pass)?;
                    }
                }
            }
            None => {
                for b in &self.blocks {
                    h = self.block(g, store, b, h, pos, batch, pass)?;
                }
            }
        }
        Ok(h)
    }

    /// The stack's final LayerNorm.
    pub fn final_norm<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, h: Var) -> Result<Var> {
        self.norm.forward(g, store, h)
    }

    #[allow(clippy::too_many_arguments)]
    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        b: &Block,
        h: Var,
        pos: Var,
        batch: usize,
        pass: &mut Pass,
    ) -> Result<Var> {
        let a = g.add(h, pos)?;
        let a = b.ln1.forward(g, store, a)?;
        let qkv = b.qkv.forward(g, store, a)?;
        let att = g.attention(qkv, batch, self.cfg.heads)?;
        let att = b.proj.forward(g, store, att)?;
        let att = drop_path(g, att, batch, b.drop_path, pass)?;
        let h1 = g.add(att, h)?;
        let m = b.ln2.forward(g, store, h1)?;
        let m = b.fc1.forward(g, store, m)?;
        let m = g.gelu(m);
        let m = b.fc2.forward(g, store, m)?;
        let m = drop_path(g, m, batch, b.drop_path, pass)?;
        g.add(m, h1)
    }
}

/// Zeroes a whole residual branch per sample with probability `rate`,
/// rescaling survivors by `1/(1-rate)`.
fn drop_path<T: Real>(g: &mut Graph<T>, x: Var, batch: usize, rate: f64, pass: &mut Pass) -> Result<Var> {
    let Pass::Train(rng) = pass else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x).to_vec();
    let per = shape[0] / batch * shape[1];
    let mut mask = Vec::with_capacity(batch * per);
    for _ in 0..batch {
        let keep = rng.random::<f64>() >= rate;
        let v = if keep { T::from_f64(1.0 / (1.0 - rate)) } else { T::zero() };
        mask.extend(std::iter::repeat_n(v, per));
    }
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    Shallow,
    Deep,
}

impl PromptKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(PromptKind::Shallow),
            "deep" => Ok(PromptKind::Deep),
            _ => Err(Error::Config(format!("unknown prompt type {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Shallow => "shallow",
            PromptKind::Deep => "deep",
        }
    }
}

/// Learnable prompt embeddings: `m` rows of width `C` per prompted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub kind: PromptKind,
    pub count: usize,
    pub width: usize,
    pub names: Vec<String>,
}

impl PromptBank {
    /// `layers` prompted layers for deep banks; shallow banks use one.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        kind: PromptKind,
        count: usize,
        width: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = match kind {
            PromptKind::Shallow => 1,
            PromptKind::Deep => layers,
        };
        let mut names = Vec::new();
        if count > 0 {
            for l in 0..layers {
                let name = format!("{prefix}.{l}");
                store.normal(name.clone(), vec![count, width], TRANSFORMER_STD, rng)?;
                names.push(name);
            }
        }
        Ok(PromptBank {
            kind,
            count,
            width,
            names,
        })
    }
}
