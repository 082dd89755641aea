//! Point tokenization, positional embedding and the transformer stack.
//!
//! A cloud is grouped into patches ([`crate::geometry::group`]), each patch
//! is embedded into one token by a shared per-point MLP and a max-pool
//! ([`PatchEmbedder`]), and the tokens, led by a class token, run through
//! pre-norm transformer blocks that re-add the positional embedding of the
//! patch centroids at every block ([`Encoder`]).
//!
//! All forward passes are generic over the tape's element type so the same
//! model can be rechecked in `f64`.

mod embed;
mod foundation;
mod nn;
mod transformer;

pub use embed::{patch_tensors, token_neighbors, EdgeRefine, PatchEmbedder, PosMode, PositionalEmbedder};
pub use foundation::{make_surrogate_foundation, render_texture, Foundation, FoundationConfig, Texture};
pub use nn::{activate, Activation, Init, LayerNorm, Linear, Mlp2, LN_EPS};
pub use transformer::{Block, Pass, PromptBank, PromptKind, StackConfig, TransformerStack};

pub(crate) use nn::{interleave, rows_within};
pub(crate) use transformer::join;

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Class token, positional embedder and transformer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub cls_token: String,
    pub pos: PositionalEmbedder,
    pub stack: TransformerStack,
}

impl Encoder {
    /// Creates the class token and positional embedder under `prefix`
    /// around an existing stack.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        stack: TransformerStack,
        mode: PosMode,
        rng: &mut R,
    ) -> Result<Self> {
        let c = stack.cfg.width;
        let cls_token = join(prefix, "cls_token");
        store.normal(cls_token.clone(), vec![1, c], 0.02, rng)?;
        let pos = PositionalEmbedder::new(store, &join(prefix, "pos"), c, mode, rng)?;
        Ok(Encoder {
            cls_token,
            pos,
            stack,
        })
    }

    pub fn width(&self) -> usize {
        self.stack.cfg.width
    }

    /// Encodes `[B·N, C]` tokens with their `[B·N, 3]` centroids.
    ///
    /// Returns the last hidden states (before the final norm) laid out per
    /// sample as `[CLS; tokens]`, followed by the prompt rows of a shallow
    /// bank, together with the positional rows `[B·(N+1), C]`.
    #[allow(clippy::too_many_arguments)]
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        tokens: Var,
        centroids: &Tensor<T>,
        batch: usize,
        prompts: Option<&PromptBank>,
        pass: &mut Pass,
    ) -> Result<(Var, Var)> {
        let c = self.width();
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != c {
            return Err(Error::Shape(format!("tokens {shape:?} for an encoder of width {c}")));
        }
        if centroids.shape() != [shape[0], 3] {
            return Err(Error::Shape(format!(
                "{:?} centroids for {} tokens",
                centroids.shape(),
                shape[0]
            )));
        }
        let pos = self.pos.forward(g, store, centroids, batch, true)?;
        let cls = g.param(store, &self.cls_token)?;
        let h0 = interleave(g, tokens, cls, batch, true)?;
        let h0 = g.add(h0, pos)?;
        let h = self.stack.forward(g, store, h0, pos, batch, prompts, pass)?;
        Ok((h, pos))
    }
}

#[cfg(test)]
mod tests;
