use rand::Rng;

use crate::autograd::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// How a fresh weight matrix is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std (transformer layers).
    Normal(f32),
    /// Uniform in ±1/√fan_in (small coordinate MLPs).
    FanIn,
    Zeros,
}

/// Affine map `x·w + b` with `w: [inp, out]`, stored as `{name}.w`/`{name}.b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: impl Into<String>,
        inp: usize,
        out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let name = name.into();
        let w = format!("{name}.w");
        match init {
            Init::Normal(std) => store.normal(w, vec![inp, out], std, rng)?,
            Init::FanIn => store.uniform(w, vec![inp, out], 1.0 / (inp as f32).sqrt(), rng)?,
            Init::Zeros => store.zeros(w, vec![inp, out])?,
        }
        store.zeros(format!("{name}.b"), vec![out])?;
        Ok(Linear { name, inp, out })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let b = g.param(store, &format!("{}.b", self.name))?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub name: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: impl Into<String>, width: usize) -> Result<Self> {
        let name = name.into();
        store.ones(format!("{name}.gain"), vec![width])?;
        store.zeros(format!("{name}.bias"), vec![width])?;
        Ok(LayerNorm { name })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, &format!("{}.gain", self.name))?;
        let bias = g.param(store, &format!("{}.bias", self.name))?;
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two linear layers with an activation in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Mlp2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        act: Activation,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp2 {
            fc1: Linear::new(store, format!("{name}.fc1"), dims[0], dims[1], init, rng)?,
            fc2: Linear::new(store, format!("{name}.fc2"), dims[1], dims[2], init, rng)?,
            act,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = activate(g, h, self.act);
        self.fc2.forward(g, store, h)
    }
}

pub fn activate<T: Real>(g: &mut Graph<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

/// Row index list laying out `batch` sequences as `[extra; own rows]` where
/// `extra` rows live after the `batch·n` per-sample rows of a concatenation.
pub(crate) fn prepend_rows(batch: usize, n: usize, extra: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * (n + extra));
    for b in 0..batch {
        idx.extend(batch * n..batch * n + extra);
        idx.extend(b * n..(b + 1) * n);
    }
    idx
}

/// Like [`prepend_rows`] but places the extra rows after each sequence.
pub(crate) fn append_rows(batch: usize, n: usize, extra: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(batch * (n + extra));
    for b in 0..batch {
        idx.extend(b * n..(b + 1) * n);
        idx.extend(batch * n..batch * n + extra);
    }
    idx
}

/// Rows `[start, start + len)` of every length-`n` sequence.
pub(crate) fn rows_within(batch: usize, n: usize, start: usize, len: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| b * n + start..b * n + start + len)
        .collect()
}

/// `[batch·n, c]` rows of `x` interleaved with a shared `[extra, c]` block
/// placed before (`front`) or after each sequence.
pub(crate) fn interleave<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    shared: Var,
    batch: usize,
    front: bool,
) -> Result<Var> {
    let n = g.shape(x)[0] / batch;
    let extra = g.shape(shared)[0];
    let cat = g.concat(&[x, shared], 0)?;
    let idx = if front {
        prepend_rows(batch, n, extra)
    } else {
        append_rows(batch, n, extra)
    };
    g.gather_rows(cat, &idx)
}

pub(crate) fn zeros_var<T: Real>(g: &mut Graph<T>, shape: &[usize]) -> Result<Var> {
    Ok(g.constant(Tensor::zeros(shape.to_vec())?))
}
