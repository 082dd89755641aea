use rand::Rng;

use super::nn::{interleave, zeros_var, Activation, Init, Linear, Mlp2};
use crate::autograd::{Graph, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{PatchSet, Point};

/// Neighborhood coordinates of a batch of patch sets as `[B·N_s·K, 3]`,
/// with the matching centroids as `[B·N_s, 3]`.
pub fn patch_tensors<T: Real>(patches: &[&PatchSet]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = patches
        .first()
        .ok_or_else(|| Error::Argument("empty patch batch".into()))?;
    let (n, k) = (first.n_groups(), first.k);
    let mut neigh = Vec::with_capacity(patches.len() * n * k * 3);
    let mut cents = Vec::with_capacity(patches.len() * n * 3);
    for p in patches {
        if p.n_groups() != n || p.k != k {
            return Err(Error::Shape(format!(
                "patch sets of {}x{} and {}x{} in one batch",
                n,
                k,
                p.n_groups(),
                p.k
            )));
        }
        for i in 0..n {
            for q in p.neighborhood(i) {
                neigh.extend(q.iter().map(|&v| T::from_f32(v)));
            }
        }
        for c in &p.centroids {
            cents.extend(c.iter().map(|&v| T::from_f32(v)));
        }
    }
    Ok((
        Tensor::new(vec![patches.len() * n * k, 3], neigh)?,
        Tensor::new(vec![patches.len() * n, 3], cents)?,
    ))
}

/// Per-point MLP Φ (3 → C/2 → C, ReLU) followed by a max over each
/// neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedder {
    pub mlp: Mlp2,
    pub width: usize,
}

impl PatchEmbedder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        let hidden = (width / 2).max(1);
        let mlp = Mlp2::new(store, name, [3, hidden, width], Activation::Relu, Init::FanIn, rng)?;
        Ok(PatchEmbedder { mlp, width })
    }

    /// `neigh` is `[groups·k, 3]`; returns `[groups, C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, neigh: Var, k: usize) -> Result<Var> {
        let rows = g.shape(neigh)[0];
        if k == 0 || rows % k != 0 {
            return Err(Error::Shape(format!("{rows} points do not split into groups of {k}")));
        }
        let h = self.mlp.forward(g, store, neigh)?;
        let h = g.reshape(h, &[rows / k, k, self.width])?;
        Ok(g.max_over_axis(h, 1)?.0)
    }
}

/// Indices of the `k` nearest centroids of every centroid (itself
/// included), ties by lower index, offset into a batch of `n`-token rows.
pub fn token_neighbors(centroids: &[&[Point]], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut row0 = 0;
    for cs in centroids {
        for a in cs.iter() {
            let mut order: Vec<(f32, usize)> = cs
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    let d: f32 = (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum();
                    (d, j)
                })
                .collect();
            order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            out.extend(order.iter().take(k).map(|&(_, j)| row0 + j));
        }
        row0 += cs.len();
    }
    out
}

/// One edge-feature pass over the token graph: for each token `x_i` and
/// its neighbours `x_j`, `max_j GELU(W [x_i; x_j − x_i] + b)`, added back
/// to `x_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRefine {
    pub lin: Linear,
    pub width: usize,
}

impl EdgeRefine {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Result<Self> {
        let lin = Linear::new(store, format!("{name}.edge"), 2 * width, width, Init::FanIn, rng)?;
        Ok(EdgeRefine { lin, width })
    }

    /// `nbrs` holds `k` row indices per row of `x` (see [`token_neighbors`]).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        x: Var,
        nbrs: &[usize],
        k: usize,
    ) -> Result<Var> {
        let rows = g.shape(x)[0];
        if nbrs.len() != rows * k {
            return Err(Error::Shape(format!(
                "{} neighbour indices for {rows} rows of {k}",
                nbrs.len()
            )));
        }
        let centre: Vec<usize> = (0..rows).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let xi = g.gather_rows(x, &centre)?;
        let xj = g.gather_rows(x, nbrs)?;
        let rel = g.sub(xj, xi)?;
        let e = g.concat(&[xi, rel], 1)?;
        let e = self.lin.forward(g, store, e)?;
        let e = g.gelu(e);
        let e = g.reshape(e, &[rows, k, self.width])?;
        let (m, _) = g.max_over_axis(e, 1)?;
        g.add(x, m)
    }
}

/// Which centroid coordinates feed the positional MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosMode {
    None,
    Xy,
    Xyz,
}

impl PosMode {
    pub fn name(self) -> &'static str {
        match self {
            PosMode::None => "none",
            PosMode::Xy => "2d-xy",
            PosMode::Xyz => "3d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PosMode::None),
            "2d-xy" => Ok(PosMode::Xy),
            "3d" => Ok(PosMode::Xyz),
            _ => Err(Error::Config(format!("unknown positional mode {s:?}"))),
        }
    }
}

/// Positional MLP ψ (3 → C → C, GELU) plus a learned class-token position.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedder {
    pub mlp: Mlp2,
    pub cls_pos: String,
    pub mode: PosMode,
    pub width: usize,
}

impl PositionalEmbedder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        mode: PosMode,
        rng: &mut R,
    ) -> Result<Self> {
        let mlp = Mlp2::new(store, name, [3, width, width], Activation::Gelu, Init::FanIn, rng)?;
        let cls_pos = format!("{name}.cls_pos");
        store.normal(cls_pos.clone(), vec![1, width], 0.02, rng)?;
        Ok(PositionalEmbedder {
            mlp,
            cls_pos,
            mode,
            width,
        })
    }

    /// Positions of `[B·N, 3]` centroids, `[B·N, C]`; with `cls` a class
    /// row is prepended per sample, giving `[B·(N+1), C]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        centroids: &Tensor<T>,
        batch: usize,
        cls: bool,
    ) -> Result<Var> {
        let rows = centroids.rows();
        if self.mode == PosMode::None {
            let n = if cls { rows + batch } else { rows };
            return zeros_var(g, &[n, self.width]);
        }
        let mut c = centroids.clone();
        if self.mode == PosMode::Xy {
            let zeroed: Vec<T> = c
                .data()
                .chunks(3)
                .flat_map(|p| [p[0], p[1], T::zero()])
                .collect();
            c = Tensor::new(vec![rows, 3], zeroed)?;
        }
        let cv = g.constant(c);
        let pos = self.mlp.forward(g, store, cv)?;
        if !cls {
            return Ok(pos);
        }
        let cp = g.param(store, &self.cls_pos)?;
        interleave(g, pos, cp, batch, true)
    }
}
