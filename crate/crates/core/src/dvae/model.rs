use rand::Rng;

use super::schedule::{argmax, gumbel_softmax, kl_to_uniform, HARD_FROM_TAU};
use crate::autograd::{ChamferKind, Graph, ParamStore, Real, Tensor, Var};
use crate::backbone::{
    rows_within, token_neighbors, Activation, EdgeRefine, Encoder, Foundation, Init, Linear, Mlp2, Pass,
    PatchEmbedder, PosMode, PromptBank, PromptKind, StackConfig, TransformerStack,
};
use crate::data::PatchBatch;
use crate::error::{CheckpointError, Error, Result};

pub const PREFIX: &str = "dvae";

/// What stage I may update in the transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuningMode {
    /// Frozen stack with learnable prompts.
    Prompt,
    /// Frozen stack, no prompts.
    Frozen,
    /// Everything trainable, no prompts.
    Full,
}

impl TuningMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(TuningMode::Prompt),
            "frozen" => Ok(TuningMode::Frozen),
            "full" => Ok(TuningMode::Full),
            _ => Err(Error::Config(format!("unknown tuning mode {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TuningMode::Prompt => "prompt",
            TuningMode::Frozen => "frozen",
            TuningMode::Full => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DvaeConfig {
    pub stack: StackConfig,
    pub tuning: TuningMode,
    pub prompt_kind: PromptKind,
    pub prompt_count: usize,
    pub vocab: usize,
    /// Folding grid side; each patch decodes to `grid²` points.
    pub grid: usize,
    pub decoder_hidden: usize,
    /// Neighbours per token in the edge-refinement passes.
    pub edge_k: usize,
    pub pos_mode: PosMode,
    pub n_groups: usize,
    pub group_size: usize,
}

impl Default for DvaeConfig {
    fn default() -> Self {
        DvaeConfig {
            stack: StackConfig::new(96, 6, 4),
            tuning: TuningMode::Prompt,
            prompt_kind: PromptKind::Deep,
            prompt_count: 16,
            vocab: 512,
            grid: 4,
            decoder_hidden: 64,
            edge_k: 4,
            pos_mode: PosMode::Xyz,
            n_groups: 16,
            group_size: 16,
        }
    }
}

impl DvaeConfig {
    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocabulary of {} codes", self.vocab)));
        }
        if self.grid < 2 {
            return Err(Error::Config(format!("folding grid side {} < 2", self.grid)));
        }
        if self.decoder_hidden == 0 || self.edge_k == 0 || self.n_groups == 0 || self.group_size == 0 {
            return Err(Error::Config("decoder width, edge k and grouping sizes must be positive".into()));
        }
        if self.tuning == TuningMode::Prompt && self.prompt_count == 0 {
            return Err(Error::Config("prompt tuning needs at least one prompt".into()));
        }
        Ok(())
    }

    /// Prompts actually used: only prompt tuning has any.
    pub fn effective_prompts(&self) -> usize {
        match self.tuning {
            TuningMode::Prompt => self.prompt_count,
            _ => 0,
        }
    }
}

/// Two-stage folding decoder: a fixed 2D grid per patch is bent by an MLP
/// conditioned on the patch code, and bent again conditioned on the first
/// fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldDecoder {
    pub grid: usize,
    pub fold1_code: Linear,
    pub fold1_in: Linear,
    pub fold1_mid: Linear,
    pub fold1_out: Linear,
    pub fold2_code: Linear,
    pub fold2_in: Linear,
    pub fold2_mid: Linear,
    pub fold2_out: Linear,
}

impl FoldDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        hidden: usize,
        grid: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut lin = |name: &str, i: usize, o: usize| {
            Linear::new(store, format!("{prefix}.{name}"), i, o, Init::FanIn, rng)
        };
        Ok(FoldDecoder {
            grid,
            fold1_code: lin("fold1.code", width, hidden)?,
            fold1_in: lin("fold1.grid", 2, hidden)?,
            fold1_mid: lin("fold1.mid", hidden, hidden)?,
            fold1_out: lin("fold1.out", hidden, 3)?,
            fold2_code: lin("fold2.code", width, hidden)?,
            fold2_in: lin("fold2.point", 3, hidden)?,
            fold2_mid: lin("fold2.mid", hidden, hidden)?,
            fold2_out: lin("fold2.out", hidden, 3)?,
        })
    }

    /// The `grid²` points of a regular grid over `[-1, 1]²`, row-major.
    pub fn grid_points(&self) -> Vec<[f64; 2]> {
        let g = self.grid;
        let at = |i: usize| -1.0 + 2.0 * i as f64 / (g - 1) as f64;
        (0..g).flat_map(|y| (0..g).map(move |x| [at(x), at(y)])).collect()
    }

    /// `codes: [R, C]`, `centroids: [R, 3]` → `[R·grid², 3]` points.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        codes: Var,
        centroids: &Tensor<T>,
    ) -> Result<Var> {
        let rows = g.shape(codes)[0];
        if centroids.shape() != [rows, 3] {
            return Err(Error::Shape(format!(
                "{:?} centroids for {rows} codes",
                centroids.shape()
            )));
        }
        let gg = self.grid * self.grid;
        let rep: Vec<usize> = (0..rows).flat_map(|r| std::iter::repeat_n(r, gg)).collect();
        let tile: Vec<usize> = (0..rows).flat_map(|_| 0..gg).collect();
        let grid: Vec<T> = self
            .grid_points()
            .iter()
            .flat_map(|p| [T::from_f64(p[0]), T::from_f64(p[1])])
            .collect();
        let grid = g.constant(Tensor::new(vec![gg, 2], grid)?);

        // [code; grid]·W splits into a per-patch and a per-grid-point part.
        let a = self.fold1_code.forward(g, store, codes)?;
        let a = g.gather_rows(a, &rep)?;
        let b = self.fold1_in.forward(g, store, grid)?;
        let b = g.gather_rows(b, &tile)?;
        let h = g.add(a, b)?;
        let h = g.relu(h);
        let h = self.fold1_mid.forward(g, store, h)?;
        let h = g.relu(h);
        let f1 = self.fold1_out.forward(g, store, h)?;

        let a = self.fold2_code.forward(g, store, codes)?;
        let a = g.gather_rows(a, &rep)?;
        let b = self.fold2_in.forward(g, store, f1)?;
        let h = g.add(a, b)?;
        let h = g.relu(h);
        let h = self.fold2_mid.forward(g, store, h)?;
        let h = g.relu(h);
        let f2 = self.fold2_out.forward(g, store, h)?;

        let c: Vec<T> = rep.iter().flat_map(|&r| centroids.row(r).to_vec()).collect();
        let c = g.constant(Tensor::new(vec![rows * gg, 3], c)?);
        g.add(f2, c)
    }
}

/// Encoder-side outputs for a batch.
pub struct Encoded {
    /// Per-token latent features `[B·N_s, C]`, the distillation targets.
    pub features: Var,
    /// Tokenizer logits `[B·N_s, V]`.
    pub logits: Var,
    pub centroids: Tensor<f32>,
    pub neighbors: Vec<usize>,
}

/// Scalar loss and its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DvaeLoss {
    pub loss: Var,
    pub logits: Var,
    pub cd_coarse: f64,
    pub cd_fine: f64,
    pub kl: f64,
}

/// Reconstructions of a batch.
pub struct Reconstruction {
    pub coarse: Var,
    pub fine: Var,
}

/// The stage-I autoencoder around a transformer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct DvaeModel {
    pub cfg: DvaeConfig,
    pub pre_embed: PatchEmbedder,
    pub pre_refine: EdgeRefine,
    pub encoder: Encoder,
    pub prompts: PromptBank,
    pub post_refine: EdgeRefine,
    pub tokenizer: Linear,
    pub codebook: String,
    pub dec_refine: EdgeRefine,
    pub coarse_head: Mlp2,
    pub decoder: FoldDecoder,
}

impl DvaeModel {
    /// Builds a model with a randomly initialized stack; see
    /// [`DvaeModel::install_foundation`] and [`DvaeModel::apply_tuning`].
    pub fn new<R: Rng + ?Sized>(cfg: &DvaeConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.stack.width;
        let p = |s: &str| format!("{PREFIX}.{s}");
        let pre_embed = PatchEmbedder::new(store, &p("pre.embed"), c, rng)?;
        let pre_refine = EdgeRefine::new(store, &p("pre.refine"), c, rng)?;
        let stack = TransformerStack::new(store, &p("g2d"), StackConfig { drop_path: 0.0, ..cfg.stack }, rng)?;
        let encoder = Encoder::new(store, PREFIX, stack, cfg.pos_mode, rng)?;
        let layers = cfg.stack.depth;
        let prompts = PromptBank::new(store, &p("prompts"), cfg.prompt_kind, cfg.effective_prompts(), c, layers, rng)?;
        let post_refine = EdgeRefine::new(store, &p("post.refine"), c, rng)?;
        let tokenizer = Linear::new(store, p("tokenizer"), c, cfg.vocab, Init::FanIn, rng)?;
        let codebook = p("codebook");
        store.normal(codebook.clone(), vec![cfg.vocab, c], 1.0, rng)?;
        let dec_refine = EdgeRefine::new(store, &p("dec.refine"), c, rng)?;
        let coarse_head = Mlp2::new(store, &p("coarse"), [c, cfg.decoder_hidden, 3], Activation::Relu, Init::FanIn, rng)?;
        let decoder = FoldDecoder::new(store, &p("fold"), c, cfg.decoder_hidden, cfg.grid, rng)?;
        Ok(DvaeModel {
            cfg: *cfg,
            pre_embed,
            pre_refine,
            encoder,
            prompts,
            post_refine,
            tokenizer,
            codebook,
            dec_refine,
            coarse_head,
            decoder,
        })
    }

    /// Copies a pretrained stack's values into this model's stack.
    pub fn install_foundation(&self, store: &mut ParamStore, foundation: &Foundation) -> Result<()> {
        let prefix = &self.encoder.stack.prefix;
        let mut missing = Vec::new();
        let mut bad_shape = Vec::new();
        for (name, p) in foundation.store.iter() {
            match store.get_mut(&format!("{prefix}.{name}")) {
                None => missing.push(name.to_string()),
                Some(dst) if dst.shape != p.shape => bad_shape.push(name.to_string()),
                Some(dst) => dst.data.clone_from(&p.data),
            }
        }
        let expected = store.names().filter(|n| n.starts_with(&format!("{prefix}."))).count();
        if !missing.is_empty() || foundation.store.len() != expected {
            let mut offenders = missing;
            if offenders.is_empty() {
                offenders.push(format!("{} tensors for a {expected}-tensor stack", foundation.store.len()));
            }
            return Err(CheckpointError::NameMismatch { offenders }.into());
        }
        if !bad_shape.is_empty() {
            return Err(CheckpointError::ShapeMismatch { offenders: bad_shape }.into());
        }
        Ok(())
    }

    /// Sets frozen flags for the configured tuning mode.
    pub fn apply_tuning(&self, store: &mut ParamStore) -> Result<()> {
        store.thaw(&format!("{PREFIX}.*"))?;
        if self.cfg.tuning != TuningMode::Full {
            store.freeze(&self.encoder.stack.selector())?;
        }
        Ok(())
    }

    /// Freezes every parameter, as for use as a distillation teacher.
    pub fn freeze_all(&self, store: &mut ParamStore) -> Result<()> {
        store.freeze(&format!("{PREFIX}.*")).map(|_| ())
    }

    fn edge_k(&self) -> usize {
        self.cfg.edge_k.min(self.cfg.n_groups)
    }

    /// Teacher path up to the tokenizer; no sampling happens here.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, batch: &PatchBatch) -> Result<Encoded> {
        let b = batch.len();
        let (neigh, cents) = batch.tensors::<T>()?;
        let n_s = cents.rows() / b;
        let k = batch.patches[0].k;
        let nbrs = token_neighbors(&batch.centroids(), self.edge_k());
        let ek = self.edge_k();

        let nv = g.constant(neigh);
        let x = self.pre_embed.forward(g, store, nv, k)?;
        let x = self.pre_refine.forward(g, store, x, &nbrs, ek)?;
        let (h, _) = self.encoder.encode(g, store, x, &cents, b, Some(&self.prompts), &mut Pass::Eval)?;
        let h = self.encoder.stack.final_norm(g, store, h)?;
        let per = g.shape(h)[0] / b;
        let t = g.gather_rows(h, &rows_within(b, per, 1, n_s))?;
        let features = self.post_refine.forward(g, store, t, &nbrs, ek)?;
        let logits = self.tokenizer.forward(g, store, features)?;
        let centroids = Tensor::new(cents.shape().to_vec(), cents.to_f32_vec())?;
        Ok(Encoded {
            features,
            logits,
            centroids,
            neighbors: nbrs,
        })
    }

    /// Code vectors → coarse (one point per patch) and folded fine clouds.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        codes: Var,
        centroids: &Tensor<f32>,
        neighbors: &[usize],
    ) -> Result<Reconstruction> {
        let cents = Tensor::<T>::from_f32(centroids.shape().to_vec(), centroids.data())?;
        let d = self.dec_refine.forward(g, store, codes, neighbors, self.edge_k())?;
        let off = self.coarse_head.forward(g, store, d)?;
        let cv = g.constant(cents.clone());
        let coarse = g.add(off, cv)?;
        let fine = self.decoder.forward(g, store, d, &cents)?;
        Ok(Reconstruction { coarse, fine })
    }

    /// Soft (or straight-through hard) code mixtures `[R, V]·codebook`.
    pub fn sample_codes<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        logits: Var,
        tau: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let w = gumbel_softmax(g, logits, tau, rng, tau <= HARD_FROM_TAU)?;
        let cb = g.param(store, &self.codebook)?;
        g.matmul(w, cb)
    }

    /// Codebook rows of the most likely codes.
    pub fn argmax_codes<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, logits: Var) -> Result<(Var, Vec<usize>)> {
        let v = self.cfg.vocab;
        let ids: Vec<usize> = g.value(logits).data().chunks(v).map(argmax).collect();
        let cb = g.param(store, &self.codebook)?;
        Ok((g.gather_rows(cb, &ids)?, ids))
    }

    /// Reconstruction loss plus `beta`-weighted KL on one batch, with
    /// Gumbel-softmax sampled codes at temperature `tau`.
    pub fn loss<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        batch: &PatchBatch,
        tau: f64,
        beta: f64,
        rng: &mut R,
    ) -> Result<DvaeLoss> {
        let enc = self.encode(g, store, batch)?;
        let codes = self.sample_codes(g, store, enc.logits, tau, rng)?;
        let rec = self.decode(g, store, codes, &enc.centroids, &enc.neighbors)?;
        let (cd_coarse, cd_fine) = self.chamfer_parts(g, batch, &rec)?;
        let kl = kl_to_uniform(g, enc.logits)?;
        let rec_loss = g.add(cd_coarse, cd_fine)?;
        let loss = if beta == 0.0 {
            rec_loss
        } else {
            let w = g.scale(kl, beta);
            g.add(rec_loss, w)?
        };
        Ok(DvaeLoss {
            loss,
            logits: enc.logits,
            cd_coarse: g.value(cd_coarse).item().as_f64(),
            cd_fine: g.value(cd_fine).item().as_f64(),
            kl: g.value(kl).item().as_f64(),
        })
    }

    /// Batch means of CD-ℓ1 of the coarse and fine clouds against the
    /// batch's clouds.
    pub fn chamfer_parts<T: Real>(&self, g: &mut Graph<T>, batch: &PatchBatch, rec: &Reconstruction) -> Result<(Var, Var)> {
        let b = batch.len();
        let n_s = g.shape(rec.coarse)[0] / b;
        let n_f = g.shape(rec.fine)[0] / b;
        let mut coarse = Vec::with_capacity(b);
        let mut fine = Vec::with_capacity(b);
        for (i, cloud) in batch.clouds.iter().enumerate() {
            let gt: Vec<T> = cloud.points().iter().flatten().map(|&v| T::from_f32(v)).collect();
            let gt = g.constant(Tensor::new(vec![cloud.len(), 3], gt)?);
            let pc = g.slice(rec.coarse, 0, i * n_s, n_s)?;
            let pf = g.slice(rec.fine, 0, i * n_f, n_f)?;
            coarse.push(g.chamfer(pc, gt, ChamferKind::L1)?);
            fine.push(g.chamfer(pf, gt, ChamferKind::L1)?);
        }
        let mut mean = |parts: Vec<Var>| -> Result<Var> {
            let cat = g.concat(&parts, 0)?;
            Ok(g.mean(cat))
        };
        Ok((mean(coarse)?, mean(fine)?))
    }
}
