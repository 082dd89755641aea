use rand::Rng;

use super::mask::MaskSpec;
use crate::autograd::{Graph, ParamStore, Real, Tensor, Var};
use crate::backbone::{
    join, rows_within, Encoder, Init, Linear, Pass, PatchEmbedder, PosMode, PositionalEmbedder,
    StackConfig, TransformerStack,
};
use crate::data::PatchBatch;
use crate::error::{Error, Result};

pub const PREFIX: &str = "student";

/// What the student predicts at masked positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Teacher latent features.
    Feature,
    /// Teacher argmax codebook ids.
    Token,
    /// Centroid-relative patch coordinates.
    Coords,
}

/// How a prediction is compared with its target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    CrossEntropy,
    ChamferL1,
}

impl Target {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(Target::Feature),
            "token" => Ok(Target::Token),
            "coords" => Ok(Target::Coords),
            _ => Err(Error::Config(format!("unknown target {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Feature => "feature",
            Target::Token => "token",
            Target::Coords => "coords",
        }
    }

    /// The only metric each target is defined with.
    pub fn metric(self) -> Metric {
        match self {
            Target::Feature => Metric::Cosine,
            Target::Token => Metric::CrossEntropy,
            Target::Coords => Metric::ChamferL1,
        }
    }
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "cross-entropy" => Ok(Metric::CrossEntropy),
            "chamfer-l1" => Ok(Metric::ChamferL1),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::CrossEntropy => "cross-entropy",
            Metric::ChamferL1 => "chamfer-l1",
        }
    }
}

/// Stage-II training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Masked prediction of one target with its metric.
    Masked { target: Target, metric: Metric },
    /// Coordinate reconstruction plus `lambda` times cosine distillation of
    /// teacher features into the encoder output.
    AuxKd { lambda: f64 },
}

impl Objective {
    pub const DISTILL: Objective = Objective::Masked {
        target: Target::Feature,
        metric: Metric::Cosine,
    };

    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::Masked { target, metric } if target.metric() != metric => Err(Error::Config(format!(
                "target {} cannot be scored with {}",
                target.name(),
                metric.name()
            ))),
            Objective::AuxKd { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(Error::Config(format!("auxiliary distillation weight {lambda} must be >= 0")))
            }
            _ => Ok(()),
        }
    }

    /// The target the decoder head predicts.
    pub fn decoder_target(&self) -> Target {
        match *self {
            Objective::Masked { target, .. } => target,
            Objective::AuxKd { .. } => Target::Coords,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Objective::Masked { target, metric } => format!("{}/{}", target.name(), metric.name()),
            Objective::AuxKd { lambda } => format!("aux-kd/{lambda}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentConfig {
    pub encoder: StackConfig,
    pub decoder_depth: usize,
    pub pos_mode: PosMode,
    pub n_groups: usize,
    pub group_size: usize,
    /// Width of the teacher features the feature head maps to.
    pub teacher_width: usize,
    /// Teacher codebook size, for token targets.
    pub vocab: usize,
    pub objective: Objective,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            encoder: StackConfig {
                drop_path: 0.1,
                ..StackConfig::new(96, 6, 4)
            },
            decoder_depth: 2,
            pos_mode: PosMode::Xyz,
            n_groups: 16,
            group_size: 16,
            teacher_width: 96,
            vocab: 512,
            objective: Objective::DISTILL,
        }
    }
}

impl StudentConfig {
    pub fn decoder_stack(&self) -> StackConfig {
        StackConfig {
            depth: self.decoder_depth,
            drop_path: 0.0,
            ..self.encoder
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        if self.n_groups == 0 || self.group_size == 0 || self.teacher_width == 0 || self.vocab < 2 {
            return Err(Error::Config("grouping sizes, teacher width and vocabulary must be positive".into()));
        }
        self.objective.validate()
    }
}

/// Encoder outputs of the visible tokens.
pub struct Visible {
    /// Final-normed visible token features `[B·n_vis, C]`, or `None` when
    /// every token is masked.
    pub tokens: Option<Var>,
    pub per_sample: usize,
}

/// A masked point modeling student: visible-only encoder and a light
/// decoder over all token slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub cfg: StudentConfig,
    pub embedder: PatchEmbedder,
    pub encoder: Encoder,
    pub decoder: TransformerStack,
    pub decoder_pos: PositionalEmbedder,
    pub mask_token: String,
    /// Decoder head; `None` is the identity, used when a feature target
    /// already has the decoder's width.
    pub head: Option<Linear>,
    /// Encoder-side projection for auxiliary distillation.
    pub aux_head: Option<Linear>,
}

fn projection<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    from: usize,
    to: usize,
    rng: &mut R,
) -> Result<Option<Linear>> {
    if from == to {
        return Ok(None);
    }
    Linear::new(store, name, from, to, Init::FanIn, rng).map(Some)
}

impl Student {
    pub fn new<R: Rng + ?Sized>(cfg: &StudentConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.encoder.width;
        let p = |s: &str| join(PREFIX, s);
        let embedder = PatchEmbedder::new(store, &p("embed"), c, rng)?;
        let stack = TransformerStack::new(store, &p("encoder"), cfg.encoder, rng)?;
        let encoder = Encoder::new(store, PREFIX, stack, cfg.pos_mode, rng)?;
        let decoder = TransformerStack::new(store, &p("decoder"), cfg.decoder_stack(), rng)?;
        let decoder_pos = PositionalEmbedder::new(store, &p("decoder_pos"), c, cfg.pos_mode, rng)?;
        let mask_token = p("mask_token");
        store.normal(mask_token.clone(), vec![1, c], 0.02, rng)?;
        let head = match cfg.objective.decoder_target() {
            Target::Feature => projection(store, &p("head"), c, cfg.teacher_width, rng)?,
            Target::Token => Some(Linear::new(store, p("head"), c, cfg.vocab, Init::FanIn, rng)?),
            Target::Coords => Some(Linear::new(store, p("head"), c, 3 * cfg.group_size, Init::FanIn, rng)?),
        };
        let aux_head = match cfg.objective {
            Objective::AuxKd { .. } => projection(store, &p("aux_head"), c, cfg.teacher_width, rng)?,
            Objective::Masked { .. } => None,
        };
        Ok(Student {
            cfg: *cfg,
            embedder,
            encoder,
            decoder,
            decoder_pos,
            mask_token,
            head,
            aux_head,
        })
    }

    pub fn width(&self) -> usize {
        self.cfg.encoder.width
    }

    /// Encoder parameters only, i.e. what a downstream task keeps.
    pub fn encoder_selectors(&self) -> Vec<String> {
        vec![
            format!("{PREFIX}.embed.*"),
            self.encoder.stack.selector(),
            self.encoder.cls_token.clone(),
            format!("{PREFIX}.pos.*"),
        ]
    }

    fn check_batch(&self, batch: &PatchBatch) -> Result<()> {
        for p in &batch.patches {
            if p.n_groups() != self.cfg.n_groups || p.k != self.cfg.group_size {
                return Err(Error::Shape(format!(
                    "patches of {}×{} for a student expecting {}×{}",
                    p.n_groups(),
                    p.k,
                    self.cfg.n_groups,
                    self.cfg.group_size
                )));
            }
        }
        Ok(())
    }

    /// Embeds and encodes only the unmasked patches; masked patches are
    /// never read.
    pub fn encode_visible<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        batch: &PatchBatch,
        masks: &[MaskSpec],
        pass: &mut Pass,
    ) -> Result<Visible> {
        self.check_batch(batch)?;
        let b = batch.len();
        let n_vis = visible_count(masks, b, self.cfg.n_groups)?;
        if n_vis == 0 {
            return Ok(Visible { tokens: None, per_sample: 0 });
        }
        let k = self.cfg.group_size;
        let mut neigh = Vec::with_capacity(b * n_vis * k * 3);
        let mut cents = Vec::with_capacity(b * n_vis * 3);
        for (ps, m) in batch.patches.iter().zip(masks) {
            for i in m.visible() {
                neigh.extend(ps.neighborhood(i).iter().flatten().map(|&v| T::from_f32(v)));
                cents.extend(ps.centroids[i].iter().map(|&v| T::from_f32(v)));
            }
        }
        let nv = g.constant(Tensor::new(vec![b * n_vis * k, 3], neigh)?);
        let cents = Tensor::new(vec![b * n_vis, 3], cents)?;
        let x = self.embedder.forward(g, store, nv, k)?;
        let (h, _) = self.encoder.encode(g, store, x, &cents, b, None, pass)?;
        let h = self.encoder.stack.final_norm(g, store, h)?;
        let tokens = g.gather_rows(h, &rows_within(b, n_vis + 1, 1, n_vis))?;
        Ok(Visible {
            tokens: Some(tokens),
            per_sample: n_vis,
        })
    }

    /// Decoder outputs `[B·N_s, C]` for every token slot.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        batch: &PatchBatch,
        visible: &Visible,
        masks: &[MaskSpec],
        pass: &mut Pass,
    ) -> Result<Var> {
        let b = batch.len();
        let (_, cents) = batch.tensors::<T>()?;
        let pos = self.decoder_pos.forward(g, store, &cents, b, false)?;
        let mt = g.param(store, &self.mask_token)?;
        let z = corrupt(g, visible.tokens, masks, mt, pos)?;
        let h = self.decoder.forward(g, store, z, pos, b, None, pass)?;
        self.decoder.final_norm(g, store, h)
    }

    /// Applies the decoder head.
    pub fn predict<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, decoded: Var) -> Result<Var> {
        match &self.head {
            Some(h) => h.forward(g, store, decoded),
            None => Ok(decoded),
        }
    }

    /// Applies the auxiliary projection to encoder features.
    pub fn project_aux<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore, encoded: Var) -> Result<Var> {
        match &self.aux_head {
            Some(h) => h.forward(g, store, encoded),
            None => Ok(encoded),
        }
    }

    /// Global descriptors `[B, 2C]`: the class token next to a max-pool over
    /// the patch tokens, from an unmasked encoder pass.
    pub fn global_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore,
        batch: &PatchBatch,
        pass: &mut Pass,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let b = batch.len();
        let n = self.cfg.n_groups;
        let (neigh, cents) = batch.tensors::<T>()?;
        let nv = g.constant(neigh);
        let x = self.embedder.forward(g, store, nv, self.cfg.group_size)?;
        let (h, _) = self.encoder.encode(g, store, x, &cents, b, None, pass)?;
        let h = self.encoder.stack.final_norm(g, store, h)?;
        let c = self.width();
        let cls = g.gather_rows(h, &rows_within(b, n + 1, 0, 1))?;
        let tokens = g.gather_rows(h, &rows_within(b, n + 1, 1, n))?;
        let tokens = g.reshape(tokens, &[b, n, c])?;
        let (pooled, _) = g.max_over_axis(tokens, 1)?;
        g.concat(&[cls, pooled], 1)
    }
}

fn visible_count(masks: &[MaskSpec], batch: usize, n_s: usize) -> Result<usize> {
    if masks.len() != batch {
        return Err(Error::Shape(format!("{} masks for a batch of {batch}", masks.len())));
    }
    let n_vis = n_s - masks[0].count();
    for m in masks {
        if m.mask.len() != n_s || n_s - m.count() != n_vis {
            return Err(Error::Shape(format!(
                "masks must cover {n_s} tokens with equal counts, got {} with {} masked",
                m.mask.len(),
                m.count()
            )));
        }
    }
    Ok(n_vis)
}

/// Decoder input: visible encoder rows scattered back to their slots, the
/// mask token at masked slots, and positions added to every slot.
///
/// `visible` is `[B·n_vis, C]` in slot order per sample, `pos` is
/// `[B·N_s, C]`.
pub fn corrupt<T: Real>(
    g: &mut Graph<T>,
    visible: Option<Var>,
    masks: &[MaskSpec],
    mask_token: Var,
    pos: Var,
) -> Result<Var> {
    let b = masks.len();
    let ps = g.shape(pos).to_vec();
    if b == 0 || ps.len() != 2 || ps[0] % b != 0 {
        return Err(Error::Shape(format!("positions {ps:?} for {b} masks")));
    }
    let n_s = ps[0] / b;
    let n_vis = visible_count(masks, b, n_s)?;
    if g.shape(mask_token) != [1, ps[1]] {
        return Err(Error::Shape(format!("mask token {:?} for width {}", g.shape(mask_token), ps[1])));
    }
    let (rows, mask_row) = match visible {
        Some(v) => {
            if g.shape(v) != [b * n_vis, ps[1]] {
                return Err(Error::Shape(format!(
                    "{:?} visible rows, expected [{}, {}]",
                    g.shape(v),
                    b * n_vis,
                    ps[1]
                )));
            }
            (g.concat(&[v, mask_token], 0)?, b * n_vis)
        }
        None if n_vis == 0 => (mask_token, 0),
        None => return Err(Error::Shape(format!("{n_vis} visible tokens per sample but no encoder rows"))),
    };
    let mut idx = Vec::with_capacity(b * n_s);
    for (s, m) in masks.iter().enumerate() {
        let mut seen = 0;
        for &masked in &m.mask {
            if masked {
                idx.push(mask_row);
            } else {
                idx.push(s * n_vis + seen);
                seen += 1;
            }
        }
    }
    let z = g.gather_rows(rows, &idx)?;
    g.add(z, pos)
}
