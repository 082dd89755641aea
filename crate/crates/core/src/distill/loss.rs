use super::mask::MaskSpec;
use super::student::{Metric, Objective, Student, Target};
use crate::autograd::{ChamferKind, Graph, ParamStore, Real, Tensor, Var};
use crate::backbone::{Pass, LN_EPS};
use crate::data::PatchBatch;
use crate::dvae::{argmax, DvaeModel, PREFIX as TEACHER_PREFIX};
use crate::error::{Error, Result};

/// What a frozen teacher says about an uncorrupted batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    /// Per-token features `[B·N_s, C_T]`.
    pub features: Tensor<f32>,
    /// Argmax codebook id per token.
    pub tokens: Vec<usize>,
}

/// Runs the teacher encoder. With `normalize` the features are
/// layer-normalized per token without an affine map.
pub fn teacher_targets(
    teacher: &DvaeModel,
    store: &ParamStore,
    batch: &PatchBatch,
    normalize: bool,
) -> Result<TeacherTargets> {
    if let Some((name, _)) = store
        .iter()
        .find(|(n, p)| n.starts_with(&format!("{TEACHER_PREFIX}.")) && !p.frozen)
    {
        return Err(Error::Contract(format!("teacher tensor {name:?} is not frozen")));
    }
    let mut g = Graph::<f32>::new();
    let enc = teacher.encode(&mut g, store, batch)?;
    let f = if normalize {
        g.layer_norm_plain(enc.features, LN_EPS)
    } else {
        enc.features
    };
    let v = teacher.cfg.vocab;
    Ok(TeacherTargets {
        features: g.value(f).clone(),
        tokens: g.value(enc.logits).data().chunks(v).map(argmax).collect(),
    })
}

/// Global rows of masked tokens; every row when nothing is masked, which
/// turns masked distillation into plain per-token distillation.
pub fn loss_rows(masks: &[MaskSpec]) -> Vec<usize> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for m in masks {
        rows.extend(m.masked().into_iter().map(|i| offset + i));
        offset += m.mask.len();
    }
    if rows.is_empty() {
        rows = (0..offset).collect();
    }
    rows
}

/// `1 - mean_i cos(s_i, t_i)` over `rows`, in `[0, 2]`.
pub fn cosine_distance<T: Real>(g: &mut Graph<T>, s: Var, t: Var, rows: &[usize]) -> Result<Var> {
    let sr = g.gather_rows(s, rows)?;
    let tr = g.gather_rows(t, rows)?;
    let cos = g.cosine_rows(sr, tr)?;
    let m = g.mean(cos);
    let neg = g.scale(m, -1.0);
    let one = g.constant(Tensor::scalar(T::one()));
    g.add(one, neg)
}

/// Mean over `rows` of CD-ℓ1 between each predicted patch (`[R, 3K]` rows
/// read as K points) and the batch's centroid-relative neighbourhoods.
pub fn patch_chamfer<T: Real>(g: &mut Graph<T>, pred: Var, batch: &PatchBatch, rows: &[usize]) -> Result<Var> {
    let k = batch.patches[0].k;
    let n_s = batch.patches[0].n_groups();
    if g.shape(pred) != [batch.len() * n_s, 3 * k] {
        return Err(Error::Shape(format!(
            "patch predictions {:?} for {} patches of {k} points",
            g.shape(pred),
            batch.len() * n_s
        )));
    }
    let sel = g.gather_rows(pred, rows)?;
    let pts = g.reshape(sel, &[rows.len() * k, 3])?;
    let mut total: Option<Var> = None;
    for (j, &r) in rows.iter().enumerate() {
        let ps = &batch.patches[r / n_s];
        let gt: Vec<T> = ps.neighborhood(r % n_s).iter().flatten().map(|&v| T::from_f32(v)).collect();
        let gt = g.constant(Tensor::new(vec![k, 3], gt)?);
        let p = g.slice(pts, 0, j * k, k)?;
        let cd = g.chamfer(p, gt, ChamferKind::L1)?;
        total = Some(match total {
            Some(t) => g.add(t, cd)?,
            None => cd,
        });
    }
    let total = total.ok_or_else(|| Error::Argument("no patches to score".into()))?;
    Ok(g.scale(total, 1.0 / rows.len() as f64))
}

/// A stage-II loss with its logged parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpmLoss {
    pub loss: Var,
    /// Cosine term as it enters the loss (weighted in auxiliary mode).
    pub loss_cos: f64,
    pub loss_cd: f64,
}

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

/// Masked modeling with any target/metric pairing.
#[allow(clippy::too_many_arguments)]
pub fn mpm_loss_generic<T: Real>(
    g: &mut Graph<T>,
    student: &Student,
    store: &ParamStore,
    batch: &PatchBatch,
    masks: &[MaskSpec],
    targets: &TeacherTargets,
    target: Target,
    metric: Metric,
    pass: &mut Pass,
) -> Result<MpmLoss> {
    Objective::Masked { target, metric }.validate()?;
    if student.cfg.objective.decoder_target() != target {
        return Err(Error::Config(format!(
            "student built for {} targets cannot predict {}",
            student.cfg.objective.decoder_target().name(),
            target.name()
        )));
    }
    let visible = student.encode_visible(g, store, batch, masks, pass)?;
    let decoded = student.decode(g, store, batch, &visible, masks, pass)?;
    let pred = student.predict(g, store, decoded)?;
    let rows = loss_rows(masks);
    match target {
        Target::Feature => {
            let tf = targets.features.clone();
            if g.shape(pred) != tf.shape() {
                return Err(Error::Shape(format!(
                    "student features {:?} against teacher features {:?}",
                    g.shape(pred),
                    tf.shape()
                )));
            }
            let t = g.constant(Tensor::from_f32(tf.shape().to_vec(), tf.data())?);
            let loss = cosine_distance(g, pred, t, &rows)?;
            Ok(MpmLoss {
                loss,
                loss_cos: scalar(g, loss),
                loss_cd: 0.0,
            })
        }
        Target::Token => {
            let sel = g.gather_rows(pred, &rows)?;
            let labels: Vec<usize> = rows.iter().map(|&r| targets.tokens[r]).collect();
            let ce = g.cross_entropy_rows(sel, &labels)?;
            let loss = g.mean(ce);
            Ok(MpmLoss {
                loss,
                loss_cos: 0.0,
                loss_cd: 0.0,
            })
        }
        Target::Coords => {
            let loss = patch_chamfer(g, pred, batch, &rows)?;
            Ok(MpmLoss {
                loss,
                loss_cos: 0.0,
                loss_cd: scalar(g, loss),
            })
        }
    }
}

/// Masked cosine distillation of teacher features, the default objective.
pub fn mpm_loss<T: Real>(
    g: &mut Graph<T>,
    student: &Student,
    store: &ParamStore,
    batch: &PatchBatch,
    masks: &[MaskSpec],
    targets: &TeacherTargets,
    pass: &mut Pass,
) -> Result<MpmLoss> {
    mpm_loss_generic(g, student, store, batch, masks, targets, Target::Feature, Metric::Cosine, pass)
}

/// Coordinate reconstruction plus `lambda` times cosine distillation of the
/// teacher features at visible tokens into the final encoder output. With
/// `lambda == 0` the distillation branch is never built.
#[allow(clippy::too_many_arguments)]
pub fn aux_kd_loss<T: Real>(
    g: &mut Graph<T>,
    student: &Student,
    store: &ParamStore,
    batch: &PatchBatch,
    masks: &[MaskSpec],
    targets: &TeacherTargets,
    lambda: f64,
    pass: &mut Pass,
) -> Result<MpmLoss> {
    Objective::AuxKd { lambda }.validate()?;
    let visible = student.encode_visible(g, store, batch, masks, pass)?;
    let decoded = student.decode(g, store, batch, &visible, masks, pass)?;
    let pred = student.predict(g, store, decoded)?;
    let cd = patch_chamfer(g, pred, batch, &loss_rows(masks))?;
    let loss_cd = scalar(g, cd);
    let enc = match visible.tokens {
        Some(v) if lambda > 0.0 => v,
        _ => {
            return Ok(MpmLoss {
                loss: cd,
                loss_cos: 0.0,
                loss_cd,
            })
        }
    };
    let s = student.project_aux(g, store, enc)?;
    let vis_rows: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(b, m)| m.visible().into_iter().map(move |i| b * m.mask.len() + i))
        .collect();
    let tf = &targets.features;
    let t = Tensor::<T>::from_f32(tf.shape().to_vec(), tf.data())?;
    let t = g.constant(t);
    let t = g.gather_rows(t, &vis_rows)?;
    if g.shape(s) != g.shape(t) {
        return Err(Error::Shape(format!(
            "encoder features {:?} against teacher features {:?}",
            g.shape(s),
            g.shape(t)
        )));
    }
    let all: Vec<usize> = (0..vis_rows.len()).collect();
    let kd = cosine_distance(g, s, t, &all)?;
    let weighted = g.scale(kd, lambda);
    let loss = g.add(cd, weighted)?;
    Ok(MpmLoss {
        loss,
        loss_cos: scalar(g, weighted),
        loss_cd,
    })
}

/// Dispatches on the student's configured objective.
pub fn objective_loss<T: Real>(
    g: &mut Graph<T>,
    student: &Student,
    store: &ParamStore,
    batch: &PatchBatch,
    masks: &[MaskSpec],
    targets: &TeacherTargets,
    pass: &mut Pass,
) -> Result<MpmLoss> {
    match student.cfg.objective {
        Objective::Masked { target, metric } => {
            mpm_loss_generic(g, student, store, batch, masks, targets, target, metric, pass)
        }
        Objective::AuxKd { lambda } => aux_kd_loss(g, student, store, batch, masks, targets, lambda, pass),
    }
}
