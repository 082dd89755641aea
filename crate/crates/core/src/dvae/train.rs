use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::DvaeModel;
use super::schedule::{kl_to_uniform_f64, rescale, BetaSchedule, GumbelSchedule, REFERENCE_WARMUP};
use crate::autograd::{cosine_lr, AdamW, Graph, ParamStore};
use crate::data::{draw_indices, make_batch, BatchSpec};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_l1, chamfer_l2, default_tau, f_score, Augmentation, Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DvaeTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Warmup steps; `None` keeps the reference proportion of the run.
    pub warmup: Option<u64>,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for DvaeTrainConfig {
    fn default() -> Self {
        DvaeTrainConfig {
            steps: 2000,
            batch: 8,
            lr: 5e-4,
            weight_decay: 0.05,
            warmup: None,
            eval_every: 250,
            eval_samples: 64,
            augmentation: Augmentation::ScaleTranslate,
            seed: 0,
        }
    }
}

impl DvaeTrainConfig {
    pub fn warmup_steps(&self) -> u64 {
        self.warmup.unwrap_or_else(|| rescale(REFERENCE_WARMUP, self.steps))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 || self.eval_samples == 0 {
            return Err(Error::Config("steps, batch, eval interval and eval samples must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} / weight decay {} out of range",
                self.lr, self.weight_decay
            )));
        }
        if self.warmup_steps() > self.steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds {} steps",
                self.warmup_steps(),
                self.steps
            )));
        }
        Ok(())
    }
}

/// Held-out reconstruction quality of the fine clouds, averaged per cloud.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconMetrics {
    pub cd_l1: f64,
    pub cd_l2: f64,
    pub f_score: f64,
    /// Mean KL of the tokenizer posterior to the uniform prior.
    pub kl: f64,
    /// Mean F-score threshold used (0.01 of each target's bounding-box
    /// diagonal).
    pub f_tau: f64,
}

/// One logged row of a stage-I run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DvaeMetrics {
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    pub beta: f64,
    pub recon: ReconMetrics,
}

pub const DVAE_CSV_HEADER: &str = "step,lr,tau,beta,cd_l1,cd_l2,f_score,kl,f_tau";

impl DvaeMetrics {
    pub fn csv_row(&self) -> String {
        let r = &self.recon;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.lr, self.tau, self.beta, r.cd_l1, r.cd_l2, r.f_score, r.kl, r.f_tau
        )
    }
}

#[derive(Clone, Debug)]
pub struct DvaeRun {
    pub metrics: Vec<DvaeMetrics>,
    /// KL of the training batch at every step, evaluated in `f64`.
    pub train_kl: Vec<f64>,
    pub optimizer: AdamW,
}

/// Reconstructs `clouds` with argmax codes and scores the fine output.
pub fn evaluate_recon(model: &DvaeModel, store: &ParamStore, clouds: &[PointCloud], batch: usize) -> Result<ReconMetrics> {
    if clouds.is_empty() {
        return Err(Error::Data("no clouds to evaluate".into()));
    }
    let spec = BatchSpec::eval(model.cfg.n_groups, model.cfg.group_size);
    let mut acc = [0.0f64; 5];
    let mut kl_weighted = 0.0;
    for chunk in clouds.chunks(batch.max(1)) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let pb = make_batch(&refs, &spec, 0)?;
        let mut g = Graph::<f32>::new();
        let enc = model.encode(&mut g, store, &pb)?;
        let (codes, _) = model.argmax_codes(&mut g, store, enc.logits)?;
        let rec = model.decode(&mut g, store, codes, &enc.centroids, &enc.neighbors)?;
        kl_weighted += kl_to_uniform_f64(g.value(enc.logits)) * chunk.len() as f64;
        let fine = g.value(rec.fine);
        let per = fine.rows() / chunk.len();
        for (i, cloud) in pb.clouds.iter().enumerate() {
            let pred: Vec<Point> = (0..per)
                .map(|r| {
                    let row = fine.row(i * per + r);
                    [row[0], row[1], row[2]]
                })
                .collect();
            let (p, t) = (&pred[..], cloud.points());
            let tau = default_tau(t);
            acc[0] += chamfer_l1(p, t)?;
            acc[1] += chamfer_l2(p, t)?;
            acc[2] += f_score(p, t, tau)?;
            acc[3] += tau;
        }
    }
    let n = clouds.len() as f64;
    acc[4] = kl_weighted;
    Ok(ReconMetrics {
        cd_l1: acc[0] / n,
        cd_l2: acc[1] / n,
        f_score: acc[2] / n,
        kl: acc[4] / n,
        f_tau: acc[3] / n,
    })
}

/// Stage-I training loop. `store` must already carry the tuning mode's
/// frozen flags; frozen tensors are never written.
pub fn train_dvae(
    model: &DvaeModel,
    store: &mut ParamStore,
    cfg: &DvaeTrainConfig,
    train: &[PointCloud],
    val: &[PointCloud],
) -> Result<DvaeRun> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("stage-I training needs non-empty train and validation splits".into()));
    }
    let held_out = &val[..cfg.eval_samples.min(val.len())];
    let warmup = cfg.warmup_steps();
    let taus = GumbelSchedule::for_run(cfg.steps);
    let betas = BetaSchedule::for_run(cfg.steps);
    let spec = BatchSpec {
        n_groups: model.cfg.n_groups,
        group_size: model.cfg.group_size,
        augmentation: cfg.augmentation,
        random_start: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay as f32);
    let log = |step: u64, store: &ParamStore| -> Result<DvaeMetrics> {
        Ok(DvaeMetrics {
            step,
            lr: cosine_lr(step, warmup, cfg.steps, cfg.lr)?,
            tau: taus.tau(step),
            beta: betas.beta(step),
            recon: evaluate_recon(model, store, held_out, cfg.batch)?,
        })
    };
    let mut metrics = vec![log(0, store)?];
    let mut train_kl = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, warmup, cfg.steps, cfg.lr)?;
        let idx = draw_indices(train.len(), cfg.batch, &mut rng);
        let refs: Vec<&PointCloud> = idx.iter().map(|&i| &train[i]).collect();
        let pb = make_batch(&refs, &spec, rng.random())?;
        let mut g = Graph::<f32>::new();
        let parts = model.loss(&mut g, store, &pb, taus.tau(step), betas.beta(step), &mut rng)?;
        train_kl.push(kl_to_uniform_f64(g.value(parts.logits)));
        g.backward(parts.loss)?;
        opt.step(store, &g.param_grads(), lr)?;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            metrics.push(log(done, store)?);
        }
    }
    Ok(DvaeRun {
        metrics,
        train_kl,
        optimizer: opt,
    })
}
