use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{objective_loss, teacher_targets};
use super::mask::MaskConfig;
use super::student::Student;
use crate::autograd::{cosine_lr, AdamW, Graph, ParamStore};
use crate::backbone::Pass;
use crate::data::{draw_indices, make_batch, BatchSpec};
use crate::dvae::DvaeModel;
use crate::error::{Error, Result};
use crate::geometry::{Augmentation, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpmTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Warmup steps; `None` warms up for a thirtieth of the run.
    pub warmup: Option<u64>,
    pub mask: MaskConfig,
    /// Layer-normalize teacher features before comparing.
    pub normalize_targets: bool,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl Default for MpmTrainConfig {
    fn default() -> Self {
        MpmTrainConfig {
            steps: 1000,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup: None,
            mask: MaskConfig::default(),
            normalize_targets: true,
            augmentation: Augmentation::ScaleTranslate,
            seed: 0,
        }
    }
}

impl MpmTrainConfig {
    pub fn warmup_steps(&self) -> u64 {
        self.warmup.unwrap_or(self.steps / 30)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Config("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "learning rate {} / weight decay {} out of range",
                self.lr, self.weight_decay
            )));
        }
        if self.warmup_steps() > self.steps {
            return Err(Error::Config(format!("warmup {} exceeds {} steps", self.warmup_steps(), self.steps)));
        }
        self.mask.validate()
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct MpmMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_cos: f64,
    pub loss_cd: f64,
    pub mask_ratio: f64,
    pub strategy: &'static str,
}

pub const MPM_CSV_HEADER: &str = "step,lr,loss,loss_cos,loss_cd,mask_ratio,strategy";

impl MpmMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.lr, self.loss, self.loss_cos, self.loss_cd, self.mask_ratio, self.strategy
        )
    }
}

#[derive(Clone, Debug)]
pub struct MpmRun {
    pub metrics: Vec<MpmMetrics>,
    pub optimizer: AdamW,
}

/// Stage-II training loop. The teacher store must be entirely frozen and is
/// only ever read.
pub fn train_mpm(
    student: &Student,
    store: &mut ParamStore,
    teacher: &DvaeModel,
    teacher_store: &ParamStore,
    cfg: &MpmTrainConfig,
    train: &[PointCloud],
) -> Result<MpmRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("stage-II training needs a non-empty train split".into()));
    }
    if teacher.cfg.n_groups != student.cfg.n_groups || teacher.cfg.group_size != student.cfg.group_size {
        return Err(Error::Config(format!(
            "teacher groups {}×{} differ from student groups {}×{}",
            teacher.cfg.n_groups, teacher.cfg.group_size, student.cfg.n_groups, student.cfg.group_size
        )));
    }
    let spec = BatchSpec {
        n_groups: student.cfg.n_groups,
        group_size: student.cfg.group_size,
        augmentation: cfg.augmentation,
        random_start: true,
    };
    let warmup = cfg.warmup_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.weight_decay as f32);
    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, warmup, cfg.steps, cfg.lr)?;
        let idx = draw_indices(train.len(), cfg.batch, &mut rng);
        let refs: Vec<&PointCloud> = idx.iter().map(|&i| &train[i]).collect();
        let pb = make_batch(&refs, &spec, rng.random())?;
        let targets = teacher_targets(teacher, teacher_store, &pb, cfg.normalize_targets)?;
        let masks = cfg.mask.draw(&pb.centroids(), &mut rng)?;
        let mut g = Graph::<f32>::new();
        let parts = objective_loss(&mut g, student, store, &pb, &masks, &targets, &mut Pass::Train(&mut rng))?;
        g.backward(parts.loss)?;
        opt.step(store, &g.param_grads(), lr)?;
        metrics.push(MpmMetrics {
            step,
            lr,
            loss: g.value(parts.loss).item() as f64,
            loss_cos: parts.loss_cos,
            loss_cd: parts.loss_cd,
            mask_ratio: cfg.mask.ratio,
            strategy: cfg.mask.strategy.name(),
        });
    }
    Ok(MpmRun { metrics, optimizer: opt })
}
