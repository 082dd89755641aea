use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{load_params, Checkpoint};
use super::config::RunConfig;
use super::dataset::{load_dataset, load_split, write_dataset, Dataset};
use super::probe::{global_features, probe, ProbeReport, PROBE_CSV_HEADER};
use crate::autograd::{AdamW, ParamStore};
use crate::backbone::{make_surrogate_foundation, Foundation, StackConfig, TransformerStack};
use crate::data::sample_seed;
use crate::distill::{train_mpm, MpmRun, Student, MPM_CSV_HEADER};
use crate::dvae::{evaluate_recon, train_dvae, DvaeModel, DvaeRun, ReconMetrics, DVAE_CSV_HEADER};
use crate::error::{Error, Result};
use crate::geometry::{chamfer_l1, chamfer_l2, default_tau, f_score, PointCloud};

pub const DVAE_CHECKPOINT: &str = "dvae.ckpt";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const RECON_CSV_HEADER: &str = "split,cd_l1,cd_l2,f_score,f_tau";
pub const POOLING_NOTE: &str = "global feature = concat(class token, max-pool over patch tokens)";

/// What a command printed and wrote.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub stdout: String,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    fn line(&mut self, s: impl AsRef<str>) {
        self.stdout.push_str(s.as_ref());
        self.stdout.push('\n');
    }
}

// Each stage draws its generators from the run seed and a fixed stream id.
const STREAM_TEACHER_INIT: usize = 1;
const STREAM_STUDENT_INIT: usize = 2;
const STREAM_PROBE: usize = 3;

fn stream(seed: u64, id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(seed, id))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// The pretrained stack: imported from a weights checkpoint when
/// configured, otherwise the surrogate pretraining run.
pub fn build_foundation(cfg: &RunConfig) -> Result<Foundation> {
    let Some(path) = &cfg.foundation_weights else {
        return make_surrogate_foundation(&cfg.foundation);
    };
    let ck = Checkpoint::load(path)?;
    let mut store = ParamStore::new();
    let stack = TransformerStack::new(
        &mut store,
        "",
        StackConfig { drop_path: 0.0, ..cfg.foundation.stack },
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    load_params(&ck.params, &mut store)?;
    Ok(Foundation {
        stack,
        store,
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
    })
}

/// A stage-I model around `foundation` with the configured frozen flags.
pub fn build_teacher(cfg: &RunConfig, foundation: &Foundation) -> Result<(DvaeModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model = DvaeModel::new(&cfg.dvae, &mut store, &mut stream(cfg.seed, STREAM_TEACHER_INIT))?;
    model.install_foundation(&mut store, foundation)?;
    model.apply_tuning(&mut store)?;
    Ok((model, store))
}

/// A freshly initialized student for `cfg`, reading targets of `teacher`.
pub fn build_student(cfg: &RunConfig, teacher: &DvaeModel) -> Result<(Student, ParamStore)> {
    let scfg = crate::distill::StudentConfig {
        teacher_width: teacher.cfg.stack.width,
        vocab: teacher.cfg.vocab,
        n_groups: teacher.cfg.n_groups,
        group_size: teacher.cfg.group_size,
        ..cfg.student
    };
    let mut store = ParamStore::new();
    let s = Student::new(&scfg, &mut store, &mut stream(cfg.seed, STREAM_STUDENT_INIT))?;
    Ok((s, store))
}

fn checkpoint(kind: &str, cfg: &RunConfig, step: u64, store: &ParamStore, opt: &AdamW) -> Checkpoint {
    Checkpoint {
        kind: kind.to_string(),
        step,
        rng: cfg.seed,
        digest: cfg.digest(),
        config: cfg.canonical(),
        params: store.clone(),
        optimizer: Some(opt.clone()),
    }
}

/// Rebuilds a stage-I model from its checkpoint; the model is frozen.
pub fn teacher_from_checkpoint(ck: &Checkpoint) -> Result<(DvaeModel, ParamStore, RunConfig)> {
    let cfg = RunConfig::parse(&ck.config)?;
    let mut store = ParamStore::new();
    let model = DvaeModel::new(&cfg.dvae, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_into(&mut store)?;
    model.freeze_all(&mut store)?;
    Ok((model, store, cfg))
}

/// Rebuilds a student from its checkpoint.
pub fn student_from_checkpoint(ck: &Checkpoint) -> Result<(Student, ParamStore, RunConfig)> {
    let cfg = RunConfig::parse(&ck.config)?;
    let mut store = ParamStore::new();
    let student = Student::new(&cfg.student, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.load_into(&mut store)?;
    Ok((student, store, cfg))
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Outcome> {
    let dir = &cfg.data.dir;
    let n = write_dataset(dir, cfg.data.n_per_class, cfg.data.points, cfg.data.pose, cfg.seed)?;
    let mut out = Outcome::default();
    out.line(format!("wrote {n} clouds and 3 manifests to {}", dir.display()));
    out.files.push(dir.clone());
    Ok(out)
}

/// Stage I on an in-memory dataset; returns the model, its store and the run.
pub fn run_train_dvae(cfg: &RunConfig, ds: &Dataset) -> Result<(DvaeModel, ParamStore, DvaeRun)> {
    let foundation = build_foundation(cfg)?;
    let (model, mut store) = build_teacher(cfg, &foundation)?;
    let run = train_dvae(&model, &mut store, &cfg.dvae_train, &ds.train, &ds.val)?;
    Ok((model, store, run))
}

pub fn cmd_train_dvae(cfg: &RunConfig) -> Result<Outcome> {
    let ds = load_dataset(&cfg.data.dir)?;
    let (_, store, run) = run_train_dvae(cfg, &ds)?;
    create_dir(&cfg.out)?;
    let ck_path = cfg.out.join(DVAE_CHECKPOINT);
    checkpoint("dvae", cfg, cfg.dvae_train.steps, &store, &run.optimizer).save(&ck_path)?;
    let csv = cfg.out.join("dvae_metrics.csv");
    write_csv(&csv, DVAE_CSV_HEADER, run.metrics.iter().map(|m| m.csv_row()))?;
    let mut out = Outcome::default();
    out.line(DVAE_CSV_HEADER);
    for m in &run.metrics {
        out.line(m.csv_row());
    }
    out.files = vec![ck_path, csv];
    Ok(out)
}

fn teacher_path(cfg: &RunConfig) -> PathBuf {
    cfg.teacher.clone().unwrap_or_else(|| cfg.out.join(DVAE_CHECKPOINT))
}

/// Stage II against an already built frozen teacher.
pub fn run_train_mpm(
    cfg: &RunConfig,
    teacher: &DvaeModel,
    teacher_store: &ParamStore,
    train: &[PointCloud],
) -> Result<(Student, ParamStore, MpmRun)> {
    let (student, mut store) = build_student(cfg, teacher)?;
    let run = train_mpm(&student, &mut store, teacher, teacher_store, &cfg.mpm_train, train)?;
    Ok((student, store, run))
}

pub fn cmd_train_mpm(cfg: &RunConfig) -> Result<Outcome> {
    let ck = Checkpoint::load(&teacher_path(cfg))?;
    let (teacher, tstore, tcfg) = teacher_from_checkpoint(&ck)?;
    let train = load_split(&cfg.data.dir, "train")?;
    let (student, store, run) = run_train_mpm(cfg, &teacher, &tstore, &train)?;
    create_dir(&cfg.out)?;
    // the stored config must rebuild this exact student
    let mut saved = cfg.clone();
    saved.student = student.cfg;
    saved.dvae = tcfg.dvae;
    saved.foundation.stack = tcfg.dvae.stack;
    let ck_path = cfg.out.join(STUDENT_CHECKPOINT);
    checkpoint("student", &saved, cfg.mpm_train.steps, &store, &run.optimizer).save(&ck_path)?;
    let csv = cfg.out.join("mpm_metrics.csv");
    write_csv(&csv, MPM_CSV_HEADER, run.metrics.iter().map(|m| m.csv_row()))?;
    let mut out = Outcome::default();
    let last = run.metrics.last().expect("at least one step");
    out.line(MPM_CSV_HEADER);
    out.line(last.csv_row());
    out.files = vec![ck_path, csv];
    Ok(out)
}

/// Probes a checkpointed student, or a randomly initialized one when no
/// checkpoint (or `random`) is configured.
pub fn cmd_probe(cfg: &RunConfig) -> Result<Outcome> {
    let (student, store) = match &cfg.probe_checkpoint {
        Some(p) if p.as_os_str() != "random" => {
            let (s, st, _) = student_from_checkpoint(&Checkpoint::load(p)?)?;
            (s, st)
        }
        _ => {
            let mut store = ParamStore::new();
            let s = Student::new(&cfg.student, &mut store, &mut stream(cfg.seed, STREAM_STUDENT_INIT))?;
            (s, store)
        }
    };
    let ds = load_dataset(&cfg.data.dir)?;
    let report = run_probe(cfg, &student, &store, &ds)?;
    create_dir(&cfg.out)?;
    let csv = cfg.out.join("probe.csv");
    write_csv(&csv, PROBE_CSV_HEADER, [report.csv_row()])?;
    let mut out = Outcome::default();
    out.line(format!("# {POOLING_NOTE}"));
    out.line(PROBE_CSV_HEADER);
    out.line(report.csv_row());
    out.files = vec![csv];
    Ok(out)
}

pub fn run_probe(cfg: &RunConfig, student: &Student, store: &ParamStore, ds: &Dataset) -> Result<ProbeReport> {
    let seed = sample_seed(cfg.seed, STREAM_PROBE);
    let mut report = probe(student, store, &ds.train, &ds.test, &cfg.probe, seed)?;
    report.seed = cfg.seed;
    Ok(report)
}

/// Scores `pred[i]` against `truth[i]`, averaged over clouds.
pub fn recon_metrics(pred: &[Vec<[f32; 3]>], truth: &[PointCloud]) -> Result<ReconMetrics> {
    let mut acc = [0.0; 4];
    for (p, t) in pred.iter().zip(truth) {
        let tau = default_tau(t.points());
        acc[0] += chamfer_l1(p, t.points())?;
        acc[1] += chamfer_l2(p, t.points())?;
        acc[2] += f_score(p, t.points(), tau)?;
        acc[3] += tau;
    }
    let n = truth.len().max(1) as f64;
    Ok(ReconMetrics {
        cd_l1: acc[0] / n,
        cd_l2: acc[1] / n,
        f_score: acc[2] / n,
        kl: 0.0,
        f_tau: acc[3] / n,
    })
}

pub fn cmd_eval_recon(cfg: &RunConfig) -> Result<Outcome> {
    let test = load_split(&cfg.data.dir, "test")?;
    let m = if cfg.eval_identity {
        let own: Vec<Vec<[f32; 3]>> = test.iter().map(|c| c.points().to_vec()).collect();
        recon_metrics(&own, &test)?
    } else {
        let path = cfg.eval_checkpoint.clone().unwrap_or_else(|| cfg.out.join(DVAE_CHECKPOINT));
        let (model, store, _) = teacher_from_checkpoint(&Checkpoint::load(&path)?)?;
        evaluate_recon(&model, &store, &test, 16)?
    };
    create_dir(&cfg.out)?;
    let csv = cfg.out.join("recon.csv");
    let row = format!("test,{},{},{},{}", m.cd_l1, m.cd_l2, m.f_score, m.f_tau);
    write_csv(&csv, RECON_CSV_HEADER, [row])?;
    let mut out = Outcome::default();
    out.line(format!("{:<8} {:>12} {:>12} {:>9} {:>10}", "split", "cd_l1", "cd_l2", "f_score", "f_tau"));
    out.line(format!(
        "{:<8} {:>12.6} {:>12.6} {:>9.4} {:>10.6}",
        "test", m.cd_l1, m.cd_l2, m.f_score, m.f_tau
    ));
    out.files = vec![csv];
    Ok(out)
}

/// Per-cloud feature vectors of width C: max-pooled patch tokens of a
/// student encoder, or max-pooled latent features of a stage-I teacher.
pub fn export_features(ck: &Checkpoint, clouds: &[PointCloud]) -> Result<Vec<Vec<f32>>> {
    match ck.kind.as_str() {
        "dvae" => {
            let (model, store, _) = teacher_from_checkpoint(ck)?;
            let spec = crate::data::BatchSpec::eval(model.cfg.n_groups, model.cfg.group_size);
            let mut rows = Vec::new();
            for chunk in clouds.chunks(16) {
                let refs: Vec<&PointCloud> = chunk.iter().collect();
                let pb = crate::data::make_batch(&refs, &spec, 0)?;
                let mut g = crate::autograd::Graph::<f32>::new();
                let enc = model.encode(&mut g, &store, &pb)?;
                let c = model.cfg.stack.width;
                let f = g.reshape(enc.features, &[chunk.len(), model.cfg.n_groups, c])?;
                let (pooled, _) = g.max_over_axis(f, 1)?;
                rows.extend(g.value(pooled).data().chunks(c).map(<[f32]>::to_vec));
            }
            Ok(rows)
        }
        _ => {
            let (student, store, _) = student_from_checkpoint(ck)?;
            let f = global_features(&student, &store, clouds, 16)?;
            let c = student.width();
            Ok((0..clouds.len()).map(|i| f.row(i)[c..].to_vec()).collect())
        }
    }
}

pub fn cmd_export_features(cfg: &RunConfig) -> Result<Outcome> {
    let path = cfg.export_checkpoint.clone().unwrap_or_else(|| cfg.out.join(STUDENT_CHECKPOINT));
    let ck = Checkpoint::load(&path)?;
    let clouds = load_split(&cfg.data.dir, &cfg.export_split)?;
    let rows = export_features(&ck, &clouds)?;
    let width = rows.first().map_or(0, Vec::len);
    let mut header = String::from("id,label");
    for j in 1..=width {
        let _ = write!(header, ",f{j}");
    }
    create_dir(&cfg.out)?;
    let csv = cfg.out.join("features.csv");
    write_csv(
        &csv,
        &header,
        rows.iter().zip(&clouds).enumerate().map(|(i, (r, c))| {
            let mut s = format!("{i},{}", c.label().map_or(String::new(), |l| l.to_string()));
            for v in r {
                let _ = write!(s, ",{v}");
            }
            s
        }),
    )?;
    let mut out = Outcome::default();
    out.line(format!("wrote {} rows of {width} features to {}", rows.len(), csv.display()));
    out.files = vec![csv];
    Ok(out)
}

/// Stage names as used on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainDvae,
    TrainMpm,
    Probe,
    EvalRecon,
    ExportFeatures,
}

impl Command {
    pub fn run(self, cfg: &RunConfig) -> Result<Outcome> {
        match self {
            Command::GenData => cmd_gen_data(cfg),
            Command::TrainDvae => cmd_train_dvae(cfg),
            Command::TrainMpm => cmd_train_mpm(cfg),
            Command::Probe => cmd_probe(cfg),
            Command::EvalRecon => cmd_eval_recon(cfg),
            Command::ExportFeatures => cmd_export_features(cfg),
        }
    }
}
