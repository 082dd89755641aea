use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ProbeKind, ProbeProtocol};
use super::dataset::N_CLASSES;
use crate::autograd::{cosine_lr, AdamW, Graph, ParamStore, Tensor, Var};
use crate::backbone::{Init, Linear, Pass};
use crate::data::{make_batch, BatchSpec};
use crate::distill::Student;
use crate::dvae::argmax;
use crate::error::{Error, Result};
use crate::geometry::{Augmentation, PointCloud};

pub const PROBE_CSV_HEADER: &str = "protocol,seed,accuracy";
pub const MLP3_WIDTHS: [usize; 2] = [256, 128];
pub const MLP3_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeReport {
    pub protocol: ProbeKind,
    pub seed: u64,
    /// Overall accuracy on the evaluation clouds.
    pub accuracy: f64,
    pub train_accuracy: f64,
}

impl ProbeReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.protocol.name(), self.seed, self.accuracy)
    }
}

fn labels(clouds: &[PointCloud]) -> Result<Vec<usize>> {
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| match c.label() {
            Some(l) if (l as usize) < N_CLASSES => Ok(l as usize),
            Some(l) => Err(Error::Data(format!("cloud {i}: label {l} outside the {N_CLASSES} classes"))),
            None => Err(Error::Data(format!("cloud {i} has no label"))),
        })
        .collect()
}

/// Frozen global descriptors `[N, 2C]` (class token next to max-pooled
/// patch tokens) from an evaluation pass.
pub fn global_features(student: &Student, store: &ParamStore, clouds: &[PointCloud], batch: usize) -> Result<Tensor<f32>> {
    let spec = BatchSpec::eval(student.cfg.n_groups, student.cfg.group_size);
    let mut data = Vec::new();
    for chunk in clouds.chunks(batch.max(1)) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let pb = make_batch(&refs, &spec, 0)?;
        let mut g = Graph::<f32>::new();
        let f = student.global_features(&mut g, store, &pb, &mut Pass::Eval)?;
        data.extend_from_slice(g.value(f).data());
    }
    Tensor::new(vec![clouds.len(), 2 * student.width()], data)
}

/// Classifier on top of fixed-width inputs.
struct Head {
    layers: Vec<Linear>,
    dropout: f64,
}

impl Head {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, kind: ProbeKind, width: usize, rng: &mut R) -> Result<Self> {
        let dims: Vec<usize> = match kind {
            ProbeKind::Mlp3 => vec![width, MLP3_WIDTHS[0], MLP3_WIDTHS[1], N_CLASSES],
            _ => vec![width, N_CLASSES],
        };
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, format!("probe.{i}"), d[0], d[1], Init::FanIn, rng))
            .collect::<Result<_>>()?;
        let dropout = if kind == ProbeKind::Mlp3 { MLP3_DROPOUT } else { 0.0 };
        Ok(Head { layers, dropout })
    }

    fn forward(&self, g: &mut Graph<f32>, store: &ParamStore, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        let mut rng = rng;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h)?;
            if i < last {
                h = g.relu(h);
                if let (Some(r), true) = (rng.as_deref_mut(), self.dropout > 0.0) {
                    h = dropout(g, h, self.dropout, r)?;
                }
            }
        }
        Ok(h)
    }
}

/// Inverted dropout with a fresh mask.
fn dropout<R: Rng + ?Sized>(g: &mut Graph<f32>, x: Var, p: f64, rng: &mut R) -> Result<Var> {
    let keep = (1.0 / (1.0 - p)) as f32;
    let n = g.value(x).numel();
    let mask: Vec<f32> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let m = g.constant(Tensor::new(g.shape(x).to_vec(), mask)?);
    g.mul(x, m)
}

fn rows(x: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let w = x.row_len();
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), w], data)
}

fn accuracy(logits: &Tensor<f32>, labels: &[usize]) -> f64 {
    let hits = (0..labels.len()).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Per-dimension z-scores with statistics from `train`.
fn standardize(train: &Tensor<f32>, others: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let (n, w) = (train.rows(), train.row_len());
    let mut mean = vec![0.0f64; w];
    let mut var = vec![0.0f64; w];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(train.row(i)) {
            *m += v as f64 / n as f64;
        }
    }
    for i in 0..n {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(train.row(i)) {
            *s += (v as f64 - m).powi(2) / n as f64;
        }
    }
    let apply = |t: &Tensor<f32>| {
        let data = t
            .data()
            .chunks(w)
            .flat_map(|r| r.iter().zip(mean.iter().zip(&var)).map(|(&v, (&m, &s))| ((v as f64 - m) / (s.sqrt() + 1e-6)) as f32))
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    };
    std::iter::once(train).chain(others.iter().copied()).map(apply).collect()
}

/// Trains the protocol's head (and, for `full`, the encoder) on `train` and
/// reports accuracy on `test`. `store` is not modified.
pub fn probe(
    student: &Student,
    store: &ParamStore,
    train: &[PointCloud],
    test: &[PointCloud],
    protocol: &ProbeProtocol,
    seed: u64,
) -> Result<ProbeReport> {
    protocol.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("probing needs non-empty train and test clouds".into()));
    }
    let (ytr, yte) = (labels(train)?, labels(test)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match protocol.kind {
        ProbeKind::Linear | ProbeKind::Mlp3 => {
            let ftr = global_features(student, store, train, 32)?;
            let fte = global_features(student, store, test, 32)?;
            let z = standardize(&ftr, &[&fte])?;
            let (ftr, fte) = (&z[0], &z[1]);
            let mut hs = ParamStore::new();
            let head = Head::new(&mut hs, protocol.kind, ftr.row_len(), &mut rng)?;
            let mut opt = AdamW::new(protocol.weight_decay as f32);
            let per_epoch = train.len().div_ceil(protocol.batch);
            let total = (protocol.epochs * per_epoch) as u64;
            let mut step = 0;
            for _ in 0..protocol.epochs {
                let mut order: Vec<usize> = (0..train.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                for idx in order.chunks(protocol.batch) {
                    let mut g = Graph::<f32>::new();
                    let x = g.constant(rows(ftr, idx)?);
                    let logits = head.forward(&mut g, &hs, x, Some(&mut rng))?;
                    let y: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
                    let ce = g.cross_entropy_rows(logits, &y)?;
                    let loss = g.mean(ce);
                    g.backward(loss)?;
                    opt.step(&mut hs, &g.param_grads(), cosine_lr(step, 0, total, protocol.lr)?)?;
                    step += 1;
                }
            }
            let eval = |f: &Tensor<f32>| -> Result<Tensor<f32>> {
                let mut g = Graph::<f32>::new();
                let x = g.constant(f.clone());
                let l = head.forward(&mut g, &hs, x, None)?;
                Ok(g.value(l).clone())
            };
            Ok(ProbeReport {
                protocol: protocol.kind,
                seed,
                accuracy: accuracy(&eval(fte)?, &yte),
                train_accuracy: accuracy(&eval(ftr)?, &ytr),
            })
        }
        ProbeKind::Full => {
            let mut ss = store.clone();
            ss.freeze("*")?;
            for sel in student.encoder_selectors() {
                ss.thaw(&sel)?;
            }
            let head = Head::new(&mut ss, ProbeKind::Linear, 2 * student.width(), &mut rng)?;
            let spec = BatchSpec {
                n_groups: student.cfg.n_groups,
                group_size: student.cfg.group_size,
                augmentation: Augmentation::ScaleTranslate,
                random_start: true,
            };
            let mut opt = AdamW::new(protocol.weight_decay as f32);
            let per_epoch = train.len().div_ceil(protocol.batch);
            let total = (protocol.epochs * per_epoch) as u64;
            let mut step = 0;
            for _ in 0..protocol.epochs {
                let mut order: Vec<usize> = (0..train.len()).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                for idx in order.chunks(protocol.batch) {
                    let refs: Vec<&PointCloud> = idx.iter().map(|&i| &train[i]).collect();
                    let pb = make_batch(&refs, &spec, rng.random())?;
                    let mut g = Graph::<f32>::new();
                    let f = student.global_features(&mut g, &ss, &pb, &mut Pass::Train(&mut rng))?;
                    let logits = head.forward(&mut g, &ss, f, None)?;
                    let y: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
                    let ce = g.cross_entropy_rows(logits, &y)?;
                    let loss = g.mean(ce);
                    g.backward(loss)?;
                    opt.step(&mut ss, &g.param_grads(), cosine_lr(step, 0, total, protocol.lr)?)?;
                    step += 1;
                }
            }
            let eval = |clouds: &[PointCloud]| -> Result<Tensor<f32>> {
                let f = global_features(student, &ss, clouds, 32)?;
                let mut g = Graph::<f32>::new();
                let x = g.constant(f);
                let l = head.forward(&mut g, &ss, x, None)?;
                Ok(g.value(l).clone())
            };
            Ok(ProbeReport {
                protocol: protocol.kind,
                seed,
                accuracy: accuracy(&eval(test)?, &yte),
                train_accuracy: accuracy(&eval(train)?, &ytr),
            })
        }
    }
}
