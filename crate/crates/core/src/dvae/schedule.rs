use rand::Rng;

use crate::autograd::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const TAU_START: f64 = 1.0;
pub const TAU_END: f64 = 0.0625;
pub const BETA_MAX: f64 = 0.1;
/// Once the temperature is down to this value samples are hard one-hot
/// (straight-through).
pub const HARD_FROM_TAU: f64 = 0.25;

/// Reference schedule lengths for a 150K-step run; shorter runs keep the
/// same proportions.
pub const REFERENCE_TOTAL: u64 = 150_000;
pub const REFERENCE_TAU_DECAY: u64 = 100_000;
pub const REFERENCE_BETA_ZERO: u64 = 10_000;
pub const REFERENCE_BETA_RAMP: u64 = 100_000;
pub const REFERENCE_WARMUP: u64 = 60_000;

/// Rescales a reference step count to a run of `total` steps.
pub fn rescale(reference: u64, total: u64) -> u64 {
    ((reference as f64) * (total as f64) / (REFERENCE_TOTAL as f64)).round() as u64
}

/// Gumbel-softmax temperature, linear in log-temperature from `start` to
/// `end` over `decay_steps`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl GumbelSchedule {
    pub fn for_run(total: u64) -> Self {
        GumbelSchedule {
            start: TAU_START,
            end: TAU_END,
            decay_steps: rescale(REFERENCE_TAU_DECAY, total),
        }
    }

    pub fn tau(&self, step: u64) -> f64 {
        if step == 0 {
            return self.start;
        }
        if step >= self.decay_steps {
            return self.end;
        }
        let f = step as f64 / self.decay_steps as f64;
        (self.start.ln() + f * (self.end.ln() - self.start.ln())).exp()
    }
}

/// KL weight: zero for `zero_steps`, then linear up to `max` across
/// `ramp_steps`, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaSchedule {
    pub zero_steps: u64,
    pub ramp_steps: u64,
    pub max: f64,
}

impl BetaSchedule {
    pub fn for_run(total: u64) -> Self {
        BetaSchedule {
            zero_steps: rescale(REFERENCE_BETA_ZERO, total),
            ramp_steps: rescale(REFERENCE_BETA_RAMP, total),
            max: BETA_MAX,
        }
    }

    pub fn beta(&self, step: u64) -> f64 {
        if step < self.zero_steps {
            return 0.0;
        }
        let into = step - self.zero_steps;
        if into >= self.ramp_steps {
            return self.max;
        }
        self.max * into as f64 / self.ramp_steps as f64
    }
}

/// `softmax((logits + g) / tau)` with i.i.d. Gumbel noise `g` per entry,
/// along the last axis. In hard mode the forward value is the one-hot of
/// the row argmax and gradients flow through the soft sample.
pub fn gumbel_softmax<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    logits: Var,
    tau: f64,
    rng: &mut R,
    hard: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("Gumbel temperature must be positive, got {tau}")));
    }
    let shape = g.shape(logits).to_vec();
    let noise: Vec<T> = (0..g.value(logits).numel())
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            T::from_f64(-(-u.ln()).ln())
        })
        .collect();
    let n = g.constant(Tensor::new(shape.clone(), noise)?);
    let y = g.add(logits, n)?;
    let y = g.scale(y, 1.0 / tau);
    let soft = g.softmax(y, shape.len() - 1)?;
    if !hard {
        return Ok(soft);
    }
    let hard = one_hot_argmax(g.value(soft));
    g.straight_through(soft, hard)
}

/// One-hot of the argmax of each row (first index on ties).
pub fn one_hot_argmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let w = *x.shape().last().unwrap();
    let mut data = vec![T::zero(); x.numel()];
    for (r, row) in x.data().chunks(w).enumerate() {
        data[r * w + argmax(row)] = T::one();
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean over rows of `KL(softmax(row) ‖ uniform)`, recorded on the tape.
pub fn kl_to_uniform<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let (rows, v) = (shape[0], shape[1]);
    let ls = g.log_softmax(logits, 1)?;
    let p = g.exp(ls);
    let plogp = g.mul(p, ls)?;
    let s = g.sum(plogp);
    let s = g.scale(s, 1.0 / rows as f64);
    let log_v = g.constant(Tensor::scalar(T::from_f64((v as f64).ln())));
    g.add(s, log_v)
}

/// The same quantity evaluated in `f64` from raw logits, pinned to
/// `[0, log V]` only when it strays by rounding error.
pub fn kl_to_uniform_f64<T: Real>(logits: &Tensor<T>) -> f64 {
    let v = *logits.shape().last().unwrap();
    let log_v = (v as f64).ln();
    let mut total = 0.0;
    let rows = logits.numel() / v;
    for row in logits.data().chunks(v) {
        let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x.as_f64() - m).exp()).sum();
        let lz = z.ln();
        let neg_h: f64 = row
            .iter()
            .map(|x| {
                let l = x.as_f64() - m - lz;
                l.exp() * l
            })
            .sum();
        total += log_v + neg_h;
    }
    let kl = total / rows as f64;
    const ROUNDING: f64 = 1e-9;
    if kl < 0.0 && kl > -ROUNDING {
        0.0
    } else if kl > log_v && kl < log_v + ROUNDING {
        log_v
    } else {
        kl
    }
}
