use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::{FoundationConfig, PosMode, PromptKind, StackConfig};
use crate::distill::{MaskConfig, MaskStrategy, Metric, MpmTrainConfig, Objective, StudentConfig, Target};
use crate::dvae::{DvaeConfig, DvaeTrainConfig, TuningMode};
use crate::error::{Error, Result};
use crate::geometry::{Augmentation, Rotation};

/// `[section]` headers followed by `key = value` lines; `#` starts a
/// comment anywhere on a line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut current: Option<String> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = n + 1;
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| Error::Config(format!("line {at}: malformed section header {line:?}")))?;
                raw.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {at}: expected key = value, got {line:?}")))?;
            let section = current
                .as_ref()
                .ok_or_else(|| Error::Config(format!("line {at}: key outside any section")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {at}: empty key")));
            }
            let keys = raw.sections.get_mut(section).expect("section was created");
            if keys.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {at}: duplicate key {section}.{k}")));
            }
        }
        Ok(raw)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }
}

/// Typed reads from a [`RawConfig`] that remember what was read, so that
/// leftovers can be reported as unknown keys.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: Vec<(String, String)>,
}

impl<'a> Reader<'a> {
    fn value<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T> {
        Ok(self.optional(section, key)?.unwrap_or(default))
    }

    fn optional<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>> {
        self.used.push((section.to_string(), key.to_string()));
        match self.raw.get(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{section}.{key}: cannot parse {v:?}"))),
        }
    }

    fn with<T>(&mut self, section: &str, key: &str, default: T, parse: fn(&str) -> Result<T>) -> Result<T> {
        self.used.push((section.to_string(), key.to_string()));
        match self.raw.get(section, key) {
            None => Ok(default),
            Some(v) => parse(v).map_err(|e| Error::Config(format!("{section}.{key}: {e}"))),
        }
    }

    fn finish(self) -> Result<()> {
        for (s, keys) in &self.raw.sections {
            for k in keys.keys() {
                if !self.used.iter().any(|(us, uk)| us == s && uk == k) {
                    return Err(Error::Config(format!("unknown key {s}.{k}")));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_augmentation(s: &str) -> Result<Augmentation> {
    match s {
        "none" => Ok(Augmentation::None),
        "scale-translate" => Ok(Augmentation::ScaleTranslate),
        "rotate-z" => Ok(Augmentation::Rotate(Rotation::ZAxis)),
        "rotate" => Ok(Augmentation::Rotate(Rotation::Full)),
        _ => Err(Error::Config(format!("unknown augmentation {s:?}"))),
    }
}

pub fn augmentation_name(a: Augmentation) -> &'static str {
    match a {
        Augmentation::None => "none",
        Augmentation::ScaleTranslate => "scale-translate",
        Augmentation::Rotate(Rotation::ZAxis) => "rotate-z",
        Augmentation::Rotate(Rotation::Full) => "rotate",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    /// A linear head on frozen features.
    Linear,
    /// A three-layer MLP head with dropout on frozen features.
    Mlp3,
    /// Head and encoder trained together.
    Full,
}

impl ProbeKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" | "mlp-linear" => Ok(ProbeKind::Linear),
            "mlp-3" => Ok(ProbeKind::Mlp3),
            "full" => Ok(ProbeKind::Full),
            _ => Err(Error::Config(format!("unknown probe protocol {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "mlp-linear",
            ProbeKind::Mlp3 => "mlp-3",
            ProbeKind::Full => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeProtocol {
    pub kind: ProbeKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
}

impl Default for ProbeProtocol {
    fn default() -> Self {
        ProbeProtocol {
            kind: ProbeKind::Linear,
            epochs: 60,
            lr: 1e-2,
            batch: 32,
            weight_decay: 0.0,
        }
    }
}

impl ProbeProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("degenerate probe protocol {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub n_per_class: usize,
    pub points: usize,
    /// Pose randomization baked into the generated clouds.
    pub pose: Augmentation,
}

/// Everything a command needs, with defaults for whatever a file omits.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub foundation: FoundationConfig,
    /// Transformer weights to import instead of pretraining the surrogate.
    pub foundation_weights: Option<PathBuf>,
    pub dvae: DvaeConfig,
    pub dvae_train: DvaeTrainConfig,
    pub teacher: Option<PathBuf>,
    pub student: StudentConfig,
    pub mpm_train: MpmTrainConfig,
    pub probe_checkpoint: Option<PathBuf>,
    pub probe: ProbeProtocol,
    pub eval_checkpoint: Option<PathBuf>,
    /// Score the ground truth against itself instead of a reconstruction.
    pub eval_identity: bool,
    pub export_checkpoint: Option<PathBuf>,
    pub export_split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_raw(&RawConfig::default()).expect("defaults are valid")
    }
}

fn path(s: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(s))
}

fn objective(target: Target, metric: Option<Metric>, aux: Option<f64>) -> Objective {
    match aux {
        Some(lambda) => Objective::AuxKd { lambda },
        None => Objective::Masked {
            target,
            metric: metric.unwrap_or(target.metric()),
        },
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        RunConfig::from_raw(&RawConfig::parse(text)?)
    }

    pub fn load(p: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        RunConfig::parse(&text)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader { raw, used: Vec::new() };
        let seed = r.value("run", "seed", 0u64)?;
        let out = r.with("run", "out", PathBuf::from("runs"), path)?;
        let data = DataConfig {
            dir: r.with("data", "dir", PathBuf::from("data"), path)?,
            n_per_class: r.value("data", "n_per_class", 64)?,
            points: r.value("data", "points", 256)?,
            pose: r.with("data", "pose", Augmentation::None, parse_augmentation)?,
        };

        let stack = StackConfig::new(
            r.value("model", "width", 96)?,
            r.value("model", "depth", 6)?,
            r.value("model", "heads", 4)?,
        );
        let n_groups = r.value("model", "n_groups", 16)?;
        let group_size = r.value("model", "group_size", 16)?;
        let fd = FoundationConfig::default();
        let foundation = FoundationConfig {
            stack,
            steps: r.value("foundation", "steps", fd.steps)?,
            batch: r.value("foundation", "batch", fd.batch)?,
            lr: r.value("foundation", "lr", fd.lr)?,
            seed: r.value("foundation", "seed", fd.seed)?,
        };
        let foundation_weights = r.optional::<String>("foundation", "weights")?.map(PathBuf::from);

        let dd = DvaeConfig::default();
        let dvae = DvaeConfig {
            stack,
            tuning: r.with("dvae", "tuning", dd.tuning, TuningMode::parse)?,
            prompt_kind: r.with("dvae", "prompt_kind", dd.prompt_kind, PromptKind::parse)?,
            prompt_count: r.value("dvae", "prompt_count", dd.prompt_count)?,
            vocab: r.value("dvae", "vocab", dd.vocab)?,
            grid: r.value("dvae", "grid", dd.grid)?,
            decoder_hidden: r.value("dvae", "decoder_hidden", dd.decoder_hidden)?,
            edge_k: r.value("dvae", "edge_k", dd.edge_k)?,
            pos_mode: r.with("model", "pos_mode", dd.pos_mode, PosMode::parse)?,
            n_groups,
            group_size,
        };
        let dt = DvaeTrainConfig::default();
        let dvae_train = DvaeTrainConfig {
            steps: r.value("dvae", "steps", dt.steps)?,
            batch: r.value("dvae", "batch", dt.batch)?,
            lr: r.value("dvae", "lr", dt.lr)?,
            weight_decay: r.value("dvae", "weight_decay", dt.weight_decay)?,
            warmup: r.optional("dvae", "warmup")?,
            eval_every: r.value("dvae", "eval_every", dt.eval_every)?,
            eval_samples: r.value("dvae", "eval_samples", dt.eval_samples)?,
            augmentation: r.with("dvae", "augmentation", dt.augmentation, parse_augmentation)?,
            seed,
        };

        let teacher = r.optional::<String>("mpm", "teacher")?.map(PathBuf::from);
        let sd = StudentConfig::default();
        let target = r.with("mpm", "target", Target::Feature, Target::parse)?;
        let metric = match r.optional::<String>("mpm", "metric")? {
            Some(m) => Some(Metric::parse(&m).map_err(|e| Error::Config(format!("mpm.metric: {e}")))?),
            None => None,
        };
        let aux = r.optional::<f64>("mpm", "lambda_kd")?;
        let student = StudentConfig {
            encoder: StackConfig {
                drop_path: r.value("mpm", "drop_path", sd.encoder.drop_path)?,
                ..StackConfig::new(
                    r.value("mpm", "width", sd.encoder.width)?,
                    r.value("mpm", "depth", sd.encoder.depth)?,
                    r.value("mpm", "heads", sd.encoder.heads)?,
                )
            },
            decoder_depth: r.value("mpm", "decoder_depth", sd.decoder_depth)?,
            pos_mode: r.with("mpm", "pos_mode", sd.pos_mode, PosMode::parse)?,
            n_groups,
            group_size,
            teacher_width: stack.width,
            vocab: dvae.vocab,
            objective: objective(target, metric, aux),
        };
        let mt = MpmTrainConfig::default();
        let mpm_train = MpmTrainConfig {
            steps: r.value("mpm", "steps", mt.steps)?,
            batch: r.value("mpm", "batch", mt.batch)?,
            lr: r.value("mpm", "lr", mt.lr)?,
            weight_decay: r.value("mpm", "weight_decay", mt.weight_decay)?,
            warmup: r.optional("mpm", "warmup")?,
            mask: MaskConfig {
                strategy: r.with("mpm", "mask_strategy", mt.mask.strategy, MaskStrategy::parse)?,
                ratio: r.value("mpm", "mask_ratio", mt.mask.ratio)?,
            },
            normalize_targets: r.value("mpm", "normalize_targets", mt.normalize_targets)?,
            augmentation: r.with("mpm", "augmentation", mt.augmentation, parse_augmentation)?,
            seed,
        };

        let pd = ProbeProtocol::default();
        let probe_checkpoint = r.optional::<String>("probe", "checkpoint")?.map(PathBuf::from);
        let probe = ProbeProtocol {
            kind: r.with("probe", "protocol", pd.kind, ProbeKind::parse)?,
            epochs: r.value("probe", "epochs", pd.epochs)?,
            lr: r.value("probe", "lr", pd.lr)?,
            batch: r.value("probe", "batch", pd.batch)?,
            weight_decay: r.value("probe", "weight_decay", pd.weight_decay)?,
        };
        let eval_checkpoint = r.optional::<String>("eval", "checkpoint")?.map(PathBuf::from);
        let eval_identity = r.value("eval", "identity", false)?;
        let export_checkpoint = r.optional::<String>("export", "checkpoint")?.map(PathBuf::from);
        let export_split = r.value("export", "split", "test".to_string())?;
        r.finish()?;

        let cfg = RunConfig {
            seed,
            out,
            data,
            foundation,
            foundation_weights,
            dvae,
            dvae_train,
            teacher,
            student,
            mpm_train,
            probe_checkpoint,
            probe,
            eval_checkpoint,
            eval_identity,
            export_checkpoint,
            export_split,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides the run seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dvae_train.seed = seed;
        self.mpm_train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.n_per_class == 0 || self.data.points < 8 {
            return Err(Error::Config(format!(
                "dataset needs at least one cloud per class and 8 points, got {} and {}",
                self.data.n_per_class, self.data.points
            )));
        }
        if self.dvae.n_groups > self.data.points || self.dvae.group_size > self.data.points {
            return Err(Error::Config(format!(
                "{} groups of {} cannot be drawn from {} points",
                self.dvae.n_groups, self.dvae.group_size, self.data.points
            )));
        }
        if !matches!(self.export_split.as_str(), "train" | "val" | "test") {
            return Err(Error::Config(format!("unknown split {:?}", self.export_split)));
        }
        self.dvae.validate()?;
        self.dvae_train.validate()?;
        self.student.validate()?;
        self.mpm_train.validate()?;
        self.probe.validate()
    }

    /// Every field in a fixed order and format. Two configs have the same
    /// canonical text exactly when they describe the same run.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut section = |name: &str, kv: Vec<(&str, String)>| {
            s.push_str(&format!("[{name}]\n"));
            for (k, v) in kv {
                s.push_str(&format!("{k} = {v}\n"));
            }
        };
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        section("run", vec![("seed", self.seed.to_string()), ("out", self.out.display().to_string())]);
        section(
            "data",
            vec![
                ("dir", self.data.dir.display().to_string()),
                ("n_per_class", self.data.n_per_class.to_string()),
                ("points", self.data.points.to_string()),
                ("pose", augmentation_name(self.data.pose).to_string()),
            ],
        );
        let d = &self.dvae;
        section(
            "model",
            vec![
                ("width", d.stack.width.to_string()),
                ("depth", d.stack.depth.to_string()),
                ("heads", d.stack.heads.to_string()),
                ("pos_mode", d.pos_mode.name().to_string()),
                ("n_groups", d.n_groups.to_string()),
                ("group_size", d.group_size.to_string()),
            ],
        );
        let f = &self.foundation;
        let mut fkv = vec![
            ("steps", f.steps.to_string()),
            ("batch", f.batch.to_string()),
            ("lr", f.lr.to_string()),
            ("seed", f.seed.to_string()),
        ];
        if let Some(w) = opt_path(&self.foundation_weights) {
            fkv.push(("weights", w));
        }
        section("foundation", fkv);
        let t = &self.dvae_train;
        let mut dkv = vec![
            ("tuning", d.tuning.name().to_string()),
            ("prompt_kind", d.prompt_kind.name().to_string()),
            ("prompt_count", d.prompt_count.to_string()),
            ("vocab", d.vocab.to_string()),
            ("grid", d.grid.to_string()),
            ("decoder_hidden", d.decoder_hidden.to_string()),
            ("edge_k", d.edge_k.to_string()),
            ("steps", t.steps.to_string()),
            ("batch", t.batch.to_string()),
            ("lr", t.lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("eval_samples", t.eval_samples.to_string()),
            ("augmentation", augmentation_name(t.augmentation).to_string()),
        ];
        if let Some(w) = t.warmup {
            dkv.push(("warmup", w.to_string()));
        }
        section("dvae", dkv);
        let st = &self.student;
        let m = &self.mpm_train;
        let mut mkv = vec![
            ("width", st.encoder.width.to_string()),
            ("depth", st.encoder.depth.to_string()),
            ("heads", st.encoder.heads.to_string()),
            ("drop_path", st.encoder.drop_path.to_string()),
            ("decoder_depth", st.decoder_depth.to_string()),
            ("pos_mode", st.pos_mode.name().to_string()),
        ];
        match st.objective {
            Objective::Masked { target, metric } => {
                mkv.push(("target", target.name().to_string()));
                mkv.push(("metric", metric.name().to_string()));
            }
            Objective::AuxKd { lambda } => mkv.push(("lambda_kd", lambda.to_string())),
        }
        mkv.extend([
            ("mask_strategy", m.mask.strategy.name().to_string()),
            ("mask_ratio", m.mask.ratio.to_string()),
            ("normalize_targets", m.normalize_targets.to_string()),
            ("steps", m.steps.to_string()),
            ("batch", m.batch.to_string()),
            ("lr", m.lr.to_string()),
            ("weight_decay", m.weight_decay.to_string()),
            ("augmentation", augmentation_name(m.augmentation).to_string()),
        ]);
        if let Some(w) = m.warmup {
            mkv.push(("warmup", w.to_string()));
        }
        if let Some(p) = opt_path(&self.teacher) {
            mkv.push(("teacher", p));
        }
        section("mpm", mkv);
        let p = &self.probe;
        let mut pkv = vec![
            ("protocol", p.kind.name().to_string()),
            ("epochs", p.epochs.to_string()),
            ("lr", p.lr.to_string()),
            ("batch", p.batch.to_string()),
            ("weight_decay", p.weight_decay.to_string()),
        ];
        if let Some(c) = opt_path(&self.probe_checkpoint) {
            pkv.push(("checkpoint", c));
        }
        section("probe", pkv);
        let mut ekv = vec![("identity", self.eval_identity.to_string())];
        if let Some(c) = opt_path(&self.eval_checkpoint) {
            ekv.push(("checkpoint", c));
        }
        section("eval", ekv);
        let mut xkv = vec![("split", self.export_split.clone())];
        if let Some(c) = opt_path(&self.export_checkpoint) {
            xkv.push(("checkpoint", c));
        }
        section("export", xkv);
        s
    }

    /// Hex SHA-256 of [`RunConfig::canonical`].
    pub fn digest(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
