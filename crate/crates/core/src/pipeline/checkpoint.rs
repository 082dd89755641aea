use std::path::Path;

use crate::autograd::{AdamW, Moments, ParamStore};
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 8] = b"ACTCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// A serialized parameter store with run metadata.
///
/// Layout, all integers little-endian and strings as a `u32` byte length
/// followed by UTF-8:
///
/// ```text
/// magic "ACTCKPT1" | version u32 | kind | step u64 | rng u64 | digest | config
/// count u32 | count × (name | rank u32 | dims u32… | dtype u8 | frozen u8 | f32…)
/// has_optimizer u8 | [beta1 beta2 eps decay f32 | step u64 | count u32 |
///                     count × (name | len u64 | m f32… | v f32…)]
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the store holds (`dvae`, `student`, `foundation`).
    pub kind: String,
    pub step: u64,
    /// Generator state to resume from; runs here record their seed.
    pub rng: u64,
    pub digest: String,
    /// Canonical config text of the producing run.
    pub config: String,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &'static str) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn str(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn new(kind: &str, params: ParamStore) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            step: 0,
            rng: 0,
            digest: String::new(),
            config: String::new(),
            params,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::with_capacity(self.params.num_values() * 4 + 1024));
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.kind);
        w.u64(self.step);
        w.u64(self.rng);
        w.str(&self.digest);
        w.str(&self.config);
        w.u32(self.params.len() as u32);
        for (name, p) in self.params.iter() {
            w.str(name);
            w.u32(p.shape.len() as u32);
            for &d in &p.shape {
                w.u32(d as u32);
            }
            w.u8(DTYPE_F32);
            w.u8(p.frozen as u8);
            w.f32s(&p.data);
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.f32s(&[opt.beta1, opt.beta2, opt.eps, opt.weight_decay]);
                w.u64(opt.step);
                w.u32(opt.moments.len() as u32);
                for (name, m) in &opt.moments {
                    w.str(name);
                    w.u64(m.m.len() as u64);
                    w.f32s(&m.m);
                    w.f32s(&m.v);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let kind = r.str("kind")?;
        let step = r.u64("step")?;
        let rng = r.u64("rng state")?;
        let digest = r.str("digest")?;
        let config = r.str("config")?;
        let count = r.u32("entry count")?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.str("entry name")?;
            let rank = r.u32("entry rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32("entry shape")? as usize);
            }
            if r.u8("entry dtype")? != DTYPE_F32 {
                return Err(CheckpointError::Malformed(format!("{name}: unsupported dtype")).into());
            }
            let frozen = match r.u8("entry flags")? {
                0 => false,
                1 => true,
                f => return Err(CheckpointError::Malformed(format!("{name}: bad frozen flag {f}")).into()),
            };
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: bad shape {shape:?}")))?;
            let data = r.f32s(n, "entry data")?;
            params
                .insert(name.clone(), shape, data)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            params.get_mut(&name).unwrap().frozen = frozen;
        }
        let optimizer = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let mut opt = AdamW::new(0.0);
                opt.beta1 = r.f32("optimizer")?;
                opt.beta2 = r.f32("optimizer")?;
                opt.eps = r.f32("optimizer")?;
                opt.weight_decay = r.f32("optimizer")?;
                opt.step = r.u64("optimizer step")?;
                for _ in 0..r.u32("moment count")? {
                    let name = r.str("moment name")?;
                    let n = r.u64("moment length")? as usize;
                    let m = r.f32s(n, "moments")?;
                    let v = r.f32s(n, "moments")?;
                    opt.moments.insert(name, Moments { m, v });
                }
                Some(opt)
            }
            f => return Err(CheckpointError::Malformed(format!("bad optimizer flag {f}")).into()),
        };
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)).into());
        }
        Ok(Checkpoint {
            kind,
            step,
            rng,
            digest,
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Copies every tensor into `store`, whose names and shapes must match
    /// exactly. Frozen flags of `store` are kept.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        load_params(&self.params, store)
    }
}

/// Copies `src` into `dst` after checking that both hold the same names
/// with the same shapes.
pub fn load_params(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    let mut offenders: Vec<String> = src.names().filter(|n| !dst.contains(n)).map(String::from).collect();
    offenders.extend(dst.names().filter(|n| !src.contains(n)).map(String::from));
    if !offenders.is_empty() {
        return Err(CheckpointError::NameMismatch { offenders }.into());
    }
    let bad: Vec<String> = src
        .iter()
        .filter(|(n, p)| dst.get(n).is_some_and(|d| d.shape != p.shape))
        .map(|(n, p)| format!("{n} ({:?} vs {:?})", p.shape, dst.get(n).unwrap().shape))
        .collect();
    if !bad.is_empty() {
        return Err(CheckpointError::ShapeMismatch { offenders: bad }.into());
    }
    for (n, p) in src.iter() {
        dst.get_mut(n).unwrap().data.clone_from(&p.data);
    }
    Ok(())
}
